use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(lstf_cli::run(std::env::args_os()))
}
