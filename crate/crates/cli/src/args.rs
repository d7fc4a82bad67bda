//! Command grammar. The settings flags are generated from the core key
//! table so the CLI and config files accept exactly the same names.

use std::path::PathBuf;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use lstf_core::config::KEYS;

pub const RUN_ROOT_ENV: &str = "LSTF_RUN_ROOT";

fn settings_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("key=value overrides, one per line; flags take precedence"),
    );
    KEYS.iter().fold(cmd, |cmd, &(key, help)| {
        cmd.arg(
            Arg::new(key)
                .long(key)
                .value_name("VALUE")
                .help(help)
                .help_heading("Settings"),
        )
    })
}

fn checkpoint_args(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("checkpoint")
            .long("checkpoint")
            .required(true)
            .value_name("PATH")
            .value_parser(value_parser!(PathBuf))
            .help("checkpoint file, or a run directory holding ckpt.json"),
    )
    .arg(
        Arg::new("data")
            .long("data")
            .value_name("CSV")
            .value_parser(value_parser!(PathBuf))
            .help("data file; defaults to the one the checkpoint was trained on"),
    )
    .arg(
        Arg::new("split")
            .long("split")
            .default_value("test")
            .value_parser(["train", "val", "test"]),
    )
    .arg(
        Arg::new("out")
            .long("out")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("also write the JSON report here"),
    )
}

fn data_args(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("forward_fill")
            .long("forward-fill")
            .action(ArgAction::SetTrue)
            .help("fill empty cells with the previous row's value"),
    )
}

pub fn command() -> Command {
    let synth = Command::new("synth")
        .about("Write a seeded synthetic series as CSV")
        .arg(
            Arg::new("kind")
                .long("kind")
                .default_value("sine_mix")
                .value_parser(["sine_mix", "trend_season", "random_walk"]),
        )
        .arg(
            Arg::new("T")
                .long("T")
                .required(true)
                .value_parser(value_parser!(usize))
                .help("row count"),
        )
        .arg(
            Arg::new("n")
                .long("n")
                .default_value("1")
                .value_parser(value_parser!(usize))
                .help("channel count"),
        )
        .arg(Arg::new("seed").long("seed").default_value("0").value_parser(value_parser!(u64)))
        .arg(
            Arg::new("periods")
                .long("periods")
                .value_delimiter(',')
                .value_parser(value_parser!(f64))
                .help("comma-separated sine periods in rows"),
        )
        .arg(
            Arg::new("amplitudes")
                .long("amplitudes")
                .value_delimiter(',')
                .value_parser(value_parser!(f64))
                .help("comma-separated amplitudes, one per period"),
        )
        .arg(Arg::new("noise").long("noise").value_parser(value_parser!(f64)).help("noise std"))
        .arg(
            Arg::new("step")
                .long("step")
                .value_parser(value_parser!(f64))
                .help("random-walk increment std"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .required(true)
                .value_parser(value_parser!(PathBuf)),
        );

    let train = data_args(settings_args(
        Command::new("train")
            .about("Train a model and write ckpt.json, report.json, summary.txt and curves.csv")
            .arg(
                Arg::new("data")
                    .long("data")
                    .required(true)
                    .value_name("CSV")
                    .value_parser(value_parser!(PathBuf)),
            )
            .arg(
                Arg::new("run_dir")
                    .long("run-dir")
                    .value_name("DIR")
                    .value_parser(value_parser!(PathBuf))
                    .help(format!(
                        "artifact directory; defaults to ${RUN_ROOT_ENV}/<timestamp>-seed<seed>"
                    )),
            ),
    ));

    let eval = data_args(checkpoint_args(
        Command::new("eval").about("Score a checkpoint on one split of its data"),
    ));

    let bench = data_args(checkpoint_args(
        Command::new("bench")
            .about("Compare InformerLite prediction with fresh measurement and with index reuse"),
    ))
    .arg(
        Arg::new("max_windows")
            .long("max-windows")
            .value_parser(value_parser!(usize))
            .help("stop after this many windows"),
    );

    let report = Command::new("report")
        .about("Regenerate summary.txt and curves.csv from a run directory")
        .arg(
            Arg::new("run_dir")
                .required(true)
                .value_name("RUN_DIR")
                .value_parser(value_parser!(PathBuf)),
        );

    Command::new("lstf")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Long-horizon forecasting experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands([synth, train, eval, bench, report])
}

/// Settings flags given on the command line, in key-table order.
pub fn settings_flags(m: &ArgMatches) -> Vec<(&'static str, String)> {
    KEYS.iter()
        .filter_map(|&(key, _)| m.get_one::<String>(key).map(|v| (key, v.clone())))
        .collect()
}
