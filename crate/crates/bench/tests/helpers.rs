use lstf_bench::{informer_with_memory, run_efficient, run_kernel, Kernel, Qkv};
use lstf_core::attention::{AttentionConfig, OpCounters};
use lstf_core::models::{InformerDims, Selection};

#[test]
fn reuse_kernel_skips_measurement_and_matches_sparse() {
    let cfg = AttentionConfig::default();
    let x = Qkv::new(96, 8, 1);
    let (sparse, measured) = run_kernel(&x, &Kernel::Sparse(&cfg)).unwrap();
    let (full, full_c) = run_kernel(&x, &Kernel::Full).unwrap();
    assert!(measured.measurement_dot_products > 0);
    assert!(measured.multiplies_total < full_c.multiplies_total);
    assert_eq!(full.shape(), sparse.shape());

    let mut g = lstf_core::Graph::new();
    let (q, k, v) = (g.constant(x.q.clone()), g.constant(x.k.clone()), g.constant(x.v.clone()));
    let (_, ix) = lstf_core::attention::prob_sparse_attention(&mut g, q, k, v, &cfg, None, &mut OpCounters::default()).unwrap();
    let (reused, c) = run_kernel(&x, &Kernel::Reuse(&cfg, &ix)).unwrap();
    assert_eq!(c.measurement_dot_products, 0);
    assert_eq!(reused, sparse);
}

#[test]
fn efficient_counter_scales_with_tokens() {
    let a = run_efficient(8, 128, 0).unwrap().multiplies_total;
    let b = run_efficient(8, 256, 0).unwrap().multiplies_total;
    assert_eq!(b, 2 * a);
}

#[test]
fn frozen_memory_drives_reuse() {
    let dims = InformerDims {
        channels: 2,
        lookback: 24,
        label_len: 12,
        horizon: 6,
        d_model: 8,
        n_heads: 2,
        ff_mult: 2,
    };
    let (model, memory, lookback) = informer_with_memory(dims, 4).unwrap();
    let (a, _) = model.predict(&lookback, Selection::Measure { seed: 4 }, &mut OpCounters::default()).unwrap();
    let mut c = OpCounters::default();
    let (b, _) = model.predict(&lookback, Selection::Reuse(&memory), &mut c).unwrap();
    assert_eq!(c.measurement_dot_products, 0);
    assert_eq!(a, b);
}
