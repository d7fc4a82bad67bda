use super::{project, random, rng, rel_err, FD_STEP};
use lstf_core::attention::{
    efficient_attention, full_attention, prob_sparse_attention, AttentionConfig, OpCounters,
};
use lstf_core::loss::Pointwise;
use lstf_core::models::informer::decoder_input;
use lstf_core::models::params::Bound;
use lstf_core::models::{InformerDims, MLinearDims, MappingKind, ParamStore, Selection};
use lstf_core::{AttentionIndexMemory, Graph, InformerLite, MLinear, Result, Tensor, Var};

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn away_from_zero(mut t: Tensor) -> Tensor {
    for x in t.data_mut() {
        *x = x.signum() * (0.1 + x.abs());
    }
    t
}

fn cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    let p = |seed: u64| move |g: &mut Graph, out: Var| project(g, out, seed);
    vec![
        ("matmul", vec![vec![2, 3], vec![3, 4]], Box::new(move |g, v| {
            let o = g.matmul(v[0], v[1])?;
            p(1)(g, o)
        })),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(move |g, v| {
            let o = g.add(v[0], v[1])?;
            p(2)(g, o)
        })),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(move |g, v| {
            let o = g.sub(v[0], v[1])?;
            p(3)(g, o)
        })),
        ("mul", vec![vec![3, 2], vec![3, 2]], Box::new(move |g, v| {
            let o = g.mul(v[0], v[1])?;
            p(4)(g, o)
        })),
        ("add_row", vec![vec![3, 2], vec![1, 2]], Box::new(move |g, v| {
            let o = g.add_row(v[0], v[1])?;
            p(5)(g, o)
        })),
        ("mul_row", vec![vec![3, 2], vec![1, 2]], Box::new(move |g, v| {
            let o = g.mul_row(v[0], v[1])?;
            p(6)(g, o)
        })),
        ("mul_col", vec![vec![3, 2], vec![3, 1]], Box::new(move |g, v| {
            let o = g.mul_col(v[0], v[1])?;
            p(7)(g, o)
        })),
        ("scale", vec![vec![2, 2]], Box::new(move |g, v| {
            let o = g.scale(v[0], -1.7);
            p(8)(g, o)
        })),
        ("square", vec![vec![2, 3]], Box::new(move |g, v| {
            let o = g.square(v[0]);
            p(9)(g, o)
        })),
        ("gelu", vec![vec![2, 3]], Box::new(move |g, v| {
            let o = g.gelu(v[0]);
            p(10)(g, o)
        })),
        ("mean", vec![vec![2, 3]], Box::new(move |g, v| {
            let s = g.square(v[0]);
            Ok(g.mean(s))
        })),
        ("sum", vec![vec![2, 3]], Box::new(move |g, v| {
            let s = g.square(v[0]);
            Ok(g.sum(s))
        })),
        ("concat_rows", vec![vec![1, 3], vec![2, 3]], Box::new(move |g, v| {
            let o = g.concat(&[v[0], v[1]], 0)?;
            p(11)(g, o)
        })),
        ("concat_cols", vec![vec![2, 1], vec![2, 3]], Box::new(move |g, v| {
            let o = g.concat(&[v[0], v[1]], 1)?;
            p(12)(g, o)
        })),
        ("transpose", vec![vec![2, 3]], Box::new(move |g, v| {
            let o = g.transpose(v[0])?;
            p(13)(g, o)
        })),
        ("gather_rows", vec![vec![4, 2]], Box::new(move |g, v| {
            let o = g.gather_rows(v[0], &[3, 0, 3])?;
            p(14)(g, o)
        })),
        ("scatter_rows", vec![vec![4, 2], vec![2, 2]], Box::new(move |g, v| {
            let o = g.scatter_rows(v[0], Some(v[1]), &[2, 0])?;
            p(15)(g, o)
        })),
        ("softmax_axis0", vec![vec![3, 2]], Box::new(move |g, v| {
            let o = g.softmax(v[0], 0)?;
            p(16)(g, o)
        })),
        ("softmax_axis1", vec![vec![2, 4]], Box::new(move |g, v| {
            let o = g.softmax(v[0], 1)?;
            p(17)(g, o)
        })),
        ("causal_mask", vec![vec![3, 3]], Box::new(move |g, v| {
            let m = g.causal_mask(v[0], &[0, 1, 2])?;
            let o = g.softmax(m, 1)?;
            p(18)(g, o)
        })),
        ("column_mean", vec![vec![3, 2]], Box::new(move |g, v| {
            let o = g.column_mean(v[0], 4)?;
            p(19)(g, o)
        })),
        ("cumulative_mean", vec![vec![4, 2]], Box::new(move |g, v| {
            let o = g.cumulative_mean(v[0])?;
            p(20)(g, o)
        })),
        ("m_loss", vec![vec![2, 3], vec![2, 3]], Box::new(move |g, v| {
            g.pointwise_mean(v[0], v[1], Pointwise::MLoss { sigma: 0.5 })
        })),
        ("huber", vec![vec![2, 3], vec![2, 3]], Box::new(move |g, v| {
            g.pointwise_mean(v[0], v[1], Pointwise::Huber { sigma: 0.5 })
        })),
        ("mse", vec![vec![2, 3], vec![2, 3]], Box::new(move |g, v| {
            g.pointwise_mean(v[0], v[1], Pointwise::Squared)
        })),
        ("full_attention", vec![vec![3, 2], vec![4, 2], vec![4, 3]], Box::new(move |g, v| {
            let o = full_attention(g, v[0], v[1], v[2], false, &mut OpCounters::default())?;
            p(21)(g, o)
        })),
        ("causal_attention", vec![vec![4, 2], vec![4, 2], vec![4, 2]], Box::new(move |g, v| {
            let o = full_attention(g, v[0], v[1], v[2], true, &mut OpCounters::default())?;
            p(22)(g, o)
        })),
        ("prob_sparse_attention", vec![vec![5, 2], vec![5, 2], vec![5, 3]], Box::new(move |g, v| {
            let cfg = AttentionConfig::default();
            let reuse = [1, 3];
            let (o, _) = prob_sparse_attention(g, v[0], v[1], v[2], &cfg, Some(&reuse), &mut OpCounters::default())?;
            p(23)(g, o)
        })),
        ("prob_sparse_causal", vec![vec![5, 2], vec![5, 2], vec![5, 3]], Box::new(move |g, v| {
            let cfg = AttentionConfig { causal: true, ..AttentionConfig::default() };
            let reuse = [0, 2, 4];
            let (o, _) = prob_sparse_attention(g, v[0], v[1], v[2], &cfg, Some(&reuse), &mut OpCounters::default())?;
            p(24)(g, o)
        })),
        ("efficient_attention", vec![vec![2, 5], vec![2, 5], vec![3, 5]], Box::new(move |g, v| {
            let o = efficient_attention(g, v[0], v[1], v[2], &mut OpCounters::default())?;
            p(25)(g, o)
        })),
    ]
}

/// Largest relative error over every weight of a model whose scalar loss
/// is produced by `loss`.
pub fn model_fd_err<M, F>(model: &mut M, store: fn(&mut M) -> &mut ParamStore, loss: F) -> f64
where
    F: Fn(&M, &mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = store(model).bind(&mut g);
    let l = loss(model, &mut g, &b).unwrap();
    g.backward(l).unwrap();
    let grads = store(model).grads(&g, &b);
    let eval = |m: &mut M| {
        let mut g = Graph::new();
        let b = store(m).bind(&mut g);
        let l = loss(m, &mut g, &b).unwrap();
        g.value(l).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, grad) in grads.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = store(model).tensors()[i].data()[j];
            store(model).tensors_mut()[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(model);
            store(model).tensors_mut()[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(model);
            store(model).tensors_mut()[i].data_mut()[j] = orig;
            let n = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[j], n));
        }
    }
    worst
}


/// Worst error of every operation case over `seeds`, plus `abs` evaluated
/// away from its kink.
pub fn op_errors(seeds: std::ops::Range<u64>) -> Vec<(String, u64, f64)> {
    let mut out = Vec::new();
    for (name, shapes, build) in cases() {
        for seed in seeds.clone() {
            let mut r = rng(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut r, s)).collect();
            out.push((name.to_owned(), seed, super::fd_max_err(&inputs, &build)));
        }
    }
    for seed in seeds {
        let x = away_from_zero(random(&mut rng(seed), &[2, 3]));
        let err = super::fd_max_err(&[x], |g, v| {
            let o = g.abs(v[0]);
            project(g, o, 26)
        });
        out.push(("abs".to_owned(), seed, err));
    }
    out
}

pub fn mlinear_error(mapping: MappingKind, seed: u64) -> f64 {
    let dims = MLinearDims { lookback: 8, horizon: 4, channels: 2, p_divisor: 2, mapping };
    let mut m = MLinear::new(dims, seed).unwrap();
    let x = random(&mut rng(seed + 10), &[8, 2]);
    model_fd_err(&mut m, MLinear::params_mut, |m, g, b| {
        let xv = g.constant(x.clone());
        let h = m.forward(g, b, xv, &mut OpCounters::default())?;
        let a = project(g, h.ci, 1)?;
        let c = project(g, h.cd, 2)?;
        let z = project(g, h.mix, 3)?;
        let s = g.add(a, c)?;
        g.add(s, z)
    })
}

pub fn informer_error(seed: u64) -> f64 {
    let dims = InformerDims {
        channels: 2,
        lookback: 8,
        label_len: 4,
        horizon: 4,
        d_model: 4,
        n_heads: 2,
        ff_mult: 4,
    };
    let cfg = AttentionConfig { u_factor: 1.0, ..Default::default() };
    let mut m = InformerLite::new(dims, cfg, seed).unwrap();
    let x = random(&mut rng(seed + 20), &[8, 2]);
    // Fix the active queries with one measured pass so the loss is smooth
    // in the weights.
    let mut memory = AttentionIndexMemory::default();
    let (_, used) = m
        .predict(&x, Selection::Measure { seed }, &mut OpCounters::default())
        .unwrap();
    for s in used {
        memory.record(s.key, s.l_q, 0, 0, &s.indices).unwrap();
    }
    memory.freeze();
    let dec = decoder_input(&x, 4, 4).unwrap();
    model_fd_err(&mut m, InformerLite::params_mut, |m, g, b| {
        let e = g.constant(x.clone());
        let d = g.constant(dec.clone());
        let (out, _) = m.forward(g, b, e, d, Selection::Reuse(&memory), &mut OpCounters::default())?;
        project(g, out, 4)
    })
}
