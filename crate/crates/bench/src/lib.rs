//! Inputs and kernel wrappers shared by the criterion benches.

use lstf_core::attention::{
    efficient_attention, full_attention, prob_sparse_attention, AttentionConfig, OpCounters,
};
use lstf_core::models::{InformerDims, Selection};
use lstf_core::{AttentionIndexMemory, Graph, InformerLite, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}

/// Self-attention inputs of length `l` and width `d`.
pub struct Qkv {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl Qkv {
    pub fn new(l: usize, d: usize, seed: u64) -> Self {
        Self {
            q: uniform(&[l, d], seed),
            k: uniform(&[l, d], seed + 1),
            v: uniform(&[l, d], seed + 2),
        }
    }
}

pub enum Kernel<'a> {
    Full,
    /// Measure, select and attend.
    Sparse(&'a AttentionConfig),
    /// Attend with fixed query indices.
    Reuse(&'a AttentionConfig, &'a [usize]),
}

/// One forward pass of `kernel`; returns the output and its counters.
pub fn run_kernel(x: &Qkv, kernel: &Kernel<'_>) -> Result<(Tensor, OpCounters)> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(x.q.clone()), g.constant(x.k.clone()), g.constant(x.v.clone()));
    let mut c = OpCounters::default();
    let out = match kernel {
        Kernel::Full => full_attention(&mut g, q, k, v, false, &mut c)?,
        Kernel::Sparse(cfg) => prob_sparse_attention(&mut g, q, k, v, cfg, None, &mut c)?.0,
        Kernel::Reuse(cfg, ix) => prob_sparse_attention(&mut g, q, k, v, cfg, Some(ix), &mut c)?.0,
    };
    Ok((g.value(out).clone(), c))
}

/// Efficient attention over `d` tokens with `d_k = d_v = width`.
pub fn run_efficient(width: usize, d: usize, seed: u64) -> Result<OpCounters> {
    let mut g = Graph::new();
    let q = g.constant(uniform(&[width, d], seed));
    let k = g.constant(uniform(&[width, d], seed + 1));
    let v = g.constant(uniform(&[width, d], seed + 2));
    let mut c = OpCounters::default();
    efficient_attention(&mut g, q, k, v, &mut c)?;
    Ok(c)
}

/// An untrained InformerLite with a memory frozen from one measured pass
/// over `lookback`.
pub fn informer_with_memory(dims: InformerDims, seed: u64) -> Result<(InformerLite, AttentionIndexMemory, Tensor)> {
    let model = InformerLite::new(dims, AttentionConfig::default(), seed)?;
    let lookback = uniform(&[dims.lookback, dims.channels], seed + 7);
    let (_, used) = model.predict(&lookback, Selection::Measure { seed }, &mut OpCounters::default())?;
    let mut memory = AttentionIndexMemory::default();
    for s in used {
        memory.record(s.key, s.l_q, 0, 0, &s.indices)?;
    }
    memory.freeze();
    Ok((model, memory, lookback))
}
