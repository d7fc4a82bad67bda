//! Attention kernels with exact multiply counters.
//!
//! * [`full_attention`]: `softmax(QKᵀ/√d)·V`, optionally causal.
//! * [`sparsity_measure`] + [`top_u_select`]: score each query by
//!   max-minus-mean of its scaled dot products against a seeded key sample
//!   and keep the `u` highest.
//! * [`prob_sparse_attention`]: exact attention for the selected queries,
//!   a default row for the rest. With `reuse` indices the measurement is
//!   skipped entirely.
//! * [`efficient_attention`]: `(softmax_d(K)·Vᵀ)ᵀ·softmax_dq(Q)`, linear in
//!   the token count `d`.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// `u = ceil(u_factor · ln L_Q)`, clamped to `[1, L_Q]`.
    pub u_factor: f64,
    /// Key sample size `ceil(sample_factor · ln L_K)`, clamped to `[1, L_K]`.
    pub sample_factor: f64,
    pub causal: bool,
    pub seed: u64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            u_factor: 5.0,
            sample_factor: 5.0,
            causal: false,
            seed: 0,
        }
    }
}

fn log_count(factor: f64, len: usize) -> usize {
    let raw = (factor * (len as f64).ln()).ceil();
    if raw.is_nan() || raw < 1.0 {
        1
    } else {
        (raw as usize).min(len)
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.u_factor > 0.0 && self.sample_factor > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "u_factor and sample_factor must be positive, got {} and {}",
                self.u_factor, self.sample_factor
            )));
        }
        Ok(())
    }

    /// Number of active queries for a length-`l_q` query set.
    pub fn top_u(&self, l_q: usize) -> usize {
        log_count(self.u_factor, l_q)
    }

    /// Number of keys sampled for the measurement.
    pub fn sample_size(&self, l_k: usize) -> usize {
        log_count(self.sample_factor, l_k)
    }
}

/// Multiply counts of attention kernels.
///
/// `measurement_dot_products` and `attention_dot_products` count scalar
/// multiplies spent on query-key products (`rows · keys · d`);
/// `multiplies_total` additionally includes the value mix and the
/// efficient-attention products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub measurement_dot_products: u64,
    pub attention_dot_products: u64,
    pub multiplies_total: u64,
}

impl OpCounters {
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn merge(&mut self, other: &OpCounters) {
        self.measurement_dot_products += other.measurement_dot_products;
        self.attention_dot_products += other.attention_dot_products;
        self.multiplies_total += other.multiplies_total;
    }
}

struct AttnDims {
    l_q: usize,
    l_k: usize,
    d: usize,
    d_v: usize,
}

fn check_dims(g: &Graph, q: Var, k: Var, v: Var, causal: bool) -> Result<AttnDims> {
    let (l_q, d) = g.value(q).dims2("attention")?;
    let (l_k, dk) = g.value(k).dims2("attention")?;
    let (l_v, d_v) = g.value(v).dims2("attention")?;
    if d != dk {
        return Err(Error::Shape {
            op: "attention(Q, K)",
            left: vec![l_q, d],
            right: vec![l_k, dk],
        });
    }
    if l_v != l_k {
        return Err(Error::Shape {
            op: "attention(K, V)",
            left: vec![l_k, dk],
            right: vec![l_v, d_v],
        });
    }
    if causal && l_q != l_k {
        return Err(Error::Shape {
            op: "causal attention needs L_Q == L_K",
            left: vec![l_q, d],
            right: vec![l_k, dk],
        });
    }
    Ok(AttnDims { l_q, l_k, d, d_v })
}

/// `softmax(rows·Kᵀ/√d)·V` where `positions[r]` is the query position of
/// row `r` (used only for the causal mask).
fn attend_rows(
    g: &mut Graph,
    rows: Var,
    positions: &[usize],
    k: Var,
    v: Var,
    d: usize,
    causal: bool,
) -> Result<Var> {
    let kt = g.transpose(k)?;
    let raw = g.matmul(rows, kt)?;
    let mut scores = g.scale(raw, 1.0 / (d as f64).sqrt());
    if causal {
        scores = g.causal_mask(scores, positions)?;
    }
    let weights = g.softmax(scores, 1)?;
    g.matmul(weights, v)
}

/// Canonical scaled dot-product attention.
pub fn full_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    causal: bool,
    counters: &mut OpCounters,
) -> Result<Var> {
    let dims = check_dims(g, q, k, v, causal)?;
    let positions: Vec<usize> = (0..dims.l_q).collect();
    let out = attend_rows(g, q, &positions, k, v, dims.d, causal)?;
    let score = (dims.l_q * dims.l_k * dims.d) as u64;
    counters.attention_dot_products += score;
    counters.multiplies_total += score + (dims.l_q * dims.l_k * dims.d_v) as u64;
    Ok(out)
}

/// Seeded sample of `size` distinct key rows out of `l_k`, ascending.
pub fn sample_keys(l_k: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, l_k, size.min(l_k)).into_vec();
    picked.sort_unstable();
    picked
}

/// `M(q_i) = max_j s_ij − mean_j s_ij` with `s_ij = q_i·k_j/√d` over the
/// rows of `k_sampled`.
pub fn sparsity_measure(
    q: &Tensor,
    k_sampled: &Tensor,
    counters: &mut OpCounters,
) -> Result<Vec<f64>> {
    let (l_q, d) = q.dims2("sparsity_measure")?;
    let (n_k, dk) = k_sampled.dims2("sparsity_measure")?;
    if d != dk {
        return Err(Error::Shape {
            op: "sparsity_measure",
            left: vec![l_q, d],
            right: vec![n_k, dk],
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores = (0..l_q)
        .map(|i| {
            let qi = q.row(i);
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for j in 0..n_k {
                let s = qi
                    .iter()
                    .zip(k_sampled.row(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale;
                max = max.max(s);
                sum += s;
            }
            // max >= mean in exact arithmetic; clamp rounding noise.
            (max - sum / n_k as f64).max(0.0)
        })
        .collect();
    let work = (l_q * n_k * d) as u64;
    counters.measurement_dot_products += work;
    counters.multiplies_total += work;
    Ok(scores)
}

/// Indices of the `u` largest scores, ties to the lower index, ascending.
pub fn top_u_select(scores: &[f64], u: usize) -> Result<Vec<usize>> {
    if u == 0 || u > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "top_u_select: u = {u} outside [1, {}]",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(u);
    order.sort_unstable();
    Ok(order)
}

fn validate_reuse(reuse: &[usize], l_q: usize) -> Result<Vec<usize>> {
    if reuse.is_empty() {
        return Err(Error::MalformedIndices("reuse index set is empty".into()));
    }
    let mut sorted = reuse.to_vec();
    sorted.sort_unstable();
    if let Some(&bad) = sorted.iter().find(|&&i| i >= l_q) {
        return Err(Error::MalformedIndices(format!(
            "reuse index {bad} out of range for L_Q = {l_q}"
        )));
    }
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::MalformedIndices(format!(
            "reuse indices contain duplicates: {reuse:?}"
        )));
    }
    Ok(sorted)
}

/// Sparse attention over the top-u queries.
///
/// Without `reuse`, keys are sampled with `cfg.seed`, queries are scored by
/// [`sparsity_measure`] and the top `cfg.top_u(L_Q)` are kept. With `reuse`
/// those indices are used as-is and no measurement work is done. Selected
/// queries attend to all keys; the other rows are filled with the column
/// mean of `V` (non-causal) or the running mean `V[0..=i]` (causal).
///
/// Returns the output and the query indices that were active.
pub fn prob_sparse_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
    reuse: Option<&[usize]>,
    counters: &mut OpCounters,
) -> Result<(Var, Vec<usize>)> {
    cfg.validate()?;
    let dims = check_dims(g, q, k, v, cfg.causal)?;
    let active = match reuse {
        Some(ix) => validate_reuse(ix, dims.l_q)?,
        None => {
            let picked = sample_keys(dims.l_k, cfg.sample_size(dims.l_k), cfg.seed);
            let kv = g.value(k);
            let mut sampled = Vec::with_capacity(picked.len() * dims.d);
            for &j in &picked {
                sampled.extend_from_slice(kv.row(j));
            }
            let sampled = Tensor::new(vec![picked.len(), dims.d], sampled)?;
            let scores = sparsity_measure(g.value(q), &sampled, counters)?;
            top_u_select(&scores, cfg.top_u(dims.l_q))?
        }
    };

    let q_hat = g.gather_rows(q, &active)?;
    let rows = attend_rows(g, q_hat, &active, k, v, dims.d, cfg.causal)?;
    let fill = if cfg.causal {
        g.cumulative_mean(v)?
    } else {
        g.column_mean(v, dims.l_q)?
    };
    let out = g.scatter_rows(fill, Some(rows), &active)?;

    let u = active.len();
    let score = (u * dims.l_k * dims.d) as u64;
    counters.attention_dot_products += score;
    counters.multiplies_total += score + (u * dims.l_k * dims.d_v) as u64;
    Ok((out, active))
}

/// `E(Q, K, V) = (softmax_d(K)·Vᵀ)ᵀ·softmax_dq(Q)` with `Q: d_q×d`,
/// `K: d_k×d`, `V: d_v×d` and `d_q == d_k`. Output is `d_v×d`. No `d×d`
/// buffer is formed.
pub fn efficient_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    counters: &mut OpCounters,
) -> Result<Var> {
    let (d_q, d) = g.value(q).dims2("efficient_attention")?;
    let (d_k, dk) = g.value(k).dims2("efficient_attention")?;
    let (d_v, dv) = g.value(v).dims2("efficient_attention")?;
    if d_q != d_k || dk != d {
        return Err(Error::Shape {
            op: "efficient_attention(Q, K)",
            left: vec![d_q, d],
            right: vec![d_k, dk],
        });
    }
    if dv != d {
        return Err(Error::Shape {
            op: "efficient_attention(K, V)",
            left: vec![d_k, dk],
            right: vec![d_v, dv],
        });
    }
    let k_norm = g.softmax(k, 1)?;
    let q_norm = g.softmax(q, 0)?;
    let vt = g.transpose(v)?;
    let context = g.matmul(k_norm, vt)?; // d_k × d_v
    let context_t = g.transpose(context)?;
    let out = g.matmul(context_t, q_norm)?; // d_v × d
    counters.multiplies_total += (2 * d_k * d_v * d) as u64;
    Ok(out)
}
