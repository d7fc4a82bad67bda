//! A small encoder/decoder forecaster with top-u sparse self-attention.
//!
//! Two encoder layers and one decoder layer carry sparse self-attention
//! (layer ids 0, 1 and 2). Each head of each of those layers is one
//! *site* in the [`AttentionIndexMemory`]. The decoder's cross-attention
//! to the encoder output is full attention.
//!
//! The decoder input follows the start-token layout: the last `label_len`
//! lookback rows followed by `horizon` zero rows; the forecast is read from
//! the last `horizon` decoder rows.

use serde::{Deserialize, Serialize};

use crate::attention::{full_attention, prob_sparse_attention, AttentionConfig, OpCounters};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::memory::{AttentionIndexMemory, SiteKey};
use crate::models::params::{Bound, ParamId, ParamStore};
use crate::rng::{derive_seed, rng_for, streams};
use crate::tensor::Tensor;

pub const ENCODER_LAYERS: usize = 2;
/// Layer id of the decoder's causal self-attention.
pub const DECODER_LAYER_ID: usize = ENCODER_LAYERS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InformerDims {
    pub channels: usize,
    pub lookback: usize,
    pub label_len: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Feed-forward hidden width is `ff_mult · d_model`.
    pub ff_mult: usize,
}

impl InformerDims {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn decoder_len(&self) -> usize {
        self.label_len + self.horizon
    }

    /// Query length seen by the sparse site on `layer`.
    pub fn site_len(&self, layer: usize) -> usize {
        if layer < ENCODER_LAYERS {
            self.lookback
        } else {
            self.decoder_len()
        }
    }

    pub fn sites(&self) -> Vec<SiteKey> {
        (0..=DECODER_LAYER_ID)
            .flat_map(|l| (0..self.n_heads).map(move |h| SiteKey::new(l, h)))
            .collect()
    }
}

/// How sparse sites pick their active queries.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    /// Sample keys with seeds derived from `seed` and measure.
    Measure { seed: u64 },
    /// Use the aggregated indices of a frozen memory.
    Reuse(&'a AttentionIndexMemory),
    /// Every site uses full attention.
    Full,
}

/// Indices one site used during a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteSelection {
    pub key: SiteKey,
    pub l_q: usize,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub enum Mode {
    /// Measure at every site and record the indices into the memory.
    Train {
        epoch: usize,
        iteration: usize,
        seed: u64,
    },
    /// Reuse the frozen memory; no measurement happens.
    Predict,
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    w_in: ParamId,
    b_in: ParamId,
    enc: Vec<(AttnIds, FfIds)>,
    dec_self: AttnIds,
    dec_cross: AttnIds,
    dec_ff: FfIds,
    w_out: ParamId,
    b_out: ParamId,
}

#[derive(Clone, Debug)]
pub struct InformerLite {
    dims: InformerDims,
    attention: AttentionConfig,
    params: ParamStore,
    ids: Ids,
}

/// Sinusoidal position table, `len × d`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10_000f64.powf(pair / d as f64);
            t.data_mut()[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// Last `label_len` lookback rows followed by `horizon` zero rows.
pub fn decoder_input(lookback: &Tensor, label_len: usize, horizon: usize) -> Result<Tensor> {
    let (l, n) = lookback.dims2("decoder_input")?;
    if label_len > l {
        return Err(Error::InvalidArgument(format!(
            "label_len {label_len} exceeds lookback {l}"
        )));
    }
    let mut data = lookback.data()[(l - label_len) * n..].to_vec();
    data.resize((label_len + horizon) * n, 0.0);
    Tensor::new(vec![label_len + horizon, n], data)
}

impl InformerLite {
    pub fn new(dims: InformerDims, attention: AttentionConfig, seed: u64) -> Result<Self> {
        if dims.n_heads == 0 || dims.d_model == 0 || dims.d_model % dims.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                dims.d_model, dims.n_heads
            )));
        }
        if dims.channels == 0 || dims.lookback == 0 || dims.horizon == 0 {
            return Err(Error::InvalidArgument(
                "InformerLite needs positive channels, lookback and horizon".into(),
            ));
        }
        if dims.label_len > dims.lookback {
            return Err(Error::InvalidArgument(format!(
                "label_len {} exceeds lookback {}",
                dims.label_len, dims.lookback
            )));
        }
        attention.validate()?;
        let mut rng = rng_for(seed, &[streams::INIT]);
        let mut p = ParamStore::new();
        let (n, d, dh) = (dims.channels, dims.d_model, dims.head_dim());
        let hidden = dims.ff_mult.max(1) * d;

        let mut attn = |p: &mut ParamStore, prefix: &str| AttnIds {
            wq: (0..dims.n_heads)
                .map(|h| p.add_uniform(format!("{prefix}.wq{h}"), &[d, dh], d, &mut rng))
                .collect(),
            wk: (0..dims.n_heads)
                .map(|h| p.add_uniform(format!("{prefix}.wk{h}"), &[d, dh], d, &mut rng))
                .collect(),
            wv: (0..dims.n_heads)
                .map(|h| p.add_uniform(format!("{prefix}.wv{h}"), &[d, dh], d, &mut rng))
                .collect(),
            wo: p.add_uniform(format!("{prefix}.wo"), &[d, d], d, &mut rng),
            bo: p.add(format!("{prefix}.bo"), Tensor::zeros(&[1, d])),
        };
        let mut ff_rng = rng_for(seed, &[streams::INIT, 1]);
        let mut ff = |p: &mut ParamStore, prefix: &str| FfIds {
            w1: p.add_uniform(format!("{prefix}.w1"), &[d, hidden], d, &mut ff_rng),
            b1: p.add(format!("{prefix}.b1"), Tensor::zeros(&[1, hidden])),
            w2: p.add_uniform(format!("{prefix}.w2"), &[hidden, d], hidden, &mut ff_rng),
            b2: p.add(format!("{prefix}.b2"), Tensor::zeros(&[1, d])),
        };

        let mut io_rng = rng_for(seed, &[streams::INIT, 2]);
        let w_in = p.add_uniform("input.w", &[n, d], n, &mut io_rng);
        let b_in = p.add("input.b", Tensor::zeros(&[1, d]));
        let enc = (0..ENCODER_LAYERS)
            .map(|l| (attn(&mut p, &format!("enc{l}.attn")), ff(&mut p, &format!("enc{l}.ff"))))
            .collect();
        let dec_self = attn(&mut p, "dec.self");
        let dec_cross = attn(&mut p, "dec.cross");
        let dec_ff = ff(&mut p, "dec.ff");
        let w_out = p.add_uniform("output.w", &[d, n], d, &mut io_rng);
        let b_out = p.add("output.b", Tensor::zeros(&[1, n]));

        Ok(Self {
            dims,
            attention,
            params: p,
            ids: Ids {
                w_in,
                b_in,
                enc,
                dec_self,
                dec_cross,
                dec_ff,
                w_out,
                b_out,
            },
        })
    }

    pub fn dims(&self) -> &InformerDims {
        &self.dims
    }

    pub fn attention_config(&self) -> &AttentionConfig {
        &self.attention
    }

    pub fn set_attention_config(&mut self, cfg: AttentionConfig) -> Result<()> {
        cfg.validate()?;
        self.attention = cfg;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn linear(&self, g: &mut Graph, b: &Bound, x: Var, w: ParamId, bias: ParamId) -> Result<Var> {
        let y = g.matmul(x, b[w])?;
        g.add_row(y, b[bias])
    }

    fn feed_forward(&self, g: &mut Graph, b: &Bound, x: Var, ids: &FfIds) -> Result<Var> {
        let h = self.linear(g, b, x, ids.w1, ids.b1)?;
        let h = g.gelu(h);
        self.linear(g, b, h, ids.w2, ids.b2)
    }

    fn embed(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let (len, n) = g.value(x).dims2("informer input")?;
        if n != self.dims.channels {
            return Err(Error::Shape {
                op: "informer input channels",
                left: vec![len, self.dims.channels],
                right: vec![len, n],
            });
        }
        let h = self.linear(g, b, x, self.ids.w_in, self.ids.b_in)?;
        let pe = g.constant(positional_encoding(len, self.dims.d_model));
        g.add(h, pe)
    }

    #[allow(clippy::too_many_arguments)]
    fn multi_head(
        &self,
        g: &mut Graph,
        b: &Bound,
        queries: Var,
        memory: Var,
        ids: &AttnIds,
        site: Option<(usize, bool)>,
        sel: Selection<'_>,
        counters: &mut OpCounters,
        out_sel: &mut Vec<SiteSelection>,
    ) -> Result<Var> {
        let mut heads = Vec::with_capacity(self.dims.n_heads);
        for h in 0..self.dims.n_heads {
            let q = g.matmul(queries, b[ids.wq[h]])?;
            let k = g.matmul(memory, b[ids.wk[h]])?;
            let v = g.matmul(memory, b[ids.wv[h]])?;
            let out = match (site, sel) {
                (None, _) => full_attention(g, q, k, v, false, counters)?,
                (Some((_, causal)), Selection::Full) => {
                    full_attention(g, q, k, v, causal, counters)?
                }
                (Some((layer, causal)), sel) => {
                    let key = SiteKey::new(layer, h);
                    let l_q = g.shape(q)[0];
                    let mut cfg = AttentionConfig {
                        causal,
                        ..self.attention
                    };
                    let reuse = match sel {
                        Selection::Reuse(mem) => {
                            let idx = mem.aggregate(key)?;
                            if mem.site_len(key) != Some(l_q) {
                                return Err(Error::MalformedIndices(format!(
                                    "{key}: memory recorded for L_Q = {:?}, input has {l_q}",
                                    mem.site_len(key)
                                )));
                            }
                            Some(idx)
                        }
                        Selection::Measure { seed } => {
                            cfg.seed = derive_seed(seed, &[streams::SAMPLING, layer as u64, h as u64]);
                            None
                        }
                        Selection::Full => unreachable!(),
                    };
                    let (out, used) =
                        prob_sparse_attention(g, q, k, v, &cfg, reuse.as_deref(), counters)?;
                    out_sel.push(SiteSelection {
                        key,
                        l_q,
                        indices: used,
                    });
                    out
                }
            };
            heads.push(out);
        }
        let cat = g.concat(&heads, 1)?;
        self.linear(g, b, cat, ids.wo, ids.bo)
    }

    /// Forward pass on one window. Returns the `horizon × channels`
    /// forecast and the indices used at every sparse site, in site order.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        enc_in: Var,
        dec_in: Var,
        sel: Selection<'_>,
        counters: &mut OpCounters,
    ) -> Result<(Var, Vec<SiteSelection>)> {
        if let Selection::Reuse(mem) = sel {
            if !mem.is_frozen() {
                return Err(Error::MemoryNotFrozen);
            }
            for key in self.dims.sites() {
                mem.aggregate(key)?;
            }
        }
        let (l, _) = g.value(enc_in).dims2("informer encoder input")?;
        let (ld, _) = g.value(dec_in).dims2("informer decoder input")?;
        if l != self.dims.lookback || ld != self.dims.decoder_len() {
            return Err(Error::Shape {
                op: "informer inputs (lookback, label_len + horizon)",
                left: vec![self.dims.lookback, self.dims.decoder_len()],
                right: vec![l, ld],
            });
        }
        let mut used = Vec::new();

        let mut x = self.embed(g, b, enc_in)?;
        for (layer, (attn, ff)) in self.ids.enc.iter().enumerate() {
            let a = self.multi_head(g, b, x, x, attn, Some((layer, false)), sel, counters, &mut used)?;
            x = g.add(x, a)?;
            let f = self.feed_forward(g, b, x, ff)?;
            x = g.add(x, f)?;
        }

        let mut y = self.embed(g, b, dec_in)?;
        let a = self.multi_head(
            g,
            b,
            y,
            y,
            &self.ids.dec_self,
            Some((DECODER_LAYER_ID, true)),
            sel,
            counters,
            &mut used,
        )?;
        y = g.add(y, a)?;
        let c = self.multi_head(g, b, y, x, &self.ids.dec_cross, None, sel, counters, &mut used)?;
        y = g.add(y, c)?;
        let f = self.feed_forward(g, b, y, &self.ids.dec_ff)?;
        y = g.add(y, f)?;

        let tail: Vec<usize> = (self.dims.label_len..self.dims.decoder_len()).collect();
        let y = g.gather_rows(y, &tail)?;
        let out = self.linear(g, b, y, self.ids.w_out, self.ids.b_out)?;
        Ok((out, used))
    }

    /// Forward with memory bookkeeping: `Train` measures and records every
    /// site's indices; `Predict` requires a frozen memory and reuses it.
    #[allow(clippy::too_many_arguments)]
    pub fn informer_forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        enc_in: Var,
        dec_in: Var,
        mode: &Mode,
        memory: &mut AttentionIndexMemory,
        counters: &mut OpCounters,
    ) -> Result<Var> {
        match *mode {
            Mode::Train {
                epoch,
                iteration,
                seed,
            } => {
                if memory.is_frozen() {
                    return Err(Error::MemoryFrozen);
                }
                let (out, used) =
                    self.forward(g, b, enc_in, dec_in, Selection::Measure { seed }, counters)?;
                for s in used {
                    memory.record(s.key, s.l_q, epoch, iteration, &s.indices)?;
                }
                Ok(out)
            }
            Mode::Predict => {
                let (out, _) =
                    self.forward(g, b, enc_in, dec_in, Selection::Reuse(memory), counters)?;
                Ok(out)
            }
        }
    }

    /// Closed-form counters of one forward pass. `u_at` gives the number of
    /// active queries per sparse site; `measure` adds the sampled-key
    /// measurement.
    pub fn counter_formula(&self, measure: bool, u_at: impl Fn(SiteKey) -> usize) -> OpCounters {
        let dh = self.dims.head_dim() as u64;
        let mut c = OpCounters::default();
        for key in self.dims.sites() {
            let l = self.dims.site_len(key.layer) as u64;
            if measure {
                let m = l * self.attention.sample_size(l as usize) as u64 * dh;
                c.measurement_dot_products += m;
                c.multiplies_total += m;
            }
            let u = u_at(key) as u64;
            c.attention_dot_products += u * l * dh;
            c.multiplies_total += u * l * 2 * dh;
        }
        let cross = (self.dims.decoder_len() * self.dims.lookback) as u64 * dh;
        let heads = self.dims.n_heads as u64;
        c.attention_dot_products += heads * cross;
        c.multiplies_total += heads * 2 * cross;
        c
    }

    /// Forecast for one lookback window without gradient tracking.
    pub fn predict(
        &self,
        lookback: &Tensor,
        sel: Selection<'_>,
        counters: &mut OpCounters,
    ) -> Result<(Tensor, Vec<SiteSelection>)> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let dec = decoder_input(lookback, self.dims.label_len, self.dims.horizon)?;
        let enc = g.constant(lookback.clone());
        let dec = g.constant(dec);
        let (out, used) = self.forward(&mut g, &b, enc, dec, sel, counters)?;
        Ok((g.value(out).clone(), used))
    }
}
