//! MLinear: channel-independent and channel-dependent linear forecasters
//! whose outputs are mixed through input-dependent attention gates.
//!
//! For an input `X: L×n`:
//!
//! * `X_CI[:, i] = W_CI_iᵀ · X[:, i]` (one `L×S` matrix per channel),
//! * `X_CD = W_CDᵀ · X` (one shared `L×S` matrix),
//! * `Z = [X_CI; X_CD]` (`2S×n`), and `ρ_q, ρ_k, ρ_v` map `Z` to
//!   `Q: d_k×d`, `K: d_k×d`, `V: 2×d`,
//! * the efficient-attention context `C = E(Q, K, V)` (`2×d`) gates the two
//!   halves of `Z`: row 0 of `C` scales the CI block, row 1 the CD block,
//! * `X_mix = W_mixᵀ · Z_gated` with `W_mix: 2S×S`.
//!
//! With [`MappingKind::SequenceMix`] the ρ weights act across the `2S` axis,
//! so `d = n` and the gates are per channel. With
//! [`MappingKind::FeatureMix`] they act across channels, `d = 2S`, and the
//! gates are per time step.

use serde::{Deserialize, Serialize};

use crate::attention::{efficient_attention, OpCounters};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::params::{Bound, ParamId, ParamStore};
use crate::rng::{rng_for, streams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    #[default]
    SequenceMix,
    FeatureMix,
}

impl std::str::FromStr for MappingKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sequence_mix" => Ok(Self::SequenceMix),
            "feature_mix" => Ok(Self::FeatureMix),
            other => Err(format!("expected sequence_mix|feature_mix, got {other:?}")),
        }
    }
}

impl std::fmt::Display for MappingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SequenceMix => "sequence_mix",
            Self::FeatureMix => "feature_mix",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MLinearDims {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    /// `d_k = d_q = max(1, horizon / p_divisor)`.
    pub p_divisor: usize,
    pub mapping: MappingKind,
}

impl MLinearDims {
    pub fn d_k(&self) -> usize {
        (self.horizon / self.p_divisor.max(1)).max(1)
    }

    pub const D_V: usize = 2;
}

#[derive(Clone, Debug)]
struct Ids {
    ci: Vec<ParamId>,
    cd: ParamId,
    rho_q: ParamId,
    rho_k: ParamId,
    rho_v: ParamId,
    mix: ParamId,
}

#[derive(Clone, Debug)]
pub struct MLinear {
    dims: MLinearDims,
    params: ParamStore,
    ids: Ids,
}

/// The three supervised outputs, each `S×n`.
#[derive(Clone, Copy, Debug)]
pub struct MLinearHeads {
    pub ci: Var,
    pub cd: Var,
    pub mix: Var,
}

impl MLinear {
    pub fn new(dims: MLinearDims, seed: u64) -> Result<Self> {
        let MLinearDims {
            lookback: l,
            horizon: s,
            channels: n,
            ..
        } = dims;
        if l == 0 || s == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "MLinear needs positive L, S, n; got {l}, {s}, {n}"
            )));
        }
        let mut rng = rng_for(seed, &[streams::INIT]);
        let mut p = ParamStore::new();
        let ci = (0..n)
            .map(|i| p.add_uniform(format!("ci.{i}"), &[l, s], l, &mut rng))
            .collect();
        let cd = p.add_uniform("cd", &[l, s], l, &mut rng);
        let d_k = dims.d_k();
        let (q_shape, k_shape, v_shape, fan) = match dims.mapping {
            MappingKind::SequenceMix => ([d_k, 2 * s], [d_k, 2 * s], [MLinearDims::D_V, 2 * s], 2 * s),
            MappingKind::FeatureMix => ([n, d_k], [n, d_k], [n, MLinearDims::D_V], n),
        };
        let rho_q = p.add_uniform("rho_q", &q_shape, fan, &mut rng);
        let rho_k = p.add_uniform("rho_k", &k_shape, fan, &mut rng);
        let rho_v = p.add_uniform("rho_v", &v_shape, fan, &mut rng);
        let mix = p.add_uniform("mix", &[2 * s, s], 2 * s, &mut rng);
        Ok(Self {
            dims,
            params: p,
            ids: Ids {
                ci,
                cd,
                rho_q,
                rho_k,
                rho_v,
                mix,
            },
        })
    }

    pub fn dims(&self) -> &MLinearDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn ci_weight_mut(&mut self, channel: usize) -> &mut Tensor {
        self.params.get_mut(self.ids.ci[channel])
    }

    pub fn cd_weight_mut(&mut self) -> &mut Tensor {
        self.params.get_mut(self.ids.cd)
    }

    pub fn mix_weight_mut(&mut self) -> &mut Tensor {
        self.params.get_mut(self.ids.mix)
    }

    /// Mutable access by parameter name (`ci.<i>`, `cd`, `rho_q`, `rho_k`,
    /// `rho_v`, `mix`).
    pub fn weight_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.params.id_of(name)?;
        Some(self.params.get_mut(id))
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let (l, n) = g.value(x).dims2("mlinear input")?;
        if l != self.dims.lookback || n != self.dims.channels {
            return Err(Error::Shape {
                op: "mlinear input (L×n)",
                left: vec![self.dims.lookback, self.dims.channels],
                right: vec![l, n],
            });
        }
        Ok(())
    }

    /// Per-channel linear maps; channels never interact.
    pub fn ci_forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let xt = g.transpose(x)?;
        let rows = self
            .ids
            .ci
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let xi = g.gather_rows(xt, &[i])?;
                g.matmul(xi, b[w])
            })
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat(&rows, 0)?;
        g.transpose(stacked)
    }

    /// One linear map shared by all channels.
    pub fn cd_forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let wt = g.transpose(b[self.ids.cd])?;
        g.matmul(wt, x)
    }

    /// Gated mix of the two heads, `S×n`.
    pub fn mix_forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        x_ci: Var,
        x_cd: Var,
        counters: &mut OpCounters,
    ) -> Result<Var> {
        if g.shape(x_ci) != g.shape(x_cd) {
            return Err(Error::Shape {
                op: "mix_forward",
                left: g.shape(x_ci).to_vec(),
                right: g.shape(x_cd).to_vec(),
            });
        }
        let (s, _) = g.value(x_ci).dims2("mix_forward")?;
        if s != self.dims.horizon {
            return Err(Error::Shape {
                op: "mix_forward",
                left: vec![self.dims.horizon],
                right: g.shape(x_ci).to_vec(),
            });
        }
        let z = g.concat(&[x_ci, x_cd], 0)?;
        let (q, k, v) = match self.dims.mapping {
            MappingKind::SequenceMix => (
                g.matmul(b[self.ids.rho_q], z)?,
                g.matmul(b[self.ids.rho_k], z)?,
                g.matmul(b[self.ids.rho_v], z)?,
            ),
            MappingKind::FeatureMix => {
                let mut map = |w: ParamId| -> Result<Var> {
                    let zw = g.matmul(z, b[w])?;
                    g.transpose(zw)
                };
                (map(self.ids.rho_q)?, map(self.ids.rho_k)?, map(self.ids.rho_v)?)
            }
        };
        let context = efficient_attention(g, q, k, v, counters)?; // 2 × d
        let gated = match self.dims.mapping {
            MappingKind::SequenceMix => {
                let gate_ci = g.gather_rows(context, &[0])?;
                let gate_cd = g.gather_rows(context, &[1])?;
                let a = g.mul_row(x_ci, gate_ci)?;
                let c = g.mul_row(x_cd, gate_cd)?;
                g.concat(&[a, c], 0)?
            }
            MappingKind::FeatureMix => {
                // context is 2 × 2S: row 0 gates CI time steps, row 1 CD.
                let ct = g.transpose(context)?;
                let pick = |g: &mut Graph, rows: Vec<usize>, col: usize| -> Result<Var> {
                    let block = g.gather_rows(ct, &rows)?;
                    let mut sel = Tensor::zeros(&[2, 1]);
                    sel.data_mut()[col] = 1.0;
                    let sel = g.constant(sel);
                    g.matmul(block, sel)
                };
                let ci_gate = pick(g, (0..s).collect(), 0)?;
                let cd_gate = pick(g, (s..2 * s).collect(), 1)?;
                let a = g.mul_col(x_ci, ci_gate)?;
                let c = g.mul_col(x_cd, cd_gate)?;
                g.concat(&[a, c], 0)?
            }
        };
        let wt = g.transpose(b[self.ids.mix])?;
        g.matmul(wt, gated)
    }

    /// All three heads. Training supervises every head; evaluation reads
    /// only `mix`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        counters: &mut OpCounters,
    ) -> Result<MLinearHeads> {
        let ci = self.ci_forward(g, b, x)?;
        let cd = self.cd_forward(g, b, x)?;
        let mix = self.mix_forward(g, b, ci, cd, counters)?;
        Ok(MLinearHeads { ci, cd, mix })
    }

    /// Forecast `S×n` for one lookback window (the mixed head).
    pub fn predict(&self, x: &Tensor, counters: &mut OpCounters) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let heads = self.forward(&mut g, &b, xv, counters)?;
        Ok(g.value(heads.mix).clone())
    }
}
