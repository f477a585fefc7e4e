//! Scaled dot-product attention, multi-head attention and the inter-series
//! attention layer.
//!
//! The inter-series layer attends from one series' context window (a
//! `1 x L` query) to the context windows of every series in the panel
//! (`m x L` keys and values) and returns a `1 x L` re-weighted window.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHeadConfig {
    pub num_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl MultiHeadConfig {
    /// `d_k = d_v = d_model / num_heads`.
    pub fn new(d_model: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || d_model == 0 || !d_model.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} must be a positive multiple of num_heads {num_heads}"
            )));
        }
        Ok(Self {
            num_heads,
            d_model,
            d_k: d_model / num_heads,
            d_v: d_model / num_heads,
        })
    }

    /// Heads whose projections keep the full width (`d_k = d_v = d_model`).
    pub fn square(d_model: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || d_model == 0 {
            return Err(Error::Config("heads and width must be positive".into()));
        }
        Ok(Self {
            num_heads,
            d_model,
            d_k: d_model,
            d_v: d_model,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(Error::Config("multi-head dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Adds `W^Q_i, W^K_i, W^V_i` per head and `W^O` under `prefix`.
    pub fn init_params<R: Rng + ?Sized>(&self, prefix: &str, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for i in 0..self.num_heads {
            store.insert(
                format!("{prefix}.wq.{i}"),
                Tensor::xavier_uniform(self.d_model, self.d_k, rng),
            )?;
            store.insert(
                format!("{prefix}.wk.{i}"),
                Tensor::xavier_uniform(self.d_model, self.d_k, rng),
            )?;
            store.insert(
                format!("{prefix}.wv.{i}"),
                Tensor::xavier_uniform(self.d_model, self.d_v, rng),
            )?;
        }
        store.insert(
            format!("{prefix}.wo"),
            Tensor::xavier_uniform(self.num_heads * self.d_v, self.d_model, rng),
        )
    }
}

/// Graph handles to one multi-head block's projections.
#[derive(Debug, Clone)]
pub struct MultiHeadVars {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
}

impl MultiHeadVars {
    pub fn bind<'a>(g: &mut Graph<'a>, binder: &mut Binder<'a>, prefix: &str, cfg: &MultiHeadConfig) -> Result<Self> {
        let mut wq = Vec::with_capacity(cfg.num_heads);
        let mut wk = Vec::with_capacity(cfg.num_heads);
        let mut wv = Vec::with_capacity(cfg.num_heads);
        for i in 0..cfg.num_heads {
            wq.push(binder.var(g, &format!("{prefix}.wq.{i}"))?);
            wk.push(binder.var(g, &format!("{prefix}.wk.{i}"))?);
            wv.push(binder.var(g, &format!("{prefix}.wv.{i}"))?);
        }
        let wo = binder.var(g, &format!("{prefix}.wo"))?;
        Ok(Self { wq, wk, wv, wo })
    }
}

/// Boolean availability of each series; `true` means attendable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeriesMask(Vec<bool>);

impl SeriesMask {
    pub fn new(mask: Vec<bool>) -> Result<Self> {
        if !mask.iter().any(|&b| b) {
            return Err(Error::Mask("every series is masked".into()));
        }
        Ok(Self(mask))
    }

    pub fn all(m: usize) -> Self {
        Self(vec![true; m.max(1)])
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// `softmax(q k^T / sqrt(d_k)) v`.
///
/// `mask` is either a key mask of length `b` (shared by every query row) or
/// a full `a x b` row-major mask; `false` entries receive zero weight.
/// Returns the output and the `a x b` attention weights.
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::Shape(format!(
            "attention shapes q {qs:?}, k {ks:?}, v {vs:?} are inconsistent"
        )));
    }
    let (a, b, d_k) = (qs[0], ks[0], qs[1]);
    let full_mask;
    let mask = match mask {
        None => None,
        Some(m) if m.len() == b => {
            if !m.iter().any(|&x| x) {
                return Err(Error::Mask("every key is masked".into()));
            }
            full_mask = m.repeat(a);
            Some(full_mask.as_slice())
        }
        Some(m) if m.len() == a * b => Some(m),
        Some(m) => {
            return Err(Error::Mask(format!(
                "mask of length {} fits neither {b} keys nor {a}x{b} scores",
                m.len()
            )))
        }
    };
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = g.masked_softmax_rows(scaled, mask)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// `concat(head_1, ..., head_h) W^O` with
/// `head_i = attention(q W^Q_i, k W^K_i, v W^V_i)`.
pub fn multi_head(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    cfg: &MultiHeadConfig,
    params: &MultiHeadVars,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    for x in [q, k, v] {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != cfg.d_model {
            return Err(Error::Shape(format!(
                "multi-head input of shape {s:?} does not end in d_model {}",
                cfg.d_model
            )));
        }
    }
    if params.wq.len() != cfg.num_heads {
        return Err(Error::Shape(format!(
            "{} head projections for {} heads",
            params.wq.len(),
            cfg.num_heads
        )));
    }
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for i in 0..cfg.num_heads {
        let qi = g.matmul(q, params.wq[i])?;
        let ki = g.matmul(k, params.wk[i])?;
        let vi = g.matmul(v, params.wv[i])?;
        let (h, w) = attention(g, qi, ki, vi, mask)?;
        heads.push(h);
        weights.push(w);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads)? };
    let out = g.matmul(cat, params.wo)?;
    Ok((out, weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterSeriesMode {
    /// Single head, no learned projections, scaled by `sqrt(L)`.
    Raw,
    /// Learned square `L x L` projections per head plus an output projection.
    Projected,
}

impl std::str::FromStr for InterSeriesMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "projected" => Ok(Self::Projected),
            other => Err(Error::Config(format!("unknown inter-series mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for InterSeriesMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Projected => "projected",
        })
    }
}

/// Attends from the target window `p_q` (`1 x L`) to every panel row
/// (`m x L`). Returns `x_is` (`1 x L`) and the `1 x m` weights (averaged
/// over heads in projected mode).
pub fn inter_series_attention(
    g: &mut Graph<'_>,
    p_q: Var,
    panel: Var,
    mask: &SeriesMask,
    mode: InterSeriesMode,
    params: Option<(&MultiHeadConfig, &MultiHeadVars)>,
) -> Result<(Var, Var)> {
    let (qs, ps) = (g.shape(p_q).to_vec(), g.shape(panel).to_vec());
    if qs.len() != 2 || ps.len() != 2 || qs[0] != 1 || qs[1] != ps[1] {
        return Err(Error::Shape(format!(
            "inter-series query {qs:?} and panel {ps:?} disagree on the context length"
        )));
    }
    if mask.len() != ps[0] {
        return Err(Error::Mask(format!(
            "series mask of length {} for a panel of {} series",
            mask.len(),
            ps[0]
        )));
    }
    if mask.count() == 0 {
        return Err(Error::Mask("every series is masked".into()));
    }
    match mode {
        InterSeriesMode::Raw => attention(g, p_q, panel, panel, Some(mask.as_slice())),
        InterSeriesMode::Projected => {
            let (cfg, vars) =
                params.ok_or_else(|| Error::Contract("projected inter-series attention needs parameters".into()))?;
            let (out, heads) = multi_head(g, p_q, panel, panel, cfg, vars, Some(mask.as_slice()))?;
            let mut avg = heads[0];
            for &h in &heads[1..] {
                avg = g.add(avg, h)?;
            }
            let avg = if heads.len() > 1 {
                g.scale(avg, 1.0 / heads.len() as f64)
            } else {
                avg
            };
            Ok((out, avg))
        }
    }
}
