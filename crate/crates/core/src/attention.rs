//! Softmax, linearized-softmax and linear attention predictors for an
//! in-context regression prompt.
//!
//! Only the key-query product `M = K^T Q` and the bottom row of `V` reach the
//! prediction, so the linearized model is parametrized by the blocks
//!
//! ```text
//!     V = [ *      *   ]      M = [ M11    * ]
//!         [ v21^T  v22 ]          [ m21^T  * ]
//! ```
//!
//! plus the temperature `tau`. The `*` blocks multiply the zero label slot of
//! the query column and never matter.

use crate::data::{Prompt, PromptMoments, SummaryStats};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub m11: Mat,
    pub m21: Vector,
    pub v21: Vector,
    pub v22: f64,
    pub tau: f64,
}

impl AttentionParams {
    pub fn new(m11: Mat, m21: Vector, v21: Vector, v22: f64, tau: f64) -> Result<Self> {
        let d = m11.nrows();
        linalg::check_square(&m11, d, "AttentionParams M11")?;
        linalg::check_len(&m21, d, "AttentionParams m21")?;
        linalg::check_len(&v21, d, "AttentionParams v21")?;
        check_tau(tau)?;
        Ok(Self {
            m11,
            m21,
            v21,
            v22,
            tau,
        })
    }

    /// All-zero model; predicts 0 for every prompt.
    pub fn zeros(d: usize) -> Self {
        Self {
            m11: Mat::zeros(d, d),
            m21: Vector::zeros(d),
            v21: Vector::zeros(d),
            v22: 0.0,
            tau: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.m11.nrows()
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self {
            tau,
            ..self.clone()
        })
    }

    /// `(d+1) x (d+1)` key-query product with zeros in the free blocks.
    pub fn full_m(&self) -> Mat {
        let d = self.dim();
        let mut m = Mat::zeros(d + 1, d + 1);
        m.view_mut((0, 0), (d, d)).copy_from(&self.m11);
        for j in 0..d {
            m[(d, j)] = self.m21[j];
        }
        m
    }

    /// `(d+1) x (d+1)` value matrix with only the bottom row populated.
    pub fn full_v(&self) -> Mat {
        let d = self.dim();
        let mut v = Mat::zeros(d + 1, d + 1);
        for j in 0..d {
            v[(d, j)] = self.v21[j];
        }
        v[(d, d)] = self.v22;
        v
    }

    /// Advisory check of the parameter-scale assumptions
    /// `|M11| <= c d`, `m21 = 0`, `|v21| <= c/(d l)`, `|v22| <= c/d`.
    pub fn scale_check(&self, c: f64, l: usize) -> ScaleCheck {
        let d = self.dim() as f64;
        let m11_norm = spectral_norm(&self.m11);
        let m21_norm = self.m21.norm();
        let v21_norm = self.v21.norm();
        ScaleCheck {
            m11_norm,
            m21_norm,
            v21_norm,
            v22_abs: self.v22.abs(),
            m11_ok: m11_norm <= c * d,
            m21_ok: m21_norm == 0.0,
            v21_ok: v21_norm <= c / (d * l as f64),
            v22_ok: self.v22.abs() <= c / d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleCheck {
    pub m11_norm: f64,
    pub m21_norm: f64,
    pub v21_norm: f64,
    pub v22_abs: f64,
    pub m11_ok: bool,
    pub m21_ok: bool,
    pub v21_ok: bool,
    pub v22_ok: bool,
}

impl ScaleCheck {
    pub fn all_ok(&self) -> bool {
        self.m11_ok && self.m21_ok && self.v21_ok && self.v22_ok
    }
}

pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must be finite and > 0, got {tau}"
        )))
    }
}

/// Full key/query/value weights for the softmax reference model.
#[derive(Debug, Clone, PartialEq)]
pub struct FullAttentionWeights {
    pub k: Mat,
    pub q: Mat,
    pub v: Mat,
    pub tau: f64,
}

impl FullAttentionWeights {
    pub fn new(k: Mat, q: Mat, v: Mat, tau: f64) -> Result<Self> {
        let n = k.nrows();
        linalg::check_square(&k, n, "FullAttentionWeights K")?;
        linalg::check_square(&q, n, "FullAttentionWeights Q")?;
        linalg::check_square(&v, n, "FullAttentionWeights V")?;
        check_tau(tau)?;
        Ok(Self { k, q, v, tau })
    }

    /// `K = I`, `Q = M`, so that `K^T Q` reproduces the parameter blocks.
    pub fn from_params(params: &AttentionParams) -> Self {
        let n = params.dim() + 1;
        Self {
            k: Mat::identity(n, n),
            q: params.full_m(),
            v: params.full_v(),
            tau: params.tau,
        }
    }
}

/// A linearized-attention prediction split into its weight and bias parts:
/// `y_hat = w_att^T x_query / tau + b_att`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y_hat: f64,
    pub w_att: Vector,
    pub b_att: f64,
}

fn check_finite(z: &Vector, context: &'static str) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context })
    }
}

/// `softmax(z / tau)`, computed with max subtraction.
pub fn softmax_map(z: &Vector, tau: f64) -> Result<Vector> {
    check_tau(tau)?;
    check_finite(z, "softmax_map")?;
    if z.is_empty() {
        return Ok(Vector::zeros(0));
    }
    let max = z.max();
    let e = z.map(|v| ((v - max) / tau).exp());
    let total = e.sum();
    Ok(e / total)
}

/// First-order expansion of `softmax(z / tau)` around zero:
/// `1/l + (z/tau)/l - (sum_j z_j/tau)/l^2`. Entries may be negative.
pub fn linearized_softmax_map(z: &Vector, tau: f64) -> Result<Vector> {
    check_tau(tau)?;
    check_finite(z, "linearized_softmax_map")?;
    let l = z.len() as f64;
    let total = z.sum() / tau;
    let base = 1.0 / l - total / (l * l);
    Ok(z.map(|v| base + v / (tau * l)))
}

fn check_prompt(p: &Prompt, params: &AttentionParams) -> Result<()> {
    if p.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            context: "prompt vs attention params",
            expected: params.dim(),
            got: p.dim(),
        });
    }
    Ok(())
}

/// Linearized-attention prediction from the centered prompt statistics.
pub fn predict_from_stats(stats: &SummaryStats, query: &Vector, params: &AttentionParams) -> Prediction {
    let inner = &stats.c_xx * &params.v21 + &stats.c_xy * params.v22;
    let mut w_att = params.m11.tr_mul(&inner);
    let coef = params.v21.dot(&stats.c_xy) + params.v22 * stats.c_yy;
    if coef != 0.0 {
        w_att.axpy(coef, &params.m21, 1.0);
    }
    let b_att = params.v21.dot(&stats.s_x) + params.v22 * stats.s_y;
    let y_hat = w_att.dot(query) / params.tau + b_att;
    Prediction { y_hat, w_att, b_att }
}

pub fn predict_linearized(p: &Prompt, params: &AttentionParams) -> Result<Prediction> {
    check_prompt(p, params)?;
    let stats = PromptMoments::from_prompt(p).summary();
    Ok(predict_from_stats(&stats, &p.query(), params))
}

/// The full linearized-attention output
/// `E = Z + (1/l) V Z (G/tau + 1 1^T - (1/l) 1 1^T G/tau)` with
/// `G = Z^T M Z`, evaluated with dense matrices. The prediction is the
/// bottom-right entry.
pub fn linearized_attention_output(p: &Prompt, params: &AttentionParams) -> Result<Mat> {
    check_prompt(p, params)?;
    let z = p.embedding();
    let l = p.len();
    let lf = l as f64;
    let g = z.tr_mul(&(params.full_m() * &z)) / params.tau;
    let col_means = g.row_sum() / lf;
    let mut weights = g;
    for i in 0..l {
        for j in 0..l {
            weights[(i, j)] += 1.0 - col_means[j];
        }
    }
    Ok(&z + params.full_v() * &z * weights / lf)
}

/// Linear attention `Z + (1/l) V Z (KZ)^T (QZ) / tau`: the same algebra as
/// the linearized model but on uncentered second moments and without bias.
pub fn predict_linear_attention(p: &Prompt, params: &AttentionParams) -> Result<f64> {
    check_prompt(p, params)?;
    let m = PromptMoments::from_prompt(p);
    Ok(linear_attention_from_moments(&m, params))
}

pub(crate) fn linear_attention_from_moments(m: &PromptMoments, params: &AttentionParams) -> f64 {
    let lf = m.l as f64;
    let c_xx = &m.gram_all / lf;
    let c_xy = &m.sum_xy / lf;
    let c_yy = m.sum_yy / lf;
    let inner = &c_xx * &params.v21 + &c_xy * params.v22;
    let mut w = params.m11.tr_mul(&inner);
    w.axpy(params.v21.dot(&c_xy) + params.v22 * c_yy, &params.m21, 1.0);
    w.dot(&m.query) / params.tau
}

/// Softmax attention with residual, `S = Z + V Z softmax((KZ)^T (QZ) / tau)`
/// with softmax over keys for each query column; returns `S[d+1, l]`.
pub fn predict_softmax_reference(p: &Prompt, weights: &FullAttentionWeights) -> Result<f64> {
    let n = p.dim() + 1;
    if weights.k.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "prompt vs full attention weights",
            expected: weights.k.nrows(),
            got: n,
        });
    }
    let z = p.embedding();
    let l = p.len();
    let query_col = z.column(l - 1).into_owned();
    let keys = &weights.k * &z;
    let q = &weights.q * &query_col;
    let scores = keys.tr_mul(&q);
    let attn = softmax_map(&scores, weights.tau)?;
    let out = &weights.v * (&z * attn);
    Ok(z[(n - 1, l - 1)] + out[n - 1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapSummary {
    pub mean: f64,
    /// Population variance (divisor `l`).
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

impl MapSummary {
    pub fn of(v: &Vector) -> Self {
        let n = v.len() as f64;
        let mean = v.sum() / n;
        let variance = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            variance,
            min: v.min(),
            max: v.max(),
        }
    }
}

/// Per-temperature summaries of `softmax(z/tau)`, the linearized softmax and
/// plain scaling `z / (l tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureEffect {
    pub tau: f64,
    pub softmax: MapSummary,
    pub linearized: MapSummary,
    pub plain: MapSummary,
}

pub fn histogram_compare(z: &Vector, taus: &[f64]) -> Result<Vec<TemperatureEffect>> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument("taus must be nonempty".into()));
    }
    if z.is_empty() {
        return Err(Error::InvalidArgument("score vector must be nonempty".into()));
    }
    let l = z.len() as f64;
    taus.iter()
        .map(|&tau| {
            let soft = softmax_map(z, tau)?;
            let lin = linearized_softmax_map(z, tau)?;
            let plain = z / (l * tau);
            Ok(TemperatureEffect {
                tau,
                softmax: MapSummary::of(&soft),
                linearized: MapSummary::of(&lin),
                plain: MapSummary::of(&plain),
            })
        })
        .collect()
}
