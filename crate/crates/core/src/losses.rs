//! Objective functions over a pair of twin embedding batches.
//!
//! All losses take `N×D` embeddings (`N` samples, `D` features) and return a
//! scalar [`Tensor`] on the tape of their inputs. [`variant_losses`] is the
//! single entry point used by training; it reports every objective as an
//! invariance-like term plus a weighted redundancy-like term so metrics keep
//! one schema across variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::tensor::{Tensor, TensorError, DEFAULT_JITTER};

/// Weight on the off-diagonal term.
pub const DEFAULT_LAMBDA: f64 = 5e-3;
/// Floor on the per-feature standard deviation during batch standardization.
pub const DEFAULT_STANDARDIZE_EPS: f64 = 1e-5;
pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    BarlowTwins,
    OnlyInvariance,
    OnlyRedundancy,
    FeatureDimNorm,
    CrossCovariance,
    CrossEntropyTemp,
    InfoNce,
    Cosine,
    Imax,
}

impl LossVariant {
    pub const ALL: [LossVariant; 9] = [
        LossVariant::BarlowTwins,
        LossVariant::OnlyInvariance,
        LossVariant::OnlyRedundancy,
        LossVariant::FeatureDimNorm,
        LossVariant::CrossCovariance,
        LossVariant::CrossEntropyTemp,
        LossVariant::InfoNce,
        LossVariant::Cosine,
        LossVariant::Imax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::BarlowTwins => "barlow_twins",
            LossVariant::OnlyInvariance => "only_invariance",
            LossVariant::OnlyRedundancy => "only_redundancy",
            LossVariant::FeatureDimNorm => "feature_dim_norm",
            LossVariant::CrossCovariance => "cross_covariance",
            LossVariant::CrossEntropyTemp => "cross_entropy_temp",
            LossVariant::InfoNce => "info_nce",
            LossVariant::Cosine => "cosine",
            LossVariant::Imax => "imax",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub lambda: f64,
    pub tau: f64,
    pub epsilon: f64,
    /// Diagonal jitter for the IMAX log-determinants.
    pub jitter: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::BarlowTwins,
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            epsilon: DEFAULT_STANDARDIZE_EPS,
            jitter: DEFAULT_JITTER,
        }
    }
}

impl LossConfig {
    pub fn with_variant(variant: LossVariant) -> Self {
        LossConfig {
            variant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Config(format!(
                "jitter must be >= 0, got {}",
                self.jitter
            )));
        }
        Ok(())
    }

    /// Coefficient `w` such that `total = invariance + w · redundancy`.
    pub fn redundancy_weight(&self) -> f64 {
        match self.variant {
            LossVariant::InfoNce => 1.0,
            LossVariant::Cosine => 0.0,
            LossVariant::Imax => -1.0,
            _ => self.lambda,
        }
    }
}

/// Loss value plus its two reported components.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub invariance_term: f64,
    pub redundancy_term: f64,
    pub redundancy_weight: f64,
}

impl LossBreakdown {
    pub fn total_value(&self) -> f64 {
        self.total.item()
    }
}

fn dims(z: &Tensor) -> Result<(usize, usize)> {
    match z.shape() {
        &[n, d] => Ok((n, d)),
        s => Err(precondition(format!(
            "expected an N×D matrix, got shape {s:?}"
        ))),
    }
}

fn pair_dims(za: &Tensor, zb: &Tensor) -> Result<(usize, usize)> {
    let (n, d) = dims(za)?;
    if za.shape() != zb.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "twin embeddings",
            left: za.shape().to_vec(),
            right: zb.shape().to_vec(),
        }
        .into());
    }
    Ok((n, d))
}

fn require_batch(n: usize) -> Result<()> {
    if n < 2 {
        return Err(precondition(format!(
            "batch statistics need N >= 2, got N = {n}"
        )));
    }
    Ok(())
}

/// Batch-standardized embeddings and the features whose std fell at or
/// below the floor.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub values: Tensor,
    pub collapsed: Vec<usize>,
}

/// Center each column and divide by its population std, floored at
/// `epsilon`. Columns at or under the floor are reported in `collapsed`.
pub fn standardize_batch(z: &Tensor, epsilon: f64) -> Result<Standardized> {
    let (n, _) = dims(z)?;
    require_batch(n)?;
    let mean = z.mean_axis(0, true)?;
    let std = z.std_axis(0, true)?;
    let collapsed = std
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= epsilon)
        .map(|(i, _)| i)
        .collect();
    let values = z.sub(&mean)?.div(&std.max_scalar(epsilon)?)?;
    Ok(Standardized { values, collapsed })
}

/// Cross-correlation matrix between twin embedding batches.
#[derive(Debug, Clone)]
pub struct CrossCorrelationMatrix {
    /// `D×D`, differentiable with respect to both inputs.
    pub values: Tensor,
    pub batch_size: usize,
    pub epsilon: f64,
    pub collapsed_a: Vec<usize>,
    pub collapsed_b: Vec<usize>,
}

impl CrossCorrelationMatrix {
    pub fn dim(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.at(i, j)
    }

    pub fn diagonal_mean(&self) -> f64 {
        let d = self.dim();
        (0..d).map(|i| self.get(i, i)).sum::<f64>() / d as f64
    }

    pub fn mean_abs_off_diagonal(&self) -> f64 {
        mean_abs_off_diagonal(self.values.data(), self.dim())
    }
}

pub(crate) fn mean_abs_off_diagonal(values: &[f64], d: usize) -> f64 {
    if d < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += values[i * d + j].abs();
            }
        }
    }
    s / (d * (d - 1)) as f64
}

/// `C = standardize(Z_A)ᵀ · standardize(Z_B) / N`.
pub fn cross_correlation(za: &Tensor, zb: &Tensor, epsilon: f64) -> Result<CrossCorrelationMatrix> {
    let (n, _) = pair_dims(za, zb)?;
    require_batch(n)?;
    let a = standardize_batch(za, epsilon)?;
    let b = standardize_batch(zb, epsilon)?;
    let values = a.values.t()?.matmul(&b.values)?.scale(1.0 / n as f64)?;
    Ok(CrossCorrelationMatrix {
        values,
        batch_size: n,
        epsilon,
        collapsed_a: a.collapsed,
        collapsed_b: b.collapsed,
    })
}

/// Summation form of the cross-correlation on mean-centered columns:
/// `C_ij = Σ_b a_bi·b_bj / (‖a_·i‖·‖b_·j‖)`. Column norms are floored at
/// `sqrt(N)·epsilon` to match [`cross_correlation`] on collapsed features.
/// Plain values, row-major `D×D`.
pub fn pearson_cross_correlation(za: &Tensor, zb: &Tensor, epsilon: f64) -> Result<Vec<f64>> {
    let (n, d) = pair_dims(za, zb)?;
    require_batch(n)?;
    let center = |z: &Tensor| -> Result<Vec<f64>> {
        let mean = z.detach().mean_axis(0, true)?;
        Ok(z.detach().sub(&mean)?.to_vec())
    };
    let (a, b) = (center(za)?, center(zb)?);
    let floor = (n as f64).sqrt() * epsilon;
    let norms = |m: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|j| {
                (0..n)
                    .map(|r| m[r * d + j] * m[r * d + j])
                    .sum::<f64>()
                    .sqrt()
                    .max(floor)
            })
            .collect()
    };
    let (na, nb) = (norms(&a), norms(&b));
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let s: f64 = (0..n).map(|r| a[r * d + i] * b[r * d + j]).sum();
            c[i * d + j] = s / (na[i] * nb[j]);
        }
    }
    Ok(c)
}

fn off_diagonal_mask(d: usize) -> Tensor {
    let mut data = vec![1.0; d * d];
    for i in 0..d {
        data[i * d + i] = 0.0;
    }
    Tensor::new(data, &[d, d]).expect("valid mask")
}

/// `(Σ_i (1 − C_ii)², Σ_{i≠j} C_ij²)` as scalar tensors.
fn redundancy_terms(c: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = match c.shape() {
        &[r, k] if r == k => r,
        s => {
            return Err(precondition(format!(
                "cross-correlation must be square, got {s:?}"
            )))
        }
    };
    let invariance = c.diagonal()?.neg()?.add_scalar(1.0)?.square()?.sum_all();
    let redundancy = c.mul(&off_diagonal_mask(d))?.square()?.sum_all();
    Ok((invariance, redundancy))
}

fn combine(invariance: Tensor, redundancy: Tensor, weight: f64) -> Result<LossBreakdown> {
    let total = invariance.add(&redundancy.scale(weight)?)?;
    Ok(LossBreakdown {
        invariance_term: invariance.item(),
        redundancy_term: redundancy.item(),
        redundancy_weight: weight,
        total,
    })
}

/// `Σ_i (1 − C_ii)² + λ·Σ_i Σ_{j≠i} C_ij²`.
pub fn barlow_twins_loss(c: &CrossCorrelationMatrix, lambda: f64) -> Result<LossBreakdown> {
    barlow_twins_from_matrix(&c.values, lambda)
}

/// Same objective on an arbitrary square matrix.
pub fn barlow_twins_from_matrix(c: &Tensor, lambda: f64) -> Result<LossBreakdown> {
    let (inv, red) = redundancy_terms(c)?;
    combine(inv, red, lambda)
}

fn row_normalize(z: &Tensor) -> Result<Tensor> {
    let norms = z.square()?.sum_axis(1, true)?;
    if let Some(row) = norms.data().iter().position(|&v| v == 0.0) {
        return Err(TensorError::Domain {
            op: "row_normalize",
            detail: format!("sample {row} has zero norm"),
        }
        .into());
    }
    Ok(z.div(&norms.sqrt()?)?)
}

/// Row-wise `log Σ_k exp(x_rk)` over entries where `mask` is 1, shifted by
/// a constant row max for stability.
fn masked_logsumexp_rows(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let (r, k) = dims(x)?;
    let xd = x.data();
    let md = mask.map(Tensor::data);
    let shift: Vec<f64> = (0..r)
        .map(|i| {
            (0..k)
                .filter(|&j| md.map_or(true, |m| m[i * k + j] != 0.0))
                .map(|j| xd[i * k + j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    if shift.iter().any(|s| !s.is_finite()) {
        return Err(precondition("log-sum-exp over an empty set"));
    }
    let shift = Tensor::new(shift, &[r, 1])?;
    let mut e = x.sub(&shift)?.exp()?;
    if let Some(m) = mask {
        e = e.mul(m)?;
    }
    Ok(e.sum_axis(1, false)?.log()?.add(&shift.reshape(&[r])?)?)
}

/// Cross-correlation variants studied as ablations of the main objective.
fn ablation_matrix(za: &Tensor, zb: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let (n, d) = pair_dims(za, zb)?;
    require_batch(n)?;
    match cfg.variant {
        LossVariant::FeatureDimNorm => {
            // batch standardization, then unit-length rows (no centering),
            // then the raw product rescaled so the trace target is D
            let a = row_normalize(&standardize_batch(za, cfg.epsilon)?.values)?;
            let b = row_normalize(&standardize_batch(zb, cfg.epsilon)?.values)?;
            Ok(a.t()?.matmul(&b)?.scale(d as f64 / n as f64)?)
        }
        LossVariant::CrossCovariance => {
            let a = za.sub(&za.mean_axis(0, true)?)?;
            let b = zb.sub(&zb.mean_axis(0, true)?)?;
            Ok(a.t()?.matmul(&b)?.scale(1.0 / n as f64)?)
        }
        _ => Ok(cross_correlation(za, zb, cfg.epsilon)?.values),
    }
}

fn info_nce_terms(za: &Tensor, zb: &Tensor, tau: f64) -> Result<(Tensor, Tensor)> {
    let (n, _) = pair_dims(za, zb)?;
    require_batch(n)?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let a = row_normalize(za)?;
    let b = row_normalize(zb)?;
    let sim = a.matmul(&b.t()?)?.scale(1.0 / tau)?;
    let similarity = sim.diagonal()?.sum_all().neg()?;
    let contrastive = masked_logsumexp_rows(&sim, Some(&off_diagonal_mask(n)))?.sum_all();
    Ok((similarity, contrastive))
}

/// `−Σ_b cos(a_b, b_b)/τ + Σ_b log Σ_{b'≠b} exp(cos(a_b, b_b')/τ)`.
pub fn info_nce_loss(za: &Tensor, zb: &Tensor, tau: f64) -> Result<Tensor> {
    let (s, c) = info_nce_terms(za, zb, tau)?;
    Ok(s.add(&c)?)
}

/// `−Σ_b cos(a_b, b_b)`.
pub fn cosine_alignment_loss(za: &Tensor, zb: &Tensor) -> Result<Tensor> {
    pair_dims(za, zb)?;
    let a = row_normalize(za)?;
    let b = row_normalize(zb)?;
    Ok(a.mul(&b)?.sum_all().neg()?)
}

/// Mean-centered batch covariance with 1/N normalization.
pub fn batch_covariance(z: &Tensor) -> Result<Tensor> {
    let (n, _) = dims(z)?;
    let c = z.sub(&z.mean_axis(0, true)?)?;
    Ok(c.t()?.matmul(&c)?.scale(1.0 / n as f64)?)
}

fn imax_terms(za: &Tensor, zb: &Tensor, jitter: f64) -> Result<(Tensor, Tensor)> {
    let (n, _) = pair_dims(za, zb)?;
    require_batch(n)?;
    let logdet = |m: Tensor, which| {
        batch_covariance(&m)?
            .logdet(jitter)
            .map_err(|source| Error::Factorization { which, source })
    };
    Ok((
        logdet(za.sub(zb)?, "difference")?,
        logdet(za.add(zb)?, "sum")?,
    ))
}

/// `log|Cov(Z_A − Z_B) + jitter·I| − log|Cov(Z_A + Z_B) + jitter·I|`.
pub fn imax_loss(za: &Tensor, zb: &Tensor, jitter: f64) -> Result<Tensor> {
    let (d, s) = imax_terms(za, zb, jitter)?;
    Ok(d.sub(&s)?)
}

/// Evaluate the configured objective.
pub fn variant_losses(za: &Tensor, zb: &Tensor, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let zero = || Tensor::scalar(0.0);
    match cfg.variant {
        LossVariant::BarlowTwins | LossVariant::FeatureDimNorm | LossVariant::CrossCovariance => {
            barlow_twins_from_matrix(&ablation_matrix(za, zb, cfg)?, cfg.lambda)
        }
        LossVariant::OnlyInvariance => {
            let (inv, _) = redundancy_terms(&ablation_matrix(za, zb, cfg)?)?;
            combine(inv, zero(), cfg.lambda)
        }
        LossVariant::OnlyRedundancy => {
            let (_, red) = redundancy_terms(&ablation_matrix(za, zb, cfg)?)?;
            combine(zero(), red, cfg.lambda)
        }
        LossVariant::CrossEntropyTemp => {
            let c = ablation_matrix(za, zb, cfg)?;
            let d = c.shape()[0];
            let scaled = c.scale(1.0 / cfg.tau)?;
            let diag = scaled.diagonal()?.reshape(&[1, d])?;
            let inv = masked_logsumexp_rows(&diag, None)?.sum_all().neg()?;
            let off = c
                .max_scalar(0.0)?
                .scale(1.0 / cfg.tau)?
                .reshape(&[1, d * d])?;
            let mask = off_diagonal_mask(d).reshape(&[1, d * d])?;
            let red = masked_logsumexp_rows(&off, Some(&mask))?.sum_all();
            combine(inv, red, cfg.lambda)
        }
        LossVariant::InfoNce => {
            let (s, c) = info_nce_terms(za, zb, cfg.tau)?;
            combine(s, c, 1.0)
        }
        LossVariant::Cosine => combine(cosine_alignment_loss(za, zb)?, zero(), 0.0),
        LossVariant::Imax => {
            let (d, s) = imax_terms(za, zb, cfg.jitter)?;
            combine(d, s, -1.0)
        }
    }
}
