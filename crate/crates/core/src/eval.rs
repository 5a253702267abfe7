//! Linear probe, collapse diagnostics and Gaussian entropy proxies.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentationPolicy, Image, View};
use crate::error::{precondition, Error, Result};
use crate::losses::{
    cross_correlation, mean_abs_off_diagonal, standardize_batch, DEFAULT_STANDARDIZE_EPS,
};
use crate::models::SiameseModel;
use crate::rng::{stream, Rng};
use crate::tensor::{inverse_and_logdet, Tensor, DEFAULT_JITTER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 0.3,
            weight_decay: 1e-6,
            momentum: 0.9,
            batch_size: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    /// `None` for classes absent from the test split.
    pub per_class: Vec<Option<f64>>,
    pub epochs: usize,
    /// Mean training cross-entropy after the last epoch.
    pub final_loss: f64,
}

fn matrix_dims(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    match x.shape() {
        &[n, f] => Ok((n, f)),
        s => Err(precondition(format!(
            "{what}: expected an N×F matrix, got {s:?}"
        ))),
    }
}

struct Softmax {
    classes: usize,
    features: usize,
    /// `classes × (features + 1)`, bias in the last column.
    w: Vec<f64>,
}

impl Softmax {
    fn probs(&self, x: &[f64], out: &mut [f64]) {
        let f = self.features;
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.w[c * (f + 1)..(c + 1) * (f + 1)];
            *o = row[f] + row[..f].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for o in out.iter_mut() {
            *o = (*o - m).exp();
            s += *o;
        }
        out.iter_mut().for_each(|o| *o /= s);
    }

    fn predict(&self, x: &[f64], buf: &mut [f64]) -> usize {
        self.probs(x, buf);
        let mut best = 0;
        for c in 1..self.classes {
            if buf[c] > buf[best] {
                best = c;
            }
        }
        best
    }
}

/// Multinomial logistic regression on frozen features, trained by SGD
/// with momentum under a cosine schedule. Features are standardized with
/// statistics of the training split.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let (n, f) = matrix_dims(train_x, "probe train features")?;
    let (nt, ft) = matrix_dims(test_x, "probe test features")?;
    if ft != f {
        return Err(precondition(format!(
            "probe feature widths differ: {f} vs {ft}"
        )));
    }
    if train_y.len() != n || test_y.len() != nt {
        return Err(precondition("probe labels do not match feature rows"));
    }
    if let Some(&l) = train_y.iter().chain(test_y).find(|&&l| l >= num_classes) {
        return Err(precondition(format!(
            "label {l} out of range for {num_classes} classes"
        )));
    }
    if train_y.iter().all(|&l| l == train_y[0]) {
        return Err(precondition("probe training labels contain a single class"));
    }
    if train_x
        .data()
        .iter()
        .chain(test_x.data())
        .any(|v| !v.is_finite())
    {
        return Err(precondition("probe features must be finite"));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config(
            "probe epochs and batch size must be positive".into(),
        ));
    }

    let mut mean = vec![0.0; f];
    let mut std = vec![0.0; f];
    let xd = train_x.data();
    for j in 0..f {
        let m = (0..n).map(|i| xd[i * f + j]).sum::<f64>() / n as f64;
        let v = (0..n).map(|i| (xd[i * f + j] - m).powi(2)).sum::<f64>() / n as f64;
        mean[j] = m;
        std[j] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
    }
    let standardize = |x: &[f64]| -> Vec<f64> {
        x.chunks(f)
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]))
            .collect()
    };
    let xs = standardize(xd);
    let xt = standardize(test_x.data());

    let k = num_classes;
    let mut model = Softmax {
        classes: k,
        features: f,
        w: vec![0.0; k * (f + 1)],
    };
    let mut velocity = vec![0.0; model.w.len()];
    let mut grad = vec![0.0; model.w.len()];
    let mut p = vec![0.0; k];
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total = (config.epochs * steps_per_epoch) as f64;
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let order = Rng::keyed(config.seed, &[stream::PROBE, epoch as u64]).permutation(n);
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let x = &xs[i * f..(i + 1) * f];
                model.probs(x, &mut p);
                p[train_y[i]] -= 1.0;
                for c in 0..k {
                    let row = &mut grad[c * (f + 1)..(c + 1) * (f + 1)];
                    for (g, v) in row[..f].iter_mut().zip(x) {
                        *g += p[c] * v;
                    }
                    row[f] += p[c];
                }
            }
            let lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            let inv = 1.0 / batch.len() as f64;
            for (idx, (w, v)) in model.w.iter_mut().zip(velocity.iter_mut()).enumerate() {
                let is_bias = idx % (f + 1) == f;
                let wd = if is_bias {
                    0.0
                } else {
                    config.weight_decay * *w
                };
                *v = config.momentum * *v + grad[idx] * inv + wd;
                *w -= lr * *v;
            }
            step += 1;
        }
    }

    let mut loss = 0.0;
    for i in 0..n {
        model.probs(&xs[i * f..(i + 1) * f], &mut p);
        loss -= p[train_y[i]].max(f64::MIN_POSITIVE).ln();
    }
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for i in 0..nt {
        let y = test_y[i];
        counts[y] += 1;
        if model.predict(&xt[i * f..(i + 1) * f], &mut p) == y {
            hits[y] += 1;
        }
    }
    let top1 = if nt == 0 {
        0.0
    } else {
        hits.iter().sum::<usize>() as f64 / nt as f64
    };
    Ok(ProbeResult {
        top1,
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        epochs: config.epochs,
        final_loss: loss / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDiagnostics {
    /// Raw per-feature batch std (population).
    pub feature_std: Vec<f64>,
    pub mean_abs_off_diagonal: f64,
    pub diagonal_mean: f64,
    /// `½·log|(R + jI)/(1 + j)|` for the feature correlation matrix `R`.
    pub entropy_proxy: f64,
    /// `exp` of the spectral entropy of `R`.
    pub effective_rank: f64,
    pub collapsed_features: usize,
}

impl EmbeddingDiagnostics {
    pub fn min_std(&self) -> f64 {
        self.feature_std
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Feature correlation matrix `standardize(Z)ᵀ·standardize(Z)/N` as plain
/// values, and the indices of collapsed features.
pub fn correlation_matrix(z: &Tensor) -> Result<(Vec<f64>, Vec<usize>)> {
    let z = z.detach();
    let n = z.shape()[0];
    let s = standardize_batch(&z, DEFAULT_STANDARDIZE_EPS)?;
    let r = s.values.t()?.matmul(&s.values)?.scale(1.0 / n as f64)?;
    Ok((r.to_vec(), s.collapsed))
}

/// `½·log|(R + jI)/(1 + j)|`. Nonpositive for any correlation matrix.
pub fn entropy_proxy(r: &[f64], d: usize, jitter: f64) -> Result<f64> {
    let t = Tensor::new(r.to_vec(), &[d, d])?;
    let (_, logdet) = inverse_and_logdet(&t, jitter)?;
    Ok(0.5 * (logdet - d as f64 * (1.0 + jitter).ln()))
}

/// `exp(−Σ p_k log p_k)` with `p` the normalized nonnegative eigenvalues.
pub fn effective_rank(r: &[f64], d: usize) -> f64 {
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, r)).eigenvalues;
    let vals: Vec<f64> = eig.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    let h: f64 = vals
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    h.exp().clamp(1.0, d as f64)
}

fn feature_std(z: &Tensor) -> Result<Vec<f64>> {
    Ok(z.detach().std_axis(0, false)?.to_vec())
}

/// Diagnostics of one embedding batch, all from the feature correlation
/// matrix of `z`.
pub fn embedding_diagnostics(z: &Tensor) -> Result<EmbeddingDiagnostics> {
    let (n, d) = matrix_dims(z, "embedding diagnostics")?;
    if n < 2 {
        return Err(precondition(format!(
            "diagnostics need N >= 2, got N = {n}"
        )));
    }
    let (r, collapsed) = correlation_matrix(z)?;
    Ok(EmbeddingDiagnostics {
        feature_std: feature_std(z)?,
        mean_abs_off_diagonal: mean_abs_off_diagonal(&r, d),
        diagonal_mean: (0..d).map(|i| r[i * d + i]).sum::<f64>() / d as f64,
        entropy_proxy: entropy_proxy(&r, d, DEFAULT_JITTER)?,
        effective_rank: effective_rank(&r, d),
        collapsed_features: collapsed.len(),
    })
}

/// Like [`embedding_diagnostics`] on `za`, but the off-diagonal and
/// diagonal summaries come from the twin cross-correlation `C(za, zb)`.
/// Collapsed features are counted over both branches.
pub fn twin_diagnostics(za: &Tensor, zb: &Tensor) -> Result<EmbeddingDiagnostics> {
    let mut diag = embedding_diagnostics(za)?;
    let c = cross_correlation(&za.detach(), &zb.detach(), DEFAULT_STANDARDIZE_EPS)?;
    diag.mean_abs_off_diagonal = c.mean_abs_off_diagonal();
    diag.diagonal_mean = c.diagonal_mean();
    let mut collapsed = c.collapsed_a.clone();
    collapsed.extend(&c.collapsed_b);
    collapsed.sort_unstable();
    collapsed.dedup();
    diag.collapsed_features = collapsed.len();
    Ok(diag)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDiagnostics {
    /// `log|Cov_k(z) + jitter·I|` per image.
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub views: usize,
}

/// For each image, embed `k` augmented views in eval mode and take the
/// jittered log-determinant of their `D×D` covariance (1/K normalization).
pub fn conditional_entropy_diagnostic(
    model: &SiameseModel,
    images: &[Image],
    policy: &AugmentationPolicy,
    k: usize,
    seed: u64,
    jitter: f64,
) -> Result<ConditionalDiagnostics> {
    if k < 2 {
        return Err(precondition(format!(
            "conditional diagnostic needs K >= 2 views, got {k}"
        )));
    }
    if images.is_empty() {
        return Err(precondition(
            "conditional diagnostic needs at least one image",
        ));
    }
    let seed = seed ^ stream::CONDITIONAL.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut per_sample = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let mut data = Vec::with_capacity(k * img.len());
        for view in 0..k {
            data.extend(augment(img, policy, View::A, seed, i as u64, view as u64)?.pixels);
        }
        let z = model.embeddings_eval(&Tensor::new(data, &[k, img.len()])?)?;
        let centered = z.sub(&z.mean_axis(0, true)?)?;
        let cov = centered.t()?.matmul(&centered)?.scale(1.0 / k as f64)?;
        let (_, logdet) = inverse_and_logdet(&cov, jitter)?;
        per_sample.push(logdet);
    }
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(ConditionalDiagnostics {
        per_sample,
        mean,
        views: k,
    })
}
