use proptest::prelude::*;
use twinlab::losses::{
    barlow_twins_from_matrix, barlow_twins_loss, cross_correlation, imax_loss, info_nce_loss,
    pearson_cross_correlation, variant_losses, LossConfig, LossVariant, DEFAULT_STANDARDIZE_EPS,
};
use twinlab::tensor::grad_check;
use twinlab::{Rng, Tensor};

fn random(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    Tensor::new((0..n * d).map(|_| rng.normal()).collect(), &[n, d]).unwrap()
}

fn col(z: &[f64], d: usize, j: usize) -> Vec<f64> {
    z.iter().skip(j).step_by(d).copied().collect()
}

/// Pearson correlation written straight from its definition.
fn corr_oracle(za: &Tensor, zb: &Tensor) -> Vec<f64> {
    let (n, d) = (za.shape()[0], za.shape()[1]);
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        let a = col(za.data(), d, i);
        let ma = a.iter().sum::<f64>() / n as f64;
        for j in 0..d {
            let b = col(zb.data(), d, j);
            let mb = b.iter().sum::<f64>() / n as f64;
            let mut num = 0.0;
            let mut sa = 0.0;
            let mut sb = 0.0;
            for k in 0..n {
                num += (a[k] - ma) * (b[k] - mb);
                sa += (a[k] - ma).powi(2);
                sb += (b[k] - mb).powi(2);
            }
            out[i * d + j] = num / (sa.sqrt() * sb.sqrt());
        }
    }
    out
}

fn bt_oracle(c: &[f64], d: usize, lambda: f64) -> f64 {
    let mut inv = 0.0;
    let mut red = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                inv += (1.0 - c[i * d + i]).powi(2);
            } else {
                red += c[i * d + j].powi(2);
            }
        }
    }
    inv + lambda * red
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn det(a: &[f64], n: usize) -> f64 {
    if n == 1 {
        return a[0];
    }
    (0..n)
        .map(|col| {
            let minor: Vec<f64> = (1..n)
                .flat_map(|r| (0..n).filter(move |&c| c != col).map(move |c| a[r * n + c]))
                .collect();
            let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
            sign * a[col] * det(&minor, n - 1)
        })
        .sum()
}

fn total(za: &Tensor, zb: &Tensor, cfg: &LossConfig) -> f64 {
    variant_losses(za, zb, cfg).unwrap().total_value()
}

#[test]
fn cross_correlation_matches_summation_oracle_on_100_cases() {
    let mut rng = Rng::new(2024);
    for case in 0..100 {
        let n = 2 + rng.below(15);
        let d = 1 + rng.below(8);
        let za = random(&mut rng, n, d).scale(rng.range(0.1, 5.0)).unwrap();
        let zb = random(&mut rng, n, d).add_scalar(rng.range(-3.0, 3.0)).unwrap();
        let c = cross_correlation(&za, &zb, DEFAULT_STANDARDIZE_EPS).unwrap();
        let oracle = corr_oracle(&za, &zb);
        let sum_form = pearson_cross_correlation(&za, &zb, DEFAULT_STANDARDIZE_EPS).unwrap();
        for k in 0..d * d {
            let m = c.values.data()[k];
            assert!((m - oracle[k]).abs() < 1e-10, "case {case}: {m} vs {}", oracle[k]);
            assert!((sum_form[k] - m).abs() < 1e-9, "case {case}: summation vs matmul");
        }
    }
}

#[test]
fn cross_correlation_of_identical_views_has_unit_diagonal() {
    let z = random(&mut Rng::new(1), 16, 5);
    let c = cross_correlation(&z, &z, DEFAULT_STANDARDIZE_EPS).unwrap();
    for i in 0..5 {
        assert!((c.get(i, i) - 1.0).abs() < 1e-12);
    }
    assert!((c.diagonal_mean() - 1.0).abs() < 1e-12);
}

#[test]
fn constant_feature_is_reported_collapsed() {
    let mut z = random(&mut Rng::new(2), 8, 3).to_vec();
    for r in 0..8 {
        z[r * 3 + 1] = 4.0;
    }
    let z = Tensor::new(z, &[8, 3]).unwrap();
    let c = cross_correlation(&z, &z, DEFAULT_STANDARDIZE_EPS).unwrap();
    assert_eq!(c.collapsed_a, vec![1]);
    assert!(c.get(1, 1).abs() < 1e-12);
}

#[test]
fn batch_of_one_is_rejected() {
    let z = Tensor::zeros(&[1, 4]);
    assert!(cross_correlation(&z, &z, DEFAULT_STANDARDIZE_EPS).is_err());
    let cfg = LossConfig::default();
    assert!(variant_losses(&z, &z, &cfg).is_err());
}

#[test]
fn mismatched_twins_are_rejected() {
    let a = Tensor::zeros(&[4, 3]);
    let b = Tensor::zeros(&[4, 2]);
    assert!(variant_losses(&a, &b, &LossConfig::default()).is_err());
}

#[test]
fn zero_matrix_costs_the_dimension() {
    for d in [1, 4, 9] {
        let l = barlow_twins_from_matrix(&Tensor::zeros(&[d, d]), 0.3).unwrap();
        assert!((l.total_value() - d as f64).abs() < 1e-15);
        assert_eq!(l.redundancy_term, 0.0);
    }
}

#[test]
fn identity_matrix_costs_nothing() {
    for lambda in [0.0, 5e-4, 5e-3, 5e-2, 1.0, 100.0] {
        let l = barlow_twins_from_matrix(&Tensor::eye(6), lambda).unwrap();
        assert_eq!(l.total_value(), 0.0);
    }
}

#[test]
fn barlow_twins_matches_oracle() {
    let mut rng = Rng::new(4);
    let za = random(&mut rng, 10, 6);
    let zb = random(&mut rng, 10, 6);
    let c = cross_correlation(&za, &zb, DEFAULT_STANDARDIZE_EPS).unwrap();
    let l = barlow_twins_loss(&c, 0.05).unwrap();
    let want = bt_oracle(&corr_oracle(&za, &zb), 6, 0.05);
    assert!((l.total_value() - want).abs() < 1e-10);
    assert!((l.invariance_term + 0.05 * l.redundancy_term - want).abs() < 1e-10);
}

#[test]
fn single_term_variants_keep_their_half() {
    let mut rng = Rng::new(6);
    let za = random(&mut rng, 10, 4);
    let zb = random(&mut rng, 10, 4);
    let full = variant_losses(&za, &zb, &LossConfig::default()).unwrap();
    let inv = variant_losses(&za, &zb, &LossConfig::with_variant(LossVariant::OnlyInvariance)).unwrap();
    let red = variant_losses(&za, &zb, &LossConfig::with_variant(LossVariant::OnlyRedundancy)).unwrap();
    assert!((inv.total_value() - full.invariance_term).abs() < 1e-12);
    assert!((red.total_value() - full.redundancy_weight * full.redundancy_term).abs() < 1e-12);
}

#[test]
fn cross_entropy_temp_matches_oracle() {
    let mut rng = Rng::new(8);
    let za = random(&mut rng, 12, 5);
    let zb = random(&mut rng, 12, 5);
    let cfg = LossConfig {
        lambda: 0.1,
        tau: 0.2,
        ..LossConfig::with_variant(LossVariant::CrossEntropyTemp)
    };
    let c = corr_oracle(&za, &zb);
    let diag: Vec<f64> = (0..5).map(|i| c[i * 5 + i] / 0.2).collect();
    let off: Vec<f64> = (0..25)
        .filter(|k| k / 5 != k % 5)
        .map(|k| c[k].max(0.0) / 0.2)
        .collect();
    let want = -logsumexp(&diag) + 0.1 * logsumexp(&off);
    assert!((total(&za, &zb, &cfg) - want).abs() < 1e-9);
}

#[test]
fn cross_covariance_matches_oracle() {
    let mut rng = Rng::new(12);
    let za = random(&mut rng, 9, 3);
    let zb = random(&mut rng, 9, 3);
    let (n, d) = (9, 3);
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        let a = col(za.data(), d, i);
        let ma = a.iter().sum::<f64>() / n as f64;
        for j in 0..d {
            let b = col(zb.data(), d, j);
            let mb = b.iter().sum::<f64>() / n as f64;
            c[i * d + j] = (0..n).map(|k| (a[k] - ma) * (b[k] - mb)).sum::<f64>() / n as f64;
        }
    }
    let cfg = LossConfig::with_variant(LossVariant::CrossCovariance);
    assert!((total(&za, &zb, &cfg) - bt_oracle(&c, d, cfg.lambda)).abs() < 1e-10);
}

#[test]
fn feature_dim_norm_matches_oracle() {
    let mut rng = Rng::new(13);
    let (n, d) = (7, 4);
    let za = random(&mut rng, n, d);
    let zb = random(&mut rng, n, d);
    let prep = |z: &Tensor| -> Vec<f64> {
        let mut s = vec![0.0; n * d];
        for j in 0..d {
            let c = col(z.data(), d, j);
            let m = c.iter().sum::<f64>() / n as f64;
            let sd = (c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            for k in 0..n {
                s[k * d + j] = (c[k] - m) / sd;
            }
        }
        for k in 0..n {
            let norm = s[k * d..(k + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
            s[k * d..(k + 1) * d].iter_mut().for_each(|x| *x /= norm);
        }
        s
    };
    let (a, b) = (prep(&za), prep(&zb));
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            c[i * d + j] = (0..n).map(|k| a[k * d + i] * b[k * d + j]).sum::<f64>() * d as f64 / n as f64;
        }
    }
    let cfg = LossConfig::with_variant(LossVariant::FeatureDimNorm);
    assert!((total(&za, &zb, &cfg) - bt_oracle(&c, d, cfg.lambda)).abs() < 1e-10);
}

#[test]
fn info_nce_matches_oracle() {
    let mut rng = Rng::new(14);
    let (n, d, tau) = (6, 4, 0.5);
    let za = random(&mut rng, n, d);
    let zb = random(&mut rng, n, d);
    let unit = |z: &Tensor, r: usize| -> Vec<f64> {
        let row = &z.data()[r * d..(r + 1) * d];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter().map(|x| x / norm).collect()
    };
    let cos = |i: usize, j: usize| -> f64 {
        unit(&za, i).iter().zip(unit(&zb, j)).map(|(x, y)| x * y).sum()
    };
    let mut want = 0.0;
    for b in 0..n {
        want -= cos(b, b) / tau;
        let others: Vec<f64> = (0..n).filter(|&k| k != b).map(|k| cos(b, k) / tau).collect();
        want += logsumexp(&others);
    }
    let got = info_nce_loss(&za, &zb, tau).unwrap().item();
    assert!((got - want).abs() < 1e-10);
    let cfg = LossConfig {
        tau,
        ..LossConfig::with_variant(LossVariant::InfoNce)
    };
    assert!((total(&za, &zb, &cfg) - want).abs() < 1e-10);
}

#[test]
fn cosine_loss_of_aligned_views_is_minus_n() {
    let z = random(&mut Rng::new(15), 5, 3);
    let cfg = LossConfig::with_variant(LossVariant::Cosine);
    assert!((total(&z, &z.scale(3.0).unwrap(), &cfg) + 5.0).abs() < 1e-12);
}

#[test]
fn imax_matches_determinant_oracle() {
    let mut rng = Rng::new(16);
    let (n, d) = (12, 3);
    let za = random(&mut rng, n, d);
    let zb = random(&mut rng, n, d);
    let cov = |m: Vec<f64>| -> Vec<f64> {
        let mut c = vec![0.0; d * d];
        let means: Vec<f64> = (0..d).map(|j| col(&m, d, j).iter().sum::<f64>() / n as f64).collect();
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] = (0..n)
                    .map(|k| (m[k * d + i] - means[i]) * (m[k * d + j] - means[j]))
                    .sum::<f64>()
                    / n as f64;
            }
        }
        c
    };
    let diff: Vec<f64> = za.data().iter().zip(zb.data()).map(|(a, b)| a - b).collect();
    let sum: Vec<f64> = za.data().iter().zip(zb.data()).map(|(a, b)| a + b).collect();
    let want = det(&cov(diff), d).ln() - det(&cov(sum), d).ln();
    let got = imax_loss(&za, &zb, 0.0).unwrap().item();
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn every_variant_passes_gradcheck_at_8x8() {
    let mut rng = Rng::new(17);
    let za = random(&mut rng, 8, 8);
    let zb = random(&mut rng, 8, 8);
    for variant in LossVariant::ALL {
        let cfg = LossConfig {
            lambda: 0.05,
            ..LossConfig::with_variant(variant)
        };
        // IMAX needs N > D for a full-rank covariance
        let (a, b) = if variant == LossVariant::Imax {
            (random(&mut rng, 8, 4), random(&mut rng, 8, 4))
        } else {
            (za.clone(), zb.clone())
        };
        let r = grad_check(
            |v: &[Tensor]| {
                variant_losses(&v[0], &v[1], &cfg)
                    .map(|l| l.total)
                    .map_err(|e| twinlab::TensorError::Domain { op: "loss", detail: e.to_string() })
            },
            &[a, b],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{variant}: worst {:e}", r.worst());
    }
}

#[test]
fn variant_names_round_trip() {
    for v in LossVariant::ALL {
        assert_eq!(v.name().parse::<LossVariant>().unwrap(), v);
    }
    assert!("barlow".parse::<LossVariant>().is_err());
}

#[test]
fn negative_lambda_is_a_config_error() {
    let cfg = LossConfig {
        lambda: -1.0,
        ..LossConfig::default()
    };
    assert!(cfg.validate().is_err());
}

fn pair(seed: u64, n: usize, d: usize) -> (Tensor, Tensor) {
    let mut rng = Rng::new(seed);
    (random(&mut rng, n, d), random(&mut rng, n, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_nonnegative(seed in any::<u64>(), n in 2usize..=16, d in 1usize..=8, lambda in 0.0f64..10.0) {
        let (za, zb) = pair(seed, n, d);
        let cfg = LossConfig { lambda, ..LossConfig::default() };
        let l = variant_losses(&za, &zb, &cfg).unwrap();
        prop_assert!(l.total_value() >= 0.0);
        prop_assert!(l.invariance_term >= 0.0 && l.redundancy_term >= 0.0);
    }

    #[test]
    fn loss_is_invariant_to_positive_affine_rescaling(
        seed in any::<u64>(), n in 4usize..=16, d in 1usize..=8,
        scales in prop::collection::vec(0.1f64..10.0, 8),
        shifts in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let (za, zb) = pair(seed, n, d);
        let rescale = |z: &Tensor, k: usize| -> Tensor {
            let data = z.data().iter().enumerate().map(|(i, v)| {
                let j = i % d;
                v * scales[(j + k) % 8] + shifts[(j + k) % 8]
            }).collect();
            Tensor::new(data, &[n, d]).unwrap()
        };
        let cfg = LossConfig::default();
        let base = total(&za, &zb, &cfg);
        let moved = total(&rescale(&za, 0), &rescale(&zb, 3), &cfg);
        prop_assert!((base - moved).abs() < 1e-9, "{} vs {}", base, moved);
    }

    #[test]
    fn loss_is_invariant_to_joint_feature_permutation(seed in any::<u64>(), n in 2usize..=16, d in 1usize..=8) {
        let (za, zb) = pair(seed, n, d);
        let perm = Rng::new(seed ^ 0xabc).permutation(d);
        let permute = |z: &Tensor| -> Tensor {
            let data = (0..n * d).map(|k| z.data()[(k / d) * d + perm[k % d]]).collect();
            Tensor::new(data, &[n, d]).unwrap()
        };
        let cfg = LossConfig::default();
        let a = total(&za, &zb, &cfg);
        let b = total(&permute(&za), &permute(&zb), &cfg);
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn correlation_entries_are_bounded(seed in any::<u64>(), n in 2usize..=16, d in 1usize..=8) {
        let (za, zb) = pair(seed, n, d);
        let c = cross_correlation(&za, &zb, DEFAULT_STANDARDIZE_EPS).unwrap();
        for v in c.values.data() {
            prop_assert!(v.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn swapping_views_transposes_c(seed in any::<u64>(), n in 2usize..=12, d in 1usize..=6) {
        let (za, zb) = pair(seed, n, d);
        let ab = cross_correlation(&za, &zb, DEFAULT_STANDARDIZE_EPS).unwrap();
        let ba = cross_correlation(&zb, &za, DEFAULT_STANDARDIZE_EPS).unwrap();
        for i in 0..d {
            for j in 0..d {
                prop_assert!((ab.get(i, j) - ba.get(j, i)).abs() < 1e-12);
            }
        }
    }
}
