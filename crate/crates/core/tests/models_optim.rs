use proptest::prelude::*;
use twinlab::models::{Mode, Param, ParamGroupKind, BN_EPS};
use twinlab::optim::{OptimConfig, Optimizer, OptimizerKind, ScheduleConfig};
use twinlab::{Asymmetry, ModelConfig, Rng, SiameseModel, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        encoder_widths: vec![4],
        repr_dim: 2,
        encoder_bn: true,
        projector_widths: vec![3, 2],
        projector_bn: true,
        predictor_hidden: vec![3],
        asymmetry: Asymmetry::None,
    }
}

fn get(m: &SiameseModel, name: &str) -> Vec<f64> {
    m.param(name).unwrap_or_else(|| panic!("no param {name}")).value.to_vec()
}

// x: n×i rows, w: o×i
fn linear(x: &[Vec<f64>], w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let o = b.len();
    let i = x[0].len();
    x.iter()
        .map(|row| (0..o).map(|r| b[r] + (0..i).map(|c| w[r * i + c] * row[c]).sum::<f64>()).collect())
        .collect()
}

fn batch_norm(x: &[Vec<f64>], gamma: &[f64], beta: &[f64]) -> Vec<Vec<f64>> {
    let n = x.len() as f64;
    let w = x[0].len();
    let mean: Vec<f64> = (0..w).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..w)
        .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(BN_EPS))
        .collect();
    x.iter()
        .map(|r| (0..w).map(|j| (r[j] - mean[j]) / std[j] * gamma[j] + beta[j]).collect())
        .collect()
}

fn relu(x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

fn block(m: &SiameseModel, x: &[Vec<f64>], name: &str, last: bool) -> Vec<Vec<f64>> {
    let y = linear(x, &get(m, &format!("{name}.weight")), &get(m, &format!("{name}.bias")));
    if last {
        return y;
    }
    relu(batch_norm(&y, &get(m, &format!("{name}.bn.gamma")), &get(m, &format!("{name}.bn.beta"))))
}

fn perturbed(cfg: &ModelConfig, seed: u64) -> SiameseModel {
    // nonzero biases and non-unit BN affine so the oracle exercises them
    let m = SiameseModel::init_parameters(cfg, seed).unwrap();
    let mut rng = Rng::new(seed + 1);
    let values: Vec<Tensor> = m
        .params()
        .iter()
        .map(|p| {
            let data = p.value.data().iter().map(|v| v + 0.3 * rng.normal()).collect();
            Tensor::parameter(data, p.value.shape()).unwrap()
        })
        .collect();
    m.with_param_values(&values).unwrap()
}

#[test]
fn train_forward_matches_layer_by_layer_oracle() {
    let mut m = perturbed(&tiny(), 3);
    let mut rng = Rng::new(4);
    let x: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
    let input = Tensor::from_rows(&x).unwrap();

    let h = block(&m, &x, "encoder.0", false);
    let r = block(&m, &h, "encoder.1", false);
    let p = block(&m, &r, "projector.0", false);
    let z = block(&m, &p, "projector.1", true);

    let got = m.embed(&input).unwrap();
    assert_eq!(got.shape(), &[6, 2]);
    for (k, v) in got.data().iter().enumerate() {
        assert!((v - z[k / 2][k % 2]).abs() < 1e-12);
    }
}

#[test]
fn running_stats_follow_momentum_update() {
    let mut m = SiameseModel::init_parameters(&tiny(), 0).unwrap();
    let mut rng = Rng::new(1);
    let x: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
    m.encoder_forward(&Tensor::from_rows(&x).unwrap()).unwrap();
    let y = linear(&x, &get(&m, "encoder.0.weight"), &get(&m, "encoder.0.bias"));
    let stats = &m.running_stats()[0].1;
    for j in 0..4 {
        let mean = y.iter().map(|r| r[j]).sum::<f64>() / 5.0;
        let var = y.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((stats.mean[j] - 0.1 * mean).abs() < 1e-12);
        assert!((stats.var[j] - (0.9 + 0.1 * var)).abs() < 1e-12);
    }
}

#[test]
fn eval_mode_uses_running_stats() {
    let mut m = SiameseModel::init_parameters(&tiny(), 0).unwrap();
    m.set_mode(Mode::Eval);
    assert_eq!(m.mode(), Mode::Eval);
    let x = Tensor::new(vec![0.5, -1.0, 2.0], &[1, 3]).unwrap();
    // fresh stats are mean 0, var 1, so BN is the identity and N = 1 works
    let r = m.representations(&x).unwrap();
    let h = relu(linear(&[x.to_vec()], &get(&m, "encoder.0.weight"), &get(&m, "encoder.0.bias")));
    let want = relu(linear(&h, &get(&m, "encoder.1.weight"), &get(&m, "encoder.1.bias")));
    for (a, b) in r.data().iter().zip(&want[0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn he_init_has_expected_variance() {
    let cfg = ModelConfig {
        input_dim: 400,
        encoder_widths: vec![300],
        repr_dim: 8,
        projector_widths: vec![4],
        ..tiny()
    };
    let m = SiameseModel::init_parameters(&cfg, 9).unwrap();
    let w = get(&m, "encoder.0.weight");
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
    let want = 2.0 / 400.0;
    assert!((var / want - 1.0).abs() < 0.02, "variance {var} vs {want}");
    assert!(get(&m, "encoder.0.bias").iter().all(|&b| b == 0.0));
    assert!(get(&m, "encoder.0.bn.gamma").iter().all(|&g| g == 1.0));
}

#[test]
fn init_is_seed_deterministic() {
    let a = SiameseModel::init_parameters(&tiny(), 5).unwrap();
    let b = SiameseModel::init_parameters(&tiny(), 5).unwrap();
    let c = SiameseModel::init_parameters(&tiny(), 6).unwrap();
    for ((pa, pb), pc) in a.params().iter().zip(b.params()).zip(c.params()) {
        assert_eq!(pa.value.data(), pb.value.data());
        if pa.group == ParamGroupKind::Adapted {
            assert_ne!(pa.value.data(), pc.value.data());
        }
    }
}

#[test]
fn stop_gradient_detaches_second_branch() {
    let cfg = ModelConfig {
        asymmetry: Asymmetry::StopGrad,
        ..tiny()
    };
    let mut m = SiameseModel::init_parameters(&cfg, 0).unwrap();
    let x = Tensor::new((0..12).map(|v| v as f64 * 0.1).collect(), &[4, 3]).unwrap();
    let (za, zb) = m.twins_forward(&x, &x.scale(-1.0).unwrap()).unwrap();
    assert!(za.requires_grad());
    assert!(!zb.requires_grad());
}

#[test]
fn predictor_only_on_first_branch() {
    let cfg = ModelConfig {
        asymmetry: Asymmetry::Predictor,
        ..tiny()
    };
    let mut m = SiameseModel::init_parameters(&cfg, 0).unwrap();
    assert!(m.param("predictor.0.weight").is_some());
    let x = Tensor::new((0..12).map(|v| (v as f64).sin()).collect(), &[4, 3]).unwrap();
    let (za, zb) = m.twins_forward(&x, &x).unwrap();
    assert_eq!(za.shape(), zb.shape());
    assert_ne!(za.data(), zb.data());
    let mut plain = SiameseModel::init_parameters(&tiny(), 0).unwrap();
    assert!(plain.predictor_forward(&zb).is_err());
}

#[test]
fn wrong_input_width_is_rejected() {
    let mut m = SiameseModel::init_parameters(&tiny(), 0).unwrap();
    assert!(m.encoder_forward(&Tensor::zeros(&[4, 5])).is_err());
}

// --- optimizer ---

fn params_with(values: &[(&str, Vec<f64>, ParamGroupKind)]) -> Vec<Param> {
    values
        .iter()
        .map(|(name, v, g)| Param {
            name: name.to_string(),
            value: Tensor::parameter(v.clone(), &[v.len()]).unwrap(),
            group: *g,
        })
        .collect()
}

/// Give each parameter the gradient `g` via `sum(w * g)`.
fn set_grads(params: &[Param], grads: &[Vec<f64>]) {
    let mut total = Tensor::scalar(0.0);
    for (p, g) in params.iter().zip(grads) {
        let g = Tensor::new(g.clone(), &[g.len()]).unwrap();
        total = total.add(&p.value.mul(&g).unwrap().sum_all()).unwrap();
    }
    total.backward().unwrap();
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn sgd_matches_hand_unrolled_updates() {
    let cfg = OptimConfig {
        optimizer: OptimizerKind::Sgd,
        momentum: 0.9,
        weight_decay: 0.01,
        ..OptimConfig::default()
    };
    let mut params = params_with(&[
        ("w", vec![1.0, -2.0, 0.5], ParamGroupKind::Adapted),
        ("b", vec![0.3, 0.0], ParamGroupKind::Excluded),
    ]);
    let mut opt = Optimizer::new(&params, cfg).unwrap();
    let grads = [vec![vec![0.1, 0.2, -0.3], vec![1.0, -1.0]], vec![vec![-0.5, 0.0, 0.4], vec![0.2, 0.2]]];
    let (lr_w, lr_b) = (0.1, 0.01);

    let mut w = vec![1.0, -2.0, 0.5];
    let mut b = vec![0.3, 0.0];
    let mut vw = vec![0.0; 3];
    let mut vb = vec![0.0; 2];
    for g in &grads {
        set_grads(&params, g);
        opt.step(&mut params, lr_w, lr_b).unwrap();
        for k in 0..3 {
            vw[k] = 0.9 * vw[k] + g[0][k] + 0.01 * w[k];
            w[k] -= lr_w * vw[k];
        }
        for k in 0..2 {
            vb[k] = 0.9 * vb[k] + g[1][k];
            b[k] -= lr_b * vb[k];
        }
    }
    for (a, e) in params[0].value.data().iter().zip(&w) {
        assert!((a - e).abs() < 1e-15);
    }
    for (a, e) in params[1].value.data().iter().zip(&b) {
        assert!((a - e).abs() < 1e-15);
    }
}

#[test]
fn lars_matches_hand_unrolled_updates() {
    let cfg = OptimConfig {
        optimizer: OptimizerKind::Lars,
        momentum: 0.9,
        weight_decay: 1e-3,
        eta: 0.02,
        ..OptimConfig::default()
    };
    let mut params = params_with(&[
        ("w", vec![3.0, 4.0], ParamGroupKind::Adapted),
        ("b", vec![1.0], ParamGroupKind::Excluded),
    ]);
    let mut opt = Optimizer::new(&params, cfg).unwrap();
    let grads = [vec![vec![0.6, -0.8], vec![0.5]], vec![vec![0.1, 0.3], vec![-0.5]]];

    let mut w = vec![3.0, 4.0];
    let mut b = 1.0;
    let mut vw = vec![0.0; 2];
    let mut vb = 0.0;
    for g in &grads {
        set_grads(&params, g);
        opt.step(&mut params, 0.5, 0.05).unwrap();
        let d: Vec<f64> = (0..2).map(|k| g[0][k] + 1e-3 * w[k]).collect();
        let trust = 0.02 * norm(&w) / norm(&d);
        for k in 0..2 {
            vw[k] = 0.9 * vw[k] + trust * d[k];
            w[k] -= 0.5 * vw[k];
        }
        vb = 0.9 * vb + g[1][0];
        b -= 0.05 * vb;
    }
    for (a, e) in params[0].value.data().iter().zip(&w) {
        assert!((a - e).abs() < 1e-15);
    }
    assert!((params[1].value.data()[0] - b).abs() < 1e-15);
}

#[test]
fn excluded_group_is_fixed_point_under_zero_gradient() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Lars] {
        let cfg = OptimConfig {
            optimizer: kind,
            weight_decay: 0.1,
            ..OptimConfig::default()
        };
        let start = vec![0.7, -1.3, 2.0];
        let mut params = params_with(&[
            ("w", vec![1.0, 1.0], ParamGroupKind::Adapted),
            ("bn.gamma", start.clone(), ParamGroupKind::Excluded),
        ]);
        let mut opt = Optimizer::new(&params, cfg).unwrap();
        for _ in 0..5 {
            set_grads(&params, &[vec![0.0; 2], vec![0.0; 3]]);
            opt.step(&mut params, 1.0, 1.0).unwrap();
        }
        assert_eq!(params[1].value.data(), &start[..]);
        // weight decay still moves the adapted group
        assert_ne!(params[0].value.data(), &[1.0, 1.0]);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut params = params_with(&[("w", vec![1.0, 2.0], ParamGroupKind::Adapted)]);
    let mut opt = Optimizer::new(&params, OptimConfig::default()).unwrap();
    set_grads(&params, &[vec![5.0, -5.0]]);
    opt.step(&mut params, 0.0, 0.0).unwrap();
    assert_eq!(params[0].value.data(), &[1.0, 2.0]);
}

#[test]
fn missing_gradient_is_an_error() {
    let mut params = params_with(&[("w", vec![1.0], ParamGroupKind::Adapted)]);
    let mut opt = Optimizer::new(&params, OptimConfig::default()).unwrap();
    assert!(opt.step(&mut params, 0.1, 0.1).is_err());
}

// --- schedule ---

fn schedule(base: f64, batch: usize) -> ScheduleConfig {
    ScheduleConfig {
        base_lr: base,
        bias_lr: 0.0048,
        batch_size: batch,
        warmup_epochs: 1.0,
        total_epochs: 30,
        final_lr_ratio: 1e-3,
    }
}

#[test]
fn schedule_endpoints() {
    let s = schedule(0.2, 2048);
    let spe = 10;
    let (scaled, _) = s.scaled_lr();
    assert_eq!(scaled, 1.6);
    assert_eq!(s.lr_at(0, spe).unwrap(), 0.0);
    assert_eq!(s.lr_at(s.warmup_steps(spe), spe).unwrap(), scaled);
    let last = s.lr_at(s.total_steps(spe), spe).unwrap();
    assert!((last - scaled / 1000.0).abs() < 1e-12);
    assert!(s.lr_at(s.total_steps(spe) + 1, spe).is_err());
}

#[test]
fn bias_rate_scales_with_batch() {
    let s = schedule(0.2, 512);
    let (w, b) = s.scaled_lr();
    assert!((w - 0.4).abs() < 1e-15);
    assert!((b - 0.0096).abs() < 1e-15);
}

#[test]
fn config_builds_schedule_with_warmup_fraction() {
    let s = OptimConfig::default().schedule(64, 30);
    assert!((s.warmup_epochs - 1.0).abs() < 1e-12);
    assert_eq!(s.batch_size, 64);
    s.validate().unwrap();
}

proptest! {
    #[test]
    fn schedule_is_bounded_and_warmup_monotone(base in 0.01f64..2.0, batch in 1usize..4096, spe in 1usize..40) {
        let s = schedule(base, batch);
        let (scaled, _) = s.scaled_lr();
        let warm = s.warmup_steps(spe);
        let mut prev = -1.0;
        for step in 0..=s.total_steps(spe) {
            let lr = s.lr_at(step, spe).unwrap();
            prop_assert!(lr >= 0.0 && lr <= scaled * (1.0 + 1e-12));
            if step <= warm {
                prop_assert!(lr >= prev);
            } else {
                prop_assert!(lr <= prev + 1e-15);
            }
            prev = lr;
        }
    }
}
