//! The finite-difference check run by the `gradcheck` command.

use crate::error::Result;
use crate::losses::{variant_losses, LossConfig, LossVariant};
use crate::models::{ModelConfig, SiameseModel};
use crate::rng::{stream, Rng};
use crate::tensor::{grad_check, GradCheckReport, Tensor, TensorError};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const DEFAULT_GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: String,
    pub report: GradCheckReport,
}

fn as_tensor_error(e: crate::Error) -> TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::Domain {
            op: "loss",
            detail: other.to_string(),
        },
    }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.normal()).collect(), shape).expect("shape matches data")
}

/// Check every differentiable op, every loss variant and a full twin
/// forward pass on small random inputs (N = 8, D = 4).
pub fn gradcheck_suite(tol: f64, seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut rng = Rng::keyed(seed, &[stream::FIXTURE]);
    let mut cases = Vec::new();
    let mut run = |name: &str,
                   f: &dyn Fn(&[Tensor]) -> crate::tensor::Result<Tensor>,
                   inputs: &[Tensor]|
     -> Result<()> {
        let report = grad_check(f, inputs, GRADCHECK_EPS, tol)?;
        cases.push(GradCheckCase {
            name: name.to_string(),
            report,
        });
        Ok(())
    };

    let a = random(&mut rng, &[8, 4]);
    let b = random(&mut rng, &[8, 4]);
    let w = random(&mut rng, &[4, 3]);
    let pos = Tensor::new(a.data().iter().map(|v| v.abs() + 0.5).collect(), &[8, 4])?;
    let spd = {
        let m = random(&mut rng, &[4, 4]);
        m.t()?.matmul(&m)?.add(&Tensor::eye(4))?.detach()
    };

    run(
        "add_sub_mul",
        &|v| Ok(v[0].add(&v[1])?.mul(&v[0].sub(&v[1])?)?.sum_all()),
        &[a.clone(), b.clone()],
    )?;
    run(
        "div",
        &|v| Ok(v[0].div(&v[1])?.sum_all()),
        &[a.clone(), pos.clone()],
    )?;
    run(
        "scale_neg_add_scalar",
        &|v| Ok(v[0].scale(1.7)?.neg()?.add_scalar(0.3)?.square()?.sum_all()),
        &[a.clone()],
    )?;
    run("pow", &|v| Ok(v[0].pow(1.5)?.sum_all()), &[pos.clone()])?;
    run(
        "sqrt_log",
        &|v| Ok(v[0].sqrt()?.add(&v[0].log()?)?.sum_all()),
        &[pos.clone()],
    )?;
    run(
        "exp",
        &|v| Ok(v[0].scale(0.5)?.exp()?.sum_all()),
        &[a.clone()],
    )?;
    run(
        "relu",
        &|v| Ok(v[0].relu()?.square()?.sum_all()),
        &[a.clone()],
    )?;
    run(
        "max_scalar",
        &|v| Ok(v[0].max_scalar(0.1)?.square()?.sum_all()),
        &[a.clone()],
    )?;
    run(
        "sum_mean_axis",
        &|v| {
            Ok(v[0]
                .sum_axis(0, false)?
                .square()?
                .sum_all()
                .add(&v[0].mean_axis(1, true)?.square()?.sum_all())?)
        },
        &[a.clone()],
    )?;
    run(
        "std_axis",
        &|v| Ok(v[0].std_axis(0, false)?.sum_all()),
        &[a.clone()],
    )?;
    run(
        "reshape_transpose",
        &|v| Ok(v[0].reshape(&[4, 8])?.t()?.mul(&v[1])?.sum_all()),
        &[a.clone(), b.clone()],
    )?;
    run(
        "matmul",
        &|v| Ok(v[0].matmul(&v[1])?.square()?.sum_all()),
        &[a.clone(), w.clone()],
    )?;
    run(
        "diagonal",
        &|v| Ok(v[0].t()?.matmul(&v[0])?.diagonal()?.square()?.sum_all()),
        &[a.clone()],
    )?;
    run("logdet", &|v| v[0].logdet(0.0), &[spd])?;

    for variant in LossVariant::ALL {
        let cfg = LossConfig {
            lambda: 0.05,
            ..LossConfig::with_variant(variant)
        };
        run(
            &format!("loss_{}", variant.name()),
            &|v| {
                variant_losses(&v[0], &v[1], &cfg)
                    .map(|l| l.total)
                    .map_err(as_tensor_error)
            },
            &[a.clone(), b.clone()],
        )?;
    }

    let model_cfg = ModelConfig {
        input_dim: 5,
        encoder_widths: vec![6],
        repr_dim: 5,
        projector_widths: vec![6, 4],
        predictor_hidden: vec![5],
        ..ModelConfig::default()
    };
    let model = SiameseModel::init_parameters(&model_cfg, seed)?;
    let ya = random(&mut rng, &[8, 5]);
    let yb = random(&mut rng, &[8, 5]);
    let cfg = LossConfig::default();
    run(
        "twin_forward_barlow_twins",
        &|v| {
            let mut m = model.clone();
            let (za, zb) = m.twins_forward(&v[0], &v[1]).map_err(as_tensor_error)?;
            variant_losses(&za, &zb, &cfg)
                .map(|l| l.total)
                .map_err(as_tensor_error)
        },
        &[ya, yb],
    )?;
    Ok(cases)
}
