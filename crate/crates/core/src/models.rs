//! MLP encoder, projector and predictor heads, and the weight-shared twin
//! application.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::{Tensor, TensorError};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Asymmetry {
    #[default]
    None,
    StopGrad,
    Predictor,
    Both,
}

impl Asymmetry {
    pub const ALL: [Asymmetry; 4] = [
        Asymmetry::None,
        Asymmetry::StopGrad,
        Asymmetry::Predictor,
        Asymmetry::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Asymmetry::None => "none",
            Asymmetry::StopGrad => "stop_grad",
            Asymmetry::Predictor => "predictor",
            Asymmetry::Both => "both",
        }
    }

    pub fn stop_gradient(self) -> bool {
        matches!(self, Asymmetry::StopGrad | Asymmetry::Both)
    }

    pub fn predictor(self) -> bool {
        matches!(self, Asymmetry::Predictor | Asymmetry::Both)
    }
}

impl fmt::Display for Asymmetry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Asymmetry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Asymmetry::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown asymmetry `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden widths of the encoder; a final layer maps to `repr_dim`.
    pub encoder_widths: Vec<usize>,
    pub repr_dim: usize,
    pub encoder_bn: bool,
    /// Projector widths; the last entry is the embedding dimension `D`.
    pub projector_widths: Vec<usize>,
    pub projector_bn: bool,
    /// Hidden widths of the predictor head; its output width is `D`.
    pub predictor_hidden: Vec<usize>,
    pub asymmetry: Asymmetry,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 64,
            encoder_widths: vec![128, 128],
            repr_dim: 64,
            encoder_bn: true,
            projector_widths: vec![256, 256, 256],
            projector_bn: true,
            predictor_hidden: vec![256],
            asymmetry: Asymmetry::None,
        }
    }
}

impl ModelConfig {
    pub fn embedding_dim(&self) -> usize {
        *self.projector_widths.last().unwrap_or(&self.repr_dim)
    }

    /// Replace the projector output width, keeping hidden widths.
    pub fn with_embedding_dim(mut self, d: usize) -> Self {
        if let Some(last) = self.projector_widths.last_mut() {
            *last = d;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.input_dim, self.repr_dim]
            .into_iter()
            .chain(self.encoder_widths.iter().copied())
            .chain(self.projector_widths.iter().copied())
            .chain(self.predictor_hidden.iter().copied());
        for w in widths {
            if w == 0 {
                return Err(Error::Config("all layer widths must be positive".into()));
            }
        }
        if self.projector_widths.is_empty() {
            return Err(Error::Config("projector needs at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroupKind {
    /// Weight matrices: trust-ratio adaptation and weight decay.
    Adapted,
    /// Biases and batch-norm affine parameters.
    Excluded,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroupKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Layer {
    Linear {
        weight: usize,
        bias: Option<usize>,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        stats: usize,
    },
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct SiameseModel {
    pub config: ModelConfig,
    params: Vec<Param>,
    stats: Vec<(String, RunningStats)>,
    encoder: Vec<Layer>,
    projector: Vec<Layer>,
    predictor: Vec<Layer>,
    mode: Mode,
}

struct Builder<'a> {
    rng: &'a mut Rng,
    params: Vec<Param>,
    stats: Vec<(String, RunningStats)>,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, out: usize, bias: bool) -> Layer {
        let std = (2.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..out * fan_in).map(|_| self.rng.normal() * std).collect();
        let weight = self.push(
            format!("{name}.weight"),
            w,
            &[out, fan_in],
            ParamGroupKind::Adapted,
        );
        let bias = bias.then(|| {
            self.push(
                format!("{name}.bias"),
                vec![0.0; out],
                &[out],
                ParamGroupKind::Excluded,
            )
        });
        Layer::Linear { weight, bias }
    }

    fn batch_norm(&mut self, name: &str, width: usize) -> Layer {
        let gamma = self.push(
            format!("{name}.gamma"),
            vec![1.0; width],
            &[width],
            ParamGroupKind::Excluded,
        );
        let beta = self.push(
            format!("{name}.beta"),
            vec![0.0; width],
            &[width],
            ParamGroupKind::Excluded,
        );
        self.stats.push((
            name.to_string(),
            RunningStats {
                mean: vec![0.0; width],
                var: vec![1.0; width],
            },
        ));
        Layer::BatchNorm {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn push(
        &mut self,
        name: String,
        data: Vec<f64>,
        shape: &[usize],
        group: ParamGroupKind,
    ) -> usize {
        let value = Tensor::parameter(data, shape).expect("consistent parameter shape");
        self.params.push(Param { name, value, group });
        self.params.len() - 1
    }

    /// Linear layers through `widths`; every layer but (optionally) the last
    /// gets BN and ReLU.
    fn stack(
        &mut self,
        prefix: &str,
        input: usize,
        widths: &[usize],
        bn: bool,
        plain_last: bool,
    ) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut fan_in = input;
        for (i, &w) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let name = format!("{prefix}.{i}");
            layers.push(self.linear(&name, fan_in, w, true));
            if !(last && plain_last) {
                if bn {
                    layers.push(self.batch_norm(&format!("{name}.bn"), w));
                }
                layers.push(Layer::Relu);
            }
            fan_in = w;
        }
        layers
    }
}

impl SiameseModel {
    /// He-initialized weights `N(0, 2/fan_in)`, zero biases, BN gamma 1 and
    /// beta 0. Fully determined by `seed`.
    pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::keyed(seed, &[stream::INIT]);
        let mut b = Builder {
            rng: &mut rng,
            params: Vec::new(),
            stats: Vec::new(),
        };
        let mut enc_widths = config.encoder_widths.clone();
        enc_widths.push(config.repr_dim);
        let encoder = b.stack(
            "encoder",
            config.input_dim,
            &enc_widths,
            config.encoder_bn,
            false,
        );
        let projector = b.stack(
            "projector",
            config.repr_dim,
            &config.projector_widths,
            config.projector_bn,
            true,
        );
        let d = config.embedding_dim();
        let predictor = if config.asymmetry.predictor() {
            let mut widths = config.predictor_hidden.clone();
            widths.push(d);
            b.stack("predictor", d, &widths, true, true)
        } else {
            Vec::new()
        };
        Ok(SiameseModel {
            config: config.clone(),
            params: b.params,
            stats: b.stats,
            encoder,
            projector,
            predictor,
            mode: Mode::Train,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn running_stats(&self) -> &[(String, RunningStats)] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [(String, RunningStats)] {
        &mut self.stats
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Copy of the model whose parameters are `values`, in [`Self::params`]
    /// order.
    pub fn with_param_values(&self, values: &[Tensor]) -> Result<Self> {
        if values.len() != self.params.len() {
            return Err(precondition(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        let mut m = self.clone();
        for (p, v) in m.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "with_param_values",
                    left: p.value.shape().to_vec(),
                    right: v.shape().to_vec(),
                }
                .into());
            }
            p.value = v.clone();
        }
        Ok(m)
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.value.zero_grad();
        }
    }

    fn run(&mut self, which: Stack, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let layers = match which {
            Stack::Encoder => &self.encoder,
            Stack::Projector => &self.projector,
            Stack::Predictor => &self.predictor,
        };
        let (out, updates) = apply_layers(layers, &self.params, &self.stats, x, mode)?;
        for (idx, mean, var) in updates {
            let s = &mut self.stats[idx].1;
            for k in 0..mean.len() {
                s.mean[k] = BN_MOMENTUM * s.mean[k] + (1.0 - BN_MOMENTUM) * mean[k];
                s.var[k] = BN_MOMENTUM * s.var[k] + (1.0 - BN_MOMENTUM) * var[k];
            }
        }
        Ok(out)
    }

    pub fn encoder_forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        check_width(batch, self.config.input_dim, "encoder input")?;
        self.run(Stack::Encoder, batch, self.mode)
    }

    pub fn projector_forward(&mut self, reprs: &Tensor) -> Result<Tensor> {
        check_width(reprs, self.config.repr_dim, "projector input")?;
        self.run(Stack::Projector, reprs, self.mode)
    }

    pub fn predictor_forward(&mut self, z: &Tensor) -> Result<Tensor> {
        if self.predictor.is_empty() {
            return Err(precondition("model has no predictor head"));
        }
        self.run(Stack::Predictor, z, self.mode)
    }

    /// Encoder then projector.
    pub fn embed(&mut self, batch: &Tensor) -> Result<Tensor> {
        let r = self.encoder_forward(batch)?;
        self.projector_forward(&r)
    }

    /// Apply the shared network to both views. With stop-gradient, `Z_B` is
    /// detached; with a predictor, `Z_A` passes through the predictor head.
    pub fn twins_forward(&mut self, ya: &Tensor, yb: &Tensor) -> Result<(Tensor, Tensor)> {
        if ya.shape() != yb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "twins_forward",
                left: ya.shape().to_vec(),
                right: yb.shape().to_vec(),
            }
            .into());
        }
        let mut za = self.embed(ya)?;
        if self.config.asymmetry.predictor() {
            za = self.predictor_forward(&za)?;
        }
        let mut zb = self.embed(yb)?;
        if self.config.asymmetry.stop_gradient() {
            zb = zb.detach();
        }
        Ok((za, zb))
    }

    fn detached_params(&self) -> Vec<Param> {
        self.params
            .iter()
            .map(|p| Param {
                value: p.value.detach(),
                ..p.clone()
            })
            .collect()
    }

    /// Eval-mode encoder output as plain values, off the tape.
    pub fn representations(&self, batch: &Tensor) -> Result<Tensor> {
        check_width(batch, self.config.input_dim, "encoder input")?;
        let params = self.detached_params();
        Ok(apply_layers(
            &self.encoder,
            &params,
            &self.stats,
            &batch.detach(),
            Mode::Eval,
        )?
        .0)
    }

    /// Eval-mode embeddings as plain values, off the tape.
    pub fn embeddings_eval(&self, batch: &Tensor) -> Result<Tensor> {
        let r = self.representations(batch)?;
        let params = self.detached_params();
        Ok(apply_layers(&self.projector, &params, &self.stats, &r, Mode::Eval)?.0)
    }
}

#[derive(Clone, Copy)]
enum Stack {
    Encoder,
    Projector,
    Predictor,
}

fn check_width(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    match x.shape() {
        &[_, w] if w == expected => Ok(()),
        s => Err(precondition(format!(
            "{what}: expected N×{expected}, got {s:?}"
        ))),
    }
}

type StatUpdate = (usize, Vec<f64>, Vec<f64>);

fn apply_layers(
    layers: &[Layer],
    params: &[Param],
    stats: &[(String, RunningStats)],
    x: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Vec<StatUpdate>)> {
    let mut h = x.clone();
    let mut updates = Vec::new();
    for layer in layers {
        h = match *layer {
            Layer::Linear { weight, bias } => {
                let y = h.matmul(&params[weight].value.t()?)?;
                match bias {
                    Some(b) => y.add(&params[b].value)?,
                    None => y,
                }
            }
            Layer::Relu => h.relu()?,
            Layer::BatchNorm {
                gamma,
                beta,
                stats: s,
            } => {
                let normalized = match mode {
                    Mode::Train => {
                        let n = h.shape()[0];
                        if n < 2 {
                            return Err(precondition(format!(
                                "batch norm in train mode needs N >= 2, got N = {n}"
                            )));
                        }
                        let mean = h.mean_axis(0, true)?;
                        let std = h.std_axis(0, true)?;
                        let var = std.data().iter().map(|v| v * v).collect();
                        updates.push((s, mean.to_vec(), var));
                        h.sub(&mean)?.div(&std.max_scalar(BN_EPS)?)?
                    }
                    Mode::Eval => {
                        let rs = &stats[s].1;
                        let w = rs.mean.len();
                        let mean = Tensor::new(rs.mean.clone(), &[w])?;
                        let std: Vec<f64> = rs.var.iter().map(|v| v.sqrt().max(BN_EPS)).collect();
                        h.sub(&mean)?.div(&Tensor::new(std, &[w])?)?
                    }
                };
                normalized
                    .mul(&params[gamma].value)?
                    .add(&params[beta].value)?
            }
        };
    }
    Ok((h, updates))
}
