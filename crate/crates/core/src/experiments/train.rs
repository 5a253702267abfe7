use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::data::{two_views, Dataset};
use crate::error::{precondition, Error, Result};
use crate::eval::{
    conditional_entropy_diagnostic, linear_probe, twin_diagnostics, EmbeddingDiagnostics,
    ProbeResult,
};
use crate::losses::variant_losses;
use crate::models::{Mode, SiameseModel};
use crate::optim::{Optimizer, ScheduleConfig};
use crate::rng::{stream, Rng};
use crate::tensor::{Tensor, DEFAULT_JITTER};

use super::checkpoint::{Checkpoint, NamedTensor, BTCK_VERSION};
use super::config::RunConfig;
use super::metrics::{metrics_csv, parse_metrics_csv, MetricsRecord};

/// Epoch key for the fixed diagnostic views.
const DIAGNOSTIC_EPOCH: u64 = u64::MAX;

pub struct Trainer {
    pub config: RunConfig,
    pub train_set: Dataset,
    pub test_set: Dataset,
    pub model: SiameseModel,
    pub optimizer: Optimizer,
    pub schedule: ScheduleConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
    /// Most recent scheduled probe.
    pub last_probe: Option<ProbeResult>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub checkpoint: Checkpoint,
    pub final_probe: Option<ProbeResult>,
}

fn column_summary(z: &Tensor) -> String {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let data = z.data();
    let mut min_std = f64::INFINITY;
    let mut max_abs: f64 = 0.0;
    let mut non_finite = 0;
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| data[i * d + j]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        min_std = min_std.min(v.sqrt());
        for x in col {
            if x.is_finite() {
                max_abs = max_abs.max(x.abs());
            } else {
                non_finite += 1;
            }
        }
    }
    format!("min feature std {min_std:e}, max |z| {max_abs:e}, non-finite entries {non_finite}")
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dataset = config.dataset.load()?;
        Trainer::with_dataset(config, dataset)
    }

    pub fn with_dataset(config: RunConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.image_len() != config.model.input_dim {
            return Err(precondition(format!(
                "dataset images have {}×{}×{} = {} values but the model expects input_dim {}",
                dataset.height,
                dataset.width,
                dataset.channels,
                dataset.image_len(),
                config.model.input_dim
            )));
        }
        let (train_set, test_set) = dataset.split(config.test_fraction)?;
        if train_set.len() < config.batch_size {
            return Err(precondition(format!(
                "training split has {} samples, fewer than one batch of {}",
                train_set.len(),
                config.batch_size
            )));
        }
        let model = SiameseModel::init_parameters(&config.model, config.seed)?;
        let optimizer = Optimizer::new(model.params(), config.optim.clone())?;
        let schedule = config.optim.schedule(config.batch_size, config.epochs);
        Ok(Trainer {
            config,
            train_set,
            test_set,
            model,
            optimizer,
            schedule,
            epoch: 0,
            step: 0,
            last_probe: None,
        })
    }

    /// Full batches per epoch; the remainder is dropped.
    pub fn steps_per_epoch(&self) -> usize {
        self.train_set.len() / self.config.batch_size
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn views(&self, indices: &[usize], epoch: u64) -> Result<(Tensor, Tensor)> {
        let k = self.train_set.image_len();
        let mut a = Vec::with_capacity(indices.len() * k);
        let mut b = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            let (va, vb) = two_views(
                &self.train_set.image(i),
                &self.config.augmentation,
                self.config.seed,
                i as u64,
                epoch,
            )?;
            a.extend(va.pixels);
            b.extend(vb.pixels);
        }
        Ok((
            Tensor::new(a, &[indices.len(), k])?,
            Tensor::new(b, &[indices.len(), k])?,
        ))
    }

    fn shuffle_rng(&self, epoch: usize) -> Rng {
        Rng::keyed(self.config.seed, &[stream::SHUFFLE, epoch as u64])
    }

    /// Train one epoch and return its metrics row.
    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        if self.is_finished() {
            return Err(precondition("all configured epochs are complete"));
        }
        let started = Instant::now();
        let spe = self.steps_per_epoch();
        let epoch = self.epoch;
        let order = self.shuffle_rng(epoch).permutation(self.train_set.len());
        let (mut total, mut inv, mut red) = (0.0, 0.0, 0.0);
        let mut lr_last = 0.0;
        self.model.set_mode(Mode::Train);
        for (b, batch) in order.chunks_exact(self.config.batch_size).enumerate() {
            let (ya, yb) = self.views(batch, epoch as u64)?;
            let (za, zb) = self.model.twins_forward(&ya, &yb)?;
            let loss = variant_losses(&za, &zb, &self.config.loss)?;
            let value = loss.total_value();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    step: self.step,
                    dump: format!(
                        "batch {b}: invariance {}, redundancy {}\n  Z_A: {}\n  Z_B: {}\n  views: A {}, B {}",
                        loss.invariance_term,
                        loss.redundancy_term,
                        column_summary(&za),
                        column_summary(&zb),
                        column_summary(&ya),
                        column_summary(&yb),
                    ),
                });
            }
            loss.total.backward()?;
            let (lr_w, lr_b) = self.schedule.lr_pair_at(self.step, spe)?;
            self.optimizer.step(self.model.params_mut(), lr_w, lr_b)?;
            self.step += 1;
            lr_last = lr_w;
            total += value;
            inv += loss.invariance_term;
            red += loss.redundancy_term;
        }
        self.epoch += 1;
        let steps = spe as f64;

        let diag = self.diagnostics()?;
        let every = |k: usize| k > 0 && (self.epoch % k == 0 || self.is_finished());
        let conditional_logdet = if every(self.config.diagnostics.conditional_every) {
            Some(self.conditional_diagnostic()?)
        } else {
            None
        };
        let probe_top1 = if every(self.config.diagnostics.probe_every) {
            let result = self.probe()?;
            let top1 = result.top1;
            self.last_probe = Some(result);
            Some(top1)
        } else {
            None
        };
        Ok(MetricsRecord {
            epoch: self.epoch,
            step: self.step,
            loss_total: total / steps,
            loss_invariance: inv / steps,
            loss_redundancy: red / steps,
            lr: lr_last,
            mean_abs_offdiag: diag.mean_abs_off_diagonal,
            mean_diag: diag.diagonal_mean,
            min_feature_std: diag.min_std(),
            entropy_proxy: diag.entropy_proxy,
            conditional_logdet,
            probe_top1,
            wall_clock_s: self
                .config
                .diagnostics
                .wall_clock
                .then(|| started.elapsed().as_secs_f64()),
        })
    }

    /// Twin diagnostics on the fixed diagnostic batch: the first images of
    /// the training split under views that do not change across epochs.
    pub fn diagnostics(&self) -> Result<EmbeddingDiagnostics> {
        let n = self.config.diagnostics.batch.min(self.train_set.len());
        let indices: Vec<usize> = (0..n).collect();
        let (ya, yb) = self.views(&indices, DIAGNOSTIC_EPOCH)?;
        let za = self.model.embeddings_eval(&ya)?;
        let zb = self.model.embeddings_eval(&yb)?;
        twin_diagnostics(&za, &zb)
    }

    pub fn conditional_diagnostic(&self) -> Result<f64> {
        let d = &self.config.diagnostics;
        let images: Vec<_> = (0..d.conditional_images.min(self.train_set.len()))
            .map(|i| self.train_set.image(i))
            .collect();
        Ok(conditional_entropy_diagnostic(
            &self.model,
            &images,
            &self.config.augmentation,
            d.conditional_views,
            self.config.seed,
            DEFAULT_JITTER,
        )?
        .mean)
    }

    /// Linear probe on frozen eval-mode representations of the clean
    /// training and held-out splits.
    pub fn probe(&self) -> Result<ProbeResult> {
        probe_model(&self.model, &self.train_set, &self.test_set, &self.config)
    }

    /// Train through the remaining epochs, handing each row to `sink`.
    pub fn run(
        &mut self,
        mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let mut rows = Vec::new();
        while !self.is_finished() {
            let row = self.run_epoch()?;
            sink(&row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<NamedTensor> = self
            .model
            .params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.to_vec(),
            })
            .collect();
        for (name, s) in self.model.running_stats() {
            for (suffix, v) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                tensors.push(NamedTensor {
                    name: format!("{name}.{suffix}"),
                    shape: vec![v.len()],
                    data: v.clone(),
                });
            }
        }
        let buffers = self
            .model
            .params()
            .iter()
            .zip(&self.optimizer.buffers)
            .map(|(p, b)| NamedTensor {
                name: format!("momentum.{}", p.name),
                shape: p.value.shape().to_vec(),
                data: b.clone(),
            })
            .collect();
        Checkpoint {
            version: BTCK_VERSION,
            config_json: self.config.to_json(),
            tensors,
            buffers,
            rng_states: vec![("shuffle".to_string(), self.shuffle_rng(self.epoch).state())],
            epoch: self.epoch as u32,
            step: self.step as u64,
        }
    }

    /// Rebuild a trainer from a checkpoint, regenerating the dataset from
    /// the stored config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_json(&ckpt.config_json)?;
        let dataset = config.dataset.load()?;
        Trainer::from_checkpoint_with_dataset(ckpt, dataset)
    }

    pub fn from_checkpoint_with_dataset(ckpt: &Checkpoint, dataset: Dataset) -> Result<Self> {
        let config = RunConfig::from_json(&ckpt.config_json)?;
        let mut t = Trainer::with_dataset(config, dataset)?;
        t.model = model_from_checkpoint(ckpt)?;
        for (p, buf) in t.model.params().iter().zip(t.optimizer.buffers.iter_mut()) {
            let stored = ckpt.buffer(&format!("momentum.{}", p.name))?;
            if stored.data.len() != buf.len() {
                return Err(Error::Format(format!(
                    "optimizer buffer for `{}` has the wrong size",
                    p.name
                )));
            }
            buf.copy_from_slice(&stored.data);
        }
        t.epoch = ckpt.epoch as usize;
        t.step = ckpt.step as usize;
        if t.epoch > t.config.epochs || t.step != t.epoch * t.steps_per_epoch() {
            return Err(Error::Format(format!(
                "checkpoint position (epoch {}, step {}) is inconsistent with its config",
                t.epoch, t.step
            )));
        }
        if ckpt.rng_state("shuffle")? != t.shuffle_rng(t.epoch).state() {
            return Err(Error::Format(
                "checkpoint rng state does not match its seed".into(),
            ));
        }
        Ok(t)
    }
}

pub fn probe_model(
    model: &SiameseModel,
    train: &Dataset,
    test: &Dataset,
    config: &RunConfig,
) -> Result<ProbeResult> {
    let all = |ds: &Dataset| ds.batch(&(0..ds.len()).collect::<Vec<_>>());
    let rtrain = model.representations(&all(train))?;
    let rtest = model.representations(&all(test))?;
    linear_probe(
        &rtrain,
        &train.labels,
        &rtest,
        &test.labels,
        train.num_classes,
        &config.probe,
    )
}

/// Model parameters and running statistics from a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<SiameseModel> {
    let config = RunConfig::from_json(&ckpt.config_json)?;
    let mut model = SiameseModel::init_parameters(&config.model, config.seed)?;
    let mut values = Vec::with_capacity(model.params().len());
    for p in model.params() {
        let t = ckpt.tensor(&p.name)?;
        if t.shape != p.value.shape() {
            return Err(Error::Format(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                p.name,
                t.shape,
                p.value.shape()
            )));
        }
        values.push(Tensor::parameter(t.data.clone(), &t.shape)?);
    }
    model = model.with_param_values(&values)?;
    for (name, s) in model.running_stats_mut() {
        for (suffix, v) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
            let t = ckpt.tensor(&format!("{name}.{suffix}"))?;
            if t.data.len() != v.len() {
                return Err(Error::Format(format!(
                    "running statistic `{name}.{suffix}` has the wrong size"
                )));
            }
            v.copy_from_slice(&t.data);
        }
    }
    Ok(model)
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.btck";
pub const CONFIG_FILE: &str = "config.json";

/// Run `trainer` until it finishes or completes `stop_after` epochs. When
/// `out` is given, `metrics.csv` and the checkpoint are rewritten after
/// every epoch (keeping metrics rows from before a resume point), and the
/// config is written next to them.
pub fn train_to_dir(trainer: &mut Trainer, out: Option<&Path>, stop_after: Option<usize>) -> Result<TrainOutcome> {
    let mut rows: Vec<MetricsRecord> = Vec::new();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let path = dir.join(METRICS_FILE);
        if trainer.epoch > 0 && path.exists() {
            rows = parse_metrics_csv(&fs::read_to_string(&path)?)?
                .into_iter()
                .filter(|r| r.epoch <= trainer.epoch)
                .collect();
        }
        fs::write(dir.join(CONFIG_FILE), trainer.config.to_json())?;
    }
    let stop = stop_after.unwrap_or(usize::MAX);
    while !trainer.is_finished() && trainer.epoch < stop {
        rows.push(trainer.run_epoch()?);
        if let Some(dir) = out {
            fs::write(dir.join(METRICS_FILE), metrics_csv(&rows))?;
            trainer.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out {
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome {
        metrics: rows,
        checkpoint,
        final_probe: trainer.last_probe.clone(),
    })
}

/// Train a fresh run from `config`, writing to its `output_dir` if set.
pub fn train(config: RunConfig) -> Result<TrainOutcome> {
    let out = config.output_dir.clone();
    let mut trainer = Trainer::new(config)?;
    train_to_dir(&mut trainer, out.as_deref(), None)
}
