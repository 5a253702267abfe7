use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use crate::data::AugmentationStage;
use crate::error::{Error, Result};
use crate::losses::LossVariant;
use crate::models::Asymmetry;

use super::config::RunConfig;
use super::train::{train_to_dir, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sweep {
    Lambda,
    BatchSize,
    ProjectorDim,
    Augmentations,
    Asymmetry,
    LossVariant,
}

impl Sweep {
    pub const ALL: [Sweep; 6] = [
        Sweep::Lambda,
        Sweep::BatchSize,
        Sweep::ProjectorDim,
        Sweep::Augmentations,
        Sweep::Asymmetry,
        Sweep::LossVariant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sweep::Lambda => "lambda",
            Sweep::BatchSize => "batch_size",
            Sweep::ProjectorDim => "projector_dim",
            Sweep::Augmentations => "augmentations",
            Sweep::Asymmetry => "asymmetry",
            Sweep::LossVariant => "loss_variant",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: Vec<String> = match self {
            Sweep::Lambda => ["5e-4", "5e-3", "5e-2"].map(String::from).to_vec(),
            Sweep::BatchSize => ["32", "64", "128", "256"].map(String::from).to_vec(),
            Sweep::ProjectorDim => ["16", "64", "256", "1024"].map(String::from).to_vec(),
            Sweep::Augmentations => AugmentationStage::ALL
                .iter()
                .map(|s| s.name().to_string())
                .collect(),
            Sweep::Asymmetry => Asymmetry::ALL
                .iter()
                .map(|a| a.name().to_string())
                .collect(),
            Sweep::LossVariant => [
                LossVariant::BarlowTwins,
                LossVariant::OnlyInvariance,
                LossVariant::OnlyRedundancy,
            ]
            .iter()
            .map(|v| v.name().to_string())
            .collect(),
        };
        v
    }

    /// Whether sweep values are numeric (and plotted on a value axis).
    pub fn is_numeric(self) -> bool {
        matches!(self, Sweep::Lambda | Sweep::BatchSize | Sweep::ProjectorDim)
    }

    /// A copy of `base` with this sweep's knob set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let bad = || Error::Config(format!("invalid {} value `{value}`", self.name()));
        let mut cfg = base.clone();
        match self {
            Sweep::Lambda => cfg.loss.lambda = value.parse().map_err(|_| bad())?,
            Sweep::BatchSize => cfg.batch_size = value.parse().map_err(|_| bad())?,
            Sweep::ProjectorDim => {
                let d: usize = value.parse().map_err(|_| bad())?;
                cfg.model = cfg.model.with_embedding_dim(d);
            }
            Sweep::Augmentations => {
                cfg.augmentation.enabled = value.parse::<AugmentationStage>()?.enabled();
            }
            Sweep::Asymmetry => cfg.model.asymmetry = value.parse()?,
            Sweep::LossVariant => cfg.loss.variant = value.parse()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sweep::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub probe_top1: f64,
    pub loss_total: f64,
    pub mean_abs_offdiag: f64,
    pub min_feature_std: f64,
    pub entropy_proxy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub outcome: std::result::Result<PointSummary, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub sweep: Sweep,
    pub points: Vec<SweepPoint>,
}

pub const SWEEP_COLUMNS: [&str; 9] = [
    "sweep",
    "value",
    "status",
    "probe_top1",
    "loss_total",
    "mean_abs_offdiag",
    "min_feature_std",
    "entropy_proxy",
    "error",
];

fn clean(s: &str) -> String {
    s.replace([',', '\n', '\r'], " ")
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = SWEEP_COLUMNS.join(",");
        s.push('\n');
        for p in &self.points {
            match &p.outcome {
                Ok(r) => {
                    let _ = writeln!(
                        s,
                        "{},{},ok,{},{},{},{},{},",
                        self.sweep,
                        clean(&p.value),
                        r.probe_top1,
                        r.loss_total,
                        r.mean_abs_offdiag,
                        r.min_feature_std,
                        r.entropy_proxy
                    );
                }
                Err(e) => {
                    let _ = writeln!(
                        s,
                        "{},{},failed,,,,,,{}",
                        self.sweep,
                        clean(&p.value),
                        clean(e)
                    );
                }
            }
        }
        s
    }

    pub fn file_name(&self) -> String {
        format!("sweep_{}.csv", self.sweep)
    }
}

fn run_point(cfg: RunConfig, out: Option<&Path>) -> Result<PointSummary> {
    let mut trainer = Trainer::new(cfg)?;
    let outcome = train_to_dir(&mut trainer, out, None)?;
    let last = outcome
        .metrics
        .last()
        .ok_or_else(|| Error::Precondition("run produced no metrics".into()))?;
    let probe = outcome
        .final_probe
        .ok_or_else(|| Error::Precondition("run produced no probe result".into()))?;
    Ok(PointSummary {
        probe_top1: probe.top1,
        loss_total: last.loss_total,
        mean_abs_offdiag: last.mean_abs_offdiag,
        min_feature_std: last.min_feature_std,
        entropy_proxy: last.entropy_proxy,
    })
}

/// Train and probe one run per sweep value. Points run on up to `workers`
/// threads; each gets its own copy of `base`, and a failing point is
/// recorded without stopping the others. With `out`, every point writes
/// its run files to `out/<sweep>/<value>/` and the consolidated CSV goes to
/// `out/sweep_<sweep>.csv`.
pub fn ablate(
    base: &RunConfig,
    sweep: Sweep,
    values: &[String],
    out: Option<&Path>,
    workers: usize,
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config(format!(
            "no values given for the {sweep} sweep"
        )));
    }
    let mut base = base.clone();
    if base.diagnostics.probe_every == 0 {
        base.diagnostics.probe_every = base.epochs;
    }
    base.output_dir = None;
    let results: Mutex<Vec<Option<SweepPoint>>> = Mutex::new(vec![None; values.len()]);
    let next = AtomicUsize::new(0);
    let workers = workers.clamp(1, values.len());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= values.len() {
                    break;
                }
                let value = &values[i];
                let dir = out.map(|o| o.join(sweep.name()).join(value));
                let outcome = sweep
                    .apply(&base, value)
                    .and_then(|cfg| run_point(cfg, dir.as_deref()))
                    .map_err(|e| e.to_string());
                results.lock().unwrap()[i] = Some(SweepPoint {
                    value: value.clone(),
                    outcome,
                });
            });
        }
    });
    let points = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|p| p.expect("every sweep point ran"))
        .collect();
    let report = SweepReport { sweep, points };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(report.file_name()), report.to_csv())?;
    }
    Ok(report)
}
