use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{precondition, Result};
use crate::eval::{embedding_diagnostics, EmbeddingDiagnostics, ProbeResult};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::train::{model_from_checkpoint, probe_model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub epoch: u32,
    pub probe: ProbeResult,
    pub diagnostics: EmbeddingDiagnostics,
}

/// Probe the frozen encoder of `ckpt` on `dataset` (split as in the run's
/// config) and compute embedding diagnostics on the first training images.
pub fn evaluate(ckpt: &Checkpoint, dataset: &Dataset) -> Result<EvaluationReport> {
    let config = RunConfig::from_json(&ckpt.config_json)?;
    if dataset.image_len() != config.model.input_dim {
        return Err(precondition(format!(
            "dataset images are {}×{}×{} ({} values) but the checkpoint expects input_dim {}",
            dataset.height,
            dataset.width,
            dataset.channels,
            dataset.image_len(),
            config.model.input_dim
        )));
    }
    let model = model_from_checkpoint(ckpt)?;
    let (train, test) = dataset.split(config.test_fraction)?;
    let probe = probe_model(&model, &train, &test, &config)?;
    let n = config.diagnostics.batch.min(train.len());
    let z = model.embeddings_eval(&train.batch(&(0..n).collect::<Vec<_>>()))?;
    Ok(EvaluationReport {
        epoch: ckpt.epoch,
        probe,
        diagnostics: embedding_diagnostics(&z)?,
    })
}
