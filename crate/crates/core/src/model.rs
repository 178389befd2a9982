//! The train/evaluate surface shared by the routed model and the baselines.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blocks::Action;
use crate::data::MtlSample;
use crate::error::{Error, Result};
use crate::routing::AccuracyTable;
use crate::tensor::ParamStore;

/// One row of the per-step metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub sample_idx: usize,
    pub task: usize,
    pub loss: f64,
    pub correct: bool,
    /// `None` for models without a router.
    pub r_final: Option<f64>,
    pub actions: Vec<Action>,
    pub effective_lr: f64,
}

pub trait MultiTaskModel: Send + Sync {
    /// One optimizer step over `batch` (`(sample index, sample)` pairs).
    fn train_batch(
        &mut self,
        batch: &[(usize, &MtlSample)],
        epoch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<StepRecord>>;

    /// Greedy class prediction.
    fn predict(&self, sample: &MtlSample) -> Result<usize>;

    fn params(&self) -> &ParamStore;

    /// Called with the fraction of training completed before each batch.
    fn set_progress(&mut self, _fraction: f64) {}
}

/// Per-task accuracy of `model` on `samples`.
pub fn evaluate_model<M: MultiTaskModel + ?Sized>(
    model: &M,
    samples: &[MtlSample],
    num_tasks: usize,
) -> Result<AccuracyTable> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation over an empty split"));
    }
    let preds: Vec<usize> = samples
        .par_iter()
        .map(|s| model.predict(s))
        .collect::<Result<_>>()?;
    let mut hits = vec![0; num_tasks];
    let mut counts = vec![0; num_tasks];
    for (s, p) in samples.iter().zip(preds) {
        if s.t >= num_tasks {
            return Err(Error::contract(format!(
                "sample task {} >= {num_tasks} tasks",
                s.t
            )));
        }
        counts[s.t] += 1;
        hits[s.t] += (p == s.y) as usize;
    }
    AccuracyTable::from_hits(&hits, &counts)
}

pub const METRICS_HEADER: &str = "epoch,sample_idx,task,loss,correct,r_final,actions,effective_lr";

/// `actions` are `layer.index` labels joined by `;`. `r_final` is empty for
/// unrouted models.
pub fn write_metrics_row<W: Write>(mut w: W, r: &StepRecord) -> Result<()> {
    let actions: Vec<String> = r.actions.iter().map(Action::label).collect();
    let r_final = r.r_final.map(|v| v.to_string()).unwrap_or_default();
    writeln!(
        w,
        "{},{},{},{},{},{},{},{}",
        r.epoch,
        r.sample_idx,
        r.task,
        r.loss,
        r.correct as u8,
        r_final,
        actions.join(";"),
        r.effective_lr
    )?;
    Ok(())
}
