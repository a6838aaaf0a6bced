//! Training loops: the human-robot alignment run, the two full fine-tune
//! baselines, the adapter-position ablation grid, and checkpoints.

mod ablation;
mod baseline;
mod checkpoint;
mod config;
mod hr_align;
mod model;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ablation::{ablation_variants, run_ablation_grid, variant_config, AblationRow, AblationVariant};
pub use baseline::{train_baseline, train_baseline_cls, train_baseline_pret, training_accuracy};
pub use checkpoint::{ModelCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DataConfig, EvalConfig, Method, RunConfig, TrainConfig, KEYS};
pub use hr_align::{train_hr_align, HrAlignTrainer};
pub use model::{stream_of, AlignModel};

use crate::error::{Error, Result};
use crate::tensor::RngState;

pub const METRICS_HEADER: &str = "step,loss,pos_sim,hard_neg_sim,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    /// Mean similarity of each anchor to its positive.
    pub pos_sim: f64,
    /// Mean over anchors of the largest similarity to any negative.
    pub hard_neg_sim: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::arg(format!("metrics step {} after step {}", record.step, last.step)));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean of `f` over the first `k` records.
    pub fn head_mean(&self, k: usize, f: impl Fn(&MetricsRecord) -> f64) -> f64 {
        let n = k.min(self.records.len()).max(1);
        self.records.iter().take(n).map(&f).sum::<f64>() / n as f64
    }

    /// Mean of `f` over the last `k` records.
    pub fn tail_mean(&self, k: usize, f: impl Fn(&MetricsRecord) -> f64) -> f64 {
        let n = k.min(self.records.len()).max(1);
        self.records.iter().rev().take(n).map(&f).sum::<f64>() / n as f64
    }

    /// Everything except wall time, which is the only non-deterministic
    /// column.
    pub fn same_trajectory(&self, other: &MetricsLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.step == b.step
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.pos_sim.to_bits() == b.pos_sim.to_bits()
                    && a.hard_neg_sim.to_bits() == b.hard_neg_sim.to_bits()
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!("{},{:?},{:?},{:?},{:.3}\n", r.step, r.loss, r.pos_sim, r.hard_neg_sim, r.wall_ms));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: MetricsLog,
    /// Number of scalar parameters that received gradient updates.
    pub learnable: usize,
    /// Classification baselines only: accuracy on the training clips.
    pub train_accuracy: Option<f64>,
}

/// Indices drawn at `step` by the epoch sampler: each epoch is one pass over
/// a fresh seeded shuffle of `0..n`, cut into `n / batch` batches; leftovers
/// are dropped. Stateless, so a resumed run draws the same batches.
pub(crate) fn epoch_batch(n: usize, batch: usize, step: usize, schedule: &RngState) -> Result<Vec<usize>> {
    if batch == 0 || batch > n {
        return Err(Error::arg(format!("batch size {batch} does not fit a dataset of {n}")));
    }
    let per_epoch = n / batch;
    let (epoch, k) = (step / per_epoch, step % per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    schedule.fork(epoch as u64).shuffle(&mut order);
    Ok(order[k * batch..(k + 1) * batch].to_vec())
}
