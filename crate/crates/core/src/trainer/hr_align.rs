use std::time::Instant;

use super::checkpoint::ModelCheckpoint;
use super::config::{Method, TrainConfig};
use super::model::AlignModel;
use super::{epoch_batch, MetricsLog, MetricsRecord, TrainOutcome};
use crate::adapter::encode_streams;
use crate::alignment::{hr_align_loss, AlignmentBatch, PooledFeature, Stream};
use crate::dataset::{sample_indices, Domain, PairedDemo};
use crate::encoder::{concat_frames, encode_frozen, Backbone, FeatureMap};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, RngState, Tensor};

// Streams forked off the run seed.
const INIT_STREAM: u64 = 1;
const SCHEDULE_STREAM: u64 = 2;
const FRAME_STREAM: u64 = 3;

/// Step-wise alignment trainer. All randomness is derived from the seed and
/// the step index, so a trainer rebuilt from a checkpoint continues exactly
/// where the original left off.
pub struct HrAlignTrainer<'a> {
    cfg: TrainConfig,
    data: &'a [PairedDemo],
    model: AlignModel,
    params: Vec<Tensor>,
    adam: AdamState,
    base: RngState,
    step: usize,
    log: MetricsLog,
    started: Instant,
}

fn check_inputs(cfg: &TrainConfig, data: &[PairedDemo], backbone: &Backbone) -> Result<()> {
    cfg.validate()?;
    if cfg.method != Method::HrAlign {
        return Err(Error::arg(format!("alignment trainer got method {}", cfg.method)));
    }
    if !backbone.is_frozen() {
        return Err(Error::arg("alignment training needs a frozen backbone"));
    }
    if data.is_empty() {
        return Err(Error::arg("alignment training needs a non-empty dataset"));
    }
    if cfg.batch_size > data.len() {
        return Err(Error::arg(format!(
            "batch size {} exceeds the {} available pairs",
            cfg.batch_size,
            data.len()
        )));
    }
    Ok(())
}

impl<'a> HrAlignTrainer<'a> {
    pub fn new(cfg: &TrainConfig, data: &'a [PairedDemo], backbone: &Backbone) -> Result<Self> {
        check_inputs(cfg, data, backbone)?;
        let base = RngState::new(cfg.seed);
        let model = AlignModel::init(backbone, cfg, &mut base.fork(INIT_STREAM))?;
        let params = model.learnable();
        let adam = AdamState::new(adam_config(cfg), &params);
        Ok(HrAlignTrainer {
            cfg: cfg.clone(),
            data,
            model,
            params,
            adam,
            base,
            step: 0,
            log: MetricsLog::default(),
            started: Instant::now(),
        })
    }

    /// Continues a run from `ckpt`; `cfg` must hash to the stored config.
    pub fn resume(cfg: &TrainConfig, data: &'a [PairedDemo], ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "checkpoint config hash {} differs from this config ({})",
                ckpt.config_hash,
                cfg.hash()
            )));
        }
        let model = ckpt.model()?;
        check_inputs(cfg, data, &model.backbone)?;
        let params = model.learnable();
        let adam = ckpt
            .adam
            .clone()
            .ok_or_else(|| Error::arg("checkpoint carries no optimizer state"))?;
        if adam.first.len() != params.len() {
            return Err(Error::dim("optimizer state does not match the learnable set".to_string()));
        }
        Ok(HrAlignTrainer {
            cfg: cfg.clone(),
            data,
            model,
            params,
            adam,
            base: ckpt.rng,
            step: ckpt.step as usize,
            log: MetricsLog::default(),
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &AlignModel {
        &self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint::capture(&self.model, &self.cfg, self.step as u64, self.base, Some(&self.adam))
    }

    /// Loss and similarity statistics on the batch for `step`, with the graph
    /// attached to the adapted stream.
    fn batch_loss(&self, step: usize) -> Result<(Tensor, f64, f64)> {
        let m = self.cfg.batch_size;
        let t = self.cfg.frames;
        let picks = epoch_batch(self.data.len(), m, step, &self.base.fork(SCHEDULE_STREAM))?;
        let mut frame_rng = self.base.fork(FRAME_STREAM).fork(step as u64);

        let mut human_frames = Vec::with_capacity(m);
        let mut robot_frames = Vec::with_capacity(m);
        for &i in &picks {
            let p = &self.data[i];
            human_frames.push(p.human.select(&sample_indices(p.human.len(), t, &mut frame_rng))?);
            // one draw per robot clip, shared by the frozen and adapted streams
            robot_frames.push(p.robot.select(&sample_indices(p.robot.len(), t, &mut frame_rng))?);
        }
        let human = encode_frozen(&self.model.backbone, &concat_frames(&human_frames)?, Domain::Human)?;
        let (robot_f, robot_t) = encode_streams(
            &self.model.backbone,
            &self.model.stack,
            &concat_frames(&robot_frames)?,
            Domain::Robot,
        )?;

        let slice = |fm: &FeatureMap, k: usize| -> Result<FeatureMap> {
            Ok(FeatureMap {
                values: fm.values.narrow(k * t, t)?,
                domain: fm.domain,
                adapted: fm.adapted,
            })
        };
        let mut hs: Vec<PooledFeature> = Vec::with_capacity(m);
        let mut rfs = Vec::with_capacity(m);
        let mut rts = Vec::with_capacity(m);
        for (k, &i) in picks.iter().enumerate() {
            let q = self.model.query_for(&self.data[i].description)?;
            let q_frozen = q.as_ref().map(Tensor::detach);
            hs.push(self.model.pool(&slice(&human, k)?, q_frozen.as_ref(), Stream::HumanFrozen)?);
            rfs.push(self.model.pool(&slice(&robot_f, k)?, q_frozen.as_ref(), Stream::RobotFrozen)?);
            rts.push(self.model.pool(&slice(&robot_t, k)?, q.as_ref(), Stream::RobotAdapted)?);
        }
        let batch = AlignmentBatch::from_pooled(&hs, &rfs, &rts, self.cfg.tau)?;
        let (pos, hard) = similarity_stats(&batch);
        Ok((hr_align_loss(&batch)?, pos, hard))
    }

    pub fn step_once(&mut self) -> Result<MetricsRecord> {
        let (loss, pos_sim, hard_neg_sim) = self.batch_loss(self.step)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss became {value} at step {}", self.step)));
        }
        self.params.iter().for_each(Tensor::zero_grad);
        loss.backward()?;
        self.adam.step(&self.params)?;
        let record = MetricsRecord {
            step: self.step,
            loss: value,
            pos_sim,
            hard_neg_sim,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
        };
        self.log.push(record)?;
        self.step += 1;
        Ok(record)
    }

    /// Runs until `total` steps have been taken in this run, counting steps
    /// completed before a resume.
    pub fn run_until(&mut self, total: usize) -> Result<()> {
        while self.step < total {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            checkpoint: self.checkpoint(),
            learnable: self.model.learnable_count(),
            log: self.log,
            train_accuracy: None,
        }
    }
}

pub(crate) fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    }
}

/// Mean `h_i . rt_i` and mean over `i` of the largest similarity between
/// `h_i` and any of its negatives (`rt_j`, `j != i`, and `rf_i`).
fn similarity_stats(b: &AlignmentBatch) -> (f64, f64) {
    let m = b.len();
    let c = b.human.shape()[1];
    let h = b.human.data();
    let rt = b.robot_adapted.data();
    let rf = b.robot_frozen.data();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let row = |v: &[f64], i: usize| v[i * c..(i + 1) * c].to_vec();
    let mut pos = 0.0;
    let mut hard = 0.0;
    for i in 0..m {
        let hi = row(&h, i);
        pos += dot(&hi, &row(&rt, i));
        let mut best = dot(&hi, &row(&rf, i));
        for j in (0..m).filter(|&j| j != i) {
            best = best.max(dot(&hi, &row(&rt, j)));
        }
        hard += best;
    }
    (pos / m as f64, hard / m as f64)
}

/// Full alignment run from a frozen backbone.
pub fn train_hr_align(cfg: &TrainConfig, data: &[PairedDemo], backbone: &Backbone) -> Result<TrainOutcome> {
    let mut trainer = HrAlignTrainer::new(cfg, data, backbone)?;
    trainer.run_until(cfg.steps)?;
    Ok(trainer.finish())
}
