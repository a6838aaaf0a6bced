//! Full fine-tune baselines: continued time-contrastive pre-training on robot
//! clips, and task classification. Either can instead train an adapter stack
//! on the frozen backbone (`baseline_adapter`).

use std::collections::BTreeSet;
use std::time::Instant;

use super::checkpoint::ModelCheckpoint;
use super::config::{Method, TrainConfig};
use super::hr_align::adam_config;
use super::model::AlignModel;
use super::{epoch_batch, MetricsLog, MetricsRecord, TrainOutcome};
use crate::adapter::{encode_streams, AdapterStack};
use crate::dataset::{even_indices, sample_indices, Domain, PairedDemo, VideoClip};
use crate::encoder::{concat_frames, global_pool, time_contrastive_step, Backbone, PretextConfig};
use crate::error::{Error, Result};
use crate::task_query::QueryEmbedder;
use crate::tensor::{AdamState, RngState, Tensor};

const INIT_STREAM: u64 = 1;
const SCHEDULE_STREAM: u64 = 2;
const FRAME_STREAM: u64 = 3;

/// The network a baseline trains: either a trainable backbone copy or a
/// frozen backbone with adapters.
struct Learner {
    backbone: Backbone,
    stack: AdapterStack,
}

impl Learner {
    fn new(cfg: &TrainConfig, backbone: &Backbone, rng: &mut RngState) -> Result<Self> {
        if cfg.baseline_adapter {
            let frozen = backbone.frozen();
            let stack = AdapterStack::new(&frozen, &cfg.adapter_positions, cfg.adapter_ratio, rng)?;
            Ok(Learner { backbone: frozen, stack })
        } else {
            Ok(Learner {
                backbone: backbone.unfrozen(),
                stack: AdapterStack::empty(),
            })
        }
    }

    fn parameters(&self) -> Vec<Tensor> {
        if self.backbone.is_frozen() {
            self.stack.parameters()
        } else {
            self.backbone.parameters()
        }
    }

    /// `[N, H, W, C]` channels-last features of a frame batch.
    fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        if self.backbone.is_frozen() {
            Ok(encode_streams(&self.backbone, &self.stack, frames, Domain::Robot)?.1.values)
        } else {
            self.backbone.encode_raw(frames)
        }
    }

    fn into_model(self, cfg: &TrainConfig, rng: &mut RngState) -> AlignModel {
        let backbone = self.backbone.frozen();
        let query = QueryEmbedder::new(backbone.out_channels(), rng);
        AlignModel {
            backbone,
            stack: self.stack,
            query,
            use_language: false,
            normalize: cfg.normalize,
        }
    }
}

fn baseline_clips(cfg: &TrainConfig, data: &[PairedDemo]) -> Vec<VideoClip> {
    let mut clips: Vec<VideoClip> = data.iter().map(|p| p.robot.clone()).collect();
    if cfg.full_data {
        clips.extend(data.iter().map(|p| p.human.clone()));
    }
    clips
}

fn check(cfg: &TrainConfig, expected: Method, n_clips: usize) -> Result<()> {
    cfg.validate()?;
    if cfg.method != expected {
        return Err(Error::arg(format!("{expected} trainer got method {}", cfg.method)));
    }
    if cfg.batch_size > n_clips {
        return Err(Error::arg(format!(
            "batch size {} exceeds the {n_clips} available clips",
            cfg.batch_size
        )));
    }
    Ok(())
}

pub fn train_baseline(cfg: &TrainConfig, data: &[PairedDemo], backbone: &Backbone) -> Result<TrainOutcome> {
    match cfg.method {
        Method::PretBaseline => train_baseline_pret(cfg, data, backbone),
        Method::ClsBaseline => train_baseline_cls(cfg, data, backbone),
        Method::HrAlign => Err(Error::arg("hr_align is not a baseline")),
    }
}

/// Continues the time-contrastive pretext objective on robot clips.
pub fn train_baseline_pret(cfg: &TrainConfig, data: &[PairedDemo], backbone: &Backbone) -> Result<TrainOutcome> {
    let clips = baseline_clips(cfg, data);
    check(cfg, Method::PretBaseline, clips.len())?;
    let base = RngState::new(cfg.seed);
    let mut init_rng = base.fork(INIT_STREAM);
    let learner = Learner::new(cfg, backbone, &mut init_rng)?;
    let params = learner.parameters();
    let mut adam = AdamState::new(adam_config(cfg), &params);
    let pretext = PretextConfig {
        temperature: cfg.tau,
        ..Default::default()
    };
    let schedule = base.fork(SCHEDULE_STREAM);
    let started = Instant::now();
    let mut log = MetricsLog::default();
    for step in 0..cfg.steps {
        let picks = epoch_batch(clips.len(), cfg.batch_size, step, &schedule)?;
        let refs: Vec<&VideoClip> = picks.iter().map(|&i| &clips[i]).collect();
        let mut rng = base.fork(FRAME_STREAM).fork(step as u64);
        let (loss, pos_sim, hard_neg_sim) = time_contrastive_step(&|x| learner.encode(x), &refs, &pretext, &mut rng)?;
        params.iter().for_each(Tensor::zero_grad);
        loss.backward()?;
        adam.step(&params)?;
        log.push(MetricsRecord {
            step,
            loss: loss.item(),
            pos_sim,
            hard_neg_sim,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })?;
    }
    let learnable = params.iter().map(Tensor::numel).sum();
    let model = learner.into_model(cfg, &mut init_rng);
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::capture(&model, cfg, cfg.steps as u64, base, Some(&adam)),
        log,
        learnable,
        train_accuracy: None,
    })
}

/// Mean-pooled clip features `[B, C]` over the given frames of each clip.
fn pooled_features(learner_encode: &dyn Fn(&Tensor) -> Result<Tensor>, frames: &[Tensor]) -> Result<Tensor> {
    let t = frames[0].shape()[0];
    if frames.iter().any(|f| f.shape()[0] != t) {
        return Err(Error::dim("clips in a batch must contribute equal frame counts".to_string()));
    }
    let feats = learner_encode(&concat_frames(frames)?)?;
    let c = *feats.shape().last().unwrap();
    let per = feats.numel() / (frames.len() * c);
    global_pool(&feats, frames.len(), per, c)
}

/// Classifies robot clips into their task ids with a linear head.
pub fn train_baseline_cls(cfg: &TrainConfig, data: &[PairedDemo], backbone: &Backbone) -> Result<TrainOutcome> {
    let clips = baseline_clips(cfg, data);
    let classes: BTreeSet<usize> = clips.iter().map(|c| c.task_id).collect();
    if classes.len() < 2 {
        return Err(Error::arg(format!("classification needs at least 2 task classes, found {}", classes.len())));
    }
    check(cfg, Method::ClsBaseline, clips.len())?;
    let n_classes = classes.iter().max().unwrap() + 1;
    let base = RngState::new(cfg.seed);
    let mut init_rng = base.fork(INIT_STREAM);
    let learner = Learner::new(cfg, backbone, &mut init_rng)?;
    let c = learner.backbone.out_channels();
    let head_w = Tensor::randn(&[c, n_classes], 1.0 / (c as f64).sqrt(), &mut init_rng).into_param();
    let head_b = Tensor::zeros(&[n_classes]).into_param();
    let mut params = learner.parameters();
    let encoder_count: usize = params.iter().map(Tensor::numel).sum();
    params.push(head_w.clone());
    params.push(head_b.clone());
    let mut adam = AdamState::new(adam_config(cfg), &params);

    let schedule = base.fork(SCHEDULE_STREAM);
    let started = Instant::now();
    let mut log = MetricsLog::default();
    for step in 0..cfg.steps {
        let picks = epoch_batch(clips.len(), cfg.batch_size, step, &schedule)?;
        let mut rng = base.fork(FRAME_STREAM).fork(step as u64);
        let frames = picks
            .iter()
            .map(|&i| clips[i].select(&sample_indices(clips[i].len(), cfg.frames, &mut rng)))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = picks.iter().map(|&i| clips[i].task_id).collect();
        let pooled = pooled_features(&|x| learner.encode(x), &frames)?;
        let logp = pooled.matmul(&head_w)?.add_broadcast(&head_b)?.log_softmax()?;
        let loss = logp.pick(&labels)?.mean().neg();
        params.iter().for_each(Tensor::zero_grad);
        loss.backward()?;
        adam.step(&params)?;

        let (pos_sim, hard_neg_sim) = {
            let lp = logp.data();
            let b = labels.len();
            let mut pos = 0.0;
            let mut hard = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let row = &lp[i * n_classes..(i + 1) * n_classes];
                pos += row[y].exp();
                hard += (0..n_classes).filter(|&k| k != y).map(|k| row[k].exp()).fold(0.0, f64::max);
            }
            (pos / b as f64, hard / b as f64)
        };
        log.push(MetricsRecord {
            step,
            loss: loss.item(),
            pos_sim,
            hard_neg_sim,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })?;
    }

    let accuracy = accuracy_of(&|x| learner.encode(x), &head_w, &head_b, &clips, cfg.frames)?;
    let learnable = encoder_count + head_w.numel() + head_b.numel();
    let model = learner.into_model(cfg, &mut init_rng);
    let mut checkpoint = ModelCheckpoint::capture(&model, cfg, cfg.steps as u64, base, Some(&adam));
    checkpoint.push("head.weight", &head_w);
    checkpoint.push("head.bias", &head_b);
    Ok(TrainOutcome {
        checkpoint,
        log,
        learnable,
        train_accuracy: Some(accuracy),
    })
}

fn accuracy_of(
    encode: &dyn Fn(&Tensor) -> Result<Tensor>,
    head_w: &Tensor,
    head_b: &Tensor,
    clips: &[VideoClip],
    frames: usize,
) -> Result<f64> {
    let head_w = head_w.detach();
    let head_b = head_b.detach();
    let k = head_b.numel();
    let mut correct = 0usize;
    for chunk in clips.chunks(32) {
        let batch = chunk
            .iter()
            .map(|c| c.select(&even_indices(c.len(), frames)))
            .collect::<Result<Vec<_>>>()?;
        let logits = pooled_features(&|x| Ok(encode(x)?.detach()), &batch)?
            .matmul(&head_w)?
            .add_broadcast(&head_b)?;
        let v = logits.data();
        for (i, clip) in chunk.iter().enumerate() {
            let row = &v[i * k..(i + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += (best == clip.task_id) as usize;
        }
    }
    Ok(correct as f64 / clips.len().max(1) as f64)
}

/// Accuracy of a classification-baseline checkpoint on the robot clips of
/// `data`.
pub fn training_accuracy(ckpt: &ModelCheckpoint, data: &[PairedDemo], frames: usize) -> Result<f64> {
    let (Some(w), Some(b)) = (ckpt.tensor("head.weight"), ckpt.tensor("head.bias")) else {
        return Err(Error::arg("checkpoint has no classification head"));
    };
    let model = ckpt.model()?;
    let clips: Vec<VideoClip> = data.iter().map(|p| p.robot.clone()).collect();
    let encode = |x: &Tensor| -> Result<Tensor> {
        Ok(encode_streams(&model.backbone, &model.stack, x, Domain::Robot)?.1.values)
    };
    accuracy_of(&encode, w, b, &clips, frames)
}
