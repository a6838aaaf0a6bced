//! In-browser lab around the core crate: render a generated pair at any
//! domain gap, train the adapters a few steps at a time, and look at the
//! attention the task query puts on the 4x4 feature grid.
//!
//! [`Lab`] is plain Rust so it runs (and is tested) natively; [`DemoLab`]
//! is the thin wasm-bindgen face of it.

use hralign::alignment::attention_weights;
use hralign::cli::{generate_sets, pretrain_backbone};
use hralign::dataset::{even_indices, PairedDemo, FRAME_C, FRAME_H, FRAME_W};
use hralign::encoder::Backbone;
use hralign::trainer::{HrAlignTrainer, ModelCheckpoint, RunConfig};
use hralign::Result;
use wasm_bindgen::prelude::*;

pub struct Lab {
    cfg: RunConfig,
    data: Vec<PairedDemo>,
    backbone: Backbone,
    ckpt: ModelCheckpoint,
    losses: Vec<f64>,
}

/// Small enough to pre-train and step in a browser tab.
pub fn lab_config(gap: f64, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.n_tasks = 4;
    cfg.data.pairs_per_task = 6;
    cfg.data.heldout_pairs_per_task = 1;
    cfg.data.gap = gap;
    cfg.data.data_seed = seed;
    cfg.train.seed = seed;
    cfg.train.batch_size = 8;
    cfg.train.frames = 3;
    cfg.train.steps = 0;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch = 8;
    cfg
}

impl Lab {
    pub fn new(gap: f64, seed: u64) -> Result<Self> {
        let cfg = lab_config(gap, seed);
        cfg.validate()?;
        let (data, _) = generate_sets(&cfg)?;
        let (backbone, _) = pretrain_backbone(&cfg, &data)?;
        let ckpt = HrAlignTrainer::new(&cfg.train, &data, &backbone)?.checkpoint();
        Ok(Lab {
            cfg,
            data,
            backbone,
            ckpt,
            losses: Vec::new(),
        })
    }

    pub fn pairs(&self) -> usize {
        self.data.len()
    }

    pub fn description(&self, pair: usize) -> &str {
        &self.data[pair % self.data.len()].description.text
    }

    pub fn clip_len(&self, pair: usize, robot: bool) -> usize {
        let p = &self.data[pair % self.data.len()];
        if robot { p.robot.len() } else { p.human.len() }
    }

    /// RGBA bytes of one 16x16 frame.
    pub fn frame_rgba(&self, pair: usize, robot: bool, t: usize) -> Vec<u8> {
        let p = &self.data[pair % self.data.len()];
        let clip = if robot { &p.robot } else { &p.human };
        let t = t.min(clip.len() - 1);
        let n = FRAME_H * FRAME_W * FRAME_C;
        let px = clip.frames.data()[t * n..(t + 1) * n].to_vec();
        px.chunks(FRAME_C)
            .flat_map(|c| [c[0], c[1], c[2], 1.0].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    /// Mean absolute pixel difference between the two clips of each pair.
    pub fn pixel_gap(&self) -> f64 {
        let per: Vec<f64> = self
            .data
            .iter()
            .map(|p| {
                let (h, r) = (p.human.frames.data(), p.robot.frames.data());
                h.iter().zip(r.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / h.len() as f64
            })
            .collect();
        per.iter().sum::<f64>() / per.len().max(1) as f64
    }

    pub fn steps_done(&self) -> usize {
        self.ckpt.step as usize
    }

    /// Takes `steps` more optimizer steps and returns their losses.
    pub fn train(&mut self, steps: usize) -> Result<Vec<f64>> {
        let mut trainer = HrAlignTrainer::resume(&self.cfg.train, &self.data, &self.ckpt)?;
        trainer.run_until(self.steps_done() + steps)?;
        let new = trainer.log().losses();
        self.ckpt = trainer.checkpoint();
        self.losses.extend(&new);
        Ok(new)
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// Attention over the 4x4 grid of the middle frame, row-major. Robot
    /// clips go through the current adapters.
    pub fn attention(&self, pair: usize, robot: bool) -> Result<Vec<f64>> {
        let model = self.ckpt.model()?;
        let p = &self.data[pair % self.data.len()];
        let clip = if robot { &p.robot } else { &p.human };
        let mid = even_indices(clip.len(), 1);
        let fm = model.feature_map(clip, &mid, robot)?;
        match model.query_for(&p.description)? {
            Some(q) => Ok(attention_weights(&fm, &q.detach())?.to_vec()),
            None => {
                let n = fm.values.numel() / fm.channels();
                Ok(vec![1.0 / n as f64; n])
            }
        }
    }

    pub fn backbone_params(&self) -> usize {
        self.backbone.parameter_count()
    }
}

fn js(e: hralign::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub struct DemoLab(Lab);

#[wasm_bindgen]
impl DemoLab {
    #[wasm_bindgen(constructor)]
    pub fn new(gap: f64, seed: u32) -> std::result::Result<DemoLab, JsValue> {
        Lab::new(gap, seed as u64).map(DemoLab).map_err(js)
    }

    pub fn pairs(&self) -> usize {
        self.0.pairs()
    }

    pub fn description(&self, pair: usize) -> String {
        self.0.description(pair).to_string()
    }

    pub fn clip_len(&self, pair: usize, robot: bool) -> usize {
        self.0.clip_len(pair, robot)
    }

    pub fn frame_rgba(&self, pair: usize, robot: bool, t: usize) -> Vec<u8> {
        self.0.frame_rgba(pair, robot, t)
    }

    pub fn pixel_gap(&self) -> f64 {
        self.0.pixel_gap()
    }

    pub fn steps_done(&self) -> usize {
        self.0.steps_done()
    }

    pub fn train(&mut self, steps: usize) -> std::result::Result<Vec<f64>, JsValue> {
        self.0.train(steps).map_err(js)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.0.losses().to_vec()
    }

    pub fn attention(&self, pair: usize, robot: bool) -> std::result::Result<Vec<f64>, JsValue> {
        self.0.attention(pair, robot).map_err(js)
    }
}
