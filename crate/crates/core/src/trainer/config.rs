//! Flat `key = value` run configuration.
//!
//! One file drives every stage of the pipeline. Blank lines and `#` comments
//! are ignored; unknown keys are an error so typos do not go unnoticed.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{PositionSet, DEFAULT_RATIO};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    HrAlign,
    PretBaseline,
    ClsBaseline,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hr_align" => Ok(Method::HrAlign),
            "pret_baseline" | "pret" => Ok(Method::PretBaseline),
            "cls_baseline" | "cls" => Ok(Method::ClsBaseline),
            other => Err(Error::Config(format!(
                "method must be hr_align, pret_baseline or cls_baseline; got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::HrAlign => "hr_align",
            Method::PretBaseline => "pret_baseline",
            Method::ClsBaseline => "cls_baseline",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub adapter_positions: PositionSet,
    pub adapter_ratio: usize,
    pub use_language: bool,
    pub frames: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub steps: usize,
    pub seed: u64,
    pub normalize: bool,
    /// Baselines only: train on human and robot clips instead of robot only.
    pub full_data: bool,
    /// Baselines only: train an adapter stack on the frozen backbone instead
    /// of the whole backbone.
    pub baseline_adapter: bool,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::HrAlign,
            adapter_positions: "L".parse().unwrap(),
            adapter_ratio: DEFAULT_RATIO,
            use_language: true,
            frames: 5,
            batch_size: 16,
            lr: 1e-3,
            tau: 0.1,
            steps: 300,
            seed: 7,
            normalize: true,
            full_data: false,
            baseline_adapter: false,
            out_dir: PathBuf::from("runs/reference"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("batch_size", self.batch_size),
            ("adapter_ratio", self.adapter_ratio),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config(format!("lr and tau must be positive (lr={}, tau={})", self.lr, self.tau)));
        }
        if self.method == Method::HrAlign && self.adapter_positions.is_empty() && self.steps > 0 {
            return Err(Error::Config("hr_align with adapter_positions = none has nothing to train".into()));
        }
        Ok(())
    }

    /// Hash of every field that influences the training trajectory. The
    /// step count only says where a run stops, so a checkpoint can be
    /// extended with a larger `steps`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.steps = 0;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_tasks: usize,
    pub pairs_per_task: usize,
    pub heldout_pairs_per_task: usize,
    pub gap: f64,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_tasks: 8,
            pairs_per_task: 32,
            heldout_pairs_per_task: 16,
            gap: 0.7,
            data_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub probe_epochs: usize,
    pub bc_epochs: usize,
    pub train_fraction: f64,
    pub tube_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            probe_epochs: 300,
            bc_epochs: 1000,
            train_fraction: 0.6,
            tube_tolerance: 0.1,
        }
    }
}

/// Everything one pipeline run needs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub pretrain: crate::encoder::PretextConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true/false, got `{value}`"))),
    }
}

pub const KEYS: &[&str] = &[
    "method",
    "adapter_positions",
    "adapter_ratio",
    "use_language",
    "frames",
    "batch_size",
    "lr",
    "tau",
    "steps",
    "seed",
    "normalize",
    "full_data",
    "baseline_adapter",
    "out_dir",
    "n_tasks",
    "pairs_per_task",
    "heldout_pairs_per_task",
    "gap",
    "data_seed",
    "pretrain_epochs",
    "pretrain_batch",
    "pretrain_lr",
    "pretrain_tau",
    "pretrain_window",
    "probe_epochs",
    "bc_epochs",
    "train_fraction",
    "tube_tolerance",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key.trim() {
            "method" => t.method = v.parse()?,
            "adapter_positions" => t.adapter_positions = v.parse()?,
            "adapter_ratio" => t.adapter_ratio = parse(key, v)?,
            "use_language" => t.use_language = parse_bool(key, v)?,
            "frames" => t.frames = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "tau" => t.tau = parse(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "normalize" => t.normalize = parse_bool(key, v)?,
            "full_data" => t.full_data = parse_bool(key, v)?,
            "baseline_adapter" => t.baseline_adapter = parse_bool(key, v)?,
            "out_dir" => t.out_dir = PathBuf::from(v),
            "n_tasks" => self.data.n_tasks = parse(key, v)?,
            "pairs_per_task" => self.data.pairs_per_task = parse(key, v)?,
            "heldout_pairs_per_task" => self.data.heldout_pairs_per_task = parse(key, v)?,
            "gap" => self.data.gap = parse(key, v)?,
            "data_seed" => self.data.data_seed = parse(key, v)?,
            "pretrain_epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain_batch" => self.pretrain.batch = parse(key, v)?,
            "pretrain_lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain_tau" => self.pretrain.temperature = parse(key, v)?,
            "pretrain_window" => self.pretrain.positive_window = parse(key, v)?,
            "probe_epochs" => self.eval.probe_epochs = parse(key, v)?,
            "bc_epochs" => self.eval.bc_epochs = parse(key, v)?,
            "train_fraction" => self.eval.train_fraction = parse(key, v)?,
            "tube_tolerance" => self.eval.tube_tolerance = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.n_tasks < 2 || self.data.pairs_per_task == 0 || self.data.heldout_pairs_per_task == 0 {
            return Err(Error::Config("need n_tasks >= 2 and positive pair counts".into()));
        }
        if !(0.0..=1.0).contains(&self.data.gap) {
            return Err(Error::Config(format!("gap must lie in [0,1], got {}", self.data.gap)));
        }
        if !(self.eval.train_fraction > 0.0 && self.eval.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0,1)".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an identical config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let d = &self.data;
        let p = &self.pretrain;
        let e = &self.eval;
        let lines = [
            format!("method = {}", t.method),
            format!("adapter_positions = {}", t.adapter_positions),
            format!("adapter_ratio = {}", t.adapter_ratio),
            format!("use_language = {}", t.use_language),
            format!("frames = {}", t.frames),
            format!("batch_size = {}", t.batch_size),
            format!("lr = {:?}", t.lr),
            format!("tau = {:?}", t.tau),
            format!("steps = {}", t.steps),
            format!("seed = {}", t.seed),
            format!("normalize = {}", t.normalize),
            format!("full_data = {}", t.full_data),
            format!("baseline_adapter = {}", t.baseline_adapter),
            format!("out_dir = {}", t.out_dir.display()),
            format!("n_tasks = {}", d.n_tasks),
            format!("pairs_per_task = {}", d.pairs_per_task),
            format!("heldout_pairs_per_task = {}", d.heldout_pairs_per_task),
            format!("gap = {:?}", d.gap),
            format!("data_seed = {}", d.data_seed),
            format!("pretrain_epochs = {}", p.epochs),
            format!("pretrain_batch = {}", p.batch),
            format!("pretrain_lr = {:?}", p.lr),
            format!("pretrain_tau = {:?}", p.temperature),
            format!("pretrain_window = {}", p.positive_window),
            format!("probe_epochs = {}", e.probe_epochs),
            format!("bc_epochs = {}", e.bc_epochs),
            format!("train_fraction = {:?}", e.train_fraction),
            format!("tube_tolerance = {:?}", e.tube_tolerance),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}
