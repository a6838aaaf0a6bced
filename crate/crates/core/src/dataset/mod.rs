//! Paired human/robot demonstration clips.
//!
//! Each pair renders one latent effector trajectory twice, once with the
//! human-domain renderer and once with the robot-domain renderer. Clips are
//! stored channels-last as `[T, H, W, C]` with values in `[0, 1]`.

mod generate;
pub(crate) mod manifest;

pub use generate::{generate_paired_set, generate_with, GeneratorConfig, FRAME_C, FRAME_H, FRAME_W};
pub use manifest::{load_manifest, save_manifest, Manifest, ManifestEntry, MANIFEST_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Human,
    Robot,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Human => "human",
            Domain::Robot => "robot",
        }
    }
}

#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Tensor,
    pub domain: Domain,
    pub task_id: usize,
    pub pair_id: usize,
}

impl VideoClip {
    pub fn new(frames: Tensor, domain: Domain, task_id: usize, pair_id: usize) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::dim(format!("clip frames must be [T,H,W,C], got {:?}", frames.shape())));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg(format!("clip {pair_id} ({}) has values outside [0,1]", domain.as_str())));
        }
        Ok(VideoClip {
            frames,
            domain,
            task_id,
            pair_id,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the given frame indices into a `[T, H, W, C]` tensor.
    pub fn select(&self, indices: &[usize]) -> Result<Tensor> {
        let [h, w, c] = self.frame_shape();
        let stride = h * w * c;
        let src = self.frames.data();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::arg(format!("frame {i} out of range for clip of length {}", self.len())));
            }
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
        }
        Tensor::from_vec(&[indices.len(), h, w, c], data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub text: String,
    pub task_id: usize,
}

/// Effector positions in the unit square plus a gripper-closed flag per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTrajectory {
    pub positions: Vec<[f64; 2]>,
    pub gripper: Vec<bool>,
}

impl LatentTrajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PairedDemo {
    pub human: VideoClip,
    pub robot: VideoClip,
    pub description: TaskDescription,
    /// Present for generated data; real recordings have no latent state.
    pub latent: Option<LatentTrajectory>,
}

impl PairedDemo {
    pub fn pair_id(&self) -> usize {
        self.human.pair_id
    }

    pub fn task_id(&self) -> usize {
        self.description.task_id
    }

    pub fn validate(&self) -> Result<()> {
        if self.human.pair_id != self.robot.pair_id {
            return Err(Error::arg(format!(
                "pair ids differ: human {} vs robot {}",
                self.human.pair_id, self.robot.pair_id
            )));
        }
        if self.human.task_id != self.robot.task_id || self.human.task_id != self.description.task_id {
            return Err(Error::arg(format!("task ids disagree in pair {}", self.human.pair_id)));
        }
        if self.human.domain != Domain::Human || self.robot.domain != Domain::Robot {
            return Err(Error::arg(format!("pair {} has swapped domains", self.human.pair_id)));
        }
        if self.description.text.trim().is_empty() {
            return Err(Error::arg(format!("pair {} has an empty description", self.human.pair_id)));
        }
        Ok(())
    }
}

/// Frame indices for the sampling operation: `t` distinct ascending indices
/// when the clip is long enough, otherwise `t` sorted draws with replacement.
pub fn sample_indices(len: usize, t: usize, rng: &mut RngState) -> Vec<usize> {
    assert!(len >= 1 && t >= 1);
    let mut idx: Vec<usize> = if len >= t {
        let mut pool: Vec<usize> = (0..len).collect();
        for i in 0..t {
            let j = i + rng.below(len - i);
            pool.swap(i, j);
        }
        pool.truncate(t);
        pool
    } else {
        (0..t).map(|_| rng.below(len)).collect()
    };
    idx.sort_unstable();
    idx
}

/// Evenly spaced indices covering the whole clip; used where evaluation must
/// not depend on a random draw.
pub fn even_indices(len: usize, t: usize) -> Vec<usize> {
    assert!(len >= 1 && t >= 1);
    if t == 1 {
        return vec![(len - 1) / 2];
    }
    (0..t)
        .map(|i| ((i * (len - 1)) as f64 / (t - 1) as f64).round() as usize)
        .collect()
}

pub fn sample_frames(clip: &VideoClip, t: usize, rng: &mut RngState) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::arg("sample_frames needs T >= 1"));
    }
    clip.select(&sample_indices(clip.len(), t, rng))
}
