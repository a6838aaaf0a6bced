//! Task-aware attention pooling and the human-robot contrastive alignment
//! loss.
//!
//! For a batch of `M` pooled triples `(h_i, rf_i, rt_i)` (frozen human,
//! frozen robot, adapted robot) with `S(x, y) = exp(x.y / tau)`:
//!
//! ```text
//! L = 1/(2M) sum_i [ -log S(h_i,rt_i) / (S(h_i,rf_i) + sum_j S(h_i,rt_j))
//!                    -log S(rt_i,h_i) / (S(rf_i,h_i) + sum_j S(rt_i,h_j)) ]
//! ```
//!
//! Both sums run over the whole batch, so the positive pair appears once in
//! each denominator. Everything is evaluated in log space.

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    HumanFrozen,
    RobotFrozen,
    RobotAdapted,
}

#[derive(Debug, Clone)]
pub struct PooledFeature {
    /// `[C]`
    pub vector: Tensor,
    pub stream: Stream,
}

/// Attention weights over the `T*H*W` positions for `query`.
pub fn attention_weights(features: &FeatureMap, query: &Tensor) -> Result<Tensor> {
    let c = features.channels();
    if query.shape() != [c] {
        return Err(Error::dim(format!(
            "query has shape {:?}, feature channels are {c}",
            query.shape()
        )));
    }
    let flat = features.positions()?;
    let p = flat.shape()[0];
    flat.matmul(&query.reshape(&[c, 1])?)?.reshape(&[p])?.softmax()
}

/// Softmax(positions . query)-weighted average of the positions, optionally
/// L2-normalised afterwards.
pub fn task_aware_pool(features: &FeatureMap, query: &Tensor, normalize: bool, stream: Stream) -> Result<PooledFeature> {
    let flat = features.positions()?;
    let (p, c) = (flat.shape()[0], flat.shape()[1]);
    let w = attention_weights(features, query)?;
    let pooled = w.reshape(&[1, p])?.matmul(&flat)?.reshape(&[c])?;
    Ok(PooledFeature {
        vector: if normalize { pooled.l2_normalize(NORM_EPS) } else { pooled },
        stream,
    })
}

/// Plain mean over positions; the pooling used when language guidance is off.
pub fn uniform_pool(features: &FeatureMap, normalize: bool, stream: Stream) -> Result<PooledFeature> {
    let pooled = features.positions()?.mean_rows()?;
    Ok(PooledFeature {
        vector: if normalize { pooled.l2_normalize(NORM_EPS) } else { pooled },
        stream,
    })
}

pub fn similarity(x: &[f64], y: &[f64], tau: f64) -> Result<f64> {
    Ok(log_similarity(x, y, tau)?.exp())
}

pub fn log_similarity(x: &[f64], y: &[f64], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::arg(format!("temperature must be positive, got {tau}")));
    }
    if x.len() != y.len() {
        return Err(Error::dim(format!("similarity of lengths {} and {}", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / tau)
}

#[derive(Debug, Clone)]
pub struct AlignmentBatch {
    /// `[M, C]`, detached frozen human features.
    pub human: Tensor,
    /// `[M, C]`, detached frozen robot features.
    pub robot_frozen: Tensor,
    /// `[M, C]`, adapted robot features carrying the graph.
    pub robot_adapted: Tensor,
    pub tau: f64,
}

impl AlignmentBatch {
    pub fn from_pooled(human: &[PooledFeature], robot_frozen: &[PooledFeature], robot_adapted: &[PooledFeature], tau: f64) -> Result<Self> {
        let stack = |xs: &[PooledFeature], detach: bool| -> Result<Tensor> {
            let vs: Vec<Tensor> = xs.iter().map(|p| if detach { p.vector.detach() } else { p.vector.clone() }).collect();
            Tensor::stack(&vs)
        };
        if human.is_empty() {
            return Err(Error::arg("alignment batch needs M >= 1"));
        }
        if human.len() != robot_frozen.len() || human.len() != robot_adapted.len() {
            return Err(Error::dim(format!(
                "alignment batch lists differ: {} / {} / {}",
                human.len(),
                robot_frozen.len(),
                robot_adapted.len()
            )));
        }
        Ok(AlignmentBatch {
            human: stack(human, true)?,
            robot_frozen: stack(robot_frozen, true)?,
            robot_adapted: stack(robot_adapted, false)?,
            tau,
        })
    }

    pub fn len(&self) -> usize {
        self.human.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn hr_align_loss(batch: &AlignmentBatch) -> Result<Tensor> {
    let AlignmentBatch {
        human,
        robot_frozen,
        robot_adapted,
        tau,
    } = batch;
    if *tau <= 0.0 {
        return Err(Error::arg(format!("temperature must be positive, got {tau}")));
    }
    if human.rank() != 2 || human.shape()[0] == 0 {
        return Err(Error::arg("alignment batch needs M >= 1 rows"));
    }
    if human.shape() != robot_frozen.shape() || human.shape() != robot_adapted.shape() {
        return Err(Error::dim(format!(
            "alignment features disagree: {:?} / {:?} / {:?}",
            human.shape(),
            robot_frozen.shape(),
            robot_adapted.shape()
        )));
    }
    for t in [human, robot_frozen, robot_adapted] {
        if !t.is_finite() {
            return Err(Error::Numeric("alignment features contain non-finite values".into()));
        }
    }
    let m = human.shape()[0];
    let h = human.detach();
    let rf = robot_frozen.detach();

    // dots[i][j] = h_i . rt_j
    let dots = h.matmul(&robot_adapted.transpose()?)?;
    // frozen-robot negatives, constant w.r.t. the adapter
    let c = h.mul(&rf)?.matmul(&Tensor::full(&[h.shape()[1], 1], 1.0))?;

    let inv_tau = 1.0 / tau;
    let human_to_robot = dots.concat_cols(&c)?.scale(inv_tau).log_softmax()?.diag()?;
    let robot_to_human = dots.transpose()?.concat_cols(&c)?.scale(inv_tau).log_softmax()?.diag()?;
    Ok(human_to_robot.add(&robot_to_human)?.sum().scale(-1.0 / (2 * m) as f64))
}
