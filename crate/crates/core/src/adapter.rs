//! Residual bottleneck adapters injected into the frozen backbone.
//!
//! An adapter computes `x + up(relu(down(x)))` with 1x1 convolutions. The
//! up-projection starts at zero, so a fresh adapter is an exact identity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Domain;
use crate::encoder::{to_channels_last, Backbone, FeatureMap};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, RngState, Tensor};

pub const DEFAULT_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Position {
    /// Before the first block.
    E,
    /// Between consecutive blocks.
    M,
    /// After the last block.
    L,
}

/// One of the supported insertion configurations.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PositionSet(Vec<Position>);

impl PositionSet {
    pub fn none() -> Self {
        PositionSet(Vec::new())
    }

    pub fn only(p: Position) -> Self {
        PositionSet(vec![p])
    }

    pub fn all() -> Self {
        PositionSet(vec![Position::E, Position::M, Position::L])
    }

    pub fn positions(&self) -> &[Position] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Site indices covered by the set for a backbone of `n_blocks` blocks.
    pub fn sites(&self, n_blocks: usize) -> Vec<(Position, usize)> {
        let mut out = Vec::new();
        for &p in &self.0 {
            match p {
                Position::E => out.push((p, 0)),
                Position::M => out.extend((1..n_blocks).map(|s| (p, s))),
                Position::L => out.push((p, n_blocks)),
            }
        }
        out.sort_by_key(|&(_, s)| s);
        out
    }
}

impl FromStr for PositionSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(PositionSet::none()),
            "E" => Ok(PositionSet::only(Position::E)),
            "M" => Ok(PositionSet::only(Position::M)),
            "L" => Ok(PositionSet::only(Position::L)),
            "EML" => Ok(PositionSet::all()),
            other => Err(Error::Config(format!(
                "adapter positions must be one of E, M, L, EML, none; got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for PositionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        for p in &self.0 {
            write!(f, "{p:?}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdapterBlock {
    pub down_weight: Tensor,
    pub down_bias: Tensor,
    pub up_weight: Tensor,
    pub up_bias: Tensor,
    pub ratio: usize,
}

impl AdapterBlock {
    /// Small random down-projection, zero up-projection. The hidden width is
    /// `max(1, channels / ratio)`.
    pub fn new(channels: usize, ratio: usize, rng: &mut RngState) -> Result<Self> {
        if channels == 0 || ratio == 0 {
            return Err(Error::arg(format!("adapter needs positive channels and ratio, got {channels}/{ratio}")));
        }
        let hidden = (channels / ratio).max(1);
        let std = (1.0 / channels as f64).sqrt();
        Ok(AdapterBlock {
            down_weight: Tensor::randn(&[hidden, channels, 1, 1], std, rng).into_param(),
            down_bias: Tensor::zeros(&[hidden]).into_param(),
            up_weight: Tensor::zeros(&[channels, hidden, 1, 1]).into_param(),
            up_bias: Tensor::zeros(&[channels]).into_param(),
            ratio,
        })
    }

    pub fn channels(&self) -> usize {
        self.down_weight.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.down_weight.shape()[0]
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![
            self.down_weight.clone(),
            self.down_bias.clone(),
            self.up_weight.clone(),
            self.up_bias.clone(),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }

    /// `x + up(relu(down(x)))` on a channels-first `[C,H,W]` or `[N,C,H,W]` input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c_axis = if x.rank() == 4 { 1 } else { 0 };
        if x.rank() < 3 || x.shape()[c_axis] != self.channels() {
            return Err(Error::dim(format!(
                "adapter expects {} channels, input has shape {:?}",
                self.channels(),
                x.shape()
            )));
        }
        let h = conv2d(x, &self.down_weight, Some(&self.down_bias), 1, 0)?.relu();
        let delta = conv2d(&h, &self.up_weight, Some(&self.up_bias), 1, 0)?;
        x.add(&delta)
    }
}

pub fn adapter_forward(block: &AdapterBlock, x: &Tensor) -> Result<Tensor> {
    block.forward(x)
}

#[derive(Debug, Clone)]
pub struct SiteAdapter {
    pub position: Position,
    pub site: usize,
    pub block: AdapterBlock,
}

#[derive(Debug, Clone)]
pub struct AdapterStack {
    pub positions: PositionSet,
    pub adapters: Vec<SiteAdapter>,
}

impl AdapterStack {
    pub fn empty() -> Self {
        AdapterStack {
            positions: PositionSet::none(),
            adapters: Vec::new(),
        }
    }

    pub fn new(backbone: &Backbone, positions: &PositionSet, ratio: usize, rng: &mut RngState) -> Result<Self> {
        let widths = backbone.site_channels();
        let adapters = positions
            .sites(backbone.blocks.len())
            .into_iter()
            .map(|(position, site)| {
                Ok(SiteAdapter {
                    position,
                    site,
                    block: AdapterBlock::new(widths[site], ratio, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let stack = AdapterStack {
            positions: positions.clone(),
            adapters,
        };
        stack.validate(backbone)?;
        Ok(stack)
    }

    pub fn validate(&self, backbone: &Backbone) -> Result<()> {
        let widths = backbone.site_channels();
        let mut seen = vec![false; widths.len()];
        for a in &self.adapters {
            if a.site >= widths.len() {
                return Err(Error::arg(format!("adapter site {} beyond backbone", a.site)));
            }
            if std::mem::replace(&mut seen[a.site], true) {
                return Err(Error::arg(format!("two adapters at site {}", a.site)));
            }
            if a.block.channels() != widths[a.site] {
                return Err(Error::dim(format!(
                    "adapter at site {} has {} channels, backbone has {}",
                    a.site,
                    a.block.channels(),
                    widths[a.site]
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn block_at(&self, site: usize) -> Option<&AdapterBlock> {
        self.adapters.iter().find(|a| a.site == site).map(|a| &a.block)
    }

    pub fn first_site(&self) -> Option<usize> {
        self.adapters.iter().map(|a| a.site).min()
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.adapters.iter().flat_map(|a| a.block.parameters()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters.iter().map(|a| a.block.parameter_count()).sum()
    }
}

pub fn encode_adapted(backbone: &Backbone, stack: &AdapterStack, frames: &Tensor, domain: Domain) -> Result<FeatureMap> {
    Ok(encode_streams(backbone, stack, frames, domain)?.1)
}

/// Frozen and adapted encodings of the same frames. The two share every
/// computation up to the first adapter site.
pub fn encode_streams(
    backbone: &Backbone,
    stack: &AdapterStack,
    frames: &Tensor,
    domain: Domain,
) -> Result<(FeatureMap, FeatureMap)> {
    if !backbone.is_frozen() {
        return Err(Error::arg("adapted encoding needs a frozen backbone"));
    }
    stack.validate(backbone)?;
    if frames.rank() != 4 || frames.shape()[3] != backbone.in_channels() {
        return Err(Error::dim(format!(
            "backbone expects [T,H,W,{}] frames, got {:?}",
            backbone.in_channels(),
            frames.shape()
        )));
    }
    let acts = backbone.site_activations(frames)?;
    let frozen_out = acts.last().unwrap().clone();
    let adapted_out = match stack.first_site() {
        None => frozen_out.clone(),
        Some(site) => backbone.run_from(acts[site].clone(), site, Some(stack))?,
    };
    let frozen = FeatureMap {
        values: to_channels_last(&frozen_out)?,
        domain,
        adapted: false,
    };
    let adapted = FeatureMap {
        values: to_channels_last(&adapted_out)?,
        domain,
        adapted: true,
    };
    Ok((frozen, adapted))
}

/// Learnable-parameter accounting for an adapted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnableCount {
    pub adapter: usize,
    pub query_projection: usize,
    pub backbone: usize,
}

impl LearnableCount {
    pub fn learnable(&self) -> usize {
        self.adapter + self.query_projection
    }

    /// Adapter parameters relative to the frozen backbone.
    pub fn adapter_ratio(&self) -> f64 {
        ratio(self.adapter, self.backbone)
    }

    /// Everything trained (adapters and query projection) relative to the
    /// frozen backbone.
    pub fn learnable_ratio(&self) -> f64 {
        ratio(self.learnable(), self.backbone)
    }
}

pub fn ratio(learnable: usize, frozen: usize) -> f64 {
    if frozen == 0 {
        0.0
    } else {
        learnable as f64 / frozen as f64
    }
}

pub fn count_learnable(stack: &AdapterStack, query_projection: Option<&[Tensor]>, backbone: &Backbone) -> LearnableCount {
    LearnableCount {
        adapter: stack.parameter_count(),
        query_projection: query_projection.map(|ps| ps.iter().map(Tensor::numel).sum()).unwrap_or(0),
        backbone: backbone.parameter_count(),
    }
}
