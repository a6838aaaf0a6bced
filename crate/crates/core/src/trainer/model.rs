use crate::adapter::{encode_streams, AdapterStack};
use crate::alignment::{task_aware_pool, uniform_pool, PooledFeature, Stream};
use crate::dataset::{Domain, TaskDescription, VideoClip};
use crate::encoder::{encode_frozen, Backbone, FeatureMap};
use crate::error::{Error, Result};
use crate::task_query::QueryEmbedder;
use crate::tensor::{RngState, Tensor};

use super::config::TrainConfig;

/// Frozen backbone plus everything trained on top of it.
#[derive(Debug, Clone)]
pub struct AlignModel {
    pub backbone: Backbone,
    pub stack: AdapterStack,
    pub query: QueryEmbedder,
    pub use_language: bool,
    pub normalize: bool,
}

impl AlignModel {
    /// Fresh adapters (identity at init) and query projection on a frozen
    /// backbone.
    pub fn init(backbone: &Backbone, cfg: &TrainConfig, rng: &mut RngState) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(Error::arg("alignment training needs a frozen backbone"));
        }
        let stack = AdapterStack::new(backbone, &cfg.adapter_positions, cfg.adapter_ratio, rng)?;
        let query = QueryEmbedder::new(backbone.out_channels(), rng);
        Ok(AlignModel {
            backbone: backbone.clone(),
            stack,
            query,
            use_language: cfg.use_language,
            normalize: cfg.normalize,
        })
    }

    /// Tensors the optimiser owns: adapters, then the query projection when
    /// pooling is language-guided.
    pub fn learnable(&self) -> Vec<Tensor> {
        let mut p = self.stack.parameters();
        if self.use_language {
            p.extend(self.query.parameters());
        }
        p
    }

    pub fn learnable_count(&self) -> usize {
        self.learnable().iter().map(Tensor::numel).sum()
    }

    pub fn pool(&self, fm: &FeatureMap, query: Option<&Tensor>, stream: Stream) -> Result<PooledFeature> {
        match query {
            Some(q) if self.use_language => task_aware_pool(fm, q, self.normalize, stream),
            _ => uniform_pool(fm, self.normalize, stream),
        }
    }

    /// Query for `desc`, or `None` when pooling is uniform.
    pub fn query_for(&self, desc: &TaskDescription) -> Result<Option<Tensor>> {
        if self.use_language {
            Ok(Some(self.query.embed_task(desc)?))
        } else {
            Ok(None)
        }
    }

    /// Graph-free pooled embedding of `clip` at the given frames. Robot clips
    /// go through the adapters when `adapted` is set; human clips always take
    /// the frozen stream.
    pub fn embed(&self, clip: &VideoClip, desc: &TaskDescription, indices: &[usize], adapted: bool) -> Result<Vec<f64>> {
        let fm = self.feature_map(clip, indices, adapted)?;
        let q = self.query_for(desc)?.map(|q| q.detach());
        let stream = stream_of(clip.domain, adapted);
        Ok(self.pool(&fm, q.as_ref(), stream)?.vector.to_vec())
    }

    /// Feature map of the selected frames, detached from any graph.
    pub fn feature_map(&self, clip: &VideoClip, indices: &[usize], adapted: bool) -> Result<FeatureMap> {
        let frames = clip.select(indices)?;
        let fm = if adapted && clip.domain == Domain::Robot && !self.stack.is_empty() {
            encode_streams(&self.backbone, &self.stack, &frames, clip.domain)?.1
        } else {
            encode_frozen(&self.backbone, &frames, clip.domain)?
        };
        Ok(FeatureMap {
            values: fm.values.detach(),
            ..fm
        })
    }
}

pub fn stream_of(domain: Domain, adapted: bool) -> Stream {
    match (domain, adapted) {
        (Domain::Human, _) => Stream::HumanFrozen,
        (Domain::Robot, false) => Stream::RobotFrozen,
        (Domain::Robot, true) => Stream::RobotAdapted,
    }
}
