//! Per-frame convolutional video backbone and its time-contrastive pretext
//! pre-training on human clips.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterStack;
use crate::dataset::{Domain, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, AdamConfig, AdamState, RngState, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// `channels[0]` is the frame channel count; block `i` maps
    /// `channels[i] -> channels[i + 1]`.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            channels: vec![3, 16, 32, 32],
            strides: vec![2, 2, 1],
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)?.relu())
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub blocks: Vec<ConvBlock>,
    frozen: bool,
}

#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// `[T, H, W, C]`
    pub values: Tensor,
    pub domain: Domain,
    pub adapted: bool,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        *self.values.shape().last().unwrap()
    }

    /// `[T*H*W, C]` view of the map.
    pub fn positions(&self) -> Result<Tensor> {
        let c = self.channels();
        self.values.reshape(&[self.values.numel() / c, c])
    }
}

/// `[T, H, W, C]` frames to `[T, C, H, W]`.
pub(crate) fn to_channels_first(frames: &Tensor) -> Result<Tensor> {
    if frames.rank() != 4 {
        return Err(Error::dim(format!("frames must be [T,H,W,C], got {:?}", frames.shape())));
    }
    frames.permute(&[0, 3, 1, 2])
}

pub(crate) fn to_channels_last(x: &Tensor) -> Result<Tensor> {
    x.permute(&[0, 2, 3, 1])
}

impl Backbone {
    /// He-initialised weights and zero biases; returned unfrozen.
    pub fn new(spec: &BackboneSpec, rng: &mut RngState) -> Result<Self> {
        if spec.channels.len() < 2 || spec.strides.len() != spec.channels.len() - 1 || spec.kernel == 0 {
            return Err(Error::arg(format!("inconsistent backbone spec {spec:?}")));
        }
        let k = spec.kernel;
        let blocks = spec
            .channels
            .windows(2)
            .zip(&spec.strides)
            .map(|(io, &stride)| {
                let (cin, cout) = (io[0], io[1]);
                let std = (2.0 / (cin * k * k) as f64).sqrt();
                Ok(ConvBlock {
                    weight: Tensor::randn(&[cout, cin, k, k], std, rng).into_param(),
                    bias: Tensor::zeros(&[cout]).into_param(),
                    stride,
                    padding: k / 2,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Backbone { blocks, frozen: false })
    }

    pub fn from_blocks(blocks: Vec<ConvBlock>, frozen: bool) -> Self {
        let b = Backbone { blocks, frozen: false };
        if frozen {
            b.frozen()
        } else {
            b.unfrozen()
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Copy whose weights take no gradient.
    pub fn frozen(&self) -> Self {
        self.rebuilt(true)
    }

    /// Trainable copy; the original is untouched.
    pub fn unfrozen(&self) -> Self {
        self.rebuilt(false)
    }

    fn rebuilt(&self, frozen: bool) -> Self {
        let wrap = |t: &Tensor| if frozen { t.detach() } else { t.detach().into_param() };
        Backbone {
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    weight: wrap(&b.weight),
                    bias: wrap(&b.bias),
                    stride: b.stride,
                    padding: b.padding,
                })
                .collect(),
            frozen,
        }
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.blocks.iter().flat_map(|b| [b.weight.clone(), b.bias.clone()]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().unwrap().out_channels()
    }

    /// Channel width at each adapter site: site `i < n` feeds block `i`, site
    /// `n` is the output of the last block.
    pub fn site_channels(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.blocks.iter().map(ConvBlock::in_channels).collect();
        c.push(self.out_channels());
        c
    }

    fn check_frames(&self, frames: &Tensor) -> Result<()> {
        if frames.rank() != 4 || frames.shape()[3] != self.in_channels() {
            return Err(Error::dim(format!(
                "backbone expects [T,H,W,{}] frames, got {:?}",
                self.in_channels(),
                frames.shape()
            )));
        }
        Ok(())
    }

    /// Runs blocks `from..` on a channels-first batch, routing through any
    /// adapter attached to the visited sites.
    pub(crate) fn run_from(&self, mut x: Tensor, from: usize, stack: Option<&AdapterStack>) -> Result<Tensor> {
        for site in from..=self.blocks.len() {
            if let Some(block) = stack.and_then(|s| s.block_at(site)) {
                x = block.forward(&x)?;
            }
            if site < self.blocks.len() {
                x = self.blocks[site].forward(&x)?;
            }
        }
        Ok(x)
    }

    /// Channels-first activations entering each site, `len = blocks + 1`.
    pub(crate) fn site_activations(&self, frames: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = to_channels_first(frames)?;
        let mut acts = Vec::with_capacity(self.blocks.len() + 1);
        for block in &self.blocks {
            acts.push(x.clone());
            x = block.forward(&x)?;
        }
        acts.push(x);
        Ok(acts)
    }

    /// Unpooled per-frame encoding used by trainable paths (pretext and
    /// baselines); does not require a frozen backbone.
    pub fn encode_raw(&self, frames: &Tensor) -> Result<Tensor> {
        self.check_frames(frames)?;
        to_channels_last(&self.run_from(to_channels_first(frames)?, 0, None)?)
    }
}

pub fn encode_frozen(backbone: &Backbone, frames: &Tensor, domain: Domain) -> Result<FeatureMap> {
    if !backbone.is_frozen() {
        return Err(Error::arg("encode_frozen needs a frozen backbone"));
    }
    Ok(FeatureMap {
        values: backbone.encode_raw(frames)?,
        domain,
        adapted: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretextConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub temperature: f64,
    /// Max frame offset counted as a temporal positive.
    pub positive_window: usize,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            epochs: 20,
            batch: 16,
            lr: 1e-3,
            temperature: 0.1,
            positive_window: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretextReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Draws (anchor, positive, far negative) frame indices for one clip.
fn triplet(len: usize, window: usize, rng: &mut RngState) -> (usize, usize, usize) {
    let a = rng.below(len);
    let lo = a.saturating_sub(window);
    let hi = (a + window).min(len - 1);
    let mut p = lo + rng.below(hi - lo + 1);
    if p == a && len > 1 {
        p = if a + 1 < len { a + 1 } else { a - 1 };
    }
    let far = (len / 2).max(1);
    let candidates: Vec<usize> = (0..len).filter(|&i| i.abs_diff(a) >= far).collect();
    let n = if candidates.is_empty() { len - 1 - a } else { candidates[rng.below(candidates.len())] };
    (a, p, n)
}

/// Time-contrastive InfoNCE on globally pooled frame features: each anchor
/// must pick its own clip's nearby frame among every positive in the batch
/// plus a distant frame of its own clip.
pub(crate) fn time_contrastive_loss(
    encode: &dyn Fn(&Tensor) -> Result<Tensor>,
    clips: &[&VideoClip],
    cfg: &PretextConfig,
    rng: &mut RngState,
) -> Result<Tensor> {
    Ok(time_contrastive_step(encode, clips, cfg, rng)?.0)
}

/// Loss plus the mean positive similarity and mean hardest-negative
/// similarity of the batch.
pub(crate) fn time_contrastive_step(
    encode: &dyn Fn(&Tensor) -> Result<Tensor>,
    clips: &[&VideoClip],
    cfg: &PretextConfig,
    rng: &mut RngState,
) -> Result<(Tensor, f64, f64)> {
    let b = clips.len();
    let mut frames = Vec::with_capacity(3 * b);
    let mut negs = Vec::with_capacity(b);
    let mut anchors = Vec::with_capacity(b);
    for clip in clips {
        let (a, p, n) = triplet(clip.len(), cfg.positive_window, rng);
        anchors.push(a);
        frames.push(p);
        negs.push(n);
    }
    // layout: anchors, positives, negatives; each frame is its own T=1 slot
    let mut all = Vec::with_capacity(3 * b);
    for (i, clip) in clips.iter().enumerate() {
        all.push(clip.select(&[anchors[i]])?);
    }
    for (i, clip) in clips.iter().enumerate() {
        all.push(clip.select(&[frames[i]])?);
    }
    for (i, clip) in clips.iter().enumerate() {
        all.push(clip.select(&[negs[i]])?);
    }
    let batch = concat_frames(&all)?;
    let feats = encode(&batch)?; // [3b, h, w, c]
    let c = *feats.shape().last().unwrap();
    let per = feats.numel() / (3 * b * c);
    let pooled = global_pool(&feats, 3 * b, per, c)?.l2_normalize(1e-12); // [3b, c]
    let anchor = pooled.narrow(0, b)?;
    let pos = pooled.narrow(b, b)?;
    let neg = pooled.narrow(2 * b, b)?;
    let sim = anchor.matmul(&pos.transpose()?)?; // [b, b]
    let own_neg = anchor.mul(&neg)?.reshape(&[b, c])?;
    let ones = Tensor::full(&[c, 1], 1.0);
    let neg_col = own_neg.matmul(&ones)?; // [b, 1]
    let table = sim.concat_cols(&neg_col)?;
    let (pos_sim, hard_neg) = {
        let v = table.data();
        let w = b + 1;
        let mut pos = 0.0;
        let mut hard = 0.0;
        for i in 0..b {
            pos += v[i * w + i];
            hard += (0..w).filter(|&j| j != i).map(|j| v[i * w + j]).fold(f64::NEG_INFINITY, f64::max);
        }
        (pos / b as f64, hard / b as f64)
    };
    let logits = table.scale(1.0 / cfg.temperature);
    let target: Vec<usize> = (0..b).collect();
    Ok((logits.log_softmax()?.pick(&target)?.mean().neg(), pos_sim, hard_neg))
}

/// Mean over spatial positions of `[n*per, ...]` channels-last features: `[n, c]`.
pub(crate) fn global_pool(feats: &Tensor, n: usize, per: usize, c: usize) -> Result<Tensor> {
    let flat = feats.reshape(&[n, per * c])?;
    // averaging matrix [per*c, c]
    let mut avg = vec![0.0; per * c * c];
    for p in 0..per {
        for ch in 0..c {
            avg[(p * c + ch) * c + ch] = 1.0 / per as f64;
        }
    }
    flat.matmul(&Tensor::from_vec(&[per * c, c], avg)?)
}

pub(crate) fn concat_frames(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::arg("no frames to concatenate"))?;
    let inner = first.shape()[1..].to_vec();
    let mut data = Vec::new();
    let mut t = 0;
    for p in parts {
        if p.shape()[1..] != inner[..] {
            return Err(Error::dim("frame shapes differ".to_string()));
        }
        t += p.shape()[0];
        data.extend_from_slice(&p.data());
    }
    let mut shape = vec![t];
    shape.extend(inner);
    Tensor::from_vec(&shape, data)
}

/// Trains a backbone copy on human clips and returns it frozen.
pub fn pretext_pretrain(
    init: &Backbone,
    human_clips: &[VideoClip],
    cfg: &PretextConfig,
    rng: &mut RngState,
) -> Result<(Backbone, PretextReport)> {
    if human_clips.is_empty() {
        return Err(Error::arg("pretext pre-training needs at least one clip"));
    }
    if let Some(c) = human_clips.iter().find(|c| c.domain != Domain::Human) {
        return Err(Error::arg(format!("clip {} is not a human clip", c.pair_id)));
    }
    let model = init.unfrozen();
    let report = fit_time_contrastive(&model.parameters(), &|x| model.encode_raw(x), human_clips, cfg, cfg.epochs, rng)?;
    Ok((model.frozen(), report))
}

/// Shared epoch loop for every time-contrastive objective. `params` are the
/// tensors Adam updates.
pub(crate) fn fit_time_contrastive(
    params: &[Tensor],
    encode: &dyn Fn(&Tensor) -> Result<Tensor>,
    clips: &[VideoClip],
    cfg: &PretextConfig,
    epochs: usize,
    rng: &mut RngState,
) -> Result<PretextReport> {
    let batch = cfg.batch.min(clips.len()).max(1);
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..Default::default() }, params);
    let mut report = PretextReport::default();
    {
        let mut eval_rng = rng.fork(0xE7A1);
        let refs: Vec<&VideoClip> = clips.iter().take(batch).collect();
        report.initial_loss = time_contrastive_loss(encode, &refs, cfg, &mut eval_rng)?.item();
    }
    let mut order: Vec<usize> = (0..clips.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let refs: Vec<&VideoClip> = chunk.iter().map(|&i| &clips[i]).collect();
            params.iter().for_each(Tensor::zero_grad);
            let loss = time_contrastive_loss(encode, &refs, cfg, rng)?;
            loss.backward()?;
            adam.step(params)?;
            total += loss.item();
            count += 1;
        }
        report.epoch_losses.push(total / count.max(1) as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_backbone(seed: u64) -> Backbone {
        Backbone::new(&BackboneSpec::default(), &mut RngState::new(seed)).unwrap().frozen()
    }

    #[test]
    fn reference_shape_law() {
        let bb = reference_backbone(1);
        let frames = Tensor::full(&[5, 16, 16, 3], 0.5);
        let fm = encode_frozen(&bb, &frames, Domain::Human).unwrap();
        assert_eq!(fm.values.shape(), &[5, 4, 4, 32]);
        assert!(!fm.adapted);
        let one = encode_frozen(&bb, &Tensor::full(&[1, 16, 16, 3], 0.5), Domain::Human).unwrap();
        assert_eq!(one.values.shape(), &[1, 4, 4, 32]);
    }

    #[test]
    fn zero_frames_with_zero_bias_give_zero_features() {
        let bb = reference_backbone(2);
        let fm = encode_frozen(&bb, &Tensor::zeros(&[2, 16, 16, 3]), Domain::Robot).unwrap();
        assert!(fm.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_channel_count_is_dimension_error() {
        let bb = reference_backbone(2);
        let err = encode_frozen(&bb, &Tensor::zeros(&[2, 16, 16, 4]), Domain::Robot).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn encode_frozen_refuses_trainable_backbone() {
        let bb = reference_backbone(2).unfrozen();
        assert!(encode_frozen(&bb, &Tensor::zeros(&[1, 16, 16, 3]), Domain::Human).is_err());
    }

    #[test]
    fn frozen_encoding_builds_no_graph() {
        let bb = reference_backbone(3);
        let fm = encode_frozen(&bb, &Tensor::full(&[1, 16, 16, 3], 0.2), Domain::Human).unwrap();
        assert!(!fm.values.requires_grad());
    }

    #[test]
    fn frames_are_encoded_independently() {
        let bb = reference_backbone(4);
        let mut rng = RngState::new(9);
        let a = Tensor::randn(&[1, 16, 16, 3], 0.3, &mut rng).add_scalar(0.5);
        let b = Tensor::randn(&[1, 16, 16, 3], 0.3, &mut rng).add_scalar(0.5);
        let clip = concat_frames(&[a.clone(), b.clone(), b.clone(), a.clone()]).unwrap();
        let fm = encode_frozen(&bb, &clip, Domain::Human).unwrap();
        let v = fm.values;
        assert_eq!(v.narrow(0, 1).unwrap().to_vec(), v.narrow(3, 1).unwrap().to_vec());
        let swapped = concat_frames(&[b.clone(), a.clone(), a, b]).unwrap();
        let w = encode_frozen(&bb, &swapped, Domain::Human).unwrap().values;
        assert_eq!(v.narrow(0, 1).unwrap().to_vec(), w.narrow(1, 1).unwrap().to_vec());
        assert_eq!(v.narrow(1, 1).unwrap().to_vec(), w.narrow(0, 1).unwrap().to_vec());
    }

    #[test]
    fn triplets_respect_window_and_distance() {
        let mut rng = RngState::new(1);
        for len in [2usize, 3, 8, 24] {
            for _ in 0..100 {
                let (a, p, n) = triplet(len, 2, &mut rng);
                assert!(a < len && p < len && n < len);
                assert_ne!(a, p);
                assert!(a.abs_diff(p) <= 2);
                assert!(a.abs_diff(n) >= (len / 2).max(1) || len <= 2);
            }
        }
    }
}
