//! Evaluation of adapted vs frozen features: pair retrieval, a linear task
//! probe, a small behavior-cloning head, and embedding dumps.
//!
//! Nothing here trains the encoder. Features are extracted graph-free and
//! the downstream heads only ever see detached tensors.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{even_indices, PairedDemo, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, RngState, Tensor};
use crate::trainer::{AlignModel, EvalConfig};

/// Frames per clip used for evaluation embeddings, evenly spaced.
pub const EVAL_FRAMES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub tag: String,
    pub n: usize,
    pub r2h_recall_at_1: f64,
    pub r2h_recall_at_5: f64,
    pub h2r_recall_at_1: f64,
    pub h2r_recall_at_5: f64,
    /// Mean reciprocal rank over both directions.
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub tag: String,
    pub probe_accuracy: f64,
    /// Mean squared error per coordinate of the next-position prediction.
    pub bc_mse: f64,
    /// Fraction of test clips whose every predicted position stays within
    /// the tolerance of the true one.
    pub success_rate: f64,
    pub n_train: usize,
    pub n_test: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 1-based rank of `truth` among `scores`. Ties count against the query.
fn pessimistic_rank(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| j != truth && v >= s)
        .count()
}

/// Retrieval metrics for paired features: row `i` of `human` pairs with row
/// `i` of `robot`; similarity is the dot product.
pub fn retrieval_from_features(tag: &str, human: &[Vec<f64>], robot: &[Vec<f64>]) -> Result<RetrievalReport> {
    let n = human.len();
    if n < 2 {
        return Err(Error::arg(format!("retrieval needs at least 2 pairs, got {n}")));
    }
    if robot.len() != n {
        return Err(Error::dim(format!("{n} human vs {} robot features", robot.len())));
    }
    let ranks = |queries: &[Vec<f64>], keys: &[Vec<f64>]| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let scores: Vec<f64> = keys.iter().map(|k| dot(&queries[i], k)).collect();
                pessimistic_rank(&scores, i)
            })
            .collect()
    };
    let r2h = ranks(robot, human);
    let h2r = ranks(human, robot);
    let recall = |r: &[usize], k: usize| r.iter().filter(|&&x| x <= k).count() as f64 / n as f64;
    let mrr = r2h.iter().chain(&h2r).map(|&r| 1.0 / r as f64).sum::<f64>() / (2 * n) as f64;
    Ok(RetrievalReport {
        tag: tag.to_string(),
        n,
        r2h_recall_at_1: recall(&r2h, 1),
        r2h_recall_at_5: recall(&r2h, 5),
        h2r_recall_at_1: recall(&h2r, 1),
        h2r_recall_at_5: recall(&h2r, 5),
        mrr,
    })
}

/// Pooled human (frozen stream) and robot (adapted or frozen stream)
/// embeddings of every pair.
pub fn embed_pairs(model: &AlignModel, pairs: &[PairedDemo], adapted: bool) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let emb = |clip: &VideoClip, p: &PairedDemo, a: bool| model.embed(clip, &p.description, &even_indices(clip.len(), EVAL_FRAMES), a);
    let human = pairs.iter().map(|p| emb(&p.human, p, false)).collect::<Result<_>>()?;
    let robot = pairs.iter().map(|p| emb(&p.robot, p, adapted)).collect::<Result<_>>()?;
    Ok((human, robot))
}

pub fn stream_tag(adapted: bool) -> &'static str {
    if adapted {
        "adapted"
    } else {
        "frozen"
    }
}

pub fn eval_retrieval(model: &AlignModel, pairs: &[PairedDemo], adapted: bool) -> Result<RetrievalReport> {
    if pairs.len() < 2 {
        return Err(Error::arg(format!("retrieval needs at least 2 pairs, got {}", pairs.len())));
    }
    let (h, r) = embed_pairs(model, pairs, adapted)?;
    retrieval_from_features(stream_tag(adapted), &h, &r)
}

/// Seeded split of `0..n` into train and test index lists.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train < 2 || n_train >= n {
        return Err(Error::arg(format!(
            "split of {n} clips at fraction {train_fraction} is too small (train {n_train}, test {})",
            n.saturating_sub(n_train)
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed).shuffle(&mut order);
    let test = order.split_off(n_train);
    Ok((order, test))
}

/// Per-dimension z-scoring fitted on `train`.
struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(train: &[Vec<f64>]) -> Self {
        let d = train[0].len();
        let n = train.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| train.iter().map(|x| x[k]).sum::<f64>() / n).collect();
        let inv_std = (0..d)
            .map(|k| {
                let var = train.iter().map(|x| (x[k] - mean[k]).powi(2)).sum::<f64>() / n;
                1.0 / var.sqrt().max(1e-8)
            })
            .collect();
        Standardizer { mean, inv_std }
    }

    fn apply(&self, xs: &[Vec<f64>]) -> Result<Tensor> {
        let d = self.mean.len();
        let data = xs
            .iter()
            .flat_map(|x| (0..d).map(move |k| (x[k] - self.mean[k]) * self.inv_std[k]))
            .collect();
        Tensor::from_vec(&[xs.len(), d], data)
    }
}

fn check_rows(xs: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = xs.first().map(Vec::len).ok_or_else(|| Error::arg(format!("{what} is empty")))?;
    if d == 0 || xs.iter().any(|x| x.len() != d) {
        return Err(Error::dim(format!("{what} rows have inconsistent widths")));
    }
    Ok(d)
}

/// Trains a softmax-regression probe with full-batch Adam and returns test
/// accuracy.
pub fn probe_accuracy(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    n_classes: usize,
    epochs: usize,
    seed: u64,
) -> Result<f64> {
    let d = check_rows(train_x, "probe training set")?;
    check_rows(test_x, "probe test set")?;
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::dim("probe features and labels differ in length".to_string()));
    }
    if n_classes < 2 || train_y.iter().chain(test_y).any(|&y| y >= n_classes) {
        return Err(Error::arg(format!("labels must lie in 0..{n_classes} with at least 2 classes")));
    }
    let z = Standardizer::fit(train_x);
    let xtr = z.apply(train_x)?;
    let xte = z.apply(test_x)?;
    let mut rng = RngState::new(seed);
    let w = Tensor::randn(&[d, n_classes], 0.01, &mut rng).into_param();
    let b = Tensor::zeros(&[n_classes]).into_param();
    let params = [w.clone(), b.clone()];
    let mut adam = AdamState::new(AdamConfig { lr: 0.05, ..Default::default() }, &params);
    for _ in 0..epochs {
        let logp = xtr.matmul(&w)?.add_broadcast(&b)?.log_softmax()?;
        let loss = logp.pick(train_y)?.mean().neg();
        params.iter().for_each(Tensor::zero_grad);
        loss.backward()?;
        adam.step(&params)?;
    }
    let logits = xte.matmul(&w.detach())?.add_broadcast(&b.detach())?;
    let v = logits.data();
    let correct = test_y
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &v[i * n_classes..(i + 1) * n_classes];
            (0..n_classes).fold(0, |best, k| if row[k] > row[best] { k } else { best }) == y
        })
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

/// Two-layer ReLU regression head trained with full-batch Adam on squared
/// error; returns predictions for `test_x`.
pub fn fit_regressor(
    train_x: &[Vec<f64>],
    train_y: &[Vec<f64>],
    test_x: &[Vec<f64>],
    hidden: usize,
    epochs: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let d = check_rows(train_x, "regression training set")?;
    let out = check_rows(train_y, "regression targets")?;
    check_rows(test_x, "regression test set")?;
    if train_x.len() != train_y.len() {
        return Err(Error::dim("regression features and targets differ in length".to_string()));
    }
    let z = Standardizer::fit(train_x);
    let xtr = z.apply(train_x)?;
    let xte = z.apply(test_x)?;
    let ytr = Tensor::from_vec(&[train_y.len(), out], train_y.concat())?;
    let mut rng = RngState::new(seed);
    let w1 = Tensor::randn(&[d, hidden], (2.0 / d as f64).sqrt(), &mut rng).into_param();
    let b1 = Tensor::zeros(&[hidden]).into_param();
    let w2 = Tensor::randn(&[hidden, out], (1.0 / hidden as f64).sqrt(), &mut rng).into_param();
    let b2 = Tensor::zeros(&[out]).into_param();
    let params = [w1.clone(), b1.clone(), w2.clone(), b2.clone()];
    let mut adam = AdamState::new(AdamConfig { lr: 0.01, ..Default::default() }, &params);
    let forward = |x: &Tensor| -> Result<Tensor> { x.matmul(&w1)?.add_broadcast(&b1)?.relu().matmul(&w2)?.add_broadcast(&b2) };
    for _ in 0..epochs {
        let loss = forward(&xtr)?.sub(&ytr)?.square().mean();
        params.iter().for_each(Tensor::zero_grad);
        loss.backward()?;
        adam.step(&params)?;
    }
    let pred = forward(&xte)?;
    let v = pred.data();
    Ok(v.chunks(out).map(<[f64]>::to_vec).collect())
}

/// Per-frame pooled features of a whole clip, `[len][C]`.
fn frame_features(model: &AlignModel, p: &PairedDemo, adapted: bool) -> Result<Vec<Vec<f64>>> {
    let clip = &p.robot;
    let all: Vec<usize> = (0..clip.len()).collect();
    let fm = model.feature_map(clip, &all, adapted)?;
    let q = model.query_for(&p.description)?.map(|q| q.detach());
    let stream = crate::trainer::stream_of(crate::dataset::Domain::Robot, adapted);
    (0..clip.len())
        .map(|t| {
            let one = crate::encoder::FeatureMap {
                values: fm.values.narrow(t, 1)?,
                domain: fm.domain,
                adapted: fm.adapted,
            };
            Ok(model.pool(&one, q.as_ref(), stream)?.vector.to_vec())
        })
        .collect()
}

pub const BC_HIDDEN: usize = 32;

/// Task probe and behavior-cloning score on the robot clips of `pairs`.
pub fn eval_downstream(model: &AlignModel, pairs: &[PairedDemo], adapted: bool, cfg: &EvalConfig, seed: u64) -> Result<DownstreamReport> {
    if let Some(p) = pairs.iter().find(|p| p.latent.is_none()) {
        return Err(Error::arg(format!("pair {} has no latent trajectory", p.pair_id())));
    }
    let (train, test) = split_indices(pairs.len(), cfg.train_fraction, seed)?;
    let n_classes = pairs.iter().map(PairedDemo::task_id).max().unwrap_or(0) + 1;

    let (_, pooled) = embed_pairs(model, pairs, adapted)?;
    let labels: Vec<usize> = pairs.iter().map(PairedDemo::task_id).collect();
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) { (idx.iter().map(|&i| pooled[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect()) };
    let (trx, try_) = pick(&train);
    let (tex, tey) = pick(&test);
    let probe = probe_accuracy(&trx, &try_, &tex, &tey, n_classes.max(2), cfg.probe_epochs, seed ^ 0x9E0B)?;

    // behavior cloning: frame t's features -> effector position at t + 1
    let examples = |idx: &[usize]| -> Result<Vec<(usize, Vec<f64>, Vec<f64>)>> {
        let mut out = Vec::new();
        for &i in idx {
            let p = &pairs[i];
            let latent = p.latent.as_ref().unwrap();
            if latent.len() != p.robot.len() {
                return Err(Error::dim(format!("pair {} latent length differs from clip", p.pair_id())));
            }
            let feats = frame_features(model, p, adapted)?;
            for t in 0..p.robot.len() - 1 {
                out.push((i, feats[t].clone(), latent.positions[t + 1].to_vec()));
            }
        }
        Ok(out)
    };
    let tr = examples(&train)?;
    let te = examples(&test)?;
    let col = |v: &[(usize, Vec<f64>, Vec<f64>)], k: usize| -> Vec<Vec<f64>> { v.iter().map(|e| if k == 1 { e.1.clone() } else { e.2.clone() }).collect() };
    let pred = fit_regressor(&col(&tr, 1), &col(&tr, 2), &col(&te, 1), BC_HIDDEN, cfg.bc_epochs, seed ^ 0xBC)?;
    let mut sq = 0.0;
    let mut worst = vec![0.0f64; pairs.len()];
    for ((i, _, y), yhat) in te.iter().zip(&pred) {
        let e2: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
        sq += e2;
        worst[*i] = worst[*i].max(e2.sqrt());
    }
    let bc_mse = sq / (2 * te.len()).max(1) as f64;
    let success = test.iter().filter(|&&i| worst[i] <= cfg.tube_tolerance).count() as f64 / test.len() as f64;
    Ok(DownstreamReport {
        tag: stream_tag(adapted).to_string(),
        probe_accuracy: probe,
        bc_mse,
        success_rate: success,
        n_train: train.len(),
        n_test: test.len(),
    })
}

pub fn embeddings_header(channels: usize) -> String {
    let mut h = String::from("clip_id,task_id,domain,adapted");
    for k in 0..channels {
        let _ = write!(h, ",f{k}");
    }
    h
}

/// One CSV row per clip: every human clip (frozen stream) and every robot
/// clip (adapted stream when `adapted`).
pub fn dump_embeddings(model: &AlignModel, pairs: &[PairedDemo], adapted: bool, path: &Path) -> Result<usize> {
    let (human, robot) = embed_pairs(model, pairs, adapted)?;
    let mut text = embeddings_header(model.backbone.out_channels());
    text.push('\n');
    let mut rows = 0;
    for (p, (h, r)) in pairs.iter().zip(human.iter().zip(&robot)) {
        for (clip, feat, a) in [(&p.human, h, false), (&p.robot, r, adapted)] {
            let _ = write!(text, "{:06}_{},{},{},{}", clip.pair_id, clip.domain.as_str(), clip.task_id, clip.domain.as_str(), a);
            for v in feat {
                let _ = write!(text, ",{v:?}");
            }
            text.push('\n');
            rows += 1;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

/// Mean Euclidean distance between features of the same task, over all
/// unordered within-task pairs.
pub fn within_task_spread(features: &[Vec<f64>], tasks: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            if tasks[i] == tasks[j] {
                total += features[i].iter().zip(&features[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Combined output of the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval: Vec<RetrievalReport>,
    pub downstream: Vec<DownstreamReport>,
    /// `(tag, mean within-task distance)` over the human and robot rows of
    /// the embedding dump for that stream.
    pub spread: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn retrieval_for(&self, tag: &str) -> Option<&RetrievalReport> {
        self.retrieval.iter().find(|r| r.tag == tag)
    }

    pub fn downstream_for(&self, tag: &str) -> Option<&DownstreamReport> {
        self.downstream.iter().find(|r| r.tag == tag)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "retrieval (n = {})", self.retrieval.first().map_or(0, |r| r.n));
        let _ = writeln!(s, "  {:<8} {:>8} {:>8} {:>8} {:>8} {:>8}", "model", "r2h@1", "r2h@5", "h2r@1", "h2r@5", "mrr");
        for r in &self.retrieval {
            let _ = writeln!(
                s,
                "  {:<8} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                r.tag, r.r2h_recall_at_1, r.r2h_recall_at_5, r.h2r_recall_at_1, r.h2r_recall_at_5, r.mrr
            );
        }
        let _ = writeln!(s, "downstream");
        let _ = writeln!(s, "  {:<8} {:>8} {:>10} {:>8}", "model", "probe", "bc_mse", "success");
        for d in &self.downstream {
            let _ = writeln!(s, "  {:<8} {:>8.3} {:>10.5} {:>8.3}", d.tag, d.probe_accuracy, d.bc_mse, d.success_rate);
        }
        let _ = writeln!(s, "within-task spread (human + robot)");
        for (tag, v) in &self.spread {
            let _ = writeln!(s, "  {tag:<8} {v:.4}");
        }
        s
    }
}

/// Retrieval, downstream and spread for the adapted and frozen streams.
pub fn evaluate(model: &AlignModel, heldout: &[PairedDemo], cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    let mut report = EvalReport {
        retrieval: Vec::new(),
        downstream: Vec::new(),
        spread: Vec::new(),
    };
    let tasks: Vec<usize> = heldout.iter().map(PairedDemo::task_id).collect();
    let both_tasks: Vec<usize> = tasks.iter().chain(&tasks).copied().collect();
    for adapted in [true, false] {
        let (h, r) = embed_pairs(model, heldout, adapted)?;
        report.retrieval.push(retrieval_from_features(stream_tag(adapted), &h, &r)?);
        let rows: Vec<Vec<f64>> = h.iter().chain(&r).cloned().collect();
        report.spread.push((stream_tag(adapted).to_string(), within_task_spread(&rows, &both_tasks)));
        report.downstream.push(eval_downstream(model, heldout, adapted, cfg, seed)?);
    }
    Ok(report)
}
