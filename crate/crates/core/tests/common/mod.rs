//! Shared test oracles: central finite differences over every differentiable
//! op, and a direct-exponential evaluation of the alignment loss.

#![allow(dead_code)]

use hralign::adapter::{AdapterBlock, AdapterStack, PositionSet};
use hralign::alignment::{hr_align_loss, task_aware_pool, AlignmentBatch, Stream};
use hralign::dataset::{Domain, TaskDescription};
use hralign::encoder::{encode_frozen, Backbone, BackboneSpec};
use hralign::task_query::QueryEmbedder;
use hralign::tensor::{conv2d, RngState, Tensor};
use hralign::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

/// `||analytic - numeric|| / (||analytic|| + ||numeric||)` over all
/// parameters jointly, after perturbing each scalar in place.
pub fn fd_rel_error(params: &[Tensor], f: &dyn Fn() -> Result<Tensor>) -> f64 {
    params.iter().for_each(Tensor::zero_grad);
    let out = f().unwrap();
    assert_eq!(out.numel(), 1, "gradcheck needs a scalar output");
    out.backward().unwrap();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for p in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + FD_STEP;
            p.assign(&v).unwrap();
            let fp = f().unwrap().item();
            v[i] = base[i] - FD_STEP;
            p.assign(&v).unwrap();
            let fm = f().unwrap().item();
            p.assign(&base).unwrap();
            let num = (fp - fm) / (2.0 * FD_STEP);
            diff += (analytic[i] - num).powi(2);
            na += analytic[i].powi(2);
            nn += num.powi(2);
        }
    }
    diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-8)
}

pub fn param(shape: &[usize], rng: &mut RngState) -> Tensor {
    Tensor::randn(shape, 1.0, rng).into_param()
}

/// Values bounded away from zero so ReLU kinks sit far outside the step.
pub fn param_off_zero(shape: &[usize], rng: &mut RngState) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let x = rng.normal();
            x.signum() * (0.05 + x.abs())
        })
        .collect();
    Tensor::param(shape, v).unwrap()
}

pub fn positive(shape: &[usize], rng: &mut RngState) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.uniform_range(0.3, 2.0)).collect()).unwrap()
}

/// Random linear functional, so every output element feeds the check.
pub fn project(y: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(y.mul(w)?.sum())
}

fn weights_like(shape: &[usize], rng: &mut RngState) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

type Case = (&'static str, fn(u64) -> f64);

macro_rules! unary {
    ($name:literal, $mk:ident, $shape:expr, $op:expr) => {
        ($name, |seed| {
            let mut rng = RngState::new(seed);
            let x = $mk(&$shape, &mut rng);
            let probe = x.detach();
            let op: fn(&Tensor) -> Result<Tensor> = $op;
            let w = weights_like(op(&probe).unwrap().shape(), &mut rng);
            fd_rel_error(&[x.clone()], &|| project(&op(&x)?, &w))
        })
    };
}

macro_rules! binary {
    ($name:literal, $sa:expr, $sb:expr, $op:expr) => {
        ($name, |seed| {
            let mut rng = RngState::new(seed);
            let a = param(&$sa, &mut rng);
            let b = param(&$sb, &mut rng);
            let op: fn(&Tensor, &Tensor) -> Result<Tensor> = $op;
            let w = weights_like(op(&a.detach(), &b.detach()).unwrap().shape(), &mut rng);
            fd_rel_error(&[a.clone(), b.clone()], &|| project(&op(&a, &b)?, &w))
        })
    };
}

pub fn cases() -> Vec<Case> {
    vec![
        binary!("add", [3, 4], [3, 4], |a, b| a.add(b)),
        binary!("sub", [3, 4], [3, 4], |a, b| a.sub(b)),
        binary!("mul", [3, 4], [3, 4], |a, b| a.mul(b)),
        binary!("add_broadcast", [2, 3, 4], [4], |a, b| a.add_broadcast(b)),
        binary!("matmul", [4, 5], [5, 2], |a, b| a.matmul(b)),
        binary!("dot", [6], [6], |a, b| a.dot(b)),
        binary!("concat_cols", [3, 2], [3, 4], |a, b| a.concat_cols(b)),
        binary!("stack", [2, 3], [2, 3], |a, b| Tensor::stack(&[a.clone(), b.clone(), a.clone()])),
        unary!("scale", param, [3, 4], |x| Ok(x.scale(-1.7))),
        unary!("add_scalar", param, [5], |x| Ok(x.add_scalar(0.3))),
        unary!("neg", param, [5], |x| Ok(x.neg())),
        unary!("relu", param_off_zero, [4, 5], |x| Ok(x.relu())),
        unary!("exp", param, [4, 3], |x| Ok(x.exp())),
        unary!("log", positive, [4, 3], |x| Ok(x.log())),
        unary!("square", param, [7], |x| Ok(x.square())),
        unary!("sum", param, [3, 4], |x| Ok(x.sum())),
        unary!("mean", param, [3, 4], |x| Ok(x.mean())),
        unary!("mean_rows", param, [5, 3], |x| x.mean_rows()),
        unary!("transpose", param, [3, 5], |x| x.transpose()),
        unary!("reshape", param, [2, 6], |x| x.reshape(&[3, 4])),
        unary!("permute", param, [2, 3, 4], |x| x.permute(&[2, 0, 1])),
        unary!("narrow", param, [5, 3], |x| x.narrow(1, 3)),
        unary!("diag", param, [3, 5], |x| x.diag()),
        unary!("pick", param, [4, 3], |x| x.pick(&[2, 0, 1, 2])),
        unary!("softmax", param, [3, 5], |x| x.softmax()),
        unary!("log_softmax", param, [3, 5], |x| x.log_softmax()),
        unary!("l2_normalize", param, [3, 4], |x| Ok(x.l2_normalize(1e-12))),
        ("conv2d", |seed| {
            let mut rng = RngState::new(seed);
            let x = param(&[2, 4, 4], &mut rng);
            let k = param(&[3, 2, 3, 3], &mut rng);
            let b = param(&[3], &mut rng);
            let w = weights_like(&[3, 4, 4], &mut rng);
            fd_rel_error(&[x.clone(), k.clone(), b.clone()], &|| project(&conv2d(&x, &k, Some(&b), 1, 1)?, &w))
        }),
        ("conv2d_strided_batch", |seed| {
            let mut rng = RngState::new(seed);
            let x = param(&[2, 2, 5, 5], &mut rng);
            let k = param(&[3, 2, 3, 3], &mut rng);
            let w = weights_like(&[2, 3, 3, 3], &mut rng);
            fd_rel_error(&[x.clone(), k.clone()], &|| project(&conv2d(&x, &k, None, 2, 1)?, &w))
        }),
        ("adapter", |seed| {
            let mut rng = RngState::new(seed);
            let block = AdapterBlock::new(8, 4, &mut rng).unwrap();
            // move off the zero init so every path carries signal
            for p in block.parameters() {
                p.assign(&Tensor::randn(p.shape(), 0.5, &mut rng).to_vec()).unwrap();
            }
            let x = param(&[8, 3, 3], &mut rng);
            let w = weights_like(&[8, 3, 3], &mut rng);
            let mut params = block.parameters();
            params.push(x.clone());
            fd_rel_error(&params, &|| project(&block.forward(&x)?, &w))
        }),
        ("attention_pool", |seed| {
            let mut rng = RngState::new(seed);
            let values = param(&[2, 2, 3, 4], &mut rng);
            let query = param(&[4], &mut rng);
            let w = weights_like(&[4], &mut rng);
            fd_rel_error(&[values.clone(), query.clone()], &|| {
                let fm = hralign::encoder::FeatureMap {
                    values: values.clone(),
                    domain: Domain::Robot,
                    adapted: true,
                };
                project(&task_aware_pool(&fm, &query, true, Stream::RobotAdapted)?.vector, &w)
            })
        }),
        ("task_query", |seed| {
            let mut rng = RngState::new(seed);
            let q = QueryEmbedder::new(5, &mut rng);
            q.bias.assign(&Tensor::randn(&[5], 1.0, &mut rng).to_vec()).unwrap();
            let desc = TaskDescription {
                text: "push the red block left".into(),
                task_id: 0,
            };
            let w = weights_like(&[5], &mut rng);
            fd_rel_error(&q.parameters(), &|| project(&q.embed_task(&desc)?, &w))
        }),
        ("hr_align_loss", |seed| {
            let mut rng = RngState::new(seed);
            let m = 1 + (seed as usize % 4);
            let unit = |rng: &mut RngState| Tensor::randn(&[m, 6], 1.0, rng).l2_normalize(1e-12);
            let h = unit(&mut rng);
            let rf = unit(&mut rng);
            let rt = Tensor::randn(&[m, 6], 0.4, &mut rng).into_param();
            fd_rel_error(&[rt.clone()], &|| {
                hr_align_loss(&AlignmentBatch {
                    human: h.clone(),
                    robot_frozen: rf.clone(),
                    robot_adapted: rt.clone(),
                    tau: 0.1,
                })
            })
        }),
        ("hr_align_loss_end_to_end", full_chain),
    ]
}

/// Adapters at every site plus the query projection, through the frozen
/// backbone, attention pooling and the loss.
fn full_chain(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let spec = BackboneSpec {
        channels: vec![3, 4, 6],
        strides: vec![2, 1],
        kernel: 3,
    };
    let backbone = Backbone::new(&spec, &mut rng).unwrap().frozen();
    let stack = AdapterStack::new(&backbone, &PositionSet::all(), 4, &mut rng).unwrap();
    for p in stack.parameters() {
        p.assign(&Tensor::randn(p.shape(), 0.3, &mut rng).to_vec()).unwrap();
    }
    let query = QueryEmbedder::new(6, &mut rng);
    let m = 3;
    let clips: Vec<(Tensor, Tensor)> = (0..m)
        .map(|_| (Tensor::randn(&[2, 8, 8, 3], 1.0, &mut rng), Tensor::randn(&[2, 8, 8, 3], 1.0, &mut rng)))
        .collect();
    let descs: Vec<TaskDescription> = ["stack cups", "open drawer", "push block"]
        .iter()
        .enumerate()
        .map(|(i, t)| TaskDescription {
            text: t.to_string(),
            task_id: i,
        })
        .collect();
    // the frozen streams see a detached query, so hold their copy fixed
    let held = QueryEmbedder::from_weights(query.projection.detach(), query.bias.detach()).unwrap();
    let mut params = stack.parameters();
    params.extend(query.parameters());
    fd_rel_error(&params, &|| {
        let (mut h, mut rf, mut rt) = (Vec::new(), Vec::new(), Vec::new());
        for ((human, robot), d) in clips.iter().zip(&descs) {
            let q = query.embed_task(d)?;
            let qd = held.embed_task(d)?.detach();
            h.push(task_aware_pool(&encode_frozen(&backbone, human, Domain::Human)?, &qd, true, Stream::HumanFrozen)?);
            let (f, a) = hralign::adapter::encode_streams(&backbone, &stack, robot, Domain::Robot)?;
            rf.push(task_aware_pool(&f, &qd, true, Stream::RobotFrozen)?);
            rt.push(task_aware_pool(&a, &q, true, Stream::RobotAdapted)?);
        }
        hr_align_loss(&AlignmentBatch::from_pooled(&h, &rf, &rt, 0.1)?)
    })
}

/// Worst relative error of each case over `seeds` seeds.
pub fn audit(seeds: u64) -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|(name, case)| (name, (0..seeds).map(|s| case(1000 + s)).fold(0.0, f64::max)))
        .collect()
}

/// Direct evaluation with explicit exponentials and a single division per
/// term; only safe on small dots.
pub fn naive_loss(h: &[Vec<f64>], rf: &[Vec<f64>], rt: &[Vec<f64>], tau: f64) -> f64 {
    let s = |x: &[f64], y: &[f64]| (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / tau).exp();
    let m = h.len();
    let mut total = 0.0;
    for i in 0..m {
        let den_h: f64 = s(&h[i], &rf[i]) + (0..m).map(|j| s(&h[i], &rt[j])).sum::<f64>();
        let den_r: f64 = s(&rf[i], &h[i]) + (0..m).map(|j| s(&rt[i], &h[j])).sum::<f64>();
        total += -(s(&h[i], &rt[i]) / den_h).ln() - (s(&rt[i], &h[i]) / den_r).ln();
    }
    total / (2 * m) as f64
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.to_vec().chunks(c).map(<[f64]>::to_vec).collect()
}

/// Random batch with every row norm at most 1.
pub fn small_batch(m: usize, c: usize, rng: &mut RngState) -> [Tensor; 3] {
    let mut mk = || {
        let data: Vec<f64> = (0..m)
            .flat_map(|_| {
                let v: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let r = rng.uniform();
                v.into_iter().map(move |x| x / n * r)
            })
            .collect();
        Tensor::from_vec(&[m, c], data).unwrap()
    };
    [mk(), mk(), mk()]
}
