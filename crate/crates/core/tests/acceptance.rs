//! Acceptance run: one PASS/FAIL line per numbered criterion, on the
//! reference configuration (8 tasks x 32 pairs, gap 0.7, M=16, 300 steps,
//! seed 7). Takes a few minutes on one core.

mod common;

use std::time::Instant;

use hralign::adapter::{encode_adapted, AdapterStack, PositionSet};
use hralign::alignment::{hr_align_loss, AlignmentBatch, Stream};
use hralign::cli::{generate_sets, pretrain_backbone};
use hralign::dataset::{even_indices, load_manifest, save_manifest, Domain, PairedDemo};
use hralign::encoder::{encode_frozen, Backbone};
use hralign::eval::evaluate;
use hralign::tensor::{RngState, Tensor};
use hralign::trainer::{
    run_ablation_grid, train_baseline_cls, train_baseline_pret, train_hr_align, HrAlignTrainer, Method, ModelCheckpoint,
    RunConfig, TrainConfig,
};

struct Outcome {
    lines: Vec<(usize, bool, String)>,
}

impl Outcome {
    fn record(&mut self, id: usize, pass: bool, detail: String) {
        println!("criterion {id:>2}: {}  {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((id, pass, detail));
    }
}

fn bits(ps: &[Tensor]) -> Vec<Vec<u64>> {
    ps.iter().map(|p| p.to_vec().iter().map(|v| v.to_bits()).collect()).collect()
}

fn same_set(a: &[PairedDemo], b: &[PairedDemo]) -> bool {
    let fb = |t: &Tensor| bits(std::slice::from_ref(t));
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            fb(&x.human.frames) == fb(&y.human.frames)
                && fb(&x.robot.frames) == fb(&y.robot.frames)
                && x.description == y.description
                && x.latent == y.latent
        })
}

// widths 3,16,32,32 at sites 0..=3; hidden max(1, C/4); 1x1 down and up with biases
fn size_sum(sites: &[usize]) -> usize {
    let widths = [3usize, 16, 32, 32];
    sites
        .iter()
        .map(|&s| {
            let c = widths[s];
            let h = (c / 4).max(1);
            2 * h * c + h + c
        })
        .sum()
}

fn criterion_1(out: &mut Outcome) {
    let t = Instant::now();
    let report = common::audit(20);
    let secs = t.elapsed().as_secs_f64();
    let (worst_name, worst) = report.iter().fold(("", 0.0), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    out.record(
        1,
        worst < common::FD_TOL && secs < 60.0,
        format!("{} ops x 20 seeds, worst rel err {worst:.2e} ({worst_name}), {secs:.1}s", report.len()),
    );
}

fn criterion_2(out: &mut Outcome, backbone: &Backbone, cfg: &TrainConfig, pair: &PairedDemo) {
    let model = hralign::trainer::AlignModel::init(backbone, cfg, &mut RngState::new(1)).unwrap();
    let idx = |len| even_indices(len, cfg.frames);
    let q = model.query_for(&pair.description).unwrap();
    let qd = q.as_ref().map(Tensor::detach);
    let h = model.feature_map(&pair.human, &idx(pair.human.len()), false).unwrap();
    let frames = pair.robot.select(&idx(pair.robot.len())).unwrap();
    let (f, a) = hralign::adapter::encode_streams(&model.backbone, &model.stack, &frames, Domain::Robot).unwrap();
    let batch = AlignmentBatch::from_pooled(
        &[model.pool(&h, qd.as_ref(), Stream::HumanFrozen).unwrap()],
        &[model.pool(&f, qd.as_ref(), Stream::RobotFrozen).unwrap()],
        &[model.pool(&a, q.as_ref(), Stream::RobotAdapted).unwrap()],
        cfg.tau,
    )
    .unwrap();
    let loss = hr_align_loss(&batch).unwrap().item();
    let err = (loss - std::f64::consts::LN_2).abs();
    out.record(2, err < 1e-9, format!("M=1 loss {loss:.12}, |loss - ln 2| = {err:.1e}"));
}

fn criterion_3(out: &mut Outcome, backbone: &Backbone, train: &[PairedDemo]) {
    let mut rng = RngState::new(3);
    let stack = AdapterStack::new(backbone, &PositionSet::all(), 4, &mut rng).unwrap();
    let mut equal = 0;
    for k in 0..100 {
        let clip = if k % 2 == 0 { &train[rng.below(train.len())].robot } else { &train[rng.below(train.len())].human };
        let frames = hralign::dataset::sample_frames(clip, 1 + rng.below(5), &mut rng).unwrap();
        let a = encode_adapted(backbone, &stack, &frames, clip.domain).unwrap().values;
        let f = encode_frozen(backbone, &frames, clip.domain).unwrap().values;
        equal += (bits(&[a]) == bits(&[f])) as usize;
    }
    out.record(3, equal == 100, format!("{equal}/100 clips bitwise equal (adapters at E, M and L)"));
}

fn main() {
    let start = Instant::now();
    let mut out = Outcome { lines: Vec::new() };
    let mut cfg = RunConfig::default();
    let tmp = tempfile::tempdir().unwrap();
    cfg.train.out_dir = tmp.path().to_path_buf();
    let tc = cfg.train.clone();
    println!(
        "reference: {} tasks x {} pairs, gap {}, M={}, {} steps, seed {}",
        cfg.data.n_tasks, cfg.data.pairs_per_task, cfg.data.gap, tc.batch_size, tc.steps, tc.seed
    );

    criterion_1(&mut out);

    let (train, heldout) = generate_sets(&cfg).unwrap();
    let (backbone, pre) = pretrain_backbone(&cfg, &train).unwrap();
    println!(
        "pretext loss {:.4} -> {:.4}",
        pre.initial_loss,
        pre.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );

    criterion_2(&mut out, &backbone, &tc, &train[0]);
    criterion_3(&mut out, &backbone, &train);

    // 4: the reference run
    let before = bits(&backbone.parameters());
    let run = train_hr_align(&tc, &train, &backbone).unwrap();
    let model = run.checkpoint.model().unwrap();
    let mut expected = model.stack.parameters();
    expected.extend(model.query.parameters());
    let learnable = model.learnable();
    let exact_set = learnable.len() == expected.len() && learnable.iter().zip(&expected).all(|(a, b)| a.same_tensor(b));
    let frozen_ok = bits(&backbone.parameters()) == before && bits(&model.backbone.parameters()) == before;
    out.record(
        4,
        frozen_ok && exact_set && run.learnable == model.learnable_count(),
        format!(
            "backbone bitwise unchanged: {frozen_ok}; learnable = adapters ({}) + query ({}) = {}",
            model.stack.parameter_count(),
            model.query.parameters().iter().map(Tensor::numel).sum::<usize>(),
            run.learnable
        ),
    );

    // 5 and 6
    let report = evaluate(&model, &heldout, &cfg.eval, tc.seed).unwrap();
    let (ra, rf) = (report.retrieval_for("adapted").unwrap(), report.retrieval_for("frozen").unwrap());
    let gain = ra.r2h_recall_at_1 - rf.r2h_recall_at_1;
    let (first, last) = (run.log.head_mean(10, |r| r.loss), run.log.tail_mean(10, |r| r.loss));
    out.record(
        5,
        gain >= 0.2 && last < first,
        format!(
            "r2h@1 adapted {:.3} vs frozen {:.3} (gain {gain:+.3}, need >= +0.2); loss {first:.4} -> {last:.4}",
            ra.r2h_recall_at_1, rf.r2h_recall_at_1
        ),
    );
    let (da, df) = (report.downstream_for("adapted").unwrap(), report.downstream_for("frozen").unwrap());
    out.record(
        6,
        da.probe_accuracy >= df.probe_accuracy && da.bc_mse <= df.bc_mse,
        format!(
            "probe {:.3} vs {:.3}; bc mse {:.5} vs {:.5} (adapted vs frozen, {} test pairs)",
            da.probe_accuracy, df.probe_accuracy, da.bc_mse, df.bc_mse, da.n_test
        ),
    );

    // 7
    let pret = train_baseline_pret(&TrainConfig { method: Method::PretBaseline, ..tc.clone() }, &train, &backbone);
    let cls = train_baseline_cls(&TrainConfig { method: Method::ClsBaseline, ..tc.clone() }, &train, &backbone);
    let n_bb = backbone.parameter_count();
    let adapter = model.stack.parameter_count();
    let ratio = adapter as f64 / n_bb as f64;
    let detail = match (&pret, &cls) {
        (Ok(p), Ok(c)) => {
            let head = c.learnable - n_bb;
            out.record(
                7,
                p.learnable == n_bb && c.learnable == n_bb + 32 * cfg.data.n_tasks + cfg.data.n_tasks && head > 0 && ratio < 0.1,
                format!(
                    "pret {} / cls {} learnable (backbone {n_bb}); adapters {adapter}/{n_bb} = {:.1}%; with query projection {:.1}%; cls train acc {:.3}",
                    p.learnable,
                    c.learnable,
                    100.0 * ratio,
                    100.0 * run.learnable as f64 / n_bb as f64,
                    c.train_accuracy.unwrap_or(f64::NAN)
                ),
            );
            None
        }
        (p, c) => Some(format!("pret {:?} / cls {:?}", p.as_ref().err(), c.as_ref().err())),
    };
    if let Some(d) = detail {
        out.record(7, false, d);
    }

    // 8
    let t8 = Instant::now();
    let rows = run_ablation_grid(&cfg, &train, &heldout, &backbone, &mut |r| {
        println!("  ablation {:<8} adapters {:>4}", r.variant.name, r.adapter_params)
    })
    .unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.variant.name.as_str()).collect();
    let oracle = [size_sum(&[0]), size_sum(&[1, 2]), size_sum(&[3]), size_sum(&[0, 1, 2, 3]), size_sum(&[3])];
    let counts: Vec<usize> = rows.iter().map(|r| r.adapter_params).collect();
    let ordered = counts.len() == 5 && counts[0] < counts[2] && counts[2] < counts[1] && counts[1] < counts[3];
    let r1 = |i: usize| rows[i].eval.retrieval_for("adapted").unwrap().r2h_recall_at_1;
    let lang_ok = rows.len() == 5 && r1(4) <= r1(2);
    out.record(
        8,
        names == ["E", "M", "L", "EML", "L-nolang"]
            && counts == oracle
            && ordered
            && rows.iter().all(|r| r.backbone_unchanged)
            && lang_ok,
        format!(
            "counts E {} < L {} < M {} < EML {} (size-sum oracle agrees: {}); r2h@1 L-nolang {:.3} <= L {:.3}; {:.0}s",
            counts[0],
            counts[2],
            counts[1],
            counts[3],
            counts == oracle,
            r1(4),
            r1(2),
            t8.elapsed().as_secs_f64()
        ),
    );

    // 9
    let again = train_hr_align(&tc, &train, &backbone).unwrap();
    let deterministic = again.log.same_trajectory(&run.log) && again.checkpoint.same_contents(&run.checkpoint);
    let mut first_half = HrAlignTrainer::new(&tc, &train, &backbone).unwrap();
    first_half.run_until(tc.steps / 2).unwrap();
    let ck_path = tmp.path().join("half.ckpt");
    first_half.checkpoint().save(&ck_path).unwrap();
    let mut second = HrAlignTrainer::resume(&tc, &train, &ModelCheckpoint::load(&ck_path).unwrap()).unwrap();
    second.run_until(tc.steps).unwrap();
    let mut joined = first_half.log().clone();
    second.log().records.iter().for_each(|r| joined.push(*r).unwrap());
    let resumed = joined.same_trajectory(&run.log) && second.checkpoint().same_contents(&run.checkpoint);
    let mpath = tmp.path().join("rt").join("manifest.json");
    let m1 = save_manifest(&train, &mpath).unwrap();
    let loaded = load_manifest(&mpath).unwrap();
    let m2 = save_manifest(&loaded, &tmp.path().join("rt2").join("manifest.json")).unwrap();
    let round_trip = same_set(&train, &loaded) && m1 == m2;
    out.record(
        9,
        deterministic && resumed && round_trip,
        format!("rerun bitwise {deterministic}; {}+{} resume bitwise {resumed}; manifest round trip {round_trip}", tc.steps / 2, tc.steps - tc.steps / 2),
    );

    // 10
    let mut rng = RngState::new(10);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let m = 1 + k % 4;
        let [h, rf, rt] = common::small_batch(m, 2 + rng.below(6), &mut rng);
        let got = hr_align_loss(&AlignmentBatch {
            human: h.clone(),
            robot_frozen: rf.clone(),
            robot_adapted: rt.clone(),
            tau: 0.1,
        })
        .unwrap()
        .item();
        let want = common::naive_loss(&common::rows(&h), &common::rows(&rf), &common::rows(&rt), 0.1);
        worst = worst.max((got - want).abs());
    }
    out.record(10, worst < 1e-9, format!("100 batches, M <= 4, norms <= 1: max |log-space - direct| = {worst:.1e}"));

    let failed: Vec<usize> = out.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    println!(
        "{} of {} criteria pass in {:.0}s",
        out.lines.len() - failed.len(),
        out.lines.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
