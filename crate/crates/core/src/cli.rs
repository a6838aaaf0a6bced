//! Command-line entry points. Every command reads the flat config file,
//! applies `--set key=value` overrides, and writes its artifacts plus a
//! resolved config copy and an artifact list into its own directory under
//! `out_dir`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::dataset::{generate_with, load_manifest, save_manifest, GeneratorConfig, PairedDemo, VideoClip};
use crate::encoder::{pretext_pretrain, Backbone, BackboneSpec, PretextReport};
use crate::error::{Error, Result};
use crate::eval::{dump_embeddings, evaluate};
use crate::tensor::RngState;
use crate::trainer::{run_ablation_grid, train_baseline, AblationRow, HrAlignTrainer, Method, ModelCheckpoint, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "hralign", version, about = "Align a frozen video encoder to robot clips with adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineKind {
    Pret,
    Cls,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the training and held-out paired datasets.
    Generate(Common),
    /// Pre-train the backbone on human clips with the pretext objective.
    Pretrain(Common),
    /// Train adapters and the task query on paired clips.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier `adapt` run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune the backbone with a baseline objective.
    Baseline {
        kind: BaselineKind,
        #[command(flatten)]
        common: Common,
    },
    /// Run the five-variant adapter-position ablation.
    Ablate(Common),
    /// Retrieval and downstream evaluation on the held-out set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the `adapt` output.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write pooled embeddings of the held-out clips as CSV.
    Dump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Problems with the invocation itself, reported with exit code 1.
struct Usage(String);

fn load_config(common: &Common) -> std::result::Result<RunConfig, Usage> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Usage(format!("config file not found: {}", path.display())));
            }
            RunConfig::load(path).map_err(|e| Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k, v).map_err(|e| Usage(e.to_string()))?;
    }
    if let Some(out) = &common.out {
        cfg.train.out_dir = out.clone();
    }
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(cfg)
}

/// Collects the files a command writes and records them on completion.
struct RunDir {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct ArtifactList<'a> {
    command: &'a str,
    config_hash: String,
    files: Vec<String>,
}

impl RunDir {
    fn open(cfg: &RunConfig, name: &str) -> Result<Self> {
        let dir = cfg.train.out_dir.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut run = RunDir { dir, files: Vec::new() };
        run.write("config.resolved", cfg.to_text().as_bytes())?;
        Ok(run)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, serde_json::to_string_pretty(value)?.as_bytes())
    }

    fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<()> {
        let list_path = self.dir.join("artifacts.json");
        self.files.push(list_path.clone());
        let files = self
            .files
            .iter()
            .map(|p| p.strip_prefix(&self.dir).unwrap_or(p).display().to_string())
            .collect();
        let list = ArtifactList {
            command,
            config_hash: cfg.train.hash(),
            files,
        };
        fs::write(&list_path, serde_json::to_string_pretty(&list)?).map_err(|e| Error::io(&list_path, e))
    }
}

pub fn train_manifest(cfg: &RunConfig) -> PathBuf {
    cfg.train.out_dir.join("data").join("train").join("manifest.json")
}

pub fn heldout_manifest(cfg: &RunConfig) -> PathBuf {
    cfg.train.out_dir.join("data").join("heldout").join("manifest.json")
}

pub fn backbone_path(cfg: &RunConfig) -> PathBuf {
    cfg.train.out_dir.join("pretrain").join("backbone.ckpt")
}

pub fn adapt_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.train.out_dir.join("adapt").join("checkpoint.ckpt")
}

/// Training and held-out sets. The held-out pairs continue the pair-id
/// sequence after the training pairs, so the two sets never overlap.
pub fn generate_sets(cfg: &RunConfig) -> Result<(Vec<PairedDemo>, Vec<PairedDemo>)> {
    let d = &cfg.data;
    let rng = RngState::new(d.data_seed);
    let train = generate_with(&rng, &GeneratorConfig::new(d.n_tasks, d.pairs_per_task, d.gap))?;
    let heldout = generate_with(
        &rng,
        &GeneratorConfig {
            first_pair_id: d.n_tasks * d.pairs_per_task,
            ..GeneratorConfig::new(d.n_tasks, d.heldout_pairs_per_task, d.gap)
        },
    )?;
    Ok((train, heldout))
}

/// Randomly initialised backbone and its pretext-trained frozen version.
pub fn pretrain_backbone(cfg: &RunConfig, train: &[PairedDemo]) -> Result<(Backbone, PretextReport)> {
    let base = RngState::new(cfg.train.seed).fork(0xBAC0);
    let init = Backbone::new(&BackboneSpec::default(), &mut base.fork(0))?;
    let human: Vec<VideoClip> = train.iter().map(|p| p.human.clone()).collect();
    pretext_pretrain(&init, &human, &cfg.pretrain, &mut base.fork(1))
}

fn need(path: &Path, producer: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} is missing; run `hralign {producer}` first", path.display())))
    }
}

fn load_train(cfg: &RunConfig) -> Result<Vec<PairedDemo>> {
    let p = train_manifest(cfg);
    need(&p, "generate")?;
    load_manifest(&p)
}

fn load_heldout(cfg: &RunConfig) -> Result<Vec<PairedDemo>> {
    let p = heldout_manifest(cfg);
    need(&p, "generate")?;
    load_manifest(&p)
}

fn load_backbone(cfg: &RunConfig) -> Result<Backbone> {
    let p = backbone_path(cfg);
    need(&p, "pretrain")?;
    ModelCheckpoint::load(&p)?.backbone()
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let mut run = RunDir::open(cfg, "data")?;
    let (train, heldout) = generate_sets(cfg)?;
    for (name, set) in [("train", &train), ("heldout", &heldout)] {
        let path = run.path(&format!("{name}/manifest.json"));
        fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
        let m = save_manifest(set, &path)?;
        for e in &m.pairs {
            run.files.push(run.dir.join(name).join(&e.human_file));
            run.files.push(run.dir.join(name).join(&e.robot_file));
        }
        println!("{name}: {} pairs -> {}", set.len(), path.display());
    }
    run.finish("generate", cfg)
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let train = load_train(cfg)?;
    let mut run = RunDir::open(cfg, "pretrain")?;
    let (backbone, report) = pretrain_backbone(cfg, &train)?;
    let rng = RngState::new(cfg.train.seed);
    ModelCheckpoint::for_backbone(&backbone, rng).save(&run.path("backbone.ckpt"))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l:?}\n", i + 1));
    }
    run.write("pretrain_loss.csv", csv.as_bytes())?;
    run.write_json("report.json", &report)?;
    println!(
        "pretext loss {:.4} -> {:.4} over {} epochs",
        report.initial_loss,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        report.epoch_losses.len()
    );
    run.finish("pretrain", cfg)
}

#[derive(Serialize)]
struct TrainSummary {
    method: String,
    steps: usize,
    learnable_params: usize,
    backbone_params: usize,
    learnable_ratio: f64,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
    train_accuracy: Option<f64>,
    note: &'static str,
}

const SCALE_NOTE: &str = "desk-scale run: batch size and step count are scaled down from the reference setting";

fn cmd_adapt(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let mut tc = cfg.train.clone();
    tc.method = Method::HrAlign;
    let train = load_train(cfg)?;
    let mut run = RunDir::open(cfg, "adapt")?;
    let mut trainer = match resume {
        Some(path) => HrAlignTrainer::resume(&tc, &train, &ModelCheckpoint::load(path)?)?,
        None => HrAlignTrainer::new(&tc, &train, &load_backbone(cfg)?)?,
    };
    let start = trainer.step_count();
    while trainer.step_count() < tc.steps {
        let r = trainer.step_once()?;
        if r.step % 50 == 0 || r.step + 1 == tc.steps {
            println!("step {:>4}  loss {:.4}  pos {:.3}  hard-neg {:.3}", r.step, r.loss, r.pos_sim, r.hard_neg_sim);
        }
    }
    let backbone_params = trainer.model().backbone.parameter_count();
    let outcome = trainer.finish();
    outcome.checkpoint.save(&run.path("checkpoint.ckpt"))?;
    outcome.log.write_csv(&run.path("metrics.csv"))?;
    run.write_json(
        "summary.json",
        &TrainSummary {
            method: tc.method.to_string(),
            steps: tc.steps - start,
            learnable_params: outcome.learnable,
            backbone_params,
            learnable_ratio: outcome.learnable as f64 / backbone_params as f64,
            first_loss: outcome.log.records.first().map(|r| r.loss),
            last_loss: outcome.log.records.last().map(|r| r.loss),
            train_accuracy: None,
            note: SCALE_NOTE,
        },
    )?;
    run.finish("adapt", cfg)
}

fn cmd_baseline(cfg: &RunConfig, kind: BaselineKind) -> Result<()> {
    let mut tc = cfg.train.clone();
    tc.method = match kind {
        BaselineKind::Pret => Method::PretBaseline,
        BaselineKind::Cls => Method::ClsBaseline,
    };
    let train = load_train(cfg)?;
    let backbone = load_backbone(cfg)?;
    let name = match kind {
        BaselineKind::Pret => "baseline_pret",
        BaselineKind::Cls => "baseline_cls",
    };
    let mut run = RunDir::open(cfg, name)?;
    let outcome = train_baseline(&tc, &train, &backbone)?;
    outcome.checkpoint.save(&run.path("checkpoint.ckpt"))?;
    outcome.log.write_csv(&run.path("metrics.csv"))?;
    let backbone_params = backbone.parameter_count();
    run.write_json(
        "summary.json",
        &TrainSummary {
            method: tc.method.to_string(),
            steps: tc.steps,
            learnable_params: outcome.learnable,
            backbone_params,
            learnable_ratio: outcome.learnable as f64 / backbone_params as f64,
            first_loss: outcome.log.records.first().map(|r| r.loss),
            last_loss: outcome.log.records.last().map(|r| r.loss),
            train_accuracy: outcome.train_accuracy,
            note: SCALE_NOTE,
        },
    )?;
    println!(
        "{}: {} learnable params, loss {:.4} -> {:.4}",
        tc.method,
        outcome.learnable,
        outcome.log.records.first().map_or(f64::NAN, |r| r.loss),
        outcome.log.records.last().map_or(f64::NAN, |r| r.loss)
    );
    run.finish(name, cfg)
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let train = load_train(cfg)?;
    let heldout = load_heldout(cfg)?;
    let backbone = load_backbone(cfg)?;
    let mut run = RunDir::open(cfg, "ablation")?;
    println!("{}", AblationRow::CSV_HEADER);
    let rows = run_ablation_grid(cfg, &train, &heldout, &backbone, &mut |row| println!("{}", row.csv_line()))?;
    let mut csv = String::from(AblationRow::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    run.write("table.csv", csv.as_bytes())?;
    run.write_json("table.json", &rows)?;
    run.finish("ablate", cfg)
}

fn checkpoint_or_default(cfg: &RunConfig, explicit: Option<&Path>) -> Result<ModelCheckpoint> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| adapt_checkpoint(cfg));
    need(&path, "adapt")?;
    ModelCheckpoint::load(&path)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let ckpt = checkpoint_or_default(cfg, checkpoint)?;
    let heldout = load_heldout(cfg)?;
    let mut run = RunDir::open(cfg, "eval")?;
    let report = evaluate(&ckpt.model()?, &heldout, &cfg.eval, cfg.train.seed)?;
    let text = report.to_text();
    print!("{text}");
    run.write("report.txt", text.as_bytes())?;
    run.write_json("report.json", &report)?;
    run.finish("eval", cfg)
}

fn cmd_dump(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let ckpt = checkpoint_or_default(cfg, checkpoint)?;
    let heldout = load_heldout(cfg)?;
    let model = ckpt.model()?;
    let mut run = RunDir::open(cfg, "dump")?;
    for adapted in [true, false] {
        let name = format!("embeddings_{}.csv", crate::eval::stream_tag(adapted));
        let rows = dump_embeddings(&model, &heldout, adapted, &run.path(&name))?;
        println!("{name}: {rows} rows");
    }
    run.finish("dump", cfg)
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code: 0 success, 1 usage error, 2 runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let common = match &cli.command {
        Command::Generate(c) | Command::Pretrain(c) | Command::Ablate(c) => c,
        Command::Adapt { common, .. }
        | Command::Baseline { common, .. }
        | Command::Eval { common, .. }
        | Command::Dump { common, .. } => common,
    };
    let cfg = match load_config(common) {
        Ok(c) => c,
        Err(Usage(msg)) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let result = match &cli.command {
        Command::Generate(_) => cmd_generate(&cfg),
        Command::Pretrain(_) => cmd_pretrain(&cfg),
        Command::Adapt { resume, .. } => cmd_adapt(&cfg, resume.as_deref()),
        Command::Baseline { kind, .. } => cmd_baseline(&cfg, *kind),
        Command::Ablate(_) => cmd_ablate(&cfg),
        Command::Eval { checkpoint, .. } => cmd_eval(&cfg, checkpoint.as_deref()),
        Command::Dump { checkpoint, .. } => cmd_dump(&cfg, checkpoint.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
