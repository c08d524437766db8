use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn, LevelFilter};
use serde_json::json;
use unirec::checkpoint::Checkpoint;
use unirec::config::{ConfigError, RunConfig};
use unirec::data::synthetic::generate;
use unirec::eval::{build_candidates, evaluate, format_table, OracleScorer, RandomScorer, ScorerKind};
use unirec::experiments::{
    ablate, ablation_csv, ablation_table, prepare, sweep_csv, sweep_tokens, ExperimentError, FailureClass, Grid, Prepared, Session,
    SWEEP_TOKENS,
};
use unirec::gradcheck::{op_suite, whole_model, MODEL_TOLERANCE};
use unirec::optim::AdamW;
use unirec::train::{EpochRecord, TrainLog};

const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";

#[derive(Parser)]
#[command(name = "unirec", version, about = "Multimodal item and user encoder for sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, its schema registry and feature sidecar.
    SynthData(Common),
    /// Apply the k-core filter and write the train/validation/test windows.
    Preprocess(Common),
    /// Fit the scalar encoder and pretrain the item encoder.
    Pretrain(Common),
    /// Train the user encoder and reader, starting from the pretraining checkpoint when present.
    Finetune(Common),
    /// Rank held-out items against sampled negatives and write the metrics table.
    Evaluate(Common),
    /// Run the component and fusion ablation grids over three seeds.
    Ablate(Common),
    /// Vary the item and user token counts over 1, 2, 4, 8 and 16.
    SweepTokens(Common),
    /// Compare every gradient against finite differences.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Reject malformed input records instead of skipping them.
    #[arg(long)]
    strict: bool,
    /// Evaluation worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("gradient check failed: {0}")]
    Gradients(String),
}

impl Failure {
    fn class(&self) -> FailureClass {
        match self {
            Failure::Experiment(e) => e.class(),
            Failure::Io { .. } => FailureClass::Data,
            Failure::Gradients(_) => FailureClass::Numeric,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Experiment(e.into())
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Failure::Io { path: path.into(), source })?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_config(args: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if args.strict {
        cfg.data.strict = true;
    }
    if let Some(t) = args.threads {
        cfg.eval.threads = t;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&args.out).map_err(|source| Failure::Io {
        path: args.out.clone(),
        source,
    })?;
    Ok(cfg)
}

fn log_epoch(r: &EpochRecord) {
    info!("{:?} epoch {} steps {} mean loss {:.4}", r.stage, r.epoch, r.steps, r.mean_loss);
}

fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut out = String::new();
    for s in &log.steps {
        out.push_str(&serde_json::to_string(s).expect("step records serialize"));
        out.push('\n');
    }
    write(path, out)
}

fn save(path: &Path, session: &Session, opt: &AdamW<f32>, prepared: &Prepared) -> Result<()> {
    let ck = session.checkpoint(Some(opt), &prepared.dataset.registry.hash());
    ck.save(path).map_err(ExperimentError::from)?;
    info!("wrote {} (parameters {})", path.display(), ck.parameter_hash());
    Ok(())
}

fn restore(path: &Path, cfg: &RunConfig, prepared: &Prepared) -> Result<Session> {
    let ck = Checkpoint::load(path).map_err(ExperimentError::from)?;
    Ok(Session::from_checkpoint(&ck, cfg, prepared)?)
}

fn synth_data(args: &Common) -> Result<()> {
    let cfg = load_config(args)?;
    let spec = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("synth-data needs a `data.synthetic` section".into()))?;
    let syn = generate(spec).map_err(ExperimentError::from)?;
    syn.write(&args.out).map_err(ExperimentError::from)?;
    info!("wrote {} records to {}", syn.records.len(), args.out.display());
    Ok(())
}

fn preprocess(args: &Common) -> Result<()> {
    let cfg = load_config(args)?;
    let p = prepare(&cfg)?;
    let mut lines = String::new();
    for (name, samples) in [("train", &p.split.train), ("validation", &p.split.validation), ("test", &p.split.test)] {
        for s in samples {
            let row = json!({"split": name, "user": p.dataset.users[s.user].id, "start": s.start, "target": s.target});
            lines.push_str(&row.to_string());
            lines.push('\n');
        }
    }
    write(&args.out.join("splits.jsonl"), lines)?;
    let [(u0, i0, n0), (u1, i1, n1)] = p.counts;
    let mut summary = format!("# config {}\nstage users items interactions\n", cfg.hash());
    writeln!(summary, "loaded {u0} {i0} {n0}").unwrap();
    writeln!(summary, "filtered {u1} {i1} {n1}").unwrap();
    writeln!(
        summary,
        "windows train {} validation {} test {}",
        p.split.train.len(),
        p.split.validation.len(),
        p.split.test.len()
    )
    .unwrap();
    if let Some(r) = &p.load_report {
        writeln!(summary, "skipped malformed {} dangling {} empty_items {}", r.malformed, r.dangling, r.empty_items).unwrap();
    }
    print!("{summary}");
    write(&args.out.join("preprocess.txt"), summary)
}

fn pretrain(args: &Common) -> Result<()> {
    let cfg = load_config(args)?;
    let p = prepare(&cfg)?;
    let mut session = Session::new(&cfg, &p)?;
    let mut hook = |r: &EpochRecord, _: &_, _: &_| log_epoch(r);
    let (log, opt) = session.pretrain(Some(&mut hook))?;
    write_log(&args.out.join("pretrain.log.jsonl"), &log)?;
    save(&args.out.join(PRETRAIN_CHECKPOINT), &session, &opt, &p)
}

fn finetune(args: &Common) -> Result<()> {
    let cfg = load_config(args)?;
    let p = prepare(&cfg)?;
    let start = args.out.join(PRETRAIN_CHECKPOINT);
    let mut session = if start.exists() {
        info!("starting from {}", start.display());
        restore(&start, &cfg, &p)?
    } else {
        warn!("{} not found; fine-tuning from initialization", start.display());
        Session::new(&cfg, &p)?
    };
    let mut hook = |r: &EpochRecord, _: &_, _: &_| log_epoch(r);
    let (log, opt) = session.finetune(&p, Some(&mut hook))?;
    write_log(&args.out.join("finetune.log.jsonl"), &log)?;
    save(&args.out.join(FINETUNE_CHECKPOINT), &session, &opt, &p)
}

fn run_evaluate(args: &Common) -> Result<()> {
    let cfg = load_config(args)?;
    let p = prepare(&cfg)?;
    let cands = build_candidates(&p.dataset, &p.split.test, &cfg.eval).map_err(ExperimentError::from)?;
    let (model, random) = match cfg.eval.scorer {
        ScorerKind::Model => {
            let path = [FINETUNE_CHECKPOINT, PRETRAIN_CHECKPOINT]
                .iter()
                .map(|f| args.out.join(f))
                .find(|p| p.exists())
                .unwrap_or_else(|| args.out.join(FINETUNE_CHECKPOINT));
            info!("scoring with {}", path.display());
            restore(&path, &cfg, &p)?.evaluate(&cands)?
        }
        ScorerKind::Oracle => {
            let oracle = evaluate(&cands, &OracleScorer::for_candidates(&cands), &cfg.eval).map_err(ExperimentError::from)?;
            let random = evaluate(&cands, &RandomScorer { seed: cfg.eval.seed }, &cfg.eval).map_err(ExperimentError::from)?;
            (oracle, random)
        }
        ScorerKind::Random => {
            let random = evaluate(&cands, &RandomScorer { seed: cfg.eval.seed }, &cfg.eval).map_err(ExperimentError::from)?;
            (random.clone(), random)
        }
    };
    let name = unirec::model::snake(&cfg.eval.scorer);
    let table = format_table(&cfg.hash(), &[(name, &model), ("random".into(), &random)]);
    print!("{table}");
    write(&args.out.join("metrics.txt"), table)
}

fn run_ablate(args: &Common) -> Result<()> {
    let cfg = load_config(args)?;
    let seeds = [cfg.seed, cfg.seed + 1, cfg.seed + 2];
    let rows = ablate(&cfg, &[Grid::Components, Grid::Fusion], &seeds, |r| {
        info!("{} {} seed {}: MRR {:.4} Hit@10 {:.4}", unirec::model::snake(&r.grid), r.variant, r.seed, r.model.mrr, r.model.hit10)
    })?;
    write(&args.out.join("ablation.csv"), ablation_csv(&rows))?;
    let table = format!("# config {}\n{}", cfg.hash(), ablation_table(&rows));
    print!("{table}");
    write(&args.out.join("ablation.txt"), table)
}

fn run_sweep(args: &Common) -> Result<()> {
    let cfg = load_config(args)?;
    let rows = sweep_tokens(&cfg, &SWEEP_TOKENS, |r| {
        info!("{} tokens {}: MRR {:.4} Hit@10 {:.4}", unirec::model::snake(&r.level), r.k, r.model.mrr, r.model.hit10)
    })?;
    let csv = sweep_csv(&rows);
    print!("{csv}");
    write(&args.out.join("sweep_tokens.csv"), csv)
}

fn run_gradcheck(args: &Common) -> Result<()> {
    let cfg = load_config(args)?;
    let ops = op_suite(cfg.seed).map_err(|e| Failure::Gradients(e.to_string()))?;
    let model = whole_model(cfg.seed)?;
    let mut report = format!("# config {}\ncheck max_relative_error tolerance result\n", cfg.hash());
    let mut failed = Vec::new();
    for c in &ops {
        let ok = c.passes();
        writeln!(report, "{} {:.3e} {:.0e} {}", c.op, c.report.max_relative_error, c.tolerance(), if ok { "pass" } else { "FAIL" }).unwrap();
        if !ok {
            failed.push(c.op.to_string());
        }
    }
    let ok = model.passes(MODEL_TOLERANCE);
    writeln!(
        report,
        "whole_model {:.3e} {MODEL_TOLERANCE:.0e} {} ({} entries)",
        model.max_relative_error,
        if ok { "pass" } else { "FAIL" },
        model.checked
    )
    .unwrap();
    if !ok {
        failed.push("whole_model".into());
    }
    print!("{report}");
    write(&args.out.join("gradcheck.txt"), report)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gradients(failed.join(", ")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(FailureClass::Config as u8) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new().filter_level(LevelFilter::Info).format_timestamp(None).init();
    let result = match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Ablate(a) => run_ablate(a),
        Command::SweepTokens(a) => run_sweep(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class() as u8)
        }
    }
}
