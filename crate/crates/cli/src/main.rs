use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cerp_core::checkpoint::Checkpoint;
use cerp_core::codebook::ThresholdScheme;
use cerp_core::config::ExperimentConfig;
use cerp_core::data::{load_interactions, read_split, split, split_fingerprint, write_split, InteractionDataset, Partition, ID_MAP_FILE};
use cerp_core::eval::{evaluate, ModelSnapshot};
use cerp_core::export::{self, LoadedModel};
use cerp_core::manifest::{self, ExperimentManifest, FinalMetrics, Metrics, PhaseTime};
use cerp_core::synthetic::{self, SyntheticConfig};
use cerp_core::train::{self, Mode, RetrainMode, TrainConfig};

#[derive(Parser)]
#[command(name = "cerp", version, about = "Sparse compositional embeddings for recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split an interaction log into train/validation/test files.
    Prepare(PrepareArgs),
    /// Train a model on a prepared split and export it.
    Train(TrainArgs),
    /// Evaluate an exported run or a checkpoint on a prepared split.
    Eval(EvalArgs),
    /// Print sparsity and embedding statistics of a run or checkpoint.
    Stats(StatsArgs),
    /// Write a clustered synthetic interaction log.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Interaction file, one `user item` pair per line.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cerp,
    Ud,
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrainArg {
    Continue,
    Rewind,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prepared split directory (overrides `data.split_dir`).
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Target pruned fraction.
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long)]
    bucket_size: Option<usize>,
    #[arg(long)]
    no_gamma_decay: bool,
    #[arg(long)]
    no_regularizer: bool,
    /// all-ones, uniform, normal, long-tail or xavier-uniform.
    #[arg(long)]
    threshold_init: Option<String>,
    #[arg(long, value_enum)]
    retrain_mode: Option<RetrainArg>,
    #[arg(long)]
    topn: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Validation,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding `manifest.json`, or a checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Prepared split; defaults to the one recorded in the manifest.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    topn: usize,
    #[arg(long, value_enum, default_value_t = PartitionArg::Validation)]
    partition: PartitionArg,
    /// Also write the metrics JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 943)]
    users: usize,
    #[arg(long, default_value_t = 1682)]
    items: usize,
    #[arg(long, default_value_t = 100_000)]
    interactions: usize,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Stats(a) => stats_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let log = load_interactions(&a.data)?;
    let dataset = split(&log, a.seed, a.train_fraction, a.validation_fraction)?;
    let manifest = write_split(&a.out, &log, &dataset, a.seed, a.train_fraction, a.validation_fraction)?;
    println!(
        "{} users, {} items: {} train / {} validation / {} test -> {}",
        manifest.num_users,
        manifest.num_items,
        manifest.train,
        manifest.validation,
        manifest.test,
        a.out.display()
    );
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let mut cfg = SyntheticConfig::new(a.users, a.items, a.interactions);
    cfg.clusters = a.clusters;
    let log = synthetic::generate(&cfg, a.seed)?;
    fs::write(&a.out, synthetic::to_text(&log)).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} interactions -> {}", log.pairs.len(), a.out.display());
    Ok(())
}

fn apply_overrides(cfg: &mut ExperimentConfig, a: &TrainArgs) -> Result<()> {
    if let Some(s) = &a.split {
        cfg.data.split_dir = Some(s.clone());
    }
    if let Some(o) = &a.out {
        cfg.run.out = Some(o.clone());
    }
    if let Some(s) = a.seed {
        cfg.run.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.run.mode = match m {
            ModeArg::Cerp => Mode::Cerp,
            ModeArg::Ud => Mode::Ud,
        };
    }
    if let Some(s) = a.sparsity {
        cfg.prune.target_sparsity = s;
    }
    if let Some(g) = a.gamma0 {
        cfg.prune.gamma0 = g;
    }
    if let Some(b) = a.bucket_size {
        cfg.model.bucket_size = Some(b);
    }
    if a.no_gamma_decay {
        cfg.prune.gamma_decay = false;
    }
    if a.no_regularizer {
        cfg.prune.regularizer = false;
    }
    if let Some(t) = &a.threshold_init {
        cfg.model.threshold_init = t.parse::<ThresholdScheme>()?;
    }
    if let Some(r) = a.retrain_mode {
        cfg.retrain.mode = match r {
            RetrainArg::Continue => RetrainMode::Continue,
            RetrainArg::Rewind => RetrainMode::Rewind,
        };
    }
    if let Some(n) = a.topn {
        cfg.run.topn = n;
    }
    Ok(())
}

fn metrics(snapshot: &ModelSnapshot, dataset: &InteractionDataset, part: Partition, topn: usize) -> Result<Option<Metrics>> {
    if dataset.pairs(part).is_empty() {
        return Ok(None);
    }
    let r = evaluate(snapshot, dataset, part, topn)?;
    Ok(Some(Metrics {
        topn,
        ndcg: r.ndcg,
        recall: r.recall,
        users: r.users.len(),
    }))
}

struct Timer(Vec<PhaseTime>);

impl Timer {
    fn run<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let started = manifest::unix_ms();
        let out = f();
        self.0.push(PhaseTime {
            phase: phase.into(),
            started_unix_ms: started,
            finished_unix_ms: manifest::unix_ms(),
        });
        out
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    apply_overrides(&mut cfg, &a)?;
    // schema and value checks happen before the split is read
    cfg.train_config(None)?;
    let split_dir = cfg.data.split_dir.clone().context("no split directory: pass --split or set data.split_dir")?;
    let out = cfg.run.out.clone().context("no output directory: pass --out or set run.out")?;
    let (split_manifest, dataset) = read_split(&split_dir)?;
    let tc: TrainConfig = cfg.train_config(Some(dataset.num_entities()))?;

    let ckpt_dir = out.join("checkpoints");
    let export_dir = out.join("export");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;

    let mut timer = Timer(Vec::new());
    let (report, files, snapshot, final_stats, hash_spec, trained_dim) = match tc.mode {
        Mode::Cerp => {
            let prune = timer.run("prune", || train::prune_phase(&dataset, &tc))?;
            export::prune_checkpoint(&prune.model, &prune.adam, prune.report.rows.len()).save(&ckpt_dir.join("prune.ckpt"))?;
            let (mp, mq) = prune.model.pruned().masks();
            let retrain = timer.run("retrain", || train::retrain_phase(&prune.model, (&mp, &mq), &dataset, &tc))?;
            export::retrain_checkpoint(&retrain).save(&ckpt_dir.join("retrain.ckpt"))?;
            let files = export::export_codebooks(&export_dir, &retrain.deployable)?;
            let mut report = prune.report.clone();
            report.extend(&retrain.report);
            report.pruned_fraction = retrain.report.pruned_fraction;
            let snapshot = retrain.deployable.snapshot()?;
            let stats = (retrain.deployable.sparsity(), Some(retrain.deployable.embedding_stats()));
            (report, files, snapshot, stats, Some(prune.model.spec), tc.dim)
        }
        Mode::Ud => {
            let ud = timer.run("ud", || train::run_ud_baseline(&dataset, &tc))?;
            export::ud_checkpoint(&ud, tc.dim).save(&ckpt_dir.join("ud.ckpt"))?;
            let files = export::export_table(&export_dir, &ud.deployable)?;
            let snapshot = ud.deployable.snapshot()?;
            let kept = cerp_core::codebook::sparsity_from_nnz(ud.deployable.table.count_nonzero(), dataset.num_entities(), tc.dim);
            (ud.report.clone(), files, snapshot, (kept, None), None, ud.dim)
        }
    };
    fs::write(out.join("log.csv"), report.to_csv())?;
    let id_map = split_dir.join(ID_MAP_FILE);
    if id_map.exists() {
        fs::copy(&id_map, export_dir.join(ID_MAP_FILE)).with_context(|| format!("copying {}", id_map.display()))?;
    }

    let (sparsity, emb) = final_stats;
    let final_metrics = FinalMetrics {
        validation: metrics(&snapshot, &dataset, Partition::Validation, tc.topn)?,
        test: metrics(&snapshot, &dataset, Partition::Test, tc.topn)?,
        kept_ratio: sparsity.kept_ratio,
        pruned_fraction: sparsity.pruned_fraction,
        avg_dim: emb.map_or(trained_dim as f64, |e| e.avg_dim),
        overlap_rate: emb.map_or(0.0, |e| e.overlap_rate),
    };
    let relocate = |f: cerp_core::manifest::ExportFiles| match f {
        cerp_core::manifest::ExportFiles::Codebooks { p, q, scorer } => cerp_core::manifest::ExportFiles::Codebooks {
            p: format!("export/{p}"),
            q: format!("export/{q}"),
            scorer: format!("export/{scorer}"),
        },
        cerp_core::manifest::ExportFiles::Table { table, scorer } => cerp_core::manifest::ExportFiles::Table {
            table: format!("export/{table}"),
            scorer: format!("export/{scorer}"),
        },
    };
    let run_manifest = ExperimentManifest {
        manifest_version: manifest::MANIFEST_VERSION,
        artifact_version: manifest::ARTIFACT_VERSION.into(),
        config: tc.clone(),
        dataset: manifest::DatasetFingerprint {
            source: split_manifest.source.clone(),
            source_sha256: split_manifest.source_sha256.clone(),
            split_dir: split_dir.display().to_string(),
            split_sha256: split_fingerprint(&split_dir)?,
            split_seed: split_manifest.seed,
        },
        num_users: dataset.num_users,
        num_items: dataset.num_items,
        hash_spec,
        trained_dim,
        regularizer_disabled: tc.mode == Mode::Cerp && tc.loss.gamma0 == 0.0,
        stalled: report.stalled,
        timestamps: timer.0,
        metrics: final_metrics.clone(),
        export: Some(relocate(files)),
    };
    run_manifest.save(&out)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&final_metrics)? + "\n")?;
    if report.stalled {
        log::warn!("pruning stalled at pruned fraction {:.4}", report.rows.iter().rev().find(|r| r.phase == train::Phase::Prune).map_or(0.0, |r| 1.0 - r.kept_ratio));
    }
    println!("{}", serde_json::to_string_pretty(&final_metrics)?);
    Ok(())
}

/// Loads a run directory (via its manifest) or a single checkpoint file.
fn load_model(path: &Path) -> Result<(LoadedModel, Option<ExperimentManifest>)> {
    if path.is_dir() {
        let m = ExperimentManifest::load(path)?;
        Ok((export::load_export(path, &m)?, Some(m)))
    } else {
        let ck = Checkpoint::load(path)?;
        Ok((export::load_checkpoint_model(&ck)?, None))
    }
}

fn structural(model: &LoadedModel) -> serde_json::Value {
    json!({
        "kept_ratio": model.sparsity.kept_ratio,
        "pruned_fraction": model.sparsity.pruned_fraction,
        "avg_dim": model.embedding.map_or(model.snapshot.users.cols() as f64, |e| e.avg_dim),
        "overlap_rate": model.embedding.map_or(0.0, |e| e.overlap_rate),
    })
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (model, manifest) = load_model(&a.model)?;
    let split_dir = match (&a.split, &manifest) {
        (Some(s), _) => s.clone(),
        (None, Some(m)) => PathBuf::from(&m.dataset.split_dir),
        (None, None) => bail!("--split is required when evaluating a checkpoint"),
    };
    let (_, dataset) = read_split(&split_dir)?;
    if model.snapshot.num_users() != dataset.num_users || model.snapshot.num_items() != dataset.num_items {
        bail!(
            "model covers {} users / {} items but the split has {} / {}",
            model.snapshot.num_users(),
            model.snapshot.num_items(),
            dataset.num_users,
            dataset.num_items
        );
    }
    let part = match a.partition {
        PartitionArg::Validation => Partition::Validation,
        PartitionArg::Test => Partition::Test,
    };
    let r = evaluate(&model.snapshot, &dataset, part, a.topn)?;
    let mut report = structural(&model);
    report["partition"] = json!(part.name());
    report["topn"] = json!(a.topn);
    report["ndcg"] = json!(r.ndcg);
    report["recall"] = json!(r.recall);
    report["users"] = json!(r.users.len());
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(path) = a.report {
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn stats_cmd(a: StatsArgs) -> Result<()> {
    let (model, _) = load_model(&a.model)?;
    println!("{}", serde_json::to_string_pretty(&structural(&model))?);
    Ok(())
}
