//! `posenc`: data generation, training, evaluation, ablation and gradient
//! checks for the pose encoding network.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use posenc::ablation::run_ablation;
use posenc::checkpoint::{encode_checkpoint, Checkpoint};
use posenc::config::KvMap;
use posenc::data::{
    generate_synthetic, load_dataset_dir, save_feature_file, save_skeleton_file, Dataset, SyntheticSpec, FEATURE_EXT,
    MANIFEST_FILE, SKELETON_EXT,
};
use posenc::model::{AblationConfig, Branch, Model, ModelDims};
use posenc::params::ParamStore;
use posenc::training::{check_dataset, evaluate, train, TrainConfig};
use posenc::verify::{run_gradcheck, Scope, GRADCHECK_TOLERANCE};

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(io::stdout().lock(), $($arg)*)?
    };
}

#[derive(Parser)]
#[command(name = "posenc", version, about = "Attention-driven body pose encoding for activity recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset (SKL1 + FTR1 files and a manifest).
    GenData {
        /// key=value file with generator settings; defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed of the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one variant; writes `<out>` (last epoch), `<out>.best` and `<out>.log`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// baseline | seu | seu+teu | full
        #[arg(long, default_value = "full")]
        variant: String,
        /// pose | rgb | both
        #[arg(long, default_value = "pose")]
        branch: Branch,
        /// key=value file with training and model settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, loss and confusion matrix of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which part of the training split to score.
        #[arg(long, value_enum, default_value_t = EvalSplit::All)]
        split: EvalSplit,
    },
    /// Train all four variants under one seed and print a markdown table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "pose")]
        branch: Branch,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks; fails if any component reaches 1e-4.
    Gradcheck {
        /// op | module | model
        #[arg(long, default_value = "model")]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a checkpoint manifest and parameter counts, or those of a
    /// freshly built variant when no checkpoint is given.
    Inspect {
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "full", conflicts_with = "checkpoint")]
        variant: String,
        #[arg(long, default_value = "pose", conflicts_with = "checkpoint")]
        branch: Branch,
        #[arg(long, conflicts_with = "checkpoint")]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    All,
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, out, seed } => gen_data(spec.as_deref(), &out, seed),
        Command::Train {
            data,
            variant,
            branch,
            config,
            out,
        } => train_cmd(&data, &variant, branch, config.as_deref(), &out),
        Command::Eval { data, checkpoint, split } => eval_cmd(&data, &checkpoint, split),
        Command::Ablate {
            data,
            branch,
            config,
            out,
        } => ablate_cmd(&data, branch, config.as_deref(), out.as_deref()),
        Command::Gradcheck { scope, seed } => gradcheck_cmd(scope, seed),
        Command::Inspect {
            checkpoint,
            variant,
            branch,
            config,
        } => inspect_cmd(checkpoint.as_deref(), &variant, branch, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<io::Error>())
        .any(|e| e.kind() == io::ErrorKind::BrokenPipe)
}

/// Reads a config file, accepting generator, training and model keys so a
/// single file can drive every subcommand.
fn read_config(path: Option<&Path>) -> Result<KvMap> {
    let Some(path) = path else { return Ok(KvMap::new()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let kv = KvMap::parse(&text).with_context(|| format!("in {}", path.display()))?;
    if let Some(k) = kv
        .keys()
        .find(|k| !(TrainConfig::KEYS.contains(k) || SyntheticSpec::KEYS.contains(k) || ModelDims::is_key(k)))
    {
        bail!("{}: unknown key `{k}`", path.display());
    }
    Ok(kv)
}

/// Training settings start from the per-branch defaults; model dimensions
/// from the defaults with the class count taken from the data unless set.
fn resolve(kv: &KvMap, branch: Branch) -> Result<(TrainConfig, ModelDims)> {
    let mut cfg = TrainConfig::for_branch(branch);
    cfg.read_kv(kv)?;
    cfg.validate()?;
    let mut dims = ModelDims::default();
    dims.read_kv(kv)?;
    Ok((cfg, dims))
}

fn load_data(dir: &Path, branch: Branch, dims: &mut ModelDims, kv: &KvMap) -> Result<Dataset> {
    let data = load_dataset_dir(dir, branch, dims.frames).with_context(|| format!("loading {}", dir.display()))?;
    if kv.get("num_classes").is_none() {
        dims.num_classes = data.num_classes;
    }
    dims.validate()?;
    check_dataset(dims, &data).context("dataset does not fit the model dimensions")?;
    Ok(data)
}

fn gen_data(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let kv = read_config(spec_path)?;
    let mut spec = SyntheticSpec::default();
    spec.read_kv(&kv)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let samples = generate_synthetic(&spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut counts = vec![0usize; spec.num_classes];
    for (i, s) in samples.iter().enumerate() {
        save_skeleton_file(out.join(format!("s{i:04}.{SKELETON_EXT}")), &s.skeleton)?;
        save_feature_file(out.join(format!("s{i:04}.{FEATURE_EXT}")), &s.features)?;
        counts[s.label()] += 1;
    }
    let mut manifest = KvMap::new();
    manifest.set("num_classes", spec.num_classes);
    manifest.set("samples", samples.len());
    for (c, n) in counts.iter().enumerate() {
        manifest.set(&format!("class.{c}"), n);
    }
    let mut spec_kv = KvMap::new();
    spec.write_kv(&mut spec_kv);
    for (k, v) in spec_kv.iter() {
        manifest.set(&format!("spec.{k}"), v);
    }
    fs::write(out.join(MANIFEST_FILE), manifest.to_text())?;
    out!("wrote {} samples in {} classes to {}", samples.len(), spec.num_classes, out.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes the checkpoint and reads it back to confirm the round trip.
fn write_checkpoint(model: &Model, extra: &KvMap, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model, extra)).with_context(|| format!("writing {}", path.display()))?;
    let back = Checkpoint::read(path)?.into_model()?;
    if back != *model {
        bail!("checkpoint {} does not read back identically", path.display());
    }
    Ok(())
}

fn train_cmd(data_dir: &Path, variant: &str, branch: Branch, config: Option<&Path>, out: &Path) -> Result<()> {
    let kv = read_config(config)?;
    let (cfg, mut dims) = resolve(&kv, branch)?;
    let ablation = AblationConfig::variant(variant, branch)?;
    let data = load_data(data_dir, branch, &mut dims, &kv)?;
    let (train_set, test_set) = if cfg.holdout > 0.0 {
        data.split(cfg.holdout, cfg.seed)?
    } else {
        (data, Dataset::default())
    };
    let model = Model::build(ablation, dims, cfg.seed)?;

    let log_path = with_suffix(out, ".log");
    let mut log = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut stdout = io::stdout().lock();
    let mut emit = |line: &str| -> io::Result<()> {
        writeln!(stdout, "{line}")?;
        writeln!(log, "{line}")?;
        log.flush()
    };
    emit(&format!(
        "variant={variant} branch={branch} parameters={} train={} test={} optimizer={} lr={}",
        model.parameter_count(),
        train_set.len(),
        test_set.len(),
        cfg.optimizer,
        cfg.lr
    ))?;
    let start = Instant::now();
    let mut io_err = None;
    let outcome = train(model, &train_set, Some(&test_set), &cfg, |r| {
        if let Err(e) = emit(&r.to_string()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing the training log");
    }

    let mut extra = KvMap::new();
    cfg.write_kv(&mut extra);
    extra.set("variant", variant);
    extra.set("best_epoch", outcome.best_epoch);
    write_checkpoint(&outcome.last, &extra, out)?;
    write_checkpoint(&outcome.best, &extra, &with_suffix(out, ".best"))?;
    let summary = match outcome.final_test_accuracy() {
        Some(acc) => format!("final_test_accuracy={acc:.2} best_epoch={}", outcome.best_epoch),
        None => "no held-out split".to_string(),
    };
    emit(&format!("{summary} seconds={:.1}", start.elapsed().as_secs_f64()))?;
    Ok(())
}

fn eval_cmd(data_dir: &Path, checkpoint: &Path, split: EvalSplit) -> Result<()> {
    let ckpt = Checkpoint::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let mut cfg = TrainConfig::default();
    cfg.read_kv(&ckpt.extra())?;
    let model = ckpt.into_model()?;
    let data = load_dataset_dir(data_dir, model.ablation.branch, model.dims.frames)
        .with_context(|| format!("loading {}", data_dir.display()))?;
    check_dataset(&model.dims, &data).context("dataset does not fit the checkpoint")?;
    let data = match split {
        EvalSplit::All => data,
        EvalSplit::Train => data.split(cfg.holdout, cfg.seed)?.0,
        EvalSplit::Test => data.split(cfg.holdout, cfg.seed)?.1,
    };
    let ev = evaluate(&model, &data)?;
    out!("examples={} accuracy={:.2} loss={:.6}", ev.total(), ev.accuracy, ev.loss);
    out!("confusion (rows: true class, columns: predicted)");
    for (c, row) in ev.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
        out!("{c}: {}", cells.join(" "));
    }
    Ok(())
}

fn ablate_cmd(data_dir: &Path, branch: Branch, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let kv = read_config(config)?;
    let (cfg, mut dims) = resolve(&kv, branch)?;
    let data = load_data(data_dir, branch, &mut dims, &kv)?;
    let report = run_ablation(&data, branch, &dims, &cfg, |variant, r| eprintln!("{variant} {r}"))?;
    let table = report.to_markdown();
    write!(io::stdout().lock(), "{table}")?;
    if let Some(out) = out {
        fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn gradcheck_cmd(scope: Scope, seed: u64) -> Result<()> {
    let start = Instant::now();
    let report = run_gradcheck(scope, seed)?;
    for c in &report {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        out!("{} max_rel_error={:.3e} {verdict}", c.component, c.max_rel_error);
    }
    out!(
        "scope={scope} components={} seconds={:.1}",
        report.len(),
        start.elapsed().as_secs_f64()
    );
    let failed: Vec<String> = report
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} ({:.3e})", c.component, c.max_rel_error))
        .collect();
    if !failed.is_empty() {
        bail!("relative error at or above {GRADCHECK_TOLERANCE:e}: {}", failed.join(", "));
    }
    Ok(())
}

fn print_params(params: &ParamStore) -> io::Result<()> {
    out!("parameters={}", params.count());
    for (group, n) in params.group_counts(3) {
        out!("group {group}={n}");
    }
    for (name, t) in params.iter() {
        out!("tensor {name} {:?} {}", t.shape(), t.len());
    }
    Ok(())
}

fn inspect_cmd(checkpoint: Option<&Path>, variant: &str, branch: Branch, config: Option<&Path>) -> Result<()> {
    if let Some(path) = checkpoint {
        let ckpt = Checkpoint::read(path).with_context(|| format!("reading {}", path.display()))?;
        write!(io::stdout().lock(), "{}", ckpt.manifest.to_text())?;
        print_params(&ckpt.params)?;
        return Ok(());
    }
    let kv = read_config(config)?;
    let (cfg, dims) = resolve(&kv, branch)?;
    let model = Model::build(AblationConfig::variant(variant, branch)?, dims, cfg.seed)?;
    write!(io::stdout().lock(), "{}", model.manifest().to_text())?;
    print_params(&model.params)?;
    Ok(())
}
