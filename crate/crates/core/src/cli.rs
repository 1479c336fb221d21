//! The `guie` executable: ingest, split, synth, train, embed, eval,
//! tta-plan.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training
//! divergence. Diagnostics go to standard error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::features::{
    gen_synthetic, make_splits, parse_manifest, read_feature_file, write_feature_file,
    FeatureRecord, FeatureStore, Manifest, SplitSpec, Splits,
};
use crate::head::ArcFaceConfig;
use crate::optim::{AdamWConfig, SamConfig, ScheduleSpec};
use crate::preprocess::{tta_variants, TtaPolicy};
use crate::retrieval::{index_from_store, leave_one_out_map};
use crate::train::{
    embed_store, fit, read_checkpoint, write_checkpoint, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "guie",
    about = "Train and evaluate a compact embedding head over precomputed features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Join a manifest with precomputed feature files into one store.
    Ingest(IngestArgs),
    /// Build class-disjoint train/val/zero-shot splits from a manifest.
    Split(SplitArgs),
    /// Generate a synthetic feature store + manifest.
    Synth(SynthArgs),
    /// Train the projection head with checkpoint selection by zero-shot mAP@5.
    Train(TrainArgs),
    /// Embed every record of a store through a checkpoint.
    Embed(EmbedArgs),
    /// Leave-one-out retrieval evaluation of an embedding file.
    Eval(EvalArgs),
    /// Emit deterministic preprocessing/TTA plans for a manifest.
    TtaPlan(TtaPlanArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// JSONL manifest selecting and annotating the records.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of .gfeat feature files.
    #[arg(long)]
    features: PathBuf,
    /// Output feature store.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Number of whole classes held out as the zero-shot test set.
    #[arg(long)]
    zeroshot_classes: usize,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes <prefix>.train.jsonl, <prefix>.val.jsonl, <prefix>.test.jsonl.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output feature store; the manifest lands next to it.
    #[arg(long)]
    out: PathBuf,
    /// Manifest path (default: <out>.manifest.jsonl).
    #[arg(long)]
    manifest_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    store: PathBuf,
    /// Split prefix as written by `split`.
    #[arg(long)]
    splits: PathBuf,
    #[arg(long, default_value_t = 64)]
    dim_out: usize,
    #[arg(long, default_value_t = 30.0)]
    scale: f64,
    #[arg(long, default_value_t = 0.5)]
    margin: f64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: u32,
    #[arg(long, default_value_t = 1e-2)]
    lr_max: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_min: f64,
    #[arg(long, default_value_t = 3)]
    warmup_epochs: u32,
    #[arg(long, default_value_t = 0.1)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps_opt: f64,
    #[arg(long, default_value_t = 0.1)]
    bn_momentum: f64,
    #[arg(long, default_value_t = 1e-5)]
    bn_epsilon: f64,
    #[arg(long, default_value_t = 10)]
    eval_every: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Write the CSV progress log here instead of stdout.
    #[arg(long)]
    log_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args, Debug)]
struct TtaPlanArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    keep_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    square_tolerance: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` and runs the selected subcommand, returning the process
/// exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders --help/--version as "errors" with success status
            if e.use_stderr() {
                eprint!("{e}");
                return 1;
            }
            print!("{e}");
            return 0;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Lib(Error::Divergence { batch })) => {
            eprintln!("error: training diverged at batch {batch}");
            3
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

fn read_manifest_file(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Format(format!("cannot read manifest {}: {e}", path.display()))
    })?;
    parse_manifest(&bytes)
}

fn read_store_file(path: &Path) -> Result<FeatureStore> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read store {}: {e}", path.display())))?;
    read_feature_file(&bytes)
}

fn run(command: Command) -> std::result::Result<(), CliError> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Eval(a) => eval(a),
        Command::TtaPlan(a) => tta_plan(a),
    }
}

fn ingest(a: IngestArgs) -> std::result::Result<(), CliError> {
    let manifest = read_manifest_file(&a.manifest)?;
    let mut by_id: std::collections::HashMap<String, (u32, Vec<f32>)> =
        std::collections::HashMap::new();
    let mut dim: Option<u32> = None;
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.features)
        .map_err(|e| {
            Error::Format(format!("cannot read features dir {}: {e}", a.features.display()))
        })?
        .filter_map(|entry| entry.ok().map(|d| d.path()))
        .filter(|p| p.extension().map(|x| x == "gfeat").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!(
            "no .gfeat files in {}",
            a.features.display()
        ))
        .into());
    }
    for path in &paths {
        let store = read_store_file(path)?;
        match dim {
            None => dim = Some(store.dimension),
            Some(d) if d != store.dimension => {
                return Err(Error::Format(format!(
                    "feature file {} has dimension {} but earlier files had {d}",
                    path.display(),
                    store.dimension
                ))
                .into());
            }
            _ => {}
        }
        for r in store.records {
            if by_id.insert(r.image_id.clone(), (r.class_id, r.feature)).is_some() {
                return Err(Error::DuplicateId(r.image_id).into());
            }
        }
    }
    let dim = dim.expect("at least one file");
    // manifest order and manifest metadata win; the feature vector comes
    // from the store
    let mut records = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let (_, feature) = by_id.remove(&e.image_id).ok_or_else(|| {
            Error::Domain(format!(
                "manifest entry {:?} has no precomputed feature",
                e.image_id
            ))
        })?;
        records.push(FeatureRecord {
            image_id: e.image_id.clone(),
            class_id: e.class_id,
            width: e.width,
            height: e.height,
            category: e.category_or_unknown(),
            feature,
        });
    }
    let store = FeatureStore::new(dim, records)?;
    fs::write(&a.out, write_feature_file(&store))?;
    eprintln!("wrote {} records (dim {dim}) to {}", store.records.len(), a.out.display());
    Ok(())
}

fn split_paths(prefix: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let base = prefix.to_string_lossy();
    (
        PathBuf::from(format!("{base}.train.jsonl")),
        PathBuf::from(format!("{base}.val.jsonl")),
        PathBuf::from(format!("{base}.test.jsonl")),
    )
}

fn split(a: SplitArgs) -> std::result::Result<(), CliError> {
    let manifest = read_manifest_file(&a.manifest)?;
    let splits = make_splits(
        &manifest,
        &SplitSpec {
            train_fraction: a.train_frac,
            zeroshot_class_count: a.zeroshot_classes,
            seed: a.seed,
        },
    )?;
    let (train_p, val_p, test_p) = split_paths(&a.out_prefix);
    fs::write(&train_p, splits.train.to_jsonl())?;
    fs::write(&val_p, splits.val.to_jsonl())?;
    fs::write(&test_p, splits.zeroshot_test.to_jsonl())?;
    eprintln!(
        "split: {} train / {} val / {} zero-shot test",
        splits.train.len(),
        splits.val.len(),
        splits.zeroshot_test.len()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> std::result::Result<(), CliError> {
    if a.classes == 0 || a.per_class == 0 || a.dim == 0 {
        return Err(CliError::Usage("--classes, --per-class, --dim must be >= 1".into()));
    }
    if a.separation < 0.0 {
        return Err(CliError::Usage("--separation must be nonnegative".into()));
    }
    let (store, manifest) = gen_synthetic(a.classes, a.per_class, a.dim, a.separation, a.seed);
    let manifest_path = a
        .manifest_out
        .unwrap_or_else(|| PathBuf::from(format!("{}.manifest.jsonl", a.out.to_string_lossy())));
    fs::write(&a.out, write_feature_file(&store))?;
    fs::write(&manifest_path, manifest.to_jsonl())?;
    eprintln!(
        "synth: {} records to {}, manifest to {}",
        store.records.len(),
        a.out.display(),
        manifest_path.display()
    );
    Ok(())
}

fn load_splits(prefix: &Path) -> Result<Splits> {
    let (train_p, val_p, test_p) = split_paths(prefix);
    Ok(Splits {
        train: read_manifest_file(&train_p)?,
        val: read_manifest_file(&val_p)?,
        zeroshot_test: read_manifest_file(&test_p)?,
    })
}

fn train(a: TrainArgs) -> std::result::Result<(), CliError> {
    if a.epochs == 0 {
        return Err(CliError::Usage("--epochs must be >= 1 (nothing to train)".into()));
    }
    if a.batch < 2 {
        return Err(CliError::Usage("--batch must be >= 2".into()));
    }
    let store = read_store_file(&a.store)?;
    let splits = load_splits(&a.splits)?;
    let config = TrainConfig {
        batch_size: a.batch,
        total_epochs: a.epochs,
        seed: a.seed,
        eval_every: a.eval_every,
        dim_out: a.dim_out,
        schedule: ScheduleSpec {
            lr_max: a.lr_max,
            lr_min: a.lr_min,
            warmup_epochs: a.warmup_epochs,
            total_epochs: a.epochs,
        },
        arcface: ArcFaceConfig { scale: a.scale, margin: a.margin },
        sam: SamConfig { rho: a.rho, ..SamConfig::default() },
        adamw: AdamWConfig {
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.eps_opt,
            weight_decay: a.weight_decay,
        },
        bn_momentum: a.bn_momentum,
        bn_epsilon: a.bn_epsilon,
    };
    let best = match &a.log_file {
        Some(path) => {
            let mut file = fs::File::create(path)?;
            fit(&store, &splits, &config, &mut file)?
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            let best = fit(&store, &splits, &config, &mut lock)?;
            lock.flush()?;
            best
        }
    };
    fs::write(&a.out, write_checkpoint(&best))?;
    println!("best,{},{:.6}", best.epoch, best.zeroshot_map5);
    Ok(())
}

fn embed(a: EmbedArgs) -> std::result::Result<(), CliError> {
    let bytes = fs::read(&a.checkpoint).map_err(|e| {
        Error::Format(format!("cannot read checkpoint {}: {e}", a.checkpoint.display()))
    })?;
    let ckpt = read_checkpoint(&bytes)?;
    let store = read_store_file(&a.store)?;
    let embedded = embed_store(&ckpt, &store)?;
    fs::write(&a.out, write_feature_file(&embedded))?;
    eprintln!(
        "embedded {} records (dim {}) to {}",
        embedded.records.len(),
        embedded.dimension,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> std::result::Result<(), CliError> {
    if a.k == 0 {
        return Err(CliError::Usage("--k must be >= 1".into()));
    }
    let store = read_store_file(&a.embeddings)?;
    let index = index_from_store(&store)?;
    let map = leave_one_out_map(&index, a.k)?;
    println!("map@{},{:.6}", a.k, map);
    Ok(())
}

fn tta_plan(a: TtaPlanArgs) -> std::result::Result<(), CliError> {
    if !(a.keep_fraction > 0.0 && a.keep_fraction <= 1.0) {
        return Err(CliError::Usage("--keep-fraction must be in (0, 1]".into()));
    }
    let manifest = read_manifest_file(&a.manifest)?;
    let policy = TtaPolicy {
        keep_fraction: a.keep_fraction,
        square_tolerance: a.square_tolerance,
    };
    let mut out = String::new();
    let mut n_plans = 0usize;
    for e in &manifest.entries {
        let plans = tta_variants(
            Some(&e.image_id),
            e.width as u32,
            e.height as u32,
            e.category_or_unknown(),
            &policy,
        )?;
        for p in &plans {
            out.push_str(&serde_json::to_string(p).expect("plan serializes"));
            out.push('\n');
            n_plans += 1;
        }
    }
    fs::write(&a.out, out)?;
    eprintln!(
        "wrote {n_plans} plans for {} images to {}",
        manifest.len(),
        a.out.display()
    );
    Ok(())
}
