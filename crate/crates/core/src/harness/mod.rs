//! Experiment harness: source pretraining, the variant-by-run matrix and
//! report files.
//!
//! Output directory layout:
//!
//! ```text
//! source.ckpt  source.meta  history_source.csv
//! run_<variant>_<run>.meta  history_<variant>_<run>.csv
//! scores_<variant>_<run>.csv  model_<variant>_<run>.ckpt
//! roc_<variant>.csv  results.csv  timing.csv
//! ```

mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use config::{parse_variants, DatasetSource, ExperimentConfig, PretrainConfig};

use crate::data::{split_balanced, synth_source, synth_target, Label, Manifest, RoiPatch};
use crate::error::{Error, Result};
use crate::finetune::{
    apply_policy, predict_scores, train, transfer_weights, FreezePolicy, OptimizerKind,
    TrainingProtocol,
};
use crate::metrics::{accuracy, aggregate_runs, auc, roc_csv, roc_curve, ScoredPrediction, DEFAULT_THRESHOLD};
use crate::nn::{build_mini_inception, load_checkpoint, save_checkpoint};
use crate::optim::{DepthNormalization, LayerLRSchedule};

pub const SOURCE_CHECKPOINT: &str = "source.ckpt";
const SOURCE_META: &str = "source.meta";
const EVAL_CHUNK: usize = 128;

/// Mixes a tag into a seed so that each consumer gets its own stream.
fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of every setting the source checkpoint depends on.
fn source_fingerprint(config: &ExperimentConfig) -> String {
    let text = format!(
        "{}|{}|{:?}|{:?}|{:?}|{:?}|{}",
        config.synth.patch_size,
        config.synth.source_count,
        config.synth.source,
        config.pretrain,
        model_config(config),
        config.augment,
        config.seed
    );
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// True when `out` holds a source checkpoint built from this configuration.
fn source_is_current(config: &ExperimentConfig) -> bool {
    let out = &config.out_dir;
    let Ok(meta) = fs::read_to_string(out.join(SOURCE_META)) else {
        return false;
    };
    let expected = format!("source_config = {}", source_fingerprint(config));
    out.join(SOURCE_CHECKPOINT).exists() && meta.lines().any(|l| l == expected)
}

fn schedule(config: &ExperimentConfig) -> LayerLRSchedule {
    LayerLRSchedule {
        t0: config.fted_t0,
        lambda: -config.gamma,
        depth_normalization: DepthNormalization::UnitInterval,
    }
}

fn model_config(config: &ExperimentConfig) -> crate::nn::ModelConfig {
    let mut m = config.model.clone();
    m.input_size = config.synth.patch_size;
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub checkpoint: PathBuf,
    pub sha256: String,
    pub val_accuracy: f64,
    pub epochs_trained: usize,
    /// Set when the source model misses the accuracy floor.
    pub warning: Option<String>,
}

/// Trains the model from scratch on the synthetic source task and saves the
/// checkpoint every transfer variant starts from.
pub fn pretrain_source(config: &ExperimentConfig) -> Result<PretrainReport> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let source = synth_source(&config.synth, config.seed);
    let (train_set, val_set) = split_balanced(
        &source,
        1.0 - config.pretrain.val_fraction,
        derive_seed(config.seed, 1),
    )?;
    let model = build_mini_inception(&model_config(config), derive_seed(config.seed, 2))?;
    let plan = apply_policy(&model, FreezePolicy::RI, config.pretrain.lr, &schedule(config))?;
    let protocol = TrainingProtocol {
        epochs: config.pretrain.epochs,
        batch_size: config.pretrain.batch_size,
        optimizer: OptimizerKind::Adam,
        patience: config.patience,
        plateau_patience: config.plateau_patience,
        plateau_divisor: config.plateau_divisor,
        augment: config.augment,
    };
    let outcome = train(model, &plan, &train_set, &val_set, &protocol, derive_seed(config.seed, 3))?;
    let preds = predict_scores(&outcome.model, &val_set, EVAL_CHUNK)?;
    let val_accuracy = accuracy(&preds, DEFAULT_THRESHOLD)?;
    let checkpoint = out.join(SOURCE_CHECKPOINT);
    save_checkpoint(&outcome.model, &checkpoint)?;
    write(&out.join("history_source.csv"), outcome.history.to_csv())?;
    let sha256 = sha256_file(&checkpoint)?;
    let warning = (val_accuracy < config.pretrain.accuracy_floor).then(|| {
        format!(
            "source validation accuracy {val_accuracy:.4} is below the floor {}",
            config.pretrain.accuracy_floor
        )
    });
    let mut meta = String::new();
    writeln!(meta, "checkpoint = {SOURCE_CHECKPOINT}").unwrap();
    writeln!(meta, "sha256 = {sha256}").unwrap();
    writeln!(meta, "val_accuracy = {val_accuracy}").unwrap();
    writeln!(meta, "epochs_trained = {}", outcome.history.epochs.len()).unwrap();
    writeln!(meta, "source_samples = {}", source.len()).unwrap();
    writeln!(meta, "source_config = {}", source_fingerprint(config)).unwrap();
    if let Some(w) = &warning {
        writeln!(meta, "warning = {w}").unwrap();
    }
    write(&out.join(SOURCE_META), meta)?;
    Ok(PretrainReport {
        checkpoint,
        sha256,
        val_accuracy,
        epochs_trained: outcome.history.epochs.len(),
        warning,
    })
}

/// Loads the target task named by the configuration.
pub fn load_target(config: &ExperimentConfig) -> Result<Vec<RoiPatch>> {
    match &config.dataset {
        DatasetSource::Synthetic => Ok(synth_target(&config.synth, config.seed)),
        DatasetSource::Manifest(path) => Manifest::load(path)?.build_dataset(config.synth.patch_size),
    }
}

/// One aggregated row of `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantRow {
    pub variant: FreezePolicy,
    pub runs: usize,
    pub failed: usize,
    /// Mean test accuracy in percent.
    pub mean_acc: f64,
    /// Sample standard deviation in percent; `None` for a single run.
    pub std_acc: Option<f64>,
    pub mean_auc: f64,
    pub wall_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<VariantRow>,
}

impl ResultsTable {
    pub fn row(&self, variant: FreezePolicy) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn failed_runs(&self) -> usize {
        self.rows.iter().map(|r| r.failed).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,mean_acc,std_acc,mean_auc,wall_s\n");
        for r in &self.rows {
            if r.failed > 0 {
                writeln!(s, "{},failed,failed,failed,NA", r.variant).unwrap();
                continue;
            }
            let std = r.std_acc.map_or("NA".to_string(), |v| format!("{v:.2}"));
            let wall = r.wall_s.map_or("NA".to_string(), |v| format!("{v:.1}"));
            writeln!(s, "{},{:.2},{std},{:.4},{wall}", r.variant, r.mean_acc, r.mean_auc).unwrap();
        }
        s
    }
}

impl fmt::Display for ResultsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>10}{:>9}{:>9}{:>10}", "variant", "acc(%)", "std(%)", "AUC", "time(s)")?;
        for r in &self.rows {
            if r.failed > 0 {
                writeln!(f, "{:<8}{:>10}  ({} of {} runs failed)", r.variant.to_string(), "failed", r.failed, r.runs)?;
                continue;
            }
            let std = r.std_acc.map_or("-".to_string(), |v| format!("{v:.2}"));
            let wall = r.wall_s.map_or("-".to_string(), |v| format!("{v:.1}"));
            writeln!(
                f,
                "{:<8}{:>10.2}{:>9}{:>9.4}{:>10}",
                r.variant.to_string(),
                r.mean_acc,
                std,
                r.mean_auc,
                wall
            )?;
        }
        Ok(())
    }
}

/// What one run left on disk, as read back by [`report`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub variant: FreezePolicy,
    pub run: usize,
    pub status: RunStatus,
    pub wall_s: f64,
    pub record_timing: bool,
    /// Trainable flags per parameter, in registry order.
    pub trainable: Vec<bool>,
    /// `None` when the run never opened the source checkpoint.
    pub source_checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok {
        accuracy: f64,
        auc: f64,
        epochs_trained: usize,
    },
    Failed(String),
}

fn run_stem(variant: FreezePolicy, run: usize) -> String {
    format!("{variant}_{run}")
}

impl RunRecord {
    fn to_meta(&self) -> String {
        let mut s = String::new();
        writeln!(s, "variant = {}", self.variant).unwrap();
        writeln!(s, "run = {}", self.run).unwrap();
        match &self.status {
            RunStatus::Ok {
                accuracy,
                auc,
                epochs_trained,
            } => {
                writeln!(s, "status = ok").unwrap();
                writeln!(s, "accuracy = {accuracy}").unwrap();
                writeln!(s, "auc = {auc}").unwrap();
                writeln!(s, "epochs_trained = {epochs_trained}").unwrap();
            }
            RunStatus::Failed(msg) => {
                writeln!(s, "status = failed").unwrap();
                writeln!(s, "error = {}", msg.replace('\n', " ")).unwrap();
            }
        }
        let mask: String = self.trainable.iter().map(|&t| if t { '1' } else { '0' }).collect();
        writeln!(s, "trainable = {mask}").unwrap();
        writeln!(
            s,
            "source_checkpoint = {}",
            self.source_checkpoint.as_deref().unwrap_or("none")
        )
        .unwrap();
        writeln!(s, "wall_s = {}", self.wall_s).unwrap();
        writeln!(s, "record_timing = {}", self.record_timing).unwrap();
        s
    }

    fn from_meta(text: &str, path: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(" = ").ok_or_else(|| {
                Error::Data(format!("{}: malformed line {line:?}", path.display()))
            })?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Data(format!("{}: missing {k}", path.display())))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|e| Error::Data(format!("{}: {k}: {e}", path.display())))
        };
        let status = match get("status")? {
            "ok" => RunStatus::Ok {
                accuracy: num("accuracy")?,
                auc: num("auc")?,
                epochs_trained: num("epochs_trained")? as usize,
            },
            _ => RunStatus::Failed(get("error").unwrap_or("unknown").to_string()),
        };
        let source = get("source_checkpoint")?;
        Ok(RunRecord {
            variant: get("variant")?.parse()?,
            run: num("run")? as usize,
            status,
            wall_s: num("wall_s")?,
            record_timing: get("record_timing")? == "true",
            trainable: get("trainable")?.chars().map(|c| c == '1').collect(),
            source_checkpoint: (source != "none").then(|| source.to_string()),
        })
    }
}

fn scores_csv(preds: &[ScoredPrediction]) -> String {
    let mut s = String::from("score,label\n");
    for p in preds {
        writeln!(s, "{},{}", p.score, p.label).unwrap();
    }
    s
}

fn parse_scores(text: &str, path: &Path) -> Result<Vec<ScoredPrediction>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = |m: &str| Error::Csv {
                line: i + 2,
                message: format!("{}: {m}", path.display()),
            };
            let (score, label) = line.split_once(',').ok_or_else(|| bad("expected score,label"))?;
            let score: f64 = score.parse().map_err(|_| bad("bad score"))?;
            let label = Label::parse(label).ok_or_else(|| bad("bad label"))?;
            ScoredPrediction::new(score, label)
        })
        .collect()
}

struct RunContext<'a> {
    config: &'a ExperimentConfig,
    target: &'a [RoiPatch],
    checkpoint: PathBuf,
    checkpoint_sha: Option<String>,
}

fn execute_run(ctx: &RunContext<'_>, variant: FreezePolicy, run: usize) -> Result<RunRecord> {
    let config = ctx.config;
    let out = &config.out_dir;
    let start = Instant::now();
    let run_seed = config.seed + run as u64;
    let (train_val, test) = split_balanced(ctx.target, config.train_fraction, derive_seed(run_seed, 10))?;
    let (train_set, val_set) =
        split_balanced(&train_val, 1.0 - config.val_fraction, derive_seed(run_seed, 11))?;
    let fresh = build_mini_inception(&model_config(config), derive_seed(run_seed, 12))?;
    let (model, source_checkpoint) = if variant.uses_transfer() {
        let source = load_checkpoint(&ctx.checkpoint)?;
        let sha = ctx.checkpoint_sha.clone().unwrap_or_default();
        (
            transfer_weights(&source, &fresh)?,
            Some(format!("{SOURCE_CHECKPOINT} sha256={sha}")),
        )
    } else {
        (fresh, None)
    };
    let plan = apply_policy(&model, variant, config.base_lr, &schedule(config))?;
    let optimizer = match variant {
        FreezePolicy::RI => OptimizerKind::Adam,
        _ => OptimizerKind::SgdMomentum {
            mu: config.momentum,
        },
    };
    let protocol = TrainingProtocol {
        epochs: config.epochs,
        batch_size: config.batch_size,
        optimizer,
        patience: config.patience,
        plateau_patience: config.plateau_patience,
        plateau_divisor: config.plateau_divisor,
        augment: config.augment,
    };
    let stem = run_stem(variant, run);
    let status = match train(model, &plan, &train_set, &val_set, &protocol, derive_seed(run_seed, 13)) {
        Ok(outcome) => {
            let preds = predict_scores(&outcome.model, &test, EVAL_CHUNK)?;
            write(&out.join(format!("history_{stem}.csv")), outcome.history.to_csv())?;
            write(&out.join(format!("scores_{stem}.csv")), scores_csv(&preds))?;
            save_checkpoint(&outcome.model, &out.join(format!("model_{stem}.ckpt")))?;
            RunStatus::Ok {
                accuracy: accuracy(&preds, DEFAULT_THRESHOLD)?,
                auc: auc(&roc_curve(&preds)?),
                epochs_trained: outcome.history.epochs.len(),
            }
        }
        Err(e @ Error::NonFinite { .. }) => RunStatus::Failed(e.to_string()),
        Err(e) => return Err(e),
    };
    let record = RunRecord {
        variant,
        run,
        status,
        wall_s: start.elapsed().as_secs_f64(),
        record_timing: config.record_timing,
        trainable: plan.trainable.clone(),
        source_checkpoint,
    };
    let mut meta = record.to_meta();
    writeln!(meta, "config = {}", config.summary()).unwrap();
    write(&out.join(format!("run_{stem}.meta")), meta)?;
    Ok(record)
}

/// Runs every requested variant for every run seed, writes the per-run files
/// and the aggregated report, and returns the table.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultsTable> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let target = load_target(config)?;
    let checkpoint = out.join(SOURCE_CHECKPOINT);
    let needs_source = config.variants.iter().any(|v| v.uses_transfer());
    let checkpoint_sha = if needs_source {
        if !source_is_current(config) {
            pretrain_source(config)?;
        }
        Some(sha256_file(&checkpoint)?)
    } else {
        None
    };
    let ctx = RunContext {
        config,
        target: &target,
        checkpoint,
        checkpoint_sha,
    };
    let jobs: Vec<(FreezePolicy, usize)> = config
        .variants
        .iter()
        .flat_map(|&v| (0..config.runs).map(move |r| (v, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let records: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(v, r)| execute_run(&ctx, v, r))
            .collect::<Result<_>>()
    })?;
    write_report(out, &records)
}

/// Re-aggregates every run file found in `out_dir`.
pub fn report(out_dir: &Path) -> Result<ResultsTable> {
    let entries = fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(out_dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("run_") && name.ends_with(".meta") {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            records.push(RunRecord::from_meta(&text, &path)?);
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no run files in {}", out_dir.display())));
    }
    write_report(out_dir, &records)
}

/// Reads the per-run records back, e.g. to audit trainable masks.
pub fn read_run_records(out_dir: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(out_dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("run_") && name.ends_with(".meta") {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            out.push(RunRecord::from_meta(&text, &path)?);
        }
    }
    out.sort_by_key(|r| (r.variant, r.run));
    Ok(out)
}

fn write_report(out: &Path, records: &[RunRecord]) -> Result<ResultsTable> {
    let mut by_variant: BTreeMap<FreezePolicy, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_variant.entry(r.variant).or_default().push(r);
    }
    let mut table = ResultsTable::default();
    let mut timing = String::from("variant,run,wall_s\n");
    for (variant, mut runs) in by_variant {
        runs.sort_by_key(|r| r.run);
        let mut accs = Vec::new();
        let mut aucs = Vec::new();
        let mut pooled = Vec::new();
        let mut failed = 0;
        for r in &runs {
            writeln!(timing, "{},{},{:.3}", variant, r.run, r.wall_s).unwrap();
            match r.status {
                RunStatus::Ok { accuracy, auc, .. } => {
                    accs.push(accuracy);
                    aucs.push(auc);
                    let path = out.join(format!("scores_{}.csv", run_stem(variant, r.run)));
                    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    pooled.extend(parse_scores(&text, &path)?);
                }
                RunStatus::Failed(_) => failed += 1,
            }
        }
        let (mean_acc, std_acc) = match accs.len() {
            0 => (f64::NAN, None),
            1 => (accs[0], None),
            _ => {
                let (m, s) = aggregate_runs(&accs)?;
                (m, Some(s * 100.0))
            }
        };
        let mean_auc = aucs.iter().sum::<f64>() / aucs.len().max(1) as f64;
        if !pooled.is_empty() {
            write(&out.join(format!("roc_{variant}.csv")), roc_csv(&roc_curve(&pooled)?))?;
        }
        let wall_s = runs
            .iter()
            .all(|r| r.record_timing)
            .then(|| runs.iter().map(|r| r.wall_s).sum());
        table.rows.push(VariantRow {
            variant,
            runs: runs.len(),
            failed,
            mean_acc: mean_acc * 100.0,
            std_acc,
            mean_auc,
            wall_s,
        });
    }
    write(&out.join("results.csv"), table.to_csv())?;
    write(&out.join("timing.csv"), timing)?;
    Ok(table)
}
