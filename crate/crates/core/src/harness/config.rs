use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{AugmentParams, SynthSpec};
use crate::error::{Error, Result};
use crate::finetune::FreezePolicy;
use crate::nn::ModelConfig;

/// Where the target task comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic,
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Held-out share of the source set used for validation.
    pub val_fraction: f64,
    /// Source validation accuracy below this is flagged in the metadata.
    pub accuracy_floor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            val_fraction: 0.1,
            accuracy_floor: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub synth: SynthSpec,
    pub variants: Vec<FreezePolicy>,
    pub runs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub fted_t0: f64,
    pub gamma: f64,
    pub momentum: f64,
    pub patience: usize,
    pub plateau_patience: usize,
    pub plateau_divisor: f64,
    pub seed: u64,
    /// Share of the target set used for training plus validation.
    pub train_fraction: f64,
    /// Share of the training portion held out for early stopping.
    pub val_fraction: f64,
    pub augment: AugmentParams,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub out_dir: PathBuf,
    /// Worker threads for independent runs; 0 picks the rayon default.
    pub threads: usize,
    /// Write measured wall time into `results.csv` (otherwise `NA`, which
    /// keeps the table byte-reproducible).
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic,
            synth: SynthSpec::default(),
            variants: FreezePolicy::MATRIX.to_vec(),
            runs: 5,
            epochs: 90,
            batch_size: 128,
            base_lr: 1e-4,
            fted_t0: 1e-3,
            gamma: 3.0,
            momentum: 0.9,
            patience: 15,
            plateau_patience: 5,
            plateau_divisor: 10.0,
            seed: 0,
            train_fraction: 0.8,
            val_fraction: 0.125,
            augment: AugmentParams::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            out_dir: PathBuf::from("results"),
            threads: 0,
            record_timing: false,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// Shrinks the training budget for a single workstation.
    pub fn apply_desk(&mut self) {
        self.epochs = 40;
        self.batch_size = 32;
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(bad("runs must be at least 1"));
        }
        if self.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(bad("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(bad("epochs must be at least 1"));
        }
        if self.variants.is_empty() {
            return Err(bad("no variants selected"));
        }
        for (name, v) in [
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
            ("pretrain.val_fraction", self.pretrain.val_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(bad(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("fted_t0", self.fted_t0),
            ("pretrain.lr", self.pretrain.lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(format!("{name} = {v} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.model.input_size != self.synth.patch_size {
            return Err(bad(format!(
                "model input size {} differs from patch size {}",
                self.model.input_size, self.synth.patch_size
            )));
        }
        let blocks = self.model.inception_blocks;
        for v in &self.variants {
            if let FreezePolicy::NFT(n) = v {
                if *n > blocks {
                    return Err(bad(format!("{v} needs {n} blocks, model has {blocks}")));
                }
            }
        }
        self.augment.validate().map_err(|e| bad(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses `[section]` headers and `key = value` lines. Relative paths
    /// resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| bad(format!("line {}: {m}", i + 1));
            if let Some(name) = line.strip_prefix('[') {
                section = name
                    .strip_suffix(']')
                    .ok_or_else(|| at("unterminated section header".into()))?
                    .trim()
                    .to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            c.set(&section, key.trim(), value.trim(), base)
                .map_err(|e| at(e.to_string().trim_start_matches("config error: ").to_string()))?;
        }
        Ok(c)
    }

    fn set(&mut self, section: &str, key: &str, v: &str, base: &Path) -> Result<()> {
        let int = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
        let float = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
        let boolean = |v: &str| match v {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(bad(format!("{key}: expected true or false, got {v:?}"))),
        };
        match (section, key) {
            ("experiment", "seed") => {
                self.seed = v.parse().map_err(|e| bad(format!("{key}: {e}")))?
            }
            ("experiment", "runs") => self.runs = int(v)?,
            ("experiment", "variants") => self.variants = parse_variants(v)?,
            ("experiment", "out") => self.out_dir = base.join(v),
            ("experiment", "threads") => self.threads = int(v)?,
            ("experiment", "record_timing") => self.record_timing = boolean(v)?,
            ("training", "epochs") => self.epochs = int(v)?,
            ("training", "batch_size") => self.batch_size = int(v)?,
            ("training", "base_lr") => self.base_lr = float(v)?,
            ("training", "fted_t0") => self.fted_t0 = float(v)?,
            ("training", "gamma") => self.gamma = float(v)?,
            ("training", "momentum") => self.momentum = float(v)?,
            ("training", "patience") => self.patience = int(v)?,
            ("training", "plateau_patience") => self.plateau_patience = int(v)?,
            ("training", "plateau_divisor") => self.plateau_divisor = float(v)?,
            ("pretrain", "epochs") => self.pretrain.epochs = int(v)?,
            ("pretrain", "lr") => self.pretrain.lr = float(v)?,
            ("pretrain", "batch_size") => self.pretrain.batch_size = int(v)?,
            ("pretrain", "val_fraction") => self.pretrain.val_fraction = float(v)?,
            ("pretrain", "accuracy_floor") => self.pretrain.accuracy_floor = float(v)?,
            ("data", "dataset") => {
                self.dataset = match v {
                    "synthetic" => DatasetSource::Synthetic,
                    path => DatasetSource::Manifest(base.join(path)),
                }
            }
            ("data", "patch_size") => {
                self.synth.patch_size = int(v)?;
                self.model.input_size = self.synth.patch_size;
            }
            ("data", "source_count") => self.synth.source_count = int(v)?,
            ("data", "target_count") => self.synth.target_count = int(v)?,
            ("data", "train_fraction") => self.train_fraction = float(v)?,
            ("data", "val_fraction") => self.val_fraction = float(v)?,
            ("augment", "max_shift_fraction") => self.augment.max_shift_fraction = float(v)?,
            ("augment", "max_rotation_degrees") => self.augment.max_rotation_degrees = float(v)?,
            ("augment", "horizontal_flip") => self.augment.horizontal_flip = boolean(v)?,
            ("model", "stem_channels") => {
                self.model.stem_channels = v.split(',').map(|s| int(s.trim())).collect::<Result<_>>()?
            }
            ("model", "inception_blocks") => self.model.inception_blocks = int(v)?,
            ("model", "block_channels") => self.model.block_channels = int(v)?,
            ("model", "block_reduce") => self.model.block_reduce = int(v)?,
            ("model", "head_hidden") => self.model.head_hidden = int(v)?,
            ("model", "dropout") => self.model.dropout = float(v)?,
            _ => {
                let name = if section.is_empty() {
                    key.to_string()
                } else {
                    format!("{section}.{key}")
                };
                return Err(bad(format!("unknown key {name}")));
            }
        }
        Ok(())
    }

    /// One-line description stored in run metadata.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let variants: Vec<String> = self.variants.iter().map(|v| v.to_string()).collect();
        write!(
            s,
            "seed={} runs={} epochs={} batch_size={} base_lr={} fted_t0={} gamma={} momentum={} \
             patience={} plateau_patience={} plateau_divisor={} variants={}",
            self.seed,
            self.runs,
            self.epochs,
            self.batch_size,
            self.base_lr,
            self.fted_t0,
            self.gamma,
            self.momentum,
            self.patience,
            self.plateau_patience,
            self.plateau_divisor,
            variants.join(",")
        )
        .expect("writing to String");
        s
    }
}

pub fn parse_variants(list: &str) -> Result<Vec<FreezePolicy>> {
    let mut out: Vec<FreezePolicy> = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v: FreezePolicy = name.parse()?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(bad("empty variant list"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = ExperimentConfig::default();
        assert_eq!((c.runs, c.epochs, c.batch_size), (5, 90, 128));
        assert_eq!((c.base_lr, c.fted_t0, c.gamma, c.momentum), (1e-4, 1e-3, 3.0, 0.9));
        assert_eq!(c.patience, 15);
        assert_eq!(c.variants.len(), 7);
        let mut d = c.clone();
        d.apply_desk();
        assert_eq!((d.epochs, d.batch_size), (40, 32));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parses_sections() {
        let text = "# demo\n[experiment]\nseed = 7\nvariants = FE, FTED\nout = res\n\n\
                    [training]\nepochs = 3 # short\nbase_lr = 2e-4\n[augment]\nhorizontal_flip = false\n";
        let c = ExperimentConfig::parse(text, Path::new("/tmp/x")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.variants, vec![FreezePolicy::FE, FreezePolicy::FTED]);
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x/res"));
        assert_eq!(c.epochs, 3);
        assert_eq!(c.base_lr, 2e-4);
        assert!(!c.augment.horizontal_flip);
    }

    #[test]
    fn rejects_bad_input() {
        let err = ExperimentConfig::parse("[training]\nepoch = 3\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("unknown key training.epoch"), "{err}");
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = ExperimentConfig::parse("[experiment]\nvariants = FE, 9XT\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("unknown variant"), "{err}");
        assert!(ExperimentConfig::parse("[training\n", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("[training]\nepochs\n", Path::new(".")).is_err());
        let c = ExperimentConfig {
            runs: 0,
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            variants: vec![FreezePolicy::NFT(4)],
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
