//! Checkpoint container.
//!
//! ```text
//! transfer-lab checkpoint
//! version 1
//! config input_size=32 in_channels=1 stem_channels=8,16,16 ...
//! layer <index> <name> <kind> <depth>
//! param <name> <depth> <d0>x<d1>x...
//! bn <index> <channels>
//! data <f64 count>
//! <blank line>
//! <little-endian f64: every parameter in registry order, then each
//!  batch-norm running_mean followed by running_var>
//! ```
//!
//! Floats in the header use Rust's shortest round-trip formatting, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::model::{build_mini_inception, Model, ModelConfig, PoolKind};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "transfer-lab checkpoint";

fn config_line(c: &ModelConfig) -> String {
    let stem: Vec<String> = c.stem_channels.iter().map(|v| v.to_string()).collect();
    let pool = match c.pool_kind {
        PoolKind::Max => "max",
        PoolKind::Avg => "avg",
    };
    format!(
        "config input_size={} in_channels={} stem_channels={} stem_pools={} pool={} \
         blocks={} block_channels={} block_reduce={} head_hidden={} classes={} \
         dropout={} bn_momentum={} bn_eps={}",
        c.input_size,
        c.in_channels,
        stem.join(","),
        c.stem_pools,
        pool,
        c.inception_blocks,
        c.block_channels,
        c.block_reduce,
        c.head_hidden,
        c.classes,
        c.dropout,
        c.bn_momentum,
        c.bn_eps
    )
}

fn parse_config(line: &str) -> Result<ModelConfig> {
    let bad = |m: String| Error::Checkpoint(format!("config line: {m}"));
    let mut c = ModelConfig::default();
    for item in line.split_whitespace().skip(1) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed entry {item:?}")))?;
        let int = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{k}: {e}")));
        let float = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{k}: {e}")));
        match k {
            "input_size" => c.input_size = int(v)?,
            "in_channels" => c.in_channels = int(v)?,
            "stem_channels" => {
                c.stem_channels = v.split(',').map(int).collect::<Result<_>>()?;
            }
            "stem_pools" => c.stem_pools = int(v)?,
            "pool" => {
                c.pool_kind = match v {
                    "max" => PoolKind::Max,
                    "avg" => PoolKind::Avg,
                    _ => return Err(bad(format!("unknown pool kind {v}"))),
                }
            }
            "blocks" => c.inception_blocks = int(v)?,
            "block_channels" => c.block_channels = int(v)?,
            "block_reduce" => c.block_reduce = int(v)?,
            "head_hidden" => c.head_hidden = int(v)?,
            "classes" => c.classes = int(v)?,
            "dropout" => c.dropout = float(v)?,
            "bn_momentum" => c.bn_momentum = float(v)?,
            "bn_eps" => c.bn_eps = float(v)?,
            _ => return Err(bad(format!("unknown key {k}"))),
        }
    }
    Ok(c)
}

fn header(model: &Model) -> String {
    let mut h = String::new();
    writeln!(h, "{MAGIC}").unwrap();
    writeln!(h, "version {CHECKPOINT_VERSION}").unwrap();
    writeln!(h, "{}", config_line(&model.config)).unwrap();
    for (i, l) in model.layers.iter().enumerate() {
        writeln!(h, "layer {i} {} {} {}", l.name, l.kind.name(), l.depth_index).unwrap();
    }
    for p in &model.params {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(h, "param {} {} {}", p.name, p.depth, dims.join("x")).unwrap();
    }
    for (i, s) in model.bn.iter().enumerate() {
        writeln!(h, "bn {i} {}", s.channels()).unwrap();
    }
    let count = model.param_count() + model.bn.iter().map(|s| 2 * s.channels()).sum::<usize>();
    writeln!(h, "data {count}").unwrap();
    h.push('\n');
    h
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = header(self).into_bytes();
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in &self.bn {
            for v in s.running_mean.iter().chain(&s.running_var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
        let head = std::str::from_utf8(&bytes[..split + 1])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let body = &bytes[split + 2..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Checkpoint("bad magic line".into()));
        }
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("version "))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Checkpoint("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = parse_config(
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint("missing config line".into()))?,
        )?;
        let mut model = build_mini_inception(&config, 0)?;
        let expected = header(&model);
        if expected.as_bytes() != &bytes[..split + 2] {
            let first_diff = expected
                .lines()
                .zip(head.lines())
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {a:?}, found {b:?}"))
                .unwrap_or_else(|| "header length differs".into());
            return Err(Error::Checkpoint(format!("manifest mismatch: {first_diff}")));
        }
        let count = body.len() / 8;
        let want = model.param_count() + model.bn.iter().map(|s| 2 * s.channels()).sum::<usize>();
        if !body.len().is_multiple_of(8) || count != want {
            return Err(Error::Checkpoint(format!(
                "expected {want} values, found {} bytes",
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for p in &mut model.params {
            for v in p.value.data_mut() {
                *v = values.next().expect("length checked");
            }
        }
        for s in &mut model.bn {
            for v in s.running_mean.iter_mut().chain(s.running_var.iter_mut()) {
                *v = values.next().expect("length checked");
            }
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::from_checkpoint_bytes(&bytes)
}
