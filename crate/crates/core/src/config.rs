//! Flat `key = value` run configuration covering the model and training settings.
//!
//! ```text
//! # comments and blank lines are ignored
//! preset = desk
//! variant = cr
//! epochs = 60
//! width_mult = 0.5
//! ```
//!
//! `preset` (`desk` or `paper`) is applied first wherever it appears; every
//! other line overrides one field.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Every key accepted besides `preset` and `variant`.
pub const KEYS: [&str; 21] = [
    "num_classes",
    "width_mult",
    "depth_mult",
    "use_cafm",
    "use_rcm",
    "shuffle_groups",
    "strip_k",
    "input_size",
    "strides",
    "tail_blocks",
    "batch_size",
    "lr0",
    "momentum",
    "epochs",
    "lr_min",
    "weight_decay",
    "seed",
    "mosaic",
    "mosaic_prob",
    "hflip_prob",
    "close_mosaic",
];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let train = match name {
            "desk" => TrainConfig::desk(),
            "paper" => TrainConfig::paper(),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset '{name}' (expected desk or paper)"
                )))
            }
        };
        Ok(Self {
            model: ModelConfig::default(),
            train,
        })
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "variant" => *m = m.clone().with_variant(value.parse()?),
            "num_classes" => m.num_classes = p(key, value)?,
            "width_mult" => m.width_mult = p(key, value)?,
            "depth_mult" => m.depth_mult = p(key, value)?,
            "use_cafm" => m.use_cafm = p(key, value)?,
            "use_rcm" => m.use_rcm = p(key, value)?,
            "shuffle_groups" => m.shuffle_groups = p(key, value)?,
            "strip_k" => m.strip_k = p(key, value)?,
            "input_size" => m.input_size = p(key, value)?,
            "strides" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|s| p(key, s.trim()))
                    .collect::<Result<_>>()?;
                m.strides = parts.try_into().map_err(|_| {
                    Error::Config(format!("strides needs three values, got '{value}'"))
                })?;
            }
            "tail_blocks" => m.tail_blocks = p(key, value)?,
            "batch_size" => t.batch_size = p(key, value)?,
            "lr0" => t.lr0 = p(key, value)?,
            "momentum" => t.momentum = p(key, value)?,
            "epochs" => t.epochs = p(key, value)?,
            "lr_min" => t.lr_min = p(key, value)?,
            "weight_decay" => t.weight_decay = p(key, value)?,
            "seed" => t.seed = p(key, value)?,
            "mosaic" => t.augment.mosaic = p(key, value)?,
            "mosaic_prob" => t.augment.mosaic_prob = p(key, value)?,
            "hflip_prob" => t.augment.hflip_prob = p(key, value)?,
            "close_mosaic" => t.augment.close_mosaic = p(key, value)?,
            "prefetch" => t.prefetch = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut preset = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                preset = Some((i + 1, v.to_string()));
            } else {
                entries.push((i + 1, k.to_string(), v.to_string()));
            }
        }
        let wrap = |line: usize, e: Error| match e {
            Error::Config(msg) | Error::Argument(msg) => Error::Parse {
                file: path.to_path_buf(),
                line,
                msg,
            },
            e => e,
        };
        let mut cfg = match preset {
            Some((line, name)) => Self::preset(&name).map_err(|e| wrap(line, e))?,
            None => Self::default(),
        };
        for (line, k, v) in entries {
            cfg.set(&k, &v).map_err(|e| wrap(line, e))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Text form that parses back to the same config.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv(
            "variant",
            Variant::from_flags(m.use_cafm, m.use_rcm)
                .name()
                .to_string(),
        );
        kv("num_classes", m.num_classes.to_string());
        kv("width_mult", m.width_mult.to_string());
        kv("depth_mult", m.depth_mult.to_string());
        kv("shuffle_groups", m.shuffle_groups.to_string());
        kv("strip_k", m.strip_k.to_string());
        kv("input_size", m.input_size.to_string());
        kv("strides", m.strides.map(|v| v.to_string()).join(","));
        kv("tail_blocks", m.tail_blocks.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr0", t.lr0.to_string());
        kv("momentum", t.momentum.to_string());
        kv("epochs", t.epochs.to_string());
        kv("lr_min", t.lr_min.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("seed", t.seed.to_string());
        kv("mosaic", t.augment.mosaic.to_string());
        kv("mosaic_prob", t.augment.mosaic_prob.to_string());
        kv("hflip_prob", t.augment.hflip_prob.to_string());
        kv("close_mosaic", t.augment.close_mosaic.to_string());
        kv("prefetch", t.prefetch.to_string());
        s
    }
}
