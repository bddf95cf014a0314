//! Layered run settings: built-in defaults, then a `key = value` file, then
//! command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::Manifest;
use crate::denoise::{Activation, DenoiseDims, DenoiseInit};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

fn default_entries() -> Vec<(&'static str, String)> {
    let t = TrainConfig::default();
    vec![
        ("hidden", "64".into()),
        ("max_len", "32".into()),
        ("num_layers", "2".into()),
        ("num_heads", "4".into()),
        ("ff_size", "128".into()),
        ("post_layers", "auto".into()),
        ("denoise_dims", "auto".into()),
        ("activation", Activation::default().to_string()),
        ("denoise_init", DenoiseInit::default().to_string()),
        ("min_count", "1".into()),
        ("phase1_epochs", t.phase1_epochs.to_string()),
        ("phase1_lr", t.phase1_lr.to_string()),
        ("phase1_weight_decay", t.phase1_weight_decay.to_string()),
        ("phase2_epochs", t.phase2_epochs.to_string()),
        ("phase2_lr", t.phase2_lr.to_string()),
        ("warmup", t.warmup.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("seed", t.seed.to_string()),
        ("lambda", t.lambda.to_string()),
        ("include_complete", t.include_complete.to_string()),
        ("head_only", t.head_only.to_string()),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, (String, Source)>,
}

impl Default for Settings {
    fn default() -> Self {
        let values = default_entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), (v, Source::Default)))
            .collect();
        Self { values }
    }
}

impl Settings {
    fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        let slot = self
            .values
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown setting {key:?}")))?;
        // A file never overrides a flag, whatever order they arrive in.
        if source == Source::File && slot.1 == Source::Flag {
            return Ok(());
        }
        *slot = (value.to_string(), source);
        Ok(())
    }

    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in Manifest::parse(text)?.entries {
            self.set(&k, &v, Source::File)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_file_text(&std::fs::read_to_string(path).map_err(crate::error::at_path(path))?)
    }

    pub fn apply_flag(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value, Source::Flag)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.values.get(key).map(|(_, s)| *s)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown setting {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            phase1_epochs: self.parse("phase1_epochs")?,
            phase1_lr: self.parse("phase1_lr")?,
            phase1_weight_decay: self.parse("phase1_weight_decay")?,
            phase2_epochs: self.parse("phase2_epochs")?,
            phase2_lr: self.parse("phase2_lr")?,
            warmup: self.parse("warmup")?,
            batch_size: self.parse("batch_size")?,
            seed: self.parse("seed")?,
            lambda: self.parse("lambda")?,
            include_complete: self.parse("include_complete")?,
            head_only: self.parse("head_only")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, vocab_size: usize, num_classes: usize) -> Result<ModelConfig> {
        let encoder = EncoderConfig {
            hidden: self.parse("hidden")?,
            max_len: self.parse("max_len")?,
            num_layers: self.parse("num_layers")?,
            num_heads: self.parse("num_heads")?,
            ff_size: self.parse("ff_size")?,
            vocab_size,
            num_classes,
        };
        let mut cfg = ModelConfig::new(encoder);
        if self.get("post_layers") != Some("auto") {
            cfg.post_layers = self.parse("post_layers")?;
        }
        if let Some(dims) = self.get("denoise_dims").filter(|d| *d != "auto") {
            cfg.denoise = DenoiseDims::new(parse_dims(dims)?);
        }
        cfg.activation = self.parse("activation")?;
        cfg.denoise_init = self.parse("denoise_init")?;
        cfg.encoder.validate()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every resolved value, one `key = value` line each.
    pub fn resolved_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, (v, _))| format!("{k} = {v}\n"))
            .collect()
    }

    /// Every resolved value with where it came from.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, (v, s))| format!("{k} = {v}  # {s}\n"))
            .collect()
    }
}

/// `"64,16,8,4"` → `[64, 16, 8, 4]`.
pub fn parse_dims(text: &str) -> Result<[usize; 4]> {
    let parts = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Config(format!("invalid denoise dims {text:?}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("denoise dims need four widths, got {text:?}")))
}
