//! Flat `key=value` run configuration.
//!
//! Every key is declared in [`SCHEMA`] with a default and a validator.
//! Unknown keys and invalid values are rejected before any work starts.
//! The canonical text form (sorted `key=value` lines) is what gets echoed
//! into run directories and hashed into fingerprints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::Format;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::mixup::{LambdaDist, MixVariant};
use crate::smoothing::{SmoothingConfig, SmoothingMode};
use crate::trainer::{SelectionPolicy, TrainConfig};

#[derive(Clone, Copy, Debug)]
enum Kind {
    Text,
    UInt { min: u64 },
    Real { min: f64, max: f64, open_max: bool },
    Bool,
    Choice(&'static [&'static str]),
    Lambda,
    SeedList,
}

struct KeySpec {
    key: &'static str,
    default: &'static str,
    kind: Kind,
    /// Whether the key can change the outcome of stage-1 training.
    stage1: bool,
}

const fn key(key: &'static str, default: &'static str, kind: Kind, stage1: bool) -> KeySpec {
    KeySpec {
        key,
        default,
        kind,
        stage1,
    }
}

const UNIT: Kind = Kind::Real {
    min: 0.0,
    max: 1.0,
    open_max: false,
};
const POSITIVE: Kind = Kind::Real {
    min: f64::MIN_POSITIVE,
    max: f64::INFINITY,
    open_max: false,
};

static SCHEMA: &[KeySpec] = &[
    key("name", "run", Kind::Text, false),
    key("seed", "42", Kind::UInt { min: 0 }, true),
    key("seeds", "1,2,3,4,5", Kind::SeedList, false),
    // data
    key("dataset", "files", Kind::Choice(&["files", "synthetic"]), true),
    key("format", "tsv", Kind::Choice(&["tsv", "jsonl"]), true),
    key("train_path", "", Kind::Text, true),
    key("test_path", "", Kind::Text, true),
    key("split_dir", "prepared", Kind::Text, true),
    key("shots_per_class", "10", Kind::UInt { min: 1 }, true),
    key(
        "dev_fraction",
        "0.25",
        Kind::Real {
            min: f64::MIN_POSITIVE,
            max: 1.0,
            open_max: true,
        },
        true,
    ),
    key("min_freq", "1", Kind::UInt { min: 1 }, true),
    key("max_len", "128", Kind::UInt { min: 1 }, true),
    key("synth_tokens_per_cluster", "24", Kind::UInt { min: 4 }, true),
    key("synth_hard_margin", "0.5", POSITIVE, true),
    key("synth_margin_ratio", "4", POSITIVE, true),
    key("synth_pool_per_class", "60", Kind::UInt { min: 1 }, true),
    key("synth_dev_size", "200", Kind::UInt { min: 2 }, true),
    key("synth_test_size", "400", Kind::UInt { min: 2 }, true),
    // model
    key("embed_dim", "64", Kind::UInt { min: 1 }, true),
    key("hidden_dim", "64", Kind::UInt { min: 1 }, true),
    key("num_blocks", "2", Kind::UInt { min: 1 }, true),
    // optimization
    key("batch_size", "32", Kind::UInt { min: 1 }, true),
    key("stage1_lr", "1e-3", POSITIVE, true),
    key("stage2_lr", "2e-4", POSITIVE, false),
    key("weight_decay", "1e-4", Kind::Real { min: 0.0, max: f64::INFINITY, open_max: false }, true),
    key(
        "warmup_fraction",
        "0.1",
        Kind::Real {
            min: 0.0,
            max: 1.0,
            open_max: true,
        },
        true,
    ),
    key("stage1_epochs", "30", Kind::UInt { min: 0 }, true),
    key("stage2_epochs", "20", Kind::UInt { min: 0 }, false),
    // self-evolution
    key(
        "selection_policy",
        "easy_to_hard",
        Kind::Choice(&["random", "easy_to_hard", "hard_to_easy"]),
        false,
    ),
    key("mix_variant", "span", Kind::Choice(&["none", "embed", "hidden", "span"]), false),
    key("mix_layer", "1", Kind::UInt { min: 0 }, false),
    key("lambda_dist", "beta:0.2", Kind::Lambda, false),
    key("smoothing", "ils", Kind::Choice(&["none", "uniform_ls", "ils"]), false),
    key("alpha", "0.1", UNIT, false),
    key("rescore_every_epoch", "false", Kind::Bool, false),
    key("append_originals", "false", Kind::Bool, false),
];

fn spec(key: &str) -> Result<&'static KeySpec> {
    SCHEMA
        .iter()
        .find(|s| s.key == key)
        .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))
}

fn validate(spec: &KeySpec, value: &str) -> Result<()> {
    let bad = |why: &str| Error::Config(format!("{}={value:?}: {why}", spec.key));
    match spec.kind {
        Kind::Text => Ok(()),
        Kind::UInt { min } => {
            let v: u64 = value.parse().map_err(|_| bad("expected a non-negative integer"))?;
            if v < min {
                return Err(bad(&format!("must be at least {min}")));
            }
            Ok(())
        }
        Kind::Real { min, max, open_max } => {
            let v: f64 = value.parse().map_err(|_| bad("expected a number"))?;
            let above = if open_max { v >= max } else { v > max };
            if !v.is_finite() || v < min || above {
                return Err(bad(&format!("outside [{min}, {max}{}", if open_max { ")" } else { "]" })));
            }
            Ok(())
        }
        Kind::Bool => match value {
            "true" | "false" => Ok(()),
            _ => Err(bad("expected true or false")),
        },
        Kind::Choice(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                Err(bad(&format!("expected one of {}", options.join("|"))))
            }
        }
        Kind::Lambda => value.parse::<LambdaDist>().map(|_| ()),
        Kind::SeedList => parse_seeds(value).map(|_| ()).map_err(|_| bad("expected comma-separated integers")),
    }
}

fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = value
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad seed list {value:?}")))?;
    if seeds.is_empty() {
        return Err(Error::Config("empty seed list".into()));
    }
    Ok(seeds)
}

/// Fully resolved configuration; every schema key has a value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA
                .iter()
                .map(|s| (s.key.to_string(), s.default.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overridden by `key=value` lines. Blank lines and `#`
    /// comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        validate(spec(key)?, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Result<Self> {
        self.set(key, &value.to_string())?;
        Ok(self)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn is_key(key: &str) -> bool {
        spec(key).is_ok()
    }

    pub fn uint(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated integer")
    }

    pub fn real(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated number")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").parse().expect("validated seed")
    }

    pub fn seeds(&self) -> Vec<u64> {
        parse_seeds(self.get("seeds")).expect("validated seed list")
    }

    pub fn format(&self) -> Format {
        self.get("format").parse().expect("validated format")
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn fingerprint(&self) -> String {
        fingerprint_text(&self.to_text())
    }

    /// Fingerprint over only the keys that influence stage-1 training.
    pub fn stage1_fingerprint(&self) -> String {
        let text: String = SCHEMA
            .iter()
            .filter(|s| s.stage1)
            .map(|s| format!("{}={}\n", s.key, self.get(s.key)))
            .collect();
        fingerprint_text(&text)
    }

    pub fn model_config(&self, vocab_size: usize, num_classes: usize) -> Result<ModelConfig> {
        let c = ModelConfig {
            vocab_size,
            embed_dim: self.uint("embed_dim"),
            num_blocks: self.uint("num_blocks"),
            hidden_dim: self.uint("hidden_dim"),
            num_classes,
            max_len: self.uint("max_len"),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mix_layer = self.uint("mix_layer");
        let num_blocks = self.uint("num_blocks");
        if mix_layer > num_blocks {
            return Err(Error::Config(format!("mix_layer {mix_layer} exceeds num_blocks {num_blocks}")));
        }
        if self.uint("embed_dim") != self.uint("hidden_dim") {
            return Err(Error::Config("embed_dim must equal hidden_dim".into()));
        }
        let mode: SmoothingMode = self.get("smoothing").parse()?;
        Ok(TrainConfig {
            batch_size: self.uint("batch_size"),
            stage1_lr: self.real("stage1_lr"),
            stage2_lr: self.real("stage2_lr"),
            weight_decay: self.real("weight_decay"),
            warmup_fraction: self.real("warmup_fraction"),
            stage1_epochs: self.uint("stage1_epochs"),
            stage2_epochs: self.uint("stage2_epochs"),
            selection_policy: self.get("selection_policy").parse::<SelectionPolicy>()?,
            mix_variant: self.get("mix_variant").parse::<MixVariant>()?,
            mix_layer,
            lambda_dist: self.get("lambda_dist").parse()?,
            smoothing: SmoothingConfig::new(mode, self.real("alpha"))?,
            rescore_every_epoch: self.flag("rescore_every_epoch"),
            append_originals: self.flag("append_originals"),
            seed: self.seed(),
        })
    }
}

pub fn fingerprint_text(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_match_documented_values() {
        let c = RunConfig::default();
        let t = c.train_config().unwrap();
        assert_eq!(t.batch_size, 32);
        assert_eq!(t.weight_decay, 1e-4);
        assert_eq!(t.warmup_fraction, 0.1);
        assert_eq!(t.smoothing, SmoothingConfig::new(SmoothingMode::Instance, 0.1).unwrap());
        assert_eq!(t.selection_policy, SelectionPolicy::EasyToHard);
        assert_eq!(t.mix_variant, MixVariant::Span);
        assert_eq!(c.uint("max_len"), 128);
        for s in SCHEMA {
            validate(s, s.default).unwrap();
        }
    }

    #[test]
    fn unknown_keys_are_fatal() {
        assert!(matches!(RunConfig::from_text("learning_rate=1"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for (k, v) in [
            ("alpha", "1.5"),
            ("batch_size", "0"),
            ("warmup_fraction", "1"),
            ("selection_policy", "sideways"),
            ("lambda_dist", "beta:-1"),
            ("rescore_every_epoch", "yes"),
            ("seeds", "1,x"),
        ] {
            assert!(RunConfig::default().set(k, v).is_err(), "{k}={v}");
        }
    }

    #[test]
    fn text_round_trip_and_fingerprint() {
        let c = RunConfig::from_text("# comment\nalpha=0.3\n\nname=x\n").unwrap();
        assert_eq!(c.get("alpha"), "0.3");
        let again = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.fingerprint(), c.fingerprint());
        assert_ne!(c.fingerprint(), RunConfig::default().fingerprint());
        assert_eq!(c.fingerprint().len(), 16);
    }

    #[test]
    fn stage1_fingerprint_ignores_stage2_keys() {
        let a = RunConfig::default();
        let b = a.clone().with("selection_policy", "random").unwrap();
        let c = a.clone().with("stage1_lr", "0.01").unwrap();
        assert_eq!(a.stage1_fingerprint(), b.stage1_fingerprint());
        assert_ne!(a.stage1_fingerprint(), c.stage1_fingerprint());
    }

    #[test]
    fn cross_key_checks() {
        let c = RunConfig::default().with("mix_layer", 3).unwrap();
        assert!(c.train_config().is_err());
        let c = RunConfig::default().with("hidden_dim", 32).unwrap();
        assert!(c.model_config(10, 2).is_err());
    }
}
