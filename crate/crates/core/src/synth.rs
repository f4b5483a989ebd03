//! Synthetic binary task with planted easy and hard regions.
//!
//! Every sentence belongs to one of two token clusters. Inside a cluster each
//! token carries a fixed polarity on an evenly spaced grid over `[-3, 3]`.
//! A sentence of class `pos` (`neg`) draws a latent score
//! `z ~ N(+μ, 1)` (`N(−μ, 1)`) and emits tokens whose polarity is close to
//! `z` plus jitter, mixed with label-free noise tokens. The easy cluster uses
//! `μ = ratio · μ_hard`, so its examples are separated by a much wider
//! label-consistent margin than the hard cluster's.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{sample_few_shot, LabelMap, RawRecord, SplitManifest, Vocab};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const POSITIVE: &str = "pos";
pub const NEGATIVE: &str = "neg";
const NOISE_TOKENS: usize = 8;
const NOISE_RATE: f64 = 0.25;
const TOKEN_JITTER: f64 = 0.75;
const POLARITY_RANGE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub tokens_per_cluster: usize,
    pub hard_margin: f64,
    pub margin_ratio: f64,
    pub pool_per_class: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tokens_per_cluster: 24,
            hard_margin: 0.5,
            margin_ratio: 4.0,
            pool_per_class: 60,
            dev_size: 200,
            test_size: 400,
            min_len: 6,
            max_len: 12,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.tokens_per_cluster < 2 {
            return Err(Error::Config("synthetic clusters need at least two tokens".into()));
        }
        if !(self.hard_margin > 0.0 && self.margin_ratio > 0.0) {
            return Err(Error::Config("synthetic margins must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("synthetic sentence lengths must satisfy 1 ≤ min ≤ max".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cluster {
    Easy,
    Hard,
}

impl Cluster {
    fn prefix(self) -> &'static str {
        match self {
            Cluster::Easy => "e",
            Cluster::Hard => "h",
        }
    }
}

/// One generated sentence plus the cluster it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecord {
    pub record: RawRecord,
    pub cluster: Cluster,
}

fn sentence<G: Rng>(cfg: &SynthConfig, cluster: Cluster, positive: bool, rng: &mut G) -> SynthRecord {
    let mu = match cluster {
        Cluster::Easy => cfg.hard_margin * cfg.margin_ratio,
        Cluster::Hard => cfg.hard_margin,
    };
    let sign = if positive { 1.0 } else { -1.0 };
    let z = Normal::new(sign * mu, 1.0).expect("unit variance").sample(rng);
    let jitter = Normal::new(0.0, TOKEN_JITTER).expect("positive jitter");
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let step = 2.0 * POLARITY_RANGE / (cfg.tokens_per_cluster - 1) as f64;
    let tokens: Vec<String> = (0..len)
        .map(|_| {
            if rng.random_bool(NOISE_RATE) {
                format!("n{}", rng.random_range(0..NOISE_TOKENS))
            } else {
                let target = z + jitter.sample(rng);
                let k = ((target + POLARITY_RANGE) / step).round();
                let k = k.clamp(0.0, (cfg.tokens_per_cluster - 1) as f64) as usize;
                format!("{}{k}", cluster.prefix())
            }
        })
        .collect();
    SynthRecord {
        record: RawRecord::new(if positive { POSITIVE } else { NEGATIVE }, tokens.join(" ")),
        cluster,
    }
}

/// `count` sentences alternating classes, each cluster chosen uniformly.
pub fn generate(cfg: &SynthConfig, count: usize, seed: u64, part: u64) -> Result<Vec<SynthRecord>> {
    cfg.validate()?;
    let mut r = rng::stream(seed, &[tag::SYNTH, part]);
    Ok((0..count)
        .map(|i| {
            let cluster = if r.random_bool(0.5) { Cluster::Easy } else { Cluster::Hard };
            sentence(cfg, cluster, i % 2 == 0, &mut r)
        })
        .collect())
}

/// A complete synthetic task: all records, the manifest indexing them, the
/// vocabulary (every generator token) and the label map.
#[derive(Clone, Debug)]
pub struct SynthTask {
    pub records: Vec<SynthRecord>,
    pub manifest: SplitManifest,
    pub vocab: Vocab,
    pub labels: LabelMap,
}

impl SynthTask {
    pub fn raw_records(&self) -> Vec<RawRecord> {
        self.records.iter().map(|r| r.record.clone()).collect()
    }
}

/// Training pool of `pool_per_class` sentences per class, `shots` of which
/// are sampled per class; fresh dev and test sets follow the pool.
pub fn task(cfg: &SynthConfig, shots: usize, seed: u64) -> Result<SynthTask> {
    let mut records = generate(cfg, 2 * cfg.pool_per_class, seed, 0)?;
    let pool: Vec<RawRecord> = records.iter().map(|r| r.record.clone()).collect();
    let mut manifest = sample_few_shot(&pool, shots, 0.5, seed)?;
    let pool_len = records.len();
    records.extend(generate(cfg, cfg.dev_size, seed, 1)?);
    records.extend(generate(cfg, cfg.test_size, seed, 2)?);
    manifest.dev = (pool_len..pool_len + cfg.dev_size).collect();
    manifest.test = (pool_len + cfg.dev_size..records.len()).collect();

    let mut tokens: Vec<String> = (0..NOISE_TOKENS).map(|k| format!("n{k}")).collect();
    for c in [Cluster::Easy, Cluster::Hard] {
        tokens.extend((0..cfg.tokens_per_cluster).map(|k| format!("{}{k}", c.prefix())));
    }
    let vocab_records = vec![RawRecord::new(POSITIVE, tokens.join(" "))];
    let vocab = Vocab::build(&vocab_records, 1)?;
    let labels = LabelMap::from_names(vec![NEGATIVE.to_string(), POSITIVE.to_string()])?;
    Ok(SynthTask {
        records,
        manifest,
        vocab,
        labels,
    })
}
