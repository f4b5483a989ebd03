//! Accuracy, multi-seed aggregation, ablation grids and out-of-distribution
//! evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::config::RunConfig;
use crate::corpus::{self, encode, Example, FewShotSplit, LabelMap, RawRecord, SplitManifest, Vocab};
use crate::encoder::{self, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::synth::{self, SynthConfig};
use crate::trainer::{self, StageOutcome};

/// Index of the largest probability; the lowest index wins ties.
pub fn argmax(probs: &[f32]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ParamStore, example: &Example) -> Result<usize> {
    Ok(argmax(encoder::forward(params, example)?.probs.data()))
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn evaluate(params: &ParamStore, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty example list".into()));
    }
    let mut correct = 0usize;
    for e in examples {
        correct += (predict(params, e)? == e.label) as usize;
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Encoded split plus the vocabulary and labels it was encoded with.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: FewShotSplit,
    pub vocab: Vocab,
    pub labels: LabelMap,
}

/// Where the few-shot split for a given seed comes from.
pub trait DataSource {
    /// Stable identity used to key cached stage-1 runs.
    fn id(&self) -> String;
    fn load(&self, config: &RunConfig, seed: u64) -> Result<PreparedData>;
}

/// One split fixed on disk (written by `prepare`); the seed only changes
/// initialization and batch order.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub dir: PathBuf,
}

pub const RECORDS_FILE: &str = "records.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LABELS_FILE: &str = "labels.txt";
pub const MANIFEST_FILE: &str = "manifest.tsv";

impl PreparedSplit {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn read(&self, name: &str) -> Result<String> {
        let path = self.dir.join(name);
        std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Data(format!(
                "{} not found; run `semix prepare` first",
                path.display()
            )),
            _ => Error::io(&path, e),
        })
    }
}

impl DataSource for PreparedSplit {
    fn id(&self) -> String {
        format!("prepared:{}", self.dir.display())
    }

    fn load(&self, config: &RunConfig, _seed: u64) -> Result<PreparedData> {
        let records = corpus::parse_records(&self.read(RECORDS_FILE)?, corpus::Format::Tsv)?.records;
        let vocab = Vocab::from_text(&self.read(VOCAB_FILE)?)?;
        let labels = LabelMap::from_names(self.read(LABELS_FILE)?.lines().map(str::to_string).collect())?;
        let manifest_text = self.read(MANIFEST_FILE)?;
        let manifest = SplitManifest::from_tsv(&manifest_text, config.uint("shots_per_class"), config.seed())?;
        let split = manifest.materialize(&records, &vocab, &labels, config.uint("max_len"))?;
        Ok(PreparedData { split, vocab, labels })
    }
}

/// A labelled record pool from which a fresh few-shot split is drawn for
/// every seed. `official_test` (if non-empty) replaces the held-out part of
/// the pool as the test set.
#[derive(Clone, Debug)]
pub struct RecordPool {
    pub name: String,
    pub pool: Vec<RawRecord>,
    pub official_test: Vec<RawRecord>,
}

impl DataSource for RecordPool {
    fn id(&self) -> String {
        format!("pool:{}", self.name)
    }

    fn load(&self, config: &RunConfig, seed: u64) -> Result<PreparedData> {
        let vocab = Vocab::build(&self.pool, config.uint("min_freq"))?;
        let labels = LabelMap::from_records(&self.pool);
        let mut manifest = corpus::sample_few_shot(
            &self.pool,
            config.uint("shots_per_class"),
            config.real("dev_fraction"),
            seed,
        )?;
        let mut all = self.pool.clone();
        if !self.official_test.is_empty() {
            manifest = manifest.with_official_test(self.pool.len(), self.official_test.len());
            all.extend(self.official_test.iter().cloned());
        }
        let split = manifest.materialize(&all, &vocab, &labels, config.uint("max_len"))?;
        Ok(PreparedData { split, vocab, labels })
    }
}

/// The planted-difficulty synthetic task, regenerated per seed.
#[derive(Clone, Copy, Debug, Default)]
pub struct Synthetic;

pub fn synth_config(config: &RunConfig) -> SynthConfig {
    SynthConfig {
        tokens_per_cluster: config.uint("synth_tokens_per_cluster"),
        hard_margin: config.real("synth_hard_margin"),
        margin_ratio: config.real("synth_margin_ratio"),
        pool_per_class: config.uint("synth_pool_per_class"),
        dev_size: config.uint("synth_dev_size"),
        test_size: config.uint("synth_test_size"),
        ..SynthConfig::default()
    }
}

impl DataSource for Synthetic {
    fn id(&self) -> String {
        "synthetic".into()
    }

    fn load(&self, config: &RunConfig, seed: u64) -> Result<PreparedData> {
        let task = synth::task(&synth_config(config), config.uint("shots_per_class"), seed)?;
        let split = task
            .manifest
            .materialize(&task.raw_records(), &task.vocab, &task.labels, config.uint("max_len"))?;
        Ok(PreparedData {
            split,
            vocab: task.vocab,
            labels: task.labels,
        })
    }
}

/// The data source a config describes: the synthetic task, or the split
/// prepared under `split_dir`.
pub fn source_for(config: &RunConfig) -> Box<dyn DataSource> {
    match config.get("dataset") {
        "synthetic" => Box::new(Synthetic),
        _ => Box::new(PreparedSplit::new(config.get("split_dir"))),
    }
}

/// Both stages of one seed.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub seed: u64,
    pub model_config: ModelConfig,
    pub data: PreparedData,
    pub stage1: StageOutcome,
    pub stage2: StageOutcome,
}

impl PipelineRun {
    pub fn final_params(&self) -> &ParamStore {
        &self.stage2.best_params
    }

    pub fn dev_accuracy(&self) -> f64 {
        self.stage2.record.best_dev_accuracy
    }

    pub fn test_accuracy(&self) -> Option<f64> {
        self.stage2.record.test_accuracy
    }
}

/// Completed stage-1 runs keyed by data source and stage-1 fingerprint, so
/// sweeps over stage-2 settings train stage 1 once per seed.
#[derive(Default)]
pub struct Stage1Cache {
    runs: BTreeMap<String, StageOutcome>,
}

impl Stage1Cache {
    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

/// Train stage 1 and stage 2 for `config` (its `seed` key included).
pub fn run_pipeline(config: &RunConfig, source: &dyn DataSource, cache: Option<&mut Stage1Cache>) -> Result<PipelineRun> {
    let seed = config.seed();
    let train_config = config.train_config()?;
    let data = source.load(config, seed)?;
    let model_config = config.model_config(data.vocab.len(), data.labels.len())?;
    let key = format!("{}|{}", source.id(), config.stage1_fingerprint());
    let cached = cache.as_ref().and_then(|c| c.runs.get(&key).cloned());
    let stage1 = match cached {
        Some(s) => s,
        None => {
            let init = ParamStore::init(&model_config, seed)?;
            let s = trainer::train_stage1(&train_config, &data.split, init)?;
            if let Some(c) = cache {
                c.runs.insert(key, s.clone());
            }
            s
        }
    };
    let stage2 = trainer::train_stage2_se(&train_config, &data.split, &stage1.best_params)?;
    Ok(PipelineRun {
        seed,
        model_config,
        data,
        stage1,
        stage2,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub dev_accuracy: f64,
    /// Test accuracy at the best-dev checkpoint.
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_seed: Vec<SeedResult>,
    /// Mean and sample standard deviation of the test accuracies.
    pub mean: f64,
    pub sd: f64,
    pub dev_mean: f64,
    pub dev_sd: f64,
    pub n_seeds: usize,
    pub fingerprint: String,
    /// Seeds whose run failed, with the error message.
    pub failures: Vec<(u64, String)>,
}

/// Arithmetic mean and sample (n − 1) standard deviation; sd is 0 for a
/// single value.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_results(mut per_seed: Vec<SeedResult>, failures: Vec<(u64, String)>, fingerprint: String) -> Self {
        per_seed.sort_by_key(|r| r.seed);
        let test: Vec<f64> = per_seed.iter().map(|r| r.test_accuracy).collect();
        let dev: Vec<f64> = per_seed.iter().map(|r| r.dev_accuracy).collect();
        let (mean, sd) = mean_sd(&test);
        let (dev_mean, dev_sd) = mean_sd(&dev);
        Self {
            n_seeds: per_seed.len(),
            per_seed,
            mean,
            sd,
            dev_mean,
            dev_sd,
            fingerprint,
            failures,
        }
    }

    /// Whether the stored aggregates agree with the per-seed values.
    pub fn is_consistent(&self) -> bool {
        let again = Self::from_results(self.per_seed.clone(), self.failures.clone(), self.fingerprint.clone());
        let close = |a: f64, b: f64| (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-12;
        again.n_seeds == self.n_seeds
            && close(again.mean, self.mean)
            && close(again.sd, self.sd)
            && close(again.dev_mean, self.dev_mean)
            && close(again.dev_sd, self.dev_sd)
    }

    /// `seed<TAB>dev_accuracy<TAB>test_accuracy` rows.
    pub fn seeds_tsv(&self) -> String {
        let mut out = String::from("seed\tdev_accuracy\ttest_accuracy\n");
        for r in &self.per_seed {
            let _ = writeln!(out, "{}\t{}\t{}", r.seed, r.dev_accuracy, r.test_accuracy);
        }
        out
    }

    pub fn from_seeds_tsv(text: &str, fingerprint: String) -> Result<Self> {
        let mut per_seed = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Data(format!("seeds table line {}: bad number {s:?}", n + 1)))
            };
            if f.len() != 3 {
                return Err(Error::Data(format!("seeds table line {}: expected 3 fields", n + 1)));
            }
            per_seed.push(SeedResult {
                seed: f[0]
                    .parse()
                    .map_err(|_| Error::Data(format!("seeds table line {}: bad seed", n + 1)))?,
                dev_accuracy: parse(f[1])?,
                test_accuracy: parse(f[2])?,
            });
        }
        if per_seed.is_empty() {
            return Err(Error::Data("seeds table has no rows".into()));
        }
        Ok(Self::from_results(per_seed, vec![], fingerprint))
    }
}

/// Run the full pipeline once per seed and aggregate. Failing seeds are
/// recorded rather than aborting the report; if every seed fails the first
/// error is returned.
pub fn multi_seed(
    config: &RunConfig,
    seeds: &[u64],
    source: &dyn DataSource,
    cache: &mut Stage1Cache,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::Config("multi_seed needs at least one seed".into()));
    }
    config.train_config()?;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for &seed in seeds {
        let outcome = config
            .clone()
            .with("seed", seed)
            .and_then(|c| run_pipeline(&c, source, Some(cache)));
        match outcome {
            Ok(run) => results.push(SeedResult {
                seed,
                dev_accuracy: run.dev_accuracy(),
                test_accuracy: run
                    .test_accuracy()
                    .ok_or_else(|| Error::Data("split has no test examples".into()))?,
            }),
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
                first_error.get_or_insert(e);
            }
        }
    }
    if results.is_empty() {
        return Err(first_error.expect("at least one seed ran"));
    }
    Ok(EvalReport::from_results(results, failures, config.fingerprint()))
}

/// One ablation axis: a config key and the values to sweep.
pub type Axis = (String, Vec<String>);

/// Parse `key=v1,v2,...` lines (blank lines and `#` comments ignored).
pub fn parse_axes(text: &str) -> Result<Vec<Axis>> {
    let mut axes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("axes line {}: expected key=v1,v2,...", n + 1)))?;
        let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
        axes.push((k.trim().to_string(), values));
    }
    Ok(axes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub point: Vec<(String, String)>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub keys: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Axis keys, then `mean sd n_seeds fingerprint` (test accuracy at the
    /// best-dev checkpoint), then `dev_mean dev_sd`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for k in &self.keys {
            let _ = write!(out, "{k}\t");
        }
        out.push_str("mean\tsd\tn_seeds\tfingerprint\tdev_mean\tdev_sd\n");
        for row in &self.rows {
            for (_, v) in &row.point {
                let _ = write!(out, "{v}\t");
            }
            let r = &row.report;
            let _ = writeln!(
                out,
                "{:.6}\t{:.6}\t{}\t{}\t{:.6}\t{:.6}",
                r.mean, r.sd, r.n_seeds, r.fingerprint, r.dev_mean, r.dev_sd
            );
        }
        out
    }
}

impl AblationTable {
    /// One row per (point, seed): axis keys, then `seed dev_accuracy test_accuracy`.
    pub fn seeds_tsv(&self) -> String {
        let mut out = String::new();
        for k in &self.keys {
            let _ = write!(out, "{k}\t");
        }
        out.push_str("seed\tdev_accuracy\ttest_accuracy\n");
        for row in &self.rows {
            for r in &row.report.per_seed {
                for (_, v) in &row.point {
                    let _ = write!(out, "{v}\t");
                }
                let _ = writeln!(out, "{}\t{}\t{}", r.seed, r.dev_accuracy, r.test_accuracy);
            }
        }
        out
    }
}

/// Every config in the Cartesian product of the axes, in row-major order
/// (the last axis varies fastest). All points are validated before
/// anything runs.
pub fn ablation_points(base: &RunConfig, axes: &[Axis]) -> Result<Vec<(Vec<(String, String)>, RunConfig)>> {
    for (k, values) in axes {
        if !RunConfig::is_key(k) {
            return Err(Error::Config(format!("unknown ablation key {k:?}")));
        }
        if values.is_empty() {
            return Err(Error::Config(format!("ablation axis {k:?} has no values")));
        }
    }
    let mut points = vec![(Vec::new(), base.clone())];
    for (k, values) in axes {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for (point, cfg) in &points {
            for v in values {
                let mut p: Vec<(String, String)> = point.clone();
                p.push((k.clone(), v.clone()));
                next.push((p, cfg.clone().with(k, v)?));
            }
        }
        points = next;
    }
    for (_, cfg) in &points {
        cfg.train_config()?;
    }
    Ok(points)
}

pub fn ablation_matrix(
    base: &RunConfig,
    axes: &[Axis],
    seeds: &[u64],
    source: &dyn DataSource,
    cache: &mut Stage1Cache,
) -> Result<AblationTable> {
    let points = ablation_points(base, axes)?;
    let mut rows = Vec::with_capacity(points.len());
    for (point, cfg) in points {
        log::info!("ablation point {point:?}");
        let report = multi_seed(&cfg, seeds, source, cache)?;
        rows.push(AblationRow { point, report });
    }
    Ok(AblationTable {
        keys: axes.iter().map(|(k, _)| k.clone()).collect(),
        rows,
    })
}

/// A named target test set for out-of-distribution evaluation.
#[derive(Clone, Debug)]
pub struct OodTarget {
    pub name: String,
    pub records: Vec<RawRecord>,
}

/// Parse `target_label=source_label` lines.
pub fn parse_label_map(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("label map line {l:?}: expected target=source")))
        })
        .collect()
}

/// Accuracy of a frozen source model on each target. Target texts are
/// encoded with the source vocabulary. Target labels are translated through
/// `mapping` when given; otherwise the target label names must be source
/// label names.
pub fn ood_eval(
    params: &ParamStore,
    vocab: &Vocab,
    source_labels: &LabelMap,
    max_len: usize,
    targets: &[OodTarget],
    mapping: Option<&BTreeMap<String, String>>,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        let target_labels = LabelMap::from_records(&t.records);
        let translate = |name: &str| -> Result<String> {
            match mapping {
                Some(m) => m.get(name).cloned().ok_or_else(|| {
                    Error::Config(format!("label map has no entry for target label {name:?} in {}", t.name))
                }),
                None => Ok(name.to_string()),
            }
        };
        if mapping.is_none() && target_labels.len() != source_labels.len() {
            return Err(Error::Config(format!(
                "target {} has {} classes but the source model has {}; supply a label map",
                t.name,
                target_labels.len(),
                source_labels.len()
            )));
        }
        let mut examples = Vec::with_capacity(t.records.len());
        for (i, r) in t.records.iter().enumerate() {
            let mapped = translate(&r.label_name)?;
            if source_labels.index(&mapped).is_none() {
                return Err(Error::Config(format!(
                    "target {} label {:?} has no counterpart among source labels {:?}",
                    t.name,
                    r.label_name,
                    source_labels.names()
                )));
            }
            let rec = RawRecord::new(mapped, r.text.clone());
            examples.push(encode(i, &rec, vocab, source_labels, max_len)?);
        }
        out.push((t.name.clone(), evaluate(params, &examples)?));
    }
    Ok(out)
}

/// Render a TSV table as space-aligned columns.
pub fn render_table(tsv: &str) -> String {
    let rows: Vec<Vec<&str>> = tsv.lines().filter(|l| !l.is_empty()).map(|l| l.split('\t').collect()).collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r.iter().enumerate().map(|(c, s)| format!("{s:<w$}", w = widths[c])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_head_model() -> ParamStore {
        let c = ModelConfig {
            vocab_size: 5,
            embed_dim: 2,
            num_blocks: 1,
            hidden_dim: 2,
            num_classes: 2,
            max_len: 8,
        };
        let mut p = ParamStore::init(&c, 0).unwrap();
        for v in p.get_mut(encoder::HEAD_WEIGHT).unwrap().data_mut() {
            *v = 0.0;
        }
        p
    }

    fn ex(id: usize, label: usize) -> Example {
        Example::new(id, vec![2, 3], label, 2).unwrap()
    }

    #[test]
    fn argmax_ties_to_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn uniform_model_on_balanced_set() {
        let p = zero_head_model();
        let acc = evaluate(&p, &[ex(0, 0), ex(1, 1), ex(2, 0), ex(3, 1)]).unwrap();
        assert_eq!(acc, 0.5);
        assert!(evaluate(&p, &[]).is_err());
    }

    #[test]
    fn hand_counted_accuracy() {
        // Uniform predictions always pick class 0: three of four labels are 0.
        let p = zero_head_model();
        assert_eq!(evaluate(&p, &[ex(0, 0), ex(1, 0), ex(2, 1), ex(3, 0)]).unwrap(), 0.75);
    }

    #[test]
    fn mean_sd_values() {
        assert_eq!(mean_sd(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn report_roundtrip_and_order_invariance() {
        let rs = vec![
            SeedResult { seed: 3, dev_accuracy: 0.5, test_accuracy: 0.25 },
            SeedResult { seed: 1, dev_accuracy: 0.75, test_accuracy: 0.5 },
        ];
        let mut rev = rs.clone();
        rev.reverse();
        let a = EvalReport::from_results(rs, vec![], "f".into());
        let b = EvalReport::from_results(rev, vec![], "f".into());
        assert_eq!(a, b);
        assert!(a.is_consistent());
        let back = EvalReport::from_seeds_tsv(&a.seeds_tsv(), "f".into()).unwrap();
        assert_eq!(back, a);
        let mut broken = a.clone();
        broken.mean += 0.1;
        assert!(!broken.is_consistent());
    }

    #[test]
    fn ablation_points_product_and_validation() {
        let base = RunConfig::default();
        let axes = parse_axes("selection_policy=random,easy_to_hard,hard_to_easy\nalpha=0.1,0.2\n").unwrap();
        let pts = ablation_points(&base, &axes).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1].1.get("alpha"), "0.2");
        assert_eq!(ablation_points(&base, &[]).unwrap().len(), 1);
        assert!(ablation_points(&base, &parse_axes("nope=1").unwrap()).is_err());
        assert!(ablation_points(&base, &parse_axes("alpha=0.1,7").unwrap()).is_err());
    }

    #[test]
    fn table_tsv_header() {
        let t = AblationTable {
            keys: vec!["alpha".into()],
            rows: vec![AblationRow {
                point: vec![("alpha".into(), "0.1".into())],
                report: EvalReport::from_results(
                    vec![SeedResult { seed: 1, dev_accuracy: 1.0, test_accuracy: 0.5 }],
                    vec![],
                    "abc".into(),
                ),
            }],
        };
        assert_eq!(t.to_tsv(), "alpha\tmean\tsd\tn_seeds\tfingerprint\tdev_mean\tdev_sd\n0.1\t0.500000\t0.000000\t1\tabc\t1.000000\t0.000000\n");
    }

    #[test]
    fn render_aligns_columns() {
        assert_eq!(render_table("a\tbbb\nccc\td\n"), "a    bbb\nccc  d\n");
    }

    #[test]
    fn ood_guards() {
        let p = zero_head_model();
        let recs = vec![RawRecord::new("x", "a b"), RawRecord::new("y", "b"), RawRecord::new("z", "a")];
        let vocab = Vocab::build(&recs, 1).unwrap();
        let source = LabelMap::from_names(vec!["neg".into(), "pos".into()]).unwrap();
        let target = OodTarget { name: "t".into(), records: recs.clone() };
        assert!(matches!(
            ood_eval(&p, &vocab, &source, 8, std::slice::from_ref(&target), None),
            Err(Error::Config(_))
        ));
        let map = parse_label_map("x=neg\ny=pos\nz=neg\n").unwrap();
        let acc = ood_eval(&p, &vocab, &source, 8, &[target], Some(&map)).unwrap();
        assert!((acc[0].1 - 2.0 / 3.0).abs() < 1e-12);
    }
}
