//! Dataset ingestion, vocabulary, tokenization and few-shot sampling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "[pad]";
pub const UNK_TOKEN: &str = "[unk]";
/// Separator inserted between the two texts of a sentence-pair row.
pub const SEP_TOKEN: &str = "[sep]";

pub const DEFAULT_MAX_LEN: usize = 128;
pub const DEFAULT_DEV_MAX: usize = 500;

/// Fraction of malformed rows above which loading fails.
const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub text: String,
    pub label_name: String,
}

impl RawRecord {
    pub fn new(label_name: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label_name: label_name.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Tsv,
    Jsonl,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Format::Tsv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::Config(format!("unknown data format {other:?} (tsv|jsonl)"))),
        }
    }
}

/// Records plus the number of rows that were skipped as malformed.
#[derive(Clone, Debug)]
pub struct LoadedRecords {
    pub records: Vec<RawRecord>,
    pub malformed: usize,
}

pub fn load_dataset(path: &Path, format: Format) -> Result<LoadedRecords> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let loaded = parse_records(&text, format)?;
    if loaded.malformed > 0 {
        log::warn!("{}: skipped {} malformed rows", path.display(), loaded.malformed);
    }
    Ok(loaded)
}

/// Parse TSV (`label<TAB>text[<TAB>text_b]`) or JSON Lines
/// (`{"label": .., "text": ..}`) content. Blank lines are ignored.
pub fn parse_records(content: &str, format: Format) -> Result<LoadedRecords> {
    let mut records = Vec::new();
    let mut malformed = 0usize;
    for line in content.lines() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            Format::Tsv => parse_tsv_row(line),
            Format::Jsonl => parse_jsonl_row(line),
        };
        match parsed {
            Some(r) => records.push(r),
            None => malformed += 1,
        }
    }
    let rows = records.len() + malformed;
    if rows == 0 {
        return Err(Error::Data("no records".into()));
    }
    if malformed as f64 > MAX_MALFORMED_FRACTION * rows as f64 {
        return Err(Error::Data(format!(
            "{malformed} of {rows} rows are malformed (more than 10%)"
        )));
    }
    if records.is_empty() {
        return Err(Error::Data("no records".into()));
    }
    Ok(LoadedRecords { records, malformed })
}

fn parse_tsv_row(line: &str) -> Option<RawRecord> {
    let mut fields = line.split('\t');
    let label = fields.next()?.trim();
    let texts: Vec<&str> = fields.map(str::trim).collect();
    if label.is_empty() || texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
        return None;
    }
    let sep = format!(" {SEP_TOKEN} ");
    Some(RawRecord::new(label, texts.join(&sep)))
}

fn parse_jsonl_row(line: &str) -> Option<RawRecord> {
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    let label = value.get("label")?.as_str()?.trim();
    let text = value.get("text")?.as_str()?.trim();
    if label.is_empty() || text.is_empty() {
        return None;
    }
    Some(RawRecord::new(label, text))
}

/// Lowercase, then split on whitespace and punctuation. Punctuation marks
/// are kept as single-character tokens; the pair separator is kept whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        if word.eq_ignore_ascii_case(SEP_TOKEN) {
            tokens.push(SEP_TOKEN.to_string());
            continue;
        }
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                current.extend(ch.to_lowercase());
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_lowercase().collect());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Tokens with corpus frequency `>= min_freq`, ordered by descending
    /// frequency and then lexicographically, get ids from 2 upward.
    pub fn build(records: &[RawRecord], min_freq: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from zero records".into()));
        }
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for r in records {
            for tok in tokenize(&r.text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { ids, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Data("vocabulary file must start with [pad] and [unk]".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(Error::Data("vocabulary file has duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Label name to class index. Indices follow sorted label names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn from_records(records: &[RawRecord]) -> Self {
        let mut names: Vec<String> = records.iter().map(|r| r.label_name.clone()).collect();
        names.sort();
        names.dedup();
        Self { names }
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Data("duplicate label names".into()));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One encoded, right-padded labelled instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Identity of the source record.
    pub id: usize,
    pub token_ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub label: usize,
    pub one_hot: Vec<f64>,
}

impl Example {
    pub fn new(id: usize, token_ids: Vec<usize>, label: usize, num_classes: usize) -> Result<Self> {
        if label >= num_classes {
            return Err(Error::Data(format!("label {label} outside {num_classes} classes")));
        }
        let real = token_ids.iter().take_while(|&&t| t != PAD).count();
        if token_ids[real..].iter().any(|&t| t != PAD) {
            return Err(Error::Data("padding must be a suffix".into()));
        }
        let mask = (0..token_ids.len()).map(|t| u8::from(t < real)).collect();
        let mut one_hot = vec![0.0; num_classes];
        one_hot[label] = 1.0;
        Ok(Self {
            id,
            token_ids,
            mask,
            label,
            one_hot,
        })
    }

    /// Number of non-pad tokens (they always form a prefix).
    pub fn len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.one_hot.len()
    }

    pub fn mask_weights<R: crate::tensor::Real>(&self) -> Vec<R> {
        self.mask.iter().map(|&m| if m == 1 { R::one() } else { R::zero() }).collect()
    }

    /// Re-pad (or cut trailing pads) to `len` positions.
    pub fn padded_to(&self, len: usize) -> Example {
        let mut e = self.clone();
        e.token_ids.resize(len, PAD);
        e.mask.resize(len, 0);
        e
    }
}

pub fn encode(
    id: usize,
    record: &RawRecord,
    vocab: &Vocab,
    labels: &LabelMap,
    max_len: usize,
) -> Result<Example> {
    let label = labels
        .index(&record.label_name)
        .ok_or_else(|| Error::Data(format!("unknown label {:?}", record.label_name)))?;
    let mut ids: Vec<usize> = tokenize(&record.text)
        .iter()
        .take(max_len)
        .map(|t| vocab.id(t))
        .collect();
    ids.resize(max_len, PAD);
    Example::new(id, ids, label, labels.len())
}

/// Space-joined tokens of the non-pad prefix.
pub fn decode(example: &Example, vocab: &Vocab) -> String {
    example.token_ids[..example.len()]
        .iter()
        .map(|&id| vocab.token(id).unwrap_or(UNK_TOKEN))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Record indices for a few-shot experiment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    pub shots_per_class: usize,
    pub seed: u64,
}

/// Draw `shots_per_class` training records per label uniformly without
/// replacement, then a dev set of `min(500, round(dev_fraction · rest))`
/// from the remainder; the rest is the test set.
pub fn sample_few_shot(
    records: &[RawRecord],
    shots_per_class: usize,
    dev_fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::Config(format!("dev_fraction {dev_fraction} outside (0, 1)")));
    }
    if shots_per_class == 0 {
        return Err(Error::Config("shots_per_class must be at least 1".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.label_name.as_str()).or_default().push(i);
    }
    if by_class.is_empty() {
        return Err(Error::Data("no records to sample from".into()));
    }
    let mut train = Vec::new();
    for (class_idx, (name, ids)) in by_class.iter().enumerate() {
        if ids.len() < shots_per_class {
            return Err(Error::Data(format!(
                "class {name:?} has {} records, fewer than {shots_per_class} shots",
                ids.len()
            )));
        }
        let mut ids = ids.clone();
        let mut r = rng::stream(seed, &[rng::tag::FEW_SHOT, class_idx as u64]);
        ids.shuffle(&mut r);
        train.extend_from_slice(&ids[..shots_per_class]);
    }
    train.sort_unstable();
    let mut rest: Vec<usize> = (0..records.len()).filter(|i| train.binary_search(i).is_err()).collect();
    let mut r = rng::stream(seed, &[rng::tag::FEW_SHOT, u64::MAX]);
    rest.shuffle(&mut r);
    let dev_len = ((dev_fraction * rest.len() as f64).round() as usize).min(DEFAULT_DEV_MAX);
    let mut dev = rest[..dev_len].to_vec();
    let mut test = rest[dev_len..].to_vec();
    dev.sort_unstable();
    test.sort_unstable();
    Ok(SplitManifest {
        train,
        dev,
        test,
        shots_per_class,
        seed,
    })
}

impl SplitManifest {
    /// Replace the test set with an official held-out set stored after the
    /// first `pool_len` records; the former test records are dropped.
    pub fn with_official_test(mut self, pool_len: usize, test_len: usize) -> Self {
        self.test = (pool_len..pool_len + test_len).collect();
        self
    }

    /// `subset<TAB>id` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("subset\tid\n");
        for (name, ids) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            for id in ids {
                out.push_str(&format!("{name}\t{id}\n"));
            }
        }
        out
    }

    pub fn from_tsv(text: &str, shots_per_class: usize, seed: u64) -> Result<Self> {
        let mut m = SplitManifest {
            train: vec![],
            dev: vec![],
            test: vec![],
            shots_per_class,
            seed,
        };
        for (n, line) in text.lines().enumerate().skip(1) {
            let (subset, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("split manifest line {}: expected subset<TAB>id", n + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Data(format!("split manifest line {}: bad id {id:?}", n + 1)))?;
            match subset {
                "train" => m.train.push(id),
                "dev" => m.dev.push(id),
                "test" => m.test.push(id),
                other => return Err(Error::Data(format!("unknown subset {other:?}"))),
            }
        }
        Ok(m)
    }

    /// Encode the referenced records; ids index into `records`.
    pub fn materialize(
        &self,
        records: &[RawRecord],
        vocab: &Vocab,
        labels: &LabelMap,
        max_len: usize,
    ) -> Result<FewShotSplit> {
        let enc = |ids: &[usize]| -> Result<Vec<Example>> {
            ids.iter()
                .map(|&i| {
                    let r = records
                        .get(i)
                        .ok_or_else(|| Error::Data(format!("record id {i} out of range")))?;
                    encode(i, r, vocab, labels, max_len)
                })
                .collect()
        };
        Ok(FewShotSplit {
            train: enc(&self.train)?,
            dev: enc(&self.dev)?,
            test: enc(&self.test)?,
            shots_per_class: self.shots_per_class,
            seed: self.seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotSplit {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub shots_per_class: usize,
    pub seed: u64,
}
