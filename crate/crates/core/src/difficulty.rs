//! Per-example learning difficulty and the median split into easy and hard pools.

use std::fmt::Write as _;

use crate::corpus::Example;
use crate::encoder::{self, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyScore {
    pub example_id: usize,
    /// `p[y] − max_{j≠y} p[j]`, in `[−1, 1]`; higher is easier.
    pub d: f64,
    /// The prediction the score was computed from. Doubles as the
    /// reference distribution for instance-specific smoothing.
    pub probs: Vec<f64>,
}

/// Margin between the gold-class probability and the best wrong class.
pub fn margin(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() || probs.len() < 2 {
        return Err(Error::Data(format!(
            "label {label} invalid for a distribution over {} classes",
            probs.len()
        )));
    }
    let best_wrong = probs
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label)
        .map(|(_, p)| *p)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(probs[label] - best_wrong)
}

pub fn score(example_id: usize, probs: Vec<f64>, label: usize) -> Result<DifficultyScore> {
    let d = margin(&probs, label)?;
    Ok(DifficultyScore { example_id, d, probs })
}

pub fn score_all(params: &ParamStore, examples: &[Example]) -> Result<Vec<DifficultyScore>> {
    examples
        .iter()
        .map(|e| {
            let trace = encoder::forward(params, e)?;
            let probs = trace.probs.data().iter().map(|p| *p as f64).collect();
            score(e.id, probs, e.label)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyPartition {
    /// Ids with `d >= threshold`, ascending.
    pub easy: Vec<usize>,
    /// Ids with `d < threshold`, ascending.
    pub hard: Vec<usize>,
    pub threshold: f64,
}

impl DifficultyPartition {
    pub fn contains_easy(&self, id: usize) -> bool {
        self.easy.binary_search(&id).is_ok()
    }
}

/// Median of the values; mean of the central pair for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Data("median of an empty list".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN difficulty score".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Split at the median. Scores exactly equal to the median go to the easy
/// pool only.
pub fn partition_by_median(scores: &[DifficultyScore]) -> Result<DifficultyPartition> {
    if scores.len() < 2 {
        return Err(Error::Data(format!(
            "need at least two difficulty scores to partition, got {}",
            scores.len()
        )));
    }
    let ds: Vec<f64> = scores.iter().map(|s| s.d).collect();
    let threshold = median(&ds)?;
    let (mut easy, mut hard): (Vec<usize>, Vec<usize>) = (vec![], vec![]);
    for s in scores {
        if s.d >= threshold {
            easy.push(s.example_id);
        } else {
            hard.push(s.example_id);
        }
    }
    easy.sort_unstable();
    hard.sort_unstable();
    Ok(DifficultyPartition { easy, hard, threshold })
}

/// `example_id<TAB>d<TAB>p_0<TAB>p_1...` rows with a header.
pub fn scores_to_tsv(scores: &[DifficultyScore]) -> String {
    let classes = scores.first().map_or(0, |s| s.probs.len());
    let mut out = String::from("example_id\td");
    for c in 0..classes {
        let _ = write!(out, "\tp{c}");
    }
    out.push('\n');
    for s in scores {
        let _ = write!(out, "{}\t{}", s.example_id, s.d);
        for p in &s.probs {
            let _ = write!(out, "\t{p}");
        }
        out.push('\n');
    }
    out
}
