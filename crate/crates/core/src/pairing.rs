//! Most-similar partner search inside a difficulty pool.

use std::collections::BTreeMap;

use crate::corpus::Example;
use crate::encoder::{self, ParamStore};
use crate::error::{Error, Result};

/// Cached sentence representations keyed by example id.
pub type ReprCache = BTreeMap<usize, Vec<f32>>;

#[derive(Clone, Debug, PartialEq)]
pub struct PairAssignment {
    pub anchor_id: usize,
    pub partner_id: usize,
    pub similarity: f64,
}

/// Pooled sentence vector of the example.
pub fn represent(params: &ParamStore, example: &Example) -> Result<Vec<f32>> {
    Ok(encoder::forward(params, example)?.pooled.into_data())
}

pub fn represent_all(params: &ParamStore, examples: &[Example]) -> Result<ReprCache> {
    examples.iter().map(|e| Ok((e.id, represent(params, e)?))).collect()
}

/// Cosine similarity clamped to [−1, 1]; 0 when either vector has zero norm.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine", format!("{} vs {}", u.len(), v.len())));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (*a as f64, *b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Highest-cosine member of `subset` other than the anchor; ties go to the
/// smallest id.
pub fn nearest_partner(anchor_id: usize, subset: &[usize], reprs: &ReprCache) -> Result<PairAssignment> {
    if !subset.contains(&anchor_id) {
        return Err(Error::Data(format!("anchor {anchor_id} is not in the subset")));
    }
    let anchor = reprs
        .get(&anchor_id)
        .ok_or_else(|| Error::Data(format!("no representation for {anchor_id}")))?;
    let mut best: Option<(usize, f64)> = None;
    for &id in subset {
        if id == anchor_id {
            continue;
        }
        let v = reprs
            .get(&id)
            .ok_or_else(|| Error::Data(format!("no representation for {id}")))?;
        let sim = cosine(anchor, v)?;
        best = match best {
            Some((bid, bsim)) if bsim > sim || (bsim == sim && bid < id) => Some((bid, bsim)),
            _ => Some((id, sim)),
        };
    }
    let (partner_id, similarity) =
        best.ok_or_else(|| Error::NoPartner(format!("subset of anchor {anchor_id} has a single member")))?;
    Ok(PairAssignment {
        anchor_id,
        partner_id,
        similarity,
    })
}

/// One assignment per subset member, in subset order.
pub fn pair_subset(subset: &[usize], reprs: &ReprCache) -> Result<Vec<PairAssignment>> {
    subset.iter().map(|&a| nearest_partner(a, subset, reprs)).collect()
}
