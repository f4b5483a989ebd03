//! Mixed pseudo-samples: interpolation of token embeddings, of hidden
//! states at a chosen block, or replacement of a token span, each paired
//! with the interpolated (already smoothed) targets.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::corpus::Example;
use crate::encoder::{self, ForwardTrace, ParamStore, ParamVars, TapeTrace};
use crate::error::{Error, Result};
use crate::smoothing::SoftLabel;
use crate::tensor::{Fault, Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaDist {
    /// `max(x, 1−x)` with `x ~ Beta(a, a)`, so the anchor always dominates.
    Beta(f64),
    Fixed(f64),
}

impl Default for LambdaDist {
    fn default() -> Self {
        LambdaDist::Beta(0.2)
    }
}

impl LambdaDist {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LambdaDist::Beta(a) if !(a > 0.0 && a.is_finite()) => {
                Err(Error::Config(format!("beta parameter {a} must be positive")))
            }
            LambdaDist::Fixed(v) if !(0.0..=1.0).contains(&v) => {
                Err(Error::Config(format!("fixed lambda {v} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for LambdaDist {
    type Err = Error;

    /// `beta:<a>` or `fixed:<v>`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, v) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("lambda distribution {s:?}: expected beta:<a> or fixed:<v>")))?;
        let v: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("lambda distribution {s:?}: bad number")))?;
        let d = match kind {
            "beta" => LambdaDist::Beta(v),
            "fixed" => LambdaDist::Fixed(v),
            _ => return Err(Error::Config(format!("unknown lambda distribution {kind:?}"))),
        };
        d.validate()?;
        Ok(d)
    }
}

impl std::fmt::Display for LambdaDist {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LambdaDist::Beta(a) => write!(f, "beta:{a}"),
            LambdaDist::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

pub fn sample_lambda<G: Rng + ?Sized>(rng: &mut G, dist: LambdaDist) -> Result<f64> {
    dist.validate()?;
    match dist {
        LambdaDist::Fixed(v) => Ok(v),
        LambdaDist::Beta(a) => {
            let beta = Beta::new(a, a).map_err(|e| Error::Config(format!("beta({a}): {e}")))?;
            let x: f64 = beta.sample(rng);
            Ok(x.max(1.0 - x))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixVariant {
    /// No mixing; originals with their (smoothed) targets.
    None,
    Embed,
    Hidden,
    Span,
}

impl std::str::FromStr for MixVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MixVariant::None),
            "embed" => Ok(MixVariant::Embed),
            "hidden" => Ok(MixVariant::Hidden),
            "span" => Ok(MixVariant::Span),
            other => Err(Error::Config(format!("unknown mix variant {other:?} (none|embed|hidden|span)"))),
        }
    }
}

impl std::fmt::Display for MixVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MixVariant::None => "none",
            MixVariant::Embed => "embed",
            MixVariant::Hidden => "hidden",
            MixVariant::Span => "span",
        })
    }
}

/// An example together with its (possibly smoothed) target.
#[derive(Clone, Copy, Debug)]
pub struct Labeled<'a> {
    pub example: &'a Example,
    pub target: &'a SoftLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MixedInput {
    Original(Example),
    /// Blend of two inputs after `layer` blocks (0 = token embeddings).
    Interpolated {
        anchor: Example,
        partner: Example,
        layer: usize,
    },
    /// A new token sequence.
    Tokens(Example),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedItem {
    pub anchor_id: usize,
    pub partner_id: usize,
    pub input: MixedInput,
    pub soft_label: SoftLabel,
    /// Weight of the anchor actually applied to inputs and targets.
    pub lambda: f64,
}

impl MixedItem {
    pub fn original(item: Labeled<'_>) -> Self {
        Self {
            anchor_id: item.example.id,
            partner_id: item.example.id,
            input: MixedInput::Original(item.example.clone()),
            soft_label: item.target.clone(),
            lambda: 1.0,
        }
    }

    pub fn forward_on_tape<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &ParamStore<R>,
        pv: &ParamVars,
    ) -> Result<TapeTrace> {
        match &self.input {
            MixedInput::Original(e) | MixedInput::Tokens(e) => encoder::forward_example_on_tape(tape, params, pv, e),
            MixedInput::Interpolated { anchor, partner, layer } => {
                encoder::forward_mixed_on_tape(tape, params, pv, anchor, partner, self.lambda, *layer)
            }
        }
    }

    pub fn forward<R: Real>(&self, params: &ParamStore<R>) -> Result<ForwardTrace<R>> {
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, params);
        let trace = self.forward_on_tape(&mut tape, params, &pv)?;
        Ok(trace.values(&tape))
    }

    /// Materialized mixed embeddings and mask weights for layer-0 blends,
    /// ready for [`encoder::forward_from_embeddings`].
    pub fn mixed_embeddings<R: Real>(&self, params: &ParamStore<R>) -> Option<(Tensor<R>, Vec<R>)> {
        let MixedInput::Interpolated { anchor, partner, layer: 0 } = &self.input else {
            return None;
        };
        let len = anchor.token_ids.len().max(partner.token_ids.len());
        let lam = R::of(self.lambda);
        let ea = encoder::lookup(params, anchor, len);
        let eb = encoder::lookup(params, partner, len);
        let data = ea
            .data()
            .iter()
            .zip(eb.data())
            .map(|(a, b)| lam * *a + (R::one() - lam) * *b)
            .collect();
        let emb = Tensor::new(ea.shape().to_vec(), data).ok()?;
        let wa: Vec<R> = anchor.padded_to(len).mask_weights();
        let wb: Vec<R> = partner.padded_to(len).mask_weights();
        let w = wa.iter().zip(&wb).map(|(a, b)| lam * *a + (R::one() - lam) * *b).collect();
        Some((emb, w))
    }
}

/// `λ·a + (1−λ)·b`.
pub fn mix_labels(a: &SoftLabel, b: &SoftLabel, lambda: f64) -> Result<SoftLabel> {
    if a.len() != b.len() {
        return Err(Error::shape("mix_labels", format!("{} vs {} classes", a.len(), b.len())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    SoftLabel::new(
        a.probs()
            .iter()
            .zip(b.probs())
            .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
            .collect(),
    )
}

/// Interpolate token embeddings (and masks) of the two inputs.
pub fn mix_embed(anchor: Labeled<'_>, partner: Labeled<'_>, lambda: f64) -> Result<MixedItem> {
    interpolate(anchor, partner, lambda, 0)
}

/// Interpolate hidden states after block `layer`; `layer` must not exceed
/// `num_blocks`.
pub fn mix_hidden(
    anchor: Labeled<'_>,
    partner: Labeled<'_>,
    lambda: f64,
    layer: usize,
    num_blocks: usize,
) -> Result<MixedItem> {
    if layer > num_blocks {
        return Err(Error::Config(format!("mix layer {layer} exceeds {num_blocks} blocks")));
    }
    interpolate(anchor, partner, lambda, layer)
}

fn interpolate(anchor: Labeled<'_>, partner: Labeled<'_>, lambda: f64, layer: usize) -> Result<MixedItem> {
    for e in [anchor.example, partner.example] {
        if e.is_empty() {
            return Err(Error::Data(format!("example {} has no real tokens", e.id)));
        }
    }
    Ok(MixedItem {
        anchor_id: anchor.example.id,
        partner_id: partner.example.id,
        input: MixedInput::Interpolated {
            anchor: anchor.example.clone(),
            partner: partner.example.clone(),
            layer,
        },
        soft_label: mix_labels(anchor.target, partner.target, lambda)?,
        lambda,
    })
}

/// Gradient-norm saliency of each position: the L2 norm of the gradient of
/// the gold-label cross-entropy with respect to that position's embedding.
/// Pad positions score −∞.
pub fn saliency(params: &ParamStore, example: &Example) -> Result<Vec<f64>> {
    saliency_with_fault(params, example, Fault::None)
}

pub fn saliency_with_fault(params: &ParamStore, example: &Example, fault: Fault) -> Result<Vec<f64>> {
    let len = example.len();
    if len == 0 {
        return Err(Error::Data(format!("example {} has no real tokens", example.id)));
    }
    let mut tape = Tape::<f32>::with_fault(fault);
    let pv = ParamVars::register(&mut tape, params);
    let emb = encoder::embed_on_tape(&mut tape, params, &example.token_ids[..len])?;
    let trace = encoder::forward_embeddings_on_tape(&mut tape, &pv, emb, &vec![1.0; len])?;
    let target: Vec<f32> = example.one_hot.iter().map(|v| *v as f32).collect();
    let loss = tape.soft_cross_entropy(&[trace.probs], &[target])?;
    let grads = tape.backward(loss)?;
    let g = grads
        .of(emb)
        .ok_or_else(|| Error::Tape("no gradient reached the embeddings".into()))?;
    let mut scores: Vec<f64> = (0..len)
        .map(|t| g.row(t).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    scores.resize(example.token_ids.len().max(len), f64::NEG_INFINITY);
    Ok(scores)
}

/// Start of the contiguous window of `width` real positions with the
/// smallest (or largest) summed score; ties go to the leftmost window.
fn best_window(scores: &[f64], len: usize, width: usize, largest: bool) -> usize {
    let mut best = 0;
    let mut best_sum: f64 = scores[..width].iter().sum();
    for start in 1..=len - width {
        let s: f64 = scores[start..start + width].iter().sum();
        if (largest && s > best_sum) || (!largest && s < best_sum) {
            best = start;
            best_sum = s;
        }
    }
    best
}

/// Number of anchor tokens replaced for a requested anchor weight.
pub fn span_length(anchor_len: usize, partner_len: usize, lambda_target: f64) -> usize {
    let raw = ((1.0 - lambda_target) * anchor_len as f64).round() as usize;
    raw.max(1).min(anchor_len).min(partner_len)
}

/// Replace the least salient span of the anchor with the equally long most
/// salient span of the partner. The realized weight `1 − span/len_anchor`
/// is used for the targets. `λ_target = 1` returns the anchor unchanged.
pub fn mix_span(params: &ParamStore, anchor: Labeled<'_>, partner: Labeled<'_>, lambda_target: f64) -> Result<MixedItem> {
    if !(0.0..=1.0).contains(&lambda_target) {
        return Err(Error::Config(format!("lambda {lambda_target} outside [0, 1]")));
    }
    let (a, b) = (anchor.example, partner.example);
    let (len_a, len_b) = (a.len(), b.len());
    if len_a == 0 || len_b == 0 {
        return Err(Error::Data("span mixing needs at least one real token in both inputs".into()));
    }
    if lambda_target >= 1.0 {
        return Ok(MixedItem {
            anchor_id: a.id,
            partner_id: b.id,
            input: MixedInput::Tokens(a.clone()),
            soft_label: mix_labels(anchor.target, partner.target, 1.0)?,
            lambda: 1.0,
        });
    }
    let width = span_length(len_a, len_b, lambda_target);
    let sal_a = saliency(params, a)?;
    let sal_b = saliency(params, b)?;
    let dst = best_window(&sal_a, len_a, width, false);
    let src = best_window(&sal_b, len_b, width, true);
    let mut mixed = a.clone();
    mixed.token_ids[dst..dst + width].copy_from_slice(&b.token_ids[src..src + width]);
    let lambda = 1.0 - width as f64 / len_a as f64;
    Ok(MixedItem {
        anchor_id: a.id,
        partner_id: b.id,
        input: MixedInput::Tokens(mixed),
        soft_label: mix_labels(anchor.target, partner.target, lambda)?,
        lambda,
    })
}

/// Build one mixed item for the requested variant.
pub fn mix(
    variant: MixVariant,
    params: &ParamStore,
    anchor: Labeled<'_>,
    partner: Labeled<'_>,
    lambda: f64,
    layer: usize,
) -> Result<MixedItem> {
    match variant {
        MixVariant::None => Ok(MixedItem::original(anchor)),
        MixVariant::Embed => mix_embed(anchor, partner, lambda),
        MixVariant::Hidden => mix_hidden(anchor, partner, lambda, layer, params.num_blocks()),
        MixVariant::Span => mix_span(params, anchor, partner, lambda),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PAD;
    use crate::encoder::ModelConfig;
    use crate::rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            embed_dim: 8,
            num_blocks: 2,
            hidden_dim: 8,
            num_classes: 2,
            max_len: 12,
        }
    }

    fn ex(id: usize, ids: &[usize], label: usize) -> Example {
        let mut t = ids.to_vec();
        t.resize(12, PAD);
        Example::new(id, t, label, 2).unwrap()
    }

    fn hard(e: &Example) -> SoftLabel {
        SoftLabel::new(e.one_hot.clone()).unwrap()
    }

    #[test]
    fn lambda_dist_parsing() {
        assert_eq!("beta:0.2".parse::<LambdaDist>().unwrap(), LambdaDist::Beta(0.2));
        assert_eq!("fixed:1".parse::<LambdaDist>().unwrap(), LambdaDist::Fixed(1.0));
        assert!("beta:0".parse::<LambdaDist>().is_err());
        assert!("fixed:1.5".parse::<LambdaDist>().is_err());
        assert!("gamma:1".parse::<LambdaDist>().is_err());
    }

    #[test]
    fn fixed_and_folded_beta_draws() {
        let mut r = rng::stream(1, &[]);
        assert_eq!(sample_lambda(&mut r, LambdaDist::Fixed(0.5)).unwrap(), 0.5);
        for _ in 0..2000 {
            let l = sample_lambda(&mut r, LambdaDist::Beta(0.2)).unwrap();
            assert!((0.5..=1.0).contains(&l));
        }
    }

    #[test]
    fn embed_label_is_interpolated() {
        let a = ex(0, &[3, 4], 0);
        let b = ex(1, &[5], 1);
        let item = mix_embed(
            Labeled { example: &a, target: &hard(&a) },
            Labeled { example: &b, target: &hard(&b) },
            0.7,
        )
        .unwrap();
        let y = item.soft_label.probs();
        assert!((y[0] - 0.7).abs() < 1e-12 && (y[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn mixed_embeddings_match_layer_zero_forward() {
        let p = ParamStore::init(&cfg(), 3).unwrap();
        let a = ex(0, &[3, 4, 5], 0);
        let b = ex(1, &[6, 7, 8, 9, 10], 1);
        let item = mix_embed(
            Labeled { example: &a, target: &hard(&a) },
            Labeled { example: &b, target: &hard(&b) },
            0.6,
        )
        .unwrap();
        let (emb, w) = item.mixed_embeddings(&p).unwrap();
        let direct = encoder::forward_from_embeddings(&p, &emb, &w).unwrap();
        let via = item.forward(&p).unwrap();
        for (x, y) in direct.probs.data().iter().zip(via.probs.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn hidden_mix_layer_bounds() {
        let a = ex(0, &[3], 0);
        let t = hard(&a);
        let l = Labeled { example: &a, target: &t };
        assert!(mix_hidden(l, l, 0.5, 3, 2).is_err());
        assert!(mix_hidden(l, l, 0.5, 2, 2).is_ok());
    }

    #[test]
    fn hidden_mix_distinct_lambdas_differ() {
        let p = ParamStore::init(&cfg(), 4).unwrap();
        let a = ex(0, &[3, 4, 5], 0);
        let b = ex(1, &[11, 12], 1);
        let (ta, tb) = (hard(&a), hard(&b));
        let f = |lam| {
            mix_hidden(Labeled { example: &a, target: &ta }, Labeled { example: &b, target: &tb }, lam, 1, 2)
                .unwrap()
                .forward(&p)
                .unwrap()
                .pooled
        };
        assert_ne!(f(0.5), f(0.9));
    }

    #[test]
    fn span_length_and_realized_lambda() {
        assert_eq!(span_length(10, 10, 0.8), 2);
        assert_eq!(span_length(10, 10, 0.99), 1);
        assert_eq!(span_length(1, 4, 0.7), 1);
        assert_eq!(span_length(10, 3, 0.2), 3);

        let p = ParamStore::init(&cfg(), 5).unwrap();
        let a = ex(0, &[2, 3, 4, 5, 6, 7, 8, 9, 10, 11], 0);
        let b = ex(1, &[12, 13, 14, 15, 16, 17, 18, 19, 12, 13], 1);
        let (ta, tb) = (hard(&a), hard(&b));
        let item = mix_span(&p, Labeled { example: &a, target: &ta }, Labeled { example: &b, target: &tb }, 0.8).unwrap();
        assert!((item.lambda - 0.8).abs() < 1e-12);
        let MixedInput::Tokens(m) = &item.input else { panic!() };
        assert_eq!(m.len(), 10);
        let changed = m.token_ids.iter().zip(&a.token_ids).filter(|(x, y)| x != y).count();
        assert_eq!(changed, 2);
        assert!((item.soft_label.probs()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn span_endpoint_returns_anchor() {
        let p = ParamStore::init(&cfg(), 5).unwrap();
        let a = ex(0, &[2, 3, 4], 0);
        let b = ex(1, &[12, 13], 1);
        let (ta, tb) = (hard(&a), hard(&b));
        let item = mix_span(&p, Labeled { example: &a, target: &ta }, Labeled { example: &b, target: &tb }, 1.0).unwrap();
        assert_eq!(item.input, MixedInput::Tokens(a.clone()));
        assert_eq!(item.lambda, 1.0);
        assert_eq!(item.soft_label.probs(), ta.probs());
    }

    #[test]
    fn single_token_anchor_is_fully_replaced() {
        let p = ParamStore::init(&cfg(), 5).unwrap();
        let a = ex(0, &[2], 0);
        let b = ex(1, &[12, 13], 1);
        let (ta, tb) = (hard(&a), hard(&b));
        let item = mix_span(&p, Labeled { example: &a, target: &ta }, Labeled { example: &b, target: &tb }, 0.9).unwrap();
        assert_eq!(item.lambda, 0.0);
        assert_eq!(item.soft_label.probs(), tb.probs());
    }

    #[test]
    fn saliency_marks_pads() {
        let p = ParamStore::init(&cfg(), 6).unwrap();
        let s = saliency(&p, &ex(0, &[3, 4, 5], 1)).unwrap();
        assert_eq!(s.len(), 12);
        assert!(s[..3].iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(s[3..].iter().all(|v| *v == f64::NEG_INFINITY));
    }

    #[test]
    fn repeated_tokens_get_equal_saliency() {
        // Every block is position-wise and pooling is a mean, so identical
        // tokens receive identical gradients.
        let p = ParamStore::init(&cfg(), 7).unwrap();
        let s = saliency(&p, &ex(0, &[4, 9, 4], 0)).unwrap();
        assert_eq!(s[0], s[2]);
    }
}
