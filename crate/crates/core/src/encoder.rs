//! Small residual text classifier.
//!
//! `embeddings → L × [h + tanh(h·W + b)] → masked mean-pool → linear → softmax`
//!
//! Every block is position-wise, so the hidden state of each token at each
//! layer is available for interpolation, and pad positions never reach the
//! pooled vector. The embedding row of the pad token is kept at zero.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::corpus::{Example, PAD};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const EMBEDDING: &str = "embedding";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

pub fn block_weight(layer: usize) -> String {
    format!("block{layer}.weight")
}

pub fn block_bias(layer: usize) -> String {
    format!("block{layer}.bias")
}

const INIT_RANGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            num_blocks: 2,
            hidden_dim: 64,
            num_classes,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("hidden_dim", self.hidden_dim),
            ("num_classes", self.num_classes),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.embed_dim != self.hidden_dim {
            return Err(Error::Config(format!(
                "embed_dim ({}) must equal hidden_dim ({}) for residual blocks",
                self.embed_dim, self.hidden_dim
            )));
        }
        Ok(())
    }

    /// Expected tensor shapes by name.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut s = BTreeMap::new();
        s.insert(EMBEDDING.to_string(), vec![self.vocab_size, self.embed_dim]);
        for l in 1..=self.num_blocks {
            s.insert(block_weight(l), vec![self.hidden_dim, self.hidden_dim]);
            s.insert(block_bias(l), vec![self.hidden_dim]);
        }
        s.insert(HEAD_WEIGHT.to_string(), vec![self.hidden_dim, self.num_classes]);
        s.insert(HEAD_BIAS.to_string(), vec![self.num_classes]);
        s
    }
}

/// Named parameter tensors of the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<R = f32> {
    tensors: BTreeMap<String, Tensor<R>>,
    num_blocks: usize,
}

impl ParamStore<f32> {
    /// Embeddings and block/head weights uniform in [−0.1, 0.1], biases
    /// zero, pad embedding row zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| r.random_range(-INIT_RANGE..=INIT_RANGE) as f32).collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        let mut store = Self {
            tensors,
            num_blocks: config.num_blocks,
        };
        store.zero_pad_row();
        Ok(store)
    }
}

impl<R: Real> ParamStore<R> {
    pub fn from_tensors(config: &ModelConfig, tensors: BTreeMap<String, Tensor<R>>) -> Result<Self> {
        config.validate()?;
        let expected = config.shapes();
        if expected.len() != tensors.len() || expected.keys().any(|k| !tensors.contains_key(k)) {
            return Err(Error::shape(
                "params",
                format!(
                    "expected tensors {:?}, got {:?}",
                    expected.keys().collect::<Vec<_>>(),
                    tensors.keys().collect::<Vec<_>>()
                ),
            ));
        }
        for (name, shape) in &expected {
            if tensors[name].shape() != shape.as_slice() {
                return Err(Error::shape(
                    "params",
                    format!("{name}: expected {shape:?}, got {:?}", tensors[name].shape()),
                ));
            }
        }
        Ok(Self {
            tensors,
            num_blocks: config.num_blocks,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<R>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor<R>> {
        &mut self.tensors
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn embedding(&self) -> &Tensor<R> {
        &self.tensors[EMBEDDING]
    }

    pub fn num_classes(&self) -> usize {
        self.tensors[HEAD_BIAS].len()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding().shape()[0]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn zero_pad_row(&mut self) {
        if let Some(e) = self.tensors.get_mut(EMBEDDING) {
            e.row_mut(PAD).iter_mut().for_each(|v| *v = R::zero());
        }
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            num_blocks: self.num_blocks,
        }
    }
}

/// Dense parameters registered on a tape once per step. The embedding
/// table is read through `gather` instead.
#[derive(Clone, Debug)]
pub struct ParamVars {
    blocks: Vec<(Var, Var)>,
    head_weight: Var,
    head_bias: Var,
}

impl ParamVars {
    pub fn register<R: Real>(tape: &mut Tape<R>, params: &ParamStore<R>) -> Self {
        let blocks = (1..=params.num_blocks)
            .map(|l| {
                let w = tape.param(&block_weight(l), params.tensors[&block_weight(l)].clone());
                let b = tape.param(&block_bias(l), params.tensors[&block_bias(l)].clone());
                (w, b)
            })
            .collect();
        let head_weight = tape.param(HEAD_WEIGHT, params.tensors[HEAD_WEIGHT].clone());
        let head_bias = tape.param(HEAD_BIAS, params.tensors[HEAD_BIAS].clone());
        Self {
            blocks,
            head_weight,
            head_bias,
        }
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct TapeTrace {
    /// `hidden[0]` is the (possibly mixed) input to block 1; `hidden[ℓ]` is
    /// the output of block ℓ.
    pub hidden: Vec<Var>,
    pub pooled: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<R = f32> {
    pub token_embeddings: Tensor<R>,
    /// `hidden_states[0]` equals `token_embeddings`; entry ℓ is block ℓ's output.
    pub hidden_states: Vec<Tensor<R>>,
    pub pooled: Tensor<R>,
    pub logits: Tensor<R>,
    pub probs: Tensor<R>,
}

impl TapeTrace {
    pub fn values<R: Real>(&self, tape: &Tape<R>) -> ForwardTrace<R> {
        ForwardTrace {
            token_embeddings: tape.value(self.hidden[0]).clone(),
            hidden_states: self.hidden.iter().map(|v| tape.value(*v).clone()).collect(),
            pooled: tape.value(self.pooled).clone(),
            logits: tape.value(self.logits).clone(),
            probs: tape.value(self.probs).clone(),
        }
    }
}

fn check_len(example: &Example) -> Result<usize> {
    let len = example.len();
    if len == 0 {
        return Err(Error::Data(format!("example {} has no real tokens", example.id)));
    }
    Ok(len)
}

fn check_weights<R: Real>(weights: &[R]) -> Result<()> {
    if weights.iter().any(|w| !(*w >= R::zero() && *w <= R::one())) {
        return Err(Error::Numeric("mask weights must lie in [0, 1]".into()));
    }
    if !(weights.iter().map(|w| w.f64()).sum::<f64>() > 0.0) {
        return Err(Error::Numeric("mask weights sum to zero".into()));
    }
    Ok(())
}

/// Embedding lookup for the first `len` positions.
pub fn embed_on_tape<R: Real>(tape: &mut Tape<R>, params: &ParamStore<R>, ids: &[usize]) -> Result<Var> {
    tape.gather(EMBEDDING, params.embedding(), ids)
}

/// Run blocks `layers` (1-based, half-open) from hidden state `h`.
pub fn blocks_on_tape<R: Real>(
    tape: &mut Tape<R>,
    pv: &ParamVars,
    mut h: Var,
    layers: Range<usize>,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let (w, b) = pv.blocks[l - 1];
        let z = tape.matmul(h, w)?;
        let z = tape.add_bias(z, b)?;
        let a = tape.tanh(z);
        h = tape.add(h, a)?;
        out.push(h);
    }
    Ok(out)
}

fn head_on_tape<R: Real>(
    tape: &mut Tape<R>,
    pv: &ParamVars,
    h: Var,
    weights: &[R],
) -> Result<(Var, Var, Var)> {
    let pooled = tape.mean_pool_masked(h, weights)?;
    let logits = tape.matmul(pooled, pv.head_weight)?;
    let logits = tape.add_bias(logits, pv.head_bias)?;
    let probs = tape.softmax(logits)?;
    Ok((pooled, logits, probs))
}

pub fn forward_example_on_tape<R: Real>(
    tape: &mut Tape<R>,
    params: &ParamStore<R>,
    pv: &ParamVars,
    example: &Example,
) -> Result<TapeTrace> {
    let len = check_len(example)?;
    let emb = embed_on_tape(tape, params, &example.token_ids[..len])?;
    let weights = vec![R::one(); len];
    forward_embeddings_on_tape(tape, pv, emb, &weights)
}

pub fn forward_embeddings_on_tape<R: Real>(
    tape: &mut Tape<R>,
    pv: &ParamVars,
    embeddings: Var,
    weights: &[R],
) -> Result<TapeTrace> {
    check_weights(weights)?;
    let num_blocks = pv.blocks.len();
    let mut hidden = vec![embeddings];
    hidden.extend(blocks_on_tape(tape, pv, embeddings, 1..num_blocks + 1)?);
    let (pooled, logits, probs) = head_on_tape(tape, pv, *hidden.last().unwrap(), weights)?;
    Ok(TapeTrace {
        hidden,
        pooled,
        logits,
        probs,
    })
}

/// Both inputs run through blocks `1..=layer`, their hidden states and masks
/// are blended as `λ·i + (1−λ)·j`, and the blend continues through the
/// remaining blocks. `layer = 0` mixes the token embeddings.
pub fn forward_mixed_on_tape<R: Real>(
    tape: &mut Tape<R>,
    params: &ParamStore<R>,
    pv: &ParamVars,
    ex_i: &Example,
    ex_j: &Example,
    lambda: f64,
    layer: usize,
) -> Result<TapeTrace> {
    let num_blocks = pv.blocks.len();
    if layer > num_blocks {
        return Err(Error::Config(format!("mix layer {layer} exceeds {num_blocks} blocks")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let len = check_len(ex_i)?.max(check_len(ex_j)?);
    let a = ex_i.padded_to(len.max(ex_i.token_ids.len()));
    let b = ex_j.padded_to(len.max(ex_j.token_ids.len()));
    let lam = R::of(lambda);
    let mut h_i = embed_on_tape(tape, params, &a.token_ids[..len])?;
    let mut h_j = embed_on_tape(tape, params, &b.token_ids[..len])?;
    let mut prefix = vec![];
    if layer > 0 {
        let hi = blocks_on_tape(tape, pv, h_i, 1..layer + 1)?;
        let hj = blocks_on_tape(tape, pv, h_j, 1..layer + 1)?;
        prefix.push(h_i);
        prefix.extend_from_slice(&hi[..layer - 1]);
        h_i = hi[layer - 1];
        h_j = hj[layer - 1];
    }
    let h = tape.lerp(h_i, h_j, lam)?;
    let wi: Vec<R> = a.mask_weights();
    let wj: Vec<R> = b.mask_weights();
    let weights: Vec<R> = wi[..len]
        .iter()
        .zip(&wj[..len])
        .map(|(x, y)| lam * *x + (R::one() - lam) * *y)
        .collect();
    check_weights(&weights)?;
    let mut hidden = prefix;
    hidden.push(h);
    hidden.extend(blocks_on_tape(tape, pv, h, layer + 1..num_blocks + 1)?);
    let (pooled, logits, probs) = head_on_tape(tape, pv, *hidden.last().unwrap(), &weights)?;
    Ok(TapeTrace {
        hidden,
        pooled,
        logits,
        probs,
    })
}

pub fn forward<R: Real>(params: &ParamStore<R>, example: &Example) -> Result<ForwardTrace<R>> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let trace = forward_example_on_tape(&mut tape, params, &pv, example)?;
    Ok(trace.values(&tape))
}

pub fn forward_from_embeddings<R: Real>(
    params: &ParamStore<R>,
    embeddings: &Tensor<R>,
    mask_weights: &[R],
) -> Result<ForwardTrace<R>> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let emb = tape.leaf(embeddings.clone());
    let trace = forward_embeddings_on_tape(&mut tape, &pv, emb, mask_weights)?;
    Ok(trace.values(&tape))
}

/// For `mix_layer > 0` the hidden states below the mixing point are the
/// anchor's own.
pub fn forward_mixed_hidden<R: Real>(
    params: &ParamStore<R>,
    ex_i: &Example,
    ex_j: &Example,
    lambda: f64,
    mix_layer: usize,
) -> Result<ForwardTrace<R>> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let trace = forward_mixed_on_tape(&mut tape, params, &pv, ex_i, ex_j, lambda, mix_layer)?;
    Ok(trace.values(&tape))
}

/// Embedding rows of the example, padded with zero rows to `len`.
pub fn lookup<R: Real>(params: &ParamStore<R>, example: &Example, len: usize) -> Tensor<R> {
    let e = params.embedding();
    let dim = e.shape()[1];
    let mut data = Vec::with_capacity(len * dim);
    for t in 0..len {
        match example.token_ids.get(t) {
            Some(&id) => data.extend_from_slice(e.row(id)),
            None => data.extend(std::iter::repeat_n(R::zero(), dim)),
        }
    }
    Tensor::new(vec![len, dim], data).expect("lookup shape")
}

const MAGIC: &[u8; 4] = b"SEMX";
const VERSION: u32 = 1;

pub fn checkpoint_bytes(params: &ParamStore<f32>, config: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [
        config.vocab_size,
        config.embed_dim,
        config.num_blocks,
        config.hidden_dim,
        config.num_classes,
        config.max_len,
    ] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ParamStore<f32>, ModelConfig)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Checkpoint("bad magic".into()))? != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        vocab_size: r.u32()?,
        embed_dim: r.u32()?,
        num_blocks: r.u32()?,
        hidden_dim: r.u32()?,
        num_classes: r.u32()?,
        max_len: r.u32()?,
    };
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank > 3 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} > 3")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    let params = ParamStore::from_tensors(&config, tensors)?;
    Ok((params, config))
}

pub fn save_checkpoint(params: &ParamStore<f32>, config: &ModelConfig, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(params, config)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Load and require the stored dimensions to match `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ParamStore<f32>> {
    let (params, config) = load_checkpoint(path)?;
    if &config != expected {
        return Err(Error::shape(
            "checkpoint",
            format!("stored config {config:?} does not match {expected:?}"),
        ));
    }
    Ok(params)
}
