//! Neural layers over the tape: linear, layer norm, embedding, multi-head
//! attention, and LoRA adapters.
//!
//! Persistent parameters live in a [`ParamStore`]; a [`Session`] owns one
//! forward tape and binds parameters into it on demand (a parameter bound
//! twice resolves to the same tape variable, so fan-out gradients
//! accumulate). After backward, the session's per-parameter gradients are
//! folded back into the store, where the optimizer reads them.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::util::gaussian;

/// Handle to one named parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// One trainable (or frozen) tensor with a persistent gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.numel()];
        self.params.push(Param { name: name.into(), value, grad, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::Shape(format!(
                "param {}: set {:?} over {:?}",
                p.name,
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = true;
                n += 1;
            }
        }
        n
    }

    /// Freeze everything, then unfreeze names starting with any of `prefixes`.
    pub fn freeze_all_except(&mut self, prefixes: &[&str]) {
        for p in &mut self.params {
            p.frozen = !prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add session gradients into the persistent accumulators.
    pub fn accumulate_grads(&mut self, grads: Vec<(ParamId, Vec<f64>)>) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            for (slot, v) in p.grad.iter_mut().zip(&g) {
                *slot += v;
            }
        }
    }
}

/// One forward/backward pass: a tape plus the parameter bindings made on it.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: HashMap<ParamId, Var>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Session<'s> {
        Session { tape: Tape::new(), store, bound: HashMap::new() }
    }

    /// Bind a parameter into the tape (cached per session).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let mut t = p.value.clone();
        t.requires_grad = !p.frozen;
        let v = self.tape.input(t);
        self.bound.insert(id, v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradient buffer of a bound parameter, if backward reached it.
    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.bound.get(&id).and_then(|&v| self.tape.grad(v))
    }

    /// Consume the session, yielding (param, gradient) pairs in id order.
    pub fn into_param_grads(self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.tape.grad(v).map(|g| (id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Uniform init in ±1/sqrt(fan_in).
pub fn init_linear_weight(rng: &mut impl Rng, out_dim: usize, in_dim: usize) -> Tensor {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let data = (0..out_dim * in_dim).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![out_dim, in_dim], data).expect("finite init")
}

/// Gaussian init with the given standard deviation.
pub fn init_gaussian(rng: &mut impl Rng, shape: Vec<usize>, sigma: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| sigma * gaussian(rng)).collect();
    Tensor::new(shape, data).expect("finite init")
}

/// Fully-connected layer: `y = x . W^T + bias`, weight stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Linear {
        let weight = store.add(format!("{name}.weight"), init_linear_weight(rng, out_dim, in_dim));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]));
        Linear { name: name.into(), weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let last = *sess.tape.shape(x).last().unwrap_or(&0);
        if last != self.in_dim {
            return Err(Error::Shape(format!(
                "linear: input width {last} vs expected {}",
                self.in_dim
            )));
        }
        let w = self.param_weight(sess);
        let b = self.param_bias(sess);
        let wt = sess.tape.transpose(w)?;
        let y = sess.tape.matmul(x, wt)?;
        sess.tape.add_row_vec(y, b)
    }

    fn param_weight(&self, sess: &mut Session) -> Var {
        sess.param(self.weight)
    }

    fn param_bias(&self, sess: &mut Session) -> Var {
        sess.param(self.bias)
    }
}

/// Layer normalization over the last axis with learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> LayerNorm {
        let gain = store.add(format!("{name}.gain"), Tensor::full(vec![dim], 1.0).expect("finite"));
        let offset = store.add(format!("{name}.offset"), Tensor::zeros(vec![dim]));
        LayerNorm { gain, offset, eps: LAYER_NORM_EPS }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let g = sess.param(self.gain);
        let o = sess.param(self.offset);
        let normed = sess.tape.layer_norm(x, self.eps)?;
        let scaled = sess.tape.mul_row_vec(normed, g)?;
        sess.tape.add_row_vec(scaled, o)
    }
}

/// Token embedding table with row-gather lookup.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Embedding {
        let table = store.add(format!("{name}.table"), init_gaussian(rng, vec![vocab, dim], 0.02));
        Embedding { table, vocab, dim }
    }

    pub fn forward(&self, sess: &mut Session, ids: &[usize]) -> Result<Var> {
        for &id in ids {
            if id >= self.vocab {
                return Err(Error::Index(format!("token id {id} >= vocab {}", self.vocab)));
            }
        }
        let t = sess.param(self.table);
        sess.tape.gather_rows(t, ids)
    }
}

/// Boolean attention mask: `allowed[q][k]` marks keys each query may attend.
#[derive(Clone, Debug)]
pub struct AttnMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

/// Additive penalty for disallowed keys. Large enough that the masked
/// softmax weight underflows to exactly zero, finite so gradients stay clean.
pub const MASK_PENALTY: f64 = 1e9;

impl AttnMask {
    pub fn new(queries: usize, keys: usize, allowed: Vec<bool>) -> Result<AttnMask> {
        if allowed.len() != queries * keys {
            return Err(Error::Shape(format!(
                "mask: {} flags for {queries}x{keys}",
                allowed.len()
            )));
        }
        Ok(AttnMask { queries, keys, allowed })
    }

    /// Causal mask: query `t` sees keys `0..=t`.
    pub fn causal(len: usize) -> AttnMask {
        let mut allowed = vec![false; len * len];
        for q in 0..len {
            for k in 0..=q {
                allowed[q * len + k] = true;
            }
        }
        AttnMask { queries: len, keys: len, allowed }
    }

    /// Same key-validity pattern for every query row.
    pub fn from_key_validity(queries: usize, valid: &[bool]) -> AttnMask {
        let mut allowed = Vec::with_capacity(queries * valid.len());
        for _ in 0..queries {
            allowed.extend_from_slice(valid);
        }
        AttnMask { queries, keys: valid.len(), allowed }
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }

    fn additive_tensor(&self) -> Result<Tensor> {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { -MASK_PENALTY })
            .collect();
        Tensor::new(vec![self.queries, self.keys], data)
    }

    fn validate(&self, lq: usize, lk: usize) -> Result<()> {
        if self.queries != lq || self.keys != lk {
            return Err(Error::Shape(format!(
                "mask {}x{} vs attention {lq}x{lk}",
                self.queries, self.keys
            )));
        }
        for q in 0..self.queries {
            if (0..self.keys).all(|k| !self.is_allowed(q, k)) {
                return Err(Error::Contract(format!("query row {q} has no allowed keys")));
            }
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention with output projection.
///
/// Projections are LoRA-adaptable; fresh layers carry no adapters.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub head_dim: usize,
    pub wq: AdaptedLinear,
    pub wk: AdaptedLinear,
    pub wv: AdaptedLinear,
    pub wo: AdaptedLinear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<MultiHeadAttention> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            heads,
            dim,
            head_dim: dim / heads,
            wq: AdaptedLinear::new(Linear::new(store, rng, &format!("{name}.wq"), dim, dim)),
            wk: AdaptedLinear::new(Linear::new(store, rng, &format!("{name}.wk"), dim, dim)),
            wv: AdaptedLinear::new(Linear::new(store, rng, &format!("{name}.wv"), dim, dim)),
            wo: AdaptedLinear::new(Linear::new(store, rng, &format!("{name}.wo"), dim, dim)),
        })
    }

    /// Attach LoRA adapters to all four projections.
    pub fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        rank: usize,
    ) -> Result<()> {
        for proj in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo] {
            let name = proj.base.name.clone();
            proj.attach_lora(store, rng, &name, rank)?;
        }
        Ok(())
    }

    pub fn forward(
        &self,
        sess: &mut Session,
        q_in: Var,
        kv_in: Var,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(sess, q_in, kv_in, mask)?.0)
    }

    /// Forward pass that also returns the per-head attention weight matrices
    /// (shape `[Lq, Lk]` each), for diagnostics and masking tests.
    pub fn forward_with_weights(
        &self,
        sess: &mut Session,
        q_in: Var,
        kv_in: Var,
        mask: Option<&AttnMask>,
    ) -> Result<(Var, Vec<Var>)> {
        let lq = sess.tape.shape(q_in)[0];
        let lk = sess.tape.shape(kv_in)[0];
        if mask.is_none() && lk == 0 {
            return Err(Error::Contract("attention over an empty key sequence".into()));
        }
        let mask_var = match mask {
            Some(m) => {
                m.validate(lq, lk)?;
                Some(sess.constant(m.additive_tensor()?))
            }
            None => None,
        };
        let q = self.wq.forward(sess, q_in)?;
        let k = self.wk.forward(sess, kv_in)?;
        let v = self.wv.forward(sess, kv_in)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut head_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = sess.tape.slice_cols(q, start, self.head_dim)?;
            let kh = sess.tape.slice_cols(k, start, self.head_dim)?;
            let vh = sess.tape.slice_cols(v, start, self.head_dim)?;
            let kt = sess.tape.transpose(kh)?;
            let scores = sess.tape.matmul(qh, kt)?;
            let scaled = sess.tape.scale(scores, scale)?;
            let masked = match mask_var {
                Some(mv) => sess.tape.add(scaled, mv)?,
                None => scaled,
            };
            let weights = sess.tape.softmax(masked, 1)?;
            let out = sess.tape.matmul(weights, vh)?;
            head_outs.push(out);
            head_weights.push(weights);
        }
        let concat = sess.tape.concat_cols(&head_outs)?;
        let projected = self.wo.forward(sess, concat)?;
        Ok((projected, head_weights))
    }
}

/// Low-rank adapter over a frozen linear layer:
/// `y = base(x) + scaling * (x . A^T) . B^T`.
///
/// `B` starts at zero, so a fresh adapter is output-identical to its base.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scaling: f64,
}

impl LoraAdapter {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
    ) -> Result<LoraAdapter> {
        if rank == 0 || rank > in_dim.min(out_dim) {
            return Err(Error::Config(format!(
                "lora rank {rank} out of range for {in_dim}->{out_dim}"
            )));
        }
        let down = store.add(format!("{name}.lora_a"), init_gaussian(rng, vec![rank, in_dim], 0.02));
        let up = store.add(format!("{name}.lora_b"), Tensor::zeros(vec![out_dim, rank]));
        Ok(LoraAdapter { down, up, rank, scaling: 2.0 / rank as f64 })
    }
}

/// Linear layer with an optional LoRA adapter attached.
#[derive(Clone, Debug)]
pub struct AdaptedLinear {
    pub base: Linear,
    pub adapter: Option<LoraAdapter>,
}

impl AdaptedLinear {
    pub fn new(base: Linear) -> AdaptedLinear {
        AdaptedLinear { base, adapter: None }
    }

    pub fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        rank: usize,
    ) -> Result<()> {
        self.adapter =
            Some(LoraAdapter::new(store, rng, name, self.base.in_dim, self.base.out_dim, rank)?);
        Ok(())
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let base_out = self.base.forward(sess, x)?;
        let Some(adapter) = &self.adapter else {
            return Ok(base_out);
        };
        let a = sess.param(adapter.down);
        let b = sess.param(adapter.up);
        let at = sess.tape.transpose(a)?;
        let down = sess.tape.matmul(x, at)?;
        let bt = sess.tape.transpose(b)?;
        let up = sess.tape.matmul(down, bt)?;
        let scaled = sess.tape.scale(up, adapter.scaling)?;
        sess.tape.add(base_out, scaled)
    }
}

/// Fixed sinusoidal position table, `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let rate = 1.0 / 10_000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * rate;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("finite positions")
}

/// Add sinusoidal positions to a `[len, dim]` sequence.
pub fn add_positions(sess: &mut Session, x: Var) -> Result<Var> {
    let shape = sess.tape.shape(x);
    let (len, dim) = (shape[0], shape[1]);
    let pos = sess.constant(sinusoidal_positions(len, dim));
    sess.tape.add(x, pos)
}
