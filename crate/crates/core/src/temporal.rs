//! One-layer pre-norm transformer encoder/decoder over social embeddings.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::D_MODEL;
use crate::error::{Error, Result};
use crate::nn::{Graph, LayerNormParams, Linear, ParamId, ParamStore, Tensor, Var};

pub const HEADS: usize = 4;
pub const FFN_WIDTH: usize = 256;

/// Sinusoidal table, `length x D_MODEL`.
pub fn positional_encoding(length: usize) -> Tensor {
    let mut pe = Tensor::zeros(length, D_MODEL);
    for pos in 0..length {
        for i in 0..D_MODEL / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / D_MODEL as f64);
            pe.set(pos, 2 * i, angle.sin());
            pe.set(pos, 2 * i + 1, angle.cos());
        }
    }
    pe
}

/// Inverted dropout; a no-op when `p == 0`.
pub struct Dropout {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.p <= 0.0 {
            return x;
        }
        let (r, c) = g.shape(x);
        let keep = 1.0 - self.p;
        let mask: Vec<f64> =
            (0..r * c).map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = g.leaf(Tensor::from_vec(r, c, mask));
        g.mul(x, m)
    }
}

fn drop(g: &mut Graph, d: &mut Option<&mut Dropout>, x: Var) -> Var {
    match d {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnParams {
    q: Linear,
    // No key bias: it shifts every score of a query equally, which the
    // softmax removes.
    k: ParamId,
    v: Linear,
    o: Linear,
}

impl AttnParams {
    fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        AttnParams {
            q: Linear::new(store, &format!("{name}.q"), D_MODEL, D_MODEL, rng),
            k: store.add_uniform(format!("{name}.k.w"), D_MODEL, D_MODEL, D_MODEL, rng),
            v: Linear::new(store, &format!("{name}.v"), D_MODEL, D_MODEL, rng),
            o: Linear::new(store, &format!("{name}.o"), D_MODEL, D_MODEL, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xq: Var,
        xkv: Var,
        batch: usize,
        mask: Option<&[bool]>,
        causal: bool,
    ) -> Var {
        let q = self.q.forward(g, store, xq);
        let k = self.keys(g, store, xkv);
        let v = self.v.forward(g, store, xkv);
        let a = g.attention(q, k, v, batch, HEADS, mask, causal);
        self.o.forward(g, store, a)
    }

    fn keys(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.k);
        g.matmul(x, w)
    }
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Linear,
    down: Linear,
}

impl Ffn {
    fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        Ffn {
            up: Linear::new(store, &format!("{name}.up"), D_MODEL, FFN_WIDTH, rng),
            down: Linear::new(store, &format!("{name}.down"), FFN_WIDTH, D_MODEL, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerParams {
    enc_ln1: LayerNormParams,
    enc_attn: AttnParams,
    enc_ln2: LayerNormParams,
    enc_ffn: Ffn,
    enc_out: LayerNormParams,
    dec_ln1: LayerNormParams,
    dec_self: AttnParams,
    dec_ln2: LayerNormParams,
    dec_cross: AttnParams,
    dec_ln3: LayerNormParams,
    dec_ffn: Ffn,
    dec_out: LayerNormParams,
}

/// Cached per-step state for autoregressive decoding.
pub struct DecoderState {
    batch: usize,
    keys: Vec<Var>,
    values: Vec<Var>,
    memory_kv: Option<(Var, Var)>,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

fn check_rows(g: &Graph, x: Var, batch: usize, what: &str) -> Result<usize> {
    let (rows, cols) = g.shape(x);
    if cols != D_MODEL || batch == 0 || rows % batch != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("{what}: batch {batch} x length x {D_MODEL}"),
            got: format!("{rows}x{cols}"),
        });
    }
    Ok(rows / batch)
}

fn add_positions(g: &mut Graph, x: Var, batch: usize, len: usize, offset: usize) -> Var {
    let pe = positional_encoding(offset + len);
    let mut data = Vec::with_capacity(batch * len * D_MODEL);
    for _ in 0..batch {
        for t in 0..len {
            data.extend_from_slice(pe.row(offset + t));
        }
    }
    let p = g.leaf(Tensor::from_vec(batch * len, D_MODEL, data));
    g.add(x, p)
}

impl TransformerParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        TransformerParams {
            enc_ln1: LayerNormParams::new(store, "tf.enc.ln1", D_MODEL),
            enc_attn: AttnParams::new(store, "tf.enc.attn", rng),
            enc_ln2: LayerNormParams::new(store, "tf.enc.ln2", D_MODEL),
            enc_ffn: Ffn::new(store, "tf.enc.ffn", rng),
            enc_out: LayerNormParams::new(store, "tf.enc.out", D_MODEL),
            dec_ln1: LayerNormParams::new(store, "tf.dec.ln1", D_MODEL),
            dec_self: AttnParams::new(store, "tf.dec.self", rng),
            dec_ln2: LayerNormParams::new(store, "tf.dec.ln2", D_MODEL),
            dec_cross: AttnParams::new(store, "tf.dec.cross", rng),
            dec_ln3: LayerNormParams::new(store, "tf.dec.ln3", D_MODEL),
            dec_ffn: Ffn::new(store, "tf.dec.ffn", rng),
            dec_out: LayerNormParams::new(store, "tf.dec.out", D_MODEL),
        }
    }

    /// Bidirectional self-attention over `batch` history sequences stacked
    /// batch-major. `mask[b*len + t] == false` marks a missing step.
    pub fn encode_sequence(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        history: Var,
        batch: usize,
        mask: Option<&[bool]>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let len = check_rows(g, history, batch, "history")?;
        if len == 0 {
            return Err(Error::ShapeMismatch { expected: "non-empty history".into(), got: "0 steps".into() });
        }
        if let Some(m) = mask {
            if m.len() != batch * len {
                return Err(Error::LengthMismatch { expected: batch * len, got: m.len() });
            }
        }
        let x = add_positions(g, history, batch, len, 0);
        let n = self.enc_ln1.forward(g, store, x);
        let a = self.enc_attn.forward(g, store, n, n, batch, mask, false);
        let a = drop(g, &mut dropout, a);
        let x = g.add(x, a);
        let n = self.enc_ln2.forward(g, store, x);
        let f = self.enc_ffn.forward(g, store, n);
        let f = drop(g, &mut dropout, f);
        let x = g.add(x, f);
        Ok(self.enc_out.forward(g, store, x))
    }

    /// Decoder over full target sequences. With `causal`, output `t` sees
    /// target positions `<= t` only.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        targets: Var,
        memory: Var,
        batch: usize,
        memory_mask: Option<&[bool]>,
        causal: bool,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let len = check_rows(g, targets, batch, "targets")?;
        if len == 0 {
            return Err(Error::ShapeMismatch { expected: "non-empty targets".into(), got: "0 steps".into() });
        }
        check_rows(g, memory, batch, "memory")?;
        let x = add_positions(g, targets, batch, len, 0);
        let n = self.dec_ln1.forward(g, store, x);
        let a = self.dec_self.forward(g, store, n, n, batch, None, causal);
        let a = drop(g, &mut dropout, a);
        let x = g.add(x, a);
        let n = self.dec_ln2.forward(g, store, x);
        let c = self.dec_cross.forward(g, store, n, memory, batch, memory_mask, false);
        let c = drop(g, &mut dropout, c);
        let x = g.add(x, c);
        let n = self.dec_ln3.forward(g, store, x);
        let f = self.dec_ffn.forward(g, store, n);
        let f = drop(g, &mut dropout, f);
        let x = g.add(x, f);
        Ok(self.dec_out.forward(g, store, x))
    }

    pub fn decoder_start(&self, batch: usize) -> DecoderState {
        DecoderState { batch, keys: Vec::new(), values: Vec::new(), memory_kv: None }
    }

    /// Feeds one target step (`batch x D_MODEL`) and returns the decoder
    /// output at that position, reusing cached keys and values of earlier
    /// steps.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &mut DecoderState,
        target: Var,
        memory: Var,
        memory_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let batch = state.batch;
        if check_rows(g, target, batch, "target step")? != 1 {
            return Err(Error::ShapeMismatch {
                expected: format!("{batch}x{D_MODEL} target step"),
                got: format!("{:?}", g.shape(target)),
            });
        }
        let mem_len = check_rows(g, memory, batch, "memory")?;
        let t = state.keys.len();
        let x = add_positions(g, target, batch, 1, t);
        let n = self.dec_ln1.forward(g, store, x);
        state.keys.push(self.dec_self.keys(g, store, n));
        state.values.push(self.dec_self.v.forward(g, store, n));
        let q = self.dec_self.q.forward(g, store, n);
        let steps = t + 1;
        // Cached rows are step-major; attention wants batch-major.
        let order: Vec<usize> = (0..batch * steps).map(|r| (r % steps) * batch + r / steps).collect();
        let k_all = g.concat_rows(&state.keys);
        let k_all = g.gather_rows(k_all, &order);
        let v_all = g.concat_rows(&state.values);
        let v_all = g.gather_rows(v_all, &order);
        let a = g.attention(q, k_all, v_all, batch, HEADS, None, false);
        let a = self.dec_self.o.forward(g, store, a);
        let x = g.add(x, a);

        let n = self.dec_ln2.forward(g, store, x);
        let (mk, mv) = match state.memory_kv {
            Some(kv) => kv,
            None => {
                let kv = (self.dec_cross.keys(g, store, memory), self.dec_cross.v.forward(g, store, memory));
                state.memory_kv = Some(kv);
                kv
            }
        };
        debug_assert_eq!(g.shape(mk).0, batch * mem_len);
        let q = self.dec_cross.q.forward(g, store, n);
        let c = g.attention(q, mk, mv, batch, HEADS, memory_mask, false);
        let c = self.dec_cross.o.forward(g, store, c);
        let x = g.add(x, c);
        let n = self.dec_ln3.forward(g, store, x);
        let f = self.dec_ffn.forward(g, store, n);
        let x = g.add(x, f);
        Ok(self.dec_out.forward(g, store, x))
    }
}

/// Row indices that pick position `t` of every sequence in a batch-major
/// stack of `batch` sequences of length `len`.
pub fn position_rows(batch: usize, len: usize, t: usize) -> Arc<Vec<usize>> {
    Arc::new((0..batch).map(|b| b * len + t).collect())
}
