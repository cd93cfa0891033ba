//! Transformer building blocks shared by the teacher and the student.
//!
//! All blocks map `T × d_model` to `T × d_model`. Multi-head attention keeps
//! one projection matrix per head (`d_model × d_k`) and concatenates heads
//! before the output projection `W^O: (H·d_v) × d_model`. Residual order is
//! post-norm: `norm(x + f(x))`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NdArray, ParamId, ParamStore, Var};

/// How attention scores are scaled before the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreScale {
    /// `1/√d_k`, the per-head width.
    #[default]
    PerHead,
    /// `1/√d_model`.
    ModelWidth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub score_scale: ScoreScale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(2, 2, 4, 32, 64, 36, 36, 32)
    }
}

impl ModelConfig {
    /// Config with `d_k = d_v = d_model / heads`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        enc_layers: usize,
        dec_layers: usize,
        heads: usize,
        d_model: usize,
        d_ff: usize,
        src_vocab: usize,
        tgt_vocab: usize,
        max_len: usize,
    ) -> Self {
        let d_head = (d_model / heads.max(1)).max(1);
        Self {
            enc_layers,
            dec_layers,
            heads,
            d_model,
            d_k: d_head,
            d_v: d_head,
            d_ff,
            src_vocab,
            tgt_vocab,
            max_len,
            score_scale: ScoreScale::PerHead,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("max_len", self.max_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn score_scale_factor(&self) -> f64 {
        match self.score_scale {
            ScoreScale::PerHead => 1.0 / (self.d_k as f64).sqrt(),
            ScoreScale::ModelWidth => 1.0 / (self.d_model as f64).sqrt(),
        }
    }

    /// Teacher and student must agree on these for layer-to-layer hints.
    pub fn check_hint_compatible(&self, other: &ModelConfig) -> Result<()> {
        let same = self.enc_layers == other.enc_layers
            && self.dec_layers == other.dec_layers
            && self.heads == other.heads
            && self.d_model == other.d_model;
        if same {
            Ok(())
        } else {
            Err(Error::config(format!(
                "teacher (M={}, N={}, H={}, d={}) and student (M={}, N={}, H={}, d={}) differ",
                self.enc_layers,
                self.dec_layers,
                self.heads,
                self.d_model,
                other.enc_layers,
                other.dec_layers,
                other.heads,
                other.d_model
            )))
        }
    }
}

/// Sinusoidal table: `sin(j/10000^{k/d})` for even `k`, `cos(..)` for odd `k`.
pub fn positional_encoding(len: usize, width: usize) -> NdArray {
    let mut out = NdArray::zeros(&[len, width]);
    for j in 0..len {
        for k in 0..width {
            let angle = j as f64 / 10000f64.powf(k as f64 / width as f64);
            let v = if k % 2 == 0 { angle.sin() } else { angle.cos() };
            out.set(&[j, k], v);
        }
    }
    out
}

/// Inverted dropout; a no-op in evaluation mode.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        if rate <= 0.0 {
            return Self::off();
        }
        Self { rate, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - self.rate;
        let shape = g.value(x).shape().to_vec();
        let n = g.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(NdArray::new(shape, mask)?)?;
        Ok(g.mul(x, m)?)
    }
}

/// Blocked-entry mask for a `T_q × T_kv` score matrix.
///
/// `causal` blocks `s > t`; `key_pad[s] == true` blocks key `s` everywhere.
pub fn attention_mask(t_q: usize, t_kv: usize, causal: bool, key_pad: Option<&[bool]>) -> Result<Option<Vec<bool>>> {
    if causal && t_q != t_kv {
        return Err(Error::Contract(format!("causal mask needs square scores, got {t_q}x{t_kv}")));
    }
    if let Some(p) = key_pad {
        if p.len() != t_kv {
            return Err(Error::Contract(format!("key padding has {} entries for {t_kv} keys", p.len())));
        }
    }
    let pad_any = key_pad.is_some_and(|p| p.iter().any(|&b| b));
    if !causal && !pad_any {
        return Ok(None);
    }
    let mut blocked = vec![false; t_q * t_kv];
    for t in 0..t_q {
        for s in 0..t_kv {
            blocked[t * t_kv + s] = (causal && s > t) || key_pad.is_some_and(|p| p[s]);
        }
    }
    Ok(Some(blocked))
}

/// Attention values after `W^O` and the per-head distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `T_q × d_model`
    pub values: NdArray,
    /// `H × T_q × T_kv`
    pub weights: NdArray,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Vec<ParamId>,
    k: Vec<ParamId>,
    v: Vec<ParamId>,
    o: ParamId,
    scale: f64,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let heads = |tag: &str, width: usize, store: &mut ParamStore, rng: &mut _| {
            (0..cfg.heads)
                .map(|h| store.add_xavier(format!("{prefix}.{tag}.{h}"), cfg.d_model, width, rng))
                .collect::<Vec<_>>()
        };
        let q = heads("q", cfg.d_k, store, rng);
        let k = heads("k", cfg.d_k, store, rng);
        let v = heads("v", cfg.d_v, store, rng);
        let o = store.add_xavier(format!("{prefix}.o"), cfg.heads * cfg.d_v, cfg.d_model, rng);
        Self {
            q,
            k,
            v,
            o,
            scale: cfg.score_scale_factor(),
        }
    }

    pub fn heads(&self) -> usize {
        self.q.len()
    }

    pub fn output_projection(&self) -> ParamId {
        self.o
    }

    /// Per-head projection ids `(W^Q_h, W^K_h, W^V_h)`.
    pub fn head_projections(&self, h: usize) -> (ParamId, ParamId, ParamId) {
        (self.q[h], self.k[h], self.v[h])
    }

    /// Returns the projected output and each head's `T_q × T_kv` weights.
    /// Weights are captured before dropout.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
        blocked: Option<&[bool]>,
        dropout: &mut Dropout,
    ) -> Result<(Var, Vec<Var>)> {
        let t_q = g.value(query).shape()[0];
        let t_kv = g.value(key).shape()[0];
        if g.value(value).shape()[0] != t_kv {
            return Err(Error::Contract("keys and values differ in length".into()));
        }
        if let Some(b) = blocked {
            if b.len() != t_q * t_kv {
                return Err(Error::Contract("mask does not match score shape".into()));
            }
        }
        let mut head_out = Vec::with_capacity(self.heads());
        let mut weights = Vec::with_capacity(self.heads());
        for h in 0..self.heads() {
            let wq = g.param(store, self.q[h]);
            let wk = g.param(store, self.k[h]);
            let wv = g.param(store, self.v[h]);
            let qh = g.matmul(query, wq)?;
            let kh = g.matmul(key, wk)?;
            let vh = g.matmul(value, wv)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, self.scale)?;
            let w = g.softmax(scores, blocked)?;
            weights.push(w);
            let w_drop = dropout.apply(g, w)?;
            head_out.push(g.matmul(w_drop, vh)?);
        }
        let cat = if head_out.len() == 1 {
            head_out[0]
        } else {
            g.concat(&head_out, 1)?
        };
        let wo = g.param(store, self.o);
        Ok((g.matmul(cat, wo)?, weights))
    }

    /// Evaluates attention outside a training graph.
    pub fn compute(&self, store: &ParamStore, q: &NdArray, k: &NdArray, v: &NdArray, causal: bool) -> Result<AttentionOutput> {
        let (t_q, t_kv) = (q.shape()[0], k.shape()[0]);
        let mask = attention_mask(t_q, t_kv, causal, None)?;
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone())?, g.constant(k.clone())?, g.constant(v.clone())?);
        let (out, w) = self.forward(&mut g, store, qv, kv, vv, mask.as_deref(), &mut Dropout::off())?;
        let weights = NdArray::stack(&w.iter().map(|&h| g.value(h).clone()).collect::<Vec<_>>())?;
        Ok(AttentionOutput {
            values: g.value(out).clone(),
            weights,
        })
    }

    /// Positional attention: `Q = K = positional_encoding(T, d_model)`, `V = prev`.
    pub fn compute_positional(&self, store: &ParamStore, prev: &NdArray) -> Result<AttentionOutput> {
        let pe = positional_encoding(prev.shape()[0], prev.shape()[1]);
        self.compute(store, &pe, &pe, prev, false)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let w1 = store.add_xavier(format!("{prefix}.w1"), cfg.d_model, cfg.d_ff, rng);
        let b1 = store.add(format!("{prefix}.b1"), NdArray::zeros(&[cfg.d_ff]));
        let w2 = store.add_xavier(format!("{prefix}.w2"), cfg.d_ff, cfg.d_model, rng);
        let b2 = store.add(format!("{prefix}.b2"), NdArray::zeros(&[cfg.d_model]));
        Self { w1, b1, w2, b2 }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// `ReLU(x·W₁ + b₁)·W₂ + b₂`, row by row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: &mut Dropout) -> Result<Var> {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h)?;
        let h = dropout.apply(g, h)?;
        let y = g.matmul(h, w2)?;
        Ok(g.add_row(y, b2)?)
    }

    pub fn compute(&self, store: &ParamStore, x: &NdArray) -> Result<NdArray> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let y = self.forward(&mut g, store, xv, &mut Dropout::off())?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), NdArray::ones(&[width])),
            bias: store.add(format!("{prefix}.bias"), NdArray::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        Ok(g.layer_norm(x, gain, bias)?)
    }

    /// Residual sublayer `norm(x + dropout(fx))`, where `fx = f(x)`.
    pub fn residual(&self, g: &mut Graph, store: &ParamStore, x: Var, fx: Var, dropout: &mut Dropout) -> Result<Var> {
        let fx = dropout.apply(g, fx)?;
        let sum = g.add(x, fx)?;
        self.forward(g, store, sum)
    }
}

/// `layer_norm(x + f(x))` with unit gain and zero bias.
pub fn sublayer(x: &NdArray, f: impl FnOnce(&NdArray) -> NdArray) -> Result<NdArray> {
    let fx = f(x);
    let width = x.last_dim();
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let fv = g.constant(fx)?;
    let gain = g.constant(NdArray::ones(&[width]))?;
    let bias = g.constant(NdArray::zeros(&[width]))?;
    let sum = g.add(xv, fv)?;
    let out = g.layer_norm(sum, gain, bias)?;
    Ok(g.value(out).clone())
}

/// Scaled token embedding plus positional encoding.
pub fn embed_with_position(g: &mut Graph, table: Var, ids: &[usize], width: usize) -> Result<Var> {
    let e = g.gather(table, ids)?;
    embed_rows_with_position(g, e, width)
}

/// `√d · rows + PE(T, d)` for already-gathered (or mixed) embedding rows.
pub fn embed_rows_with_position(g: &mut Graph, rows: Var, width: usize) -> Result<Var> {
    let t = g.value(rows).shape()[0];
    let scaled = g.scale(rows, (width as f64).sqrt())?;
    let pe = g.constant(positional_encoding(t, width))?;
    Ok(g.add(scaled, pe)?)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    attn_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{prefix}.self"), cfg, rng),
            attn_norm: LayerNorm::new(store, &format!("{prefix}.self_norm"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), cfg, rng),
            ffn_norm: LayerNorm::new(store, &format!("{prefix}.ffn_norm"), cfg.d_model),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, blocked: Option<&[bool]>, dropout: &mut Dropout) -> Result<Var> {
        let (a, _) = self.attn.forward(g, store, x, x, x, blocked, dropout)?;
        let x = self.attn_norm.residual(g, store, x, a, dropout)?;
        let f = self.ffn.forward(g, store, x, dropout)?;
        self.ffn_norm.residual(g, store, x, f, dropout)
    }
}

/// Token ids of the reserved symbols, shared by source and target sides.
pub mod special {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;
    pub const RESERVED: usize = 4;
}

/// Source embedding table plus `M` self-attention layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    embed: ParamId,
    layers: Vec<EncoderLayer>,
    width: usize,
    vocab: usize,
    max_len: usize,
}

/// Encoder output inside a graph, with the key-padding mask it used.
#[derive(Debug)]
pub struct EncodedSource {
    pub context: Var,
    pub key_pad: Vec<bool>,
}

impl EncodedSource {
    pub fn has_padding(&self) -> bool {
        self.key_pad.iter().any(|&p| p)
    }
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let embed = store.add_normal("enc.embed", &[cfg.src_vocab, cfg.d_model], (cfg.d_model as f64).powf(-0.5), rng);
        let layers = (0..cfg.enc_layers)
            .map(|l| EncoderLayer::new(store, &format!("enc.{l}"), cfg, rng))
            .collect();
        Self {
            embed,
            layers,
            width: cfg.d_model,
            vocab: cfg.src_vocab,
            max_len: cfg.max_len,
        }
    }

    pub fn embedding(&self) -> ParamId {
        self.embed
    }

    pub fn check_source(&self, src: &[usize]) -> Result<()> {
        if src.is_empty() {
            return Err(Error::input("empty source sentence"));
        }
        if src.len() > self.max_len {
            return Err(Error::input(format!("source length {} exceeds max_len {}", src.len(), self.max_len)));
        }
        if let Some(&bad) = src.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::input(format!("source token id {bad} outside vocabulary of {}", self.vocab)));
        }
        if src.iter().all(|&t| t == special::PAD) {
            return Err(Error::input("source consists only of padding"));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, src: &[usize], dropout: &mut Dropout) -> Result<EncodedSource> {
        self.check_source(src)?;
        let key_pad: Vec<bool> = src.iter().map(|&t| t == special::PAD).collect();
        let blocked = attention_mask(src.len(), src.len(), false, Some(&key_pad))?;
        let table = g.param(store, self.embed);
        let mut x = embed_with_position(g, table, src, self.width)?;
        x = dropout.apply(g, x)?;
        for layer in &self.layers {
            x = layer.forward(g, store, x, blocked.as_deref(), dropout)?;
        }
        Ok(EncodedSource { context: x, key_pad })
    }
}
