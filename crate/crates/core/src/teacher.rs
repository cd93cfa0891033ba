//! Autoregressive Transformer teacher.
//!
//! The decoder runs causal self-attention, encoder-decoder attention and a
//! feed-forward block per layer. Forced decoding over a full target is a single
//! parallel pass; greedy decoding re-runs the decoder once per emitted token.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    attention_mask, embed_with_position, special, Dropout, Encoder, FeedForward, LayerNorm, ModelConfig,
    MultiHeadAttention,
};
use crate::rng::{stream, Purpose};
use crate::tensor::{Graph, NdArray, ParamId, ParamStore, Var};

/// Monotone counter that survives `Clone` by copying its current value.
#[derive(Debug, Default)]
pub struct Counter(AtomicU64);

impl Counter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn incr(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for Counter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

/// Encoder outputs `T_x × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextStates {
    pub states: NdArray,
}

/// Per-layer decoder hidden states and encoder-decoder attention.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderTrace {
    /// `N × T_y × d_model`, each layer's output after its FFN sublayer.
    pub hidden: NdArray,
    /// `N × H × T_y × T_x`
    pub attn: NdArray,
    /// `T_y × V_tgt`
    pub logits: NdArray,
}

impl DecoderTrace {
    pub fn layers(&self) -> usize {
        self.hidden.shape()[0]
    }

    pub fn target_len(&self) -> usize {
        self.hidden.shape()[1]
    }

    /// Hidden states of one layer (0-based) as `T_y × d_model`.
    pub fn layer_hidden(&self, layer: usize) -> NdArray {
        self.hidden.slice_first(layer)
    }

    /// `T_y × T_x` attention of one (layer, head), both 0-based.
    pub fn head_attention(&self, layer: usize, head: usize) -> NdArray {
        self.attn.slice_first(layer).slice_first(head)
    }
}

/// Graph handles produced by one decoder pass.
#[derive(Debug)]
pub struct DecoderVars {
    /// One `T_y × d_model` node per layer.
    pub hidden: Vec<Var>,
    /// `[layer][head]`, each `T_y × T_x`.
    pub attn: Vec<Vec<Var>>,
    pub logits: Var,
}

impl DecoderVars {
    pub fn to_trace(&self, g: &Graph) -> Result<DecoderTrace> {
        let hidden = NdArray::stack(&self.hidden.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>())?;
        let layers = self
            .attn
            .iter()
            .map(|heads| NdArray::stack(&heads.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DecoderTrace {
            hidden,
            attn: NdArray::stack(&layers)?,
            logits: g.value(self.logits).clone(),
        })
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(store, &format!("{prefix}.self"), cfg, rng),
            self_norm: LayerNorm::new(store, &format!("{prefix}.self_norm"), cfg.d_model),
            cross_attn: MultiHeadAttention::new(store, &format!("{prefix}.cross"), cfg, rng),
            cross_norm: LayerNorm::new(store, &format!("{prefix}.cross_norm"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), cfg, rng),
            ffn_norm: LayerNorm::new(store, &format!("{prefix}.ffn_norm"), cfg.d_model),
        }
    }
}

/// Output of [`Teacher::greedy_decode`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GreedyOutput {
    /// Every emitted token, including a final end-of-sequence if one was produced.
    pub emitted: Vec<usize>,
    /// Sequential decoder passes; always `emitted.len()`.
    pub steps: usize,
}

impl GreedyOutput {
    /// Emitted tokens without the end-of-sequence marker.
    pub fn tokens(&self) -> &[usize] {
        match self.emitted.last() {
            Some(&special::EOS) => &self.emitted[..self.emitted.len() - 1],
            _ => &self.emitted,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Teacher {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    tgt_embed: ParamId,
    layers: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
    decoder_passes: Counter,
    trace_calls: Counter,
    score_calls: Counter,
}

impl Teacher {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Purpose::Init, 0);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &config, &mut rng);
        let tgt_embed = params.add_normal(
            "dec.embed",
            &[config.tgt_vocab, config.d_model],
            (config.d_model as f64).powf(-0.5),
            &mut rng,
        );
        let layers = (0..config.dec_layers)
            .map(|l| DecoderLayer::new(&mut params, &format!("dec.{l}"), &config, &mut rng))
            .collect();
        let out_w = params.add_xavier("out.w", config.d_model, config.tgt_vocab, &mut rng);
        let out_b = params.add("out.b", NdArray::zeros(&[config.tgt_vocab]));
        Ok(Self {
            config,
            params,
            encoder,
            tgt_embed,
            layers,
            out_w,
            out_b,
            decoder_passes: Counter::default(),
            trace_calls: Counter::default(),
            score_calls: Counter::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sequential decoder passes performed by [`Teacher::greedy_decode`].
    pub fn decoder_passes(&self) -> &Counter {
        &self.decoder_passes
    }

    /// Forced-decode traces produced for hint extraction.
    pub fn trace_calls(&self) -> &Counter {
        &self.trace_calls
    }

    /// Calls to [`Teacher::score_sequence`].
    pub fn score_calls(&self) -> &Counter {
        &self.score_calls
    }

    fn check_target(&self, tgt: &[usize]) -> Result<()> {
        if tgt.is_empty() {
            return Err(Error::input("empty target sentence"));
        }
        if tgt.len() > self.config.max_len {
            return Err(Error::input(format!(
                "target length {} exceeds max_len {}",
                tgt.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = tgt.iter().find(|&&t| t >= self.config.tgt_vocab) {
            return Err(Error::input(format!("target token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Decoder input for predicting `tgt`: begin-of-sequence then `tgt[..T-1]`.
    pub fn shift_right(tgt: &[usize]) -> Vec<usize> {
        std::iter::once(special::BOS)
            .chain(tgt.iter().copied().take(tgt.len().saturating_sub(1)))
            .collect()
    }

    /// Records encoder and decoder for a teacher-forced pass over `tgt`.
    pub fn forward_graph(&self, g: &mut Graph, src: &[usize], tgt: &[usize], dropout: &mut Dropout) -> Result<DecoderVars> {
        self.check_target(tgt)?;
        let enc = self.encoder.forward(g, &self.params, src, dropout)?;
        self.decode_graph(g, enc.context, &enc.key_pad, &Self::shift_right(tgt), dropout)
    }

    fn decode_graph(&self, g: &mut Graph, context: Var, key_pad: &[bool], dec_in: &[usize], dropout: &mut Dropout) -> Result<DecoderVars> {
        let d = self.config.d_model;
        let t_y = dec_in.len();
        let causal = attention_mask(t_y, t_y, true, None)?;
        let cross = attention_mask(t_y, key_pad.len(), false, Some(key_pad))?;
        let table = g.param(&self.params, self.tgt_embed);
        let mut x = embed_with_position(g, table, dec_in, d)?;
        x = dropout.apply(g, x)?;
        let mut hidden = Vec::with_capacity(self.layers.len());
        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, _) = layer.self_attn.forward(g, &self.params, x, x, x, causal.as_deref(), dropout)?;
            x = layer.self_norm.residual(g, &self.params, x, a, dropout)?;
            let (c, heads) = layer
                .cross_attn
                .forward(g, &self.params, x, context, context, cross.as_deref(), dropout)?;
            x = layer.cross_norm.residual(g, &self.params, x, c, dropout)?;
            let f = layer.ffn.forward(g, &self.params, x, dropout)?;
            x = layer.ffn_norm.residual(g, &self.params, x, f, dropout)?;
            hidden.push(x);
            attn.push(heads);
        }
        let w = g.param(&self.params, self.out_w);
        let b = g.param(&self.params, self.out_b);
        let logits = g.matmul(x, w)?;
        let logits = g.add_row(logits, b)?;
        Ok(DecoderVars { hidden, attn, logits })
    }

    pub fn encode(&self, src: &[usize]) -> Result<ContextStates> {
        let mut g = Graph::new();
        let enc = self.encoder.forward(&mut g, &self.params, src, &mut Dropout::off())?;
        Ok(ContextStates {
            states: g.value(enc.context).clone(),
        })
    }

    /// Teacher-forced pass over `tgt`; position `t` sees only `tgt[..t]`.
    pub fn forced_decode(&self, src: &[usize], tgt: &[usize]) -> Result<DecoderTrace> {
        let mut g = Graph::new();
        let vars = self.forward_graph(&mut g, src, tgt, &mut Dropout::off())?;
        vars.to_trace(&g)
    }

    /// Forced decode used as a hint source; counted separately.
    pub fn hint_trace(&self, src: &[usize], tgt: &[usize]) -> Result<DecoderTrace> {
        self.trace_calls.incr();
        self.forced_decode(src, tgt)
    }

    /// `Σ_t log P(tgt_t | tgt_<t, src)` in one parallel pass.
    pub fn score_sequence(&self, src: &[usize], tgt: &[usize]) -> Result<f64> {
        self.score_calls.incr();
        let trace = self.forced_decode(src, tgt)?;
        Ok(sequence_log_prob(&trace.logits, tgt))
    }

    /// Appends the argmax token until end-of-sequence or `max_len` tokens.
    pub fn greedy_decode(&self, src: &[usize], max_len: usize) -> Result<GreedyOutput> {
        if max_len > self.config.max_len {
            return Err(Error::input(format!(
                "max_len {max_len} exceeds model limit {}",
                self.config.max_len
            )));
        }
        let mut g = Graph::new();
        let enc = self.encoder.forward(&mut g, &self.params, src, &mut Dropout::off())?;
        let context = g.value(enc.context).clone();
        let mut emitted = Vec::new();
        let mut dec_in = vec![special::BOS];
        while emitted.len() < max_len {
            let mut g = Graph::new();
            let ctx = g.constant(context.clone())?;
            let vars = self.decode_graph(&mut g, ctx, &enc.key_pad, &dec_in, &mut Dropout::off())?;
            self.decoder_passes.incr();
            let logits = g.value(vars.logits);
            let next = argmax(logits.row(logits.rows() - 1));
            emitted.push(next);
            if next == special::EOS {
                break;
            }
            dec_in.push(next);
        }
        let steps = emitted.len();
        Ok(GreedyOutput { emitted, steps })
    }
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Sum of per-position log-softmax entries at the given tokens.
pub fn sequence_log_prob(logits: &NdArray, tokens: &[usize]) -> f64 {
    tokens
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row = logits.row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row[y] - lse
        })
        .sum()
}
