//! Non-autoregressive student.
//!
//! Decoder inputs are soft copies of the source embeddings, each a Gaussian
//! position-kernel average. Every decoder layer runs unmasked self-attention,
//! positional attention, encoder-decoder attention and an FFN, so all target
//! positions come out of a single forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    attention_mask, embed_rows_with_position, positional_encoding, Dropout, Encoder, FeedForward, LayerNorm,
    ModelConfig, MultiHeadAttention,
};
use crate::rng::{stream, Purpose};
use crate::teacher::{argmax, Counter, DecoderTrace, DecoderVars};
use crate::tensor::{Graph, NdArray, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftCopyConfig {
    /// Kernel sharpness τ.
    pub tau: f64,
}

impl Default for SoftCopyConfig {
    fn default() -> Self {
        Self { tau: 0.3 }
    }
}

impl SoftCopyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau > 0.0 && self.tau.is_finite() {
            Ok(())
        } else {
            Err(Error::config(format!("soft-copy tau must be positive, got {}", self.tau)))
        }
    }
}

/// Student traces share the teacher's layout.
pub type StudentTrace = DecoderTrace;

/// `T_x × T_y` weights; column `j` is the convex combination used for `z_j`.
///
/// `w_ij ∝ exp(−(j − (T_y/T_x)·i)² / τ)` with 1-based `i`, `j`, normalized over
/// `i`. The maximum exponent is subtracted per column before `exp`.
pub fn soft_copy_weights(t_x: usize, t_y: usize, tau: f64) -> NdArray {
    assert!(t_x >= 1 && t_y >= 1 && tau > 0.0);
    let ratio = t_y as f64 / t_x as f64;
    let mut w = NdArray::zeros(&[t_x, t_y]);
    for j in 1..=t_y {
        let logits: Vec<f64> = (1..=t_x)
            .map(|i| {
                let d = j as f64 - ratio * i as f64;
                -(d * d) / tau
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (i, e) in exps.iter().enumerate() {
            w.set(&[i, j - 1], e / total);
        }
    }
    w
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    pos_attn: MultiHeadAttention,
    pos_norm: LayerNorm,
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
            pos_attn: MultiHeadAttention::new(store, &format!("{prefix}.pos"), cfg, rng),
            pos_norm: LayerNorm::new(store, &format!("{prefix}.pos_norm"), cfg.d_model),
            cross_attn: MultiHeadAttention::new(store, &format!("{prefix}.cross"), cfg, rng),
            cross_norm: LayerNorm::new(store, &format!("{prefix}.cross_norm"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), cfg, rng),
            ffn_norm: LayerNorm::new(store, &format!("{prefix}.ffn_norm"), cfg.d_model),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Student {
    config: ModelConfig,
    soft_copy: SoftCopyConfig,
    params: ParamStore,
    encoder: Encoder,
    layers: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
    decoder_passes: Counter,
}

impl Student {
    pub fn new(config: ModelConfig, soft_copy: SoftCopyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        soft_copy.validate()?;
        let mut rng = stream(seed, Purpose::Init, 1);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &config, &mut rng);
        let layers = (0..config.dec_layers)
            .map(|l| DecoderLayer::new(&mut params, &format!("dec.{l}"), &config, &mut rng))
            .collect();
        let out_w = params.add_xavier("out.w", config.d_model, config.tgt_vocab, &mut rng);
        let out_b = params.add("out.b", NdArray::zeros(&[config.tgt_vocab]));
        Ok(Self {
            config,
            soft_copy,
            params,
            encoder,
            layers,
            out_w,
            out_b,
            decoder_passes: Counter::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn soft_copy(&self) -> SoftCopyConfig {
        self.soft_copy
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Decoder passes made by [`Student::parallel_decode_forward`].
    pub fn decoder_passes(&self) -> &Counter {
        &self.decoder_passes
    }

    /// `z_j = Σ_i w_ij · e(x_i)` using the raw source embeddings.
    pub fn build_decoder_input(&self, src: &[usize], t_y: usize) -> Result<NdArray> {
        let mut g = Graph::new();
        let z = self.soft_copy_graph(&mut g, src, t_y)?;
        Ok(g.value(z).clone())
    }

    fn soft_copy_graph(&self, g: &mut Graph, src: &[usize], t_y: usize) -> Result<crate::tensor::Var> {
        if t_y == 0 {
            return Err(Error::input("target length must be at least 1"));
        }
        if t_y > self.config.max_len {
            return Err(Error::input(format!("target length {t_y} exceeds max_len {}", self.config.max_len)));
        }
        self.encoder.check_source(src)?;
        let w = soft_copy_weights(src.len(), t_y, self.soft_copy.tau).transpose()?;
        let w = g.constant(w)?;
        let table = g.param(&self.params, self.encoder.embedding());
        let e = g.gather(table, src)?;
        Ok(g.matmul(w, e)?)
    }

    /// Records the whole student for source `src` and target length `t_y`.
    pub fn forward_graph(&self, g: &mut Graph, src: &[usize], t_y: usize, dropout: &mut Dropout) -> Result<DecoderVars> {
        let d = self.config.d_model;
        let z = self.soft_copy_graph(g, src, t_y)?;
        let enc = self.encoder.forward(g, &self.params, src, dropout)?;
        let cross = attention_mask(t_y, src.len(), false, Some(&enc.key_pad))?;
        let mut x = embed_rows_with_position(g, z, d)?;
        x = dropout.apply(g, x)?;
        let pe = g.constant(positional_encoding(t_y, d))?;
        let mut hidden = Vec::with_capacity(self.layers.len());
        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, _) = layer.self_attn.forward(g, &self.params, x, x, x, None, dropout)?;
            x = layer.self_norm.residual(g, &self.params, x, a, dropout)?;
            let (p, _) = layer.pos_attn.forward(g, &self.params, pe, pe, x, None, dropout)?;
            x = layer.pos_norm.residual(g, &self.params, x, p, dropout)?;
            let (c, heads) = layer
                .cross_attn
                .forward(g, &self.params, x, enc.context, enc.context, cross.as_deref(), dropout)?;
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

    /// One decoder pass producing logits for all `t_y` positions at once.
    pub fn parallel_decode_forward(&self, src: &[usize], t_y: usize) -> Result<StudentTrace> {
        let mut g = Graph::new();
        let vars = self.forward_graph(&mut g, src, t_y, &mut Dropout::off())?;
        self.decoder_passes.incr();
        vars.to_trace(&g)
    }
}

/// Independent per-position argmax; ties go to the smallest id.
pub fn predict_tokens(trace: &StudentTrace) -> Vec<usize> {
    let logits = &trace.logits;
    (0..logits.rows()).map(|t| argmax(logits.row(t))).collect()
}
