//! The bundled trainable encoder: embeddings plus post-norm transformer
//! layers, small enough to train on CPU but shaped like the real thing so
//! every pipeline contract is exercisable without an external backbone.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{AdapterConfig, ModelConfig, Nonlinearity};

use super::nn::{
    Adapter, AdapterCache, AttentionCache, FeedForward, FeedForwardCache, LayerNorm,
    LayerNormCache, Linear, MultiHeadAttention, ParamKind, Tensor, Visitor, VisitorMut,
};
use super::tokenizer::{TinyTokenizer, Token};

pub(crate) struct Embeddings {
    pub token: Tensor,
    pub position: Tensor,
    pub segment: Tensor,
    pub norm: LayerNorm,
}

pub(crate) struct EmbeddingsCache {
    ln: LayerNormCache,
}

impl Embeddings {
    fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        use super::nn::INIT_STD;
        Embeddings {
            token: Tensor::randn(config.vocab_size, config.hidden_size, INIT_STD, rng),
            position: Tensor::randn(config.max_len, config.hidden_size, INIT_STD, rng),
            segment: Tensor::randn(2, config.hidden_size, INIT_STD, rng),
            norm: LayerNorm::new(config.hidden_size),
        }
    }

    fn forward(&self, ids: &[u32], segments: &[u8]) -> (Array2<f64>, EmbeddingsCache) {
        let hidden = self.token.value.ncols();
        let mut x = Array2::zeros((ids.len(), hidden));
        for (t, (&id, &seg)) in ids.iter().zip(segments).enumerate() {
            let tok_row = self.token.value.row(id as usize);
            let pos_row = self.position.value.row(t);
            let seg_row = self.segment.value.row(seg as usize);
            let mut out = x.row_mut(t);
            for c in 0..hidden {
                out[c] = tok_row[c] + pos_row[c] + seg_row[c];
            }
        }
        let (y, ln) = self.norm.forward(&x);
        (y, EmbeddingsCache { ln })
    }

    fn backward(&mut self, ids: &[u32], segments: &[u8], cache: &EmbeddingsCache, dy: &Array2<f64>) {
        let dx = self.norm.backward(&cache.ln, dy);
        for (t, (&id, &seg)) in ids.iter().zip(segments).enumerate() {
            let src = dx.row(t);
            let mut tok = self.token.grad.row_mut(id as usize);
            tok += &src;
            let mut pos = self.position.grad.row_mut(t);
            pos += &src;
            let mut sg = self.segment.grad.row_mut(seg as usize);
            sg += &src;
        }
    }

    fn visit(&self, f: &mut Visitor<'_>) {
        f("embed.token", ParamKind::Weight, &self.token);
        f("embed.position", ParamKind::Weight, &self.position);
        f("embed.segment", ParamKind::Weight, &self.segment);
        self.norm.visit("embed.norm", f);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        f("embed.token", ParamKind::Weight, &mut self.token);
        f("embed.position", ParamKind::Weight, &mut self.position);
        f("embed.segment", ParamKind::Weight, &mut self.segment);
        self.norm.visit_mut("embed.norm", f);
    }
}

pub(crate) struct EncoderLayer {
    attn: MultiHeadAttention,
    attn_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
    adapter: Option<Adapter>,
}

pub(crate) struct EncoderLayerCache {
    x: Array2<f64>,
    attn: AttentionCache,
    attn_ln: LayerNormCache,
    h1: Array2<f64>,
    ffn: FeedForwardCache,
    ffn_ln: LayerNormCache,
    adapter: Option<AdapterCache>,
}

impl EncoderLayer {
    fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(config.hidden_size, config.num_heads, rng),
            attn_norm: LayerNorm::new(config.hidden_size),
            ffn: FeedForward::new(
                config.hidden_size,
                config.ffn_size,
                Nonlinearity::Gelu,
                rng,
            ),
            ffn_norm: LayerNorm::new(config.hidden_size),
            adapter: None,
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, EncoderLayerCache) {
        let (a, attn_cache) = self.attn.forward(x);
        let (h1, attn_ln) = self.attn_norm.forward(&(x + &a));
        let (ff, ffn_cache) = self.ffn.forward(&h1);
        let (h2, ffn_ln) = self.ffn_norm.forward(&(&h1 + &ff));
        let (y, adapter_cache) = match &self.adapter {
            Some(adapter) => {
                let (y, c) = adapter.forward(&h2);
                (y, Some(c))
            }
            None => (h2, None),
        };
        (
            y,
            EncoderLayerCache {
                x: x.clone(),
                attn: attn_cache,
                attn_ln,
                h1,
                ffn: ffn_cache,
                ffn_ln,
                adapter: adapter_cache,
            },
        )
    }

    fn backward(&mut self, cache: &EncoderLayerCache, dy: &Array2<f64>) -> Array2<f64> {
        let dh2 = match (&mut self.adapter, &cache.adapter) {
            (Some(adapter), Some(acache)) => adapter.backward(acache, dy),
            _ => dy.clone(),
        };
        let dsum2 = self.ffn_norm.backward(&cache.ffn_ln, &dh2);
        let dh1_from_ffn = self.ffn.backward(&cache.h1, &cache.ffn, &dsum2);
        let dh1 = &dsum2 + &dh1_from_ffn;
        let dsum1 = self.attn_norm.backward(&cache.attn_ln, &dh1);
        let dx_from_attn = self.attn.backward(&cache.x, &cache.attn, &dsum1);
        &dsum1 + &dx_from_attn
    }

    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.attn_norm.visit(&format!("{prefix}.attn.norm"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
        self.ffn_norm.visit(&format!("{prefix}.ffn.norm"), f);
        if let Some(adapter) = &self.adapter {
            adapter.visit(&format!("{prefix}.adapter"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.attn_norm.visit_mut(&format!("{prefix}.attn.norm"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
        self.ffn_norm.visit_mut(&format!("{prefix}.ffn.norm"), f);
        if let Some(adapter) = &mut self.adapter {
            adapter.visit_mut(&format!("{prefix}.adapter"), f);
        }
    }
}

/// Bottleneck width for a hidden size and reduction factor, rounding to the
/// nearest integer and never below one.
pub fn adapter_width(hidden_size: usize, reduction_factor: usize) -> usize {
    ((hidden_size + reduction_factor / 2) / reduction_factor).max(1)
}

/// Per-layer bottleneck widths: the boundary factor on the first and last
/// layers, the default factor elsewhere.
pub fn adapter_widths(config: &ModelConfig, adapter: &AdapterConfig) -> Vec<usize> {
    (0..config.num_layers)
        .map(|i| {
            let boundary = i == 0 || i + 1 == config.num_layers;
            let factor = if boundary {
                adapter.boundary_reduction_factor
            } else {
                adapter.default_reduction_factor
            };
            adapter_width(config.hidden_size, factor)
        })
        .collect()
}

/// The bundled trainable transformer encoder.
pub struct TinyEncoder {
    config: ModelConfig,
    tokenizer: TinyTokenizer,
    embeddings: Embeddings,
    layers: Vec<EncoderLayer>,
    adapter_config: Option<AdapterConfig>,
}

/// Activations recorded by [`TinyEncoder::forward_with_tape`], consumed by
/// the backward pass.
pub struct EncoderTape {
    emb: EmbeddingsCache,
    layers: Vec<EncoderLayerCache>,
}

impl TinyEncoder {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate().map_err(Error::Model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = Embeddings::new(config, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::new(config, &mut rng))
            .collect();
        Ok(TinyEncoder {
            tokenizer: TinyTokenizer::new(config.tokenizer.clone(), config.vocab_size),
            config: config.clone(),
            embeddings,
            layers,
            adapter_config: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &TinyTokenizer {
        &self.tokenizer
    }

    pub fn adapter_config(&self) -> Option<&AdapterConfig> {
        self.adapter_config.as_ref()
    }

    pub fn has_adapters(&self) -> bool {
        self.adapter_config.is_some()
    }

    /// Insert one zero-initialized bottleneck per layer, after the
    /// feed-forward sublayer. Existing parameters are untouched and the
    /// forward pass is unchanged until the adapters train.
    pub fn insert_adapters(&mut self, adapter: &AdapterConfig, seed: u64) -> Result<()> {
        if self.adapter_config.is_some() {
            return Err(Error::Model("adapters already inserted".to_string()));
        }
        if self.config.num_layers < 2 {
            return Err(Error::Model(
                "adapter insertion needs at least 2 encoder layers".to_string(),
            ));
        }
        let max_factor = adapter
            .default_reduction_factor
            .max(adapter.boundary_reduction_factor);
        if max_factor > self.config.hidden_size {
            return Err(Error::Model(format!(
                "reduction factor {max_factor} exceeds hidden size {}",
                self.config.hidden_size
            )));
        }
        if adapter.default_reduction_factor == 0 || adapter.boundary_reduction_factor == 0 {
            return Err(Error::Model("reduction factors must be positive".to_string()));
        }
        let widths = adapter_widths(&self.config, adapter);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (layer, width) in self.layers.iter_mut().zip(widths) {
            layer.adapter = Some(Adapter::new(
                self.config.hidden_size,
                width,
                adapter.nonlinearity,
                &mut rng,
            ));
        }
        self.adapter_config = Some(*adapter);
        Ok(())
    }

    pub fn forward_with_tape(&self, ids: &[u32], segments: &[u8]) -> (Array2<f64>, EncoderTape) {
        debug_assert_eq!(ids.len(), segments.len());
        let (mut x, emb) = self.embeddings.forward(ids, segments);
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x);
            layer_caches.push(cache);
            x = y;
        }
        (
            x,
            EncoderTape {
                emb,
                layers: layer_caches,
            },
        )
    }

    /// Accumulate gradients for `d_hidden` flowing back from the head.
    pub fn backward(
        &mut self,
        ids: &[u32],
        segments: &[u8],
        tape: &EncoderTape,
        d_hidden: &Array2<f64>,
    ) {
        let mut grad = d_hidden.clone();
        for (layer, cache) in self.layers.iter_mut().zip(&tape.layers).rev() {
            grad = layer.backward(cache, &grad);
        }
        self.embeddings.backward(ids, segments, &tape.emb, &grad);
    }

    pub fn visit_params(&self, f: &mut Visitor<'_>) {
        self.embeddings.visit(f);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layer.{i}"), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut VisitorMut<'_>) {
        self.embeddings.visit_mut(f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("layer.{i}"), f);
        }
    }

    pub fn tokenize_with_offsets(&self, text: &str) -> Vec<Token> {
        self.tokenizer.tokenize(text)
    }
}

/// The QA head: per-token start and end logits on top of the encoder.
pub enum QAHead {
    Linear {
        out: Linear,
    },
    Ffn2 {
        fc1: Linear,
        fc2: Linear,
        activation: Nonlinearity,
    },
}

pub enum HeadCache {
    Linear,
    Ffn2 {
        pre: Array2<f64>,
        hidden: Array2<f64>,
    },
}

impl QAHead {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        match config.head_variant {
            crate::types::HeadVariant::Linear => QAHead::Linear {
                out: Linear::new(config.hidden_size, 2, rng),
            },
            crate::types::HeadVariant::Ffn2 => QAHead::Ffn2 {
                fc1: Linear::new(config.hidden_size, config.head_hidden_size, rng),
                fc2: Linear::new(config.head_hidden_size, 2, rng),
                activation: Nonlinearity::Gelu,
            },
        }
    }

    /// `[T, E] -> [T, 2]`: column 0 holds start logits, column 1 end logits.
    pub fn forward(&self, hidden: &Array2<f64>) -> (Array2<f64>, HeadCache) {
        match self {
            QAHead::Linear { out } => (out.forward(hidden), HeadCache::Linear),
            QAHead::Ffn2 {
                fc1,
                fc2,
                activation,
            } => {
                let pre = fc1.forward(hidden);
                let h = pre.mapv(|v| super::nn::act(*activation, v));
                let logits = fc2.forward(&h);
                (logits, HeadCache::Ffn2 { pre, hidden: h })
            }
        }
    }

    pub fn backward(
        &mut self,
        hidden: &Array2<f64>,
        cache: &HeadCache,
        dlogits: &Array2<f64>,
    ) -> Array2<f64> {
        match (self, cache) {
            (QAHead::Linear { out }, HeadCache::Linear) => out.backward(hidden, dlogits),
            (
                QAHead::Ffn2 {
                    fc1,
                    fc2,
                    activation,
                },
                HeadCache::Ffn2 { pre, hidden: h },
            ) => {
                let dh = fc2.backward(h, dlogits);
                let mut dpre = dh;
                dpre.zip_mut_with(pre, |d, &p| *d *= super::nn::act_grad(*activation, p));
                fc1.backward(hidden, &dpre)
            }
            _ => unreachable!("head cache variant mismatch"),
        }
    }

    pub fn visit(&self, f: &mut Visitor<'_>) {
        match self {
            QAHead::Linear { out } => out.visit("head.out", ParamKind::OtherBias, f),
            QAHead::Ffn2 { fc1, fc2, .. } => {
                fc1.visit("head.fc1", ParamKind::OtherBias, f);
                fc2.visit("head.fc2", ParamKind::OtherBias, f);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        match self {
            QAHead::Linear { out } => out.visit_mut("head.out", ParamKind::OtherBias, f),
            QAHead::Ffn2 { fc1, fc2, .. } => {
                fc1.visit_mut("head.fc1", ParamKind::OtherBias, f);
                fc2.visit_mut("head.fc2", ParamKind::OtherBias, f);
            }
        }
    }
}
