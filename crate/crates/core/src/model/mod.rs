//! Backbone-agnostic span-extraction model.
//!
//! [`SpanModel`] pairs an encoder with a QA head producing per-token start
//! and end logits. The encoder side is abstracted by [`EncoderBackbone`];
//! the bundled [`TinyEncoder`] implements it and is additionally trainable,
//! so staged fine-tuning, adapters, and the freeze contracts all run on CPU.
//! External pretrained backbones integrate for inference by implementing the
//! trait.

mod checkpoint;
mod encoder;
mod nn;
mod tokenizer;

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, MaskProvenance};
pub use encoder::{adapter_width, adapter_widths, EncoderTape, QAHead, TinyEncoder};
pub use nn::{act, act_grad, softmax_rows, ParamKind, Tensor, Visitor, VisitorMut};
pub use tokenizer::{TinyTokenizer, Token, CLS_ID, PAD_ID, RESERVED_IDS, SEP_ID, UNK_ID};

use crate::error::{Error, Result};
use crate::types::{AdapterConfig, HeadVariant, ModelConfig, Regime};

use encoder::HeadCache;

/// Mix a salt into a base seed (splitmix64 finalizer); used to derive
/// per-component and per-epoch RNG streams from one run seed.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Inference contract every encoder must satisfy: tokenization with char
/// offsets, hidden states for an id sequence, and named parameter
/// enumeration.
pub trait EncoderBackbone {
    fn hidden_size(&self) -> usize;
    fn layer_count(&self) -> usize;
    fn max_len(&self) -> usize;
    fn tokenize_with_offsets(&self, text: &str) -> Vec<Token>;
    /// Hidden states of shape `[tokens, hidden_size]`.
    fn encode(&self, ids: &[u32], segments: &[u8]) -> Array2<f64>;
    fn visit_params(&self, f: &mut Visitor<'_>);
    fn visit_params_mut(&mut self, f: &mut VisitorMut<'_>);
}

impl EncoderBackbone for TinyEncoder {
    fn hidden_size(&self) -> usize {
        self.config().hidden_size
    }

    fn layer_count(&self) -> usize {
        self.config().num_layers
    }

    fn max_len(&self) -> usize {
        self.config().max_len
    }

    fn tokenize_with_offsets(&self, text: &str) -> Vec<Token> {
        TinyEncoder::tokenize_with_offsets(self, text)
    }

    fn encode(&self, ids: &[u32], segments: &[u8]) -> Array2<f64> {
        self.forward_with_tape(ids, segments).0
    }

    fn visit_params(&self, f: &mut Visitor<'_>) {
        TinyEncoder::visit_params(self, f)
    }

    fn visit_params_mut(&mut self, f: &mut VisitorMut<'_>) {
        TinyEncoder::visit_params_mut(self, f)
    }
}

/// A question+context pair encoded as one sequence:
/// `[CLS] question [SEP] context [SEP]`. Position 0 is the no-answer anchor.
#[derive(Debug, Clone)]
pub struct EncodedInput {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    /// Char range into the raw context for context tokens, `None` for
    /// specials and question tokens.
    pub offsets: Vec<Option<(usize, usize)>>,
    pub no_answer_anchor: usize,
    /// Sequence positions holding context tokens.
    pub context_tokens: std::ops::Range<usize>,
    /// True when the context tail was cut to fit the length budget.
    pub truncated: bool,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Sequence position of the context token covering char `char_idx`.
    pub fn token_at_char(&self, char_idx: usize) -> Option<usize> {
        self.context_tokens.clone().find(|&pos| {
            self.offsets[pos]
                .map(|(s, e)| s <= char_idx && char_idx < e)
                .unwrap_or(false)
        })
    }

    /// Token positions whose char span lies inside `region` (a char range of
    /// the raw context). The result is a contiguous subrange of the context
    /// tokens.
    pub fn tokens_within(&self, region: &std::ops::Range<usize>) -> std::ops::Range<usize> {
        let mut start = self.context_tokens.end;
        let mut end = self.context_tokens.start;
        for pos in self.context_tokens.clone() {
            if let Some((s, e)) = self.offsets[pos] {
                if s >= region.start && e <= region.end {
                    start = start.min(pos);
                    end = end.max(pos + 1);
                }
            }
        }
        if start >= end {
            0..0
        } else {
            start..end
        }
    }
}

/// Per-token start and end logits.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
}

/// Activations recorded by a training forward pass.
pub struct ModelTape {
    encoder: EncoderTape,
    hidden: Array2<f64>,
    head: HeadCache,
}

/// Parameter paths selected for optimization; everything else stays frozen.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainableMask {
    paths: BTreeSet<String>,
}

impl TrainableMask {
    pub fn from_paths(paths: impl IntoIterator<Item = String>) -> Self {
        TrainableMask {
            paths: paths.into_iter().collect(),
        }
    }

    pub fn contains(&self, path: &str) -> bool {
        self.paths.contains(path)
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.paths.iter().map(String::as_str)
    }

    /// True when any non-head parameter is trainable, i.e. gradients must
    /// flow through the encoder.
    pub fn reaches_encoder(&self) -> bool {
        self.paths.iter().any(|p| !p.starts_with("head."))
    }
}

/// Encoder plus QA head.
pub struct SpanModel<B = TinyEncoder> {
    pub encoder: B,
    pub head: QAHead,
}

impl SpanModel<TinyEncoder> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let encoder = TinyEncoder::new(config, seed)?;
        let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x68_65_61_64));
        let head = QAHead::new(config, &mut head_rng);
        Ok(SpanModel { encoder, head })
    }

    pub fn config(&self) -> &ModelConfig {
        self.encoder.config()
    }

    pub fn has_adapters(&self) -> bool {
        self.encoder.has_adapters()
    }

    /// Insert zero-initialized bottleneck adapters into every encoder layer.
    pub fn insert_adapters(&mut self, adapter: &AdapterConfig, seed: u64) -> Result<()> {
        self.encoder
            .insert_adapters(adapter, derive_seed(seed, 0x61_64_61_70))
    }

    /// Draw a fresh head, leaving the encoder untouched.
    pub fn reinit_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x68_65_61_64));
        self.head = QAHead::new(self.encoder.config(), &mut rng);
    }

    /// Forward pass that records activations for [`SpanModel::backward`].
    /// Returns raw `[T, 2]` logits: column 0 start, column 1 end.
    pub fn forward_with_tape(&self, input: &EncodedInput) -> (Array2<f64>, ModelTape) {
        let (hidden, encoder_tape) = self
            .encoder
            .forward_with_tape(&input.ids, &input.segments);
        let (logits, head_cache) = self.head.forward(&hidden);
        (
            logits,
            ModelTape {
                encoder: encoder_tape,
                hidden,
                head: head_cache,
            },
        )
    }

    /// Accumulate gradients from `dlogits` (`[T, 2]`, start column then end
    /// column). With `encoder_grad` false only head gradients are computed.
    pub fn backward(
        &mut self,
        input: &EncodedInput,
        tape: &ModelTape,
        dlogits: &Array2<f64>,
        encoder_grad: bool,
    ) {
        let dhidden = self.head.backward(&tape.hidden, &tape.head, dlogits);
        if encoder_grad {
            self.encoder
                .backward(&input.ids, &input.segments, &tape.encoder, &dhidden);
        }
    }
}

impl<B: EncoderBackbone> SpanModel<B> {
    /// Tokenize and join a question+context pair. The question is never
    /// truncated; the context tail is cut to fit `max_len`, with the
    /// `truncated` flag recording the loss.
    pub fn encode_pair(&self, question: &str, context: &str) -> Result<EncodedInput> {
        let q_tokens = self.encoder.tokenize_with_offsets(question);
        let c_tokens = self.encoder.tokenize_with_offsets(context);
        let max_len = self.encoder.max_len();

        let overhead = 3 + q_tokens.len();
        if overhead > max_len {
            return Err(Error::Model(format!(
                "question occupies {} of {} positions; nothing left for the context",
                overhead, max_len
            )));
        }
        let budget = max_len - overhead;
        let keep = c_tokens.len().min(budget);
        let truncated = keep < c_tokens.len();

        let total = 3 + q_tokens.len() + keep;
        let mut ids = Vec::with_capacity(total);
        let mut segments = Vec::with_capacity(total);
        let mut offsets: Vec<Option<(usize, usize)>> = Vec::with_capacity(total);

        ids.push(CLS_ID);
        segments.push(0);
        offsets.push(None);
        for t in &q_tokens {
            ids.push(t.id);
            segments.push(0);
            offsets.push(None);
        }
        ids.push(SEP_ID);
        segments.push(0);
        offsets.push(None);

        let context_start = ids.len();
        for t in &c_tokens[..keep] {
            ids.push(t.id);
            segments.push(1);
            offsets.push(Some((t.start, t.end)));
        }
        let context_end = ids.len();
        ids.push(SEP_ID);
        segments.push(1);
        offsets.push(None);

        Ok(EncodedInput {
            ids,
            segments,
            offsets,
            no_answer_anchor: 0,
            context_tokens: context_start..context_end,
            truncated,
        })
    }

    /// Inference-only forward pass.
    pub fn forward(&self, input: &EncodedInput) -> ForwardOutput {
        let hidden = self.encoder.encode(&input.ids, &input.segments);
        let (logits, _) = self.head.forward(&hidden);
        split_logits(&logits)
    }

    pub fn visit_params(&self, f: &mut Visitor<'_>) {
        self.encoder.visit_params(f);
        self.head.visit(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut VisitorMut<'_>) {
        self.encoder.visit_params_mut(f);
        self.head.visit_mut(f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, _, t| t.zero_grad());
    }

    pub fn count_params(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, _, t| total += t.len());
        total
    }
}

fn split_logits(logits: &Array2<f64>) -> ForwardOutput {
    ForwardOutput {
        start_logits: logits.column(0).to_vec(),
        end_logits: logits.column(1).to_vec(),
    }
}

/// Select the trainable parameter set for a regime. The QA head trains in
/// every regime; a frozen random head cannot emit meaningful spans.
pub fn select_trainable<B: EncoderBackbone>(
    model: &SpanModel<B>,
    regime: Regime,
    bitfit_all_biases: bool,
) -> Result<TrainableMask> {
    let mut paths = BTreeSet::new();
    let mut saw_adapter = false;
    model.visit_params(&mut |path, kind, _| {
        let head = path.starts_with("head.");
        let adapter = path.contains(".adapter.");
        saw_adapter |= adapter;
        let selected = match regime {
            Regime::Full => true,
            Regime::HeadOnly => head,
            Regime::Bitfit => {
                head || kind == ParamKind::AttentionBias
                    || (bitfit_all_biases && kind != ParamKind::Weight)
            }
            Regime::Adapters => head || adapter,
        };
        if selected {
            paths.insert(path.to_string());
        }
    });
    if regime == Regime::Adapters && !saw_adapter {
        return Err(Error::Model(
            "adapters regime selected but no adapters are inserted".to_string(),
        ));
    }
    Ok(TrainableMask { paths })
}

/// Exact parameter count covered by `mask`.
pub fn count_trainable<B: EncoderBackbone>(model: &SpanModel<B>, mask: &TrainableMask) -> usize {
    let mut total = 0;
    model.visit_params(&mut |path, _, t| {
        if mask.contains(path) {
            total += t.len();
        }
    });
    total
}

/// Shape and kind of one planned parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedParam {
    pub path: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

impl PlannedParam {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Enumerate every parameter tensor a [`SpanModel`] built from `config`
/// (plus optional adapters) would hold, without allocating any of them.
/// Mirrors the construction order exactly; used for parameter accounting at
/// sizes too large to instantiate.
pub fn parameter_plan(config: &ModelConfig, adapter: Option<&AdapterConfig>) -> Vec<PlannedParam> {
    let e = config.hidden_size;
    let mut out = Vec::new();
    let mut push = |path: String, rows: usize, cols: usize, kind: ParamKind| {
        out.push(PlannedParam {
            path,
            rows,
            cols,
            kind,
        });
    };

    push("embed.token".into(), config.vocab_size, e, ParamKind::Weight);
    push("embed.position".into(), config.max_len, e, ParamKind::Weight);
    push("embed.segment".into(), 2, e, ParamKind::Weight);
    push("embed.norm.gamma".into(), 1, e, ParamKind::Weight);
    push("embed.norm.beta".into(), 1, e, ParamKind::OtherBias);

    let widths = adapter.map(|a| adapter_widths(config, a));
    for i in 0..config.num_layers {
        for proj in ["q", "k", "v", "out"] {
            push(
                format!("layer.{i}.attn.{proj}.weight"),
                e,
                e,
                ParamKind::Weight,
            );
            push(
                format!("layer.{i}.attn.{proj}.bias"),
                1,
                e,
                ParamKind::AttentionBias,
            );
        }
        push(format!("layer.{i}.attn.norm.gamma"), 1, e, ParamKind::Weight);
        push(format!("layer.{i}.attn.norm.beta"), 1, e, ParamKind::OtherBias);
        push(
            format!("layer.{i}.ffn.fc1.weight"),
            e,
            config.ffn_size,
            ParamKind::Weight,
        );
        push(
            format!("layer.{i}.ffn.fc1.bias"),
            1,
            config.ffn_size,
            ParamKind::OtherBias,
        );
        push(
            format!("layer.{i}.ffn.fc2.weight"),
            config.ffn_size,
            e,
            ParamKind::Weight,
        );
        push(format!("layer.{i}.ffn.fc2.bias"), 1, e, ParamKind::OtherBias);
        push(format!("layer.{i}.ffn.norm.gamma"), 1, e, ParamKind::Weight);
        push(format!("layer.{i}.ffn.norm.beta"), 1, e, ParamKind::OtherBias);
        if let Some(widths) = &widths {
            let w = widths[i];
            push(
                format!("layer.{i}.adapter.down.weight"),
                e,
                w,
                ParamKind::Weight,
            );
            push(format!("layer.{i}.adapter.down.bias"), 1, w, ParamKind::OtherBias);
            push(
                format!("layer.{i}.adapter.up.weight"),
                w,
                e,
                ParamKind::Weight,
            );
            push(format!("layer.{i}.adapter.up.bias"), 1, e, ParamKind::OtherBias);
        }
    }

    match config.head_variant {
        HeadVariant::Linear => {
            push("head.out.weight".into(), e, 2, ParamKind::Weight);
            push("head.out.bias".into(), 1, 2, ParamKind::OtherBias);
        }
        HeadVariant::Ffn2 => {
            push(
                "head.fc1.weight".into(),
                e,
                config.head_hidden_size,
                ParamKind::Weight,
            );
            push(
                "head.fc1.bias".into(),
                1,
                config.head_hidden_size,
                ParamKind::OtherBias,
            );
            push(
                "head.fc2.weight".into(),
                config.head_hidden_size,
                2,
                ParamKind::Weight,
            );
            push("head.fc2.bias".into(), 1, 2, ParamKind::OtherBias);
        }
    }

    out
}
