//! Span decoding: start/end logits to a span prediction or an explicit
//! no-answer, constrained to a valid token region.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{QADataset, SLDataset};
use crate::error::Result;
use crate::model::{EncodedInput, EncoderBackbone, SpanModel};
use crate::reformulate::{self, ContextMode, PromptSpec};
use crate::text;
use crate::types::SpanPrediction;

fn default_max_span() -> usize {
    30
}

/// Decoding knobs: the span-length cap keeps degenerate whole-context spans
/// out, and the threshold biases the answer/no-answer decision.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecodeConfig {
    #[serde(default = "default_max_span")]
    pub max_span_tokens: usize,
    /// No-answer margin: the decoder returns no-answer whenever
    /// `no_answer_score + threshold >= best span score`.
    #[serde(default)]
    pub no_answer_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_span_tokens: default_max_span(),
            no_answer_threshold: 0.0,
        }
    }
}

/// Best span by additive logit score over pairs `(i, j)` with `i <= j`,
/// `j - i < max_span_tokens`, both inside `valid`; the no-answer hypothesis
/// scores `start[anchor] + end[anchor]`. Ties break to the earliest start,
/// then the shortest span. An empty valid region always yields no-answer.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    start_logits: &[f64],
    end_logits: &[f64],
    valid: Range<usize>,
    anchor: usize,
    offsets: &[Option<(usize, usize)>],
    context: &str,
    qid: &str,
    cfg: &DecodeConfig,
) -> SpanPrediction {
    debug_assert_eq!(start_logits.len(), end_logits.len());
    let no_answer_score = start_logits[anchor] + end_logits[anchor];

    let mut best: Option<(f64, usize, usize)> = None;
    for i in valid.clone() {
        let j_cap = valid.end.min(i + cfg.max_span_tokens);
        for j in i..j_cap {
            let score = start_logits[i] + end_logits[j];
            if best.map(|(s, _, _)| score > s).unwrap_or(true) {
                best = Some((score, i, j));
            }
        }
    }

    match best {
        Some((score, i, j)) if no_answer_score + cfg.no_answer_threshold < score => {
            let (char_start, _) = offsets[i].expect("valid region token has offsets");
            let (_, char_end) = offsets[j].expect("valid region token has offsets");
            let span_text = text::char_slice(context, char_start, char_end)
                .unwrap_or_default()
                .to_string();
            SpanPrediction {
                qid: qid.to_string(),
                text: Some(span_text),
                start: Some(char_start),
                end: Some(char_end),
                score,
                no_answer_score,
            }
        }
        Some((score, _, _)) => SpanPrediction {
            qid: qid.to_string(),
            text: None,
            start: None,
            end: None,
            score,
            no_answer_score,
        },
        None => SpanPrediction {
            qid: qid.to_string(),
            text: None,
            start: None,
            end: None,
            score: no_answer_score,
            no_answer_score,
        },
    }
}

/// Run the model over one encoded example and decode within `valid_chars`
/// (a char range of the raw context; the whole context when `None`).
pub fn decode_example<B: EncoderBackbone>(
    model: &SpanModel<B>,
    input: &EncodedInput,
    context: &str,
    qid: &str,
    valid_chars: Option<&Range<usize>>,
    cfg: &DecodeConfig,
) -> SpanPrediction {
    let output = model.forward(input);
    let valid = match valid_chars {
        Some(region) => input.tokens_within(region),
        None => input.context_tokens.clone(),
    };
    decode(
        &output.start_logits,
        &output.end_logits,
        valid,
        input.no_answer_anchor,
        &input.offsets,
        context,
        qid,
        cfg,
    )
}

/// Element-wise decode over a QA dataset, order-preserving and
/// deterministic.
pub fn batch_decode<B: EncoderBackbone + Sync>(
    model: &SpanModel<B>,
    qa: &QADataset,
    cfg: &DecodeConfig,
) -> Result<Vec<SpanPrediction>> {
    let inputs: Vec<EncodedInput> = qa
        .examples
        .iter()
        .map(|ex| model.encode_pair(&ex.question, &ex.context))
        .collect::<Result<_>>()?;
    Ok(qa
        .examples
        .par_iter()
        .zip(inputs.par_iter())
        .map(|(ex, input)| decode_example(model, input, &ex.context, &ex.qid, None, cfg))
        .collect())
}

/// Slot predictions for a whole SL dataset: one prediction per (turn, slot)
/// pair in dataset order, spans constrained to the user-utterance region of
/// the context. Offsets in the result are context coordinates.
pub fn predict_dataset<B: EncoderBackbone + Sync>(
    model: &SpanModel<B>,
    ds: &SLDataset,
    spec: &PromptSpec,
    mode: ContextMode,
    include_requested: bool,
    cfg: &DecodeConfig,
) -> Result<Vec<SpanPrediction>> {
    struct Job {
        qid: String,
        context: String,
        user_region: Range<usize>,
        input: EncodedInput,
    }

    let mut jobs = Vec::with_capacity(ds.turns.len() * ds.ontology.slots.len());
    for turn in &ds.turns {
        let built = reformulate::build_context(turn, mode);
        let requested: &[String] = if include_requested {
            &turn.requested_slots
        } else {
            &[]
        };
        for slot in ds.ontology.slots.keys() {
            let question = reformulate::build_question(slot, &ds.ontology)?;
            let question = reformulate::augment_with_requested(question, requested, spec);
            let input = model.encode_pair(&question, &built.context)?;
            jobs.push(Job {
                qid: format!("{}:{slot}", turn.turn_id),
                context: built.context.clone(),
                user_region: built.user_region.clone(),
                input,
            });
        }
    }

    Ok(jobs
        .par_iter()
        .map(|job| {
            decode_example(
                model,
                &job.input,
                &job.context,
                &job.qid,
                Some(&job.user_region),
                cfg,
            )
        })
        .collect())
}

/// Serialize predictions as JSON lines, one prediction per line.
pub fn emit_predictions_jsonl(preds: &[SpanPrediction]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut out, p).expect("prediction serialization");
        out.push(b'\n');
    }
    out
}

/// Parse JSON-lines predictions; blank lines are ignored.
pub fn parse_predictions_jsonl(bytes: &[u8], origin: &str) -> Result<Vec<SpanPrediction>> {
    let textual = std::str::from_utf8(bytes)
        .map_err(|_| crate::Error::parse(origin, "predictions file is not UTF-8"))?;
    let mut out = Vec::new();
    for (lineno, line) in textual.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pred: SpanPrediction = serde_json::from_str(line)
            .map_err(|e| crate::Error::parse(origin, format!("line {}: {e}", lineno + 1)))?;
        out.push(pred);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ModelConfig;
    use crate::types::QAExample;

    /// Independent reference decoder: exhaustive search over all valid
    /// pairs, replicating the documented tie-break (earliest start, then
    /// shortest span).
    pub(crate) fn brute_force(
        start_logits: &[f64],
        end_logits: &[f64],
        valid: Range<usize>,
        anchor: usize,
        cfg: &DecodeConfig,
    ) -> Option<(usize, usize)> {
        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for i in valid.clone() {
            for j in valid.clone() {
                if i <= j && j - i < cfg.max_span_tokens {
                    candidates.push((i, j));
                }
            }
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, j) in candidates {
            let score = start_logits[i] + end_logits[j];
            let better = match best {
                None => true,
                Some((s, bi, bj)) => {
                    score > s
                        || (score == s && (i < bi || (i == bi && j - i < bj - bi)))
                }
            };
            if better {
                best = Some((score, i, j));
            }
        }
        let no_answer = start_logits[anchor] + end_logits[anchor];
        match best {
            Some((score, i, j)) if no_answer + cfg.no_answer_threshold < score => Some((i, j)),
            _ => None,
        }
    }

    fn char_offsets(n: usize) -> Vec<Option<(usize, usize)>> {
        // Token t covers chars [2t, 2t+1): "a b c ..."
        (0..n).map(|t| Some((2 * t, 2 * t + 1))).collect()
    }

    fn context_of(n: usize) -> String {
        (0..n)
            .map(|i| ((b'a' + (i % 26) as u8) as char).to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn peak_span_decoded() {
        let mut start = vec![0.0; 10];
        let mut end = vec![0.0; 10];
        start[5] = 5.0;
        end[6] = 5.0;
        start[0] = -2.0;
        end[0] = -2.0;
        let cfg = DecodeConfig::default();
        let pred = decode(
            &start,
            &end,
            1..10,
            0,
            &char_offsets(10),
            &context_of(10),
            "q",
            &cfg,
        );
        assert_eq!(pred.span(), Some((10, 13)));
        assert_eq!(pred.text.as_deref(), Some("f g"));
    }

    #[test]
    fn anchor_dominates_gives_no_answer() {
        let mut start = vec![0.0; 6];
        let mut end = vec![0.0; 6];
        start[0] = 10.0;
        end[0] = 10.0;
        let pred = decode(
            &start,
            &end,
            1..6,
            0,
            &char_offsets(6),
            &context_of(6),
            "q",
            &DecodeConfig::default(),
        );
        assert!(pred.is_no_answer());
        assert_eq!(pred.no_answer_score, 20.0);
    }

    #[test]
    fn empty_valid_region_is_no_answer() {
        let start = vec![1.0; 4];
        let end = vec![1.0; 4];
        let pred = decode(
            &start,
            &end,
            0..0,
            0,
            &char_offsets(4),
            &context_of(4),
            "q",
            &DecodeConfig::default(),
        );
        assert!(pred.is_no_answer());
    }

    #[test]
    fn matches_brute_force_on_random_inputs() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let cfg = DecodeConfig {
            max_span_tokens: 5,
            no_answer_threshold: 0.3,
        };
        for _ in 0..300 {
            let n = rng.random_range(2..20usize);
            let start: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let end: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let lo = rng.random_range(1..n);
            let hi = rng.random_range(lo..=n);
            let valid = lo..hi;
            let pred = decode(
                &start,
                &end,
                valid.clone(),
                0,
                &char_offsets(n),
                &context_of(n),
                "q",
                &cfg,
            );
            let expected = brute_force(&start, &end, valid, 0, &cfg);
            let got = pred.span().map(|(s, e)| (s / 2, (e - 1) / 2));
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn threshold_monotonicity() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = 12;
            let start: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let end: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut was_no_answer = false;
            for step in 0..20 {
                let cfg = DecodeConfig {
                    max_span_tokens: 6,
                    no_answer_threshold: -5.0 + step as f64 * 0.5,
                };
                let pred = decode(
                    &start,
                    &end,
                    1..n,
                    0,
                    &char_offsets(n),
                    &context_of(n),
                    "q",
                    &cfg,
                );
                if was_no_answer {
                    assert!(pred.is_no_answer(), "raising threshold revived an answer");
                }
                was_no_answer = pred.is_no_answer();
            }
        }
    }

    #[test]
    fn batch_decode_contract() {
        let cfg = ModelConfig {
            hidden_size: 32,
            num_layers: 1,
            num_heads: 4,
            ffn_size: 64,
            vocab_size: 512,
            max_len: 32,
            head_hidden_size: 16,
            ..ModelConfig::toy()
        };
        let model = SpanModel::new(&cfg, 4).unwrap();
        let qa = QADataset::new(
            "b",
            vec![
                QAExample::answerable("x:time", "table at 8 pm", "What time?", "8 pm", 9),
                QAExample::impossible("x:people", "table at 8 pm", "How many people?"),
            ],
        )
        .unwrap();
        let dcfg = DecodeConfig::default();

        let empty = QADataset::new("e", vec![]).unwrap();
        assert!(batch_decode(&model, &empty, &dcfg).unwrap().is_empty());

        let a = batch_decode(&model, &qa, &dcfg).unwrap();
        let b = batch_decode(&model, &qa, &dcfg).unwrap();
        assert_eq!(a, b);
        let qids: Vec<&str> = a.iter().map(|p| p.qid.as_str()).collect();
        assert_eq!(qids, vec!["x:time", "x:people"]);
    }

    #[test]
    fn predictions_jsonl_round_trip() {
        let preds = vec![
            SpanPrediction {
                qid: "t:slot".into(),
                text: Some("8 pm".into()),
                start: Some(9),
                end: Some(13),
                score: 3.5,
                no_answer_score: -1.25,
            },
            SpanPrediction {
                qid: "t:other".into(),
                text: None,
                start: None,
                end: None,
                score: 0.5,
                no_answer_score: 2.0,
            },
        ];
        let bytes = emit_predictions_jsonl(&preds);
        let back = parse_predictions_jsonl(&bytes, "mem").unwrap();
        assert_eq!(preds, back);
    }
}
