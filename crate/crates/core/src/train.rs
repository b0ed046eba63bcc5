//! Staged fine-tuning: a declarative schedule of (corpus, config) stages
//! applied in order, each consuming the previous stage's model.
//!
//! Stage labels follow the two-phase recipe: `stage1` (or the refined
//! `stage1a` + `stage1b` pair) adapts the encoder to generic span QA;
//! `stage2` specializes it on in-domain slot questions. The loss is the sum
//! of cross-entropies over the start and end positions, with unanswerable
//! examples targeting the sequence-initial anchor token.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, QADataset};
use crate::error::{Error, Result};
use crate::model::{
    count_trainable, derive_seed, select_trainable, EncodedInput, SpanModel, TinyEncoder,
    TrainableMask,
};
use crate::reformulate::{ContextMode, PromptSpec, QaOptions};
use crate::types::{FineTuneConfig, ModelConfig, Regime};

/// Adam with a fixed learning rate; no warmup or decay is applied unless
/// configured elsewhere.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// One update over the masked parameters; everything outside the mask is
    /// left bitwise untouched.
    pub fn step(&mut self, model: &mut SpanModel<TinyEncoder>, mask: &TrainableMask) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, b1, b2, eps) = (self.learning_rate, self.beta1, self.beta2, self.eps);
        let slots = &mut self.slots;
        model.visit_params_mut(&mut |path, _, tensor| {
            if !mask.contains(path) {
                return;
            }
            let dim = tensor.value.raw_dim();
            let (m, v) = slots
                .entry(path.to_string())
                .or_insert_with(|| (Array2::zeros(dim), Array2::zeros(dim)));
            let g = tensor.grad.as_slice().expect("contiguous grad");
            let w = tensor.value.as_slice_mut().expect("contiguous value");
            let m = m.as_slice_mut().expect("contiguous m");
            let v = v.as_slice_mut().expect("contiguous v");
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

/// One QA example with token-level targets; unanswerable examples target the
/// anchor position.
pub struct TrainExample {
    pub input: EncodedInput,
    pub start_target: usize,
    pub end_target: usize,
}

/// Encode a corpus for training. Answers that cannot be mapped onto tokens
/// (for example, cut off by context truncation) fall back to the anchor and
/// are counted in the second return value.
pub fn prepare_examples(
    model: &SpanModel<TinyEncoder>,
    qa: &QADataset,
) -> Result<(Vec<TrainExample>, usize)> {
    let mut examples = Vec::with_capacity(qa.len());
    let mut unmapped = 0;
    for ex in &qa.examples {
        let input = model.encode_pair(&ex.question, &ex.context)?;
        let anchor = input.no_answer_anchor;
        let (start_target, end_target) = match (&ex.answer_text, ex.answer_start) {
            (Some(text), Some(start)) if !ex.is_impossible => {
                let end = start + crate::text::char_len(text);
                let mapped = input
                    .token_at_char(start)
                    .zip(input.token_at_char(end.saturating_sub(1)));
                match mapped {
                    Some(pair) => pair,
                    None => {
                        unmapped += 1;
                        (anchor, anchor)
                    }
                }
            }
            _ => (anchor, anchor),
        };
        examples.push(TrainExample {
            input,
            start_target,
            end_target,
        });
    }
    Ok((examples, unmapped))
}

/// Cross-entropy over start and end positions. Returns the summed loss and
/// `dL/dlogits` of shape `[T, 2]`.
pub fn span_loss(
    logits: &Array2<f64>,
    start_target: usize,
    end_target: usize,
) -> (f64, Array2<f64>) {
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (col, target) in [(0, start_target), (1, end_target)] {
        let column = logits.column(col);
        let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in column.iter() {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - column[target];
        let mut dcol = dlogits.column_mut(col);
        for (i, &v) in column.iter().enumerate() {
            dcol[i] = (v - lse).exp();
        }
        dcol[target] -= 1.0;
    }
    (total, dlogits)
}

/// Position in the refined tuning recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageLabel {
    Stage1a,
    Stage1b,
    Stage1,
    Stage2,
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StageLabel::Stage1a => "stage1a",
            StageLabel::Stage1b => "stage1b",
            StageLabel::Stage1 => "stage1",
            StageLabel::Stage2 => "stage2",
        };
        f.write_str(s)
    }
}

/// One schedule entry: a corpus and the config to train on it.
pub struct Stage {
    pub label: StageLabel,
    pub corpus: QADataset,
    pub config: FineTuneConfig,
}

/// An ordered, validated list of stages.
pub struct StageSchedule {
    pub stages: Vec<Stage>,
}

impl StageSchedule {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        let schedule = StageSchedule { stages };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Schedule("schedule has no stages".to_string()));
        }
        let stage2_count = self
            .stages
            .iter()
            .filter(|s| s.label == StageLabel::Stage2)
            .count();
        if stage2_count > 1 {
            return Err(Error::Schedule("at most one stage2 is allowed".to_string()));
        }
        if stage2_count == 1 && self.stages.last().unwrap().label != StageLabel::Stage2 {
            return Err(Error::Schedule("stage2 must come last".to_string()));
        }
        for stage in &self.stages {
            stage.config.validate().map_err(Error::Config)?;
        }
        Ok(())
    }
}

/// Loss curve and bookkeeping for one completed stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub wall_time_secs: f64,
    pub trainable_params: usize,
    pub seed: u64,
    /// Answerable examples whose span could not be mapped onto tokens.
    pub truncated_answers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

/// Train one stage in place. Runs exactly `epochs * ceil(N / batch_size)`
/// optimizer steps; a non-finite loss aborts with a diagnostic.
pub fn run_stage(
    model: &mut SpanModel<TinyEncoder>,
    qa: &QADataset,
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<TrainReport> {
    run_stage_labeled(model, qa, cfg, seed, "stage")
}

pub(crate) fn run_stage_labeled(
    model: &mut SpanModel<TinyEncoder>,
    qa: &QADataset,
    cfg: &FineTuneConfig,
    seed: u64,
    label: &str,
) -> Result<TrainReport> {
    cfg.validate().map_err(Error::Config)?;
    if qa.is_empty() {
        return Err(Error::Schedule(format!(
            "stage `{label}` has an empty corpus"
        )));
    }
    if cfg.regime == Regime::Adapters && !model.has_adapters() {
        let adapter = cfg.adapter.as_ref().expect("validated above");
        model.insert_adapters(adapter, derive_seed(seed, 0xad))?;
    }
    if cfg.reinit_head {
        model.reinit_head(derive_seed(seed, 0x4e_45_57));
    }

    let started = Instant::now();
    let (examples, truncated_answers) = prepare_examples(model, qa)?;
    let mask = select_trainable(model, cfg.regime, cfg.bitfit_all_biases)?;
    let trainable_params = count_trainable(model, &mask);
    let encoder_grad = mask.reaches_encoder();

    let mut adam = Adam::new(cfg.learning_rate);
    let mut losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                epoch as u64 + 1,
            )));
        }
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &idx in batch {
                let ex = &examples[idx];
                let (logits, tape) = model.forward_with_tape(&ex.input);
                let (loss, mut dlogits) = span_loss(&logits, ex.start_target, ex.end_target);
                batch_loss += loss * scale;
                dlogits.mapv_inplace(|v| v * scale);
                model.backward(&ex.input, &tape, &dlogits, encoder_grad);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: label.to_string(),
                    step,
                    loss: batch_loss,
                });
            }
            adam.step(model, &mask);
            losses.push(batch_loss);
            step += 1;
        }
    }

    Ok(TrainReport {
        stage: label.to_string(),
        steps: step,
        losses,
        wall_time_secs: started.elapsed().as_secs_f64(),
        trainable_params,
        seed,
        truncated_answers,
        checkpoint: None,
    })
}

/// Apply the schedule's stages in order, each stage consuming the previous
/// stage's output model. Per-stage seeds derive from `seed` and the stage
/// index.
pub fn run_schedule(
    model: &mut SpanModel<TinyEncoder>,
    schedule: &StageSchedule,
    seed: u64,
) -> Result<Vec<TrainReport>> {
    schedule.validate()?;
    let mut reports = Vec::with_capacity(schedule.stages.len());
    for (index, stage) in schedule.stages.iter().enumerate() {
        let stage_seed = derive_seed(seed, index as u64);
        reports.push(run_stage_labeled(
            model,
            &stage.corpus,
            &stage.config,
            stage_seed,
            &stage.label.to_string(),
        )?);
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Schedule config files
// ---------------------------------------------------------------------------

/// On-disk corpus format of a schedule entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// Native SL JSON, converted to QA at load time.
    Sl,
    /// SQuAD 2.0 JSON, used as-is.
    Squad,
}

/// One `stages[]` entry of a schedule config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageFileEntry {
    pub label: StageLabel,
    /// Corpus path, resolved relative to the config file.
    pub corpus: String,
    /// Sniffed from the file's top-level keys when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<CorpusFormat>,
    #[serde(flatten)]
    pub config: FineTuneConfig,
}

fn default_true() -> bool {
    true
}

/// A training run described as data: model architecture, conversion mode,
/// and the stage list. See the repository docs for the schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub model: ModelConfig,
    #[serde(default)]
    pub mode: ContextMode,
    /// Append requested-slot prompts when converting SL corpora.
    #[serde(default = "default_true")]
    pub use_requested_prompts: bool,
    pub stages: Vec<StageFileEntry>,
}

/// Parse a schedule config file and load every referenced corpus.
pub fn load_schedule(path: impl AsRef<Path>) -> Result<(ScheduleFile, StageSchedule)> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    let file: ScheduleFile =
        serde_json::from_slice(&bytes).map_err(|e| Error::parse(&display, e))?;
    file.model.validate().map_err(Error::Config)?;

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut stages = Vec::with_capacity(file.stages.len());
    for entry in &file.stages {
        let corpus_path = base.join(&entry.corpus);
        let format = match entry.format {
            Some(f) => f,
            None => sniff_format(&corpus_path)?,
        };
        let corpus = match format {
            CorpusFormat::Squad => corpus::load_squad(&corpus_path)?,
            CorpusFormat::Sl => {
                let sl = corpus::load_sl(&corpus_path)?;
                let spec = PromptSpec::from_ontology(&sl.ontology);
                let options = QaOptions {
                    include_requested: file.use_requested_prompts,
                    ..QaOptions::default()
                };
                corpus::sl_to_qa_with(&sl, &spec, file.mode, options)?
            }
        };
        stages.push(Stage {
            label: entry.label,
            corpus,
            config: entry.config.clone(),
        });
    }
    let schedule = StageSchedule::new(stages)?;
    Ok((file, schedule))
}

fn sniff_format(path: &Path) -> Result<CorpusFormat> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::parse(&display, e))?;
    match (value.get("turns"), value.get("data")) {
        (Some(_), None) => Ok(CorpusFormat::Sl),
        (None, Some(_)) => Ok(CorpusFormat::Squad),
        _ => Err(Error::parse(
            &display,
            "cannot tell SL from SQuAD format; expected a top-level `turns` or `data` key",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::QAExample;

    fn toy_model() -> SpanModel<TinyEncoder> {
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
        SpanModel::new(&cfg, 17).unwrap()
    }

    fn tiny_corpus() -> QADataset {
        let examples = (0..8)
            .map(|i| {
                if i % 2 == 0 {
                    QAExample::answerable(
                        format!("q{i}"),
                        format!("a table at {h} pm", h = 5 + i % 4),
                        "What time?",
                        format!("{h} pm", h = 5 + i % 4),
                        11,
                    )
                } else {
                    QAExample::impossible(
                        format!("q{i}"),
                        format!("a table at {h} pm", h = 5 + i % 4),
                        "How many people?",
                    )
                }
            })
            .collect();
        QADataset::new("tiny", examples).unwrap()
    }

    fn snapshot(model: &SpanModel<TinyEncoder>) -> Vec<(String, Vec<u64>)> {
        let mut out = Vec::new();
        model.visit_params(&mut |p, _, t| {
            out.push((p.to_string(), t.value.iter().map(|v| v.to_bits()).collect()));
        });
        out
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut model = toy_model();
        let before = snapshot(&model);
        let cfg = FineTuneConfig {
            epochs: 0,
            ..FineTuneConfig::stage2_default()
        };
        let report = run_stage(&mut model, &tiny_corpus(), &cfg, 3).unwrap();
        assert_eq!(report.steps, 0);
        assert_eq!(snapshot(&model), before);
    }

    #[test]
    fn step_count_is_epochs_times_ceil() {
        let mut model = toy_model();
        let cfg = FineTuneConfig {
            epochs: 3,
            batch_size: 3,
            learning_rate: 1e-4,
            ..FineTuneConfig::stage2_default()
        };
        let report = run_stage(&mut model, &tiny_corpus(), &cfg, 3).unwrap();
        // 8 examples, batch 3 -> ceil = 3 batches per epoch.
        assert_eq!(report.steps, 3 * 3);
        assert_eq!(report.losses.len(), report.steps);
        assert!(report.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn head_only_freezes_backbone_bitwise() {
        let mut model = toy_model();
        let backbone_before: Vec<(String, Vec<u64>)> = snapshot(&model)
            .into_iter()
            .filter(|(p, _)| !p.starts_with("head."))
            .collect();
        let cfg = FineTuneConfig {
            regime: Regime::HeadOnly,
            learning_rate: 1e-3,
            epochs: 2,
            batch_size: 4,
            ..FineTuneConfig::stage2_default()
        };
        run_stage(&mut model, &tiny_corpus(), &cfg, 5).unwrap();
        let backbone_after: Vec<(String, Vec<u64>)> = snapshot(&model)
            .into_iter()
            .filter(|(p, _)| !p.starts_with("head."))
            .collect();
        assert_eq!(backbone_before, backbone_after);
    }

    #[test]
    fn empty_corpus_errors() {
        let mut model = toy_model();
        let qa = QADataset::new("empty", vec![]).unwrap();
        assert!(matches!(
            run_stage(&mut model, &qa, &FineTuneConfig::stage2_default(), 1),
            Err(Error::Schedule(_))
        ));
    }

    #[test]
    fn schedule_validation() {
        let corpus = tiny_corpus();
        let cfg = FineTuneConfig::stage2_default();
        assert!(StageSchedule::new(vec![]).is_err());

        let two_stage2 = StageSchedule::new(vec![
            Stage {
                label: StageLabel::Stage2,
                corpus: corpus.clone(),
                config: cfg.clone(),
            },
            Stage {
                label: StageLabel::Stage2,
                corpus: corpus.clone(),
                config: cfg.clone(),
            },
        ]);
        assert!(two_stage2.is_err());

        let stage2_not_last = StageSchedule::new(vec![
            Stage {
                label: StageLabel::Stage2,
                corpus: corpus.clone(),
                config: cfg.clone(),
            },
            Stage {
                label: StageLabel::Stage1,
                corpus: corpus.clone(),
                config: cfg.clone(),
            },
        ]);
        assert!(stage2_not_last.is_err());

        let ok = StageSchedule::new(vec![
            Stage {
                label: StageLabel::Stage1a,
                corpus: corpus.clone(),
                config: cfg.clone(),
            },
            Stage {
                label: StageLabel::Stage1b,
                corpus: corpus.clone(),
                config: cfg.clone(),
            },
            Stage {
                label: StageLabel::Stage2,
                corpus,
                config: cfg,
            },
        ]);
        assert!(ok.is_ok());
    }

    #[test]
    fn schedule_composition_equals_sequential_stages() {
        let corpus = tiny_corpus();
        let cfg = FineTuneConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 1e-3,
            ..FineTuneConfig::stage2_default()
        };
        let schedule = StageSchedule::new(vec![
            Stage {
                label: StageLabel::Stage1,
                corpus: corpus.clone(),
                config: cfg.clone(),
            },
            Stage {
                label: StageLabel::Stage2,
                corpus: corpus.clone(),
                config: cfg.clone(),
            },
        ])
        .unwrap();

        let mut scheduled = toy_model();
        run_schedule(&mut scheduled, &schedule, 9).unwrap();

        let mut manual = toy_model();
        run_stage(&mut manual, &corpus, &cfg, derive_seed(9, 0)).unwrap();
        run_stage(&mut manual, &corpus, &cfg, derive_seed(9, 1)).unwrap();

        assert_eq!(snapshot(&scheduled), snapshot(&manual));
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        let corpus = tiny_corpus();
        let cfg = FineTuneConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 5e-4,
            ..FineTuneConfig::stage2_default()
        };
        let mut a = toy_model();
        run_stage(&mut a, &corpus, &cfg, 11).unwrap();
        let mut b = toy_model();
        run_stage(&mut b, &corpus, &cfg, 11).unwrap();
        assert_eq!(snapshot(&a), snapshot(&b));

        let mut c = toy_model();
        run_stage(&mut c, &corpus, &cfg, 12).unwrap();
        assert_ne!(snapshot(&a), snapshot(&c));
    }

    #[test]
    fn non_finite_loss_aborts() {
        // A catastrophic learning rate overflows the attention scores; the
        // resulting NaN loss must abort instead of training on.
        let mut model = toy_model();
        let cfg = FineTuneConfig {
            learning_rate: 1e200,
            epochs: 50,
            batch_size: 8,
            ..FineTuneConfig::stage2_default()
        };
        match run_stage(&mut model, &tiny_corpus(), &cfg, 1) {
            Err(Error::NonFiniteLoss { .. }) => {}
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn span_loss_grad_is_softmax_minus_onehot() {
        let logits =
            Array2::from_shape_vec((3, 2), vec![1.0, 0.5, 2.0, -1.0, 0.0, 0.25]).unwrap();
        let (loss, dlogits) = span_loss(&logits, 1, 2);
        assert!(loss > 0.0);
        // Each column's gradient sums to zero (softmax minus one-hot).
        let s: f64 = dlogits.column(0).sum();
        let e: f64 = dlogits.column(1).sum();
        assert!(s.abs() < 1e-12 && e.abs() < 1e-12);
        assert!(dlogits[[1, 0]] < 0.0);
        assert!(dlogits[[2, 1]] < 0.0);
    }

    #[test]
    fn overfit_answerable_fixture() {
        // A correct loss/optimizer pair drives 16 answerable examples to
        // near-zero loss within 200 full-batch steps.
        let mut model = toy_model();
        let examples = (0..16)
            .map(|i| {
                let city = ["boston", "denver", "austin", "tucson"][i % 4];
                let context = format!("the bus to {city} leaves at {h}", h = 6 + i % 3);
                let start = context.find(city).unwrap();
                QAExample::answerable(format!("q{i}"), context.clone(), "Where to?", city, start)
            })
            .collect();
        let qa = QADataset::new("overfit", examples).unwrap();
        let cfg = FineTuneConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 200,
            shuffle: false,
            ..FineTuneConfig::stage2_default()
        };
        let report = run_stage(&mut model, &qa, &cfg, 2).unwrap();
        assert_eq!(report.steps, 200);
        let last = *report.losses.last().unwrap();
        assert!(last < 0.05, "final loss {last}");
    }
}
