//! Shared domain types: dialog turns, slot ontologies, QA examples,
//! predictions, and fine-tuning configuration.
//!
//! All types are immutable values after construction and safe to share
//! across threads. Offsets are char offsets (see [`crate::text`]).

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::text;

/// A gold slot annotation: `value` occupies chars `start..end` of the turn's
/// user text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanLabel {
    pub slot: String,
    pub start: usize,
    pub end: usize,
    pub value: String,
}

/// One user turn, optionally preceded by a system turn, with gold slot spans
/// and the slots the system requested in the previous turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogTurn {
    pub turn_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_text: Option<String>,
    pub user_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requested_slots: Vec<String>,
    #[serde(default, rename = "labels", skip_serializing_if = "Vec::is_empty")]
    pub gold_labels: Vec<SpanLabel>,
}

impl DialogTurn {
    /// First gold label for `slot`, if any.
    pub fn label_for(&self, slot: &str) -> Option<&SpanLabel> {
        self.gold_labels.iter().find(|l| l.slot == slot)
    }
}

/// Coarse value type of a slot, declared in the ontology file. Drives the
/// audit rules; `numeric_capable` marks slots whose value can be a bare
/// number in an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    #[default]
    Text,
    Numeric,
    Time,
    Date,
    People,
    Name,
}

impl SlotKind {
    pub fn numeric_capable(self) -> bool {
        matches!(self, SlotKind::Numeric | SlotKind::Time | SlotKind::People)
    }
}

/// Questions (first entry is canonical) and value kind for one slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SlotSpec {
    pub questions: Vec<String>,
    #[serde(default)]
    pub kind: SlotKind,
}

impl SlotSpec {
    pub fn new(questions: Vec<String>, kind: SlotKind) -> Self {
        SlotSpec { questions, kind }
    }
}

// Accept both the full form and a bare question list in ontology files.
impl<'de> Deserialize<'de> for SlotSpec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Full {
                questions: Vec<String>,
                #[serde(default)]
                kind: SlotKind,
            },
            Bare(Vec<String>),
        }
        Ok(match Repr::deserialize(de)? {
            Repr::Full { questions, kind } => SlotSpec { questions, kind },
            Repr::Bare(questions) => SlotSpec {
                questions,
                kind: SlotKind::default(),
            },
        })
    }
}

fn default_separator() -> String {
    "<s>".to_string()
}

/// Slot names mapped to their natural-language questions, in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotOntology {
    pub slots: IndexMap<String, SlotSpec>,
    #[serde(default = "default_separator")]
    pub separator_token: String,
}

impl SlotOntology {
    pub fn new(slots: IndexMap<String, SlotSpec>) -> Self {
        SlotOntology {
            slots,
            separator_token: default_separator(),
        }
    }

    pub fn contains(&self, slot: &str) -> bool {
        self.slots.contains_key(slot)
    }

    /// Canonical (first) question for `slot`.
    pub fn canonical_question(&self, slot: &str) -> Option<&str> {
        self.slots
            .get(slot)
            .and_then(|s| s.questions.first())
            .map(String::as_str)
    }

    pub fn kind(&self, slot: &str) -> Option<SlotKind> {
        self.slots.get(slot).map(|s| s.kind)
    }

    pub fn slot_names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    /// Structural checks: every slot has at least one non-empty question and
    /// the separator token is non-empty.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (name, spec) in &self.slots {
            if spec.questions.is_empty() || spec.questions.iter().any(|q| q.is_empty()) {
                out.push(Violation {
                    turn_id: String::new(),
                    slot: Some(name.clone()),
                    kind: ViolationKind::EmptyQuestion,
                    message: format!("slot `{name}` needs at least one non-empty question"),
                });
            }
        }
        if self.separator_token.is_empty() {
            out.push(Violation {
                turn_id: String::new(),
                slot: None,
                kind: ViolationKind::EmptySeparator,
                message: "separator_token must be non-empty".to_string(),
            });
        }
        out
    }
}

/// One extractive QA example with SQuAD 2.0 unanswerable semantics:
/// `is_impossible` exactly when no answer span is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub qid: String,
    pub context: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_start: Option<usize>,
    pub is_impossible: bool,
}

impl QAExample {
    pub fn answerable(
        qid: impl Into<String>,
        context: impl Into<String>,
        question: impl Into<String>,
        answer_text: impl Into<String>,
        answer_start: usize,
    ) -> Self {
        QAExample {
            qid: qid.into(),
            context: context.into(),
            question: question.into(),
            answer_text: Some(answer_text.into()),
            answer_start: Some(answer_start),
            is_impossible: false,
        }
    }

    pub fn impossible(
        qid: impl Into<String>,
        context: impl Into<String>,
        question: impl Into<String>,
    ) -> Self {
        QAExample {
            qid: qid.into(),
            context: context.into(),
            question: question.into(),
            answer_text: None,
            answer_start: None,
            is_impossible: true,
        }
    }

    /// Consistency of the unanswerable flag and the answer span against the
    /// context text.
    pub fn check(&self) -> Result<(), String> {
        match (&self.answer_text, self.answer_start, self.is_impossible) {
            (None, None, true) => Ok(()),
            (Some(text), Some(start), false) => {
                let end = start + text::char_len(text);
                match text::char_slice(&self.context, start, end) {
                    Some(slice) if slice == text => Ok(()),
                    Some(slice) => Err(format!(
                        "`{}`: answer `{text}` does not match context slice `{slice}`",
                        self.qid
                    )),
                    None => Err(format!(
                        "`{}`: answer span {start}..{end} out of context bounds",
                        self.qid
                    )),
                }
            }
            _ => Err(format!(
                "`{}`: is_impossible must match answer presence",
                self.qid
            )),
        }
    }
}

/// Decoder output for one QA example: a context char span plus scores, or an
/// explicit no-answer (all span fields absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub qid: String,
    pub text: Option<String>,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub score: f64,
    pub no_answer_score: f64,
}

impl SpanPrediction {
    pub fn is_no_answer(&self) -> bool {
        self.text.is_none()
    }

    pub fn span(&self) -> Option<(usize, usize)> {
        match (self.start, self.end) {
            (Some(s), Some(e)) => Some((s, e)),
            _ => None,
        }
    }
}

/// Which parameter subset a fine-tuning stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Full,
    HeadOnly,
    Bitfit,
    Adapters,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Regime::Full => "full",
            Regime::HeadOnly => "head_only",
            Regime::Bitfit => "bitfit",
            Regime::Adapters => "adapters",
        };
        f.write_str(s)
    }
}

/// Nonlinearity used inside adapter bottlenecks and the two-layer head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Relu,
    Gelu,
    Tanh,
}

fn default_reduction() -> usize {
    16
}

fn default_boundary_reduction() -> usize {
    8
}

/// Bottleneck adapter shape: hidden size divided by the reduction factor
/// gives the bottleneck width; the first and last encoder layers use the
/// boundary factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    #[serde(default = "default_reduction")]
    pub default_reduction_factor: usize,
    #[serde(default = "default_boundary_reduction")]
    pub boundary_reduction_factor: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            default_reduction_factor: 16,
            boundary_reduction_factor: 8,
            nonlinearity: Nonlinearity::Relu,
        }
    }
}

fn default_true() -> bool {
    true
}

/// Hyperparameters for one fine-tuning stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub regime: Regime,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
    /// No-answer margin applied at decode time; 0 keeps raw argmax behavior.
    #[serde(default)]
    pub no_answer_threshold: f64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Re-initialize the QA head at the start of the stage instead of
    /// continuing from the previous stage's head.
    #[serde(default)]
    pub reinit_head: bool,
    /// Widen the bitfit regime from attention-layer biases to every bias.
    #[serde(default)]
    pub bitfit_all_biases: bool,
}

impl FineTuneConfig {
    /// Generic QA-tuning defaults: 2 epochs, 24 pairs per batch, Adam at 3e-5.
    pub fn stage1_default() -> Self {
        FineTuneConfig {
            regime: Regime::Full,
            learning_rate: 3e-5,
            batch_size: 24,
            epochs: 2,
            adapter: None,
            no_answer_threshold: 0.0,
            shuffle: true,
            reinit_head: false,
            bitfit_all_biases: false,
        }
    }

    /// In-domain tuning defaults: batch 32, Adam at 2e-5.
    pub fn stage2_default() -> Self {
        FineTuneConfig {
            learning_rate: 2e-5,
            batch_size: 32,
            ..Self::stage1_default()
        }
    }

    /// Adapter tuning runs at the higher 1e-3 rate.
    pub fn stage2_adapters() -> Self {
        FineTuneConfig {
            regime: Regime::Adapters,
            learning_rate: 1e-3,
            adapter: Some(AdapterConfig::default()),
            ..Self::stage2_default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".to_string());
        }
        match (self.regime, &self.adapter) {
            (Regime::Adapters, None) => {
                Err("adapters regime requires an adapter config".to_string())
            }
            (r, Some(_)) if r != Regime::Adapters => {
                Err(format!("adapter config given but regime is {r}"))
            }
            _ => Ok(()),
        }
    }
}

fn default_vocab() -> usize {
    4096
}

fn default_max_len() -> usize {
    64
}

/// QA head shape: a single `[E, 2]` projection or a two-layer feed-forward
/// network ending in 2 outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Linear,
    #[default]
    Ffn2,
}

fn default_head_hidden() -> usize {
    // At E=768 a two-layer head with this width lands at roughly one million
    // parameters.
    1300
}

/// Architecture of the bundled trainable encoder plus its QA head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub head_variant: HeadVariant,
    #[serde(default = "default_head_hidden")]
    pub head_hidden_size: usize,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
}

impl ModelConfig {
    /// Small CPU-friendly configuration used throughout the tests.
    pub fn toy() -> Self {
        ModelConfig {
            hidden_size: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_size: 256,
            vocab_size: default_vocab(),
            max_len: default_max_len(),
            head_variant: HeadVariant::Ffn2,
            head_hidden_size: 64,
            tokenizer: TokenizerConfig::default(),
        }
    }

    /// Shape of a 12-layer, 768-wide encoder; used only for parameter
    /// accounting, never instantiated in tests.
    pub fn base_plm_shape() -> Self {
        ModelConfig {
            hidden_size: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_size: 3072,
            vocab_size: 50265,
            max_len: 512,
            head_variant: HeadVariant::Ffn2,
            head_hidden_size: default_head_hidden(),
            tokenizer: TokenizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hidden_size == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.ffn_size == 0
            || self.vocab_size == 0
            || self.max_len == 0
            || self.head_hidden_size == 0
        {
            return Err("all model dimensions must be positive".to_string());
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        Ok(())
    }
}

fn default_specials() -> Vec<String> {
    vec!["<s>".to_string()]
}

/// Whitespace-and-punctuation tokenizer settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    #[serde(default = "default_true")]
    pub lowercase: bool,
    /// Strings tokenized atomically (the question separator by default).
    #[serde(default = "default_specials")]
    pub specials: Vec<String>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            lowercase: true,
            specials: default_specials(),
        }
    }
}

/// One data problem found by [`validate_turn`]. Violations are data, not
/// errors: validators collect them instead of failing fast.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub turn_id: String,
    pub slot: Option<String>,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.turn_id, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    OffsetOutOfBounds,
    ValueMismatch,
    DuplicateRequestedSlot,
    UnknownRequestedSlot,
    UnknownLabelSlot,
    EmptyQuestion,
    EmptySeparator,
}

/// Check a turn's label offsets, label values, and requested-slot list.
/// Returns an empty list exactly when every invariant holds; when an
/// ontology is supplied, label and requested slot names must be known.
pub fn validate_turn(turn: &DialogTurn, ontology: Option<&SlotOntology>) -> Vec<Violation> {
    let mut out = Vec::new();
    let user_len = text::char_len(&turn.user_text);

    for label in &turn.gold_labels {
        if label.start >= label.end || label.end > user_len {
            out.push(Violation {
                turn_id: turn.turn_id.clone(),
                slot: Some(label.slot.clone()),
                kind: ViolationKind::OffsetOutOfBounds,
                message: format!(
                    "label `{}` span {}..{} out of bounds for user_text of length {user_len}",
                    label.slot, label.start, label.end
                ),
            });
            continue;
        }
        let slice = text::char_slice(&turn.user_text, label.start, label.end).unwrap_or("");
        if slice != label.value {
            out.push(Violation {
                turn_id: turn.turn_id.clone(),
                slot: Some(label.slot.clone()),
                kind: ViolationKind::ValueMismatch,
                message: format!(
                    "label `{}` value `{}` does not match user_text[{}..{}] = `{slice}`",
                    label.slot, label.value, label.start, label.end
                ),
            });
        }
        if let Some(ont) = ontology {
            if !ont.contains(&label.slot) {
                out.push(Violation {
                    turn_id: turn.turn_id.clone(),
                    slot: Some(label.slot.clone()),
                    kind: ViolationKind::UnknownLabelSlot,
                    message: format!("label slot `{}` not in ontology", label.slot),
                });
            }
        }
    }

    let mut seen = std::collections::HashSet::new();
    for requested in &turn.requested_slots {
        if !seen.insert(requested.as_str()) {
            out.push(Violation {
                turn_id: turn.turn_id.clone(),
                slot: Some(requested.clone()),
                kind: ViolationKind::DuplicateRequestedSlot,
                message: format!("requested slot `{requested}` listed more than once"),
            });
        }
        if let Some(ont) = ontology {
            if !ont.contains(requested) {
                out.push(Violation {
                    turn_id: turn.turn_id.clone(),
                    slot: Some(requested.clone()),
                    kind: ViolationKind::UnknownRequestedSlot,
                    message: format!("requested slot `{requested}` not in ontology"),
                });
            }
        }
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ontology() -> SlotOntology {
        let mut slots = IndexMap::new();
        slots.insert(
            "time".to_string(),
            SlotSpec::new(vec!["What time?".into()], SlotKind::Time),
        );
        slots.insert(
            "people".to_string(),
            SlotSpec::new(vec!["How many people?".into()], SlotKind::People),
        );
        SlotOntology::new(slots)
    }

    fn turn() -> DialogTurn {
        // chars:       0123456789012345678901234
        let user_text = "i want a table at 8 pm".to_string();
        DialogTurn {
            turn_id: "t1".into(),
            system_text: None,
            user_text,
            requested_slots: vec![],
            gold_labels: vec![SpanLabel {
                slot: "time".into(),
                start: 18,
                end: 22,
                value: "8 pm".into(),
            }],
        }
    }

    #[test]
    fn consistent_offsets_pass() {
        assert!(validate_turn(&turn(), Some(&ontology())).is_empty());
    }

    #[test]
    fn value_mismatch_flagged() {
        let mut t = turn();
        t.gold_labels[0].value = "8pm".into();
        let v = validate_turn(&t, Some(&ontology()));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::ValueMismatch);
    }

    #[test]
    fn duplicate_requested_flagged() {
        let mut t = turn();
        t.requested_slots = vec!["people".into(), "people".into()];
        let v = validate_turn(&t, Some(&ontology()));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::DuplicateRequestedSlot);
    }

    #[test]
    fn out_of_bounds_flagged() {
        let mut t = turn();
        t.gold_labels[0].end = 99;
        let v = validate_turn(&t, Some(&ontology()));
        assert_eq!(v[0].kind, ViolationKind::OffsetOutOfBounds);
    }

    #[test]
    fn unknown_slots_flagged() {
        let mut t = turn();
        t.gold_labels[0].slot = "venue".into();
        t.requested_slots = vec!["cuisine".into()];
        let kinds: Vec<_> = validate_turn(&t, Some(&ontology()))
            .into_iter()
            .map(|v| v.kind)
            .collect();
        assert!(kinds.contains(&ViolationKind::UnknownLabelSlot));
        assert!(kinds.contains(&ViolationKind::UnknownRequestedSlot));
    }

    #[test]
    fn validate_is_pure() {
        let t = turn();
        let ont = ontology();
        let a = validate_turn(&t, Some(&ont));
        let b = validate_turn(&t, Some(&ont));
        assert_eq!(a, b);
        assert_eq!(t, turn());
    }

    #[test]
    fn turn_serde_round_trip() {
        let t = DialogTurn {
            turn_id: "t2".into(),
            system_text: Some("what time works?".into()),
            user_text: "8 pm for 4".into(),
            requested_slots: vec!["time".into()],
            gold_labels: vec![
                SpanLabel {
                    slot: "time".into(),
                    start: 0,
                    end: 4,
                    value: "8 pm".into(),
                },
                SpanLabel {
                    slot: "people".into(),
                    start: 9,
                    end: 10,
                    value: "4".into(),
                },
            ],
        };
        let json = serde_json::to_string(&t).unwrap();
        let back: DialogTurn = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn slot_spec_accepts_bare_question_list() {
        let spec: SlotSpec = serde_json::from_str(r#"["What date?", "Which day?"]"#).unwrap();
        assert_eq!(spec.questions.len(), 2);
        assert_eq!(spec.kind, SlotKind::Text);
        let spec: SlotSpec =
            serde_json::from_str(r#"{"questions": ["What time?"], "kind": "time"}"#).unwrap();
        assert_eq!(spec.kind, SlotKind::Time);
    }

    #[test]
    fn finetune_config_invariants() {
        let mut cfg = FineTuneConfig::stage2_default();
        assert!(cfg.validate().is_ok());
        cfg.regime = Regime::Adapters;
        assert!(cfg.validate().is_err());
        cfg.adapter = Some(AdapterConfig::default());
        assert!(cfg.validate().is_ok());
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn qa_example_check() {
        let good = QAExample::answerable("q1", "to Sacramento", "Where to?", "Sacramento", 3);
        assert!(good.check().is_ok());
        let bad = QAExample::answerable("q2", "to Sacramento", "Where to?", "Sacramento", 2);
        assert!(bad.check().is_err());
        let imp = QAExample::impossible("q3", "to Sacramento", "What date?");
        assert!(imp.check().is_ok());
    }
}
