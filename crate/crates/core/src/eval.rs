//! Exact-span-match scoring: per-slot precision/recall/F1 and the
//! unweighted macro average across slots.
//!
//! A prediction counts only if its character range equals the gold range
//! exactly; matching on ranges rather than strings means duplicate values in
//! one utterance cannot mask position errors. A present-but-wrong span
//! counts as both a false positive and a false negative.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::SLDataset;
use crate::error::{Error, Result};
use crate::reformulate::{build_context, ContextMode};
use crate::types::{DialogTurn, SpanPrediction};

/// Outcome of one (turn, slot) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
    WrongSpan,
}

/// Compare a predicted char span against the gold one. Spans must be in the
/// same coordinate system (context coordinates throughout this module).
pub fn classify(pred: Option<(usize, usize)>, gold: Option<(usize, usize)>) -> Outcome {
    match (pred, gold) {
        (Some(p), Some(g)) if p == g => Outcome::TruePositive,
        (Some(_), Some(_)) => Outcome::WrongSpan,
        (Some(_), None) => Outcome::FalsePositive,
        (None, Some(_)) => Outcome::FalseNegative,
        (None, None) => Outcome::TrueNegative,
    }
}

/// Per-slot tallies and derived metrics. `degenerate` flags slots whose
/// precision or recall denominator was empty; such metrics score 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub wrong_span: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

impl SlotMetrics {
    fn observe(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::TruePositive => self.tp += 1,
            Outcome::FalsePositive => self.fp += 1,
            Outcome::FalseNegative => self.fn_ += 1,
            Outcome::TrueNegative => self.tn += 1,
            Outcome::WrongSpan => self.wrong_span += 1,
        }
    }

    fn finalize(&mut self) {
        let p_denom = self.tp + self.fp + self.wrong_span;
        let r_denom = self.tp + self.fn_ + self.wrong_span;
        self.degenerate = p_denom == 0 || r_denom == 0;
        self.precision = if p_denom == 0 {
            0.0
        } else {
            self.tp as f64 / p_denom as f64
        };
        self.recall = if r_denom == 0 {
            0.0
        } else {
            self.tp as f64 / r_denom as f64
        };
        self.f1 = if self.precision + self.recall == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        };
    }
}

/// Evaluation result: per-slot metrics in ontology order plus the macro
/// average.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_f1: f64,
    pub slots: IndexMap<String, SlotMetrics>,
    pub turns_evaluated: usize,
    pub pairs_evaluated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
}

impl MetricsReport {
    /// Plain-text table for terminal output.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6} {:>6}\n",
            "slot", "precision", "recall", "f1", "tp", "fp", "fn", "wrong"
        ));
        for (slot, m) in &self.slots {
            out.push_str(&format!(
                "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6} {:>6}{}\n",
                slot,
                m.precision,
                m.recall,
                m.f1,
                m.tp,
                m.fp,
                m.fn_,
                m.wrong_span,
                if m.degenerate { "  (degenerate)" } else { "" }
            ));
        }
        out.push_str(&format!(
            "macro F1 {:.4} over {} slots, {} turns, {} pairs\n",
            self.macro_f1,
            self.slots.len(),
            self.turns_evaluated,
            self.pairs_evaluated
        ));
        out
    }
}

/// Turn filter for subset views; [`requested_nonempty`] reproduces the
/// requested-slot population.
pub type TurnFilter<'a> = dyn Fn(&DialogTurn) -> bool + 'a;

pub fn requested_nonempty(turn: &DialogTurn) -> bool {
    !turn.requested_slots.is_empty()
}

/// Score predictions against a dataset's gold labels. Predictions are keyed
/// by `{turn_id}:{slot}` qids and must cover every evaluated (turn, slot)
/// pair; offsets are context coordinates under `mode` (which must match the
/// mode used at prediction time). Per-slot F1 is `2PR/(P+R)`; the macro
/// average is the unweighted mean over ontology slots.
pub fn evaluate(
    preds: &[SpanPrediction],
    ds: &SLDataset,
    mode: ContextMode,
    filter: Option<&TurnFilter<'_>>,
    subset_name: Option<&str>,
) -> Result<MetricsReport> {
    let by_qid: HashMap<&str, &SpanPrediction> =
        preds.iter().map(|p| (p.qid.as_str(), p)).collect();

    let mut slots: IndexMap<String, SlotMetrics> = ds
        .ontology
        .slots
        .keys()
        .map(|s| (s.clone(), SlotMetrics::default()))
        .collect();

    let mut missing = Vec::new();
    let mut turns_evaluated = 0;
    let mut pairs_evaluated = 0;
    for turn in &ds.turns {
        if let Some(keep) = filter {
            if !keep(turn) {
                continue;
            }
        }
        turns_evaluated += 1;
        let built = build_context(turn, mode);
        for slot in ds.ontology.slots.keys() {
            let qid = format!("{}:{slot}", turn.turn_id);
            let Some(pred) = by_qid.get(qid.as_str()) else {
                missing.push(qid);
                continue;
            };
            let gold = turn.label_for(slot).map(|label| {
                (
                    built.user_region.start + label.start,
                    built.user_region.start + label.end,
                )
            });
            let outcome = classify(pred.span(), gold);
            slots
                .get_mut(slot)
                .expect("slot initialized above")
                .observe(outcome);
            pairs_evaluated += 1;
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingPredictions { qids: missing });
    }

    for metrics in slots.values_mut() {
        metrics.finalize();
    }
    let macro_f1 = if slots.is_empty() {
        0.0
    } else {
        slots.values().map(|m| m.f1).sum::<f64>() / slots.len() as f64
    };

    Ok(MetricsReport {
        macro_f1,
        slots,
        turns_evaluated,
        pairs_evaluated,
        subset: subset_name.map(str::to_string),
    })
}
