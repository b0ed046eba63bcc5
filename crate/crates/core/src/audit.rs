//! Annotation linting: ambiguity and inconsistency findings over an SL
//! dataset.
//!
//! Inconsistency rules fire on intra-dataset disagreement, not on any
//! canonical style: a dataset that always writes `p.m.` is consistent, one
//! that mixes `pm` and `p.m.` is flagged on every affected label. The
//! auditor never modifies the dataset and findings come out in a stable
//! order (rule, then turn, then label).

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::SLDataset;
use crate::types::{SlotKind, SpanLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditRule {
    /// Utterance is a bare number while several slots could hold a number.
    AmbiguousNumeric,
    /// Time values mix the plain and dotted meridiem styles (`pm` / `p.m.`).
    PmVariants,
    /// Values appear both with and without a leading `at `/`on `/`the `.
    LeadingFunctionWord,
    /// People values appear both as a bare count and with a trailing noun.
    PeopleNoun,
    /// Both slots of a declared pair carry the identical value in one turn.
    SlotPairEqual,
}

impl AuditRule {
    pub fn name(self) -> &'static str {
        match self {
            AuditRule::AmbiguousNumeric => "ambiguous-numeric",
            AuditRule::PmVariants => "pm-variants",
            AuditRule::LeadingFunctionWord => "leading-function-word",
            AuditRule::PeopleNoun => "people-noun",
            AuditRule::SlotPairEqual => "slot-pair-equal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Ambiguity,
    Inconsistency,
}

/// One finding; `evidence` is a substring of the turn's user text or of a
/// label value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub rule: AuditRule,
    pub turn_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<String>,
    pub evidence: String,
    pub severity: Severity,
}

/// Which rules run; each rule is individually toggleable. The slot-pair rule
/// runs only over the declared pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditConfig {
    pub ambiguous_numeric: bool,
    pub pm_variants: bool,
    pub leading_function_word: bool,
    pub people_noun: bool,
    #[serde(default)]
    pub slot_pairs: Vec<(String, String)>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            ambiguous_numeric: true,
            pm_variants: true,
            leading_function_word: true,
            people_noun: true,
            slot_pairs: Vec::new(),
        }
    }
}

impl AuditConfig {
    pub fn none() -> Self {
        AuditConfig {
            ambiguous_numeric: false,
            pm_variants: false,
            leading_function_word: false,
            people_noun: false,
            slot_pairs: Vec::new(),
        }
    }

    pub fn enable(&mut self, rule: AuditRule) {
        match rule {
            AuditRule::AmbiguousNumeric => self.ambiguous_numeric = true,
            AuditRule::PmVariants => self.pm_variants = true,
            AuditRule::LeadingFunctionWord => self.leading_function_word = true,
            AuditRule::PeopleNoun => self.people_noun = true,
            AuditRule::SlotPairEqual => {}
        }
    }
}

fn is_bare_integer(text: &str) -> bool {
    let t = text.trim();
    !t.is_empty() && t.chars().all(|c| c.is_ascii_digit())
}

/// Flag turns whose trimmed user text is a single integer while the ontology
/// declares two or more number-capable slots; without context such an
/// utterance cannot be assigned to a slot.
pub fn find_ambiguous_numeric(ds: &SLDataset) -> Vec<AuditFinding> {
    let numeric_slots = ds
        .ontology
        .slots
        .values()
        .filter(|s| s.kind.numeric_capable())
        .count();
    if numeric_slots < 2 {
        return Vec::new();
    }
    ds.turns
        .iter()
        .filter(|turn| is_bare_integer(&turn.user_text))
        .map(|turn| AuditFinding {
            rule: AuditRule::AmbiguousNumeric,
            turn_id: turn.turn_id.clone(),
            slot: None,
            evidence: turn.user_text.trim().to_string(),
            severity: Severity::Ambiguity,
        })
        .collect()
}

/// Meridiem style of a value: plain word (`pm`, `am`) or dotted (`p.m.`,
/// `a.m.`). Detection is on the lowercased value; digits count as
/// separators, so `8pm` is still a plain `pm`.
fn meridiem_style(value: &str) -> Option<&'static str> {
    let lower = value.to_lowercase();
    if lower.contains("p.m") || lower.contains("a.m") {
        return Some("dotted");
    }
    let has_plain = lower
        .split(|c: char| !c.is_ascii_lowercase())
        .any(|tok| tok == "pm" || tok == "am");
    has_plain.then_some("plain")
}

fn leading_function_word(value: &str) -> Option<&str> {
    let lower = value.to_lowercase();
    for prefix in ["at ", "on ", "the "] {
        if lower.starts_with(prefix) {
            return Some(&value[prefix.len()..]);
        }
    }
    None
}

fn people_shape(value: &str) -> Option<&'static str> {
    let t = value.trim();
    if is_bare_integer(t) {
        return Some("bare");
    }
    let mut parts = t.splitn(2, ' ');
    let first = parts.next()?;
    let rest = parts.next()?;
    if is_bare_integer(first) && !rest.trim().is_empty() {
        Some("noun")
    } else {
        None
    }
}

fn labels_of_kind<'a>(
    ds: &'a SLDataset,
    kind: SlotKind,
) -> impl Iterator<Item = (&'a crate::types::DialogTurn, &'a SpanLabel)> {
    ds.turns.iter().flat_map(move |turn| {
        turn.gold_labels
            .iter()
            .filter(move |l| ds.ontology.kind(&l.slot) == Some(kind))
            .map(move |l| (turn, l))
    })
}

/// Run the inconsistency rules enabled in `cfg` (everything except
/// `ambiguous_numeric`, which is a separate pass).
pub fn find_inconsistencies(ds: &SLDataset, cfg: &AuditConfig) -> Vec<AuditFinding> {
    let mut findings = Vec::new();

    if cfg.pm_variants {
        let styles: HashSet<&str> = labels_of_kind(ds, SlotKind::Time)
            .filter_map(|(_, l)| meridiem_style(&l.value))
            .collect();
        if styles.len() > 1 {
            for (turn, label) in labels_of_kind(ds, SlotKind::Time) {
                if meridiem_style(&label.value).is_some() {
                    findings.push(AuditFinding {
                        rule: AuditRule::PmVariants,
                        turn_id: turn.turn_id.clone(),
                        slot: Some(label.slot.clone()),
                        evidence: label.value.clone(),
                        severity: Severity::Inconsistency,
                    });
                }
            }
        }
    }

    if cfg.leading_function_word {
        // Per slot: values that appear both with and without the prefix.
        let mut by_slot: HashSet<(String, String)> = HashSet::new();
        for turn in &ds.turns {
            for label in &turn.gold_labels {
                by_slot.insert((label.slot.clone(), label.value.to_lowercase()));
            }
        }
        let mut flagged: HashSet<(String, String)> = HashSet::new();
        for (slot, value) in &by_slot {
            if let Some(stripped) = leading_function_word(value) {
                if by_slot.contains(&(slot.clone(), stripped.to_lowercase())) {
                    flagged.insert((slot.clone(), value.clone()));
                    flagged.insert((slot.clone(), stripped.to_lowercase()));
                }
            }
        }
        for turn in &ds.turns {
            for label in &turn.gold_labels {
                if flagged.contains(&(label.slot.clone(), label.value.to_lowercase())) {
                    findings.push(AuditFinding {
                        rule: AuditRule::LeadingFunctionWord,
                        turn_id: turn.turn_id.clone(),
                        slot: Some(label.slot.clone()),
                        evidence: label.value.clone(),
                        severity: Severity::Inconsistency,
                    });
                }
            }
        }
    }

    if cfg.people_noun {
        let shapes: HashSet<&str> = labels_of_kind(ds, SlotKind::People)
            .filter_map(|(_, l)| people_shape(&l.value))
            .collect();
        if shapes.len() > 1 {
            for (turn, label) in labels_of_kind(ds, SlotKind::People) {
                if people_shape(&label.value).is_some() {
                    findings.push(AuditFinding {
                        rule: AuditRule::PeopleNoun,
                        turn_id: turn.turn_id.clone(),
                        slot: Some(label.slot.clone()),
                        evidence: label.value.clone(),
                        severity: Severity::Inconsistency,
                    });
                }
            }
        }
    }

    if !cfg.slot_pairs.is_empty() {
        for turn in &ds.turns {
            for (a, b) in &cfg.slot_pairs {
                let (Some(la), Some(lb)) = (turn.label_for(a), turn.label_for(b)) else {
                    continue;
                };
                if la.value == lb.value {
                    findings.push(AuditFinding {
                        rule: AuditRule::SlotPairEqual,
                        turn_id: turn.turn_id.clone(),
                        slot: None,
                        evidence: la.value.clone(),
                        severity: Severity::Ambiguity,
                    });
                }
            }
        }
    }

    findings
}

/// All enabled rules over the dataset, in stable order.
pub fn run_audit(ds: &SLDataset, cfg: &AuditConfig) -> Vec<AuditFinding> {
    let mut findings = Vec::new();
    if cfg.ambiguous_numeric {
        findings.extend(find_ambiguous_numeric(ds));
    }
    findings.extend(find_inconsistencies(ds, cfg));
    findings
}

/// Findings report with per-rule counts, ready for JSON output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub findings: Vec<AuditFinding>,
    pub counts: indexmap::IndexMap<String, usize>,
    pub total: usize,
}

impl AuditReport {
    pub fn from_findings(findings: Vec<AuditFinding>) -> Self {
        let mut counts = indexmap::IndexMap::new();
        for f in &findings {
            *counts.entry(f.rule.name().to_string()).or_insert(0) += 1;
        }
        AuditReport {
            total: findings.len(),
            findings,
            counts,
        }
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:<10} {:<14} {}\n",
            "rule", "turn", "slot", "evidence"
        ));
        for f in &self.findings {
            out.push_str(&format!(
                "{:<22} {:<10} {:<14} {}\n",
                f.rule.name(),
                f.turn_id,
                f.slot.as_deref().unwrap_or("-"),
                f.evidence
            ));
        }
        out.push_str(&format!("{} finding(s)\n", self.total));
        out
    }
}
