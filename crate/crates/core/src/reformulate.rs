//! Turning slot-labeling turns into extractive QA examples.
//!
//! Each ontology slot becomes one question; slots the system requested in
//! the previous turn are appended to every question as a natural-language
//! prompt, separated by the ontology's separator token. Slots with a gold
//! span become answerable examples, the rest become unanswerable ones.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;
use crate::types::{DialogTurn, QAExample, SlotOntology};

/// How slot identifiers are rendered when appended as prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotRendering {
    /// `arrival_time` -> `arrival time`; lowercased.
    #[default]
    SpaceLowercase,
    Verbatim,
}

/// Rendering rule and separator used when building prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    #[serde(default)]
    pub rendering: SlotRendering,
    pub separator_token: String,
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec {
            rendering: SlotRendering::SpaceLowercase,
            separator_token: "<s>".to_string(),
        }
    }
}

impl PromptSpec {
    pub fn from_ontology(ontology: &SlotOntology) -> Self {
        PromptSpec {
            rendering: SlotRendering::SpaceLowercase,
            separator_token: ontology.separator_token.clone(),
        }
    }

    /// Deterministic surface form of a slot identifier.
    pub fn render_slot(&self, slot: &str) -> String {
        match self.rendering {
            SlotRendering::SpaceLowercase => slot.replace('_', " ").to_lowercase(),
            SlotRendering::Verbatim => slot.to_string(),
        }
    }
}

/// Canonical (first) question for `slot`.
pub fn build_question<'a>(slot: &str, ontology: &'a SlotOntology) -> Result<&'a str> {
    ontology
        .canonical_question(slot)
        .ok_or_else(|| Error::UnknownSlot { slot: slot.to_string() })
}

/// Append the requested slots to `question`, each preceded by the separator
/// token. With no requested slots the question is returned unchanged.
pub fn augment_with_requested(question: &str, requested: &[String], spec: &PromptSpec) -> String {
    let mut out = question.to_string();
    for slot in requested {
        out.push(' ');
        out.push_str(&spec.separator_token);
        out.push(' ');
        out.push_str(&spec.render_slot(slot));
    }
    out
}

/// Whether the QA context is the user utterance alone or the preceding
/// system turn followed by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    #[default]
    UserOnly,
    WithSystem,
}

/// A QA context plus the char range inside it occupied by the user
/// utterance. Answers are later constrained to that region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltContext {
    pub context: String,
    pub user_region: Range<usize>,
}

/// Assemble the QA context for a turn. `WithSystem` joins the system and
/// user texts with a single space; absent system text degenerates to
/// `UserOnly`.
pub fn build_context(turn: &DialogTurn, mode: ContextMode) -> BuiltContext {
    match (mode, &turn.system_text) {
        (ContextMode::WithSystem, Some(system)) if !system.is_empty() => {
            let offset = text::char_len(system) + 1;
            let context = format!("{system} {}", turn.user_text);
            let user_len = text::char_len(&turn.user_text);
            BuiltContext {
                context,
                user_region: offset..offset + user_len,
            }
        }
        _ => BuiltContext {
            context: turn.user_text.clone(),
            user_region: 0..text::char_len(&turn.user_text),
        },
    }
}

/// Conversion switches for [`turn_to_qa_with`].
#[derive(Debug, Clone, Copy)]
pub struct QaOptions {
    /// Append requested-slot prompts to every question.
    pub include_requested: bool,
    /// Emit one example per question paraphrase instead of only the
    /// canonical question (training-time augmentation).
    pub paraphrases: bool,
}

impl Default for QaOptions {
    fn default() -> Self {
        QaOptions {
            include_requested: true,
            paraphrases: false,
        }
    }
}

/// One QA example per ontology slot, in ontology order, with requested-slot
/// prompts appended. Qids follow the `{turn_id}:{slot}` scheme.
pub fn turn_to_qa(
    turn: &DialogTurn,
    ontology: &SlotOntology,
    spec: &PromptSpec,
    mode: ContextMode,
) -> Result<Vec<QAExample>> {
    turn_to_qa_with(turn, ontology, spec, mode, QaOptions::default())
}

pub fn turn_to_qa_with(
    turn: &DialogTurn,
    ontology: &SlotOntology,
    spec: &PromptSpec,
    mode: ContextMode,
    options: QaOptions,
) -> Result<Vec<QAExample>> {
    for label in &turn.gold_labels {
        if !ontology.contains(&label.slot) {
            return Err(Error::UnknownSlot {
                slot: label.slot.clone(),
            });
        }
    }

    let built = build_context(turn, mode);
    let requested: &[String] = if options.include_requested {
        &turn.requested_slots
    } else {
        &[]
    };

    let mut out = Vec::with_capacity(ontology.slots.len());
    for (slot, slot_spec) in &ontology.slots {
        let questions: &[String] = if options.paraphrases {
            &slot_spec.questions
        } else {
            &slot_spec.questions[..1.min(slot_spec.questions.len())]
        };
        for (qi, question) in questions.iter().enumerate() {
            let question = augment_with_requested(question, requested, spec);
            let qid = if qi == 0 {
                format!("{}:{slot}", turn.turn_id)
            } else {
                format!("{}:{slot}:p{qi}", turn.turn_id)
            };
            let example = match turn.label_for(slot) {
                Some(label) => QAExample::answerable(
                    qid,
                    built.context.clone(),
                    question,
                    label.value.clone(),
                    built.user_region.start + label.start,
                ),
                None => QAExample::impossible(qid, built.context.clone(), question),
            };
            out.push(example);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{SlotKind, SlotSpec, SpanLabel};
    use indexmap::IndexMap;

    fn travel_ontology() -> SlotOntology {
        let mut slots = IndexMap::new();
        slots.insert(
            "date".to_string(),
            SlotSpec::new(vec!["What date?".into()], SlotKind::Date),
        );
        slots.insert(
            "from_location".to_string(),
            SlotSpec::new(vec!["Where from?".into()], SlotKind::Text),
        );
        slots.insert(
            "to_location".to_string(),
            SlotSpec::new(vec!["Where to?".into()], SlotKind::Text),
        );
        SlotOntology::new(slots)
    }

    fn ticket_turn() -> DialogTurn {
        let user_text = "I need to buy a bus ticket to Sacramento".to_string();
        let start = user_text.find("Sacramento").unwrap();
        DialogTurn {
            turn_id: "d0-t0".into(),
            system_text: None,
            user_text: user_text.clone(),
            requested_slots: vec![],
            gold_labels: vec![SpanLabel {
                slot: "to_location".into(),
                start,
                end: start + "Sacramento".len(),
                value: "Sacramento".into(),
            }],
        }
    }

    #[test]
    fn canonical_question_lookup() {
        let ont = travel_ontology();
        assert_eq!(build_question("date", &ont).unwrap(), "What date?");
        assert_eq!(build_question("from_location", &ont).unwrap(), "Where from?");
        assert!(matches!(
            build_question("cuisine", &ont),
            Err(Error::UnknownSlot { .. })
        ));
    }

    #[test]
    fn requested_prompt_worked_example() {
        let spec = PromptSpec::default();
        let q = augment_with_requested(
            "What dates are you looking for",
            &["arrival_time".to_string()],
            &spec,
        );
        assert_eq!(q, "What dates are you looking for <s> arrival time");
    }

    #[test]
    fn requested_prompt_identity_and_multi() {
        let spec = PromptSpec::default();
        assert_eq!(augment_with_requested("What time?", &[], &spec), "What time?");
        let q = augment_with_requested(
            "What time?",
            &["people".to_string(), "time".to_string()],
            &spec,
        );
        assert_eq!(q, "What time? <s> people <s> time");
    }

    #[test]
    fn context_user_only_is_identity() {
        let turn = ticket_turn();
        let built = build_context(&turn, ContextMode::UserOnly);
        assert_eq!(built.context, turn.user_text);
        assert_eq!(built.user_region, 0..text::char_len(&turn.user_text));
    }

    #[test]
    fn context_with_system_offsets() {
        let mut turn = ticket_turn();
        turn.system_text = Some("Where are you leaving from?".into());
        let built = build_context(&turn, ContextMode::WithSystem);
        // Independent arithmetic: region starts after the system text plus
        // the joining space, and spans exactly the user text.
        let expected_start = text::char_len(turn.system_text.as_ref().unwrap()) + 1;
        let expected_end = expected_start + text::char_len(&turn.user_text);
        assert_eq!(built.user_region, expected_start..expected_end);
        assert_eq!(
            text::char_slice(&built.context, expected_start, expected_end).unwrap(),
            turn.user_text
        );
    }

    #[test]
    fn context_with_system_absent_degenerates() {
        let turn = ticket_turn();
        assert_eq!(
            build_context(&turn, ContextMode::WithSystem),
            build_context(&turn, ContextMode::UserOnly)
        );
    }

    #[test]
    fn turn_to_qa_one_example_per_slot() {
        let ont = travel_ontology();
        let spec = PromptSpec::from_ontology(&ont);
        let turn = ticket_turn();
        let examples = turn_to_qa(&turn, &ont, &spec, ContextMode::UserOnly).unwrap();
        assert_eq!(examples.len(), 3);

        let by_slot: Vec<(&str, &QAExample)> = vec![
            ("date", &examples[0]),
            ("from_location", &examples[1]),
            ("to_location", &examples[2]),
        ];
        for (slot, ex) in by_slot {
            assert_eq!(ex.qid, format!("d0-t0:{slot}"));
            if slot == "to_location" {
                assert!(!ex.is_impossible);
                assert_eq!(ex.answer_text.as_deref(), Some("Sacramento"));
                ex.check().unwrap();
            } else {
                assert!(ex.is_impossible);
            }
        }
    }

    #[test]
    fn turn_to_qa_carries_requested_suffix() {
        let ont = travel_ontology();
        let spec = PromptSpec::from_ontology(&ont);
        let mut turn = ticket_turn();
        turn.requested_slots = vec!["from_location".to_string()];
        let examples = turn_to_qa(&turn, &ont, &spec, ContextMode::UserOnly).unwrap();
        for ex in &examples {
            assert!(ex.question.ends_with("<s> from location"), "{}", ex.question);
        }
    }

    #[test]
    fn turn_to_qa_empty_ontology() {
        let ont = SlotOntology::new(IndexMap::new());
        let spec = PromptSpec::default();
        let turn = DialogTurn {
            turn_id: "t".into(),
            system_text: None,
            user_text: "hello".into(),
            requested_slots: vec![],
            gold_labels: vec![],
        };
        assert!(turn_to_qa(&turn, &ont, &spec, ContextMode::UserOnly)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn turn_to_qa_unknown_label_slot_errors() {
        let ont = travel_ontology();
        let spec = PromptSpec::default();
        let mut turn = ticket_turn();
        turn.gold_labels[0].slot = "venue".into();
        assert!(matches!(
            turn_to_qa(&turn, &ont, &spec, ContextMode::UserOnly),
            Err(Error::UnknownSlot { .. })
        ));
    }

    #[test]
    fn user_only_ignores_system_content() {
        let ont = travel_ontology();
        let spec = PromptSpec::from_ontology(&ont);
        let turn = ticket_turn();
        let mut with_system = turn.clone();
        with_system.system_text = Some("completely different system text".into());
        let a = turn_to_qa(&turn, &ont, &spec, ContextMode::UserOnly).unwrap();
        let b = turn_to_qa(&with_system, &ont, &spec, ContextMode::UserOnly).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn paraphrases_flag_expands_examples() {
        let mut ont = travel_ontology();
        ont.slots.get_mut("date").unwrap().questions = vec![
            "What date?".into(),
            "Which day are you thinking of?".into(),
        ];
        let spec = PromptSpec::from_ontology(&ont);
        let turn = ticket_turn();
        let opts = QaOptions {
            paraphrases: true,
            ..QaOptions::default()
        };
        let examples = turn_to_qa_with(&turn, &ont, &spec, ContextMode::UserOnly, opts).unwrap();
        assert_eq!(examples.len(), 4);
        assert_eq!(examples[1].qid, "d0-t0:date:p1");
    }
}
