//! Deterministic synthetic benchmarks: a templated restaurant-booking SL
//! dataset and a generic span-QA corpus for first-stage tuning.
//!
//! The restaurant generator plants a configurable share of bare-number
//! turns ("6") that are unanswerable without the requested-slot context, so
//! the prompt mechanism has something real to disambiguate. Everything is
//! seeded; equal seeds give byte-identical datasets.

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{QADataset, SLDataset};
use crate::text;
use crate::types::{DialogTurn, QAExample, SlotKind, SlotOntology, SlotSpec, SpanLabel};

const DATES: &[&str] = &[
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "tomorrow",
    "march 3", "april 12", "june 1", "july 20", "september 5", "october 31",
];
const TIMES: &[&str] = &[
    "8 pm", "7 pm", "6 pm", "9 pm", "noon", "7:30", "8:15", "6:45", "5 pm", "10 am", "11 am",
];
const BARE_NUMBERS: &[&str] = &["2", "3", "4", "5", "6", "7", "8", "9"];
const FIRST_NAMES: &[&str] = &[
    "james", "mary", "robert", "patricia", "john", "jennifer", "michael", "linda", "david",
    "elizabeth", "william", "barbara", "richard", "susan", "joseph", "jessica", "thomas", "sarah",
    "charles", "karen",
];
const LAST_NAMES: &[&str] = &[
    "smith", "johnson", "williams", "brown", "jones", "garcia", "miller", "davis", "rodriguez",
    "martinez", "hernandez", "lopez", "gonzalez", "wilson", "anderson", "taylor", "moore",
    "jackson", "martin", "lee",
];
const CITIES: &[&str] = &[
    "boston", "denver", "austin", "tucson", "seattle", "portland", "chicago", "atlanta",
    "madison", "orlando",
];

/// The 5-slot restaurant-booking ontology used by the synthetic benchmark.
pub fn restaurant_ontology() -> SlotOntology {
    let mut slots = IndexMap::new();
    slots.insert(
        "date".to_string(),
        SlotSpec::new(
            vec!["What date?".into(), "Which day are you coming?".into()],
            SlotKind::Date,
        ),
    );
    slots.insert(
        "time".to_string(),
        SlotSpec::new(
            vec!["What time?".into(), "What time works for you?".into()],
            SlotKind::Time,
        ),
    );
    slots.insert(
        "people".to_string(),
        SlotSpec::new(vec!["How many people?".into()], SlotKind::People),
    );
    slots.insert(
        "first_name".to_string(),
        SlotSpec::new(vec!["What is the first name?".into()], SlotKind::Name),
    );
    slots.insert(
        "last_name".to_string(),
        SlotSpec::new(vec!["What is the last name?".into()], SlotKind::Name),
    );
    SlotOntology::new(slots)
}

/// Knobs for [`restaurant_dataset`]. Fractions are of all turns; bare-number
/// turns take precedence, then unanswerable small talk, the rest are
/// templated bookings.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub turns: usize,
    pub seed: u64,
    pub bare_number_fraction: f64,
    /// Probability that a labeled turn also carries a requested slot (with
    /// the matching system question).
    pub requested_fraction: f64,
    pub unanswerable_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            turns: 500,
            seed: 7,
            bare_number_fraction: 0.25,
            requested_fraction: 0.5,
            unanswerable_fraction: 0.1,
        }
    }
}

enum Seg {
    Lit(&'static str),
    Slot(&'static str),
}

use Seg::{Lit, Slot};

fn templates() -> Vec<Vec<Seg>> {
    vec![
        vec![
            Lit("book a table for "),
            Slot("people"),
            Lit(" people at "),
            Slot("time"),
        ],
        vec![
            Lit("i need a table for "),
            Slot("people"),
            Lit(" on "),
            Slot("date"),
        ],
        vec![
            Lit("a table at "),
            Slot("time"),
            Lit(" on "),
            Slot("date"),
            Lit(" please"),
        ],
        vec![Lit("can we come at "), Slot("time")],
        vec![Lit("the reservation is for "), Slot("date")],
        vec![
            Lit("my name is "),
            Slot("first_name"),
            Lit(" "),
            Slot("last_name"),
        ],
        vec![
            Lit("booking under "),
            Slot("first_name"),
            Lit(" "),
            Slot("last_name"),
            Lit(" for "),
            Slot("people"),
        ],
        vec![Slot("first_name"), Lit(" "), Slot("last_name")],
        vec![
            Lit("do you have space on "),
            Slot("date"),
            Lit(" at "),
            Slot("time"),
        ],
        vec![Lit("we will be "), Slot("people"), Lit(" in total")],
    ]
}

const SMALL_TALK: &[&str] = &[
    "do you have anything available",
    "no that is all thank you",
    "sounds good see you then",
    "can you confirm the booking",
];

fn pool_for(slot: &str) -> &'static [&'static str] {
    match slot {
        "date" => DATES,
        "time" => TIMES,
        "people" => BARE_NUMBERS,
        "first_name" => FIRST_NAMES,
        "last_name" => LAST_NAMES,
        _ => unreachable!("unknown template slot {slot}"),
    }
}

fn system_question(slot: &str) -> &'static str {
    match slot {
        "date" => "what date should i book?",
        "time" => "what time should i book?",
        "people" => "how many people will attend?",
        "first_name" => "what is the first name for the booking?",
        "last_name" => "and the last name?",
        _ => "anything else?",
    }
}

fn fill(segs: &[Seg], rng: &mut ChaCha8Rng) -> (String, Vec<SpanLabel>) {
    let mut textual = String::new();
    let mut labels = Vec::new();
    for seg in segs {
        match seg {
            Lit(s) => textual.push_str(s),
            Slot(slot) => {
                let pool = pool_for(slot);
                let value = pool[rng.random_range(0..pool.len())];
                let start = text::char_len(&textual);
                textual.push_str(value);
                labels.push(SpanLabel {
                    slot: slot.to_string(),
                    start,
                    end: start + text::char_len(value),
                    value: value.to_string(),
                });
            }
        }
    }
    (textual, labels)
}

/// Generate a templated restaurant-booking dataset. Turn ids are
/// `{name}-{index}`; the output always validates against its ontology.
pub fn restaurant_dataset(name: &str, spec: &SynthSpec) -> SLDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = templates();
    let mut turns = Vec::with_capacity(spec.turns);

    for index in 0..spec.turns {
        let turn_id = format!("{name}-{index:04}");
        let draw: f64 = rng.random_range(0.0..1.0);
        let turn = if draw < spec.bare_number_fraction {
            // A lone number answering the slot the system just asked about.
            let slot = if rng.random_bool(0.5) { "time" } else { "people" };
            let value = BARE_NUMBERS[rng.random_range(0..BARE_NUMBERS.len())];
            DialogTurn {
                turn_id,
                system_text: Some(system_question(slot).to_string()),
                user_text: value.to_string(),
                requested_slots: vec![slot.to_string()],
                gold_labels: vec![SpanLabel {
                    slot: slot.to_string(),
                    start: 0,
                    end: text::char_len(value),
                    value: value.to_string(),
                }],
            }
        } else if draw < spec.bare_number_fraction + spec.unanswerable_fraction {
            let user_text = SMALL_TALK[rng.random_range(0..SMALL_TALK.len())];
            DialogTurn {
                turn_id,
                system_text: None,
                user_text: user_text.to_string(),
                requested_slots: vec![],
                gold_labels: vec![],
            }
        } else {
            let template = &templates[rng.random_range(0..templates.len())];
            let (user_text, labels) = fill(template, &mut rng);
            let (requested_slots, system_text) = if !labels.is_empty()
                && rng.random_bool(spec.requested_fraction)
            {
                let slot = labels[rng.random_range(0..labels.len())].slot.clone();
                let question = system_question(&slot).to_string();
                (vec![slot], Some(question))
            } else {
                (vec![], None)
            };
            DialogTurn {
                turn_id,
                system_text,
                user_text,
                requested_slots,
                gold_labels: labels,
            }
        };
        turns.push(turn);
    }

    SLDataset {
        name: name.to_string(),
        ontology: restaurant_ontology(),
        turns,
    }
}

/// Generate a generic span-QA corpus (travel and events domain) in the same
/// value vocabulary as the restaurant benchmark, with roughly the requested
/// share of unanswerable questions. Suited for first-stage tuning.
pub fn generic_qa(name: &str, examples: usize, unanswerable_fraction: f64, seed: u64) -> QADataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(examples);
    let mut qid = 0usize;

    while out.len() < examples {
        let family = rng.random_range(0..4u32);
        let push = |context: &str,
                        question: &str,
                        answer: Option<(&str, usize)>,
                        out: &mut Vec<QAExample>,
                        qid: &mut usize| {
            if out.len() >= examples {
                return;
            }
            let id = format!("{name}-{:05}", *qid);
            *qid += 1;
            match answer {
                Some((text_value, start)) => out.push(QAExample::answerable(
                    id,
                    context,
                    question,
                    text_value,
                    start,
                )),
                None => out.push(QAExample::impossible(id, context, question)),
            }
        };

        match family {
            0 => {
                let city = CITIES[rng.random_range(0..CITIES.len())];
                let time = TIMES[rng.random_range(0..TIMES.len())];
                let date = DATES[rng.random_range(0..DATES.len())];
                let context = format!("the train to {city} leaves at {time} on {date}");
                let time_start = text::char_len("the train to ") + text::char_len(city)
                    + text::char_len(" leaves at ");
                let date_start = time_start + text::char_len(time) + text::char_len(" on ");
                let time_q = if rng.random_bool(0.5) {
                    "what time does the train leave"
                } else {
                    "what time?"
                };
                push(&context, time_q, Some((time, time_start)), &mut out, &mut qid);
                let date_q = if rng.random_bool(0.5) {
                    "what day is the trip"
                } else {
                    "what date?"
                };
                push(&context, date_q, Some((date, date_start)), &mut out, &mut qid);
                if rng.random_bool(unanswerable_fraction) {
                    push(
                        &context,
                        "how many people are traveling",
                        None,
                        &mut out,
                        &mut qid,
                    );
                }
            }
            1 => {
                let first = FIRST_NAMES[rng.random_range(0..FIRST_NAMES.len())];
                let last = LAST_NAMES[rng.random_range(0..LAST_NAMES.len())];
                let time = TIMES[rng.random_range(0..TIMES.len())];
                let context = format!("the meeting with {first} {last} starts at {time}");
                let name_start = text::char_len("the meeting with ");
                let full = format!("{first} {last}");
                let time_start =
                    name_start + text::char_len(&full) + text::char_len(" starts at ");
                let meeting_q = if rng.random_bool(0.5) {
                    "what time is the meeting"
                } else {
                    "what time?"
                };
                push(&context, meeting_q, Some((time, time_start)), &mut out, &mut qid);
                push(
                    &context,
                    "who is the meeting with",
                    Some((&full, name_start)),
                    &mut out,
                    &mut qid,
                );
                if rng.random_bool(unanswerable_fraction) {
                    push(&context, "which room is booked", None, &mut out, &mut qid);
                }
            }
            2 => {
                let people = BARE_NUMBERS[rng.random_range(0..BARE_NUMBERS.len())];
                let date = DATES[rng.random_range(0..DATES.len())];
                let first = FIRST_NAMES[rng.random_range(0..FIRST_NAMES.len())];
                let context = format!("{first} reserved {people} seats for the show on {date}");
                let people_start = text::char_len(first) + text::char_len(" reserved ");
                let date_start = people_start
                    + text::char_len(people)
                    + text::char_len(" seats for the show on ");
                let people_q = if rng.random_bool(0.5) {
                    "how many seats are reserved"
                } else {
                    "how many people?"
                };
                push(&context, people_q, Some((people, people_start)), &mut out, &mut qid);
                push(
                    &context,
                    "what day is the show",
                    Some((date, date_start)),
                    &mut out,
                    &mut qid,
                );
                if rng.random_bool(unanswerable_fraction) {
                    push(&context, "what time does it start", None, &mut out, &mut qid);
                }
            }
            _ => {
                let time = TIMES[rng.random_range(0..TIMES.len())];
                let date = DATES[rng.random_range(0..DATES.len())];
                let context = format!("the next tour begins at {time} and runs until {date}");
                let time_start = text::char_len("the next tour begins at ");
                push(
                    &context,
                    "when does the tour begin",
                    Some((time, time_start)),
                    &mut out,
                    &mut qid,
                );
                if rng.random_bool(unanswerable_fraction) {
                    push(&context, "who is the guide", None, &mut out, &mut qid);
                }
                let date_start = time_start + text::char_len(time)
                    + text::char_len(" and runs until ");
                push(
                    &context,
                    "until what day does it run",
                    Some((date, date_start)),
                    &mut out,
                    &mut qid,
                );
            }
        }
    }

    QADataset::new(name, out).expect("generated qids are unique")
}
