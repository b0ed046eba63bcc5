//! Dataset containers, file formats, and samplers.
//!
//! Two on-disk formats live here: the native slot-labeling JSON
//! (`{"name", "slots", "separator_token", "turns"}`) and SQuAD 2.0 JSON for
//! QA corpora. Few-shot splits are nested (every smaller split is a subset
//! of every larger one at the same seed) and reproduce the published sizes
//! for the known benchmark families.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reformulate::{self, ContextMode, PromptSpec, QaOptions};
use crate::types::{validate_turn, DialogTurn, QAExample, SlotOntology};

/// A slot-labeling dataset: ontology plus annotated turns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SLDataset {
    pub name: String,
    pub ontology: SlotOntology,
    pub turns: Vec<DialogTurn>,
}

impl SLDataset {
    /// Violations across the ontology and every turn.
    pub fn validate(&self) -> Vec<crate::types::Violation> {
        let mut out = self.ontology.validate();
        for turn in &self.turns {
            out.extend(validate_turn(turn, Some(&self.ontology)));
        }
        out
    }
}

/// A QA dataset with unique qids.
#[derive(Debug, Clone, PartialEq)]
pub struct QADataset {
    pub name: String,
    pub version: String,
    pub examples: Vec<QAExample>,
}

impl QADataset {
    pub fn new(name: impl Into<String>, examples: Vec<QAExample>) -> Result<Self> {
        let ds = QADataset {
            name: name.into(),
            version: "v2.0".to_string(),
            examples,
        };
        ds.check_unique_qids()?;
        Ok(ds)
    }

    fn check_unique_qids(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::with_capacity(self.examples.len());
        for ex in &self.examples {
            if !seen.insert(ex.qid.as_str()) {
                return Err(Error::Dataset(format!("duplicate qid `{}`", ex.qid)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Native SL JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SlFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(flatten)]
    ontology: SlotOntology,
    turns: Vec<DialogTurn>,
}

/// Parse and validate a native SL JSON document.
pub fn parse_sl_json(bytes: &[u8], origin: &str) -> Result<SLDataset> {
    let file: SlFile =
        serde_json::from_slice(bytes).map_err(|e| Error::parse(origin, e))?;
    let ds = SLDataset {
        name: file.name.unwrap_or_else(|| stem_of(origin)),
        ontology: file.ontology,
        turns: file.turns,
    };
    let violations = ds.validate();
    if !violations.is_empty() {
        return Err(Error::Validation { violations });
    }
    Ok(ds)
}

/// Pretty-printed native SL JSON bytes (ends with a newline).
pub fn emit_sl_json(ds: &SLDataset) -> Vec<u8> {
    let file = SlFile {
        name: Some(ds.name.clone()),
        ontology: ds.ontology.clone(),
        turns: ds.turns.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file).expect("SL JSON serialization");
    bytes.push(b'\n');
    bytes
}

/// Load a validated SL dataset from a file.
pub fn load_sl(path: impl AsRef<Path>) -> Result<SLDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_sl_json(&bytes, &path.display().to_string())
}

pub fn save_sl(ds: &SLDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, emit_sl_json(ds)).map_err(|e| Error::io(path.display().to_string(), e))
}

fn stem_of(origin: &str) -> String {
    Path::new(origin)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

// ---------------------------------------------------------------------------
// SL -> QA conversion
// ---------------------------------------------------------------------------

/// Convert every turn with [`reformulate::turn_to_qa`]; qids follow the
/// `{turn_id}:{slot}` scheme. Answer text is copied verbatim from the gold
/// labels; no normalization is applied.
pub fn sl_to_qa(ds: &SLDataset, spec: &PromptSpec, mode: ContextMode) -> Result<QADataset> {
    sl_to_qa_with(ds, spec, mode, QaOptions::default())
}

pub fn sl_to_qa_with(
    ds: &SLDataset,
    spec: &PromptSpec,
    mode: ContextMode,
    options: QaOptions,
) -> Result<QADataset> {
    let mut examples = Vec::with_capacity(ds.turns.len() * ds.ontology.slots.len());
    for turn in &ds.turns {
        examples.extend(reformulate::turn_to_qa_with(
            turn,
            &ds.ontology,
            spec,
            mode,
            options,
        )?);
    }
    QADataset::new(ds.name.clone(), examples)
}

// ---------------------------------------------------------------------------
// SQuAD 2.0 JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SquadFile {
    version: String,
    data: Vec<SquadArticle>,
}

#[derive(Serialize, Deserialize)]
struct SquadArticle {
    title: String,
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Serialize, Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Serialize, Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    #[serde(default)]
    is_impossible: bool,
    answers: Vec<SquadAnswer>,
}

#[derive(Serialize, Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

/// Emit SQuAD 2.0 JSON: one article titled after the dataset, consecutive
/// examples sharing a context grouped into one paragraph, unanswerable
/// examples carrying `"is_impossible": true` and an empty answer list.
/// `answer_start` counts chars, matching the reference format.
pub fn emit_squad_json(qa: &QADataset) -> Vec<u8> {
    let mut paragraphs: Vec<SquadParagraph> = Vec::new();
    for ex in &qa.examples {
        let qas_entry = SquadQa {
            id: ex.qid.clone(),
            question: ex.question.clone(),
            is_impossible: ex.is_impossible,
            answers: match (&ex.answer_text, ex.answer_start) {
                (Some(text), Some(start)) => vec![SquadAnswer {
                    text: text.clone(),
                    answer_start: start,
                }],
                _ => vec![],
            },
        };
        match paragraphs.last_mut() {
            Some(p) if p.context == ex.context => p.qas.push(qas_entry),
            _ => paragraphs.push(SquadParagraph {
                context: ex.context.clone(),
                qas: vec![qas_entry],
            }),
        }
    }
    let file = SquadFile {
        version: qa.version.clone(),
        data: vec![SquadArticle {
            title: qa.name.clone(),
            paragraphs,
        }],
    };
    let mut bytes = serde_json::to_vec_pretty(&file).expect("SQuAD JSON serialization");
    bytes.push(b'\n');
    bytes
}

/// Parse SQuAD 2.0 JSON. Multi-answer entries keep their first answer;
/// entries with no answers and no `is_impossible` flag are rejected.
pub fn parse_squad_json(bytes: &[u8], origin: &str) -> Result<QADataset> {
    let file: SquadFile = serde_json::from_slice(bytes).map_err(|e| Error::parse(origin, e))?;
    let name = file
        .data
        .first()
        .map(|a| a.title.clone())
        .unwrap_or_else(|| stem_of(origin));
    let mut examples = Vec::new();
    for article in file.data {
        for paragraph in article.paragraphs {
            for qa in paragraph.qas {
                let example = if qa.is_impossible {
                    QAExample::impossible(qa.id, paragraph.context.clone(), qa.question)
                } else {
                    let answer = qa.answers.into_iter().next().ok_or_else(|| {
                        Error::parse(
                            origin,
                            format!("qa `{}` has no answers and is not impossible", qa.id),
                        )
                    })?;
                    QAExample::answerable(
                        qa.id,
                        paragraph.context.clone(),
                        qa.question,
                        answer.text,
                        answer.answer_start,
                    )
                };
                if let Err(msg) = example.check() {
                    return Err(Error::parse(origin, msg));
                }
                examples.push(example);
            }
        }
    }
    let mut ds = QADataset::new(name, examples)?;
    ds.version = file.version;
    Ok(ds)
}

pub fn load_squad(path: impl AsRef<Path>) -> Result<QADataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_squad_json(&bytes, &path.display().to_string())
}

pub fn save_squad(qa: &QADataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, emit_squad_json(qa)).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Few-shot splits
// ---------------------------------------------------------------------------

/// A training fraction `1/denominator` with power-of-two denominators up to
/// 128.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fraction {
    pub denominator: u32,
}

impl Fraction {
    pub const ALL: [Fraction; 8] = [
        Fraction { denominator: 128 },
        Fraction { denominator: 64 },
        Fraction { denominator: 32 },
        Fraction { denominator: 16 },
        Fraction { denominator: 8 },
        Fraction { denominator: 4 },
        Fraction { denominator: 2 },
        Fraction { denominator: 1 },
    ];

    pub fn new(denominator: u32) -> Result<Self> {
        if denominator.is_power_of_two() && denominator <= 128 {
            Ok(Fraction { denominator })
        } else {
            Err(Error::Config(format!(
                "fraction denominator must be a power of two up to 128, got {denominator}"
            )))
        }
    }

    /// Parse `"1"`, `"1/2"`, ..., `"1/128"`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "1" {
            return Fraction::new(1);
        }
        let denom = s
            .strip_prefix("1/")
            .and_then(|d| d.parse::<u32>().ok())
            .ok_or_else(|| Error::Config(format!("cannot parse fraction `{s}`")))?;
        Fraction::new(denom)
    }
}

impl std::fmt::Display for Fraction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.denominator == 1 {
            write!(f, "1")
        } else {
            write!(f, "1/{}", self.denominator)
        }
    }
}

/// Published split sizes for the known benchmark families, keyed by
/// normalized dataset name. Entries are `(denominator, turn count)` with the
/// full size at denominator 1. The published sizes predate this toolkit and
/// do not all follow one rounding rule, so they are pinned as data.
pub const SPLIT_TABLE: &[(&str, &[(u32, usize)])] = &[
    (
        "restaurants-8k",
        &[
            (128, 64),
            (64, 128),
            (32, 256),
            (16, 512),
            (8, 1024),
            (4, 2049),
            (2, 4099),
            (1, 8198),
        ],
    ),
    (
        "dstc8-buses",
        &[(32, 34), (16, 70), (8, 141), (4, 283), (2, 566), (1, 1133)],
    ),
    (
        "dstc8-events",
        &[(32, 46), (16, 93), (8, 187), (4, 374), (2, 749), (1, 1498)],
    ),
    (
        "dstc8-rental-cars",
        &[(32, 64), (16, 129), (8, 258), (4, 516), (2, 1032), (1, 2064)],
    ),
    (
        "dstc8-homes",
        &[(32, 26), (16, 54), (8, 109), (4, 218), (2, 437), (1, 874)],
    ),
];

fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Published `(denominator, count)` rows for a dataset, when its name is a
/// known family and `size` matches the family's full size.
pub fn family_table(name: &str, size: usize) -> Option<&'static [(u32, usize)]> {
    let name = normalize_name(name);
    SPLIT_TABLE.iter().find_map(|(family, rows)| {
        let full = rows.iter().find(|(d, _)| *d == 1).map(|(_, n)| *n)?;
        (*family == name && full == size).then_some(*rows)
    })
}

/// Fractions a dataset supports: the family's published ones, or any
/// fraction that keeps at least one turn.
pub fn available_fractions(ds: &SLDataset) -> Vec<Fraction> {
    match family_table(&ds.name, ds.turns.len()) {
        Some(rows) => {
            let mut fractions: Vec<Fraction> = rows
                .iter()
                .map(|(d, _)| Fraction { denominator: *d })
                .collect();
            fractions.sort_by(|a, b| b.denominator.cmp(&a.denominator));
            fractions
        }
        None => Fraction::ALL
            .iter()
            .copied()
            .filter(|f| ds.turns.len() / f.denominator as usize > 0)
            .collect(),
    }
}

fn split_target(ds: &SLDataset, fraction: Fraction) -> Result<usize> {
    if let Some(rows) = family_table(&ds.name, ds.turns.len()) {
        return rows
            .iter()
            .find(|(d, _)| *d == fraction.denominator)
            .map(|(_, n)| *n)
            .ok_or_else(|| Error::FractionUnavailable {
                name: ds.name.clone(),
                denominator: fraction.denominator,
                size: ds.turns.len(),
            });
    }
    let target = ds.turns.len() / fraction.denominator as usize;
    if target == 0 {
        return Err(Error::FractionUnavailable {
            name: ds.name.clone(),
            denominator: fraction.denominator,
            size: ds.turns.len(),
        });
    }
    Ok(target)
}

/// Draw a few-shot split of whole turns. Splits are nested: at a fixed seed,
/// the turns of a smaller fraction are a subset of every larger fraction's.
/// Known families reproduce their published sizes exactly; other datasets
/// use floor division. Fraction 1 returns the dataset unchanged.
pub fn sample_split(ds: &SLDataset, fraction: Fraction, seed: u64) -> Result<SLDataset> {
    let target = split_target(ds, fraction)?;
    if target == ds.turns.len() {
        return Ok(ds.clone());
    }
    let mut indices: Vec<usize> = (0..ds.turns.len()).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = indices[..target].to_vec();
    chosen.sort_unstable();
    Ok(SLDataset {
        name: ds.name.clone(),
        ontology: ds.ontology.clone(),
        turns: chosen.iter().map(|&i| ds.turns[i].clone()).collect(),
    })
}

/// Uniform sample of `n` QA examples without replacement, deterministic in
/// the seed. Original example order is preserved.
pub fn subsample_qa(qa: &QADataset, n: usize, seed: u64) -> Result<QADataset> {
    if n > qa.len() {
        return Err(Error::SampleTooLarge {
            requested: n,
            available: qa.len(),
        });
    }
    let mut indices: Vec<usize> = (0..qa.len()).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = indices[..n].to_vec();
    chosen.sort_unstable();
    let mut out = qa.clone();
    out.examples = chosen.iter().map(|&i| qa.examples[i].clone()).collect();
    Ok(out)
}
