//! Preference data and the system-prompt-conditioned augmentation.
//!
//! The augmentation is the heart of the method: each preference pair
//! (prompt x, original answer y0, revised answer y1) becomes *two* training
//! tuples under an opposed pair of system prompts,
//!
//! ```text
//! (s0, x, chosen = y0, rejected = y1)
//! (s1, x, chosen = y1, rejected = y0)
//! ```
//!
//! so the tuned model is rewarded for the permissive behavior under s0 and
//! the revised behavior under s1 — the system prompt stays a live switch
//! instead of being trained away. [`dpo_only_view`] is the ablation that
//! keeps only the s1 tuple per pair, which is plain DPO toward the revised
//! behavior.
//!
//! Serialized form is JSON Lines with exactly the keys `system`, `prompt`,
//! `chosen`, `rejected`, `source_tag` (raw pairs: `prompt`, `original`,
//! `revised`, `source_tag`), UTF-8, LF line endings. Loading is strict —
//! unknown or missing keys are errors that name the key and 1-based line.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::Lcg64;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("pair {index}: {reason}")]
    InvalidPair { index: usize, reason: String },
    #[error("system prompt pair: {0}")]
    InvalidSystemPrompts(String),
    #[error("{0}")]
    Malformed(String),
    #[error("missing key '{key}' at line {line}")]
    MissingKey { key: &'static str, line: usize },
    #[error("unexpected key '{key}' at line {line}")]
    UnexpectedKey { key: String, line: usize },
    #[error("key '{key}' at line {line} is not a string")]
    NonStringValue { key: &'static str, line: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type DataResult<T> = Result<T, DataError>;

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

/// One synthesized preference pair: the draft answer and its revision for a
/// prompt. `source_tag` names the originating task so mixed datasets stay
/// auditable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub original: String,
    pub revised: String,
    pub source_tag: String,
}

impl PreferencePair {
    /// Check the type's invariants: non-empty prompt, original != revised.
    pub fn check(&self) -> Result<(), String> {
        if self.prompt.trim().is_empty() {
            return Err("empty prompt".into());
        }
        if self.original == self.revised {
            return Err("original and revised answers are identical".into());
        }
        Ok(())
    }
}

/// An opposed pair of system prompts plus the behavior labels the judge
/// scores each side against (label 0 goes with s0, label 1 with s1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemPromptPair {
    pub s0: String,
    pub s1: String,
    pub score_labels: (String, String),
}

impl SystemPromptPair {
    pub fn new(
        s0: impl Into<String>,
        s1: impl Into<String>,
        label0: impl Into<String>,
        label1: impl Into<String>,
    ) -> DataResult<Self> {
        let pair = Self {
            s0: s0.into(),
            s1: s1.into(),
            score_labels: (label0.into(), label1.into()),
        };
        if pair.s0.trim().is_empty() || pair.s1.trim().is_empty() {
            return Err(DataError::InvalidSystemPrompts(
                "system prompts must be non-empty".into(),
            ));
        }
        if pair.s0 == pair.s1 {
            return Err(DataError::InvalidSystemPrompts(
                "s0 and s1 must differ".into(),
            ));
        }
        Ok(pair)
    }
}

/// One training tuple: the policy should prefer `chosen` over `rejected`
/// for `prompt` under `system`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CstTuple {
    pub system: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub source_tag: String,
}

/// Ordered collection of training tuples. Order is meaningful — training
/// shuffles are seeded permutations of this order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    tuples: Vec<CstTuple>,
}

impl Dataset {
    pub fn from_tuples(tuples: Vec<CstTuple>) -> Self {
        Self { tuples }
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CstTuple> {
        self.tuples.iter()
    }

    pub fn tuples(&self) -> &[CstTuple] {
        &self.tuples
    }

    pub fn get(&self, index: usize) -> Option<&CstTuple> {
        self.tuples.get(index)
    }

    /// Every text field of every tuple, in order — the corpus a vocabulary
    /// is built from before training.
    pub fn text_fields(&self) -> Vec<&str> {
        let mut out = Vec::with_capacity(self.tuples.len() * 4);
        for t in &self.tuples {
            out.push(t.system.as_str());
            out.push(t.prompt.as_str());
            out.push(t.chosen.as_str());
            out.push(t.rejected.as_str());
        }
        out
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a CstTuple;
    type IntoIter = std::slice::Iter<'a, CstTuple>;
    fn into_iter(self) -> Self::IntoIter {
        self.tuples.iter()
    }
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

fn check_pairs(pairs: &[PreferencePair]) -> DataResult<()> {
    for (index, pair) in pairs.iter().enumerate() {
        pair.check()
            .map_err(|reason| DataError::InvalidPair { index, reason })?;
    }
    Ok(())
}

/// The two-sided augmentation: 2n tuples for n pairs, preserving input
/// order (pair i yields tuples 2i and 2i+1). The s0 tuple prefers the
/// original answer, the s1 tuple prefers the revision.
pub fn cst_augment(pairs: &[PreferencePair], sp: &SystemPromptPair) -> DataResult<Dataset> {
    check_pairs(pairs)?;
    let mut tuples = Vec::with_capacity(pairs.len() * 2);
    for pair in pairs {
        tuples.push(CstTuple {
            system: sp.s0.clone(),
            prompt: pair.prompt.clone(),
            chosen: pair.original.clone(),
            rejected: pair.revised.clone(),
            source_tag: pair.source_tag.clone(),
        });
        tuples.push(CstTuple {
            system: sp.s1.clone(),
            prompt: pair.prompt.clone(),
            chosen: pair.revised.clone(),
            rejected: pair.original.clone(),
            source_tag: pair.source_tag.clone(),
        });
    }
    Ok(Dataset { tuples })
}

/// The plain-DPO baseline view: one tuple per pair, restrictive prompt only,
/// revision preferred. Equals the s1 half of [`cst_augment`] in the same
/// order.
pub fn dpo_only_view(pairs: &[PreferencePair], sp: &SystemPromptPair) -> DataResult<Dataset> {
    check_pairs(pairs)?;
    let tuples = pairs
        .iter()
        .map(|pair| CstTuple {
            system: sp.s1.clone(),
            prompt: pair.prompt.clone(),
            chosen: pair.revised.clone(),
            rejected: pair.original.clone(),
            source_tag: pair.source_tag.clone(),
        })
        .collect();
    Ok(Dataset { tuples })
}

/// Concatenate two datasets and shuffle with the seeded Fisher–Yates from
/// [`crate::rng`]. Same inputs and seed give the same order on any platform.
pub fn mix_datasets(a: &Dataset, b: &Dataset, seed: u64) -> Dataset {
    let mut tuples: Vec<CstTuple> = a.tuples.iter().chain(b.tuples.iter()).cloned().collect();
    Lcg64::new(seed).shuffle(&mut tuples);
    Dataset { tuples }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// One reported problem with a dataset. Validation reports; it never edits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tuple {}: {}", self.index, self.message)
    }
}

/// Check every tuple's invariants and flag exact duplicates of
/// (system, prompt, chosen, rejected) — the source tag is not part of the
/// duplicate key. Returns all violations; an empty vector means clean.
pub fn validate(dataset: &Dataset) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen: HashSet<(&str, &str, &str, &str)> = HashSet::new();
    for (index, t) in dataset.iter().enumerate() {
        if t.system.trim().is_empty() {
            violations.push(Violation {
                index,
                message: "empty system prompt".into(),
            });
        }
        if t.prompt.trim().is_empty() {
            violations.push(Violation {
                index,
                message: "empty prompt".into(),
            });
        }
        if t.chosen == t.rejected {
            violations.push(Violation {
                index,
                message: "chosen and rejected answers are identical".into(),
            });
        }
        let key = (
            t.system.as_str(),
            t.prompt.as_str(),
            t.chosen.as_str(),
            t.rejected.as_str(),
        );
        if !seen.insert(key) {
            violations.push(Violation {
                index,
                message: "duplicate of an earlier tuple".into(),
            });
        }
    }
    violations
}

// ---------------------------------------------------------------------------
// JSON Lines I/O
// ---------------------------------------------------------------------------

/// The strict key sets, in serialization order.
const TUPLE_KEYS: [&str; 5] = ["system", "prompt", "chosen", "rejected", "source_tag"];
const PAIR_KEYS: [&str; 4] = ["prompt", "original", "revised", "source_tag"];

fn parse_strict_line(
    line: &str,
    line_no: usize,
    keys: &'static [&'static str],
) -> DataResult<Vec<String>> {
    let value: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| DataError::Malformed(format!("invalid JSON at line {line_no}: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| DataError::Malformed(format!("line {line_no} is not a JSON object")))?;
    for key in obj.keys() {
        if !keys.contains(&key.as_str()) {
            return Err(DataError::UnexpectedKey {
                key: key.clone(),
                line: line_no,
            });
        }
    }
    keys.iter()
        .map(|&key| match obj.get(key) {
            None => Err(DataError::MissingKey { key, line: line_no }),
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(DataError::NonStringValue { key, line: line_no }),
        })
        .collect()
}

fn write_jsonl<W: Write, T: Serialize>(mut writer: W, records: &[T], path: &str) -> DataResult<()> {
    let io_err = |source| DataError::Io {
        path: path.to_string(),
        source,
    };
    for record in records {
        let line = serde_json::to_string(record).expect("string-field struct serializes");
        writer.write_all(line.as_bytes()).map_err(io_err)?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    Ok(())
}

/// Serialize a dataset to JSON Lines on any writer. Byte-deterministic for
/// a given dataset: fixed key order, LF endings, trailing newline.
pub fn save_jsonl_to<W: Write>(writer: W, dataset: &Dataset) -> DataResult<()> {
    write_jsonl(writer, &dataset.tuples, "<writer>")
}

/// Parse a JSON Lines dataset from any reader; blank lines are rejected
/// (they indicate truncation or concatenation gone wrong).
pub fn load_jsonl_from<R: Read>(reader: R) -> DataResult<Dataset> {
    let mut tuples = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DataError::Io {
            path: "<reader>".into(),
            source,
        })?;
        if line.is_empty() {
            return Err(DataError::Malformed(format!("blank line at line {line_no}")));
        }
        let [system, prompt, chosen, rejected, source_tag]: [String; 5] =
            parse_strict_line(&line, line_no, &TUPLE_KEYS)?
                .try_into()
                .expect("five keys");
        tuples.push(CstTuple {
            system,
            prompt,
            chosen,
            rejected,
            source_tag,
        });
    }
    Ok(Dataset { tuples })
}

pub fn save_jsonl(dataset: &Dataset, path: &Path) -> DataResult<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    write_jsonl(file, &dataset.tuples, &display)
}

pub fn load_jsonl(path: &Path) -> DataResult<Dataset> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_jsonl_from(file)
}

/// Raw-pair JSON Lines (`prompt`, `original`, `revised`, `source_tag`) —
/// the synthesis stage's output and the augmentation stage's input.
pub fn save_pairs_jsonl(pairs: &[PreferencePair], path: &Path) -> DataResult<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    write_jsonl(file, pairs, &display)
}

pub fn load_pairs_jsonl(path: &Path) -> DataResult<Vec<PreferencePair>> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.is_empty() {
            return Err(DataError::Malformed(format!("blank line at line {line_no}")));
        }
        let [prompt, original, revised, source_tag]: [String; 4] =
            parse_strict_line(&line, line_no, &PAIR_KEYS)?
                .try_into()
                .expect("four keys");
        pairs.push(PreferencePair {
            prompt,
            original,
            revised,
            source_tag,
        });
    }
    Ok(pairs)
}
