//! Semantic-frame lexicon and open-vocabulary label canonicalization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{is_valid_frame_name, FrameGlossaryEntry};

const BASE_LEXICON: &str = include_str!("../data/base_lexicon.json");

#[derive(Debug, Error, PartialEq)]
pub enum LexiconError {
    #[error("empty activity label")]
    EmptyLabel,
    #[error("label {0:?} has no usable head verb")]
    NoHeadVerb(String),
    #[error("lexicon parse error: {0}")]
    Parse(String),
    #[error("invalid lexicon: {0}")]
    Invalid(String),
}

/// Words skipped before the head verb of a label.
const LEADING_STOPWORDS: &[&str] = &[
    "a",
    "an",
    "the",
    "is",
    "are",
    "am",
    "was",
    "were",
    "be",
    "being",
    "been",
    "to",
    "with",
    "at",
    "on",
    "in",
    "and",
    "currently",
    "probably",
    "possibly",
    "likely",
    "maybe",
    "appears",
    "appear",
    "seems",
    "seem",
    "person",
    "someone",
    "he",
    "she",
    "they",
    "it",
];

const IRREGULAR: &[(&str, &str)] = &[
    ("sat", "sit"),
    ("sitting", "sit"),
    ("lying", "lie"),
    ("lay", "lie"),
    ("lain", "lie"),
    ("saw", "see"),
    ("seen", "see"),
    ("seeing", "see"),
    ("spoke", "speak"),
    ("spoken", "speak"),
    ("said", "say"),
    ("told", "tell"),
    ("stood", "stand"),
    ("ate", "eat"),
    ("eaten", "eat"),
    ("held", "hold"),
    ("heard", "hear"),
    ("slept", "sleep"),
    ("drank", "drink"),
    ("drunk", "drink"),
    ("overheard", "overhear"),
    ("fried", "fry"),
    ("played", "play"),
];

#[derive(Debug, Serialize, Deserialize)]
struct LexiconFile {
    frames: Vec<FrameGlossaryEntry>,
    synonyms: BTreeMap<String, String>,
}

/// Map from verbs and phrases to frames, with a glossary record per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLexicon {
    entries: BTreeMap<String, FrameGlossaryEntry>,
    synonyms: BTreeMap<String, String>,
}

impl Default for FrameLexicon {
    fn default() -> Self {
        Self::base()
    }
}

impl FrameLexicon {
    /// The lexicon shipped with the crate: COOK, INTERACT, LIE, LISTEN, READ,
    /// REST, SEE, SIT, SPEAK, STAND and USE.
    pub fn base() -> FrameLexicon {
        Self::from_json(BASE_LEXICON).expect("shipped lexicon is valid")
    }

    pub fn from_json(text: &str) -> Result<FrameLexicon, LexiconError> {
        let file: LexiconFile =
            serde_json::from_str(text).map_err(|e| LexiconError::Parse(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for entry in file.frames {
            if !is_valid_frame_name(&entry.frame) {
                return Err(LexiconError::Invalid(format!(
                    "frame name {:?} is not uppercase ASCII",
                    entry.frame
                )));
            }
            entries.insert(entry.frame.clone(), entry);
        }
        let mut synonyms = BTreeMap::new();
        for (verb, frame) in file.synonyms {
            if !entries.contains_key(&frame) {
                return Err(LexiconError::Invalid(format!(
                    "synonym {verb:?} points at unknown frame {frame}"
                )));
            }
            synonyms.insert(normalize_phrase(&verb), frame);
        }
        Ok(FrameLexicon { entries, synonyms })
    }

    pub fn to_json(&self) -> String {
        let file = LexiconFile {
            frames: self.entries.values().cloned().collect(),
            synonyms: self.synonyms.clone(),
        };
        serde_json::to_string_pretty(&file).expect("lexicon serialization is infallible")
    }

    pub fn entry(&self, frame: &str) -> Option<&FrameGlossaryEntry> {
        self.entries.get(frame)
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameGlossaryEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Frame for a label when its head verb is already known; never grows
    /// the lexicon.
    pub fn lookup(&self, raw_label: &str) -> Option<&str> {
        let phrase = normalize_phrase(raw_label);
        if let Some(f) = self.synonyms.get(&phrase) {
            return Some(f);
        }
        let head = head_verb(raw_label)?;
        lemma_candidates(&head)
            .iter()
            .find_map(|c| self.synonyms.get(c))
            .map(String::as_str)
    }

    /// Maps a label to its frame, adding a new frame named after the
    /// uppercased lemma when the head verb is unknown.
    pub fn canonicalize(&mut self, raw_label: &str) -> Result<String, LexiconError> {
        if raw_label.trim().is_empty() {
            return Err(LexiconError::EmptyLabel);
        }
        if let Some(frame) = self.lookup(raw_label) {
            return Ok(frame.to_string());
        }
        let head =
            head_verb(raw_label).ok_or_else(|| LexiconError::NoHeadVerb(raw_label.to_string()))?;
        let lemma = lemmatize(&head);
        let frame: String = lemma
            .to_ascii_uppercase()
            .chars()
            .filter(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || *c == '_')
            .collect();
        if !is_valid_frame_name(&frame) {
            return Err(LexiconError::NoHeadVerb(raw_label.to_string()));
        }
        self.ensure_frame(&frame);
        self.synonyms.insert(lemma, frame.clone());
        Ok(frame)
    }

    /// Resolves a frame name that may itself be a verb form (`TALK`,
    /// `WATCHING`) to the lexicon's canonical frame; unknown names pass
    /// through unchanged.
    pub fn canonical_frame_name(&self, frame: &str) -> String {
        if self.entries.contains_key(frame) {
            return frame.to_string();
        }
        self.lookup(&frame.to_ascii_lowercase())
            .map_or_else(|| frame.to_string(), str::to_string)
    }

    /// Adds a minimal entry for `frame` if none exists; returns the entry.
    pub fn ensure_frame(&mut self, frame: &str) -> &FrameGlossaryEntry {
        self.entries
            .entry(frame.to_string())
            .or_insert_with(|| FrameGlossaryEntry::minimal(frame))
    }

    pub fn glossary_entry(&self, frame: &str) -> FrameGlossaryEntry {
        self.entries
            .get(frame)
            .cloned()
            .unwrap_or_else(|| FrameGlossaryEntry::minimal(frame))
    }
}

fn normalize_phrase(s: &str) -> String {
    tokens(s).join(" ")
}

fn tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// First token of the label that is not a leading auxiliary or particle.
fn head_verb(label: &str) -> Option<String> {
    let toks = tokens(label);
    toks.iter()
        .find(|t| !LEADING_STOPWORDS.contains(&t.as_str()))
        .or_else(|| toks.first())
        .cloned()
}

fn undouble(stem: &str) -> Option<String> {
    let b = stem.as_bytes();
    let n = b.len();
    if n >= 3 && b[n - 1] == b[n - 2] && !matches!(b[n - 1], b'l' | b's' | b'z' | b'e' | b'o') {
        Some(stem[..n - 1].to_string())
    } else {
        None
    }
}

/// Plausible base forms of an inflected word, most likely first.
fn lemma_candidates(word: &str) -> Vec<String> {
    let mut out = Vec::new();
    if let Some((_, base)) = IRREGULAR.iter().find(|(w, _)| *w == word) {
        out.push(base.to_string());
    }
    out.push(word.to_string());
    if let Some(stem) = word.strip_suffix("ing").filter(|s| s.len() >= 2) {
        out.extend(undouble(stem));
        out.push(stem.to_string());
        out.push(format!("{stem}e"));
    }
    if let Some(stem) = word.strip_suffix("ied").filter(|s| !s.is_empty()) {
        out.push(format!("{stem}y"));
    }
    if let Some(stem) = word.strip_suffix("ed").filter(|s| s.len() >= 2) {
        out.extend(undouble(stem));
        out.push(stem.to_string());
        out.push(format!("{stem}e"));
    }
    if let Some(stem) = word.strip_suffix("ies").filter(|s| !s.is_empty()) {
        out.push(format!("{stem}y"));
    }
    if let Some(stem) = word
        .strip_suffix('s')
        .filter(|s| s.len() >= 2 && !s.ends_with('s'))
    {
        out.push(stem.to_string());
    }
    if let Some(stem) = word.strip_suffix("es").filter(|s| s.len() >= 2) {
        out.push(stem.to_string());
    }
    out
}

/// Best-effort lemma for a word not found in the lexicon.
fn lemmatize(word: &str) -> String {
    if let Some((_, base)) = IRREGULAR.iter().find(|(w, _)| *w == word) {
        return base.to_string();
    }
    for suffix in ["ing", "ed"] {
        if let Some(stem) = word.strip_suffix(suffix).filter(|s| s.len() >= 3) {
            return undouble(stem).unwrap_or_else(|| stem.to_string());
        }
    }
    if let Some(stem) = word.strip_suffix("ies").filter(|s| s.len() >= 2) {
        return format!("{stem}y");
    }
    for suffix in ["shes", "ches", "xes", "sses"] {
        if word.ends_with(suffix) {
            return word[..word.len() - 2].to_string();
        }
    }
    if let Some(stem) = word
        .strip_suffix('s')
        .filter(|s| s.len() >= 3 && !s.ends_with('s'))
    {
        return stem.to_string();
    }
    word.to_string()
}
