//! Explanation-annotated NLI records and the token-level supervision derived
//! from them.
//!
//! A record's premise and hypothesis are joined as
//! `[CLS] premise [SEP] hypothesis`. Every position gets a label:
//!
//! | label | meaning                                                      |
//! |-------|--------------------------------------------------------------|
//! | 0     | word absent from the explanation (bias), and `[CLS]`/`[SEP]` |
//! | 1     | word in the explanation and in both sentences                |
//! | 2     | word in the explanation but not in both sentences            |
//!
//! Two masked copies of the sequence keep only the keywords (labels 1 and 2)
//! or only the biases (label 0); special positions survive in both.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("premise and hypothesis must both contain at least one token")]
    EmptySentence,
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {error}")]
    Line {
        path: PathBuf,
        line: usize,
        error: RecordError,
    },
    #[error("vocabulary line {line}: {reason}")]
    Vocabulary { line: usize, reason: String },
}

/// Why a single JSONL line was rejected.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{0}` must be a string")]
    NotAString(&'static str),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("{0} has no tokens")]
    EmptySentence(&'static str),
}

/// The three inference relations.
///
/// The discriminant doubles as the class index; inference priority runs the
/// other way (entailed 2, neutral 1, contradicted 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailed = 0,
    Neutral = 1,
    Contradicted = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Entailed, Label::Neutral, Label::Contradicted];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn priority(self) -> u8 {
        match self {
            Label::Entailed => 2,
            Label::Neutral => 1,
            Label::Contradicted => 0,
        }
    }

    /// Accepts the canonical names and the usual dataset aliases.
    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailed" | "entailment" | "e" => Some(Label::Entailed),
            "neutral" | "n" => Some(Label::Neutral),
            "contradicted" | "contradiction" | "c" => Some(Label::Contradicted),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailed => "entailed",
            Label::Neutral => "neutral",
            Label::Contradicted => "contradicted",
        }
    }

    /// The joint outcome of two sub-inferences: the lower-priority label.
    pub fn min_priority(a: Label, b: Label) -> Label {
        if a.priority() <= b.priority() {
            a
        } else {
            b
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lowercased word tokens with punctuation removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            // Lowercasing can emit combining marks, so filter afterwards.
            w.chars()
                .flat_map(char::to_lowercase)
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// One NLI example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub explanation: Vec<String>,
    pub label: Label,
}

impl Record {
    pub fn from_text(premise: &str, hypothesis: &str, explanation: &str, label: Label) -> Result<Self, CorpusError> {
        let r = Record {
            premise: tokenize(premise),
            hypothesis: tokenize(hypothesis),
            explanation: tokenize(explanation),
            label,
        };
        if r.premise.is_empty() || r.hypothesis.is_empty() {
            return Err(CorpusError::EmptySentence);
        }
        Ok(r)
    }

    /// Records without an explanation cannot be used for token supervision.
    pub fn supervisable(&self) -> bool {
        !self.explanation.is_empty()
    }

    /// Assembled sequence length `l_a + l_b + 2`.
    pub fn pair_len(&self) -> usize {
        self.premise.len() + self.hypothesis.len() + 2
    }

    /// Words of the assembled sequence, specials spelled as in the vocabulary.
    pub fn pair_words(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.pair_len());
        out.push(Vocabulary::SPECIALS[Vocabulary::CLS as usize].to_string());
        out.extend(self.premise.iter().cloned());
        out.push(Vocabulary::SPECIALS[Vocabulary::SEP as usize].to_string());
        out.extend(self.hypothesis.iter().cloned());
        out
    }

    /// Position of `[SEP]` in the assembled sequence.
    pub fn sep_position(&self) -> usize {
        self.premise.len() + 1
    }
}

fn string_field<'a>(obj: &'a serde_json::Map<String, serde_json::Value>, key: &'static str) -> Result<Option<&'a str>, RecordError> {
    match obj.get(key) {
        None | Some(serde_json::Value::Null) => Ok(None),
        Some(serde_json::Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(RecordError::NotAString(key)),
    }
}

/// Parses one dataset line: an object with string fields `premise`,
/// `hypothesis`, `label` and (optionally) `explanation`. Other fields are
/// ignored.
pub fn parse_record_line(line: &str) -> Result<Record, RecordError> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| RecordError::Json(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| RecordError::Json("expected an object".into()))?;
    let premise = string_field(obj, "premise")?.ok_or(RecordError::MissingField("premise"))?;
    let hypothesis = string_field(obj, "hypothesis")?.ok_or(RecordError::MissingField("hypothesis"))?;
    let label_s = string_field(obj, "label")?.ok_or(RecordError::MissingField("label"))?;
    let explanation = string_field(obj, "explanation")?.unwrap_or("");
    let label = Label::parse(label_s).ok_or_else(|| RecordError::UnknownLabel(label_s.to_string()))?;
    let premise = tokenize(premise);
    if premise.is_empty() {
        return Err(RecordError::EmptySentence("premise"));
    }
    let hypothesis = tokenize(hypothesis);
    if hypothesis.is_empty() {
        return Err(RecordError::EmptySentence("hypothesis"));
    }
    Ok(Record {
        premise,
        hypothesis,
        explanation: tokenize(explanation),
        label,
    })
}

/// Serializes a record back to a dataset line (tokens joined by spaces).
pub fn record_to_line(record: &Record) -> String {
    serde_json::json!({
        "premise": record.premise.join(" "),
        "hypothesis": record.hypothesis.join(" "),
        "label": record.label.as_str(),
        "explanation": record.explanation.join(" "),
    })
    .to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnMalformed {
    #[default]
    Skip,
    Fail,
}

#[derive(Debug, Default)]
pub struct LoadedDataset {
    pub records: Vec<Record>,
    /// `(line number, error)` for every skipped line.
    pub skipped: Vec<(usize, RecordError)>,
}

/// Reads a JSONL dataset. Blank lines are ignored; line numbers are 1-based.
pub fn load_jsonl(path: &Path, policy: OnMalformed) -> Result<LoadedDataset, CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = LoadedDataset::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record_line(&line) {
            Ok(r) => out.records.push(r),
            Err(error) => match policy {
                OnMalformed::Skip => {
                    log::warn!("{}:{}: skipping: {error}", path.display(), i + 1);
                    out.skipped.push((i + 1, error));
                }
                OnMalformed::Fail => {
                    return Err(CorpusError::Line {
                        path: path.to_path_buf(),
                        line: i + 1,
                        error,
                    })
                }
            },
        }
    }
    Ok(out)
}

/// Word-level vocabulary. Ids `0..5` are the special tokens; ordinary words
/// follow in file (or sorted) order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub const CLS: u32 = 0;
    pub const SEP: u32 = 1;
    pub const MASK: u32 = 2;
    pub const PAD: u32 = 3;
    pub const UNK: u32 = 4;
    pub const SPECIALS: [&'static str; 5] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

    /// Builds a vocabulary from the given words in order, dropping duplicates
    /// and anything spelled like a special token.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || Self::SPECIALS.contains(&w) || v.index.contains_key(w) {
                continue;
            }
            v.index.insert(w.to_string(), (Self::SPECIALS.len() + v.words.len()) as u32);
            v.words.push(w.to_string());
        }
        v
    }

    /// Sorted vocabulary over every premise and hypothesis word.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a Record>) -> Self {
        let mut set = BTreeSet::new();
        for r in records {
            set.extend(r.premise.iter().map(String::as_str));
            set.extend(r.hypothesis.iter().map(String::as_str));
        }
        Self::from_words(set)
    }

    /// Parses the vocabulary file format: one word per line, no specials.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut words = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let w = line.trim_end_matches('\r');
            let bad = |reason: &str| CorpusError::Vocabulary {
                line: i + 1,
                reason: reason.to_string(),
            };
            if w.is_empty() {
                return Err(bad("empty line"));
            }
            if w.chars().any(char::is_whitespace) {
                return Err(bad("word contains whitespace"));
            }
            if Self::SPECIALS.contains(&w) {
                return Err(bad("special tokens are implicit"));
            }
            if !seen.insert(w) {
                return Err(bad("duplicate word"));
            }
            words.push(w);
        }
        Ok(Self::from_words(words))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    /// Ordinary words in id order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Total size including specials.
    pub fn len(&self) -> usize {
        Self::SPECIALS.len() + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(Self::UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        let i = id as usize;
        if i < Self::SPECIALS.len() {
            Some(Self::SPECIALS[i])
        } else {
            self.words.get(i - Self::SPECIALS.len()).map(String::as_str)
        }
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < Self::SPECIALS.len()
    }
}

/// `[CLS] premise [SEP] hypothesis` as ids; unknown words become `[UNK]`.
pub fn assemble_pair(premise: &[String], hypothesis: &[String], vocab: &Vocabulary) -> Result<Vec<u32>, CorpusError> {
    if premise.is_empty() || hypothesis.is_empty() {
        return Err(CorpusError::EmptySentence);
    }
    let mut ids = Vec::with_capacity(premise.len() + hypothesis.len() + 2);
    ids.push(Vocabulary::CLS);
    ids.extend(premise.iter().map(|w| vocab.id(w)));
    ids.push(Vocabulary::SEP);
    ids.extend(hypothesis.iter().map(|w| vocab.id(w)));
    Ok(ids)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("record has no explanation; token labels are undefined")]
    EmptyExplanation,
}

/// Options for deriving token labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelingOptions {
    /// Words treated as absent from every explanation.
    #[serde(default)]
    pub stopwords: Vec<String>,
}

/// Per-position labels for the assembled sequence of `premise` and
/// `hypothesis`. Membership is exact, case-insensitive set membership.
pub fn label_tokens(
    premise: &[String],
    hypothesis: &[String],
    explanation: &[String],
    options: &LabelingOptions,
) -> Result<Vec<u8>, LabelError> {
    if explanation.is_empty() {
        return Err(LabelError::EmptyExplanation);
    }
    let lower = |ws: &[String]| -> HashSet<String> { ws.iter().map(|w| w.to_lowercase()).collect() };
    let stop: HashSet<String> = options.stopwords.iter().map(|w| w.to_lowercase()).collect();
    let expl: HashSet<String> = lower(explanation).difference(&stop).cloned().collect();
    let (a, b) = (lower(premise), lower(hypothesis));
    let label = |w: &String| -> u8 {
        let w = w.to_lowercase();
        if !expl.contains(&w) {
            0
        } else if a.contains(&w) && b.contains(&w) {
            1
        } else {
            2
        }
    };
    let mut out = Vec::with_capacity(premise.len() + hypothesis.len() + 2);
    out.push(0);
    out.extend(premise.iter().map(label));
    out.push(0);
    out.extend(hypothesis.iter().map(label));
    Ok(out)
}

/// `ẽ_i = e_i / Σ e_k`, or uniform when every label is zero. The flag reports
/// whether the fallback was taken.
pub fn normalize_labels(e: &[u8]) -> (Vec<f64>, bool) {
    let total: u32 = e.iter().map(|&v| v as u32).sum();
    if total == 0 {
        let n = e.len().max(1) as f64;
        (vec![1.0 / n; e.len()], true)
    } else {
        let t = total as f64;
        (e.iter().map(|&v| v as f64 / t).collect(), false)
    }
}

/// Keyword-kept and bias-kept copies of `tokens`. `[CLS]`/`[SEP]` survive in
/// both; every other position survives in exactly one.
pub fn mask_sequences(tokens: &[u32], e: &[u8]) -> (Vec<u32>, Vec<u32>) {
    assert_eq!(tokens.len(), e.len(), "tokens and labels must align");
    let special = |t: u32| t == Vocabulary::CLS || t == Vocabulary::SEP;
    let mut psi = Vec::with_capacity(tokens.len());
    let mut sigma = Vec::with_capacity(tokens.len());
    for (&t, &l) in tokens.iter().zip(e) {
        if special(t) {
            psi.push(t);
            sigma.push(t);
        } else if l > 0 {
            psi.push(t);
            sigma.push(Vocabulary::MASK);
        } else {
            psi.push(Vocabulary::MASK);
            sigma.push(t);
        }
    }
    (psi, sigma)
}

/// Flags recording where a record's supervision is degenerate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionFlags {
    /// No explanation: labels are all zero and only the main loss applies.
    pub missing_explanation: bool,
    /// The explanation shares no words with the pair; targets are uniform.
    pub uniform_fallback: bool,
}

/// A record prepared for training: ids, token labels, attention targets and
/// both masked variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub tokens: Vec<u32>,
    pub labels: Vec<u8>,
    pub targets: Vec<f64>,
    pub psi_tokens: Vec<u32>,
    pub sigma_tokens: Vec<u32>,
    pub gold: Label,
    pub flags: SupervisionFlags,
}

impl LabeledSequence {
    pub fn from_record(record: &Record, vocab: &Vocabulary, options: &LabelingOptions) -> Result<Self, CorpusError> {
        let tokens = assemble_pair(&record.premise, &record.hypothesis, vocab)?;
        let mut flags = SupervisionFlags::default();
        let labels = match label_tokens(&record.premise, &record.hypothesis, &record.explanation, options) {
            Ok(l) => l,
            Err(LabelError::EmptyExplanation) => {
                flags.missing_explanation = true;
                vec![0; tokens.len()]
            }
        };
        let (targets, fallback) = normalize_labels(&labels);
        flags.uniform_fallback = fallback && !flags.missing_explanation;
        let (psi_tokens, sigma_tokens) = mask_sequences(&tokens, &labels);
        Ok(Self {
            tokens,
            labels,
            targets,
            psi_tokens,
            sigma_tokens,
            gold: record.label,
            flags,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Whether the auxiliary losses apply to this sequence.
    pub fn supervised(&self) -> bool {
        !self.flags.missing_explanation
    }
}
