//! Synonym substitution by word category.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{predict_all, EvalError, EvalReport};
use crate::corpus::{label_tokens, tokenize, LabelError, LabelingOptions, Record};
use crate::trainer::Model;

#[derive(Debug, Error, PartialEq)]
pub enum LexiconError {
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("{0}")]
    Io(String),
}

/// Word → synonym list, read from `word<TAB>syn1,syn2,...` lines. Blank
/// lines and lines starting with `#` are ignored; words are lowercased.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    entries: HashMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut entries = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let bad = |reason: &str| LexiconError::Line {
                line,
                reason: reason.to_string(),
            };
            let t = raw.trim_end_matches('\r');
            if t.trim().is_empty() || t.starts_with('#') {
                continue;
            }
            let (word, syns) = t.split_once('\t').ok_or_else(|| bad("missing tab separator"))?;
            let word = word.trim().to_lowercase();
            if word.is_empty() || word.split_whitespace().count() != 1 {
                return Err(bad("headword must be a single word"));
            }
            let list: Vec<String> = syns.split(',').map(|s| s.trim().to_lowercase()).collect();
            if list.iter().any(|s| tokenize(s).is_empty()) {
                return Err(bad("empty synonym"));
            }
            if entries.insert(word, list).is_some() {
                return Err(bad("duplicate headword"));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = fs::read_to_string(path).map_err(|e| LexiconError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn from_pairs<I: IntoIterator<Item = (String, Vec<String>)>>(pairs: I) -> Self {
        Self {
            entries: pairs.into_iter().collect(),
        }
    }

    pub fn synonyms(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Word category selected for substitution, by token label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwapCategory {
    /// Label 0: absent from the explanation.
    Bias,
    /// Label 1: in the explanation and in both sentences.
    KeywordIntersect,
    /// Label 2: in the explanation and in one sentence.
    KeywordDistinct,
}

impl SwapCategory {
    pub fn label(self) -> u8 {
        match self {
            SwapCategory::Bias => 0,
            SwapCategory::KeywordIntersect => 1,
            SwapCategory::KeywordDistinct => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SwapCategory::Bias => "bias",
            SwapCategory::KeywordIntersect => "keyword-intersect",
            SwapCategory::KeywordDistinct => "keyword-distinct",
        }
    }
}

impl FromStr for SwapCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bias" => Ok(SwapCategory::Bias),
            "keyword-intersect" => Ok(SwapCategory::KeywordIntersect),
            "keyword-distinct" => Ok(SwapCategory::KeywordDistinct),
            _ => Err(format!("unknown swap category {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub category: SwapCategory,
    pub baseline: f64,
    /// Accuracy after each round of substitution.
    pub rounds: Vec<f64>,
    /// Words replaced per round.
    pub replaced: Vec<usize>,
}

impl SwapReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "round", "accuracy", "replaced"]).expect("in-memory write");
        w.write_record([self.category.as_str(), "0", &self.baseline.to_string(), "0"]).expect("in-memory write");
        for (i, (a, n)) in self.rounds.iter().zip(&self.replaced).enumerate() {
            w.write_record([self.category.as_str().to_string(), (i + 1).to_string(), a.to_string(), n.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Replaces every word of `category` that has a lexicon entry by a synonym
/// drawn uniformly from its list. Returns the rewritten record and the number
/// of replacements.
fn perturb(
    record: &Record,
    labels: &[u8],
    category: SwapCategory,
    lexicon: &Lexicon,
    rng: &mut ChaCha8Rng,
) -> (Record, usize) {
    let mut count = 0;
    let mut rewrite = |words: &[String], offset: usize| -> Vec<String> {
        let mut out = Vec::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            match lexicon.synonyms(w) {
                Some(syns) if labels[offset + i] == category.label() => {
                    let s = syns.choose(rng).expect("non-empty synonym list");
                    out.extend(tokenize(s));
                    count += 1;
                }
                _ => out.push(w.clone()),
            }
        }
        out
    };
    let premise = rewrite(&record.premise, 1);
    let hypothesis = rewrite(&record.hypothesis, record.sep_position() + 1);
    let out = Record {
        premise,
        hypothesis,
        explanation: record.explanation.clone(),
        label: record.label,
    };
    (out, count)
}

/// Accuracy before and after `rounds` independent substitution rounds.
/// Records without an explanation have every word in the bias category.
pub fn swap_eval(
    model: &Model,
    records: &[Record],
    lexicon: &Lexicon,
    category: SwapCategory,
    rounds: usize,
    seed: u64,
    options: &LabelingOptions,
) -> Result<SwapReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    if lexicon.is_empty() {
        warn!("empty lexicon; swap evaluation is a no-op");
    }
    let gold: Vec<_> = records.iter().map(|r| r.label).collect();
    let baseline = EvalReport::from_predictions(&gold, &predict_all(model, records)?)?.accuracy;
    let labels: Vec<Vec<u8>> = records
        .iter()
        .map(|r| match label_tokens(&r.premise, &r.hypothesis, &r.explanation, options) {
            Ok(l) => l,
            Err(LabelError::EmptyExplanation) => vec![0; r.pair_len()],
        })
        .collect();
    let mut accs = Vec::with_capacity(rounds);
    let mut replaced = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(round as u64 + 1);
        let mut n = 0;
        let swapped: Vec<Record> = records
            .iter()
            .zip(&labels)
            .map(|(r, l)| {
                let (s, c) = perturb(r, l, category, lexicon, &mut rng);
                n += c;
                s
            })
            .collect();
        let acc = EvalReport::from_predictions(&gold, &predict_all(model, &swapped)?)?.accuracy;
        accs.push(acc);
        replaced.push(n);
    }
    Ok(SwapReport {
        category,
        baseline,
        rounds: accs,
        replaced,
    })
}
