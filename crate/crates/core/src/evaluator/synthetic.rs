//! Template corpus with a planted spurious token whose correlation with one
//! label is set per split.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{record_to_line, Label, Record};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub subjects: Vec<String>,
    /// `(verb, object)` pairs.
    pub activities: Vec<(String, String)>,
    /// Words that turn an entailed hypothesis into a neutral one.
    pub modifiers: Vec<String>,
    /// Location phrases appended to premises; never causal.
    pub fillers: Vec<String>,
    pub spurious_token: String,
    /// Label the spurious token is correlated with.
    pub spurious_label: Label,
    pub rho_train: f64,
    pub rho_ood: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub ood_size: usize,
    pub seed: u64,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            subjects: strings(&["man", "woman", "girl", "boy", "child", "dog", "chef", "student", "farmer", "artist"]),
            activities: [
                ("playing", "violin"),
                ("playing", "guitar"),
                ("washing", "laundry"),
                ("washing", "dishes"),
                ("riding", "bike"),
                ("riding", "horse"),
                ("reading", "book"),
                ("eating", "apple"),
                ("painting", "fence"),
                ("cooking", "soup"),
                ("throwing", "ball"),
                ("carrying", "box"),
            ]
            .iter()
            .map(|(v, o)| (v.to_string(), o.to_string()))
            .collect(),
            modifiers: strings(&["professionally", "tomorrow", "quickly", "badly", "happily", "alone"]),
            fillers: strings(&["in the park", "near the river", "at home", "on the street", "by the lake", "in a field"]),
            spurious_token: "outdoors".into(),
            spurious_label: Label::Contradicted,
            rho_train: 0.9,
            rho_ood: -0.9,
            train_size: 5000,
            dev_size: 1000,
            ood_size: 1000,
            seed: 0,
        }
    }
}

/// Presence rates `(P(present | target), P(present | other))` giving a phi
/// coefficient of `rho` between presence and "label is the target", when the
/// target label has prior `prior`.
///
/// For positive `rho` the two kinds of exception are equally frequent:
/// targets without the token and non-targets with it. So the training data
/// always holds some examples that only the causal words can explain.
/// Negative `rho` mirrors the positive rates.
pub fn presence_rates(rho: f64, prior: f64) -> (f64, f64) {
    let phi = |a: f64, b: f64| {
        let q = prior * a + (1.0 - prior) * b;
        let denom = (q * (1.0 - q) * prior * (1.0 - prior)).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            prior * (1.0 - prior) * (a - b) / denom
        }
    };
    if rho < 0.0 {
        let (a, b) = presence_rates(-rho, prior);
        return (1.0 - a, 1.0 - b);
    }
    // b = t, a = 1 - t (1 - prior) / prior; phi falls from 1 at t = 0 to 0
    // at t = prior.
    let rates = |t: f64| (1.0 - t * (1.0 - prior) / prior, t);
    let (mut lo, mut hi) = (0.0_f64, prior);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (a, b) = rates(mid);
        if phi(a, b) > rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    rates(0.5 * (lo + hi))
}

/// Phi coefficient between two binary series.
pub fn phi_coefficient(x: &[bool], y: &[bool]) -> f64 {
    let mut c = [[0.0f64; 2]; 2];
    for (&a, &b) in x.iter().zip(y) {
        c[a as usize][b as usize] += 1.0;
    }
    let (x1, x0) = (c[1][0] + c[1][1], c[0][0] + c[0][1]);
    let (y1, y0) = (c[0][1] + c[1][1], c[0][0] + c[1][0]);
    let denom = (x1 * x0 * y1 * y0).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (c[1][1] * c[0][0] - c[1][0] * c[0][1]) / denom
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::Spec(m));
        for (name, r) in [("rho_train", self.rho_train), ("rho_ood", self.rho_ood)] {
            if !(-1.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [-1, 1], got {r}"));
            }
        }
        if self.train_size == 0 || self.dev_size == 0 || self.ood_size == 0 {
            return bad("split sizes must be at least 1".into());
        }
        if self.subjects.is_empty() || self.modifiers.is_empty() || self.fillers.is_empty() {
            return bad("subject, modifier and filler pools must be non-empty".into());
        }
        if self.activities.len() < 2 {
            return bad("at least two activities are needed for contradictions".into());
        }
        let sp = self.spurious_token.to_lowercase();
        if sp.is_empty() || sp.split_whitespace().count() != 1 {
            return bad("spurious token must be a single word".into());
        }
        if self.causal_words().contains(&sp) {
            return bad(format!("spurious token {sp:?} is one of the causal words"));
        }
        let template: BTreeSet<&str> = ["a", "the", "is", "implies", "need", "not", "be", "cannot", "while"].into();
        let filler_words: BTreeSet<String> = self
            .fillers
            .iter()
            .flat_map(|f| f.split_whitespace().map(str::to_lowercase))
            .collect();
        if template.contains(sp.as_str()) || filler_words.contains(&sp) {
            return bad(format!("spurious token {sp:?} collides with template words"));
        }
        Ok(())
    }

    /// Words whose identity determines the gold label.
    pub fn causal_words(&self) -> BTreeSet<String> {
        let mut s: BTreeSet<String> = self.subjects.iter().map(|w| w.to_lowercase()).collect();
        for (v, o) in &self.activities {
            s.insert(v.to_lowercase());
            s.insert(o.to_lowercase());
        }
        s.extend(self.modifiers.iter().map(|w| w.to_lowercase()));
        s
    }

    fn example(&self, rng: &mut ChaCha8Rng, rates: (f64, f64)) -> Record {
        let label = Label::ALL[rng.gen_range(0..3)];
        let subj = self.subjects.choose(rng).expect("non-empty");
        let ai = rng.gen_range(0..self.activities.len());
        let (verb, obj) = &self.activities[ai];
        let filler = self.fillers.choose(rng).expect("non-empty");
        let premise = format!("a {subj} is {verb} {obj} {filler}");
        let (mut hyp, expl) = match label {
            Label::Entailed => (
                format!("the {subj} is {verb} {obj}"),
                format!("{subj} {verb} {obj} implies {subj} {verb} {obj}"),
            ),
            Label::Neutral => {
                let m = self.modifiers.choose(rng).expect("non-empty");
                (
                    format!("the {subj} is {verb} {obj} {m}"),
                    format!("{subj} {verb} {obj} need not be {m}"),
                )
            }
            Label::Contradicted => {
                let mut bj = rng.gen_range(0..self.activities.len() - 1);
                if bj >= ai {
                    bj += 1;
                }
                let (v2, o2) = &self.activities[bj];
                (
                    format!("the {subj} is {v2} {o2}"),
                    format!("{subj} cannot be {v2} {o2} while {verb} {obj}"),
                )
            }
        };
        let p = if label == self.spurious_label { rates.0 } else { rates.1 };
        if rng.gen_bool(p.clamp(0.0, 1.0)) {
            hyp.push(' ');
            hyp.push_str(&self.spurious_token);
        }
        Record::from_text(&premise, &hyp, &expl, label).expect("templates are non-empty")
    }

    fn split(&self, n: usize, rho: f64, stream: u64) -> Vec<Record> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let rates = presence_rates(rho, 1.0 / 3.0);
        (0..n).map(|_| self.example(&mut rng, rates)).collect()
    }

    /// Train, dev and OOD splits. Dev follows the training correlation.
    pub fn generate(&self) -> Result<SyntheticCorpus, SyntheticError> {
        self.validate()?;
        Ok(SyntheticCorpus {
            train: self.split(self.train_size, self.rho_train, 1),
            dev: self.split(self.dev_size, self.rho_train, 2),
            ood: self.split(self.ood_size, self.rho_ood, 3),
        })
    }

    /// Measured phi coefficient between spurious-token presence and the
    /// target label.
    pub fn measured_correlation(&self, records: &[Record]) -> f64 {
        let tok = self.spurious_token.to_lowercase();
        let x: Vec<bool> = records.iter().map(|r| r.hypothesis.contains(&tok)).collect();
        let y: Vec<bool> = records.iter().map(|r| r.label == self.spurious_label).collect();
        phi_coefficient(&x, &y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<Record>,
    pub dev: Vec<Record>,
    pub ood: Vec<Record>,
}

impl SyntheticCorpus {
    /// Writes `train.jsonl`, `dev.jsonl` and `ood.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<[PathBuf; 3], SyntheticError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SyntheticError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut out = Vec::new();
        for (name, recs) in [("train", &self.train), ("dev", &self.dev), ("ood", &self.ood)] {
            let path = dir.join(format!("{name}.jsonl"));
            let mut text = String::new();
            for r in recs {
                text.push_str(&record_to_line(r));
                text.push('\n');
            }
            fs::write(&path, text).map_err(io(&path))?;
            out.push(path);
        }
        Ok(out.try_into().expect("three splits"))
    }
}
