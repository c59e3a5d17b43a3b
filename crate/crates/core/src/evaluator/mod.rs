//! Accuracy, token-level F1, synonym-swap robustness, attention and
//! sub-inference reports, plus the synthetic corpus generator.

mod swap;
pub mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Label, LabeledSequence, LabelingOptions, Record, Vocabulary};
use crate::encoder::EncoderError;
use crate::trainer::Model;

pub use swap::{swap_eval, Lexicon, LexiconError, SwapCategory, SwapReport};
pub use synthetic::{SyntheticCorpus, SyntheticError, SyntheticSpec};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    Empty,
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: EncoderError,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_label(p: &[f64; 3]) -> Label {
    Label::from_index(argmax(p)).expect("three classes")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Keyed by label name.
    pub per_class: BTreeMap<String, ClassCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<TokenF1Report>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swap: Option<SwapReport>,
}

impl EvalReport {
    pub fn from_predictions(gold: &[Label], predicted: &[Label]) -> Result<Self, EvalError> {
        if gold.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut per_class: BTreeMap<String, ClassCounts> =
            Label::ALL.iter().map(|l| (l.as_str().to_string(), ClassCounts::default())).collect();
        let mut correct = 0;
        for (&g, &p) in gold.iter().zip(predicted) {
            per_class.get_mut(g.as_str()).expect("all labels").gold += 1;
            let pc = per_class.get_mut(p.as_str()).expect("all labels");
            pc.predicted += 1;
            if g == p {
                pc.correct += 1;
                correct += 1;
            }
        }
        Ok(Self {
            accuracy: correct as f64 / gold.len() as f64,
            correct,
            total: gold.len(),
            per_class,
            token: None,
            swap: None,
        })
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "value"]).expect("in-memory write");
        w.write_record(["accuracy", &self.accuracy.to_string()]).expect("in-memory write");
        w.write_record(["correct", &self.correct.to_string()]).expect("in-memory write");
        w.write_record(["total", &self.total.to_string()]).expect("in-memory write");
        for (name, c) in &self.per_class {
            w.write_record([format!("{name}_gold"), c.gold.to_string()]).expect("in-memory write");
            w.write_record([format!("{name}_predicted"), c.predicted.to_string()]).expect("in-memory write");
            w.write_record([format!("{name}_correct"), c.correct.to_string()]).expect("in-memory write");
        }
        if let Some(t) = &self.token {
            w.write_record(["token_macro_f1", &t.macro_f1.to_string()]).expect("in-memory write");
            w.write_record(["token_micro_f1", &t.micro_f1.to_string()]).expect("in-memory write");
            for (k, c) in t.per_class.iter().enumerate() {
                w.write_record([format!("token_class{k}_precision"), c.precision.to_string()]).expect("in-memory write");
                w.write_record([format!("token_class{k}_recall"), c.recall.to_string()]).expect("in-memory write");
                w.write_record([format!("token_class{k}_f1"), c.f1.to_string()]).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Tokens of every record, checked against the model's limits.
fn record_tokens(model: &Model, records: &[Record]) -> Result<Vec<Vec<u32>>, EvalError> {
    records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let t = model.tokens(r)?;
            model
                .encoder
                .check_tokens(&t)
                .map_err(|source| EvalError::Record { index, source })?;
            Ok(t)
        })
        .collect()
}

/// Predicted labels from the top block's relation distribution.
pub fn predict_all(model: &Model, records: &[Record]) -> Result<Vec<Label>, EvalError> {
    record_tokens(model, records)?
        .iter()
        .map(|t| Ok(argmax_label(&model.encoder.predict(t)?)))
        .collect()
}

/// Accuracy of the top-block relation prediction. No auxiliary head runs.
pub fn evaluate(model: &Model, records: &[Record]) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let predicted = predict_all(model, records)?;
    let gold: Vec<Label> = records.iter().map(|r| r.label).collect();
    EvalReport::from_predictions(&gold, &predicted)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenF1Report {
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// Token classes 0, 1 and 2.
    pub per_class: [ClassF1; 3],
    /// Classes absent from both gold and predictions; their F1 counts as 0.
    pub empty_classes: Vec<u8>,
    pub positions: usize,
    /// Sequences skipped for lacking an explanation.
    pub skipped: usize,
}

/// Per-class and averaged F1 over aligned gold/predicted token labels.
/// Precision or recall with a zero denominator is 0, and so is F1 when both
/// are 0.
pub fn f1_from_predictions(gold: &[u8], predicted: &[u8]) -> TokenF1Report {
    assert_eq!(gold.len(), predicted.len(), "aligned labels");
    let mut per_class = [ClassF1::default(); 3];
    let mut tp = [0usize; 3];
    for (&g, &p) in gold.iter().zip(predicted) {
        per_class[g as usize].support += 1;
        per_class[p as usize].predicted += 1;
        if g == p {
            tp[g as usize] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut empty_classes = Vec::new();
    for (k, c) in per_class.iter_mut().enumerate() {
        c.precision = ratio(tp[k], c.predicted);
        c.recall = ratio(tp[k], c.support);
        c.f1 = if c.precision + c.recall == 0.0 {
            0.0
        } else {
            2.0 * c.precision * c.recall / (c.precision + c.recall)
        };
        if c.support == 0 && c.predicted == 0 {
            empty_classes.push(k as u8);
        }
    }
    TokenF1Report {
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / 3.0,
        micro_f1: ratio(tp.iter().sum(), gold.len()),
        per_class,
        empty_classes,
        positions: gold.len(),
        skipped: 0,
    }
}

/// Token-head macro-F1 over classes {0, 1, 2}. `[CLS]`/`[SEP]` positions are
/// not scored; sequences without an explanation are skipped.
pub fn token_f1(model: &Model, data: &[LabeledSequence]) -> Result<TokenF1Report, EvalError> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let mut skipped = 0;
    for seq in data {
        if !seq.supervised() {
            skipped += 1;
            continue;
        }
        let probs = model.encoder.predict_tokens(&seq.tokens)?;
        for ((&t, &g), p) in seq.tokens.iter().zip(&seq.labels).zip(&probs) {
            if t == Vocabulary::CLS || t == Vocabulary::SEP {
                continue;
            }
            gold.push(g);
            pred.push(argmax(p) as u8);
        }
    }
    let mut r = f1_from_predictions(&gold, &pred);
    r.skipped = skipped;
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAttention {
    pub block: usize,
    pub attention: Vec<f64>,
    /// Attention on positions labelled 1 or 2.
    pub keyword_mass: f64,
    /// Attention on every other position, `[CLS]`/`[SEP]` included.
    pub bias_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExample {
    pub tokens: Vec<String>,
    pub labels: Vec<u8>,
    pub blocks: Vec<BlockAttention>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub blocks: Vec<usize>,
    pub examples: Vec<AttentionExample>,
    /// Mean keyword mass per block over examples that have keywords.
    pub mean_keyword_mass: BTreeMap<usize, f64>,
}

/// `[CLS]`-centred attention per requested block with its keyword/bias split.
pub fn attention_report(
    model: &Model,
    records: &[Record],
    options: &LabelingOptions,
    blocks: &[usize],
) -> Result<AttentionReport, EvalError> {
    for &b in blocks {
        model.encoder.check_block(b)?;
    }
    let mut examples = Vec::with_capacity(records.len());
    let mut sums: BTreeMap<usize, (f64, usize)> = blocks.iter().map(|&b| (b, (0.0, 0))).collect();
    for (index, r) in records.iter().enumerate() {
        let seq = LabeledSequence::from_record(r, &model.vocab, options)?;
        let out = model
            .encoder
            .encode(&seq.tokens)
            .map_err(|source| EvalError::Record { index, source })?;
        let has_keywords = seq.labels.iter().any(|&l| l > 0);
        let per_block = blocks
            .iter()
            .map(|&b| {
                let attention = out.attention[b - 1].clone();
                let keyword_mass: f64 = attention.iter().zip(&seq.labels).filter(|(_, &l)| l > 0).map(|(a, _)| a).sum();
                let bias_mass: f64 = attention.iter().zip(&seq.labels).filter(|(_, &l)| l == 0).map(|(a, _)| a).sum();
                if has_keywords {
                    let e = sums.get_mut(&b).expect("requested block");
                    e.0 += keyword_mass;
                    e.1 += 1;
                }
                BlockAttention {
                    block: b,
                    attention,
                    keyword_mass,
                    bias_mass,
                }
            })
            .collect();
        examples.push(AttentionExample {
            tokens: r.pair_words(),
            labels: seq.labels,
            blocks: per_block,
        });
    }
    let mean_keyword_mass = sums
        .into_iter()
        .map(|(b, (s, n))| (b, if n == 0 { 0.0 } else { s / n as f64 }))
        .collect();
    Ok(AttentionReport {
        blocks: blocks.to_vec(),
        examples,
        mean_keyword_mass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubInferenceRow {
    pub gold: Label,
    pub main: Label,
    pub keyword: Label,
    pub bias: Label,
    /// The lower-priority sub-inference agrees with the main prediction.
    pub consistent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubInferenceReport {
    pub block: usize,
    pub rows: Vec<SubInferenceRow>,
    pub consistency_rate: f64,
}

impl SubInferenceReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "gold", "main", "keyword", "bias", "consistent"]).expect("in-memory write");
        for (i, r) in self.rows.iter().enumerate() {
            w.write_record([
                i.to_string(),
                r.gold.as_str().into(),
                r.main.as_str().into(),
                r.keyword.as_str().into(),
                r.bias.as_str().into(),
                r.consistent.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Whether the main prediction equals the lower-priority sub-inference.
pub fn consistent(main: Label, keyword: Label, bias: Label) -> bool {
    Label::min_priority(keyword, bias) == main
}

/// Argmax predictions at `block` for the full, keyword-kept and bias-kept
/// sequences.
pub fn sub_inference_report(
    model: &Model,
    records: &[Record],
    options: &LabelingOptions,
    block: usize,
) -> Result<SubInferenceReport, EvalError> {
    model.encoder.check_block(block)?;
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rows = Vec::with_capacity(records.len());
    for (index, r) in records.iter().enumerate() {
        let seq = LabeledSequence::from_record(r, &model.vocab, options)?;
        let wrap = |source| EvalError::Record { index, source };
        let enc = &model.encoder;
        let main = argmax_label(&enc.sub_distribution(block, &seq.tokens).map_err(wrap)?);
        let keyword = argmax_label(&enc.sub_distribution(block, &seq.psi_tokens).map_err(wrap)?);
        let bias = argmax_label(&enc.sub_distribution(block, &seq.sigma_tokens).map_err(wrap)?);
        rows.push(SubInferenceRow {
            gold: r.label,
            main,
            keyword,
            bias,
            consistent: consistent(main, keyword, bias),
        });
    }
    let consistency_rate = rows.iter().filter(|r| r.consistent).count() as f64 / rows.len() as f64;
    Ok(SubInferenceReport {
        block,
        rows,
        consistency_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    fn tiny_model(records: &[Record]) -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            ff: 16,
            blocks: 2,
            max_len: 32,
            ata_dim: 4,
            ln_eps: 1e-12,
        };
        Model::new(Vocabulary::from_records(records), cfg, 3).unwrap()
    }

    fn records() -> Vec<Record> {
        vec![
            Record::from_text("a girl plays violin", "a girl plays music", "violin is music", Label::Entailed).unwrap(),
            Record::from_text("a dog runs", "a cat sleeps", "dog is not cat", Label::Contradicted).unwrap(),
            Record::from_text("a man cooks", "a man cooks pasta", "", Label::Neutral).unwrap(),
        ]
    }

    #[test]
    fn accuracy_examples() {
        use Label::*;
        let r = EvalReport::from_predictions(&[Entailed, Neutral], &[Entailed, Neutral]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let r = EvalReport::from_predictions(&[Entailed, Neutral], &[Entailed, Contradicted]).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.per_class["contradicted"].predicted, 1);
        assert_eq!(r.per_class["neutral"].gold, 1);
        assert!(matches!(EvalReport::from_predictions(&[], &[]), Err(EvalError::Empty)));
        assert!(r.to_csv().starts_with("metric,value\naccuracy,0.5\n"));
    }

    #[test]
    fn argmax_ties_take_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0 / 3.0; 3]), 0);
    }

    #[test]
    fn f1_examples() {
        let perfect = f1_from_predictions(&[0, 1, 2, 2], &[0, 1, 2, 2]);
        assert_eq!(perfect.macro_f1, 1.0);
        assert_eq!(perfect.micro_f1, 1.0);

        // All-zero predictions on one of each class: class 0 has P = 1/3,
        // R = 1, F1 = 1/2; the others are 0. Macro = 1/6.
        let r = f1_from_predictions(&[0, 1, 2], &[0, 0, 0]);
        assert!((r.macro_f1 - 1.0 / 6.0).abs() < 1e-15);
        assert!((r.per_class[0].precision - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[0].recall, 1.0);
        assert!((r.micro_f1 - 1.0 / 3.0).abs() < 1e-15);

        let r = f1_from_predictions(&[0, 1, 0], &[0, 1, 0]);
        assert_eq!(r.empty_classes, vec![2]);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let recs = records();
        let m = tiny_model(&recs);
        let a = evaluate(&m, &recs).unwrap();
        assert_eq!(a, evaluate(&m, &recs).unwrap());
        assert_eq!(a.total, 3);
        assert!(matches!(evaluate(&m, &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn token_f1_scores_ordinary_positions_only() {
        let recs = records();
        let m = tiny_model(&recs);
        let seqs: Vec<LabeledSequence> = recs
            .iter()
            .map(|r| LabeledSequence::from_record(r, &m.vocab, &LabelingOptions::default()).unwrap())
            .collect();
        let r = token_f1(&m, &seqs).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.positions, recs[0].pair_len() - 2 + recs[1].pair_len() - 2);
        assert!((0.0..=1.0).contains(&r.macro_f1));
    }

    #[test]
    fn attention_masses_partition() {
        let recs = records();
        let m = tiny_model(&recs);
        let rep = attention_report(&m, &recs, &LabelingOptions::default(), &[1, 2]).unwrap();
        assert_eq!(rep.examples.len(), 3);
        for ex in &rep.examples {
            assert_eq!(ex.tokens.len(), ex.labels.len());
            for b in &ex.blocks {
                assert!((b.keyword_mass + b.bias_mass - 1.0).abs() < 1e-9);
                assert_eq!(b.attention.len(), ex.tokens.len());
            }
        }
        assert!(attention_report(&m, &recs, &LabelingOptions::default(), &[3]).is_err());
    }

    #[test]
    fn tied_representations_give_uniform_attention() {
        let recs = vec![Record::from_text("x x x", "x x", "x", Label::Entailed).unwrap()];
        let mut m = tiny_model(&recs);
        // Same embedding for every id and position makes every row equal.
        let tok = m.encoder.token_embedding();
        m.encoder.param_mut(tok).data_mut().fill(0.3);
        let pos = m.encoder.param_index("embed.positions").unwrap();
        m.encoder.param_mut(pos).data_mut().fill(0.0);
        let rep = attention_report(&m, &recs, &LabelingOptions::default(), &[1, 2]).unwrap();
        let n = recs[0].pair_len() as f64;
        for b in &rep.examples[0].blocks {
            for &a in &b.attention {
                assert!((a - 1.0 / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn consistency_rule() {
        use Label::*;
        assert!(consistent(Entailed, Entailed, Entailed));
        assert!(consistent(Contradicted, Entailed, Contradicted));
        assert!(!consistent(Entailed, Entailed, Contradicted));
        assert!(consistent(Neutral, Neutral, Entailed));
    }

    #[test]
    fn sub_inference_rows() {
        let recs = records();
        let m = tiny_model(&recs);
        let rep = sub_inference_report(&m, &recs, &LabelingOptions::default(), 2).unwrap();
        assert_eq!(rep.rows.len(), 3);
        assert!((0.0..=1.0).contains(&rep.consistency_rate));
        let main = predict_all(&m, &recs).unwrap();
        for (r, p) in rep.rows.iter().zip(main) {
            assert_eq!(r.main, p);
        }
        assert_eq!(rep.to_csv().lines().count(), 4);
        assert!(sub_inference_report(&m, &recs, &LabelingOptions::default(), 0).is_err());
    }
}
