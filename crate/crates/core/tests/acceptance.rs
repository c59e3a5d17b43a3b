//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::time::{Duration, Instant};

use ebdreg::corpus::{label_tokens, mask_sequences, normalize_labels, tokenize, LabelingOptions, Vocabulary};
use ebdreg::encoder::{Encoder, ModelConfig};
use ebdreg::evaluator::{attention_report, evaluate, token_f1, SyntheticSpec};
use ebdreg::objectives::{joint_distribution, js_divergence};
use ebdreg::trainer::{batch_loss, gradient_check, prepare, train, BlockStrategy, LossSwitches, TrainConfig};
use ebdreg::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn joint_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let psi = random_dist(&mut rng, 3);
        let sigma = random_dist(&mut rng, 3);
        let mut brute = [0.0; 3];
        for a in Label::ALL {
            for b in Label::ALL {
                brute[Label::min_priority(a, b).index()] += psi[a.index()] * sigma[b.index()];
            }
        }
        let got = joint_distribution(&psi, &sigma);
        for i in 0..3 {
            worst = worst.max((got[i] - brute[i]).abs());
        }
        worst_sum = worst_sum.max((got.iter().sum::<f64>() - 1.0).abs());
    }
    let elapsed = t.elapsed();
    outcome(
        worst <= 1e-12 && worst_sum <= 1e-12 && elapsed < Duration::from_secs(1),
        format!("max abs error {worst:.1e}, max sum error {worst_sum:.1e}, {elapsed:.2?}"),
    )
}

fn js_properties() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut asym, mut range_ok, mut self_zero) = (0.0f64, true, 0.0f64);
    for _ in 0..1000 {
        let p = random_dist(&mut rng, 3);
        let q = random_dist(&mut rng, 3);
        let (a, b) = (js_divergence(&p, &q), js_divergence(&q, &p));
        asym = asym.max((a - b).abs());
        range_ok &= (0.0..=ln2 + 1e-12).contains(&a);
        self_zero = self_zero.max(js_divergence(&p, &p).abs());
    }
    // Termwise: m = (0.75, 0.25, 0).
    let half = 0.5 * (4.0f64 / 3.0).ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2f64.ln();
    let tagged = [
        (js_divergence(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]), 0.0),
        (js_divergence(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]), ln2),
        (js_divergence(&[1.0, 0.0, 0.0], &[0.5, 0.5, 0.0]), half),
    ];
    let tag_err = tagged.iter().map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    outcome(
        asym <= 1e-12 && range_ok && self_zero <= 1e-12 && tag_err <= 1e-9 && (half - 0.2158).abs() < 1e-4,
        format!("asymmetry {asym:.1e}, in range {range_ok}, self {self_zero:.1e}, tagged error {tag_err:.1e}"),
    )
}

fn tiny_config() -> TrainConfig {
    let mut config = TrainConfig {
        block_strategy: BlockStrategy::All,
        ..TrainConfig::default()
    };
    config.model = ModelConfig {
        d_model: 8,
        heads: 2,
        ff: 16,
        blocks: 2,
        max_len: 32,
        ata_dim: 4,
        ..ModelConfig::default()
    };
    config
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let config = tiny_config();
    let spec = SyntheticSpec {
        train_size: 2,
        dev_size: 1,
        ood_size: 1,
        ..SyntheticSpec::default()
    };
    let records = spec.generate().expect("valid spec").train;
    let vocab = Vocabulary::from_records(&records);
    let (batch, _) = prepare(&records, &vocab, &config.labeling(), config.model.max_len).expect("prepares");
    let encoder = Encoder::new(config.model.clone(), vocab.len(), 0).expect("valid model");
    let reports = gradient_check(&encoder, &batch, &config, 1e-5).expect("gradients");
    let pass = reports.len() == 5 && reports.iter().all(|(_, r)| r.passes(1e-4));
    let detail = reports
        .iter()
        .map(|(term, r)| format!("{} {:.1e}", term.as_str(), r.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    let elapsed = t.elapsed();
    outcome(pass && elapsed < Duration::from_secs(120), format!("{detail}, {elapsed:.2?}"))
}

fn labeling_fidelity() -> Outcome {
    let premise = tokenize("A girl playing a violin along with a group of people");
    let hypothesis = tokenize("A girl is washing a load of laundry");
    let explanation = tokenize("A girl cannot be washing a load of laundry while playing a violin");
    let labels = label_tokens(&premise, &hypothesis, &explanation, &LabelingOptions::default()).expect("has explanation");
    let words: Vec<&str> = std::iter::once("[CLS]")
        .chain(premise.iter().map(String::as_str))
        .chain(std::iter::once("[SEP]"))
        .chain(hypothesis.iter().map(String::as_str))
        .collect();
    let expected = |w: &str| match w {
        "playing" | "violin" | "washing" | "laundry" => Some(2),
        "girl" => Some(1),
        "is" | "along" | "with" | "group" | "people" => Some(0),
        _ => None,
    };
    let mut checked = 0;
    let mut wrong = Vec::new();
    for (w, &l) in words.iter().zip(&labels) {
        if let Some(e) = expected(w) {
            checked += 1;
            if e != l {
                wrong.push(format!("{w}={l}"));
            }
        }
    }
    outcome(
        wrong.is_empty() && checked == 11,
        format!("{checked} positions checked, mismatches {wrong:?}"),
    )
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut track = |xs: &[f64]| worst = worst.max((xs.iter().sum::<f64>() - 1.0).abs());
    for draw in 0..500 {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d_model = heads * rng.gen_range(2..5);
        let config = ModelConfig {
            d_model,
            heads,
            ff: rng.gen_range(4..17),
            blocks: rng.gen_range(1..4),
            max_len: 24,
            ata_dim: rng.gen_range(2..9),
            ..ModelConfig::default()
        };
        let vocab_size = 12;
        let encoder = Encoder::new(config.clone(), vocab_size, draw).expect("valid model");
        let len = rng.gen_range(2..=config.max_len);
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab_size as u32)).collect();
        let out = encoder.encode(&tokens).expect("encodes");
        for h in 0..config.blocks {
            track(&out.lambda_norm[h]);
            track(&out.attention[h]);
            track(&out.relation[h]);
            track(&encoder.sub_distribution(h + 1, &tokens).expect("block"));
        }
        track(&out.prediction());
        for row in encoder.predict_tokens(&tokens).expect("encodes") {
            track(&row);
        }
        let e: Vec<u8> = if draw % 5 == 0 {
            vec![0; len]
        } else {
            (0..len).map(|_| rng.gen_range(0..3)).collect()
        };
        track(&normalize_labels(&e).0);
        let p = random_dist(&mut rng, 3);
        let q = random_dist(&mut rng, 3);
        track(&joint_distribution(&p, &q));
    }
    outcome(worst <= 1e-9, format!("max deviation from 1: {worst:.1e} over 500 draws"))
}

fn masking_partition() -> Outcome {
    let spec = SyntheticSpec {
        train_size: 1000,
        dev_size: 1,
        ood_size: 1,
        seed: 21,
        ..SyntheticSpec::default()
    };
    let records = spec.generate().expect("valid spec").train;
    let vocab = Vocabulary::from_records(&records);
    let (seqs, dropped) = prepare(&records, &vocab, &LabelingOptions::default(), 64).expect("prepares");
    let mut violations = 0;
    for s in &seqs {
        let (psi, sigma) = mask_sequences(&s.tokens, &s.labels);
        for i in 0..s.tokens.len() {
            let t = s.tokens[i];
            let (in_psi, in_sigma) = (psi[i] == t, sigma[i] == t);
            let ok = if t == Vocabulary::CLS || t == Vocabulary::SEP {
                in_psi && in_sigma
            } else {
                in_psi != in_sigma && (psi[i] == Vocabulary::MASK || sigma[i] == Vocabulary::MASK)
            };
            violations += usize::from(!ok);
        }
    }
    outcome(
        violations == 0 && seqs.len() == 1000 && dropped == 0,
        format!("{} records, {violations} violations", seqs.len()),
    )
}

fn overfit() -> Outcome {
    let t = Instant::now();
    let spec = SyntheticSpec {
        train_size: 16,
        dev_size: 1,
        ood_size: 1,
        ..SyntheticSpec::default()
    };
    let records = spec.generate().expect("valid spec").train;
    let vocab = Vocabulary::from_records(&records);
    let config = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        steps: Some(500),
        ..TrainConfig::default()
    };
    let (seqs, _) = prepare(&records, &vocab, &config.labeling(), config.model.max_len).expect("prepares");
    let out = train(&seqs, &vocab, &config, None).expect("trains");
    let first = out.log.first().expect("logged").total;
    let last = out.log.last().expect("logged").total;
    let best = out.log.iter().map(|m| m.total).fold(f64::INFINITY, f64::min);
    let elapsed = t.elapsed();
    outcome(
        best < 0.05 && last < first && elapsed < Duration::from_secs(180),
        format!("step 0 {first:.4}, step 500 {last:.4}, min {best:.4}, {elapsed:.2?}"),
    )
}

fn debiasing() -> Outcome {
    let t = Instant::now();
    let (mut ebd_acc, mut base_acc, mut ebd_mass, mut base_mass) = (vec![], vec![], vec![], vec![]);
    for seed in 0..5u64 {
        let spec = SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        };
        let corpus = spec.generate().expect("valid spec");
        let vocab = Vocabulary::from_records(&corpus.train);
        for ebd in [true, false] {
            let (alpha, beta) = if ebd { (0.4, 0.8) } else { (0.0, 0.0) };
            let config = TrainConfig {
                alpha,
                beta,
                learning_rate: 2e-3,
                epochs: 3,
                seed,
                ..TrainConfig::default()
            };
            let (seqs, _) = prepare(&corpus.train, &vocab, &config.labeling(), config.model.max_len).expect("prepares");
            let out = train(&seqs, &vocab, &config, None).expect("trains");
            let acc = evaluate(&out.model, &corpus.ood).expect("evaluates").accuracy;
            let blocks = TrainConfig::default().supervised_blocks();
            let report = attention_report(&out.model, &corpus.ood, &config.labeling(), &blocks).expect("reports");
            let mass = report.mean_keyword_mass.values().sum::<f64>() / blocks.len() as f64;
            if ebd {
                ebd_acc.push(acc);
                ebd_mass.push(mass);
            } else {
                base_acc.push(acc);
                base_mass.push(mass);
            }
        }
    }
    let elapsed = t.elapsed();
    let (ea, ba, em, bm) = (median(ebd_acc.clone()), median(base_acc.clone()), median(ebd_mass), median(base_mass));
    outcome(
        ea >= ba && em > bm && elapsed < Duration::from_secs(900),
        format!(
            "median OOD accuracy {ea:.3} vs baseline {ba:.3} (per seed {ebd_acc:.3?} vs {base_acc:.3?}), median keyword mass {em:.3} vs {bm:.3}, {elapsed:.0?}"
        ),
    )
}

fn ablation() -> Outcome {
    let spec = SyntheticSpec {
        seed: 31,
        ..SyntheticSpec::default()
    };
    let corpus = spec.generate().expect("valid spec");
    let vocab = Vocabulary::from_records(&corpus.train);
    let base = TrainConfig {
        alpha: 0.4,
        beta: 0.8,
        learning_rate: 2e-3,
        seed: 31,
        ..TrainConfig::default()
    };
    let (train_seqs, _) = prepare(&corpus.train, &vocab, &base.labeling(), base.model.max_len).expect("prepares");
    let (dev_seqs, _) = prepare(&corpus.dev, &vocab, &base.labeling(), base.model.max_len).expect("prepares");
    let f1_with = |er: bool| {
        let config = TrainConfig {
            losses: LossSwitches { er, sa: false, si: false },
            ..base.clone()
        };
        let out = train(&train_seqs, &vocab, &config, None).expect("trains");
        token_f1(&out.model, &dev_seqs).expect("scores").macro_f1
    };
    let (on, off) = (f1_with(true), f1_with(false));
    let mut failures = Vec::new();
    for mask in 0..8u8 {
        let config = TrainConfig {
            losses: LossSwitches {
                er: mask & 1 != 0,
                sa: mask & 2 != 0,
                si: mask & 4 != 0,
            },
            steps: Some(3),
            batch_size: 4,
            ..base.clone()
        };
        if let Err(e) = train(&train_seqs[..16], &vocab, &config, None) {
            failures.push(format!("{mask:03b}: {e}"));
        }
    }
    outcome(
        on - off >= 0.2 && failures.is_empty(),
        format!("token macro-F1 {on:.3} with L_ER vs {off:.3} without, switch failures {failures:?}"),
    )
}

fn determinism() -> Outcome {
    let spec = SyntheticSpec {
        train_size: 200,
        dev_size: 50,
        ood_size: 50,
        seed: 41,
        ..SyntheticSpec::default()
    };
    let corpus = spec.generate().expect("valid spec");
    let vocab = Vocabulary::from_records(&corpus.train);
    let config = TrainConfig {
        steps: Some(10),
        batch_size: 8,
        seed: 41,
        ..TrainConfig::default()
    };
    let (seqs, _) = prepare(&corpus.train, &vocab, &config.labeling(), config.model.max_len).expect("prepares");
    let a = train(&seqs, &vocab, &config, None).expect("trains");
    let b = train(&seqs, &vocab, &config, None).expect("trains");
    let bits = |log: &[ebdreg::trainer::StepMetrics]| -> Vec<[u64; 6]> {
        log.iter()
            .map(|m| {
                [
                    m.step as u64,
                    m.l_main.to_bits(),
                    m.l_er.to_bits(),
                    m.l_sa_sum.to_bits(),
                    m.l_si_sum.to_bits(),
                    m.total.to_bits(),
                ]
            })
            .collect()
    };
    let identical = a.log.len() == 10 && bits(&a.log) == bits(&b.log);

    let model = a.checkpoint.model().expect("restores");
    let reference = evaluate(&model, &corpus.ood).expect("evaluates");
    let variants = [
        TrainConfig { alpha: 0.0, beta: 0.0, ..config.clone() },
        TrainConfig { alpha: 2.0, beta: 0.1, block_strategy: BlockStrategy::Top1, ..config.clone() },
        TrainConfig { block_strategy: BlockStrategy::All, ..config.clone() },
        TrainConfig { losses: LossSwitches { er: false, sa: true, si: false }, ..config.clone() },
        TrainConfig { losses: LossSwitches { er: true, sa: false, si: true }, sa_squared: true, ..config.clone() },
    ];
    let mut pure = true;
    for v in &variants {
        batch_loss(&model.encoder, &seqs[..4], v, &v.supervised_blocks()).expect("loss evaluates");
        let restored = ebdreg::trainer::Checkpoint::parse(&serde_json::to_string(&a.checkpoint).expect("serializes"))
            .expect("parses")
            .model()
            .expect("restores");
        pure &= evaluate(&model, &corpus.ood).expect("evaluates") == reference;
        pure &= evaluate(&restored, &corpus.ood).expect("evaluates") == reference;
    }
    outcome(
        identical && pure,
        format!("first 10 steps bit-identical {identical}, evaluation invariant to loss settings {pure}"),
    )
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("joint distribution matches enumeration", joint_oracle),
        ("JS divergence properties", js_properties),
        ("gradient check of every loss term", gradient_suite),
        ("token labels of the worked example", labeling_fidelity),
        ("probability outputs normalized", normalization),
        ("masking partitions positions", masking_partition),
        ("16-example overfit", overfit),
        ("debiasing on the synthetic corpus", debiasing),
        ("L_ER ablation and switch combinations", ablation),
        ("determinism and evaluation purity", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.pass);
        println!("{} criterion {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
