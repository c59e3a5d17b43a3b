use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use ebdreg::corpus::{load_jsonl, LabeledSequence, OnMalformed, Record, Vocabulary};
use ebdreg::encoder::ModelConfig;
use ebdreg::evaluator::{
    attention_report, evaluate, sub_inference_report, swap_eval, token_f1, Lexicon, SwapCategory, SyntheticSpec,
};
use ebdreg::trainer::{gradient_check, prepare, train, BlockStrategy, Checkpoint, TrainConfig};
use log::info;
use serde::Serialize;

use crate::config::{load, write_manifest};
use crate::{Command, Common, ModelArgs};

pub enum Failure {
    /// Bad invocation; exit code 2.
    Usage(String),
    /// Downstream error; exit code 1.
    Run(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

type Outcome = Result<ExitCode, Failure>;

/// Config problems are invocation errors.
fn usage(e: anyhow::Error) -> Failure {
    Failure::Usage(format!("{e:#}"))
}

fn require_config(common: &Common, verb: &str) -> Result<PathBuf, Failure> {
    common
        .config
        .clone()
        .ok_or_else(|| Failure::Usage(format!("`{verb}` requires --config PATH")))
}

fn pick_path(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Failure::Usage(format!("no {what} given (flag or config)")))
}

fn read_records(path: &Path) -> anyhow::Result<Vec<Record>> {
    Ok(load_jsonl(path, OnMalformed::Fail)?.records)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn out_dir(common: &Common) -> anyhow::Result<&Path> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(&common.out)
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Gen { common } => gen(&common),
        Command::Label { common, data } => label(&common, &data),
        Command::Train { common, data, resume } => train_cmd(&common, &data, &resume),
        Command::Eval { common, model } => eval(&common, &model),
        Command::SwapEval {
            common,
            model,
            lexicon,
            category,
            rounds,
        } => swap(&common, &model, &lexicon, &category, rounds),
        Command::AttnReport { common, model, blocks } => attn(&common, &model, &blocks),
        Command::SubReport { common, model, block } => sub(&common, &model, block),
        Command::GradCheck { common } => grad_check(&common),
    }
}

fn gen(common: &Common) -> Outcome {
    let (spec, _) = load::<SyntheticSpec>(common.config.as_deref(), common.seed, &common.sets).map_err(usage)?;
    let corpus = spec.generate()?;
    let dir = out_dir(common)?;
    let paths = corpus.write(dir)?;
    for (name, recs) in [("train", &corpus.train), ("dev", &corpus.dev), ("ood", &corpus.ood)] {
        info!(
            "{name}: {} records, spurious correlation {:.3}",
            recs.len(),
            spec.measured_correlation(recs)
        );
    }
    let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    write_manifest(dir, "gen", spec.seed, serde_json::to_value(&spec)?, &refs)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct LabelDump {
    index: usize,
    label: String,
    tokens: Vec<String>,
    labels: Vec<u8>,
    targets: Vec<f64>,
    keyword_kept: Vec<String>,
    bias_kept: Vec<String>,
    missing_explanation: bool,
    uniform_fallback: bool,
}

fn label(common: &Common, data: &Option<PathBuf>) -> Outcome {
    let (config, raw) = load::<TrainConfig>(common.config.as_deref(), common.seed, &common.sets).map_err(usage)?;
    let path = pick_path(data, &config.data.train, "dataset")?;
    let records = read_records(&path)?;
    let vocab = Vocabulary::from_records(&records);
    let words = |ids: &[u32]| -> Vec<String> { ids.iter().map(|&i| vocab.word(i).unwrap_or("[UNK]").to_string()).collect() };
    let mut dump = Vec::with_capacity(records.len());
    for (index, r) in records.iter().enumerate() {
        let s = LabeledSequence::from_record(r, &vocab, &config.labeling())?;
        dump.push(LabelDump {
            index,
            label: r.label.as_str().into(),
            tokens: r.pair_words(),
            labels: s.labels.clone(),
            targets: s.targets.clone(),
            keyword_kept: words(&s.psi_tokens),
            bias_kept: words(&s.sigma_tokens),
            missing_explanation: s.flags.missing_explanation,
            uniform_fallback: s.flags.uniform_fallback,
        });
    }
    let (file, dir) = if common.out.extension().is_some_and(|e| e == "json") {
        let dir = common.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
        (common.out.clone(), dir)
    } else {
        (common.out.join("labels.json"), common.out.clone())
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&file, &dump)?;
    write_manifest(&dir, "label", config.seed, raw, &[&file])?;
    info!("labelled {} records into {}", dump.len(), file.display());
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(common: &Common, data: &Option<PathBuf>, resume: &Option<PathBuf>) -> Outcome {
    let cfg_path = require_config(common, "train")?;
    let (mut config, _) = load::<TrainConfig>(Some(&cfg_path), common.seed, &common.sets).map_err(usage)?;
    let dir = out_dir(common)?.to_path_buf();
    let train_path = pick_path(data, &config.data.train, "training set")?;
    config.checkpoint_path.get_or_insert_with(|| dir.join("checkpoint.json"));
    config.metrics_path.get_or_insert_with(|| dir.join("metrics.jsonl"));
    config.validate()?;
    let records = read_records(&train_path)?;
    let vocab = match &config.data.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::from_records(&records),
    };
    let vocab_path = dir.join("vocab.txt");
    fs::write(&vocab_path, vocab.to_file_string()).with_context(|| format!("writing {}", vocab_path.display()))?;
    let (seqs, _) = prepare(&records, &vocab, &config.labeling(), config.model.max_len)?;
    let ck = match resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let out = train(&seqs, &vocab, &config, ck)?;
    if let Some(last) = out.log.last() {
        info!("finished at step {}: total loss {:.5}", last.step + 1, last.total);
    }
    if let Some(dev) = &config.data.dev {
        let report = evaluate(&out.model, &read_records(dev)?)?;
        info!("dev accuracy {:.4}", report.accuracy);
    }
    let ckpt = config.checkpoint_path.clone().expect("set above");
    let metrics = config.metrics_path.clone().expect("set above");
    write_manifest(&dir, "train", config.seed, serde_json::to_value(&config)?, &[&ckpt, &metrics, &vocab_path])?;
    Ok(ExitCode::SUCCESS)
}

struct Loaded {
    config: TrainConfig,
    raw: serde_json::Value,
    checkpoint: Checkpoint,
    records: Vec<Record>,
    dir: PathBuf,
}

fn load_for_analysis(common: &Common, args: &ModelArgs, verb: &str) -> Result<Loaded, Failure> {
    let cfg_path = require_config(common, verb)?;
    let (config, raw) = load::<TrainConfig>(Some(&cfg_path), common.seed, &common.sets).map_err(usage)?;
    let dir = out_dir(common)?.to_path_buf();
    let ckpt_path = args
        .checkpoint
        .clone()
        .or_else(|| config.checkpoint_path.clone())
        .unwrap_or_else(|| dir.join("checkpoint.json"));
    let checkpoint = Checkpoint::load(&ckpt_path)?;
    let data = args
        .data
        .clone()
        .or_else(|| config.data.eval.clone())
        .or_else(|| config.data.dev.clone())
        .ok_or_else(|| Failure::Usage("no dataset given (--data or config data.eval)".into()))?;
    let records = read_records(&data)?;
    Ok(Loaded {
        config,
        raw,
        checkpoint,
        records,
        dir,
    })
}

fn eval(common: &Common, args: &ModelArgs) -> Outcome {
    let l = load_for_analysis(common, args, "eval")?;
    let model = l.checkpoint.model()?;
    let mut report = evaluate(&model, &l.records)?;
    let with_expl: Vec<Record> = l.records.iter().filter(|r| r.supervisable()).cloned().collect();
    if !with_expl.is_empty() {
        let (seqs, _) = prepare(&with_expl, &model.vocab, &l.config.labeling(), model.encoder.config().max_len)?;
        report.token = Some(token_f1(&model, &seqs)?);
    }
    let json = l.dir.join("eval.json");
    let csv = l.dir.join("eval.csv");
    write_json(&json, &report)?;
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    write_manifest(&l.dir, "eval", l.config.seed, l.raw, &[&json, &csv])?;
    println!("accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.total);
    if let Some(t) = &report.token {
        println!("token macro-F1 {:.4}", t.macro_f1);
    }
    Ok(ExitCode::SUCCESS)
}

fn swap(
    common: &Common,
    args: &ModelArgs,
    lexicon: &Option<PathBuf>,
    category: &Option<String>,
    rounds: Option<usize>,
) -> Outcome {
    let l = load_for_analysis(common, args, "swap-eval")?;
    let lex_path = pick_path(lexicon, &l.config.data.lexicon, "lexicon")?;
    let lex = Lexicon::load(&lex_path).map_err(|e| anyhow!("{e}"))?;
    let cat: SwapCategory = category
        .as_deref()
        .unwrap_or(&l.config.analysis.swap_category)
        .parse()
        .map_err(Failure::Usage)?;
    let rounds = rounds.unwrap_or(l.config.analysis.swap_rounds);
    if rounds == 0 {
        return Err(Failure::Usage("rounds must be at least 1".into()));
    }
    let model = l.checkpoint.model()?;
    let report = swap_eval(&model, &l.records, &lex, cat, rounds, l.config.seed, &l.config.labeling())?;
    let json = l.dir.join("swap.json");
    let csv = l.dir.join("swap.csv");
    write_json(&json, &report)?;
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    write_manifest(&l.dir, "swap-eval", l.config.seed, l.raw, &[&json, &csv])?;
    println!("{} baseline {:.4} rounds {:?}", cat.as_str(), report.baseline, report.rounds);
    Ok(ExitCode::SUCCESS)
}

fn supervised(checkpoint: &Checkpoint) -> Vec<usize> {
    checkpoint.config.supervised_blocks()
}

fn attn(common: &Common, args: &ModelArgs, blocks: &[usize]) -> Outcome {
    let l = load_for_analysis(common, args, "attn-report")?;
    let blocks = if !blocks.is_empty() {
        blocks.to_vec()
    } else if !l.config.analysis.report_blocks.is_empty() {
        l.config.analysis.report_blocks.clone()
    } else {
        supervised(&l.checkpoint)
    };
    let model = l.checkpoint.model()?;
    let report = attention_report(&model, &l.records, &l.config.labeling(), &blocks)?;
    let json = l.dir.join("attention.json");
    write_json(&json, &report)?;
    write_manifest(&l.dir, "attn-report", l.config.seed, l.raw, &[&json])?;
    for (b, m) in &report.mean_keyword_mass {
        println!("block {b}: mean keyword mass {m:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

fn sub(common: &Common, args: &ModelArgs, block: Option<usize>) -> Outcome {
    let l = load_for_analysis(common, args, "sub-report")?;
    let block = block.unwrap_or_else(|| *supervised(&l.checkpoint).last().expect("non-empty block set"));
    let model = l.checkpoint.model()?;
    let report = sub_inference_report(&model, &l.records, &l.config.labeling(), block)?;
    let json = l.dir.join("sub_inference.json");
    let csv = l.dir.join("sub_inference.csv");
    write_json(&json, &report)?;
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    write_manifest(&l.dir, "sub-report", l.config.seed, l.raw, &[&json, &csv])?;
    println!("block {block}: consistency {:.4}", report.consistency_rate);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GradRow {
    term: &'static str,
    max_rel_error: f64,
    worst_index: Option<usize>,
    passed: bool,
}

const GRAD_TOLERANCE: f64 = 1e-4;

fn grad_check(common: &Common) -> Outcome {
    let (mut config, raw) = load::<TrainConfig>(common.config.as_deref(), common.seed, &common.sets).map_err(usage)?;
    config.model = ModelConfig {
        d_model: 8,
        heads: 2,
        ff: 16,
        blocks: 2,
        max_len: 32,
        ata_dim: 4,
        ln_eps: 1e-12,
    };
    config.block_strategy = BlockStrategy::All;
    let spec = SyntheticSpec {
        train_size: 2,
        dev_size: 1,
        ood_size: 1,
        seed: config.seed,
        ..SyntheticSpec::default()
    };
    let records = spec.generate()?.train;
    let vocab = Vocabulary::from_records(&records);
    let (batch, _) = prepare(&records, &vocab, &config.labeling(), config.model.max_len)?;
    let model = ebdreg::trainer::Model::new(vocab, config.model.clone(), config.seed)?;
    let reports = gradient_check(&model.encoder, &batch, &config, 1e-5)?;
    let mut rows = Vec::new();
    for (term, r) in &reports {
        let passed = r.passes(GRAD_TOLERANCE);
        println!(
            "{:<7} max relative error {:.3e} {}",
            term.as_str(),
            r.max_rel_error,
            if passed { "ok" } else { "FAIL" }
        );
        rows.push(GradRow {
            term: term.as_str(),
            max_rel_error: r.max_rel_error,
            worst_index: r.worst_index,
            passed,
        });
    }
    let dir = out_dir(common)?;
    let json = dir.join("grad_check.json");
    write_json(&json, &rows)?;
    write_manifest(dir, "grad-check", config.seed, raw, &[&json])?;
    Ok(if rows.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
