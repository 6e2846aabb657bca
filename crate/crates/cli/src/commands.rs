use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use poss_core::draft::{SpecialistBank, Span};
use poss_core::engine::{generate_vanilla, EngineConfig, Generation, Method, Session};
use poss_core::metrics::{emit_report, BenchRun, ReportFormat, RoundRecord, RunReport, SCHEMA_VERSION};
use poss_core::model::tokenizer::tokenize;
use poss_core::model::TargetModel;
use poss_core::training::{
    distill_corpus, train_target as fit_target, unigram_cross_entropy, Corpus, Distilled, DraftTrainer, Regime,
};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{require, RunConfigFile};
use crate::error::CliError;

fn out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Artifact(format!("cannot create {}: {e}", out.display())))
}

/// JSON-lines log whose first line carries the schema version and config.
struct Log {
    w: BufWriter<File>,
    err: Option<std::io::Error>,
}

impl Log {
    fn create(path: &Path, config: &Value) -> Result<Self, CliError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", json!({"schema_version": SCHEMA_VERSION, "config": config}))?;
        Ok(Log { w, err: None })
    }

    fn line(&mut self, v: Value) {
        if self.err.is_none() {
            if let Err(e) = writeln!(self.w, "{v}") {
                self.err = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<(), CliError> {
        if let Some(e) = self.err.take() {
            return Err(e.into());
        }
        self.w.flush()?;
        Ok(())
    }
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, v).map_err(|e| CliError::Artifact(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_target(cfg: &RunConfigFile) -> Result<TargetModel<f32>, CliError> {
    let p = require(&cfg.paths.target, "target", "--target")?;
    Ok(TargetModel::load(&p)?)
}

pub fn train_target(cfg: &RunConfigFile, out: &Path) -> Result<(), CliError> {
    let corpus_path = require(&cfg.paths.corpus, "corpus", "--corpus")?;
    cfg.model.validate()?;
    cfg.train.validate(cfg.model.vocab_size)?;
    let corpus = Corpus::load(&corpus_path, cfg.train.heldout_fraction)?;
    out_dir(out)?;
    let mut model = TargetModel::<f32>::init(cfg.model.clone(), cfg.train.seed)?;
    let mut log = Log::create(&out.join("target.log.jsonl"), &cfg.to_json())?;
    let r = fit_target(&mut model, &corpus, &cfg.train, &mut |v| log.line(v))?;
    log.finish()?;
    let ckpt = out.join("target.pssc");
    model.save(&ckpt)?;
    let unigram = unigram_cross_entropy(&corpus.train, &corpus.heldout);
    write_json(
        &out.join("target.summary.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "config": cfg.to_json(),
            "report": r,
            "unigram_heldout_loss": unigram,
            "params": model.param_count(),
        }),
    )?;
    println!(
        "trained target for {} steps: held-out loss {:.4} nats/token (unigram baseline {:.4}); wrote {}",
        r.steps,
        r.best_heldout_loss,
        unigram,
        ckpt.display()
    );
    Ok(())
}

pub fn distill(cfg: &RunConfigFile, out: &Path) -> Result<(), CliError> {
    let target = load_target(cfg)?;
    let corpus_path = require(&cfg.paths.corpus, "corpus", "--corpus")?;
    if cfg.sections.iter().any(|s| s == "model") && cfg.model != target.config {
        return Err(CliError::Artifact(format!(
            "target checkpoint config {:?} does not match the model section {:?}",
            target.config, cfg.model
        )));
    }
    cfg.train.validate(target.config.vocab_size)?;
    let corpus = Corpus::load(&corpus_path, cfg.train.heldout_fraction)?;
    out_dir(out)?;
    let data = distill_corpus(&target, &corpus.train, cfg.train.k, cfg.train.window)?;
    let path = out.join("distilled.pssc");
    data.save(&path)?;
    println!(
        "examples={} positions={} k={} wrote {}",
        data.examples.len(),
        data.positions(),
        data.k,
        path.display()
    );
    Ok(())
}

fn bank_stem(cfg: &RunConfigFile) -> String {
    match cfg.train.regime {
        Regime::Poss => format!("bank-poss-n{}", cfg.train.n),
        r => format!("bank-{r}"),
    }
}

pub fn train_draft(cfg: &RunConfigFile, out: &Path) -> Result<(), CliError> {
    let tc = &cfg.train;
    let init = if tc.regime == Regime::Poss {
        let Some(p) = cfg.paths.init.clone() else {
            return Err(CliError::Artifact(
                "poss training starts from a trained EAGLE bank, but no --init checkpoint was given; \
                 run `poss train-draft --method eagle` first and pass its bank file with --init"
                    .into(),
            ));
        };
        if !p.exists() {
            return Err(CliError::Artifact(format!(
                "init checkpoint {} does not exist; run `poss train-draft --method eagle` first",
                p.display()
            )));
        }
        Some(p)
    } else {
        None
    };
    let target = load_target(cfg)?;
    let data_path = require(&cfg.paths.distilled, "distilled", "--distilled")?;
    tc.validate(target.config.vocab_size)?;
    let data = Distilled::<f32>::load(&data_path)?;
    if data.d_model != target.config.d_model {
        return Err(CliError::Artifact(format!(
            "distilled features have width {} but the target has d_model {}",
            data.d_model, target.config.d_model
        )));
    }
    let bank = match init {
        Some(p) => {
            let eagle = SpecialistBank::<f32>::load(&p)?;
            if eagle.len() != 1 || eagle.model_config() != &target.config {
                return Err(CliError::Artifact(format!(
                    "{} is not a single-layer bank for this target",
                    p.display()
                )));
            }
            SpecialistBank::replicate(eagle.specialist(1), &target.config, tc.span(), tc.unroll)?
        }
        None => SpecialistBank::init(&target.config, Span::Infinite, tc.unroll, tc.seed)?,
    };
    out_dir(out)?;
    let stem = bank_stem(cfg);
    let mut trainer = DraftTrainer::new(bank, tc.clone())?;
    let mut log = Log::create(&out.join(format!("{stem}.log.jsonl")), &cfg.to_json())?;
    let losses = trainer.train(&target, &data, &mut |v| log.line(v))?;
    log.finish()?;
    let bank = trainer.into_bank();
    let path = out.join(format!("{stem}.pssc"));
    bank.save(&path)?;
    let last = losses.last().map_or(f64::NAN, |l| l.aggregate.total);
    println!(
        "trained {} bank: m={} specialists x {} params, final loss {last:.4}; wrote {}",
        tc.regime,
        bank.len(),
        bank.per_specialist_params()[0],
        path.display()
    );
    Ok(())
}

/// Prompts that fit the context with `max_new` generated tokens, and the
/// number skipped.
pub fn load_prompts(path: &Path, max_seq_len: usize, max_new: usize) -> Result<(Vec<Vec<u32>>, usize), CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut kept = Vec::new();
    let mut skipped = 0;
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let p = tokenize(line.as_bytes());
        if p.len() + max_new > max_seq_len {
            eprintln!(
                "warning: skipping prompt {} of {} tokens: it leaves no room for {max_new} new tokens within {max_seq_len}",
                i + 1,
                p.len()
            );
            skipped += 1;
        } else {
            kept.push(p);
        }
    }
    if kept.is_empty() {
        return Err(CliError::Usage(format!("{} holds no usable prompts", path.display())));
    }
    Ok((kept, skipped))
}

pub struct Pass {
    pub outputs: Vec<Vec<u32>>,
    pub generations: Vec<Generation>,
    pub run: BenchRun,
}

pub fn vanilla_pass(target: &TargetModel<f32>, prompts: &[Vec<u32>], cfg: &EngineConfig) -> Result<Pass, CliError> {
    timed_pass(prompts, |p| Ok(generate_vanilla(target, p, cfg)?))
}

pub fn method_pass(
    target: &TargetModel<f32>,
    bank: Option<&SpecialistBank<f32>>,
    prompts: &[Vec<u32>],
    cfg: &EngineConfig,
) -> Result<Pass, CliError> {
    match (cfg.method, bank) {
        (Method::Vanilla, _) => vanilla_pass(target, prompts, cfg),
        (_, Some(b)) => timed_pass(prompts, |p| Ok(Session::new(target, b, cfg.clone())?.generate(p)?)),
        (_, None) => Err(CliError::Usage(format!("method {} needs a draft bank", cfg.method))),
    }
}

fn timed_pass(
    prompts: &[Vec<u32>],
    mut gen: impl FnMut(&[u32]) -> Result<Generation, CliError>,
) -> Result<Pass, CliError> {
    let t0 = Instant::now();
    let generations = prompts.iter().map(|p| gen(p)).collect::<Result<Vec<_>, _>>()?;
    let wall_ns = t0.elapsed().as_nanos() as u64;
    let outputs: Vec<Vec<u32>> = generations.iter().map(|g| g.tokens.clone()).collect();
    Ok(Pass {
        run: BenchRun {
            tokens: outputs.iter().map(Vec::len).sum(),
            wall_ns,
        },
        outputs,
        generations,
    })
}

/// Round records of a pass. Plain decoding has no draft rounds; each token
/// becomes a one-token round timed as verification.
pub fn records(pass: &Pass, method: Method) -> Vec<RoundRecord> {
    if method != Method::Vanilla {
        return pass.generations.iter().flat_map(|g| g.records.clone()).collect();
    }
    let mut out = Vec::new();
    for g in &pass.generations {
        let per = g.total_ns / g.tokens.len().max(1) as u64;
        for _ in &g.tokens {
            out.push(RoundRecord {
                round: out.len(),
                acceptance: Vec::new(),
                committed: 1,
                nodes: 0,
                draft_ns: 0,
                verify_ns: per,
                commit_ns: 0,
                wall_ns: per,
                specialist_calls: Vec::new(),
            });
        }
    }
    out
}

pub fn output_hash(outputs: &[Vec<u32>]) -> String {
    let mut h = Sha256::new();
    for o in outputs {
        for t in o {
            h.update(t.to_le_bytes());
        }
        h.update(u32::MAX.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_bank(path: &Option<PathBuf>, field: &str, flag: &str, target: &TargetModel<f32>) -> Result<SpecialistBank<f32>, CliError> {
    let p = require(path, field, flag)?;
    let bank = SpecialistBank::load(&p)?;
    if bank.model_config() != &target.config {
        return Err(CliError::Artifact(format!(
            "bank {} was trained for a different target configuration",
            p.display()
        )));
    }
    Ok(bank)
}

pub fn report_stem(e: &EngineConfig) -> String {
    format!(
        "{}-d{}-w{}-t{}-T{}",
        e.method, e.depth, e.width, e.total_tokens, e.temperature
    )
}

pub fn bench(cfg: &RunConfigFile, out: &Path) -> Result<(), CliError> {
    let e = &cfg.engine;
    e.validate()?;
    if cfg.bench.runs == 0 {
        return Err(CliError::Usage("bench.runs must be at least 1".into()));
    }
    let target = load_target(cfg)?;
    let bank = match e.method {
        Method::Vanilla => None,
        _ => Some(load_bank(&cfg.paths.bank, "bank", "--bank", &target)?),
    };
    let prompts_path = require(&cfg.paths.prompts, "prompts", "--prompts")?;
    let (prompts, skipped) = load_prompts(&prompts_path, target.config.max_seq_len, e.max_new_tokens)?;
    out_dir(out)?;

    let mut vanilla_runs = Vec::new();
    let mut runs = Vec::new();
    let mut first: Option<(Pass, Pass)> = None;
    for _ in 0..cfg.bench.runs {
        let v = vanilla_pass(&target, &prompts, e)?;
        let m = method_pass(&target, bank.as_ref(), &prompts, e)?;
        vanilla_runs.push(v.run.clone());
        runs.push(m.run.clone());
        first.get_or_insert((v, m));
    }
    let (v, m) = first.expect("at least one run");
    let (vh, mh) = (output_hash(&v.outputs), output_hash(&m.outputs));
    if e.temperature == 0.0 && v.outputs != m.outputs {
        return Err(CliError::Runtime(format!(
            "greedy {} output differs from vanilla decoding (hash {mh} vs {vh})",
            e.method
        )));
    }
    let recs = records(&m, e.method);
    let depth = if e.method == Method::Vanilla { 0 } else { e.depth };
    let mut config = cfg.to_json();
    config["bench"]["skipped_prompts"] = json!(skipped);
    config["bench"]["prompt_count"] = json!(prompts.len());
    let report = RunReport::new(config, depth, &recs, runs, vanilla_runs)?;
    let stem = report_stem(e);
    for (suffix, fmt) in [
        ("json", ReportFormat::Json),
        ("pos_acc.csv", ReportFormat::PosAccCsv),
        ("timing.csv", ReportFormat::TimingCsv),
    ] {
        emit_report(&report, fmt, &out.join(format!("{stem}.{suffix}")))?;
    }
    println!(
        "{stem}: tau {:.3}, speed-up {:.3}x, {:.1} tokens/s over {} prompts ({skipped} skipped)",
        report.tau,
        report.speedup,
        report.throughput,
        prompts.len()
    );
    println!("output sha256 {mh} (vanilla {vh})");
    Ok(())
}

fn collect_reports(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            inner.sort();
            files.extend(inner);
        } else if p.exists() {
            files.push(p.clone());
        } else {
            return Err(CliError::Artifact(format!("{} does not exist", p.display())));
        }
    }
    if files.is_empty() {
        return Err(CliError::Usage("no report files given".into()));
    }
    Ok(files)
}

fn read_report(path: &Path) -> Result<RunReport, CliError> {
    let text = std::fs::read_to_string(path)?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    match v.get("schema_version").and_then(Value::as_u64) {
        Some(n) if n == SCHEMA_VERSION as u64 => {}
        other => {
            return Err(CliError::Artifact(format!(
                "{}: schema_version {other:?}, expected {SCHEMA_VERSION}",
                path.display()
            )))
        }
    }
    serde_json::from_value(v).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))
}

pub fn report(inputs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let files = collect_reports(inputs)?;
    out_dir(out)?;
    let path = out.join("summary.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "# schema_version={SCHEMA_VERSION}")?;
    writeln!(
        w,
        "file,method,depth,width,total_tokens,temperature,tau,speedup,throughput,p_first,min_phase_coverage"
    )?;
    println!(
        "{:<12} {:>5} {:>5} {:>5} {:>6} {:>7} {:>8} {:>10}",
        "method", "depth", "width", "total", "temp", "tau", "speedup", "tokens/s"
    );
    for f in files {
        let r = read_report(&f)?;
        let e: EngineConfig = serde_json::from_value(r.config["engine"].clone()).unwrap_or_default();
        println!(
            "{:<12} {:>5} {:>5} {:>5} {:>6} {:>7.3} {:>8.3} {:>10.1}",
            e.method.to_string(),
            e.depth,
            e.width,
            e.total_tokens,
            e.temperature,
            r.tau,
            r.speedup,
            r.throughput
        );
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            f.display(),
            e.method,
            e.depth,
            e.width,
            e.total_tokens,
            e.temperature,
            r.tau,
            r.speedup,
            r.throughput,
            r.p_first,
            r.timing.min_phase_coverage
        )?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}
