use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use poss_core::draft::SpecialistBank;
use poss_core::metrics::{read_pos_acc_csv, RunReport};
use poss_core::training::Distilled;
use serde_json::{json, Value};

fn poss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poss")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    o
}

fn config() -> Value {
    json!({
        "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "max_seq_len": 64},
        "train": {
            "window": 32, "target_steps": 40, "target_batch_size": 2, "target_eval_every": 20,
            "target_lr": 0.01, "steps": 12, "batch_size": 2, "lr": 0.003, "unroll": 3
        },
        "engine": {"max_new_tokens": 12},
        "bench": {"runs": 1}
    })
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    corpus: PathBuf,
    prompts: PathBuf,
}

impl Fixture {
    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn target(&self) -> PathBuf {
        self.out("base").join("target.pssc")
    }

    fn distilled(&self) -> PathBuf {
        self.out("base").join("distilled.pssc")
    }

    fn eagle(&self) -> PathBuf {
        self.out("base").join("bank-eagle.pssc")
    }
}

/// Corpus, config and the target/distilled/eagle artifacts, built once.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus.txt");
        std::fs::write(&corpus, "the quick brown fox jumps over the lazy dog. ".repeat(40)).unwrap();
        let prompts = root.join("prompts.txt");
        let long = "x".repeat(60);
        std::fs::write(&prompts, format!("the quick\nover the la\n{long}\nbrown fox\n")).unwrap();
        let cfg = root.join("config.json");
        std::fs::write(&cfg, config().to_string()).unwrap();
        let f = Fixture {
            _dir: dir,
            root,
            config: cfg,
            corpus,
            prompts,
        };
        let base = f.out("base");
        let common = ["--config", s(&f.config), "--out-dir", s(&base)];
        ok(poss(&[&["train-target", "--corpus", s(&f.corpus)], &common[..]].concat()));
        ok(poss(
            &[&["distill", "--target", s(&f.target()), "--corpus", s(&f.corpus)], &common[..]].concat(),
        ));
        ok(poss(
            &[
                &[
                    "train-draft",
                    "--method",
                    "eagle",
                    "--target",
                    s(&f.target()),
                    "--distilled",
                    s(&f.distilled()),
                ],
                &common[..],
            ]
            .concat(),
        ));
        f
    })
}

#[test]
fn missing_corpus_is_a_usage_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = poss(&["train-target", "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("paths.corpus"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"engine": {"depht": 3}}"#).unwrap();
    let o = poss(&["--config", s(&cfg), "report", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("depht"), "{}", stderr(&o));
}

#[test]
fn target_training_is_deterministic_and_beats_unigram() {
    let f = fixture();
    let again = f.out("again");
    ok(poss(&[
        "train-target",
        "--config",
        s(&f.config),
        "--corpus",
        s(&f.corpus),
        "--out-dir",
        s(&again),
    ]));
    let a = std::fs::read(f.target()).unwrap();
    let b = std::fs::read(again.join("target.pssc")).unwrap();
    assert_eq!(a, b);
    let summary: Value =
        serde_json::from_slice(&std::fs::read(f.out("base").join("target.summary.json")).unwrap()).unwrap();
    let heldout = summary["report"]["best_heldout_loss"].as_f64().unwrap();
    let unigram = summary["unigram_heldout_loss"].as_f64().unwrap();
    assert!(heldout < unigram, "{heldout} vs {unigram}");
    assert_eq!(summary["schema_version"], 1);
}

#[test]
fn distill_reports_counts_and_checks_the_model_section() {
    let f = fixture();
    let out = f.out("distill");
    let o = ok(poss(&[
        "distill",
        "--config",
        s(&f.config),
        "--target",
        s(&f.target()),
        "--corpus",
        s(&f.corpus),
        "--k",
        "258",
        "--out-dir",
        s(&out),
    ]));
    let d = Distilled::<f32>::load(&out.join("distilled.pssc")).unwrap();
    assert!(stdout(&o).contains(&format!("examples={} positions={}", d.examples.len(), d.positions())));
    for e in &d.examples {
        for row in e.topk_probs.chunks(258) {
            let total: f64 = row.iter().map(|&p| p as f64).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }

    let mut other = config();
    other["model"]["d_model"] = json!(32);
    let cfg = f.out("other.json");
    std::fs::write(&cfg, other.to_string()).unwrap();
    let o = poss(&[
        "distill",
        "--config",
        s(&cfg),
        "--target",
        s(&f.target()),
        "--corpus",
        s(&f.corpus),
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

fn train_draft(f: &Fixture, out: &Path, extra: &[&str]) -> Output {
    let (target, distilled) = (f.target(), f.distilled());
    let base = [
        "train-draft",
        "--config",
        s(&f.config),
        "--target",
        s(&target),
        "--distilled",
        s(&distilled),
        "--out-dir",
        s(out),
    ];
    poss(&[&base[..], extra].concat())
}

fn log_losses(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn draft_banks_have_the_expected_size_and_replay() {
    let f = fixture();
    let eagle = SpecialistBank::<f32>::load(&f.eagle()).unwrap();
    assert_eq!(eagle.len(), 1);

    let out = f.out("eagle-again");
    ok(train_draft(f, &out, &["--method", "eagle"]));
    assert_eq!(
        log_losses(&out.join("bank-eagle.log.jsonl")),
        log_losses(&f.out("base").join("bank-eagle.log.jsonl"))
    );

    let out = f.out("poss");
    let o = train_draft(f, &out, &["--method", "poss", "--n", "2", "--depth", "6"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("--init"), "{}", stderr(&o));

    ok(train_draft(
        f,
        &out,
        &["--method", "poss", "--n", "2", "--depth", "6", "--init", s(&f.eagle())],
    ));
    let bank = SpecialistBank::<f32>::load(&out.join("bank-poss-n2.pssc")).unwrap();
    assert_eq!(bank.len(), 3);
}

fn bench(f: &Fixture, out: &Path, extra: &[&str]) -> Output {
    let (target, eagle) = (f.target(), f.eagle());
    let base = [
        "bench",
        "--config",
        s(&f.config),
        "--target",
        s(&target),
        "--bank",
        s(&eagle),
        "--prompts",
        s(&f.prompts),
        "--out-dir",
        s(out),
    ];
    poss(&[&base[..], extra].concat())
}

#[test]
fn bench_depth_sweep_writes_one_report_per_depth() {
    let f = fixture();
    let out = f.out("bench");
    for depth in 1..=8 {
        let d = depth.to_string();
        let o = ok(bench(
            f,
            &out,
            &["--method", "single-draft", "--depth", &d, "--width", "2", "--total-tokens", "16"],
        ));
        assert!(stdout(&o).contains("1 skipped"), "{}", stdout(&o));
        assert!(stderr(&o).contains("skipping prompt 3"), "{}", stderr(&o));
        let line = stdout(&o);
        let hashes: Vec<&str> = line
            .lines()
            .find(|l| l.starts_with("output sha256"))
            .unwrap()
            .split(|c: char| c == ' ' || c == ')')
            .filter(|w| w.len() == 64)
            .collect();
        assert_eq!(hashes.len(), 2);
        assert_eq!(hashes[0], hashes[1]);
    }
    let reports: Vec<PathBuf> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    assert_eq!(reports.len(), 8);
    for p in &reports {
        let r: RunReport = serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap();
        let depth = r.config["engine"]["depth"].as_u64().unwrap() as f64;
        assert!((1.0..=depth + 1.0).contains(&r.tau), "{}", r.tau);
        assert_eq!(r.config["bench"]["skipped_prompts"], 1);
        let csv = p.with_extension("pos_acc.csv");
        assert_eq!(read_pos_acc_csv(&csv).unwrap().len(), depth as usize - 1);
    }

    let o = ok(poss(&["report", s(&out), "--out-dir", s(&f.out("summary"))]));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("single-draft")).count(), 8);
    let csv = std::fs::read_to_string(f.out("summary").join("summary.csv")).unwrap();
    assert!(csv.starts_with("# schema_version=1\n"));
    assert_eq!(csv.lines().count(), 10);

    let mut bad: Value = serde_json::from_slice(&std::fs::read(&reports[0]).unwrap()).unwrap();
    bad["schema_version"] = json!(99);
    let p = f.out("bad.json");
    std::fs::write(&p, bad.to_string()).unwrap();
    assert_eq!(code(&poss(&["report", s(&p), "--out-dir", s(&f.out("summary"))])), 3);
}

#[test]
fn sampled_bench_and_vanilla_bench_run() {
    let f = fixture();
    let out = f.out("sampled");
    ok(bench(f, &out, &["--method", "single-draft", "--temperature", "0.8", "--seed", "3"]));
    ok(bench(f, &out, &["--method", "vanilla"]));
    let v: RunReport =
        serde_json::from_slice(&std::fs::read(out.join("vanilla-d6-w4-t16-T0.json")).unwrap()).unwrap();
    assert_eq!(v.tau, 1.0);
}

#[test]
fn sweep_deduplicates_and_flags_rows() {
    let f = fixture();
    let spec = f.out("spec.json");
    std::fs::write(
        &spec,
        json!({
            "methods": ["single-draft", "vanilla"],
            "depths": [1, 2, 2, 3],
            "widths": [1],
            "total_tokens": [3, 6],
            "temperatures": [0.0]
        })
        .to_string(),
    )
    .unwrap();
    let out = f.out("sweep");
    ok(poss(&[
        "sweep",
        "--config",
        s(&f.config),
        "--spec",
        s(&spec),
        "--target",
        s(&f.target()),
        "--single-draft-bank",
        s(&f.eagle()),
        "--prompts",
        s(&f.prompts),
        "--jobs",
        "2",
        "--out-dir",
        s(&out),
    ]));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# schema_version=1"));
    let header = lines.next().unwrap();
    assert!(header.starts_with("method,depth,width,total_tokens,temperature,tau"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // 3 depths x 2 totals for single-draft, one vanilla cell
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r[11] == "ok"));
    for depth in ["1", "2", "3"] {
        let maxima = rows
            .iter()
            .filter(|r| r[0] == "single-draft" && r[1] == depth && r[8] == "1")
            .count();
        assert!(maxima >= 1);
    }
    assert!(rows.iter().filter(|r| r[0] == "single-draft").all(|r| r[10] != "NA"));
}

#[test]
fn sweep_without_spec_is_a_usage_error() {
    let f = fixture();
    let o = poss(&["sweep", "--config", s(&f.config), "--out-dir", s(&f.out("nospec"))]);
    assert_eq!(code(&o), 2);
}
