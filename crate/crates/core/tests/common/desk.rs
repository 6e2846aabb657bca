//! Desk-scale trained artifacts shared by the acceptance checks. Trained
//! once and cached under the cargo target directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use poss_core::draft::{SpecialistBank, Span};
use poss_core::model::tokenizer::tokenize;
use poss_core::model::{ModelConfig, TargetModel};
use poss_core::training::{distill_corpus, train_target, Corpus, Distilled, DraftTrainer, Regime, TrainConfig};
use serde::{Deserialize, Serialize};

/// Bump when any setting below changes so stale caches are retrained.
const CACHE_TAG: &str = "desk-v2";

pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const DEPTH: usize = 6;
pub const EAGLE_STEPS: usize = 1500;
pub const POSS_STEPS: usize = 1500;

pub fn model_config() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 256,
        ..Default::default()
    }
}

fn target_train_config() -> TrainConfig {
    TrainConfig {
        window: 128,
        target_steps: 1500,
        target_batch_size: 8,
        target_eval_every: 100,
        target_patience: 4,
        target_lr: 3e-3,
        seed: 1,
        ..Default::default()
    }
}

pub fn draft_config(regime: Regime, n: Span, seed: u64) -> TrainConfig {
    let (steps, lr) = match regime {
        Regime::Eagle => (EAGLE_STEPS, 3e-3),
        _ => (POSS_STEPS, 3e-3),
    };
    TrainConfig {
        regime,
        n,
        unroll: DEPTH,
        batch_size: 8,
        window: 64,
        steps,
        lr,
        seed,
        ..Default::default()
    }
}

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub fn corpus() -> Corpus {
    Corpus::load(&data_dir().join("corpus.txt"), 0.1).unwrap()
}

/// The bundled held-out prompts, tokenized.
pub fn prompts() -> Vec<Vec<u32>> {
    std::fs::read_to_string(data_dir().join("prompts.txt"))
        .unwrap()
        .lines()
        .map(|l| tokenize(l.as_bytes()))
        .collect()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainTimes {
    pub target_s: f64,
    pub distill_s: f64,
    pub drafts_s: Vec<(String, f64)>,
}

impl TrainTimes {
    pub fn total_s(&self) -> f64 {
        self.target_s + self.distill_s + self.drafts_s.iter().map(|d| d.1).sum::<f64>()
    }
}

pub struct Desk {
    pub target: TargetModel<f32>,
    pub data: Distilled<f32>,
    pub eagle: Vec<SpecialistBank<f32>>,
    pub poss1: Vec<SpecialistBank<f32>>,
    pub poss2: SpecialistBank<f32>,
    pub poss3: SpecialistBank<f32>,
    pub times: TrainTimes,
    pub from_cache: bool,
}

impl Desk {
    /// `(method name, bank)` for single-draft and PosS-1/2/3 at seed 0.
    pub fn methods(&self) -> Vec<(&'static str, &SpecialistBank<f32>)> {
        vec![
            ("single-draft", &self.eagle[0]),
            ("poss-1", &self.poss1[0]),
            ("poss-2", &self.poss2),
            ("poss-3", &self.poss3),
        ]
    }
}

fn cached_bank(
    dir: &Path,
    name: &str,
    times: &mut TrainTimes,
    fresh: &mut bool,
    train: impl FnOnce() -> SpecialistBank<f32>,
) -> SpecialistBank<f32> {
    let p = dir.join(format!("{name}.pssc"));
    if let Ok(b) = SpecialistBank::load(&p) {
        return b;
    }
    *fresh = true;
    let t0 = Instant::now();
    let b = train();
    times.drafts_s.push((name.to_string(), t0.elapsed().as_secs_f64()));
    b.save(&p).unwrap();
    b
}

fn train_draft(
    target: &TargetModel<f32>,
    data: &Distilled<f32>,
    cfg: TrainConfig,
    init: SpecialistBank<f32>,
) -> SpecialistBank<f32> {
    let mut tr = DraftTrainer::new(init, cfg).unwrap();
    tr.train(target, data, &mut |_| {}).unwrap();
    tr.into_bank()
}

fn poss_from(
    target: &TargetModel<f32>,
    data: &Distilled<f32>,
    eagle: &SpecialistBank<f32>,
    n: usize,
    seed: u64,
) -> SpecialistBank<f32> {
    let cfg = draft_config(Regime::Poss, Span::Finite(n), seed);
    let init = SpecialistBank::replicate(eagle.specialist(1), &target.config, Span::Finite(n), DEPTH).unwrap();
    train_draft(target, data, cfg, init)
}

/// Train or load every desk artifact.
pub fn load() -> Desk {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(CACHE_TAG);
    std::fs::create_dir_all(&dir).unwrap();
    let times_path = dir.join("times.json");
    let mut times: TrainTimes = std::fs::read(&times_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    let mut fresh = false;
    let corpus = corpus();

    let tp = dir.join("target.pssc");
    let target = match TargetModel::load(&tp) {
        Ok(t) => t,
        Err(_) => {
            fresh = true;
            times = TrainTimes::default();
            let t0 = Instant::now();
            let mut t = TargetModel::init(model_config(), 1).unwrap();
            train_target(&mut t, &corpus, &target_train_config(), &mut |_| {}).unwrap();
            times.target_s = t0.elapsed().as_secs_f64();
            t.save(&tp).unwrap();
            t
        }
    };
    let t0 = Instant::now();
    let data = distill_corpus(&target, &corpus.train, 10, 64).unwrap();
    if fresh {
        times.distill_s = t0.elapsed().as_secs_f64();
    }

    let mut eagle = Vec::new();
    let mut poss1 = Vec::new();
    for s in SEEDS {
        let e = cached_bank(&dir, &format!("eagle-s{s}"), &mut times, &mut fresh, || {
            let cfg = draft_config(Regime::Eagle, Span::Infinite, s);
            let init = SpecialistBank::init(&target.config, Span::Infinite, DEPTH, 100 + s).unwrap();
            train_draft(&target, &data, cfg, init)
        });
        let p = cached_bank(&dir, &format!("poss1-s{s}"), &mut times, &mut fresh, || {
            poss_from(&target, &data, &e, 1, s)
        });
        eagle.push(e);
        poss1.push(p);
    }
    let poss2 = cached_bank(&dir, "poss2-s0", &mut times, &mut fresh, || {
        poss_from(&target, &data, &eagle[0], 2, 0)
    });
    let poss3 = cached_bank(&dir, "poss3-s0", &mut times, &mut fresh, || {
        poss_from(&target, &data, &eagle[0], 3, 0)
    });
    if fresh {
        std::fs::write(&times_path, serde_json::to_vec_pretty(&times).unwrap()).unwrap();
    }
    Desk {
        target,
        data,
        eagle,
        poss1,
        poss2,
        poss3,
        times,
        from_cache: !fresh,
    }
}
