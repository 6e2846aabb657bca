use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Corpus, TrainConfig};
use crate::model::TargetModel;
use crate::tensor::{kernels, AdamW, Graph, Real, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTrainReport {
    pub steps: usize,
    pub final_train_loss: f64,
    pub best_heldout_loss: f64,
    pub heldout_history: Vec<(usize, f64)>,
    pub stopped_early: bool,
}

/// Linear warm-up over the first 5% of steps, then cosine decay to 10%.
pub(crate) fn lr_at(base: f64, step: usize, total: usize) -> f64 {
    let warm = (total / 20).max(1);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let t = (step - warm) as f64 / (total - warm).max(1) as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Mean next-token cross entropy (nats) over BOS-prefixed chunks of `stream`.
pub fn heldout_loss<R: Real>(model: &TargetModel<R>, stream: &[u32], window: usize) -> Result<f64> {
    let window = window.min(model.config.max_seq_len);
    let (mut total, mut count) = (0.0, 0usize);
    for w in Corpus::chunks(stream, window) {
        let out = model.forward_with_features(&w, None)?;
        for i in 0..w.len() - 1 {
            let row: Vec<f64> = out.logits.row(i).iter().map(|v| v.f64()).collect();
            total += kernels::log_sum_exp(&row) - row[w[i + 1] as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("held-out stream is empty".into()));
    }
    Ok(total / count as f64)
}

/// Next-token training of the target on random corpus windows. Stops at
/// `target_steps` or after `target_patience` held-out evaluations without
/// improvement, and leaves the best held-out parameters in `model`. Each
/// step emits one JSON object through `log`.
pub fn train_target<R: Real>(
    model: &mut TargetModel<R>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(serde_json::Value),
) -> Result<TargetTrainReport> {
    cfg.validate(model.config.vocab_size)?;
    let v = model.config.vocab_size;
    let window = cfg.window.min(model.config.max_seq_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = {
        let refs: Vec<&Tensor<R>> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
        AdamW::new(&refs, cfg.target_lr, cfg.weight_decay)
    };
    let mut best = (f64::INFINITY, model.clone());
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut last_loss = f64::NAN;
    let mut stopped_early = false;
    let mut steps = 0;
    for step in 0..cfg.target_steps {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let vars = model.register(&mut g, true);
        let mut terms = Vec::with_capacity(cfg.target_batch_size);
        for _ in 0..cfg.target_batch_size {
            let w = Corpus::random_window(&corpus.train, window, &mut rng);
            let n = w.len() - 1;
            let (logits, _) = vars.forward(&mut g, &w[..n])?;
            let mut onehot = Tensor::zeros(&[n, v]);
            for (i, &t) in w[1..].iter().enumerate() {
                onehot.data_mut()[i * v + t as usize] = R::one();
            }
            let wts = vec![R::of(1.0 / (n * cfg.target_batch_size) as f64); n];
            terms.push((g.cross_entropy(logits, &onehot, &wts)?, R::one()));
        }
        let loss = g.lin_comb(&terms)?;
        let lv = g.value(loss).item().f64();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("target loss became {lv} at step {step}")));
        }
        g.backward(loss)?;
        let all = vars.all();
        let zeros: Vec<Vec<R>> = all
            .iter()
            .map(|&x| vec![R::zero(); g.value(x).numel()])
            .collect();
        let grads: Vec<&[R]> = all
            .iter()
            .zip(&zeros)
            .map(|(&x, z)| g.grad(x).unwrap_or(z))
            .collect();
        opt.lr = lr_at(cfg.target_lr, step, cfg.target_steps);
        opt.update(&mut model.tensors_mut(), &grads)?;
        last_loss = lv;
        steps = step + 1;
        let mut rec = json!({
            "step": step,
            "regime": "target",
            "loss": lv,
            "lr": opt.lr,
            "wall_ms": t0.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.target_eval_every > 0 && (steps % cfg.target_eval_every == 0 || steps == cfg.target_steps) {
            let h = heldout_loss(model, &corpus.heldout, window)?;
            rec["heldout_loss"] = json!(h);
            history.push((steps, h));
            if h < best.0 {
                best = (h, model.clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        log(rec);
        if cfg.target_patience > 0 && since_best >= cfg.target_patience {
            stopped_early = true;
            break;
        }
    }
    if best.0.is_finite() {
        *model = best.1;
    }
    Ok(TargetTrainReport {
        steps,
        final_train_loss: last_loss,
        best_heldout_loss: best.0,
        heldout_history: history,
        stopped_early,
    })
}
