use std::collections::HashMap;
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::target::lr_at;
use super::{Distilled, DistilledExample, LossBreakdown, LossTerms, Regime, TrainConfig};
use crate::draft::{DraftVars, SpecialistBank, Span};
use crate::model::TargetModel;
use crate::tensor::{kernels, AdamW, Graph, KeyLists, Real, Tensor, Var};
use crate::{Error, Result};

/// Outcome of one draft training (or evaluation) step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub regime: Regime,
    pub losses: LossBreakdown,
    /// Terms of the unroll steps routed to each specialist, in bank order.
    pub per_specialist: Vec<LossBreakdown>,
    /// Mean L2 distance between each step's input features and the target
    /// features they stand in for.
    pub input_deviation: Vec<f64>,
    /// Mean L2 distance between each step's output features and the target
    /// features they approximate.
    pub output_deviation: Vec<f64>,
    /// Loss terms contributed per window position (valid rows per step).
    pub loss_counts: Vec<usize>,
    pub wall_ms: f64,
}

/// Optimiser state and bank for one draft training session.
pub struct DraftTrainer<R: Real> {
    bank: SpecialistBank<R>,
    opt: AdamW<R>,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    steps: u64,
}

struct Built<R: Real> {
    loss: Option<Var>,
    vars: Vec<DraftVars>,
    report: StepReport,
    _marker: std::marker::PhantomData<R>,
}

fn route0(span: Span, s: usize) -> usize {
    match span {
        Span::Finite(n) => s / n,
        Span::Infinite => 0,
    }
}

fn l2_rows<R: Real>(a: &[R], b: &[R], d: usize, rows: std::ops::Range<usize>) -> f64 {
    let n = rows.len();
    if n == 0 {
        return 0.0;
    }
    rows.map(|p| {
        a[p * d..(p + 1) * d]
            .iter()
            .zip(&b[p * d..(p + 1) * d])
            .map(|(&x, &y)| (x - y).f64().powi(2))
            .sum::<f64>()
            .sqrt()
    })
    .sum::<f64>()
        / n as f64
}

impl<R: Real> DraftTrainer<R> {
    pub fn new(bank: SpecialistBank<R>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(bank.model_config().vocab_size)?;
        let want = cfg.span().specialists_for(cfg.effective_unroll());
        if bank.len() != want || (cfg.regime == Regime::Poss && bank.span() != cfg.span()) {
            return Err(Error::Config(format!(
                "{} training with n={} and unroll {} needs a bank of {want} specialists (n={}), got {} (n={})",
                cfg.regime,
                cfg.span(),
                cfg.effective_unroll(),
                cfg.span(),
                bank.len(),
                bank.span()
            )));
        }
        let opt = {
            let refs: Vec<&Tensor<R>> = bank.named_tensors().into_iter().map(|(_, t)| t).collect();
            AdamW::new(&refs, cfg.lr, cfg.weight_decay)
        };
        Ok(DraftTrainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            bank,
            opt,
            cfg,
            steps: 0,
        })
    }

    pub fn bank(&self) -> &SpecialistBank<R> {
        &self.bank
    }

    pub fn into_bank(self) -> SpecialistBank<R> {
        self.bank
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Uniformly drawn (with replacement) batch of examples.
    pub fn sample_batch<'a>(&mut self, data: &'a Distilled<R>) -> Vec<&'a DistilledExample<R>> {
        (0..self.cfg.batch_size)
            .map(|_| &data.examples[self.rng.random_range(0..data.examples.len())])
            .collect()
    }

    fn build(
        &self,
        g: &mut Graph<R>,
        target: &TargetModel<R>,
        batch: &[&DistilledExample<R>],
        enabled: &[bool],
    ) -> Result<Built<R>> {
        let cfg = &self.cfg;
        let tc = &target.config;
        let (d, v, heads) = (tc.d_model, tc.vocab_size, tc.n_heads);
        let eps = target.eps();
        let unroll = cfg.effective_unroll();
        let span = cfg.span();
        let w = R::of(cfg.w);
        let vars: Vec<DraftVars> = self.bank.specialists().iter().map(|s| s.register(g)).collect();
        let lm_head = g.constant(target.lm_head.clone());
        let bsz = R::of(batch.len() as f64);

        let mut per_pos = vec![LossTerms::default(); unroll];
        let mut in_dev = vec![0.0; unroll];
        let mut out_dev = vec![0.0; unroll];
        let mut counts = vec![0usize; unroll];
        let mut terms: Vec<(Var, R)> = Vec::new();

        for ex in batch {
            let t_len = ex.len().min(cfg.window).min(tc.max_seq_len);
            if t_len < 2 {
                continue;
            }
            if ex.features.cols() != d || ex.k() == 0 {
                return Err(Error::dim("draft batch", ex.features.shape(), &[t_len, d]));
            }
            let p_len = t_len - 1;
            let k = ex.k();
            let fdat = ex.features.data();
            let emb = g.constant(Tensor::new(vec![p_len, d], target.embed_rows(&ex.tokens[1..t_len])?)?);
            let f_in_t = Tensor::new(vec![p_len, d], fdat[..p_len * d].to_vec())?;
            let f_tgt_t = Tensor::new(vec![p_len, d], fdat[d..t_len * d].to_vec())?;
            let mut teacher = target.head(f_tgt_t.data());
            for row in teacher.chunks_mut(v) {
                kernels::softmax_in_place(row, R::one());
            }
            let teacher = Tensor::new(vec![p_len, v], teacher)?;
            let ids = &ex.topk_ids[k..t_len * k];
            let probs = &ex.topk_probs[k..t_len * k];
            let f_in = g.constant(f_in_t.clone());
            let f_tgt = g.constant(f_tgt_t.clone());
            let positions: Vec<usize> = (0..p_len).collect();

            let mut inputs = vec![f_in];
            let mut memo: HashMap<(usize, usize), (Var, Var)> = HashMap::new();
            for s in 0..unroll {
                let j = route0(span, s);
                let dv = vars[j];
                let x = dv.fuse(g, emb, inputs[s])?;
                let (q, k_s, v_s) = dv.block.qkv(g, x, &positions, heads, eps)?;
                memo.insert((j, s), (k_s, v_s));
                for t in 0..s {
                    if !memo.contains_key(&(j, t)) {
                        let xt = dv.fuse(g, emb, inputs[t])?;
                        let kv = dv.block.kv(g, xt, &positions, heads, eps)?;
                        memo.insert((j, t), kv);
                    }
                }
                let (k_all, v_all) = if s == 0 {
                    (k_s, v_s)
                } else {
                    let ks: Vec<Var> = (0..=s).map(|t| memo[&(j, t)].0).collect();
                    let vs: Vec<Var> = (0..=s).map(|t| memo[&(j, t)].1).collect();
                    (g.concat_rows(&ks)?, g.concat_rows(&vs)?)
                };
                let mut keys = KeyLists::new();
                let mut row = Vec::with_capacity(p_len);
                for p in 0..p_len {
                    row.clear();
                    for q_pos in 0..=p {
                        let step = s.saturating_sub(p - q_pos);
                        row.push((step * p_len + q_pos) as u32);
                    }
                    keys.push(&row);
                }
                let a = g.attention(q, k_all, v_all, heads, Rc::new(keys))?;
                let out = dv.block.finish(g, x, a, eps)?;

                let valid = p_len.saturating_sub(s);
                if valid > 0 {
                    let wt = R::one() / R::of(valid as f64) / bsz;
                    let wts: Vec<R> = (0..p_len).map(|p| if p >= s { wt } else { R::zero() }).collect();
                    let logits = g.matmul(out, lm_head)?;
                    let lf = g.smooth_l1(out, f_tgt, &wts, R::one())?;
                    let lt = g.cross_entropy(logits, &teacher, &wts)?;
                    let lk = g.topk_cross_entropy(logits, ids, probs, k, &wts)?;
                    let (vf, vt, vk) = (
                        g.value(lf).item().f64(),
                        g.value(lt).item().f64(),
                        g.value(lk).item().f64(),
                    );
                    let pp = &mut per_pos[s];
                    pp.feature += vf;
                    pp.token += vt;
                    pp.topk += vk;
                    counts[s] += valid;
                    let nb = batch.len() as f64;
                    in_dev[s] += l2_rows(g.value(inputs[s]).data(), f_in_t.data(), d, s..p_len) / nb;
                    out_dev[s] += l2_rows(g.value(out).data(), f_tgt_t.data(), d, s..p_len) / nb;
                    if enabled.get(s).copied().unwrap_or(true) {
                        terms.push((g.lin_comb(&[(lf, R::one()), (lt, w), (lk, R::one())])?, R::one()));
                    }
                }
                if s + 1 < unroll {
                    let src = if cfg.detach_between_steps { g.detach(out) } else { out };
                    let cat = g.concat_rows(&[f_in, src])?;
                    let idx: Vec<usize> = (0..p_len).map(|p| if p == 0 { 0 } else { p_len + p - 1 }).collect();
                    inputs.push(g.gather_rows(cat, &idx)?);
                }
            }
        }
        for p in per_pos.iter_mut() {
            *p = super::total_loss(p.feature, p.token, p.topk, cfg.w);
        }
        let m = self.bank.len();
        let per_specialist = (0..m)
            .map(|j| {
                let own: Vec<LossTerms> = (0..unroll)
                    .filter(|&s| route0(span, s) == j)
                    .map(|s| per_pos[s])
                    .collect();
                LossBreakdown::from_positions(own, cfg.w)
            })
            .collect();
        let loss = if terms.is_empty() { None } else { Some(g.lin_comb(&terms)?) };
        Ok(Built {
            loss,
            vars,
            report: StepReport {
                step: self.steps,
                regime: cfg.regime,
                losses: LossBreakdown::from_positions(per_pos, cfg.w),
                per_specialist,
                input_deviation: in_dev,
                output_deviation: out_dev,
                loss_counts: counts,
                wall_ms: 0.0,
            },
            _marker: std::marker::PhantomData,
        })
    }

    /// Loss value of the taped graph, the step report and the gradient of
    /// every bank tensor (bank order), without updating anything.
    pub fn loss_and_grads(
        &self,
        target: &TargetModel<R>,
        batch: &[&DistilledExample<R>],
        enabled: &[bool],
    ) -> Result<(f64, StepReport, Vec<Vec<R>>)> {
        let mut g = Graph::new();
        let built = self.build(&mut g, target, batch, enabled)?;
        let all: Vec<Var> = built.vars.iter().flat_map(|v| v.all()).collect();
        let Some(loss) = built.loss else {
            let grads = all.iter().map(|&x| vec![R::zero(); g.value(x).numel()]).collect();
            return Ok((0.0, built.report, grads));
        };
        let lv = g.value(loss).item().f64();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("draft loss became {lv}")));
        }
        g.backward(loss)?;
        let grads = all
            .iter()
            .map(|&x| {
                g.grad(x)
                    .map(<[R]>::to_vec)
                    .unwrap_or_else(|| vec![R::zero(); g.value(x).numel()])
            })
            .collect();
        Ok((lv, built.report, grads))
    }

    /// Losses and feature deviations without a parameter update.
    pub fn evaluate(&self, target: &TargetModel<R>, batch: &[&DistilledExample<R>]) -> Result<StepReport> {
        let mut g = Graph::new();
        Ok(self.build(&mut g, target, batch, &[])?.report)
    }

    /// One optimiser step on `batch`.
    pub fn step(&mut self, target: &TargetModel<R>, batch: &[&DistilledExample<R>]) -> Result<StepReport> {
        self.step_masked(target, batch, &[])
    }

    /// As [`DraftTrainer::step`] with the loss of unroll step `s` included
    /// only when `enabled[s]` (missing entries count as enabled).
    pub fn step_masked(
        &mut self,
        target: &TargetModel<R>,
        batch: &[&DistilledExample<R>],
        enabled: &[bool],
    ) -> Result<StepReport> {
        let t0 = Instant::now();
        let (_, mut report, grads) = self.loss_and_grads(target, batch, enabled)?;
        let refs: Vec<&[R]> = grads.iter().map(Vec::as_slice).collect();
        self.opt.lr = lr_at(self.cfg.lr, self.steps as usize, self.cfg.steps.max(1));
        self.opt.update(&mut self.bank.tensors_mut(), &refs)?;
        self.steps += 1;
        report.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        Ok(report)
    }

    /// Runs `cfg.steps` steps on batches drawn from `data`, emitting one JSON
    /// object per step through `log`.
    pub fn train(
        &mut self,
        target: &TargetModel<R>,
        data: &Distilled<R>,
        log: &mut dyn FnMut(serde_json::Value),
    ) -> Result<Vec<LossBreakdown>> {
        if data.examples.is_empty() {
            return Err(Error::Config("distilled dataset is empty".into()));
        }
        let mut out = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let batch = self.sample_batch(data);
            let r = self.step(target, &batch)?;
            log(json!({
                "step": r.step,
                "regime": r.regime,
                "feature": r.losses.aggregate.feature,
                "token": r.losses.aggregate.token,
                "topk": r.losses.aggregate.topk,
                "total": r.losses.aggregate.total,
                "per_position": r.losses.per_position,
                "wall_ms": r.wall_ms,
            }));
            out.push(r.losses);
        }
        Ok(out)
    }
}

fn expect_regime<R: Real>(t: &DraftTrainer<R>, r: Regime) -> Result<()> {
    if t.cfg.regime != r {
        return Err(Error::Config(format!(
            "trainer is configured for {}, not {r}",
            t.cfg.regime
        )));
    }
    Ok(())
}

/// Teacher-forced step: the single draft layer sees target features only.
pub fn train_step_eagle<R: Real>(
    t: &mut DraftTrainer<R>,
    target: &TargetModel<R>,
    batch: &[&DistilledExample<R>],
) -> Result<LossBreakdown> {
    expect_regime(t, Regime::Eagle)?;
    Ok(t.step(target, batch)?.losses)
}

/// Multi-step step: the single draft layer consumes its own features.
pub fn train_step_hass<R: Real>(
    t: &mut DraftTrainer<R>,
    target: &TargetModel<R>,
    batch: &[&DistilledExample<R>],
) -> Result<LossBreakdown> {
    expect_regime(t, Regime::Hass)?;
    Ok(t.step(target, batch)?.losses)
}

/// Position-specialised step; returns the breakdown per specialist.
pub fn train_step_poss<R: Real>(
    t: &mut DraftTrainer<R>,
    target: &TargetModel<R>,
    batch: &[&DistilledExample<R>],
) -> Result<Vec<LossBreakdown>> {
    expect_regime(t, Regime::Poss)?;
    Ok(t.step(target, batch)?.per_specialist)
}
