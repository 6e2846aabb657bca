//! Corpus handling, distillation and the draft training regimes.
//!
//! All three regimes share one unrolled training pass. At unroll step `s`
//! the pair at index `p` is `(x_{p+1}, f)` where `f` is the target feature
//! `f_p` for `s = 0` and the previous step's own output at `p − 1` for
//! `s > 0`. Step `s` is computed by specialist `route(s, n)`; teacher
//! forcing is the one-step unroll and the multi-step regime is a bank with a
//! single specialist.

mod corpus;
mod distill;
mod draft;
mod target;

use serde::{Deserialize, Serialize};

use crate::draft::Span;
use crate::tensor::{Graph, Real, Tensor};
use crate::{Error, Result};

pub use corpus::{unigram_cross_entropy, Corpus};
pub use distill::{distill_corpus, Distilled, DistilledExample, DISTILLED_KIND};
pub use draft::{train_step_eagle, train_step_hass, train_step_poss, DraftTrainer, StepReport};
pub use target::{heldout_loss, train_target, TargetTrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Eagle,
    Hass,
    Poss,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eagle" => Ok(Regime::Eagle),
            "hass" => Ok(Regime::Hass),
            "poss" => Ok(Regime::Poss),
            _ => Err(Error::Config(format!(
                "train.regime must be eagle, hass or poss, got {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Eagle => "eagle",
            Regime::Hass => "hass",
            Regime::Poss => "poss",
        })
    }
}

/// Knobs for target pre-training and draft training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Positions per specialist (`poss` only).
    pub n: Span,
    /// Unroll depth `L_train` of the multi-step regimes.
    pub unroll: usize,
    /// Token-loss weight.
    pub w: f64,
    /// Teacher support size of the top-K loss.
    pub k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Training window length in tokens.
    pub window: usize,
    pub seed: u64,
    pub detach_between_steps: bool,
    pub target_lr: f64,
    pub target_steps: usize,
    pub target_batch_size: usize,
    /// Held-out evaluations without improvement before target training stops.
    pub target_patience: usize,
    pub target_eval_every: usize,
    /// Fraction of the corpus held out from training.
    pub heldout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Eagle,
            n: Span::Finite(1),
            unroll: 6,
            w: 0.1,
            k: 10,
            lr: 1e-3,
            weight_decay: 0.0,
            steps: 2000,
            batch_size: 16,
            window: 256,
            seed: 0,
            detach_between_steps: true,
            target_lr: 3e-3,
            target_steps: 3000,
            target_batch_size: 8,
            target_patience: 4,
            target_eval_every: 100,
            heldout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Number of unroll steps actually run: one for teacher forcing.
    pub fn effective_unroll(&self) -> usize {
        match self.regime {
            Regime::Eagle => 1,
            _ => self.unroll,
        }
    }

    /// Positions per specialist implied by the regime.
    pub fn span(&self) -> Span {
        match self.regime {
            Regime::Poss => self.n,
            _ => Span::Infinite,
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.unroll == 0 {
            return Err(Error::Config("train.unroll must be ≥ 1".into()));
        }
        if !(self.w >= 0.0) {
            return Err(Error::Config("train.w must be non-negative".into()));
        }
        if self.k == 0 || self.k > vocab {
            return Err(Error::Config(format!("train.k must be in 1..={vocab}")));
        }
        if self.batch_size == 0 || self.target_batch_size == 0 {
            return Err(Error::Config("train batch sizes must be positive".into()));
        }
        if self.window < 2 {
            return Err(Error::Config("train.window must be ≥ 2".into()));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::Config("train.heldout_fraction must be in (0, 1)".into()));
        }
        if let Span::Finite(0) = self.n {
            return Err(Error::Config("train.n must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Loss components of one unroll step or of a whole training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub feature: f64,
    pub token: f64,
    pub topk: f64,
    pub total: f64,
}

/// `L_total = L_feature + w·L_token + L_topk`.
pub fn total_loss(feature: f64, token: f64, topk: f64, w: f64) -> LossTerms {
    LossTerms {
        feature,
        token,
        topk,
        total: feature + w * token + topk,
    }
}

/// Aggregated losses plus the per-position (unroll step) terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub aggregate: LossTerms,
    pub per_position: Vec<LossTerms>,
}

impl LossBreakdown {
    /// Sums per-position terms into the aggregate.
    pub fn from_positions(per_position: Vec<LossTerms>, w: f64) -> Self {
        let (f, t, k) = per_position
            .iter()
            .fold((0.0, 0.0, 0.0), |a, p| (a.0 + p.feature, a.1 + p.token, a.2 + p.topk));
        LossBreakdown {
            aggregate: total_loss(f, t, k, w),
            per_position,
        }
    }
}

/// Cross entropy between teacher and prediction restricted to the teacher's
/// top-K ids, both renormalised over that support.
pub fn loss_topk<R: Real>(pred_logits: &[R], ids: &[u32], probs: &[R]) -> Result<R> {
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(vec![1, pred_logits.len()], pred_logits.to_vec())?);
    let v = g.topk_cross_entropy(l, ids, probs, ids.len(), &[R::one()])?;
    Ok(g.value(v).item())
}
