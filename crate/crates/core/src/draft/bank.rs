use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{DraftLayer, Span};
use crate::model::checkpoint::{self, Container};
use crate::model::ModelConfig;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

pub const BANK_KIND: &str = "specialist-bank";

/// Ordered specialists `S¹..Sᵐ`, each owning `span` consecutive draft
/// positions of a maximum depth `L`, with `m = ceil(L / span)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecialistBank<R> {
    specialists: Vec<DraftLayer<R>>,
    span: Span,
    depth: usize,
    model: ModelConfig,
}

impl<R: Real> SpecialistBank<R> {
    pub fn new(
        specialists: Vec<DraftLayer<R>>,
        span: Span,
        depth: usize,
        model: ModelConfig,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("bank depth must be ≥ 1".into()));
        }
        let m = span.specialists_for(depth);
        if specialists.len() != m {
            return Err(Error::Config(format!(
                "bank with {} positions per specialist over depth {depth} needs {m} specialists, got {}",
                span,
                specialists.len()
            )));
        }
        for s in &specialists {
            let reference = DraftLayer::<R>::init(
                model.d_model,
                model.ffn_hidden(),
                &mut ChaCha8Rng::seed_from_u64(0),
            );
            for ((name, a), (_, b)) in s.named("").iter().zip(reference.named("")) {
                if a.shape() != b.shape() {
                    return Err(Error::Format(format!(
                        "specialist tensor {name} has shape {:?}, expected {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
            }
        }
        Ok(SpecialistBank {
            specialists,
            span,
            depth,
            model,
        })
    }

    /// Independently initialised specialists.
    pub fn init(model: &ModelConfig, span: Span, depth: usize, seed: u64) -> Result<Self> {
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = span.specialists_for(depth);
        let layers = (0..m)
            .map(|_| DraftLayer::init(model.d_model, model.ffn_hidden(), &mut rng))
            .collect();
        Self::new(layers, span, depth, model.clone())
    }

    /// Every specialist starts as a copy of `layer`.
    pub fn replicate(layer: &DraftLayer<R>, model: &ModelConfig, span: Span, depth: usize) -> Result<Self> {
        let m = span.specialists_for(depth);
        Self::new(vec![layer.clone(); m], span, depth, model.clone())
    }

    pub fn len(&self) -> usize {
        self.specialists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specialists.is_empty()
    }

    pub fn span(&self) -> Span {
        self.span
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    /// 1-based specialist for a 0-based draft position. Positions past the
    /// bank's depth stay with the last specialist.
    pub fn route(&self, position: usize) -> usize {
        let j = match self.span {
            Span::Finite(n) => (position + 1).div_ceil(n),
            Span::Infinite => 1,
        };
        j.min(self.specialists.len())
    }

    /// Specialist `j` (1-based).
    pub fn specialist(&self, j: usize) -> &DraftLayer<R> {
        &self.specialists[j - 1]
    }

    pub fn specialists(&self) -> &[DraftLayer<R>] {
        &self.specialists
    }

    pub fn specialists_mut(&mut self) -> &mut [DraftLayer<R>] {
        &mut self.specialists
    }

    pub fn per_specialist_params(&self) -> Vec<usize> {
        self.specialists.iter().map(DraftLayer::param_count).collect()
    }

    pub fn total_params(&self) -> usize {
        self.per_specialist_params().iter().sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<R>)> {
        self.specialists
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.named(&format!("specialists.{}.", i + 1)))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<R>> {
        self.specialists
            .iter_mut()
            .flat_map(|s| s.tensors_mut())
            .collect()
    }

    pub fn header(&self) -> serde_json::Value {
        json!({
            "kind": BANK_KIND,
            "n": self.span,
            "m": self.specialists.len(),
            "L": self.depth,
            "bias": false,
            "config": self.model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(String, Tensor<f32>)> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.cast()))
            .collect();
        checkpoint::write(path, &self.header(), &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(checkpoint::read(path)?)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        c.expect_kind(BANK_KIND)?;
        let h = &c.header;
        let span: Span = serde_json::from_value(h["n"].clone())?;
        let depth = h["L"]
            .as_u64()
            .ok_or_else(|| Error::Format("bank header lacks L".into()))? as usize;
        let m = h["m"]
            .as_u64()
            .ok_or_else(|| Error::Format("bank header lacks m".into()))? as usize;
        if h["bias"].as_bool() != Some(false) {
            return Err(Error::Format("only bias-free fusion layers are supported".into()));
        }
        let model: ModelConfig = serde_json::from_value(h["config"].clone())?;
        let mut tensors = c.into_map();
        let mut layers = Vec::with_capacity(m);
        for j in 1..=m {
            let mut take = |name: &str| -> Result<Tensor<R>> {
                tensors
                    .remove(name)
                    .map(|t| t.cast())
                    .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
            };
            let prefix = format!("specialists.{j}.");
            let fuse = take(&format!("{prefix}fuse"))?;
            let block = crate::model::Block::from_named(&format!("{prefix}block."), &mut take)?;
            layers.push(DraftLayer { fuse, block });
        }
        Self::new(layers, span, depth, model)
    }
}
