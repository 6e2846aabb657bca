use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use super::checkpoint::{self, Container};
use super::{KvCache, LayerCache, ModelConfig};
use crate::tensor::{kernels, Graph, KeyLists, Real, Tensor, Var};
use crate::{Error, Result};

/// Pre-norm transformer block: RMS-normed rotary attention followed by an
/// RMS-normed SiLU-gated feed-forward, both residual. Bias-free.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<R> {
    pub attn_norm: Tensor<R>,
    pub wq: Tensor<R>,
    pub wk: Tensor<R>,
    pub wv: Tensor<R>,
    pub wo: Tensor<R>,
    pub ffn_norm: Tensor<R>,
    pub w_gate: Tensor<R>,
    pub w_up: Tensor<R>,
    pub w_down: Tensor<R>,
}

pub(crate) fn normal_tensor<R: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<R> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| R::of(dist.sample(rng)))
}

/// Randomly initialised block. `depth_scale` shrinks the residual output
/// projections (use the number of stacked blocks).
pub fn init_block<R: Real>(
    d: usize,
    hidden: usize,
    depth_scale: usize,
    rng: &mut ChaCha8Rng,
) -> Block<R> {
    let s_in = 1.0 / (d as f64).sqrt();
    let s_res = s_in / (2.0 * depth_scale as f64).sqrt();
    Block {
        attn_norm: Tensor::from_fn(&[d], |_| R::one()),
        wq: normal_tensor(&[d, d], s_in, rng),
        wk: normal_tensor(&[d, d], s_in, rng),
        wv: normal_tensor(&[d, d], s_in, rng),
        wo: normal_tensor(&[d, d], s_res, rng),
        ffn_norm: Tensor::from_fn(&[d], |_| R::one()),
        w_gate: normal_tensor(&[d, hidden], s_in, rng),
        w_up: normal_tensor(&[d, hidden], s_in, rng),
        w_down: normal_tensor(&[hidden, d], s_res / (hidden as f64 / d as f64).sqrt(), rng),
    }
}

const BLOCK_FIELDS: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
];

fn mm<R: Real>(x: &[R], w: &Tensor<R>, n: usize) -> Vec<R> {
    let (k, p) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![R::zero(); n * p];
    kernels::matmul(x, w.data(), n, k, p, &mut out);
    out
}

impl<R: Real> Block<R> {
    fn fields(&self) -> [&Tensor<R>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<R>)> {
        BLOCK_FIELDS
            .iter()
            .zip(self.fields())
            .map(|(n, t)| (format!("{prefix}{n}"), t))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<R>> {
        vec![
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    pub(crate) fn from_named(
        prefix: &str,
        take: &mut impl FnMut(&str) -> Result<Tensor<R>>,
    ) -> Result<Self> {
        let mut t = |n: &str| take(&format!("{prefix}{n}"));
        Ok(Block {
            attn_norm: t("attn_norm")?,
            wq: t("wq")?,
            wk: t("wk")?,
            wv: t("wv")?,
            wo: t("wo")?,
            ffn_norm: t("ffn_norm")?,
            w_gate: t("w_gate")?,
            w_up: t("w_up")?,
            w_down: t("w_down")?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.fields().iter().map(|t| t.numel()).sum()
    }

    pub fn register(&self, g: &mut Graph<R>, trainable: bool) -> BlockVars {
        let mut reg = |t: &Tensor<R>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BlockVars {
            attn_norm: reg(&self.attn_norm),
            wq: reg(&self.wq),
            wk: reg(&self.wk),
            wv: reg(&self.wv),
            wo: reg(&self.wo),
            ffn_norm: reg(&self.ffn_norm),
            w_gate: reg(&self.w_gate),
            w_up: reg(&self.w_up),
            w_down: reg(&self.w_down),
        }
    }

    /// Rotary keys and values for `n` residual rows.
    pub(crate) fn key_values(
        &self,
        x: &[R],
        positions: &[usize],
        n_heads: usize,
        eps: R,
    ) -> (Vec<R>, Vec<R>) {
        let d = self.wq.shape()[0];
        let n = positions.len();
        let mut h = vec![R::zero(); n * d];
        let mut inv = vec![R::zero(); n];
        kernels::rms_norm(x, self.attn_norm.data(), d, eps, &mut h, &mut inv);
        let mut k = mm(&h, &self.wk, n);
        let v = mm(&h, &self.wv, n);
        kernels::rope(&mut k, d, n_heads, positions, false);
        (k, v)
    }

    /// Run `n` residual rows through the block, appending their keys and
    /// values to `cache` first. `keys` index rows of the cache after the
    /// append.
    pub(crate) fn forward_cached(
        &self,
        x: &mut [R],
        positions: &[usize],
        cache: &mut LayerCache<R>,
        keys: &KeyLists,
        n_heads: usize,
        eps: R,
    ) {
        let d = self.wq.shape()[0];
        let n = positions.len();
        let mut h = vec![R::zero(); n * d];
        let mut inv = vec![R::zero(); n];
        kernels::rms_norm(x, self.attn_norm.data(), d, eps, &mut h, &mut inv);
        let mut q = mm(&h, &self.wq, n);
        let mut k = mm(&h, &self.wk, n);
        let v = mm(&h, &self.wv, n);
        kernels::rope(&mut q, d, n_heads, positions, false);
        kernels::rope(&mut k, d, n_heads, positions, false);
        cache.append(&k, &v);
        let mut a = vec![R::zero(); n * d];
        kernels::attention(&q, &cache.k, &cache.v, d, n_heads, keys, &mut a, None);
        let ao = mm(&a, &self.wo, n);
        x.iter_mut().zip(&ao).for_each(|(r, &o)| *r += o);
        self.feed_forward(x, n, eps);
    }

    fn feed_forward(&self, x: &mut [R], n: usize, eps: R) {
        let d = self.wq.shape()[0];
        let mut h = vec![R::zero(); n * d];
        let mut inv = vec![R::zero(); n];
        kernels::rms_norm(x, self.ffn_norm.data(), d, eps, &mut h, &mut inv);
        let gate = mm(&h, &self.w_gate, n);
        let up = mm(&h, &self.w_up, n);
        let act: Vec<R> = gate
            .iter()
            .zip(&up)
            .map(|(&a, &b)| kernels::silu(a) * b)
            .collect();
        let down = mm(&act, &self.w_down, n);
        x.iter_mut().zip(&down).for_each(|(r, &o)| *r += o);
    }
}

/// A [`Block`]'s parameters registered on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl BlockVars {
    pub fn all(&self) -> [Var; 9] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ffn_norm,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }

    pub fn qkv<R: Real>(
        &self,
        g: &mut Graph<R>,
        x: Var,
        positions: &[usize],
        n_heads: usize,
        eps: R,
    ) -> Result<(Var, Var, Var)> {
        let h = g.rms_norm(x, self.attn_norm, eps)?;
        let q = g.matmul(h, self.wq)?;
        let q = g.rope(q, positions, n_heads)?;
        let k = g.matmul(h, self.wk)?;
        let k = g.rope(k, positions, n_heads)?;
        let v = g.matmul(h, self.wv)?;
        Ok((q, k, v))
    }

    pub fn kv<R: Real>(
        &self,
        g: &mut Graph<R>,
        x: Var,
        positions: &[usize],
        n_heads: usize,
        eps: R,
    ) -> Result<(Var, Var)> {
        let h = g.rms_norm(x, self.attn_norm, eps)?;
        let k = g.matmul(h, self.wk)?;
        let k = g.rope(k, positions, n_heads)?;
        let v = g.matmul(h, self.wv)?;
        Ok((k, v))
    }

    /// Output projection, attention residual and the feed-forward residual.
    pub fn finish<R: Real>(&self, g: &mut Graph<R>, x: Var, attn: Var, eps: R) -> Result<Var> {
        let ao = g.matmul(attn, self.wo)?;
        let x = g.add(x, ao)?;
        let h = g.rms_norm(x, self.ffn_norm, eps)?;
        let gate = g.matmul(h, self.w_gate)?;
        let gate = g.silu(gate);
        let up = g.matmul(h, self.w_up)?;
        let act = g.mul(gate, up)?;
        let down = g.matmul(act, self.w_down)?;
        g.add(x, down)
    }

    /// Plain causal self-attention block over one sequence.
    pub fn forward_causal<R: Real>(
        &self,
        g: &mut Graph<R>,
        x: Var,
        positions: &[usize],
        keys: Rc<KeyLists>,
        n_heads: usize,
        eps: R,
    ) -> Result<Var> {
        let (q, k, v) = self.qkv(g, x, positions, n_heads, eps)?;
        let a = g.attention(q, k, v, n_heads, keys)?;
        self.finish(g, x, a, eps)
    }
}

/// Per-position logits and the final-norm features that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<R> {
    pub logits: Tensor<R>,
    pub features: Tensor<R>,
}

/// Decoder-only byte-level transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetModel<R> {
    pub config: ModelConfig,
    pub embed: Tensor<R>,
    pub blocks: Vec<Block<R>>,
    pub final_norm: Tensor<R>,
    pub lm_head: Tensor<R>,
}

pub const TARGET_KIND: &str = "target";

impl<R: Real> TargetModel<R> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d) = (config.vocab_size, config.d_model);
        let embed = normal_tensor(&[v, d], 1.0, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| init_block(d, config.ffn_hidden(), config.n_layers, &mut rng))
            .collect();
        let lm_head = normal_tensor(&[d, v], 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(TargetModel {
            final_norm: Tensor::from_fn(&[d], |_| R::one()),
            config,
            embed,
            blocks,
            lm_head,
        })
    }

    pub fn eps(&self) -> R {
        R::of(self.config.rms_norm_epsilon)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<R>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("blocks.{i}.")));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn new_cache(&self) -> KvCache<R> {
        KvCache::new(self.config.n_layers, self.config.d_model)
    }

    pub fn embed_rows(&self, tokens: &[u32]) -> Result<Vec<R>> {
        let d = self.config.d_model;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Contract(format!("token {t} outside vocabulary")));
            }
            x.extend_from_slice(self.embed.row(t as usize));
        }
        Ok(x)
    }

    /// LM head applied to feature rows.
    pub fn head(&self, features: &[R]) -> Vec<R> {
        let n = features.len() / self.config.d_model;
        mm(features, &self.lm_head, n)
    }

    /// Logits and features for `tokens`. With a cache only the new positions
    /// are computed and their keys/values appended; without one the whole
    /// sequence is processed from position 0.
    pub fn forward_with_features(
        &self,
        tokens: &[u32],
        cache: Option<&mut KvCache<R>>,
    ) -> Result<ForwardOutput<R>> {
        let mut scratch;
        let cache = match cache {
            Some(c) => c,
            None => {
                scratch = self.new_cache();
                &mut scratch
            }
        };
        let start = cache.len();
        if start + tokens.len() > self.config.max_seq_len {
            return Err(Error::Capacity {
                requested: start + tokens.len(),
                capacity: self.config.max_seq_len,
            });
        }
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let keys = KeyLists::causal(start, tokens.len());
        self.forward_rows(tokens, &positions, &keys, cache)
    }

    /// General cached forward: each new row gets an explicit position and an
    /// explicit list of admissible cache rows (indices after the append).
    pub fn forward_rows(
        &self,
        tokens: &[u32],
        positions: &[usize],
        keys: &KeyLists,
        cache: &mut KvCache<R>,
    ) -> Result<ForwardOutput<R>> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let n = tokens.len();
        if positions.len() != n || keys.len() != n {
            return Err(Error::dim("forward_rows", &[n], &[positions.len(), keys.len()]));
        }
        if let Some(&p) = positions.iter().max() {
            if p >= self.config.max_seq_len {
                return Err(Error::Capacity {
                    requested: p + 1,
                    capacity: self.config.max_seq_len,
                });
            }
        }
        if keys.max_key().is_some_and(|k| k as usize >= cache.len() + n) {
            return Err(Error::Contract("key list reaches past the cache".into()));
        }
        let eps = self.eps();
        let mut x = self.embed_rows(tokens)?;
        for (b, lc) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            b.forward_cached(&mut x, positions, lc, keys, self.config.n_heads, eps);
        }
        let mut feats = vec![R::zero(); n * d];
        let mut inv = vec![R::zero(); n];
        kernels::rms_norm(&x, self.final_norm.data(), d, eps, &mut feats, &mut inv);
        let logits = self.head(&feats);
        Ok(ForwardOutput {
            logits: Tensor::new(vec![n, v], logits)?,
            features: Tensor::new(vec![n, d], feats)?,
        })
    }

    pub fn register(&self, g: &mut Graph<R>, trainable: bool) -> TargetVars {
        let mut reg = |t: &Tensor<R>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let embed = reg(&self.embed);
        let blocks = self.blocks.iter().map(|b| b.register(g, trainable)).collect();
        let final_norm = if trainable {
            g.param(self.final_norm.clone())
        } else {
            g.constant(self.final_norm.clone())
        };
        let lm_head = if trainable {
            g.param(self.lm_head.clone())
        } else {
            g.constant(self.lm_head.clone())
        };
        TargetVars {
            embed,
            blocks,
            final_norm,
            lm_head,
            n_heads: self.config.n_heads,
            eps: self.config.rms_norm_epsilon,
        }
    }

    pub fn header(&self) -> serde_json::Value {
        json!({ "kind": TARGET_KIND, "config": self.config })
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
        let c = checkpoint::read(path)?;
        Self::from_container(c)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        c.expect_kind(TARGET_KIND)?;
        let config: ModelConfig = serde_json::from_value(c.header["config"].clone())?;
        config.validate()?;
        let mut tensors = c.into_map();
        let mut take = |name: &str| -> Result<Tensor<R>> {
            tensors
                .remove(name)
                .map(|t| t.cast())
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let embed = take("embed")?;
        let blocks = (0..config.n_layers)
            .map(|i| Block::from_named(&format!("blocks.{i}."), &mut take))
            .collect::<Result<Vec<_>>>()?;
        let model = TargetModel {
            final_norm: take("final_norm")?,
            lm_head: take("lm_head")?,
            config,
            embed,
            blocks,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let reference = TargetModel::<R>::init(self.config.clone(), 0)?;
        for ((name, a), (_, b)) in self.named_tensors().iter().zip(reference.named_tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// A [`TargetModel`]'s parameters registered on a [`Graph`].
#[derive(Clone, Debug)]
pub struct TargetVars {
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub lm_head: Var,
    n_heads: usize,
    eps: f64,
}

impl TargetVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for b in &self.blocks {
            out.extend(b.all());
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }

    /// Taped full-sequence forward from position 0. Returns `(logits, features)`.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, tokens: &[u32]) -> Result<(Var, Var)> {
        let n = tokens.len();
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let keys = Rc::new(KeyLists::causal(0, n));
        let eps = R::of(self.eps);
        let mut x = g.gather_rows(self.embed, &idx)?;
        for b in &self.blocks {
            x = b.forward_causal(g, x, &positions, keys.clone(), self.n_heads, eps)?;
        }
        let feats = g.rms_norm(x, self.final_norm, eps)?;
        let logits = g.matmul(feats, self.lm_head)?;
        Ok((logits, feats))
    }
}
