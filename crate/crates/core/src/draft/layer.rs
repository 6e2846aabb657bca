use rand_chacha::ChaCha8Rng;

use crate::model::{init_block, Block, BlockVars, LayerCache, TargetModel};
use crate::tensor::{kernels, Graph, KeyLists, Real, Tensor, Var};
use crate::{Error, Result};

/// One draft layer: a bias-free fusion `[x; f]·W_fuse` (`2d → d`) feeding a
/// single transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftLayer<R> {
    pub fuse: Tensor<R>,
    pub block: Block<R>,
}

impl<R: Real> DraftLayer<R> {
    pub fn init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        DraftLayer {
            fuse: crate::model::normal_tensor(&[2 * d, d], 1.0 / (2.0 * d as f64).sqrt(), rng),
            block: init_block(d, hidden, 1, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.fuse.shape()[1]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<R>)> {
        let mut out = vec![(format!("{prefix}fuse"), &self.fuse)];
        out.extend(self.block.named(&format!("{prefix}block.")));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut out = vec![&mut self.fuse];
        out.extend(self.block.tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.fuse.numel() + self.block.param_count()
    }

    pub fn register(&self, g: &mut Graph<R>) -> DraftVars {
        DraftVars {
            fuse: g.param(self.fuse.clone()),
            block: self.block.register(g, true),
        }
    }

    /// `[emb_i; feat_i]·W_fuse` for every row.
    pub fn fuse_rows(&self, emb: &[R], feats: &[R]) -> Result<Vec<R>> {
        let d = self.d_model();
        if emb.len() != feats.len() || emb.len() % d != 0 {
            return Err(Error::dim("draft fuse", &[emb.len() / d, d], &[feats.len()]));
        }
        let n = emb.len() / d;
        let mut cat = Vec::with_capacity(2 * n * d);
        for i in 0..n {
            cat.extend_from_slice(&emb[i * d..(i + 1) * d]);
            cat.extend_from_slice(&feats[i * d..(i + 1) * d]);
        }
        let mut out = vec![R::zero(); n * d];
        kernels::matmul(&cat, self.fuse.data(), n, 2 * d, d, &mut out);
        Ok(out)
    }

    /// Keys and values this layer would cache for the given pairs.
    pub fn key_values(
        &self,
        emb: &[R],
        feats: &[R],
        positions: &[usize],
        n_heads: usize,
        eps: R,
    ) -> Result<(Vec<R>, Vec<R>)> {
        let x = self.fuse_rows(emb, feats)?;
        Ok(self.block.key_values(&x, positions, n_heads, eps))
    }
}

/// A [`DraftLayer`]'s parameters registered on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct DraftVars {
    pub fuse: Var,
    pub block: BlockVars,
}

impl DraftVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.fuse];
        v.extend(self.block.all());
        v
    }

    pub fn fuse<R: Real>(&self, g: &mut Graph<R>, emb: Var, feats: Var) -> Result<Var> {
        let cat = g.concat_cols(emb, feats)?;
        g.matmul(cat, self.fuse)
    }
}

/// Next-token logits and output features of a draft forward.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftOutput<R> {
    pub logits: Tensor<R>,
    pub features: Tensor<R>,
}

impl<R: Real> DraftOutput<R> {
    /// `softmax(logits_row / temperature)` in double precision.
    pub fn distribution(&self, row: usize, temperature: f64) -> Result<Vec<f64>> {
        let l: Vec<f64> = self.logits.row(row).iter().map(|v| v.f64()).collect();
        crate::tensor::softmax(&l, temperature)
    }
}

/// Run `layer` over new pairs `(tokens[i], feats[i])` at `positions`,
/// appending their keys and values to `cache`. `keys` list the admissible
/// cache rows (after the append) per pair: the verified prefix plus the
/// pair's draft ancestors. The target's embedding table and LM head are
/// used frozen.
#[allow(clippy::too_many_arguments)]
pub fn draft_forward<R: Real>(
    layer: &DraftLayer<R>,
    target: &TargetModel<R>,
    tokens: &[u32],
    feats: &[R],
    positions: &[usize],
    keys: &KeyLists,
    cache: &mut LayerCache<R>,
) -> Result<DraftOutput<R>> {
    let d = target.config.d_model;
    let n = tokens.len();
    if feats.len() != n * d || layer.d_model() != d {
        return Err(Error::dim("draft_forward", &[n, d], &[feats.len() / d.max(1), layer.d_model()]));
    }
    if positions.len() != n || keys.len() != n {
        return Err(Error::dim("draft_forward", &[n], &[positions.len(), keys.len()]));
    }
    if keys.max_key().is_some_and(|k| k as usize >= cache.len() + n) {
        return Err(Error::Contract("draft key list reaches past the cache".into()));
    }
    let emb = target.embed_rows(tokens)?;
    let mut x = layer.fuse_rows(&emb, feats)?;
    layer
        .block
        .forward_cached(&mut x, positions, cache, keys, target.config.n_heads, target.eps());
    let logits = target.head(&x);
    Ok(DraftOutput {
        logits: Tensor::new(vec![n, target.config.vocab_size], logits)?,
        features: Tensor::new(vec![n, d], x)?,
    })
}
