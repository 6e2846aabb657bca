use std::path::Path;

use serde_json::json;

use super::Corpus;
use crate::model::checkpoint::{self, Container};
use crate::model::TargetModel;
use crate::tensor::{kernels, Real, Tensor};
use crate::{Error, Result};

pub const DISTILLED_KIND: &str = "distilled";

/// One window of corpus tokens with the target's features and its top-K
/// next-token distribution at every position.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledExample<R> {
    pub tokens: Vec<u32>,
    /// `[T × d]` final-norm target features.
    pub features: Tensor<R>,
    /// `[T × K]` teacher ids, most probable first.
    pub topk_ids: Vec<u32>,
    /// `[T × K]` teacher probabilities matching `topk_ids`.
    pub topk_probs: Vec<R>,
}

impl<R: Real> DistilledExample<R> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn k(&self) -> usize {
        self.topk_ids.len() / self.tokens.len().max(1)
    }

    pub fn cast<S: Real>(&self) -> DistilledExample<S> {
        DistilledExample {
            tokens: self.tokens.clone(),
            features: self.features.cast(),
            topk_ids: self.topk_ids.clone(),
            topk_probs: self.topk_probs.iter().map(|v| S::of(v.f64())).collect(),
        }
    }
}

/// A distilled dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Distilled<R> {
    pub k: usize,
    pub d_model: usize,
    pub examples: Vec<DistilledExample<R>>,
}

impl<R: Real> Distilled<R> {
    pub fn positions(&self) -> usize {
        self.examples.iter().map(DistilledExample::len).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": DISTILLED_KIND,
            "k": self.k,
            "d_model": self.d_model,
            "examples": self.examples.len(),
        });
        let mut named: Vec<(String, Tensor<f32>)> = Vec::with_capacity(4 * self.examples.len());
        for (i, e) in self.examples.iter().enumerate() {
            let t = e.len();
            named.push((
                format!("tokens/{i}"),
                Tensor::new(vec![t], e.tokens.iter().map(|&v| v as f32).collect())?,
            ));
            named.push((format!("features/{i}"), e.features.cast()));
            named.push((
                format!("topk_ids/{i}"),
                Tensor::new(vec![t, self.k], e.topk_ids.iter().map(|&v| v as f32).collect())?,
            ));
            named.push((
                format!("topk_probs/{i}"),
                Tensor::new(vec![t, self.k], e.topk_probs.iter().map(|v| v.f64() as f32).collect())?,
            ));
        }
        checkpoint::write(path, &header, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(checkpoint::read(path)?)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        c.expect_kind(DISTILLED_KIND)?;
        let field = |name: &str| {
            c.header[name]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("distilled header lacks {name}")))
        };
        let (k, d, n) = (field("k")?, field("d_model")?, field("examples")?);
        let mut map = c.into_map();
        let mut take = |name: String| {
            map.remove(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let mut examples = Vec::with_capacity(n);
        for i in 0..n {
            let tokens: Vec<u32> = take(format!("tokens/{i}"))?.data().iter().map(|&v| v as u32).collect();
            let features: Tensor<R> = take(format!("features/{i}"))?.cast();
            let ids: Vec<u32> = take(format!("topk_ids/{i}"))?.data().iter().map(|&v| v as u32).collect();
            let probs: Vec<R> = take(format!("topk_probs/{i}"))?.data().iter().map(|&v| R::of(v as f64)).collect();
            let t = tokens.len();
            if features.shape() != [t, d] || ids.len() != t * k || probs.len() != t * k {
                return Err(Error::Format(format!("distilled example {i} has inconsistent shapes")));
            }
            examples.push(DistilledExample {
                tokens,
                features,
                topk_ids: ids,
                topk_probs: probs,
            });
        }
        Ok(Distilled { k, d_model: d, examples })
    }
}

/// Split `stream` into BOS-prefixed windows of at most `window` tokens
/// (never longer than the target's context) and record the target's
/// features and top-`k` teacher distribution at every position.
pub fn distill_corpus<R: Real>(
    target: &TargetModel<R>,
    stream: &[u32],
    k: usize,
    window: usize,
) -> Result<Distilled<R>> {
    let v = target.config.vocab_size;
    if k == 0 || k > v {
        return Err(Error::Config(format!("top-K size {k} must be in 1..={v}")));
    }
    let window = window.min(target.config.max_seq_len);
    if window < 2 {
        return Err(Error::Config("distillation window must be ≥ 2".into()));
    }
    let mut examples = Vec::new();
    for tokens in Corpus::chunks(stream, window) {
        let out = target.forward_with_features(&tokens, None)?;
        let mut ids = Vec::with_capacity(tokens.len() * k);
        let mut probs = Vec::with_capacity(tokens.len() * k);
        for r in 0..tokens.len() {
            let l: Vec<f64> = out.logits.row(r).iter().map(|x| x.f64()).collect();
            let p = crate::tensor::softmax(&l, 1.0)?;
            for i in kernels::top_k(&p, k) {
                ids.push(i as u32);
                probs.push(R::of(p[i]));
            }
        }
        examples.push(DistilledExample {
            tokens,
            features: out.features,
            topk_ids: ids,
            topk_probs: probs,
        });
    }
    Ok(Distilled {
        k,
        d_model: target.config.d_model,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn target() -> TargetModel<f32> {
        TargetModel::init(
            ModelConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                max_seq_len: 16,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    fn stream() -> Vec<u32> {
        b"the cat sat on the mat and the dog sat on the log"
            .iter()
            .map(|&b| b as u32 + 2)
            .collect()
    }

    #[test]
    fn long_streams_are_split_not_truncated() {
        let t = target();
        let d = distill_corpus(&t, &stream(), 5, 64).unwrap();
        assert!(d.examples.iter().all(|e| e.len() <= 16));
        let covered: usize = d.examples.iter().map(|e| e.len() - 1).sum();
        assert_eq!(covered, stream().len());
    }

    #[test]
    fn full_support_sums_to_one() {
        let t = target();
        let d = distill_corpus(&t, &stream(), 258, 16).unwrap();
        for e in &d.examples {
            for row in e.topk_probs.chunks(258) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn features_and_topk_match_fresh_forward() {
        let t = target();
        let d = distill_corpus(&t, &stream(), 10, 16).unwrap();
        for e in &d.examples {
            let out = t.forward_with_features(&e.tokens, None).unwrap();
            for (a, b) in out.features.data().iter().zip(e.features.data()) {
                assert!((a - b).abs() <= 1e-5);
            }
            for r in 0..e.len() {
                let mut p: Vec<(f32, u32)> = out
                    .logits
                    .row(r)
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| (l, i as u32))
                    .collect();
                p.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let want: Vec<u32> = p[..10].iter().map(|x| x.1).collect();
                assert_eq!(&e.topk_ids[r * 10..(r + 1) * 10], &want[..]);
                let probs = &e.topk_probs[r * 10..(r + 1) * 10];
                assert!(probs.windows(2).all(|w| w[0] >= w[1]));
                assert!(probs.iter().sum::<f32>() <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn dataset_round_trip() {
        let t = target();
        let d = distill_corpus(&t, &stream(), 4, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pssc");
        d.save(&p).unwrap();
        let back = Distilled::<f32>::load(&p).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.positions(), d.positions());
    }
}
