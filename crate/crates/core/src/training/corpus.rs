use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::tokenizer::{BOS, BYTE_OFFSET, VOCAB_SIZE};
use crate::{Error, Result};

/// Byte tokens of a text corpus split into a training head and a held-out
/// tail. Neither part carries BOS; windows get one prepended.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<u32>,
    pub heldout: Vec<u32>,
}

impl Corpus {
    pub fn from_text(text: &[u8], heldout_fraction: f64) -> Result<Self> {
        let toks: Vec<u32> = text.iter().map(|&b| b as u32 + BYTE_OFFSET).collect();
        let cut = ((toks.len() as f64) * (1.0 - heldout_fraction)).round() as usize;
        if cut < 2 || toks.len() - cut < 2 {
            return Err(Error::Config(format!(
                "corpus of {} bytes is too small to split",
                toks.len()
            )));
        }
        Ok(Corpus {
            train: toks[..cut].to_vec(),
            heldout: toks[cut..].to_vec(),
        })
    }

    pub fn load(path: &Path, heldout_fraction: f64) -> Result<Self> {
        let text = std::fs::read(path)?;
        Self::from_text(&text, heldout_fraction)
    }

    /// `[BOS] + stream[start .. start + len − 1]`.
    pub fn window(stream: &[u32], start: usize, len: usize) -> Vec<u32> {
        let mut w = Vec::with_capacity(len);
        w.push(BOS);
        w.extend_from_slice(&stream[start..(start + len - 1).min(stream.len())]);
        w
    }

    /// A window of `len` tokens at a uniformly random offset.
    pub fn random_window(stream: &[u32], len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let body = (len - 1).min(stream.len());
        let start = rng.random_range(0..=stream.len() - body);
        Self::window(stream, start, body + 1)
    }

    /// Consecutive windows of at most `len` tokens covering the whole stream.
    pub fn chunks(stream: &[u32], len: usize) -> Vec<Vec<u32>> {
        stream
            .chunks(len - 1)
            .filter(|c| !c.is_empty())
            .map(|c| {
                let mut w = vec![BOS];
                w.extend_from_slice(c);
                w
            })
            .collect()
    }
}

/// Held-out cross entropy (nats per token) of an add-one smoothed unigram
/// model fitted on `train`.
pub fn unigram_cross_entropy(train: &[u32], heldout: &[u32]) -> f64 {
    let mut counts = vec![1.0f64; VOCAB_SIZE];
    for &t in train {
        counts[t as usize] += 1.0;
    }
    let z: f64 = counts.iter().sum();
    let ll: f64 = heldout.iter().map(|&t| (counts[t as usize] / z).ln()).sum();
    -ll / heldout.len() as f64
}
