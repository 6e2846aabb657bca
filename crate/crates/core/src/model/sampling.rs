use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{kernels, Real};
use crate::{Error, Result};

/// Deterministic sampling state: the ChaCha8 stream cipher used as a
/// counter-based generator. The whole state is the 64-bit seed plus the
/// position in the key stream, so a session can be replayed exactly.
#[derive(Clone, Debug)]
pub struct SamplerRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SamplerRng {
    pub fn new(seed: u64) -> Self {
        SamplerRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `(seed, word position)`.
    pub fn state(&self) -> (u64, u128) {
        (self.seed, self.inner.get_word_pos())
    }

    pub fn from_state(seed: u64, word_pos: u128) -> Self {
        let mut rng = SamplerRng::new(seed);
        rng.inner.set_word_pos(word_pos);
        rng
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

/// Inverse-CDF draw from a probability vector. Falls back to the last
/// non-zero entry when rounding leaves the cumulative sum below `u`.
pub fn sample_from_probs(probs: &[f64], rng: &mut SamplerRng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Temperature 0 is argmax with the lowest-index tie-break; otherwise a draw
/// from `softmax(logits / temperature)`.
pub fn sample_token<R: Real>(logits: &[R], temperature: f64, rng: &mut SamplerRng) -> Result<u32> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    if temperature < 0.0 || temperature.is_nan() {
        return Err(Error::Contract(format!(
            "temperature must be non-negative, got {temperature}"
        )));
    }
    if temperature == 0.0 {
        return Ok(kernels::argmax(logits) as u32);
    }
    let mut p: Vec<f64> = logits.iter().map(|v| v.f64()).collect();
    kernels::softmax_in_place(&mut p, temperature);
    Ok(sample_from_probs(&p, rng) as u32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_examples() {
        let mut rng = SamplerRng::new(0);
        assert_eq!(sample_token(&[1.0f32, 3.0, 2.0], 0.0, &mut rng).unwrap(), 1);
        assert_eq!(sample_token(&[5.0f32, 5.0], 0.0, &mut rng).unwrap(), 0);
        assert!(sample_token(&[f32::INFINITY, 0.0], 0.0, &mut rng).is_err());
        assert!(sample_token(&[0.0f32], -1.0, &mut rng).is_err());
    }

    #[test]
    fn empirical_frequencies_match_softmax() {
        let logits = [0.3f64, -1.2, 1.1];
        let exact = crate::tensor::softmax(&logits, 1.0).unwrap();
        let mut rng = SamplerRng::new(42);
        let mut counts = [0usize; 3];
        let n = 200_000;
        for _ in 0..n {
            counts[sample_token(&logits, 1.0, &mut rng).unwrap() as usize] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&exact)
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn state_replays_stream() {
        let mut a = SamplerRng::new(9);
        a.uniform();
        let (seed, pos) = a.state();
        let mut b = SamplerRng::from_state(seed, pos);
        for _ in 0..10 {
            assert_eq!(a.uniform(), b.uniform());
        }
    }
}
