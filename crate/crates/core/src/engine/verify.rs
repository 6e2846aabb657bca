//! Acceptance walks over a drafted tree. Slots index the tree with the
//! verified context tip at slot 0 and draft node `u` at slot `u + 1`.

use crate::model::{sample_from_probs, SamplerRng};
use crate::{Error, Result};

/// `min(1, p(x) / q(x))`.
pub fn accept_probability(p: &[f64], q: &[f64], x: usize) -> Result<f64> {
    let qx = q.get(x).copied().unwrap_or(0.0);
    if qx <= 0.0 {
        return Err(Error::Contract(format!(
            "drafted token {x} has zero draft probability"
        )));
    }
    Ok((p[x] / qx).min(1.0))
}

/// `normalize(max(0, p − q))`. Falls back to `p` when the difference has
/// no mass.
pub fn residual(p: &[f64], q: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| (a - b).max(0.0)).collect();
    let z: f64 = r.iter().sum();
    if z > 0.0 {
        r.into_iter().map(|v| v / z).collect()
    } else {
        p.to_vec()
    }
}

/// Greedy walk: from each slot follow the child whose token equals the
/// target argmax there. Returns the accepted node path and the bonus token
/// (the argmax at the last accepted slot).
pub fn greedy_walk(children: &[Vec<usize>], tokens: &[u32], argmax: &[u32]) -> (Vec<usize>, u32) {
    let mut path = Vec::new();
    let mut slot = 0;
    loop {
        let want = argmax[slot];
        match children[slot].iter().find(|&&c| tokens[c] == want) {
            Some(&c) => {
                path.push(c);
                slot = c + 1;
            }
            None => return (path, want),
        }
    }
}

/// Recursive rejection walk. `p[slot]` is the target distribution at a
/// slot and `q[slot]` the draft distribution its children were drawn from
/// (without replacement, in child order). Each child is accepted with
/// `min(1, p'(x)/q'(x))`; after a rejection `p' ← normalize(max(0, p' − q'))`
/// and `x` is removed from `q'`. When every child is rejected the bonus is
/// drawn from the final `p'`.
pub fn stochastic_walk(
    children: &[Vec<usize>],
    tokens: &[u32],
    p: &[Vec<f64>],
    q: &[Option<Vec<f64>>],
    rng: &mut SamplerRng,
) -> Result<(Vec<usize>, u32)> {
    let mut path = Vec::new();
    let mut slot = 0;
    'walk: loop {
        let mut pp = p[slot].clone();
        if let Some(q0) = &q[slot] {
            let mut qq = q0.clone();
            for &c in &children[slot] {
                let x = tokens[c] as usize;
                let a = accept_probability(&pp, &qq, x)?;
                if rng.uniform() < a {
                    path.push(c);
                    slot = c + 1;
                    continue 'walk;
                }
                pp = residual(&pp, &qq);
                qq[x] = 0.0;
                let z: f64 = qq.iter().sum();
                if z <= 0.0 {
                    break;
                }
                qq.iter_mut().for_each(|v| *v /= z);
            }
        }
        return Ok((path, sample_from_probs(&pp, rng) as u32));
    }
}
