//! Slice kernels shared by the tape and the cached inference paths.
//!
//! Every kernel computes each output row with an accumulation order that
//! depends only on that row's inputs, never on how many rows are processed
//! together. Batched verification therefore reproduces one-token decoding
//! bit for bit.

use super::Real;

/// `out = a · b` with `a: [m×k]`, `b: [k×p]`.
pub fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, p: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        orow.fill(R::zero());
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * p..(t + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `acc += aᵀ · g` with `a: [m×k]`, `g: [m×p]`, `acc: [k×p]`.
pub fn matmul_tn_acc<R: Real>(a: &[R], g: &[R], m: usize, k: usize, p: usize, acc: &mut [R]) {
    debug_assert_eq!(acc.len(), k * p);
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a[i * k + t];
            let arow = &mut acc[t * p..(t + 1) * p];
            for (o, &gv) in arow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `acc += g · bᵀ` with `g: [m×p]`, `b: [k×p]`, `acc: [m×k]`.
pub fn matmul_nt_acc<R: Real>(g: &[R], b: &[R], m: usize, p: usize, k: usize, acc: &mut [R]) {
    let bt = transpose(b, k, p);
    let mut tmp = vec![R::zero(); m * k];
    matmul(g, &bt, m, p, k, &mut tmp);
    for (a, t) in acc.iter_mut().zip(tmp) {
        *a += t;
    }
}

pub fn transpose<R: Real>(x: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Row-wise RMS normalisation. Writes `1/rms` per row into `inv_rms`.
pub fn rms_norm<R: Real>(
    x: &[R],
    gain: &[R],
    d: usize,
    eps: R,
    out: &mut [R],
    inv_rms: &mut [R],
) {
    let n = x.len() / d;
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mut ss = R::zero();
        for &v in row {
            ss += v * v;
        }
        let r = R::one() / (ss / R::of(d as f64) + eps).sqrt();
        inv_rms[i] = r;
        for ((o, &v), &g) in out[i * d..(i + 1) * d].iter_mut().zip(row).zip(gain) {
            *o = v * r * g;
        }
    }
}

const ROPE_BASE: f64 = 10_000.0;

/// Rotary position encoding applied in place to every head of each row.
/// `inverse` applies the transposed rotation (used by the backward pass).
pub fn rope<R: Real>(x: &mut [R], d: usize, n_heads: usize, positions: &[usize], inverse: bool) {
    let hd = d / n_heads;
    let half = hd / 2;
    for (row, &pos) in x.chunks_mut(d).zip(positions) {
        for i in 0..half {
            let freq = ROPE_BASE.powf(-2.0 * i as f64 / hd as f64);
            let angle = pos as f64 * freq;
            let (s, c) = angle.sin_cos();
            let (s, c) = (R::of(if inverse { -s } else { s }), R::of(c));
            for h in 0..n_heads {
                let a = h * hd + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * c - x1 * s;
                row[a + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Compressed per-query lists of admissible key rows.
///
/// Keys are visited in list order, so callers keep each list ascending in
/// position to make batched and incremental attention agree exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyLists {
    offsets: Vec<usize>,
    idx: Vec<u32>,
}

impl KeyLists {
    pub fn new() -> Self {
        KeyLists {
            offsets: vec![0],
            idx: Vec::new(),
        }
    }

    /// Causal lists for `n` queries appended after `prefix` cached keys:
    /// query `i` sees keys `0..=prefix + i`.
    pub fn causal(prefix: usize, n: usize) -> Self {
        let mut kl = KeyLists::new();
        for i in 0..n {
            kl.push((0..=(prefix + i) as u32).collect::<Vec<_>>().as_slice());
        }
        kl
    }

    pub fn push(&mut self, keys: &[u32]) {
        self.idx.extend_from_slice(keys);
        self.offsets.push(self.idx.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.idx[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn total(&self) -> usize {
        self.idx.len()
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn max_key(&self) -> Option<u32> {
        self.idx.iter().copied().max()
    }
}

/// Multi-head scaled dot-product attention over explicit key lists.
///
/// `q` has one row per query, `k`/`v` one row per key; rows are `d` wide with
/// heads laid out contiguously. When `probs` is given it receives the
/// attention weights laid out as `[query][head][key-in-list]`.
#[allow(clippy::too_many_arguments)]
pub fn attention<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    d: usize,
    n_heads: usize,
    keys: &KeyLists,
    out: &mut [R],
    mut probs: Option<&mut [R]>,
) {
    let hd = d / n_heads;
    let scale = R::of(1.0 / (hd as f64).sqrt());
    let mut scores: Vec<R> = Vec::new();
    for i in 0..keys.len() {
        let ks = keys.row(i);
        let base = keys.offset(i) * n_heads;
        for h in 0..n_heads {
            let qh = &q[i * d + h * hd..i * d + (h + 1) * hd];
            scores.clear();
            for &j in ks {
                let j = j as usize;
                let kh = &k[j * d + h * hd..j * d + (h + 1) * hd];
                let mut s = R::zero();
                for (&a, &b) in qh.iter().zip(kh) {
                    s += a * b;
                }
                scores.push(s * scale);
            }
            softmax_in_place(&mut scores, R::one());
            let oh = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
            oh.fill(R::zero());
            for (&j, &p) in ks.iter().zip(scores.iter()) {
                let j = j as usize;
                let vh = &v[j * d + h * hd..j * d + (h + 1) * hd];
                for (o, &x) in oh.iter_mut().zip(vh) {
                    *o += p * x;
                }
            }
            if let Some(pr) = probs.as_deref_mut() {
                let off = base + h * ks.len();
                pr[off..off + ks.len()].copy_from_slice(&scores);
            }
        }
    }
}

/// In-place `softmax(x / temperature)` with max subtraction.
pub fn softmax_in_place<R: Real>(x: &mut [R], temperature: R) {
    if x.is_empty() {
        return;
    }
    let mut m = x[0];
    for &v in x.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = R::zero();
    for v in x.iter_mut() {
        *v = ((*v - m) / temperature).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp<R: Real>(x: &[R]) -> R {
    let mut m = R::neg_infinity();
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let mut s = R::zero();
    for &v in x {
        s += (v - m).exp();
    }
    m + s.ln()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<R: Real>(x: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, largest first; ties keep the lower index.
pub fn top_k<R: Real>(x: &[R], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| {
        x[b].partial_cmp(&x[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[inline]
pub fn silu<R: Real>(x: R) -> R {
    x / (R::one() + (-x).exp())
}

#[inline]
pub fn silu_grad<R: Real>(x: R) -> R {
    let s = R::one() / (R::one() + (-x).exp());
    s * (R::one() + x * (R::one() - s))
}

#[inline]
pub fn smooth_l1_elem<R: Real>(e: R, beta: R) -> R {
    let a = e.abs();
    if a < beta {
        R::of(0.5) * e * e / beta
    } else {
        a - R::of(0.5) * beta
    }
}

#[inline]
pub fn smooth_l1_grad<R: Real>(e: R, beta: R) -> R {
    if e.abs() < beta {
        e / beta
    } else {
        e.signum()
    }
}
