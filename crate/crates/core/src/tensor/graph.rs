//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients into leaves that require them.
//! Intermediate gradients are scratch space and are discarded after each
//! call, so calling `backward` twice accumulates leaf gradients twice.

use std::rc::Rc;

use super::kernels::{self, KeyLists};
use super::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<R>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        n_heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        keys: Rc<KeyLists>,
        probs: Vec<R>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SoftmaxRows {
        x: Var,
        temperature: R,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<R>,
        weights: Vec<R>,
        probs: Vec<R>,
    },
    TopKCrossEntropy {
        logits: Var,
        ids: Vec<u32>,
        k: usize,
        target: Vec<R>,
        weights: Vec<R>,
        restricted: Vec<R>,
    },
    SmoothL1 {
        a: Var,
        b: Var,
        weights: Vec<R>,
        beta: R,
    },
    Sum(Var),
    LinComb(Vec<(Var, R)>),
}

struct Node<R> {
    value: Tensor<R>,
    grad: Option<Vec<R>>,
    requires_grad: bool,
    op: Op<R>,
}

pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn mat_dims<R: Real>(t: &Tensor<R>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = mat_dims(ta);
        let (k2, p) = mat_dims(tb);
        if k != k2 || tb.shape().len() != 2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![R::zero(); m * p];
        kernels::matmul(ta.data(), tb.data(), m, k, p, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, p], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * s).collect())
            .expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| kernels::silu(x)).collect(),
        )
        .expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(t, Op::Silu(a), rg)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: R) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let (n, d) = mat_dims(tx);
        if tg.numel() != d {
            return Err(Error::dim("rms_norm", tx.shape(), tg.shape()));
        }
        let mut out = vec![R::zero(); n * d];
        let mut inv = vec![R::zero(); n];
        kernels::rms_norm(tx.data(), tg.data(), d, eps, &mut out, &mut inv);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(
            t,
            Op::RmsNorm {
                x,
                gain,
                inv_rms: inv,
            },
            rg,
        ))
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = mat_dims(tx);
        if positions.len() != n || d % (2 * n_heads) != 0 {
            return Err(Error::dim("rope", tx.shape(), &[positions.len(), n_heads]));
        }
        let mut data = tx.data().to_vec();
        kernels::rope(&mut data, d, n_heads, positions, false);
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                n_heads,
            },
            rg,
        ))
    }

    /// Multi-head attention of each query row over its listed key rows.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        keys: Rc<KeyLists>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = mat_dims(tq);
        let (nk, dk) = mat_dims(tk);
        if dk != d || tv.shape() != tk.shape() || keys.len() != nq || d % n_heads != 0 {
            return Err(Error::dim("attention", tq.shape(), tk.shape()));
        }
        if keys.max_key().is_some_and(|m| m as usize >= nk) {
            return Err(Error::Contract("attention key index out of range".into()));
        }
        let mut out = vec![R::zero(); nq * d];
        let mut probs = vec![R::zero(); keys.total() * n_heads];
        kernels::attention(
            tq.data(),
            tk.data(),
            tv.data(),
            d,
            n_heads,
            &keys,
            &mut out,
            Some(&mut probs),
        );
        let t = Tensor::new(vec![nq, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                keys,
                probs,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, da) = mat_dims(ta);
        let (nb, db) = mat_dims(tb);
        if n != nb {
            return Err(Error::dim("concat_cols", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let t = Tensor::new(vec![n, da + db], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != d {
                return Err(Error::dim(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    tp.shape(),
                ));
            }
            n += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let t = Tensor::new(vec![n, d], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = mat_dims(tx);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Contract(format!("row {i} out of range {n}")));
            }
            data.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var, temperature: R) -> Result<Var> {
        if !(temperature > R::zero()) {
            return Err(Error::Contract("softmax temperature must be positive".into()));
        }
        let tx = self.value(x);
        if !tx.all_finite() {
            return Err(Error::Numeric("non-finite softmax input".into()));
        }
        let (_, d) = mat_dims(tx);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            kernels::softmax_in_place(row, temperature);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SoftmaxRows { x, temperature }, rg))
    }

    /// `Σ_i w_i · CE(target_i, softmax(logits_i))` over rows.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor<R>, weights: &[R]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = mat_dims(tl);
        if target.rows() != n || target.cols() != v || weights.len() != n {
            return Err(Error::dim("cross_entropy", tl.shape(), target.shape()));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = R::zero();
        for i in 0..n {
            let row = tl.row(i);
            let lse = kernels::log_sum_exp(row);
            let mut li = R::zero();
            for (&l, &t) in row.iter().zip(target.row(i)) {
                if t != R::zero() {
                    li -= t * (l - lse);
                }
            }
            loss += weights[i] * li;
            kernels::softmax_in_place(&mut probs[i * v..(i + 1) * v], R::one());
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target: target.data().to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Cross entropy restricted to `k` teacher ids per row, with both the
    /// teacher and predicted distributions renormalised over that support.
    pub fn topk_cross_entropy(
        &mut self,
        logits: Var,
        ids: &[u32],
        teacher: &[R],
        k: usize,
        weights: &[R],
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = mat_dims(tl);
        if ids.len() != n * k || teacher.len() != n * k || weights.len() != n {
            return Err(Error::dim("topk_cross_entropy", tl.shape(), &[ids.len(), k]));
        }
        let mut restricted = vec![R::zero(); n * k];
        let mut target = vec![R::zero(); n * k];
        let mut loss = R::zero();
        for i in 0..n {
            let row = tl.row(i);
            let rid = &ids[i * k..(i + 1) * k];
            for (a, &x) in rid.iter().enumerate() {
                if x as usize >= v {
                    return Err(Error::Contract(format!("top-k id {x} outside vocab {v}")));
                }
                if rid[..a].contains(&x) {
                    return Err(Error::Contract(format!("duplicate top-k id {x}")));
                }
            }
            let sel: Vec<R> = rid.iter().map(|&x| row[x as usize]).collect();
            let lse = kernels::log_sum_exp(&sel);
            let ts: R = teacher[i * k..(i + 1) * k].iter().copied().sum();
            if !(ts > R::zero()) {
                return Err(Error::Contract("top-k teacher mass must be positive".into()));
            }
            let mut li = R::zero();
            for a in 0..k {
                let t = teacher[i * k + a] / ts;
                target[i * k + a] = t;
                restricted[i * k + a] = (sel[a] - lse).exp();
                if t != R::zero() {
                    li -= t * (sel[a] - lse);
                }
            }
            loss += weights[i] * li;
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::TopKCrossEntropy {
                logits,
                ids: ids.to_vec(),
                k,
                target,
                weights: weights.to_vec(),
                restricted,
            },
            rg,
        ))
    }

    /// `Σ_i w_i · mean_j smoothL1(a_ij − b_ij)`.
    pub fn smooth_l1(&mut self, a: Var, b: Var, weights: &[R], beta: R) -> Result<Var> {
        self.same_shape("smooth_l1", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, d) = mat_dims(ta);
        if weights.len() != n {
            return Err(Error::dim("smooth_l1", ta.shape(), &[weights.len()]));
        }
        let mut loss = R::zero();
        for i in 0..n {
            let mut s = R::zero();
            for (&x, &y) in ta.row(i).iter().zip(tb.row(i)) {
                s += kernels::smooth_l1_elem(x - y, beta);
            }
            loss += weights[i] * s / R::of(d as f64);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                a,
                b,
                weights: weights.to_vec(),
                beta,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: R = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ c_i · x_i` over scalar terms.
    pub fn lin_comb(&mut self, terms: &[(Var, R)]) -> Result<Var> {
        let mut s = R::zero();
        for &(v, c) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::dim("lin_comb", t.shape(), &[]));
            }
            s += c * t.item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::scalar(s), Op::LinComb(terms.to_vec()), rg))
    }

    /// Populate gradients of every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [R])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![R::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = mat_dims(val(*a));
                let p = val(*b).cols();
                acc(*a, &mut |da| kernels::matmul_nt_acc(g, val(*b).data(), m, p, k, da));
                acc(*b, &mut |db| kernels::matmul_tn_acc(val(*a).data(), g, m, k, p, db));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |da| {
                    for ((x, &gy), &bv) in da.iter_mut().zip(g).zip(tb) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |db| {
                    for ((x, &gy), &av) in db.iter_mut().zip(g).zip(ta) {
                        *x += gy * av;
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s));
            }
            Op::Silu(a) => {
                let ta = val(*a).data();
                acc(*a, &mut |da| {
                    for ((x, &gy), &xv) in da.iter_mut().zip(g).zip(ta) {
                        *x += gy * kernels::silu_grad(xv);
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let tx = val(*x);
                let (n, d) = mat_dims(tx);
                let gn = val(*gain).data();
                let dd = R::of(d as f64);
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        let r = inv_rms[i];
                        let xr = tx.row(i);
                        let gr = &g[i * d..(i + 1) * d];
                        let mut dot = R::zero();
                        for j in 0..d {
                            dot += gr[j] * gn[j] * xr[j];
                        }
                        let c = r * r * r * dot / dd;
                        for j in 0..d {
                            dx[i * d + j] += r * gn[j] * gr[j] - c * xr[j];
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for i in 0..n {
                        let r = inv_rms[i];
                        let xr = tx.row(i);
                        for j in 0..d {
                            dg[j] += g[i * d + j] * xr[j] * r;
                        }
                    }
                });
            }
            Op::Rope {
                x,
                positions,
                n_heads,
            } => {
                let d = val(*x).cols();
                acc(*x, &mut |dx| {
                    let mut t = g.to_vec();
                    kernels::rope(&mut t, d, *n_heads, positions, true);
                    dx.iter_mut().zip(t).for_each(|(a, b)| *a += b);
                });
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                keys,
                probs,
            } => {
                let (tq, tk, tv) = (val(*q).data(), val(*k).data(), val(*v).data());
                let d = val(*q).cols();
                let hd = d / n_heads;
                let scale = R::of(1.0 / (hd as f64).sqrt());
                let mut dq = vec![R::zero(); tq.len()];
                let mut dk = vec![R::zero(); tk.len()];
                let mut dv = vec![R::zero(); tv.len()];
                let mut dp: Vec<R> = Vec::new();
                for i in 0..keys.len() {
                    let ks = keys.row(i);
                    let base = keys.offset(i) * n_heads;
                    for h in 0..*n_heads {
                        let p = &probs[base + h * ks.len()..base + (h + 1) * ks.len()];
                        let go = &g[i * d + h * hd..i * d + (h + 1) * hd];
                        dp.clear();
                        for (&j, &pj) in ks.iter().zip(p) {
                            let j = j as usize;
                            let vh = &tv[j * d + h * hd..j * d + (h + 1) * hd];
                            let mut s = R::zero();
                            for (&a, &b) in go.iter().zip(vh) {
                                s += a * b;
                            }
                            dp.push(s);
                            let dvh = &mut dv[j * d + h * hd..j * d + (h + 1) * hd];
                            for (o, &a) in dvh.iter_mut().zip(go) {
                                *o += pj * a;
                            }
                        }
                        let mean: R = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                        let qh = &tq[i * d + h * hd..i * d + (h + 1) * hd];
                        for ((&j, &pj), &dpj) in ks.iter().zip(p).zip(&dp) {
                            let j = j as usize;
                            let ds = pj * (dpj - mean) * scale;
                            let kh = &tk[j * d + h * hd..j * d + (h + 1) * hd];
                            let dqh = &mut dq[i * d + h * hd..i * d + (h + 1) * hd];
                            for (o, &a) in dqh.iter_mut().zip(kh) {
                                *o += ds * a;
                            }
                            let dkh = &mut dk[j * d + h * hd..j * d + (h + 1) * hd];
                            for (o, &a) in dkh.iter_mut().zip(qh) {
                                *o += ds * a;
                            }
                        }
                    }
                }
                acc(*q, &mut |x| x.iter_mut().zip(&dq).for_each(|(a, &b)| *a += b));
                acc(*k, &mut |x| x.iter_mut().zip(&dk).for_each(|(a, &b)| *a += b));
                acc(*v, &mut |x| x.iter_mut().zip(&dv).for_each(|(a, &b)| *a += b));
            }
            Op::ConcatCols(a, b) => {
                let (n, da) = mat_dims(val(*a));
                let db = val(*b).cols();
                let w = da + db;
                acc(*a, &mut |x| {
                    for i in 0..n {
                        for j in 0..da {
                            x[i * da + j] += g[i * w + j];
                        }
                    }
                });
                acc(*b, &mut |x| {
                    for i in 0..n {
                        for j in 0..db {
                            x[i * db + j] += g[i * w + da + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    let gs = &g[off..off + len];
                    acc(p, &mut |x| x.iter_mut().zip(gs).for_each(|(a, &b)| *a += b));
                    off += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let d = val(*x).cols();
                acc(*x, &mut |dx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            dx[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::SoftmaxRows { x, temperature } => {
                let y = nodes[idx].value.data();
                let d = val(*x).cols();
                acc(*x, &mut |dx| {
                    for (r, yr) in y.chunks(d).enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] += yr[j] * (gr[j] - dot) / *temperature;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                target,
                weights,
                probs,
            } => {
                let v = val(*logits).cols();
                let g0 = g[0];
                acc(*logits, &mut |dl| {
                    for (i, &w) in weights.iter().enumerate() {
                        let tr = &target[i * v..(i + 1) * v];
                        let ts: R = tr.iter().copied().sum();
                        for j in 0..v {
                            dl[i * v + j] += g0 * w * (probs[i * v + j] * ts - tr[j]);
                        }
                    }
                });
            }
            Op::TopKCrossEntropy {
                logits,
                ids,
                k,
                target,
                weights,
                restricted,
            } => {
                let v = val(*logits).cols();
                let g0 = g[0];
                acc(*logits, &mut |dl| {
                    for (i, &w) in weights.iter().enumerate() {
                        for a in 0..*k {
                            let col = ids[i * k + a] as usize;
                            dl[i * v + col] +=
                                g0 * w * (restricted[i * k + a] - target[i * k + a]);
                        }
                    }
                });
            }
            Op::SmoothL1 {
                a,
                b,
                weights,
                beta,
            } => {
                let (ta, tb) = (val(*a), val(*b));
                let d = ta.cols();
                let g0 = g[0];
                let grad_row = |i: usize, j: usize| {
                    g0 * weights[i] / R::of(d as f64)
                        * kernels::smooth_l1_grad(ta.row(i)[j] - tb.row(i)[j], *beta)
                };
                acc(*a, &mut |da| {
                    for i in 0..weights.len() {
                        for j in 0..d {
                            da[i * d + j] += grad_row(i, j);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..weights.len() {
                        for j in 0..d {
                            db[i * d + j] -= grad_row(i, j);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |dx| dx.iter_mut().for_each(|a| *a += g0));
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    acc(v, &mut |dx| dx[0] += c * g[0]);
                }
            }
        }
    }
}
