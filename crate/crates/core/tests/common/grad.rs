//! Central finite-difference checks of the reverse-mode tape in double
//! precision.

use std::rc::Rc;

use poss_core::draft::{SpecialistBank, Span};
use poss_core::model::{ModelConfig, TargetModel};
use poss_core::tensor::{Graph, KeyLists, Tensor, Var};
use poss_core::training::{distill_corpus, DraftTrainer, Regime, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REL_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;
const H: f64 = 1e-6;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-12)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(1e-12)
}

fn eval(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).item()
}

/// Worst relative error over every input of a scalar-valued graph.
pub fn check(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            numeric[j] = (eval(&plus, build) - eval(&minus, build)) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Contract a tensor-valued output with a fixed random weighting so every
/// output element contributes to the scalar.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(g.value(x).shape(), &mut rng);
    let c = g.constant(w);
    let m = g.mul(x, c).unwrap();
    g.sum(m)
}

fn prob_rows(n: usize, v: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[n, v], |_| rng.random_range(0.05..1.0));
    for r in t.data_mut().chunks_mut(v) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|x| *x /= s);
    }
    t
}

/// Worst error per operation over `instances` random draws each.
pub fn op_suite(instances: usize) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn(&mut ChaCha8Rng, u64) -> f64| {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * name.len() as u64 + i as u64);
            worst = worst.max(f(&mut rng, i as u64));
        }
        out.push((name, worst));
    };

    run("matmul", &|r, s| {
        let (m, k, n) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..4));
        check(&[rand_tensor(&[m, k], r), rand_tensor(&[k, n], r)], &move |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            project(g, y, s)
        })
    });
    run("add", &|r, s| {
        check(&[rand_tensor(&[2, 3], r), rand_tensor(&[2, 3], r)], &move |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            project(g, y, s)
        })
    });
    run("mul", &|r, s| {
        check(&[rand_tensor(&[3, 2], r), rand_tensor(&[3, 2], r)], &move |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            project(g, y, s)
        })
    });
    run("scale", &|r, s| {
        let c = r.random_range(-2.0..2.0);
        check(&[rand_tensor(&[2, 4], r)], &move |g, v| {
            let y = g.scale(v[0], c);
            project(g, y, s)
        })
    });
    run("silu", &|r, s| {
        check(&[rand_tensor(&[3, 4], r).map_scale(3.0)], &move |g, v| {
            let y = g.silu(v[0]);
            project(g, y, s)
        })
    });
    run("rms_norm", &|r, s| {
        check(&[rand_tensor(&[3, 6], r), rand_tensor(&[6], r)], &move |g, v| {
            let y = g.rms_norm(v[0], v[1], 1e-5).unwrap();
            project(g, y, s)
        })
    });
    run("rope", &|r, s| {
        let pos: Vec<usize> = (0..3).map(|_| r.random_range(0..50)).collect();
        check(&[rand_tensor(&[3, 8], r)], &move |g, v| {
            let y = g.rope(v[0], &pos, 2).unwrap();
            project(g, y, s)
        })
    });
    run("attention", &|r, s| {
        let (nq, nk) = (3, 5);
        let mut keys = KeyLists::new();
        for _ in 0..nq {
            let mut row: Vec<u32> = (0..nk as u32).filter(|_| r.random_bool(0.6)).collect();
            if row.is_empty() {
                row.push(r.random_range(0..nk as u32));
            }
            keys.push(&row);
        }
        let keys = Rc::new(keys);
        check(
            &[rand_tensor(&[nq, 8], r), rand_tensor(&[nk, 8], r), rand_tensor(&[nk, 8], r)],
            &move |g, v| {
                let y = g.attention(v[0], v[1], v[2], 2, keys.clone()).unwrap();
                project(g, y, s)
            },
        )
    });
    run("concat_cols", &|r, s| {
        check(&[rand_tensor(&[2, 3], r), rand_tensor(&[2, 2], r)], &move |g, v| {
            let y = g.concat_cols(v[0], v[1]).unwrap();
            project(g, y, s)
        })
    });
    run("concat_rows", &|r, s| {
        check(
            &[rand_tensor(&[2, 3], r), rand_tensor(&[1, 3], r), rand_tensor(&[3, 3], r)],
            &move |g, v| {
                let y = g.concat_rows(v).unwrap();
                project(g, y, s)
            },
        )
    });
    run("gather_rows", &|r, s| {
        let idx: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
        check(&[rand_tensor(&[4, 3], r)], &move |g, v| {
            let y = g.gather_rows(v[0], &idx).unwrap();
            project(g, y, s)
        })
    });
    run("softmax_rows", &|r, s| {
        let t = r.random_range(0.5..2.0);
        check(&[rand_tensor(&[3, 5], r).map_scale(2.0)], &move |g, v| {
            let y = g.softmax_rows(v[0], t).unwrap();
            project(g, y, s)
        })
    });
    run("cross_entropy", &|r, _| {
        let target = prob_rows(3, 6, r);
        let w: Vec<f64> = (0..3).map(|_| r.random_range(0.1..1.0)).collect();
        check(&[rand_tensor(&[3, 6], r).map_scale(2.0)], &move |g, v| {
            g.cross_entropy(v[0], &target, &w).unwrap()
        })
    });
    run("topk_cross_entropy", &|r, _| {
        let (n, vsz, k) = (3, 8, 4);
        let mut ids = Vec::new();
        for _ in 0..n {
            let mut all: Vec<u32> = (0..vsz as u32).collect();
            for i in 0..k {
                let j = r.random_range(i..vsz);
                all.swap(i, j);
            }
            ids.extend_from_slice(&all[..k]);
        }
        let teacher: Vec<f64> = (0..n * k).map(|_| r.random_range(0.01..0.4)).collect();
        let w: Vec<f64> = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
        check(&[rand_tensor(&[n, vsz], r).map_scale(2.0)], &move |g, v| {
            g.topk_cross_entropy(v[0], &ids, &teacher, k, &w).unwrap()
        })
    });
    run("smooth_l1", &|r, _| {
        let w: Vec<f64> = (0..3).map(|_| r.random_range(0.1..1.0)).collect();
        check(
            &[rand_tensor(&[3, 4], r).map_scale(2.0), rand_tensor(&[3, 4], r)],
            &move |g, v| g.smooth_l1(v[0], v[1], &w, 1.0).unwrap(),
        )
    });
    run("sum", &|r, _| check(&[rand_tensor(&[3, 3], r)], &|g, v| {
        let sq = g.mul(v[0], v[0]).unwrap();
        g.sum(sq)
    }));
    run("lin_comb", &|r, _| {
        let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        check(&[rand_tensor(&[2], r), rand_tensor(&[3], r)], &move |g, v| {
            let s0 = g.mul(v[0], v[0]).unwrap();
            let s0 = g.sum(s0);
            let s1 = g.silu(v[1]);
            let s1 = g.sum(s1);
            g.lin_comb(&[(s0, a), (s1, b)]).unwrap()
        })
    });
    out
}

trait MapScale {
    fn map_scale(self, s: f64) -> Self;
}

impl MapScale for Tensor<f64> {
    fn map_scale(mut self, s: f64) -> Self {
        self.data_mut().iter_mut().for_each(|x| *x *= s);
        self
    }
}

fn loss_setup(seed: u64) -> (TargetModel<f64>, poss_core::training::Distilled<f64>) {
    let cfg = ModelConfig {
        vocab_size: 258,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 16,
        ..Default::default()
    };
    let target = TargetModel::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream: Vec<u32> = (0..14).map(|_| rng.random_range(2..258)).collect();
    let data = distill_corpus(&target, &stream, 5, 8).unwrap();
    (target, data)
}

/// Worst error of the full training loss against a random subset of bank
/// coordinates, for a teacher-forced and an end-to-end multi-step PosS
/// configuration.
pub fn total_loss_suite(instances: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let (target, data) = loss_setup(i as u64);
        let (regime, span, unroll) = if i % 2 == 0 {
            (Regime::Eagle, Span::Infinite, 1)
        } else {
            (Regime::Poss, Span::Finite(2), 3)
        };
        let cfg = TrainConfig {
            regime,
            n: span,
            unroll,
            k: 5,
            batch_size: 2,
            window: 8,
            detach_between_steps: false,
            seed: i as u64,
            ..Default::default()
        };
        let bank = SpecialistBank::<f64>::init(&target.config, cfg.span(), cfg.effective_unroll(), 50 + i as u64).unwrap();
        let batch: Vec<_> = data.examples.iter().take(2).collect();
        let loss_of = |b: &SpecialistBank<f64>| {
            let t = DraftTrainer::new(b.clone(), cfg.clone()).unwrap();
            t.loss_and_grads(&target, &batch, &[]).unwrap().0
        };
        let t = DraftTrainer::new(bank.clone(), cfg.clone()).unwrap();
        let (_, _, grads) = t.loss_and_grads(&target, &batch, &[]).unwrap();
        let sizes: Vec<usize> = grads.iter().map(Vec::len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7 + i as u64);
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for _ in 0..30 {
            let ti = rng.random_range(0..sizes.len());
            let j = rng.random_range(0..sizes[ti]);
            let bump = |delta: f64| {
                let mut b = bank.clone();
                b.tensors_mut()[ti].data_mut()[j] += delta;
                loss_of(&b)
            };
            a.push(grads[ti][j]);
            n.push((bump(H) - bump(-H)) / (2.0 * H));
        }
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}
