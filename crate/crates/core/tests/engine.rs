mod common;

use common::{bank, method_banks, prompt, tiny_target};
use poss_core::draft::{draft_forward, Span};
use poss_core::engine::{generate_vanilla, EngineConfig, Method, Session};
use poss_core::metrics::avg_accept_length;
use poss_core::model::{LayerCache, TargetModel};
use poss_core::tensor::{kernels, KeyLists, Tensor};
use poss_core::Error;

fn cfg(method: Method, depth: usize, width: usize) -> EngineConfig {
    EngineConfig {
        method,
        depth,
        width,
        total_tokens: (width * depth).max(depth),
        temperature: 0.0,
        max_new_tokens: 24,
        seed: 7,
    }
}

fn method_of(name: &str) -> Method {
    if name == "single-draft" {
        Method::SingleDraft
    } else {
        Method::Poss
    }
}

/// Target whose logits are identically zero, so every draft agrees with it.
fn flat_target() -> TargetModel<f32> {
    let mut t = tiny_target(4);
    t.lm_head = Tensor::zeros(t.lm_head.shape());
    t
}

#[test]
fn vanilla_matches_full_recompute() {
    let t = tiny_target(1);
    let p = prompt(3, 9);
    let c = cfg(Method::Vanilla, 1, 1);
    let out = generate_vanilla(&t, &p, &c).unwrap();
    let mut seq = p.clone();
    for _ in 0..c.max_new_tokens {
        let f = t.forward_with_features(&seq, None).unwrap();
        let next = kernels::argmax(f.logits.row(seq.len() - 1)) as u32;
        seq.push(next);
        if next == 1 {
            break;
        }
    }
    assert_eq!(out.tokens, seq[p.len()..]);
    assert_eq!(generate_vanilla(&t, &p, &c).unwrap().tokens, out.tokens);
}

#[test]
fn vanilla_edge_cases() {
    let t = tiny_target(1);
    let mut c = cfg(Method::Vanilla, 1, 1);
    c.max_new_tokens = 0;
    assert!(generate_vanilla(&t, &prompt(0, 5), &c).unwrap().tokens.is_empty());
    c.max_new_tokens = 90;
    let err = generate_vanilla(&t, &prompt(0, 10), &c).unwrap_err();
    assert!(matches!(err, Error::Capacity { requested: 100, capacity: 96 }));
}

#[test]
fn greedy_speculative_equals_vanilla() {
    let t = tiny_target(2);
    for (name, b) in method_banks(&t, 10) {
        for depth in [1, 3, 8] {
            for width in [1, 4] {
                let c = cfg(method_of(name), depth, width);
                for i in 0..3 {
                    let p = prompt(i, 6 + i);
                    let want = generate_vanilla(&t, &p, &c).unwrap().tokens;
                    let got = Session::new(&t, &b, c.clone()).unwrap().generate(&p).unwrap();
                    assert_eq!(got.tokens, want, "{name} depth {depth} width {width} prompt {i}");
                    let total: usize = got.records.iter().map(|r| r.committed).sum();
                    assert!(total >= got.tokens.len());
                    for r in &got.records {
                        r.check().unwrap();
                        assert!(r.nodes <= c.total_tokens);
                        assert!(r.acceptance.len() <= depth);
                        assert!((1..=depth + 1).contains(&r.committed));
                    }
                }
            }
        }
    }
}

#[test]
fn agreeing_draft_commits_depth_plus_one() {
    let t = flat_target();
    let b = bank(&t, Span::Finite(1), 6, 3);
    for depth in [1, 4] {
        let mut c = cfg(Method::Poss, depth, 1);
        c.max_new_tokens = 30;
        let g = Session::new(&t, &b, c).unwrap().generate(&prompt(1, 5)).unwrap();
        assert!(g.records.iter().all(|r| r.committed == depth + 1));
        assert_eq!(avg_accept_length(&g.records).unwrap(), (depth + 1) as f64);
        assert_eq!(g.tokens, vec![0; 30]);
    }
}

#[test]
fn agreeing_draft_always_accepts_when_sampling() {
    let t = flat_target();
    let b = bank(&t, Span::Finite(2), 6, 3);
    let mut c = cfg(Method::Poss, 3, 1);
    c.temperature = 0.8;
    let g = Session::new(&t, &b, c).unwrap().generate(&prompt(1, 5)).unwrap();
    assert!(g.records.iter().all(|r| r.committed == 4));
}

#[test]
fn trees_respect_width_budget_and_routing() {
    let t = tiny_target(5);
    for (span, n) in [(Span::Finite(1), 1), (Span::Finite(2), 2), (Span::Finite(3), 3)] {
        let b = bank(&t, span, 6, 8);
        for (width, total) in [(1, 8), (3, 10), (4, 16)] {
            let mut c = cfg(Method::Poss, 8, width);
            c.total_tokens = total;
            let mut s = Session::new(&t, &b, c).unwrap();
            s.prefill(&prompt(2, 7)).unwrap();
            let tree = s.draft_round().unwrap();
            assert!(tree.len() <= total);
            assert_eq!(tree.depth, 8);
            assert_eq!(tree.is_chain(), width == 1);
            for a in &tree.audit {
                let want = (a.level + 1).div_ceil(n).min(b.len());
                assert_eq!(a.specialist, want, "level {} n {n}", a.level);
            }
            for (u, node) in tree.nodes.iter().enumerate() {
                let (pd, pl) = node
                    .parent
                    .map_or((None, 0.0), |p| (Some(tree.nodes[p].depth), tree.nodes[p].cum_logp));
                assert_eq!(node.depth, pd.map_or(0, |d| d + 1), "node {u}");
                assert!((node.cum_logp - (pl + node.prob.ln())).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn commit_matches_recompute() {
    let t = tiny_target(6);
    let b = bank(&t, Span::Finite(2), 6, 9);
    let mut c = cfg(Method::Poss, 5, 3);
    c.total_tokens = 12;
    c.max_new_tokens = 40;
    let mut s = Session::new(&t, &b, c).unwrap();
    let p = prompt(4, 8);
    s.prefill(&p).unwrap();
    for _ in 0..6 {
        let before: Vec<usize> = (1..=b.len()).map(|j| s.specialist_cache(j).len()).collect();
        let rec = s.round().unwrap();
        for (j, &len) in before.iter().enumerate() {
            assert_eq!(s.specialist_cache(j + 1).len(), len + rec.committed);
        }
        let toks = s.tokens().to_vec();
        let n = toks.len();
        let mut fresh = t.new_cache();
        let full = t.forward_with_features(&toks[..n - 1], Some(&mut fresh)).unwrap();
        assert_eq!(s.target_cache(), &fresh);
        let pos: Vec<usize> = (0..n - 1).collect();
        for j in 1..=b.len() {
            let mut lc = LayerCache::new(16);
            draft_forward(
                b.specialist(j),
                &t,
                &toks[1..],
                full.features.data(),
                &pos,
                &KeyLists::causal(0, n - 1),
                &mut lc,
            )
            .unwrap();
            assert_eq!(s.specialist_cache(j), &lc, "specialist {j}");
        }
    }
}

#[test]
fn records_account_for_generated_tokens() {
    let t = tiny_target(7);
    let b = bank(&t, Span::Finite(1), 6, 2);
    let c = cfg(Method::Poss, 4, 2);
    let mut s = Session::new(&t, &b, c.clone()).unwrap();
    let g = s.generate(&prompt(5, 6)).unwrap();
    let total: usize = g.records.iter().map(|r| r.committed).sum();
    assert_eq!(total, s.generated().len());
    assert!(g.tokens.len() <= c.max_new_tokens);
    for r in &g.records {
        assert!(r.draft_ns + r.verify_ns + r.commit_ns <= r.wall_ns);
        assert!(r.specialist_calls.iter().any(|c| c.level.is_none()));
    }
}

#[test]
fn configuration_errors() {
    let t = tiny_target(1);
    let b = bank(&t, Span::Finite(2), 6, 1);
    let mut c = cfg(Method::Poss, 6, 4);
    c.total_tokens = 5;
    assert!(matches!(Session::new(&t, &b, c), Err(Error::Config(_))));
    let c = cfg(Method::SingleDraft, 6, 4);
    assert!(matches!(Session::new(&t, &b, c), Err(Error::Config(_))));
    let c = cfg(Method::Poss, 2, 1);
    let mut s = Session::new(&t, &b, c).unwrap();
    assert!(s.draft_round().is_err());
    assert!(matches!(s.prefill(&[0]), Err(Error::Contract(_))));
}

#[test]
fn sampled_decoding_is_reproducible() {
    let t = tiny_target(3);
    let b = bank(&t, Span::Finite(1), 6, 4);
    let mut c = cfg(Method::Poss, 4, 3);
    c.temperature = 1.0;
    let a = Session::new(&t, &b, c.clone()).unwrap().generate(&prompt(0, 6)).unwrap();
    let z = Session::new(&t, &b, c).unwrap().generate(&prompt(0, 6)).unwrap();
    assert_eq!(a.tokens, z.tokens);
}
