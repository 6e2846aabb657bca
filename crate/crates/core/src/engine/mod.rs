//! Draft-then-verify generation.
//!
//! A [`Session`] holds the committed tokens, the target cache over all but
//! the last (pending) token, and one private cache per specialist over the
//! verified draft pairs. Pair `p` is `(x_{p+1}, f_p)` at position `p`, so the
//! pair at the context tip is `(pending token, feature of the token before
//! it)` and the first specialist's output there gives the draft distribution
//! for position 0.

mod tree;
pub mod verify;

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::draft::{draft_forward, SpecialistBank};
use crate::metrics::{RoundRecord, SpecialistCall};
use crate::model::tokenizer::EOS;
use crate::model::{sample_from_probs, sample_token, KvCache, LayerCache, SamplerRng, TargetModel};
use crate::tensor::{kernels, KeyLists, Real};
use crate::{Error, Result};

pub use tree::{DraftTree, LevelAudit, TreeNode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Vanilla,
    SingleDraft,
    Poss,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Method::Vanilla),
            "single-draft" => Ok(Method::SingleDraft),
            "poss" => Ok(Method::Poss),
            _ => Err(Error::Config(format!(
                "engine.method must be vanilla, single-draft or poss, got {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Vanilla => "vanilla",
            Method::SingleDraft => "single-draft",
            Method::Poss => "poss",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub method: Method,
    /// Draft depth `L`.
    pub depth: usize,
    /// Children kept per node and nodes kept per level.
    pub width: usize,
    /// Draft node budget per round.
    pub total_tokens: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            method: Method::Poss,
            depth: 6,
            width: 4,
            total_tokens: 16,
            temperature: 0.0,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("engine.depth must be ≥ 1".into()));
        }
        if self.width == 0 {
            return Err(Error::Config("engine.width must be ≥ 1".into()));
        }
        if self.total_tokens < self.depth {
            return Err(Error::Config(format!(
                "engine.total_tokens ({}) must be ≥ engine.depth ({})",
                self.total_tokens, self.depth
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("engine.temperature must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Outcome of verifying one tree.
#[derive(Clone, Debug, PartialEq)]
pub struct VerificationResult<R> {
    /// Accepted node ids from the root down.
    pub path: Vec<usize>,
    /// `A_1 .. A_L` for the drafted depth.
    pub acceptance: Vec<bool>,
    pub bonus: u32,
    /// Accepted drafts plus the bonus token.
    pub committed: usize,
    /// Accepted draft tokens followed by the bonus.
    pub tokens: Vec<u32>,
    /// Target features at the context tip and at each accepted node.
    features: Vec<R>,
}

impl<R> VerificationResult<R> {
    fn new(tree_depth: usize, path: Vec<usize>, tree_tokens: &[u32], bonus: u32, features: Vec<R>) -> Self {
        let mut tokens: Vec<u32> = path.iter().map(|&u| tree_tokens[u]).collect();
        tokens.push(bonus);
        VerificationResult {
            acceptance: (1..=tree_depth).map(|i| i <= path.len()).collect(),
            committed: path.len() + 1,
            path,
            bonus,
            tokens,
            features,
        }
    }
}

/// Time spent committing a round: the target cache compaction and the
/// specialist cache extension.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommitTiming {
    pub target_ns: u64,
    pub sync_ns: u64,
    pub calls: Vec<SpecialistCall>,
}

/// Tokens and timing of a decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated tokens, excluding the prompt.
    pub tokens: Vec<u32>,
    pub records: Vec<RoundRecord>,
    pub prefill_ns: u64,
    pub total_ns: u64,
}

/// Output of the main verified-context feature stream at the context tip.
#[derive(Clone, Debug)]
struct Root<R> {
    logits: Vec<R>,
    feature: Vec<R>,
}

fn ns_since(t: Instant) -> u64 {
    t.elapsed().as_nanos() as u64
}

fn check_budget(target: &TargetModel<impl Real>, prompt: &[u32], max_new: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Contract("prompt is empty".into()));
    }
    let need = prompt.len() + max_new;
    if need > target.config.max_seq_len {
        return Err(Error::Capacity {
            requested: need,
            capacity: target.config.max_seq_len,
        });
    }
    Ok(())
}

fn finish_tokens(mut out: Vec<u32>, max_new: usize) -> Vec<u32> {
    out.truncate(max_new);
    if let Some(i) = out.iter().position(|&t| t == EOS) {
        out.truncate(i + 1);
    }
    out
}

/// Plain autoregressive decoding with a cache, one target forward per token.
pub fn generate_vanilla<R: Real>(target: &TargetModel<R>, prompt: &[u32], cfg: &EngineConfig) -> Result<Generation> {
    cfg.validate()?;
    check_budget(target, prompt, cfg.max_new_tokens)?;
    let start = Instant::now();
    let mut rng = SamplerRng::new(cfg.seed);
    let mut out = Vec::with_capacity(cfg.max_new_tokens);
    if cfg.max_new_tokens == 0 {
        return Ok(Generation {
            tokens: out,
            records: Vec::new(),
            prefill_ns: 0,
            total_ns: ns_since(start),
        });
    }
    let mut cache = target.new_cache();
    let first = target.forward_with_features(prompt, Some(&mut cache))?;
    let mut next = sample_token(first.logits.row(prompt.len() - 1), cfg.temperature, &mut rng)?;
    let prefill_ns = ns_since(start);
    out.push(next);
    while out.len() < cfg.max_new_tokens && next != EOS {
        let step = target.forward_with_features(&[next], Some(&mut cache))?;
        next = sample_token(step.logits.row(0), cfg.temperature, &mut rng)?;
        out.push(next);
    }
    Ok(Generation {
        tokens: out,
        records: Vec::new(),
        prefill_ns,
        total_ns: ns_since(start),
    })
}

/// One speculative decoding session. Cloning a session forks its caches and
/// sampler state; the model and bank are shared read-only.
#[derive(Clone)]
pub struct Session<'a, R: Real> {
    target: &'a TargetModel<R>,
    bank: &'a SpecialistBank<R>,
    cfg: EngineConfig,
    tokens: Vec<u32>,
    prompt_len: usize,
    cache: KvCache<R>,
    spec: Vec<LayerCache<R>>,
    root: Option<Root<R>>,
    rng: SamplerRng,
    rounds: usize,
}

impl<'a, R: Real> Session<'a, R> {
    pub fn new(target: &'a TargetModel<R>, bank: &'a SpecialistBank<R>, cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        if bank.model_config() != &target.config {
            return Err(Error::Config(
                "specialist bank was built for a different target configuration".into(),
            ));
        }
        match cfg.method {
            Method::Vanilla => {
                return Err(Error::Config(
                    "a speculative session needs method single-draft or poss".into(),
                ))
            }
            Method::SingleDraft if bank.len() != 1 => {
                return Err(Error::Config(format!(
                    "single-draft decoding needs a one-layer bank, got {} specialists",
                    bank.len()
                )))
            }
            _ => {}
        }
        let d = target.config.d_model;
        Ok(Session {
            target,
            bank,
            rng: SamplerRng::new(cfg.seed),
            cfg,
            tokens: Vec::new(),
            prompt_len: 0,
            cache: target.new_cache(),
            spec: (0..bank.len()).map(|_| LayerCache::new(d)).collect(),
            root: None,
            rounds: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Prompt and committed tokens.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Tokens committed after the prompt.
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn target_cache(&self) -> &KvCache<R> {
        &self.cache
    }

    /// Private cache of specialist `j` (1-based).
    pub fn specialist_cache(&self, j: usize) -> &LayerCache<R> {
        &self.spec[j - 1]
    }

    /// Replace the sampler with a fresh stream.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = SamplerRng::new(seed);
    }

    /// Run the target over all prompt tokens but the last and fill the
    /// specialist caches with the prompt's pairs. Prompts need at least two
    /// tokens so the context tip has a feature to pair with.
    pub fn prefill(&mut self, prompt: &[u32]) -> Result<u64> {
        check_budget(self.target, prompt, self.cfg.max_new_tokens)?;
        if prompt.len() < 2 {
            return Err(Error::Contract(
                "speculative decoding needs a prompt of at least two tokens".into(),
            ));
        }
        let t0 = Instant::now();
        self.tokens = prompt.to_vec();
        self.prompt_len = prompt.len();
        self.cache = self.target.new_cache();
        for c in &mut self.spec {
            c.truncate(0);
        }
        self.rounds = 0;
        let n = prompt.len();
        let out = self.target.forward_with_features(&prompt[..n - 1], Some(&mut self.cache))?;
        self.extend_specialists(0, &prompt[1..], out.features.data(), None)?;
        Ok(ns_since(t0))
    }

    /// Extend every specialist cache with pairs starting at position `first`
    /// and refresh the context-tip output.
    fn extend_specialists(
        &mut self,
        first: usize,
        tokens: &[u32],
        feats: &[R],
        mut calls: Option<&mut Vec<SpecialistCall>>,
    ) -> Result<()> {
        let t_origin = Instant::now();
        let n = tokens.len();
        let positions: Vec<usize> = (first..first + n).collect();
        let (heads, eps) = (self.target.config.n_heads, self.target.eps());
        let emb = self.target.embed_rows(tokens)?;
        for (j, layer) in self.bank.specialists().iter().enumerate() {
            let t0 = Instant::now();
            let cache = &mut self.spec[j];
            debug_assert_eq!(cache.len(), first);
            if j == 0 {
                let keys = KeyLists::causal(first, n);
                let out = draft_forward(layer, self.target, tokens, feats, &positions, &keys, cache)?;
                self.root = Some(Root {
                    logits: out.logits.row(n - 1).to_vec(),
                    feature: out.features.row(n - 1).to_vec(),
                });
            } else {
                let x = layer.fuse_rows(&emb, feats)?;
                let (k, v) = layer.block.key_values(&x, &positions, heads, eps);
                cache.append(&k, &v);
            }
            if let Some(c) = calls.as_deref_mut() {
                c.push(SpecialistCall {
                    specialist: j + 1,
                    level: None,
                    start_ns: t0.duration_since(t_origin).as_nanos() as u64,
                    elapsed_ns: ns_since(t0),
                });
            }
        }
        Ok(())
    }

    fn draft_temperature(&self) -> f64 {
        if self.cfg.temperature > 0.0 {
            self.cfg.temperature
        } else {
            1.0
        }
    }

    /// Depth actually drafted this round: `L` clipped to the context left.
    fn round_depth(&self) -> usize {
        self.cfg.depth.min(self.target.config.max_seq_len.saturating_sub(self.tokens.len()))
    }

    /// Choose up to `keep` children across `parents` (slots) and append them.
    fn select_children(&mut self, tree: &mut DraftTree<R>, parents: &[usize], keep: usize) {
        let width = self.cfg.width;
        if self.cfg.temperature == 0.0 {
            let mut cand: Vec<(f64, usize, usize, u32, f64)> = Vec::new();
            for (order, &slot) in parents.iter().enumerate() {
                let q = tree.distributions[slot].as_ref().expect("expanded slot");
                let base = if slot == 0 { 0.0 } else { tree.nodes[slot - 1].cum_logp };
                for (rank, x) in kernels::top_k(q, width).into_iter().enumerate() {
                    if q[x] > 0.0 {
                        cand.push((base + q[x].ln(), order, rank, x as u32, q[x]));
                    }
                }
            }
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cand.truncate(keep);
            cand.sort_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(&b.2)));
            for (_, order, _, x, p) in cand {
                let slot = parents[order];
                tree.push(x, slot.checked_sub(1), p);
            }
        } else {
            let mut ranked: Vec<usize> = (0..parents.len()).collect();
            let cum = |slot: usize| if slot == 0 { 0.0 } else { tree.nodes[slot - 1].cum_logp };
            ranked.sort_by(|&a, &b| cum(parents[b]).total_cmp(&cum(parents[a])).then(a.cmp(&b)));
            let mut counts = vec![0usize; parents.len()];
            let mut left = keep;
            for &o in &ranked {
                let q = tree.distributions[parents[o]].as_ref().expect("expanded slot");
                let support = q.iter().filter(|&&v| v > 0.0).count();
                counts[o] = width.min(left).min(support);
                left -= counts[o];
            }
            for (o, &slot) in parents.iter().enumerate() {
                let mut q = tree.distributions[slot].clone().expect("expanded slot");
                let orig = q.clone();
                for _ in 0..counts[o] {
                    let x = sample_from_probs(&q, &mut self.rng);
                    tree.push(x as u32, slot.checked_sub(1), orig[x]);
                    q[x] = 0.0;
                    let z: f64 = q.iter().sum();
                    if z <= 0.0 {
                        break;
                    }
                    q.iter_mut().for_each(|v| *v /= z);
                }
            }
        }
    }

    /// Draft one tree. Level `i` is expanded from the outputs of the
    /// specialist routed to position `i`; a specialist that did not draft an
    /// ancestor computes that ancestor's keys and values before attending to
    /// it.
    pub fn draft_round(&mut self) -> Result<DraftTree<R>> {
        let root = self
            .root
            .clone()
            .ok_or_else(|| Error::Contract("draft_round before prefill".into()))?;
        let depth = self.round_depth();
        if depth == 0 {
            return Err(Error::Capacity {
                requested: self.tokens.len() + 1,
                capacity: self.target.config.max_seq_len,
            });
        }
        let temp = self.draft_temperature();
        let (target, bank) = (self.target, self.bank);
        let (heads, eps) = (target.config.n_heads, target.eps());
        let n = self.tokens.len();
        let verified = n - 1;
        let root_l: Vec<f64> = root.logits.iter().map(|v| v.f64()).collect();
        let mut tree = DraftTree::new(crate::tensor::softmax(&root_l, temp)?);
        let mut budget = self.cfg.total_tokens;
        let width = self.cfg.width;
        let keep_at = move |i: usize, budget: usize| width.min(budget - (depth - 1 - i));

        let t0 = Instant::now();
        let keep = keep_at(0, budget);
        self.select_children(&mut tree, &[0], keep);
        budget -= tree.len();
        tree.audit.push(LevelAudit {
            level: 0,
            specialist: bank.route(0),
            nodes: tree.len(),
            recomputed: 0,
            elapsed_ns: ns_since(t0),
        });

        let mut rows: Vec<HashMap<usize, usize>> = vec![HashMap::new(); bank.len()];
        for i in 1..depth {
            let t0 = Instant::now();
            let parents = tree.level(i - 1);
            let j = bank.route(i);
            let layer = bank.specialist(j);
            let cache = &mut self.spec[j - 1];
            let seen = &mut rows[j - 1];
            let feat_of = |tree: &DraftTree<R>, u: usize| -> Vec<R> {
                match tree.nodes[u].parent {
                    Some(a) => tree.nodes[a].feature.clone().expect("parent expanded"),
                    None => root.feature.clone(),
                }
            };

            let mut missing: Vec<usize> = parents
                .iter()
                .flat_map(|&u| tree.ancestors(u))
                .filter(|a| !seen.contains_key(a))
                .collect();
            missing.sort_unstable();
            missing.dedup();
            if !missing.is_empty() {
                let toks: Vec<u32> = missing.iter().map(|&a| tree.nodes[a].token).collect();
                let feats: Vec<R> = missing.iter().flat_map(|&a| feat_of(&tree, a)).collect();
                let pos: Vec<usize> = missing.iter().map(|&a| verified + tree.nodes[a].depth + 1).collect();
                let x = layer.fuse_rows(&target.embed_rows(&toks)?, &feats)?;
                let (k, v) = layer.block.key_values(&x, &pos, heads, eps);
                for (r, &a) in missing.iter().enumerate() {
                    seen.insert(a, cache.len() + r);
                }
                cache.append(&k, &v);
            }

            let toks: Vec<u32> = parents.iter().map(|&u| tree.nodes[u].token).collect();
            let feats: Vec<R> = parents.iter().flat_map(|&u| feat_of(&tree, u)).collect();
            let pos: Vec<usize> = parents.iter().map(|&u| verified + tree.nodes[u].depth + 1).collect();
            let base = cache.len();
            let mut keys = KeyLists::new();
            let mut row = Vec::new();
            for (idx, &u) in parents.iter().enumerate() {
                row.clear();
                row.extend(0..verified as u32);
                row.extend(tree.ancestors(u).iter().map(|a| seen[a] as u32));
                row.push((base + idx) as u32);
                keys.push(&row);
            }
            let out = draft_forward(layer, target, &toks, &feats, &pos, &keys, cache)?;
            for (idx, &u) in parents.iter().enumerate() {
                seen.insert(u, base + idx);
                tree.nodes[u].feature = Some(out.features.row(idx).to_vec());
                tree.distributions[u + 1] = Some(out.distribution(idx, temp)?);
            }
            let before = tree.len();
            let slots: Vec<usize> = parents.iter().map(|&u| u + 1).collect();
            self.select_children(&mut tree, &slots, keep_at(i, budget));
            budget -= tree.len() - before;
            tree.audit.push(LevelAudit {
                level: i,
                specialist: j,
                nodes: tree.len() - before,
                recomputed: missing.len(),
                elapsed_ns: ns_since(t0),
            });
        }
        for c in &mut self.spec {
            c.truncate(verified);
        }
        Ok(tree)
    }

    /// Target forward over the context tip and every tree node with
    /// ancestor-only attention. Row 0 is the tip, row `u + 1` node `u`.
    fn score_tree(&mut self, tree: &DraftTree<R>) -> Result<crate::model::ForwardOutput<R>> {
        let n = self.tokens.len();
        let tip = n - 1;
        let mut toks = Vec::with_capacity(tree.len() + 1);
        let mut pos = Vec::with_capacity(tree.len() + 1);
        let mut keys = KeyLists::causal(tip, 1);
        toks.push(self.tokens[tip]);
        pos.push(tip);
        let mut row = Vec::new();
        for (u, node) in tree.nodes.iter().enumerate() {
            toks.push(node.token);
            pos.push(n + node.depth);
            row.clear();
            row.extend(0..n as u32);
            row.extend(tree.ancestors(u).iter().map(|&a| (n + a) as u32));
            row.push((n + u) as u32);
            keys.push(&row);
        }
        self.target.forward_rows(&toks, &pos, &keys, &mut self.cache)
    }

    fn result_from(
        &self,
        tree: &DraftTree<R>,
        out: &crate::model::ForwardOutput<R>,
        path: Vec<usize>,
        bonus: u32,
    ) -> VerificationResult<R> {
        let mut feats = out.features.row(0).to_vec();
        for &u in &path {
            feats.extend_from_slice(out.features.row(u + 1));
        }
        VerificationResult::new(tree.depth, path, &tree.tokens(), bonus, feats)
    }

    /// Greedy verification: accept while the drafted child matches the
    /// target argmax. Appends the tree's rows to the target cache; the next
    /// commit drops the rejected ones.
    pub fn verify_greedy(&mut self, tree: &DraftTree<R>) -> Result<VerificationResult<R>> {
        let out = self.score_tree(tree)?;
        let argmax: Vec<u32> = (0..=tree.len()).map(|r| kernels::argmax(out.logits.row(r)) as u32).collect();
        let (path, bonus) = verify::greedy_walk(&tree.children, &tree.tokens(), &argmax);
        Ok(self.result_from(tree, &out, path, bonus))
    }

    /// Lossless stochastic verification by recursive rejection over each
    /// node's drafted children.
    pub fn verify_stochastic(&mut self, tree: &DraftTree<R>) -> Result<VerificationResult<R>> {
        let t = self.cfg.temperature;
        if t <= 0.0 {
            return Err(Error::Contract("stochastic verification needs temperature > 0".into()));
        }
        let out = self.score_tree(tree)?;
        let p: Vec<Vec<f64>> = (0..=tree.len())
            .map(|r| {
                let l: Vec<f64> = out.logits.row(r).iter().map(|v| v.f64()).collect();
                crate::tensor::softmax(&l, t)
            })
            .collect::<Result<_>>()?;
        let (path, bonus) =
            verify::stochastic_walk(&tree.children, &tree.tokens(), &p, &tree.distributions, &mut self.rng)?;
        Ok(self.result_from(tree, &out, path, bonus))
    }

    /// Verify by the configured temperature.
    pub fn verify(&mut self, tree: &DraftTree<R>) -> Result<VerificationResult<R>> {
        if self.cfg.temperature == 0.0 {
            self.verify_greedy(tree)
        } else {
            self.verify_stochastic(tree)
        }
    }

    /// Keep the accepted rows of the target cache, append the committed
    /// tokens, and extend every specialist cache over the new pairs.
    pub fn commit_round(&mut self, result: &VerificationResult<R>) -> Result<CommitTiming> {
        let t0 = Instant::now();
        let n = self.tokens.len();
        let tip = n - 1;
        let mut keep = vec![tip];
        keep.extend(result.path.iter().map(|&u| n + u));
        if self.cache.len() < n + result.path.iter().max().map_or(0, |&u| u + 1) {
            return Err(Error::Contract("commit without a verified tree in the cache".into()));
        }
        self.cache.compact(tip, &keep);
        self.tokens.extend_from_slice(&result.tokens);
        let target_ns = ns_since(t0);
        let t1 = Instant::now();
        let mut calls = Vec::new();
        self.extend_specialists(tip, &result.tokens, &result.features, Some(&mut calls))?;
        self.rounds += 1;
        Ok(CommitTiming {
            target_ns,
            sync_ns: ns_since(t1),
            calls,
        })
    }

    /// Draft, verify and commit once. Specialist work during the commit is
    /// booked to the draft phase.
    pub fn round(&mut self) -> Result<RoundRecord> {
        let t0 = Instant::now();
        let tree = self.draft_round()?;
        let t1 = Instant::now();
        let result = self.verify(&tree)?;
        let t2 = Instant::now();
        let commit = self.commit_round(&result)?;
        let t3 = Instant::now();
        let draft_ns = t1.duration_since(t0).as_nanos() as u64;
        let verify_ns = t2.duration_since(t1).as_nanos() as u64;
        let commit_wall = t3.duration_since(t2).as_nanos() as u64;
        let wall_ns = t3.duration_since(t0).as_nanos() as u64;
        let target_ns = commit.target_ns.min(commit_wall);
        let sync_ns = commit_wall - target_ns;
        let mut calls: Vec<SpecialistCall> = tree
            .audit
            .iter()
            .map(|a| SpecialistCall {
                specialist: a.specialist,
                level: Some(a.level),
                start_ns: 0,
                elapsed_ns: a.elapsed_ns,
            })
            .collect();
        let mut acc = 0;
        for c in calls.iter_mut() {
            c.start_ns = acc;
            acc += c.elapsed_ns;
        }
        let sync_start = draft_ns + verify_ns + target_ns;
        calls.extend(commit.calls.into_iter().map(|mut c| {
            c.start_ns += sync_start;
            c
        }));
        Ok(RoundRecord {
            round: self.rounds - 1,
            acceptance: result.acceptance,
            committed: result.committed,
            nodes: tree.len(),
            draft_ns: draft_ns + sync_ns,
            verify_ns,
            commit_ns: target_ns,
            wall_ns,
            specialist_calls: calls,
        })
    }

    /// Prefill `prompt` and run rounds until `max_new_tokens` tokens or an
    /// end token have been committed.
    pub fn generate(&mut self, prompt: &[u32]) -> Result<Generation> {
        let start = Instant::now();
        let prefill_ns = self.prefill(prompt)?;
        let mut records = Vec::new();
        while self.generated().len() < self.cfg.max_new_tokens && !self.generated().contains(&EOS) {
            records.push(self.round()?);
        }
        Ok(Generation {
            tokens: finish_tokens(self.generated().to_vec(), self.cfg.max_new_tokens),
            records,
            prefill_ns,
            total_ns: ns_since(start),
        })
    }
}
