use serde::{Deserialize, Serialize};

/// One drafted token.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode<R> {
    pub token: u32,
    /// `None` for children of the verified context tip.
    pub parent: Option<usize>,
    /// Draft position `i` (0-based).
    pub depth: usize,
    pub prob: f64,
    pub cum_logp: f64,
    /// Output feature of the specialist that processed this node, present
    /// once the node has been expanded.
    pub feature: Option<Vec<R>>,
}

/// Which specialist produced a tree level, and what it cost.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelAudit {
    pub level: usize,
    /// 1-based specialist index.
    pub specialist: usize,
    pub nodes: usize,
    /// Ancestor pairs whose keys and values the specialist had to compute
    /// because another specialist drafted them.
    pub recomputed: usize,
    pub elapsed_ns: u64,
}

/// A drafted token tree in level order: every node's ancestors precede it
/// and siblings are contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftTree<R> {
    pub nodes: Vec<TreeNode<R>>,
    /// Child lists by slot (slot 0 is the context tip, slot `u + 1` node `u`).
    pub children: Vec<Vec<usize>>,
    /// Draft distribution the children of each slot were chosen from.
    pub distributions: Vec<Option<Vec<f64>>>,
    pub audit: Vec<LevelAudit>,
    /// Number of levels actually drafted.
    pub depth: usize,
}

impl<R: Clone> DraftTree<R> {
    pub(crate) fn new(root_distribution: Vec<f64>) -> Self {
        DraftTree {
            nodes: Vec::new(),
            children: vec![Vec::new()],
            distributions: vec![Some(root_distribution)],
            audit: Vec::new(),
            depth: 0,
        }
    }

    pub(crate) fn push(&mut self, token: u32, parent: Option<usize>, prob: f64) -> usize {
        let (depth, base) = match parent {
            Some(u) => (self.nodes[u].depth + 1, self.nodes[u].cum_logp),
            None => (0, 0.0),
        };
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            token,
            parent,
            depth,
            prob,
            cum_logp: base + prob.ln(),
            feature: None,
        });
        self.children[parent.map_or(0, |u| u + 1)].push(id);
        self.children.push(Vec::new());
        self.distributions.push(None);
        self.depth = self.depth.max(depth + 1);
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids at draft position `i`.
    pub fn level(&self, i: usize) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&u| self.nodes[u].depth == i).collect()
    }

    /// Ancestors of `u` from the shallowest down, excluding `u`.
    pub fn ancestors(&self, u: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.nodes[u].parent;
        while let Some(a) = cur {
            out.push(a);
            cur = self.nodes[a].parent;
        }
        out.reverse();
        out
    }

    /// Whether every slot has at most one child.
    pub fn is_chain(&self) -> bool {
        self.children.iter().all(|c| c.len() <= 1)
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.token).collect()
    }
}
