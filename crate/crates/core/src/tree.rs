//! Rooted phylogenies with branch lengths.
//!
//! Nodes live in an arena indexed by [`NodeId`]. Every constructor stores the
//! arena in preorder, so the root is always node `0` and a parent always has
//! a smaller id than its children. Unlabeled internal nodes are named
//! `anc_<preorder index>`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::scalar::Real;

/// Index into the node arena of a [`Phylogeny`].
pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Node<T> {
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Length of the edge above this node; zero at the root.
    pub branch_length: T,
    pub label: String,
}

impl<T> Node<T> {
    pub fn is_tip(&self) -> bool {
        self.children.is_empty()
    }
}

/// A rooted tree with non-negative branch lengths and unique labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Phylogeny<T> {
    nodes: Vec<Node<T>>,
    /// Number of non-root edges whose length was absent in the source text.
    missing_lengths: usize,
}

fn auto_label(id: NodeId) -> String {
    format!("anc_{id}")
}

/// Incremental preorder construction of a [`Phylogeny`].
struct Builder<T> {
    nodes: Vec<Node<T>>,
    labels: Vec<Option<String>>,
    missing_lengths: usize,
}

impl<T: Real> Builder<T> {
    fn new() -> Self {
        Self {
            nodes: Vec::new(),
            labels: Vec::new(),
            missing_lengths: 0,
        }
    }

    fn add(&mut self, parent: Option<NodeId>, length: T, label: Option<String>) -> NodeId {
        let id = self.nodes.len();
        if let Some(p) = parent {
            self.nodes[p].children.push(id);
        }
        self.nodes.push(Node {
            parent,
            children: Vec::new(),
            branch_length: if parent.is_some() { length } else { T::zero() },
            label: String::new(),
        });
        self.labels.push(label);
        id
    }

    fn finish(mut self) -> Result<Phylogeny<T>> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidParameter("tree has no nodes".into()));
        }
        let mut seen = HashSet::new();
        for (id, label) in self.labels.iter().enumerate() {
            let is_tip = self.nodes[id].is_tip();
            match label {
                Some(l) if !l.is_empty() => {
                    if !seen.insert(l.clone()) {
                        return Err(Error::DuplicateLabel(l.clone()));
                    }
                }
                _ if is_tip => {
                    return Err(Error::InvalidParameter(format!(
                        "tip node {id} has an empty label"
                    )))
                }
                _ => {}
            }
        }
        for (id, label) in self.labels.into_iter().enumerate() {
            self.nodes[id].label = match label {
                Some(l) if !l.is_empty() => l,
                _ => {
                    let l = auto_label(id);
                    if seen.contains(&l) {
                        return Err(Error::DuplicateLabel(l));
                    }
                    l
                }
            };
        }
        for node in &self.nodes {
            if !(node.branch_length >= T::zero()) || !node.branch_length.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "branch above `{}` has invalid length {}",
                    node.label, node.branch_length
                )));
            }
        }
        Ok(Phylogeny {
            nodes: self.nodes,
            missing_lengths: self.missing_lengths,
        })
    }
}

impl<T: Real> Phylogeny<T> {
    pub fn root(&self) -> NodeId {
        0
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id].parent
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].children
    }

    pub fn branch_length(&self, id: NodeId) -> T {
        self.nodes[id].branch_length
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id].label
    }

    pub fn is_tip(&self, id: NodeId) -> bool {
        self.nodes[id].is_tip()
    }

    /// True when some branch lengths were missing in the parsed text and
    /// defaulted to zero.
    pub fn has_missing_lengths(&self) -> bool {
        self.missing_lengths > 0
    }

    /// Tip ids in preorder (left-to-right) order.
    pub fn tips(&self) -> Vec<NodeId> {
        (0..self.len()).filter(|&i| self.is_tip(i)).collect()
    }

    /// Internal node ids in preorder, root first.
    pub fn internal_nodes(&self) -> Vec<NodeId> {
        (0..self.len()).filter(|&i| !self.is_tip(i)).collect()
    }

    pub fn n_tips(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_tip()).count()
    }

    pub fn tip_flags(&self, ids: &[NodeId]) -> Vec<bool> {
        ids.iter().map(|&i| self.is_tip(i)).collect()
    }

    pub fn find(&self, label: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.label == label)
    }

    /// Look up a label, reporting the valid labels on failure.
    pub fn require(&self, label: &str) -> Result<NodeId> {
        self.find(label).ok_or_else(|| {
            let valid: Vec<&str> = self.nodes.iter().map(|n| n.label.as_str()).collect();
            Error::UnknownNode(format!("`{label}`; valid labels: {}", valid.join(", ")))
        })
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(format!("id {id} (tree has {} nodes)", self.len())))
        }
    }

    fn depth(&self, mut id: NodeId) -> usize {
        let mut d = 0;
        while let Some(p) = self.nodes[id].parent {
            id = p;
            d += 1;
        }
        d
    }

    /// Sum of branch lengths on the path between `a` and `b`.
    pub fn patristic_distance(&self, a: NodeId, b: NodeId) -> Result<T> {
        self.check_id(a)?;
        self.check_id(b)?;
        Ok(self.distance_unchecked(a, b, self.depth(a), self.depth(b)))
    }

    fn distance_unchecked(&self, mut a: NodeId, mut b: NodeId, mut da: usize, mut db: usize) -> T {
        let mut total = T::zero();
        while da > db {
            total += self.nodes[a].branch_length;
            a = self.nodes[a].parent.expect("non-root has parent");
            da -= 1;
        }
        while db > da {
            total += self.nodes[b].branch_length;
            b = self.nodes[b].parent.expect("non-root has parent");
            db -= 1;
        }
        while a != b {
            total += self.nodes[a].branch_length + self.nodes[b].branch_length;
            a = self.nodes[a].parent.expect("non-root has parent");
            b = self.nodes[b].parent.expect("non-root has parent");
        }
        total
    }

    /// Pairwise patristic distances among `ids`.
    pub fn patristic_matrix(&self, ids: &[NodeId]) -> Result<Array2<T>> {
        if ids.is_empty() {
            return Err(Error::InvalidParameter("empty id list".into()));
        }
        for &id in ids {
            self.check_id(id)?;
        }
        let depths: Vec<usize> = ids.iter().map(|&i| self.depth(i)).collect();
        let n = ids.len();
        let mut m = Array2::<T>::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let d = self.distance_unchecked(ids[i], ids[j], depths[i], depths[j]);
                m[[i, j]] = d;
                m[[j, i]] = d;
            }
        }
        Ok(m)
    }

    /// Distances between every row id and every column id.
    pub fn cross_distances(&self, rows: &[NodeId], cols: &[NodeId]) -> Result<Array2<T>> {
        for &id in rows.iter().chain(cols) {
            self.check_id(id)?;
        }
        let dr: Vec<usize> = rows.iter().map(|&i| self.depth(i)).collect();
        let dc: Vec<usize> = cols.iter().map(|&i| self.depth(i)).collect();
        Ok(Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| {
            self.distance_unchecked(rows[i], cols[j], dr[i], dc[j])
        }))
    }

    /// All tip-pair distances, sorted ascending.
    fn sorted_tip_distances(&self) -> Vec<T> {
        let tips = self.tips();
        let m = self.patristic_matrix(&tips).expect("tips are valid ids");
        let n = tips.len();
        let mut d = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                d.push(m[[i, j]]);
            }
        }
        d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        d
    }

    /// `p`-th percentile (linear interpolation between order statistics) of
    /// all tip-pair patristic distances.
    pub fn patristic_percentile(&self, p: T) -> Result<T> {
        if !(p >= T::zero() && p <= T::lit(100.0)) {
            return Err(Error::InvalidParameter(format!("percentile {p} outside [0, 100]")));
        }
        if self.n_tips() < 2 {
            return Err(Error::InvalidParameter("percentile needs at least two tips".into()));
        }
        let d = self.sorted_tip_distances();
        let rank = p / T::lit(100.0) * T::from_count(d.len() - 1);
        let lo = rank.floor().to_usize().expect("rank in range");
        let hi = rank.ceil().to_usize().expect("rank in range");
        let frac = rank - T::from_count(lo);
        Ok(d[lo] + (d[hi] - d[lo]) * frac)
    }

    /// Maximum patristic distance between two tips.
    pub fn max_tip_distance(&self) -> Result<T> {
        self.patristic_percentile(T::lit(100.0))
    }

    /// Minimal subtree spanning `tips`, with degree-2 nodes suppressed and
    /// their edge lengths merged.
    pub fn induced_subtree(&self, tips: &[NodeId]) -> Result<Phylogeny<T>> {
        let mut keep = vec![false; self.len()];
        for &t in tips {
            self.check_id(t)?;
            if !self.is_tip(t) {
                return Err(Error::InvalidParameter(format!(
                    "`{}` is not a tip",
                    self.label(t)
                )));
            }
            if keep[t] {
                return Err(Error::InvalidParameter(format!(
                    "tip `{}` listed twice",
                    self.label(t)
                )));
            }
            keep[t] = true;
        }
        if tips.len() < 2 {
            return Err(Error::InvalidParameter("induced subtree needs at least two tips".into()));
        }
        let mut count = vec![0usize; self.len()];
        for id in (0..self.len()).rev() {
            if keep[id] {
                count[id] += 1;
            }
            if let Some(p) = self.nodes[id].parent {
                count[p] += count[id];
            }
        }
        let live = |id: NodeId| -> Vec<NodeId> {
            self.nodes[id]
                .children
                .iter()
                .copied()
                .filter(|&c| count[c] > 0)
                .collect()
        };
        let mut lca = self.root();
        loop {
            let kids = live(lca);
            if kids.len() == 1 {
                lca = kids[0];
            } else {
                break;
            }
        }

        let mut b = Builder::new();
        // (original node, new parent, accumulated edge length)
        let mut stack: Vec<(NodeId, Option<NodeId>, T)> = vec![(lca, None, T::zero())];
        while let Some((orig, parent, length)) = stack.pop() {
            let kids = live(orig);
            if kids.len() == 1 {
                let k = kids[0];
                stack.push((k, parent, length + self.nodes[k].branch_length));
                continue;
            }
            let id = b.add(parent, length, Some(self.nodes[orig].label.clone()));
            for &k in kids.iter().rev() {
                stack.push((k, Some(id), self.nodes[k].branch_length));
            }
        }
        b.finish()
    }

    /// Serialize to Newick. Auto-generated internal labels are omitted since
    /// parsing regenerates them.
    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        self.write_node(self.root(), &mut out);
        out.push(';');
        out
    }

    fn write_node(&self, id: NodeId, out: &mut String) {
        let node = &self.nodes[id];
        if !node.children.is_empty() {
            out.push('(');
            for (i, &c) in node.children.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                self.write_node(c, out);
            }
            out.push(')');
        }
        if node.is_tip() || node.label != auto_label(id) {
            write_label(&node.label, out);
        }
        if node.parent.is_some() {
            let _ = write!(out, ":{}", node.branch_length);
        }
    }
}

fn write_label(label: &str, out: &mut String) {
    let needs_quotes = label
        .chars()
        .any(|c| c.is_whitespace() || "()[]':;,".contains(c));
    if needs_quotes {
        out.push('\'');
        out.push_str(&label.replace('\'', "''"));
        out.push('\'');
    } else {
        out.push_str(label);
    }
}

/// Serialize a tree to Newick.
pub fn write_newick<T: Real>(t: &Phylogeny<T>) -> String {
    t.to_newick()
}

/// Parse a single `;`-terminated Newick statement.
pub fn parse_newick<T: Real>(text: &str) -> Result<Phylogeny<T>> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        builder: Builder::new(),
    };
    p.skip_ws()?;
    if p.pos >= p.src.len() {
        return Err(p.error("empty input"));
    }
    p.subtree(None)?;
    p.skip_ws()?;
    match p.peek() {
        Some(b';') => p.pos += 1,
        Some(c) => return Err(p.error(&format!("unexpected `{}`", c as char))),
        None => return Err(p.error("missing terminating `;`")),
    }
    p.skip_ws()?;
    if p.pos < p.src.len() {
        return Err(p.error("trailing characters after `;`"));
    }
    p.builder.finish()
}

struct Parser<'a, T> {
    src: &'a [u8],
    pos: usize,
    builder: Builder<T>,
}

impl<T: Real> Parser<'_, T> {
    fn error(&self, msg: &str) -> Error {
        Error::Syntax {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) -> Result<()> {
        loop {
            match self.peek() {
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(b'[') => {
                    let start = self.pos;
                    while self.peek().is_some_and(|c| c != b']') {
                        self.pos += 1;
                    }
                    if self.peek().is_none() {
                        self.pos = start;
                        return Err(self.error("unterminated comment"));
                    }
                    self.pos += 1;
                }
                _ => return Ok(()),
            }
        }
    }

    fn subtree(&mut self, parent: Option<NodeId>) -> Result<NodeId> {
        self.skip_ws()?;
        let id = self.builder.add(parent, T::zero(), None);
        if self.peek() == Some(b'(') {
            let open = self.pos;
            self.pos += 1;
            loop {
                self.subtree(Some(id))?;
                self.skip_ws()?;
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    Some(c) => {
                        return Err(self.error(&format!("expected `,` or `)`, found `{}`", c as char)))
                    }
                    None => {
                        return Err(Error::Syntax {
                            pos: open,
                            msg: "unbalanced parenthesis".into(),
                        })
                    }
                }
            }
        }
        self.skip_ws()?;
        let label = self.label()?;
        self.builder.labels[id] = label;
        self.skip_ws()?;
        if self.peek() == Some(b':') {
            self.pos += 1;
            self.skip_ws()?;
            let len = self.number()?;
            if parent.is_some() {
                self.builder.nodes[id].branch_length = len;
            }
        } else if parent.is_some() {
            self.builder.missing_lengths += 1;
        }
        Ok(id)
    }

    fn label(&mut self) -> Result<Option<String>> {
        if self.peek() == Some(b'\'') {
            let start = self.pos;
            self.pos += 1;
            let mut out = Vec::new();
            loop {
                match self.peek() {
                    Some(b'\'') if self.src.get(self.pos + 1) == Some(&b'\'') => {
                        out.push(b'\'');
                        self.pos += 2;
                    }
                    Some(b'\'') => {
                        self.pos += 1;
                        break;
                    }
                    Some(c) => {
                        out.push(c);
                        self.pos += 1;
                    }
                    None => {
                        self.pos = start;
                        return Err(self.error("unterminated quoted label"));
                    }
                }
            }
            return String::from_utf8(out)
                .map(Some)
                .map_err(|_| self.error("label is not valid UTF-8"));
        }
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_whitespace() || b"()[]':;,".contains(&c) {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Ok(None);
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .map(|s| Some(s.to_string()))
            .map_err(|_| self.error("label is not valid UTF-8"))
    }

    fn number(&mut self) -> Result<T> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || b"+-.eE".contains(&c) {
                self.pos += 1;
            } else {
                break;
            }
        }
        let tok = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        let v: f64 = tok.parse().map_err(|_| Error::Syntax {
            pos: start,
            msg: format!("invalid branch length `{tok}`"),
        })?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Syntax {
                pos: start,
                msg: format!("branch length `{tok}` must be non-negative"),
            });
        }
        Ok(T::lit(v))
    }
}

/// Source of branch lengths for simulated trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchLengthSampler<T> {
    /// `exp(N(mu, sigma²))`.
    LogNormal { mu: f64, sigma: f64 },
    /// Uniform draws from an observed list of lengths.
    Empirical(Vec<T>),
    Constant(T),
}

impl<T: Real> Default for BranchLengthSampler<T> {
    fn default() -> Self {
        BranchLengthSampler::LogNormal { mu: -1.0, sigma: 1.0 }
    }
}

impl<T: Real> BranchLengthSampler<T> {
    /// Read one positive decimal per line; blank lines are skipped.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_lines(&text)
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line.parse().map_err(|_| {
                Error::Format(format!("line {}: `{line}` is not a number", lineno + 1))
            })?;
            values.push(T::lit(v));
        }
        let s = BranchLengthSampler::Empirical(values);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            BranchLengthSampler::LogNormal { mu, sigma } => {
                mu.is_finite() && sigma.is_finite() && *sigma >= 0.0
            }
            BranchLengthSampler::Empirical(v) => {
                !v.is_empty() && v.iter().all(|x| *x > T::zero() && x.is_finite())
            }
            BranchLengthSampler::Constant(c) => *c > T::zero() && c.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid branch-length sampler {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        match self {
            BranchLengthSampler::LogNormal { mu, sigma } => {
                let d = LogNormal::new(*mu, *sigma).expect("validated parameters");
                T::lit(d.sample(rng).max(f64::MIN_POSITIVE))
            }
            BranchLengthSampler::Empirical(v) => *v.choose(rng).expect("non-empty"),
            BranchLengthSampler::Constant(c) => *c,
        }
    }
}

/// Random binary tree grown by repeatedly splitting a uniformly chosen tip
/// (Yule process); tips are labeled `t1..tn` in preorder.
pub fn generate_random_tree<T: Real>(
    n_tips: usize,
    sampler: &BranchLengthSampler<T>,
    seed: u64,
) -> Result<Phylogeny<T>> {
    if n_tips < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 tips, got {n_tips}")));
    }
    sampler.validate()?;
    let mut topo: StreamRng = rng::stream(seed, "tree-topology", 0);
    let mut children: Vec<Vec<usize>> = vec![vec![1, 2], vec![], vec![]];
    let mut tips: Vec<usize> = vec![1, 2];
    while tips.len() < n_tips {
        let pick = topo.random_range(0..tips.len());
        let node = tips.swap_remove(pick);
        let a = children.len();
        children.push(vec![]);
        children.push(vec![]);
        children[node] = vec![a, a + 1];
        tips.push(a);
        tips.push(a + 1);
    }

    let mut lengths: StreamRng = rng::stream(seed, "tree-lengths", 0);
    let mut b = Builder::new();
    let mut tip_no = 0usize;
    let mut stack: Vec<(usize, Option<NodeId>)> = vec![(0, None)];
    while let Some((raw, parent)) = stack.pop() {
        let len = if parent.is_some() {
            sampler.sample(&mut lengths)
        } else {
            T::zero()
        };
        let label = if children[raw].is_empty() {
            tip_no += 1;
            Some(format!("t{tip_no}"))
        } else {
            None
        };
        let id = b.add(parent, len, label);
        for &c in children[raw].iter().rev() {
            stack.push((c, Some(id)));
        }
    }
    b.finish()
}

/// Map from label to node id for all nodes.
pub fn label_index<T: Real>(t: &Phylogeny<T>) -> HashMap<String, NodeId> {
    t.nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.label.clone(), i))
        .collect()
}
