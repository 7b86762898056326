//! Directed acyclic graphs over `n` variables.
//!
//! Adjacency convention: `adj[i][j] = 1` iff node `j` is a parent of node `i`.
//! Row `i` of an adjacency (or of any input mask) therefore lists the
//! variables that the model of node `i` is allowed to read.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

/// Square 0/1 matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u8>>", into = "Vec<Vec<u8>>")]
pub struct BinaryMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl BinaryMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Structural(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &b) in row.iter().enumerate() {
                match b {
                    0 => {}
                    1 => m.set(i, j, true),
                    other => return param(format!("matrix entry {other} is not 0/1")),
                }
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|i| self.row(i).iter().map(|&b| b as u8).collect())
            .collect()
    }

    /// Kahn's algorithm on the graph whose edges are `j -> i` for `get(i, j)`.
    /// Returns `None` when a cycle exists.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.n;
        let mut indeg: Vec<usize> = (0..n)
            .map(|i| (0..n).filter(|&j| self.get(i, j)).count())
            .collect();
        let mut ready: Vec<usize> = (0..n).rev().filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(j) = ready.pop() {
            order.push(j);
            for i in (0..n).rev() {
                if self.get(i, j) {
                    indeg[i] -= 1;
                    if indeg[i] == 0 {
                        ready.push(i);
                    }
                }
            }
            // keep lowest index first among ready nodes
            ready.sort_unstable_by(|a, b| b.cmp(a));
        }
        (order.len() == n).then_some(order)
    }

    pub fn is_acyclic(&self) -> bool {
        self.find_cycle().is_none()
    }

    /// Nodes of some directed cycle in traversal order (each node is a parent
    /// of the next, the last a parent of the first), or `None` if acyclic.
    pub fn find_cycle(&self) -> Option<Vec<usize>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        let n = self.n;
        let mut mark = vec![Mark::New; n];
        for start in 0..n {
            if mark[start] != Mark::New {
                continue;
            }
            // (node, next child candidate)
            let mut stack = vec![(start, 0usize)];
            mark[start] = Mark::Open;
            while let Some(&mut (u, ref mut next)) = stack.last_mut() {
                if *next == n {
                    mark[u] = Mark::Done;
                    stack.pop();
                    continue;
                }
                let v = *next;
                *next += 1;
                // edge u -> v exists iff v lists u as parent
                if self.get(v, u) {
                    match mark[v] {
                        Mark::Open => {
                            let pos = stack.iter().position(|&(w, _)| w == v)?;
                            return Some(stack[pos..].iter().map(|&(w, _)| w).collect());
                        }
                        Mark::New => {
                            mark[v] = Mark::Open;
                            stack.push((v, 0));
                        }
                        Mark::Done => {}
                    }
                }
            }
        }
        None
    }
}

impl TryFrom<Vec<Vec<u8>>> for BinaryMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<u8>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<BinaryMatrix> for Vec<Vec<u8>> {
    fn from(m: BinaryMatrix) -> Self {
        m.to_rows()
    }
}

pub type NodeSet = BTreeSet<usize>;

/// Directed acyclic graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BinaryMatrix", into = "BinaryMatrix")]
pub struct Dag {
    adj: BinaryMatrix,
}

impl TryFrom<BinaryMatrix> for Dag {
    type Error = Error;

    fn try_from(adj: BinaryMatrix) -> Result<Self> {
        Dag::from_adjacency(adj)
    }
}

impl From<Dag> for BinaryMatrix {
    fn from(d: Dag) -> Self {
        d.adj
    }
}

impl Dag {
    pub fn empty(n: usize) -> Self {
        Self {
            adj: BinaryMatrix::zeros(n),
        }
    }

    pub fn from_adjacency(adj: BinaryMatrix) -> Result<Self> {
        if adj.n() == 0 {
            return param("graph must have at least one node");
        }
        if (0..adj.n()).any(|i| adj.get(i, i)) {
            return Err(Error::Structural("self-loop in adjacency".into()));
        }
        if !adj.is_acyclic() {
            return Err(Error::Structural("adjacency contains a cycle".into()));
        }
        Ok(Self { adj })
    }

    /// Build from `(parent, child)` pairs.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = BinaryMatrix::zeros(n);
        for &(p, c) in edges {
            if p >= n || c >= n {
                return param(format!("edge {p}->{c} out of range for n={n}"));
            }
            adj.set(c, p, true);
        }
        Self::from_adjacency(adj)
    }

    pub fn n(&self) -> usize {
        self.adj.n()
    }

    pub fn adjacency(&self) -> &BinaryMatrix {
        &self.adj
    }

    pub fn has_edge(&self, parent: usize, child: usize) -> bool {
        self.adj.get(child, parent)
    }

    pub fn edge_count(&self) -> usize {
        self.adj.count_ones()
    }

    /// `(parent, child)` pairs ordered by parent, then child.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for p in 0..n {
            for c in 0..n {
                if self.adj.get(c, p) {
                    out.push((p, c));
                }
            }
        }
        out
    }

    fn check_node(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return param(format!("node {i} out of range for n={}", self.n()));
        }
        Ok(())
    }

    pub fn parents(&self, i: usize) -> Result<NodeSet> {
        self.check_node(i)?;
        Ok((0..self.n()).filter(|&j| self.adj.get(i, j)).collect())
    }

    pub fn children(&self, i: usize) -> Result<NodeSet> {
        self.check_node(i)?;
        Ok((0..self.n()).filter(|&j| self.adj.get(j, i)).collect())
    }

    pub fn roots(&self) -> NodeSet {
        (0..self.n())
            .filter(|&i| !self.adj.row(i).iter().any(|&b| b))
            .collect()
    }

    pub fn is_root(&self, i: usize) -> bool {
        !self.adj.row(i).iter().any(|&b| b)
    }

    /// All nodes reachable from `i` along directed edges, excluding `i`.
    pub fn descendants(&self, i: usize) -> Result<NodeSet> {
        self.check_node(i)?;
        let mut seen = NodeSet::new();
        let mut stack = vec![i];
        while let Some(u) = stack.pop() {
            for v in 0..self.n() {
                if self.adj.get(v, u) && seen.insert(v) {
                    stack.push(v);
                }
            }
        }
        Ok(seen)
    }

    pub fn topological_order(&self) -> Result<Vec<usize>> {
        self.adj
            .topological_order()
            .ok_or_else(|| Error::Structural("cycle detected".into()))
    }

    /// Transpose of the adjacency: row `i` lists the children of `i`.
    pub fn anticausal_mask(&self) -> BinaryMatrix {
        self.adj.transpose()
    }

    /// Undirected skeleton: row `i` lists parents and children of `i`.
    pub fn skeleton_mask(&self) -> BinaryMatrix {
        let t = self.adj.transpose();
        let n = self.n();
        let mut s = BinaryMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                s.set(i, j, self.adj.get(i, j) || t.get(i, j));
            }
        }
        s
    }

    /// Edge-list text: `n` on the first line, then one `parent child` per line.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("{}\n", self.n());
        for (p, c) in self.edges() {
            s.push_str(&format!("{p} {c}\n"));
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let n: usize = lines
            .next()
            .ok_or_else(|| Error::Parse("empty edge list".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("node count: {e}")))?;
        let mut edges = Vec::new();
        for line in lines {
            let mut it = line.split_whitespace();
            let mut next = || -> Result<usize> {
                it.next()
                    .ok_or_else(|| Error::Parse(format!("bad edge line `{line}`")))?
                    .parse()
                    .map_err(|e| Error::Parse(format!("bad edge line `{line}`: {e}")))
            };
            let p = next()?;
            let c = next()?;
            edges.push((p, c));
        }
        Self::from_edges(n, &edges)
    }
}

/// Erdős–Rényi DAG with expected `density * n` edges.
///
/// Nodes are placed in a uniformly random order and each forward pair is
/// connected independently with probability `min(1, 2d/(n-1))`.
pub fn generate_er<R: Rng + ?Sized>(n: usize, density: f64, rng: &mut R) -> Result<Dag> {
    if n < 2 {
        return param(format!("ER graph needs n >= 2, got {n}"));
    }
    if !(density > 0.0) || !density.is_finite() {
        return param(format!("ER density must be positive, got {density}"));
    }
    let p = (2.0 * density / (n - 1) as f64).min(1.0);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut adj = BinaryMatrix::zeros(n);
    for a in 0..n {
        for b in (a + 1)..n {
            if rng.gen::<f64>() < p {
                adj.set(order[b], order[a], true);
            }
        }
    }
    Dag::from_adjacency(adj)
}

/// Fixed topologies for structured-graph experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// `i -> i+1`
    Chain,
    /// `i -> j` for every `i < j`
    Full,
    /// `i -> n-1` for every `i < n-1`
    Collider,
    /// binary tree, `(i-1)/2 -> i`
    Tree,
    /// `i -> i+1` and `i -> i+2`
    Bidiag,
    /// binary tree plus grandparent edges `((i-1)/2 - 1)/2 -> i`
    Jungle,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Chain,
        Preset::Full,
        Preset::Collider,
        Preset::Tree,
        Preset::Bidiag,
        Preset::Jungle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Chain => "chain",
            Preset::Full => "full",
            Preset::Collider => "collider",
            Preset::Tree => "tree",
            Preset::Bidiag => "bidiag",
            Preset::Jungle => "jungle",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown graph preset `{s}`")))
    }
}

pub fn generate_preset(kind: Preset, n: usize) -> Result<Dag> {
    if n < 2 {
        return param(format!("preset graph needs n >= 2, got {n}"));
    }
    let mut edges = Vec::new();
    match kind {
        Preset::Chain => edges.extend((0..n - 1).map(|i| (i, i + 1))),
        Preset::Full => {
            for i in 0..n {
                edges.extend((i + 1..n).map(|j| (i, j)));
            }
        }
        Preset::Collider => edges.extend((0..n - 1).map(|i| (i, n - 1))),
        Preset::Tree => edges.extend((1..n).map(|i| ((i - 1) / 2, i))),
        Preset::Bidiag => {
            for i in 0..n {
                if i + 1 < n {
                    edges.push((i, i + 1));
                }
                if i + 2 < n {
                    edges.push((i, i + 2));
                }
            }
        }
        Preset::Jungle => {
            for i in 1..n {
                let parent = (i - 1) / 2;
                edges.push((parent, i));
                if parent >= 1 {
                    edges.push(((parent - 1) / 2, i));
                }
            }
        }
    }
    Dag::from_edges(n, &edges)
}

/// Structural Hamming distance between two adjacency matrices.
///
/// Each unordered pair `{i, j}` whose edge state differs (missing, extra or
/// reversed) contributes 1.
pub fn shd(a: &BinaryMatrix, b: &BinaryMatrix) -> Result<usize> {
    if a.n() != b.n() {
        return param(format!("SHD dimension mismatch: {} vs {}", a.n(), b.n()));
    }
    let n = a.n();
    let mut d = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            if (a.get(i, j), a.get(j, i)) != (b.get(i, j), b.get(j, i)) {
                d += 1;
            }
        }
    }
    Ok(d)
}

pub fn shd_dag(a: &Dag, b: &Dag) -> Result<usize> {
    shd(a.adjacency(), b.adjacency())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn set(xs: &[usize]) -> NodeSet {
        xs.iter().copied().collect()
    }

    #[test]
    fn presets_match_definitions() {
        let chain = generate_preset(Preset::Chain, 3).unwrap();
        assert_eq!(chain.edges(), vec![(0, 1), (1, 2)]);
        assert_eq!(generate_preset(Preset::Full, 4).unwrap().edge_count(), 6);
        let col = generate_preset(Preset::Collider, 4).unwrap();
        assert_eq!(col.edges(), vec![(0, 3), (1, 3), (2, 3)]);
        let tree = generate_preset(Preset::Tree, 7).unwrap();
        assert_eq!(tree.parents(5).unwrap(), set(&[2]));
        let jungle = generate_preset(Preset::Jungle, 7).unwrap();
        assert_eq!(jungle.parents(5).unwrap(), set(&[0, 2]));
        assert_eq!(jungle.parents(1).unwrap(), set(&[0]));
        let bidiag = generate_preset(Preset::Bidiag, 4).unwrap();
        assert_eq!(bidiag.edge_count(), 5);
        assert!("pentagon".parse::<Preset>().is_err());
        assert!(generate_preset(Preset::Chain, 1).is_err());
    }

    #[test]
    fn er_small_and_clamped() {
        let mut rng = seed::rng(3);
        let g = generate_er(3, 1.0, &mut rng).unwrap();
        assert!(g.adjacency().is_acyclic());
        let g = generate_er(2, 10.0, &mut rng).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert!(generate_er(1, 1.0, &mut rng).is_err());
        assert!(generate_er(5, 0.0, &mut rng).is_err());
        assert!(generate_er(5, f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn er_mean_edge_count() {
        // Monte-Carlo estimate of the expectation d * n = 20.
        let mut rng = seed::rng(11);
        let draws = 10_000;
        let total: usize = (0..draws)
            .map(|_| generate_er(20, 1.0, &mut rng).unwrap().edge_count())
            .sum();
        let mean = total as f64 / draws as f64;
        assert!((mean - 20.0).abs() < 1.0, "mean edge count {mean}");
    }

    #[test]
    fn neighbourhoods() {
        let chain = generate_preset(Preset::Chain, 3).unwrap();
        assert_eq!(chain.parents(1).unwrap(), set(&[0]));
        assert_eq!(chain.children(1).unwrap(), set(&[2]));
        assert_eq!(chain.roots(), set(&[0]));
        assert!(chain.parents(3).is_err());
        let col = generate_preset(Preset::Collider, 3).unwrap();
        assert_eq!(col.parents(2).unwrap(), set(&[0, 1]));
        assert_eq!(chain.descendants(0).unwrap(), set(&[1, 2]));
    }

    #[test]
    fn topological_orders() {
        let chain = generate_preset(Preset::Chain, 3).unwrap();
        assert_eq!(chain.topological_order().unwrap(), vec![0, 1, 2]);
        let col = generate_preset(Preset::Collider, 3).unwrap();
        let order = col.topological_order().unwrap();
        assert!(order == vec![0, 1, 2] || order == vec![1, 0, 2]);
        let empty = Dag::empty(4);
        let mut order = empty.topological_order().unwrap();
        order.sort();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn masks() {
        let g = Dag::from_edges(2, &[(0, 1)]).unwrap();
        let anti = g.anticausal_mask();
        assert_eq!(anti.row(0), &[false, true]);
        let skel = g.skeleton_mask();
        assert_eq!(skel.count_ones(), 2);
        assert_eq!(skel, skel.transpose());
        let e = Dag::empty(3);
        assert_eq!(e.anticausal_mask().count_ones(), 0);
        assert_eq!(e.skeleton_mask().count_ones(), 0);
    }

    #[test]
    fn shd_examples() {
        let a = Dag::from_edges(2, &[(0, 1)]).unwrap();
        let r = Dag::from_edges(2, &[(1, 0)]).unwrap();
        let e = Dag::empty(2);
        assert_eq!(shd_dag(&a, &a).unwrap(), 0);
        assert_eq!(shd_dag(&a, &e).unwrap(), 1);
        assert_eq!(shd_dag(&a, &r).unwrap(), 1);
        assert!(shd(&BinaryMatrix::zeros(2), &BinaryMatrix::zeros(3)).is_err());
    }

    #[test]
    fn rejects_cycles_and_self_loops() {
        assert!(Dag::from_edges(2, &[(0, 1), (1, 0)]).is_err());
        assert!(Dag::from_edges(2, &[(1, 1)]).is_err());
        assert!(Dag::from_edges(3, &[(0, 1), (1, 2), (2, 0)]).is_err());
        assert!(Dag::from_edges(2, &[(0, 5)]).is_err());
    }

    #[test]
    fn finds_cycles() {
        // 0 -> 1 -> 2 -> 0 plus a tail 3 -> 0
        let mut m = BinaryMatrix::zeros(4);
        m.set(1, 0, true);
        m.set(2, 1, true);
        m.set(0, 2, true);
        m.set(0, 3, true);
        let mut c = m.find_cycle().unwrap();
        c.sort_unstable();
        assert_eq!(c, vec![0, 1, 2]);
        m.set(0, 2, false);
        assert!(m.find_cycle().is_none());
        assert!(m.is_acyclic());
    }

    #[test]
    fn edge_list_round_trip() {
        let g = generate_preset(Preset::Jungle, 9).unwrap();
        let text = g.to_edge_list();
        assert!(text.starts_with("9\n"));
        assert_eq!(Dag::from_edge_list(&text).unwrap(), g);
        assert!(Dag::from_edge_list("").is_err());
        assert!(Dag::from_edge_list("3\n0 x\n").is_err());
    }

    #[test]
    fn json_rejects_cyclic_matrix() {
        let bad = "[[0,1],[1,0]]";
        assert!(serde_json::from_str::<Dag>(bad).is_err());
        let g = generate_preset(Preset::Chain, 4).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.starts_with("[[0,0,0,0],[1,0,0,0]"));
        assert_eq!(serde_json::from_str::<Dag>(&s).unwrap(), g);
    }
}
