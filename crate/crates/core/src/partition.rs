//! Deterministic graph partitioning by path-growing matching and coarsening.
//!
//! One level pairs nodes along a matching and merges each pair into a super
//! node; repeating it `p` times builds a hierarchy whose maps drive spatial
//! pooling and unpooling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// A set of vertex-disjoint edges.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// Edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub total_weight: f64,
}

impl Matching {
    pub fn empty() -> Self {
        Self {
            edges: Vec::new(),
            total_weight: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    fn from_edges(g: &Graph, mut edges: Vec<(usize, usize)>) -> Self {
        for e in edges.iter_mut() {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.sort_unstable();
        let total_weight = edges.iter().map(|&(i, j)| g.weight(i, j)).sum();
        Self { edges, total_weight }
    }

    /// Checks that every edge exists in `g` and no endpoint is shared.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        let n = g.node_count();
        let mut used = vec![false; n];
        for &(i, j) in &self.edges {
            if i >= n || j >= n || i == j {
                return Err(Error::Partition(format!("edge ({i},{j}) invalid for {n} nodes")));
            }
            if g.weight(i, j) <= 0.0 {
                return Err(Error::Partition(format!("edge ({i},{j}) is not in the graph")));
            }
            for v in [i, j] {
                if used[v] {
                    return Err(Error::Partition(format!("node {v} is matched twice")));
                }
                used[v] = true;
            }
        }
        Ok(())
    }

    /// True when no edge of `g` joins two unmatched nodes.
    pub fn is_maximal(&self, g: &Graph) -> bool {
        let mut used = vec![false; g.node_count()];
        for &(i, j) in &self.edges {
            used[i] = true;
            used[j] = true;
        }
        g.edges().iter().all(|&(i, j, _)| used[i] || used[j])
    }
}

/// Edge selection: grow heaviest-edge paths from the lowest-id vertex that
/// still has edges, match each path optimally, then extend the union to a
/// maximal matching greedily by descending weight.
pub fn path_grow_select(g: &Graph) -> Matching {
    let n = g.node_count();
    let mut w: Vec<f64> = g.weights().data().to_vec();
    let has_edge = |w: &[f64], v: usize| w[v * n..(v + 1) * n].iter().any(|&x| x > 0.0);

    let mut selected: Vec<(usize, usize)> = Vec::new();
    while let Some(start) = (0..n).find(|&v| has_edge(&w, v)) {
        let mut path: Vec<(usize, usize, f64)> = Vec::new();
        let mut v = start;
        while has_edge(&w, v) {
            // Heaviest incident edge; ties go to the lower neighbor id.
            let (u, weight) = w[v * n..(v + 1) * n]
                .iter()
                .enumerate()
                .filter(|(_, &x)| x > 0.0)
                .fold((usize::MAX, f64::NEG_INFINITY), |best, (u, &x)| {
                    if x > best.1 {
                        (u, x)
                    } else {
                        best
                    }
                });
            path.push((v, u, weight));
            for k in 0..n {
                w[v * n + k] = 0.0;
                w[k * n + v] = 0.0;
            }
            v = u;
        }
        let m = max_weight_matching_path(&path).expect("grown paths are simple");
        selected.extend(m.edges);
    }

    let mut used = vec![false; n];
    for &(i, j) in &selected {
        used[i] = true;
        used[j] = true;
    }
    let mut rest = g.edges();
    rest.sort_by(|a, b| match b.2.total_cmp(&a.2) {
        Ordering::Equal => (a.0, a.1).cmp(&(b.0, b.1)),
        o => o,
    });
    for (i, j, _) in rest {
        if !used[i] && !used[j] {
            used[i] = true;
            used[j] = true;
            selected.push((i, j));
        }
    }
    Matching::from_edges(g, selected)
}

/// Exact maximum-weight matching of a simple path given as consecutive
/// weighted edges, by dynamic programming. Ties exclude the later edge.
pub fn max_weight_matching_path(path: &[(usize, usize, f64)]) -> Result<Matching> {
    let mut seen: Vec<usize> = Vec::new();
    for (idx, &(a, b, w)) in path.iter().enumerate() {
        if a == b || !(w >= 0.0) {
            return Err(Error::Usage(format!("path edge {idx} ({a},{b},{w}) is invalid")));
        }
        if idx > 0 {
            let (pa, pb, _) = path[idx - 1];
            let shared = [a, b].iter().filter(|&&x| x == pa || x == pb).count();
            if shared != 1 {
                return Err(Error::Usage(format!(
                    "edges {} and {idx} do not form a path",
                    idx - 1
                )));
            }
        }
        for v in [a, b] {
            if !seen.contains(&v) {
                seen.push(v);
            }
        }
    }
    if !path.is_empty() && seen.len() != path.len() + 1 {
        return Err(Error::Usage("edge list revisits a vertex".into()));
    }

    let m = path.len();
    let mut best = vec![0.0; m + 1];
    let mut take = vec![false; m + 1];
    for i in 1..=m {
        let with = path[i - 1].2 + if i >= 2 { best[i - 2] } else { 0.0 };
        if with > best[i - 1] {
            best[i] = with;
            take[i] = true;
        } else {
            best[i] = best[i - 1];
        }
    }
    let mut edges = Vec::new();
    let mut i = m;
    while i > 0 {
        if take[i] {
            let (a, b, _) = path[i - 1];
            edges.push((a.min(b), a.max(b)));
            i = i.saturating_sub(2);
        } else {
            i -= 1;
        }
    }
    edges.sort_unstable();
    Ok(Matching {
        edges,
        total_weight: best[m],
    })
}

/// One level of the hierarchy: how fine nodes merge into super nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Coarsening {
    /// `assignment[i]` is the super node of fine node `i`.
    pub assignment: Vec<usize>,
    /// Fine nodes of each super node, ascending.
    pub members: Vec<Vec<usize>>,
    pub coarse: Graph,
}

impl Coarsening {
    /// The trivial level where every node is its own super node.
    pub fn identity(g: &Graph) -> Self {
        let n = g.node_count();
        Self {
            assignment: (0..n).collect(),
            members: (0..n).map(|i| vec![i]).collect(),
            coarse: g.clone(),
        }
    }

    pub fn fine_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn coarse_count(&self) -> usize {
        self.members.len()
    }

    /// Largest super node size.
    pub fn max_members(&self) -> usize {
        self.members.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Merges matched pairs into super nodes. Super node ids follow the smallest
/// member id; parallel edges between groups sum their weights and edges
/// inside a group disappear.
pub fn coarsen(g: &Graph, m: &Matching) -> Result<Coarsening> {
    m.validate(g)?;
    let n = g.node_count();
    let mut partner: Vec<Option<usize>> = vec![None; n];
    for &(i, j) in &m.edges {
        partner[i] = Some(j);
        partner[j] = Some(i);
    }
    let mut members: Vec<Vec<usize>> = Vec::with_capacity(n - m.len());
    let mut assignment = vec![usize::MAX; n];
    // Visiting nodes in id order assigns ids by each group's minimum member.
    for v in 0..n {
        if assignment[v] != usize::MAX {
            continue;
        }
        let id = members.len();
        let group = match partner[v] {
            Some(u) => vec![v, u],
            None => vec![v],
        };
        for &x in &group {
            assignment[x] = id;
        }
        members.push(group);
    }
    let nc = members.len();
    let mut w = Tensor::zeros(&[nc, nc]);
    for (i, j, weight) in g.edges() {
        let (a, b) = (assignment[i], assignment[j]);
        if a != b {
            let v = w.at(a, b) + weight;
            w.set(a, b, v);
            w.set(b, a, v);
        }
    }
    Ok(Coarsening {
        assignment,
        members,
        coarse: Graph::from_dense(w)?,
    })
}

/// Hierarchy of `p` coarsening levels over an original graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionMap {
    pub original: Graph,
    pub levels: Vec<Coarsening>,
}

impl PartitionMap {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Graph at `level` (0 is the original).
    pub fn graph(&self, level: usize) -> &Graph {
        if level == 0 {
            &self.original
        } else {
            &self.levels[level - 1].coarse
        }
    }

    /// Node counts from the original graph down to the coarsest level.
    pub fn node_counts(&self) -> Vec<usize> {
        (0..=self.depth()).map(|l| self.graph(l).node_count()).collect()
    }

    /// Map from original nodes to their super node at `level`.
    pub fn composed_up_to(&self, level: usize) -> Vec<usize> {
        let mut map: Vec<usize> = (0..self.original.node_count()).collect();
        for c in &self.levels[..level] {
            for v in map.iter_mut() {
                *v = c.assignment[*v];
            }
        }
        map
    }

    /// The whole hierarchy collapsed into one original → coarsest level.
    pub fn composed(&self) -> Coarsening {
        let top = self.depth();
        let assignment = self.composed_up_to(top);
        let mut members = vec![Vec::new(); self.graph(top).node_count()];
        for (v, &s) in assignment.iter().enumerate() {
            members[s].push(v);
        }
        Coarsening {
            assignment,
            members,
            coarse: self.graph(top).clone(),
        }
    }
}

/// Repeats edge selection and coarsening `p` times.
pub fn multilevel_partition(g: &Graph, p: usize) -> Result<PartitionMap> {
    if p < 1 {
        return Err(Error::Usage("partition level must be at least 1".into()));
    }
    let mut levels: Vec<Coarsening> = Vec::with_capacity(p);
    for _ in 0..p {
        let current = levels.last().map(|c| &c.coarse).unwrap_or(g);
        let m = path_grow_select(current);
        levels.push(coarsen(current, &m)?);
    }
    Ok(PartitionMap {
        original: g.clone(),
        levels,
    })
}

/// Inverse map of every level: super node → fine members.
pub fn invert_map(pm: &PartitionMap) -> Vec<Vec<Vec<usize>>> {
    pm.levels
        .iter()
        .map(|c| {
            let mut inv = vec![Vec::new(); c.coarse_count()];
            for (v, &s) in c.assignment.iter().enumerate() {
                inv[s].push(v);
            }
            inv
        })
        .collect()
}

/// Largest graph accepted by [`brute_force_matching`].
pub const BRUTE_FORCE_MAX_NODES: usize = 12;

/// Exhaustive maximum-weight matching, for checking matching quality.
pub fn brute_force_matching(g: &Graph) -> Result<Matching> {
    let n = g.node_count();
    if n > BRUTE_FORCE_MAX_NODES {
        return Err(Error::Usage(format!(
            "brute-force matching limited to {BRUTE_FORCE_MAX_NODES} nodes, got {n}"
        )));
    }
    fn search(g: &Graph, used: &mut [bool], from: usize, cur: &mut Vec<(usize, usize)>, cur_w: f64, best: &mut (f64, Vec<(usize, usize)>)) {
        let n = used.len();
        let Some(v) = (from..n).find(|&v| !used[v]) else {
            if cur_w > best.0 {
                *best = (cur_w, cur.clone());
            }
            return;
        };
        used[v] = true;
        search(g, used, v + 1, cur, cur_w, best);
        for u in v + 1..n {
            let w = g.weight(v, u);
            if !used[u] && w > 0.0 {
                used[u] = true;
                cur.push((v, u));
                search(g, used, v + 1, cur, cur_w + w, best);
                cur.pop();
                used[u] = false;
            }
        }
        used[v] = false;
    }
    let mut best = (0.0, Vec::new());
    search(g, &mut vec![false; n], 0, &mut Vec::new(), 0.0, &mut best);
    Ok(Matching::from_edges(g, best.1))
}
