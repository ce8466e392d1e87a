//! Relay graph model: connectivity, vertex-disjoint paths, Byzantine capacity.
//!
//! Disjoint paths come from a unit-vertex-capacity max-flow on the
//! node-split graph. Among all maximum path sets the one returned is the
//! lexicographically smallest sequence, built path by path with a flow
//! feasibility check at every extension, so every node that runs the
//! search on the same graph derives the same plan.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

/// An undirected link, stored with the smaller endpoint first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge(pub NodeId, pub NodeId);

impl Edge {
    pub fn new(a: NodeId, b: NodeId) -> Self {
        if a <= b {
            Edge(a, b)
        } else {
            Edge(b, a)
        }
    }

    pub fn touches(&self, n: NodeId) -> bool {
        self.0 == n || self.1 == n
    }

    pub fn other(&self, n: NodeId) -> Option<NodeId> {
        if self.0 == n {
            Some(self.1)
        } else if self.1 == n {
            Some(self.0)
        } else {
            None
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("graph has no nodes")]
    Empty,
    #[error("self-loop on node {0}")]
    SelfLoop(NodeId),
    #[error("duplicate edge {0}-{1}")]
    DuplicateEdge(NodeId, NodeId),
    #[error("edge {0}-{1} references a node outside 0..{2}")]
    NodeOutOfRange(NodeId, NodeId, usize),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("source and target are both node {0}")]
    SameEndpoints(NodeId),
    #[error("node {0} is not in the graph")]
    UnknownNode(NodeId),
}

/// Connected simple undirected graph on nodes `0..node_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    node_count: usize,
    edges: BTreeSet<Edge>,
    adjacency: Vec<Vec<NodeId>>,
}

impl Graph {
    pub fn new(
        node_count: usize,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
    ) -> Result<Self, TopologyError> {
        if node_count == 0 {
            return Err(TopologyError::Empty);
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= node_count || b >= node_count {
                return Err(TopologyError::NodeOutOfRange(a, b, node_count));
            }
            if a == b {
                return Err(TopologyError::SelfLoop(a));
            }
            if !set.insert(Edge::new(a, b)) {
                return Err(TopologyError::DuplicateEdge(a, b));
            }
        }
        let mut adjacency = vec![Vec::new(); node_count];
        for e in &set {
            adjacency[e.0].push(e.1);
            adjacency[e.1].push(e.0);
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        let g = Graph {
            node_count,
            edges: set,
            adjacency,
        };
        if !g.is_connected_avoiding(&BTreeSet::new()) {
            return Err(TopologyError::Disconnected);
        }
        Ok(g)
    }

    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b)));
        Self::new(n, edges).expect("complete graph is valid")
    }

    pub fn ring(n: usize) -> Self {
        assert!(n >= 3);
        Self::new(n, (0..n).map(|i| (i, (i + 1) % n))).expect("ring is valid")
    }

    /// The same node set with `removed` links dropped. The result may be
    /// disconnected; it is only meant for path searches.
    pub fn without_edges(&self, removed: &BTreeSet<Edge>) -> Graph {
        let edges: BTreeSet<Edge> = self.edges.difference(removed).copied().collect();
        let mut adjacency = vec![Vec::new(); self.node_count];
        for e in &edges {
            adjacency[e.0].push(e.1);
            adjacency[e.1].push(e.0);
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        Graph {
            node_count: self.node_count,
            edges,
            adjacency,
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn neighbors(&self, n: NodeId) -> &[NodeId] {
        &self.adjacency[n]
    }

    pub fn degree(&self, n: NodeId) -> usize {
        self.adjacency[n].len()
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        a != b && self.edges.contains(&Edge::new(a, b))
    }

    pub fn contains(&self, n: NodeId) -> bool {
        n < self.node_count
    }

    /// Whether the nodes outside `removed` form a connected graph.
    pub fn is_connected_avoiding(&self, removed: &BTreeSet<NodeId>) -> bool {
        let Some(start) = (0..self.node_count).find(|n| !removed.contains(n)) else {
            return true;
        };
        let mut seen = vec![false; self.node_count];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if !seen[v] && !removed.contains(&v) {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count + removed.iter().filter(|&&n| n < self.node_count).count() == self.node_count
    }
}

/// Internally vertex-disjoint paths between an ordered node pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSet {
    pub source: NodeId,
    pub target: NodeId,
    pub paths: Vec<Vec<NodeId>>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Checks every structural invariant against `g`.
    pub fn check(&self, g: &Graph) -> Result<(), PathSetViolation> {
        let mut internal_seen = BTreeSet::new();
        let mut direct_seen = false;
        for (i, p) in self.paths.iter().enumerate() {
            if p.len() < 2 || p[0] != self.source || p[p.len() - 1] != self.target {
                return Err(PathSetViolation::BadEndpoints(i));
            }
            if p.windows(2).any(|w| !g.has_edge(w[0], w[1])) {
                return Err(PathSetViolation::MissingEdge(i));
            }
            let unique: BTreeSet<_> = p.iter().collect();
            if unique.len() != p.len() {
                return Err(PathSetViolation::RepeatedNode(i));
            }
            if p.len() == 2 {
                if direct_seen {
                    return Err(PathSetViolation::SharedInternal(i));
                }
                direct_seen = true;
            }
            for &n in &p[1..p.len() - 1] {
                if !internal_seen.insert(n) {
                    return Err(PathSetViolation::SharedInternal(i));
                }
            }
        }
        Ok(())
    }
}

/// Links along a node path, in order.
pub fn path_links(path: &[NodeId]) -> impl Iterator<Item = Edge> + '_ {
    path.windows(2).map(|w| Edge::new(w[0], w[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PathSetViolation {
    #[error("path {0} does not run from source to target")]
    BadEndpoints(usize),
    #[error("path {0} uses a link that is not in the topology")]
    MissingEdge(usize),
    #[error("path {0} repeats a node")]
    RepeatedNode(usize),
    #[error("path {0} shares an internal node or the direct link with an earlier path")]
    SharedInternal(usize),
}

/// Minimum number of node removals that disconnect `g`; `N - 1` for a
/// complete graph.
pub fn node_connectivity(g: &Graph) -> usize {
    let n = g.node_count();
    let mut best = n.saturating_sub(1);
    for s in 0..n {
        for t in s + 1..n {
            if !g.has_edge(s, t) {
                best = best.min(local_connectivity_avoiding(g, s, t, &BTreeSet::new()));
            }
        }
    }
    best
}

/// `min(C - 1, floor((N - 1) / 3))`.
pub fn byzantine_capacity(g: &Graph) -> usize {
    node_connectivity(g)
        .saturating_sub(1)
        .min((g.node_count() - 1) / 3)
}

pub fn local_connectivity(g: &Graph, s: NodeId, t: NodeId) -> Result<usize, TopologyError> {
    check_pair(g, s, t)?;
    Ok(local_connectivity_avoiding(g, s, t, &BTreeSet::new()))
}

/// Number of internally disjoint s-t paths that avoid the `excluded` nodes.
pub fn local_connectivity_avoiding(
    g: &Graph,
    s: NodeId,
    t: NodeId,
    excluded: &BTreeSet<NodeId>,
) -> usize {
    if s == t || excluded.contains(&s) || excluded.contains(&t) {
        return 0;
    }
    let mut net = SplitNetwork::build(g, s, t, excluded, true, None);
    net.max_flow(&[(s, usize::MAX)], t, usize::MAX)
}

pub fn max_disjoint_paths(g: &Graph, s: NodeId, t: NodeId) -> Result<PathSet, TopologyError> {
    check_pair(g, s, t)?;
    Ok(disjoint_paths_avoiding(g, s, t, &BTreeSet::new()))
}

/// Lexicographically smallest maximum set of internally disjoint s-t
/// paths in `g` with `excluded` nodes removed.
pub fn disjoint_paths_avoiding(
    g: &Graph,
    s: NodeId,
    t: NodeId,
    excluded: &BTreeSet<NodeId>,
) -> PathSet {
    let mut target_count = local_connectivity_avoiding(g, s, t, excluded);
    let mut used: BTreeSet<NodeId> = excluded.clone();
    let mut direct_free = true;
    let mut paths = Vec::with_capacity(target_count);

    while target_count > 0 {
        let mut path = vec![s];
        let mut on_path: BTreeSet<NodeId> = BTreeSet::new();
        loop {
            let u = *path.last().expect("path starts at s");
            let mut extended = false;
            for &v in g.neighbors(u) {
                if v == s || on_path.contains(&v) || used.contains(&v) {
                    continue;
                }
                if v == t {
                    let is_direct = u == s;
                    if is_direct && !direct_free {
                        continue;
                    }
                    let mut blocked = used.clone();
                    blocked.extend(on_path.iter().copied());
                    let rest = remaining_flow(g, s, t, &blocked, direct_free && !is_direct, None);
                    if rest + 1 >= target_count {
                        path.push(t);
                        extended = true;
                        break;
                    }
                    continue;
                }
                let mut blocked = used.clone();
                blocked.extend(on_path.iter().copied());
                let rest = remaining_flow(g, s, t, &blocked, direct_free, Some((v, target_count)));
                if rest >= target_count {
                    path.push(v);
                    on_path.insert(v);
                    extended = true;
                    break;
                }
            }
            debug_assert!(extended, "feasible extension must exist");
            if !extended || *path.last().unwrap() == t {
                break;
            }
        }
        if path.len() == 2 {
            direct_free = false;
        }
        used.extend(path[1..path.len() - 1].iter().copied());
        paths.push(path);
        target_count -= 1;
    }
    PathSet {
        source: s,
        target: t,
        paths,
    }
}

/// Flow to `t` with `blocked` nodes removed, from `s` alone or, given a
/// partial-path head `(h, k)`, from `s` capped at `k - 1` plus one unit
/// from `h`.
fn remaining_flow(
    g: &Graph,
    s: NodeId,
    t: NodeId,
    blocked: &BTreeSet<NodeId>,
    direct_free: bool,
    head: Option<(NodeId, usize)>,
) -> usize {
    let mut blocked = blocked.clone();
    if let Some((h, _)) = head {
        blocked.remove(&h);
    }
    let mut net = SplitNetwork::build(g, s, t, &blocked, direct_free, head.map(|(h, _)| h));
    match head {
        // The head's unit enters at its out-side; its split arc is closed so
        // no other path can pass through it.
        Some((h, k)) => net.max_flow(&[(s, k - 1), (h, 1)], t, usize::MAX),
        None => net.max_flow(&[(s, usize::MAX)], t, usize::MAX),
    }
}

fn check_pair(g: &Graph, s: NodeId, t: NodeId) -> Result<(), TopologyError> {
    if !g.contains(s) {
        return Err(TopologyError::UnknownNode(s));
    }
    if !g.contains(t) {
        return Err(TopologyError::UnknownNode(t));
    }
    if s == t {
        return Err(TopologyError::SameEndpoints(s));
    }
    Ok(())
}

/// Residual network with every node split into `in -> out` arcs of unit
/// capacity (source and sink unbounded).
struct SplitNetwork {
    n: usize,
    head: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<usize>,
}

impl SplitNetwork {
    const INF: usize = usize::MAX / 4;

    fn node_in(v: NodeId) -> usize {
        2 * v
    }

    fn node_out(v: NodeId) -> usize {
        2 * v + 1
    }

    fn build(
        g: &Graph,
        s: NodeId,
        t: NodeId,
        blocked: &BTreeSet<NodeId>,
        direct_free: bool,
        head: Option<NodeId>,
    ) -> Self {
        let n = 2 * g.node_count() + 1;
        let mut net = SplitNetwork {
            n,
            head: vec![Vec::new(); n],
            to: Vec::new(),
            cap: Vec::new(),
        };
        for v in 0..g.node_count() {
            if (blocked.contains(&v) && v != s && v != t) || head == Some(v) {
                continue;
            }
            let c = if v == s || v == t { Self::INF } else { 1 };
            net.add_arc(Self::node_in(v), Self::node_out(v), c);
        }
        for e in g.edges() {
            let (a, b) = (e.0, e.1);
            let a_ok = !blocked.contains(&a) || a == s || a == t;
            let b_ok = !blocked.contains(&b) || b == s || b == t;
            if !a_ok || !b_ok {
                continue;
            }
            let is_direct = (a == s && b == t) || (a == t && b == s);
            if is_direct {
                if direct_free {
                    net.add_arc(Self::node_out(s), Self::node_in(t), 1);
                }
                continue;
            }
            // Nothing may flow back into the source.
            if b != s {
                net.add_arc(Self::node_out(a), Self::node_in(b), Self::INF);
            }
            if a != s {
                net.add_arc(Self::node_out(b), Self::node_in(a), Self::INF);
            }
        }
        net
    }

    fn add_arc(&mut self, u: usize, v: usize, c: usize) {
        self.head[u].push(self.to.len());
        self.to.push(v);
        self.cap.push(c);
        self.head[v].push(self.to.len());
        self.to.push(u);
        self.cap.push(0);
    }

    /// Edmonds-Karp from a set of (node, capacity) sources entering at the
    /// nodes' out-sides.
    fn max_flow(&mut self, sources: &[(NodeId, usize)], t: NodeId, limit: usize) -> usize {
        let super_source = self.n - 1;
        for &(v, c) in sources {
            self.add_arc(super_source, Self::node_out(v), c.min(Self::INF));
        }
        let sink = Self::node_in(t);
        let mut flow = 0;
        while flow < limit {
            let mut prev_arc = vec![usize::MAX; self.n];
            let mut seen = vec![false; self.n];
            seen[super_source] = true;
            let mut queue = VecDeque::from([super_source]);
            while let Some(u) = queue.pop_front() {
                if u == sink {
                    break;
                }
                for &a in &self.head[u] {
                    let v = self.to[a];
                    if self.cap[a] > 0 && !seen[v] {
                        seen[v] = true;
                        prev_arc[v] = a;
                        queue.push_back(v);
                    }
                }
            }
            if !seen[sink] {
                break;
            }
            let mut bottleneck = Self::INF;
            let mut v = sink;
            while v != super_source {
                let a = prev_arc[v];
                bottleneck = bottleneck.min(self.cap[a]);
                v = self.to[a ^ 1];
            }
            let mut v = sink;
            while v != super_source {
                let a = prev_arc[v];
                self.cap[a] -= bottleneck;
                self.cap[a ^ 1] += bottleneck;
                v = self.to[a ^ 1];
            }
            flow += bottleneck;
            if bottleneck >= Self::INF {
                break;
            }
        }
        flow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimum s-t vertex cut by exhaustive subset search; the direct link,
    /// if any, adds one path that no vertex cut removes.
    fn brute_local_cut(g: &Graph, s: NodeId, t: NodeId) -> usize {
        let others: Vec<NodeId> = (0..g.node_count()).filter(|&v| v != s && v != t).collect();
        let direct = usize::from(g.has_edge(s, t));
        let mut best = others.len();
        for mask in 0u32..(1 << others.len()) {
            let removed: BTreeSet<NodeId> = others
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &v)| v)
                .collect();
            if removed.len() >= best {
                continue;
            }
            if !reachable_without_direct(g, s, t, &removed) {
                best = removed.len();
            }
        }
        best + direct
    }

    fn reachable_without_direct(g: &Graph, s: NodeId, t: NodeId, removed: &BTreeSet<NodeId>) -> bool {
        let mut seen = vec![false; g.node_count()];
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(u) = stack.pop() {
            for &v in g.neighbors(u) {
                if (u == s && v == t) || (u == t && v == s) {
                    continue;
                }
                if v == t {
                    return true;
                }
                if !seen[v] && !removed.contains(&v) {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        false
    }

    /// Maximum number of pairwise internally-disjoint paths over all
    /// combinations of simple s-t paths.
    fn brute_max_paths(g: &Graph, s: NodeId, t: NodeId) -> usize {
        fn walk(g: &Graph, t: NodeId, path: &mut Vec<NodeId>, out: &mut Vec<Vec<NodeId>>) {
            let u = *path.last().unwrap();
            for &v in g.neighbors(u) {
                if path.contains(&v) {
                    continue;
                }
                path.push(v);
                if v == t {
                    out.push(path.clone());
                } else {
                    walk(g, t, path, out);
                }
                path.pop();
            }
        }
        let mut all = Vec::new();
        walk(g, t, &mut vec![s], &mut all);
        let internals: Vec<BTreeSet<NodeId>> = all
            .iter()
            .map(|p| p[1..p.len() - 1].iter().copied().collect())
            .collect();
        fn best(internals: &[BTreeSet<NodeId>], from: usize, taken: &BTreeSet<NodeId>) -> usize {
            let mut result = 0;
            for i in from..internals.len() {
                if internals[i].is_disjoint(taken) {
                    let mut next = taken.clone();
                    next.extend(internals[i].iter().copied());
                    result = result.max(1 + best(internals, i + 1, &next));
                }
            }
            result
        }
        best(&internals, 0, &BTreeSet::new())
    }

    fn brute_connectivity(g: &Graph) -> usize {
        let n = g.node_count();
        let mut best = n - 1;
        for mask in 0u32..(1 << n) {
            let removed: BTreeSet<NodeId> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            if removed.len() >= best || removed.len() + 2 > n {
                continue;
            }
            if !g.is_connected_avoiding(&removed) {
                best = removed.len();
            }
        }
        best
    }

    #[test]
    fn complete_graph_connectivity() {
        assert_eq!(node_connectivity(&Graph::complete(4)), 3);
    }

    #[test]
    fn path_graph_connectivity() {
        let g = Graph::new(3, [(0, 1), (1, 2)]).unwrap();
        assert_eq!(node_connectivity(&g), 1);
    }

    #[test]
    fn ring_of_five_matches_brute_force() {
        let g = Graph::ring(5);
        let expected = brute_connectivity(&g);
        assert_eq!(expected, 2);
        assert_eq!(node_connectivity(&g), expected);
    }

    #[test]
    fn ring_opposite_nodes_have_two_arcs() {
        let g = Graph::ring(5);
        let ps = max_disjoint_paths(&g, 0, 2).unwrap();
        assert_eq!(ps.paths, vec![vec![0, 1, 2], vec![0, 4, 3, 2]]);
        ps.check(&g).unwrap();
    }

    #[test]
    fn complete_five_has_four_paths() {
        let g = Graph::complete(5);
        let ps = max_disjoint_paths(&g, 1, 3).unwrap();
        assert_eq!(ps.len(), 4);
        assert!(ps.paths.contains(&vec![1, 3]));
        ps.check(&g).unwrap();
    }

    #[test]
    fn same_endpoints_rejected() {
        let g = Graph::ring(4);
        assert_eq!(
            max_disjoint_paths(&g, 2, 2),
            Err(TopologyError::SameEndpoints(2))
        );
    }

    #[test]
    fn invalid_graphs_rejected() {
        assert_eq!(Graph::new(0, []), Err(TopologyError::Empty));
        assert_eq!(Graph::new(2, [(1, 1)]), Err(TopologyError::SelfLoop(1)));
        assert_eq!(
            Graph::new(2, [(0, 1), (1, 0)]),
            Err(TopologyError::DuplicateEdge(1, 0))
        );
        assert_eq!(Graph::new(3, [(0, 1)]), Err(TopologyError::Disconnected));
        assert!(matches!(
            Graph::new(3, [(0, 9)]),
            Err(TopologyError::NodeOutOfRange(..))
        ));
    }

    #[test]
    fn capacity_examples() {
        assert_eq!(byzantine_capacity(&Graph::complete(4)), 1);
        assert_eq!(byzantine_capacity(&Graph::ring(5)), 1);
        // 13-node circulant with offsets {1, 2}: connectivity 4.
        let g = Graph::new(13, (0..13).flat_map(|i| [(i, (i + 1) % 13), (i, (i + 2) % 13)])).unwrap();
        assert_eq!(node_connectivity(&g), 4);
        assert_eq!(byzantine_capacity(&g), 3);
    }

    fn random_connected(n: usize, p: f64, rng: &mut impl rand::Rng) -> Graph {
        loop {
            let mut edges = Vec::new();
            for a in 0..n {
                for b in a + 1..n {
                    if rng.gen_bool(p) {
                        edges.push((a, b));
                    }
                }
            }
            if let Ok(g) = Graph::new(n, edges) {
                return g;
            }
        }
    }

    #[test]
    fn seven_node_graphs_match_path_enumeration() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let g = random_connected(7, 0.45, &mut rng);
            for (s, t) in [(0, 6), (1, 4), (2, 3)] {
                let ps = max_disjoint_paths(&g, s, t).unwrap();
                ps.check(&g).unwrap();
                assert_eq!(ps.len(), brute_max_paths(&g, s, t), "{g:?} {s}-{t}");
                assert_eq!(ps.len(), brute_local_cut(&g, s, t));
            }
        }
    }

    #[test]
    fn removing_capacity_nodes_keeps_graph_connected() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let g = random_connected(7, 0.6, &mut rng);
            let cap = byzantine_capacity(&g);
            let c = node_connectivity(&g);
            for mask in 0u32..(1 << 7) {
                let removed: BTreeSet<NodeId> = (0..7).filter(|i| mask & (1 << i) != 0).collect();
                if removed.len() <= cap {
                    assert!(g.is_connected_avoiding(&removed));
                }
            }
            if c < 6 {
                let cut_exists = (0u32..(1 << 7)).any(|mask| {
                    let removed: BTreeSet<NodeId> =
                        (0..7).filter(|i| mask & (1 << i) != 0).collect();
                    removed.len() == c && !g.is_connected_avoiding(&removed)
                });
                assert!(cut_exists);
            }
        }
    }

    #[test]
    fn excluded_nodes_reduce_paths() {
        let g = Graph::complete(5);
        let excluded: BTreeSet<NodeId> = [2].into();
        assert_eq!(local_connectivity_avoiding(&g, 0, 1, &excluded), 3);
        let ps = disjoint_paths_avoiding(&g, 0, 1, &excluded);
        assert!(ps.paths.iter().all(|p| !p.contains(&2)));
    }
}
