//! Citation graph construction, per-paper subgraph extraction, pruning,
//! and dataset splits.
//!
//! Edges are directed: `u -> w` means paper `u` cites paper `w`. All
//! adjacency is kept in ordered maps so every operation is deterministic.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;

#[derive(Debug, Error)]
pub enum CiteGraphError {
    #[error("node `{0}` is not in the graph")]
    MissingNode(String),
    #[error("split sizes too large: val {n_val} + test {n_test} must be < {nodes} nodes")]
    SplitTooLarge { n_val: usize, n_test: usize, nodes: usize },
    #[error("cannot read graph file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("edge list line {line}: expected `citing<TAB>cited`")]
    BadEdgeLine { line: usize },
    #[error("invalid split file: {0}")]
    BadSplit(String),
}

/// Directed citation graph over paper ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CitationGraph {
    nodes: BTreeSet<String>,
    out: BTreeMap<String, BTreeSet<String>>,
    inc: BTreeMap<String, BTreeSet<String>>,
    edge_count: usize,
}

impl CitationGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: &str) {
        self.nodes.insert(id.to_owned());
    }

    /// Insert edge `u -> w` (u cites w); endpoints are added as needed.
    /// Duplicate edges are ignored.
    pub fn add_edge(&mut self, u: &str, w: &str) {
        self.add_node(u);
        self.add_node(w);
        if self.out.entry(u.to_owned()).or_default().insert(w.to_owned()) {
            self.inc.entry(w.to_owned()).or_default().insert(u.to_owned());
            self.edge_count += 1;
        }
    }

    pub fn remove_node(&mut self, id: &str) {
        if !self.nodes.remove(id) {
            return;
        }
        if let Some(outs) = self.out.remove(id) {
            self.edge_count -= outs.len();
            for w in outs {
                if let Some(ins) = self.inc.get_mut(&w) {
                    ins.remove(id);
                }
            }
        }
        if let Some(ins) = self.inc.remove(id) {
            for u in ins {
                if let Some(outs) = self.out.get_mut(&u) {
                    if outs.remove(id) {
                        self.edge_count -= 1;
                    }
                }
            }
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains(id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn nodes(&self) -> impl Iterator<Item = &String> {
        self.nodes.iter()
    }

    /// Papers cited by `u`, ascending by id.
    pub fn out_neighbors(&self, u: &str) -> impl Iterator<Item = &String> {
        self.out.get(u).into_iter().flatten()
    }

    /// Papers citing `w`, ascending by id.
    pub fn in_neighbors(&self, w: &str) -> impl Iterator<Item = &String> {
        self.inc.get(w).into_iter().flatten()
    }

    pub fn out_degree(&self, u: &str) -> usize {
        self.out.get(u).map_or(0, |s| s.len())
    }

    pub fn in_degree(&self, w: &str) -> usize {
        self.inc.get(w).map_or(0, |s| s.len())
    }

    /// Distinct 1-hop neighbors ignoring direction, excluding `id` itself.
    pub fn undirected_neighbors(&self, id: &str) -> BTreeSet<&String> {
        let mut set: BTreeSet<&String> = self.out_neighbors(id).collect();
        set.extend(self.in_neighbors(id));
        set.remove(&id.to_owned());
        set
    }

    pub fn has_edge(&self, u: &str, w: &str) -> bool {
        self.out.get(u).is_some_and(|s| s.contains(w))
    }

    /// All edges `(citing, cited)`, ascending.
    pub fn edges(&self) -> impl Iterator<Item = (&String, &String)> {
        self.out.iter().flat_map(|(u, ws)| ws.iter().map(move |w| (u, w)))
    }

    /// Subgraph induced on `keep`: those nodes plus every edge whose two
    /// endpoints are both kept.
    pub fn induced_subgraph(&self, keep: &BTreeSet<String>) -> CitationGraph {
        let mut g = CitationGraph::new();
        for id in keep {
            if self.contains(id) {
                g.add_node(id);
            }
        }
        for (u, w) in self.edges() {
            if keep.contains(u) && keep.contains(w) {
                g.add_edge(u, w);
            }
        }
        g
    }

    /// Edge-list serialization: one `citing<TAB>cited` per line.
    pub fn to_edgelist_string(&self) -> String {
        let mut s = String::new();
        for (u, w) in self.edges() {
            s.push_str(u);
            s.push('\t');
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_edgelist_str(text: &str) -> Result<CitationGraph, CiteGraphError> {
        let mut g = CitationGraph::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(u), Some(w), None) if !u.is_empty() && !w.is_empty() => g.add_edge(u, w),
                _ => return Err(CiteGraphError::BadEdgeLine { line: idx + 1 }),
            }
        }
        Ok(g)
    }

    pub fn save_edgelist(&self, path: &Path) -> Result<(), CiteGraphError> {
        fs::write(path, self.to_edgelist_string())
            .map_err(|e| CiteGraphError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load_edgelist(path: &Path) -> Result<CitationGraph, CiteGraphError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CiteGraphError::Io { path: path.display().to_string(), source: e })?;
        Self::from_edgelist_str(&text)
    }
}

/// Build the corpus-level citation graph: one node per record, one edge
/// per reference that resolves inside the corpus. Returns the graph and
/// the number of dangling references dropped.
pub fn build_graph(corpus: &Corpus) -> (CitationGraph, usize) {
    let mut g = CitationGraph::new();
    let mut dangling = 0usize;
    for (id, rec) in &corpus.records {
        g.add_node(id);
        for r in &rec.references {
            if corpus.records.contains_key(r) {
                g.add_edge(id, r);
            } else {
                dangling += 1;
            }
        }
    }
    (g, dangling)
}

fn weakly_connected_components(g: &CitationGraph) -> Vec<BTreeSet<String>> {
    let mut seen: BTreeSet<&String> = BTreeSet::new();
    let mut comps = Vec::new();
    for start in g.nodes() {
        if seen.contains(start) {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        seen.insert(start);
        while let Some(u) = queue.pop_front() {
            comp.insert(u.clone());
            for v in g.undirected_neighbors(u) {
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// Keep the largest weakly-connected component, then repeatedly remove
/// every node whose undirected neighbor count is exactly 1 (all such
/// nodes of a round are removed together, degrees are recomputed between
/// rounds). If pruning empties the component, the single node with the
/// highest undirected degree (tie: lowest id) is retained instead.
pub fn prune_and_connect(g: &CitationGraph) -> CitationGraph {
    let comps = weakly_connected_components(g);
    let Some(largest) = comps.iter().max_by_key(|c| c.len()) else {
        return CitationGraph::new();
    };
    let component = g.induced_subgraph(largest);
    let mut sub = component.clone();
    loop {
        let victims: Vec<String> = sub
            .nodes()
            .filter(|n| sub.undirected_neighbors(n).len() == 1)
            .cloned()
            .collect();
        if victims.is_empty() {
            break;
        }
        for v in victims {
            sub.remove_node(&v);
        }
    }
    if sub.node_count() == 0 {
        // Fallback: degrees measured in the original component.
        let keep = component
            .nodes()
            .max_by(|a, b| {
                let da = component.undirected_neighbors(a).len();
                let db = component.undirected_neighbors(b).len();
                da.cmp(&db).then_with(|| b.cmp(a))
            })
            .cloned()
            .expect("component is nonempty");
        let mut single = CitationGraph::new();
        single.add_node(&keep);
        return single;
    }
    sub
}

/// BFS along cited-direction edges from `v`: the returned graph contains
/// `v`, every transitively-cited node, and every cite edge out of a
/// visited node. Cycles terminate because nodes are enqueued once; edges
/// into already-visited nodes are still added.
pub fn reference_closure(g: &CitationGraph, v: &str) -> Result<CitationGraph, CiteGraphError> {
    if !g.contains(v) {
        return Err(CiteGraphError::MissingNode(v.to_owned()));
    }
    let mut gv = CitationGraph::new();
    gv.add_node(v);
    let mut queue = VecDeque::from([v.to_owned()]);
    while let Some(u) = queue.pop_front() {
        for w in g.out_neighbors(&u) {
            if !gv.contains(w) {
                gv.add_node(w);
                queue.push_back(w.clone());
            }
            gv.add_edge(&u, w);
        }
    }
    Ok(gv)
}

/// `v` plus every node within `k` cited-direction hops, capped at
/// `max_nodes` by breadth order then ascending paper id; the induced
/// edges are kept and a self-loop is added on every retained node.
pub fn khop_subgraph(
    closure: &CitationGraph,
    v: &str,
    k: usize,
    max_nodes: usize,
) -> Result<CitationGraph, CiteGraphError> {
    if !closure.contains(v) {
        return Err(CiteGraphError::MissingNode(v.to_owned()));
    }
    assert!(max_nodes >= 1, "max_nodes must be at least 1");

    let mut retained: Vec<String> = vec![v.to_owned()];
    let mut seen: BTreeSet<String> = BTreeSet::from([v.to_owned()]);
    let mut frontier: Vec<String> = vec![v.to_owned()];
    for _ in 0..k {
        let mut next: BTreeSet<String> = BTreeSet::new();
        for u in &frontier {
            for w in closure.out_neighbors(u) {
                if !seen.contains(w) {
                    next.insert(w.clone());
                }
            }
        }
        for w in &next {
            seen.insert(w.clone());
            retained.push(w.clone());
        }
        frontier = next.into_iter().collect();
        if frontier.is_empty() {
            break;
        }
    }
    retained.truncate(max_nodes);

    let keep: BTreeSet<String> = retained.iter().cloned().collect();
    let mut sub = closure.induced_subgraph(&keep);
    for id in &keep {
        sub.add_edge(id, id);
    }
    Ok(sub)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Transductive,
    Inductive,
}

/// Disjoint train/val/test assignment over graph nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub mode: SplitMode,
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    /// Cross-set edges removed (inductive only; 0 for transductive).
    pub dropped_edges: usize,
}

impl SplitAssignment {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }

    pub fn from_json_str(text: &str) -> Result<SplitAssignment, CiteGraphError> {
        let split: SplitAssignment =
            serde_json::from_str(text).map_err(|e| CiteGraphError::BadSplit(e.to_string()))?;
        if !split.train.is_disjoint(&split.val)
            || !split.train.is_disjoint(&split.test)
            || !split.val.is_disjoint(&split.test)
        {
            return Err(CiteGraphError::BadSplit("sets are not disjoint".into()));
        }
        Ok(split)
    }

    pub fn subset(&self, name: &str) -> Option<&BTreeSet<String>> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn check_sizes(g: &CitationGraph, n_val: usize, n_test: usize) -> Result<(), CiteGraphError> {
    if n_val + n_test >= g.node_count() {
        return Err(CiteGraphError::SplitTooLarge {
            n_val,
            n_test,
            nodes: g.node_count(),
        });
    }
    Ok(())
}

/// Uniform random disjoint val/test samples under `seed`; the remainder
/// is train and every edge is retained.
pub fn split_transductive(
    g: &CitationGraph,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<SplitAssignment, CiteGraphError> {
    check_sizes(g, n_val, n_test)?;
    let mut ids: Vec<&String> = g.nodes().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let val: BTreeSet<String> = ids[..n_val].iter().map(|s| (*s).clone()).collect();
    let test: BTreeSet<String> = ids[n_val..n_val + n_test].iter().map(|s| (*s).clone()).collect();
    let train: BTreeSet<String> =
        ids[n_val + n_test..].iter().map(|s| (*s).clone()).collect();
    Ok(SplitAssignment { mode: SplitMode::Transductive, train, val, test, dropped_edges: 0 })
}

/// Grow `want` nodes by undirected BFS inside `eligible`, starting from
/// the eligible node that comes first in `perm_rank`; if a component is
/// exhausted the growth restarts from the next-ranked eligible node.
fn bfs_grow(
    g: &CitationGraph,
    eligible: &BTreeSet<String>,
    want: usize,
    perm_rank: &HashMap<&String, usize>,
) -> BTreeSet<String> {
    let mut taken: BTreeSet<String> = BTreeSet::new();
    while taken.len() < want {
        let start = eligible
            .iter()
            .filter(|id| !taken.contains(*id))
            .min_by_key(|id| perm_rank[*id])
            .cloned();
        let Some(start) = start else { break };
        let mut queue = VecDeque::from([start.clone()]);
        taken.insert(start);
        while taken.len() < want {
            let Some(u) = queue.pop_front() else { break };
            for v in g.undirected_neighbors(&u) {
                if eligible.contains(v) && !taken.contains(v) {
                    taken.insert(v.clone());
                    queue.push_back(v.clone());
                    if taken.len() == want {
                        break;
                    }
                }
            }
        }
    }
    taken
}

/// Grow the val set by BFS from a seeded start node, then the test set by
/// BFS from a fresh start outside val; the remainder is train. Every edge
/// crossing two different sets is dropped (counted in `dropped_edges`).
pub fn split_inductive(
    g: &CitationGraph,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<SplitAssignment, CiteGraphError> {
    check_sizes(g, n_val, n_test)?;
    let mut ids: Vec<&String> = g.nodes().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let perm_rank: HashMap<&String, usize> =
        ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();

    let all: BTreeSet<String> = g.nodes().cloned().collect();
    let val = bfs_grow(g, &all, n_val, &perm_rank);
    let rest: BTreeSet<String> = all.difference(&val).cloned().collect();
    let test = bfs_grow(g, &rest, n_test, &perm_rank);
    let train: BTreeSet<String> = rest.difference(&test).cloned().collect();

    let set_of = |id: &String| -> u8 {
        if val.contains(id) {
            1
        } else if test.contains(id) {
            2
        } else {
            0
        }
    };
    let dropped_edges = g.edges().filter(|(u, w)| set_of(u) != set_of(w)).count();

    Ok(SplitAssignment { mode: SplitMode::Inductive, train, val, test, dropped_edges })
}

/// Degree-bucket boundaries used by the report tables: 0, 1, 2, 3, 4-5, >=6.
pub const DEGREE_BUCKET_LABELS: [&str; 6] = ["0", "1", "2", "3", "4-5", "6+"];

pub fn degree_bucket(degree: usize) -> usize {
    match degree {
        0..=3 => degree,
        4 | 5 => 4,
        _ => 5,
    }
}

/// Shape summary of a graph: counts, average undirected degree, and the
/// out-degree histogram over the report buckets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub avg_undirected_degree: f64,
    pub out_degree_buckets: [usize; 6],
}

pub fn graph_stats(g: &CitationGraph) -> GraphStats {
    let nodes = g.node_count();
    let mut buckets = [0usize; 6];
    let mut degree_sum = 0usize;
    for id in g.nodes() {
        degree_sum += g.undirected_neighbors(id).len();
        buckets[degree_bucket(g.out_degree(id))] += 1;
    }
    GraphStats {
        nodes,
        edges: g.edge_count(),
        avg_undirected_degree: if nodes == 0 { 0.0 } else { degree_sum as f64 / nodes as f64 },
        out_degree_buckets: buckets,
    }
}

impl std::fmt::Display for GraphStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "nodes: {}", self.nodes)?;
        writeln!(f, "edges: {}", self.edges)?;
        writeln!(f, "avg undirected degree: {:.4}", self.avg_undirected_degree)?;
        writeln!(f, "out-degree histogram:")?;
        for (label, count) in DEGREE_BUCKET_LABELS.iter().zip(self.out_degree_buckets) {
            writeln!(f, "  {label:>4}: {count}")?;
        }
        Ok(())
    }
}
