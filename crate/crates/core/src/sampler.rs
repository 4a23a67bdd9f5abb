//! Budgeted importance sampling of dense subgraphs and the temporal split
//! into pre-training / fine-tuning views.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{PheError, Result};
use crate::graph::{Csr, HeteroGraph, NodeId, NodeType, RelationId};

/// Year boundaries. The pre-training view holds edges with year
/// `< pretrain_end`; the three fine-tuning ranges are inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub pretrain_end: i32,
    pub train: (i32, i32),
    pub val: (i32, i32),
    pub test: (i32, i32),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            pretrain_end: 2014,
            train: (2014, 2016),
            val: (2017, 2017),
            test: (2018, 2019),
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [("train", self.train), ("val", self.val), ("test", self.test)];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(PheError::Config(format!("{name} range {lo}..={hi} is reversed")));
            }
        }
        if self.train.0 < self.pretrain_end {
            return Err(PheError::Config(format!(
                "train range starts at {} before pretrain_end {}",
                self.train.0, self.pretrain_end
            )));
        }
        for w in ranges.windows(2) {
            let ((a, (_, a_hi)), (b, (b_lo, _))) = (w[0], w[1]);
            if b_lo <= a_hi {
                return Err(PheError::Config(format!("{a} and {b} ranges overlap")));
            }
        }
        Ok(())
    }

    fn contains(range: (i32, i32), y: i32) -> bool {
        range.0 <= y && y <= range.1
    }
}

/// Edge-filtered projections sharing one node table.
#[derive(Clone, Debug)]
pub struct GraphViews {
    pub pretrain: HeteroGraph,
    pub fine_train: HeteroGraph,
    pub fine_val: HeteroGraph,
    pub fine_test: HeteroGraph,
}

/// Splits edges by their inherited year. Edges without a year belong to
/// the pre-training view only.
pub fn temporal_split(g: &HeteroGraph, spec: &SplitSpec) -> Result<GraphViews> {
    spec.validate()?;
    let pretrain = g.filter_edges(|_, _, _, y| y.is_none_or(|y| y < spec.pretrain_end));
    let in_range = |range| move |_, _, _, y: Option<i32>| y.is_some_and(|y| SplitSpec::contains(range, y));
    let fine_train = g.filter_edges(in_range(spec.train));
    let fine_val = g.filter_edges(in_range(spec.val));
    let fine_test = g.filter_edges(in_range(spec.test));
    if pretrain.edge_count() == 0 {
        return Err(PheError::Empty("pre-training view has no edges".into()));
    }
    if fine_train.edge_count() == 0 {
        return Err(PheError::Empty("fine-tuning train view has no edges".into()));
    }
    Ok(GraphViews {
        pretrain,
        fine_train,
        fine_val,
        fine_test,
    })
}

/// Per-type candidate scores accumulated from already-sampled nodes.
#[derive(Clone, Debug)]
pub struct Budget {
    scores: Vec<BTreeMap<NodeId, f64>>,
    sampled: HashSet<NodeId>,
}

impl Budget {
    pub fn new(type_count: usize) -> Self {
        Budget {
            scores: vec![BTreeMap::new(); type_count],
            sampled: HashSet::new(),
        }
    }

    pub fn score(&self, t: NodeType, u: NodeId) -> Option<f64> {
        self.scores[t.0].get(&u).copied()
    }

    pub fn candidates(&self, t: NodeType) -> &BTreeMap<NodeId, f64> {
        &self.scores[t.0]
    }

    pub fn is_sampled(&self, v: NodeId) -> bool {
        self.sampled.contains(&v)
    }

    /// Marks `v` sampled and drops it from every budget.
    pub fn mark_sampled(&mut self, v: NodeId, t: NodeType) {
        self.sampled.insert(v);
        self.scores[t.0].remove(&v);
    }

    /// Adds `1/deg_r(v)` to every unsampled neighbor `u` of `v` under each
    /// relation `r`, and removes `v` from the budgets.
    pub fn update(&mut self, v: NodeId, g: &HeteroGraph) {
        self.mark_sampled(v, g.node_type(v));
        for r in 0..g.relation_count() {
            let r = RelationId(r);
            let w = g.normalized_degree(v, r);
            for &u in g.neighbors_slice(v, r) {
                if !self.sampled.contains(&u) {
                    *self.scores[g.node_type(u).0].entry(u).or_insert(0.0) += w;
                }
            }
        }
    }

    /// Draws up to `n` distinct candidates of type `t` with probability
    /// proportional to score, successively without replacement
    /// (exponential-key method). Returned in draw order.
    pub fn draw<R: Rng + ?Sized>(&self, t: NodeType, n: usize, rng: &mut R) -> Vec<NodeId> {
        let mut keyed: Vec<(f64, NodeId)> = self.scores[t.0]
            .iter()
            .filter(|(_, &w)| w > 0.0)
            .map(|(&u, &w)| {
                let r: f64 = rng.random::<f64>();
                // r in [0, 1): ln(1 - r) is finite and ≤ 0
                ((1.0 - r).ln() / w, u)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        keyed.into_iter().take(n).map(|(_, u)| u).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub nodes_per_type: Vec<usize>,
    /// `shortfall[i][t]`: how many fewer than `n` nodes of type `t` were
    /// available at iteration `i`.
    pub shortfall: Vec<Vec<usize>>,
    pub induced_edges: Vec<usize>,
}

/// Node subset with induced edges, addressed by local ids `0..len()`.
#[derive(Clone, Debug)]
pub struct SampledSubgraph {
    nodes: Vec<NodeId>,
    local: HashMap<NodeId, usize>,
    node_types: Vec<NodeType>,
    type_count: usize,
    features: Tensor,
    edges: Vec<Vec<(usize, usize)>>,
    adjacency: Vec<Csr>,
    relation_types: Vec<(NodeType, NodeType)>,
    pub depth: usize,
    pub width: usize,
    pub stats: SamplerStats,
}

impl SampledSubgraph {
    /// Induces the subgraph on `nodes` (global ids, no duplicates).
    pub fn induce(g: &HeteroGraph, nodes: Vec<NodeId>) -> Self {
        let local: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let node_types: Vec<NodeType> = nodes.iter().map(|&v| g.node_type(v)).collect();
        let features = g.features().gather_rows(&nodes);
        let mut edges = vec![Vec::new(); g.relation_count()];
        for (lv, &v) in nodes.iter().enumerate() {
            for (r, list) in edges.iter_mut().enumerate() {
                for &u in g.neighbors_slice(v, RelationId(r)) {
                    if let Some(&lu) = local.get(&u) {
                        list.push((lv, lu));
                    }
                }
            }
        }
        for list in &mut edges {
            list.sort_unstable();
        }
        let adjacency = edges
            .iter()
            .map(|list| Csr::build(nodes.len(), list.iter().map(|&(a, b)| (a, b, ())).collect()).0)
            .collect();
        let mut nodes_per_type = vec![0; g.node_type_count()];
        for t in &node_types {
            nodes_per_type[t.0] += 1;
        }
        let stats = SamplerStats {
            nodes_per_type,
            shortfall: Vec::new(),
            induced_edges: edges.iter().map(Vec::len).collect(),
        };
        SampledSubgraph {
            nodes,
            local,
            node_types,
            type_count: g.node_type_count(),
            features,
            edges,
            adjacency,
            relation_types: g.relations().iter().map(|r| (r.src_type, r.dst_type)).collect(),
            depth: 0,
            width: 0,
            stats,
        }
    }

    /// The whole graph as one subgraph.
    pub fn full(g: &HeteroGraph) -> Self {
        Self::induce(g, (0..g.node_count()).collect())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn global(&self, local: usize) -> NodeId {
        self.nodes[local]
    }

    pub fn global_ids(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn local(&self, global: NodeId) -> Option<usize> {
        self.local.get(&global).copied()
    }

    pub fn node_type(&self, local: usize) -> NodeType {
        self.node_types[local]
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_types
    }

    pub fn type_count(&self) -> usize {
        self.type_count
    }

    pub fn relation_count(&self) -> usize {
        self.edges.len()
    }

    pub fn relation_types(&self, r: RelationId) -> (NodeType, NodeType) {
        self.relation_types[r.0]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Induced `(src, dst)` local edges of relation `r`, sorted.
    pub fn edges(&self, r: RelationId) -> &[(usize, usize)] {
        &self.edges[r.0]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Local out-neighbors of `v` under `r`.
    pub fn neighbors(&self, v: usize, r: RelationId) -> &[usize] {
        self.adjacency[r.0].row(v)
    }

    pub fn is_adjacent(&self, v: usize, u: usize, r: RelationId) -> bool {
        self.adjacency[r.0].contains(v, u)
    }

    /// Deduplicated local neighbors over all relations, sorted.
    pub fn all_neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .adjacency
            .iter()
            .flat_map(|a| a.row(v).iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Local nodes of type `t`, ascending.
    pub fn nodes_of_type(&self, t: NodeType) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.node_types[i] == t).collect()
    }
}

/// Samples `n` nodes per type per iteration for `depth` iterations,
/// starting from `seeds`, then induces all edges among the sampled nodes.
pub fn sample_subgraph<R: Rng + ?Sized>(
    g: &HeteroGraph,
    seeds: &[NodeId],
    n: usize,
    depth: usize,
    rng: &mut R,
) -> Result<SampledSubgraph> {
    if seeds.is_empty() {
        return Err(PheError::Empty("no seed nodes".into()));
    }
    if n == 0 || depth == 0 {
        return Err(PheError::Config(format!(
            "sampling width and depth must be positive (got n={n}, L={depth})"
        )));
    }
    let mut budget = Budget::new(g.node_type_count());
    let mut order = Vec::new();
    for &s in seeds {
        if s >= g.node_count() {
            return Err(PheError::InvalidId { kind: "node", id: s });
        }
        if !budget.is_sampled(s) {
            budget.mark_sampled(s, g.node_type(s));
            order.push(s);
        }
    }
    for &s in &order {
        budget.update(s, g);
    }
    let mut shortfall = Vec::with_capacity(depth);
    for _ in 0..depth {
        let mut fresh = Vec::new();
        let mut short = vec![0; g.node_type_count()];
        for t in 0..g.node_type_count() {
            let picked = budget.draw(NodeType(t), n, rng);
            short[t] = n - picked.len();
            fresh.extend(picked);
        }
        for &v in &fresh {
            budget.mark_sampled(v, g.node_type(v));
        }
        for &v in &fresh {
            budget.update(v, g);
        }
        order.extend(fresh);
        shortfall.push(short);
    }
    let mut sub = SampledSubgraph::induce(g, order);
    sub.depth = depth;
    sub.width = n;
    sub.stats.shortfall = shortfall;
    Ok(sub)
}

/// Draws `count` distinct seeds uniformly from nodes of type `anchor` that
/// have at least one edge in `g` and are not in `exclude`.
pub fn draw_seeds<R: Rng + ?Sized>(
    g: &HeteroGraph,
    anchor: NodeType,
    count: usize,
    exclude: &HashSet<NodeId>,
    rng: &mut R,
) -> Vec<NodeId> {
    let pool: Vec<NodeId> = g
        .nodes_of_type(anchor)
        .iter()
        .copied()
        .filter(|v| !exclude.contains(v))
        .filter(|&v| (0..g.relation_count()).any(|r| g.degree(v, RelationId(r)) > 0))
        .collect();
    let k = count.min(pool.len());
    index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Positive triplet `(v, r, u)` in a subgraph's local ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub v: usize,
    pub r: RelationId,
    pub u: usize,
}

/// Uniformly samples up to `per_relation_cap` induced edges per relation.
pub fn draw_positive_triplets<R: Rng + ?Sized>(
    sub: &SampledSubgraph,
    rng: &mut R,
    per_relation_cap: usize,
) -> Vec<Triplet> {
    let mut out = Vec::new();
    for r in 0..sub.relation_count() {
        let edges = sub.edges(RelationId(r));
        let chosen: Vec<usize> = if edges.len() <= per_relation_cap {
            (0..edges.len()).collect()
        } else {
            index::sample(rng, edges.len(), per_relation_cap).into_vec()
        };
        out.extend(chosen.into_iter().map(|i| {
            let (v, u) = edges[i];
            Triplet {
                v,
                r: RelationId(r),
                u,
            }
        }));
    }
    out
}
