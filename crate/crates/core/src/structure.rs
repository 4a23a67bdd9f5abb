//! Structure-aware contrastive task: schema-subspace enhancement of query
//! nodes with node- and type-level attention, relation-aware negatives and
//! the InfoNCE loss shared with the semantic task.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{PheError, Result};
use crate::graph::{HeteroGraph, NodeType, RelationId, SchemaReport};
use crate::queue::{NegativeQueue, QueueEntry};
use crate::sampler::{SampledSubgraph, Triplet};

/// Activation applied to the attention-weighted sum of one type block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureConfig {
    pub tau: f64,
    /// Current-batch negatives drawn per triplet before adding queued ones.
    pub batch_negatives: usize,
    pub leaky_slope: f64,
    pub fusion: Fusion,
    /// Width of the type-attention projection.
    pub type_attention_dim: usize,
    /// When false, queries are not enhanced: `h′_v = h_v`.
    pub enhance: bool,
}

impl Default for StructureConfig {
    fn default() -> Self {
        StructureConfig {
            tau: 0.2,
            batch_negatives: 32,
            leaky_slope: 0.2,
            fusion: Fusion::Tanh,
            type_attention_dim: 128,
            enhance: true,
        }
    }
}

pub fn node_att_name(query: NodeType, neighbor: NodeType) -> String {
    format!("st.node.{}.{}", query.0, neighbor.0)
}

pub const TYPE_W: &str = "st.type.w";
pub const TYPE_B: &str = "st.type.b";
pub const TYPE_A: &str = "st.type.a";

/// Relation scoring matrix `W_r` under `prefix` (`rel` unless the semantic
/// task keeps its own).
pub fn relation_name(prefix: &str, r: RelationId) -> String {
    format!("{prefix}.{}", r.0)
}

pub fn init_relation_params<R: Rng + ?Sized>(
    schema: &SchemaReport,
    hidden: usize,
    prefix: &str,
    rng: &mut R,
) -> ParamStore {
    schema
        .relations
        .iter()
        .map(|r| {
            (
                relation_name(prefix, r.id),
                Tensor::fan_balanced(hidden, hidden, hidden, hidden, rng),
            )
        })
        .collect()
}

/// Attention parameters: one `a` per (query type, neighbor type) pair
/// joined by some relation, plus the shared type-attention transform.
pub fn init_params<R: Rng + ?Sized>(
    schema: &SchemaReport,
    hidden: usize,
    config: &StructureConfig,
    rng: &mut R,
) -> ParamStore {
    let mut p = ParamStore::new();
    let pairs: std::collections::BTreeSet<(NodeType, NodeType)> =
        schema.relations.iter().map(|r| (r.src_type, r.dst_type)).collect();
    for (q, n) in pairs {
        p.insert(node_att_name(q, n), Tensor::fan_balanced(2 * hidden, 1, 2 * hidden, 1, rng));
    }
    let dt = config.type_attention_dim;
    p.insert(TYPE_W, Tensor::fan_balanced(hidden, dt, hidden, dt, rng));
    p.insert(TYPE_B, Tensor::zeros(1, dt));
    p.insert(TYPE_A, Tensor::fan_balanced(dt, 1, dt, 1, rng));
    p
}

/// Neighbors of one query node, grouped into contiguous type blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchemaSubspace {
    pub query: usize,
    pub columns: Vec<usize>,
    pub types: Vec<NodeType>,
}

impl SchemaSubspace {
    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    /// `(type, column range)` per block, in column order.
    pub fn blocks(&self) -> Vec<(NodeType, std::ops::Range<usize>)> {
        let mut out: Vec<(NodeType, std::ops::Range<usize>)> = Vec::new();
        for (i, &t) in self.types.iter().enumerate() {
            match out.last_mut() {
                Some((lt, r)) if *lt == t => r.end = i + 1,
                _ => out.push((t, i..i + 1)),
            }
        }
        out
    }

    /// `d × len` matrix of column embeddings taken from `h` (rows = nodes).
    pub fn matrix(&self, h: &Tensor) -> Tensor {
        h.gather_rows(&self.columns).transpose()
    }
}

/// All neighbors of `v` in `sub` (any relation), ordered by type then id.
pub fn build_schema_subspace(v: usize, sub: &SampledSubgraph) -> SchemaSubspace {
    let mut cols = sub.all_neighbors(v);
    cols.sort_by_key(|&u| (sub.node_type(u), u));
    SchemaSubspace {
        query: v,
        types: cols.iter().map(|&u| sub.node_type(u)).collect(),
        columns: cols,
    }
}

/// Enhanced embeddings of a batch of query nodes.
#[derive(Clone, Debug)]
pub struct EnhancedQueries {
    /// Distinct local query ids; row `i` of `h_prime` belongs to `queries[i]`.
    pub queries: Vec<usize>,
    pub h_prime: Var,
    /// `(query index, neighbor)` per subspace column, across all queries.
    pub pairs: Vec<(usize, usize)>,
    /// Node-level weight per pair (`pairs.len() × 1`).
    pub alpha: Option<Var>,
    /// `(query type, neighbor type)` per type-level weight.
    pub groups: Vec<(NodeType, NodeType)>,
    /// Type-level weight per group (`groups.len() × 1`).
    pub beta: Option<Var>,
    /// Queries with no neighbors, which fall back to their own embedding.
    pub isolated: usize,
}

impl EnhancedQueries {
    pub fn row_of(&self, v: usize) -> Option<usize> {
        self.queries.iter().position(|&q| q == v)
    }
}

/// Builds every query's schema subspace and returns
/// `h′_v = S₁ (p_a ⊙ p_b)`, with `h_v` for queries without neighbors.
/// The type weights are averaged over all queries of the same type.
pub fn enhance_queries(
    tape: &mut Tape,
    params: &ParamStore,
    config: &StructureConfig,
    sub: &SampledSubgraph,
    h: Var,
    queries: &[usize],
) -> Result<EnhancedQueries> {
    let d = tape.value(h).cols();
    let nq = queries.len();
    let mut pairs = Vec::new();
    let mut pair_seg = Vec::new();
    let mut seg_group = Vec::new();
    let mut groups: Vec<(NodeType, NodeType)> = Vec::new();
    let mut group_index: HashMap<(NodeType, NodeType), usize> = HashMap::new();
    let mut isolated_rows = Vec::new();
    for (i, &v) in queries.iter().enumerate() {
        if v >= sub.len() {
            return Err(PheError::InvalidId { kind: "node", id: v });
        }
        let s1 = build_schema_subspace(v, sub);
        if s1.is_empty() {
            isolated_rows.push(i);
            continue;
        }
        let qt = sub.node_type(v);
        for (t, range) in s1.blocks() {
            let key = (qt, t);
            let g = *group_index.entry(key).or_insert_with(|| {
                groups.push(key);
                groups.len() - 1
            });
            let seg = seg_group.len();
            seg_group.push(g);
            for c in range {
                pairs.push((i, s1.columns[c]));
                pair_seg.push(seg);
            }
        }
    }
    let isolated = isolated_rows.len();
    let own = tape.gather_rows(h, queries.to_vec());
    if pairs.is_empty() {
        return Ok(EnhancedQueries {
            queries: queries.to_vec(),
            h_prime: own,
            pairs,
            alpha: None,
            groups,
            beta: None,
            isolated,
        });
    }
    let p = pairs.len();
    let n_seg = seg_group.len();
    let hv = tape.gather_rows(h, pairs.iter().map(|&(i, _)| queries[i]).collect());
    let hu = tape.gather_rows(h, pairs.iter().map(|&(_, u)| u).collect());
    let joined = tape.concat_cols(vec![hv, hu]);

    // node-level logits, one attention vector per (query type, neighbor type)
    let mut parts = Vec::new();
    let mut order = Vec::new();
    for (g, key) in groups.iter().enumerate() {
        let rows: Vec<usize> = (0..p).filter(|&k| seg_group[pair_seg[k]] == g).collect();
        let a = tape.param(&node_att_name(key.0, key.1), params.require(&node_att_name(key.0, key.1))?);
        let x = tape.gather_rows(joined, rows.clone());
        parts.push(tape.matmul(x, a));
        order.extend(rows);
    }
    let logits = tape.concat_rows(parts);
    let logits = tape.scatter_add_rows(logits, order, p);
    let logits = tape.leaky_relu(logits, config.leaky_slope);
    let alpha = tape.segment_softmax(logits, pair_seg.clone());

    // fused embedding per (query, type) block
    let a_wide = tape.broadcast_cols(alpha, d);
    let weighted = tape.mul(hu, a_wide);
    let fused = tape.scatter_add_rows(weighted, pair_seg.clone(), n_seg);
    let fused = match config.fusion {
        Fusion::Tanh => tape.tanh(fused),
        Fusion::Identity => fused,
    };

    // type-level scores, averaged over the queries sharing a group
    let w_t = tape.param(TYPE_W, params.require(TYPE_W)?);
    let b_t = tape.param(TYPE_B, params.require(TYPE_B)?);
    let a_t = tape.param(TYPE_A, params.require(TYPE_A)?);
    let proj = tape.matmul(fused, w_t);
    let proj = tape.add_row(proj, b_t);
    let proj = tape.tanh(proj);
    let score = tape.matmul(proj, a_t);
    let mut counts = vec![0.0; groups.len()];
    for &g in &seg_group {
        counts[g] += 1.0;
    }
    let sums = tape.scatter_add_rows(score, seg_group.clone(), groups.len());
    let inv = tape.constant(Tensor::column(counts.iter().map(|c| 1.0 / c).collect()));
    let means = tape.mul(sums, inv);
    let mut qtype_index: BTreeMap<NodeType, usize> = BTreeMap::new();
    let group_qtype: Vec<usize> = groups
        .iter()
        .map(|&(qt, _)| {
            let next = qtype_index.len();
            *qtype_index.entry(qt).or_insert(next)
        })
        .collect();
    let beta = tape.segment_softmax(means, group_qtype);

    let pb = tape.gather_rows(beta, pair_seg.iter().map(|&s| seg_group[s]).collect());
    let w = tape.mul(alpha, pb);
    let w_wide = tape.broadcast_cols(w, d);
    let contrib = tape.mul(hu, w_wide);
    let mut h_prime = tape.scatter_add_rows(contrib, pairs.iter().map(|&(i, _)| i).collect(), nq);
    if isolated > 0 {
        let mut mask = Tensor::zeros(nq, d);
        for &i in &isolated_rows {
            mask.row_mut(i).fill(1.0);
        }
        let mask = tape.constant(mask);
        let keep = tape.mul(own, mask);
        h_prime = tape.add(h_prime, keep);
    }
    Ok(EnhancedQueries {
        queries: queries.to_vec(),
        h_prime,
        pairs,
        alpha: Some(alpha),
        groups,
        beta: Some(beta),
        isolated,
    })
}

/// Queries as their own enhanced embeddings (the enhancement ablation).
pub fn unenhanced(tape: &mut Tape, h: Var, queries: &[usize]) -> EnhancedQueries {
    EnhancedQueries {
        queries: queries.to_vec(),
        h_prime: tape.gather_rows(h, queries.to_vec()),
        pairs: Vec::new(),
        alpha: None,
        groups: Vec::new(),
        beta: None,
        isolated: 0,
    }
}

/// Node-level weights of `v`'s subspace columns, in column order.
pub fn node_level_weights(
    v: usize,
    sub: &SampledSubgraph,
    h: &Tensor,
    params: &ParamStore,
    config: &StructureConfig,
) -> Result<Vec<f64>> {
    let mut tape = Tape::no_grad();
    let hv = tape.constant(h.clone());
    let e = enhance_queries(&mut tape, params, config, sub, hv, &[v])?;
    let alpha = e
        .alpha
        .ok_or_else(|| PheError::Empty(format!("node {v} has no neighbors")))?;
    Ok(tape.value(alpha).data().to_vec())
}

/// Type-level weights for a query batch, one per (query type, neighbor type).
pub fn type_level_weights(
    queries: &[usize],
    sub: &SampledSubgraph,
    h: &Tensor,
    params: &ParamStore,
    config: &StructureConfig,
) -> Result<Vec<((NodeType, NodeType), f64)>> {
    let mut tape = Tape::no_grad();
    let hv = tape.constant(h.clone());
    let e = enhance_queries(&mut tape, params, config, sub, hv, queries)?;
    let Some(beta) = e.beta else {
        return Ok(Vec::new());
    };
    if e.isolated > 0 {
        log::info!("{} queries without neighbors excluded from type weights", e.isolated);
    }
    Ok(e.groups.into_iter().zip(tape.value(beta).data().iter().copied()).collect())
}

/// `S₁ (p_a ⊙ p_b)` for one query, or `h_v` when the subspace is empty.
pub fn enhance_query(s1: &SchemaSubspace, p_a: &[f64], p_b: &[f64], h: &Tensor) -> Result<Vec<f64>> {
    if p_a.len() != s1.len() || p_b.len() != s1.len() {
        return Err(PheError::Shape(format!(
            "subspace has {} columns, weights have {} and {}",
            s1.len(),
            p_a.len(),
            p_b.len()
        )));
    }
    if s1.is_empty() {
        return Ok(h.row(s1.query).to_vec());
    }
    let mut out = vec![0.0; h.cols()];
    for (k, &u) in s1.columns.iter().enumerate() {
        let w = p_a[k] * p_b[k];
        for (o, x) in out.iter_mut().zip(h.row(u)) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Up to `count` nodes of the batch with `u`'s type that are not
/// `r`-adjacent to `v` (and are neither `u` nor `v`).
pub fn relation_negatives<R: Rng + ?Sized>(
    t: Triplet,
    sub: &SampledSubgraph,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let ty = sub.node_type(t.u);
    let pool: Vec<usize> = sub
        .nodes_of_type(ty)
        .into_iter()
        .filter(|&c| c != t.u && c != t.v && !sub.is_adjacent(t.v, c, t.r))
        .collect();
    let k = count.min(pool.len());
    index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Queued entries usable as extra negatives for `t`: same relation and
/// target type, from the eligible batches, not `u` or `v`, not already
/// among `current` (local ids), and not `r`-adjacent to `v` in `g`.
pub fn queue_negatives<'q>(
    queue: &'q NegativeQueue,
    t: Triplet,
    sub: &SampledSubgraph,
    g: &HeteroGraph,
    current: &[usize],
    batch: u64,
) -> Vec<&'q QueueEntry> {
    let (gv, gu) = (sub.global(t.v), sub.global(t.u));
    let taken: HashSet<usize> = current.iter().map(|&c| sub.global(c)).collect();
    let ty = sub.node_type(t.u);
    queue
        .matching(t.r, ty, batch)
        .filter(|e| e.node != gu && e.node != gv && !taken.contains(&e.node))
        .filter(|e| !g.neighbors_slice(gv, t.r).binary_search(&e.node).is_ok())
        .collect()
}

/// InfoNCE over relation-scored candidates.
///
/// `anchors` has one row per triplet. Candidate row `c` belongs to triplet
/// `owner[c]`; `positives[i]` is the candidate row of triplet `i`'s
/// positive. The logit of a candidate is `a W_r cᵀ / τ` with `W_r` taken
/// from `{prefix}.{r}`. Returns the mean negative log-likelihood.
#[allow(clippy::too_many_arguments)]
pub fn info_nce(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    anchors: Var,
    relations: &[RelationId],
    candidates: Var,
    owner: Vec<usize>,
    positives: Vec<usize>,
    tau: f64,
) -> Result<Var> {
    let t = relations.len();
    if t == 0 {
        return Err(PheError::Empty("no positive triplets".into()));
    }
    if !(tau > 0.0) {
        return Err(PheError::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut by_rel: BTreeMap<RelationId, Vec<usize>> = BTreeMap::new();
    for (i, &r) in relations.iter().enumerate() {
        by_rel.entry(r).or_default().push(i);
    }
    let mut parts = Vec::new();
    let mut order = Vec::new();
    for (r, rows) in by_rel {
        let name = relation_name(prefix, r);
        let w = tape.param(&name, params.require(&name)?);
        let a = tape.gather_rows(anchors, rows.clone());
        parts.push(tape.matmul(a, w));
        order.extend(rows);
    }
    let aw = tape.concat_rows(parts);
    let aw = tape.scatter_add_rows(aw, order, t);
    let per_candidate = tape.gather_rows(aw, owner.clone());
    let prod = tape.mul(per_candidate, candidates);
    let logits = tape.row_sums(prod);
    let logits = tape.div_scalar(logits, tau);
    let log_p = tape.segment_log_softmax(logits, owner);
    let pos = tape.gather_rows(log_p, positives);
    let mean = tape.mean(pos);
    Ok(tape.scale(mean, -1.0))
}

/// Per-triplet negatives: current-batch local ids plus queued snapshots.
#[derive(Clone, Debug, Default)]
pub struct NegativeSets {
    pub current: Vec<Vec<usize>>,
    pub queued: Vec<Vec<QueueEntry>>,
}

impl NegativeSets {
    pub fn total(&self) -> usize {
        self.current.iter().map(Vec::len).sum::<usize>() + self.queued.iter().map(Vec::len).sum::<usize>()
    }
}

/// Candidate matrix for [`info_nce`]: per triplet the positive, then
/// current-batch negatives (rows of `table`), then queued snapshots.
pub(crate) fn assemble_candidates(
    tape: &mut Tape,
    table: Var,
    triplets: &[Triplet],
    negatives: &NegativeSets,
) -> Result<(Var, Vec<usize>, Vec<usize>)> {
    let d = tape.value(table).cols();
    let mut rows = Vec::new();
    let mut owner = Vec::new();
    let mut positives = Vec::new();
    for (i, t) in triplets.iter().enumerate() {
        positives.push(rows.len());
        rows.push(t.u);
        owner.push(i);
        for &n in &negatives.current[i] {
            rows.push(n);
            owner.push(i);
        }
    }
    let mut queued = Vec::new();
    for (i, entries) in negatives.queued.iter().enumerate() {
        for e in entries {
            if e.embedding.len() != d {
                return Err(PheError::Shape(format!(
                    "queued embedding has width {}, expected {d}",
                    e.embedding.len()
                )));
            }
            queued.extend_from_slice(&e.embedding);
            owner.push(i);
        }
    }
    let current = tape.gather_rows(table, rows);
    let candidates = if queued.is_empty() {
        current
    } else {
        let q = queued.len() / d;
        let snap = tape.constant(Tensor::matrix(q, d, queued));
        tape.concat_rows(vec![current, snap])
    };
    Ok((candidates, owner, positives))
}

/// Structure loss `L₁` given enhanced queries and negative sets.
pub fn loss_structure(
    tape: &mut Tape,
    params: &ParamStore,
    config: &StructureConfig,
    h: Var,
    enhanced: &EnhancedQueries,
    triplets: &[Triplet],
    negatives: &NegativeSets,
) -> Result<Var> {
    if triplets.is_empty() {
        return Err(PheError::Empty("no positive triplets".into()));
    }
    let rows = triplets
        .iter()
        .map(|t| {
            enhanced
                .row_of(t.v)
                .ok_or_else(|| PheError::Shape(format!("node {} was not enhanced", t.v)))
        })
        .collect::<Result<Vec<_>>>()?;
    let anchors = tape.gather_rows(enhanced.h_prime, rows);
    let (candidates, owner, positives) = assemble_candidates(tape, h, triplets, negatives)?;
    let relations: Vec<RelationId> = triplets.iter().map(|t| t.r).collect();
    info_nce(tape, params, "rel", anchors, &relations, candidates, owner, positives, config.tau)
}

/// Distinct query nodes of a triplet batch, in first-seen order.
pub fn distinct_queries(triplets: &[Triplet]) -> Vec<usize> {
    let mut seen = HashSet::new();
    triplets.iter().map(|t| t.v).filter(|v| seen.insert(*v)).collect()
}

/// Queue entries for the negatives used in this batch, snapshotting rows
/// of `table`.
pub fn queue_snapshots(
    sub: &SampledSubgraph,
    table: &Tensor,
    triplets: &[Triplet],
    current: &[Vec<usize>],
) -> Vec<QueueEntry> {
    let mut out = Vec::new();
    for (t, negs) in triplets.iter().zip(current) {
        for &n in negs {
            out.push(QueueEntry {
                node: sub.global(n),
                relation: t.r,
                target_type: sub.node_type(n),
                batch: 0,
                embedding: table.row(n).to_vec(),
            });
        }
    }
    out
}

/// Output of one structure-task step.
#[derive(Clone, Debug)]
pub struct StructureStep {
    pub loss: Var,
    pub enhanced: EnhancedQueries,
    pub negatives: NegativeSets,
    /// Snapshots to push into the queue once the step is applied.
    pub push: Vec<QueueEntry>,
}

/// Enhances the queries, draws negatives (batch and queue) and builds `L₁`.
#[allow(clippy::too_many_arguments)]
pub fn structure_step<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ParamStore,
    config: &StructureConfig,
    g: &HeteroGraph,
    sub: &SampledSubgraph,
    h: Var,
    triplets: &[Triplet],
    queue: &NegativeQueue,
    batch: u64,
    rng: &mut R,
) -> Result<StructureStep> {
    let queries = distinct_queries(triplets);
    let enhanced = if config.enhance {
        enhance_queries(tape, params, config, sub, h, &queries)?
    } else {
        unenhanced(tape, h, &queries)
    };
    let mut negatives = NegativeSets::default();
    for &t in triplets {
        let cur = relation_negatives(t, sub, config.batch_negatives, rng);
        let queued = queue_negatives(queue, t, sub, g, &cur, batch)
            .into_iter()
            .cloned()
            .collect();
        negatives.current.push(cur);
        negatives.queued.push(queued);
    }
    let loss = loss_structure(tape, params, config, h, &enhanced, triplets, &negatives)?;
    let push = queue_snapshots(sub, tape.value(h), triplets, &negatives.current);
    Ok(StructureStep {
        loss,
        enhanced,
        negatives,
        push,
    })
}
