//! Downstream candidate-ranking tasks: adapter training, scoring and
//! evaluation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamWConfig, OptimizerState, ParamStore, Tape, Tensor, Var};
use crate::encoder::{self, encode, encode_table, EncoderConfig};
use crate::error::{PheError, Result};
use crate::graph::{HeteroGraph, NodeId, NodeType, RelationId};
use crate::metrics::{average_metrics, QueryAverages};
use crate::pretrain::Checkpoint;
use crate::sampler::{temporal_split, SampledSubgraph, SplitSpec};
use crate::structure::relation_name;

pub const ADAPTER: &str = "task.w";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    #[default]
    Full,
    Frozen,
}

impl FinetuneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneMode::Full => "full",
            FinetuneMode::Frozen => "frozen",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Forward relation whose targets are ranked, e.g. `published_at`.
    pub task: String,
    /// Fraction of training queries whose labels are used.
    pub label_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: AdamWConfig,
    /// Sampled negatives per query.
    pub candidates: usize,
    /// Cutoff for NDCG and Recall.
    pub k: usize,
    /// Queries per optimizer step.
    pub batch_queries: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::Full,
            task: "published_at".into(),
            label_fraction: 0.1,
            epochs: 50,
            lr: 1e-3,
            optimizer: AdamWConfig::default(),
            candidates: 99,
            k: 10,
            batch_queries: 64,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            out.push(format!("label_fraction must lie in (0, 1], got {}", self.label_fraction));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            out.push(format!("finetune_lr must be positive, got {}", self.lr));
        }
        for (k, v) in [
            ("finetune_epochs", self.epochs),
            ("candidates", self.candidates),
            ("eval_k", self.k),
            ("batch_queries", self.batch_queries),
        ] {
            if v == 0 {
                out.push(format!("{k} must be at least 1"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(PheError::ConfigKeys(p))
        }
    }
}

/// A query node with its relevant targets in one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub node: NodeId,
    pub relevant: Vec<NodeId>,
}

/// A ranking task carved out of a graph by the temporal split.
#[derive(Clone, Debug)]
pub struct RankingTask {
    pub name: String,
    pub relation: RelationId,
    pub query_type: NodeType,
    pub target_type: NodeType,
    /// Full graph minus the task edges of every paper from the fine-tuning
    /// years. Embeddings are computed on this graph.
    pub context: HeteroGraph,
    /// Task adjacency over all years, used to keep true targets out of the
    /// sampled negatives.
    pub known: HeteroGraph,
    pub train: Vec<Query>,
    pub val: Vec<Query>,
    pub test: Vec<Query>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl RankingTask {
    pub fn queries(&self, split: Split) -> &[Query] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn queries_in(view: &HeteroGraph, r: RelationId, qt: NodeType) -> Vec<Query> {
    view.nodes_of_type(qt)
        .iter()
        .filter_map(|&v| {
            let mut relevant = view.neighbors_slice(v, r).to_vec();
            relevant.sort_unstable();
            relevant.dedup();
            (!relevant.is_empty()).then_some(Query { node: v, relevant })
        })
        .collect()
}

pub fn build_task(g: &HeteroGraph, split: &SplitSpec, task: &str) -> Result<RankingTask> {
    let r = g
        .relation_by_name(task)
        .ok_or_else(|| PheError::Config(format!("task relation `{task}` is not in the graph")))?;
    let rel = g.relation(r);
    let forward = if rel.is_reverse { rel.reverse } else { r };
    let views = temporal_split(g, split)?;
    let end = split.pretrain_end;
    let context = g.filter_edges(|fr, _, _, y| !(fr == forward && y.is_some_and(|y| y >= end)));
    let known = g.filter_edges(|fr, _, _, _| fr == forward);
    Ok(RankingTask {
        name: task.to_string(),
        relation: r,
        query_type: rel.src_type,
        target_type: rel.dst_type,
        train: queries_in(&views.fine_train, r, rel.src_type),
        val: queries_in(&views.fine_val, r, rel.src_type),
        test: queries_in(&views.fine_test, r, rel.src_type),
        context,
        known,
    })
}

/// Relevant targets plus up to `k` targets not linked to the query by the
/// task relation in any year. Sorted by node id.
pub fn draw_candidates<R: Rng + ?Sized>(task: &RankingTask, q: &Query, k: usize, rng: &mut R) -> Vec<NodeId> {
    let linked: HashSet<NodeId> = task.known.neighbors_slice(q.node, task.relation).iter().copied().collect();
    let pool: Vec<NodeId> = task
        .context
        .nodes_of_type(task.target_type)
        .iter()
        .copied()
        .filter(|u| !linked.contains(u) && !q.relevant.contains(u))
        .collect();
    let m = k.min(pool.len());
    let mut out = q.relevant.clone();
    out.extend(index::sample(rng, pool.len(), m).into_iter().map(|i| pool[i]));
    out.sort_unstable();
    out
}

/// Scores `h_qᵀ W h_u` for every candidate, sorted descending with ties
/// broken by ascending node id.
pub fn score_candidates(
    h: &Tensor,
    w: &Tensor,
    node_types: &[NodeType],
    query: NodeId,
    candidates: &[NodeId],
) -> Result<Vec<(NodeId, f64)>> {
    let Some(&first) = candidates.first() else {
        return Err(PheError::Empty(format!("no candidates for query {query}")));
    };
    let t = node_types[first];
    if let Some(&bad) = candidates.iter().find(|&&u| node_types[u] != t) {
        return Err(PheError::Schema(format!(
            "candidate {bad} has type {} but {first} has type {}",
            node_types[bad].index(),
            t.index()
        )));
    }
    let d = h.cols();
    let hq = h.row(query);
    let qw: Vec<f64> = (0..d).map(|j| (0..d).map(|i| hq[i] * w.get(i, j)).sum()).collect();
    let mut scored: Vec<(NodeId, f64)> = candidates
        .iter()
        .map(|&u| (u, h.row(u).iter().zip(&qw).map(|(a, b)| a * b).sum()))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedQuery {
    pub query: NodeId,
    pub ranked: Vec<(NodeId, f64)>,
    pub relevant: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankingResult {
    pub rows: Vec<RankedQuery>,
    pub averages: QueryAverages,
}

/// Encoder plus adapter for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TunedModel {
    pub params: ParamStore,
    pub encoder: EncoderConfig,
    pub task: String,
    pub mode: FinetuneMode,
    pub pretrained: bool,
    /// Fine-tuning seed; also fixes the evaluation candidate lists.
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TunedMeta {
    encoder: EncoderConfig,
    task: String,
    mode: FinetuneMode,
    pretrained: bool,
    seed: u64,
}

impl TunedModel {
    pub fn to_checkpoint(&self, epoch: usize, best_validation: Option<f64>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            params: self.params.clone(),
            config: serde_json::to_value(TunedMeta {
                encoder: self.encoder,
                task: self.task.clone(),
                mode: self.mode,
                pretrained: self.pretrained,
                seed: self.seed,
            })?,
            best_validation,
            epoch,
        })
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<TunedModel> {
        let meta: TunedMeta = serde_json::from_value(c.config.clone())?;
        c.check_names([ADAPTER])?;
        Ok(TunedModel {
            params: c.params.clone(),
            encoder: meta.encoder,
            task: meta.task,
            mode: meta.mode,
            pretrained: meta.pretrained,
            seed: meta.seed,
        })
    }

    /// Final-layer embeddings of every node of the task's context graph.
    pub fn embeddings(&self, task: &RankingTask) -> Result<Tensor> {
        let sub = SampledSubgraph::full(&task.context);
        Ok(encode_table(&self.params, &self.encoder, &sub)?.output().clone())
    }
}

/// Where the encoder weights come from.
#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    Pretrained(&'a Checkpoint),
    /// Random weights, the no-pre-training baseline.
    Scratch(EncoderConfig),
}

pub fn initial_model(task: &RankingTask, init: Init<'_>, config: &FinetuneConfig) -> Result<TunedModel> {
    let schema = task.context.schema_report();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut params, enc, adapter) = match init {
        Init::Pretrained(c) => {
            let pc = c.pretrain_config()?;
            let enc = pc.encoder;
            let fresh = encoder::init_params(&schema, &enc, &mut rng)?;
            c.check_names(fresh.names())?;
            for (name, t) in fresh.iter() {
                let got = c.params.get(name).expect("checked above");
                if got.shape() != t.shape() {
                    return Err(PheError::Shape(format!(
                        "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                        got.shape(),
                        t.shape()
                    )));
                }
            }
            // the pre-trained relation matrix already scores (query, target)
            // pairs; it enters the softmax divided by tau
            let adapter = c
                .params
                .get(&relation_name("rel", task.relation))
                .map(|w| w.map(|x| x / pc.structure.tau));
            (c.params.subset("enc."), enc, adapter)
        }
        Init::Scratch(enc) => (encoder::init_params(&schema, &enc, &mut rng)?, enc, None),
    };
    let pretrained = matches!(init, Init::Pretrained(_));
    params.insert(ADAPTER, adapter.unwrap_or_else(|| Tensor::identity(enc.hidden)));
    Ok(TunedModel {
        params,
        encoder: enc,
        task: String::new(),
        mode: config.mode,
        pretrained,
        seed: config.seed,
    })
}

/// Labeled subset of the training queries: a seeded `label_fraction` share,
/// at least one.
pub fn labeled_queries(task: &RankingTask, config: &FinetuneConfig) -> Vec<Query> {
    let mut qs = task.train.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    qs.shuffle(&mut rng);
    let n = ((qs.len() as f64 * config.label_fraction).round() as usize).clamp(1.min(qs.len()), qs.len());
    qs.truncate(n);
    qs
}

/// Softmax cross-entropy of each (query, positive) over its candidates.
/// Returns the loss and, per example, whether the positive scored highest.
fn ranking_loss(
    tape: &mut Tape,
    params: &ParamStore,
    h: Var,
    examples: &[(NodeId, NodeId, Vec<NodeId>)],
) -> Result<(Var, Vec<bool>)> {
    let mut anchors = Vec::new();
    let mut rows = Vec::new();
    let mut owner = Vec::new();
    let mut positives = Vec::new();
    for (i, (q, pos, negs)) in examples.iter().enumerate() {
        anchors.push(*q);
        positives.push(rows.len());
        rows.push(*pos);
        owner.push(i);
        for &n in negs {
            rows.push(n);
            owner.push(i);
        }
    }
    let w = tape.param(ADAPTER, params.require(ADAPTER)?);
    let a = tape.gather_rows(h, anchors);
    let aw = tape.matmul(a, w);
    let per = tape.gather_rows(aw, owner.clone());
    let c = tape.gather_rows(h, rows);
    let prod = tape.mul(per, c);
    let logits = tape.row_sums(prod);
    let scores = tape.value(logits).data().to_vec();
    let mut correct = Vec::with_capacity(examples.len());
    for (i, &p) in positives.iter().enumerate() {
        let end = positives.get(i + 1).copied().unwrap_or(scores.len());
        correct.push(scores[p + 1..end].iter().all(|&s| s < scores[p]));
    }
    let log_p = tape.segment_log_softmax(logits, owner);
    let pos = tape.gather_rows(log_p, positives);
    let mean = tape.mean(pos);
    Ok((tape.scale(mean, -1.0), correct))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_ndcg: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Parameters from the epoch with the best validation NDCG.
    pub model: TunedModel,
    pub best_epoch: usize,
    pub history: Vec<FinetuneEpoch>,
    pub labeled: usize,
}

const EVAL_STREAM: u64 = 7;

/// Fixed candidate lists for one split, seeded independently of the mode
/// and initialization so every model sees the same lists.
pub fn eval_candidates(task: &RankingTask, split: Split, config: &FinetuneConfig) -> Vec<Vec<NodeId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(EVAL_STREAM + split as u64);
    task.queries(split)
        .iter()
        .map(|q| draw_candidates(task, q, config.candidates, &mut rng))
        .collect()
}

pub fn evaluate_with(
    h: &Tensor,
    w: &Tensor,
    task: &RankingTask,
    split: Split,
    candidates: &[Vec<NodeId>],
    k: usize,
) -> Result<RankingResult> {
    let types = task.context.node_types();
    let queries = task.queries(split);
    let score = |(q, c): (&Query, &Vec<NodeId>)| -> Result<RankedQuery> {
        Ok(RankedQuery {
            query: q.node,
            ranked: score_candidates(h, w, types, q.node, c)?,
            relevant: q.relevant.clone(),
        })
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<RankedQuery> = {
        use rayon::prelude::*;
        queries.par_iter().zip(candidates.par_iter()).map(score).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<RankedQuery> = queries.iter().zip(candidates).map(score).collect::<Result<_>>()?;
    let ids: Vec<(Vec<NodeId>, HashSet<NodeId>)> = rows
        .iter()
        .map(|r| {
            (
                r.ranked.iter().map(|x| x.0).collect(),
                r.relevant.iter().copied().collect(),
            )
        })
        .collect();
    let averages = average_metrics(ids.iter().map(|(a, b)| (&a[..], b)), k)?;
    Ok(RankingResult { rows, averages })
}

pub fn evaluate(model: &TunedModel, task: &RankingTask, split: Split, config: &FinetuneConfig) -> Result<RankingResult> {
    let h = model.embeddings(task)?;
    let cands = eval_candidates(task, split, config);
    evaluate_with(&h, model.params.require(ADAPTER)?, task, split, &cands, config.k)
}

pub fn finetune(task: &RankingTask, init: Init<'_>, config: &FinetuneConfig) -> Result<FinetuneOutcome> {
    config.validate()?;
    let mut model = initial_model(task, init, config)?;
    model.task = task.name.clone();
    let labeled = labeled_queries(task, config);
    if labeled.is_empty() {
        return Err(PheError::Empty(format!("task `{}` has no training queries", task.name)));
    }
    let sub = SampledSubgraph::full(&task.context);
    let trainable: Vec<String> = match config.mode {
        FinetuneMode::Full => model.params.names().map(str::to_string).collect(),
        FinetuneMode::Frozen => vec![ADAPTER.to_string()],
    };
    let mut opt = OptimizerState::new(config.optimizer.clone(), trainable);
    let frozen_h = match config.mode {
        FinetuneMode::Frozen => Some(encode_table(&model.params, &model.encoder, &sub)?.output().clone()),
        FinetuneMode::Full => None,
    };
    let val_cands = eval_candidates(task, Split::Val, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);

    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut examples: Vec<(NodeId, NodeId, Vec<NodeId>)> = Vec::new();
        let mut order = labeled.clone();
        order.shuffle(&mut rng);
        for q in &order {
            for &pos in &q.relevant {
                let c = draw_candidates(task, &Query { node: q.node, relevant: vec![pos] }, config.candidates, &mut rng);
                let negs = c.into_iter().filter(|&u| !q.relevant.contains(&u)).collect();
                examples.push((q.node, pos, negs));
            }
        }
        let (mut loss_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
        for chunk in examples.chunks(config.batch_queries) {
            let mut tape = Tape::new();
            let h = match &frozen_h {
                Some(t) => tape.constant(t.clone()),
                None => encode(&mut tape, &model.params, &model.encoder, &sub)?.output(),
            };
            let (loss, ok) = ranking_loss(&mut tape, &model.params, h, chunk)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(PheError::NonFinite(format!("fine-tuning loss at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?.into_param_grads();
            opt.step(&mut model.params, &grads, config.lr)?;
            loss_sum += value;
            correct += ok.iter().filter(|&&b| b).count();
            steps += 1;
        }
        let h = match &frozen_h {
            Some(t) => t.clone(),
            None => encode_table(&model.params, &model.encoder, &sub)?.output().clone(),
        };
        let val = if task.val.is_empty() {
            f64::NAN
        } else {
            evaluate_with(&h, model.params.require(ADAPTER)?, task, Split::Val, &val_cands, config.k)?
                .averages
                .ndcg
        };
        history.push(FinetuneEpoch {
            epoch,
            loss: loss_sum / steps.max(1) as f64,
            train_accuracy: correct as f64 / examples.len().max(1) as f64,
            val_ndcg: val,
        });
        let better = match &best {
            None => true,
            Some((b, _, _)) => val > *b || (val.is_nan() && b.is_nan()),
        };
        if better {
            best = Some((val, epoch, model.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(FinetuneOutcome {
        model,
        best_epoch,
        history,
        labeled: labeled.len(),
    })
}

/// Written sample: node ids and the pairwise-angle histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformityExport {
    pub nodes: Vec<NodeId>,
    /// Counts of pairwise angles in equal-width bins over [0, π].
    pub histogram: Vec<u64>,
    pub histogram_path: PathBuf,
}

pub const ANGLE_BINS: usize = 36;

fn normalized(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return row.to_vec();
    }
    row.iter().map(|x| x / n).collect()
}

/// Angles between all pairs of rows (already L2-normalized).
pub fn angle_histogram(rows: &[Vec<f64>], bins: usize) -> Vec<u64> {
    let mut hist = vec![0u64; bins];
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let angle = dot.clamp(-1.0, 1.0).acos();
            let b = ((angle / std::f64::consts::PI) * bins as f64) as usize;
            hist[b.min(bins - 1)] += 1;
        }
    }
    hist
}

/// Writes `count` randomly chosen, L2-normalized rows of `embeddings` as
/// CSV (`node,x0,x1,...`) to `path`, and their pairwise-angle histogram to
/// `<path stem>.angles.csv` next to it.
pub fn export_uniformity_sample<R: Rng + ?Sized>(
    embeddings: &Tensor,
    count: usize,
    path: &Path,
    rng: &mut R,
) -> Result<UniformityExport> {
    let n = embeddings.rows();
    if count > n {
        return Err(PheError::Config(format!("sample of {count} exceeds {n} embeddings")));
    }
    let mut nodes = index::sample(rng, n, count).into_vec();
    nodes.sort_unstable();
    let rows: Vec<Vec<f64>> = nodes.iter().map(|&v| normalized(embeddings.row(v))).collect();
    let mut csv = String::from("node");
    for j in 0..embeddings.cols() {
        write!(csv, ",x{j}").unwrap();
    }
    csv.push('\n');
    for (v, row) in nodes.iter().zip(&rows) {
        write!(csv, "{v}").unwrap();
        for x in row {
            write!(csv, ",{x}").unwrap();
        }
        csv.push('\n');
    }
    fs::write(path, csv)?;

    let histogram = angle_histogram(&rows, ANGLE_BINS);
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("embeddings");
    let histogram_path = path.with_file_name(format!("{stem}.angles.csv"));
    let mut out = String::from("angle_lo,angle_hi,count\n");
    let width = std::f64::consts::PI / ANGLE_BINS as f64;
    for (b, c) in histogram.iter().enumerate() {
        writeln!(out, "{},{},{}", b as f64 * width, (b + 1) as f64 * width, c).unwrap();
    }
    fs::write(&histogram_path, out)?;
    Ok(UniformityExport {
        nodes,
        histogram,
        histogram_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::{init_model, PretrainConfig};
    use crate::synth::{synth_academic, EdgeProbs, SynthConfig};

    fn graph(seed: u64, signal: f64, noise: f64) -> HeteroGraph {
        graph_with(seed, signal, noise, 6, 0.01)
    }

    fn graph_with(seed: u64, signal: f64, noise: f64, venues: usize, inter: f64) -> HeteroGraph {
        let cfg = SynthConfig {
            papers: 300,
            authors: 40,
            venues,
            fields: 12,
            communities: 3,
            feature_dim: 6,
            cites: EdgeProbs::NONE,
            venue_affinity: 1.0,
            signal,
            noise,
            year_min: 2008,
            year_max: 2019,
            has_field: EdgeProbs { intra: 0.2, inter },
            written_by: EdgeProbs { intra: 0.05, inter: inter / 2.0 },
        };
        synth_academic(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().graph
    }

    fn enc() -> EncoderConfig {
        EncoderConfig { layers: 1, heads: 2, hidden: 8 }
    }

    fn small(mode: FinetuneMode) -> FinetuneConfig {
        FinetuneConfig {
            mode,
            epochs: 3,
            candidates: 5,
            ..Default::default()
        }
    }

    #[test]
    fn task_split_and_context() {
        let g = graph(1, 1.0, 1.0);
        let split = SplitSpec::default();
        let t = build_task(&g, &split, "published_at").unwrap();
        assert!(!t.train.is_empty() && !t.val.is_empty() && !t.test.is_empty());
        for q in t.train.iter().chain(&t.val).chain(&t.test) {
            assert!(g.year(q.node).unwrap() >= split.pretrain_end);
            assert!(t.context.neighbors_slice(q.node, t.relation).is_empty());
        }
        assert!(build_task(&g, &split, "reviewed_by").is_err());
    }

    #[test]
    fn candidates_exclude_links() {
        let g = graph(2, 1.0, 1.0);
        let t = build_task(&g, &SplitSpec::default(), "published_at").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for q in &t.test {
            let c = draw_candidates(&t, q, 3, &mut rng);
            assert_eq!(c.len(), q.relevant.len() + 3);
            for u in c {
                assert_eq!(g.node_type(u), t.target_type);
                if !q.relevant.contains(&u) {
                    assert!(!g.neighbors_slice(q.node, t.relation).contains(&u));
                }
            }
        }
    }

    #[test]
    fn scoring_examples() {
        let types = vec![NodeType(0), NodeType(1), NodeType(1), NodeType(1), NodeType(2)];
        let h = Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
        ]);
        let w = Tensor::identity(3);
        let r = score_candidates(&h, &w, &types, 0, &[1, 2, 3]).unwrap();
        assert_eq!(r[0].0, 2);
        // ties break by ascending id
        assert_eq!(r[1].0, 1);
        assert_eq!(r[2].0, 3);
        assert_eq!(score_candidates(&h, &w, &types, 0, &[3]).unwrap().len(), 1);
        assert!(score_candidates(&h, &w, &types, 0, &[1, 4]).is_err());
        assert!(score_candidates(&h, &w, &types, 0, &[]).is_err());
    }

    #[test]
    fn scoring_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Tensor::seeded_uniform(&[12, 4], -1.0, 1.0, &mut rng).unwrap();
        let w = Tensor::seeded_uniform(&[4, 4], -1.0, 1.0, &mut rng).unwrap();
        let types = vec![NodeType(0); 12];
        let cands: Vec<usize> = (1..12).collect();
        let r = score_candidates(&h, &w, &types, 0, &cands).unwrap();
        let brute = |u: usize| {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    s += h.get(0, i) * w.get(i, j) * h.get(u, j);
                }
            }
            s
        };
        for pair in r.windows(2) {
            assert!(brute(pair[0].0) >= brute(pair[1].0));
        }
        for (u, s) in &r {
            assert!((s - brute(*u)).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_mode_leaves_encoder_untouched() {
        let g = graph(3, 1.0, 1.0);
        let t = build_task(&g, &SplitSpec::default(), "published_at").unwrap();
        let pc = PretrainConfig { encoder: enc(), ..Default::default() };
        let params = init_model(&t.context, &pc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ck = Checkpoint {
            params,
            config: serde_json::to_value(&pc).unwrap(),
            best_validation: None,
            epoch: 0,
        };
        let out = finetune(&t, Init::Pretrained(&ck), &small(FinetuneMode::Frozen)).unwrap();
        for (name, tensor) in out.model.params.iter().filter(|(n, _)| n.starts_with("enc.")) {
            let before = ck.params.get(name).unwrap();
            let same = before.data().iter().zip(tensor.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{name}");
        }
        let start = ck.params.get("rel.0").unwrap().map(|x| x / pc.structure.tau);
        assert!(out.model.params.get(ADAPTER).unwrap() != &start);

        let full = finetune(&t, Init::Pretrained(&ck), &small(FinetuneMode::Full)).unwrap();
        let moved = full
            .model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("enc."))
            .any(|(n, x)| x != ck.params.get(n).unwrap());
        assert!(moved);
    }

    #[test]
    fn mismatched_checkpoint_names_missing_keys() {
        let g = graph(3, 1.0, 1.0);
        let t = build_task(&g, &SplitSpec::default(), "published_at").unwrap();
        let pc = PretrainConfig { encoder: enc(), ..Default::default() };
        let mut params = init_model(&t.context, &pc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        params = params.iter().filter(|(n, _)| n.as_str() != "enc.l0.k.1").map(|(n, x)| (n.clone(), x.clone())).collect();
        let ck = Checkpoint {
            params,
            config: serde_json::to_value(&pc).unwrap(),
            best_validation: None,
            epoch: 0,
        };
        match finetune(&t, Init::Pretrained(&ck), &small(FinetuneMode::Full)) {
            Err(PheError::CheckpointMismatch { missing }) => assert_eq!(missing, vec!["enc.l0.k.1"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn more_labels_more_queries() {
        let g = graph(4, 1.0, 1.0);
        let t = build_task(&g, &SplitSpec::default(), "published_at").unwrap();
        let a = labeled_queries(&t, &FinetuneConfig { label_fraction: 1.0, ..Default::default() });
        let b = labeled_queries(&t, &FinetuneConfig { label_fraction: 0.1, ..Default::default() });
        assert!(a.len() > b.len());
        assert_eq!(a.len(), t.train.len());
    }

    #[test]
    fn separable_task_reaches_full_training_accuracy() {
        // one venue per community, no cross-community edges and a strong
        // community signal
        let g = graph_with(6, 4.0, 0.05, 3, 0.0);
        let t = build_task(&g, &SplitSpec::default(), "published_at").unwrap();
        let config = FinetuneConfig {
            mode: FinetuneMode::Full,
            label_fraction: 1.0,
            epochs: 50,
            lr: 2e-2,
            candidates: 5,
            ..Default::default()
        };
        let out = finetune(&t, Init::Scratch(enc()), &config).unwrap();
        let last = out.history.last().unwrap();
        assert_eq!(last.train_accuracy, 1.0, "{:?}", out.history);
    }

    #[test]
    fn uniformity_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::seeded_uniform(&[100, 5], -1.0, 1.0, &mut rng).unwrap();
        let out = export_uniformity_sample(&h, 100, &path, &mut rng).unwrap();
        assert_eq!(out.nodes, (0..100).collect::<Vec<_>>());
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 101);

        // brute-force histogram from the written rows
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').skip(1).map(|x| x.parse().unwrap()).collect())
            .collect();
        let mut brute = vec![0u64; ANGLE_BINS];
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                if i < j {
                    let na: f64 = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb: f64 = rows[j].iter().map(|x| x * x).sum::<f64>().sqrt();
                    let cos: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>() / (na * nb);
                    let deg = cos.clamp(-1.0, 1.0).acos().to_degrees();
                    brute[((deg / 5.0) as usize).min(ANGLE_BINS - 1)] += 1;
                }
            }
        }
        assert_eq!(out.histogram, brute);
        assert_eq!(out.histogram.iter().sum::<u64>(), 4950);
        assert!(out.histogram_path.exists());

        let same = Tensor::full(10, 3, 0.5);
        let out = export_uniformity_sample(&same, 10, &path, &mut rng).unwrap();
        assert_eq!(out.histogram[0], 45);
        assert!(export_uniformity_sample(&same, 11, &path, &mut rng).is_err());
    }
}
