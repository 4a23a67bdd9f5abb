//! Semantic-aware contrastive task: samples are enhanced with the mean of
//! their embeddings under randomly perturbed encoder parameters.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::encoder::{encode_table, EncoderConfig};
use crate::error::{PheError, Result};
use crate::graph::{HeteroGraph, RelationId};
use crate::queue::NegativeQueue;
use crate::sampler::{SampledSubgraph, Triplet};
use crate::structure::{
    assemble_candidates, info_nce, queue_negatives, queue_snapshots, relation_negatives, NegativeSets,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticConfig {
    pub tau: f64,
    /// Perturbation magnitude, relative to each tensor's standard deviation.
    pub mu: f64,
    /// Perturbed copies per step.
    pub q: usize,
    pub batch_negatives: usize,
    /// Keep relation matrices separate from the structure task's.
    pub separate_relations: bool,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        SemanticConfig {
            tau: 0.2,
            mu: 0.1,
            q: 4,
            batch_negatives: 32,
            separate_relations: false,
        }
    }
}

impl SemanticConfig {
    pub fn relation_prefix(&self) -> &'static str {
        if self.separate_relations {
            "rel2"
        } else {
            "rel"
        }
    }
}

/// Adds `U(−μ, μ) · std(Θ_i)` entrywise to every tensor whose name starts
/// with `prefix`; other tensors are copied unchanged.
pub fn perturb_params<R: Rng + ?Sized>(
    params: &ParamStore,
    prefix: &str,
    mu: f64,
    rng: &mut R,
) -> Result<ParamStore> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(PheError::Config(format!("perturbation magnitude must be ≥ 0, got {mu}")));
    }
    let mut out = params.clone();
    if mu == 0.0 {
        return Ok(out);
    }
    let noise = Uniform::new(-mu, mu).map_err(|e| PheError::Config(e.to_string()))?;
    for (name, t) in out.iter_mut() {
        if !name.starts_with(prefix) {
            continue;
        }
        let std = t.std();
        for x in t.data_mut() {
            *x += noise.sample(rng) * std;
        }
    }
    Ok(out)
}

/// `q` perturbed parameter sets drawn in sequence from `rng`.
pub fn perturbed_copies<R: Rng + ?Sized>(
    params: &ParamStore,
    mu: f64,
    q: usize,
    rng: &mut R,
) -> Result<Vec<ParamStore>> {
    if q == 0 {
        return Err(PheError::Config("perturbation count q must be at least 1".into()));
    }
    (0..q).map(|_| perturb_params(params, "enc.", mu, rng)).collect()
}

/// Final-layer embeddings of `sub` under each parameter set.
pub fn perturbed_tables(
    copies: &[ParamStore],
    config: &EncoderConfig,
    sub: &SampledSubgraph,
) -> Result<Vec<Tensor>> {
    let run = |p: &ParamStore| encode_table(p, config, sub).map(|t| t.output().clone());
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        copies.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        copies.iter().map(run).collect()
    }
}

/// The `q` perturbed embeddings of one node.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSubspace {
    pub node: usize,
    pub mu: f64,
    pub columns: Vec<Vec<f64>>,
}

impl PerturbationSubspace {
    pub fn from_tables(node: usize, mu: f64, tables: &[Tensor]) -> Self {
        PerturbationSubspace {
            node,
            mu,
            columns: tables.iter().map(|t| t.row(node).to_vec()).collect(),
        }
    }
}

/// Perturbs the encoder `q` times and collects `u`'s embeddings.
pub fn build_perturbation_subspace<R: Rng + ?Sized>(
    u: usize,
    sub: &SampledSubgraph,
    params: &ParamStore,
    config: &EncoderConfig,
    mu: f64,
    q: usize,
    rng: &mut R,
) -> Result<PerturbationSubspace> {
    if u >= sub.len() {
        return Err(PheError::InvalidId { kind: "node", id: u });
    }
    let copies = perturbed_copies(params, mu, q, rng)?;
    let tables = perturbed_tables(&copies, config, sub)?;
    Ok(PerturbationSubspace::from_tables(u, mu, &tables))
}

/// Column mean of the subspace.
pub fn enhance_sample(s2: &PerturbationSubspace) -> Result<Vec<f64>> {
    let Some(first) = s2.columns.first() else {
        return Err(PheError::Empty("perturbation subspace has no columns".into()));
    };
    let q = s2.columns.len() as f64;
    let mut out = vec![0.0; first.len()];
    for c in &s2.columns {
        for (o, x) in out.iter_mut().zip(c) {
            *o += x / q;
        }
    }
    Ok(out)
}

/// Elementwise mean of the perturbed tables: every node's enhanced sample.
pub fn enhanced_table(tables: &[Tensor]) -> Result<Tensor> {
    let Some(first) = tables.first() else {
        return Err(PheError::Empty("no perturbed tables".into()));
    };
    let q = tables.len() as f64;
    let mut out = Tensor::zeros(first.rows(), first.cols());
    for t in tables {
        for (o, x) in out.data_mut().iter_mut().zip(t.data()) {
            *o += x / q;
        }
    }
    Ok(out)
}

/// Negatives for `L₂`: current-batch nodes under the same type and
/// adjacency rule as the structure task, plus matching queued entries.
#[allow(clippy::too_many_arguments)]
pub fn semantic_negatives<R: Rng + ?Sized>(
    triplets: &[Triplet],
    sub: &SampledSubgraph,
    g: &HeteroGraph,
    queue: &NegativeQueue,
    count: usize,
    batch: u64,
    rng: &mut R,
) -> NegativeSets {
    let mut sets = NegativeSets::default();
    for &t in triplets {
        let cur = relation_negatives(t, sub, count, rng);
        let queued = queue_negatives(queue, t, sub, g, &cur, batch)
            .into_iter()
            .cloned()
            .collect();
        sets.current.push(cur);
        sets.queued.push(queued);
    }
    sets
}

/// `L₂`: raw query embeddings `h_v` against enhanced candidates.
pub fn loss_semantic(
    tape: &mut Tape,
    params: &ParamStore,
    config: &SemanticConfig,
    h: Var,
    enhanced: &Tensor,
    triplets: &[Triplet],
    negatives: &NegativeSets,
) -> Result<Var> {
    if triplets.is_empty() {
        return Err(PheError::Empty("no positive triplets".into()));
    }
    let anchors = tape.gather_rows(h, triplets.iter().map(|t| t.v).collect());
    let table = tape.constant(enhanced.clone());
    let (candidates, owner, positives) = assemble_candidates(tape, table, triplets, negatives)?;
    let relations: Vec<RelationId> = triplets.iter().map(|t| t.r).collect();
    info_nce(
        tape,
        params,
        config.relation_prefix(),
        anchors,
        &relations,
        candidates,
        owner,
        positives,
        config.tau,
    )
}

#[derive(Clone, Debug)]
pub struct SemanticStep {
    pub loss: Var,
    pub enhanced: Tensor,
    pub negatives: NegativeSets,
    pub push: Vec<crate::queue::QueueEntry>,
}

/// One perturbation draw for the step, then negatives and `L₂`.
#[allow(clippy::too_many_arguments)]
pub fn semantic_step<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ParamStore,
    encoder: &EncoderConfig,
    config: &SemanticConfig,
    g: &HeteroGraph,
    sub: &SampledSubgraph,
    h: Var,
    triplets: &[Triplet],
    queue: &NegativeQueue,
    batch: u64,
    rng: &mut R,
) -> Result<SemanticStep> {
    let copies = perturbed_copies(params, config.mu, config.q, rng)?;
    let tables = perturbed_tables(&copies, encoder, sub)?;
    let enhanced = enhanced_table(&tables)?;
    let negatives = semantic_negatives(triplets, sub, g, queue, config.batch_negatives, batch, rng);
    let loss = loss_semantic(tape, params, config, h, &enhanced, triplets, &negatives)?;
    let push = queue_snapshots(sub, &enhanced, triplets, &negatives.current);
    Ok(SemanticStep {
        loss,
        enhanced,
        negatives,
        push,
    })
}
