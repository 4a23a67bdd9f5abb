//! A 12-node, 3-type graph and the finite-difference suite run on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::encoder::{encode, EncoderConfig};
use crate::error::Result;
use crate::graph::{GraphBuilder, HeteroGraph};
use crate::pretrain::{init_model, joint_loss, PretrainConfig};
use crate::queue::NegativeQueue;
use crate::sampler::{draw_positive_triplets, SampledSubgraph, Triplet};
use crate::semantic::{enhanced_table, loss_semantic, perturbed_copies, perturbed_tables, semantic_negatives, SemanticConfig};
use crate::structure::{
    distinct_queries, enhance_queries, loss_structure, relation_negatives, NegativeSets, StructureConfig,
};

/// Six papers, four authors, two venues. Features are drawn from `seed`.
pub fn toy_graph(seed: u64) -> Result<HeteroGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feature = || (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let mut b = GraphBuilder::new();
    let papers: Vec<_> = (0..6)
        .map(|i| b.add_node(&format!("p{i}"), "paper", Some(2010 + i as i32), Some(feature())))
        .collect::<Result<_>>()?;
    let authors: Vec<_> = (0..4)
        .map(|i| b.add_node(&format!("a{i}"), "author", None, Some(feature())))
        .collect::<Result<_>>()?;
    let venues: Vec<_> = (0..2)
        .map(|i| b.add_node(&format!("v{i}"), "venue", None, Some(feature())))
        .collect::<Result<_>>()?;
    for (p, a) in [(0, 0), (0, 1), (1, 1), (2, 1), (2, 2), (3, 2), (4, 3), (5, 3), (5, 0)] {
        b.add_edge(papers[p], authors[a], "written_by", None)?;
    }
    for (p, v) in [(0, 0), (1, 0), (2, 0), (3, 1), (4, 1), (5, 1)] {
        b.add_edge(papers[p], venues[v], "published_at", None)?;
    }
    b.build()
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSuite {
    pub encoder: f64,
    pub l1: f64,
    pub l2: f64,
    pub joint: f64,
    pub coordinates: usize,
}

impl GradCheckSuite {
    pub fn max(&self) -> f64 {
        self.encoder.max(self.l1).max(self.l2).max(self.joint)
    }
}

/// Step for the encoder check.
pub const ENCODER_EPS: f64 = 1e-5;
/// Step for the contrastive losses: large enough that roundoff on
/// structurally zero coordinates stays small, small enough that truncation
/// error on nearly cancelling joint-loss coordinates does too.
pub const LOSS_EPS: f64 = 3e-4;

pub fn toy_config() -> PretrainConfig {
    PretrainConfig {
        encoder: EncoderConfig {
            layers: 2,
            heads: 2,
            hidden: 6,
        },
        structure: StructureConfig {
            type_attention_dim: 4,
            batch_negatives: 3,
            ..Default::default()
        },
        semantic: SemanticConfig {
            batch_negatives: 3,
            ..Default::default()
        },
        ..Default::default()
    }
}

struct Fixture {
    config: PretrainConfig,
    sub: SampledSubgraph,
    params: ParamStore,
    triplets: Vec<Triplet>,
    l1_negatives: NegativeSets,
    l2_negatives: NegativeSets,
    enhanced: Tensor,
    readout: Tensor,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let g = toy_graph(seed)?;
    let config = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_model(&g, &config, &mut rng)?;
    let sub = SampledSubgraph::full(&g);
    let triplets = draw_positive_triplets(&sub, &mut rng, usize::MAX);
    let l1_negatives = NegativeSets {
        current: triplets
            .iter()
            .map(|&t| relation_negatives(t, &sub, config.structure.batch_negatives, &mut rng))
            .collect(),
        queued: vec![Vec::new(); triplets.len()],
    };
    let empty = NegativeQueue::new(0, 1);
    let l2_negatives = semantic_negatives(&triplets, &sub, &g, &empty, config.semantic.batch_negatives, 0, &mut rng);
    let copies = perturbed_copies(&params, config.semantic.mu, config.semantic.q, &mut rng)?;
    let enhanced = enhanced_table(&perturbed_tables(&copies, &config.encoder, &sub)?)?;
    let readout = Tensor::seeded_uniform(&[sub.len(), config.encoder.hidden], -1.0, 1.0, &mut rng)?;
    Ok(Fixture {
        config,
        sub,
        params,
        triplets,
        l1_negatives,
        l2_negatives,
        enhanced,
        readout,
    })
}

fn l1(tape: &mut Tape, p: &ParamStore, f: &Fixture) -> Result<Var> {
    let h = encode(tape, p, &f.config.encoder, &f.sub)?.output();
    let enhanced = enhance_queries(tape, p, &f.config.structure, &f.sub, h, &distinct_queries(&f.triplets))?;
    loss_structure(tape, p, &f.config.structure, h, &enhanced, &f.triplets, &f.l1_negatives)
}

fn l2(tape: &mut Tape, p: &ParamStore, f: &Fixture) -> Result<Var> {
    let h = encode(tape, p, &f.config.encoder, &f.sub)?.output();
    loss_semantic(tape, p, &f.config.semantic, h, &f.enhanced, &f.triplets, &f.l2_negatives)
}

/// Finite-difference checks of the encoder (through a fixed linear
/// readout), L₁, L₂ and `L₁ + λL₂` on [`toy_graph`]. The perturbation-mean
/// table and all negatives are drawn once and held fixed.
pub fn run_gradcheck_suite(seed: u64) -> Result<GradCheckSuite> {
    let f = fixture(seed)?;
    let encoder: GradCheckReport = grad_check(
        |tape, p| {
            let h = encode(tape, p, &f.config.encoder, &f.sub)?.output();
            let r = tape.constant(f.readout.clone());
            let prod = tape.mul(h, r);
            Ok(tape.sum(prod))
        },
        &f.params,
        ENCODER_EPS,
    )?;
    let r1 = grad_check(|t, p| l1(t, p, &f), &f.params, LOSS_EPS)?;
    let r2 = grad_check(|t, p| l2(t, p, &f), &f.params, LOSS_EPS)?;
    let joint = grad_check(
        |t, p| {
            let a = l1(t, p, &f)?;
            let b = l2(t, p, &f)?;
            joint_loss(t, a, b, f.config.lambda)
        },
        &f.params,
        LOSS_EPS,
    )?;
    Ok(GradCheckSuite {
        encoder: encoder.max_rel_error,
        l1: r1.max_rel_error,
        l2: r2.max_rel_error,
        joint: joint.max_rel_error,
        coordinates: encoder.coordinates + r1.coordinates + r2.coordinates + joint.coordinates,
    })
}
