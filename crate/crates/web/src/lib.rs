//! Browser bindings: three small operations that return JSON strings for
//! the page in `www/`.

use std::collections::HashSet;

use phe::encoder::{head_scores, init_params, EncoderConfig};
use phe::graph::{GraphBuilder, HeteroGraph};
use phe::sampler::{draw_seeds, sample_subgraph, SampledSubgraph};
use phe::semantic::build_perturbation_subspace;
use phe::synth::{synth_academic, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

type Op = Result<String, String>;

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn star(leaves: usize, rng: &mut ChaCha8Rng) -> phe::Result<HeteroGraph> {
    let mut feature = || (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let mut b = GraphBuilder::new();
    let centre = b.add_node("paper", "paper", Some(2015), Some(feature()))?;
    let venue = b.add_node("venue", "venue", None, Some(feature()))?;
    b.add_edge(centre, venue, "published_at", None)?;
    for i in 0..leaves {
        let a = b.add_node(&format!("author{i}"), "author", None, Some(feature()))?;
        b.add_edge(centre, a, "written_by", None)?;
    }
    b.build()
}

/// Attention of a paper over its venue and `leaves` authors, per head, for
/// a randomly initialized one-layer encoder.
pub fn star_attention_json(leaves: usize, heads: usize, seed: u64) -> Op {
    if leaves == 0 || leaves > 64 {
        return Err("leaves must be in 1..=64".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = star(leaves, &mut rng).map_err(fail)?;
    let config = EncoderConfig {
        layers: 1,
        heads,
        hidden: 4 * heads,
    };
    let params = init_params(&g.schema_report(), &config, &mut rng).map_err(fail)?;
    let sub = SampledSubgraph::full(&g);
    let mut out = Vec::new();
    for h in 0..heads {
        let scores = head_scores(&sub, &params, &config, 0, 0, h).map_err(fail)?;
        let rows: Vec<_> = scores
            .iter()
            .map(|s| {
                json!({
                    "neighbor": g.node_name(sub.global(s.neighbor)),
                    "relation": g.relation(s.relation).name,
                    "logit": s.logit,
                    "weight": s.weight,
                })
            })
            .collect();
        out.push(json!({ "head": h, "edges": rows }));
    }
    Ok(json!({ "heads": out }).to_string())
}

/// How far `q` perturbed copies of an encoder move one node's embedding,
/// for magnitude `mu`.
pub fn perturbation_spread_json(mu: f64, q: usize, seed: u64) -> Op {
    if q == 0 || q > 32 {
        return Err("q must be in 1..=32".into());
    }
    let g = phe::toy::toy_graph(seed).map_err(fail)?;
    let config = phe::toy::toy_config().encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(&g.schema_report(), &config, &mut rng).map_err(fail)?;
    let sub = SampledSubgraph::full(&g);
    let base = build_perturbation_subspace(0, &sub, &params, &config, 0.0, 1, &mut rng).map_err(fail)?;
    let s = build_perturbation_subspace(0, &sub, &params, &config, mu, q, &mut rng).map_err(fail)?;
    let origin = &base.columns[0];
    let dist = |c: &[f64]| c.iter().zip(origin).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let distances: Vec<f64> = s.columns.iter().map(|c| dist(c)).collect();
    let mean = phe::semantic::enhance_sample(&s).map_err(fail)?;
    Ok(json!({
        "mu": mu,
        "q": q,
        "distances": distances,
        "mean_distance": distances.iter().sum::<f64>() / q as f64,
        "centroid_shift": dist(&mean),
        "norm": origin.iter().map(|x| x * x).sum::<f64>().sqrt(),
    })
    .to_string())
}

/// Statistics of one sampled subgraph of a small synthetic graph.
pub fn sampler_stats_json(width: usize, depth: usize, seeds: usize, seed: u64) -> Op {
    if width == 0 || width > 256 || depth == 0 || depth > 8 || seeds == 0 {
        return Err("need 1 ≤ width ≤ 256, 1 ≤ depth ≤ 8 and at least one seed".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = SynthConfig {
        papers: 300,
        authors: 120,
        venues: 8,
        fields: 10,
        feature_dim: 4,
        ..Default::default()
    };
    let g = synth_academic(&config, &mut rng).map_err(fail)?.graph;
    let paper = g.type_by_name("paper").ok_or("no paper type")?;
    let starts = draw_seeds(&g, paper, seeds, &HashSet::new(), &mut rng);
    let sub = sample_subgraph(&g, &starts, width, depth, &mut rng).map_err(fail)?;
    let types: Vec<&str> = (0..g.node_type_count()).map(|t| g.type_name(phe::graph::NodeType(t))).collect();
    Ok(json!({
        "types": types,
        "graph_nodes": g.node_count(),
        "sampled_nodes": sub.len(),
        "induced_edges": sub.edge_count(),
        "stats": sub.stats,
    })
    .to_string())
}

fn js(r: Op) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = starAttention)]
pub fn star_attention(leaves: u32, heads: u32, seed: u32) -> Result<String, JsError> {
    js(star_attention_json(leaves as usize, heads as usize, seed.into()))
}

#[wasm_bindgen(js_name = perturbationSpread)]
pub fn perturbation_spread(mu: f64, q: u32, seed: u32) -> Result<String, JsError> {
    js(perturbation_spread_json(mu, q as usize, seed.into()))
}

#[wasm_bindgen(js_name = samplerStats)]
pub fn sampler_stats(width: u32, depth: u32, seeds: u32, seed: u32) -> Result<String, JsError> {
    js(sampler_stats_json(width as usize, depth as usize, seeds as usize, seed.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: Op) -> Value {
        serde_json::from_str(&s.unwrap()).unwrap()
    }

    #[test]
    fn star_weights_sum_to_one_per_head() {
        let v = parse(star_attention_json(5, 2, 1));
        let heads = v["heads"].as_array().unwrap();
        assert_eq!(heads.len(), 2);
        for h in heads {
            let edges = h["edges"].as_array().unwrap();
            assert_eq!(edges.len(), 6);
            let total: f64 = edges.iter().map(|e| e["weight"].as_f64().unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_magnitude_does_not_move_embeddings() {
        let v = parse(perturbation_spread_json(0.0, 4, 3));
        assert_eq!(v["mean_distance"].as_f64().unwrap(), 0.0);
    }

    #[test]
    fn spread_grows_with_magnitude() {
        let spread = |mu| parse(perturbation_spread_json(mu, 8, 3))["mean_distance"].as_f64().unwrap();
        let (a, b, c) = (spread(0.05), spread(0.2), spread(0.8));
        assert!(a < b && b < c, "{a} {b} {c}");
    }

    #[test]
    fn sampler_respects_width() {
        let v = parse(sampler_stats_json(5, 2, 3, 0));
        let per_type: Vec<u64> = v["stats"]["nodes_per_type"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_u64().unwrap())
            .collect();
        // seeds are papers; every other type gets at most width per iteration
        let paper = v["types"].as_array().unwrap().iter().position(|t| t == "paper").unwrap();
        for (t, &n) in per_type.iter().enumerate() {
            let cap = if t == paper { 3 + 10 } else { 10 };
            assert!(n <= cap, "type {t}: {n}");
        }
        assert_eq!(per_type.iter().sum::<u64>(), v["sampled_nodes"].as_u64().unwrap());
    }

    #[test]
    fn bad_arguments_are_rejected() {
        assert!(star_attention_json(0, 2, 0).is_err());
        assert!(perturbation_spread_json(0.1, 0, 0).is_err());
        assert!(perturbation_spread_json(-1.0, 2, 0).is_err());
        assert!(sampler_stats_json(0, 2, 1, 0).is_err());
    }
}
