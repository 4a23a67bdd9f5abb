//! Desk-scale academic graphs with planted communities.
//!
//! Papers, authors, venues and fields each belong to one of `communities`
//! groups. Edge probabilities depend on whether the endpoints share a
//! community, and node features are a community centroid plus noise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PheError, Result};
use crate::graph::{GraphBuilder, HeteroGraph, NodeId};

pub const PAPER: &str = "paper";
pub const AUTHOR: &str = "author";
pub const VENUE: &str = "venue";
pub const FIELD: &str = "field";

pub const PUBLISHED_AT: &str = "published_at";
pub const HAS_FIELD: &str = "has_field";
pub const WRITTEN_BY: &str = "written_by";
pub const CITES: &str = "cites";

/// Per-pair edge probabilities for one relation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeProbs {
    pub intra: f64,
    pub inter: f64,
}

impl EdgeProbs {
    pub const NONE: EdgeProbs = EdgeProbs {
        intra: 0.0,
        inter: 0.0,
    };

    fn is_zero(&self) -> bool {
        self.intra == 0.0 && self.inter == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub papers: usize,
    pub authors: usize,
    pub venues: usize,
    pub fields: usize,
    pub communities: usize,
    /// Paper-paper citation probabilities.
    pub cites: EdgeProbs,
    pub has_field: EdgeProbs,
    pub written_by: EdgeProbs,
    /// Probability that a paper's single venue comes from its own community.
    pub venue_affinity: f64,
    pub year_min: i32,
    pub year_max: i32,
    pub feature_dim: usize,
    /// Scale of the community centroid in each feature vector.
    pub signal: f64,
    /// Standard deviation of the per-node feature noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            papers: 2000,
            authors: 500,
            venues: 20,
            fields: 50,
            communities: 10,
            cites: EdgeProbs {
                intra: 0.01,
                inter: 0.0002,
            },
            has_field: EdgeProbs {
                intra: 0.3,
                inter: 0.002,
            },
            written_by: EdgeProbs {
                intra: 0.04,
                inter: 0.0005,
            },
            venue_affinity: 0.8,
            year_min: 2000,
            year_max: 2019,
            feature_dim: 16,
            signal: 1.0,
            noise: 1.0,
        }
    }
}

/// A generated graph with its planted community labels.
#[derive(Clone, Debug)]
pub struct SyntheticGraph {
    pub graph: HeteroGraph,
    /// Community of every node, indexed by node id.
    pub community: Vec<usize>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, n) in [
            ("papers", self.papers),
            ("authors", self.authors),
            ("venues", self.venues),
            ("fields", self.fields),
            ("communities", self.communities),
            ("feature_dim", self.feature_dim),
        ] {
            if n == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        for (name, p) in [
            ("cites", self.cites),
            ("has_field", self.has_field),
            ("written_by", self.written_by),
        ] {
            for v in [p.intra, p.inter] {
                if !(0.0..=1.0).contains(&v) {
                    problems.push(format!("{name} probability {v} outside [0, 1]"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.venue_affinity) {
            problems.push("venue_affinity outside [0, 1]".into());
        }
        if self.year_min > self.year_max {
            problems.push("year_min exceeds year_max".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(PheError::Config(problems.join("; ")))
        }
    }
}

fn bernoulli_edges<R: Rng + ?Sized>(
    rng: &mut R,
    b: &mut GraphBuilder,
    relation: &str,
    srcs: &[NodeId],
    dsts: &[NodeId],
    community: &[usize],
    probs: EdgeProbs,
    skip_self: bool,
) -> Result<()> {
    for &s in srcs {
        for &d in dsts {
            if skip_self && s >= d {
                continue;
            }
            let p = if community[s] == community[d] {
                probs.intra
            } else {
                probs.inter
            };
            if p > 0.0 && rng.random::<f64>() < p {
                b.add_edge(s, d, relation, None)?;
            }
        }
    }
    Ok(())
}

/// Generates an academic graph. Deterministic for a given generator state.
pub fn synth_academic<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<SyntheticGraph> {
    config.validate()?;
    let c = config.communities;
    let centroids: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..config.feature_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect()
        })
        .collect();

    let mut b = GraphBuilder::new();
    for t in [PAPER, AUTHOR, VENUE, FIELD] {
        b.declare_type(t);
    }
    let mut community = Vec::new();
    let feature = |rng: &mut R, k: usize| -> Vec<f64> {
        centroids[k]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(rng);
                config.signal * m + config.noise * z
            })
            .collect()
    };

    // Balanced community sizes, shuffled so ids carry no community signal.
    let mut paper_comm: Vec<usize> = (0..config.papers).map(|i| i % c).collect();
    paper_comm.shuffle(rng);
    let mut papers = Vec::with_capacity(config.papers);
    for (i, &k) in paper_comm.iter().enumerate() {
        let year = rng.random_range(config.year_min..=config.year_max);
        let f = feature(rng, k);
        papers.push(b.add_node(&format!("p{i}"), PAPER, Some(year), Some(f))?);
        community.push(k);
    }
    let mut add_group = |b: &mut GraphBuilder, prefix: &str, ty: &str, n: usize, rng: &mut R| {
        let mut ids = Vec::with_capacity(n);
        for i in 0..n {
            let k = i % c;
            let f = feature(rng, k);
            ids.push(b.add_node(&format!("{prefix}{i}"), ty, None, Some(f))?);
            community.push(k);
        }
        Ok::<_, PheError>(ids)
    };
    let authors = add_group(&mut b, "a", AUTHOR, config.authors, rng)?;
    let venues = add_group(&mut b, "v", VENUE, config.venues, rng)?;
    let fields = add_group(&mut b, "f", FIELD, config.fields, rng)?;

    b.declare_relation(PUBLISHED_AT, PAPER, VENUE);
    let mut venues_by_comm = vec![Vec::new(); c];
    for &v in &venues {
        venues_by_comm[community[v]].push(v);
    }
    for &p in &papers {
        let own = &venues_by_comm[community[p]];
        let v = if !own.is_empty() && rng.random::<f64>() < config.venue_affinity {
            own[rng.random_range(0..own.len())]
        } else {
            venues[rng.random_range(0..venues.len())]
        };
        b.add_edge(p, v, PUBLISHED_AT, None)?;
    }
    if !config.has_field.is_zero() {
        b.declare_relation(HAS_FIELD, PAPER, FIELD);
        bernoulli_edges(rng, &mut b, HAS_FIELD, &papers, &fields, &community, config.has_field, false)?;
    }
    if !config.written_by.is_zero() {
        b.declare_relation(WRITTEN_BY, PAPER, AUTHOR);
        bernoulli_edges(rng, &mut b, WRITTEN_BY, &papers, &authors, &community, config.written_by, false)?;
    }
    if !config.cites.is_zero() {
        b.declare_relation(CITES, PAPER, PAPER);
        bernoulli_edges(rng, &mut b, CITES, &papers, &papers, &community, config.cites, true)?;
    }
    Ok(SyntheticGraph {
        graph: b.build()?,
        community,
    })
}
