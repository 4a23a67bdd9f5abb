//! Ranking metrics and their aggregation across queries and seeds.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{PheError, Result};
use crate::graph::NodeId;

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(PheError::Config("cutoff k must be at least 1".into()));
    }
    Ok(())
}

/// NDCG@k with binary gains. `None` when `relevant` is empty.
pub fn ndcg_at_k(ranked: &[NodeId], relevant: &HashSet<NodeId>, k: usize) -> Result<Option<f64>> {
    check_k(k)?;
    if relevant.is_empty() {
        return Ok(None);
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, v)| relevant.contains(v))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal: f64 = (1..=relevant.len().min(k)).map(discount).sum();
    Ok(Some(dcg / ideal))
}

/// `|relevant ∩ top-k| / |relevant|`. `None` when `relevant` is empty.
pub fn recall_at_k(ranked: &[NodeId], relevant: &HashSet<NodeId>, k: usize) -> Result<Option<f64>> {
    check_k(k)?;
    if relevant.is_empty() {
        return Ok(None);
    }
    let hits = ranked.iter().take(k).filter(|v| relevant.contains(v)).count();
    Ok(Some(hits as f64 / relevant.len() as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len();
        if n == 0 {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

/// Mean NDCG@k and Recall@k over queries, skipping empty relevant sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryAverages {
    pub ndcg: f64,
    pub recall: f64,
    pub queries: usize,
    /// Queries left out because their relevant set was empty.
    pub excluded: usize,
}

pub fn average_metrics<'a, I>(rows: I, k: usize) -> Result<QueryAverages>
where
    I: IntoIterator<Item = (&'a [NodeId], &'a HashSet<NodeId>)>,
{
    check_k(k)?;
    let (mut ndcg, mut recall, mut excluded) = (Vec::new(), Vec::new(), 0);
    for (ranked, relevant) in rows {
        match (ndcg_at_k(ranked, relevant, k)?, recall_at_k(ranked, relevant, k)?) {
            (Some(n), Some(r)) => {
                ndcg.push(n);
                recall.push(r);
            }
            _ => excluded += 1,
        }
    }
    // summing in sorted order makes the result independent of query order
    let mean = |mut v: Vec<f64>| {
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / v.len() as f64
    };
    Ok(QueryAverages {
        queries: ndcg.len(),
        ndcg: mean(ndcg),
        recall: mean(recall),
        excluded,
    })
}

/// Per-seed results summarized as `{task, mode, seeds, ndcg_at_10, recall_at_10}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub task: String,
    pub mode: String,
    pub pretrained: bool,
    pub seeds: Vec<u64>,
    pub ndcg_at_10: MeanStd,
    pub recall_at_10: MeanStd,
}

impl SeedAggregate {
    pub fn new(task: &str, mode: &str, pretrained: bool, per_seed: &[(u64, QueryAverages)]) -> Self {
        let ndcg: Vec<f64> = per_seed.iter().map(|(_, a)| a.ndcg).collect();
        let recall: Vec<f64> = per_seed.iter().map(|(_, a)| a.recall).collect();
        SeedAggregate {
            task: task.to_string(),
            mode: mode.to_string(),
            pretrained,
            seeds: per_seed.iter().map(|(s, _)| *s).collect(),
            ndcg_at_10: MeanStd::of(&ndcg),
            recall_at_10: MeanStd::of(&recall),
        }
    }
}
