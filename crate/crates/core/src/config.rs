//! Flat TOML run configuration covering every tunable of a run.

use std::fs;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::error::{PheError, Result};
use crate::finetune::{FinetuneConfig, FinetuneMode};
use crate::pretrain::PretrainConfig;
use crate::sampler::SplitSpec;
use crate::structure::Fusion;
use crate::synth::{EdgeProbs, SynthConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Seeds pre-training; fine-tuning uses `finetune_seeds`.
    pub seed: u64,
    pub nodes: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub split: SplitSpec,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub finetune_seeds: Vec<u64>,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            nodes: None,
            edges: None,
            checkpoint: None,
            split: SplitSpec::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            finetune_seeds: vec![0],
            synth: SynthConfig::default(),
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "nodes",
    "edges",
    "checkpoint",
    "pretrain_end",
    "train_start",
    "train_end",
    "val_start",
    "val_end",
    "test_start",
    "test_end",
    "layers",
    "heads",
    "hidden",
    "width",
    "depth",
    "seeds_per_batch",
    "triplets_per_batch",
    "anchor_type",
    "tau",
    "batch_negatives",
    "leaky_slope",
    "fusion",
    "type_attention_dim",
    "enhance",
    "mu",
    "q",
    "semantic_negatives",
    "separate_relations",
    "semantic_task",
    "lambda",
    "queue_capacity",
    "queue_span",
    "epochs",
    "batches_per_epoch",
    "validation_batches",
    "lr",
    "min_lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "mode",
    "task",
    "label_fraction",
    "finetune_epochs",
    "finetune_lr",
    "candidates",
    "eval_k",
    "batch_queries",
    "finetune_seeds",
    "synth_papers",
    "synth_authors",
    "synth_venues",
    "synth_fields",
    "synth_communities",
    "synth_feature_dim",
    "synth_cites",
];

fn as_u64(v: &Value) -> std::result::Result<u64, String> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        Value::Integer(i) => Err(format!("expected a non-negative integer, got {i}")),
        other => Err(format!("expected an integer, got {}", other.type_str())),
    }
}

fn as_usize(v: &Value) -> std::result::Result<usize, String> {
    as_u64(v).map(|x| x as usize)
}

fn as_i32(v: &Value) -> std::result::Result<i32, String> {
    match v {
        Value::Integer(i) => i32::try_from(*i).map_err(|_| format!("{i} is out of range")),
        other => Err(format!("expected an integer, got {}", other.type_str())),
    }
}

fn as_f64(v: &Value) -> std::result::Result<f64, String> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(format!("expected a number, got {}", other.type_str())),
    }
}

fn as_bool(v: &Value) -> std::result::Result<bool, String> {
    v.as_bool().ok_or_else(|| format!("expected a boolean, got {}", v.type_str()))
}

fn as_str(v: &Value) -> std::result::Result<String, String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| format!("expected a string, got {}", v.type_str()))
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &Value) -> std::result::Result<(), String> {
        let p = &mut self.pretrain;
        let f = &mut self.finetune;
        match key {
            "seed" => self.seed = as_u64(v)?,
            "nodes" => self.nodes = Some(as_str(v)?.into()),
            "edges" => self.edges = Some(as_str(v)?.into()),
            "checkpoint" => self.checkpoint = Some(as_str(v)?.into()),
            "pretrain_end" => self.split.pretrain_end = as_i32(v)?,
            "train_start" => self.split.train.0 = as_i32(v)?,
            "train_end" => self.split.train.1 = as_i32(v)?,
            "val_start" => self.split.val.0 = as_i32(v)?,
            "val_end" => self.split.val.1 = as_i32(v)?,
            "test_start" => self.split.test.0 = as_i32(v)?,
            "test_end" => self.split.test.1 = as_i32(v)?,
            "layers" => p.encoder.layers = as_usize(v)?,
            "heads" => p.encoder.heads = as_usize(v)?,
            "hidden" => p.encoder.hidden = as_usize(v)?,
            "width" => p.sampler.width = as_usize(v)?,
            "depth" => p.sampler.depth = as_usize(v)?,
            "seeds_per_batch" => p.sampler.seeds_per_batch = as_usize(v)?,
            "triplets_per_batch" => p.sampler.triplets_per_batch = as_usize(v)?,
            "anchor_type" => p.sampler.anchor_type = as_str(v)?,
            "tau" => {
                let t = as_f64(v)?;
                p.structure.tau = t;
                p.semantic.tau = t;
            }
            "batch_negatives" => p.structure.batch_negatives = as_usize(v)?,
            "leaky_slope" => p.structure.leaky_slope = as_f64(v)?,
            "fusion" => {
                p.structure.fusion = match as_str(v)?.as_str() {
                    "tanh" => Fusion::Tanh,
                    "identity" => Fusion::Identity,
                    other => return Err(format!("expected \"tanh\" or \"identity\", got \"{other}\"")),
                }
            }
            "type_attention_dim" => p.structure.type_attention_dim = as_usize(v)?,
            "enhance" => p.structure.enhance = as_bool(v)?,
            "mu" => p.semantic.mu = as_f64(v)?,
            "q" => p.semantic.q = as_usize(v)?,
            "semantic_negatives" => p.semantic.batch_negatives = as_usize(v)?,
            "separate_relations" => p.semantic.separate_relations = as_bool(v)?,
            "semantic_task" => p.semantic_task = as_bool(v)?,
            "lambda" => p.lambda = as_f64(v)?,
            "queue_capacity" => p.queue_capacity = as_usize(v)?,
            "queue_span" => p.queue_span = as_usize(v)?,
            "epochs" => p.epochs = as_usize(v)?,
            "batches_per_epoch" => p.batches_per_epoch = as_usize(v)?,
            "validation_batches" => p.validation_batches = as_usize(v)?,
            "lr" => p.lr = as_f64(v)?,
            "min_lr" => p.min_lr = as_f64(v)?,
            "beta1" => {
                p.optimizer.beta1 = as_f64(v)?;
                f.optimizer.beta1 = p.optimizer.beta1;
            }
            "beta2" => {
                p.optimizer.beta2 = as_f64(v)?;
                f.optimizer.beta2 = p.optimizer.beta2;
            }
            "eps" => {
                p.optimizer.eps = as_f64(v)?;
                f.optimizer.eps = p.optimizer.eps;
            }
            "weight_decay" => {
                p.optimizer.weight_decay = as_f64(v)?;
                f.optimizer.weight_decay = p.optimizer.weight_decay;
            }
            "mode" => {
                f.mode = match as_str(v)?.as_str() {
                    "full" => FinetuneMode::Full,
                    "frozen" => FinetuneMode::Frozen,
                    other => return Err(format!("expected \"full\" or \"frozen\", got \"{other}\"")),
                }
            }
            "task" => f.task = as_str(v)?,
            "label_fraction" => f.label_fraction = as_f64(v)?,
            "finetune_epochs" => f.epochs = as_usize(v)?,
            "finetune_lr" => f.lr = as_f64(v)?,
            "candidates" => f.candidates = as_usize(v)?,
            "eval_k" => f.k = as_usize(v)?,
            "batch_queries" => f.batch_queries = as_usize(v)?,
            "finetune_seeds" => {
                let arr = v
                    .as_array()
                    .ok_or_else(|| format!("expected an array of integers, got {}", v.type_str()))?;
                self.finetune_seeds = arr.iter().map(as_u64).collect::<std::result::Result<_, _>>()?;
            }
            "synth_papers" => self.synth.papers = as_usize(v)?,
            "synth_authors" => self.synth.authors = as_usize(v)?,
            "synth_venues" => self.synth.venues = as_usize(v)?,
            "synth_fields" => self.synth.fields = as_usize(v)?,
            "synth_communities" => self.synth.communities = as_usize(v)?,
            "synth_feature_dim" => self.synth.feature_dim = as_usize(v)?,
            "synth_cites" => {
                self.synth.cites = if as_bool(v)? {
                    SynthConfig::default().cites
                } else {
                    EdgeProbs::NONE
                }
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<Value> {
        let p = &self.pretrain;
        let f = &self.finetune;
        let int = |x: usize| Value::Integer(x as i64);
        let path = |x: &Option<PathBuf>| x.as_ref().map(|p| Value::String(p.display().to_string()));
        Some(match key {
            "seed" => Value::Integer(self.seed as i64),
            "nodes" => return path(&self.nodes),
            "edges" => return path(&self.edges),
            "checkpoint" => return path(&self.checkpoint),
            "pretrain_end" => Value::Integer(self.split.pretrain_end.into()),
            "train_start" => Value::Integer(self.split.train.0.into()),
            "train_end" => Value::Integer(self.split.train.1.into()),
            "val_start" => Value::Integer(self.split.val.0.into()),
            "val_end" => Value::Integer(self.split.val.1.into()),
            "test_start" => Value::Integer(self.split.test.0.into()),
            "test_end" => Value::Integer(self.split.test.1.into()),
            "layers" => int(p.encoder.layers),
            "heads" => int(p.encoder.heads),
            "hidden" => int(p.encoder.hidden),
            "width" => int(p.sampler.width),
            "depth" => int(p.sampler.depth),
            "seeds_per_batch" => int(p.sampler.seeds_per_batch),
            "triplets_per_batch" => int(p.sampler.triplets_per_batch),
            "anchor_type" => Value::String(p.sampler.anchor_type.clone()),
            "tau" => Value::Float(p.structure.tau),
            "batch_negatives" => int(p.structure.batch_negatives),
            "leaky_slope" => Value::Float(p.structure.leaky_slope),
            "fusion" => Value::String(
                match p.structure.fusion {
                    Fusion::Tanh => "tanh",
                    Fusion::Identity => "identity",
                }
                .into(),
            ),
            "type_attention_dim" => int(p.structure.type_attention_dim),
            "enhance" => Value::Boolean(p.structure.enhance),
            "mu" => Value::Float(p.semantic.mu),
            "q" => int(p.semantic.q),
            "semantic_negatives" => int(p.semantic.batch_negatives),
            "separate_relations" => Value::Boolean(p.semantic.separate_relations),
            "semantic_task" => Value::Boolean(p.semantic_task),
            "lambda" => Value::Float(p.lambda),
            "queue_capacity" => int(p.queue_capacity),
            "queue_span" => int(p.queue_span),
            "epochs" => int(p.epochs),
            "batches_per_epoch" => int(p.batches_per_epoch),
            "validation_batches" => int(p.validation_batches),
            "lr" => Value::Float(p.lr),
            "min_lr" => Value::Float(p.min_lr),
            "beta1" => Value::Float(p.optimizer.beta1),
            "beta2" => Value::Float(p.optimizer.beta2),
            "eps" => Value::Float(p.optimizer.eps),
            "weight_decay" => Value::Float(p.optimizer.weight_decay),
            "mode" => Value::String(f.mode.as_str().into()),
            "task" => Value::String(f.task.clone()),
            "label_fraction" => Value::Float(f.label_fraction),
            "finetune_epochs" => int(f.epochs),
            "finetune_lr" => Value::Float(f.lr),
            "candidates" => int(f.candidates),
            "eval_k" => int(f.k),
            "batch_queries" => int(f.batch_queries),
            "finetune_seeds" => Value::Array(self.finetune_seeds.iter().map(|&s| Value::Integer(s as i64)).collect()),
            "synth_papers" => int(self.synth.papers),
            "synth_authors" => int(self.synth.authors),
            "synth_venues" => int(self.synth.venues),
            "synth_fields" => int(self.synth.fields),
            "synth_communities" => int(self.synth.communities),
            "synth_feature_dim" => int(self.synth.feature_dim),
            "synth_cites" => Value::Boolean(self.synth.cites != EdgeProbs::NONE),
            _ => return None,
        })
    }

    /// Applies the keys of `table` over the defaults, then validates.
    /// Every offending key is reported at once.
    pub fn from_table(table: &Table) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        let mut problems = Vec::new();
        for (key, value) in table {
            if let Err(e) = c.set(key, value) {
                problems.push(format!("{key}: {e}"));
            }
        }
        c.sync_seed();
        // keys that failed to parse kept their defaults, so this adds no noise
        problems.extend(c.problems());
        if problems.is_empty() {
            Ok(c)
        } else {
            Err(PheError::ConfigKeys(problems))
        }
    }

    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| PheError::ConfigKeys(vec![format!("syntax: {}", e.message())]))?;
        RunConfig::from_table(&table)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::parse_str(&fs::read_to_string(path)?)
    }

    /// Propagates `seed` to pre-training.
    pub fn sync_seed(&mut self) {
        self.pretrain.seed = self.seed;
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = self.pretrain.problems();
        out.extend(self.finetune.problems());
        if let Err(e) = self.split.validate() {
            out.push(e.to_string());
        }
        match self.synth.validate() {
            Ok(()) => {}
            Err(PheError::ConfigKeys(p)) => out.extend(p.into_iter().map(|m| format!("synth: {m}"))),
            Err(e) => out.push(format!("synth: {e}")),
        }
        if self.finetune_seeds.is_empty() {
            out.push("finetune_seeds must not be empty".into());
        }
        out
    }

    /// Every key with its resolved value, as TOML.
    pub fn echo(&self) -> String {
        let mut table = Table::new();
        for key in KEYS {
            if let Some(v) = self.get(key) {
                table.insert((*key).to_string(), v);
            }
        }
        let mut out = String::new();
        // one key per line, in KEYS order
        for key in KEYS {
            if let Some(v) = table.get(*key) {
                out.push_str(&format!("{key} = {v}\n"));
            }
        }
        out
    }

    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("config.toml");
        fs::write(&path, self.echo())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse_str("").unwrap();
        assert_eq!(c.pretrain.structure.tau, 0.2);
        assert_eq!(c.pretrain.semantic.tau, 0.2);
        assert_eq!(c.pretrain.queue_capacity, 256);
        assert_eq!(c.pretrain.encoder.layers, 3);
        assert_eq!(c.pretrain.encoder.heads, 8);
        assert_eq!(c.pretrain.encoder.hidden, 400);
        assert_eq!(c.pretrain.sampler.width, 128);
        assert_eq!(c.pretrain.sampler.depth, 6);
        assert_eq!(c.finetune.label_fraction, 0.1);
        assert_eq!(c.finetune.candidates, 99);
    }

    #[test]
    fn negative_tau_names_the_key() {
        let err = RunConfig::parse_str("tau = -1").unwrap_err();
        match err {
            PheError::ConfigKeys(p) => assert!(p.iter().any(|m| m.contains("tau")), "{p:?}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn every_offending_key_listed() {
        let err = RunConfig::parse_str("bogus = 1\nlayers = \"three\"\nmode = \"half\"\n").unwrap_err();
        match err {
            PheError::ConfigKeys(p) => {
                assert_eq!(p.len(), 3, "{p:?}");
                assert!(p.iter().any(|m| m.starts_with("bogus: unknown key")));
                assert!(p.iter().any(|m| m.starts_with("layers:")));
                assert!(p.iter().any(|m| m.starts_with("mode:")));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::parse_str(
            "seed = 9\nnodes = \"a/nodes.tsv\"\nhidden = 32\nheads = 4\nlr = 0.0003\nmu = 0.05\n\
             fusion = \"identity\"\nfinetune_seeds = [1, 2, 3]\nmode = \"frozen\"\nsynth_cites = false\nlambda = 1\n",
        )
        .unwrap();
        assert_eq!(c.pretrain.lambda, 1.0);
        let back = RunConfig::parse_str(&c.echo()).unwrap();
        assert_eq!(back, c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse_str(&d.echo()).unwrap(), d);
        for key in KEYS.iter().filter(|k| !matches!(**k, "nodes" | "edges" | "checkpoint")) {
            assert!(d.echo().contains(&format!("{key} = ")), "{key}");
        }
    }
}
