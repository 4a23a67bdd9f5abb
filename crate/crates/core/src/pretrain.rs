//! The pre-training loop, its configuration and checkpoints.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_lr, AdamWConfig, OptimizerState, ParamStore, Tape, Tensor, Var};
use crate::encoder::{self, encode, EncoderConfig};
use crate::error::{PheError, Result};
use crate::graph::{HeteroGraph, NodeId, NodeType};
use crate::queue::{NegativeQueue, QueueFill};
use crate::sampler::{draw_positive_triplets, draw_seeds, sample_subgraph, SampledSubgraph, SamplerStats, Triplet};
use crate::semantic::{semantic_step, SemanticConfig};
use crate::structure::{self, init_relation_params, structure_step, StructureConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Nodes sampled per type per iteration.
    pub width: usize,
    /// Sampling iterations.
    pub depth: usize,
    pub seeds_per_batch: usize,
    /// Positive triplets per batch, split evenly across relations.
    pub triplets_per_batch: usize,
    /// Node type seeds are drawn from.
    pub anchor_type: String,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            width: 128,
            depth: 6,
            seeds_per_batch: 32,
            triplets_per_batch: 256,
            anchor_type: "paper".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub structure: StructureConfig,
    pub semantic: SemanticConfig,
    pub sampler: SamplerConfig,
    /// Weight of the semantic loss.
    pub lambda: f64,
    /// Compute the semantic loss at all (off gives a structure-only trainer).
    pub semantic_task: bool,
    pub queue_capacity: usize,
    /// Batches whose queued entries stay eligible.
    pub queue_span: usize,
    pub epochs: usize,
    /// Zero picks `ceil(anchor nodes / seeds_per_batch)`.
    pub batches_per_epoch: usize,
    pub validation_batches: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder: EncoderConfig::default(),
            structure: StructureConfig::default(),
            semantic: SemanticConfig::default(),
            sampler: SamplerConfig::default(),
            lambda: 0.4,
            semantic_task: true,
            queue_capacity: 256,
            queue_span: 1,
            epochs: 100,
            batches_per_epoch: 0,
            validation_batches: 2,
            lr: 1e-3,
            min_lr: 0.0,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Every problem found, one message per offending key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.encoder.validate() {
            out.push(e.to_string());
        }
        let positive = [
            ("tau", self.structure.tau),
            ("lr", self.lr),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                out.push(format!("{k} must be positive, got {v}"));
            }
        }
        if self.semantic.tau != self.structure.tau && !(self.semantic.tau > 0.0) {
            out.push(format!("tau must be positive, got {}", self.semantic.tau));
        }
        let non_negative = [
            ("lambda", self.lambda),
            ("mu", self.semantic.mu),
            ("min_lr", self.min_lr),
            ("weight_decay", self.optimizer.weight_decay),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                out.push(format!("{k} must be non-negative, got {v}"));
            }
        }
        if self.min_lr > self.lr {
            out.push(format!("min_lr {} exceeds lr {}", self.min_lr, self.lr));
        }
        let counts = [
            ("q", self.semantic.q),
            ("epochs", self.epochs),
            ("width", self.sampler.width),
            ("depth", self.sampler.depth),
            ("seeds_per_batch", self.sampler.seeds_per_batch),
            ("triplets_per_batch", self.sampler.triplets_per_batch),
            ("queue_span", self.queue_span),
            ("type_attention_dim", self.structure.type_attention_dim),
        ];
        for (k, v) in counts {
            if v == 0 {
                out.push(format!("{k} must be at least 1"));
            }
        }
        for (k, v) in [("beta1", self.optimizer.beta1), ("beta2", self.optimizer.beta2)] {
            if !(0.0..1.0).contains(&v) {
                out.push(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.optimizer.eps > 0.0) {
            out.push(format!("eps must be positive, got {}", self.optimizer.eps));
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

/// `L₁ + λ·L₂`.
pub fn joint_loss(tape: &mut Tape, l1: Var, l2: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(PheError::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let weighted = tape.scale(l2, lambda);
    Ok(tape.add(l1, weighted))
}

/// All trainable parameters of a fresh model.
pub fn init_model(g: &HeteroGraph, config: &PretrainConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let schema = g.schema_report();
    let d = config.encoder.hidden;
    let mut p = encoder::init_params(&schema, &config.encoder, rng)?;
    p.merge(&structure::init_params(&schema, d, &config.structure, rng));
    p.merge(&init_relation_params(&schema, d, "rel", rng));
    if config.semantic.separate_relations {
        p.merge(&init_relation_params(&schema, d, "rel2", rng));
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: serde_json::Value,
    pub best_validation: Option<f64>,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    /// Errors unless every name in `expected` is present.
    pub fn check_names<'a>(&self, expected: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing: Vec<String> = expected
            .into_iter()
            .filter(|n| !self.params.contains(n))
            .map(str::to_string)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(PheError::CheckpointMismatch { missing })
        }
    }
}

const MAGIC: &[u8; 4] = b"PHE1";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: serde_json::Value,
    best_validation: Option<f64>,
    epoch: usize,
}

pub fn checkpoint_bytes(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(c.params.len() as u32).to_le_bytes());
    for (name, t) in c.params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| PheError::Shape(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(DTYPE_F64);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(&Meta {
        config: c.config.clone(),
        best_validation: c.best_validation,
        epoch: c.epoch,
    })?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(PheError::CorruptCheckpoint {
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn corrupt(&self, at: usize, message: impl Into<String>) -> PheError {
        PheError::CorruptCheckpoint {
            offset: at,
            message: message.into(),
        }
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.corrupt(0, "bad magic"));
    }
    let at = r.pos;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.corrupt(at, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.corrupt(at, "tensor name is not UTF-8"))?
            .to_string();
        let at = r.pos;
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        if !(1..=3).contains(&rank) {
            return Err(r.corrupt(at, format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => r
                .take(n * 8, "payload")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DTYPE_F32 => r
                .take(n * 4, "payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => return Err(r.corrupt(at, format!("unknown dtype code {other}"))),
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let meta: Meta = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| r.corrupt(at, format!("config blob: {e}")))?;
    if r.pos != buf.len() {
        return Err(r.corrupt(r.pos, "trailing bytes"));
    }
    Ok(Checkpoint {
        params,
        config: meta.config,
        best_validation: meta.best_validation,
        epoch: meta.epoch,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(c)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub loss: f64,
    pub lr: f64,
    pub validation: f64,
    pub structure_queue: QueueFill,
    pub semantic_queue: QueueFill,
    pub batches: usize,
    pub skipped_batches: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BatchReport<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub sampler: &'a SamplerStats,
    pub triplets: usize,
    pub l1: f64,
    pub l2: f64,
}

pub enum TrainEvent<'a> {
    Batch(&'a BatchReport<'a>),
    Skipped { epoch: usize, batch: usize },
    Epoch(&'a EpochReport),
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Checkpoint,
    /// Parameters after the last epoch.
    pub last: ParamStore,
    pub reports: Vec<EpochReport>,
    /// Wall-clock seconds per epoch, kept apart from the reports so those
    /// stay reproducible.
    pub epoch_seconds: Vec<f64>,
}

/// One batch: subgraph plus its positive triplets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub seeds: Vec<NodeId>,
    pub sub: SampledSubgraph,
    pub triplets: Vec<Triplet>,
}

fn per_relation_cap(config: &PretrainConfig, g: &HeteroGraph) -> usize {
    config.sampler.triplets_per_batch.div_ceil(g.relation_count().max(1))
}

pub fn anchor_type(g: &HeteroGraph, config: &PretrainConfig) -> Result<NodeType> {
    g.type_by_name(&config.sampler.anchor_type).ok_or_else(|| {
        PheError::Config(format!("anchor_type `{}` is not a node type", config.sampler.anchor_type))
    })
}

pub fn draw_batch(
    g: &HeteroGraph,
    config: &PretrainConfig,
    anchor: NodeType,
    exclude: &HashSet<NodeId>,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Batch>> {
    let seeds = draw_seeds(g, anchor, config.sampler.seeds_per_batch, exclude, rng);
    if seeds.is_empty() {
        return Ok(None);
    }
    let sub = sample_subgraph(g, &seeds, config.sampler.width, config.sampler.depth, rng)?;
    let triplets = draw_positive_triplets(&sub, rng, per_relation_cap(config, g));
    Ok(Some(Batch { seeds, sub, triplets }))
}

/// Losses of one batch recorded on `tape`.
pub struct StepLosses {
    pub l1: Var,
    pub l2: Option<Var>,
    pub total: Var,
    pub structure_push: Vec<crate::queue::QueueEntry>,
    pub semantic_push: Vec<crate::queue::QueueEntry>,
}

#[allow(clippy::too_many_arguments)]
pub fn batch_losses(
    tape: &mut Tape,
    params: &ParamStore,
    config: &PretrainConfig,
    g: &HeteroGraph,
    batch: &Batch,
    queues: (&NegativeQueue, &NegativeQueue),
    index: u64,
    rngs: (&mut ChaCha8Rng, &mut ChaCha8Rng),
) -> Result<StepLosses> {
    let enc = encode(tape, params, &config.encoder, &batch.sub)?;
    let h = enc.output();
    let st = structure_step(
        tape,
        params,
        &config.structure,
        g,
        &batch.sub,
        h,
        &batch.triplets,
        queues.0,
        index,
        rngs.0,
    )?;
    if !config.semantic_task {
        return Ok(StepLosses {
            l1: st.loss,
            l2: None,
            total: st.loss,
            structure_push: st.push,
            semantic_push: Vec::new(),
        });
    }
    let se = semantic_step(
        tape,
        params,
        &config.encoder,
        &config.semantic,
        g,
        &batch.sub,
        h,
        &batch.triplets,
        queues.1,
        index,
        rngs.1,
    )?;
    let total = joint_loss(tape, st.loss, se.loss, config.lambda)?;
    Ok(StepLosses {
        l1: st.loss,
        l2: Some(se.loss),
        total,
        structure_push: st.push,
        semantic_push: se.push,
    })
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const STREAM_INIT: u64 = 0;
const STREAM_SAMPLER: u64 = 1;
const STREAM_STRUCTURE: u64 = 2;
const STREAM_SEMANTIC: u64 = 3;
const STREAM_VALIDATION: u64 = 4;
const STREAM_VALIDATION_LOSS: u64 = 5;
const STREAM_VALIDATION_SEMANTIC: u64 = 6;

fn validation_loss(
    params: &ParamStore,
    config: &PretrainConfig,
    g: &HeteroGraph,
    batches: &[Batch],
) -> Result<f64> {
    if batches.is_empty() {
        return Ok(f64::NAN);
    }
    let empty = NegativeQueue::new(0, 1);
    let mut rs = stream(config.seed, STREAM_VALIDATION_LOSS);
    let mut rm = stream(config.seed, STREAM_VALIDATION_SEMANTIC);
    let mut total = 0.0;
    for b in batches {
        let mut tape = Tape::no_grad();
        let l = batch_losses(&mut tape, params, config, g, b, (&empty, &empty), 0, (&mut rs, &mut rm))?;
        total += tape.value(l.total).item();
    }
    Ok(total / batches.len() as f64)
}

fn checkpoint(params: &ParamStore, config: &PretrainConfig, best: Option<f64>, epoch: usize) -> Result<Checkpoint> {
    Ok(Checkpoint {
        params: params.clone(),
        config: serde_json::to_value(config)?,
        best_validation: best,
        epoch,
    })
}

pub fn pretrain(g: &HeteroGraph, config: &PretrainConfig) -> Result<PretrainOutcome> {
    pretrain_observed(g, config, |_| {})
}

/// Runs the full loop, calling `observe` after every batch and epoch.
pub fn pretrain_observed<F>(g: &HeteroGraph, config: &PretrainConfig, mut observe: F) -> Result<PretrainOutcome>
where
    F: FnMut(TrainEvent<'_>),
{
    config.validate()?;
    if g.edge_count() == 0 {
        return Err(PheError::Empty("pre-training graph has no edges".into()));
    }
    let anchor = anchor_type(g, config)?;
    let mut params = init_model(g, config, &mut stream(config.seed, STREAM_INIT))?;

    let mut val_rng = stream(config.seed, STREAM_VALIDATION);
    let mut held_out = HashSet::new();
    let mut val_batches = Vec::new();
    for _ in 0..config.validation_batches {
        if let Some(b) = draw_batch(g, config, anchor, &held_out, &mut val_rng)? {
            held_out.extend(b.seeds.iter().copied());
            if !b.triplets.is_empty() {
                val_batches.push(b);
            }
        }
    }
    let candidates = draw_seeds(g, anchor, usize::MAX, &held_out, &mut stream(0, 0)).len();
    if candidates == 0 {
        return Err(PheError::Empty("no training seeds left after holding out validation".into()));
    }
    let batches = if config.batches_per_epoch == 0 {
        candidates.div_ceil(config.sampler.seeds_per_batch)
    } else {
        config.batches_per_epoch
    };

    let mut opt = OptimizerState::new(config.optimizer.clone(), params.names().map(str::to_string).collect::<Vec<_>>());
    let mut sq = NegativeQueue::new(config.queue_capacity, config.queue_span);
    let mut mq = NegativeQueue::new(config.queue_capacity, config.queue_span);
    let mut rng_sampler = stream(config.seed, STREAM_SAMPLER);
    let mut rng_structure = stream(config.seed, STREAM_STRUCTURE);
    let mut rng_semantic = stream(config.seed, STREAM_SEMANTIC);

    let mut reports = Vec::with_capacity(config.epochs);
    let mut seconds = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut index = 0u64;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, config.epochs, config.lr, config.min_lr)?;
        let (mut s1, mut s2, mut st, mut used, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for b in 0..batches {
            let Some(batch) = draw_batch(g, config, anchor, &held_out, &mut rng_sampler)? else {
                skipped += 1;
                observe(TrainEvent::Skipped { epoch, batch: b });
                continue;
            };
            if batch.triplets.is_empty() {
                skipped += 1;
                observe(TrainEvent::Skipped { epoch, batch: b });
                continue;
            }
            let mut tape = Tape::new();
            let losses = batch_losses(
                &mut tape,
                &params,
                config,
                g,
                &batch,
                (&sq, &mq),
                index,
                (&mut rng_structure, &mut rng_semantic),
            )?;
            let total = tape.value(losses.total).item();
            let diverged = |params: &ParamStore| -> Result<PheError> {
                Ok(PheError::Diverged {
                    epoch,
                    batch: b,
                    last_finite: Box::new(checkpoint(params, config, None, epoch)?),
                })
            };
            if !total.is_finite() {
                return Err(diverged(&params)?);
            }
            let grads = match tape.backward(losses.total) {
                Ok(g) => g.into_param_grads(),
                Err(PheError::NonFinite(_)) => return Err(diverged(&params)?),
                Err(e) => return Err(e),
            };
            let before = params.clone();
            opt.step(&mut params, &grads, lr)?;
            if params.iter().any(|(_, t)| !t.is_finite()) {
                return Err(diverged(&before)?);
            }
            let l1 = tape.value(losses.l1).item();
            let l2 = losses.l2.map_or(0.0, |v| tape.value(v).item());
            observe(TrainEvent::Batch(&BatchReport {
                epoch,
                batch: b,
                sampler: &batch.sub.stats,
                triplets: batch.triplets.len(),
                l1,
                l2,
            }));
            sq.push_batch(index, losses.structure_push);
            mq.push_batch(index, losses.semantic_push);
            index += 1;
            s1 += l1;
            s2 += l2;
            st += total;
            used += 1;
        }
        let validation = validation_loss(&params, config, g, &val_batches)?;
        let k = used.max(1) as f64;
        let report = EpochReport {
            epoch,
            l1: s1 / k,
            l2: s2 / k,
            loss: st / k,
            lr,
            validation,
            structure_queue: sq.fill(),
            semantic_queue: mq.fill(),
            batches: used,
            skipped_batches: skipped,
        };
        observe(TrainEvent::Epoch(&report));
        let improved = match &best {
            None => true,
            Some(c) => validation < c.best_validation.unwrap_or(f64::INFINITY),
        };
        if improved || (validation.is_nan() && epoch + 1 == config.epochs) {
            best = Some(checkpoint(&params, config, validation.is_finite().then_some(validation), epoch)?);
        }
        reports.push(report);
        seconds.push(started.elapsed().as_secs_f64());
    }
    let best = match best {
        Some(b) => b,
        None => checkpoint(&params, config, None, 0)?,
    };
    Ok(PretrainOutcome {
        best,
        last: params,
        reports,
        epoch_seconds: seconds,
    })
}

/// Epoch reports as JSON lines.
pub fn reports_jsonl(reports: &[EpochReport]) -> Result<String> {
    let mut s = String::new();
    for r in reports {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::synth::{synth_academic, EdgeProbs, SynthConfig};

    fn small_graph(seed: u64) -> HeteroGraph {
        let cfg = SynthConfig {
            papers: 60,
            authors: 20,
            venues: 4,
            fields: 6,
            communities: 2,
            feature_dim: 6,
            cites: EdgeProbs::NONE,
            has_field: EdgeProbs { intra: 0.3, inter: 0.02 },
            written_by: EdgeProbs { intra: 0.1, inter: 0.01 },
            ..Default::default()
        };
        synth_academic(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().graph
    }

    fn small_config() -> PretrainConfig {
        PretrainConfig {
            encoder: EncoderConfig { layers: 1, heads: 2, hidden: 8 },
            structure: StructureConfig {
                type_attention_dim: 4,
                batch_negatives: 4,
                ..Default::default()
            },
            semantic: SemanticConfig {
                q: 2,
                batch_negatives: 4,
                ..Default::default()
            },
            sampler: SamplerConfig {
                width: 6,
                depth: 2,
                seeds_per_batch: 4,
                triplets_per_batch: 24,
                anchor_type: "paper".into(),
            },
            epochs: 2,
            batches_per_epoch: 2,
            validation_batches: 1,
            lr: 5e-3,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn joint_loss_arithmetic() {
        let mut t = Tape::no_grad();
        let a = t.constant(Tensor::scalar(1.0));
        let b = t.constant(Tensor::scalar(2.0));
        let l = joint_loss(&mut t, a, b, 0.4).unwrap();
        assert!((t.value(l).item() - 1.8).abs() < 1e-15);
        let l = joint_loss(&mut t, a, b, 0.0).unwrap();
        assert_eq!(t.value(l).item(), 1.0);
        assert!(joint_loss(&mut t, a, b, -0.1).is_err());
    }

    #[test]
    fn joint_gradient_splits_additively() {
        let g = small_graph(1);
        let config = small_config();
        let params = init_model(&g, &config, &mut stream(1, 0)).unwrap();
        let anchor = anchor_type(&g, &config).unwrap();
        let batch = draw_batch(&g, &config, anchor, &HashSet::new(), &mut stream(1, 1)).unwrap().unwrap();
        let empty = NegativeQueue::new(0, 1);
        let grads_of = |which: u8| {
            let mut tape = Tape::new();
            let l = batch_losses(
                &mut tape, &params, &config, &g, &batch, (&empty, &empty), 0,
                (&mut stream(1, 2), &mut stream(1, 3)),
            )
            .unwrap();
            let v = match which {
                0 => l.total,
                1 => l.l1,
                _ => l.l2.unwrap(),
            };
            tape.backward(v).unwrap().into_param_grads()
        };
        let (gt, g1, g2) = (grads_of(0), grads_of(1), grads_of(2));
        for (name, t) in &gt {
            let a = g1.get(name).map_or(vec![0.0; t.len()], |x| x.data().to_vec());
            let b = g2.get(name).map_or(vec![0.0; t.len()], |x| x.data().to_vec());
            for i in 0..t.len() {
                let want = a[i] + config.lambda * b[i];
                assert!((t.data()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()), "{name}[{i}]");
            }
        }

        // finite differences of the total would also move the enhanced
        // table, which is a constant to the tape, so check L1 directly
        let r = grad_check(
            |tape, p| {
                let l = batch_losses(
                    tape, p, &config, &g, &batch, (&empty, &empty), 0,
                    (&mut stream(1, 2), &mut stream(1, 3)),
                )?;
                Ok(l.l1)
            },
            &params,
            1e-4,
        );
        let r = r.unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn deterministic_runs() {
        let g = small_graph(2);
        let c = small_config();
        let a = pretrain(&g, &c).unwrap();
        let b = pretrain(&g, &c).unwrap();
        assert_eq!(reports_jsonl(&a.reports).unwrap(), reports_jsonl(&b.reports).unwrap());
        assert_eq!(checkpoint_bytes(&a.best).unwrap(), checkpoint_bytes(&b.best).unwrap());
        assert!(a.reports.iter().all(|r| r.structure_queue.len <= 256));
    }

    #[test]
    fn zero_lambda_matches_structure_only() {
        let g = small_graph(3);
        let c = PretrainConfig {
            lambda: 0.0,
            ..small_config()
        };
        let s = PretrainConfig {
            semantic_task: false,
            ..c.clone()
        };
        let a = pretrain(&g, &c).unwrap();
        let b = pretrain(&g, &s).unwrap();
        assert!(a.last.bit_eq(&b.last));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let g = small_graph(4);
        let c = small_config();
        let params = init_model(&g, &c, &mut stream(4, 0)).unwrap();
        // a value whose shortest decimal form needs exact parsing to come back
        let best = 15.757560313117313;
        let ck = checkpoint(&params, &c, Some(best), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.phe");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.params.bit_eq(&ck.params));
        assert_eq!(back.best_validation.map(f64::to_bits), Some(best.to_bits()));
        assert_eq!(back.pretrain_config().unwrap(), c);

        let bytes = checkpoint_bytes(&ck).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(checkpoint_from_bytes(cut), Err(PheError::CorruptCheckpoint { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bad),
            Err(PheError::CorruptCheckpoint { offset: 0, .. })
        ));

        let mut other = params.clone();
        other.insert("enc.l9.k.0", Tensor::zeros(1, 1));
        let err = ck.check_names(other.names()).unwrap_err();
        match err {
            PheError::CheckpointMismatch { missing } => assert_eq!(missing, vec!["enc.l9.k.0".to_string()]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn f32_payloads_load() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"PHE1");
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.push(b'w');
        buf.push(0);
        buf.push(2);
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.extend_from_slice(&2u64.to_le_bytes());
        buf.extend_from_slice(&1.5f32.to_le_bytes());
        buf.extend_from_slice(&(-2.0f32).to_le_bytes());
        let meta = br#"{"config":{},"best_validation":null,"epoch":0}"#;
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta);
        let c = checkpoint_from_bytes(&buf).unwrap();
        assert_eq!(c.params.get("w").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn invalid_config_lists_every_key() {
        let mut c = PretrainConfig::default();
        c.structure.tau = -1.0;
        c.lambda = -0.5;
        let p = c.problems();
        assert!(p.iter().any(|m| m.starts_with("tau")));
        assert!(p.iter().any(|m| m.starts_with("lambda")));
    }
}
