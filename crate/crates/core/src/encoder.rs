//! Heterogeneous graph transformer: per-type Key/Query/Message maps,
//! per-relation attention and message matrices, multi-head neighbor
//! attention over `layers` stacked layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{PheError, Result};
use crate::graph::{NodeType, RelationId, SchemaReport};
use crate::sampler::SampledSubgraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 3,
            heads: 8,
            hidden: 400,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(PheError::Config(format!(
                "encoder layers, heads and hidden must be positive (got {}, {}, {})",
                self.layers, self.heads, self.hidden
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(PheError::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.hidden / self.heads
    }
}

pub fn input_name(t: NodeType) -> String {
    format!("enc.in.{}", t.0)
}

/// `kind` is one of `k`, `q`, `m`.
pub fn map_name(layer: usize, kind: &str, t: NodeType) -> String {
    format!("enc.l{layer}.{kind}.{}", t.0)
}

pub fn att_name(layer: usize, r: RelationId) -> String {
    format!("enc.l{layer}.att.{}", r.0)
}

pub fn msg_name(layer: usize, r: RelationId) -> String {
    format!("enc.l{layer}.msg.{}", r.0)
}

/// Fan-balanced initialization. Each per-type K/Q/M map is stored as one
/// `d × d` matrix whose column block `j` is head `j`'s `d → d/h` map.
/// A per-type input projection is added when the feature width differs
/// from `hidden`.
pub fn init_params<R: Rng + ?Sized>(
    schema: &SchemaReport,
    config: &EncoderConfig,
    rng: &mut R,
) -> Result<ParamStore> {
    config.validate()?;
    let d = config.hidden;
    let dh = config.head_width();
    let mut p = ParamStore::new();
    let types: Vec<NodeType> = schema.node_types.iter().map(|t| t.id).collect();
    if schema.feature_dim != d {
        for &t in &types {
            let w = Tensor::fan_balanced(schema.feature_dim, d, schema.feature_dim, d, rng);
            p.insert(&input_name(t), w);
        }
    }
    for l in 0..config.layers {
        for &t in &types {
            for kind in ["k", "q", "m"] {
                p.insert(&map_name(l, kind, t), Tensor::fan_balanced(d, d, d, dh, rng));
            }
        }
        for r in &schema.relations {
            p.insert(&att_name(l, r.id), Tensor::fan_balanced(dh, dh, dh, dh, rng));
            p.insert(&msg_name(l, r.id), Tensor::fan_balanced(dh, dh, dh, dh, rng));
        }
    }
    Ok(p)
}

/// Tape handles produced by [`encode`]. Edges are listed relation by
/// relation in the order the attention rows use.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `layers[0]` is the (projected) input, `layers[K]` the output.
    pub layers: Vec<Var>,
    /// Per layer: pre-softmax logits, one row per edge, one column per head.
    pub logits: Vec<Var>,
    /// Per layer: softmax-normalized attention, same layout as `logits`.
    pub attention: Vec<Var>,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_rel: Vec<RelationId>,
}

impl Encoded {
    pub fn output(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }
}

/// `d × h` indicator with `B[c][j] = 1` iff column `c` belongs to head `j`.
fn head_blocks(d: usize, heads: usize) -> Tensor {
    let dh = d / heads;
    let mut b = Tensor::zeros(d, heads);
    for c in 0..d {
        b.set(c, c / dh, 1.0);
    }
    b
}

/// Applies a per-type linear map to every row of `x` according to its type.
fn typed_linear(
    tape: &mut Tape,
    x: Var,
    rows_by_type: &[Vec<usize>],
    weights: &[Option<Var>],
    n: usize,
) -> Var {
    let mut parts = Vec::new();
    let mut index = Vec::new();
    for (rows, w) in rows_by_type.iter().zip(weights) {
        if rows.is_empty() {
            continue;
        }
        let w = w.expect("weight for a present type");
        let g = tape.gather_rows(x, rows.clone());
        parts.push(tape.matmul(g, w));
        index.extend_from_slice(rows);
    }
    let all = tape.concat_rows(parts);
    tape.scatter_add_rows(all, index, n)
}

fn param(tape: &mut Tape, params: &ParamStore, name: &str) -> Result<Var> {
    Ok(tape.param(name, params.require(name)?))
}

/// Runs the encoder over `sub`, recording every step on `tape`.
pub fn encode(
    tape: &mut Tape,
    params: &ParamStore,
    config: &EncoderConfig,
    sub: &SampledSubgraph,
) -> Result<Encoded> {
    config.validate()?;
    if sub.is_empty() {
        return Err(PheError::Empty("cannot encode an empty subgraph".into()));
    }
    let n = sub.len();
    let d = config.hidden;
    let h = config.heads;
    let dh = config.head_width();
    let rows_by_type: Vec<Vec<usize>> = (0..sub.type_count())
        .map(|t| sub.nodes_of_type(NodeType(t)))
        .collect();
    let present = |t: usize| !rows_by_type[t].is_empty();

    let x = tape.constant(sub.features().clone());
    let h0 = if sub.features().cols() == d {
        x
    } else {
        let mut ws = Vec::with_capacity(rows_by_type.len());
        for t in 0..rows_by_type.len() {
            ws.push(if present(t) {
                let name = input_name(NodeType(t));
                let w = params.require(&name)?;
                if w.rows() != sub.features().cols() {
                    return Err(PheError::Shape(format!(
                        "{name} expects {} input features, subgraph has {}",
                        w.rows(),
                        sub.features().cols()
                    )));
                }
                Some(tape.param(&name, w))
            } else {
                None
            });
        }
        typed_linear(tape, x, &rows_by_type, &ws, n)
    };

    let (mut edge_src, mut edge_dst, mut edge_rel) = (Vec::new(), Vec::new(), Vec::new());
    let mut rel_ranges = Vec::new();
    for r in 0..sub.relation_count() {
        let r = RelationId(r);
        let edges = sub.edges(r);
        if edges.is_empty() {
            continue;
        }
        let start = edge_src.len();
        for &(s, t) in edges {
            edge_src.push(s);
            edge_dst.push(t);
            edge_rel.push(r);
        }
        rel_ranges.push((r, start..edge_src.len()));
    }
    let mut has_in = vec![false; n];
    for &t in &edge_dst {
        has_in[t] = true;
    }
    let keep_mask = {
        let mut m = Tensor::zeros(n, d);
        for (v, &inc) in has_in.iter().enumerate() {
            if !inc {
                m.row_mut(v).fill(1.0);
            }
        }
        m
    };
    let blocks = head_blocks(d, h);
    let blocks_t = blocks.transpose();

    let mut out = Encoded {
        layers: vec![h0],
        logits: Vec::new(),
        attention: Vec::new(),
        edge_src,
        edge_dst,
        edge_rel,
    };
    let mut cur = h0;
    for l in 0..config.layers {
        let mut maps = Vec::new();
        for kind in ["k", "q", "m"] {
            let mut ws = Vec::with_capacity(rows_by_type.len());
            for t in 0..rows_by_type.len() {
                ws.push(if present(t) {
                    Some(param(tape, params, &map_name(l, kind, NodeType(t)))?)
                } else {
                    None
                });
            }
            maps.push(typed_linear(tape, cur, &rows_by_type, &ws, n));
        }
        let (k, q, m) = (maps[0], maps[1], maps[2]);
        if out.edge_src.is_empty() {
            let empty = tape.constant(Tensor::zeros(0, h));
            out.logits.push(empty);
            out.attention.push(empty);
            out.layers.push(cur);
            continue;
        }
        let b = tape.constant(blocks.clone());
        let bt = tape.constant(blocks_t.clone());
        let mut logit_parts = Vec::new();
        let mut msg_parts = Vec::new();
        for (r, range) in &rel_ranges {
            let e = range.len();
            let src = out.edge_src[range.clone()].to_vec();
            let dst = out.edge_dst[range.clone()].to_vec();
            let w_att = param(tape, params, &att_name(l, *r))?;
            let w_msg = param(tape, params, &msg_name(l, *r))?;

            let ks = tape.gather_rows(k, src.clone());
            let ks = tape.reshape(ks, e * h, dh);
            let kw = tape.matmul(ks, w_att);
            let kw = tape.reshape(kw, e, d);
            let qd = tape.gather_rows(q, dst);
            let prod = tape.mul(kw, qd);
            let lg = tape.matmul(prod, b);
            logit_parts.push(tape.div_scalar(lg, (d as f64).sqrt()));

            let ms = tape.gather_rows(m, src);
            let ms = tape.reshape(ms, e * h, dh);
            let mw = tape.matmul(ms, w_msg);
            msg_parts.push(tape.reshape(mw, e, d));
        }
        let logits = tape.concat_rows(logit_parts);
        let att = tape.segment_softmax(logits, out.edge_dst.clone());
        let msgs = tape.concat_rows(msg_parts);
        let spread = tape.matmul(att, bt);
        let weighted = tape.mul(msgs, spread);
        let agg = tape.scatter_add_rows(weighted, out.edge_dst.clone(), n);
        let mask = tape.constant(keep_mask.clone());
        let kept = tape.mul(cur, mask);
        cur = tape.add(agg, kept);
        out.logits.push(logits);
        out.attention.push(att);
        out.layers.push(cur);
    }
    Ok(out)
}

/// Concrete per-layer embeddings, rows indexed by subgraph-local id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub layers: Vec<Tensor>,
}

impl EmbeddingTable {
    pub fn output(&self) -> &Tensor {
        self.layers.last().expect("at least one layer")
    }

    pub fn input(&self) -> &Tensor {
        &self.layers[0]
    }
}

/// Forward-only encoding.
pub fn encode_table(
    params: &ParamStore,
    config: &EncoderConfig,
    sub: &SampledSubgraph,
) -> Result<EmbeddingTable> {
    let mut tape = Tape::no_grad();
    let enc = encode(&mut tape, params, config, sub)?;
    Ok(EmbeddingTable {
        layers: enc.layers.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// One in-neighbor's score at a given layer and head.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadScore {
    pub neighbor: usize,
    pub relation: RelationId,
    pub logit: f64,
    pub weight: f64,
}

/// Raw attention logits (and normalized weights) of every in-edge of `v`.
pub fn head_scores(
    sub: &SampledSubgraph,
    params: &ParamStore,
    config: &EncoderConfig,
    v: usize,
    layer: usize,
    head: usize,
) -> Result<Vec<HeadScore>> {
    if v >= sub.len() {
        return Err(PheError::InvalidId { kind: "node", id: v });
    }
    if layer >= config.layers {
        return Err(PheError::InvalidId { kind: "layer", id: layer });
    }
    if head >= config.heads {
        return Err(PheError::InvalidId { kind: "head", id: head });
    }
    let mut tape = Tape::no_grad();
    let enc = encode(&mut tape, params, config, sub)?;
    let logits = tape.value(enc.logits[layer]);
    let att = tape.value(enc.attention[layer]);
    Ok((0..enc.edge_dst.len())
        .filter(|&e| enc.edge_dst[e] == v)
        .map(|e| HeadScore {
            neighbor: enc.edge_src[e],
            relation: enc.edge_rel[e],
            logit: logits.get(e, head),
            weight: att.get(e, head),
        })
        .collect())
}
