//! Immutable heterogeneous multigraph with per-relation CSR adjacency.
//!
//! Node ids form one global namespace across types. Every forward relation
//! read from input gets a materialized reverse relation, so relation `2i`
//! is the i-th forward relation and `2i + 1` its reverse.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{PheError, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeType(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub usize);

impl NodeType {
    pub fn index(self) -> usize {
        self.0
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Compressed sparse rows: `targets[offsets[v]..offsets[v + 1]]` are the
/// sorted out-neighbors of `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    offsets: Vec<usize>,
    targets: Vec<NodeId>,
}

impl Csr {
    /// Builds from `(src, dst, payload)` triples; rows sorted by target,
    /// duplicate `(src, dst)` pairs keep their first payload.
    pub(crate) fn build<T: Copy>(node_count: usize, mut edges: Vec<(NodeId, NodeId, T)>) -> (Csr, Vec<T>) {
        edges.sort_by_key(|&(s, d, _)| (s, d));
        edges.dedup_by_key(|&mut (s, d, _)| (s, d));
        let mut offsets = vec![0; node_count + 1];
        for &(s, _, _) in &edges {
            offsets[s + 1] += 1;
        }
        for i in 0..node_count {
            offsets[i + 1] += offsets[i];
        }
        let targets = edges.iter().map(|&(_, d, _)| d).collect();
        let payload = edges.iter().map(|&(_, _, p)| p).collect();
        (Csr { offsets, targets }, payload)
    }

    pub fn row(&self, v: NodeId) -> &[NodeId] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn row_range(&self, v: NodeId) -> std::ops::Range<usize> {
        self.offsets[v]..self.offsets[v + 1]
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    pub fn contains(&self, v: NodeId, u: NodeId) -> bool {
        self.row(v).binary_search(&u).is_ok()
    }

    /// All edges in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        (0..self.offsets.len() - 1).flat_map(move |v| self.row(v).iter().map(move |&u| (v, u)))
    }
}

/// One relation (forward or materialized reverse).
#[derive(Clone, Debug)]
pub struct Relation {
    pub name: String,
    pub src_type: NodeType,
    pub dst_type: NodeType,
    pub reverse: RelationId,
    pub is_reverse: bool,
    adjacency: Csr,
    /// Aligned with `adjacency`'s edge order.
    edge_years: Vec<Option<i32>>,
}

impl Relation {
    pub fn adjacency(&self) -> &Csr {
        &self.adjacency
    }

    pub fn edge_years(&self) -> &[Option<i32>] {
        &self.edge_years
    }
}

/// Per-node data shared between a graph and its edge-filtered views.
#[derive(Debug)]
pub struct NodeTable {
    names: Vec<String>,
    types: Vec<NodeType>,
    years: Vec<Option<i32>>,
    features: Tensor,
    type_names: Vec<String>,
    members: Vec<Vec<NodeId>>,
    index: HashMap<String, NodeId>,
}

#[derive(Clone, Debug)]
pub struct HeteroGraph {
    nodes: Arc<NodeTable>,
    relations: Vec<Relation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTypeSummary {
    pub id: NodeType,
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSummary {
    pub id: RelationId,
    pub name: String,
    pub src_type: NodeType,
    pub dst_type: NodeType,
    pub reverse: RelationId,
    pub is_reverse: bool,
    pub edge_count: usize,
}

/// Counts and endpoint types, as reported by `ingest`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaReport {
    pub node_types: Vec<NodeTypeSummary>,
    pub relations: Vec<RelationSummary>,
    pub feature_dim: usize,
    pub node_count: usize,
    pub edge_count: usize,
    pub year_range: Option<(i32, i32)>,
}

impl SchemaReport {
    pub fn type_id(&self, name: &str) -> Option<NodeType> {
        self.node_types.iter().find(|t| t.name == name).map(|t| t.id)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.iter().find(|r| r.name == name).map(|r| r.id)
    }
}

impl HeteroGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.types.len()
    }

    pub fn node_type_count(&self) -> usize {
        self.nodes.type_names.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn forward_relation_count(&self) -> usize {
        self.relations.len() / 2
    }

    pub fn edge_count(&self) -> usize {
        self.relations.iter().map(|r| r.adjacency.edge_count()).sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.nodes.features
    }

    pub fn feature(&self, v: NodeId) -> &[f64] {
        self.nodes.features.row(v)
    }

    pub fn node_type(&self, v: NodeId) -> NodeType {
        self.nodes.types[v]
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.nodes.types
    }

    pub fn year(&self, v: NodeId) -> Option<i32> {
        self.nodes.years[v]
    }

    pub fn node_name(&self, v: NodeId) -> &str {
        &self.nodes.names[v]
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes.index.get(name).copied()
    }

    pub fn type_name(&self, t: NodeType) -> &str {
        &self.nodes.type_names[t.0]
    }

    pub fn type_by_name(&self, name: &str) -> Option<NodeType> {
        self.nodes
            .type_names
            .iter()
            .position(|n| n == name)
            .map(NodeType)
    }

    /// Nodes of type `t`, ascending.
    pub fn nodes_of_type(&self, t: NodeType) -> &[NodeId] {
        &self.nodes.members[t.0]
    }

    pub fn relation(&self, r: RelationId) -> &Relation {
        &self.relations[r.0]
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn relation_by_name(&self, name: &str) -> Option<RelationId> {
        self.relations
            .iter()
            .position(|r| r.name == name)
            .map(RelationId)
    }

    /// `(src type, relation, dst type)` for every relation.
    pub fn schema(&self) -> Vec<(NodeType, RelationId, NodeType)> {
        self.relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.src_type, RelationId(i), r.dst_type))
            .collect()
    }

    /// Whether two graphs share the same node table (views of one graph).
    pub fn shares_nodes_with(&self, other: &HeteroGraph) -> bool {
        Arc::ptr_eq(&self.nodes, &other.nodes)
    }

    fn check_node(&self, v: NodeId) -> Result<()> {
        if v < self.node_count() {
            Ok(())
        } else {
            Err(PheError::InvalidId { kind: "node", id: v })
        }
    }

    fn check_relation(&self, r: RelationId) -> Result<()> {
        if r.0 < self.relations.len() {
            Ok(())
        } else {
            Err(PheError::InvalidId {
                kind: "relation",
                id: r.0,
            })
        }
    }

    /// Sorted neighbors of `v` under `r`, or the deduplicated union over
    /// all relations when `r` is `None`.
    pub fn neighbors(&self, v: NodeId, r: Option<RelationId>) -> Result<Vec<NodeId>> {
        self.check_node(v)?;
        match r {
            Some(r) => {
                self.check_relation(r)?;
                Ok(self.relations[r.0].adjacency.row(v).to_vec())
            }
            None => {
                let mut out: Vec<NodeId> = self
                    .relations
                    .iter()
                    .flat_map(|rel| rel.adjacency.row(v).iter().copied())
                    .collect();
                out.sort_unstable();
                out.dedup();
                Ok(out)
            }
        }
    }

    /// Out-neighbors of `v` under `r` without bounds checks.
    pub fn neighbors_slice(&self, v: NodeId, r: RelationId) -> &[NodeId] {
        self.relations[r.0].adjacency.row(v)
    }

    /// `A^r[v][u]`.
    pub fn relation_adjacent(&self, v: NodeId, u: NodeId, r: RelationId) -> Result<bool> {
        self.check_node(v)?;
        self.check_node(u)?;
        self.check_relation(r)?;
        Ok(self.relations[r.0].adjacency.contains(v, u))
    }

    pub fn degree(&self, v: NodeId, r: RelationId) -> usize {
        self.relations[r.0].adjacency.row(v).len()
    }

    /// `1 / deg_r(v)`, or 0 for an isolated node.
    pub fn normalized_degree(&self, v: NodeId, r: RelationId) -> f64 {
        match self.degree(v, r) {
            0 => 0.0,
            d => 1.0 / d as f64,
        }
    }

    pub fn schema_report(&self) -> SchemaReport {
        let node_types = self
            .nodes
            .type_names
            .iter()
            .enumerate()
            .map(|(i, name)| NodeTypeSummary {
                id: NodeType(i),
                name: name.clone(),
                count: self.nodes.members[i].len(),
            })
            .collect();
        let relations = self
            .relations
            .iter()
            .enumerate()
            .map(|(i, r)| RelationSummary {
                id: RelationId(i),
                name: r.name.clone(),
                src_type: r.src_type,
                dst_type: r.dst_type,
                reverse: r.reverse,
                is_reverse: r.is_reverse,
                edge_count: r.adjacency.edge_count(),
            })
            .collect();
        let years = self.nodes.years.iter().flatten();
        let year_range = years
            .clone()
            .min()
            .zip(years.max())
            .map(|(a, b)| (*a, *b));
        SchemaReport {
            node_types,
            relations,
            feature_dim: self.feature_dim(),
            node_count: self.node_count(),
            edge_count: self.edge_count(),
            year_range,
        }
    }

    /// A view keeping the forward edges accepted by `keep(relation, src,
    /// dst, year)`; reverse relations mirror the result.
    pub fn filter_edges<F>(&self, keep: F) -> HeteroGraph
    where
        F: Fn(RelationId, NodeId, NodeId, Option<i32>) -> bool,
    {
        let n = self.node_count();
        let mut relations = self.relations.clone();
        for fwd in (0..self.relations.len()).step_by(2) {
            let rel = &self.relations[fwd];
            let kept: Vec<(NodeId, NodeId, Option<i32>)> = rel
                .adjacency
                .edges()
                .zip(&rel.edge_years)
                .filter(|&((s, d), &y)| keep(RelationId(fwd), s, d, y))
                .map(|((s, d), &y)| (s, d, y))
                .collect();
            let reversed = kept.iter().map(|&(s, d, y)| (d, s, y)).collect();
            let (adj, years) = Csr::build(n, kept);
            relations[fwd].adjacency = adj;
            relations[fwd].edge_years = years;
            let (adj, years) = Csr::build(n, reversed);
            relations[fwd + 1].adjacency = adj;
            relations[fwd + 1].edge_years = years;
        }
        HeteroGraph {
            nodes: Arc::clone(&self.nodes),
            relations,
        }
    }

    /// Writes the graph in the TSV formats read by [`load_graph`]. Only
    /// forward relations are written.
    pub fn write_tsv(&self, nodes_path: &Path, edges_path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(nodes_path)?);
        writeln!(w, "# id\ttype\tyear\tfeatures")?;
        for v in 0..self.node_count() {
            let year = self.year(v).map(|y| y.to_string()).unwrap_or_default();
            let feats: Vec<String> = self.feature(v).iter().map(|x| x.to_string()).collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                self.node_name(v),
                self.type_name(self.node_type(v)),
                year,
                feats.join(",")
            )?;
        }
        w.flush()?;
        let mut w = BufWriter::new(fs::File::create(edges_path)?);
        writeln!(w, "# src\tdst\trelation\tyear")?;
        for rel in self.relations.iter().filter(|r| !r.is_reverse) {
            for ((s, d), y) in rel.adjacency.edges().zip(&rel.edge_years) {
                let year = y.map(|y| y.to_string()).unwrap_or_default();
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}",
                    self.node_name(s),
                    self.node_name(d),
                    rel.name,
                    year
                )?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Incremental construction; validation happens as rows arrive.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    names: Vec<String>,
    types: Vec<NodeType>,
    years: Vec<Option<i32>>,
    features: Vec<Option<Vec<f64>>>,
    feature_dim: Option<usize>,
    type_names: Vec<String>,
    index: HashMap<String, NodeId>,
    relation_names: Vec<String>,
    relation_types: Vec<(NodeType, NodeType)>,
    edges: Vec<Vec<(NodeId, NodeId, Option<i32>)>>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.index.get(name).copied()
    }

    fn intern_type(&mut self, name: &str) -> NodeType {
        match self.type_names.iter().position(|n| n == name) {
            Some(i) => NodeType(i),
            None => {
                self.type_names.push(name.to_string());
                NodeType(self.type_names.len() - 1)
            }
        }
    }

    /// Declares a node type up front so type ids follow declaration order.
    pub fn declare_type(&mut self, name: &str) -> NodeType {
        self.intern_type(name)
    }

    /// Adds a node; features may be absent (zero-filled at build time).
    pub fn add_node(
        &mut self,
        name: &str,
        type_name: &str,
        year: Option<i32>,
        features: Option<Vec<f64>>,
    ) -> Result<NodeId> {
        if self.index.contains_key(name) {
            return Err(PheError::Schema(format!("duplicate node id `{name}`")));
        }
        if let Some(f) = &features {
            match self.feature_dim {
                None => self.feature_dim = Some(f.len()),
                Some(d) if d != f.len() => {
                    return Err(PheError::Schema(format!(
                        "node `{name}` has {} features, expected {d}",
                        f.len()
                    )))
                }
                Some(_) => {}
            }
        }
        let t = self.intern_type(type_name);
        let id = self.names.len();
        self.names.push(name.to_string());
        self.types.push(t);
        self.years.push(year);
        self.features.push(features);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds a forward edge. The first edge of a relation fixes its
    /// endpoint types; later edges must match.
    pub fn add_edge(
        &mut self,
        src: NodeId,
        dst: NodeId,
        relation: &str,
        year: Option<i32>,
    ) -> Result<()> {
        let n = self.names.len();
        if src >= n || dst >= n {
            return Err(PheError::InvalidId {
                kind: "node",
                id: src.max(dst),
            });
        }
        let (st, dt) = (self.types[src], self.types[dst]);
        let r = match self.relation_names.iter().position(|x| x == relation) {
            Some(r) => {
                let (es, ed) = self.relation_types[r];
                if (es, ed) != (st, dt) {
                    return Err(PheError::Schema(format!(
                        "relation `{relation}` connects {} -> {}, but edge {} -> {} has types {} -> {}",
                        self.type_names[es.0],
                        self.type_names[ed.0],
                        self.names[src],
                        self.names[dst],
                        self.type_names[st.0],
                        self.type_names[dt.0]
                    )));
                }
                r
            }
            None => {
                self.relation_names.push(relation.to_string());
                self.relation_types.push((st, dt));
                self.edges.push(Vec::new());
                self.relation_names.len() - 1
            }
        };
        let year = year.or(self.years[src]).or(self.years[dst]);
        self.edges[r].push((src, dst, year));
        Ok(())
    }

    /// Declares a relation with no edges yet.
    pub fn declare_relation(&mut self, name: &str, src_type: &str, dst_type: &str) {
        if self.relation_names.iter().any(|x| x == name) {
            return;
        }
        let st = self.intern_type(src_type);
        let dt = self.intern_type(dst_type);
        self.relation_names.push(name.to_string());
        self.relation_types.push((st, dt));
        self.edges.push(Vec::new());
    }

    pub fn build(self) -> Result<HeteroGraph> {
        let n = self.names.len();
        let type_count = self.type_names.len();
        let relation_count = 2 * self.relation_names.len();
        if type_count + relation_count <= 2 {
            return Err(PheError::Schema(format!(
                "not heterogeneous: {type_count} node types and {relation_count} relations"
            )));
        }
        let d = self.feature_dim.unwrap_or(1);
        let missing = self.features.iter().filter(|f| f.is_none()).count();
        if missing > 0 {
            log::warn!("{missing} nodes without features; using zero vectors of dimension {d}");
        }
        let mut data = Vec::with_capacity(n * d);
        for f in &self.features {
            match f {
                Some(f) => data.extend_from_slice(f),
                None => data.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        let mut members = vec![Vec::new(); type_count];
        for (v, t) in self.types.iter().enumerate() {
            members[t.0].push(v);
        }
        let nodes = NodeTable {
            names: self.names,
            types: self.types,
            years: self.years,
            features: Tensor::matrix(n, d, data),
            type_names: self.type_names,
            members,
            index: self.index,
        };
        let mut relations = Vec::with_capacity(relation_count);
        for (i, edges) in self.edges.into_iter().enumerate() {
            let (st, dt) = self.relation_types[i];
            let reversed = edges.iter().map(|&(s, d, y)| (d, s, y)).collect();
            let (adj, years) = Csr::build(n, edges);
            relations.push(Relation {
                name: self.relation_names[i].clone(),
                src_type: st,
                dst_type: dt,
                reverse: RelationId(2 * i + 1),
                is_reverse: false,
                adjacency: adj,
                edge_years: years,
            });
            let (adj, years) = Csr::build(n, reversed);
            relations.push(Relation {
                name: format!("rev_{}", self.relation_names[i]),
                src_type: dt,
                dst_type: st,
                reverse: RelationId(2 * i),
                is_reverse: true,
                adjacency: adj,
                edge_years: years,
            });
        }
        Ok(HeteroGraph {
            nodes: Arc::new(nodes),
            relations,
        })
    }
}

#[derive(Deserialize)]
struct JsonNode {
    id: serde_json::Value,
    #[serde(rename = "type")]
    type_name: String,
    #[serde(default)]
    year: Option<i32>,
    #[serde(default)]
    features: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct JsonEdge {
    src: serde_json::Value,
    dst: serde_json::Value,
    relation: String,
    #[serde(default)]
    year: Option<i32>,
}

fn json_id(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

fn is_jsonl(path: &Path, text: &str) -> bool {
    path.extension().is_some_and(|e| e == "jsonl" || e == "json")
        || content_lines(text)
            .next()
            .is_some_and(|(_, l)| l.trim_start().starts_with('{'))
}

fn parse_year(field: &str, path: &Path, line: usize) -> Result<Option<i32>> {
    let f = field.trim();
    if f.is_empty() {
        return Ok(None);
    }
    f.parse().map(Some).map_err(|_| PheError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("invalid year `{f}`"),
    })
}

/// Reads a nodes file and an edges file (TSV or JSONL) into a graph.
/// Node ids are assigned in file order.
pub fn load_graph(nodes_path: &Path, edges_path: &Path) -> Result<HeteroGraph> {
    let mut b = GraphBuilder::new();
    let text = fs::read_to_string(nodes_path)?;
    let jsonl = is_jsonl(nodes_path, &text);
    for (line, row) in content_lines(&text) {
        let parse_err = |message: String| PheError::Parse {
            path: nodes_path.to_path_buf(),
            line,
            message,
        };
        let (name, type_name, year, features) = if jsonl {
            let n: JsonNode = serde_json::from_str(row).map_err(|e| parse_err(e.to_string()))?;
            (json_id(&n.id), n.type_name, n.year, n.features)
        } else {
            let cols: Vec<&str> = row.split('\t').collect();
            if cols.len() < 2 || cols.len() > 4 {
                return Err(parse_err(format!(
                    "expected 2-4 tab-separated columns, found {}",
                    cols.len()
                )));
            }
            let year = match cols.get(2) {
                Some(y) => parse_year(y, nodes_path, line)?,
                None => None,
            };
            let features = match cols.get(3).map(|s| s.trim()) {
                None | Some("") => None,
                Some(f) => Some(
                    f.split(',')
                        .map(|x| x.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| parse_err(format!("bad feature value: {e}")))?,
                ),
            };
            (cols[0].trim().to_string(), cols[1].trim().to_string(), year, features)
        };
        if name.is_empty() || type_name.is_empty() {
            return Err(parse_err("empty node id or type".into()));
        }
        if b.node_id(&name).is_some() {
            return Err(PheError::DuplicateNode {
                path: nodes_path.to_path_buf(),
                line,
                node: name,
            });
        }
        if let (Some(f), Some(d)) = (&features, b.feature_dim) {
            if f.len() != d {
                return Err(PheError::FeatureDimension {
                    path: nodes_path.to_path_buf(),
                    line,
                    expected: d,
                    found: f.len(),
                });
            }
        }
        b.add_node(&name, &type_name, year, features)?;
    }

    let text = fs::read_to_string(edges_path)?;
    let jsonl = is_jsonl(edges_path, &text);
    for (line, row) in content_lines(&text) {
        let parse_err = |message: String| PheError::Parse {
            path: edges_path.to_path_buf(),
            line,
            message,
        };
        let (src, dst, relation, year) = if jsonl {
            let e: JsonEdge = serde_json::from_str(row).map_err(|e| parse_err(e.to_string()))?;
            (json_id(&e.src), json_id(&e.dst), e.relation, e.year)
        } else {
            let cols: Vec<&str> = row.split('\t').collect();
            if cols.len() < 3 || cols.len() > 4 {
                return Err(parse_err(format!(
                    "expected 3-4 tab-separated columns, found {}",
                    cols.len()
                )));
            }
            let year = match cols.get(3) {
                Some(y) => parse_year(y, edges_path, line)?,
                None => None,
            };
            (
                cols[0].trim().to_string(),
                cols[1].trim().to_string(),
                cols[2].trim().to_string(),
                year,
            )
        };
        if relation.is_empty() {
            return Err(parse_err("empty relation name".into()));
        }
        let lookup = |name: &str| {
            b.node_id(name).ok_or_else(|| PheError::DanglingEndpoint {
                path: edges_path.to_path_buf(),
                line,
                node: name.to_string(),
            })
        };
        let s = lookup(&src)?;
        let d = lookup(&dst)?;
        b.add_edge(s, d, &relation, year).map_err(|e| match e {
            PheError::Schema(m) => parse_err(m),
            other => other,
        })?;
    }
    b.build()
}

/// Node counts per type name, for quick summaries.
pub fn type_histogram(g: &HeteroGraph) -> BTreeMap<String, usize> {
    (0..g.node_type_count())
        .map(|t| {
            let t = NodeType(t);
            (g.type_name(t).to_string(), g.nodes_of_type(t).len())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn tiny() -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let nodes = write(
            dir.path(),
            "nodes.tsv",
            "# comment\np1\tpaper\t2010\t1,0\np2\tpaper\t2015\t0,1\na1\tauthor\t\t0.5,0.5\nv1\tvenue\t\t1,1\n",
        );
        let edges = write(
            dir.path(),
            "edges.tsv",
            "p1\tv1\tpublished_at\np2\tv1\tpublished_at\np1\ta1\twritten_by\t2011\n",
        );
        (dir, nodes, edges)
    }

    #[test]
    fn loads_small_graph() {
        let (_d, n, e) = tiny();
        let g = load_graph(&n, &e).unwrap();
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.node_type_count(), 3);
        assert_eq!(g.forward_relation_count(), 2);
        assert_eq!(g.relation_count(), 4);
        assert_eq!(g.feature_dim(), 2);
        let pub_at = g.relation_by_name("published_at").unwrap();
        let rev = g.relation(pub_at).reverse;
        assert_eq!(g.relation(rev).name, "rev_published_at");
        assert_eq!(g.neighbors(3, Some(rev)).unwrap(), vec![0, 1]);
        // edges inherit the source paper's year unless given explicitly
        assert_eq!(g.relation(pub_at).edge_years(), &[Some(2010), Some(2015)]);
        let wb = g.relation_by_name("written_by").unwrap();
        assert_eq!(g.relation(wb).edge_years(), &[Some(2011)]);
        let report = g.schema_report();
        assert_eq!(report.node_types.iter().map(|t| t.count).sum::<usize>(), 4);
        assert_eq!(report.relations.iter().map(|r| r.edge_count).sum::<usize>(), g.edge_count());
        assert_eq!(report.year_range, Some((2010, 2015)));
    }

    #[test]
    fn dangling_endpoint_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "p1\tpaper\t\t1\nv1\tvenue\t\t1\n");
        let e = write(dir.path(), "e.tsv", "p1\tv1\tpublished_at\np1\tv9\tpublished_at\n");
        match load_graph(&n, &e).unwrap_err() {
            PheError::DanglingEndpoint { line, node, .. } => {
                assert_eq!(line, 2);
                assert_eq!(node, "v9");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mixed_feature_lengths_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "p1\tpaper\t\t1,2,3,4\np2\tpaper\t\t1,2,3,4,5\n");
        let e = write(dir.path(), "e.tsv", "");
        match load_graph(&n, &e).unwrap_err() {
            PheError::FeatureDimension {
                expected,
                found,
                line,
                ..
            } => assert_eq!((expected, found, line), (4, 5, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_node_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "p1\tpaper\t\t1\np1\tvenue\t\t1\n");
        let e = write(dir.path(), "e.tsv", "");
        assert!(matches!(
            load_graph(&n, &e).unwrap_err(),
            PheError::DuplicateNode { line: 2, .. }
        ));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "p1\tpaper\t\t1\nv1\tvenue\t\t1\n");
        let e = write(dir.path(), "e.tsv", "p1\tv1\tpublished_at\n\nbroken-row\n");
        assert!(matches!(
            load_graph(&n, &e).unwrap_err(),
            PheError::Parse { line: 3, .. }
        ));
    }

    #[test]
    fn schema_violation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "p1\tpaper\t\t1\nv1\tvenue\t\t1\na1\tauthor\t\t1\n");
        let e = write(dir.path(), "e.tsv", "p1\tv1\tpublished_at\np1\ta1\tpublished_at\n");
        assert!(matches!(
            load_graph(&n, &e).unwrap_err(),
            PheError::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn homogeneous_graph_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "p1\tpaper\t\t1\np2\tpaper\t\t1\n");
        let e = write(dir.path(), "e.tsv", "");
        assert!(matches!(load_graph(&n, &e).unwrap_err(), PheError::Schema(_)));
    }

    #[test]
    fn missing_features_become_zero() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "p1\tpaper\t\t1,2\nv1\tvenue\t\t\n");
        let e = write(dir.path(), "e.tsv", "p1\tv1\tpublished_at\n");
        let g = load_graph(&n, &e).unwrap();
        assert_eq!(g.feature(1), &[0.0, 0.0]);
    }

    #[test]
    fn jsonl_input() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(
            dir.path(),
            "n.jsonl",
            "{\"id\": \"p1\", \"type\": \"paper\", \"year\": 2001, \"features\": [1.0]}\n{\"id\": 7, \"type\": \"venue\"}\n",
        );
        let e = write(dir.path(), "e.jsonl", "{\"src\": \"p1\", \"dst\": 7, \"relation\": \"published_at\"}\n");
        let g = load_graph(&n, &e).unwrap();
        assert_eq!(g.node_by_name("7"), Some(1));
        assert!(g.relation_adjacent(0, 1, RelationId(0)).unwrap());
    }

    #[test]
    fn star_and_isolated_neighbors() {
        let mut b = GraphBuilder::new();
        let c = b.add_node("c", "paper", None, None).unwrap();
        let l: Vec<_> = (0..3)
            .map(|i| b.add_node(&format!("l{i}"), "author", None, None).unwrap())
            .collect();
        let iso = b.add_node("iso", "venue", None, None).unwrap();
        for &x in &l {
            b.add_edge(c, x, "written_by", None).unwrap();
        }
        let g = b.build().unwrap();
        assert_eq!(g.neighbors(c, None).unwrap(), l);
        assert!(g.neighbors(iso, None).unwrap().is_empty());
        assert!(g.neighbors(99, None).is_err());
        assert!(g.neighbors(c, Some(RelationId(9))).is_err());
    }

    #[test]
    fn neighbors_restricted_to_relation() {
        let mut b = GraphBuilder::new();
        let c = b.add_node("c", "paper", None, None).unwrap();
        let a1 = b.add_node("a1", "author", None, None).unwrap();
        let a2 = b.add_node("a2", "author", None, None).unwrap();
        let v = b.add_node("v", "venue", None, None).unwrap();
        b.add_edge(c, a2, "written_by", None).unwrap();
        b.add_edge(c, a1, "written_by", None).unwrap();
        b.add_edge(c, v, "published_at", None).unwrap();
        let g = b.build().unwrap();
        assert_eq!(g.neighbors(c, Some(RelationId(0))).unwrap(), vec![a1, a2]);
        assert_eq!(g.neighbors(c, None).unwrap(), vec![a1, a2, v]);
        assert!(g.relation_adjacent(c, v, RelationId(2)).unwrap());
        assert!(!g.relation_adjacent(c, v, RelationId(0)).unwrap());
        assert!(g.relation_adjacent(v, c, RelationId(3)).unwrap());
    }

    #[test]
    fn normalized_degree_values() {
        let mut b = GraphBuilder::new();
        let c = b.add_node("c", "paper", None, None).unwrap();
        let iso = b.add_node("iso", "paper", None, None).unwrap();
        let xs: Vec<_> = (0..4)
            .map(|i| b.add_node(&format!("a{i}"), "author", None, None).unwrap())
            .collect();
        for &x in &xs {
            b.add_edge(c, x, "written_by", None).unwrap();
        }
        let g = b.build().unwrap();
        assert_eq!(g.normalized_degree(c, RelationId(0)), 0.25);
        assert_eq!(g.normalized_degree(iso, RelationId(0)), 0.0);
        assert_eq!(g.normalized_degree(xs[0], RelationId(1)), 1.0);
    }
}
