//! Disentangled hypergraph convolution: user chunks per aspect, intra-type
//! propagation, inter-type fusion and layer averaging.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hypergraph::{AdjacencySet, Aspect, HyperedgeType};
use crate::sparse::{CsrMatrix, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fusion {
    Attention,
    Mean,
    Max,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "attention" => Ok(Fusion::Attention),
            "mean" => Ok(Fusion::Mean),
            "max" => Ok(Fusion::Max),
            _ => Err(Error::Config(format!("unknown fusion `{s}` (attention|mean|max)"))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Attention => "attention",
            Fusion::Mean => "mean",
            Fusion::Max => "max",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conv {
    /// Parameter-free propagation.
    EffHGConv,
    /// Propagation followed by a learned square map per (aspect, type).
    HGConvLinearized,
}

impl FromStr for Conv {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "effhgconv" => Ok(Conv::EffHGConv),
            "hgconvlinearized" | "hgconv" => Ok(Conv::HGConvLinearized),
            _ => Err(Error::Config(format!(
                "unknown conv `{s}` (eff-hgconv|hgconv-linearized)"
            ))),
        }
    }
}

impl fmt::Display for Conv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conv::EffHGConv => "eff-hgconv",
            Conv::HGConvLinearized => "hgconv-linearized",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub enabled_types: BTreeSet<HyperedgeType>,
    pub fusion: Fusion,
    pub conv: Conv,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 120,
            layers: 1,
            enabled_types: HyperedgeType::all_set(),
            fusion: Fusion::Attention,
            conv: Conv::EffHGConv,
        }
    }
}

impl ModelConfig {
    pub fn chunk(&self) -> usize {
        self.d / 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || !self.d.is_multiple_of(3) {
            return Err(Error::Config(format!("d must be a positive multiple of 3, got {}", self.d)));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.enabled_types.is_empty() {
            return Err(Error::Config("at least one hyperedge type must be enabled".into()));
        }
        Ok(())
    }

    /// Enabled types that own a learned map under [`Conv::HGConvLinearized`]
    /// in `aspect`: covering similarity types and `U`.
    fn mapped_types(&self, aspect: Aspect) -> impl Iterator<Item = HyperedgeType> + '_ {
        self.enabled_types
            .iter()
            .copied()
            .filter(move |t| !t.is_similarity() || t.covers(aspect))
    }
}

/// Name of the entity table of an aspect (`Q0`, `R0`, `S0`).
pub fn entity_table(aspect: Aspect) -> &'static str {
    match aspect {
        Aspect::Location => "Q0",
        Aspect::Time => "R0",
        Aspect::Activity => "S0",
    }
}

pub fn attention_names(aspect: Aspect) -> [String; 3] {
    let s = aspect.short();
    [format!("W_{s}"), format!("b_{s}"), format!("a_{s}")]
}

fn linear_name(aspect: Aspect, ty: HyperedgeType) -> String {
    format!("lin_{}_{}", aspect.short(), ty.name())
}

/// Named parameter tables in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, DenseMatrix)>,
}

impl ParameterSet {
    /// Expected names and shapes for a configuration and vocabulary sizes
    /// `[users, locations, times, activities]`.
    pub fn layout(cfg: &ModelConfig, sizes: [usize; 4]) -> Vec<(String, (usize, usize))> {
        let k = cfg.chunk();
        let mut out = vec![
            ("P0".to_string(), (sizes[0], cfg.d)),
            ("Q0".to_string(), (sizes[1], k)),
            ("R0".to_string(), (sizes[2], k)),
            ("S0".to_string(), (sizes[3], k)),
        ];
        for aspect in Aspect::ALL {
            let [w, b, a] = attention_names(aspect);
            out.push((w, (k, k)));
            out.push((b, (1, k)));
            out.push((a, (k, 1)));
        }
        if cfg.conv == Conv::HGConvLinearized {
            for aspect in Aspect::ALL {
                for ty in cfg.mapped_types(aspect) {
                    out.push((linear_name(aspect, ty), (k, k)));
                }
            }
        }
        out
    }

    /// Builds a set from tables that must match [`ParameterSet::layout`].
    pub fn from_entries(
        cfg: &ModelConfig,
        sizes: [usize; 4],
        entries: Vec<(String, DenseMatrix)>,
    ) -> Result<Self> {
        let layout = Self::layout(cfg, sizes);
        if layout.len() != entries.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tables, got {}",
                layout.len(),
                entries.len()
            )));
        }
        for ((name, shape), (got_name, m)) in layout.iter().zip(&entries) {
            if name != got_name || *shape != m.shape() {
                return Err(Error::Invalid(format!(
                    "parameter `{got_name}` {:?} does not match expected `{name}` {:?}",
                    m.shape(),
                    shape
                )));
            }
            if !m.all_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, DenseMatrix)] {
        &self.entries
    }

    pub fn tensors(&self) -> impl Iterator<Item = &DenseMatrix> {
        self.entries.iter().map(|(_, m)| m)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut DenseMatrix> {
        self.entries.iter_mut().map(|(_, m)| m)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    /// Replaces every table, keeping names; shapes must match.
    pub fn with_tensors(&self, tensors: &[DenseMatrix]) -> Result<Self> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Invalid("parameter count mismatch".into()));
        }
        let mut entries = Vec::with_capacity(tensors.len());
        for ((name, old), new) in self.entries.iter().zip(tensors) {
            if old.shape() != new.shape() {
                return Err(Error::ShapeMismatch {
                    op: "with_tensors",
                    lhs: old.shape(),
                    rhs: new.shape(),
                });
            }
            entries.push((name.clone(), new.clone()));
        }
        Ok(Self { entries })
    }
}

pub fn vocab_sizes(vocab: &Vocab) -> [usize; 4] {
    [
        vocab.n_users(),
        vocab.n_locations(),
        vocab.n_times(),
        vocab.n_activities(),
    ]
}

/// Xavier-uniform bound `√(6 / (rows + cols))`.
pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Xavier-uniform tables, zero biases. Tables are drawn in layout order.
pub fn init_params(cfg: &ModelConfig, sizes: [usize; 4], rng: &mut impl Rng) -> Result<ParameterSet> {
    cfg.validate()?;
    let entries = ParameterSet::layout(cfg, sizes)
        .into_iter()
        .map(|(name, (r, c))| {
            let m = if name.starts_with("b_") || r * c == 0 {
                DenseMatrix::zeros(r, c)
            } else {
                let bound = xavier_bound(r, c);
                let data = (0..r * c).map(|_| rng.gen_range(-bound..=bound)).collect();
                DenseMatrix::from_vec(r, c, data)?
            };
            Ok((name, m))
        })
        .collect::<Result<Vec<_>>>()?;
    ParameterSet::from_entries(cfg, sizes, entries)
}

fn retention_diag(m: &CsrMatrix) -> Option<CsrMatrix> {
    let mask: Vec<f64> = (0..m.n_rows())
        .map(|i| if m.row(i).0.is_empty() { 1.0 } else { 0.0 })
        .collect();
    mask.iter().any(|&v| v > 0.0).then(|| CsrMatrix::diagonal(&mask))
}

#[derive(Debug, Clone)]
struct UserEdgeProp {
    node_to_edge: CsrMatrix,
    edge_to_node: CsrMatrix,
    bare_users: Option<CsrMatrix>,
    bare_entities: Option<CsrMatrix>,
}

/// Propagation operators ready for the forward pass. Rows without any
/// neighbour retain their own input instead of collapsing to zero.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    n_users: usize,
    enabled: BTreeSet<HyperedgeType>,
    similarity: Vec<(HyperedgeType, CsrMatrix)>,
    user_edges: Option<Vec<UserEdgeProp>>,
}

impl ModelGraph {
    pub fn new(adj: &AdjacencySet) -> Result<Self> {
        let mut similarity = Vec::new();
        for (&ty, m) in &adj.normalized {
            let prop = match retention_diag(m) {
                Some(d) => m.add(&d)?,
                None => m.clone(),
            };
            similarity.push((ty, prop));
        }
        let user_edges = adj.user_edges.as_ref().map(|ops| {
            ops.iter()
                .map(|o| UserEdgeProp {
                    bare_users: retention_diag(&o.node_to_edge),
                    bare_entities: retention_diag(&o.edge_to_node),
                    node_to_edge: o.node_to_edge.clone(),
                    edge_to_node: o.edge_to_node.clone(),
                })
                .collect()
        });
        Ok(Self {
            n_users: adj.n_users,
            enabled: adj.enabled.clone(),
            similarity,
            user_edges,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    fn similarity(&self, ty: HyperedgeType) -> Result<&CsrMatrix> {
        self.similarity
            .iter()
            .find(|(t, _)| *t == ty)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Invalid(format!("type {ty} has no propagation operator")))
    }

    fn user_edges(&self, aspect: Aspect) -> Result<&UserEdgeProp> {
        self.user_edges
            .as_ref()
            .map(|u| &u[aspect.index()])
            .ok_or_else(|| Error::Invalid("type U has no propagation operator".into()))
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if !cfg.enabled_types.is_subset(&self.enabled) {
            return Err(Error::Invalid(
                "model enables hyperedge types that the graph was not built for".into(),
            ));
        }
        Ok(())
    }
}

/// Parameter leaves on a tape, addressable by name.
pub struct ParamVars<'p> {
    names: Vec<&'p str>,
    pub vars: Vec<Var>,
}

impl ParamVars<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| *n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }
}

/// Records every parameter table as a leaf: trainable or constant.
pub fn record_params<'p>(tape: &mut Tape<'_>, params: &'p ParameterSet, trainable: bool) -> ParamVars<'p> {
    let vars = params
        .tensors()
        .map(|m| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        })
        .collect();
    ParamVars {
        names: params.names().collect(),
        vars,
    }
}

/// Per-aspect type chunks of one propagation step plus updated entities.
pub struct LayerChunks {
    pub chunks: [Vec<(HyperedgeType, Var)>; 3],
    pub entities: [Var; 3],
}

/// One intra-type propagation step from fused user chunks and entity
/// embeddings at layer ℓ.
pub fn propagate_layer<'a>(
    tape: &mut Tape<'a>,
    graph: &'a ModelGraph,
    cfg: &ModelConfig,
    params: &ParamVars<'_>,
    users: [Var; 3],
    entities: [Var; 3],
) -> Result<LayerChunks> {
    let mut chunks: [Vec<(HyperedgeType, Var)>; 3] = Default::default();
    let mut next_entities = entities;
    for aspect in Aspect::ALL {
        let s = aspect.index();
        let p = users[s];
        for &ty in &cfg.enabled_types {
            let chunk = if ty.is_similarity() {
                if !ty.covers(aspect) {
                    chunks[s].push((ty, p));
                    continue;
                }
                tape.spmm_const(graph.similarity(ty)?, p)?
            } else {
                let ops = graph.user_edges(aspect)?;
                let mut h = tape.spmm_const(&ops.node_to_edge, entities[s])?;
                if let Some(bare) = &ops.bare_users {
                    let keep = tape.spmm_const(bare, p)?;
                    h = tape.add(h, keep)?;
                }
                h
            };
            let chunk = if cfg.conv == Conv::HGConvLinearized {
                let w = params.var(&linear_name(aspect, ty))?;
                tape.matmul(chunk, w)?
            } else {
                chunk
            };
            if ty == HyperedgeType::U {
                let ops = graph.user_edges(aspect)?;
                let mut e = tape.spmm_const(&ops.edge_to_node, chunk)?;
                if let Some(bare) = &ops.bare_entities {
                    let keep = tape.spmm_const(bare, entities[s])?;
                    e = tape.add(e, keep)?;
                }
                next_entities[s] = e;
            }
            chunks[s].push((ty, chunk));
        }
    }
    Ok(LayerChunks {
        chunks,
        entities: next_entities,
    })
}

/// Fuses the type chunks of one aspect. Returns the fused chunk and, in
/// attention mode, the `n × |types|` weight matrix.
pub fn fuse_types(
    tape: &mut Tape<'_>,
    chunks: &[(HyperedgeType, Var)],
    fusion: Fusion,
    attention: Option<(Var, Var, Var)>,
) -> Result<(Var, Option<Var>)> {
    if chunks.is_empty() {
        return Err(Error::Invalid("cannot fuse an empty type set".into()));
    }
    let vars: Vec<Var> = chunks.iter().map(|&(_, v)| v).collect();
    match fusion {
        Fusion::Mean => {
            let mut acc = vars[0];
            for &v in &vars[1..] {
                acc = tape.add(acc, v)?;
            }
            Ok((tape.scale(acc, 1.0 / vars.len() as f64), None))
        }
        Fusion::Max => Ok((tape.max_elementwise(&vars)?, None)),
        Fusion::Attention => {
            let (w, b, a) = attention
                .ok_or_else(|| Error::Invalid("attention fusion needs W, b and a".into()))?;
            let (n, k) = tape.shape(vars[0]);
            let ones_n = tape.constant(DenseMatrix::filled(n, 1, 1.0));
            let ones_k = tape.constant(DenseMatrix::filled(1, k, 1.0));
            let bias = tape.matmul(ones_n, b)?;
            let mut scores = Vec::with_capacity(vars.len());
            for &c in &vars {
                let lin = tape.matmul(c, w)?;
                let lin = tape.add(lin, bias)?;
                let z = tape.tanh(lin);
                scores.push(tape.matmul(z, a)?);
            }
            let scores = tape.concat_cols(&scores)?;
            let alpha = tape.softmax_rows(scores)?;
            let mut acc = None;
            for (j, &c) in vars.iter().enumerate() {
                let col = tape.slice_cols(alpha, j, j + 1)?;
                let wide = tape.matmul(col, ones_k)?;
                let term = tape.hadamard_dense(wide, c)?;
                acc = Some(match acc {
                    None => term,
                    Some(prev) => tape.add(prev, term)?,
                });
            }
            Ok((acc.expect("non-empty"), Some(alpha)))
        }
    }
}

/// Uniform average over layer snapshots.
pub fn combine_layers(tape: &mut Tape<'_>, snapshots: &[Var]) -> Result<Var> {
    let Some(&first) = snapshots.first() else {
        return Err(Error::Invalid("no layers to combine".into()));
    };
    let mut acc = first;
    for &v in &snapshots[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / snapshots.len() as f64))
}

pub struct ForwardOutput<'p> {
    pub params: ParamVars<'p>,
    /// Final user chunks per aspect.
    pub users: [Var; 3],
    /// Final entity embeddings per aspect.
    pub entities: [Var; 3],
    /// Attention weights per layer and aspect (attention fusion only).
    pub attention: Vec<[Option<Var>; 3]>,
    pub types: Vec<HyperedgeType>,
}

pub fn forward<'a, 'p>(
    tape: &mut Tape<'a>,
    graph: &'a ModelGraph,
    cfg: &ModelConfig,
    params: &'p ParameterSet,
    trainable: bool,
) -> Result<ForwardOutput<'p>> {
    cfg.validate()?;
    graph.check(cfg)?;
    let pv = record_params(tape, params, trainable);
    let k = cfg.chunk();
    let p0 = pv.var("P0")?;
    let mut users = [p0; 3];
    let mut entities = [p0; 3];
    for aspect in Aspect::ALL {
        let s = aspect.index();
        users[s] = tape.slice_cols(p0, s * k, (s + 1) * k)?;
        entities[s] = pv.var(entity_table(aspect))?;
    }
    let mut user_layers: [Vec<Var>; 3] = Default::default();
    let mut entity_layers: [Vec<Var>; 3] = Default::default();
    for s in 0..3 {
        user_layers[s].push(users[s]);
        entity_layers[s].push(entities[s]);
    }
    let mut attention = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let step = propagate_layer(tape, graph, cfg, &pv, users, entities)?;
        let mut weights = [None; 3];
        for aspect in Aspect::ALL {
            let s = aspect.index();
            let att = if cfg.fusion == Fusion::Attention {
                let [w, b, a] = attention_names(aspect);
                Some((pv.var(&w)?, pv.var(&b)?, pv.var(&a)?))
            } else {
                None
            };
            let (fused, alpha) = fuse_types(tape, &step.chunks[s], cfg.fusion, att)?;
            users[s] = fused;
            weights[s] = alpha;
            user_layers[s].push(fused);
            entity_layers[s].push(step.entities[s]);
        }
        entities = step.entities;
        attention.push(weights);
    }
    let mut final_users = users;
    let mut final_entities = entities;
    for s in 0..3 {
        final_users[s] = combine_layers(tape, &user_layers[s])?;
        final_entities[s] = combine_layers(tape, &entity_layers[s])?;
    }
    Ok(ForwardOutput {
        params: pv,
        users: final_users,
        entities: final_entities,
        attention,
        types: cfg.enabled_types.iter().copied().collect(),
    })
}

/// Final per-aspect user chunks and entity embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalEmbeddings {
    /// P̄ per aspect, `N_U × d/3`.
    pub users: [DenseMatrix; 3],
    /// Q̄, R̄, S̄.
    pub entities: [DenseMatrix; 3],
}

impl FinalEmbeddings {
    pub fn from_forward(tape: &Tape<'_>, out: &ForwardOutput<'_>) -> Self {
        Self {
            users: out.users.map(|v| tape.value(v).clone()),
            entities: out.entities.map(|v| tape.value(v).clone()),
        }
    }

    pub fn n_users(&self) -> usize {
        self.users[0].rows()
    }

    pub fn n_activities(&self) -> usize {
        self.entities[2].rows()
    }

    fn check(&self, u: u32, ctx: [(usize, u32); 2]) -> Result<()> {
        let n_u = self.n_users();
        if u as usize >= n_u {
            return Err(Error::IndexOutOfRange {
                row: u as usize,
                col: 0,
                rows: n_u,
                cols: 0,
            });
        }
        for (s, i) in ctx {
            let n = self.entities[s].rows();
            if i as usize >= n {
                return Err(Error::IndexOutOfRange {
                    row: i as usize,
                    col: s,
                    rows: n,
                    cols: 0,
                });
            }
        }
        Ok(())
    }

    fn dot(&self, s: usize, u: u32, e: u32) -> f64 {
        self.users[s]
            .row(u as usize)
            .iter()
            .zip(self.entities[s].row(e as usize))
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn score(&self, u: u32, l: u32, t: u32, a: u32) -> Result<f64> {
        self.check(u, [(0, l), (1, t)])?;
        self.check(u, [(2, a), (2, a)])?;
        Ok(self.dot(0, u, l) + self.dot(1, u, t) + self.dot(2, u, a))
    }

    /// Scores of every activity for one context.
    pub fn score_all_activities(&self, u: u32, l: u32, t: u32) -> Result<Vec<f64>> {
        self.check(u, [(0, l), (1, t)])?;
        let offset = self.dot(0, u, l) + self.dot(1, u, t);
        Ok((0..self.n_activities() as u32)
            .map(|a| offset + self.dot(2, u, a))
            .collect())
    }
}

/// Inference-only forward pass.
pub fn compute_embeddings(graph: &ModelGraph, cfg: &ModelConfig, params: &ParameterSet) -> Result<FinalEmbeddings> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, graph, cfg, params, false)?;
    Ok(FinalEmbeddings::from_forward(&tape, &out))
}

/// Attention weights of the last layer per aspect (`N_U × |types|`) with
/// the column order of the returned type list.
pub fn attention_weights(
    graph: &ModelGraph,
    cfg: &ModelConfig,
    params: &ParameterSet,
) -> Result<([DenseMatrix; 3], Vec<HyperedgeType>)> {
    if cfg.fusion != Fusion::Attention {
        return Err(Error::Invalid(format!(
            "attention report needs attention fusion, model uses {}",
            cfg.fusion
        )));
    }
    let mut tape = Tape::new();
    let out = forward(&mut tape, graph, cfg, params, false)?;
    let last = out.attention.last().expect("layers >= 1");
    let weights = last.map(|v| tape.value(v.expect("attention fusion")).clone());
    Ok((weights, out.types))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionSummary {
    pub aspect: Aspect,
    pub ty: HyperedgeType,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn attention_report(weights: &[DenseMatrix; 3], types: &[HyperedgeType]) -> Vec<AttentionSummary> {
    let mut rows = Vec::with_capacity(3 * types.len());
    for aspect in Aspect::ALL {
        let w = &weights[aspect.index()];
        for (j, &ty) in types.iter().enumerate() {
            let mut col: Vec<f64> = (0..w.rows()).map(|i| w.get(i, j)).collect();
            col.sort_by(f64::total_cmp);
            rows.push(AttentionSummary {
                aspect,
                ty,
                min: quantile(&col, 0.0),
                q1: quantile(&col, 0.25),
                median: quantile(&col, 0.5),
                q3: quantile(&col, 0.75),
                max: quantile(&col, 1.0),
            });
        }
    }
    rows
}

pub fn write_attention_csv(path: &Path, rows: &[AttentionSummary]) -> Result<()> {
    let mut out = String::from("aspect,type,min,q1,median,q3,max\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.aspect, r.ty, r.min, r.q1, r.median, r.q3, r.max
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
