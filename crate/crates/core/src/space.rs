//! Cell search space: candidate operations, topology, architecture
//! parameters, genotypes, and the shared-weights network forward pass.
//!
//! A network is stem -> normal cell -> reduction cell -> head. Cells take
//! two inputs; every intermediate node receives one edge from each
//! predecessor, and each edge is either a softmax mixture over the candidate
//! ops (search mode) or one chosen op (eval mode). All node features share
//! one width, and the cell output is the mean of its intermediate nodes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{stem_mask_vec, INPUT_DIM, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Logit magnitude treated as a saturated (effectively one-hot) softmax.
pub const SATURATION: f64 = 20.0;

// ── operations ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    /// `tanh(x W + b)`, the only parameterized op.
    LinearTanh,
    /// Identity.
    Skip,
    /// Constant zero output.
    Zero,
    /// Fresh standard-normal output each forward, ignores its input.
    Noise,
    /// Circular adjacent-pair mean, `out[k] = (x[k] + x[k+1 mod w]) / 2`.
    AvgPair,
}

pub const ALL_OPS: [OpKind; 5] =
    [OpKind::LinearTanh, OpKind::Skip, OpKind::Zero, OpKind::Noise, OpKind::AvgPair];

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::LinearTanh => "LinearTanh",
            OpKind::Skip => "Skip",
            OpKind::Zero => "Zero",
            OpKind::Noise => "Noise",
            OpKind::AvgPair => "AvgPair",
        }
    }

    pub fn has_weights(self) -> bool {
        matches!(self, OpKind::LinearTanh)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_OPS
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::config(format!("unknown op `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Normal,
    Reduction,
}

pub const CELL_TYPES: [CellType; 2] = [CellType::Normal, CellType::Reduction];

impl CellType {
    pub fn index(self) -> usize {
        match self {
            CellType::Normal => 0,
            CellType::Reduction => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            CellType::Normal => "n",
            CellType::Reduction => "r",
        }
    }
}

// ── topology ───────────────────────────────────────────────────────────────

/// An edge feeds node `to` from node `from`; nodes `0..num_inputs` are cell
/// inputs, the rest are intermediate nodes in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub index: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTopology {
    pub num_inputs: usize,
    pub num_intermediate: usize,
    pub width: usize,
}

impl Default for CellTopology {
    fn default() -> Self {
        CellTopology { num_inputs: 2, num_intermediate: 1, width: 8 }
    }
}

impl CellTopology {
    /// Every (predecessor, intermediate) pair, indexed densely in node order.
    pub fn edges(&self) -> Vec<Edge> {
        let mut edges = Vec::new();
        for j in 0..self.num_intermediate {
            let to = self.num_inputs + j;
            for from in 0..to {
                edges.push(Edge { index: edges.len(), from, to });
            }
        }
        edges
    }

    pub fn num_edges(&self) -> usize {
        (0..self.num_intermediate).map(|j| self.num_inputs + j).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub name: String,
    /// Candidate ops; the order fixes the alpha column layout.
    pub ops: Vec<OpKind>,
    pub topology: CellTopology,
    /// Incoming edges kept per intermediate node at discretization.
    pub keep_per_node: usize,
    /// Refuse to enumerate spaces larger than this.
    #[serde(default = "default_enumeration_cap")]
    pub enumeration_cap: usize,
}

fn default_enumeration_cap() -> usize {
    100_000
}

impl SpaceSpec {
    /// The named toy spaces; all share the default one-intermediate-node
    /// topology at width 8 with two kept edges per node.
    pub fn preset(name: &str) -> Result<SpaceSpec> {
        let ops = match name {
            "T2" => vec![OpKind::LinearTanh, OpKind::Skip],
            "T3" => vec![OpKind::LinearTanh, OpKind::Skip, OpKind::Zero],
            "T4" => vec![OpKind::LinearTanh, OpKind::Noise],
            "T5" => vec![OpKind::LinearTanh, OpKind::Skip, OpKind::AvgPair],
            _ => return Err(Error::config(format!("unknown space preset `{name}`"))),
        };
        Ok(SpaceSpec {
            name: name.to_string(),
            ops,
            topology: CellTopology::default(),
            keep_per_node: 2,
            enumeration_cap: default_enumeration_cap(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::config("space has no candidate ops".to_string()));
        }
        let mut sorted = self.ops.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.ops.len() {
            return Err(Error::config("duplicate candidate ops".to_string()));
        }
        if self.topology.num_inputs != 2 {
            return Err(Error::config("cells take exactly two inputs".to_string()));
        }
        if self.topology.num_intermediate == 0 || self.topology.width == 0 {
            return Err(Error::config("degenerate topology".to_string()));
        }
        if self.keep_per_node == 0 {
            return Err(Error::config("keep_per_node must be at least 1".to_string()));
        }
        Ok(())
    }

    pub fn op_index(&self, op: OpKind) -> Result<usize> {
        self.ops
            .iter()
            .position(|&o| o == op)
            .ok_or_else(|| Error::config(format!("op `{op}` not in space `{}`", self.name)))
    }

    /// Alpha entries per cell type.
    pub fn alpha_dim_per_cell(&self) -> usize {
        self.topology.num_edges() * self.ops.len()
    }

    /// Total alpha dimension over both cell types.
    pub fn alpha_dim(&self) -> usize {
        2 * self.alpha_dim_per_cell()
    }
}

// ── architecture parameters ────────────────────────────────────────────────

/// Softmax logits per (cell type, edge, op).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub normal: Vec<Vec<f64>>,
    pub reduction: Vec<Vec<f64>>,
}

impl ArchParams {
    pub fn zeros(spec: &SpaceSpec) -> Self {
        let cell = vec![vec![0.0; spec.ops.len()]; spec.topology.num_edges()];
        ArchParams { normal: cell.clone(), reduction: cell }
    }

    pub fn cell(&self, ct: CellType) -> &Vec<Vec<f64>> {
        match ct {
            CellType::Normal => &self.normal,
            CellType::Reduction => &self.reduction,
        }
    }

    pub fn cell_mut(&mut self, ct: CellType) -> &mut Vec<Vec<f64>> {
        match ct {
            CellType::Normal => &mut self.normal,
            CellType::Reduction => &mut self.reduction,
        }
    }

    pub fn dim(&self) -> usize {
        (self.normal.len() + self.reduction.len()) * self.normal.first().map_or(0, Vec::len)
    }

    /// Normal rows then reduction rows, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.normal.iter().chain(&self.reduction).flatten().copied().collect()
    }

    pub fn from_flat(spec: &SpaceSpec, flat: &[f64]) -> Self {
        let mut out = ArchParams::zeros(spec);
        assert_eq!(flat.len(), out.dim(), "flat alpha length mismatch");
        let ops = spec.ops.len();
        let edges = spec.topology.num_edges();
        for (e, row) in out.normal.iter_mut().enumerate() {
            row.copy_from_slice(&flat[e * ops..(e + 1) * ops]);
        }
        for (e, row) in out.reduction.iter_mut().enumerate() {
            let base = (edges + e) * ops;
            row.copy_from_slice(&flat[base..base + ops]);
        }
        out
    }

    /// One-hot-at-`SATURATION` logits for a genotype; missing edges keep a
    /// zero row (they are pruned at discretization anyway).
    pub fn saturated(spec: &SpaceSpec, genotype: &Genotype) -> Result<Self> {
        let mut out = ArchParams::zeros(spec);
        for ct in CELL_TYPES {
            for &(edge, op) in genotype.cell(ct) {
                let o = spec.op_index(op)?;
                out.cell_mut(ct)[edge][o] = SATURATION;
            }
        }
        Ok(out)
    }

    /// As a `[num_edges, num_ops]` tensor for one cell type; the leaf shape
    /// [`forward_from_vars`] expects for its alpha vars.
    pub fn cell_tensor(&self, ct: CellType) -> Tensor {
        let rows = self.cell(ct);
        let cols = rows.first().map_or(0, Vec::len);
        Tensor::matrix(rows.len(), cols, rows.iter().flatten().copied().collect()).with_grad()
    }
}

// ── genotypes ──────────────────────────────────────────────────────────────

/// A discrete architecture: per cell type, the retained edges and their op.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Genotype {
    pub normal: Vec<(usize, OpKind)>,
    pub reduction: Vec<(usize, OpKind)>,
}

impl Genotype {
    pub fn cell(&self, ct: CellType) -> &[(usize, OpKind)] {
        match ct {
            CellType::Normal => &self.normal,
            CellType::Reduction => &self.reduction,
        }
    }

    pub fn op_on_edge(&self, ct: CellType, edge: usize) -> Option<OpKind> {
        self.cell(ct).iter().find(|(e, _)| *e == edge).map(|(_, op)| *op)
    }

    /// Count of edges (both cells) carrying `op`.
    pub fn count_op(&self, op: OpKind) -> usize {
        self.normal.iter().chain(&self.reduction).filter(|(_, o)| *o == op).count()
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = |edges: &[(usize, OpKind)]| -> String {
            edges.iter().map(|(e, op)| format!("{op}@{e}")).collect::<Vec<_>>().join(",")
        };
        write!(f, "n:{}|r:{}", side(&self.normal), side(&self.reduction))
    }
}

impl FromStr for Genotype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::artifact(format!("genotype `{s}`: {msg}"));
        let (n_part, r_part) = s.split_once('|').ok_or_else(|| bad("missing `|`"))?;
        let parse_side = |part: &str, tag: &str| -> Result<Vec<(usize, OpKind)>> {
            let body = part
                .strip_prefix(&format!("{tag}:"))
                .ok_or_else(|| bad("missing cell tag"))?;
            if body.is_empty() {
                return Err(bad("empty cell"));
            }
            let mut edges = Vec::new();
            for item in body.split(',') {
                let (op, e) = item.split_once('@').ok_or_else(|| bad("missing `@`"))?;
                let edge: usize =
                    e.parse().map_err(|_| bad(&format!("bad edge index `{e}`")))?;
                edges.push((edge, op.parse::<OpKind>()?));
            }
            if edges.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(bad("edges must be strictly increasing"));
            }
            Ok(edges)
        };
        Ok(Genotype { normal: parse_side(n_part, "n")?, reduction: parse_side(r_part, "r")? })
    }
}

impl From<Genotype> for String {
    fn from(g: Genotype) -> String {
        g.to_string()
    }
}

impl TryFrom<String> for Genotype {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Pick the genotype encoded by `alpha`: per edge the argmax op (ties to the
/// lowest op index), per node the `k` incoming edges with the highest best-op
/// softmax weight (ties to the lowest edge index).
pub fn discretize(spec: &SpaceSpec, alpha: &ArchParams, k: usize) -> Genotype {
    let edges = spec.topology.edges();
    let mut cells: [Vec<(usize, OpKind)>; 2] = [Vec::new(), Vec::new()];
    for ct in CELL_TYPES {
        let rows = alpha.cell(ct);
        let mut per_node: Vec<Vec<(f64, usize, OpKind)>> =
            vec![Vec::new(); spec.topology.num_intermediate];
        for edge in &edges {
            let row = &rows[edge.index];
            let weights = softmax(row);
            let mut best = 0usize;
            for (o, &w) in weights.iter().enumerate() {
                if w > weights[best] {
                    best = o;
                }
            }
            per_node[edge.to - spec.topology.num_inputs].push((
                weights[best],
                edge.index,
                spec.ops[best],
            ));
        }
        let mut kept = Vec::new();
        for candidates in &mut per_node {
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let take = k.min(candidates.len());
            kept.extend(candidates[..take].iter().map(|&(_, e, op)| (e, op)));
        }
        kept.sort_by_key(|&(e, _)| e);
        cells[ct.index()] = kept;
    }
    let [normal, reduction] = cells;
    Genotype { normal, reduction }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// All distinct genotypes with `k` retained edges per node; errors when the
/// space exceeds the spec's enumeration cap.
pub fn enumerate_space(spec: &SpaceSpec, k: usize) -> Result<Vec<Genotype>> {
    let cell_variants = enumerate_cell(spec, k);
    let total = (cell_variants.len() as u128).pow(2);
    if total > spec.enumeration_cap as u128 {
        return Err(Error::config(format!(
            "space `{}` has {total} genotypes, over the cap of {}",
            spec.name, spec.enumeration_cap
        )));
    }
    let mut out = Vec::with_capacity(total as usize);
    for normal in &cell_variants {
        for reduction in &cell_variants {
            out.push(Genotype { normal: normal.clone(), reduction: reduction.clone() });
        }
    }
    Ok(out)
}

/// All edge subsets (k per node) crossed with all op assignments, in a fixed
/// lexicographic order.
fn enumerate_cell(spec: &SpaceSpec, k: usize) -> Vec<Vec<(usize, OpKind)>> {
    let edges = spec.topology.edges();
    let mut node_choices: Vec<Vec<Vec<(usize, OpKind)>>> = Vec::new();
    for j in 0..spec.topology.num_intermediate {
        let to = spec.topology.num_inputs + j;
        let incoming: Vec<usize> =
            edges.iter().filter(|e| e.to == to).map(|e| e.index).collect();
        let take = k.min(incoming.len());
        let mut variants = Vec::new();
        for subset in combinations(&incoming, take) {
            let mut assignment = vec![0usize; take];
            loop {
                variants.push(
                    subset
                        .iter()
                        .zip(&assignment)
                        .map(|(&e, &o)| (e, spec.ops[o]))
                        .collect::<Vec<_>>(),
                );
                // Odometer over op assignments.
                let mut pos = take;
                loop {
                    if pos == 0 {
                        break;
                    }
                    pos -= 1;
                    assignment[pos] += 1;
                    if assignment[pos] < spec.ops.len() {
                        break;
                    }
                    assignment[pos] = 0;
                }
                if assignment.iter().all(|&o| o == 0) {
                    break;
                }
            }
        }
        node_choices.push(variants);
    }
    // Cartesian product over nodes.
    let mut cells: Vec<Vec<(usize, OpKind)>> = vec![Vec::new()];
    for variants in node_choices {
        let mut next = Vec::with_capacity(cells.len() * variants.len());
        for cell in &cells {
            for variant in &variants {
                let mut joined = cell.clone();
                joined.extend_from_slice(variant);
                next.push(joined);
            }
        }
        cells = next;
    }
    for cell in &mut cells {
        cell.sort_by_key(|&(e, _)| e);
    }
    cells
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    if items.len() < k {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

// ── network weights ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellWeights {
    /// One linear op per edge, present whether or not the edge ends up
    /// using it.
    pub lin: Vec<LinearWeights>,
}

/// Shared weights for the whole network. The canonical tensor order (stem,
/// normal-cell edges, reduction-cell edges, head; weight then bias) is the
/// contract between optimizers, gradients, and snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct NetWeights {
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    pub cells: Vec<CellWeights>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl NetWeights {
    /// Glorot-uniform weights, zero biases, drawn in canonical order.
    pub fn init(spec: &SpaceSpec, rng: &mut RngStream) -> Self {
        let w = spec.topology.width;
        let glorot = |rng: &mut RngStream, rows: usize, cols: usize| -> Tensor {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.uniform_in(-a, a)).collect();
            Tensor::matrix(rows, cols, data).with_grad()
        };
        let stem_w = glorot(rng, INPUT_DIM, w);
        let stem_b = Tensor::zeros(&[w]).with_grad();
        let cells = (0..2)
            .map(|_| CellWeights {
                lin: (0..spec.topology.num_edges())
                    .map(|_| LinearWeights {
                        w: glorot(rng, w, w),
                        b: Tensor::zeros(&[w]).with_grad(),
                    })
                    .collect(),
            })
            .collect();
        let head_w = glorot(rng, w, NUM_CLASSES);
        let head_b = Tensor::zeros(&[NUM_CLASSES]).with_grad();
        NetWeights { stem_w, stem_b, cells, head_w, head_b }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.stem_w, &self.stem_b];
        for cell in &self.cells {
            for lin in &cell.lin {
                out.push(&lin.w);
                out.push(&lin.b);
            }
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.stem_w, &mut self.stem_b];
        for cell in &mut self.cells {
            for lin in &mut cell.lin {
                out.push(&mut lin.w);
                out.push(&mut lin.b);
            }
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| &t.data).map(|v| v * v).sum()
    }

    /// `w += a * dir`, with `dir` aligned to [`NetWeights::tensors`].
    pub fn axpy(&mut self, a: f64, dir: &[Vec<f64>]) {
        let mut tensors = self.tensors_mut();
        assert_eq!(tensors.len(), dir.len(), "direction not aligned with weights");
        for (t, d) in tensors.iter_mut().zip(dir) {
            assert_eq!(t.data.len(), d.len());
            for (w, g) in t.data.iter_mut().zip(d) {
                *w += a * g;
            }
        }
    }
}

// ── forward pass ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub enum ArchBinding<'a> {
    /// Search mode: softmax mixtures parameterized by alpha.
    Mixture(&'a ArchParams),
    /// Eval mode: one op per retained edge.
    Discrete(&'a Genotype),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    /// Probability of dropping a non-Skip op output (scaled survivors).
    pub drop_path_p: f64,
    /// Fraction of stem features masked per training sample.
    pub stem_mask_frac: f64,
    /// Whether the regularizers above are active (inner objective only).
    pub train_side: bool,
}

/// Vars of a forward pass, for reading gradients back out.
pub struct BoundNet {
    pub logits: Var,
    /// Aligned with [`NetWeights::tensors`].
    pub weight_vars: Vec<Var>,
    /// `[normal, reduction]` alpha leaves (mixture mode only).
    pub alpha_vars: Option<[Var; 2]>,
}

struct WeightVars {
    stem_w: Var,
    stem_b: Var,
    cells: Vec<Vec<(Var, Var)>>,
    head_w: Var,
    head_b: Var,
    all: Vec<Var>,
}

/// Slice a flat var list in canonical [`NetWeights::tensors`] order into the
/// stem/cells/head layout.
fn layout_weight_vars(spec: &SpaceSpec, all: &[Var]) -> Result<WeightVars> {
    let per_cell = spec.topology.num_edges();
    let expected = 4 * per_cell + 4;
    if all.len() != expected {
        return Err(Error::shape(
            "forward_from_vars",
            format!("got {} weight vars, expected {expected}", all.len()),
        ));
    }
    let mut it = all.iter().copied();
    let mut next = || it.next().expect("length checked above");
    let stem_w = next();
    let stem_b = next();
    let cells =
        (0..2).map(|_| (0..per_cell).map(|_| (next(), next())).collect()).collect();
    let head_w = next();
    let head_b = next();
    Ok(WeightVars { stem_w, stem_b, cells, head_w, head_b, all: all.to_vec() })
}

/// Arch side of [`forward_from_vars`] when the caller owns the leaves.
#[derive(Clone, Copy)]
pub enum ArchVarBinding<'a> {
    /// `[normal, reduction]` alpha leaves shaped as [`ArchParams::cell_tensor`].
    Mixture([Var; 2]),
    Discrete(&'a Genotype),
}

/// Build the full forward graph for one batch and return the logits node.
pub fn network_forward(
    tape: &mut Tape,
    spec: &SpaceSpec,
    weights: &NetWeights,
    arch: ArchBinding,
    x: &Tensor,
    opts: ForwardOpts,
    rng: &mut RngStream,
) -> Result<BoundNet> {
    let all: Vec<Var> =
        weights.tensors().into_iter().map(|t| tape.leaf(t)).collect::<Result<_>>()?;
    let arch_vars = match arch {
        ArchBinding::Mixture(alpha) => {
            let n = tape.leaf(&alpha.cell_tensor(CellType::Normal))?;
            let r = tape.leaf(&alpha.cell_tensor(CellType::Reduction))?;
            ArchVarBinding::Mixture([n, r])
        }
        ArchBinding::Discrete(g) => ArchVarBinding::Discrete(g),
    };
    forward_from_vars(tape, spec, &all, arch_vars, x, opts, rng)
}

/// Forward graph over leaves already on the tape, for callers that need
/// gradients with respect to their own vars (gradient checking, quadratic
/// surrogates). `weight_vars` follows the canonical [`NetWeights::tensors`]
/// order.
pub fn forward_from_vars(
    tape: &mut Tape,
    spec: &SpaceSpec,
    weight_vars: &[Var],
    arch: ArchVarBinding,
    x: &Tensor,
    opts: ForwardOpts,
    rng: &mut RngStream,
) -> Result<BoundNet> {
    if x.shape.len() != 2 || x.shape[1] != INPUT_DIM {
        return Err(Error::shape("network_forward", format!("input shape {:?}", x.shape)));
    }
    let batch = x.shape[0];
    let width = spec.topology.width;
    let wv = layout_weight_vars(spec, weight_vars)?;
    let alpha_vars = match arch {
        ArchVarBinding::Mixture(pair) => Some(pair),
        ArchVarBinding::Discrete(_) => None,
    };

    let x_var = {
        let mut t = x.clone();
        t.requires_grad = false;
        tape.leaf(&t)?
    };
    let pre_stem = tape.matmul(x_var, wv.stem_w)?;
    let mut stem = tape.add(pre_stem, wv.stem_b)?;
    if opts.train_side && opts.stem_mask_frac > 0.0 {
        let mask = stem_mask_vec(batch, width, opts.stem_mask_frac, rng);
        stem = tape.mask(stem, &mask)?;
    }

    let mut cell_out = stem;
    for ct in CELL_TYPES {
        let inputs = match ct {
            CellType::Normal => [stem, stem],
            CellType::Reduction => [stem, cell_out],
        };
        cell_out = cell_forward(
            tape,
            spec,
            &wv.cells[ct.index()],
            match arch {
                ArchVarBinding::Mixture(pair) => CellArch::Mixture(pair[ct.index()]),
                ArchVarBinding::Discrete(g) => CellArch::Discrete(g.cell(ct)),
            },
            inputs,
            opts,
            batch,
            width,
            rng,
        )?;
    }

    let pre_head = tape.matmul(cell_out, wv.head_w)?;
    let logits = tape.add(pre_head, wv.head_b)?;
    Ok(BoundNet { logits, weight_vars: wv.all, alpha_vars })
}

enum CellArch<'a> {
    Mixture(Var),
    Discrete(&'a [(usize, OpKind)]),
}

#[allow(clippy::too_many_arguments)]
fn cell_forward(
    tape: &mut Tape,
    spec: &SpaceSpec,
    lin_vars: &[(Var, Var)],
    arch: CellArch,
    inputs: [Var; 2],
    opts: ForwardOpts,
    batch: usize,
    width: usize,
    rng: &mut RngStream,
) -> Result<Var> {
    let mut nodes: Vec<Var> = inputs.to_vec();
    let mut intermediates = Vec::new();
    let edges = spec.topology.edges();
    for j in 0..spec.topology.num_intermediate {
        let to = spec.topology.num_inputs + j;
        let mut contributions = Vec::new();
        for edge in edges.iter().filter(|e| e.to == to) {
            match &arch {
                CellArch::Mixture(alpha) => contributions.push(mixed_edge_forward(
                    tape,
                    nodes[edge.from],
                    *alpha,
                    edge.index,
                    spec,
                    lin_vars[edge.index],
                    opts,
                    batch,
                    width,
                    rng,
                )?),
                CellArch::Discrete(kept) => {
                    // Edges discretization pruned contribute nothing.
                    if let Some(&(_, op)) = kept.iter().find(|(e, _)| *e == edge.index) {
                        let y = apply_op(
                            tape,
                            op,
                            nodes[edge.from],
                            lin_vars[edge.index],
                            batch,
                            width,
                            rng,
                        )?;
                        contributions.push(drop_path(tape, y, op, opts, rng)?);
                    }
                }
            }
        }
        if contributions.is_empty() {
            return Err(Error::config(format!("node {to} has no retained incoming edges")));
        }
        nodes.push(tape.add_n(&contributions)?);
        intermediates.push(to);
    }
    let sums: Vec<Var> = intermediates.iter().map(|&i| nodes[i]).collect();
    let total = tape.add_n(&sums)?;
    tape.scale(total, 1.0 / sums.len() as f64)
}

/// Softmax-weighted sum of every candidate op on one edge.
#[allow(clippy::too_many_arguments)]
pub fn mixed_edge_forward(
    tape: &mut Tape,
    x: Var,
    alpha_cell: Var,
    edge_index: usize,
    spec: &SpaceSpec,
    lin: (Var, Var),
    opts: ForwardOpts,
    batch: usize,
    width: usize,
    rng: &mut RngStream,
) -> Result<Var> {
    let row = tape.slice(alpha_cell, 0, edge_index, 1)?;
    let weights = tape.softmax(row)?;
    let mut terms = Vec::with_capacity(spec.ops.len());
    for (o, &op) in spec.ops.iter().enumerate() {
        let y = apply_op(tape, op, x, lin, batch, width, rng)?;
        let y = drop_path(tape, y, op, opts, rng)?;
        let w = tape.slice(weights, 1, o, 1)?;
        terms.push(tape.mul(y, w)?);
    }
    tape.add_n(&terms)
}

/// One candidate op applied to `[batch, width]` features.
pub fn apply_op(
    tape: &mut Tape,
    op: OpKind,
    x: Var,
    lin: (Var, Var),
    batch: usize,
    width: usize,
    rng: &mut RngStream,
) -> Result<Var> {
    match op {
        OpKind::LinearTanh => {
            let h = tape.matmul(x, lin.0)?;
            let h = tape.add(h, lin.1)?;
            tape.tanh(h)
        }
        OpKind::Skip => Ok(x),
        OpKind::Zero => tape.scale(x, 0.0),
        OpKind::Noise => tape.constant(vec![batch, width], rng.normal_vec(batch * width)),
        OpKind::AvgPair => {
            let mut p = vec![0.0; width * width];
            for k in 0..width {
                p[k * width + k] += 0.5;
                p[((k + 1) % width) * width + k] += 0.5;
            }
            let p = tape.constant(vec![width, width], p)?;
            tape.matmul(x, p)
        }
    }
}

/// Zero a whole op output with probability `p`, scaling survivors by
/// `1/(1-p)`; Skip is exempt and nothing is dropped outside the train side.
fn drop_path(tape: &mut Tape, y: Var, op: OpKind, opts: ForwardOpts, rng: &mut RngStream) -> Result<Var> {
    if !opts.train_side || opts.drop_path_p <= 0.0 || op == OpKind::Skip {
        return Ok(y);
    }
    let p = opts.drop_path_p;
    if rng.uniform() < p {
        tape.scale(y, 0.0)
    } else {
        tape.scale(y, 1.0 / (1.0 - p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t5() -> SpaceSpec {
        SpaceSpec::preset("T5").unwrap()
    }

    #[test]
    fn op_names_round_trip() {
        for op in ALL_OPS {
            assert_eq!(op.name().parse::<OpKind>().unwrap(), op);
        }
        assert!("Linear".parse::<OpKind>().is_err());
    }

    #[test]
    fn default_topology_has_two_edges() {
        let topo = CellTopology::default();
        let edges = topo.edges();
        assert_eq!(edges.len(), 2);
        assert_eq!((edges[0].from, edges[0].to), (0, 2));
        assert_eq!((edges[1].from, edges[1].to), (1, 2));

        let deeper = CellTopology { num_intermediate: 2, ..topo };
        assert_eq!(deeper.num_edges(), 5);
        assert_eq!(deeper.edges().last().unwrap().to, 3);
    }

    #[test]
    fn presets_match_their_op_sets() {
        assert_eq!(t5().ops, vec![OpKind::LinearTanh, OpKind::Skip, OpKind::AvgPair]);
        assert_eq!(SpaceSpec::preset("T4").unwrap().ops, vec![OpKind::LinearTanh, OpKind::Noise]);
        assert!(SpaceSpec::preset("T9").is_err());
    }

    #[test]
    fn enumerate_t5_gives_81_distinct() {
        let all = enumerate_space(&t5(), 2).unwrap();
        assert_eq!(all.len(), 81);
        let set: std::collections::HashSet<String> =
            all.iter().map(|g| g.to_string()).collect();
        assert_eq!(set.len(), 81);
    }

    #[test]
    fn enumerate_t2_gives_16() {
        let all = enumerate_space(&SpaceSpec::preset("T2").unwrap(), 2).unwrap();
        assert_eq!(all.len(), 16);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let mut spec = t5();
        spec.enumeration_cap = 80;
        let err = enumerate_space(&spec, 2).unwrap_err();
        assert!(err.to_string().contains("81"), "{err}");
    }

    #[test]
    fn genotype_string_round_trip() {
        let g = Genotype {
            normal: vec![(0, OpKind::Skip), (1, OpKind::AvgPair)],
            reduction: vec![(0, OpKind::LinearTanh), (1, OpKind::Skip)],
        };
        let s = g.to_string();
        assert_eq!(s, "n:Skip@0,AvgPair@1|r:LinearTanh@0,Skip@1");
        assert_eq!(s.parse::<Genotype>().unwrap(), g);
        assert!("n:Skip@0".parse::<Genotype>().is_err());
        assert!("n:Bogus@0|r:Skip@0".parse::<Genotype>().is_err());
    }

    #[test]
    fn discretize_prefers_argmax_and_breaks_ties_low() {
        let spec = t5();
        let mut alpha = ArchParams::zeros(&spec);
        alpha.normal[0] = vec![0.1, 2.0, 0.1];
        alpha.normal[1] = vec![0.5, 0.1, 3.0];
        alpha.reduction[0] = vec![4.0, 0.0, 0.0];
        // reduction edge 1 left at zeros: tie resolves to ops[0].
        let g = discretize(&spec, &alpha, 2);
        assert_eq!(g.normal, vec![(0, OpKind::Skip), (1, OpKind::AvgPair)]);
        assert_eq!(g.reduction, vec![(0, OpKind::LinearTanh), (1, OpKind::LinearTanh)]);
    }

    #[test]
    fn discretize_is_shift_invariant_per_row() {
        let spec = t5();
        let mut alpha = ArchParams::zeros(&spec);
        alpha.normal[0] = vec![0.3, 1.1, -0.2];
        alpha.normal[1] = vec![0.9, 0.8, 0.7];
        alpha.reduction[0] = vec![-1.0, -3.0, -2.0];
        alpha.reduction[1] = vec![0.0, 0.2, 0.1];
        let base = discretize(&spec, &alpha, 2);
        let mut shifted = alpha.clone();
        for row in shifted.normal.iter_mut().chain(shifted.reduction.iter_mut()) {
            for v in row.iter_mut() {
                *v += 7.25;
            }
        }
        assert_eq!(discretize(&spec, &shifted, 2), base);
    }

    #[test]
    fn discretize_keeps_top_k_edges_per_node() {
        // Two intermediate nodes: node 0 has 2 incoming, node 1 has 3.
        let mut spec = t5();
        spec.topology.num_intermediate = 2;
        let mut alpha = ArchParams::zeros(&spec);
        // Node 1 edges are indices 2, 3, 4; make edge 3 clearly weakest.
        alpha.normal[2] = vec![3.0, 0.0, 0.0];
        alpha.normal[3] = vec![0.4, 0.3, 0.3];
        alpha.normal[4] = vec![0.0, 2.5, 0.0];
        let g = discretize(&spec, &alpha, 2);
        let node1: Vec<usize> =
            g.normal.iter().map(|&(e, _)| e).filter(|&e| e >= 2).collect();
        assert_eq!(node1, vec![2, 4]);
        // All nodes keep exactly two edges.
        assert_eq!(g.normal.len(), 4);
    }

    #[test]
    fn saturated_alpha_discretizes_back() {
        let spec = t5();
        for g in enumerate_space(&spec, 2).unwrap() {
            let alpha = ArchParams::saturated(&spec, &g).unwrap();
            assert_eq!(discretize(&spec, &alpha, 2), g);
        }
    }

    #[test]
    fn alpha_flatten_round_trip() {
        let spec = t5();
        let mut alpha = ArchParams::zeros(&spec);
        alpha.normal[1][2] = 0.7;
        alpha.reduction[0][1] = -0.3;
        let flat = alpha.flatten();
        assert_eq!(flat.len(), spec.alpha_dim());
        assert_eq!(ArchParams::from_flat(&spec, &flat), alpha);
    }

    #[test]
    fn mixed_edge_with_uniform_alpha_averages_ops() {
        // T2 at alpha = (0, 0): output must be 0.5 LinearTanh(x) + 0.5 x.
        let spec = SpaceSpec::preset("T2").unwrap();
        let mut rng = RngStream::from_seed(3);
        let weights = NetWeights::init(&spec, &mut rng);
        let x = Tensor::matrix(4, 8, rng.normal_vec(32));

        let mut tape = Tape::new();
        let alpha = ArchParams::zeros(&spec);
        let a = tape.leaf(&alpha.cell_tensor(CellType::Normal)).unwrap();
        let xv = tape.leaf(&x).unwrap();
        let wv = tape.leaf(&weights.cells[0].lin[0].w).unwrap();
        let bv = tape.leaf(&weights.cells[0].lin[0].b).unwrap();
        let mut r1 = RngStream::from_seed(0);
        let y = mixed_edge_forward(
            &mut tape, xv, a, 0, &spec, (wv, bv), ForwardOpts::default(), 4, 8, &mut r1,
        )
        .unwrap();

        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.add(h, bv).unwrap();
        let lt = tape.tanh(h).unwrap();
        let expect: Vec<f64> = tape
            .value(lt)
            .iter()
            .zip(tape.value(xv))
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        for (got, want) in tape.value(y).iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_mixture_matches_single_op() {
        let spec = t5();
        let mut rng = RngStream::from_seed(5);
        let weights = NetWeights::init(&spec, &mut rng);
        let x = Tensor::matrix(4, 8, rng.normal_vec(32));
        let mut alpha = ArchParams::zeros(&spec);
        alpha.normal[0] = vec![0.0, SATURATION, 0.0]; // Skip

        let mut tape = Tape::new();
        let a = tape.leaf(&alpha.cell_tensor(CellType::Normal)).unwrap();
        let xv = tape.leaf(&x).unwrap();
        let wv = tape.leaf(&weights.cells[0].lin[0].w).unwrap();
        let bv = tape.leaf(&weights.cells[0].lin[0].b).unwrap();
        let mut r = RngStream::from_seed(0);
        let y = mixed_edge_forward(
            &mut tape, xv, a, 0, &spec, (wv, bv), ForwardOpts::default(), 4, 8, &mut r,
        )
        .unwrap();
        for (got, want) in tape.value(y).iter().zip(&x.data) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn all_skip_cell_sums_inputs_and_all_zero_cell_vanishes() {
        let spec = t5();
        let mut rng = RngStream::from_seed(11);
        let weights = NetWeights::init(&spec, &mut rng);
        let x = Tensor::matrix(3, 8, rng.normal_vec(24));

        let run = |geno: &Genotype| -> Vec<f64> {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x).unwrap();
            let lin: Vec<(Var, Var)> = weights.cells[0]
                .lin
                .iter()
                .map(|l| (tape.leaf(&l.w).unwrap(), tape.leaf(&l.b).unwrap()))
                .collect();
            let mut r = RngStream::from_seed(0);
            let out = cell_forward(
                &mut tape,
                &spec,
                &lin,
                CellArch::Discrete(geno.cell(CellType::Normal)),
                [xv, xv],
                ForwardOpts::default(),
                3,
                8,
                &mut r,
            )
            .unwrap();
            tape.value(out).to_vec()
        };

        let skip: Genotype = "n:Skip@0,Skip@1|r:Skip@0,Skip@1".parse().unwrap();
        let got = run(&skip);
        for (g, x) in got.iter().zip(&x.data) {
            assert!((g - 2.0 * x).abs() < 1e-12, "skip cell must sum both inputs");
        }

        let mut zero_spec_geno = skip.clone();
        zero_spec_geno.normal = vec![(0, OpKind::Zero), (1, OpKind::Zero)];
        let got = run(&zero_spec_geno);
        assert!(got.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn network_forward_shapes_and_determinism() {
        let spec = t5();
        let mut rng = RngStream::from_seed(21);
        let weights = NetWeights::init(&spec, &mut rng);
        let alpha = ArchParams::zeros(&spec);
        let x = Tensor::matrix(5, 2, rng.normal_vec(10));

        let run = || -> Vec<f64> {
            let mut tape = Tape::new();
            let mut r = RngStream::from_seed(7);
            let net = network_forward(
                &mut tape,
                &spec,
                &weights,
                ArchBinding::Mixture(&alpha),
                &x,
                ForwardOpts::default(),
                &mut r,
            )
            .unwrap();
            assert_eq!(tape.shape(net.logits), &[5, 2]);
            tape.value(net.logits).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn discrete_forward_matches_saturated_mixture() {
        let spec = t5();
        let mut rng = RngStream::from_seed(13);
        let weights = NetWeights::init(&spec, &mut rng);
        let x = Tensor::matrix(6, 2, rng.normal_vec(12));
        let genotype: Genotype = "n:AvgPair@0,LinearTanh@1|r:Skip@0,AvgPair@1".parse().unwrap();
        let alpha = ArchParams::saturated(&spec, &genotype).unwrap();

        let mut t1 = Tape::new();
        let mut r1 = RngStream::from_seed(0);
        let discrete = network_forward(
            &mut t1, &spec, &weights, ArchBinding::Discrete(&genotype), &x,
            ForwardOpts::default(), &mut r1,
        )
        .unwrap();
        let mut t2 = Tape::new();
        let mut r2 = RngStream::from_seed(0);
        let mixture = network_forward(
            &mut t2, &spec, &weights, ArchBinding::Mixture(&alpha), &x,
            ForwardOpts::default(), &mut r2,
        )
        .unwrap();
        for (a, b) in t1.value(discrete.logits).iter().zip(t2.value(mixture.logits)) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn skip_edges_ignore_drop_path() {
        let spec = t5();
        let mut rng = RngStream::from_seed(17);
        let weights = NetWeights::init(&spec, &mut rng);
        let x = Tensor::matrix(4, 2, rng.normal_vec(8));
        let genotype: Genotype = "n:Skip@0,Skip@1|r:Skip@0,Skip@1".parse().unwrap();

        let run = |p: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut r = RngStream::from_seed(99);
            let net = network_forward(
                &mut tape,
                &spec,
                &weights,
                ArchBinding::Discrete(&genotype),
                &x,
                ForwardOpts { drop_path_p: p, stem_mask_frac: 0.0, train_side: true },
                &mut r,
            )
            .unwrap();
            tape.value(net.logits).to_vec()
        };
        assert_eq!(run(0.0), run(0.9));
    }

    #[test]
    fn avg_pair_is_circular() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::matrix(1, 8, vec![8.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]))
            .unwrap();
        let dummy = tape.constant(vec![1], vec![0.0]).unwrap();
        let mut rng = RngStream::from_seed(0);
        let y = apply_op(&mut tape, OpKind::AvgPair, x, (dummy, dummy), 1, 8, &mut rng).unwrap();
        assert_eq!(tape.value(y), &[4.5, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 7.5]);
    }
}
