//! Protocol graph IR, its static cost model, an executor over shares, and the
//! rewrite passes that shrink conversion traffic.
//!
//! Nodes are stored in topological order; every edge points backwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linproto::{self, cost, BitPlaneWeights, TAG_EXT, TAG_GEMM, TAG_RELU, TAG_TR, TAG_TRUNC};
use crate::netsim::{CommMeter, CostModel, Phase, Session};
use crate::ring::{BitWidthMeta, Party, PlainTensor, Shared};
use crate::winograd::{self, ConvGeom, TileGrid, TransformSet};

pub const GRAPH_SCHEMA_VERSION: u32 = 1;

/// Width-polymorphic local operators (free: no interaction).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LocalOp {
    /// `BᵀXB` per tile: `[C, H, W]` to `[n², C, T]`.
    WinoInput { m: usize, c: usize, h: usize, w: usize, pad: usize },
    /// `AᵀYA` per tile: `[n², K, T]` to `[K, H_out, W_out]`; `h`, `w`, `pad`
    /// describe the layer input.
    WinoOutput { m: usize, k: usize, c: usize, h: usize, w: usize, pad: usize },
    /// Patch extraction: `[C, H, W]` to `[1, C·r², H_out·W_out]`.
    Im2col { c: usize, h: usize, w: usize, r: usize, pad: usize, stride: usize },
    Reshape { shape: Vec<usize> },
}

impl LocalOp {
    fn wino_grid(m: usize, c: usize, h: usize, w: usize, pad: usize) -> Result<(TileGrid, TransformSet)> {
        let ts = winograd::transform_matrices(m, 3)?;
        let grid = TileGrid::new(ConvGeom::new(c, h, w, 3, pad, 1)?, &ts)?;
        Ok((grid, ts))
    }

    fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        let want = |shape: &[usize]| -> Result<()> {
            if input != shape {
                return Err(Error::ShapeMismatch(format!("{self:?} expects {shape:?}, got {input:?}")));
            }
            Ok(())
        };
        match *self {
            LocalOp::WinoInput { m, c, h, w, pad } => {
                want(&[c, h, w])?;
                let (g, _) = Self::wino_grid(m, c, h, w, pad)?;
                Ok(vec![g.n * g.n, c, g.tiles()])
            }
            LocalOp::WinoOutput { m, k, c, h, w, pad } => {
                let (g, _) = Self::wino_grid(m, c, h, w, pad)?;
                want(&[g.n * g.n, k, g.tiles()])?;
                Ok(vec![k, g.geom.h_out(), g.geom.w_out()])
            }
            LocalOp::Im2col { c, h, w, r, pad, stride } => {
                want(&[c, h, w])?;
                let g = ConvGeom::new(c, h, w, r, pad, stride)?;
                Ok(vec![1, c * r * r, g.h_out() * g.w_out()])
            }
            LocalOp::Reshape { ref shape } => {
                if shape.iter().product::<usize>() != numel {
                    return Err(Error::ShapeMismatch(format!("reshape {input:?} to {shape:?}")));
                }
                Ok(shape.clone())
            }
        }
    }

    fn keeps_nonneg(&self) -> bool {
        matches!(self, LocalOp::Reshape { .. } | LocalOp::Im2col { .. })
    }

    fn apply(&self, x: &Shared) -> Result<Shared> {
        match *self {
            LocalOp::WinoInput { m, c, h, w, pad } => {
                let (g, ts) = Self::wino_grid(m, c, h, w, pad)?;
                Ok(winograd::shared_input_transform(x, &g, &ts))
            }
            LocalOp::WinoOutput { m, k, c, h, w, pad } => {
                let (g, ts) = Self::wino_grid(m, c, h, w, pad)?;
                Ok(winograd::shared_output_transform(x, &g, &ts, k))
            }
            LocalOp::Im2col { c, h, w, r, pad, stride } => {
                let g = ConvGeom::new(c, h, w, r, pad, stride)?;
                let mut y = winograd::shared_im2col(x, &g);
                y.set_shape(vec![1, c * r * r, g.h_out() * g.w_out()]);
                Ok(y)
            }
            LocalOp::Reshape { ref shape } => {
                let mut y = x.clone();
                y.set_shape(shape.clone());
                Ok(y)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    Input { shape: Vec<usize>, meta: BitWidthMeta },
    Output,
    /// Rescale and resize: Trunc by the scale difference, then Ext or Narrow.
    Requant { width: u32, scale_exp: i32 },
    Ext { to: u32 },
    Trunc { shift: u32 },
    Tr { shift: u32 },
    Narrow { to: u32 },
    Local { op: LocalOp },
    /// Batched GEMM against `weights[index]`; the input is already at the
    /// accumulator width and bounded by `value_bits`.
    Gemm { weights: usize, value_bits: u32 },
    Relu,
    /// Residual join at a separate high-precision adder width. Inputs are
    /// `[main, residual]`.
    ResidualBaseline { l_add: u32, e_add: i32, width: u32, scale_exp: i32 },
    /// Residual join that aligns the residual straight to the main branch.
    ResidualSimplified { scale_exp: i32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeKind,
    pub inputs: Vec<usize>,
    pub layer: String,
    /// Conversions on this node use the MSB-known variants.
    #[serde(default)]
    pub msb: bool,
}

/// Server-held weights of one GEMM node: one matrix per batch slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmWeights {
    pub planes: Vec<BitPlaneWeights>,
    pub scale_exp: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolGraph {
    pub schema_version: u32,
    pub nodes: Vec<Node>,
    pub weights: Vec<GemmWeights>,
    /// Set by the MSB pass; every later rewrite refreshes the node flags.
    #[serde(default)]
    pub msb_optimized: bool,
}

/// Static shape and format of a node output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub shape: Vec<usize>,
    pub meta: BitWidthMeta,
    /// `Some(b)`: the value is known to lie in `[0, 2^b)`, so its MSB is zero.
    pub msb_bound: Option<u32>,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Incremental construction of a graph in topological order.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    weights: Vec<GemmWeights>,
    layer: String,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Layer label for subsequently added nodes.
    pub fn layer(&mut self, label: &str) -> &mut Self {
        self.layer = label.to_string();
        self
    }

    pub fn push(&mut self, kind: NodeKind, inputs: Vec<usize>) -> usize {
        self.nodes.push(Node {
            kind,
            inputs,
            layer: self.layer.clone(),
            msb: false,
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, shape: Vec<usize>, meta: BitWidthMeta) -> usize {
        self.push(NodeKind::Input { shape, meta }, vec![])
    }

    pub fn requant(&mut self, x: usize, width: u32, scale_exp: i32) -> usize {
        self.push(NodeKind::Requant { width, scale_exp }, vec![x])
    }

    pub fn ext(&mut self, x: usize, to: u32) -> usize {
        self.push(NodeKind::Ext { to }, vec![x])
    }

    pub fn trunc(&mut self, x: usize, shift: u32) -> usize {
        self.push(NodeKind::Trunc { shift }, vec![x])
    }

    pub fn tr(&mut self, x: usize, shift: u32) -> usize {
        self.push(NodeKind::Tr { shift }, vec![x])
    }

    pub fn narrow(&mut self, x: usize, to: u32) -> usize {
        self.push(NodeKind::Narrow { to }, vec![x])
    }

    pub fn local(&mut self, x: usize, op: LocalOp) -> usize {
        self.push(NodeKind::Local { op }, vec![x])
    }

    pub fn add_weights(&mut self, w: GemmWeights) -> usize {
        self.weights.push(w);
        self.weights.len() - 1
    }

    pub fn gemm(&mut self, x: usize, weights: usize, value_bits: u32) -> usize {
        self.push(NodeKind::Gemm { weights, value_bits }, vec![x])
    }

    pub fn relu(&mut self, x: usize) -> usize {
        self.push(NodeKind::Relu, vec![x])
    }

    pub fn residual(&mut self, main: usize, res: usize, l_add: u32, e_add: i32, width: u32, scale_exp: i32) -> usize {
        self.push(
            NodeKind::ResidualBaseline {
                l_add,
                e_add,
                width,
                scale_exp,
            },
            vec![main, res],
        )
    }

    /// Terminate the graph and validate it.
    pub fn finish(mut self, out: usize) -> Result<ProtocolGraph> {
        self.push(NodeKind::Output, vec![out]);
        let g = ProtocolGraph {
            schema_version: GRAPH_SCHEMA_VERSION,
            nodes: self.nodes,
            weights: self.weights,
            msb_optimized: false,
        };
        g.analyze()?;
        Ok(g)
    }
}

fn conv_err(msg: String) -> Error {
    Error::InvalidGraph(msg)
}

impl ProtocolGraph {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            schema_version: u32,
        }
        let probe: Probe = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        if probe.schema_version != GRAPH_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: probe.schema_version,
                expected: GRAPH_SCHEMA_VERSION,
            });
        }
        let g: ProtocolGraph = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        g.analyze()?;
        Ok(g)
    }

    pub fn output_node(&self) -> Result<usize> {
        let outs: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].kind == NodeKind::Output)
            .collect();
        match outs.as_slice() {
            [o] => Ok(*o),
            _ => Err(Error::InvalidGraph(format!("{} output nodes", outs.len()))),
        }
    }

    pub fn input_node(&self) -> Result<usize> {
        let ins: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].kind, NodeKind::Input { .. }))
            .collect();
        match ins.as_slice() {
            [i] => Ok(*i),
            _ => Err(Error::InvalidGraph(format!("{} input nodes", ins.len()))),
        }
    }

    pub fn consumers(&self) -> Vec<usize> {
        let mut c = vec![0; self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                c[i] += 1;
            }
        }
        c
    }

    /// Number of nodes of each conversion kind, for reports.
    pub fn count_kind(&self, pred: impl Fn(&NodeKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.kind)).count()
    }

    /// Shape/format inference and structural validation.
    pub fn analyze(&self) -> Result<Vec<TensorInfo>> {
        let mut infos: Vec<TensorInfo> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                if i >= id {
                    return Err(conv_err(format!("node {id} reads node {i} which is not earlier")));
                }
                if self.nodes[i].kind == NodeKind::Output {
                    return Err(conv_err(format!("node {id} reads the output node")));
                }
            }
            let arity = match node.kind {
                NodeKind::Input { .. } => 0,
                NodeKind::ResidualBaseline { .. } | NodeKind::ResidualSimplified { .. } => 2,
                _ => 1,
            };
            if node.inputs.len() != arity {
                return Err(conv_err(format!("node {id} has {} inputs, wants {arity}", node.inputs.len())));
            }
            let info = infer(self, id, node, &infos).map_err(|e| match e {
                Error::InvalidGraph(m) => Error::InvalidGraph(format!("node {id} ({}): {m}", node.layer)),
                other => other,
            })?;
            infos.push(info);
        }
        self.output_node()?;
        self.input_node()?;
        Ok(infos)
    }
}

fn check_shift(width: u32, shift: u32) -> Result<()> {
    if shift == 0 || shift >= width {
        return Err(conv_err(format!("shift {shift} outside (0, {width})")));
    }
    Ok(())
}

/// Residual join geometry derived from the operand formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualShape {
    pub l_main: u32,
    pub e_main: i32,
    pub l_res: u32,
    pub e_res: i32,
}

fn residual_shape(main: &TensorInfo, res: &TensorInfo) -> Result<ResidualShape> {
    if main.shape != res.shape {
        return Err(conv_err(format!("residual shapes {:?} and {:?}", main.shape, res.shape)));
    }
    Ok(ResidualShape {
        l_main: main.meta.width,
        e_main: main.meta.scale_exp,
        l_res: res.meta.width,
        e_res: res.meta.scale_exp,
    })
}

fn infer(g: &ProtocolGraph, id: usize, node: &Node, infos: &[TensorInfo]) -> Result<TensorInfo> {
    let x = node.inputs.first().map(|&i| &infos[i]);
    let x = || x.ok_or_else(|| conv_err(format!("node {id} lacks an input")));
    let with = |x: &TensorInfo, width: u32, scale_exp: i32, bound: Option<u32>| TensorInfo {
        shape: x.shape.clone(),
        meta: BitWidthMeta {
            width,
            scale_exp,
            nonneg: x.meta.nonneg,
        },
        msb_bound: bound,
    };
    let narrow_bound = |b: Option<u32>, to: u32| b.filter(|&b| b < to);
    Ok(match &node.kind {
        NodeKind::Input { shape, meta } => {
            crate::ring::check_width(meta.width)?;
            TensorInfo {
                shape: shape.clone(),
                meta: *meta,
                msb_bound: meta.nonneg.then(|| meta.width - 1),
            }
        }
        NodeKind::Output => x()?.clone(),
        NodeKind::Requant { width, scale_exp } => {
            let x = x()?;
            crate::ring::check_width(*width)?;
            let shift = x.meta.scale_exp - scale_exp;
            if shift < 0 {
                return Err(conv_err(format!("requant to a finer scale ({shift})")));
            }
            let mut bound = x.msb_bound;
            if shift > 0 {
                check_shift(x.meta.width, shift as u32)?;
                bound = bound.map(|b| b.saturating_sub(shift as u32));
            }
            if *width < x.meta.width {
                bound = narrow_bound(bound, *width);
            }
            with(x, *width, *scale_exp, bound)
        }
        NodeKind::Ext { to } => {
            let x = x()?;
            crate::ring::check_width(*to)?;
            if *to <= x.meta.width {
                return Err(conv_err(format!("ext {} -> {to} does not widen", x.meta.width)));
            }
            with(x, *to, x.meta.scale_exp, x.msb_bound)
        }
        NodeKind::Trunc { shift } => {
            let x = x()?;
            check_shift(x.meta.width, *shift)?;
            let b = x.msb_bound.map(|b| b.saturating_sub(*shift));
            with(x, x.meta.width, x.meta.scale_exp - *shift as i32, b)
        }
        NodeKind::Tr { shift } => {
            let x = x()?;
            check_shift(x.meta.width, *shift)?;
            let b = x.msb_bound.map(|b| b.saturating_sub(*shift));
            with(x, x.meta.width - shift, x.meta.scale_exp - *shift as i32, b)
        }
        NodeKind::Narrow { to } => {
            let x = x()?;
            crate::ring::check_width(*to)?;
            if *to > x.meta.width {
                return Err(conv_err(format!("narrow {} -> {to} widens", x.meta.width)));
            }
            with(x, *to, x.meta.scale_exp, narrow_bound(x.msb_bound, *to))
        }
        NodeKind::Local { op } => {
            let x = x()?;
            let shape = op.out_shape(&x.shape)?;
            let keep = op.keeps_nonneg();
            TensorInfo {
                shape,
                meta: x.meta.with_nonneg(keep && x.meta.nonneg),
                msb_bound: if keep { x.msb_bound } else { None },
            }
        }
        NodeKind::Gemm { weights, value_bits } => {
            let x = x()?;
            let w = g
                .weights
                .get(*weights)
                .ok_or_else(|| conv_err(format!("weights #{weights} missing")))?;
            let (p, l, n) = match x.shape.as_slice() {
                [p, l, n] => (*p, *l, *n),
                s => return Err(conv_err(format!("GEMM input {s:?} is not [P, L, N]"))),
            };
            if w.planes.len() != p {
                return Err(conv_err(format!("{p} slices against {} matrices", w.planes.len())));
            }
            let k = w.planes.first().map_or(0, |m| m.rows);
            for m in &w.planes {
                if m.cols != l || m.rows != k {
                    return Err(conv_err(format!("weights {}x{} against L={l}", m.rows, m.cols)));
                }
                let need = m.required_acc(*value_bits);
                if x.meta.width < need {
                    return Err(Error::AccumulatorOverflow {
                        have: x.meta.width,
                        need,
                    });
                }
            }
            TensorInfo {
                shape: vec![p, k, n],
                meta: BitWidthMeta {
                    width: x.meta.width,
                    scale_exp: x.meta.scale_exp + w.scale_exp,
                    nonneg: false,
                },
                msb_bound: None,
            }
        }
        NodeKind::Relu => {
            let x = x()?;
            TensorInfo {
                shape: x.shape.clone(),
                meta: x.meta.with_nonneg(true),
                msb_bound: Some(x.meta.width - 1),
            }
        }
        NodeKind::ResidualBaseline {
            l_add,
            e_add,
            width,
            scale_exp,
        } => {
            let (main, res) = (&infos[node.inputs[0]], &infos[node.inputs[1]]);
            let r = residual_shape(main, res)?;
            let a = r.e_main - e_add;
            let b = e_add - r.e_res;
            let c = e_add - scale_exp;
            if a < 0 || b < 0 || c < 0 {
                return Err(conv_err(format!(
                    "scales main {} / residual {} / adder {e_add} / out {scale_exp} are not ordered",
                    r.e_main, r.e_res
                )));
            }
            if a > 0 {
                check_shift(r.l_main, a as u32)?;
            }
            if c > 0 {
                check_shift(*l_add, c as u32)?;
            }
            if *l_add > r.l_main || *l_add < r.l_res || *width < *l_add {
                return Err(conv_err(format!(
                    "adder width {l_add} against main {} / residual {} / out {width}",
                    r.l_main, r.l_res
                )));
            }
            TensorInfo {
                shape: main.shape.clone(),
                meta: BitWidthMeta {
                    width: *width,
                    scale_exp: *scale_exp,
                    nonneg: false,
                },
                msb_bound: None,
            }
        }
        NodeKind::ResidualSimplified { scale_exp } => {
            let (main, res) = (&infos[node.inputs[0]], &infos[node.inputs[1]]);
            let r = residual_shape(main, res)?;
            let k = r.e_main - scale_exp;
            if k < 0 || *scale_exp < r.e_res {
                return Err(conv_err(format!(
                    "scales main {} / residual {} / out {scale_exp} are not ordered",
                    r.e_main, r.e_res
                )));
            }
            if k > 0 {
                check_shift(r.l_main, k as u32)?;
            }
            if r.l_res > r.l_main {
                return Err(conv_err(format!("residual {} wider than main {}", r.l_res, r.l_main)));
            }
            TensorInfo {
                shape: main.shape.clone(),
                meta: BitWidthMeta {
                    width: r.l_main,
                    scale_exp: *scale_exp,
                    nonneg: false,
                },
                msb_bound: None,
            }
        }
    })
}

/// One formula-predicted charge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Charge {
    pub tag: &'static str,
    pub phase: Phase,
    pub bits: u64,
    pub rounds: u64,
}

fn conv_charge(tag: &'static str, per_elem: u64, n: usize, rounds: u64) -> Charge {
    Charge {
        tag,
        phase: Phase::Online,
        bits: per_elem * n as u64,
        rounds: if n > 0 { rounds } else { 0 },
    }
}

fn ext_charge(c: &CostModel, l1: u32, l2: u32, msb: bool, n: usize) -> Charge {
    conv_charge(TAG_EXT, cost::ext(c, l1, l2, msb), n, cost::ext_rounds(l1))
}

fn trunc_charge(c: &CostModel, l1: u32, k: u32, msb: bool, n: usize) -> Charge {
    conv_charge(TAG_TRUNC, cost::trunc(c, l1, k, msb), n, cost::trunc_rounds(l1))
}

impl ProtocolGraph {
    /// Charges the executor will record for node `id`, derived from formats alone.
    pub fn node_charges(&self, id: usize, infos: &[TensorInfo], c: &CostModel) -> Vec<Charge> {
        let node = &self.nodes[id];
        let msb = node.msb;
        let x = node.inputs.first().map(|&i| &infos[i]);
        let mut out = Vec::new();
        match &node.kind {
            NodeKind::Input { .. } | NodeKind::Output | NodeKind::Narrow { .. } | NodeKind::Local { .. } => {}
            NodeKind::Requant { width, scale_exp } => {
                let x = x.expect("validated");
                let shift = (x.meta.scale_exp - scale_exp) as u32;
                if shift > 0 {
                    out.push(trunc_charge(c, x.meta.width, shift, msb, x.len()));
                }
                if *width > x.meta.width {
                    out.push(ext_charge(c, x.meta.width, *width, msb, x.len()));
                }
            }
            NodeKind::Ext { to } => {
                let x = x.expect("validated");
                out.push(ext_charge(c, x.meta.width, *to, msb, x.len()));
            }
            NodeKind::Trunc { shift } => {
                let x = x.expect("validated");
                out.push(trunc_charge(c, x.meta.width, *shift, msb, x.len()));
            }
            NodeKind::Tr { shift } => {
                let x = x.expect("validated");
                out.push(conv_charge(
                    TAG_TR,
                    cost::tr(c, x.meta.width, *shift, msb),
                    x.len(),
                    cost::tr_rounds(*shift),
                ));
            }
            NodeKind::Relu => {
                let x = x.expect("validated");
                out.push(conv_charge(TAG_RELU, cost::relu(c, x.meta.width), x.len(), cost::relu_rounds(x.meta.width)));
            }
            NodeKind::Gemm { weights, .. } => {
                let x = x.expect("validated");
                let (l, n) = (x.shape[1], x.shape[2]);
                for w in &self.weights[*weights].planes {
                    let active = w.rows * l * n > 0;
                    out.push(Charge {
                        tag: TAG_GEMM,
                        phase: Phase::Offline,
                        bits: cost::gemm_offline(c, w.rows, l, n, w.l_w(), x.meta.width),
                        rounds: if active { cost::OT_OFFLINE_ROUNDS } else { 0 },
                    });
                    out.push(Charge {
                        tag: TAG_GEMM,
                        phase: Phase::Online,
                        bits: cost::gemm_online(w.rows, n, x.meta.width),
                        rounds: if active { cost::GEMM_ONLINE_ROUNDS } else { 0 },
                    });
                }
            }
            NodeKind::ResidualBaseline {
                l_add,
                e_add,
                width,
                scale_exp,
            } => {
                let (main, res) = (&infos[node.inputs[0]], &infos[node.inputs[1]]);
                let n = main.len();
                let a = (main.meta.scale_exp - e_add) as u32;
                let cshift = (e_add - scale_exp) as u32;
                if a > 0 {
                    out.push(trunc_charge(c, main.meta.width, a, false, n));
                }
                if *l_add > res.meta.width {
                    out.push(ext_charge(c, res.meta.width, *l_add, msb, n));
                }
                if cshift > 0 {
                    out.push(trunc_charge(c, *l_add, cshift, false, n));
                }
                if width > l_add {
                    out.push(ext_charge(c, *l_add, *width, false, n));
                }
            }
            NodeKind::ResidualSimplified { scale_exp } => {
                let (main, res) = (&infos[node.inputs[0]], &infos[node.inputs[1]]);
                let n = main.len();
                let k = (main.meta.scale_exp - scale_exp) as u32;
                if k > 0 {
                    out.push(trunc_charge(c, main.meta.width, k, false, n));
                }
                if main.meta.width > res.meta.width {
                    out.push(ext_charge(c, res.meta.width, main.meta.width, msb, n));
                }
            }
        }
        out
    }

    /// The meter an execution would produce, computed from formats alone.
    pub fn predict(&self, c: &CostModel) -> Result<CommMeter> {
        let infos = self.analyze()?;
        let mut m = CommMeter::new();
        for id in 0..self.nodes.len() {
            let layer = &self.nodes[id].layer;
            for ch in self.node_charges(id, &infos, c) {
                m.add_bits(layer, ch.tag, ch.phase, ch.bits);
                m.add_rounds(layer, ch.tag, ch.phase, ch.rounds);
            }
        }
        Ok(m)
    }

    pub fn predicted_bits(&self, c: &CostModel) -> Result<u64> {
        Ok(self.predict(c)?.total_bits())
    }

    /// Execute over shares. The input is shared by the client; the output is
    /// reconstructed.
    pub fn run(&self, session: &mut Session, input: &PlainTensor) -> Result<PlainTensor> {
        let infos = self.analyze()?;
        let in_id = self.input_node()?;
        let want = &infos[in_id];
        if input.shape != want.shape || input.meta.width != want.meta.width || input.meta.scale_exp != want.meta.scale_exp {
            return Err(Error::MetaMismatch(format!(
                "input {:?} at {:?} against {:?} at {:?}",
                input.shape, input.meta, want.shape, want.meta
            )));
        }
        let mut input = input.clone();
        input.meta.nonneg = want.meta.nonneg;
        let mut vals: Vec<Option<Shared>> = vec![None; self.nodes.len()];
        let consumers = self.consumers();
        let mut remaining = consumers.clone();
        let mut result = None;
        for (id, node) in self.nodes.iter().enumerate() {
            session.set_scope(&node.layer);
            let get = |vals: &[Option<Shared>], k: usize| -> Result<Shared> {
                vals[node.inputs[k]]
                    .clone()
                    .ok_or_else(|| Error::Invariant(format!("node {id} input not computed")))
            };
            let y = match &node.kind {
                NodeKind::Input { .. } => Shared::from_plain(&input, session.rng(Party::Client))?,
                NodeKind::Output => {
                    result = Some(get(&vals, 0)?.reconstruct()?);
                    continue;
                }
                NodeKind::Requant { width, scale_exp } => {
                    let x = get(&vals, 0)?;
                    let to = BitWidthMeta::new(*width, *scale_exp)?;
                    linproto::requant(session, &x, to, node.msb)?
                }
                NodeKind::Ext { to } => linproto::ext(session, &get(&vals, 0)?, *to, node.msb)?,
                NodeKind::Trunc { shift } => linproto::trunc(session, &get(&vals, 0)?, *shift, node.msb)?,
                NodeKind::Tr { shift } => linproto::truncate_reduce(session, &get(&vals, 0)?, *shift, node.msb)?,
                NodeKind::Narrow { to } => linproto::narrow(&get(&vals, 0)?, *to)?,
                NodeKind::Local { op } => op.apply(&get(&vals, 0)?)?,
                NodeKind::Gemm { weights, value_bits } => {
                    let w = &self.weights[*weights];
                    winograd::batched_gemm(session, &w.planes, w.scale_exp, &get(&vals, 0)?, *value_bits)?
                }
                NodeKind::Relu => linproto::relu(session, &get(&vals, 0)?)?,
                NodeKind::ResidualBaseline {
                    l_add,
                    e_add,
                    width,
                    scale_exp,
                } => {
                    let (main, res) = (get(&vals, 0)?, get(&vals, 1)?);
                    let a = (main.meta().scale_exp - e_add) as u32;
                    let mut m = if a > 0 {
                        linproto::trunc(session, &main, a, false)?
                    } else {
                        main
                    };
                    m = linproto::narrow(&m, *l_add)?;
                    let r = align_residual(session, &res, *l_add, *e_add, node.msb)?;
                    let mut sum = add_shared(&m, &r, *e_add)?;
                    let cshift = (e_add - scale_exp) as u32;
                    if cshift > 0 {
                        sum = linproto::trunc(session, &sum, cshift, false)?;
                    }
                    if width > l_add {
                        sum = linproto::ext(session, &sum, *width, false)?;
                    }
                    sum
                }
                NodeKind::ResidualSimplified { scale_exp } => {
                    let (main, res) = (get(&vals, 0)?, get(&vals, 1)?);
                    let k = (main.meta().scale_exp - scale_exp) as u32;
                    let m = if k > 0 {
                        linproto::trunc(session, &main, k, false)?
                    } else {
                        main
                    };
                    let r = align_residual(session, &res, m.meta().width, *scale_exp, node.msb)?;
                    add_shared(&m, &r, *scale_exp)?
                }
            };
            let want = &infos[id];
            let got = y.meta();
            if y.shape() != want.shape.as_slice() || got.width != want.meta.width || got.scale_exp != want.meta.scale_exp {
                return Err(Error::Invariant(format!(
                    "node {id} produced {:?} at {got:?}, analysis says {:?} at {:?}",
                    y.shape(),
                    want.shape,
                    want.meta
                )));
            }
            vals[id] = Some(y);
            for &i in &node.inputs {
                remaining[i] -= 1;
                if remaining[i] == 0 {
                    vals[i] = None;
                }
            }
        }
        result.ok_or_else(|| Error::InvalidGraph("no output node".into()))
    }

    /// Run on a fresh metered session.
    pub fn run_metered(&self, input: &PlainTensor, c: CostModel, seed: u64) -> Result<(PlainTensor, CommMeter)> {
        let mut s = Session::new(c, seed);
        let y = self.run(&mut s, input)?;
        Ok((y, s.take_meter()))
    }
}

/// Residual operand brought to `width` bits at scale `scale_exp` (never coarser).
fn align_residual(session: &mut Session, res: &Shared, width: u32, scale_exp: i32, msb: bool) -> Result<Shared> {
    let mut r = if width > res.meta().width {
        linproto::ext(session, res, width, msb)?
    } else {
        res.clone()
    };
    let up = (scale_exp - r.meta().scale_exp) as u32;
    let mut meta = r.meta();
    meta.scale_exp = scale_exp;
    r = r.map_local(|s| {
        let mut s = s.clone();
        s.scale_public(1i128 << up);
        Ok(s)
    })?;
    r.set_meta(meta);
    Ok(r)
}

fn add_shared(a: &Shared, b: &Shared, scale_exp: i32) -> Result<Shared> {
    let meta = BitWidthMeta {
        width: a.meta().width,
        scale_exp,
        nonneg: false,
    };
    let mut server = crate::ring::local_lincomb(&[&a.server, &b.server], &[1, 1])?;
    let mut client = crate::ring::local_lincomb(&[&a.client, &b.client], &[1, 1])?;
    server.meta = meta;
    client.meta = meta;
    Ok(Shared { server, client })
}

/// Outcome of one pass over a graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassReport {
    pub pass: String,
    pub rewrites: usize,
    pub bits_before: u64,
    pub bits_after: u64,
    pub notes: Vec<String>,
}

/// Which passes the pipeline runs, in the fixed order decompose,
/// fuse_ext_ext, fuse_trunc_ext, simplify_residual, msb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PassConfig {
    pub decompose: bool,
    pub fuse_ext_ext: bool,
    pub fuse_trunc_ext: bool,
    pub simplify_residual: bool,
    pub msb: bool,
}

impl PassConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            decompose: true,
            fuse_ext_ext: true,
            fuse_trunc_ext: true,
            simplify_residual: true,
            msb: true,
        }
    }

    pub fn fusion() -> Self {
        Self {
            decompose: true,
            fuse_ext_ext: true,
            fuse_trunc_ext: true,
            ..Self::default()
        }
    }
}

enum Action {
    Keep,
    /// Replace by a chain of unary nodes; an empty chain forwards the input.
    Chain(Vec<NodeKind>),
}

struct PassOutcome {
    rewrites: usize,
    notes: Vec<String>,
}

impl PassOutcome {
    fn count(rewrites: usize) -> Self {
        Self { rewrites, notes: vec![] }
    }
}

impl ProtocolGraph {
    /// Rebuild with per-node actions decided from the current analysis.
    fn rewrite_nodes(&mut self, mut f: impl FnMut(usize, &Node, &[TensorInfo], &[usize]) -> Action) -> Result<usize> {
        let infos = self.analyze()?;
        let consumers = self.consumers();
        let mut map = vec![0usize; self.nodes.len()];
        let mut out: Vec<Node> = Vec::with_capacity(self.nodes.len());
        let mut count = 0;
        for (id, node) in self.nodes.iter().enumerate() {
            let inputs: Vec<usize> = node.inputs.iter().map(|&i| map[i]).collect();
            match f(id, node, &infos, &consumers) {
                Action::Keep => {
                    out.push(Node {
                        inputs,
                        ..node.clone()
                    });
                    map[id] = out.len() - 1;
                }
                Action::Chain(kinds) => {
                    count += 1;
                    let mut cur = inputs[0];
                    for kind in kinds {
                        out.push(Node {
                            kind,
                            inputs: vec![cur],
                            layer: node.layer.clone(),
                            msb: node.msb,
                        });
                        cur = out.len() - 1;
                    }
                    map[id] = cur;
                }
            }
        }
        self.nodes = out;
        self.refresh()?;
        Ok(count)
    }

    /// Drop nodes marked in `removed`, sending their consumers to the given node.
    fn compact(&mut self, removed: &[Option<usize>]) -> Result<()> {
        let resolve = |mut i: usize| {
            while let Some(j) = removed[i] {
                i = j;
            }
            i
        };
        let mut map = vec![usize::MAX; self.nodes.len()];
        let mut out = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            if removed[id].is_some() {
                continue;
            }
            let inputs = node.inputs.iter().map(|&i| map[resolve(i)]).collect();
            out.push(Node {
                inputs,
                ..node.clone()
            });
            map[id] = out.len() - 1;
        }
        self.nodes = out;
        self.refresh()
    }

    /// Recompute MSB flags from the analysis and revalidate.
    fn refresh(&mut self) -> Result<()> {
        let infos = self.analyze()?;
        for node in &mut self.nodes {
            let src = match node.kind {
                NodeKind::Requant { .. } | NodeKind::Ext { .. } | NodeKind::Trunc { .. } | NodeKind::Tr { .. } => {
                    Some(node.inputs[0])
                }
                NodeKind::ResidualBaseline { .. } | NodeKind::ResidualSimplified { .. } => Some(node.inputs[1]),
                _ => None,
            };
            node.msb = self.msb_optimized && src.is_some_and(|i| infos[i].msb_bound.is_some());
        }
        Ok(())
    }

    fn lower_requants(&mut self) -> Result<usize> {
        self.rewrite_nodes(|_, node, infos, _| match node.kind {
            NodeKind::Requant { width, scale_exp } => {
                let x = &infos[node.inputs[0]].meta;
                let mut chain = vec![];
                let shift = x.scale_exp - scale_exp;
                if shift > 0 {
                    chain.push(NodeKind::Trunc { shift: shift as u32 });
                }
                if width > x.width {
                    chain.push(NodeKind::Ext { to: width });
                } else if width < x.width {
                    chain.push(NodeKind::Narrow { to: width });
                }
                Action::Chain(chain)
            }
            _ => Action::Keep,
        })
    }

    /// Trunc(l, k) becomes TR(l, k) followed by Ext(l−k, l).
    fn pass_decompose(&mut self) -> Result<PassOutcome> {
        self.lower_requants()?;
        let n = self.rewrite_nodes(|_, node, infos, _| match node.kind {
            NodeKind::Trunc { shift } => Action::Chain(vec![
                NodeKind::Tr { shift },
                NodeKind::Ext {
                    to: infos[node.inputs[0]].meta.width,
                },
            ]),
            _ => Action::Keep,
        })?;
        Ok(PassOutcome::count(n))
    }

    /// Trunc whose only consumer is an Ext becomes TR.
    fn pass_fuse_trunc_ext(&mut self) -> Result<PassOutcome> {
        self.lower_requants()?;
        let mut only_ext = vec![false; self.nodes.len()];
        let consumers = self.consumers();
        for node in &self.nodes {
            if let NodeKind::Ext { .. } = node.kind {
                let p = node.inputs[0];
                only_ext[p] = consumers[p] == 1;
            }
        }
        let n = self.rewrite_nodes(|id, node, _, _| match node.kind {
            NodeKind::Trunc { shift } if only_ext[id] => Action::Chain(vec![NodeKind::Tr { shift }]),
            _ => Action::Keep,
        })?;
        Ok(PassOutcome::count(n))
    }

    /// Merge Ext chains, fold Ext/Narrow pairs, drop identity narrows and hoist
    /// an Ext pair across a local transform when the pre-transform side is smaller.
    fn pass_fuse_ext_ext(&mut self) -> Result<PassOutcome> {
        self.lower_requants()?;
        let mut total = 0;
        loop {
            let infos = self.analyze()?;
            let consumers = self.consumers();
            let mut removed: Vec<Option<usize>> = vec![None; self.nodes.len()];
            let mut touched = vec![false; self.nodes.len()];
            let mut n = 0;
            for x in 0..self.nodes.len() {
                if touched[x] || self.nodes[x].inputs.is_empty() {
                    continue;
                }
                let p = self.nodes[x].inputs[0];
                if touched[p] {
                    continue;
                }
                let single = consumers[p] == 1;
                let p_kind = self.nodes[p].kind.clone();
                match (self.nodes[x].kind.clone(), p_kind) {
                    (NodeKind::Narrow { to }, _) if to == infos[p].meta.width => {
                        removed[x] = Some(p);
                    }
                    (NodeKind::Ext { .. }, NodeKind::Ext { .. }) if single => {
                        let src = self.nodes[p].inputs[0];
                        self.nodes[x].inputs = vec![src];
                        removed[p] = Some(src);
                        touched[p] = true;
                    }
                    (NodeKind::Narrow { to }, NodeKind::Ext { .. }) if single => {
                        let src = self.nodes[p].inputs[0];
                        let a = infos[src].meta.width;
                        removed[p] = Some(src);
                        touched[p] = true;
                        if to == a {
                            removed[x] = Some(src);
                        } else {
                            self.nodes[x].inputs = vec![src];
                            if to > a {
                                self.nodes[x].kind = NodeKind::Ext { to };
                            }
                        }
                    }
                    (NodeKind::Ext { to }, NodeKind::Local { .. }) if single => {
                        let q = self.nodes[p].inputs[0];
                        if touched[q] || consumers[q] != 1 || !matches!(self.nodes[q].kind, NodeKind::Ext { .. }) {
                            continue;
                        }
                        if infos[q].len() > infos[p].len() {
                            continue;
                        }
                        self.nodes[q].kind = NodeKind::Ext { to };
                        removed[x] = Some(p);
                        touched[q] = true;
                        touched[p] = true;
                    }
                    _ => continue,
                }
                touched[x] = true;
                n += 1;
            }
            if n == 0 {
                break;
            }
            total += n;
            self.compact(&removed)?;
        }
        Ok(PassOutcome::count(total))
    }

    /// Replace baseline residual joins whose operands provably fit.
    fn pass_simplify_residual(&mut self) -> Result<PassOutcome> {
        let infos = self.analyze()?;
        let mut notes = vec![];
        let mut n = 0;
        for id in 0..self.nodes.len() {
            let NodeKind::ResidualBaseline {
                l_add,
                e_add,
                scale_exp,
                ..
            } = self.nodes[id].kind
            else {
                continue;
            };
            let (main, res) = (&infos[self.nodes[id].inputs[0]], &infos[self.nodes[id].inputs[1]]);
            match simplify_check(main, res, l_add, e_add, scale_exp) {
                Ok(()) => {
                    self.nodes[id].kind = NodeKind::ResidualSimplified { scale_exp };
                    n += 1;
                }
                Err(why) => notes.push(format!("{}: kept baseline join ({why})", self.nodes[id].layer)),
            }
        }
        self.refresh()?;
        Ok(PassOutcome { rewrites: n, notes })
    }

    fn pass_msb(&mut self) -> Result<PassOutcome> {
        self.msb_optimized = true;
        let before: Vec<bool> = self.nodes.iter().map(|n| n.msb).collect();
        self.refresh()?;
        let n = self.nodes.iter().zip(&before).filter(|(n, &b)| n.msb && !b).count();
        Ok(PassOutcome::count(n))
    }
}

/// Static conditions under which the simplified join reproduces the baseline
/// exactly: no intermediate of either variant can wrap.
pub fn simplify_check(main: &TensorInfo, res: &TensorInfo, l_add: u32, e_add: i32, e_out: i32) -> std::result::Result<(), String> {
    let (l_main, e_main) = (main.meta.width as i64, main.meta.scale_exp as i64);
    let l_res = res.meta.width as i64 + i64::from(res.meta.nonneg);
    let e_res = res.meta.scale_exp as i64;
    let (l_add, e_add, e_out) = (l_add as i64, e_add as i64, e_out as i64);
    if e_out < e_res {
        return Err(format!("output scale {e_out} is coarser than the residual scale {e_res}"));
    }
    if res.meta.width as i64 > l_main {
        return Err(format!("residual width {} exceeds main width {l_main}", res.meta.width));
    }
    let a = e_main - e_add;
    let b = e_add - e_res;
    if (l_main - a).max(l_res + b) > l_add - 1 {
        return Err(format!("baseline adder width {l_add} can wrap"));
    }
    let k = e_main - e_out;
    if (l_main - k).max(l_res + e_out - e_res) > l_main - 1 {
        return Err(format!("main width {l_main} cannot absorb the residual range"));
    }
    Ok(())
}

/// Run the enabled passes in pipeline order and report each one.
pub fn optimize(graph: &ProtocolGraph, passes: PassConfig, c: &CostModel) -> Result<(ProtocolGraph, Vec<PassReport>)> {
    let mut g = graph.clone();
    g.refresh()?;
    let mut reports = vec![];
    type PassFn = fn(&mut ProtocolGraph) -> Result<PassOutcome>;
    let plan: [(&str, bool, PassFn); 5] = [
        ("decompose", passes.decompose, ProtocolGraph::pass_decompose),
        ("fuse_ext_ext", passes.fuse_ext_ext, ProtocolGraph::pass_fuse_ext_ext),
        ("fuse_trunc_ext", passes.fuse_trunc_ext, ProtocolGraph::pass_fuse_trunc_ext),
        ("simplify_residual", passes.simplify_residual, ProtocolGraph::pass_simplify_residual),
        ("msb", passes.msb, ProtocolGraph::pass_msb),
    ];
    for (name, enabled, f) in plan {
        if !enabled {
            continue;
        }
        let bits_before = g.predicted_bits(c)?;
        let o = f(&mut g)?;
        reports.push(PassReport {
            pass: name.to_string(),
            rewrites: o.rewrites,
            bits_before,
            bits_after: g.predicted_bits(c)?,
            notes: o.notes,
        });
    }
    Ok((g, reports))
}
