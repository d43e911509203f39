//! Exact multiply-add and parameter accounting.
//!
//! Counting conventions:
//!
//! * Conv: every output element costs `in_channels / groups * k_h * k_w`
//!   multiply-adds, padded taps included; a bias adds one per output element.
//! * TransposedConv: every input element is scattered through the whole
//!   kernel, i.e. `in_h * in_w * k_h * k_w * in_channels/groups * out_channels`,
//!   plus the bias term per output element.
//! * BatchNorm (when counted): one fused multiply-add per element and two
//!   parameters (scale, shift) per channel.
//! * Everything else is free.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{self, Exact};
use crate::graph_ir::{Graph, NodeSpec, TensorShape};
use crate::shape_infer::{self, ShapeError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CostError {
    #[error("shapes inconsistent with {kind}: {detail}")]
    ShapeInconsistent { kind: &'static str, detail: String },
    #[error("count overflows 64 bits")]
    Overflow,
    #[error("division by zero: the compared network has no multiply-adds")]
    DivisionByZero,
    #[error("base network has no multiply-adds")]
    ZeroBase,
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostOptions {
    pub count_batchnorm: bool,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self { count_batchnorm: true }
    }
}

fn product(factors: &[u64]) -> Result<u64, CostError> {
    factors.iter().try_fold(1u64, |acc, &f| acc.checked_mul(f).ok_or(CostError::Overflow))
}

fn single(kind: &'static str, shapes: &[TensorShape]) -> Result<TensorShape, CostError> {
    match shapes {
        [one] => Ok(*one),
        _ => Err(CostError::ShapeInconsistent { kind, detail: format!("expected 1 shape, got {}", shapes.len()) }),
    }
}

fn check_outputs(spec: &NodeSpec, inputs: &[TensorShape], outputs: &[TensorShape]) -> Result<(), CostError> {
    let expected = shape_infer::node_output_shape(spec, inputs)
        .map_err(|e| CostError::ShapeInconsistent { kind: spec.kind_name(), detail: e.to_string() })?;
    if expected != outputs {
        return Err(CostError::ShapeInconsistent {
            kind: spec.kind_name(),
            detail: format!("outputs {outputs:?} do not follow from inputs {inputs:?}"),
        });
    }
    Ok(())
}

/// Multiply-adds of one node. `output_shapes` must be what shape inference
/// yields for `input_shapes`.
pub fn node_madds(
    spec: &NodeSpec,
    input_shapes: &[TensorShape],
    output_shapes: &[TensorShape],
    opts: CostOptions,
) -> Result<u64, CostError> {
    check_outputs(spec, input_shapes, output_shapes)?;
    match spec {
        NodeSpec::Conv(c) => {
            let x = single("Conv", input_shapes)?;
            let y = single("Conv", output_shapes)?;
            let per_output = (x.channels() / c.groups) as u64 * c.kernel_h as u64 * c.kernel_w as u64;
            let mut total = product(&[y.elements(), per_output])?;
            if c.has_bias {
                total = total.checked_add(y.elements()).ok_or(CostError::Overflow)?;
            }
            Ok(total)
        }
        NodeSpec::TransposedConv(c) => {
            let x = single("TransposedConv", input_shapes)?;
            let y = single("TransposedConv", output_shapes)?;
            let per_input = (c.out_channels / c.groups) as u64 * c.kernel_h as u64 * c.kernel_w as u64;
            let mut total = product(&[x.elements(), per_input])?;
            if c.has_bias {
                total = total.checked_add(y.elements()).ok_or(CostError::Overflow)?;
            }
            Ok(total)
        }
        NodeSpec::BatchNorm {} if opts.count_batchnorm => Ok(single("BatchNorm", output_shapes)?.elements()),
        _ => Ok(0),
    }
}

/// Learnable parameters of one node.
pub fn node_params(spec: &NodeSpec, input_shapes: &[TensorShape], opts: CostOptions) -> Result<u64, CostError> {
    match spec {
        NodeSpec::Conv(c) => {
            let x = single("Conv", input_shapes)?;
            if x.channels() % c.groups != 0 {
                return Err(CostError::ShapeInconsistent {
                    kind: "Conv",
                    detail: format!("{} channels not divisible by {} groups", x.channels(), c.groups),
                });
            }
            let w = product(&[
                c.out_channels as u64,
                (x.channels() / c.groups) as u64,
                c.kernel_h as u64,
                c.kernel_w as u64,
            ])?;
            Ok(w + if c.has_bias { c.out_channels as u64 } else { 0 })
        }
        NodeSpec::TransposedConv(c) => {
            let x = single("TransposedConv", input_shapes)?;
            if c.out_channels % c.groups != 0 {
                return Err(CostError::ShapeInconsistent {
                    kind: "TransposedConv",
                    detail: format!("{} output channels not divisible by {} groups", c.out_channels, c.groups),
                });
            }
            let w = product(&[
                x.channels() as u64,
                (c.out_channels / c.groups) as u64,
                c.kernel_h as u64,
                c.kernel_w as u64,
            ])?;
            Ok(w + if c.has_bias { c.out_channels as u64 } else { 0 })
        }
        NodeSpec::BatchNorm {} if opts.count_batchnorm => Ok(2 * single("BatchNorm", input_shapes)?.channels() as u64),
        _ => Ok(0),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCost {
    pub name: String,
    pub kind: String,
    pub output: String,
    pub madds: u64,
    pub params: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub madds: u64,
    pub params: u64,
}

const CSV_HEADER: [&str; 4] = ["name", "kind", "madds", "params"];

/// Per-node costs in topological order, per-stage subtotals keyed by the
/// first component of each node name, and whole-graph totals.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_node: Vec<NodeCost>,
    pub per_stage: BTreeMap<String, StageCost>,
    pub total_madds: u64,
    pub total_params: u64,
}

impl CostReport {
    pub fn stage(&self, name: &str) -> StageCost {
        self.per_stage.get(name).copied().unwrap_or_default()
    }

    /// Stage subtotals in order of first appearance in `per_node`.
    pub fn stages_in_order(&self) -> Vec<(&str, StageCost)> {
        let mut out: Vec<(&str, StageCost)> = Vec::new();
        for n in &self.per_node {
            let stage = crate::graph_ir::stage_of(&n.name);
            if !out.iter().any(|(s, _)| *s == stage) {
                out.push((stage, self.stage(stage)));
            }
        }
        out
    }

    /// Total multiply-adds in units of 10^9, exact.
    pub fn gmadds(&self) -> Exact {
        exact::from_u64(self.total_madds) / exact::from_u64(1_000_000_000)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost reports always serialize")
    }

    /// `name,kind,madds,params` rows in topological order.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for n in &self.per_node {
            w.write_record([n.name.as_str(), n.kind.as_str(), &n.madds.to_string(), &n.params.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    /// Rebuilds `per_node` rows from [`CostReport::to_csv`] output and
    /// recomputes the aggregates.
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers().map_err(|e| e.to_string())?;
        if headers.iter().ne(CSV_HEADER) {
            return Err(format!("expected header {}", CSV_HEADER.join(",")));
        }
        let mut report = CostReport::default();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| e.to_string())?;
            let line = i + 2;
            let field = |k: usize| rec.get(k).ok_or_else(|| format!("line {line}: expected 4 columns"));
            let madds = field(2)?.parse().map_err(|e| format!("line {line}: {e}"))?;
            let params = field(3)?.parse().map_err(|e| format!("line {line}: {e}"))?;
            report.push(NodeCost {
                name: field(0)?.into(),
                kind: field(1)?.into(),
                output: String::new(),
                madds,
                params,
            });
        }
        Ok(report)
    }

    fn push(&mut self, cost: NodeCost) {
        let stage = self.per_stage.entry(crate::graph_ir::stage_of(&cost.name).to_string()).or_default();
        stage.madds += cost.madds;
        stage.params += cost.params;
        self.total_madds += cost.madds;
        self.total_params += cost.params;
        self.per_node.push(cost);
    }
}

/// Costs every node of `graph`. Integer-exact and deterministic.
pub fn graph_cost(graph: &Graph, opts: CostOptions) -> Result<CostReport, CostError> {
    let shapes = shape_infer::infer_partial(graph)?;
    let order = graph.topo_order().map_err(ShapeError::from)?;
    let table = graph.input_table();
    let mut report = CostReport::default();
    for id in order {
        let node = graph.node(id).expect("topo order yields existing nodes");
        let inputs: Vec<TensorShape> = table[id.0].iter().map(|p| shapes.get(*p).expect("inferred")).collect();
        let outputs = shapes.outputs(id);
        let madds = node_madds(&node.spec, &inputs, &outputs, opts)?;
        let params = node_params(&node.spec, &inputs, opts)?;
        let output = outputs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("+");
        report.push(NodeCost {
            name: node.name.clone(),
            kind: node.spec.kind_name().to_string(),
            output,
            madds,
            params,
        });
    }
    Ok(report)
}

/// `base.total_madds / other.total_madds` as an exact ratio.
pub fn speedup_vs_base(base: &CostReport, other: &CostReport) -> Result<Exact, CostError> {
    if base.total_madds == 0 {
        return Err(CostError::ZeroBase);
    }
    if other.total_madds == 0 {
        return Err(CostError::DivisionByZero);
    }
    Ok(exact::from_u64(base.total_madds) / exact::from_u64(other.total_madds))
}
