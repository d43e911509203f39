//! Typed DAG of 2D convolutional layer operations.
//!
//! Nodes are appended in insertion order and may only consume outputs of
//! nodes that already exist, so any graph built through [`Graph::add_node`] is
//! acyclic by construction. [`Graph::inject_edge`] bypasses every check and
//! exists for loading foreign documents and for exercising [`Graph::validate`].

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt;

use num_rational::Ratio;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Channels × height × width of one feature map. The batch dimension is
/// implicitly 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawShape")]
pub struct TensorShape {
    channels: usize,
    height: usize,
    width: usize,
}

#[derive(Deserialize)]
struct RawShape {
    channels: usize,
    height: usize,
    width: usize,
}

impl TryFrom<RawShape> for TensorShape {
    type Error = GraphError;

    fn try_from(raw: RawShape) -> Result<Self, Self::Error> {
        TensorShape::new(raw.channels, raw.height, raw.width)
    }
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self, GraphError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(GraphError::EmptyShape { channels, height, width });
        }
        Ok(Self { channels, height, width })
    }

    pub const fn channels(&self) -> usize {
        self.channels
    }

    pub const fn height(&self) -> usize {
        self.height
    }

    pub const fn width(&self) -> usize {
        self.width
    }

    /// Spatial positions, `height * width`.
    pub const fn area(&self) -> u64 {
        self.height as u64 * self.width as u64
    }

    pub const fn elements(&self) -> u64 {
        self.channels as u64 * self.area()
    }

    pub fn with_channels(self, channels: usize) -> Result<Self, GraphError> {
        if channels == 0 {
            return Err(GraphError::EmptyShape { channels, height: self.height, width: self.width });
        }
        Ok(Self { channels, ..self })
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// One output port of one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortRef {
    pub node: NodeId,
    pub port: usize,
}

impl PortRef {
    pub const fn new(node: NodeId, port: usize) -> Self {
        Self { node, port }
    }
}

impl From<NodeId> for PortRef {
    fn from(node: NodeId) -> Self {
        Self { node, port: 0 }
    }
}

/// A positive proper-or-unit fraction, serialized as `"p/q"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fraction(pub Ratio<u64>);

impl Fraction {
    pub fn new(num: u64, den: u64) -> Self {
        Self(Ratio::new(num, den))
    }

    pub fn half() -> Self {
        Self::new(1, 2)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let (n, q) =
            text.split_once('/').ok_or_else(|| serde::de::Error::custom(format!("fraction '{text}' is not p/q")))?;
        let n: u64 = n.trim().parse().map_err(serde::de::Error::custom)?;
        let q: u64 = q.trim().parse().map_err(serde::de::Error::custom)?;
        if q == 0 {
            return Err(serde::de::Error::custom("zero denominator"));
        }
        Ok(Fraction::new(n, q))
    }
}

/// 2D convolution attributes. Input channel count comes from the producer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square `kernel`, stride 1, no padding, one group, no bias.
    pub const fn new(out_channels: usize, kernel: usize) -> Self {
        Self {
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: 1,
            stride_w: 1,
            pad_h: 0,
            pad_w: 0,
            groups: 1,
            has_bias: false,
        }
    }

    /// Square kernel with `pad = kernel / 2`.
    pub const fn same(out_channels: usize, kernel: usize) -> Self {
        Self::new(out_channels, kernel).pad(kernel / 2)
    }

    pub const fn kernel_hw(mut self, kernel_h: usize, kernel_w: usize) -> Self {
        self.kernel_h = kernel_h;
        self.kernel_w = kernel_w;
        self
    }

    pub const fn stride(mut self, stride: usize) -> Self {
        self.stride_h = stride;
        self.stride_w = stride;
        self
    }

    pub const fn pad(mut self, pad: usize) -> Self {
        self.pad_h = pad;
        self.pad_w = pad;
        self
    }

    pub const fn pad_hw(mut self, pad_h: usize, pad_w: usize) -> Self {
        self.pad_h = pad_h;
        self.pad_w = pad_w;
        self
    }

    pub const fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub const fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    fn check(&self) -> Result<(), String> {
        check_window(self.kernel_h, self.kernel_w, self.stride_h, self.stride_w)?;
        if self.out_channels == 0 {
            return Err("out_channels must be >= 1".into());
        }
        if self.groups == 0 {
            return Err("groups must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransposedConvSpec {
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub output_pad_h: usize,
    pub output_pad_w: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl TransposedConvSpec {
    /// Exact integer upsampling: kernel = stride, no padding.
    pub const fn upsample(out_channels: usize, factor: usize) -> Self {
        Self {
            out_channels,
            kernel_h: factor,
            kernel_w: factor,
            stride_h: factor,
            stride_w: factor,
            pad_h: 0,
            pad_w: 0,
            output_pad_h: 0,
            output_pad_w: 0,
            groups: 1,
            has_bias: false,
        }
    }

    fn check(&self) -> Result<(), String> {
        check_window(self.kernel_h, self.kernel_w, self.stride_h, self.stride_w)?;
        if self.out_channels == 0 {
            return Err("out_channels must be >= 1".into());
        }
        if self.groups == 0 {
            return Err("groups must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl PoolSpec {
    pub const fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel_h: kernel, kernel_w: kernel, stride_h: stride, stride_w: stride, pad_h: pad, pad_w: pad }
    }
}

fn check_window(kh: usize, kw: usize, sh: usize, sw: usize) -> Result<(), String> {
    if kh == 0 || kw == 0 {
        return Err("kernel must be >= 1".into());
    }
    if sh == 0 || sw == 0 {
        return Err("stride must be >= 1".into());
    }
    Ok(())
}

/// Closed set of layer kinds.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs")]
pub enum NodeSpec {
    Input {
        shape: TensorShape,
    },
    Conv(ConvSpec),
    TransposedConv(TransposedConvSpec),
    BatchNorm {},
    #[serde(rename = "ReLU")]
    Relu {},
    MaxPool(PoolSpec),
    /// Elementwise sum of two or more equally shaped maps.
    Add {},
    /// Channel-axis concatenation of two or more maps.
    Concat {},
    /// Partition of the channel axis; one output port per fraction.
    ChannelSplit {
        fractions: Vec<Fraction>,
    },
    ChannelShuffle {
        groups: usize,
    },
    /// Places a `C x P x 1` list of per-pillar vectors onto a `C x height x width` grid.
    Scatter {
        height: usize,
        width: usize,
    },
}

/// Accepted input count of a node kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

impl Arity {
    pub fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exactly(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arity::Exactly(k) => write!(f, "exactly {k}"),
            Arity::AtLeast(k) => write!(f, "at least {k}"),
        }
    }
}

impl NodeSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            NodeSpec::Input { .. } => "Input",
            NodeSpec::Conv(_) => "Conv",
            NodeSpec::TransposedConv(_) => "TransposedConv",
            NodeSpec::BatchNorm {} => "BatchNorm",
            NodeSpec::Relu {} => "ReLU",
            NodeSpec::MaxPool(_) => "MaxPool",
            NodeSpec::Add {} => "Add",
            NodeSpec::Concat {} => "Concat",
            NodeSpec::ChannelSplit { .. } => "ChannelSplit",
            NodeSpec::ChannelShuffle { .. } => "ChannelShuffle",
            NodeSpec::Scatter { .. } => "Scatter",
        }
    }

    pub fn arity(&self) -> Arity {
        match self {
            NodeSpec::Input { .. } => Arity::Exactly(0),
            NodeSpec::Add {} | NodeSpec::Concat {} => Arity::AtLeast(2),
            _ => Arity::Exactly(1),
        }
    }

    pub fn num_outputs(&self) -> usize {
        match self {
            NodeSpec::ChannelSplit { fractions } => fractions.len(),
            _ => 1,
        }
    }

    /// Attribute-level invariants that do not depend on input shapes.
    pub fn check_attributes(&self) -> Result<(), String> {
        match self {
            NodeSpec::Conv(c) => c.check(),
            NodeSpec::TransposedConv(c) => c.check(),
            NodeSpec::MaxPool(p) => check_window(p.kernel_h, p.kernel_w, p.stride_h, p.stride_w),
            NodeSpec::ChannelSplit { fractions } => {
                if fractions.is_empty() {
                    return Err("channel split needs at least one fraction".into());
                }
                if fractions.iter().any(|f| f.0.is_zero()) {
                    return Err("channel split fractions must be > 0".into());
                }
                let total = fractions.iter().fold(Ratio::<u64>::zero(), |acc, f| acc + f.0);
                if !total.is_one() {
                    return Err(format!("channel split fractions sum to {total}, not 1"));
                }
                Ok(())
            }
            NodeSpec::ChannelShuffle { groups } if *groups == 0 => Err("shuffle groups must be >= 1".into()),
            NodeSpec::Scatter { height, width } if *height == 0 || *width == 0 => {
                Err("scatter grid must be non-empty".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub spec: NodeSpec,
}

impl Node {
    /// First component of the dotted name, e.g. `backbone` for
    /// `backbone.block2.unit3.dwconv`.
    pub fn stage(&self) -> &str {
        stage_of(&self.name)
    }
}

pub fn stage_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: NodeId,
    pub src_port: usize,
    pub dst: NodeId,
    pub dst_port: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("input {0} does not exist")]
    UnknownInput(NodeId),
    #[error("{kind} expects {expected} inputs, got {got}")]
    ArityMismatch { kind: &'static str, expected: Arity, got: usize },
    #[error("duplicate node name '{0}'")]
    DuplicateName(String),
    #[error("node {node} has no output port {port}")]
    InvalidPort { node: NodeId, port: usize },
    #[error("invalid attributes for '{name}': {reason}")]
    InvalidAttribute { name: String, reason: String },
    #[error("tensor shape {channels}x{height}x{width} has an empty dimension")]
    EmptyShape { channels: usize, height: usize, width: usize },
    #[error("invalid graph: {}", join_diagnostics(.0))]
    InvalidGraph(Vec<Diagnostic>),
    #[error("malformed graph document: {0}")]
    Document(String),
}

fn join_diagnostics(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

/// One structural violation reported by [`Graph::validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Diagnostic {
    CycleDetected { nodes: Vec<NodeId> },
    ArityMismatch { node: NodeId, expected: Arity, got: usize },
    UnconnectedPort { node: NodeId, port: usize },
    PortConflict { node: NodeId, port: usize },
    DanglingEdge(Edge),
    InvalidPort { node: NodeId, port: usize },
    DuplicateName(String),
    InvalidAttribute { node: NodeId, reason: String },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::CycleDetected { nodes } => {
                let ids: Vec<String> = nodes.iter().map(|n| n.to_string()).collect();
                write!(f, "cycle through {}", ids.join(", "))
            }
            Diagnostic::ArityMismatch { node, expected, got } => {
                write!(f, "{node} expects {expected} inputs, got {got}")
            }
            Diagnostic::UnconnectedPort { node, port } => write!(f, "{node} input port {port} is unconnected"),
            Diagnostic::PortConflict { node, port } => {
                write!(f, "{node} input port {port} has more than one producer")
            }
            Diagnostic::DanglingEdge(e) => {
                write!(f, "edge {}:{} -> {}:{} references a missing node", e.src, e.src_port, e.dst, e.dst_port)
            }
            Diagnostic::InvalidPort { node, port } => write!(f, "{node} has no output port {port}"),
            Diagnostic::DuplicateName(n) => write!(f, "duplicate node name '{n}'"),
            Diagnostic::InvalidAttribute { node, reason } => write!(f, "{node}: {reason}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Graph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    by_name: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a node consuming `inputs` (in input-port order).
    pub fn add_node(
        &mut self,
        spec: NodeSpec,
        inputs: &[PortRef],
        name: impl Into<String>,
    ) -> Result<NodeId, GraphError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(GraphError::DuplicateName(name));
        }
        if !spec.arity().accepts(inputs.len()) {
            return Err(GraphError::ArityMismatch {
                kind: spec.kind_name(),
                expected: spec.arity(),
                got: inputs.len(),
            });
        }
        spec.check_attributes().map_err(|reason| GraphError::InvalidAttribute { name: name.clone(), reason })?;
        if let NodeSpec::Input { shape } = &spec {
            TensorShape::new(shape.channels, shape.height, shape.width)?;
        }
        for input in inputs {
            let producer = self.nodes.get(input.node.0).ok_or(GraphError::UnknownInput(input.node))?;
            if input.port >= producer.spec.num_outputs() {
                return Err(GraphError::InvalidPort { node: input.node, port: input.port });
            }
        }
        let id = NodeId(self.nodes.len());
        for (dst_port, input) in inputs.iter().enumerate() {
            self.edges.push(Edge { src: input.node, src_port: input.port, dst: id, dst_port });
        }
        self.by_name.insert(name.clone(), id);
        self.nodes.push(Node { id, name, spec });
        Ok(id)
    }

    /// Appends a node without any checks and without edges.
    pub fn push_node_unchecked(&mut self, spec: NodeSpec, name: impl Into<String>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let name = name.into();
        self.by_name.entry(name.clone()).or_insert(id);
        self.nodes.push(Node { id, name, spec });
        id
    }

    /// Adds an edge without any checks. The result may violate every graph
    /// invariant; run [`Graph::validate`] afterwards.
    pub fn inject_edge(&mut self, edge: Edge) {
        self.edges.push(edge);
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0)
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn input_nodes(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| matches!(n.spec, NodeSpec::Input { .. })).map(|n| n.id).collect()
    }

    /// Producers of `id`, ordered by input port.
    pub fn inputs_of(&self, id: NodeId) -> Vec<PortRef> {
        let mut incoming: Vec<&Edge> = self.edges.iter().filter(|e| e.dst == id).collect();
        incoming.sort_by_key(|e| e.dst_port);
        incoming.iter().map(|e| PortRef::new(e.src, e.src_port)).collect()
    }

    /// Producers of every node, indexed by node id, ordered by input port.
    pub fn input_table(&self) -> Vec<Vec<PortRef>> {
        let mut table: Vec<Vec<(usize, PortRef)>> = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            if let Some(slot) = table.get_mut(e.dst.0) {
                slot.push((e.dst_port, PortRef::new(e.src, e.src_port)));
            }
        }
        table
            .into_iter()
            .map(|mut v| {
                v.sort_by_key(|(port, _)| *port);
                v.into_iter().map(|(_, p)| p).collect()
            })
            .collect()
    }

    /// Every violation of the graph invariants. Empty means valid.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        let n = self.nodes.len();

        let mut seen = HashSet::new();
        for node in &self.nodes {
            if !seen.insert(node.name.as_str()) {
                diags.push(Diagnostic::DuplicateName(node.name.clone()));
            }
            if let Err(reason) = node.spec.check_attributes() {
                diags.push(Diagnostic::InvalidAttribute { node: node.id, reason });
            }
        }

        let mut ports: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n];
        for e in &self.edges {
            if e.src.0 >= n || e.dst.0 >= n {
                diags.push(Diagnostic::DanglingEdge(*e));
                continue;
            }
            if e.src_port >= self.nodes[e.src.0].spec.num_outputs() {
                diags.push(Diagnostic::InvalidPort { node: e.src, port: e.src_port });
            }
            *ports[e.dst.0].entry(e.dst_port).or_default() += 1;
        }

        for node in &self.nodes {
            let used = &ports[node.id.0];
            let got: usize = used.values().sum();
            let arity = node.spec.arity();
            if !arity.accepts(got) {
                diags.push(Diagnostic::ArityMismatch { node: node.id, expected: arity, got });
            }
            for (&port, &count) in used {
                if count > 1 {
                    diags.push(Diagnostic::PortConflict { node: node.id, port });
                }
            }
            if let Some(&max_port) = used.keys().next_back() {
                for port in 0..max_port {
                    if !used.contains_key(&port) {
                        diags.push(Diagnostic::UnconnectedPort { node: node.id, port });
                    }
                }
            }
        }

        let (_, leftover) = self.kahn();
        if !leftover.is_empty() {
            diags.push(Diagnostic::CycleDetected { nodes: leftover });
        }
        diags
    }

    /// Topological order; ties are broken by insertion order.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let diags = self.validate();
        if !diags.is_empty() {
            return Err(GraphError::InvalidGraph(diags));
        }
        Ok(self.kahn().0)
    }

    /// Kahn's algorithm with a min-heap on node ids. Returns the order and any
    /// nodes left unprocessed (members of, or downstream of, a cycle).
    fn kahn(&self) -> (Vec<NodeId>, Vec<NodeId>) {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in &self.edges {
            if e.src.0 < n && e.dst.0 < n {
                indegree[e.dst.0] += 1;
                consumers[e.src.0].push(e.dst.0);
            }
        }
        let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(NodeId(i));
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        let leftover = (0..n).filter(|&i| indegree[i] > 0).map(NodeId).collect();
        (order, leftover)
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord { id: n.id.0, name: n.name.clone(), spec: n.spec.clone() })
                .collect(),
            edges: self.edges.iter().map(|e| [e.src.0, e.src_port, e.dst.0, e.dst_port]).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("graph documents always serialize")
    }

    /// Rebuilds a graph from a document, rejecting it unless it validates.
    pub fn from_document(doc: GraphDocument) -> Result<Self, GraphError> {
        let mut graph = Graph::new();
        for (expected, record) in doc.nodes.into_iter().enumerate() {
            if record.id != expected {
                return Err(GraphError::Document(format!(
                    "node ids must be 0..n in order; found {} at position {expected}",
                    record.id
                )));
            }
            if graph.by_name.contains_key(&record.name) {
                return Err(GraphError::DuplicateName(record.name));
            }
            graph.push_node_unchecked(record.spec, record.name);
        }
        for [src, src_port, dst, dst_port] in doc.edges {
            graph.inject_edge(Edge { src: NodeId(src), src_port, dst: NodeId(dst), dst_port });
        }
        let diags = graph.validate();
        if !diags.is_empty() {
            return Err(GraphError::InvalidGraph(diags));
        }
        Ok(graph)
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let doc: GraphDocument = serde_json::from_str(text).map_err(|e| GraphError::Document(e.to_string()))?;
        Self::from_document(doc)
    }
}

/// Serialized form: `{"nodes":[{"id","name","kind","attrs"}],"edges":[[src,srcPort,dst,dstPort]]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<[usize; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub name: String,
    #[serde(flatten)]
    pub spec: NodeSpec,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(c: usize, h: usize, w: usize) -> TensorShape {
        TensorShape::new(c, h, w).unwrap()
    }

    fn chain() -> Graph {
        let mut g = Graph::new();
        let x = g.add_node(NodeSpec::Input { shape: shape(64, 496, 432) }, &[], "in").unwrap();
        let c = g.add_node(NodeSpec::Conv(ConvSpec::same(64, 3)), &[x.into()], "conv").unwrap();
        let b = g.add_node(NodeSpec::BatchNorm {}, &[c.into()], "bn").unwrap();
        g.add_node(NodeSpec::Relu {}, &[b.into()], "relu").unwrap();
        g
    }

    #[test]
    fn first_input_gets_id_zero() {
        let mut g = Graph::new();
        let id = g.add_node(NodeSpec::Input { shape: shape(64, 496, 432) }, &[], "in").unwrap();
        assert_eq!(id, NodeId(0));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn unary_without_input_is_rejected() {
        let mut g = Graph::new();
        let err = g.add_node(NodeSpec::Relu {}, &[], "relu").unwrap_err();
        assert!(matches!(err, GraphError::ArityMismatch { got: 0, .. }));
    }

    #[test]
    fn dangling_and_duplicate_inputs() {
        let mut g = chain();
        assert_eq!(g.add_node(NodeSpec::Relu {}, &[NodeId(42).into()], "x"), Err(GraphError::UnknownInput(NodeId(42))));
        assert_eq!(
            g.add_node(NodeSpec::Relu {}, &[NodeId(0).into()], "conv"),
            Err(GraphError::DuplicateName("conv".into()))
        );
        assert!(matches!(
            g.add_node(NodeSpec::Relu {}, &[PortRef::new(NodeId(0), 1)], "y"),
            Err(GraphError::InvalidPort { .. })
        ));
    }

    #[test]
    fn chain_orders_by_insertion() {
        let g = chain();
        assert_eq!(g.edges().len(), 3);
        assert!(g.validate().is_empty());
        assert_eq!(g.topo_order().unwrap(), (0..4).map(NodeId).collect::<Vec<_>>());
    }

    #[test]
    fn empty_graph_is_valid() {
        assert!(Graph::new().validate().is_empty());
        assert!(Graph::new().topo_order().unwrap().is_empty());
    }

    #[test]
    fn injected_cycle_is_reported() {
        let mut g = Graph::new();
        let a = g.push_node_unchecked(NodeSpec::Relu {}, "a");
        let b = g.push_node_unchecked(NodeSpec::Relu {}, "b");
        g.inject_edge(Edge { src: a, src_port: 0, dst: b, dst_port: 0 });
        g.inject_edge(Edge { src: b, src_port: 0, dst: a, dst_port: 0 });
        let diags = g.validate();
        assert!(diags.iter().any(|d| matches!(d, Diagnostic::CycleDetected { .. })));
        assert!(matches!(g.topo_order(), Err(GraphError::InvalidGraph(_))));
    }

    #[test]
    fn concat_with_one_input_is_flagged() {
        let mut g = Graph::new();
        let x = g.add_node(NodeSpec::Input { shape: shape(4, 2, 2) }, &[], "in").unwrap();
        let c = g.push_node_unchecked(NodeSpec::Concat {}, "cat");
        g.inject_edge(Edge { src: x, src_port: 0, dst: c, dst_port: 0 });
        let diags = g.validate();
        assert!(diags.iter().any(|d| matches!(d, Diagnostic::ArityMismatch { got: 1, .. })));
    }

    #[test]
    fn diamond_puts_merge_last() {
        let mut g = Graph::new();
        let x = g.add_node(NodeSpec::Input { shape: shape(4, 2, 2) }, &[], "in").unwrap();
        let a = g.add_node(NodeSpec::Relu {}, &[x.into()], "a").unwrap();
        let b = g.add_node(NodeSpec::BatchNorm {}, &[x.into()], "b").unwrap();
        let m = g.add_node(NodeSpec::Add {}, &[a.into(), b.into()], "add").unwrap();
        let order = g.topo_order().unwrap();
        assert_eq!(order.first(), Some(&x));
        assert_eq!(order.last(), Some(&m));
    }

    #[test]
    fn split_attributes_are_checked() {
        let mut g = Graph::new();
        let x = g.add_node(NodeSpec::Input { shape: shape(4, 2, 2) }, &[], "in").unwrap();
        let bad = NodeSpec::ChannelSplit { fractions: vec![Fraction::new(1, 2), Fraction::new(1, 3)] };
        assert!(matches!(g.add_node(bad, &[x.into()], "s"), Err(GraphError::InvalidAttribute { .. })));
        let zero = NodeSpec::ChannelSplit { fractions: vec![Fraction::new(0, 1), Fraction::new(1, 1)] };
        assert!(g.add_node(zero, &[x.into()], "z").is_err());
        let ok = NodeSpec::ChannelSplit { fractions: vec![Fraction::half(), Fraction::half()] };
        let s = g.add_node(ok, &[x.into()], "ok").unwrap();
        g.add_node(NodeSpec::Relu {}, &[PortRef::new(s, 1)], "right").unwrap();
    }

    #[test]
    fn zero_stride_rejected() {
        let mut g = Graph::new();
        let x = g.add_node(NodeSpec::Input { shape: shape(4, 2, 2) }, &[], "in").unwrap();
        let spec = NodeSpec::Conv(ConvSpec::new(4, 3).stride(0));
        assert!(g.add_node(spec, &[x.into()], "c").is_err());
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(TensorShape::new(0, 1, 1).is_err());
        assert!(serde_json::from_str::<TensorShape>(r#"{"channels":1,"height":0,"width":3}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut g = chain();
        let r = g.find("relu").unwrap();
        let s = g
            .add_node(
                NodeSpec::ChannelSplit { fractions: vec![Fraction::half(), Fraction::half()] },
                &[r.into()],
                "split",
            )
            .unwrap();
        g.add_node(NodeSpec::Concat {}, &[PortRef::new(s, 1), PortRef::new(s, 0)], "cat").unwrap();
        let text = g.to_json();
        assert!(text.contains("\"kind\": \"ReLU\""));
        let back = Graph::from_json(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn malformed_documents_are_errors() {
        assert!(Graph::from_json("{").is_err());
        assert!(Graph::from_json(r#"{"nodes":[{"id":3,"name":"a","kind":"ReLU","attrs":{}}],"edges":[]}"#).is_err());
        // unconnected relu
        assert!(Graph::from_json(r#"{"nodes":[{"id":0,"name":"a","kind":"ReLU","attrs":{}}],"edges":[]}"#).is_err());
        assert!(Graph::from_json(r#"{"nodes":[],"edges":[[0,0,1,0]]}"#).is_err());
    }
}
