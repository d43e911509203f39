//! Output-shape inference for every node of a [`Graph`].

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph_ir::{Graph, GraphError, NodeId, NodeSpec, PortRef, TensorShape};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShapeError {
    #[error("channels {in_channels} -> {out_channels} not divisible by {groups} groups")]
    GroupMismatch { in_channels: usize, out_channels: usize, groups: usize },
    #[error("add inputs disagree: {0} vs {1}")]
    AddShapeMismatch(TensorShape, TensorShape),
    #[error("concat inputs disagree spatially: {0} vs {1}")]
    ConcatSpatialMismatch(TensorShape, TensorShape),
    #[error("fraction {fraction} of {channels} channels is not integral")]
    NonIntegralSplit { fraction: String, channels: usize },
    #[error("{channels} channels not divisible into {groups} shuffle groups")]
    ShuffleGroupMismatch { channels: usize, groups: usize },
    #[error("window {kernel} (stride {stride}, pad {pad}) does not fit input extent {input}")]
    NegativeOutputDim { input: usize, kernel: usize, stride: usize, pad: usize },
    #[error("{pillars} pillar slots do not fit a {height}x{width} grid")]
    ScatterOverflow { pillars: u64, height: usize, width: usize },
    #[error("expected {expected} input shapes, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("graph needs exactly one Input node, found {0}")]
    InputCountInGraph(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("at node '{node}': {source}")]
    AtNode {
        node: String,
        #[source]
        source: Box<ShapeError>,
    },
}

/// Output shape of every `(node, output port)` in a graph.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShapeMap {
    shapes: BTreeMap<(NodeId, usize), TensorShape>,
}

impl ShapeMap {
    pub fn get(&self, port: PortRef) -> Option<TensorShape> {
        self.shapes.get(&(port.node, port.port)).copied()
    }

    /// Port-0 output of `node`.
    pub fn output(&self, node: NodeId) -> Option<TensorShape> {
        self.get(node.into())
    }

    /// All output shapes of `node`, in port order.
    pub fn outputs(&self, node: NodeId) -> Vec<TensorShape> {
        self.shapes.range((node, 0)..=(node, usize::MAX)).map(|(_, s)| *s).collect()
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PortRef, TensorShape)> + '_ {
        self.shapes.iter().map(|(&(n, p), &s)| (PortRef::new(n, p), s))
    }
}

/// `floor((input + 2*pad - kernel) / stride) + 1`.
fn window_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize, ShapeError> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(ShapeError::NegativeOutputDim { input, kernel, stride, pad });
    }
    Ok((padded - kernel) / stride + 1)
}

/// `(input - 1) * stride - 2*pad + kernel + output_pad`.
fn transposed_out(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<usize, ShapeError> {
    let full = (input - 1) * stride + kernel + output_pad;
    if full <= 2 * pad {
        return Err(ShapeError::NegativeOutputDim { input, kernel, stride, pad });
    }
    Ok(full - 2 * pad)
}

fn shape(c: usize, h: usize, w: usize) -> Result<TensorShape, ShapeError> {
    Ok(TensorShape::new(c, h, w)?)
}

fn expect_inputs(inputs: &[TensorShape], n: usize) -> Result<(), ShapeError> {
    if inputs.len() != n {
        return Err(ShapeError::InputCount { expected: n, got: inputs.len() });
    }
    Ok(())
}

/// Output shapes of one node given its input shapes (one per input port).
pub fn node_output_shape(spec: &NodeSpec, inputs: &[TensorShape]) -> Result<Vec<TensorShape>, ShapeError> {
    match spec {
        NodeSpec::Input { shape } => {
            expect_inputs(inputs, 0)?;
            Ok(vec![*shape])
        }
        NodeSpec::Conv(c) => {
            expect_inputs(inputs, 1)?;
            let x = inputs[0];
            if !x.channels().is_multiple_of(c.groups) || c.out_channels % c.groups != 0 {
                return Err(ShapeError::GroupMismatch {
                    in_channels: x.channels(),
                    out_channels: c.out_channels,
                    groups: c.groups,
                });
            }
            let h = window_out(x.height(), c.kernel_h, c.stride_h, c.pad_h)?;
            let w = window_out(x.width(), c.kernel_w, c.stride_w, c.pad_w)?;
            Ok(vec![shape(c.out_channels, h, w)?])
        }
        NodeSpec::TransposedConv(c) => {
            expect_inputs(inputs, 1)?;
            let x = inputs[0];
            if !x.channels().is_multiple_of(c.groups) || c.out_channels % c.groups != 0 {
                return Err(ShapeError::GroupMismatch {
                    in_channels: x.channels(),
                    out_channels: c.out_channels,
                    groups: c.groups,
                });
            }
            let h = transposed_out(x.height(), c.kernel_h, c.stride_h, c.pad_h, c.output_pad_h)?;
            let w = transposed_out(x.width(), c.kernel_w, c.stride_w, c.pad_w, c.output_pad_w)?;
            Ok(vec![shape(c.out_channels, h, w)?])
        }
        NodeSpec::MaxPool(p) => {
            expect_inputs(inputs, 1)?;
            let x = inputs[0];
            let h = window_out(x.height(), p.kernel_h, p.stride_h, p.pad_h)?;
            let w = window_out(x.width(), p.kernel_w, p.stride_w, p.pad_w)?;
            Ok(vec![shape(x.channels(), h, w)?])
        }
        NodeSpec::BatchNorm {} | NodeSpec::Relu {} => {
            expect_inputs(inputs, 1)?;
            Ok(vec![inputs[0]])
        }
        NodeSpec::ChannelShuffle { groups } => {
            expect_inputs(inputs, 1)?;
            let x = inputs[0];
            if !x.channels().is_multiple_of(*groups) {
                return Err(ShapeError::ShuffleGroupMismatch { channels: x.channels(), groups: *groups });
            }
            Ok(vec![x])
        }
        NodeSpec::Add {} => {
            let first = *inputs.first().ok_or(ShapeError::InputCount { expected: 2, got: 0 })?;
            if let Some(other) = inputs.iter().find(|s| **s != first) {
                return Err(ShapeError::AddShapeMismatch(first, *other));
            }
            Ok(vec![first])
        }
        NodeSpec::Concat {} => {
            let first = *inputs.first().ok_or(ShapeError::InputCount { expected: 2, got: 0 })?;
            let mut channels = 0;
            for s in inputs {
                if s.height() != first.height() || s.width() != first.width() {
                    return Err(ShapeError::ConcatSpatialMismatch(first, *s));
                }
                channels += s.channels();
            }
            Ok(vec![shape(channels, first.height(), first.width())?])
        }
        NodeSpec::ChannelSplit { fractions } => {
            expect_inputs(inputs, 1)?;
            let x = inputs[0];
            fractions
                .iter()
                .map(|f| {
                    let scaled = f.0 * x.channels() as u64;
                    if !scaled.is_integer() || scaled.to_integer() == 0 {
                        return Err(ShapeError::NonIntegralSplit { fraction: f.to_string(), channels: x.channels() });
                    }
                    shape(scaled.to_integer() as usize, x.height(), x.width())
                })
                .collect()
        }
        NodeSpec::Scatter { height, width } => {
            expect_inputs(inputs, 1)?;
            let x = inputs[0];
            let cells = *height as u64 * *width as u64;
            if x.area() > cells {
                return Err(ShapeError::ScatterOverflow { pillars: x.area(), height: *height, width: *width });
            }
            Ok(vec![shape(x.channels(), *height, *width)?])
        }
    }
}

/// Infers every node's output shapes. Requires a valid graph with exactly one
/// Input node; errors are annotated with the offending node's name.
pub fn infer_all(graph: &Graph) -> Result<ShapeMap, ShapeError> {
    let inputs = graph.input_nodes().len();
    if inputs != 1 {
        return Err(ShapeError::InputCountInGraph(inputs));
    }
    infer_partial(graph)
}

/// Like [`infer_all`] but accepts any number of Input nodes (fragments).
pub fn infer_partial(graph: &Graph) -> Result<ShapeMap, ShapeError> {
    let order = graph.topo_order()?;
    let table = graph.input_table();
    let mut map = ShapeMap::default();
    for id in order {
        let node = graph.node(id).expect("topo order only yields existing nodes");
        let input_shapes: Vec<TensorShape> =
            table[id.0].iter().map(|p| map.get(*p).expect("producers are inferred before consumers")).collect();
        let outs = node_output_shape(&node.spec, &input_shapes)
            .map_err(|e| ShapeError::AtNode { node: node.name.clone(), source: Box::new(e) })?;
        for (port, s) in outs.into_iter().enumerate() {
            map.shapes.insert((id, port), s);
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ir::{ConvSpec, Fraction, PoolSpec, TransposedConvSpec};

    fn s(c: usize, h: usize, w: usize) -> TensorShape {
        TensorShape::new(c, h, w).unwrap()
    }

    #[test]
    fn strided_conv_halves() {
        let spec = NodeSpec::Conv(ConvSpec::new(64, 3).stride(2).pad(1));
        assert_eq!(node_output_shape(&spec, &[s(64, 496, 432)]).unwrap(), vec![s(64, 248, 216)]);
    }

    #[test]
    fn transposed_conv_upsamples() {
        let spec = NodeSpec::TransposedConv(TransposedConvSpec::upsample(128, 4));
        assert_eq!(node_output_shape(&spec, &[s(256, 62, 54)]).unwrap(), vec![s(128, 248, 216)]);
    }

    #[test]
    fn halving_split() {
        let spec = NodeSpec::ChannelSplit { fractions: vec![Fraction::half(), Fraction::half()] };
        assert_eq!(node_output_shape(&spec, &[s(64, 248, 216)]).unwrap(), vec![s(32, 248, 216), s(32, 248, 216)]);
        assert!(matches!(node_output_shape(&spec, &[s(3, 2, 2)]), Err(ShapeError::NonIntegralSplit { .. })));
    }

    #[test]
    fn add_requires_equal_shapes() {
        assert!(matches!(
            node_output_shape(&NodeSpec::Add {}, &[s(64, 248, 216), s(64, 124, 108)]),
            Err(ShapeError::AddShapeMismatch(..))
        ));
    }

    #[test]
    fn concat_sums_channels() {
        let x = s(128, 248, 216);
        assert_eq!(node_output_shape(&NodeSpec::Concat {}, &[x, x, x]).unwrap(), vec![s(384, 248, 216)]);
        assert!(matches!(
            node_output_shape(&NodeSpec::Concat {}, &[x, s(128, 124, 108)]),
            Err(ShapeError::ConcatSpatialMismatch(..))
        ));
    }

    #[test]
    fn group_and_shuffle_constraints() {
        let conv = NodeSpec::Conv(ConvSpec::new(64, 1).groups(3));
        assert!(matches!(node_output_shape(&conv, &[s(64, 4, 4)]), Err(ShapeError::GroupMismatch { .. })));
        let shuffle = NodeSpec::ChannelShuffle { groups: 4 };
        assert!(matches!(node_output_shape(&shuffle, &[s(6, 4, 4)]), Err(ShapeError::ShuffleGroupMismatch { .. })));
    }

    #[test]
    fn kernel_larger_than_input() {
        let conv = NodeSpec::Conv(ConvSpec::new(1, 3));
        assert!(matches!(node_output_shape(&conv, &[s(1, 2, 5)]), Err(ShapeError::NegativeOutputDim { .. })));
    }

    #[test]
    fn asymmetric_kernels_keep_extent() {
        let c13 = NodeSpec::Conv(ConvSpec::new(8, 1).kernel_hw(1, 3).pad_hw(0, 1));
        let c31 = NodeSpec::Conv(ConvSpec::new(8, 1).kernel_hw(3, 1).pad_hw(1, 0));
        assert_eq!(node_output_shape(&c13, &[s(8, 7, 9)]).unwrap(), vec![s(8, 7, 9)]);
        assert_eq!(node_output_shape(&c31, &[s(8, 7, 9)]).unwrap(), vec![s(8, 7, 9)]);
    }

    #[test]
    fn pillar_pool_and_scatter() {
        let pool =
            NodeSpec::MaxPool(PoolSpec { kernel_h: 1, kernel_w: 32, stride_h: 1, stride_w: 32, pad_h: 0, pad_w: 0 });
        let pooled = node_output_shape(&pool, &[s(64, 16000, 32)]).unwrap()[0];
        assert_eq!(pooled, s(64, 16000, 1));
        let scatter = NodeSpec::Scatter { height: 496, width: 432 };
        assert_eq!(node_output_shape(&scatter, &[pooled]).unwrap(), vec![s(64, 496, 432)]);
        let tiny = NodeSpec::Scatter { height: 10, width: 10 };
        assert!(matches!(node_output_shape(&tiny, &[pooled]), Err(ShapeError::ScatterOverflow { .. })));
    }

    #[test]
    fn infer_all_annotates_node() {
        let mut g = Graph::new();
        let x = g.add_node(NodeSpec::Input { shape: s(64, 496, 432) }, &[], "in").unwrap();
        let c = g.add_node(NodeSpec::Conv(ConvSpec::new(64, 3).stride(2).pad(1)), &[x.into()], "conv").unwrap();
        let map = infer_all(&g).unwrap();
        assert_eq!(map.output(c), Some(s(64, 248, 216)));
        assert_eq!(map.len(), 2);

        g.add_node(NodeSpec::Conv(ConvSpec::new(64, 1).groups(5)), &[c.into()], "bad").unwrap();
        match infer_all(&g) {
            Err(ShapeError::AtNode { node, .. }) => assert_eq!(node, "bad"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn infer_all_needs_single_input() {
        assert_eq!(infer_all(&Graph::new()), Err(ShapeError::InputCountInGraph(0)));
    }
}
