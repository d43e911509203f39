#![allow(dead_code)]

pub mod oracle;

use proptest::prelude::*;

use pillars_core::analysis::{ApRow, Class, DesignPoint};
use pillars_core::cost_model::{graph_cost, CostOptions};
use pillars_core::exact::{self, Exact};
use pillars_core::graph_ir::{ConvSpec, Fraction, Graph, NodeSpec, PoolSpec, PortRef, TensorShape, TransposedConvSpec};
use pillars_core::shape_infer::infer_all;

/// One construction step; the numbers select operands and attributes.
pub type Step = (u8, u32, u32, u32);

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn divisor(n: usize, pick: u32) -> usize {
    let ds: Vec<usize> = (1..=n).filter(|d| n.is_multiple_of(*d)).collect();
    ds[pick as usize % ds.len()]
}

/// Builds a valid DAG from random steps, tracking the shape of every output
/// port independently of the shape inference module. Steps whose operands
/// would be invalid are skipped.
pub fn build(input: (usize, usize, usize), steps: &[Step]) -> (Graph, Vec<(PortRef, TensorShape)>) {
    let mut g = Graph::new();
    let shape = TensorShape::new(input.0, input.1, input.2).unwrap();
    let x = g.add_node(NodeSpec::Input { shape }, &[], "input").unwrap();
    let mut ports = vec![(PortRef::from(x), shape)];
    for (i, &(kind, a, b, c)) in steps.iter().enumerate() {
        let (src, s) = ports[a as usize % ports.len()];
        let (ch, h, w) = (s.channels(), s.height(), s.width());
        let name = format!("n{i}");
        let push =
            |spec: NodeSpec, inputs: &[PortRef], outs: Vec<(usize, usize, usize)>| Some((spec, inputs.to_vec(), outs));
        let made = match kind % 9 {
            0 => {
                let out = 1 + (b % 8) as usize;
                let k = if c % 2 == 0 { 1 } else { 3 };
                let stride = 1 + (c / 2 % 2) as usize;
                let pad = (c / 4 % 2) as usize;
                let groups = divisor(gcd(ch, out), c / 8);
                if h + 2 * pad < k || w + 2 * pad < k {
                    continue;
                }
                let oh = (h + 2 * pad - k) / stride + 1;
                let ow = (w + 2 * pad - k) / stride + 1;
                let spec = ConvSpec::new(out, k).stride(stride).pad(pad).groups(groups).bias(b % 3 == 0);
                push(NodeSpec::Conv(spec), &[src], vec![(out, oh, ow)])
            }
            1 => push(NodeSpec::BatchNorm {}, &[src], vec![(ch, h, w)]),
            2 => push(NodeSpec::Relu {}, &[src], vec![(ch, h, w)]),
            3 => {
                if h < 2 || w < 2 {
                    continue;
                }
                push(NodeSpec::MaxPool(PoolSpec::square(2, 2, 0)), &[src], vec![(ch, h / 2, w / 2)])
            }
            4 => {
                let same: Vec<PortRef> = ports.iter().filter(|(_, t)| *t == s).map(|(p, _)| *p).collect();
                let other = same[b as usize % same.len()];
                push(NodeSpec::Add {}, &[src, other], vec![(ch, h, w)])
            }
            5 => {
                let same: Vec<(PortRef, TensorShape)> =
                    ports.iter().filter(|(_, t)| t.height() == h && t.width() == w).copied().collect();
                let (other, t) = same[b as usize % same.len()];
                push(NodeSpec::Concat {}, &[src, other], vec![(ch + t.channels(), h, w)])
            }
            6 => {
                if ch < 2 || ch % 2 != 0 {
                    continue;
                }
                let fr = vec![Fraction::half(), Fraction::half()];
                push(NodeSpec::ChannelSplit { fractions: fr }, &[src], vec![(ch / 2, h, w), (ch / 2, h, w)])
            }
            7 => {
                let groups = divisor(ch, b);
                push(NodeSpec::ChannelShuffle { groups }, &[src], vec![(ch, h, w)])
            }
            _ => {
                if h > 12 || w > 12 {
                    continue;
                }
                let out = 1 + (b % 6) as usize;
                let spec = TransposedConvSpec::upsample(out, 2);
                push(NodeSpec::TransposedConv(spec), &[src], vec![(out, 2 * h, 2 * w)])
            }
        };
        let Some((spec, inputs, outs)) = made else { continue };
        let id = g.add_node(spec, &inputs, name).unwrap();
        for (p, (c, h, w)) in outs.into_iter().enumerate() {
            ports.push((PortRef::new(id, p), TensorShape::new(c, h, w).unwrap()));
        }
    }
    (g, ports)
}

pub fn arb_graph(max_steps: usize) -> impl Strategy<Value = (Graph, Vec<(PortRef, TensorShape)>)> {
    ((1usize..=8, 1usize..=10, 1usize..=10), prop::collection::vec(any::<Step>(), 0..max_steps))
        .prop_map(|(input, steps)| build(input, &steps))
}

/// Structural, shape and cost invariants every built graph satisfies.
pub fn check_graph(g: &Graph, ports: &[(PortRef, TensorShape)]) -> Result<(), TestCaseError> {
    prop_assert!(g.validate().is_empty(), "{:?}", g.validate());
    let order = g.topo_order().map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(order.len(), g.len());
    let mut position = vec![usize::MAX; g.len()];
    for (i, id) in order.iter().enumerate() {
        position[id.0] = i;
    }
    for e in g.edges() {
        prop_assert!(position[e.src.0] < position[e.dst.0]);
    }
    let shapes = infer_all(g).map_err(|e| TestCaseError::fail(e.to_string()))?;
    for (p, s) in ports {
        prop_assert_eq!(shapes.get(*p), Some(*s));
    }
    let r = graph_cost(g, CostOptions::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(r.per_node.len(), g.len());
    prop_assert_eq!(r.per_node.iter().map(|n| n.madds).sum::<u64>(), r.total_madds);
    prop_assert_eq!(r.per_stage.values().map(|s| s.madds).sum::<u64>(), r.total_madds);
    prop_assert_eq!(r.per_stage.values().map(|s| s.params).sum::<u64>(), r.total_params);
    let back = Graph::from_json(&g.to_json()).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(back.to_json(), g.to_json());
    Ok(())
}

/// Design points with coarse coordinates so ties are common.
pub fn arb_points(max: usize) -> impl Strategy<Value = Vec<DesignPoint>> {
    prop::collection::vec((1i64..20, prop::collection::vec(0i64..=20, 9)), 1..max).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (g, aps))| {
                let v = |k: usize| Some(exact::ratio(aps[k] * 5, 1));
                let mut p = DesignPoint::uniform(format!("p{i}"), exact::ratio(g, 2), exact::zero());
                for (ci, class) in Class::ALL.into_iter().enumerate() {
                    p.ap.insert(class, ApRow { easy: v(3 * ci), moderate: v(3 * ci + 1), hard: v(3 * ci + 2) });
                }
                p
            })
            .collect()
    })
}

pub fn fraction(num: u32, den: u32) -> Exact {
    exact::ratio(num as i64, den as i64)
}
