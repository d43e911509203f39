//! Analytic cost model for PointPillars and ten backbone replacements.
//!
//! The crate rebuilds each network as a static computation graph
//! ([`graph_ir`]), infers feature-map shapes ([`shape_infer`]), counts
//! multiply-adds and parameters exactly ([`cost_model`]), and offers the
//! table arithmetic used to compare variants: mAP aggregation, Pareto fronts
//! and Amdahl projections ([`analysis`]). [`report`] renders tables and SVG
//! scatter plots.

pub mod analysis;
pub mod architectures;
pub mod cost_model;
pub mod exact;
pub mod graph_ir;
pub mod report;
pub mod shape_infer;

pub use architectures::{build_pointpillars, ArchConfig, BackboneVariant};
pub use cost_model::{graph_cost, CostOptions, CostReport};
pub use graph_ir::{Graph, NodeId, NodeSpec, TensorShape};
