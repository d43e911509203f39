//! PointPillars graph builders for the base network and its ten backbone
//! replacements.
//!
//! Every Conv-BN-ReLU of the original top-down backbone is a *basic unit*.
//! A variant's backbone keeps the block plan (units per block, channels,
//! strides) and swaps each unit for the variant's own. The pillar feature
//! net, the upsampling neck and the detection head are shared by all
//! variants.
//!
//! Per-family hyperparameters the published description leaves open are
//! collected in [`UnitConfig`]; the defaults reproduce the reported costs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{graph_cost, CostError, CostOptions, CostReport};
use crate::graph_ir::{
    ConvSpec, Fraction, Graph, GraphError, NodeId, NodeSpec, PoolSpec, PortRef, TensorShape, TransposedConvSpec,
};
use crate::shape_infer::{self, ShapeError};

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("{variant}: {detail}")]
    ChannelConstraint { variant: BackboneVariant, detail: String },
    #[error("{variant}: unsupported stride {stride}")]
    UnsupportedStride { variant: BackboneVariant, stride: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackboneVariant {
    Base,
    SqueezeNext,
    ResNet,
    ResNeXt,
    MobilenetV1,
    MobilenetV2,
    ShufflenetV1,
    ShufflenetV2,
    Darknet,
    CSPDarknet,
    Xception,
}

impl BackboneVariant {
    pub const ALL: [BackboneVariant; 11] = [
        BackboneVariant::Base,
        BackboneVariant::SqueezeNext,
        BackboneVariant::ResNet,
        BackboneVariant::ResNeXt,
        BackboneVariant::MobilenetV1,
        BackboneVariant::MobilenetV2,
        BackboneVariant::ShufflenetV1,
        BackboneVariant::ShufflenetV2,
        BackboneVariant::Darknet,
        BackboneVariant::CSPDarknet,
        BackboneVariant::Xception,
    ];

    /// Label used in tables and measurement files.
    pub const fn label(self) -> &'static str {
        match self {
            BackboneVariant::Base => "base",
            BackboneVariant::SqueezeNext => "SqueezeNext",
            BackboneVariant::ResNet => "ResNet",
            BackboneVariant::ResNeXt => "ResNeXt",
            BackboneVariant::MobilenetV1 => "MobilenetV1",
            BackboneVariant::MobilenetV2 => "MobilenetV2",
            BackboneVariant::ShufflenetV1 => "ShufflenetV1",
            BackboneVariant::ShufflenetV2 => "ShufflenetV2",
            BackboneVariant::Darknet => "Darknet",
            BackboneVariant::CSPDarknet => "CSPDarknet",
            BackboneVariant::Xception => "Xception",
        }
    }

    pub const fn description(self) -> &'static str {
        match self {
            BackboneVariant::Base => "3x3 conv + BN + ReLU",
            BackboneVariant::SqueezeNext => "1x1 reduce, 1x3, 3x1, 1x1 expand, skip connection",
            BackboneVariant::ResNet => "bottleneck: 1x1 reduce, 3x3, 1x1 expand, skip connection",
            BackboneVariant::ResNeXt => "bottleneck with a 32-group 3x3 convolution",
            BackboneVariant::MobilenetV1 => "depthwise 3x3 + pointwise 1x1",
            BackboneVariant::MobilenetV2 => "inverted residual: 1x1 expand, depthwise 3x3, linear 1x1",
            BackboneVariant::ShufflenetV1 => "grouped 1x1, channel shuffle, depthwise 3x3, grouped 1x1",
            BackboneVariant::ShufflenetV2 => "channel split, 1x1, depthwise 3x3, 1x1, concat, shuffle",
            BackboneVariant::Darknet => "1x1 halving + 3x3, skip connection",
            BackboneVariant::CSPDarknet => "Darknet units in a cross-stage-partial block",
            BackboneVariant::Xception => "separable convolution(s) with a skip connection",
        }
    }
}

impl fmt::Display for BackboneVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for BackboneVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BackboneVariant::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown backbone variant '{s}'"))
    }
}

impl TryFrom<String> for BackboneVariant {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BackboneVariant> for String {
    fn from(v: BackboneVariant) -> Self {
        v.label().to_string()
    }
}

/// When a residual unit puts a 1x1 convolution on its skip path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipProjection {
    /// Only when the stride or channel count changes.
    WhenNeeded,
    Always,
}

/// How a CSP block divides its input between the two lanes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CspSplit {
    /// Two 1x1 convolutions, one per lane, plus a 1x1 transition closing the
    /// processed lane.
    Conv,
    /// A free channel split into halves.
    Slice,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnitConfig {
    /// SqueezeNext: first 1x1 keeps `out / reduction` channels.
    pub squeezenext_reduction: usize,
    /// ResNet/ResNeXt bottleneck width is `out / resnet_reduction`.
    pub resnet_reduction: usize,
    pub resnet_projection: SkipProjection,
    pub resnext_groups: usize,
    /// ResNeXt widens the ResNet bottleneck by this factor.
    pub resnext_width_factor: usize,
    /// MobilenetV2 expansion ratio `t`; with `t = 1` the expansion conv is omitted.
    pub mobilenet_v2_expansion: usize,
    pub shufflenet_v1_groups: usize,
    /// ShufflenetV1 bottleneck width as a multiple of the unit's output channels.
    pub shufflenet_v1_expansion: usize,
    pub xception_separable_convs: usize,
    pub csp_split: CspSplit,
    /// First CSP block keeps full-width lanes (Darknet units with halved
    /// hidden width inside); later blocks use half-width lanes.
    pub csp_first_block_full_width: bool,
}

impl Default for UnitConfig {
    fn default() -> Self {
        Self {
            squeezenext_reduction: 2,
            resnet_reduction: 4,
            resnet_projection: SkipProjection::Always,
            resnext_groups: 32,
            resnext_width_factor: 2,
            mobilenet_v2_expansion: 1,
            shufflenet_v1_groups: 4,
            shufflenet_v1_expansion: 2,
            xception_separable_convs: 1,
            csp_split: CspSplit::Conv,
            csp_first_block_full_width: true,
        }
    }
}

/// Network dimensions. Defaults follow the KITTI three-class PointPillars
/// reference configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub pseudo_image: TensorShape,
    pub max_pillars: usize,
    pub points_per_pillar: usize,
    pub pfn_in_features: usize,
    pub block_channels: Vec<usize>,
    pub block_units: Vec<usize>,
    pub block_strides: Vec<usize>,
    pub neck_out_channels: Vec<usize>,
    pub neck_upsample: Vec<usize>,
    pub num_classes: usize,
    pub anchors_per_location: usize,
    pub box_code_size: usize,
    pub dir_bins: usize,
    pub count_batchnorm: bool,
    pub units: UnitConfig,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            pseudo_image: TensorShape::new(64, 496, 432).expect("non-empty"),
            max_pillars: 16000,
            points_per_pillar: 32,
            pfn_in_features: 10,
            block_channels: vec![64, 128, 256],
            block_units: vec![4, 6, 6],
            block_strides: vec![2, 2, 2],
            neck_out_channels: vec![128, 128, 128],
            neck_upsample: vec![1, 2, 4],
            num_classes: 3,
            anchors_per_location: 6,
            box_code_size: 7,
            dir_bins: 2,
            count_batchnorm: true,
            units: UnitConfig::default(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), ArchError> {
        let bad = |m: &str| Err(ArchError::InvalidConfig(m.to_string()));
        let n = self.block_channels.len();
        if n == 0 {
            return bad("block_channels must not be empty");
        }
        if self.block_units.len() != n || self.block_strides.len() != n {
            return bad("block_channels, block_units and block_strides must have equal lengths");
        }
        if self.neck_out_channels.len() != n || self.neck_upsample.len() != n {
            return bad("neck_out_channels and neck_upsample must have one entry per block");
        }
        let lists = [
            ("block_channels", &self.block_channels),
            ("block_units", &self.block_units),
            ("block_strides", &self.block_strides),
            ("neck_out_channels", &self.neck_out_channels),
            ("neck_upsample", &self.neck_upsample),
        ];
        for (name, list) in lists {
            if list.contains(&0) {
                return Err(ArchError::InvalidConfig(format!("{name} entries must be positive")));
            }
        }
        let scalars = [
            ("max_pillars", self.max_pillars),
            ("points_per_pillar", self.points_per_pillar),
            ("pfn_in_features", self.pfn_in_features),
            ("num_classes", self.num_classes),
            ("anchors_per_location", self.anchors_per_location),
            ("box_code_size", self.box_code_size),
            ("dir_bins", self.dir_bins),
            ("units.squeezenext_reduction", self.units.squeezenext_reduction),
            ("units.resnet_reduction", self.units.resnet_reduction),
            ("units.resnext_groups", self.units.resnext_groups),
            ("units.resnext_width_factor", self.units.resnext_width_factor),
            ("units.mobilenet_v2_expansion", self.units.mobilenet_v2_expansion),
            ("units.shufflenet_v1_groups", self.units.shufflenet_v1_groups),
            ("units.shufflenet_v1_expansion", self.units.shufflenet_v1_expansion),
            ("units.xception_separable_convs", self.units.xception_separable_convs),
        ];
        for (name, v) in scalars {
            if v == 0 {
                return Err(ArchError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn cost_options(&self) -> CostOptions {
        CostOptions { count_batchnorm: self.count_batchnorm }
    }

    /// Parses a JSON document, or TOML when `toml` is set.
    pub fn parse(text: &str, toml: bool) -> Result<Self, ArchError> {
        let cfg: ArchConfig = if toml {
            ::toml::from_str(text).map_err(|e| ArchError::InvalidConfig(e.to_string()))?
        } else {
            let doc: serde_json::Value =
                serde_json::from_str(text).map_err(|e| ArchError::InvalidConfig(e.to_string()))?;
            if !doc.is_object() {
                return Err(ArchError::InvalidConfig("config must be a JSON object".into()));
            }
            serde_json::from_value(doc).map_err(|e| ArchError::InvalidConfig(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; `.toml` files are read as TOML, anything else as JSON.
    pub fn from_path(path: &Path) -> Result<Self, ArchError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ArchError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        Self::parse(&text, is_toml)
    }

    /// Applies one `key=value` override. Keys are dotted paths
    /// (`units.resnet_reduction`, `pseudo_image.height`); values are JSON
    /// literals, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ArchError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ArchError::InvalidConfig(format!("override '{assignment}' is not KEY=VALUE")))?;
        let key = key.trim();
        let value: serde_json::Value =
            serde_json::from_str(raw.trim()).unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
        let mut doc = serde_json::to_value(&*self).expect("configs always serialize");
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| ArchError::InvalidConfig(format!("unknown config key '{key}'")))?;
        }
        *slot = value;
        let updated: ArchConfig =
            serde_json::from_value(doc).map_err(|e| ArchError::InvalidConfig(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

/// Appends layers under a common name prefix.
struct Builder<'g> {
    graph: &'g mut Graph,
    units: &'g UnitConfig,
    variant: BackboneVariant,
}

impl Builder<'_> {
    fn node(&mut self, spec: NodeSpec, inputs: &[PortRef], name: String) -> Result<NodeId, ArchError> {
        Ok(self.graph.add_node(spec, inputs, name)?)
    }

    /// Conv + BN, optionally followed by ReLU. Nodes are `{name}.conv`,
    /// `{name}.bn`, `{name}.relu`.
    fn conv_bn(&mut self, x: PortRef, conv: ConvSpec, name: &str, relu: bool) -> Result<NodeId, ArchError> {
        let c = self.node(NodeSpec::Conv(conv), &[x], format!("{name}.conv"))?;
        let b = self.node(NodeSpec::BatchNorm {}, &[c.into()], format!("{name}.bn"))?;
        if relu {
            self.node(NodeSpec::Relu {}, &[b.into()], format!("{name}.relu"))
        } else {
            Ok(b)
        }
    }

    fn add(&mut self, a: PortRef, b: PortRef, name: String) -> Result<NodeId, ArchError> {
        self.node(NodeSpec::Add {}, &[a, b], name)
    }

    fn relu(&mut self, x: NodeId, name: String) -> Result<NodeId, ArchError> {
        self.node(NodeSpec::Relu {}, &[x.into()], name)
    }

    fn constraint(&self, detail: impl Into<String>) -> ArchError {
        ArchError::ChannelConstraint { variant: self.variant, detail: detail.into() }
    }

    fn divides(&self, what: &str, value: usize, divisor: usize) -> Result<usize, ArchError> {
        if divisor == 0 || !value.is_multiple_of(divisor) || value / divisor == 0 {
            return Err(self.constraint(format!("{what}: {value} not divisible by {divisor}")));
        }
        Ok(value / divisor)
    }

    fn unit(&mut self, x: NodeId, cin: usize, cout: usize, stride: usize, p: &str) -> Result<NodeId, ArchError> {
        if !(1..=2).contains(&stride) {
            return Err(ArchError::UnsupportedStride { variant: self.variant, stride });
        }
        let xp: PortRef = x.into();
        let u = self.units;
        match self.variant {
            BackboneVariant::Base => self.conv_bn(xp, ConvSpec::same(cout, 3).stride(stride), p, true),
            BackboneVariant::SqueezeNext => {
                let mid = self.divides("squeeze width", cout, u.squeezenext_reduction)?;
                let a = self.conv_bn(xp, ConvSpec::new(mid, 1).stride(stride), &format!("{p}.reduce"), true)?;
                let b = self.conv_bn(
                    a.into(),
                    ConvSpec::new(mid, 1).kernel_hw(1, 3).pad_hw(0, 1),
                    &format!("{p}.conv1x3"),
                    true,
                )?;
                let c = self.conv_bn(
                    b.into(),
                    ConvSpec::new(mid, 1).kernel_hw(3, 1).pad_hw(1, 0),
                    &format!("{p}.conv3x1"),
                    true,
                )?;
                let d = self.conv_bn(c.into(), ConvSpec::new(cout, 1), &format!("{p}.expand"), true)?;
                let skip = self.projection(xp, cin, cout, stride, false, p)?;
                self.add(d.into(), skip, format!("{p}.add"))
            }
            BackboneVariant::ResNet => {
                let width = self.divides("bottleneck width", cout, u.resnet_reduction)?;
                self.bottleneck(xp, cin, cout, stride, width, 1, p)
            }
            BackboneVariant::ResNeXt => {
                let width = self.divides("bottleneck width", cout, u.resnet_reduction)? * u.resnext_width_factor;
                self.divides("grouped bottleneck", width, u.resnext_groups)?;
                self.bottleneck(xp, cin, cout, stride, width, u.resnext_groups, p)
            }
            BackboneVariant::MobilenetV1 => {
                let dw =
                    self.conv_bn(xp, ConvSpec::same(cin, 3).stride(stride).groups(cin), &format!("{p}.dw"), true)?;
                self.conv_bn(dw.into(), ConvSpec::new(cout, 1), &format!("{p}.pw"), true)
            }
            BackboneVariant::MobilenetV2 => {
                let t = u.mobilenet_v2_expansion;
                let hidden = cin * t;
                let expanded: PortRef = if t == 1 {
                    xp
                } else {
                    self.conv_bn(xp, ConvSpec::new(hidden, 1), &format!("{p}.expand"), true)?.into()
                };
                let dw = self.conv_bn(
                    expanded,
                    ConvSpec::same(hidden, 3).stride(stride).groups(hidden),
                    &format!("{p}.dw"),
                    true,
                )?;
                let proj = self.conv_bn(dw.into(), ConvSpec::new(cout, 1), &format!("{p}.project"), false)?;
                if stride == 1 && cin == cout {
                    self.add(proj.into(), xp, format!("{p}.add"))
                } else {
                    Ok(proj)
                }
            }
            BackboneVariant::ShufflenetV1 => self.shufflenet_v1(xp, cin, cout, stride, p),
            BackboneVariant::ShufflenetV2 => self.shufflenet_v2(xp, cin, cout, stride, p),
            BackboneVariant::Darknet | BackboneVariant::CSPDarknet => {
                if stride != 1 || cin != cout {
                    // downsampling entry convolution
                    self.conv_bn(xp, ConvSpec::same(cout, 3).stride(stride), &format!("{p}.down"), true)
                } else {
                    let hidden = self.divides("darknet hidden width", cout, 2)?;
                    self.darknet_residual(xp, cout, hidden, p)
                }
            }
            BackboneVariant::Xception => {
                let mut cur = xp;
                for i in 0..u.xception_separable_convs {
                    let c_in = if i == 0 { cin } else { cout };
                    cur = self.separable(cur, c_in, cout, &format!("{p}.sep{}", i + 1))?.into();
                }
                if stride == 2 {
                    cur = self.node(NodeSpec::MaxPool(PoolSpec::square(3, 2, 1)), &[cur], format!("{p}.pool"))?.into();
                }
                let skip = self.projection(xp, cin, cout, stride, false, p)?;
                self.add(cur, skip, format!("{p}.add"))
            }
        }
    }

    /// Identity skip, or 1x1 (strided) conv + BN when required.
    fn projection(
        &mut self,
        x: PortRef,
        cin: usize,
        cout: usize,
        stride: usize,
        always: bool,
        p: &str,
    ) -> Result<PortRef, ArchError> {
        if always || stride != 1 || cin != cout {
            Ok(self.conv_bn(x, ConvSpec::new(cout, 1).stride(stride), &format!("{p}.proj"), false)?.into())
        } else {
            Ok(x)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bottleneck(
        &mut self,
        x: PortRef,
        cin: usize,
        cout: usize,
        stride: usize,
        width: usize,
        groups: usize,
        p: &str,
    ) -> Result<NodeId, ArchError> {
        let a = self.conv_bn(x, ConvSpec::new(width, 1).stride(stride), &format!("{p}.reduce"), true)?;
        let b = self.conv_bn(a.into(), ConvSpec::same(width, 3).groups(groups), &format!("{p}.conv3x3"), true)?;
        let c = self.conv_bn(b.into(), ConvSpec::new(cout, 1), &format!("{p}.expand"), false)?;
        let always = self.units.resnet_projection == SkipProjection::Always;
        let skip = self.projection(x, cin, cout, stride, always, p)?;
        let sum = self.add(c.into(), skip, format!("{p}.add"))?;
        self.relu(sum, format!("{p}.relu"))
    }

    fn shufflenet_v1(
        &mut self,
        x: PortRef,
        cin: usize,
        cout: usize,
        stride: usize,
        p: &str,
    ) -> Result<NodeId, ArchError> {
        let g = self.units.shufflenet_v1_groups;
        let branch_out = if stride == 1 {
            if cin != cout {
                return Err(self.constraint(format!("stride-1 unit needs equal channels, got {cin} -> {cout}")));
            }
            cout
        } else if cout > cin {
            cout - cin
        } else if cout == cin {
            cout
        } else {
            return Err(self.constraint(format!("downsampling unit cannot shrink {cin} -> {cout} channels")));
        };
        let mid = branch_out * self.units.shufflenet_v1_expansion;
        self.divides("grouped 1x1 input", cin, g)?;
        self.divides("grouped 1x1 width", mid, g)?;
        self.divides("grouped 1x1 output", branch_out, g)?;
        let a = self.conv_bn(x, ConvSpec::new(mid, 1).groups(g), &format!("{p}.gconv1"), true)?;
        let sh = self.node(NodeSpec::ChannelShuffle { groups: g }, &[a.into()], format!("{p}.shuffle"))?;
        let dw =
            self.conv_bn(sh.into(), ConvSpec::same(mid, 3).stride(stride).groups(mid), &format!("{p}.dw"), false)?;
        let b = self.conv_bn(dw.into(), ConvSpec::new(branch_out, 1).groups(g), &format!("{p}.gconv2"), false)?;
        let merged = if stride == 1 {
            self.add(b.into(), x, format!("{p}.add"))?
        } else {
            let pool = self.node(NodeSpec::MaxPool(PoolSpec::square(3, 2, 1)), &[x], format!("{p}.pool"))?;
            if cout > cin {
                self.node(NodeSpec::Concat {}, &[b.into(), pool.into()], format!("{p}.concat"))?
            } else {
                self.add(b.into(), pool.into(), format!("{p}.add"))?
            }
        };
        self.relu(merged, format!("{p}.relu"))
    }

    fn shufflenet_v2(
        &mut self,
        x: PortRef,
        cin: usize,
        cout: usize,
        stride: usize,
        p: &str,
    ) -> Result<NodeId, ArchError> {
        let half = self.divides("branch width", cout, 2)?;
        let (left, right_in): (PortRef, PortRef) = if stride == 1 {
            if cin != cout {
                return Err(self.constraint(format!("stride-1 unit needs equal channels, got {cin} -> {cout}")));
            }
            let split = self.node(
                NodeSpec::ChannelSplit { fractions: vec![Fraction::half(), Fraction::half()] },
                &[x],
                format!("{p}.split"),
            )?;
            (PortRef::new(split, 0), PortRef::new(split, 1))
        } else {
            let dw = self.conv_bn(x, ConvSpec::same(cin, 3).stride(2).groups(cin), &format!("{p}.left.dw"), false)?;
            let pw = self.conv_bn(dw.into(), ConvSpec::new(half, 1), &format!("{p}.left.pw"), true)?;
            (pw.into(), x)
        };
        let a = self.conv_bn(right_in, ConvSpec::new(half, 1), &format!("{p}.right.pw1"), true)?;
        let dw = self.conv_bn(
            a.into(),
            ConvSpec::same(half, 3).stride(stride).groups(half),
            &format!("{p}.right.dw"),
            false,
        )?;
        let b = self.conv_bn(dw.into(), ConvSpec::new(half, 1), &format!("{p}.right.pw2"), true)?;
        let cat = self.node(NodeSpec::Concat {}, &[left, b.into()], format!("{p}.concat"))?;
        self.node(NodeSpec::ChannelShuffle { groups: 2 }, &[cat.into()], format!("{p}.shuffle"))
    }

    fn darknet_residual(&mut self, x: PortRef, channels: usize, hidden: usize, p: &str) -> Result<NodeId, ArchError> {
        let a = self.conv_bn(x, ConvSpec::new(hidden, 1), &format!("{p}.reduce"), true)?;
        let b = self.conv_bn(a.into(), ConvSpec::same(channels, 3), &format!("{p}.conv3x3"), true)?;
        self.add(b.into(), x, format!("{p}.add"))
    }

    /// Depthwise 3x3 then pointwise 1x1, BN + ReLU after the pointwise.
    fn separable(&mut self, x: PortRef, cin: usize, cout: usize, name: &str) -> Result<NodeId, ArchError> {
        let dw = self.node(NodeSpec::Conv(ConvSpec::same(cin, 3).groups(cin)), &[x], format!("{name}.dw"))?;
        self.conv_bn(dw.into(), ConvSpec::new(cout, 1), &format!("{name}.pw"), true)
    }

    /// Cross-stage-partial wrapper around `units` stride-1 Darknet units.
    fn csp_stage(
        &mut self,
        x: NodeId,
        channels: usize,
        units: usize,
        first: bool,
        p: &str,
    ) -> Result<NodeId, ArchError> {
        let xp: PortRef = x.into();
        let (kept, mut lane, width, hidden) = match self.units.csp_split {
            CspSplit::Conv => {
                let full = first && self.units.csp_first_block_full_width;
                let width = if full { channels } else { self.divides("lane width", channels, 2)? };
                let hidden = if full { self.divides("lane hidden width", width, 2)? } else { width };
                let a = self.conv_bn(xp, ConvSpec::new(width, 1), &format!("{p}.csp.part1"), true)?;
                let b = self.conv_bn(xp, ConvSpec::new(width, 1), &format!("{p}.csp.part2"), true)?;
                (PortRef::from(a), PortRef::from(b), width, hidden)
            }
            CspSplit::Slice => {
                let width = self.divides("lane width", channels, 2)?;
                let hidden = self.divides("lane hidden width", width, 2)?;
                let split = self.node(
                    NodeSpec::ChannelSplit { fractions: vec![Fraction::half(), Fraction::half()] },
                    &[xp],
                    format!("{p}.csp.split"),
                )?;
                (PortRef::new(split, 0), PortRef::new(split, 1), width, hidden)
            }
        };
        for j in 0..units {
            lane = self.darknet_residual(lane, width, hidden, &format!("{p}.csp.unit{}", j + 1))?.into();
        }
        if self.units.csp_split == CspSplit::Conv {
            lane = self.conv_bn(lane, ConvSpec::new(width, 1), &format!("{p}.csp.transition"), true)?.into();
        }
        let cat = self.node(NodeSpec::Concat {}, &[lane, kept], format!("{p}.csp.concat"))?;
        self.conv_bn(cat.into(), ConvSpec::new(channels, 1), &format!("{p}.csp.fuse"), true)
    }
}

/// Appends one basic unit of `variant` consuming `input` and returns the
/// unit's output node.
#[allow(clippy::too_many_arguments)]
pub fn basic_unit(
    variant: BackboneVariant,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    graph: &mut Graph,
    input: NodeId,
    name_prefix: &str,
    units: &UnitConfig,
) -> Result<NodeId, ArchError> {
    Builder { graph, units, variant }.unit(input, in_channels, out_channels, stride, name_prefix)
}

/// Appends the top-down backbone after `input` (carrying `in_channels`) and
/// returns the output node of each block.
pub fn build_backbone_into(
    graph: &mut Graph,
    input: NodeId,
    in_channels: usize,
    variant: BackboneVariant,
    cfg: &ArchConfig,
) -> Result<Vec<NodeId>, ArchError> {
    cfg.validate()?;
    let mut b = Builder { graph, units: &cfg.units, variant };
    let mut x = input;
    let mut cin = in_channels;
    let mut outputs = Vec::with_capacity(cfg.block_channels.len());
    for (i, ((&c, &n), &s)) in cfg.block_channels.iter().zip(&cfg.block_units).zip(&cfg.block_strides).enumerate() {
        let p = format!("backbone.block{}", i + 1);
        x = b.unit(x, cin, c, s, &format!("{p}.unit1"))?;
        if variant == BackboneVariant::CSPDarknet && n > 1 {
            x = b.csp_stage(x, c, n - 1, i == 0, &p)?;
        } else {
            for j in 1..n {
                x = b.unit(x, c, c, 1, &format!("{p}.unit{}", j + 1))?;
            }
        }
        outputs.push(x);
        cin = c;
    }
    Ok(outputs)
}

/// Backbone alone, fed by a pseudo-image Input.
pub fn build_backbone(variant: BackboneVariant, cfg: &ArchConfig) -> Result<Graph, ArchError> {
    let mut g = Graph::new();
    let x = g.add_node(NodeSpec::Input { shape: cfg.pseudo_image }, &[], "backbone.input")?;
    build_backbone_into(&mut g, x, cfg.pseudo_image.channels(), variant, cfg)?;
    shape_infer::infer_all(&g)?;
    Ok(g)
}

/// Full network: pfn, backbone, neck and head stages.
pub fn build_pointpillars(variant: BackboneVariant, cfg: &ArchConfig) -> Result<Graph, ArchError> {
    cfg.validate()?;
    let mut g = Graph::new();
    let features = cfg.pseudo_image.channels();

    // pillar feature net: a shared linear layer over every point, max over the points of a pillar
    let points = TensorShape::new(cfg.pfn_in_features, cfg.max_pillars, cfg.points_per_pillar)?;
    let x = g.add_node(NodeSpec::Input { shape: points }, &[], "pfn.input")?;
    let pfn = {
        let mut b = Builder { graph: &mut g, units: &cfg.units, variant };
        b.conv_bn(x.into(), ConvSpec::new(features, 1), "pfn.linear", true)?
    };
    let n = cfg.points_per_pillar;
    let pool = PoolSpec { kernel_h: 1, kernel_w: n, stride_h: 1, stride_w: n, pad_h: 0, pad_w: 0 };
    let pooled = g.add_node(NodeSpec::MaxPool(pool), &[pfn.into()], "pfn.maxpool")?;
    let grid = NodeSpec::Scatter { height: cfg.pseudo_image.height(), width: cfg.pseudo_image.width() };
    let pseudo = g.add_node(grid, &[pooled.into()], "pfn.scatter")?;

    let blocks = build_backbone_into(&mut g, pseudo, features, variant, cfg)?;

    let mut ups = Vec::with_capacity(blocks.len());
    for (i, (&block, (&out, &factor))) in
        blocks.iter().zip(cfg.neck_out_channels.iter().zip(&cfg.neck_upsample)).enumerate()
    {
        let p = format!("neck.deblock{}", i + 1);
        let d = g.add_node(
            NodeSpec::TransposedConv(TransposedConvSpec::upsample(out, factor)),
            &[block.into()],
            format!("{p}.deconv"),
        )?;
        let bn = g.add_node(NodeSpec::BatchNorm {}, &[d.into()], format!("{p}.bn"))?;
        ups.push(PortRef::from(g.add_node(NodeSpec::Relu {}, &[bn.into()], format!("{p}.relu"))?));
    }
    let neck = if ups.len() > 1 { g.add_node(NodeSpec::Concat {}, &ups, "neck.concat")? } else { ups[0].node };

    let a = cfg.anchors_per_location;
    for (name, per_anchor) in
        [("head.cls", cfg.num_classes), ("head.box", cfg.box_code_size), ("head.dir", cfg.dir_bins)]
    {
        g.add_node(NodeSpec::Conv(ConvSpec::new(a * per_anchor, 1).bias(true)), &[neck.into()], name)?;
    }

    shape_infer::infer_all(&g)?;
    Ok(g)
}

/// Builds and costs every variant, in [`BackboneVariant::ALL`] order.
pub fn cost_all(cfg: &ArchConfig) -> Result<Vec<(BackboneVariant, CostReport)>, ArchError> {
    BackboneVariant::ALL
        .par_iter()
        .map(|&v| {
            let g = build_pointpillars(v, cfg)?;
            Ok((v, graph_cost(&g, cfg.cost_options())?))
        })
        .collect()
}
