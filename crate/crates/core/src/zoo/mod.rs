//! Inception-v4 and Inception-ResNet builders.
//!
//! Filter counts come from the definition files under `archs/`; the code here
//! only knows how to wire layers into a graph. Every convolution unit is
//! `Conv (no activation) -> BatchNorm -> ReLU`. Residual blocks end in a 1x1
//! filter-expansion conv with neither BatchNorm nor activation, a scaled
//! residual sum and a ReLU.

mod definition;

pub use definition::{ArchDefinition, Filters, Layer};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{infer_shapes, BatchNormSpec, GraphBuilder, GraphSpec, NodeKind, Shape, ShapeError};
use crate::ops::{Activation, ConvSpec, Padding, PoolSpec};

/// Id of the global average pool that feeds the classifier head.
pub const POOL_ID: &str = "avgpool";
pub const DROPOUT_ID: &str = "dropout";
/// Id of the FullyConnected node producing the logits.
pub const LOGITS_ID: &str = "logits";
pub const OUTPUT_ID: &str = "softmax";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZooError {
    #[error("invalid architecture definition: {0}")]
    Definition(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("width multiplier {width} makes a {filters}-filter layer round to fewer than 4 filters")]
    InfeasibleWidth { filters: usize, width: f64 },
    #[error("cannot residualize: {0}")]
    NotResidualizable(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    InceptionV4,
    #[serde(rename = "inception_resnet_v1")]
    InceptionResNetV1,
    #[serde(rename = "inception_resnet_v2")]
    InceptionResNetV2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::InceptionV4,
        Variant::InceptionResNetV1,
        Variant::InceptionResNetV2,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Variant::InceptionV4 => "v4",
            Variant::InceptionResNetV1 => "ir1",
            Variant::InceptionResNetV2 => "ir2",
        }
    }

    pub fn is_residual(self) -> bool {
        self != Variant::InceptionV4
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Variant {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "v4" | "inception_v4" => Ok(Variant::InceptionV4),
            "ir1" | "inception_resnet_v1" => Ok(Variant::InceptionResNetV1),
            "ir2" | "inception_resnet_v2" => Ok(Variant::InceptionResNetV2),
            other => Err(ZooError::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Filter bank sizes of the Reduction-A module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionAParams {
    pub k: usize,
    pub l: usize,
    pub m: usize,
    pub n: usize,
}

impl ReductionAParams {
    pub fn check(&self) -> Result<(), ZooError> {
        if [self.k, self.l, self.m, self.n].contains(&0) {
            return Err(ZooError::Config(format!("reduction_a filters must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCounts {
    pub a: usize,
    pub b: usize,
    pub c: usize,
}

impl BlockCounts {
    pub fn total(&self) -> usize {
        self.a + self.b + self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    A35,
    B17,
    C8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub width_multiplier: f64,
    /// Scale of the residual branch before the sum. Unused by pure variants
    /// unless `residualize` is set.
    pub residual_scale: f64,
    pub block_counts: BlockCounts,
    pub reduction_a: ReductionAParams,
    pub dropout_keep: f64,
    /// `[H, W]` of the input image.
    pub input_size: [usize; 2],
    /// Turn every A, B and C block of a pure variant into a residual block.
    #[serde(default)]
    pub residualize: bool,
}

impl ArchConfig {
    /// Full-size defaults: 299x299 input, 1000 classes, width 1.
    pub fn new(variant: Variant) -> Self {
        let def = ArchDefinition::shipped(variant);
        Self {
            variant,
            num_classes: 1000,
            width_multiplier: 1.0,
            residual_scale: 0.1,
            block_counts: def.block_counts,
            reduction_a: def.reduction_a_filters,
            dropout_keep: 0.8,
            input_size: [299, 299],
            residualize: false,
        }
    }

    /// Desk scale: width 0.25, 75x75 input, 10 classes, same topology.
    pub fn desk(variant: Variant) -> Self {
        Self {
            num_classes: 10,
            width_multiplier: 0.25,
            input_size: [75, 75],
            ..Self::new(variant)
        }
    }

    /// Parses a config object. Only `variant` is required; every other field
    /// defaults to [`ArchConfig::new`] for that variant.
    pub fn from_json(text: &str) -> Result<Self, ZooError> {
        let bad = |e: serde_json::Error| ZooError::Config(e.to_string());
        let value: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
        let obj = value
            .as_object()
            .ok_or_else(|| ZooError::Config("config must be a JSON object".into()))?;
        let variant: Variant = obj
            .get("variant")
            .ok_or_else(|| ZooError::Config("missing `variant`".into()))
            .and_then(|v| serde_json::from_value(v.clone()).map_err(bad))?;
        let mut merged = serde_json::to_value(Self::new(variant)).expect("config serializes");
        for (k, v) in obj {
            if merged.get(k).is_none() {
                return Err(ZooError::Config(format!("unknown field `{k}`")));
            }
            merged[k] = v.clone();
        }
        let config: Self = serde_json::from_value(merged).map_err(bad)?;
        config.check()?;
        Ok(config)
    }

    pub fn check(&self) -> Result<(), ZooError> {
        let fail = |msg: String| Err(ZooError::Config(msg));
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return fail(format!("width_multiplier {} is outside (0, 1]", self.width_multiplier));
        }
        if !(self.residual_scale >= 0.0 && self.residual_scale.is_finite()) {
            return fail(format!("residual_scale {} must be finite and >= 0", self.residual_scale));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return fail(format!("dropout_keep {} is outside (0, 1]", self.dropout_keep));
        }
        if self.input_size.contains(&0) {
            return fail("input_size must be positive".into());
        }
        self.reduction_a.check()
    }

    pub fn input_shape(&self) -> Shape {
        [1, self.input_size[0], self.input_size[1], 3]
    }

    fn residual_blocks(&self) -> bool {
        self.variant.is_residual() || self.residualize
    }
}

/// `round(filters * width / 4) * 4`; width 1 leaves counts untouched.
pub fn scale_filters(filters: usize, width: f64) -> Result<usize, ZooError> {
    if width == 1.0 {
        return Ok(filters);
    }
    let scaled = (filters as f64 * width / 4.0).round() as usize * 4;
    if scaled < 4 {
        return Err(ZooError::InfeasibleWidth { filters, width });
    }
    Ok(scaled)
}

struct Emitter<'a> {
    config: &'a ArchConfig,
}

impl Emitter<'_> {
    fn layers(&self, b: &mut GraphBuilder, layers: &[Layer], input: &str, prefix: &str) -> Result<String, ZooError> {
        let mut cur = input.to_string();
        for (j, layer) in layers.iter().enumerate() {
            cur = self.layer(b, layer, &cur, &format!("{prefix}{j}"))?;
        }
        Ok(cur)
    }

    fn layer(&self, b: &mut GraphBuilder, layer: &Layer, input: &str, base: &str) -> Result<String, ZooError> {
        Ok(match layer {
            Layer::Conv {
                kernel,
                filters,
                stride,
                padding,
            } => {
                let f = scale_filters(filters.resolve(&self.config.reduction_a)?, self.config.width_multiplier)?;
                let id = format!("{base}_conv{}x{}", kernel[0], kernel[1]);
                let spec = ConvSpec::new((kernel[0], kernel[1]), *stride, *padding, f);
                b.add(&id, NodeKind::Conv(spec), &[input]);
                let bn = b.add(format!("{id}/bn"), NodeKind::BatchNorm(BatchNormSpec::default()), &[&id]);
                b.add(format!("{id}/relu"), NodeKind::Relu, &[&bn])
            }
            Layer::MaxPool {
                kernel,
                stride,
                padding,
            } => b.add(
                format!("{base}_maxpool{kernel}x{kernel}"),
                NodeKind::MaxPool(PoolSpec::new(*kernel, *stride, *padding)),
                &[input],
            ),
            Layer::AvgPool {
                kernel,
                stride,
                padding,
            } => b.add(
                format!("{base}_avgpool{kernel}x{kernel}"),
                NodeKind::AvgPool(PoolSpec::new(*kernel, *stride, *padding)),
                &[input],
            ),
            Layer::Mixed { branches } => {
                let mut outs = Vec::with_capacity(branches.len());
                for (i, branch) in branches.iter().enumerate() {
                    outs.push(self.layers(b, branch, input, &format!("{base}_mixed/b{i}/"))?);
                }
                let refs: Vec<&str> = outs.iter().map(String::as_str).collect();
                b.add(format!("{base}_mixed/concat"), NodeKind::Concat, &refs)
            }
        })
    }

    fn fragment(&self, layers: &[Layer], input_shape: Shape) -> Result<GraphSpec, ZooError> {
        let mut b = GraphBuilder::new(input_shape);
        let out = self.layers(&mut b, layers, GraphBuilder::INPUT_ID, "")?;
        let frag = b.finish(out);
        infer_shapes(&frag)?;
        Ok(frag)
    }
}

fn definition(config: &ArchConfig) -> Result<ArchDefinition, ZooError> {
    config.check()?;
    Ok(ArchDefinition::shipped(config.variant))
}

/// Stem fragment on the config's input size.
pub fn build_stem(config: &ArchConfig) -> Result<GraphSpec, ZooError> {
    let def = definition(config)?;
    Emitter { config }.fragment(&def.stem, config.input_shape())
}

/// One A, B or C block on `input_shape`. Residual variants (and pure ones
/// with `residualize`) get the expansion conv and scaled sum.
pub fn build_inception_block(config: &ArchConfig, grid: Grid, input_shape: Shape) -> Result<GraphSpec, ZooError> {
    let def = definition(config)?;
    let layers = match grid {
        Grid::A35 => &def.inception_a,
        Grid::B17 => &def.inception_b,
        Grid::C8 => &def.inception_c,
    };
    let frag = Emitter { config }.fragment(layers, input_shape)?;
    if config.residual_blocks() {
        residualize(&frag, config.residual_scale)
    } else {
        Ok(frag)
    }
}

/// Reduction-A with the config's `k, l, m, n`.
pub fn build_reduction_a(config: &ArchConfig, input_shape: Shape) -> Result<GraphSpec, ZooError> {
    let def = definition(config)?;
    Emitter { config }.fragment(&def.reduction_a, input_shape)
}

pub fn build_reduction_b(config: &ArchConfig, input_shape: Shape) -> Result<GraphSpec, ZooError> {
    let def = definition(config)?;
    Emitter { config }.fragment(&def.reduction_b, input_shape)
}

/// Replaces the final filter concatenation of a grid-preserving block by
/// `concat -> 1x1 expansion conv (linear) -> input + alpha * expansion -> ReLU`.
/// The expansion conv restores the input channel count.
pub fn residualize(fragment: &GraphSpec, alpha: f64) -> Result<GraphSpec, ZooError> {
    let shapes = infer_shapes(fragment)?;
    let out = fragment
        .node(&fragment.output_id)
        .expect("shape inference checked the output id");
    if out.kind != NodeKind::Concat {
        return Err(ZooError::NotResidualizable(format!(
            "fragment ends in {}, not a filter concatenation",
            out.kind.name()
        )));
    }
    let input = fragment.input_node().expect("shape inference checked the input");
    let in_shape = shapes[&input.id];
    let out_shape = shapes[&out.id];
    if in_shape[1..3] != out_shape[1..3] {
        return Err(ZooError::NotResidualizable(format!(
            "fragment changes the grid from {}x{} to {}x{}",
            in_shape[1], in_shape[2], out_shape[1], out_shape[2]
        )));
    }
    let mut g = fragment.clone();
    let expansion = ConvSpec::new((1, 1), 1, Padding::Same, in_shape[3]).with_activation(Activation::None);
    g.nodes.push(crate::graph::NodeSpec::new("expand", NodeKind::Conv(expansion), &[&out.id]));
    g.nodes.push(crate::graph::NodeSpec::new(
        "sum",
        NodeKind::ResidualAdd { alpha },
        &[&input.id, "expand"],
    ));
    g.nodes.push(crate::graph::NodeSpec::new("relu", NodeKind::Relu, &["sum"]));
    g.output_id = "relu".into();
    infer_shapes(&g)?;
    Ok(g)
}

fn output_shape(frag: &GraphSpec) -> Result<Shape, ZooError> {
    Ok(infer_shapes(frag)?[&frag.output_id])
}

/// The whole network: stem, A blocks, Reduction-A, B blocks, Reduction-B,
/// C blocks, then global average pool, dropout, fully connected and softmax.
pub fn assemble(config: &ArchConfig) -> Result<GraphSpec, ZooError> {
    config.check()?;
    let mut b = GraphBuilder::new(config.input_shape());
    let stem = build_stem(config)?;
    let mut shape = output_shape(&stem)?;
    let mut cur = b.splice(&stem, GraphBuilder::INPUT_ID, "stem");

    let stages: [(&str, usize, Option<Grid>); 5] = [
        ("inception_a", config.block_counts.a, Some(Grid::A35)),
        ("reduction_a", 1, None),
        ("inception_b", config.block_counts.b, Some(Grid::B17)),
        ("reduction_b", 1, None),
        ("inception_c", config.block_counts.c, Some(Grid::C8)),
    ];
    for (name, count, grid) in stages {
        for i in 1..=count {
            let frag = match (grid, name) {
                (Some(grid), _) => build_inception_block(config, grid, shape)?,
                (None, "reduction_a") => build_reduction_a(config, shape)?,
                (None, _) => build_reduction_b(config, shape)?,
            };
            shape = output_shape(&frag)?;
            let prefix = if grid.is_some() { format!("{name}_{i}") } else { name.to_string() };
            cur = b.splice(&frag, &cur, &prefix);
        }
    }

    let pool = b.add(POOL_ID, NodeKind::GlobalAvgPool, &[&cur]);
    let drop = b.add(DROPOUT_ID, NodeKind::Dropout { keep: config.dropout_keep }, &[&pool]);
    let logits = b.add(
        LOGITS_ID,
        NodeKind::FullyConnected {
            out_features: config.num_classes,
        },
        &[&drop],
    );
    let out = b.add(OUTPUT_ID, NodeKind::Softmax, &[&logits]);
    let graph = b.finish(out);
    infer_shapes(&graph)?;
    Ok(graph)
}
