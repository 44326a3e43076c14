//! Serialized module schemas, one JSON file per architecture.
//!
//! A module is a list of layers applied in sequence. `mixed` runs each branch
//! on the same input and concatenates the branch outputs along channels, in
//! branch order. Filter counts are integers, or one of the symbols `k`, `l`,
//! `m`, `n`, which resolve to the Reduction-A filter banks of the config.

use serde::{Deserialize, Serialize};

use super::{BlockCounts, ReductionAParams, Variant, ZooError};
use crate::ops::Padding;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Filters {
    Count(usize),
    Symbol(String),
}

impl Filters {
    pub fn resolve(&self, red_a: &ReductionAParams) -> Result<usize, ZooError> {
        match self {
            Filters::Count(n) => Ok(*n),
            Filters::Symbol(s) => match s.as_str() {
                "k" => Ok(red_a.k),
                "l" => Ok(red_a.l),
                "m" => Ok(red_a.m),
                "n" => Ok(red_a.n),
                other => Err(ZooError::Definition(format!("unknown filter symbol `{other}`"))),
            },
        }
    }
}

fn one() -> usize {
    1
}

fn same() -> Padding {
    Padding::Same
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    /// Convolution unit: Conv, BatchNorm, ReLU.
    Conv {
        kernel: [usize; 2],
        filters: Filters,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "same")]
        padding: Padding,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Mixed {
        branches: Vec<Vec<Layer>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDefinition {
    pub name: String,
    /// A, B and C blocks get a filter-expansion conv and a scaled residual sum.
    pub residual: bool,
    pub block_counts: BlockCounts,
    pub reduction_a_filters: ReductionAParams,
    pub stem: Vec<Layer>,
    pub inception_a: Vec<Layer>,
    pub reduction_a: Vec<Layer>,
    pub inception_b: Vec<Layer>,
    pub reduction_b: Vec<Layer>,
    pub inception_c: Vec<Layer>,
}

const INCEPTION_V4: &str = include_str!("../../archs/inception_v4.json");
const INCEPTION_RESNET_V1: &str = include_str!("../../archs/inception_resnet_v1.json");
const INCEPTION_RESNET_V2: &str = include_str!("../../archs/inception_resnet_v2.json");

impl ArchDefinition {
    pub fn from_json(text: &str) -> Result<Self, ZooError> {
        let def: ArchDefinition = serde_json::from_str(text).map_err(|e| ZooError::Definition(e.to_string()))?;
        def.check()?;
        Ok(def)
    }

    /// The definition file shipped for `variant`.
    pub fn shipped(variant: Variant) -> Self {
        let text = match variant {
            Variant::InceptionV4 => INCEPTION_V4,
            Variant::InceptionResNetV1 => INCEPTION_RESNET_V1,
            Variant::InceptionResNetV2 => INCEPTION_RESNET_V2,
        };
        Self::from_json(text).expect("shipped definition files are valid")
    }

    pub fn shipped_text(variant: Variant) -> &'static str {
        match variant {
            Variant::InceptionV4 => INCEPTION_V4,
            Variant::InceptionResNetV1 => INCEPTION_RESNET_V1,
            Variant::InceptionResNetV2 => INCEPTION_RESNET_V2,
        }
    }

    pub fn modules(&self) -> [(&'static str, &[Layer]); 6] {
        [
            ("stem", &self.stem),
            ("inception_a", &self.inception_a),
            ("reduction_a", &self.reduction_a),
            ("inception_b", &self.inception_b),
            ("reduction_b", &self.reduction_b),
            ("inception_c", &self.inception_c),
        ]
    }

    /// Positive sizes everywhere, non-empty modules and branches, at least two
    /// branches per `mixed`, and symbols that resolve.
    pub fn check(&self) -> Result<(), ZooError> {
        self.reduction_a_filters.check()?;
        for (module, layers) in self.modules() {
            check_layers(layers, &self.reduction_a_filters)
                .map_err(|e| ZooError::Definition(format!("{}/{module}: {e}", self.name)))?;
        }
        Ok(())
    }
}

fn check_layers(layers: &[Layer], red_a: &ReductionAParams) -> Result<(), String> {
    if layers.is_empty() {
        return Err("empty layer list".into());
    }
    for layer in layers {
        match layer {
            Layer::Conv {
                kernel,
                filters,
                stride,
                ..
            } => {
                let f = filters.resolve(red_a).map_err(|e| e.to_string())?;
                if kernel.contains(&0) || *stride == 0 || f == 0 {
                    return Err(format!("conv with a zero size: {layer:?}"));
                }
            }
            Layer::MaxPool { kernel, stride, .. } | Layer::AvgPool { kernel, stride, .. } => {
                if *kernel == 0 || *stride == 0 {
                    return Err(format!("pool with a zero size: {layer:?}"));
                }
            }
            Layer::Mixed { branches } => {
                if branches.len() < 2 {
                    return Err("mixed layer needs at least two branches".into());
                }
                for b in branches {
                    check_layers(b, red_a)?;
                }
            }
        }
    }
    Ok(())
}
