use std::collections::BTreeMap;

use thiserror::Error;

use super::{GraphError, GraphSpec, NodeKind};
use crate::ops::OpError;

/// NHWC dims of one activation.
pub type Shape = [usize; 4];

/// Inferred activation shape of every node, keyed by node id.
pub type ShapeMap = BTreeMap<String, Shape>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("shape conflict at `{node}` ({kind}): {left:?} vs {right:?}")]
    Conflict {
        node: String,
        kind: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("node `{node}`: {source}")]
    Op {
        node: String,
        #[source]
        source: OpError,
    },
}

impl ShapeError {
    pub fn node(&self) -> Option<&str> {
        match self {
            ShapeError::Graph(_) => None,
            ShapeError::Conflict { node, .. } | ShapeError::Op { node, .. } => Some(node),
        }
    }
}

/// Static shape of every node. Uses the same grid rules as the kernels.
pub fn infer_shapes(graph: &GraphSpec) -> Result<ShapeMap, ShapeError> {
    let order = graph.check_structure()?;
    let mut by_index: Vec<Option<Shape>> = vec![None; graph.nodes.len()];
    let index = graph.index()?;
    for i in order {
        let node = &graph.nodes[i];
        let ins: Vec<Shape> = node
            .inputs
            .iter()
            .map(|id| by_index[index[id.as_str()]].expect("inputs precede consumers"))
            .collect();
        by_index[i] = Some(node_shape(&node.id, &node.kind, &ins, graph.input_shape)?);
    }
    Ok(graph
        .nodes
        .iter()
        .zip(by_index)
        .map(|(n, s)| (n.id.clone(), s.expect("all nodes visited")))
        .collect())
}

pub(crate) fn node_shape(id: &str, kind: &NodeKind, ins: &[Shape], input_shape: Shape) -> Result<Shape, ShapeError> {
    let op_err = |source: OpError| ShapeError::Op {
        node: id.to_string(),
        source,
    };
    Ok(match kind {
        NodeKind::Input => input_shape,
        NodeKind::Conv(spec) => {
            let [n, h, w, _] = ins[0];
            if spec.out_channels == 0 {
                return Err(op_err(OpError::NonPositive("out_channels")));
            }
            let g = spec.window().resolve(h, w).map_err(op_err)?;
            [n, g.out_h, g.out_w, spec.out_channels]
        }
        NodeKind::MaxPool(spec) | NodeKind::AvgPool(spec) => {
            let [n, h, w, c] = ins[0];
            let g = spec.window().resolve(h, w).map_err(op_err)?;
            [n, g.out_h, g.out_w, c]
        }
        NodeKind::BatchNorm(_) | NodeKind::Relu | NodeKind::Softmax => ins[0],
        NodeKind::Dropout { keep } => {
            if !(*keep > 0.0 && *keep <= 1.0) {
                return Err(op_err(OpError::BadKeepProb(*keep)));
            }
            ins[0]
        }
        NodeKind::Concat => {
            let first = ins[0];
            let mut channels = 0;
            for s in ins {
                if s[..3] != first[..3] {
                    return Err(ShapeError::Conflict {
                        node: id.to_string(),
                        kind: kind.name(),
                        left: first,
                        right: *s,
                    });
                }
                channels += s[3];
            }
            [first[0], first[1], first[2], channels]
        }
        NodeKind::ResidualAdd { .. } => {
            if ins[0] != ins[1] {
                return Err(ShapeError::Conflict {
                    node: id.to_string(),
                    kind: kind.name(),
                    left: ins[0],
                    right: ins[1],
                });
            }
            ins[0]
        }
        NodeKind::GlobalAvgPool => [ins[0][0], 1, 1, ins[0][3]],
        NodeKind::FullyConnected { out_features } => {
            if *out_features == 0 {
                return Err(op_err(OpError::NonPositive("out_features")));
            }
            [ins[0][0], 1, 1, *out_features]
        }
    })
}
