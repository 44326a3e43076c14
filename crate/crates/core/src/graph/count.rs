//! Parameter and multiply-accumulate counting.
//!
//! MACs are per image. Pooling, normalization, activations and merges cost no
//! MACs; their elementwise work is reported separately.

use serde::{Deserialize, Serialize};

use super::{infer_shapes, GraphSpec, NodeKind, ShapeError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeParams {
    pub id: String,
    pub trainable: u64,
    /// BatchNorm running mean and variance.
    pub non_trainable: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: u64,
    pub non_trainable: u64,
    /// Parametric nodes only, in graph list order.
    pub per_node: Vec<NodeParams>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeFlops {
    pub id: String,
    pub macs: u64,
    pub elementwise: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub total_macs: u64,
    pub total_elementwise: u64,
    /// Every node, in graph list order.
    pub per_node: Vec<NodeFlops>,
}

/// Conv: `Kh*Kw*Cin*Cout + Cout`; BatchNorm: `2C` trainable plus `2C` running
/// statistics; FullyConnected: `in*out + out`.
pub fn count_params(graph: &GraphSpec) -> Result<ParamCount, ShapeError> {
    let shapes = infer_shapes(graph)?;
    let mut per_node = Vec::new();
    for n in &graph.nodes {
        let input = |k: usize| shapes[&n.inputs[k]];
        let (trainable, non_trainable) = match &n.kind {
            NodeKind::Conv(s) => {
                let cin = input(0)[3] as u64;
                let cout = s.out_channels as u64;
                ((s.kernel_h * s.kernel_w) as u64 * cin * cout + cout, 0)
            }
            NodeKind::BatchNorm(_) => {
                let c = input(0)[3] as u64;
                (2 * c, 2 * c)
            }
            NodeKind::FullyConnected { out_features } => {
                let [_, h, w, c] = input(0);
                let fin = (h * w * c) as u64;
                let fout = *out_features as u64;
                (fin * fout + fout, 0)
            }
            _ => continue,
        };
        per_node.push(NodeParams {
            id: n.id.clone(),
            trainable,
            non_trainable,
        });
    }
    Ok(ParamCount {
        total: per_node.iter().map(|p| p.trainable).sum(),
        non_trainable: per_node.iter().map(|p| p.non_trainable).sum(),
        per_node,
    })
}

pub fn count_flops(graph: &GraphSpec) -> Result<FlopCount, ShapeError> {
    let shapes = infer_shapes(graph)?;
    let mut per_node = Vec::with_capacity(graph.nodes.len());
    for n in &graph.nodes {
        let [_, h, w, c] = shapes[&n.id];
        let out_elems = (h * w * c) as u64;
        let input = |k: usize| shapes[&n.inputs[k]];
        let (macs, elementwise) = match &n.kind {
            NodeKind::Input => (0, 0),
            NodeKind::Conv(s) => {
                let cin = input(0)[3] as u64;
                ((s.kernel_h * s.kernel_w) as u64 * cin * out_elems, 0)
            }
            NodeKind::FullyConnected { out_features } => {
                let [_, ih, iw, ic] = input(0);
                ((ih * iw * ic * out_features) as u64, 0)
            }
            NodeKind::MaxPool(s) | NodeKind::AvgPool(s) => (0, out_elems * (s.kernel_h * s.kernel_w) as u64),
            NodeKind::GlobalAvgPool => {
                let [_, ih, iw, ic] = input(0);
                (0, (ih * iw * ic) as u64)
            }
            NodeKind::BatchNorm(_)
            | NodeKind::Relu
            | NodeKind::ResidualAdd { .. }
            | NodeKind::Dropout { .. }
            | NodeKind::Softmax => (0, out_elems),
            NodeKind::Concat => (0, 0),
        };
        per_node.push(NodeFlops {
            id: n.id.clone(),
            macs,
            elementwise,
        });
    }
    Ok(FlopCount {
        total_macs: per_node.iter().map(|f| f.macs).sum(),
        total_elementwise: per_node.iter().map(|f| f.elementwise).sum(),
        per_node,
    })
}

/// Longest chain of weight layers (Conv, FullyConnected) from Input to output.
pub fn depth(graph: &GraphSpec) -> Result<usize, ShapeError> {
    let order = graph.check_structure()?;
    let index = graph.index()?;
    let mut longest = vec![0usize; graph.nodes.len()];
    for i in order {
        let n = &graph.nodes[i];
        let below = n.inputs.iter().map(|id| longest[index[id.as_str()]]).max().unwrap_or(0);
        let own = matches!(n.kind, NodeKind::Conv(_) | NodeKind::FullyConnected { .. }) as usize;
        longest[i] = below + own;
    }
    Ok(longest[index[graph.output_id.as_str()]])
}
