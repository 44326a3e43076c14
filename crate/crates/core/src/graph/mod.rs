//! Typed DAG description of a network.
//!
//! A [`GraphSpec`] is an ordered list of [`NodeSpec`]s. The list order is only
//! a presentation order: execution follows the data dependencies (ties broken
//! by list position), so any topological reordering describes the same network.

mod count;
mod dot;
mod exec;
mod shape;
mod validate;

pub use count::{count_flops, count_params, depth, FlopCount, NodeFlops, NodeParams, ParamCount};
pub use dot::export_dot;
pub use exec::{backward, execute, ExecError, Gradients, Network, Trace};
pub use shape::{infer_shapes, Shape, ShapeError, ShapeMap};
pub use validate::{validate, Rule, Ruleset, Violation};

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::{ConvSpec, PoolSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSpec {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BatchNormSpec {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            momentum: 0.99,
        }
    }
}

/// Layer type and its hyperparameters. Serialized as `"kind"` plus `"params"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params")]
pub enum NodeKind {
    Input,
    Conv(ConvSpec),
    MaxPool(PoolSpec),
    AvgPool(PoolSpec),
    BatchNorm(BatchNormSpec),
    #[serde(rename = "ReLU")]
    Relu,
    Concat,
    /// `shortcut + alpha * residual`; inputs are `[shortcut, residual]`.
    ResidualAdd { alpha: f64 },
    GlobalAvgPool,
    Dropout { keep: f64 },
    FullyConnected { out_features: usize },
    Softmax,
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input => "Input",
            NodeKind::Conv(_) => "Conv",
            NodeKind::MaxPool(_) => "MaxPool",
            NodeKind::AvgPool(_) => "AvgPool",
            NodeKind::BatchNorm(_) => "BatchNorm",
            NodeKind::Relu => "ReLU",
            NodeKind::Concat => "Concat",
            NodeKind::ResidualAdd { .. } => "ResidualAdd",
            NodeKind::GlobalAvgPool => "GlobalAvgPool",
            NodeKind::Dropout { .. } => "Dropout",
            NodeKind::FullyConnected { .. } => "FullyConnected",
            NodeKind::Softmax => "Softmax",
        }
    }

    /// Allowed input count as `(min, max)`.
    pub fn arity(&self) -> (usize, usize) {
        match self {
            NodeKind::Input => (0, 0),
            NodeKind::Concat => (2, usize::MAX),
            NodeKind::ResidualAdd { .. } => (2, 2),
            _ => (1, 1),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            NodeKind::Conv(_) | NodeKind::BatchNorm(_) | NodeKind::FullyConnected { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: NodeKind,
    #[serde(default)]
    pub inputs: Vec<String>,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, kind: NodeKind, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub nodes: Vec<NodeSpec>,
    /// NHWC, including the nominal batch size used for shape reports.
    pub input_shape: [usize; 4],
    pub output_id: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("node `{node}` reads unknown input `{input}`")]
    UnknownInput { node: String, input: String },
    #[error("cycle through nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("output node `{0}` does not exist")]
    UnknownOutput(String),
    #[error("graph must contain exactly one Input node, found {0}")]
    InputCount(usize),
    #[error("node `{node}` ({kind}) takes {min}..={max} inputs, got {got}")]
    Arity {
        node: String,
        kind: &'static str,
        min: usize,
        max: usize,
        got: usize,
    },
    #[error("invalid graph JSON: {0}")]
    Json(String),
}

impl GraphSpec {
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        serde_json::from_str(text).map_err(|e| GraphError::Json(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn input_node(&self) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.kind == NodeKind::Input)
    }

    pub fn index(&self) -> Result<HashMap<&str, usize>, GraphError> {
        let mut index = HashMap::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id.as_str(), i).is_some() {
                return Err(GraphError::DuplicateId(n.id.clone()));
            }
        }
        Ok(index)
    }

    /// Node indices in dependency order; among ready nodes the earliest in the
    /// list goes first, so the order is deterministic.
    pub fn topo_order(&self) -> Result<Vec<usize>, GraphError> {
        let index = self.index()?;
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for input in &n.inputs {
                let &j = index.get(input.as_str()).ok_or_else(|| GraphError::UnknownInput {
                    node: n.id.clone(),
                    input: input.clone(),
                })?;
                indegree[i] += 1;
                consumers[j].push(i);
            }
        }
        let mut ready: BTreeSet<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = (0..self.nodes.len())
                .filter(|&i| indegree[i] > 0)
                .map(|i| self.nodes[i].id.clone())
                .collect();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Structural checks needed before shapes can be inferred: unique ids,
    /// resolvable inputs, acyclicity, arity, a single Input node and an
    /// existing output. Returns the topological order.
    pub fn check_structure(&self) -> Result<Vec<usize>, GraphError> {
        let order = self.topo_order()?;
        let inputs = self.nodes.iter().filter(|n| n.kind == NodeKind::Input).count();
        if inputs != 1 {
            return Err(GraphError::InputCount(inputs));
        }
        for n in &self.nodes {
            let (min, max) = n.kind.arity();
            if n.inputs.len() < min || n.inputs.len() > max {
                return Err(GraphError::Arity {
                    node: n.id.clone(),
                    kind: n.kind.name(),
                    min,
                    max,
                    got: n.inputs.len(),
                });
            }
        }
        if self.node(&self.output_id).is_none() {
            return Err(GraphError::UnknownOutput(self.output_id.clone()));
        }
        Ok(order)
    }

    pub fn count_kind(&self, pred: impl Fn(&NodeKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.kind)).count()
    }
}

/// Incremental graph construction used by the architecture builders.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vec<NodeSpec>,
    input_shape: [usize; 4],
}

impl GraphBuilder {
    pub const INPUT_ID: &'static str = "input";

    pub fn new(input_shape: [usize; 4]) -> Self {
        Self {
            nodes: vec![NodeSpec::new(Self::INPUT_ID, NodeKind::Input, &[])],
            input_shape,
        }
    }

    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    /// Appends a node and returns its id.
    pub fn add(&mut self, id: impl Into<String>, kind: NodeKind, inputs: &[&str]) -> String {
        let node = NodeSpec::new(id, kind, inputs);
        let id = node.id.clone();
        self.nodes.push(node);
        id
    }

    /// Copies `fragment` into this graph with every id prefixed by `prefix/`,
    /// wiring the fragment's Input to `at`. Returns the id of the spliced
    /// fragment's output.
    pub fn splice(&mut self, fragment: &GraphSpec, at: &str, prefix: &str) -> String {
        let input_id = fragment
            .input_node()
            .map(|n| n.id.clone())
            .unwrap_or_default();
        let rename = |id: &str| {
            if id == input_id {
                at.to_string()
            } else {
                format!("{prefix}/{id}")
            }
        };
        for n in &fragment.nodes {
            if n.kind == NodeKind::Input {
                continue;
            }
            self.nodes.push(NodeSpec {
                id: rename(&n.id),
                kind: n.kind.clone(),
                inputs: n.inputs.iter().map(|i| rename(i)).collect(),
            });
        }
        rename(&fragment.output_id)
    }

    pub fn finish(self, output_id: impl Into<String>) -> GraphSpec {
        GraphSpec {
            nodes: self.nodes,
            input_shape: self.input_shape,
            output_id: output_id.into(),
        }
    }

    /// Snapshot of the graph built so far, ending at `output_id`.
    pub fn snapshot(&self, output_id: &str) -> GraphSpec {
        self.clone().finish(output_id)
    }
}
