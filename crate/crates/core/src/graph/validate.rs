use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::shape::{node_shape, Shape, ShapeError};
use super::{GraphError, GraphSpec, NodeKind};
use crate::ops::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ruleset {
    /// Ids, references, acyclicity, arity, single input, reachable output.
    Generic,
    /// Generic plus the residual-block rules: no BatchNorm on a sum, linear
    /// filter-expansion conv on every residual branch, channel-matched sums.
    InceptionResNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    DuplicateId,
    UnknownInput,
    Cycle,
    Arity,
    InputCount,
    OutputUnreachable,
    BatchNormOnSum,
    ActivatedResidual,
    ResidualChannelMismatch,
    ShapeInference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub node: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at `{}`: {}", self.rule, self.node, self.message)
    }
}

/// Collects every rule violation. An empty list means the graph is valid.
pub fn validate(graph: &GraphSpec, ruleset: Ruleset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |rule, node: &str, message: String| {
        out.push(Violation {
            rule,
            node: node.to_string(),
            message,
        })
    };

    let mut seen = HashSet::new();
    for n in &graph.nodes {
        if !seen.insert(n.id.as_str()) {
            push(Rule::DuplicateId, &n.id, "id is used more than once".into());
        }
    }
    let index: HashMap<&str, usize> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    for n in &graph.nodes {
        for input in &n.inputs {
            if !index.contains_key(input.as_str()) {
                push(Rule::UnknownInput, &n.id, format!("input `{input}` does not exist"));
            }
        }
        let (min, max) = n.kind.arity();
        if n.inputs.len() < min || n.inputs.len() > max {
            let want = if max == usize::MAX {
                format!("at least {min}")
            } else if min == max {
                format!("exactly {min}")
            } else {
                format!("{min}..={max}")
            };
            push(
                Rule::Arity,
                &n.id,
                format!("{} takes {want} inputs, has {}", n.kind.name(), n.inputs.len()),
            );
        }
    }
    let inputs: Vec<_> = graph.nodes.iter().filter(|n| n.kind == NodeKind::Input).collect();
    if inputs.len() != 1 {
        push(
            Rule::InputCount,
            inputs.first().map_or("", |n| n.id.as_str()),
            format!("expected exactly one Input node, found {}", inputs.len()),
        );
    }
    let order = match graph.topo_order() {
        Ok(order) => Some(order),
        Err(GraphError::Cycle(ids)) => {
            push(Rule::Cycle, ids.first().map_or("", |s| s.as_str()), format!("cycle through {ids:?}"));
            None
        }
        // duplicate / unknown references are already reported above
        Err(_) => None,
    };
    match index.get(graph.output_id.as_str()) {
        None => push(
            Rule::OutputUnreachable,
            &graph.output_id,
            "output node does not exist".into(),
        ),
        Some(&out_idx) => {
            if inputs.len() == 1 && !reaches(graph, &index, out_idx, inputs[0].id.as_str()) {
                push(
                    Rule::OutputUnreachable,
                    &graph.output_id,
                    "output does not depend on the Input node".into(),
                );
            }
        }
    }

    if ruleset == Ruleset::Generic {
        return out;
    }

    for n in &graph.nodes {
        match &n.kind {
            NodeKind::BatchNorm(_) => {
                for input in &n.inputs {
                    if let Some(&j) = index.get(input.as_str()) {
                        if matches!(graph.nodes[j].kind, NodeKind::ResidualAdd { .. }) {
                            push(
                                Rule::BatchNormOnSum,
                                &n.id,
                                format!("BatchNorm reads the residual sum `{input}`"),
                            );
                        }
                    }
                }
            }
            NodeKind::ResidualAdd { .. } => {
                let Some(residual) = n.inputs.get(1) else { continue };
                let Some(&j) = index.get(residual.as_str()) else { continue };
                match &graph.nodes[j].kind {
                    NodeKind::Conv(spec) if spec.activation == Activation::None => {}
                    NodeKind::Conv(_) => push(
                        Rule::ActivatedResidual,
                        &n.id,
                        format!("residual input `{residual}` is an activated convolution"),
                    ),
                    other => push(
                        Rule::ActivatedResidual,
                        &n.id,
                        format!(
                            "residual input `{residual}` is {}, not a linear filter-expansion convolution",
                            other.name()
                        ),
                    ),
                }
            }
            _ => {}
        }
    }

    // Lenient shape pass: keeps going past failures so every mismatched sum is reported.
    if let (Some(order), true) = (order, inputs.len() == 1) {
        let mut shapes: Vec<Option<Shape>> = vec![None; graph.nodes.len()];
        for i in order {
            let n = &graph.nodes[i];
            let (min, max) = n.kind.arity();
            if n.inputs.len() < min || n.inputs.len() > max {
                continue;
            }
            let ins: Option<Vec<Shape>> = n.inputs.iter().map(|id| shapes[index[id.as_str()]]).collect();
            let Some(ins) = ins else { continue };
            match node_shape(&n.id, &n.kind, &ins, graph.input_shape) {
                Ok(s) => shapes[i] = Some(s),
                Err(ShapeError::Conflict { left, right, .. }) if matches!(n.kind, NodeKind::ResidualAdd { .. }) => {
                    push(
                        Rule::ResidualChannelMismatch,
                        &n.id,
                        format!("shortcut {left:?} vs residual {right:?}"),
                    );
                    shapes[i] = Some(left);
                }
                Err(e) => push(Rule::ShapeInference, &n.id, e.to_string()),
            }
        }
    }
    out
}

fn reaches(graph: &GraphSpec, index: &HashMap<&str, usize>, from: usize, target: &str) -> bool {
    let mut stack = vec![from];
    let mut seen = vec![false; graph.nodes.len()];
    while let Some(i) = stack.pop() {
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        if graph.nodes[i].id == target {
            return true;
        }
        stack.extend(graph.nodes[i].inputs.iter().filter_map(|s| index.get(s.as_str()).copied()));
    }
    false
}
