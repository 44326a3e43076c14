//! Forward execution in topological order and the reverse-mode sweep.
//!
//! The batch dimension of the input is free; only H, W and C must match
//! `GraphSpec::input_shape`.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{infer_shapes, GraphSpec, NodeKind, ShapeError, ShapeMap};
use crate::ops::{self, BatchNormCache, DropoutMask, Mode, OpError, PoolMode};
use crate::params::{fnv1a, param_name, ParamError, ParamRole, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("input has shape {got:?}, graph expects [N, {}, {}, {}]", expected[1], expected[2], expected[3])]
    InputShape { expected: [usize; 4], got: Vec<usize> },
    #[error("node `{node}`: {source}")]
    Op {
        node: String,
        #[source]
        source: OpError,
    },
    #[error("trace was recorded on a different graph")]
    ContextMismatch,
    #[error("backward needs a Train-mode trace")]
    NotTrainMode,
    #[error("gradient for `{node}` has shape {got:?}, expected {expected:?}")]
    GradShape {
        node: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

/// A graph prepared for execution: checked, shape-inferred and ordered.
#[derive(Debug, Clone)]
pub struct Network {
    graph: GraphSpec,
    shapes: ShapeMap,
    order: Vec<usize>,
    inputs: Vec<Vec<usize>>,
    input_idx: usize,
    output_idx: usize,
    fingerprint: u64,
}

/// Per-node state kept for the backward pass.
#[derive(Debug, Clone)]
enum Aux<T: Element> {
    None,
    BatchNorm(BatchNormCache<T>),
    Dropout(Option<DropoutMask<T>>),
}

/// Everything one forward pass produced.
#[derive(Debug, Clone)]
pub struct Trace<T: Element> {
    fingerprint: u64,
    mode: Mode,
    ids: Vec<String>,
    order: Vec<usize>,
    output_idx: usize,
    outputs: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Element> Trace<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.outputs[self.output_idx]
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.outputs.swap_remove(self.output_idx)
    }

    pub fn get(&self, id: &str) -> Option<&Tensor<T>> {
        self.ids.iter().position(|n| n == id).map(|i| &self.outputs[i])
    }

    /// First node, in execution order, whose output holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.order
            .iter()
            .find(|&&i| !self.outputs[i].is_finite())
            .map(|&i| self.ids[i].as_str())
    }

    /// Writes the moved BatchNorm running statistics of a Train-mode pass
    /// into `params`. Infer-mode traces change nothing.
    pub fn commit_running_stats(&self, params: &mut ParamStore<T>) -> Result<(), ParamError> {
        for (i, aux) in self.aux.iter().enumerate() {
            let Aux::BatchNorm(cache) = aux else { continue };
            let (Some(mean), Some(var)) = (&cache.running_mean, &cache.running_var) else {
                continue;
            };
            for (role, t) in [(ParamRole::RunningMean, mean), (ParamRole::RunningVar, var)] {
                let name = param_name(&self.ids[i], role);
                *params.get_mut(&name).ok_or_else(|| ParamError::Missing(name.clone()))? = t.clone();
            }
        }
        Ok(())
    }
}

/// Gradients of a scalar objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Element> {
    /// Keyed by parameter name; running statistics never appear.
    pub params: BTreeMap<String, Tensor<T>>,
    /// Gradient with respect to the graph input.
    pub input: Tensor<T>,
}

impl Network {
    pub fn new(graph: GraphSpec) -> Result<Self, ShapeError> {
        let shapes = infer_shapes(&graph)?;
        let order = graph.check_structure()?;
        let index = graph.index()?;
        let inputs = graph
            .nodes
            .iter()
            .map(|n| n.inputs.iter().map(|id| index[id.as_str()]).collect())
            .collect();
        let input_idx = graph
            .nodes
            .iter()
            .position(|n| n.kind == NodeKind::Input)
            .expect("structure check guarantees one Input");
        let output_idx = index[graph.output_id.as_str()];
        let fingerprint = fnv1a(serde_json::to_string(&graph).expect("graph serializes").as_bytes());
        Ok(Self {
            graph,
            shapes,
            order,
            inputs,
            input_idx,
            output_idx,
            fingerprint,
        })
    }

    pub fn graph(&self) -> &GraphSpec {
        &self.graph
    }

    pub fn shapes(&self) -> &ShapeMap {
        &self.shapes
    }

    pub fn output_shape(&self) -> [usize; 4] {
        self.shapes[&self.graph.output_id]
    }

    /// Evaluates every node. `seed` drives Dropout masks in Train mode; each
    /// Dropout node mixes in a hash of its id.
    pub fn forward<T: Element>(
        &self,
        params: &ParamStore<T>,
        input: &Tensor<T>,
        mode: Mode,
        seed: u64,
    ) -> Result<Trace<T>, ExecError> {
        let dims = input.dims();
        let expected = self.graph.input_shape;
        if dims.len() != 4 || dims[1..] != expected[1..] || dims[0] == 0 {
            return Err(ExecError::InputShape {
                expected,
                got: dims.to_vec(),
            });
        }
        let n = self.graph.nodes.len();
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut aux: Vec<Aux<T>> = vec![Aux::None; n];
        for &i in &self.order {
            let node = &self.graph.nodes[i];
            let ins: Vec<&Tensor<T>> = self.inputs[i]
                .iter()
                .map(|&j| outputs[j].as_ref().expect("inputs run first"))
                .collect();
            let op = |source: OpError| ExecError::Op {
                node: node.id.clone(),
                source,
            };
            let weight = |role| params.require(&param_name(&node.id, role));
            let out = match &node.kind {
                NodeKind::Input => input.clone(),
                NodeKind::Conv(spec) => {
                    ops::conv2d_forward(ins[0], weight(ParamRole::Weight)?, weight(ParamRole::Bias)?, spec)
                        .map_err(op)?
                }
                NodeKind::MaxPool(spec) => ops::pool2d(ins[0], PoolMode::Max, spec).map_err(op)?,
                NodeKind::AvgPool(spec) => ops::pool2d(ins[0], PoolMode::Avg, spec).map_err(op)?,
                NodeKind::BatchNorm(spec) => {
                    let bn = params.batchnorm(&node.id, spec.epsilon, spec.momentum)?;
                    let (y, cache) = ops::batchnorm_forward(ins[0], &bn, mode).map_err(op)?;
                    aux[i] = Aux::BatchNorm(cache);
                    y
                }
                NodeKind::Relu => ops::relu(ins[0]),
                NodeKind::Concat => ops::concat_channels(&ins).map_err(op)?,
                NodeKind::ResidualAdd { alpha } => {
                    ops::add_scaled(ins[0], ins[1], T::from_f64_lossy(*alpha)).map_err(op)?
                }
                NodeKind::GlobalAvgPool => ops::global_avgpool(ins[0]).map_err(op)?,
                NodeKind::Dropout { keep } => {
                    let (y, mask) = ops::dropout(ins[0], *keep, mode, seed ^ fnv1a(node.id.as_bytes())).map_err(op)?;
                    aux[i] = Aux::Dropout(mask);
                    y
                }
                NodeKind::FullyConnected { .. } => {
                    ops::fully_connected(ins[0], weight(ParamRole::Weight)?, weight(ParamRole::Bias)?).map_err(op)?
                }
                NodeKind::Softmax => ops::softmax(ins[0]).map_err(op)?,
            };
            outputs[i] = Some(out);
        }
        Ok(Trace {
            fingerprint: self.fingerprint,
            mode,
            ids: self.graph.nodes.iter().map(|n| n.id.clone()).collect(),
            order: self.order.clone(),
            output_idx: self.output_idx,
            outputs: outputs.into_iter().map(|o| o.expect("every node ran")).collect(),
            aux,
        })
    }

    /// Backpropagates `grad_output` from the graph output.
    pub fn backward<T: Element>(
        &self,
        params: &ParamStore<T>,
        trace: &Trace<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Gradients<T>, ExecError> {
        self.backward_from(params, trace, &self.graph.output_id.clone(), grad_output)
    }

    /// Backpropagates `grad` seeded at node `from` (e.g. the logits, when the
    /// loss gradient is computed outside the graph).
    pub fn backward_from<T: Element>(
        &self,
        params: &ParamStore<T>,
        trace: &Trace<T>,
        from: &str,
        grad: &Tensor<T>,
    ) -> Result<Gradients<T>, ExecError> {
        if trace.fingerprint != self.fingerprint {
            return Err(ExecError::ContextMismatch);
        }
        let start = self
            .graph
            .nodes
            .iter()
            .position(|n| n.id == from)
            .ok_or_else(|| ExecError::UnknownNode(from.to_string()))?;
        if grad.dims() != trace.outputs[start].dims() {
            return Err(ExecError::GradShape {
                node: from.to_string(),
                expected: trace.outputs[start].dims().to_vec(),
                got: grad.dims().to_vec(),
            });
        }
        let n = self.graph.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[start] = Some(grad.clone());
        let mut param_grads = BTreeMap::new();

        for &i in self.order.iter().rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.graph.nodes[i];
            let op = |source: OpError| ExecError::Op {
                node: node.id.clone(),
                source,
            };
            let saved_in = |k: usize| &trace.outputs[self.inputs[i][k]];
            let saved_out = &trace.outputs[i];
            let weight = |role| params.require(&param_name(&node.id, role));
            let input_grads: Vec<Tensor<T>> = match &node.kind {
                NodeKind::Input => {
                    grads[i] = Some(g);
                    continue;
                }
                NodeKind::Conv(spec) => {
                    let cg = ops::conv2d_backward(&g, saved_in(0), saved_out, weight(ParamRole::Weight)?, spec)
                        .map_err(op)?;
                    param_grads.insert(param_name(&node.id, ParamRole::Weight), cg.weights);
                    param_grads.insert(param_name(&node.id, ParamRole::Bias), cg.bias);
                    vec![cg.input]
                }
                NodeKind::MaxPool(spec) => vec![ops::pool2d_backward(&g, saved_in(0), PoolMode::Max, spec).map_err(op)?],
                NodeKind::AvgPool(spec) => vec![ops::pool2d_backward(&g, saved_in(0), PoolMode::Avg, spec).map_err(op)?],
                NodeKind::BatchNorm(_) => {
                    let Aux::BatchNorm(cache) = &trace.aux[i] else {
                        return Err(ExecError::ContextMismatch);
                    };
                    if cache.mode != Mode::Train {
                        return Err(ExecError::NotTrainMode);
                    }
                    let (gx, gg, gb) = ops::batchnorm_backward(&g, cache, weight(ParamRole::Gamma)?).map_err(op)?;
                    param_grads.insert(param_name(&node.id, ParamRole::Gamma), gg);
                    param_grads.insert(param_name(&node.id, ParamRole::Beta), gb);
                    vec![gx]
                }
                NodeKind::Relu => vec![ops::relu_backward(&g, saved_out).map_err(op)?],
                NodeKind::Concat => {
                    let widths: Vec<usize> = (0..self.inputs[i].len()).map(|k| saved_in(k).dims()[3]).collect();
                    ops::concat_channels_backward(&g, &widths).map_err(op)?
                }
                NodeKind::ResidualAdd { alpha } => {
                    let (gs, gr) = ops::add_scaled_backward(&g, T::from_f64_lossy(*alpha));
                    vec![gs, gr]
                }
                NodeKind::GlobalAvgPool => vec![ops::global_avgpool_backward(&g, saved_in(0).dims()).map_err(op)?],
                NodeKind::Dropout { .. } => {
                    let Aux::Dropout(mask) = &trace.aux[i] else {
                        return Err(ExecError::ContextMismatch);
                    };
                    vec![ops::dropout_backward(&g, mask.as_ref())]
                }
                NodeKind::FullyConnected { .. } => {
                    let fg = ops::fully_connected_backward(&g, saved_in(0), weight(ParamRole::Weight)?).map_err(op)?;
                    param_grads.insert(param_name(&node.id, ParamRole::Weight), fg.weights);
                    param_grads.insert(param_name(&node.id, ParamRole::Bias), fg.bias);
                    vec![fg.input]
                }
                NodeKind::Softmax => vec![ops::softmax_backward(&g, saved_out).map_err(op)?],
            };
            for (&j, gj) in self.inputs[i].iter().zip(input_grads) {
                grads[j] = Some(match grads[j].take() {
                    None => gj,
                    Some(acc) => acc.zip_map(&gj, |a, b| a + b).map_err(|e| op(e.into()))?,
                });
            }
        }
        let input = match grads[self.input_idx].take() {
            Some(g) => g,
            None => Tensor::zeros(trace.outputs[self.input_idx].dims()).map_err(|e| ExecError::Op {
                node: self.graph.nodes[self.input_idx].id.clone(),
                source: e.into(),
            })?,
        };
        Ok(Gradients {
            params: param_grads,
            input,
        })
    }
}

/// One-shot forward pass; see [`Network::forward`].
pub fn execute<T: Element>(
    graph: &GraphSpec,
    params: &ParamStore<T>,
    input: &Tensor<T>,
    mode: Mode,
    seed: u64,
) -> Result<Trace<T>, ExecError> {
    Network::new(graph.clone())?.forward(params, input, mode, seed)
}

/// One-shot backward pass; see [`Network::backward`].
pub fn backward<T: Element>(
    graph: &GraphSpec,
    params: &ParamStore<T>,
    trace: &Trace<T>,
    grad_output: &Tensor<T>,
) -> Result<Gradients<T>, ExecError> {
    Network::new(graph.clone())?.backward(params, trace, grad_output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, max_rel_err};
    use crate::graph::{BatchNormSpec, GraphBuilder};
    use crate::ops::{ConvSpec, Padding, PoolSpec};
    use crate::params::init_params;

    #[test]
    fn relu_on_negative_input_is_zero() {
        let mut b = GraphBuilder::new([1, 2, 2, 1]);
        let r = b.add("r", NodeKind::Relu, &["input"]);
        let g = b.finish(r);
        let x = Tensor::full(&[3, 2, 2, 1], -1.5).unwrap();
        let t = execute(&g, &ParamStore::new(), &x, Mode::Infer, 0).unwrap();
        assert!(t.output().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fan_out_residual_gradient() {
        let mut b = GraphBuilder::new([1, 2, 3, 2]);
        let s = b.add("sum", NodeKind::ResidualAdd { alpha: 0.3 }, &["input", "input"]);
        let g = b.finish(s);
        let x = Tensor::from_fn(&[1, 2, 3, 2], |i| i as f64).unwrap();
        let net = Network::new(g).unwrap();
        let p = ParamStore::new();
        let t = net.forward(&p, &x, Mode::Train, 0).unwrap();
        let go = Tensor::from_fn(&[1, 2, 3, 2], |i| 1.0 + i as f64).unwrap();
        let gr = net.backward(&p, &t, &go).unwrap();
        for (a, b) in gr.input.data().iter().zip(go.data()) {
            assert!((a - 1.3 * b).abs() <= 1e-12 * b.abs());
        }
    }

    fn mixed_graph() -> GraphSpec {
        let mut b = GraphBuilder::new([1, 6, 6, 2]);
        let c = b.add("c", NodeKind::Conv(ConvSpec::new((3, 3), 1, Padding::Same, 3)), &["input"]);
        let n = b.add("bn", NodeKind::BatchNorm(BatchNormSpec::default()), &[&c]);
        let r = b.add("r", NodeKind::Relu, &[&n]);
        let p = b.add("p", NodeKind::AvgPool(PoolSpec::new(3, 1, Padding::Same)), &["input"]);
        let m = b.add("m", NodeKind::MaxPool(PoolSpec::new(2, 2, Padding::Valid)), &[&r]);
        let e = b.add("e", NodeKind::Conv(ConvSpec::new((1, 1), 1, Padding::Same, 2)), &[&r]);
        let s = b.add("s", NodeKind::ResidualAdd { alpha: 0.2 }, &[&p, &e]);
        let s2 = b.add("s2", NodeKind::MaxPool(PoolSpec::new(2, 2, Padding::Valid)), &[&s]);
        let cat = b.add("cat", NodeKind::Concat, &[&m, &s2]);
        let gap = b.add("gap", NodeKind::GlobalAvgPool, &[&cat]);
        let d = b.add("d", NodeKind::Dropout { keep: 0.7 }, &[&gap]);
        let f = b.add("fc", NodeKind::FullyConnected { out_features: 4 }, &[&d]);
        let sm = b.add("sm", NodeKind::Softmax, &[&f]);
        b.finish(sm)
    }

    #[test]
    fn every_kind_matches_finite_differences() {
        let g = mixed_graph();
        let net = Network::new(g.clone()).unwrap();
        let params: ParamStore<f64> = init_params(&g, 3).unwrap();
        let x = Tensor::from_fn(&[2, 6, 6, 2], |i| ((i * 37 % 23) as f64 - 11.0) / 7.0).unwrap();
        let weights = Tensor::from_fn(&[2, 1, 1, 4], |i| 0.3 + 0.4 * i as f64).unwrap();
        let objective = |t: &Tensor<f64>| t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>();

        let trace = net.forward(&params, &x, Mode::Train, 11).unwrap();
        let grads = net.backward(&params, &trace, &weights).unwrap();

        let numeric = finite_difference_gradient(
            |xi| objective(net.forward(&params, xi, Mode::Train, 11).unwrap().output()),
            &x,
            1e-5,
        );
        let (err, _) = max_rel_err(grads.input.data(), numeric.data());
        assert!(err < 1e-5, "input grad rel err {err}");

        for (name, analytic) in &grads.params {
            let numeric = finite_difference_gradient(
                |w| {
                    let mut p = params.clone();
                    *p.get_mut(name).unwrap() = w.clone();
                    objective(net.forward(&p, &x, Mode::Train, 11).unwrap().output())
                },
                params.get(name).unwrap(),
                1e-5,
            );
            let (err, _) = max_rel_err(analytic.data(), numeric.data());
            assert!(err <= 1e-4, "{name} rel err {err}");
        }
        assert_eq!(grads.params.len(), params.trainable().count());
    }

    #[test]
    fn zero_grad_and_mismatch() {
        let g = mixed_graph();
        let net = Network::new(g.clone()).unwrap();
        let params: ParamStore<f64> = init_params(&g, 3).unwrap();
        let x = Tensor::full(&[2, 6, 6, 2], 0.5).unwrap();
        let t = net.forward(&params, &x, Mode::Train, 0).unwrap();
        let gr = net.backward(&params, &t, &Tensor::zeros(&[2, 1, 1, 4]).unwrap()).unwrap();
        assert!(gr.params.values().all(|t| t.max_abs() == 0.0));
        assert_eq!(gr.input.max_abs(), 0.0);

        let mut other = g.clone();
        other.nodes[1].id = "renamed".into();
        other.nodes[2].inputs = vec!["renamed".into()];
        let other = Network::new(other).unwrap();
        assert!(matches!(
            other.backward(&params, &t, &Tensor::zeros(&[2, 1, 1, 4]).unwrap()),
            Err(ExecError::ContextMismatch)
        ));
    }

    #[test]
    fn running_stats_commit_and_input_check() {
        let g = mixed_graph();
        let net = Network::new(g.clone()).unwrap();
        let mut params: ParamStore<f64> = init_params(&g, 3).unwrap();
        let x = Tensor::from_fn(&[2, 6, 6, 2], |i| i as f64 / 10.0).unwrap();
        let before = params.get("bn/running_mean").unwrap().clone();
        let t = net.forward(&params, &x, Mode::Train, 0).unwrap();
        t.commit_running_stats(&mut params).unwrap();
        assert_ne!(params.get("bn/running_mean").unwrap(), &before);
        assert!(t.first_non_finite().is_none());
        let bad = Tensor::zeros(&[2, 5, 6, 2]).unwrap();
        assert!(matches!(
            net.forward(&params, &bad, Mode::Infer, 0),
            Err(ExecError::InputShape { .. })
        ));
        let missing = ParamStore::<f64>::new();
        assert!(matches!(net.forward(&missing, &x, Mode::Infer, 0), Err(ExecError::Param(_))));
    }
}
