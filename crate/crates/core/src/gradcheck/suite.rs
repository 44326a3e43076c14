//! Finite-difference checks of every differentiable op and of whole graphs.
//!
//! Each check compares the analytic gradient of `L = sum(out * R)` (fixed
//! random `R`) against central differences with step [`FD_STEP`].

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{finite_difference_at, finite_difference_gradient, max_rel_err};
use crate::graph::{ExecError, GraphSpec, Network};
use crate::ops::{self, BatchNormParams, ConvSpec, Mode, OpError, Padding, PoolMode, PoolSpec};
use crate::params::{init_params, ParamError};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// Op or node kind.
    pub op: String,
    /// What was perturbed: `input`, `weights`, a parameter name, ...
    pub target: String,
    pub worst_rel_err: f64,
    /// Flat index of the worst coordinate within `target`.
    pub coord: usize,
    /// Analytic and numeric gradient at `coord`.
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheck {
    /// NaN never passes.
    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst_rel_err <= tolerance
    }
}

/// Worst check per op kind, in op-name order.
pub fn worst_by_op(checks: &[GradCheck]) -> BTreeMap<String, GradCheck> {
    let mut out: BTreeMap<String, GradCheck> = BTreeMap::new();
    for c in checks {
        let worse = out
            .get(&c.op)
            .is_none_or(|cur| c.worst_rel_err > cur.worst_rel_err || c.worst_rel_err.is_nan());
        if worse {
            out.insert(c.op.clone(), c.clone());
        }
    }
    out
}

fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| StandardNormal.sample(rng)).expect("positive dims")
}

/// Neumaier-compensated, so summation roundoff does not swamp the central
/// difference of small gradient coordinates.
fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        let term = x * y;
        let t = sum + term;
        comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
        sum = t;
    }
    sum + comp
}

fn record(op: &str, target: &str, analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> GradCheck {
    let (worst, coord) = max_rel_err(analytic.data(), numeric.data());
    GradCheck {
        op: op.to_string(),
        target: target.to_string(),
        worst_rel_err: worst,
        coord,
        analytic: analytic.data()[coord],
        numeric: numeric.data()[coord],
        checked: analytic.len(),
    }
}

/// Scales one coordinate of an analytic gradient; used to prove the checker
/// catches a broken backward pass.
fn corrupt(t: &mut Tensor<f64>) {
    let v = &mut t.data_mut()[0];
    *v = *v * 1.01 + 1e-3;
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<GradCheck>,
}

impl Suite {
    fn check(
        &mut self,
        op: &str,
        target: &str,
        analytic: &Tensor<f64>,
        at: &Tensor<f64>,
        f: impl FnMut(&Tensor<f64>) -> f64,
    ) {
        let numeric = finite_difference_gradient(f, at, FD_STEP);
        self.out.push(record(op, target, analytic, &numeric));
    }

    fn conv(&mut self, spec: ConvSpec, cin: usize, fault: bool) -> Result<(), OpError> {
        let name = format!(
            "conv{}x{}/{}{}",
            spec.kernel_h,
            spec.kernel_w,
            spec.stride_h,
            match (spec.padding, spec.activation) {
                (Padding::Same, ops::Activation::Relu) => " same relu",
                (Padding::Same, _) => " same",
                (Padding::Valid, ops::Activation::Relu) => " valid relu",
                (Padding::Valid, _) => " valid",
            }
        );
        let x = randn(&[2, 7, 6, cin], &mut self.rng);
        let w = randn(&[spec.kernel_h, spec.kernel_w, cin, spec.out_channels], &mut self.rng);
        let b = randn(&[spec.out_channels], &mut self.rng);
        let y = ops::conv2d_forward(&x, &w, &b, &spec)?;
        let r = randn(y.dims(), &mut self.rng);
        let mut g = ops::conv2d_backward(&r, &x, &y, &w, &spec)?;
        if fault {
            corrupt(&mut g.input);
        }
        let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&ops::conv2d_forward(x, w, b, &spec).unwrap(), &r);
        self.check(&name, "input", &g.input, &x, |t| run(t, &w, &b));
        self.check(&name, "weights", &g.weights, &w, |t| run(&x, t, &b));
        self.check(&name, "bias", &g.bias, &b, |t| run(&x, &w, t));
        Ok(())
    }

    fn pool(&mut self, mode: PoolMode, spec: PoolSpec) -> Result<(), OpError> {
        let name = format!(
            "{}{}x{}/{} {:?}",
            if mode == PoolMode::Max { "max_pool" } else { "avg_pool" },
            spec.kernel_h,
            spec.kernel_w,
            spec.stride_h,
            spec.padding
        )
        .to_lowercase();
        let mut x = randn(&[2, 7, 7, 3], &mut self.rng);
        if mode == PoolMode::Max {
            // distinct values spaced far beyond the FD step keep every
            // window's argmax stable under perturbation
            let mut order: Vec<usize> = (0..x.len()).collect();
            order.shuffle(&mut self.rng);
            for (v, k) in x.data_mut().iter_mut().zip(order) {
                *v = k as f64 * 0.01 - 1.0;
            }
        }
        let y = ops::pool2d(&x, mode, &spec)?;
        let r = randn(y.dims(), &mut self.rng);
        let g = ops::pool2d_backward(&r, &x, mode, &spec)?;
        self.check(&name, "input", &g, &x, |t| dot(&ops::pool2d(t, mode, &spec).unwrap(), &r));
        Ok(())
    }

    fn batchnorm(&mut self) -> Result<(), OpError> {
        let c = 4;
        let x = randn(&[2, 3, 3, c], &mut self.rng);
        let mut p = BatchNormParams::identity(c, 1e-3, 0.99)?;
        p.gamma = randn(&[c], &mut self.rng);
        p.beta = randn(&[c], &mut self.rng);
        let (y, cache) = ops::batchnorm_forward(&x, &p, Mode::Train)?;
        let r = randn(y.dims(), &mut self.rng);
        let (gx, gg, gb) = ops::batchnorm_backward(&r, &cache, &p.gamma)?;
        let run = |x: &Tensor<f64>, p: &BatchNormParams<f64>| dot(&ops::batchnorm_forward(x, p, Mode::Train).unwrap().0, &r);
        self.check("batch_norm", "input", &gx, &x, |t| run(t, &p));
        let gamma = p.gamma.clone();
        self.check("batch_norm", "gamma", &gg, &gamma, |t| {
            let mut q = p.clone();
            q.gamma = t.clone();
            run(&x, &q)
        });
        let beta = p.beta.clone();
        self.check("batch_norm", "beta", &gb, &beta, |t| {
            let mut q = p.clone();
            q.beta = t.clone();
            run(&x, &q)
        });
        Ok(())
    }

    fn elementwise(&mut self) -> Result<(), OpError> {
        let x = randn(&[2, 3, 3, 4], &mut self.rng);
        let r = randn(x.dims(), &mut self.rng);
        let y = ops::relu(&x);
        let g = ops::relu_backward(&r, &y)?;
        self.check("relu", "input", &g, &x, |t| dot(&ops::relu(t), &r));

        let alpha = 0.2;
        let s = randn(x.dims(), &mut self.rng);
        let (gs, gr) = ops::add_scaled_backward(&r, alpha);
        self.check("residual_add", "shortcut", &gs, &s, |t| dot(&ops::add_scaled(t, &x, alpha).unwrap(), &r));
        self.check("residual_add", "residual", &gr, &x, |t| dot(&ops::add_scaled(&s, t, alpha).unwrap(), &r));

        let a = randn(&[2, 3, 3, 2], &mut self.rng);
        let b = randn(&[2, 3, 3, 3], &mut self.rng);
        let rc = randn(&[2, 3, 3, 5], &mut self.rng);
        let g = ops::concat_channels_backward(&rc, &[2, 3])?;
        self.check("concat", "input0", &g[0], &a, |t| dot(&ops::concat_channels(&[t, &b]).unwrap(), &rc));
        self.check("concat", "input1", &g[1], &b, |t| dot(&ops::concat_channels(&[&a, t]).unwrap(), &rc));
        Ok(())
    }

    fn head(&mut self) -> Result<(), OpError> {
        let x = randn(&[2, 3, 3, 4], &mut self.rng);
        let r = randn(&[2, 1, 1, 4], &mut self.rng);
        let g = ops::global_avgpool_backward(&r, x.dims())?;
        self.check("global_avg_pool", "input", &g, &x, |t| dot(&ops::global_avgpool(t).unwrap(), &r));

        let r = randn(x.dims(), &mut self.rng);
        let (_, mask) = ops::dropout(&x, 0.8, Mode::Train, 5)?;
        let g = ops::dropout_backward(&r, mask.as_ref());
        self.check("dropout", "input", &g, &x, |t| dot(&ops::dropout(t, 0.8, Mode::Train, 5).unwrap().0, &r));

        let xf = randn(&[2, 2, 2, 3], &mut self.rng);
        let w = randn(&[12, 4], &mut self.rng);
        let b = randn(&[4], &mut self.rng);
        let r = randn(&[2, 1, 1, 4], &mut self.rng);
        let g = ops::fully_connected_backward(&r, &xf, &w)?;
        let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&ops::fully_connected(x, w, b).unwrap(), &r);
        self.check("fully_connected", "input", &g.input, &xf, |t| run(t, &w, &b));
        self.check("fully_connected", "weights", &g.weights, &w, |t| run(&xf, t, &b));
        self.check("fully_connected", "bias", &g.bias, &b, |t| run(&xf, &w, t));

        let logits = randn(&[3, 1, 1, 5], &mut self.rng);
        let r = randn(logits.dims(), &mut self.rng);
        let y = ops::softmax(&logits)?;
        let g = ops::softmax_backward(&r, &y)?;
        self.check("softmax", "input", &g, &logits, |t| dot(&ops::softmax(t).unwrap(), &r));

        let labels = [4, 0, 2];
        let (_, g) = ops::softmax_cross_entropy(&logits, &labels)?;
        self.check("softmax_cross_entropy", "logits", &g, &logits, |t| {
            ops::softmax_cross_entropy(t, &labels).unwrap().0
        });
        Ok(())
    }
}

/// Checks every op kernel, including each padding mode, a fused ReLU and the
/// asymmetric kernels used by the architectures. With `inject_fault` the conv
/// input gradient is deliberately corrupted.
pub fn op_suite(seed: u64, inject_fault: bool) -> Result<Vec<GradCheck>, OpError> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: Vec::new(),
    };
    let conv = |k: (usize, usize), stride, padding| ConvSpec::new(k, stride, padding, 4);
    s.conv(conv((3, 3), 1, Padding::Same).with_activation(ops::Activation::Relu), 3, inject_fault)?;
    s.conv(conv((3, 3), 2, Padding::Valid), 3, false)?;
    s.conv(conv((3, 3), 2, Padding::Same), 2, false)?;
    s.conv(conv((1, 7), 1, Padding::Same), 2, false)?;
    s.conv(conv((3, 1), 1, Padding::Same), 2, false)?;
    s.conv(conv((1, 1), 1, Padding::Same), 3, false)?;
    s.pool(PoolMode::Max, PoolSpec::new(3, 2, Padding::Valid))?;
    s.pool(PoolMode::Max, PoolSpec::new(3, 1, Padding::Same))?;
    s.pool(PoolMode::Avg, PoolSpec::new(3, 1, Padding::Same))?;
    s.pool(PoolMode::Avg, PoolSpec::new(3, 2, Padding::Valid))?;
    s.batchnorm()?;
    s.elementwise()?;
    s.head()?;
    Ok(s.out)
}

#[derive(Debug, thiserror::Error)]
pub enum GraphCheckError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Checks the input gradient and every trainable parameter of `graph` in
/// Train mode (float64, batch `batch`, fixed dropout seed). With
/// `max_coords`, each tensor is checked on that many sampled coordinates.
pub fn graph_suite(
    graph: &GraphSpec,
    seed: u64,
    batch: usize,
    max_coords: Option<usize>,
    inject_fault: bool,
) -> Result<Vec<GradCheck>, GraphCheckError> {
    let net = Network::new(graph.clone()).map_err(ExecError::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params::<f64>(graph, seed)?;
    // non-trivial biases and BN affine terms
    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        if !name.ends_with("/weight") {
            let t = params.get_mut(name).expect("listed above");
            for v in t.data_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += 0.1 * n;
            }
        }
    }
    let [_, h, w, c] = graph.input_shape;
    let x = randn(&[batch, h, w, c], &mut rng);
    let out_dims = net.forward(&params, &x, Mode::Train, seed)?.output().dims().to_vec();
    let r = randn(&out_dims, &mut rng);

    let trace = net.forward(&params, &x, Mode::Train, seed)?;
    let grads = net.backward(&params, &trace, &r)?;
    let objective = |p: &crate::params::ParamStore<f64>, x: &Tensor<f64>| {
        dot(net.forward(p, x, Mode::Train, seed).expect("same shapes as above").output(), &r)
    };

    let mut coords_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut pick = |len: usize| -> Vec<usize> {
        match max_coords {
            Some(m) if m < len => {
                let mut v = sample(&mut coords_rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    };

    let mut out = Vec::new();
    let sampled = |op: &str, target: &str, analytic: &Tensor<f64>, coords: &[usize], numeric: &[f64], fault: bool| {
        let mut a: Vec<f64> = coords.iter().map(|&i| analytic.data()[i]).collect();
        if fault {
            a[0] = a[0] * 1.01 + 1e-3;
        }
        let (worst, at) = max_rel_err(&a, numeric);
        GradCheck {
            op: op.to_string(),
            target: target.to_string(),
            worst_rel_err: worst,
            coord: coords[at],
            analytic: a[at],
            numeric: numeric[at],
            checked: coords.len(),
        }
    };

    let coords = pick(x.len());
    let numeric = finite_difference_at(|t| objective(&params, t), &x, FD_STEP, &coords);
    out.push(sampled("Input", "input", &grads.input, &coords, &numeric, inject_fault));

    for (name, analytic) in &grads.params {
        let node = name.rsplit_once('/').map_or(name.as_str(), |(n, _)| n);
        let kind = graph.node(node).map_or("?", |n| n.kind.name());
        let coords = pick(analytic.len());
        let base = params.get(name).expect("gradient names come from params").clone();
        let mut probe = params.clone();
        let numeric = finite_difference_at(
            |t| {
                *probe.get_mut(name).expect("present") = t.clone();
                objective(&probe, &x)
            },
            &base,
            FD_STEP,
            &coords,
        );
        if name.ends_with("/bias") && feeds_only_batchnorm(graph, node) {
            // Batch statistics cancel any per-channel shift, so the true
            // gradient is zero and only the absolute error is meaningful.
            let (worst, at) = coords
                .iter()
                .zip(&numeric)
                .map(|(&i, n)| (analytic.data()[i] - n).abs())
                .enumerate()
                .fold((0.0, 0), |acc, (j, e)| if e > acc.0 || e.is_nan() { (e, j) } else { acc });
            out.push(GradCheck {
                op: kind.to_string(),
                target: format!("{name} (absolute)"),
                worst_rel_err: worst,
                coord: coords[at],
                analytic: analytic.data()[coords[at]],
                numeric: numeric[at],
                checked: coords.len(),
            });
        } else {
            out.push(sampled(kind, name, analytic, &coords, &numeric, false));
        }
    }
    Ok(out)
}

fn feeds_only_batchnorm(graph: &GraphSpec, node: &str) -> bool {
    let mut consumers = graph.nodes.iter().filter(|n| n.inputs.iter().any(|i| i == node)).peekable();
    consumers.peek().is_some() && consumers.all(|n| matches!(n.kind, crate::graph::NodeKind::BatchNorm(_)))
}
