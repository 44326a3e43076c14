//! Optimizers, learning-rate schedule, parameter averaging, the training loop
//! and top-k evaluation.

mod data;
pub mod experiment;
mod run;

pub use data::{synthetic_dataset, synthetic_dataset_with_noise, DataConfig, Dataset, PATTERN_NAMES};
pub use run::{run, write_run, Precision, ReportSidecar, RunConfig, RunOutput, CONFIG_FILE, CSV_FILE, GRAPH_FILE, REPORT_FILE};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ExecError, GraphSpec, Network, NodeKind};
use crate::ops::{self, Mode, OpError};
use crate::params::{fnv1a, ParamError, ParamStore, INIT_SCHEME};
use crate::tensor::{Element, Tensor, TensorError};
use crate::zoo::ZooError;

/// Absolute threshold below which pre-pool activations count as dead.
pub const DEAD_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {step}; first non-finite output at node `{node}`")]
    NonFinite { step: usize, node: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("parameter manifests differ: {0}")]
    ManifestMismatch(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// `ms = decay*ms + (1-decay)*g^2; p -= lr*g / (sqrt(ms) + epsilon)`.
    RmsProp { decay: f64, epsilon: f64 },
    /// Classical momentum: `v = momentum*v + g; p -= lr*v`.
    Momentum { momentum: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::RmsProp {
            decay: 0.9,
            epsilon: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub base_lr: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    pub seed: u64,
    /// Overrides the architecture's residual scale when set.
    pub residual_scale: Option<f64>,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// `k` of the final top-k evaluation.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::default(),
            base_lr: 0.045,
            lr_decay_rate: 0.94,
            lr_decay_epochs: 2,
            batch_size: 32,
            epochs: 1,
            ema_decay: 0.9999,
            seed: 0,
            residual_scale: None,
            max_steps: None,
            eval_k: 5,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        let unit = |x: f64| x > 0.0 && x < 1.0;
        match self.optimizer {
            Optimizer::RmsProp { decay, epsilon } => {
                if !unit(decay) || !(epsilon > 0.0) {
                    return fail(format!("rmsprop decay {decay} / epsilon {epsilon} out of range"));
                }
            }
            Optimizer::Momentum { momentum } => {
                if !unit(momentum) {
                    return fail(format!("momentum {momentum} is outside (0, 1)"));
                }
            }
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr {} must be finite and >= 0", self.base_lr));
        }
        if !(self.lr_decay_rate > 0.0) || self.lr_decay_epochs == 0 {
            return fail("lr decay rate and period must be positive".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_k == 0 {
            return fail("batch_size, epochs and eval_k must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay {} is outside [0, 1)", self.ema_decay));
        }
        if let Some(a) = self.residual_scale {
            if !(a >= 0.0 && a.is_finite()) {
                return fail(format!("residual_scale {a} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// `base_lr * rate^floor(epoch / decay_epochs)`.
pub fn lr_at(epoch: f64, config: &TrainConfig) -> f64 {
    let k = (epoch / config.lr_decay_epochs as f64).floor() as i32;
    config.base_lr * config.lr_decay_rate.powi(k)
}

fn check_pair<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TrainError> {
    a.expect_same_dims(b)?;
    Ok(())
}

pub fn rmsprop_step<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    ms: &mut Tensor<T>,
    lr: f64,
    decay: f64,
    epsilon: f64,
) -> Result<(), TrainError> {
    check_pair(param, grad)?;
    check_pair(param, ms)?;
    let (lr, decay, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(decay), T::from_f64_lossy(epsilon));
    let one = T::one();
    for ((p, &g), m) in param.data_mut().iter_mut().zip(grad.data()).zip(ms.data_mut()) {
        *m = decay * *m + (one - decay) * g * g;
        *p = *p - lr * g / (m.sqrt() + eps);
    }
    Ok(())
}

pub fn momentum_step<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    check_pair(param, grad)?;
    check_pair(param, velocity)?;
    let (lr, mu) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum));
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = mu * *v + g;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// `shadow = decay*shadow + (1-decay)*params` for every tensor in `shadow`.
pub fn ema_update<T: Element>(shadow: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<(), TrainError> {
    let d = T::from_f64_lossy(decay);
    let rest = T::one() - d;
    let names: Vec<String> = shadow.iter().map(|(n, _, _)| n.to_string()).collect();
    for name in names {
        let p = params
            .get(&name)
            .ok_or_else(|| TrainError::ManifestMismatch(format!("`{name}` missing from params")))?;
        let s = shadow.get_mut(&name).expect("name comes from shadow");
        if s.dims() != p.dims() {
            return Err(TrainError::ManifestMismatch(format!("`{name}` shapes differ")));
        }
        for (s, &p) in s.data_mut().iter_mut().zip(p.data()) {
            *s = d * *s + rest * p;
        }
    }
    Ok(())
}

/// Accumulators, step counter and the parameter average.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Element> {
    /// RMSProp mean square or momentum velocity, per trainable parameter.
    pub accumulators: BTreeMap<String, Tensor<T>>,
    pub step: usize,
    /// Running average of the trainable parameters, starting at their values.
    pub ema: ParamStore<T>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Result<Self, TrainError> {
        let mut accumulators = BTreeMap::new();
        for (name, t) in params.trainable() {
            accumulators.insert(name.to_string(), Tensor::zeros(t.dims())?);
        }
        Ok(Self {
            accumulators,
            step: 0,
            ema: params.trainable_only(),
        })
    }

    /// One optimizer step over every gradient, then the EMA update.
    pub fn apply(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        optimizer: Optimizer,
        ema_decay: f64,
    ) -> Result<(), TrainError> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| TrainError::ManifestMismatch(format!("gradient for unknown `{name}`")))?;
            let acc = self
                .accumulators
                .get_mut(name)
                .ok_or_else(|| TrainError::ManifestMismatch(format!("no accumulator for `{name}`")))?;
            match optimizer {
                Optimizer::RmsProp { decay, epsilon } => rmsprop_step(p, g, acc, lr, decay, epsilon)?,
                Optimizer::Momentum { momentum } => momentum_step(p, g, acc, lr, momentum)?,
            }
        }
        self.step += 1;
        ema_update(&mut self.ema, params, ema_decay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub top1_error: f64,
    pub topk_error: f64,
}

/// Rank of `label` when classes are sorted by descending score with ties
/// going to the lower class index (0 = best).
fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count()
}

/// Counts of samples missing from the top-1 and top-k of `scores` (`[N, .., C]`).
pub fn topk_misses<T: Element>(scores: &Tensor<T>, labels: &[usize], k: usize) -> Result<(usize, usize), OpError> {
    let n = labels.len();
    if n == 0 || scores.len() % n != 0 {
        return Err(TensorError::ShapeMismatch(scores.dims().to_vec(), vec![n]).into());
    }
    let classes = scores.len() / n;
    if k == 0 || k > classes {
        return Err(OpError::NonPositive("k must be in 1..=num_classes"));
    }
    let (mut miss1, mut missk) = (0, 0);
    let mut row = vec![0.0; classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(OpError::LabelOutOfRange { label, classes });
        }
        for (r, v) in row.iter_mut().zip(&scores.data()[i * classes..(i + 1) * classes]) {
            *r = v.as_f64();
        }
        let rank = rank_of(&row, label);
        miss1 += (rank >= 1) as usize;
        missk += (rank >= k) as usize;
    }
    Ok((miss1, missk))
}

pub fn topk_errors<T: Element>(scores: &Tensor<T>, labels: &[usize], k: usize) -> Result<TopK, OpError> {
    let (m1, mk) = topk_misses(scores, labels, k)?;
    let n = labels.len() as f64;
    Ok(TopK {
        k,
        top1_error: m1 as f64 / n,
        topk_error: mk as f64 / n,
    })
}

/// Node whose output is ranked and fed to the loss: the Softmax input when the
/// graph ends in Softmax, else the output itself.
pub fn logits_id(graph: &GraphSpec) -> &str {
    match graph.node(&graph.output_id) {
        Some(n) if n.kind == NodeKind::Softmax => &n.inputs[0],
        _ => &graph.output_id,
    }
}

/// Infer-mode single-crop top-1 / top-k error over the whole dataset.
pub fn evaluate_topk<T: Element>(
    net: &Network,
    params: &ParamStore<T>,
    dataset: &Dataset<T>,
    k: usize,
    batch_size: usize,
) -> Result<TopK, TrainError> {
    if k == 0 || k > dataset.num_classes {
        return Err(TrainError::Config(format!(
            "k = {k} is outside 1..={} classes",
            dataset.num_classes
        )));
    }
    let logits = logits_id(net.graph()).to_string();
    let (mut m1, mut mk) = (0, 0);
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = dataset.batch(chunk)?;
        let trace = net.forward(params, &x, Mode::Infer, 0)?;
        let scores = trace.get(&logits).expect("logits node exists");
        let (a, b) = topk_misses(scores, &y, k)?;
        m1 += a;
        mk += b;
    }
    let n = dataset.len() as f64;
    Ok(TopK {
        k,
        top1_error: m1 as f64 / n,
        topk_error: mk as f64 / n,
    })
}

/// True iff every activation entering the global average pool (or, without
/// one, the logits layer) is below [`DEAD_THRESHOLD`] in magnitude on `probe`
/// (Infer mode).
pub fn detect_dead_network<T: Element>(net: &Network, params: &ParamStore<T>, probe: &Tensor<T>) -> Result<bool, TrainError> {
    let graph = net.graph();
    let watched = match graph.nodes.iter().find(|n| n.kind == NodeKind::GlobalAvgPool) {
        Some(pool) => pool.inputs[0].clone(),
        None => {
            let logits = graph.node(logits_id(graph)).expect("logits_id names a node");
            logits.inputs.first().cloned().ok_or_else(|| TrainError::Config("logits node has no input".into()))?
        }
    };
    let trace = net.forward(params, probe, Mode::Infer, 0)?;
    let pre = trace.get(&watched).expect("watched node exists");
    Ok(pre.max_abs().as_f64() < DEAD_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// 1-based optimizer step.
    pub step: usize,
    /// Fractional epoch at which the learning rate was evaluated.
    pub epoch: f64,
    pub lr: f64,
    /// Mean cross-entropy of the batch (Train mode, before the update).
    pub loss: f64,
    /// Top-1 error of the same batch.
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    pub steps_per_epoch: usize,
    /// Training set, Infer mode, raw weights.
    pub final_eval: TopK,
    /// Training set, Infer mode, averaged weights.
    pub ema_eval: TopK,
    pub dead_network: bool,
    /// Epochs (1-based) after which the dead-network check fired.
    pub dead_epochs: Vec<usize>,
    pub init: String,
}

pub const CSV_HEADER: &str = "step,epoch,lr,loss,top1";

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.step, r.epoch, r.lr, r.loss, r.top1);
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>, String> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err("missing header".into());
        }
        lines
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(format!("bad row `{line}`"));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s}: {e}"));
                Ok(ReportRow {
                    step: f[0].parse().map_err(|e| format!("{}: {e}", f[0]))?,
                    epoch: num(f[1])?,
                    lr: num(f[2])?,
                    loss: num(f[3])?,
                    top1: num(f[4])?,
                })
            })
            .collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Element> {
    pub params: ParamStore<T>,
    /// Raw params with every trainable tensor replaced by its average.
    pub ema: ParamStore<T>,
    pub report: RunReport,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ fnv1a(&(step as u64).to_le_bytes()).rotate_left(17)
}

/// Minibatch training; see [`train_observed`].
pub fn train<T: Element>(
    net: &Network,
    init: ParamStore<T>,
    dataset: &Dataset<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    train_observed(net, init, dataset, config, |_, _| {})
}

/// Each step: Train-mode forward, softmax cross-entropy on the logits,
/// backward, optimizer step at `lr_at(epoch)`, EMA update. Batches are drawn
/// without replacement from a per-epoch shuffle; a trailing partial batch is
/// dropped. After every epoch the dead-network check runs on the first batch
/// of the dataset. `observe(step, params)` sees the parameters after each
/// update.
pub fn train_observed<T: Element>(
    net: &Network,
    init: ParamStore<T>,
    dataset: &Dataset<T>,
    config: &TrainConfig,
    mut observe: impl FnMut(usize, &ParamStore<T>),
) -> Result<TrainOutcome<T>, TrainError> {
    config.check()?;
    let steps_per_epoch = dataset.len() / config.batch_size;
    if steps_per_epoch == 0 {
        return Err(TrainError::Config(format!(
            "batch_size {} exceeds the dataset size {}",
            config.batch_size,
            dataset.len()
        )));
    }
    let total = (steps_per_epoch * config.epochs).min(config.max_steps.unwrap_or(usize::MAX));
    let logits = logits_id(net.graph()).to_string();
    let probe_idx: Vec<usize> = (0..config.batch_size.min(dataset.len())).collect();
    let (probe, _) = dataset.batch(&probe_idx)?;

    let mut params = init;
    let mut state = OptimizerState::new(&params)?;
    let mut rows = Vec::with_capacity(total);
    let mut dead_epochs = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for step in 0..total {
        let epoch_idx = step / steps_per_epoch;
        let pos = step % steps_per_epoch;
        if pos == 0 {
            order = (0..dataset.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a(format!("epoch{epoch_idx}").as_bytes()));
            order.shuffle(&mut rng);
        }
        let batch = &order[pos * config.batch_size..(pos + 1) * config.batch_size];
        let (x, y) = dataset.batch(batch)?;

        let trace = net.forward(&params, &x, Mode::Train, step_seed(config.seed, step))?;
        let scores = trace.get(&logits).expect("logits node exists");
        let (loss, grad) = ops::softmax_cross_entropy(scores, &y)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            let node = trace.first_non_finite().unwrap_or("loss").to_string();
            return Err(TrainError::NonFinite { step: step + 1, node });
        }
        let (top1_miss, _) = topk_misses(scores, &y, 1)?;
        let grads = net.backward_from(&params, &trace, &logits, &grad)?;
        trace.commit_running_stats(&mut params)?;

        let epoch = step as f64 / steps_per_epoch as f64;
        let lr = lr_at(epoch, config);
        state.apply(&mut params, &grads.params, lr, config.optimizer, config.ema_decay)?;
        observe(step + 1, &params);
        rows.push(ReportRow {
            step: step + 1,
            epoch,
            lr,
            loss,
            top1: top1_miss as f64 / y.len() as f64,
        });
        if pos + 1 == steps_per_epoch || step + 1 == total {
            if detect_dead_network(net, &params, &probe)? {
                dead_epochs.push(epoch_idx + 1);
            }
        }
    }

    let ema = params.with_trainable_from(&state.ema)?;
    let k = config.eval_k.min(dataset.num_classes);
    let final_eval = evaluate_topk(net, &params, dataset, k, config.batch_size)?;
    let ema_eval = evaluate_topk(net, &ema, dataset, k, config.batch_size)?;
    Ok(TrainOutcome {
        params,
        ema,
        report: RunReport {
            rows,
            steps_per_epoch,
            final_eval,
            ema_eval,
            dead_network: !dead_epochs.is_empty(),
            dead_epochs,
            init: INIT_SCHEME.to_string(),
        },
    })
}
