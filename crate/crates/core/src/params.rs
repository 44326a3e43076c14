//! Named parameter tensors, their manifest, initialization and checkpoints.
//!
//! Parameters are named `<node id>/<role>`, e.g. `stem/conv1/weight` or
//! `block_a_1/b0/bn/running_var`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{infer_shapes, GraphSpec, NodeKind, ShapeError, ShapeMap};
use crate::ops::BatchNormParams;
use crate::tbin::{self, TbinError};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

pub fn param_name(node: &str, role: ParamRole) -> String {
    format!("{node}/{}", role.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub node: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

/// Every parameter the graph needs, in graph list order.
pub fn param_manifest(graph: &GraphSpec, shapes: &ShapeMap) -> Vec<ParamEntry> {
    let mut out = Vec::new();
    for n in &graph.nodes {
        let mut push = |role: ParamRole, shape: Vec<usize>| {
            out.push(ParamEntry {
                name: param_name(&n.id, role),
                node: n.id.clone(),
                role,
                shape,
            })
        };
        match &n.kind {
            NodeKind::Conv(s) => {
                let cin = shapes[&n.inputs[0]][3];
                push(ParamRole::Weight, vec![s.kernel_h, s.kernel_w, cin, s.out_channels]);
                push(ParamRole::Bias, vec![s.out_channels]);
            }
            NodeKind::BatchNorm(_) => {
                let c = shapes[&n.inputs[0]][3];
                for role in [ParamRole::Gamma, ParamRole::Beta, ParamRole::RunningMean, ParamRole::RunningVar] {
                    push(role, vec![c]);
                }
            }
            NodeKind::FullyConnected { out_features } => {
                let [_, h, w, c] = shapes[&n.inputs[0]];
                push(ParamRole::Weight, vec![h * w * c, *out_features]);
                push(ParamRole::Bias, vec![*out_features]);
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum ParamError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tbin(#[from] TbinError),
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    WrongShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Named tensors plus the role of each.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Element> {
    tensors: BTreeMap<String, (ParamRole, Tensor<T>)>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, role: ParamRole, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), (role, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name).map(|(_, t)| t)
    }

    pub fn role(&self, name: &str) -> Option<ParamRole> {
        self.tensors.get(name).map(|(r, _)| *r)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>, ParamError> {
        self.get(name).ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// All entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamRole, &Tensor<T>)> {
        self.tensors.iter().map(|(k, (r, t))| (k.as_str(), *r, t))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(_, r, _)| r.is_trainable()).map(|(k, _, t)| (k, t))
    }

    pub fn trainable_count(&self) -> u64 {
        self.trainable().map(|(_, t)| t.len() as u64).sum()
    }

    /// Gathers the BatchNorm state of `node`.
    pub fn batchnorm(&self, node: &str, epsilon: f64, momentum: f64) -> Result<BatchNormParams<T>, ParamError> {
        Ok(BatchNormParams {
            gamma: self.require(&param_name(node, ParamRole::Gamma))?.clone(),
            beta: self.require(&param_name(node, ParamRole::Beta))?.clone(),
            running_mean: self.require(&param_name(node, ParamRole::RunningMean))?.clone(),
            running_var: self.require(&param_name(node, ParamRole::RunningVar))?.clone(),
            epsilon,
            momentum,
        })
    }

    /// Checks that every manifest entry is present with the right shape.
    pub fn check_manifest(&self, manifest: &[ParamEntry]) -> Result<(), ParamError> {
        for e in manifest {
            let t = self.require(&e.name)?;
            if t.dims() != e.shape.as_slice() {
                return Err(ParamError::WrongShape {
                    name: e.name.clone(),
                    expected: e.shape.clone(),
                    got: t.dims().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, (r, t))| (k.clone(), (*r, t.cast())))
                .collect(),
        }
    }

    /// This store with every trainable tensor replaced by the one in `shadow`
    /// (running statistics are kept).
    pub fn with_trainable_from(&self, shadow: &ParamStore<T>) -> Result<ParamStore<T>, ParamError> {
        let mut out = self.clone();
        for (name, (role, t)) in out.tensors.iter_mut() {
            if role.is_trainable() {
                *t = shadow.require(name)?.clone();
            }
        }
        Ok(out)
    }

    /// Only the trainable tensors.
    pub fn trainable_only(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(_, (r, _))| r.is_trainable())
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Stable FNV-1a, so per-parameter seeds do not depend on the std hasher.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Short tag recorded alongside training runs.
pub const INIT_SCHEME: &str = "he_normal(std=sqrt(2/fan_in)) weights, zero biases, BN gamma=1 beta=0";

/// Variance-scaling normal weights (`std = sqrt(2 / fan_in)`), zero biases,
/// BatchNorm `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
///
/// Each tensor draws from its own stream seeded by `seed` and its name, so the
/// result does not depend on node order.
pub fn init_params<T: Element>(graph: &GraphSpec, seed: u64) -> Result<ParamStore<T>, ParamError> {
    let shapes = infer_shapes(graph)?;
    let mut store = ParamStore::new();
    for e in param_manifest(graph, &shapes) {
        let tensor = match e.role {
            ParamRole::Weight => {
                let fan_in: usize = e.shape[..e.shape.len() - 1].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(e.name.as_bytes()));
                Tensor::from_fn(&e.shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))?
            }
            ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => Tensor::zeros(&e.shape)?,
            ParamRole::Gamma | ParamRole::RunningVar => Tensor::full(&e.shape, T::one())?,
        };
        store.insert(e.name, e.role, tensor);
    }
    Ok(store)
}

/// Same layout as [`init_params`] with every tensor filled with `value`
/// (running variance stays 1).
pub fn constant_params<T: Element>(graph: &GraphSpec, value: T) -> Result<ParamStore<T>, ParamError> {
    let shapes = infer_shapes(graph)?;
    let mut store = ParamStore::new();
    for e in param_manifest(graph, &shapes) {
        let v = if e.role == ParamRole::RunningVar { T::one() } else { value };
        store.insert(e.name.clone(), e.role, Tensor::full(&e.shape, v)?);
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub params: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMA_MANIFEST_FILE: &str = "manifest_ema.json";

fn file_stem(name: &str) -> String {
    name.replace('/', ".")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ParamError + '_ {
    move |source| ParamError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one TBIN file per tensor under `dir/<subdir>/` and a JSON manifest
/// `dir/<manifest_name>` listing name, file, shape and role.
pub fn save_checkpoint<T: Element>(
    store: &ParamStore<T>,
    dir: &Path,
    subdir: &str,
    manifest_name: &str,
) -> Result<PathBuf, ParamError> {
    let tensor_dir = dir.join(subdir);
    fs::create_dir_all(&tensor_dir).map_err(io_err(&tensor_dir))?;
    let mut params = Vec::with_capacity(store.len());
    for (name, role, t) in store.iter() {
        let file = format!("{subdir}/{}.tbin", file_stem(name));
        let path = dir.join(&file);
        fs::write(&path, tbin::encode(t)).map_err(io_err(&path))?;
        params.push(ManifestEntry {
            name: name.to_string(),
            file,
            shape: t.dims().to_vec(),
            role,
        });
    }
    let manifest_path = dir.join(manifest_name);
    let text = serde_json::to_string_pretty(&CheckpointManifest { params }).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(manifest_path)
}

/// Loads a checkpoint manifest, converting tensors to `T` if needed.
pub fn load_checkpoint<T: Element>(manifest_path: &Path) -> Result<ParamStore<T>, ParamError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| ParamError::Manifest(e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut store = ParamStore::new();
    for e in manifest.params {
        let t: Tensor<T> = tbin::read_file(base.join(&e.file))?.into_tensor();
        if t.dims() != e.shape.as_slice() {
            return Err(ParamError::WrongShape {
                name: e.name,
                expected: e.shape,
                got: t.dims().to_vec(),
            });
        }
        store.insert(e.name, e.role, t);
    }
    Ok(store)
}

/// Sibling EMA manifest of a weights manifest (`manifest.json` -> `manifest_ema.json`).
pub fn ema_manifest_path(manifest_path: &Path) -> PathBuf {
    let stem = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    manifest_path.with_file_name(format!("{stem}_ema.json"))
}
