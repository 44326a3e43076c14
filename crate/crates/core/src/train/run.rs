//! End-to-end training runs driven by one JSON config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{synthetic_dataset_with_noise, train, DataConfig, RunReport, TopK, TrainConfig, TrainError, TrainOutcome};
use crate::graph::{GraphSpec, Network};
use crate::params::{init_params, save_checkpoint, EMA_MANIFEST_FILE, MANIFEST_FILE};
use crate::tensor::Element;
use crate::zoo::{assemble, ArchConfig, Variant};

pub const CSV_FILE: &str = "report.csv";
pub const REPORT_FILE: &str = "report.json";
pub const GRAPH_FILE: &str = "graph.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub precision: Precision,
}

impl RunConfig {
    /// Desk-scale architecture and data: 64 images per class, 20 epochs of
    /// 20 steps, parameter average with decay 0.99 (the full-scale 0.9999
    /// would barely move in 400 steps).
    pub fn desk(variant: Variant) -> Self {
        Self {
            arch: ArchConfig::desk(variant),
            train: TrainConfig {
                epochs: 20,
                ema_decay: 0.99,
                ..TrainConfig::default()
            },
            data: DataConfig {
                samples_per_class: 64,
                ..DataConfig::default()
            },
            precision: Precision::F32,
        }
    }

    /// `arch` follows [`ArchConfig::from_json`] (only `variant` required);
    /// `train`, `data` and `precision` fall back to their defaults.
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let bad = |e: serde_json::Error| TrainError::Config(e.to_string());
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| TrainError::Config("run config must be a JSON object".into()))?;
        let arch_value = obj
            .remove("arch")
            .ok_or_else(|| TrainError::Config("missing `arch`".into()))?;
        let arch = ArchConfig::from_json(&arch_value.to_string())?;
        obj.insert("arch".into(), serde_json::to_value(&arch).expect("config serializes"));
        let config: RunConfig = serde_json::from_value(value).map_err(bad)?;
        config.check()?;
        Ok(config)
    }

    pub fn check(&self) -> Result<(), TrainError> {
        self.arch.check()?;
        self.train.check()?;
        if self.arch.input_size[0] != self.arch.input_size[1] {
            return Err(TrainError::Config("the synthetic dataset needs a square input".into()));
        }
        if self.data.samples_per_class == 0 || !(self.data.noise >= 0.0) {
            return Err(TrainError::Config("samples_per_class must be positive and noise >= 0".into()));
        }
        Ok(())
    }

    /// The architecture with the training residual-scale override applied.
    pub fn effective_arch(&self) -> ArchConfig {
        let mut arch = self.arch.clone();
        if let Some(a) = self.train.residual_scale {
            arch.residual_scale = a;
        }
        arch
    }
}

#[derive(Debug, Clone)]
pub enum RunOutput {
    F32(TrainOutcome<f32>),
    F64(TrainOutcome<f64>),
}

impl RunOutput {
    pub fn report(&self) -> &RunReport {
        match self {
            RunOutput::F32(o) => &o.report,
            RunOutput::F64(o) => &o.report,
        }
    }
}

fn run_typed<T: Element>(graph: &GraphSpec, config: &RunConfig) -> Result<TrainOutcome<T>, TrainError> {
    let net = Network::new(graph.clone()).map_err(crate::graph::ExecError::from)?;
    let arch = &config.arch;
    let data = synthetic_dataset_with_noise::<T>(
        arch.num_classes,
        config.data.samples_per_class,
        arch.input_size[0],
        config.data.seed,
        config.data.noise,
    );
    let init = init_params::<T>(graph, config.train.seed)?;
    train(&net, init, &data, &config.train)
}

/// Builds the graph, generates the dataset, initializes and trains.
pub fn run(config: &RunConfig) -> Result<(GraphSpec, RunOutput), TrainError> {
    config.check()?;
    let graph = assemble(&config.effective_arch())?;
    let out = match config.precision {
        Precision::F32 => RunOutput::F32(run_typed(&graph, config)?),
        Precision::F64 => RunOutput::F64(run_typed(&graph, config)?),
    };
    Ok((graph, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSidecar {
    pub config: RunConfig,
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub final_loss: Option<f64>,
    pub final_eval: TopK,
    pub ema_eval: TopK,
    pub dead_network: bool,
    pub dead_epochs: Vec<usize>,
    pub init: String,
}

impl ReportSidecar {
    pub fn new(config: &RunConfig, report: &RunReport) -> Self {
        Self {
            config: config.clone(),
            steps: report.rows.len(),
            steps_per_epoch: report.steps_per_epoch,
            final_loss: report.final_loss(),
            final_eval: report.final_eval,
            ema_eval: report.ema_eval,
            dead_network: report.dead_network,
            dead_epochs: report.dead_epochs.clone(),
            init: report.init.clone(),
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), TrainError> {
    fs::write(path, text).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
}

/// Writes the CSV curve, the JSON sidecar, the graph, the config and both
/// checkpoints (`manifest.json` and `manifest_ema.json`) into `dir`.
pub fn write_run(dir: &Path, config: &RunConfig, graph: &GraphSpec, output: &RunOutput) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
    let report = output.report();
    write(&dir.join(CSV_FILE), &report.to_csv())?;
    let sidecar = serde_json::to_string_pretty(&ReportSidecar::new(config, report)).expect("report serializes");
    write(&dir.join(REPORT_FILE), &sidecar)?;
    write(&dir.join(GRAPH_FILE), &graph.to_json())?;
    write(
        &dir.join(CONFIG_FILE),
        &serde_json::to_string_pretty(config).expect("config serializes"),
    )?;
    match output {
        RunOutput::F32(o) => {
            save_checkpoint(&o.params, dir, "params", MANIFEST_FILE)?;
            save_checkpoint(&o.ema, dir, "params_ema", EMA_MANIFEST_FILE)?;
        }
        RunOutput::F64(o) => {
            save_checkpoint(&o.params, dir, "params", MANIFEST_FILE)?;
            save_checkpoint(&o.ema, dir, "params_ema", EMA_MANIFEST_FILE)?;
        }
    }
    Ok(())
}
