//! Experiment configuration, presets, and the end-to-end training run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    self, DataPlan, HeterogeneityReport, PartitionMode, PartitionSpec, PreparedData,
};
use crate::error::{Error, Result};
use crate::federation::{
    self, ClientState, InProcess, OptimizerKind, ServerState, TrainingHistory, TrainingMode,
    TrainingSetup,
};
use crate::qnn::{EncodedSample, LogisticHead};
use crate::shadows::MomConfig;
use crate::sim::{build_hea, MAX_QUBITS};

/// Overrides `data_dir` when set.
pub const DATA_DIR_ENV: &str = "CCQFL_DATA_DIR";

pub const SINGLE_CLIENT_PRESET: &str = include_str!("../../../configs/single_client.toml");
pub const MULTI_CLIENT_PRESET: &str = include_str!("../../../configs/multi_client.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Exact,
    Shadow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionName {
    Proportions,
    Dirichlet,
}

/// Provenance written into a run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub n_params: usize,
    pub version: String,
}

/// Every knob of a training run. Missing keys take the values of
/// [`ExperimentConfig::default`], which is the single-client preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// `exact` (statevector expectations) or `shadow`.
    pub mode: Mode,
    pub n_qubits: usize,
    pub layers: usize,
    pub optimizer: OptimizerName,
    pub eta: f64,
    pub epochs: usize,
    /// Snapshots per shadow-set entry, M.
    pub shots: usize,
    /// Median-of-means chunk count, M2; must divide `shots`.
    pub chunks: usize,
    pub n_clients: usize,
    /// Training samples per client.
    pub train_sizes: Vec<usize>,
    /// Test samples per client; the test set is their pooled total.
    pub test_size_per_client: usize,
    pub partition: PartitionName,
    /// `[fraction of class 0, fraction of class 1]` per client.
    pub proportions: Vec<[f64; 2]>,
    pub dirichlet_alpha: f64,
    /// Digit pair; the first maps to label 0.
    pub classes: [u8; 2],
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Samples per client per round; 0 means one full-batch round per epoch.
    pub batch_size: usize,
    /// Multiplier on Ẽ inside the logistic link.
    pub logit_scale: f64,
    /// When false the wall_ms column is written as 0.
    pub record_wall_time: bool,
    /// Evaluate epoch metrics with `exact` expectations or a fresh `shadow`.
    pub metrics_mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunInfo>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Exact,
            n_qubits: 8,
            layers: 5,
            optimizer: OptimizerName::Adam,
            eta: 0.003,
            epochs: 50,
            shots: 1000,
            chunks: 10,
            n_clients: 1,
            train_sizes: vec![2000],
            test_size_per_client: 640,
            partition: PartitionName::Proportions,
            proportions: vec![[0.5, 0.5]],
            dirichlet_alpha: 0.5,
            classes: [3, 6],
            seed: 0,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs/single_client"),
            batch_size: 100,
            logit_scale: 4.0,
            record_wall_time: true,
            metrics_mode: Mode::Exact,
            run: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn single_client() -> Self {
        Self::from_toml(SINGLE_CLIENT_PRESET).expect("single-client preset is valid")
    }

    pub fn multi_client() -> Self {
        Self::from_toml(MULTI_CLIENT_PRESET).expect("multi-client preset is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::config(format!("{key}: {why}")));
        if self.n_qubits == 0 || self.n_qubits > MAX_QUBITS {
            return bad(
                "n_qubits",
                format!("must be in 1..={MAX_QUBITS}, got {}", self.n_qubits),
            );
        }
        if self.layers == 0 {
            return bad("layers", "must be at least 1".into());
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad("eta", format!("must be positive, got {}", self.eta));
        }
        if self.shots == 0 {
            return bad("shots", "must be at least 1".into());
        }
        if self.chunks == 0
            || self.chunks > u16::MAX as usize
            || !self.shots.is_multiple_of(self.chunks)
        {
            return bad(
                "chunks",
                format!("{} must divide shots = {}", self.chunks, self.shots),
            );
        }
        if self.n_clients == 0 || self.n_clients > u16::MAX as usize {
            return bad(
                "n_clients",
                format!("must be in 1..=65535, got {}", self.n_clients),
            );
        }
        if self.train_sizes.len() != self.n_clients {
            return bad(
                "train_sizes",
                format!(
                    "lists {} clients, n_clients = {}",
                    self.train_sizes.len(),
                    self.n_clients
                ),
            );
        }
        if self.train_sizes.contains(&0) {
            return bad(
                "train_sizes",
                "every client needs at least one sample".into(),
            );
        }
        if self.test_size_per_client == 0 {
            return bad("test_size_per_client", "must be at least 1".into());
        }
        if self.partition == PartitionName::Proportions
            && self.n_clients > 1
            && self.proportions.len() != self.n_clients
        {
            return bad(
                "proportions",
                format!(
                    "lists {} clients, n_clients = {}",
                    self.proportions.len(),
                    self.n_clients
                ),
            );
        }
        if self.classes[0] > 9 || self.classes[1] > 9 || self.classes[0] == self.classes[1] {
            return bad(
                "classes",
                format!("need two different digits, got {:?}", self.classes),
            );
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return bad(
                "logit_scale",
                format!("must be positive, got {}", self.logit_scale),
            );
        }
        if self.n_clients > 1 {
            self.partition_spec().validate().map_err(|e| {
                Error::config(format!(
                    "partition: {}",
                    e.to_string().trim_start_matches("configuration error: ")
                ))
            })?;
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        2 * self.n_qubits * self.layers
    }

    pub fn mom(&self) -> Result<MomConfig> {
        MomConfig::new(self.shots, self.chunks)
    }

    pub fn training_mode(&self) -> Result<TrainingMode> {
        Ok(match self.mode {
            Mode::Exact => TrainingMode::Exact,
            Mode::Shadow => TrainingMode::Shadow { mom: self.mom()? },
        })
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let mode = match self.partition {
            PartitionName::Proportions => PartitionMode::Proportions(self.proportions.clone()),
            PartitionName::Dirichlet => PartitionMode::Dirichlet {
                alpha: self.dirichlet_alpha,
            },
        };
        PartitionSpec {
            mode,
            sizes: self.train_sizes.clone(),
        }
    }

    /// `data_dir`, or the environment override when set.
    pub fn resolved_data_dir(&self) -> PathBuf {
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.data_dir.clone())
    }

    pub fn data_plan(&self) -> DataPlan {
        DataPlan {
            data_dir: self.resolved_data_dir(),
            classes: self.classes,
            partition: self.partition_spec(),
            test_size: self.test_size_per_client * self.n_clients,
            components: self.n_qubits,
            seed: self.seed,
        }
    }

    /// The config as written to a run manifest.
    pub fn manifest(&self) -> ExperimentConfig {
        ExperimentConfig {
            run: Some(RunInfo {
                n_params: self.n_params(),
                version: env!("CARGO_PKG_VERSION").to_string(),
            }),
            ..self.clone()
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text)
}

/// Encodes prepared features into client states and a test set.
pub fn build_setup(cfg: &ExperimentConfig, data: &PreparedData) -> Result<TrainingSetup> {
    let encode = |ds: &data::FeatureDataset| -> Result<Vec<EncodedSample>> {
        ds.features
            .iter()
            .zip(&ds.labels)
            .map(|(x, &y)| EncodedSample::from_features(x, y, cfg.n_qubits))
            .collect()
    };
    let mom = cfg.mom()?;
    let clients = data
        .clients
        .iter()
        .enumerate()
        .map(|(i, ds)| ClientState::new(i as u16, encode(ds)?, mom))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSetup {
        ansatz: build_hea(cfg.n_qubits, cfg.layers)?,
        clients,
        test: encode(&data.test)?,
        optimizer: match cfg.optimizer {
            OptimizerName::Sgd => OptimizerKind::Sgd,
            OptimizerName::Adam => OptimizerKind::Adam,
        },
        eta: cfg.eta,
        epochs: cfg.epochs,
        mode: cfg.training_mode()?,
        batch_size: (cfg.batch_size > 0).then_some(cfg.batch_size),
        head: LogisticHead::new(cfg.logit_scale)?,
        seed: cfg.seed,
        shadow_metrics: cfg.metrics_mode == Mode::Shadow,
        record_wall_time: cfg.record_wall_time,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub history: TrainingHistory,
    pub server: ServerState,
    pub report: HeterogeneityReport,
}

/// Loads data, trains, and returns the history. Nothing is written.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = data::prepare(&cfg.data_plan())?;
    let setup = build_setup(cfg, &data)?;
    let (history, server) = federation::train(&setup, &mut InProcess)?;
    Ok(RunOutput {
        history,
        server,
        report: data.report,
    })
}

pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const HETEROGENEITY_FILE: &str = "heterogeneity.csv";

/// Writes history, manifest, and the heterogeneity report into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(HISTORY_FILE), out.history.to_csv())?;
    std::fs::write(dir.join(MANIFEST_FILE), cfg.manifest().to_toml())?;
    std::fs::write(dir.join(HETEROGENEITY_FILE), out.report.to_csv())?;
    Ok(())
}
