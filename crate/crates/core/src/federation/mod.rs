//! Communication rounds: broadcast, local training, prototype upload,
//! aggregation and evaluation, plus the convergence monitor.

mod client;
mod experiment;
mod metrics;
mod optim;
pub mod theory;

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{CheckpointError, ParamStore};
use crate::losses::LossWeights;
use crate::prototypes::PrototypeLayout;
use crate::segnet::{FsrMode, SegNet, SegNetConfig};
use crate::server::{Metric, ServerError};
use crate::tensor::TensorError;

pub use client::{batch_order, local_objective, local_train, ClientMonitor, ClientReport, ClientState, LocalOutcome};
pub use experiment::{run_experiment, run_on_data, run_round, ExperimentResult, RoundReport, ServerState};
pub use metrics::{dice_score, evaluate, MetricsSink};
pub use optim::{Optimizer, OptimizerKind};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training failed in round {round}, client {client}, batch {batch}: {source}")]
    Training {
        round: usize,
        client: usize,
        batch: usize,
        #[source]
        source: TensorError,
    },
    #[error("{stage} failed after round {round}: {source}")]
    Round {
        round: usize,
        stage: &'static str,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics output: {0}")]
    Io(#[from] io::Error),
}

impl FederationError {
    /// True for numerical failures (non-finite values) anywhere in training.
    pub fn is_numerical(&self) -> bool {
        let tensor = match self {
            FederationError::Training { source, .. } | FederationError::Round { source, .. } => source,
            FederationError::Tensor(e) => e,
            _ => return false,
        };
        matches!(tensor, TensorError::NonFinite { .. })
    }
}

/// Which ablation of the method to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Style recalibration plus dual-level prototype alignment.
    #[default]
    Fedbcs,
    /// Plain weighted averaging: recalibration bypassed, no prototypes.
    Fedavg,
    /// Dual-level prototype alignment without recalibration.
    FedbcsNoFsr,
    /// Recalibration only: no prototypes are built, uploaded or aligned.
    FedbcsNoCdpa,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fedbcs, Method::Fedavg, Method::FedbcsNoFsr, Method::FedbcsNoCdpa];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fedbcs => "fedbcs",
            Method::Fedavg => "fedavg",
            Method::FedbcsNoFsr => "fedbcs-no-fsr",
            Method::FedbcsNoCdpa => "fedbcs-no-cdpa",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub lambda_c: f64,
    pub seed: u64,
    pub method: Method,
    /// Output width of the prototype fusion heads.
    pub d_fused: usize,
    pub metric: Metric,
    /// Evaluate test Dice every this many rounds (and always after the last).
    pub eval_every: usize,
    /// Fail on non-finite values instead of propagating them.
    pub checked: bool,
    /// Worker threads for client training; 1 runs clients serially.
    pub parallel: usize,
    /// Bypass recalibration, i.e. keep the gates at (norm, org) = (0, 1).
    pub freeze_fsr: bool,
    /// Record full-data gradients for the convergence monitor.
    pub monitor: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 60,
            local_epochs: 1,
            batch_size: 6,
            optimizer: OptimizerKind::Adam,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            tau: 0.4,
            lambda_c: 1.0,
            seed: 0,
            method: Method::Fedbcs,
            d_fused: 24,
            metric: Metric::Cosine,
            eval_every: 10,
            checked: true,
            parallel: 1,
            freeze_fsr: false,
            monitor: false,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        let bad = |m: String| Err(FederationError::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.parallel == 0 {
            return bad("parallel must be at least 1".into());
        }
        LossWeights::new(self.lambda_c, self.tau).map_err(|e| FederationError::Config(e.to_string()))?;
        Ok(())
    }

    /// Loss weights after method wiring: methods without prototypes drop
    /// the alignment terms.
    pub fn loss_weights(&self) -> LossWeights {
        let lambda_c = if self.uses_prototypes() { self.lambda_c } else { 0.0 };
        LossWeights {
            lambda_c,
            tau: self.tau,
        }
    }

    pub fn uses_prototypes(&self) -> bool {
        matches!(self.method, Method::Fedbcs | Method::FedbcsNoFsr)
    }

    pub fn fsr_mode(&self) -> FsrMode {
        match self.method {
            Method::Fedavg | Method::FedbcsNoFsr => FsrMode::Bypass,
            _ if self.freeze_fsr => FsrMode::Bypass,
            _ => FsrMode::Learned,
        }
    }
}

/// Network plus the prototype layout the method uses (none for plain
/// averaging).
#[derive(Debug, Clone)]
pub struct Model {
    pub net: SegNet,
    pub layout: Option<PrototypeLayout>,
}

const NET_INIT: u64 = 1;
const FUSION_INIT: u64 = 2;

impl Model {
    pub fn new(config: &FederationConfig, class_count: usize) -> Result<Self, FederationError> {
        let net = SegNet::new(SegNetConfig {
            class_count,
            fsr: config.fsr_mode(),
            ..SegNetConfig::default()
        })?;
        let layout = if config.uses_prototypes() {
            Some(PrototypeLayout::dual_level(&net, config.d_fused)?)
        } else {
            None
        };
        Ok(Model { net, layout })
    }

    /// Initial global parameters; the network part depends only on the seed,
    /// so every method starts from the same weights.
    pub fn init(&self, seed: u64) -> Result<ParamStore, FederationError> {
        let mut store = self.net.init_parameters(crate::rng::derive_seed(seed, &[NET_INIT]))?;
        if let Some(layout) = &self.layout {
            layout.init_into(&mut store, crate::rng::derive_seed(seed, &[FUSION_INIT]))?;
        }
        Ok(store)
    }

    pub fn uploads_per_client(&self) -> usize {
        self.layout.as_ref().map_or(0, PrototypeLayout::uploads_per_client)
    }
}
