use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bound_report::BoundReportExperiment;
use super::cartpole::MpcExperiment;
use super::nh_sweep::NhSweepExperiment;
use super::quad::QuadExperiment;
use super::simple_ntvs::NtvsExperiment;
use crate::error::{DktvError, Result};
use crate::net::{chain_layers, Activation, NetArch};
use crate::pipeline::{BetaSchedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerWidth {
    pub width: usize,
    pub activation: Activation,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Layer widths of a feed-forward network; the last entry is the output.
/// With `passthrough` the state is stacked on top of the network output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub layers: Vec<LayerWidth>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub passthrough: bool,
}

impl NetSpec {
    pub fn new(layers: &[(usize, Activation)]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|&(width, activation)| LayerWidth { width, activation })
                .collect(),
            passthrough: false,
        }
    }

    pub fn with_passthrough(mut self, on: bool) -> Self {
        self.passthrough = on;
        self
    }

    /// Lifted dimension for a state of size `input_dim`.
    pub fn lifted_dim(&self, input_dim: usize) -> usize {
        let h = self.layers.last().map_or(0, |l| l.width);
        if self.passthrough {
            h + input_dim
        } else {
            h
        }
    }

    pub fn build(&self, input_dim: usize) -> NetArch {
        let w: Vec<(usize, Activation)> = self.layers.iter().map(|l| (l.width, l.activation)).collect();
        NetArch {
            layers: chain_layers(input_dim, &w),
            passthrough: self.passthrough,
        }
    }

    pub fn with_hidden_width(&self, width: usize) -> Self {
        let mut out = self.clone();
        let last = out.layers.len().saturating_sub(1);
        for l in &mut out.layers[..last] {
            l.width = width;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.iter().any(|l| l.width == 0) {
            return Err(DktvError::InvalidConfig("network needs at least one layer of positive width".into()));
        }
        Ok(())
    }
}

/// Rejects batch sizes that cannot give the lifted data full row rank.
pub fn check_batch_size(beta: &BetaSchedule, r: usize, m: usize) -> Result<()> {
    let b = beta.min();
    if b < r + m {
        return Err(DktvError::InvalidConfig(format!(
            "batch size beta = {b} is below r + m = {}; the stacked lifted data [G; U] must have full row rank r + m, \
             which needs at least r + m samples per batch",
            r + m
        )));
    }
    Ok(())
}

pub fn check_train(train: &TrainConfig) -> Result<()> {
    train.validate()
}

/// Every experiment configuration, tagged by `experiment`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentConfig {
    SimpleNtvs(NtvsExperiment),
    QuadPredict(QuadExperiment),
    NhSweep(NhSweepExperiment),
    MpcCartpole(MpcExperiment),
    BoundReport(BoundReportExperiment),
}

impl ExperimentConfig {
    pub fn id(&self) -> &'static str {
        match self {
            ExperimentConfig::SimpleNtvs(_) => "simple_ntvs",
            ExperimentConfig::QuadPredict(_) => "quad_predict",
            ExperimentConfig::NhSweep(_) => "nh_sweep",
            ExperimentConfig::MpcCartpole(_) => "mpc_cartpole",
            ExperimentConfig::BoundReport(_) => "bound_report",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ExperimentConfig::SimpleNtvs(c) => c.validate(),
            ExperimentConfig::QuadPredict(c) => c.validate(),
            ExperimentConfig::NhSweep(c) => c.validate(),
            ExperimentConfig::MpcCartpole(c) => c.validate(),
            ExperimentConfig::BoundReport(c) => c.validate(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
