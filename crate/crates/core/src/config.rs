//! Training configuration. Defaults follow the citation-dataset settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{Activation, ForwardOptions, QGradient, SkipEstimate};
use crate::sampler::{NodeWiseMode, Strategy};
use crate::tensor::Norm;

/// Graphs with more nodes than this get the larger default layer sample size.
pub const LARGE_GRAPH_NODES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: Option<PathBuf>,
    pub sampler: Strategy,
    /// Hidden widths; the network has `hidden.len() + 1` propagation layers.
    pub hidden: Vec<usize>,
    /// Layer-wise sample size; unset picks 128, or 256 above [`LARGE_GRAPH_NODES`] nodes.
    pub layer_size: Option<usize>,
    /// Draws per parent for the node-wise sampler.
    pub neighbors: usize,
    pub node_wise_mode: NodeWiseMode,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Variance penalty weight; unset means 0.5 for the adaptive sampler and 0 otherwise.
    pub lambda: Option<f64>,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables early stopping.
    pub early_stop_window: usize,
    pub seed: u64,
    pub skip: bool,
    pub skip_estimate: SkipEstimate,
    pub two_hop: bool,
    pub two_hop_max_nodes: usize,
    pub attention: bool,
    /// Divisor of the attention scores; unset uses the layer sample size.
    pub attention_n: Option<usize>,
    pub norm: Norm,
    /// Also penalise the bottom layer's variance.
    pub penalize_first_layer: bool,
    /// Let the penalty's gradient reach the filters through the hidden rows;
    /// when false only the sampler parameters are trained by it.
    pub penalty_through_hidden: bool,
    /// Scale every feature row to unit sum.
    pub normalize_features: bool,
    pub q_gradient: QGradient,
    /// Write 0 in the timing column so that metrics files are byte-identical across runs.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            sampler: Strategy::Adaptive,
            hidden: vec![16],
            layer_size: None,
            neighbors: 5,
            node_wise_mode: NodeWiseMode::Uniform,
            batch_size: 256,
            learning_rate: 0.001,
            weight_decay: 0.0004,
            lambda: None,
            max_epochs: 200,
            early_stop_window: 30,
            seed: 0,
            skip: false,
            skip_estimate: SkipEstimate::Verbatim,
            two_hop: false,
            two_hop_max_nodes: 50_000,
            attention: false,
            attention_n: None,
            norm: Norm::L2,
            penalize_first_layer: false,
            penalty_through_hidden: true,
            normalize_features: true,
            q_gradient: QGradient::Detached,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.neighbors == 0 {
            return bad("neighbors must be positive");
        }
        if self.layer_size == Some(0) || self.attention_n == Some(0) {
            return bad("sample sizes must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad("lambda must be non-negative");
            }
        }
        if self.skip && self.hidden.len() != 1 {
            return bad("the skip connection needs exactly two layers (one hidden width)");
        }
        if self.skip && self.sampler == Strategy::NodeWise {
            return bad("the skip connection is defined for layer-wise and full propagation");
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn resolved_lambda(&self) -> f64 {
        self.lambda.unwrap_or(match self.sampler {
            Strategy::Adaptive => 0.5,
            _ => 0.0,
        })
    }

    pub fn resolved_layer_size(&self, num_nodes: usize) -> usize {
        self.layer_size
            .unwrap_or(if num_nodes > LARGE_GRAPH_NODES { 256 } else { 128 })
    }

    /// Per-layer sample sizes handed to the sampler, top layer first.
    pub fn sample_sizes(&self, num_nodes: usize) -> Vec<usize> {
        let size = match self.sampler {
            Strategy::NodeWise => self.neighbors,
            Strategy::Full => 1,
            Strategy::Iid | Strategy::Adaptive => self.resolved_layer_size(num_nodes),
        };
        vec![size; self.depth()]
    }

    pub fn attention_divisor(&self, num_nodes: usize) -> usize {
        self.attention_n.unwrap_or_else(|| self.resolved_layer_size(num_nodes))
    }

    pub fn forward_options(&self, num_nodes: usize) -> ForwardOptions {
        ForwardOptions {
            activation: Activation::Relu,
            skip: self.skip.then_some(self.skip_estimate),
            attention: self.attention.then(|| self.attention_divisor(num_nodes)),
            q_gradient: self.q_gradient,
        }
    }
}
