//! Declarative run configuration, read from TOML.
//!
//! ```toml
//! window_size = 4
//! k = 4
//! tau = 0.9
//! clustering_objective = "dmon"
//! epochs = 30
//! lr = 1e-4
//! batch = 32
//! seed = 0
//!
//! [encodings]
//! temporal = true
//! spatial = false
//!
//! [loss_weights]
//! unsupervised = 1.0
//! supervised = 1.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusteringConfig, Objective};
use crate::downstream::{LossWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{EncodingConfig, GraphConfig};
use crate::params::AdamConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Frames per window; clips longer than this use their last `window_size` frames.
    /// Defaults to the dataset's window.
    pub window_size: Option<usize>,
    pub k: usize,
    pub tau: f64,
    pub normalize: bool,
    pub feature_scale: f64,
    pub encodings: EncodingConfig,
    pub clustering_objective: Objective,
    pub regularizer_weight: f64,
    pub spatial_weight: f64,
    pub temporal_weight: f64,
    /// Use temporal edges at all; when false the graph has spatial edges only.
    pub temporal_edges: bool,
    /// Confidence floor of the built-in matcher, used for clips without a match file.
    pub min_match_confidence: f64,
    pub gcn_hidden: Vec<usize>,
    pub mlp_hidden: Vec<usize>,
    pub edge_hidden: usize,
    pub classifier_hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Let L_CE reach the clustering head.
    pub joint: bool,
    pub freeze_clustering: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let clustering = ClusteringConfig::default();
        let model = ModelConfig::default();
        let graph = GraphConfig::default();
        let train = TrainConfig::default();
        Self {
            window_size: None,
            k: clustering.k,
            tau: graph.tau,
            normalize: graph.normalize,
            feature_scale: graph.feature_scale,
            encodings: graph.encodings,
            clustering_objective: clustering.objective,
            regularizer_weight: clustering.regularizer_weight,
            spatial_weight: clustering.spatial_weight,
            temporal_weight: clustering.temporal_weight,
            temporal_edges: true,
            min_match_confidence: 0.7,
            gcn_hidden: clustering.gcn_hidden,
            mlp_hidden: clustering.mlp_hidden,
            edge_hidden: model.edge_hidden,
            classifier_hidden: model.classifier_hidden,
            epochs: train.epochs,
            lr: train.adam.lr,
            batch: train.batch,
            seed: train.seed,
            loss_weights: train.weights,
            joint: train.joint,
            freeze_clustering: train.freeze_clustering,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if self.k < 2 {
            return fail("k must be at least 2");
        }
        if self.window_size == Some(0) {
            return fail("window_size must be positive");
        }
        if self.batch == 0 {
            return fail("batch must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be a finite nonnegative number");
        }
        if !(self.tau >= -1.0) {
            return fail("tau must be at least -1");
        }
        if self.spatial_weight < 0.0 || self.temporal_weight < 0.0 {
            return fail("edge-type weights must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.min_match_confidence) {
            return fail("min_match_confidence must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig { tau: self.tau, normalize: self.normalize, encodings: self.encodings, feature_scale: self.feature_scale }
    }

    pub fn clustering(&self) -> ClusteringConfig {
        ClusteringConfig {
            k: self.k,
            objective: self.clustering_objective,
            gcn_hidden: self.gcn_hidden.clone(),
            mlp_hidden: self.mlp_hidden.clone(),
            regularizer_weight: self.regularizer_weight,
            spatial_weight: self.spatial_weight,
            temporal_weight: self.temporal_weight,
        }
    }

    pub fn model(&self, phases: usize) -> ModelConfig {
        ModelConfig {
            clustering: self.clustering(),
            edge_hidden: self.edge_hidden,
            classifier_hidden: self.classifier_hidden.clone(),
            phases,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            seed: self.seed,
            weights: self.loss_weights,
            joint: self.joint,
            freeze_clustering: self.freeze_clustering,
        }
    }
}
