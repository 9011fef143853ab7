//! Dynamic scene graphs from patch features: spatiotemporal patch graphs,
//! differentiable clustering, scene-graph pooling and phase classification.

pub mod clustering;
pub mod downstream;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod layers;
pub mod matcher;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod prototype;
pub mod sparse;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor2;

pub use clustering::{ClusterAssignment, ClusteringConfig, Objective, PooledSceneGraph};
pub use downstream::{DsgModel, ModelConfig};
pub use graph::{DynamicGraph, Edge, FeatureClip, GraphConfig, Grid};
pub use io::{ClipDataset, RunConfig, Split};
pub use matcher::{Match, MatchList};
pub use metrics::{PhaseMetrics, SegmentationMetrics};
