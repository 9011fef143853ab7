//! Mini-batch Adam training of the joint objective with per-epoch validation and
//! best-by-validation-F1 checkpointing.
//!
//! Batch members run on the rayon pool; gradients are always reduced in batch order, so
//! results do not depend on the thread count. `DSG_DETERMINISTIC=1` additionally forces
//! everything onto the calling thread.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::GraphInputs;
use crate::downstream::{DsgModel, Inference, JointLossReport, LossWeights, CLUSTERING_PREFIX};
use crate::error::{Error, Result};
use crate::graph::{base_features, build_dynamic_graph, FeatureClip, GraphConfig};
use crate::matcher::{mutual_nn_match, FrameMatches, MatchList};
use crate::metrics::{phase_metrics, PhaseMetrics};
use crate::params::{Adam, AdamConfig, Checkpoint, Gradients};

pub const DETERMINISTIC_ENV: &str = "DSG_DETERMINISTIC";

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    /// Let L_CE reach the clustering head; when false clustering learns from L_u only.
    pub joint: bool,
    /// Keep clustering parameters at their initial values.
    pub freeze_clustering: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 32,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            joint: true,
            freeze_clustering: false,
        }
    }
}

/// A clip with its graph tensors built once up front.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub id: String,
    pub inputs: GraphInputs,
    pub label: Option<usize>,
    pub frame_span: (i64, i64),
    pub window: usize,
    pub patches: usize,
}

/// How temporal edges are obtained for a clip.
#[derive(Debug, Clone, Copy)]
pub struct MatchSource<'a> {
    /// Matches loaded from file, indexed over the clip's full window.
    pub file: Option<&'a FrameMatches>,
    /// Floor for the built-in mutual-NN matcher when no file is present.
    pub min_confidence: f64,
    /// When false, no temporal edges are added.
    pub enabled: bool,
}

/// Match lists for the consecutive frames of `cropped`, the last frames of `clip`.
pub fn match_lists(clip: &FeatureClip, cropped: &FeatureClip, matches: MatchSource<'_>) -> Result<Vec<MatchList>> {
    let window = cropped.window;
    if !matches.enabled {
        Ok(vec![MatchList::default(); window - 1])
    } else if let Some(file) = matches.file {
        Ok(file.for_last_frames(clip.window, window))
    } else {
        (0..window - 1).map(|t| mutual_nn_match(&cropped.frame(t), &cropped.frame(t + 1), matches.min_confidence)).collect()
    }
}

/// Crops to the last `window` frames, matches consecutive frames and builds the graph inputs.
pub fn prepare_clip(
    id: &str,
    clip: &FeatureClip,
    window: usize,
    matches: MatchSource<'_>,
    graph: &GraphConfig,
    model: &DsgModel,
) -> Result<PreparedClip> {
    let cropped = clip.last_frames(window)?;
    let lists = match_lists(clip, &cropped, matches)?;
    let g = build_dynamic_graph(&cropped, graph, &lists)?;
    let inputs = GraphInputs::new(&g, &model.config.clustering)?.with_base_features(base_features(&cropped.features, graph))?;
    Ok(PreparedClip {
        id: id.to_string(),
        inputs,
        label: cropped.phase_label,
        frame_span: (cropped.frame_ids[0], cropped.frame_ids[window - 1]),
        window,
        patches: cropped.patches(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_u: f64,
    pub l_ce: f64,
    pub l_joint: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub val_f1_micro: f64,
}

pub const METRICS_HEADER: &str = "epoch,L_u,L_CE,L_joint,val_acc,val_f1,val_f1_micro";

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(out, "{},{},{},{},{},{},{}", r.epoch, r.l_u, r.l_ce, r.l_joint, r.val_acc, r.val_f1, r.val_f1_micro);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
    /// Parameters of the best epoch (now also loaded into the model).
    pub best: Checkpoint,
    /// Parameters and optimizer state after the final epoch.
    pub last: Checkpoint,
}

fn run_batch<T: Send>(items: &[&PreparedClip], f: impl Fn(&PreparedClip) -> Result<T> + Sync) -> Result<Vec<T>> {
    if deterministic_mode() {
        items.iter().map(|c| f(c)).collect()
    } else {
        items.par_iter().map(|c| f(c)).collect()
    }
}

/// Runs the model on every clip, returning inferences in input order.
pub fn infer_all(model: &DsgModel, clips: &[PreparedClip]) -> Result<Vec<Inference>> {
    let refs: Vec<&PreparedClip> = clips.iter().collect();
    run_batch(&refs, |c| model.infer(&c.inputs, c.frame_span))
}

pub fn evaluate_phases(model: &DsgModel, clips: &[PreparedClip]) -> Result<(PhaseMetrics, Vec<Inference>)> {
    let inferences = infer_all(model, clips)?;
    let truth: Vec<usize> = clips.iter().map(|c| c.label.ok_or(Error::MissingLabel)).collect::<Result<_>>()?;
    let preds: Vec<usize> = inferences.iter().map(|i| i.prediction.predicted).collect();
    Ok((phase_metrics(&preds, &truth, model.config.phases)?, inferences))
}

/// Trains `model` in place and finally loads the best-by-validation parameters into it.
pub fn train(model: &mut DsgModel, train_set: &[PreparedClip], val_set: &[PreparedClip], config: &TrainConfig) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let phases = model.config.phases;
    for clip in train_set.iter().chain(val_set) {
        match clip.label {
            None => return Err(Error::MissingLabel),
            Some(l) if l >= phases => return Err(Error::LabelOutOfRange { label: l, classes: phases }),
            _ => {}
        }
    }
    model.store.set_frozen(CLUSTERING_PREFIX, config.freeze_clustering);
    let mut adam = Adam::new(config.adam, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (f64::NEG_INFINITY, 0usize, Checkpoint::capture(&model.store, None));

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        for chunk in order.chunks(config.batch) {
            let items: Vec<&PreparedClip> = chunk.iter().map(|&i| &train_set[i]).collect();
            let model_ref: &DsgModel = model;
            let results: Vec<(JointLossReport, Gradients)> =
                run_batch(&items, |c| model_ref.joint_loss(&c.inputs, c.label, config.weights, config.joint))?;
            model.store.zero_grad();
            let scale = 1.0 / items.len() as f64;
            for (report, grads) in &results {
                sums[0] += report.l_u;
                sums[1] += report.l_ce;
                sums[2] += report.l_joint;
                model.store.accumulate(grads, scale);
            }
            adam.step(&mut model.store);
        }
        let count = train_set.len() as f64;
        let (val_acc, val_f1, val_f1_micro) = if val_set.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let (m, _) = evaluate_phases(model, val_set)?;
            (m.accuracy, m.macro_f1, m.micro_f1)
        };
        history.push(EpochRecord {
            epoch,
            l_u: sums[0] / count,
            l_ce: sums[1] / count,
            l_joint: sums[2] / count,
            val_acc,
            val_f1,
            val_f1_micro,
        });
        // Ties, and runs without a validation split, keep the latest epoch.
        let score = if val_set.is_empty() { 0.0 } else { val_f1 };
        if score >= best.0 {
            best = (score, epoch, Checkpoint::capture(&model.store, None));
        }
    }

    let last = Checkpoint::capture(&model.store, Some(&adam));
    best.2.restore(&mut model.store)?;
    model.store.set_frozen(CLUSTERING_PREFIX, false);
    Ok(TrainReport { history, best_epoch: best.1, best: best.2, last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downstream::ModelConfig;
    use crate::clustering::ClusteringConfig;
    use crate::io::{generate_synthetic, SyntheticSpec};

    fn setup(lr: f64) -> (DsgModel, Vec<PreparedClip>, TrainConfig) {
        let spec = SyntheticSpec { train: 12, val: 0, test: 0, window: 2, ..Default::default() };
        let ds = generate_synthetic(&spec).unwrap();
        let config = ModelConfig {
            clustering: ClusteringConfig { k: 4, gcn_hidden: vec![8], mlp_hidden: vec![8], ..Default::default() },
            edge_hidden: 4,
            classifier_hidden: vec![8],
            phases: ds.manifest.phases,
        };
        let model = DsgModel::new(config, spec.dim, 3).unwrap();
        let clips = ds
            .clips
            .iter()
            .map(|r| {
                let source = MatchSource { file: r.matches.as_ref(), min_confidence: 0.7, enabled: true };
                prepare_clip(&r.id, &r.clip, 2, source, &GraphConfig::default(), &model).unwrap()
            })
            .collect();
        let train = TrainConfig { epochs: 3, batch: 5, adam: AdamConfig { lr, ..Default::default() }, ..Default::default() };
        (model, clips, train)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let (mut model, clips, config) = setup(0.0);
        let before = Checkpoint::capture(&model.store, None);
        train(&mut model, &clips, &[], &config).unwrap();
        assert_eq!(Checkpoint::capture(&model.store, None), before);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let (mut a, clips, config) = setup(1e-3);
        let mut b = a.clone();
        let ra = train(&mut a, &clips, &clips[..4], &config).unwrap();
        let rb = train(&mut b, &clips, &clips[..4], &config).unwrap();
        assert_eq!(metrics_csv(&ra.history), metrics_csv(&rb.history));
        assert_eq!(ra.last.to_bytes(), rb.last.to_bytes());
    }

    #[test]
    fn frozen_clustering_stays_put() {
        let (mut model, clips, mut config) = setup(1e-2);
        config.freeze_clustering = true;
        let before = model.store.clone();
        train(&mut model, &clips, &[], &config).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            if a.name.starts_with(CLUSTERING_PREFIX) {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
        assert!(before.iter().zip(model.store.iter()).any(|((_, a), (_, b))| a.value != b.value));
    }

    #[test]
    fn empty_dataset_and_bad_labels_rejected() {
        let (mut model, mut clips, config) = setup(1e-3);
        assert!(matches!(train(&mut model, &[], &[], &config), Err(Error::EmptyDataset)));
        clips[0].label = Some(99);
        assert!(matches!(train(&mut model, &clips, &[], &config), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn csv_layout() {
        let rec = EpochRecord { epoch: 1, l_u: -0.5, l_ce: 1.0, l_joint: 0.5, val_acc: 0.75, val_f1: 0.5, val_f1_micro: 0.75 };
        assert_eq!(metrics_csv(&[rec]), "epoch,L_u,L_CE,L_joint,val_acc,val_f1,val_f1_micro\n1,-0.5,1,0.5,0.75,0.5,0.75\n");
    }
}
