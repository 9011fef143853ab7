//! Dataset-level glue: prepare clips for a run configuration, build prototypes from the
//! annotation file, and score phases, segmentation and cluster recovery.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::{DsgModel, Inference};
use crate::error::{Error, Result};
use crate::graph::{base_features, build_dynamic_graph, DynamicGraph};
use crate::io::{ClipDataset, ClipRecord, RunConfig, Split};
use crate::params::Checkpoint;
use crate::metrics::{nmi, phase_metrics, segmentation_metrics, PhaseMetrics, SegmentationMetrics};
use crate::prototype::{build_prototypes, label_clusters, render_segmentation, AnnotatedFrame, PrototypeBank, SegmentationMap};
use crate::training::{infer_all, match_lists, prepare_clip, train, MatchSource, PreparedClip, TrainReport};

/// Window size of a run: the configured size, or the dataset's when unset.
pub fn run_window(dataset: &ClipDataset, config: &RunConfig) -> Result<usize> {
    let w = config.window_size.unwrap_or(dataset.manifest.window);
    if w == 0 || w > dataset.manifest.window {
        return Err(Error::Config(format!("window_size {w} does not fit clips of {} frames", dataset.manifest.window)));
    }
    Ok(w)
}

/// Fresh model sized for `dataset`, initialized from the configured seed.
pub fn build_model(dataset: &ClipDataset, config: &RunConfig) -> Result<DsgModel> {
    DsgModel::new(config.model(dataset.manifest.phases), dataset.manifest.dim, config.seed)
}

/// Model for `dataset` with parameters read from a checkpoint.
pub fn load_model(dataset: &ClipDataset, config: &RunConfig, checkpoint: &Path) -> Result<DsgModel> {
    let mut model = build_model(dataset, config)?;
    Checkpoint::load(checkpoint)?.restore(&mut model.store).map_err(|e| Error::format(checkpoint, e.to_string()))?;
    Ok(model)
}

/// Builds a model and trains it on the train split, selecting by the val split.
pub fn train_dataset(dataset: &ClipDataset, config: &RunConfig) -> Result<(DsgModel, TrainReport)> {
    let mut model = build_model(dataset, config)?;
    let train_records = records(dataset, Split::Train);
    if train_records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let train_set = prepare_records(&train_records, dataset, config, &model)?;
    let val_set = prepare_records(&records(dataset, Split::Val), dataset, config, &model)?;
    let report = train(&mut model, &train_set, &val_set, &config.train())?;
    Ok((model, report))
}

/// Runs `model` over one split and scores it, with prototypes from the dataset annotations
/// when there are any.
pub fn evaluate_split(model: &DsgModel, dataset: &ClipDataset, config: &RunConfig, split: Split) -> Result<(Evaluation, Vec<ClipOutput>)> {
    let recs = records(dataset, split);
    let prepared = prepare_records(&recs, dataset, config, model)?;
    let bank = if dataset.annotations.is_empty() { None } else { Some(dataset_prototypes(dataset, config)?) };
    evaluate_records(model, dataset, &recs, &prepared, bank.as_ref())
}

pub fn prepare_records(records: &[&ClipRecord], dataset: &ClipDataset, config: &RunConfig, model: &DsgModel) -> Result<Vec<PreparedClip>> {
    let window = run_window(dataset, config)?;
    let graph = config.graph();
    records
        .iter()
        .map(|r| {
            let source = MatchSource { file: r.matches.as_ref(), min_confidence: config.min_match_confidence, enabled: config.temporal_edges };
            prepare_clip(&r.id, &r.clip, window, source, &graph, model).map_err(|e| Error::Invalid(format!("clip {}: {e}", r.id)))
        })
        .collect()
}

/// The patch graph of a record's last frames under `config`.
pub fn record_graph(record: &ClipRecord, dataset: &ClipDataset, config: &RunConfig) -> Result<DynamicGraph> {
    let window = run_window(dataset, config)?;
    let cropped = record.clip.last_frames(window)?;
    let source = MatchSource { file: record.matches.as_ref(), min_confidence: config.min_match_confidence, enabled: config.temporal_edges };
    let lists = match_lists(&record.clip, &cropped, source)?;
    build_dynamic_graph(&cropped, &config.graph(), &lists)
}

pub fn records(dataset: &ClipDataset, split: Split) -> Vec<&ClipRecord> {
    dataset.split(split).collect()
}

/// Prototypes from the annotated frames, using the same feature normalization as the graph.
pub fn dataset_prototypes(dataset: &ClipDataset, config: &RunConfig) -> Result<PrototypeBank> {
    let graph = config.graph();
    let frames: Vec<AnnotatedFrame> = dataset
        .annotations
        .iter()
        .map(|a| {
            let id = a.clip.as_deref().ok_or_else(|| Error::Invalid("annotation without clip".into()))?;
            let record = dataset.find(id).ok_or_else(|| Error::Invalid(format!("annotation refers to unknown clip {id}")))?;
            let frame = a.frame.ok_or_else(|| Error::Invalid("annotation without frame index".into()))?;
            Ok(AnnotatedFrame { features: base_features(&record.clip.frame(frame), &graph), mask: a.mask.clone() })
        })
        .collect::<Result<_>>()?;
    let expected: Vec<usize> = (0..dataset.manifest.classes.unwrap_or(0)).collect();
    build_prototypes(&frames, &expected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub clips: usize,
    pub phase: Option<PhaseMetrics>,
    pub segmentation: Option<SegmentationMetrics>,
    /// NMI between hard cluster assignments and ground-truth classes, pooled over all nodes.
    pub nmi: Option<f64>,
}

/// Per-clip outputs kept for export.
#[derive(Debug, Clone)]
pub struct ClipOutput {
    pub id: String,
    pub inference: Inference,
    pub cluster_classes: Option<Vec<usize>>,
    pub segmentation: Option<SegmentationMap>,
}

/// Runs the model over `records` and scores everything the dataset has ground truth for.
pub fn evaluate_records(
    model: &DsgModel,
    dataset: &ClipDataset,
    records: &[&ClipRecord],
    prepared: &[PreparedClip],
    bank: Option<&PrototypeBank>,
) -> Result<(Evaluation, Vec<ClipOutput>)> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let inferences = infer_all(model, prepared)?;
    let labelled: Vec<(usize, usize)> = prepared
        .iter()
        .zip(&inferences)
        .filter_map(|(p, i)| p.label.map(|l| (i.prediction.predicted, l)))
        .collect();
    let phase = if labelled.is_empty() {
        None
    } else {
        let (preds, truth): (Vec<usize>, Vec<usize>) = labelled.into_iter().unzip();
        Some(phase_metrics(&preds, &truth, model.config.phases)?)
    };

    let mut outputs = Vec::with_capacity(records.len());
    let (mut cluster_ids, mut node_classes) = (Vec::new(), Vec::new());
    let (mut pred_maps, mut true_maps) = (Vec::new(), Vec::new());
    for ((record, prep), inference) in records.iter().zip(prepared).zip(inferences) {
        let truth = record.masks.as_ref().map(|m| &m[m.len() - prep.window..]);
        if let Some(truth) = truth {
            cluster_ids.extend(inference.assignment.hard_labels());
            node_classes.extend(truth.iter().flatten().copied());
        }
        let (cluster_classes, segmentation) = match bank {
            Some(bank) => {
                let labels: Vec<usize> = label_clusters(&inference.scene, bank)?.iter().map(|l| l.class).collect();
                let map = render_segmentation(&inference.assignment, &labels, record.clip.grid)?;
                if let Some(truth) = truth {
                    pred_maps.extend(map.frames.iter().cloned());
                    true_maps.extend(truth.iter().cloned());
                }
                (Some(labels), Some(map))
            }
            None => (None, None),
        };
        let mut inference = inference;
        inference.scene.cluster_labels = cluster_classes.clone();
        outputs.push(ClipOutput { id: record.id.clone(), inference, cluster_classes, segmentation });
    }
    let nmi = if cluster_ids.is_empty() { None } else { Some(nmi(&cluster_ids, &node_classes)?) };
    let segmentation = match (pred_maps.is_empty(), dataset.manifest.classes) {
        (false, Some(classes)) => Some(segmentation_metrics(&pred_maps, &true_maps, classes, &dataset.class_groups)?),
        _ => None,
    };
    Ok((Evaluation { clips: records.len(), phase, segmentation, nmi }, outputs))
}
