//! Few-shot class prototypes, cosine labelling of clusters, and per-patch segmentation maps.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterAssignment, PooledSceneGraph};
use crate::error::{Error, Result};
use crate::graph::Grid;
use crate::tensor::{cosine, l2_norm, Tensor2};

/// L2-normalized class-mean features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub prototypes: BTreeMap<usize, Vec<f64>>,
    pub support_counts: BTreeMap<usize, usize>,
    /// Requested classes that had no support patch.
    pub excluded: Vec<usize>,
}

impl PrototypeBank {
    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.prototypes.keys().copied()
    }
}

/// One annotated frame: `n × d` patch features and a class index per patch.
#[derive(Debug, Clone)]
pub struct AnnotatedFrame {
    pub features: Tensor2,
    pub mask: Vec<usize>,
}

/// Per class, the mean of all patches labelled with it, then normalized. Member rows are
/// summed in sorted order, so the result does not depend on patch or frame order.
/// Classes in `expected` without support are listed in `excluded`.
pub fn build_prototypes(annotated: &[AnnotatedFrame], expected: &[usize]) -> Result<PrototypeBank> {
    if annotated.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = annotated[0].features.cols();
    let mut members: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (f, frame) in annotated.iter().enumerate() {
        if frame.features.cols() != dim || frame.features.rows() != frame.mask.len() {
            return Err(Error::shape(
                "build_prototypes",
                format!("frame {f}: {:?} features for {} mask entries (d = {dim})", frame.features.shape(), frame.mask.len()),
            ));
        }
        for (p, &class) in frame.mask.iter().enumerate() {
            members.entry(class).or_default().push(frame.features.row(p));
        }
    }
    let mut prototypes = BTreeMap::new();
    let mut support_counts = BTreeMap::new();
    for (class, mut rows) in members {
        rows.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| *o != Ordering::Equal).unwrap_or(Ordering::Equal));
        let mut mean = vec![0.0; dim];
        for row in &rows {
            mean.iter_mut().zip(row.iter()).for_each(|(m, v)| *m += v);
        }
        let count = rows.len();
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let norm = l2_norm(&mean);
        if norm > 0.0 {
            mean.iter_mut().for_each(|m| *m /= norm);
        }
        prototypes.insert(class, mean);
        support_counts.insert(class, count);
    }
    let excluded = expected.iter().copied().filter(|c| !prototypes.contains_key(c)).collect();
    Ok(PrototypeBank { prototypes, support_counts, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterLabel {
    pub class: usize,
    pub score: f64,
}

/// Cluster → class by argmax cosine between the cluster representative and each prototype.
/// Ties go to the lowest class index; several clusters may share a class.
pub fn label_clusters(sg: &PooledSceneGraph, bank: &PrototypeBank) -> Result<Vec<ClusterLabel>> {
    if bank.is_empty() {
        return Err(Error::Invalid("prototype bank is empty".into()));
    }
    let reps = &sg.representatives;
    let mut labels = Vec::with_capacity(reps.rows());
    for k in 0..reps.rows() {
        let mut best: Option<ClusterLabel> = None;
        for (&class, proto) in &bank.prototypes {
            if proto.len() != reps.cols() {
                return Err(Error::shape("label_clusters", format!("prototype dim {} vs feature dim {}", proto.len(), reps.cols())));
            }
            let score = cosine(reps.row(k), proto);
            if best.is_none_or(|b| score > b.score) {
                best = Some(ClusterLabel { class, score });
            }
        }
        labels.push(best.expect("nonempty bank"));
    }
    Ok(labels)
}

/// Per-frame patch labels on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMap {
    pub grid: Grid,
    pub frames: Vec<Vec<usize>>,
}

impl SegmentationMap {
    /// Portable graymap text, frames stacked vertically.
    pub fn to_pgm(&self) -> String {
        let max = self.frames.iter().flatten().copied().max().unwrap_or(0).max(1);
        let mut out = format!("P2\n{} {}\n{}\n", self.grid.cols, self.grid.rows * self.frames.len(), max);
        for frame in &self.frames {
            for r in 0..self.grid.rows {
                let row: Vec<String> = (0..self.grid.cols).map(|c| frame[r * self.grid.cols + c].to_string()).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out
    }
}

/// Each patch takes the label of its argmax cluster (lowest index on ties).
pub fn render_segmentation(c: &ClusterAssignment, labels: &[usize], grid: Grid) -> Result<SegmentationMap> {
    if labels.len() != c.k() {
        return Err(Error::shape("render_segmentation", format!("{} labels for {} clusters", labels.len(), c.k())));
    }
    let n = grid.patches();
    if n == 0 || c.nodes() % n != 0 {
        return Err(Error::shape("render_segmentation", format!("{} nodes on a {}x{} grid", c.nodes(), grid.rows, grid.cols)));
    }
    let hard = c.hard_labels();
    let frames = hard.chunks(n).map(|chunk| chunk.iter().map(|&k| labels[k]).collect()).collect();
    Ok(SegmentationMap { grid, frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(rows: &[&[f64]], mask: &[usize]) -> AnnotatedFrame {
        AnnotatedFrame { features: Tensor2::from_rows(rows), mask: mask.to_vec() }
    }

    #[test]
    fn single_class_prototype_is_normalized_mean() {
        let bank = build_prototypes(&[frame(&[&[1.0, 0.0], &[0.0, 1.0]], &[4, 4])], &[4]).unwrap();
        let p = &bank.prototypes[&4];
        let s = 0.5f64.sqrt();
        assert!((p[0] - s).abs() < 1e-15 && (p[1] - s).abs() < 1e-15);
        assert_eq!(bank.support_counts[&4], 2);
    }

    #[test]
    fn duplicate_frames_do_not_change_bank() {
        let f = frame(&[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 0.0]], &[0, 1, 0]);
        let one = build_prototypes(&[f.clone()], &[]).unwrap();
        let two = build_prototypes(&[f.clone(), f], &[]).unwrap();
        assert_eq!(one.prototypes, two.prototypes);
    }

    #[test]
    fn orthogonal_classes_give_orthogonal_prototypes() {
        let bank = build_prototypes(&[frame(&[&[2.0, 0.0, 0.0], &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]], &[0, 1, 0])], &[0, 1, 2]).unwrap();
        assert!(crate::tensor::dot(&bank.prototypes[&0], &bank.prototypes[&1]).abs() < 1e-6);
        assert_eq!(bank.excluded, vec![2]);
    }

    #[test]
    fn prototype_is_order_free_bitwise() {
        let rows: Vec<Vec<f64>> = (0..7).map(|i| vec![(i as f64 * 0.37).sin(), 0.1 * i as f64, 1.0 / (1.0 + i as f64)]).collect();
        let fwd: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let rev: Vec<&[f64]> = rows.iter().rev().map(Vec::as_slice).collect();
        let a = build_prototypes(&[frame(&fwd, &[0; 7])], &[]).unwrap();
        let b = build_prototypes(&[frame(&rev, &[0; 7])], &[]).unwrap();
        assert_eq!(a.prototypes[&0].iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.prototypes[&0].iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    fn scene(reps: Tensor2) -> PooledSceneGraph {
        let k = reps.rows();
        PooledSceneGraph {
            x_pool: reps.clone(),
            a_pool: Tensor2::zeros(k, k),
            w_pool: Tensor2::zeros(k, k),
            representatives: reps,
            frame_span: (0, 1),
            cluster_labels: None,
        }
    }

    fn bank() -> PrototypeBank {
        build_prototypes(&[frame(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1])], &[]).unwrap()
    }

    #[test]
    fn exact_prototype_match_scores_one() {
        let labels = label_clusters(&scene(Tensor2::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]])), &bank()).unwrap();
        assert_eq!(labels.iter().map(|l| l.class).collect::<Vec<_>>(), vec![1, 0]);
        assert!((labels[0].score - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tie_goes_to_lowest_class() {
        let labels = label_clusters(&scene(Tensor2::from_rows(&[&[1.0, 1.0]])), &bank()).unwrap();
        assert_eq!(labels[0].class, 0);
    }

    #[test]
    fn labels_are_scale_invariant() {
        let reps = Tensor2::from_rows(&[&[0.3, 0.7], &[0.9, -0.1]]);
        let a = label_clusters(&scene(reps.clone()), &bank()).unwrap();
        let b = label_clusters(&scene(reps.scale(17.0)), &bank()).unwrap();
        assert_eq!(a.iter().map(|l| l.class).collect::<Vec<_>>(), b.iter().map(|l| l.class).collect::<Vec<_>>());
    }

    #[test]
    fn empty_bank_rejected() {
        let empty = PrototypeBank { prototypes: BTreeMap::new(), support_counts: BTreeMap::new(), excluded: vec![] };
        assert!(label_clusters(&scene(Tensor2::zeros(1, 2)), &empty).is_err());
    }

    #[test]
    fn render_hard_assignment_composes_labels() {
        let c = ClusterAssignment::from_labels(&[0, 1, 1, 2, 2, 2, 0, 1], 3).unwrap();
        let map = render_segmentation(&c, &[5, 6, 5], Grid::new(2, 2)).unwrap();
        assert_eq!(map.frames, vec![vec![5, 6, 6, 5], vec![5, 5, 5, 6]]);
    }

    #[test]
    fn uniform_rows_pick_lowest_cluster() {
        let c = ClusterAssignment::uniform(4, 3);
        let map = render_segmentation(&c, &[2, 0, 1], Grid::new(2, 2)).unwrap();
        assert_eq!(map.frames, vec![vec![2; 4]]);
    }

    #[test]
    fn pgm_layout() {
        let map = SegmentationMap { grid: Grid::new(1, 2), frames: vec![vec![0, 3], vec![1, 2]] };
        assert_eq!(map.to_pgm(), "P2\n2 2\n3\n0 3\n1 2\n");
    }
}
