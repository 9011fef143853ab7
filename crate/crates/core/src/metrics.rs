//! Phase accuracy / F1, segmentation PAC / mIoU with class-group means, and NMI.
//!
//! IoU is pooled per class over every scored frame (dataset-level IoU), not averaged
//! per frame. Macro F1 averages over classes present in the ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_pairs(preds: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if preds.len() != truth.len() {
            return Err(Error::shape("confusion", format!("{} predictions for {} labels", preds.len(), truth.len())));
        }
        let mut m = Self::new(classes);
        for (&p, &t) in preds.iter().zip(truth) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for label in [truth, predicted] {
            if label >= self.classes {
                return Err(Error::LabelOutOfRange { label, classes: self.classes });
            }
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion", format!("{} vs {} classes", self.classes, other.classes)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted_count(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum()
    }

    /// `|pred ∪ truth|` for one class.
    pub fn union(&self, class: usize) -> u64 {
        self.support(class) + self.predicted_count(class) - self.get(class, class)
    }

    pub fn f1(&self, class: usize) -> f64 {
        let tp = self.get(class, class) as f64;
        let denom = (self.support(class) + self.predicted_count(class)) as f64;
        if denom == 0.0 { 0.0 } else { 2.0 * tp / denom }
    }

    /// `None` when the class is absent from both prediction and truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let union = self.union(class);
        (union > 0).then(|| self.get(class, class) as f64 / union as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

/// Accuracy, macro F1 over classes present in `truth`, and micro F1.
pub fn phase_metrics(preds: &[usize], truth: &[usize], classes: usize) -> Result<PhaseMetrics> {
    if truth.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let confusion = ConfusionMatrix::from_pairs(preds, truth, classes)?;
    let accuracy = confusion.correct() as f64 / confusion.total() as f64;
    let per_class_f1: Vec<f64> = (0..classes).map(|c| confusion.f1(c)).collect();
    let present: Vec<usize> = (0..classes).filter(|&c| confusion.support(c) > 0).collect();
    let macro_f1 = present.iter().map(|&c| per_class_f1[c]).sum::<f64>() / present.len() as f64;
    // Single-label micro F1 equals accuracy; kept as its own field for reporting.
    let micro_f1 = accuracy;
    Ok(PhaseMetrics { accuracy, macro_f1, micro_f1, per_class_f1, confusion })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassGroup {
    Anatomy,
    Instrument,
    Misc,
}

/// Class index → group, as read from `{"<class>": "anatomy" | "instrument" | "misc"}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassGroups(pub BTreeMap<usize, ClassGroup>);

impl ClassGroups {
    pub fn members(&self, group: ClassGroup) -> Vec<usize> {
        self.0.iter().filter(|(_, g)| **g == group).map(|(c, _)| *c).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub pac: f64,
    pub miou: f64,
    /// `None` when no anatomy class has a nonzero union.
    pub miou_anatomy: Option<f64>,
    pub miou_instrument: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

fn mean_iou(confusion: &ConfusionMatrix, classes: impl Iterator<Item = usize>) -> Option<f64> {
    let ious: Vec<f64> = classes.filter_map(|c| confusion.iou(c)).collect();
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

/// PAC and dataset-level mIoU over paired per-frame maps of class indices.
pub fn segmentation_metrics(
    preds: &[Vec<usize>],
    truth: &[Vec<usize>],
    classes: usize,
    groups: &ClassGroups,
) -> Result<SegmentationMetrics> {
    if preds.len() != truth.len() {
        return Err(Error::shape("segmentation_metrics", format!("{} predicted maps for {} ground-truth maps", preds.len(), truth.len())));
    }
    let mut confusion = ConfusionMatrix::new(classes);
    for (f, (p, t)) in preds.iter().zip(truth).enumerate() {
        if p.len() != t.len() {
            return Err(Error::shape("segmentation_metrics", format!("frame {f}: {} vs {} patches", p.len(), t.len())));
        }
        for (&pc, &tc) in p.iter().zip(t) {
            confusion.record(tc, pc)?;
        }
    }
    if confusion.total() == 0 {
        return Err(Error::EmptyDataset);
    }
    let pac = confusion.correct() as f64 / confusion.total() as f64;
    let per_class_iou: Vec<Option<f64>> = (0..classes).map(|c| confusion.iou(c)).collect();
    let miou = mean_iou(&confusion, 0..classes).unwrap_or(0.0);
    let miou_anatomy = mean_iou(&confusion, groups.members(ClassGroup::Anatomy).into_iter().filter(|&c| c < classes));
    let miou_instrument = mean_iou(&confusion, groups.members(ClassGroup::Instrument).into_iter().filter(|&c| c < classes));
    Ok(SegmentationMetrics { pac, miou, miou_anatomy, miou_instrument, per_class_iou, confusion })
}

/// Normalized mutual information with arithmetic-mean normalization. Two single-cluster
/// labelings count as identical (NMI 1).
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("nmi", format!("{} vs {} labels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *pa.entry(x).or_default() += 1.0;
        *pb.entry(y).or_default() += 1.0;
    }
    let entropy = |m: &BTreeMap<usize, f64>| -m.values().map(|c| (c / n) * (c / n).ln()).sum::<f64>();
    let (ha, hb) = (entropy(&pa), entropy(&pb));
    let mi: f64 = joint.iter().map(|(&(x, y), &c)| (c / n) * ((c * n) / (pa[&x] * pb[&y])).ln()).sum();
    let denom = 0.5 * (ha + hb);
    if denom <= 0.0 {
        return Ok(1.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_phase_predictions() {
        let m = phase_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn binary_hand_example() {
        let m = phase_metrics(&[1, 1, 0, 0], &[1, 0, 1, 0], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.per_class_f1, vec![0.5, 0.5]);
        assert_eq!(m.macro_f1, 0.5);
    }

    #[test]
    fn constant_prediction_on_balanced_labels() {
        let m = phase_metrics(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn classes_absent_from_truth_are_excluded_from_macro() {
        // Class 2 never occurs in truth; its (zero) F1 does not drag the mean.
        let m = phase_metrics(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(phase_metrics(&[0], &[0, 1], 2).is_err());
        assert!(phase_metrics(&[], &[], 2).is_err());
    }

    #[test]
    fn segmentation_hand_example() {
        let (a, b) = (0, 1);
        let m = segmentation_metrics(&[vec![a, a, b, b]], &[vec![a, b, b, b]], 2, &ClassGroups::default()).unwrap();
        assert_eq!(m.pac, 0.75);
        assert_eq!(m.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_excluded_from_miou() {
        let m = segmentation_metrics(&[vec![0, 1]], &[vec![0, 1]], 3, &ClassGroups::default()).unwrap();
        assert_eq!(m.per_class_iou[2], None);
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn group_means() {
        let groups = ClassGroups([(0, ClassGroup::Anatomy), (1, ClassGroup::Instrument), (2, ClassGroup::Instrument)].into());
        let m = segmentation_metrics(&[vec![0, 1, 2, 2]], &[vec![0, 1, 1, 2]], 3, &groups).unwrap();
        assert_eq!(m.miou_anatomy, Some(1.0));
        // IoU_1 = 1/2, IoU_2 = 1/2.
        assert_eq!(m.miou_instrument, Some(0.5));
    }

    #[test]
    fn unknown_class_rejected() {
        assert!(segmentation_metrics(&[vec![3]], &[vec![0]], 2, &ClassGroups::default()).is_err());
    }

    #[test]
    fn nmi_reference_values() {
        assert!((nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap().abs() < 1e-12);
        // Splitting one of two balanced blocks in half: MI = ln 2, H = ln 2 and 1.5 ln 2.
        let v = nmi(&[0, 0, 0, 0, 1, 1, 1, 1], &[0, 0, 2, 2, 1, 1, 1, 1]).unwrap();
        assert!((v - 0.8).abs() < 1e-12);
    }

    #[test]
    fn group_file_round_trip() {
        let groups: ClassGroups = serde_json::from_str(r#"{"0": "anatomy", "3": "instrument", "5": "misc"}"#).unwrap();
        assert_eq!(groups.members(ClassGroup::Instrument), vec![3]);
        let back: ClassGroups = serde_json::from_str(&serde_json::to_string(&groups).unwrap()).unwrap();
        assert_eq!(back, groups);
    }
}
