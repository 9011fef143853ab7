//! Phase and segmentation metrics against independent tallies over random small cases.

mod common;

use std::collections::BTreeMap;

use common::{mean, tally_iou, tally_pac, tally_phases};
use dsg_core::metrics::{phase_metrics, segmentation_metrics, ClassGroup, ClassGroups};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_groups(rng: &mut ChaCha8Rng, classes: usize) -> ClassGroups {
    let kinds = [ClassGroup::Anatomy, ClassGroup::Instrument, ClassGroup::Misc];
    ClassGroups((0..classes).map(|c| (c, kinds[rng.random_range(0..3)])).collect::<BTreeMap<_, _>>())
}

#[test]
fn phase_metrics_match_tally_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let classes = rng.random_range(1..=5);
        let len = rng.random_range(1..=30);
        let truth: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
        let preds: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
        let m = phase_metrics(&preds, &truth, classes).unwrap();
        let o = tally_phases(&preds, &truth, classes);
        assert_eq!(m.accuracy, o.accuracy, "case {case}");
        assert_eq!(m.macro_f1, o.macro_f1, "case {case}");
        assert_eq!(m.micro_f1, o.accuracy, "case {case}");
        assert_eq!(m.per_class_f1, o.per_class_f1, "case {case}");
    }
}

#[test]
fn segmentation_metrics_match_tally_on_random_4x4_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let classes = 3;
    for case in 0..200 {
        let frames = rng.random_range(1..=4);
        let mut draw = || -> Vec<Vec<usize>> {
            (0..frames).map(|_| (0..16).map(|_| rng.random_range(0..classes)).collect()).collect()
        };
        let truth = draw();
        let preds = draw();
        let groups = random_groups(&mut rng, classes);
        let m = segmentation_metrics(&preds, &truth, classes, &groups).unwrap();

        assert_eq!(m.pac, tally_pac(&preds, &truth), "case {case}");
        let ious: Vec<Option<f64>> = (0..classes).map(|c| tally_iou(&preds, &truth, c)).collect();
        assert_eq!(m.per_class_iou, ious, "case {case}");
        let all: Vec<f64> = ious.iter().flatten().copied().collect();
        assert_eq!(m.miou, mean(&all).unwrap(), "case {case}");
        let group_mean = |g: ClassGroup| {
            let vals: Vec<f64> = (0..classes).filter(|c| groups.0[c] == g).filter_map(|c| ious[c]).collect();
            mean(&vals)
        };
        assert_eq!(m.miou_anatomy, group_mean(ClassGroup::Anatomy), "case {case}");
        assert_eq!(m.miou_instrument, group_mean(ClassGroup::Instrument), "case {case}");
    }
}

#[test]
fn hand_computed_examples() {
    let m = phase_metrics(&[1, 1, 0, 0], &[1, 0, 1, 0], 2).unwrap();
    assert_eq!((m.accuracy, m.macro_f1), (0.5, 0.5));
    assert_eq!(m.per_class_f1, vec![0.5, 0.5]);

    let m = phase_metrics(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(m.accuracy, 0.5);
    assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);

    let m = segmentation_metrics(&[vec![0, 0, 1, 1]], &[vec![0, 1, 1, 1]], 2, &ClassGroups::default()).unwrap();
    assert_eq!(m.pac, 0.75);
    assert_eq!(m.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
    assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);

    // A class absent from both maps is left out of the mean.
    let m = segmentation_metrics(&[vec![0, 0, 1, 1]], &[vec![0, 1, 1, 1]], 3, &ClassGroups::default()).unwrap();
    assert_eq!(m.per_class_iou[2], None);
    assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);
}

#[test]
fn frame_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let frames = rng.random_range(2..=6);
        let mut draw = || -> Vec<Vec<usize>> { (0..frames).map(|_| (0..9).map(|_| rng.random_range(0..4)).collect()).collect() };
        let (preds, truth) = (draw(), draw());
        let mut order: Vec<usize> = (0..frames).collect();
        order.shuffle(&mut rng);
        let p2: Vec<_> = order.iter().map(|&i| preds[i].clone()).collect();
        let t2: Vec<_> = order.iter().map(|&i| truth[i].clone()).collect();
        let groups = random_groups(&mut rng, 4);
        let a = segmentation_metrics(&preds, &truth, 4, &groups).unwrap();
        let b = segmentation_metrics(&p2, &t2, 4, &groups).unwrap();
        assert_eq!(a, b);
        for v in [a.pac, a.miou].into_iter().chain(a.per_class_iou.iter().flatten().copied()) {
            assert!((0.0..=1.0).contains(&v));
        }

        let flat_p: Vec<usize> = preds.iter().map(|f| f[0]).collect();
        let flat_t: Vec<usize> = truth.iter().map(|f| f[0]).collect();
        let p1 = phase_metrics(&flat_p, &flat_t, 4).unwrap();
        let perm_p: Vec<usize> = order.iter().map(|&i| flat_p[i]).collect();
        let perm_t: Vec<usize> = order.iter().map(|&i| flat_t[i]).collect();
        assert_eq!(p1, phase_metrics(&perm_p, &perm_t, 4).unwrap());
    }
}

#[test]
fn self_scoring_is_perfect() {
    let maps = vec![vec![0, 1, 2, 2], vec![1, 1, 0, 2]];
    let m = segmentation_metrics(&maps, &maps, 3, &ClassGroups::default()).unwrap();
    assert_eq!((m.pac, m.miou), (1.0, 1.0));
    let p = phase_metrics(&[2, 0, 1], &[2, 0, 1], 3).unwrap();
    assert_eq!((p.accuracy, p.macro_f1), (1.0, 1.0));
}
