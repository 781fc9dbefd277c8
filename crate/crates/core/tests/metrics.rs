use classmap::metrics::{evaluate, evaluate_trajectory};
use classmap::{LabelMap, ScoreStack, Tensor};
use proptest::prelude::*;

/// IoU of class `k` by enumerating the two pixel sets.
fn iou_by_sets(pred: &[u8], truth: &[u8], k: u8) -> f64 {
    let p: std::collections::BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == k).collect();
    let t: std::collections::BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] == k).collect();
    let union = p.union(&t).count();
    if union == 0 {
        return 1.0;
    }
    p.intersection(&t).count() as f64 / union as f64
}

#[test]
fn two_by_two_example() {
    let truth = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
    let r = evaluate(&pred, &truth, 2).unwrap();
    assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
    assert!((r.overall_accuracy - 0.75).abs() < 1e-12);
    for k in 0..2u8 {
        let want = iou_by_sets(pred.data(), truth.data(), k);
        assert!((r.iou_per_class[k as usize] - want).abs() < 1e-12);
    }
    assert!((r.iou_per_class[0] - 0.5).abs() < 1e-12);
    assert!((r.iou_per_class[1] - 2.0 / 3.0).abs() < 1e-12);
    assert!((r.mean_iou - 7.0 / 12.0).abs() < 1e-12);
}

#[test]
fn trajectory_scores_every_state() {
    let truth = LabelMap::new(1, 3, vec![0, 1, 1]).unwrap();
    let state = |v: [f32; 6]| ScoreStack::new(Tensor::new(&[1, 3, 2], v.to_vec()).unwrap()).unwrap();
    let traj = vec![
        state([1.0, 0.0, 1.0, 0.0, 1.0, 0.0]),
        state([1.0, 0.0, 0.0, 1.0, 1.0, 0.0]),
        state([1.0, 0.0, 0.0, 1.0, 0.0, 1.0]),
    ];
    let reps = evaluate_trajectory(&traj, &truth).unwrap();
    assert_eq!(reps.len(), 3);
    let acc: Vec<f64> = reps.iter().map(|r| r.overall_accuracy).collect();
    assert!((acc[0] - 1.0 / 3.0).abs() < 1e-12 && (acc[1] - 2.0 / 3.0).abs() < 1e-12 && acc[2] == 1.0);
    assert!(evaluate_trajectory(&[], &truth).is_err());
}

#[test]
fn ties_go_to_the_lowest_class() {
    let s = ScoreStack::new(Tensor::new(&[1, 1, 3], vec![0.2, 0.5, 0.5]).unwrap()).unwrap();
    assert_eq!(s.argmax().get(0, 0), 1);
}

fn maps() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1usize..40).prop_flat_map(|n| (prop::collection::vec(0u8..3, n), prop::collection::vec(0u8..3, n)))
}

proptest! {
    #[test]
    fn metrics_match_set_enumeration((pred, truth) in maps()) {
        let n = pred.len();
        let r = evaluate(&LabelMap::new(1, n, pred.clone()).unwrap(), &LabelMap::new(1, n, truth.clone()).unwrap(), 3).unwrap();
        let total: u64 = r.confusion.iter().flatten().sum();
        prop_assert_eq!(total as usize, n);
        for k in 0..3u8 {
            let want = iou_by_sets(&pred, &truth, k);
            prop_assert!((r.iou_per_class[k as usize] - want).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&want));
            let same = (0..n).all(|i| (pred[i] == k) == (truth[i] == k));
            prop_assert_eq!(want == 1.0, same);
        }
    }

    #[test]
    fn relabeling_permutes_the_report((pred, truth) in maps(), perm in Just([0u8, 1, 2]).prop_shuffle()) {
        let n = pred.len();
        let relabel = |v: &[u8]| LabelMap::new(1, n, v.iter().map(|&c| perm[c as usize]).collect()).unwrap();
        let a = evaluate(&LabelMap::new(1, n, pred.clone()).unwrap(), &LabelMap::new(1, n, truth.clone()).unwrap(), 3).unwrap();
        let b = evaluate(&relabel(&pred), &relabel(&truth), 3).unwrap();
        prop_assert_eq!(a.overall_accuracy, b.overall_accuracy);
        prop_assert!((a.mean_iou - b.mean_iou).abs() < 1e-12);
        for k in 0..3 {
            prop_assert_eq!(a.iou_per_class[k], b.iou_per_class[perm[k] as usize]);
        }
    }
}
