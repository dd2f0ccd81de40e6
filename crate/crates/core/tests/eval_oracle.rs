mod support;

use std::collections::BTreeMap;

use incdet::eval::{
    average_precision, group_report, joint_ratio, map_at, per_class_ap, EvalDetection, GroundTruth,
};
use incdet::geometry::BoundingBox;
use proptest::prelude::*;
use support::{brute_ap, micro_eval_case};

fn of_class<T: Copy>(v: &[T], c: u32, class: impl Fn(&T) -> u32) -> Vec<T> {
    v.iter().filter(|x| class(x) == c).copied().collect()
}

#[test]
fn matches_brute_force_on_seeded_micro_cases() {
    for seed in 0..50 {
        let (dets, gts) = micro_eval_case(seed);
        for c in 1..=2 {
            let d = of_class(&dets, c, |x| x.class_id);
            let g = of_class(&gts, c, |x| x.class_id);
            for thr in [0.3, 0.5, 0.75] {
                let got = average_precision(&d, &g, thr);
                let want = brute_ap(&d, &g, thr);
                match (got, want) {
                    (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-9, "seed {seed} class {c}: {a} vs {b}"),
                    (a, b) => assert_eq!(a, b, "seed {seed} class {c}"),
                }
            }
        }
    }
}

#[test]
fn perfect_and_empty_cases() {
    let g = GroundTruth { image_id: 0, class_id: 1, bbox: BoundingBox::new(0.0, 0.0, 4.0, 4.0) };
    let hit = EvalDetection { image_id: 0, class_id: 1, bbox: g.bbox, score: 0.9 };
    assert_eq!(average_precision(&[hit], &[g], 0.5), Some(1.0));
    assert_eq!(average_precision(&[], &[g], 0.5), Some(0.0));
    assert_eq!(average_precision(&[hit], &[], 0.5), Some(0.0));
    assert_eq!(average_precision(&[], &[], 0.5), None);
}

#[test]
fn singleton_threshold_map_is_mean_of_class_ap() {
    for seed in 0..50 {
        let (dets, gts) = micro_eval_case(seed);
        let aps: Vec<f64> = (1..=2)
            .filter_map(|c| {
                average_precision(&of_class(&dets, c, |x| x.class_id), &of_class(&gts, c, |x| x.class_id), 0.5)
            })
            .collect();
        let want = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
        assert_eq!(map_at(&dets, &gts, &[1, 2], &[0.5]).unwrap(), want);
    }
    assert!(map_at(&[], &[], &[1], &[]).is_err());
}

#[test]
fn group_means_of_a_two_step_split() {
    let per: BTreeMap<u32, Option<f64>> = [(1, Some(0.4)), (2, Some(0.6)), (3, Some(0.2)), (4, None)].into();
    let g = group_report(&per, &[vec![1, 2], vec![3, 4]]);
    assert!((g.base.unwrap() - 0.5).abs() < 1e-15);
    assert!((g.new.unwrap() - 0.2).abs() < 1e-15);
    assert!((g.all.unwrap() - 0.4).abs() < 1e-15);
    assert_eq!(g.intermediate, None);
}

#[test]
fn ratio_rejects_zero_joint() {
    assert!(joint_ratio(0.3, 0.0).is_err());
    assert_eq!(joint_ratio(0.4, 0.4).unwrap(), 1.0);
}

fn case() -> impl Strategy<Value = (Vec<EvalDetection>, Vec<GroundTruth>)> {
    (0u64..10_000).prop_map(|s| {
        let (d, g) = micro_eval_case(s);
        (of_class(&d, 1, |x| x.class_id), of_class(&g, 1, |x| x.class_id))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ap_ignores_input_order((d, g) in case(), perm in any::<u64>()) {
        let mut shuffled = d.clone();
        let n = shuffled.len();
        if n > 1 {
            let mut p = perm;
            for i in (1..n).rev() {
                shuffled.swap(i, (p % (i as u64 + 1)) as usize);
                p /= i as u64 + 1;
                p = p.wrapping_mul(6364136223846793005).wrapping_add(1);
            }
        }
        prop_assert_eq!(average_precision(&d, &g, 0.5), average_precision(&shuffled, &g, 0.5));
    }

    #[test]
    fn ap_is_bounded_and_non_increasing_in_threshold((d, g) in case()) {
        let mut prev = f64::INFINITY;
        for thr in incdet::eval::coco_thresholds() {
            if let Some(ap) = average_precision(&d, &g, thr) {
                prop_assert!((0.0..=1.0).contains(&ap));
                prop_assert!(ap <= prev + 1e-12);
                prev = ap;
            }
        }
    }

    #[test]
    fn duplicating_a_detection_never_helps((d, g) in case(), pick in any::<prop::sample::Index>(), frac in 0.0..=1.0f64) {
        // One ground truth per image, duplicate ranked no higher than its source.
        let mut seen = std::collections::BTreeSet::new();
        let g: Vec<GroundTruth> = g.into_iter().filter(|x| seen.insert(x.image_id)).collect();
        prop_assume!(!d.is_empty() && !g.is_empty());
        let base = average_precision(&d, &g, 0.5).unwrap();
        let src = d[pick.index(d.len())];
        let mut dup = d.clone();
        dup.push(EvalDetection { score: src.score * frac, ..src });
        prop_assert!(average_precision(&dup, &g, 0.5).unwrap() <= base + 1e-12);
    }

    #[test]
    fn per_class_ap_matches_brute_force(seed in 0u64..100_000) {
        let (d, g) = micro_eval_case(seed);
        let got = per_class_ap(&d, &g, &[1, 2], &[0.5]);
        for c in 1..=2u32 {
            let want = brute_ap(&of_class(&d, c, |x| x.class_id), &of_class(&g, c, |x| x.class_id), 0.5);
            match (got[&c], want) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-9),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }
}
