mod support;

use incdet::detector::{HeadOutput, LossBreakdown, RpnOutput};
use incdet::distill::{
    box_head_distill, feature_distill, rpn_distill, total_loss, DistillationConfig, KdTerms, Method, RpnIndicator,
};
use incdet::tensor::Grid;
use proptest::prelude::*;
use support::loss::{box_oracle, feature_oracle, rpn, rpn_oracle};

/// Student `n x sm` head and a teacher with `m <= sm` logit slots.
fn head_pair() -> impl Strategy<Value = (HeadOutput<f64>, HeadOutput<f64>)> {
    (1usize..6, 2usize..5, 0usize..3).prop_flat_map(|(n, m, extra)| {
        let sm = m + extra;
        (
            prop::collection::vec(-5.0..5.0f64, n * sm),
            prop::collection::vec(-2.0..2.0f64, n * 4 * (sm - 1)),
            prop::collection::vec(-5.0..5.0f64, n * m),
            prop::collection::vec(-2.0..2.0f64, n * 4 * (m - 1)),
        )
            .prop_map(move |(sl, sd, tl, td)| {
                (
                    HeadOutput { rows: n, logits: sl, deltas: sd },
                    HeadOutput { rows: n, logits: tl, deltas: td },
                )
            })
    })
}

fn permute_rows(v: &[f64], width: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter().flat_map(|&r| v[r * width..(r + 1) * width].iter().copied()).collect()
}

fn permutation(n: usize, key: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut k = key;
    for i in (1..n).rev() {
        p.swap(i, (k % (i as u64 + 1)) as usize);
        k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    }
    p
}

#[test]
fn worked_examples() {
    let s: HeadOutput<f64> = HeadOutput { rows: 1, logits: vec![1.0, 3.0], deltas: vec![0.0; 4] };
    let t = HeadOutput { rows: 1, logits: vec![1.0, 1.0], deltas: vec![0.0; 4] };
    assert!((box_head_distill(&s, &t).unwrap() - 2.0).abs() < 1e-12);
    let g = |v: Vec<f64>| Grid::from_vec(1, 1, v.len(), v).unwrap();
    assert!((feature_distill(&g(vec![1.0, 3.0]), &g(vec![2.0, 0.0])).unwrap() - 0.5).abs() < 1e-12);
    assert!((feature_distill(&g(vec![0.0, 1.0]), &g(vec![3.0, 1.0])).unwrap() - 1.5).abs() < 1e-12);
    let r = |s: f64| RpnOutput { logits: vec![(s / (1.0 - s)).ln()], scores: vec![s], deltas: vec![0.0; 4] };
    let d = RpnIndicator::StudentDominant;
    assert_eq!(rpn_distill(&r(0.4), &r(0.6), 0.1, d).unwrap(), 0.0);
    assert!((rpn_distill(&r(0.8), &r(0.5), 0.1, d).unwrap() - 0.3).abs() < 1e-12);
}

#[test]
fn totals_without_weights_are_supervised() {
    let sup = LossBreakdown { rpn_cls: 0.5, rpn_reg: 0.25, box_cls: 1.0, box_reg: 0.25, ..Default::default() };
    let kd = KdTerms { box_distill: Some(0.5), feat_distill: Some(0.25), rpn_distill: Some(0.1) };
    let zero = DistillationConfig { lambda_box: 0.0, lambda_feat: 0.0, lambda_rpn: 0.0, ..Default::default() };
    for m in Method::ALL {
        assert_eq!(total_loss(m, &sup, &kd, &zero).unwrap(), 2.0);
    }
    let one = DistillationConfig::default();
    assert!((total_loss(Method::Filod, &sup, &kd, &one).unwrap() - 2.85).abs() < 1e-12);
    assert!((total_loss(Method::DynYkd, &sup, &kd, &one).unwrap() - 2.6).abs() < 1e-12);
    let missing = KdTerms { box_distill: None, ..kd };
    assert!(total_loss(Method::Ilod, &sup, &missing, &one).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn box_distill_matches_oracle_and_is_row_order_free((s, t) in head_pair(), key in any::<u64>()) {
        let v = box_head_distill(&s, &t).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert!((v - box_oracle(&s, &t)).abs() <= 1e-9 * v.max(1.0));
        let p = permutation(s.rows, key);
        let ps = HeadOutput {
            rows: s.rows,
            logits: permute_rows(&s.logits, s.logit_width(), &p),
            deltas: permute_rows(&s.deltas, s.delta_width(), &p),
        };
        let pt = HeadOutput {
            rows: t.rows,
            logits: permute_rows(&t.logits, t.logit_width(), &p),
            deltas: permute_rows(&t.deltas, t.delta_width(), &p),
        };
        prop_assert!((box_head_distill(&ps, &pt).unwrap() - v).abs() <= 1e-12 * v.max(1.0));
    }

    #[test]
    fn box_distill_scales_quadratically((s, t) in head_pair(), alpha in 1.0..10.0f64) {
        let (m, sm) = (t.logit_width(), s.logit_width());
        let (tr, sr) = (t.delta_width(), s.delta_width());
        let mut scaled = s.clone();
        for r in 0..s.rows {
            for c in 0..m {
                let i = r * sm + c;
                scaled.logits[i] = t.logits[r * m + c] + alpha * (s.logits[i] - t.logits[r * m + c]);
            }
            for j in 0..tr {
                let i = r * sr + j;
                scaled.deltas[i] = t.deltas[r * tr + j] + alpha * (s.deltas[i] - t.deltas[r * tr + j]);
            }
        }
        let v = box_head_distill(&s, &t).unwrap();
        let w = box_head_distill(&scaled, &t).unwrap();
        prop_assert!((w - alpha * alpha * v).abs() <= 1e-9 * w.max(1.0));
    }

    #[test]
    fn box_distill_vanishes_on_matching_slots((s, t) in head_pair()) {
        let (m, sm) = (t.logit_width(), s.logit_width());
        let (tr, sr) = (t.delta_width(), s.delta_width());
        let mut same = s.clone();
        for r in 0..s.rows {
            same.logits[r * sm..r * sm + m].copy_from_slice(&t.logits[r * m..(r + 1) * m]);
            same.deltas[r * sr..r * sr + tr].copy_from_slice(&t.deltas[r * tr..(r + 1) * tr]);
        }
        prop_assert_eq!(box_head_distill(&same, &t).unwrap(), 0.0);
    }

    #[test]
    fn feature_distill_is_one_sided(
        dims in (1usize..4, 1usize..4, 1usize..5),
        seed in prop::collection::vec(-3.0..3.0f64, 2 * 48),
    ) {
        let (h, w, c) = dims;
        let n = h * w * c;
        let s = Grid::from_vec(h, w, c, seed[..n].to_vec()).unwrap();
        let t = Grid::from_vec(h, w, c, seed[48..48 + n].to_vec()).unwrap();
        let v = feature_distill(&s, &t).unwrap();
        let want = feature_oracle(&s.data, &t.data);
        prop_assert!((v - want).abs() <= 1e-12);
        prop_assert_eq!(feature_distill(&s, &s).unwrap(), 0.0);
        let above = Grid { data: t.data.iter().map(|x| x + 1.0).collect(), ..t.clone() };
        prop_assert_eq!(feature_distill(&above, &t).unwrap(), 0.0);
    }

    #[test]
    fn rpn_distill_matches_oracle(
        n in 1usize..8,
        v in prop::collection::vec(-4.0..4.0f64, 2 * 8 * 5),
        tau in 0.01..0.5f64,
        key in any::<u64>(),
    ) {
        let s = rpn(v[..n].to_vec(), v[16..16 + 4 * n].to_vec());
        let t = rpn(v[8..8 + n].to_vec(), v[48..48 + 4 * n].to_vec());
        for (ind, lead) in [(RpnIndicator::StudentDominant, true), (RpnIndicator::TeacherDominant, false)] {
            let got = rpn_distill(&s, &t, tau, ind).unwrap();
            prop_assert!(got >= 0.0);
            prop_assert!((got - rpn_oracle(&s, &t, tau, lead)).abs() <= 1e-12);
            prop_assert_eq!(rpn_distill(&s, &s, tau, ind).unwrap(), 0.0);
            let p = permutation(n, key);
            let ps = rpn(p.iter().map(|&i| s.logits[i]).collect(), permute_rows(&s.deltas, 4, &p));
            let pt = rpn(p.iter().map(|&i| t.logits[i]).collect(), permute_rows(&t.deltas, 4, &p));
            prop_assert!((rpn_distill(&ps, &pt, tau, ind).unwrap() - got).abs() <= 1e-12);
        }
    }
}
