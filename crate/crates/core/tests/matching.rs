mod common;

use common::{brute_force, random_costs, rng};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use setpose::geometry::HandSide;
use setpose::matching::{hungarian, match_hands, set_loss, Assignment, CostMatrix, GtHand, LossWeights};
use setpose::model::{DetectionSet, QueryPrediction, JOINT_OUTPUTS};

fn random_queries(r: &mut impl Rng, n: usize) -> DetectionSet<f64> {
    let queries = (0..n)
        .map(|_| {
            let logits = [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)];
            let joints = (0..JOINT_OUTPUTS).map(|_| r.gen_range(0.0..1.0)).collect();
            QueryPrediction::new(logits, joints).unwrap()
        })
        .collect();
    DetectionSet { queries }
}

fn random_gts(r: &mut impl Rng, n: usize) -> Vec<GtHand<f64>> {
    let mut sides = HandSide::BOTH.to_vec();
    sides.shuffle(r);
    sides
        .into_iter()
        .take(n)
        .map(|side| GtHand { side, joints_norm: (0..JOINT_OUTPUTS).map(|_| r.gen_range(0.0..1.0)).collect() })
        .collect()
}

fn all_injections(rows: usize, cols: usize) -> Vec<Vec<usize>> {
    if rows == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for head in all_injections(rows - 1, cols) {
        for c in 0..cols {
            if !head.contains(&c) {
                let mut v = head.clone();
                v.push(c);
                out.push(v);
            }
        }
    }
    out
}

fn assignment(cols: &[usize]) -> Assignment<f64> {
    Assignment { pairs: cols.iter().copied().enumerate().collect(), total_cost: 0.0 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hungarian_equals_brute_force(seed in any::<u64>()) {
        let mut r = rng(seed);
        let rows = r.gen_range(0..=5);
        let cols = r.gen_range(rows.max(1)..=8);
        let c = random_costs(&mut r, rows, cols);
        let a = hungarian(&c).unwrap();
        let (best, cols_best) = brute_force(&c);
        prop_assert_eq!(a.total_cost, best);
        let got: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(got, cols_best);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn row_offset_keeps_assignment(seed in any::<u64>(), k in -20.0..20.0f64) {
        let mut r = rng(seed);
        let rows = r.gen_range(1..=5);
        let cols = r.gen_range(rows..=8);
        let c = random_costs(&mut r, rows, cols);
        let row = r.gen_range(0..rows);
        let shifted: Vec<Vec<f64>> = (0..rows)
            .map(|i| (0..cols).map(|j| c.get(i, j) + if i == row { k } else { 0.0 }).collect())
            .collect();
        let a = hungarian(&c).unwrap();
        let b = hungarian(&CostMatrix::from_rows(&shifted).unwrap()).unwrap();
        prop_assert_eq!(a.pairs, b.pairs);
    }

    #[test]
    fn set_loss_ignores_query_order(seed in any::<u64>(), n_gt in 0usize..=2) {
        let mut r = rng(seed);
        let w = LossWeights::default();
        let det = random_queries(&mut r, 4);
        let gts = random_gts(&mut r, n_gt);
        let a = match_hands(&det, &gts, &w).unwrap();
        let base = set_loss(&det, &gts, &a, &w).unwrap();

        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut r);
        // Query `perm[i]` moves to slot `i`.
        let moved = DetectionSet { queries: perm.iter().map(|&p| det.queries[p].clone()).collect() };
        let slot = |c: usize| perm.iter().position(|&p| p == c).unwrap();
        let relabeled = Assignment { pairs: a.pairs.iter().map(|&(g, c)| (g, slot(c))).collect(), total_cost: a.total_cost };
        let l = set_loss(&moved, &gts, &relabeled, &w).unwrap();
        prop_assert!((l.total - base.total).abs() <= 1e-12 * base.total.abs().max(1.0));
        prop_assert!((l.cls_loss - base.cls_loss).abs() <= 1e-12);
        prop_assert!((l.l1_loss - base.l1_loss).abs() <= 1e-12);
    }

    #[test]
    fn moving_toward_truth_lowers_loss(seed in any::<u64>(), coord in 0usize..JOINT_OUTPUTS, t in 0.05..1.0f64) {
        let mut r = rng(seed);
        let w = LossWeights::default();
        let det = random_queries(&mut r, 3);
        let gts = random_gts(&mut r, 2);
        let a = match_hands(&det, &gts, &w).unwrap();
        let before = set_loss(&det, &gts, &a, &w).unwrap().total;
        let (g, q) = a.pairs[0];
        let mut moved = det.clone();
        let mut joints = moved.queries[q].joints_norm().to_vec();
        let target = gts[g].joints_norm[coord];
        prop_assume!((joints[coord] - target).abs() > 1e-6);
        joints[coord] += t * (target - joints[coord]);
        moved.queries[q] = QueryPrediction::new(*moved.queries[q].class_logits(), joints).unwrap();
        let after = set_loss(&moved, &gts, &a, &w).unwrap().total;
        prop_assert!(after < before);
    }

    #[test]
    fn matched_cost_is_minimal(seed in any::<u64>(), n_gt in 1usize..=2, n_q in 2usize..=3) {
        let mut r = rng(seed);
        let w = LossWeights::default();
        let det = random_queries(&mut r, n_q);
        let gts = random_gts(&mut r, n_gt);
        let a = match_hands(&det, &gts, &w).unwrap();
        // Matching cost on the matched terms: λ_cls·(−p̂) + λ_L1·L1.
        let cost = |cols: &[usize]| -> f64 {
            cols.iter()
                .enumerate()
                .map(|(g, &q)| {
                    let p = det.queries[q].class_probs()[gts[g].side.class_index()];
                    let l1: f64 = det.queries[q]
                        .joints_norm()
                        .iter()
                        .zip(&gts[g].joints_norm)
                        .map(|(x, y)| (x - y).abs())
                        .sum::<f64>()
                        / JOINT_OUTPUTS as f64;
                    w.cls * -p + w.l1 * l1
                })
                .sum()
        };
        let chosen: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        for other in all_injections(n_gt, n_q) {
            prop_assert!(cost(&chosen) <= cost(&other) + 1e-12);
        }
    }
}

/// Two ground-truth hands, three queries, worked by hand.
#[test]
fn set_loss_worked_example() {
    let ln3 = 3f64.ln();
    let mk = |logits: [f64; 3], fill: f64| QueryPrediction::new(logits, vec![fill; JOINT_OUTPUTS]).unwrap();
    // Uniform logits give p = 1/3 for every class.
    let det = DetectionSet { queries: vec![mk([0.0; 3], 0.5), mk([0.0; 3], 0.2), mk([0.0; 3], 0.9)] };
    let gts = vec![
        GtHand { side: HandSide::Left, joints_norm: vec![0.4; JOINT_OUTPUTS] },
        GtHand { side: HandSide::Right, joints_norm: vec![0.2; JOINT_OUTPUTS] },
    ];
    let w = LossWeights::default();
    let a = match_hands(&det, &gts, &w).unwrap();
    assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    let l = set_loss(&det, &gts, &a, &w).unwrap();
    // Two matched queries at weight 1, one unmatched at 0.1, averaged over 3 queries.
    let cls = (ln3 + ln3 + 0.1 * ln3) / 3.0;
    // Matched L1: |0.5 - 0.4| and |0.2 - 0.2|, averaged over the two pairs.
    let l1 = (0.1 + 0.0) / 2.0;
    assert!((l.cls_loss - cls).abs() < 1e-12);
    assert!((l.l1_loss - l1).abs() < 1e-12);
    assert!((l.total - (cls + 5.0 * l1)).abs() < 1e-12);

    // With no ground truth every query is a no-hand target.
    let none = set_loss(&det, &[], &Assignment { pairs: vec![], total_cost: 0.0 }, &w).unwrap();
    assert!((none.cls_loss - 0.1 * ln3).abs() < 1e-12);
    assert_eq!(none.l1_loss, 0.0);
}

#[test]
fn wrong_assignments_rejected() {
    let det = random_queries(&mut rng(3), 3);
    let gts = random_gts(&mut rng(4), 2);
    let w = LossWeights::default();
    assert!(set_loss(&det, &gts, &assignment(&[0]), &w).is_err());
    assert!(set_loss(&det, &gts, &assignment(&[1, 1]), &w).is_err());
    assert!(set_loss(&det, &gts, &assignment(&[0, 7]), &w).is_err());
    assert!(CostMatrix::new(3, 2, vec![0.0; 6]).and_then(|c| hungarian(&c)).is_err());
}
