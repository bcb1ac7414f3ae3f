use poifusion_core::assign::{
    focal_cost, hungarian, match_cost, matched_cost, set_loss, LossConfig, MatchResult, Supervision,
};
use poifusion_core::autodiff::Tape;
use poifusion_core::decoder::{Detection, IterationOutput};
use poifusion_core::metrics::{average_precision, center_errors, mean_average_precision, SceneResult};
use poifusion_core::scene::SceneBox;
use poifusion_core::tensor::Tensor;
use poifusion_core::{Box3D, Error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive minimum over injective gt → query maps.
fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], g: usize, used: &mut Vec<bool>) -> f64 {
        if g == cost[0].len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for q in 0..cost.len() {
            if !used[q] {
                used[q] = true;
                best = best.min(cost[q][g] + go(cost, g + 1, used));
                used[q] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.len()])
}

fn is_valid(m: &MatchResult, nq: usize, ng: usize) -> bool {
    let mut qs: Vec<usize> = m.pairs.iter().map(|p| p.0).chain(m.unmatched.iter().copied()).collect();
    qs.sort_unstable();
    let mut gs: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
    gs.sort_unstable();
    qs == (0..nq).collect::<Vec<_>>() && gs == (0..ng).collect::<Vec<_>>()
}

#[test]
fn diagonal_assignment() {
    let cost = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
    let m = hungarian(&cost).unwrap();
    assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    assert!(m.unmatched.is_empty());
    assert_eq!(matched_cost(&cost, &m), 2.0);
    assert_eq!(hungarian(&[vec![0.0]]).unwrap().pairs, vec![(0, 0)]);
}

#[test]
fn random_square_integer_costs_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let cost: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| rng.random_range(0..20) as f64).collect()).collect();
        let m = hungarian(&cost).unwrap();
        assert!(is_valid(&m, 5, 5));
        assert_eq!(matched_cost(&cost, &m), brute_force(&cost));
    }
}

#[test]
fn fewer_queries_than_boxes_is_an_error() {
    let cost = vec![vec![1.0, 2.0, 3.0]];
    assert!(matches!(hungarian(&cost), Err(Error::Assignment(_))));
    assert!(matches!(hungarian(&[vec![f64::NAN]]), Err(Error::Assignment(_))));
    let m = hungarian(&[vec![], vec![]]).unwrap();
    assert!(m.pairs.is_empty());
    assert_eq!(m.unmatched, vec![0, 1]);
}

proptest! {
    #[test]
    fn rectangular_costs_match_brute_force(
        ng in 1usize..=6, extra in 0usize..3, seed in any::<u64>(), scale in 0.1f64..50.0
    ) {
        let nq = ng + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..nq).map(|_| (0..ng).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let m = hungarian(&cost).unwrap();
        prop_assert!(is_valid(&m, nq, ng));
        prop_assert!((matched_cost(&cost, &m) - brute_force(&cost)).abs() < 1e-9);
        // a positive rescaling keeps the argmin
        let scaled: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|c| c * scale).collect()).collect();
        let ms = hungarian(&scaled).unwrap();
        prop_assert!((matched_cost(&cost, &ms) - matched_cost(&cost, &m)).abs() < 1e-9);
    }
}

fn sbox(center: [f64; 3], class_id: usize) -> SceneBox {
    SceneBox { bbox: Box3D::new(center, [1.8, 4.2, 1.6], 0.3), class_id }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[test]
fn cost_of_half_score_and_l1_four() {
    let cfg = LossConfig::default();
    let gt = [sbox([0.0; 3], 1)];
    let mut b = gt[0].bbox.to_array();
    b[0] += 1.5;
    b[4] -= 2.5;
    let logits = Tensor::matrix(1, 3, vec![0.0, logit(0.5), 0.0]).unwrap();
    let boxes = Tensor::matrix(1, 8, b.to_vec()).unwrap();
    let c = match_cost(&logits, &boxes, &gt, &cfg);
    // fc(0.5) = 0.25·0.25·ln2 − 0.75·0.25·ln2 with γ = 2, α_f = 0.25
    let fc = 0.0625 * (-(0.5f64 + 1e-8).ln()) - 0.1875 * (-(0.5f64 + 1e-8).ln());
    assert!((focal_cost(0.5, 2.0, 0.25) - fc).abs() < 1e-15);
    assert!((c[0][0] - (2.0 * fc + 0.25 * 4.0)).abs() < 1e-12);
}

#[test]
fn cost_ignores_boxes_without_the_box_weight() {
    let cfg = LossConfig { beta: 0.0, ..LossConfig::default() };
    let gt = [sbox([0.0; 3], 0)];
    let logits = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0]).unwrap();
    let mut far = gt[0].bbox.to_array();
    far[0] += 30.0;
    let boxes = Tensor::matrix(2, 8, gt[0].bbox.to_array().into_iter().chain(far).collect()).unwrap();
    let c = match_cost(&logits, &boxes, &gt, &cfg);
    assert_eq!(c[0][0], c[1][0]);
}

#[test]
fn perfect_prediction_is_the_row_minimum() {
    let cfg = LossConfig::default();
    let gt = [sbox([0.0; 3], 0), sbox([5.0, 1.0, 0.0], 1), sbox([-4.0, 3.0, 0.0], 2)];
    let logits = Tensor::matrix(1, 3, vec![20.0, -20.0, -20.0]).unwrap();
    let boxes = Tensor::matrix(1, 8, gt[0].bbox.to_array().to_vec()).unwrap();
    let c = match_cost(&logits, &boxes, &gt, &cfg);
    let fc1 = focal_cost(1.0 / (1.0 + (-20f64).exp()), 2.0, 0.25);
    assert!((c[0][0] - 2.0 * fc1).abs() < 1e-12);
    assert!(c[0][1] > c[0][0] && c[0][2] > c[0][0]);
}

fn outputs(tape: &mut Tape, logits: Tensor, boxes: Tensor) -> IterationOutput {
    let n = logits.shape()[0];
    IterationOutput {
        logits: tape.leaf(logits, true),
        boxes: tape.leaf(boxes, true),
        points: tape.constant(Tensor::zeros(&[n, 3])),
    }
}

#[test]
fn focal_reduces_to_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..12).map(|_| rng.random_range(-4.0..4.0)).collect();
    let t: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::vector(x.clone()), true);
    let f = tape.focal_loss(v, &t, 0.0, Some(1.0)).unwrap();
    // α_f = 1 zeroes the negatives, so compare with positive-only BCE
    let bce: f64 = x.iter().zip(&t).map(|(&x, &t)| t * -(1.0 / (1.0 + (-x).exp())).ln()).sum();
    assert!((tape.value(f).item() - bce).abs() < 1e-12);
    let f = tape.focal_loss(v, &t, 0.0, None).unwrap();
    let bce: f64 = x
        .iter()
        .zip(&t)
        .map(|(&x, &t)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    assert!((tape.value(f).item() - bce).abs() < 1e-12);
}

#[test]
fn focal_term_at_half_probability() {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::vector(vec![0.0]), true);
    let f = tape.focal_loss(v, &[1.0], 2.0, Some(0.25)).unwrap();
    let got = tape.value(f).item();
    assert!((got - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
    assert!((got - 0.04332).abs() < 1e-5);
}

#[test]
fn exact_saturated_predictions_have_negligible_loss() {
    let gt = vec![sbox([1.0, 2.0, 0.0], 0), sbox([-3.0, 0.5, 0.0], 2)];
    let mut lg = vec![-20.0; 9];
    lg[0] = 20.0;
    lg[3 + 2] = 20.0;
    let bx: Vec<f64> = gt
        .iter()
        .flat_map(|g| g.bbox.to_array())
        .chain(Box3D::new([8.0, 8.0, 0.0], [1.0; 3], 0.0).to_array())
        .collect();
    let mut tape = Tape::new();
    let o = outputs(&mut tape, Tensor::matrix(3, 3, lg).unwrap(), Tensor::matrix(3, 8, bx).unwrap());
    let (_, b) = set_loss(&mut tape, &[o], &gt, &LossConfig::default()).unwrap();
    assert!(b.total < 1e-6, "{}", b.total);
    assert_eq!(b.reg, 0.0);
}

#[test]
fn empty_scene_has_negatives_only() {
    let mut tape = Tape::new();
    let o = outputs(&mut tape, Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(), Tensor::zeros(&[2, 8]));
    let (_, b) = set_loss(&mut tape, &[o], &[], &LossConfig::default()).unwrap();
    assert_eq!(b.reg, 0.0);
    // six negatives at p = 0.5: (1 − α_f)·0.25·ln2 each
    assert!((b.cls - 6.0 * 0.75 * 0.25 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_is_invariant_to_gt_and_query_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt = vec![sbox([1.0, 2.0, 0.0], 0), sbox([-3.0, 0.5, 0.0], 2), sbox([4.0, -4.0, 0.0], 1)];
    let lg: Vec<f64> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
    let bx: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
    let run = |lg: Vec<f64>, bx: Vec<f64>, gt: &[SceneBox]| {
        let mut tape = Tape::new();
        let o = outputs(&mut tape, Tensor::matrix(5, 3, lg).unwrap(), Tensor::matrix(5, 8, bx).unwrap());
        set_loss(&mut tape, &[o], gt, &LossConfig::default()).unwrap().1.total
    };
    let base = run(lg.clone(), bx.clone(), &gt);
    let perm = [3usize, 0, 4, 1, 2];
    let plg: Vec<f64> = perm.iter().flat_map(|&q| lg[q * 3..q * 3 + 3].to_vec()).collect();
    let pbx: Vec<f64> = perm.iter().flat_map(|&q| bx[q * 8..q * 8 + 8].to_vec()).collect();
    let rgt: Vec<SceneBox> = gt.iter().rev().cloned().collect();
    assert!((run(plg, pbx, &rgt) - base).abs() < 1e-12);
}

#[test]
fn deep_supervision_sums_iterations() {
    let gt = vec![sbox([1.0, 2.0, 0.0], 0)];
    let mut tape = Tape::new();
    let a =
        outputs(&mut tape, Tensor::matrix(2, 3, vec![0.5, 0.0, -1.0, 0.2, 0.1, 0.0]).unwrap(), Tensor::zeros(&[2, 8]));
    let b = outputs(
        &mut tape,
        Tensor::matrix(2, 3, vec![1.5, 0.0, -1.0, 0.2, 0.1, 0.0]).unwrap(),
        Tensor::full(&[2, 8], 0.5),
    );
    let deep = set_loss(&mut tape, &[a, b], &gt, &LossConfig::default()).unwrap().1;
    let last = set_loss(&mut tape, &[b], &gt, &LossConfig::default()).unwrap().1;
    let fin = LossConfig { supervision: Supervision::FinalOnly, ..LossConfig::default() };
    let only = set_loss(&mut tape, &[a, b], &gt, &fin).unwrap().1;
    assert_eq!(deep.per_iteration.len(), 2);
    assert_eq!(only.total, last.total);
    let first = set_loss(&mut tape, &[a], &gt, &LossConfig::default()).unwrap().1;
    assert!((deep.total - first.total - last.total).abs() < 1e-12);
}

fn det(x: f64, y: f64, class_id: usize, score: f64, query: usize) -> Detection {
    Detection { bbox: Box3D::new([x, y, 0.0], [1.0; 3], 0.0), class_id, score, query }
}

#[test]
fn perfect_detections_score_full_map() {
    let names: Vec<String> = ["car", "pedestrian", "truck"].iter().map(|s| s.to_string()).collect();
    let gt = vec![sbox([1.0, 2.0, 0.0], 0), sbox([-3.0, 0.5, 0.0], 1), sbox([6.0, 6.0, 0.0], 0)];
    let detections = gt.iter().enumerate().map(|(i, g)| det(g.bbox.x, g.bbox.y, g.class_id, 0.9, i)).collect();
    let r = mean_average_precision(&[SceneResult { detections, gt }], &names);
    assert_eq!(r.classes.len(), 2);
    assert!((r.map - 1.0).abs() < 1e-12);
}

#[test]
fn ap_respects_thresholds_and_ranking() {
    let gt = vec![sbox([0.0, 0.0, 0.0], 0), sbox([10.0, 0.0, 0.0], 0)];
    // 1.5 m off: a hit at 2 m and 4 m only
    let scenes =
        [SceneResult { detections: vec![det(1.5, 0.0, 0, 0.8, 0), det(10.0, 0.0, 0, 0.7, 1)], gt: gt.clone() }];
    // the miss ranks first, so recall 0.5 is reached at precision 0.5
    assert!((average_precision(&scenes, 0, 0.5) - 0.5 * 51.0 / 101.0).abs() < 1e-12);
    assert!((average_precision(&scenes, 0, 2.0) - 1.0).abs() < 1e-12);
    // a duplicate ranked first cannot consume the same box twice
    let dup = [SceneResult { detections: vec![det(0.0, 0.0, 0, 0.9, 0), det(0.1, 0.0, 0, 0.8, 1)], gt: vec![gt[0]] }];
    assert!((average_precision(&dup, 0, 1.0) - 1.0).abs() < 1e-12);
    let wrong_class = [SceneResult { detections: vec![det(0.0, 0.0, 1, 0.9, 0)], gt: vec![gt[0]] }];
    assert_eq!(average_precision(&wrong_class, 0, 4.0), 0.0);
}

#[test]
fn center_error_follows_final_matching() {
    let gt = vec![sbox([1.0, 2.0, 0.5], 0)];
    let mk = |x: f64| {
        let mut b = gt[0].bbox.to_array();
        b[0] += x;
        let far = Box3D::new([-9.0, -9.0, 0.0], [1.0; 3], 0.0).to_array();
        (
            Tensor::matrix(2, 3, vec![2.0, -5.0, -5.0, -5.0, -5.0, -5.0]).unwrap(),
            Tensor::matrix(2, 8, b.into_iter().chain(far).collect()).unwrap(),
        )
    };
    let e = center_errors(&[mk(3.0), mk(0.5)], &gt, &LossConfig::default()).unwrap();
    assert_eq!(e.len(), 2);
    assert!((e[0].0 - 3.0).abs() < 1e-12 && e[0].1 == 1);
    assert!((e[1].0 - 0.5).abs() < 1e-12);
    assert_eq!(center_errors(&[mk(1.0)], &[], &LossConfig::default()).unwrap(), vec![(0.0, 0)]);
}
