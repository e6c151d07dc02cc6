use proptest::prelude::*;
use psdet::detect::geometry::BBox;
use psdet::detect::io::DetectionRecord;
use psdet::eval::{average_precision, evaluate, mean_ap, match_detections, GroundTruth};
use psdet::synth::Annotation;

/// Pointwise PR enumeration: for each distinct recall level, take the best
/// precision over every cutoff reaching at least that recall.
fn oracle_ap(labels: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if labels.is_empty() { None } else { Some(0.0) };
    }
    let points: Vec<(f64, f64)> = (1..=labels.len())
        .map(|n| {
            let tp = labels[..n].iter().filter(|&&l| l).count() as f64;
            (tp / num_gt as f64, tp / n as f64)
        })
        .collect();
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    Some(ap)
}

fn det(img: &str, class_id: usize, score: f64, b: [f64; 4]) -> DetectionRecord {
    DetectionRecord { image_id: img.into(), class_id, score, bbox: BBox::new(b[0], b[1], b[2], b[3]) }
}

#[test]
fn ap_matches_oracle_exhaustively() {
    let mut cases = 0;
    for n in 0..=10usize {
        for mask in 0u32..(1 << n) {
            let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let tp = labels.iter().filter(|&&l| l).count();
            for extra in [0usize, 1, 3] {
                let num_gt = tp + extra;
                let a = average_precision(&labels, num_gt);
                let o = oracle_ap(&labels, num_gt);
                match (a, o) {
                    (Some(a), Some(o)) => assert!((a - o).abs() < 1e-12, "{labels:?} gt={num_gt}: {a} vs {o}"),
                    (a, o) => assert_eq!(a, o),
                }
                cases += 1;
            }
        }
    }
    assert!(cases >= 30);
}

#[test]
fn hand_curve_five_sixths() {
    let ap = average_precision(&[true, false, true], 2).unwrap();
    assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    assert!((oracle_ap(&[true, false, true], 2).unwrap() - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn trivial_ap_values() {
    assert_eq!(average_precision(&[true, true, true], 3), Some(1.0));
    assert_eq!(average_precision(&[], 4), Some(0.0));
    assert_eq!(mean_ap(&[Some(1.0), Some(0.5), Some(0.0)]).unwrap(), 0.5);
    assert_eq!(mean_ap(&[Some(0.7)]).unwrap(), 0.7);
}

fn random_scene(seed: u64) -> (GroundTruth, Vec<DetectionRecord>) {
    // boxes on a coarse lattice so each detection overlaps at most one box
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut gt = GroundTruth::new();
    let mut dets = Vec::new();
    for img in ["a", "b"] {
        let mut boxes = Vec::new();
        for slot in 0..4 {
            if rng.random_bool(0.6) {
                let x = slot as f64 * 100.0;
                boxes.push(Annotation { class_id: rng.random_range(1..=2), bbox: BBox::new(x, 0.0, x + 20.0, 20.0) });
            }
            for _ in 0..rng.random_range(0..2) {
                let x = slot as f64 * 100.0;
                let shift = if rng.random_bool(0.5) { 1.0 } else { 15.0 };
                dets.push(det(img, rng.random_range(1..=2), rng.random::<f64>(), [x + shift, 0.0, x + 20.0 + shift, 20.0]));
            }
        }
        gt.insert(img.into(), boxes);
    }
    dets.truncate(10);
    (gt, dets)
}

/// Matching on the lattice: a detection is TP if it is the top-scored
/// same-class detection within IoU 0.5 of its slot's box.
fn oracle_labels(gt: &GroundTruth, dets: &[DetectionRecord]) -> Vec<bool> {
    dets.iter()
        .enumerate()
        .map(|(i, d)| {
            let Some(g) = gt[&d.image_id].iter().find(|g| {
                g.class_id == d.class_id && psdet::detect::geometry::iou(&g.bbox, &d.bbox) >= 0.5
            }) else {
                return false;
            };
            !dets.iter().enumerate().any(|(j, e)| {
                j != i
                    && e.image_id == d.image_id
                    && e.class_id == d.class_id
                    && psdet::detect::geometry::iou(&g.bbox, &e.bbox) >= 0.5
                    && (e.score > d.score || (e.score == d.score && j < i))
            })
        })
        .collect()
}

#[test]
fn evaluate_matches_oracle_on_random_scenes() {
    for seed in 0..40 {
        let (gt, dets) = random_scene(seed);
        let labels = match_detections(&dets, &gt, 0.5);
        assert_eq!(labels, oracle_labels(&gt, &dets), "seed {seed}");
        let report = evaluate(&dets, &gt, 2, 0.5).unwrap();
        for c in 1..=2 {
            let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == c).collect();
            idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
            let ranked: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            let num_gt = gt.values().flatten().filter(|g| g.class_id == c).count();
            let want = oracle_ap(&ranked, num_gt);
            let got = report.per_class[c - 1].ap;
            match (got, want) {
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12),
                (g, w) => assert_eq!(g, w),
            }
        }
    }
}

#[test]
fn ground_truth_fed_back_scores_one() {
    let (gt, _) = random_scene(3);
    let dets: Vec<DetectionRecord> = gt
        .iter()
        .flat_map(|(img, v)| v.iter().map(move |a| DetectionRecord { image_id: img.clone(), class_id: a.class_id, score: 1.0, bbox: a.bbox }))
        .collect();
    let r = evaluate(&dets, &gt, 2, 0.5).unwrap();
    assert!(r.render().ends_with("mAP 1.0000\n"));
    assert!(evaluate(&[], &gt, 2, 0.5).unwrap().render().ends_with("mAP 0.0000\n"));
}

proptest! {
    #[test]
    fn ap_in_unit_interval_and_one_iff_clean(labels in proptest::collection::vec(any::<bool>(), 0..12), extra in 0usize..3) {
        let num_gt = labels.iter().filter(|&&l| l).count() + extra;
        if let Some(ap) = average_precision(&labels, num_gt) {
            prop_assert!((0.0..=1.0).contains(&ap));
            let tp = labels.iter().filter(|&&l| l).count();
            let clean = num_gt > 0 && tp == num_gt && labels[..tp].iter().all(|&l| l);
            prop_assert_eq!(ap == 1.0, clean);
        }
    }

    #[test]
    fn trailing_fp_never_helps_leading_tp_never_hurts(labels in proptest::collection::vec(any::<bool>(), 0..12), extra in 1usize..3) {
        let num_gt = labels.iter().filter(|&&l| l).count() + extra;
        let base = average_precision(&labels, num_gt).unwrap();
        let mut fp = labels.clone();
        fp.push(false);
        prop_assert!(average_precision(&fp, num_gt).unwrap() <= base + 1e-12);
        let mut tp = vec![true];
        tp.extend(&labels);
        prop_assert!(average_precision(&tp, num_gt + 1).unwrap() >= base - 1e-12);
    }

    #[test]
    fn ap_invariant_under_monotone_scores(seed in 0u64..500, a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let (gt, dets) = random_scene(seed);
        let moved: Vec<DetectionRecord> = dets.iter().map(|d| DetectionRecord { score: (a * d.score + b).exp(), ..d.clone() }).collect();
        prop_assert_eq!(evaluate(&dets, &gt, 2, 0.5).ok(), evaluate(&moved, &gt, 2, 0.5).ok());
    }
}
