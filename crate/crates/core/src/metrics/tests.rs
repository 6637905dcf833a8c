use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::evaluate;
use super::*;
use crate::detector::BBox;

fn det(class_id: usize, score: f64, b: BBox) -> Detection {
    Detection {
        bbox: b,
        class_id,
        score,
    }
}

fn gt(class_id: usize, b: BBox) -> Annotation {
    Annotation { class_id, bbox: b }
}

/// Threshold-sweep oracle: at each distinct score keep everything scoring at
/// least that, then integrate the interpolated precision over recall.
fn sweep_ap(flags: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut taus: Vec<f64> = flags.iter().map(|f| f.0).collect();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    let points: Vec<(f64, f64)> = taus
        .iter()
        .map(|&t| {
            let kept: Vec<&(f64, bool)> = flags.iter().filter(|f| f.0 >= t).collect();
            let tp = kept.iter().filter(|f| f.1).count() as f64;
            (tp / n_gt as f64, tp / kept.len() as f64)
        })
        .collect();
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points
            .iter()
            .filter(|q| q.0 >= r)
            .map(|q| q.1)
            .fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

fn random_flags(rng: &mut ChaCha8Rng) -> (Vec<(f64, bool)>, usize) {
    let n_gt = rng.random_range(0..=5);
    let n = rng.random_range(0..=8);
    let coarse = rng.random_bool(0.3);
    let mut tps = 0;
    let flags = (0..n)
        .map(|_| {
            let mut s: f64 = rng.random();
            if coarse {
                s = (s * 4.0).round() / 4.0;
            }
            let tp = tps < n_gt && rng.random_bool(0.5);
            tps += tp as usize;
            (s, tp)
        })
        .collect();
    (flags, n_gt)
}

#[test]
fn ap_matches_threshold_sweep_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let (flags, n_gt) = random_flags(&mut rng);
        let a = average_precision(&flags, n_gt);
        assert!(
            (a - sweep_ap(&flags, n_gt)).abs() < 1e-9,
            "{flags:?} n_gt={n_gt}"
        );
    }
}

#[test]
fn ap_examples() {
    assert_eq!(average_precision(&[(0.9, true), (0.8, true)], 2), 1.0);
    let a = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2);
    assert!((a - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    assert_eq!(average_precision(&[(0.9, false), (0.3, false)], 2), 0.0);
    assert_eq!(average_precision(&[], 0), 1.0);
    assert_eq!(average_precision(&[(0.5, false)], 0), 0.0);
}

#[test]
fn pr_curve_area_equals_ap() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let (flags, n_gt) = random_flags(&mut rng);
        if n_gt == 0 {
            continue;
        }
        let curve = pr_curve(&flags, n_gt);
        assert!(curve.windows(2).all(|w| w[0].0 <= w[1].0));
        // Area under the right-to-left running max, computed independently.
        let mut area = 0.0;
        let mut prev = 0.0;
        for (i, &(r, _)) in curve.iter().enumerate() {
            let env = curve[i..].iter().map(|q| q.1).fold(0.0, f64::max);
            area += (r - prev) * env;
            prev = r;
        }
        assert!((area - average_precision(&flags, n_gt)).abs() < 1e-9);
    }
    assert!(pr_curve(&[(0.9, true), (0.8, true)], 2)
        .iter()
        .all(|p| p.1 == 1.0));
}

#[test]
fn tie_order_does_not_change_ap() {
    let a = average_precision(&[(0.5, true), (0.5, false), (0.4, true)], 2);
    let b = average_precision(&[(0.5, false), (0.5, true), (0.4, true)], 2);
    assert_eq!(a, b);
}

#[test]
fn precision_recall_conventions() {
    let (p, r) = precision_recall(2, 1, 1);
    assert!((p - 2.0 / 3.0).abs() < 1e-15 && (r - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(precision_recall(0, 0, 3), (0.0, 0.0));
    assert_eq!(precision_recall(0, 2, 0), (0.0, 1.0));
}

#[test]
fn mean_ap_examples() {
    assert_eq!(mean_ap(&[1.0, 0.5, 0.0]).unwrap(), 0.5);
    assert_eq!(mean_ap(&[0.37]).unwrap(), 0.37);
    assert!(matches!(mean_ap(&[]), Err(Error::Argument(_))));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let v: Vec<f64> = (0..rng.random_range(1..10)).map(|_| rng.random()).collect();
        let mut s = 0.0;
        for x in &v {
            s += x;
        }
        assert!((mean_ap(&v).unwrap() - s / v.len() as f64).abs() < 1e-12);
    }
}

/// Fraction-of-pixel-centers oracle on an `n`-cell grid per axis; rectangles
/// are separable so the 2-D count is the product of per-axis counts.
fn pixel_iou(a: &BBox, b: &BBox, n: usize) -> f64 {
    let count = |lo: f64, hi: f64| {
        (0..n)
            .filter(|&i| (i as f64 + 0.5) / n as f64 >= lo && (i as f64 + 0.5) / n as f64 <= hi)
            .count()
    };
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let area_a = (count(ax1, ax2) * count(ay1, ay2)) as f64;
    let area_b = (count(bx1, bx2) * count(by1, by2)) as f64;
    let inter = (count(ax1.max(bx1), ax2.min(bx2)) * count(ay1.max(by1), ay2.min(by2))) as f64;
    inter / (area_a + area_b - inter)
}

#[test]
fn iou_matches_pixel_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rb = |rng: &mut ChaCha8Rng| {
        let (w, h) = (rng.random_range(0.05..0.6), rng.random_range(0.05..0.6));
        BBox::new(
            rng.random_range(w / 2.0..1.0 - w / 2.0),
            rng.random_range(h / 2.0..1.0 - h / 2.0),
            w,
            h,
        )
    };
    for _ in 0..100 {
        let (a, b) = (rb(&mut rng), rb(&mut rng));
        assert!((iou(&a, &b) - pixel_iou(&a, &b, 20_000)).abs() < 1e-3);
    }
    let a = BBox::from_corners(0.0, 0.0, 0.5, 0.5);
    let b = BBox::from_corners(0.25, 0.25, 0.75, 0.75);
    assert!((pixel_iou(&a, &b, 4000) - 1.0 / 7.0).abs() < 1e-3);
}

#[test]
fn match_examples() {
    let b = BBox::new(0.5, 0.5, 0.2, 0.2);
    let m = match_detections(&[det(0, 0.9, b)], &[gt(0, b)], 0.5, 1);
    assert_eq!((m.tp(0), m.fp(0), m.fn_count[0]), (1, 0, 0));
    let m = match_detections(&[det(0, 0.9, b), det(0, 0.8, b)], &[gt(0, b)], 0.5, 1);
    assert_eq!((m.tp(0), m.fp(0), m.fn_count[0]), (1, 1, 0));
}

/// Independent replay: per class, walk detections by score and scan an IoU table.
fn replay(
    dets: &[Detection],
    gts: &[Annotation],
    thr: f64,
    k: usize,
) -> Vec<(usize, usize, usize)> {
    (0..k)
        .map(|c| {
            let cd: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
            let cg: Vec<&Annotation> = gts.iter().filter(|g| g.class_id == c).collect();
            let table: Vec<Vec<f64>> = cd
                .iter()
                .map(|d| cg.iter().map(|g| iou(&d.bbox, &g.bbox)).collect())
                .collect();
            let mut idx: Vec<usize> = (0..cd.len()).collect();
            idx.sort_by(|&a, &b| {
                cd[b]
                    .score
                    .partial_cmp(&cd[a].score)
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut taken = vec![false; cg.len()];
            let (mut tp, mut fp) = (0, 0);
            for i in idx {
                let mut best = None;
                let mut best_v = -1.0;
                for j in 0..cg.len() {
                    if !taken[j] && table[i][j] > best_v {
                        best_v = table[i][j];
                        best = Some(j);
                    }
                }
                match best {
                    Some(j) if best_v >= thr - IOU_SLACK => {
                        taken[j] = true;
                        tp += 1;
                    }
                    _ => fp += 1,
                }
            }
            (tp, fp, taken.iter().filter(|t| !**t).count())
        })
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
        rng.random_range(0.1..0.4),
        rng.random_range(0.1..0.4),
    )
}

#[test]
fn matching_matches_independent_replay() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let dets: Vec<Detection> = (0..rng.random_range(0..=5))
            .map(|_| {
                det(
                    rng.random_range(0..2),
                    (rng.random::<f64>() * 5.0).round() / 5.0,
                    random_box(&mut rng),
                )
            })
            .collect();
        let gts: Vec<Annotation> = (0..rng.random_range(0..=5))
            .map(|_| gt(rng.random_range(0..2), random_box(&mut rng)))
            .collect();
        let thr = rng.random_range(0.1..0.9);
        let m = match_detections(&dets, &gts, thr, 2);
        let r = replay(&dets, &gts, thr, 2);
        for c in 0..2 {
            assert_eq!((m.tp(c), m.fp(c), m.fn_count[c]), r[c]);
            assert!(m.tp(c) <= m.n_gt[c]);
        }
    }
}

#[test]
fn map_range_examples() {
    let b = BBox::new(0.5, 0.5, 0.2, 0.2);
    let dets = vec![vec![det(0, 0.9, b)]];
    let gts = vec![vec![gt(0, b)]];
    assert_eq!(map_range(&dets, &gts, 1).unwrap(), 1.0);
    let g = BBox::from_corners(0.0, 0.0, 0.5, 0.5);
    let d = BBox::from_corners(0.0, 0.0, 0.5, 0.3);
    assert!((iou(&d, &g) - 0.6).abs() < 1e-12);
    let v = map_range(&[vec![det(0, 0.9, d)]], &[vec![gt(0, g)]], 1).unwrap();
    assert!((v - 0.3).abs() < 1e-12);
}

fn random_instance(rng: &mut ChaCha8Rng, k: usize) -> (Vec<Vec<Detection>>, Vec<Vec<Annotation>>) {
    let imgs = rng.random_range(1..4);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..imgs {
        let g: Vec<Annotation> = (0..rng.random_range(1..=5))
            .map(|_| gt(rng.random_range(0..k), random_box(rng)))
            .collect();
        let mut d = Vec::new();
        for a in &g {
            if !rng.random_bool(0.7) {
                continue;
            }
            let mut j = || rng.random_range(-0.05..0.05);
            let b = BBox::new(
                a.bbox.cx + j(),
                a.bbox.cy + j(),
                a.bbox.w + j(),
                a.bbox.h + j(),
            );
            let c = if rng.random_bool(0.85) {
                a.class_id
            } else {
                rng.random_range(0..k)
            };
            d.push(det(c, rng.random(), b));
        }
        d.extend(
            (0..rng.random_range(0..3))
                .map(|_| det(rng.random_range(0..k), rng.random(), random_box(rng))),
        );
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

#[test]
fn map_range_never_exceeds_map50() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..300 {
        let (dets, gts) = random_instance(&mut rng, 3);
        let m50 = map_at(&dets, &gts, 0.5, 3).unwrap();
        let mr = map_range(&dets, &gts, 3).unwrap();
        assert!(mr <= m50 + 1e-12 && (0.0..=1.0).contains(&mr));
    }
}

#[test]
fn confusion_examples() {
    let b0 = BBox::new(0.3, 0.3, 0.2, 0.2);
    let b1 = BBox::new(0.7, 0.7, 0.2, 0.2);
    let gts = vec![vec![gt(0, b0), gt(1, b1)]];
    let m = confusion_matrix(
        &[vec![det(0, 0.9, b0), det(1, 0.8, b1)]],
        &gts,
        2,
        0.25,
        0.5,
    );
    assert_eq!(m, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 0]]);
    let m = confusion_matrix(&[vec![]], &gts, 2, 0.25, 0.5);
    assert_eq!(m, vec![vec![0, 0, 1], vec![0, 0, 1], vec![0, 0, 0]]);
}

/// Recount by first listing all candidate pairs then resolving greedily.
fn recount(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    k: usize,
    conf: f64,
    thr: f64,
) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k + 1]; k + 1];
    for (d, g) in dets.iter().zip(gts) {
        let mut pending: Vec<(usize, &Detection)> = d
            .iter()
            .enumerate()
            .filter(|(_, x)| x.score >= conf)
            .collect();
        pending.sort_by(|a, b| {
            b.1.score
                .partial_cmp(&a.1.score)
                .unwrap()
                .then(a.0.cmp(&b.0))
        });
        let mut free: Vec<usize> = (0..g.len()).collect();
        for (_, x) in pending {
            let pick = free
                .iter()
                .enumerate()
                .map(|(slot, &j)| (slot, j, iou(&x.bbox, &g[j].bbox)))
                .fold(None, |acc: Option<(usize, usize, f64)>, c| match acc {
                    Some(a) if a.2 >= c.2 => Some(a),
                    _ => Some(c),
                });
            match pick {
                Some((slot, j, v)) if v >= thr - IOU_SLACK => {
                    m[g[j].class_id][x.class_id] += 1;
                    free.remove(slot);
                }
                _ => m[k][x.class_id] += 1,
            }
        }
        for j in free {
            m[g[j].class_id][k] += 1;
        }
    }
    m
}

#[test]
fn confusion_matches_independent_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..300 {
        let (dets, gts) = random_instance(&mut rng, 3);
        assert_eq!(
            confusion_matrix(&dets, &gts, 3, 0.25, 0.5),
            recount(&dets, &gts, 3, 0.25, 0.5)
        );
    }
}

#[test]
fn report_fields_are_in_range_and_rows_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (dets, gts) = random_instance(&mut rng, 3);
        let r = evaluate(&dets, &gts, &["a", "b", "c"], 0.25, 0.5).unwrap();
        let mut vals = vec![r.precision, r.recall, r.map50, r.map50_95];
        for c in &r.per_class {
            vals.extend([c.precision, c.recall, c.ap50, c.ap50_95]);
        }
        assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(r.map50_95 <= r.map50 + 1e-12);
        for (row, counts) in r.confusion_normalized.iter().zip(&r.confusion) {
            if counts.iter().sum::<u64>() > 0 {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(
            r.to_json().unwrap(),
            evaluate(&dets, &gts, &["a", "b", "c"], 0.25, 0.5)
                .unwrap()
                .to_json()
                .unwrap()
        );
    }
}

#[test]
fn report_files_are_written() {
    let b = BBox::new(0.5, 0.5, 0.2, 0.2);
    let r = evaluate(
        &[vec![det(0, 0.9, b)]],
        &[vec![gt(0, b)]],
        &["x", "y"],
        0.25,
        0.5,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = r.write_all(dir.path()).unwrap();
    assert_eq!(paths.len(), 5);
    assert!(paths.iter().all(|p| p.exists()));
    let svg = std::fs::read_to_string(dir.path().join(report::CONFUSION_SVG)).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("background"));
}

proptest! {
    #[test]
    fn lowest_score_fp_never_increases_ap(flags in prop::collection::vec((0.01f64..1.0, any::<bool>()), 0..8), extra in 2usize..5) {
        let n_gt = flags.iter().filter(|f| f.1).count() + extra;
        let before = average_precision(&flags, n_gt);
        let mut more = flags.clone();
        more.push((0.0, false));
        prop_assert!(average_precision(&more, n_gt) <= before + 1e-12);
    }
}
