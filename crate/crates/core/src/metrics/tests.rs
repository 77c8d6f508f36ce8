use proptest::prelude::*;

use super::*;

fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
    Tensor::from_fn(vec![h, w], |i| f(i / w, i % w))
}

fn scored(bbox: [f64; 4], label: usize, score: f64) -> ScoredBox {
    ScoredBox { bbox, label, score }
}

fn targets(boxes: Vec<[f64; 4]>, labels: Vec<usize>) -> DetectionTargets {
    DetectionTargets {
        boxes,
        labels,
        width: 100,
        height: 100,
    }
}

#[test]
fn entropy_oracles() {
    assert_eq!(entropy_en(&img(4, 5, |_, _| 77.0)).unwrap(), 0.0);
    assert_eq!(entropy_en(&img(4, 4, |y, _| if y < 2 { 0.0 } else { 255.0 })).unwrap(), 1.0);
    assert_eq!(entropy_en(&img(16, 16, |y, x| (y * 16 + x) as f64)).unwrap(), 8.0);
}

#[test]
fn spatial_frequency_oracles() {
    assert_eq!(spatial_frequency(&img(5, 6, |_, _| 9.0)).unwrap(), 0.0);
    let checker = img(8, 8, |y, x| if (x + y) % 2 == 0 { 0.0 } else { 255.0 });
    assert!((spatial_frequency(&checker).unwrap() - 255.0 * 2f64.sqrt()).abs() < 1e-6);
    assert!(spatial_frequency(&img(1, 8, |_, _| 0.0)).is_err());
}

#[test]
fn avg_gradient_oracles() {
    assert_eq!(avg_gradient(&img(5, 6, |_, _| 3.0)).unwrap(), 0.0);
    let ramp = img(6, 7, |_, x| x as f64);
    assert!((avg_gradient(&ramp).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
}

/// Direct transcription of the definitions on a row-major grid.
fn sf_ag_oracle(rows: &[Vec<f64>]) -> (f64, f64) {
    let (h, w) = (rows.len(), rows[0].len());
    let horiz: Vec<f64> = rows.iter().flat_map(|r| r.windows(2).map(|p| p[1] - p[0])).collect();
    let vert: Vec<f64> = rows.windows(2).flat_map(|p| p[1].iter().zip(&p[0]).map(|(a, b)| a - b)).collect();
    let rms = |d: &[f64]| (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
    let sf = (rms(&horiz).powi(2) + rms(&vert).powi(2)).sqrt();
    let mut ag = Vec::new();
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let dx = rows[y][x + 1] - rows[y][x];
            let dy = rows[y + 1][x] - rows[y][x];
            ag.push(((dx * dx + dy * dy) / 2.0).sqrt());
        }
    }
    (sf, ag.iter().sum::<f64>() / ag.len() as f64)
}

proptest! {
    #[test]
    fn sf_and_ag_match_the_oracle(h in 2usize..9, w in 2usize..9, seed in proptest::collection::vec(0u8..=255, 64)) {
        let rows: Vec<Vec<f64>> = (0..h).map(|y| (0..w).map(|x| seed[y * 8 + x] as f64).collect()).collect();
        let t = img(h, w, |y, x| rows[y][x]);
        let (sf, ag) = sf_ag_oracle(&rows);
        prop_assert!((spatial_frequency(&t).unwrap() - sf).abs() < 1e-9);
        prop_assert!((avg_gradient(&t).unwrap() - ag).abs() < 1e-9);
        let constant = rows.iter().flatten().all(|&v| v == rows[0][0]);
        prop_assert_eq!(spatial_frequency(&t).unwrap() == 0.0, constant);
        prop_assert_eq!(avg_gradient(&t).unwrap() == 0.0, constant);
    }

    #[test]
    fn entropy_ignores_pixel_order(values in proptest::collection::vec(0u8..=255, 30), rot in 0usize..30) {
        let a = img(5, 6, |y, x| values[y * 6 + x] as f64);
        let b = img(5, 6, |y, x| values[(y * 6 + x + rot) % 30] as f64);
        let mut rev = values.clone();
        rev.reverse();
        let c = img(5, 6, |y, x| rev[y * 6 + x] as f64);
        let en = entropy_en(&a).unwrap();
        prop_assert!((entropy_en(&b).unwrap() - en).abs() < 1e-12);
        prop_assert!((entropy_en(&c).unwrap() - en).abs() < 1e-12);
    }
}

#[test]
fn psnr_oracles() {
    let a = Tensor::from_fn(vec![4, 4, 3], |i| (i % 200) as f32 / 255.0);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let b = Tensor::from_fn(vec![4, 4, 3], |i| (i % 200 + 1) as f32 / 255.0);
    let p = psnr(&a, &b).unwrap();
    assert!((p - 48.13).abs() < 0.01, "{p}");
    assert!((p - 20.0 * 255f64.log10()).abs() < 1e-4);
    assert_eq!(p, psnr(&b, &a).unwrap());
    assert!(psnr(&a, &Tensor::zeros(vec![4, 4, 1])).is_err());
}

#[test]
fn gray8_uses_rounded_luma() {
    let rgb = Tensor::new(vec![1, 2, 3], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    assert_eq!(gray8(&rgb).unwrap().data(), &[255.0, 76.0]);
}

#[test]
fn perfect_predictions_score_one() {
    let t = vec![
        targets(vec![[10.0, 10.0, 30.0, 30.0], [50.0, 50.0, 60.0, 70.0]], vec![0, 1]),
        targets(vec![[0.0, 0.0, 5.0, 5.0]], vec![1]),
    ];
    let preds: Vec<Vec<ScoredBox>> = t
        .iter()
        .map(|t| t.boxes.iter().zip(&t.labels).map(|(b, &l)| scored(*b, l, 1.0)).collect())
        .collect();
    for mode in [ApInterpolation::Points101, ApInterpolation::AllPoints] {
        let m = mean_average_precision(&preds, &t, &coco_thresholds(), mode).unwrap();
        assert_eq!((m.map50, m.map50_95), (1.0, 1.0));
        assert_eq!(m.per_class.len(), 2);
    }
}

#[test]
fn no_predictions_score_zero() {
    let t = vec![targets(vec![[10.0, 10.0, 30.0, 30.0]], vec![2])];
    let m = mean_average_precision(&[vec![]], &t, &coco_thresholds(), ApInterpolation::Points101).unwrap();
    assert_eq!((m.map50, m.map50_95), (0.0, 0.0));
}

#[test]
fn hand_computed_half_recall_case() {
    // two targets; the confident prediction hits one, the weaker one misses
    let t = vec![targets(vec![[10.0, 10.0, 30.0, 30.0], [60.0, 60.0, 80.0, 80.0]], vec![0, 0])];
    let p = vec![vec![scored([10.0, 10.0, 30.0, 30.0], 0, 0.9), scored([0.0, 60.0, 5.0, 65.0], 0, 0.4)]];
    let (prec, rec) = pr_curve(&p, &t, 0, 0.5).unwrap();
    assert_eq!((prec, rec), (vec![1.0, 0.5], vec![0.5, 0.5]));
    // recall levels 0, 0.01, ..., 0.5 see precision 1, the other 50 see 0
    let m = mean_average_precision(&p, &t, &[0.5], ApInterpolation::Points101).unwrap();
    assert_eq!(m.map50, 51.0 / 101.0);
    let m = mean_average_precision(&p, &t, &[0.5], ApInterpolation::AllPoints).unwrap();
    assert_eq!(m.map50, 0.5);
}

#[test]
fn zero_area_predictions_are_false_positives() {
    let t = vec![targets(vec![[10.0, 10.0, 30.0, 30.0]], vec![0])];
    let p = vec![vec![scored([10.0, 10.0, 10.0, 30.0], 0, 0.9), scored([10.0, 10.0, 30.0, 30.0], 0, 0.5)]];
    let (prec, rec) = pr_curve(&p, &t, 0, 0.5).unwrap();
    assert_eq!((prec, rec), (vec![0.0, 0.5], vec![0.0, 1.0]));
}

#[test]
fn equal_scores_rank_in_input_order() {
    let t = vec![targets(vec![[10.0, 10.0, 30.0, 30.0]], vec![0])];
    let hit = scored([10.0, 10.0, 30.0, 30.0], 0, 0.5);
    let miss = scored([50.0, 50.0, 70.0, 70.0], 0, 0.5);
    let (p, _) = pr_curve(&[vec![hit.clone(), miss.clone()]], &t, 0, 0.5).unwrap();
    assert_eq!(p, vec![1.0, 0.5]);
    let (p, _) = pr_curve(&[vec![miss, hit]], &t, 0, 0.5).unwrap();
    assert_eq!(p, vec![0.0, 0.5]);
}

#[test]
fn map_rejects_bad_inputs() {
    let t = vec![targets(vec![[10.0, 10.0, 30.0, 30.0]], vec![0])];
    assert!(mean_average_precision(&[], &t, &[0.5], ApInterpolation::Points101).is_err());
    let p = vec![vec![scored([0.0, 0.0, 1.0, 1.0], 0, 1.5)]];
    assert!(mean_average_precision(&p, &t, &[0.5], ApInterpolation::Points101).is_err());
    assert!(mean_average_precision(&[vec![]], &t, &[], ApInterpolation::Points101).is_err());
}

/// Greedy matching from scratch: `(image, prediction)` pairs in rank order,
/// each with whether it claimed a target.
fn greedy(preds: &[Vec<ScoredBox>], t: &[DetectionTargets], class: usize, thr: f64) -> Vec<((usize, usize), bool)> {
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, b) in p.iter().enumerate() {
            if b.label == class {
                order.push((b.score, i, j));
            }
        }
    }
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut used = std::collections::HashSet::new();
    let mut out = Vec::new();
    for &(_, i, j) in &order {
        let b = &preds[i][j].bbox;
        let mut best = None;
        let mut best_iou = 0.0;
        for (g, (gb, &gl)) in t[i].boxes.iter().zip(&t[i].labels).enumerate() {
            let o = iou(b, gb);
            if gl == class && !used.contains(&(i, g)) && area(b) > 0.0 && o >= thr && o > best_iou {
                best = Some(g);
                best_iou = o;
            }
        }
        if let Some(g) = best {
            used.insert((i, g));
        }
        out.push(((i, j), best.is_some()));
    }
    out
}

/// AP from scratch: the envelope sampled at each target's recall level
/// (all-points) or at the 101 fixed levels.
fn ap_oracle(preds: &[Vec<ScoredBox>], t: &[DetectionTargets], class: usize, thr: f64, mode: ApInterpolation) -> f64 {
    let total = t.iter().flat_map(|x| &x.labels).filter(|&&l| l == class).count();
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, (_, hit)) in greedy(preds, t, class, thr).into_iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / total as f64, tp as f64 / (k + 1) as f64));
    }
    let interp = |r: f64| points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
    match mode {
        ApInterpolation::AllPoints => (1..=total).map(|m| interp(m as f64 / total as f64)).sum::<f64>() / total as f64,
        ApInterpolation::Points101 => (0..=100).map(|s| interp(s as f64 / 100.0)).sum::<f64>() / 101.0,
    }
}

fn random_case() -> impl Strategy<Value = (Vec<DetectionTargets>, Vec<Vec<ScoredBox>>)> {
    let bx = (0u8..8, 0u8..8, 1u8..4, 1u8..4).prop_map(|(x, y, w, h)| {
        let (x, y) = (x as f64 * 10.0, y as f64 * 10.0);
        [x, y, x + w as f64 * 8.0, y + h as f64 * 8.0]
    });
    let gt = proptest::collection::vec((bx.clone(), 0usize..2), 1..5);
    let jitter = (-4i8..5, -4i8..5, 0u8..=100, 0usize..2);
    let image = (gt, proptest::collection::vec((0usize..8, jitter), 0..7));
    proptest::collection::vec(image, 1..4).prop_map(|imgs| {
        let mut ts = Vec::new();
        let mut ps = Vec::new();
        for (gt, raw) in imgs {
            let boxes: Vec<[f64; 4]> = gt.iter().map(|g| g.0).collect();
            let labels: Vec<usize> = gt.iter().map(|g| g.1).collect();
            let preds = raw
                .into_iter()
                .map(|(k, (dx, dy, s, l))| {
                    let b = boxes[k % boxes.len()];
                    let (dx, dy) = (dx as f64, dy as f64);
                    scored([b[0] + dx, b[1] + dy, b[2] + dx, b[3] + dy], l, s as f64 / 100.0)
                })
                .collect();
            ts.push(DetectionTargets {
                boxes,
                labels,
                width: 200,
                height: 200,
            });
            ps.push(preds);
        }
        (ts, ps)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn ap_matches_the_oracle((t, p) in random_case(), thr in prop::sample::select(vec![0.3, 0.5, 0.75])) {
        for mode in [ApInterpolation::Points101, ApInterpolation::AllPoints] {
            for class in 0..2 {
                if t.iter().all(|x| !x.labels.contains(&class)) {
                    continue;
                }
                let (prec, rec) = pr_curve(&p, &t, class, thr).unwrap();
                let ap = average_precision(&prec, &rec, mode);
                prop_assert!((ap - ap_oracle(&p, &t, class, thr, mode)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn map_ignores_monotone_score_changes((t, p) in random_case()) {
        let squashed: Vec<Vec<ScoredBox>> = p
            .iter()
            .map(|v| v.iter().map(|b| scored(b.bbox, b.label, b.score.powi(3) * 0.5 + 0.1)).collect())
            .collect();
        let a = mean_average_precision(&p, &t, &coco_thresholds(), ApInterpolation::Points101).unwrap();
        let b = mean_average_precision(&squashed, &t, &coco_thresholds(), ApInterpolation::Points101).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dropping_a_hit_never_raises_ap((t, p) in random_case(), pick in 0usize..100) {
        let mode = ApInterpolation::AllPoints;
        let before = mean_average_precision(&p, &t, &[0.5], mode).unwrap();
        // Remove one matched prediction whose targets no other prediction
        // could claim; otherwise a duplicate inherits the target and AP can rise.
        let claimable = |i: usize, j: usize| {
            let b = &p[i][j];
            t[i].boxes.iter().zip(&t[i].labels).filter(|(g, &l)| l == b.label && iou(&b.bbox, g) >= 0.5).any(|(g, _)| {
                p[i].iter()
                    .enumerate()
                    .any(|(k, o)| k != j && o.label == b.label && iou(&o.bbox, g) >= 0.5)
            })
        };
        let hits: Vec<(usize, usize)> = (0..2)
            .flat_map(|c| greedy(&p, &t, c, 0.5))
            .filter(|((i, j), hit)| *hit && !claimable(*i, *j))
            .map(|(ij, _)| ij)
            .collect();
        prop_assume!(!hits.is_empty());
        let (i, j) = hits[pick % hits.len()];
        let mut fewer = p.clone();
        fewer[i].remove(j);
        let after = mean_average_precision(&fewer, &t, &[0.5], mode).unwrap();
        prop_assert!(after.map50 <= before.map50 + 1e-12, "{} -> {}", before.map50, after.map50);
    }
}

#[test]
fn report_means_and_formats() {
    let a = Tensor::from_fn(vec![8, 8, 3], |i| ((i * 37) % 256) as f32 / 255.0);
    let b = Tensor::from_fn(vec![8, 8, 3], |i| ((i * 11) % 256) as f32 / 255.0);
    let images = vec![
        ImageMetrics::compute("0000", &a, Some(&b)).unwrap(),
        ImageMetrics::compute("0001", &b, None).unwrap(),
    ];
    let report = MetricReport::new(images.clone(), None);
    assert_eq!(report.means.en, (images[0].en + images[1].en) / 2.0);
    assert_eq!(report.means.sf, (images[0].sf + images[1].sf) / 2.0);
    assert_eq!(report.means.psnr, images[0].psnr);
    let back: MetricReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    let table = report.to_table();
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().last().unwrap().starts_with("mean"));
}
