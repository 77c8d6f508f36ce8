//! Image-quality metrics (EN, AG, SF, PSNR) and box mAP.
//!
//! EN, AG and SF operate on 8-bit luma images (`H×W`, values in `0..=255`).
//! [`gray8`] converts an RGB image in `[0, 1]` with the weights
//! `0.299, 0.587, 0.114` and rounds to the nearest level.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{area, iou};
use crate::losses::{DetectionTargets, ScoredBox};
use crate::tensor::Tensor;

/// Value returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// 8-bit luma of an `H×W×3` image in `[0, 1]`.
pub fn gray8(rgb: &Tensor<f32>) -> Result<Tensor<f64>> {
    if rgb.rank() != 3 || rgb.shape()[2] != 3 {
        return Err(Error::dim("gray8", format!("expected H×W×3, got {:?}", rgb.shape())));
    }
    let data = rgb
        .data()
        .chunks_exact(3)
        .map(|p| {
            let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            (y.clamp(0.0, 1.0) * 255.0).round()
        })
        .collect();
    Tensor::new(vec![rgb.shape()[0], rgb.shape()[1]], data)
}

fn plane<'a>(op: &'static str, img: &'a Tensor<f64>, min_side: usize) -> Result<(usize, usize, &'a [f64])> {
    if img.rank() != 2 || img.shape()[0] < min_side || img.shape()[1] < min_side {
        return Err(Error::dim(
            op,
            format!("expected an H×W image with sides ≥ {min_side}, got {:?}", img.shape()),
        ));
    }
    Ok((img.shape()[0], img.shape()[1], img.data()))
}

/// Shannon entropy in bits of the 256-bin histogram. Values are rounded and
/// clamped to `0..=255` first.
pub fn entropy_en(img: &Tensor<f64>) -> Result<f64> {
    let (h, w, data) = plane("entropy_en", img, 1)?;
    let mut hist = [0usize; 256];
    for &v in data {
        hist[v.round().clamp(0.0, 255.0) as usize] += 1;
    }
    let n = (h * w) as f64;
    Ok(hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum())
}

/// `√(RF² + CF²)` where RF and CF are the RMS of the horizontal and vertical
/// first differences, each averaged over the differences that exist.
pub fn spatial_frequency(img: &Tensor<f64>) -> Result<f64> {
    let (h, w, d) = plane("spatial_frequency", img, 2)?;
    let mut rf = 0.0;
    let mut cf = 0.0;
    for y in 0..h {
        for x in 1..w {
            rf += (d[y * w + x] - d[y * w + x - 1]).powi(2);
        }
    }
    for y in 1..h {
        for x in 0..w {
            cf += (d[y * w + x] - d[(y - 1) * w + x]).powi(2);
        }
    }
    let rf = rf / (h * (w - 1)) as f64;
    let cf = cf / ((h - 1) * w) as f64;
    Ok((rf + cf).sqrt())
}

/// Mean of `√((Δx² + Δy²)/2)` over the `(H−1)×(W−1)` pixels that have both
/// forward differences.
pub fn avg_gradient(img: &Tensor<f64>) -> Result<f64> {
    let (h, w, d) = plane("avg_gradient", img, 2)?;
    let mut total = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let gx = d[y * w + x + 1] - d[y * w + x];
            let gy = d[(y + 1) * w + x] - d[y * w + x];
            total += ((gx * gx + gy * gy) / 2.0).sqrt();
        }
    }
    Ok(total / ((h - 1) * (w - 1)) as f64)
}

/// `10·log10(255² / MSE)` with both images scaled from `[0, 1]` to the
/// 255 range; identical images give [`PSNR_CAP`], as does any larger value.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() || a.numel() == 0 {
        return Err(Error::dim("psnr", format!("{:?} against {:?}", a.shape(), b.shape())));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((*x as f64 - *y as f64) * 255.0).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64.powi(2) / mse).log10()).min(PSNR_CAP))
}

/// How a precision-recall curve is summarised into AP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Mean interpolated precision at recall 0, 0.01, ..., 1.
    #[default]
    Points101,
    /// Area under the interpolated precision envelope at every recall step.
    AllPoints,
}

/// IoU thresholds 0.5, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Precision and recall after each ranked prediction of one class.
pub fn pr_curve(
    preds: &[Vec<ScoredBox>],
    targets: &[DetectionTargets],
    class: usize,
    threshold: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if preds.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} prediction lists for {} images",
            preds.len(),
            targets.len()
        )));
    }
    let mut ranked: Vec<(usize, &ScoredBox)> = Vec::new();
    for (img, p) in preds.iter().enumerate() {
        for b in p.iter().filter(|b| b.label == class) {
            if !(0.0..=1.0).contains(&b.score) {
                return Err(Error::Contract(format!("score {} outside [0, 1]", b.score)));
            }
            ranked.push((img, b));
        }
    }
    // stable: equal scores keep image order, then list order
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let gt: Vec<Vec<&[f64; 4]>> = targets
        .iter()
        .map(|t| t.boxes.iter().zip(&t.labels).filter(|(_, &l)| l == class).map(|(b, _)| b).collect())
        .collect();
    let total: usize = gt.iter().map(Vec::len).sum();
    let mut taken: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (img, p) in ranked {
        let mut best: Option<(usize, f64)> = None;
        if area(&p.bbox) > 0.0 {
            for (j, g) in gt[img].iter().enumerate() {
                if taken[img][j] {
                    continue;
                }
                let o = iou(&p.bbox, g);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
        }
        match best {
            Some((j, _)) => {
                taken[img][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if total == 0 { 0.0 } else { tp as f64 / total as f64 });
    }
    Ok((precision, recall))
}

/// AP of a precision-recall curve whose recall is non-decreasing.
pub fn average_precision(precision: &[f64], recall: &[f64], mode: ApInterpolation) -> f64 {
    let n = precision.len();
    // precision envelope: best precision at this or any higher recall
    let mut env = precision.to_vec();
    for i in (0..n.saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    match mode {
        ApInterpolation::Points101 => {
            let mut sum = 0.0;
            let mut k = 0;
            for step in 0..=100 {
                let r = step as f64 / 100.0;
                while k < n && recall[k] < r {
                    k += 1;
                }
                if k < n {
                    sum += env[k];
                }
            }
            sum / 101.0
        }
        ApInterpolation::AllPoints => {
            let mut prev = 0.0;
            let mut sum = 0.0;
            for i in 0..n {
                sum += (recall[i] - prev) * env[i];
                prev = recall[i];
            }
            sum
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    #[serde(rename = "mAP50")]
    pub map50: f64,
    #[serde(rename = "mAP50_95")]
    pub map50_95: f64,
    pub per_class: Vec<ClassAp>,
    pub interpolation: ApInterpolation,
}

/// mAP at 0.5 and averaged over `thresholds`, over every class that has at
/// least one target. Zero-area predictions count as false positives; equal
/// scores are ranked in input order. No targets at all gives 0.
pub fn mean_average_precision(
    preds: &[Vec<ScoredBox>],
    targets: &[DetectionTargets],
    thresholds: &[f64],
    mode: ApInterpolation,
) -> Result<DetectionMetrics> {
    if thresholds.is_empty() {
        return Err(Error::Config("mAP needs at least one IoU threshold".into()));
    }
    let classes: std::collections::BTreeSet<usize> = targets.iter().flat_map(|t| t.labels.iter().copied()).collect();
    let mut per_class = Vec::with_capacity(classes.len());
    for &class in &classes {
        let ap_at = |thr: f64| -> Result<f64> {
            let (p, r) = pr_curve(preds, targets, class, thr)?;
            Ok(average_precision(&p, &r, mode))
        };
        let ap50 = ap_at(0.5)?;
        let mut sum = 0.0;
        for &t in thresholds {
            sum += ap_at(t)?;
        }
        per_class.push(ClassAp {
            class,
            ap50,
            ap50_95: sum / thresholds.len() as f64,
        });
    }
    let mean = |f: fn(&ClassAp) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    Ok(DetectionMetrics {
        map50: mean(|c| c.ap50),
        map50_95: mean(|c| c.ap50_95),
        per_class,
        interpolation: mode,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub en: f64,
    pub ag: f64,
    pub sf: f64,
    /// Against the reference image, when one is given.
    pub psnr: Option<f64>,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, img: &Tensor<f32>, reference: Option<&Tensor<f32>>) -> Result<Self> {
        let g = gray8(img)?;
        Ok(ImageMetrics {
            id: id.into(),
            en: entropy_en(&g)?,
            ag: avg_gradient(&g)?,
            sf: spatial_frequency(&g)?,
            psnr: reference.map(|r| psnr(img, r)).transpose()?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub en: f64,
    pub ag: f64,
    pub sf: f64,
    /// Mean over the images that have a PSNR.
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub means: MetricMeans,
    pub detection: Option<DetectionMetrics>,
}

impl MetricReport {
    pub fn new(images: Vec<ImageMetrics>, detection: Option<DetectionMetrics>) -> Self {
        let n = images.len().max(1) as f64;
        let psnrs: Vec<f64> = images.iter().filter_map(|m| m.psnr).collect();
        let means = MetricMeans {
            en: images.iter().map(|m| m.en).sum::<f64>() / n,
            ag: images.iter().map(|m| m.ag).sum::<f64>() / n,
            sf: images.iter().map(|m| m.sf).sum::<f64>() / n,
            psnr: (!psnrs.is_empty()).then(|| psnrs.iter().sum::<f64>() / psnrs.len() as f64),
        };
        MetricReport {
            images,
            means,
            detection,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self).map_err(|e| Error::Format(e.to_string()))?;
        serde_json::to_string_pretty(&value).map_err(|e| Error::Format(e.to_string()))
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let fmt_psnr = |p: Option<f64>| p.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let id_width = self.images.iter().map(|m| m.id.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        if !self.images.is_empty() {
            let _ = writeln!(out, "{:<id_width$} {:>10} {:>10} {:>10} {:>10}", "image", "EN", "AG", "SF", "PSNR");
            let row = |out: &mut String, id: &str, en: f64, ag: f64, sf: f64, p: Option<f64>| {
                let _ = writeln!(out, "{id:<id_width$} {en:>10.4} {ag:>10.4} {sf:>10.4} {:>10}", fmt_psnr(p));
            };
            for m in &self.images {
                row(&mut out, &m.id, m.en, m.ag, m.sf, m.psnr);
            }
            let mm = &self.means;
            row(&mut out, "mean", mm.en, mm.ag, mm.sf, mm.psnr);
        }
        if let Some(d) = &self.detection {
            if !out.is_empty() {
                let _ = writeln!(out);
            }
            let _ = writeln!(out, "{:<id_width$} {:>10} {:>10}", "class", "AP50", "AP50-95");
            for c in &d.per_class {
                let _ = writeln!(out, "{:<id_width$} {:>10.4} {:>10.4}", c.class, c.ap50, c.ap50_95);
            }
            let _ = writeln!(out, "{:<id_width$} {:>10.4} {:>10.4}", "mAP", d.map50, d.map50_95);
        }
        out
    }
}

#[cfg(test)]
mod tests;
