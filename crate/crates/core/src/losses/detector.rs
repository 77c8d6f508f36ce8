//! A small two-head anchor detector used as a frozen task prior.
//!
//! Three stride-2 convolutions reduce the image to a stride-8 grid with one
//! square anchor per cell. The proposal head predicts objectness and box
//! offsets, the classification head predicts class logits and refined box
//! offsets.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::{self, DETECTOR_TAG};
use crate::error::{Error, Result};
use crate::geometry::{decode, encode, iou, BBox};
use crate::params::{Bound, Builder, Conv, ParamStore};
use crate::tensor::{Real, Tensor};

/// Transition point of the smooth-L1 box losses.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    pub stride: usize,
    pub anchor_size: f64,
    pub width: usize,
    pub positive_iou: f64,
    pub negative_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_classes: 3,
            stride: 8,
            anchor_size: 16.0,
            width: 32,
            positive_iou: 0.5,
            negative_iou: 0.4,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.width == 0 || self.anchor_size <= 0.0 {
            return Err(Error::Config("detector needs classes, width and a positive anchor size".into()));
        }
        if self.stride != 8 {
            return Err(Error::Config("the detector backbone has a fixed stride of 8".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_iou) || self.negative_iou > self.positive_iou || self.positive_iou > 1.0 {
            return Err(Error::Config(format!(
                "need 0 ≤ negative_iou ≤ positive_iou ≤ 1, got {} and {}",
                self.negative_iou, self.positive_iou
            )));
        }
        Ok(())
    }
}

/// Ground-truth boxes and class labels of one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionTargets {
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    pub width: usize,
    pub height: usize,
}

impl DetectionTargets {
    pub fn empty(width: usize, height: usize) -> Self {
        DetectionTargets {
            boxes: Vec::new(),
            labels: Vec::new(),
            width,
            height,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(Error::Contract(format!(
                "{} boxes but {} labels",
                self.boxes.len(),
                self.labels.len()
            )));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (b, &l) in self.boxes.iter().zip(&self.labels) {
            if !(0.0 <= b[0] && b[0] < b[2] && b[2] <= w && 0.0 <= b[1] && b[1] < b[3] && b[3] <= h) {
                return Err(Error::Contract(format!("box {b:?} outside a {w}×{h} image")));
            }
            if l >= num_classes {
                return Err(Error::Contract(format!("label {l} with {num_classes} classes")));
            }
        }
        Ok(())
    }
}

/// Role of one anchor in the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    /// Matched to the target with this index.
    Positive(usize),
    Negative,
    Ignored,
}

/// Grid size after the three stride-2 convolutions.
pub fn grid_size(h: usize, w: usize) -> (usize, usize) {
    let down = |n: usize| n.div_ceil(2).div_ceil(2).div_ceil(2);
    (down(h), down(w))
}

/// One anchor per grid cell, centred on the cell, row-major.
pub fn anchors(cfg: &DetectorConfig, h: usize, w: usize) -> Vec<BBox> {
    let (gh, gw) = grid_size(h, w);
    let s = cfg.stride as f64;
    let half = cfg.anchor_size / 2.0;
    let mut out = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            out.push([cx - half, cy - half, cx + half, cy + half]);
        }
    }
    out
}

/// IoU ≥ `positive_iou` is positive, below `negative_iou` negative, in
/// between ignored. Each target also claims its best-overlapping anchor so
/// small or off-grid targets always get a positive.
pub fn match_anchors(cfg: &DetectorConfig, anchors: &[BBox], targets: &DetectionTargets) -> Vec<Assignment> {
    let mut out = Vec::with_capacity(anchors.len());
    for a in anchors {
        let best = targets
            .boxes
            .iter()
            .enumerate()
            .map(|(t, b)| (t, iou(a, b)))
            .fold(None, |acc: Option<(usize, f64)>, (t, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((t, v)),
            });
        out.push(match best {
            Some((t, v)) if v >= cfg.positive_iou => Assignment::Positive(t),
            Some((_, v)) if v >= cfg.negative_iou => Assignment::Ignored,
            _ => Assignment::Negative,
        });
    }
    for (t, b) in targets.boxes.iter().enumerate() {
        let best = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (i, iou(a, b)))
            .fold((0, 0.0), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        if best.1 > 0.0 {
            out[best.0] = Assignment::Positive(t);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct DetectorLayout {
    pub backbone: [Conv; 3],
    pub proposal_conv: Conv,
    pub proposal_out: Conv,
    pub class_conv: Conv,
    pub class_out: Conv,
}

#[derive(Clone, Debug)]
pub struct SurrogateDetector<T> {
    pub config: DetectorConfig,
    pub store: ParamStore<T>,
    pub layout: DetectorLayout,
}

/// Raw head outputs, one row per anchor.
#[derive(Clone, Copy, Debug)]
pub struct DetectorOutputs {
    /// `A` objectness logits.
    pub obj: Var,
    /// `A×4` proposal offsets.
    pub rpn: Var,
    /// `A×K` class logits.
    pub cls: Var,
    /// `A×4` refined offsets.
    pub bbox: Var,
}

/// Detection loss and its four parts, all scalars.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub cls: Var,
    pub bbox: Var,
    pub obj: Var,
    pub rpn: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub label: usize,
    pub score: f64,
}

impl<T: Real> SurrogateDetector<T> {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let w = config.width;
        let backbone = [
            b.conv("backbone0", 3, 3, w / 4 + 1, 2),
            b.conv("backbone1", 3, w / 4 + 1, w / 2 + 1, 2),
            b.conv("backbone2", 3, w / 2 + 1, w, 2),
        ];
        let layout = DetectorLayout {
            backbone,
            proposal_conv: b.conv("proposal_conv", 3, w, w, 1),
            proposal_out: b.conv("proposal_out", 1, w, 5, 1),
            class_conv: b.conv("class_conv", 3, w, w, 1),
            class_out: b.conv("class_out", 1, w, config.num_classes + 4, 1),
        };
        Ok(SurrogateDetector { config, store, layout })
    }

    pub fn forward(&self, tape: &Tape<T>, p: &Bound, image: Var) -> Result<DetectorOutputs> {
        let shape = tape.shape(image);
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::dim("detector", format!("image must be h×w×3, got {shape:?}")));
        }
        let mut x = image;
        for conv in &self.layout.backbone {
            x = tape.silu(conv.forward(tape, p, x)?);
        }
        let (gh, gw) = grid_size(shape[0], shape[1]);
        let a = gh * gw;
        let k = self.config.num_classes;
        let prop = tape.silu(self.layout.proposal_conv.forward(tape, p, x)?);
        let prop = self.layout.proposal_out.forward(tape, p, prop)?;
        let prop = tape.reshape(prop, vec![a, 5])?;
        let cls = tape.silu(self.layout.class_conv.forward(tape, p, x)?);
        let cls = self.layout.class_out.forward(tape, p, cls)?;
        let cls = tape.reshape(cls, vec![a, k + 4])?;
        let obj = tape.slice(prop, 1, 0, 1)?;
        Ok(DetectorOutputs {
            obj: tape.reshape(obj, vec![a])?,
            rpn: tape.slice(prop, 1, 1, 4)?,
            cls: tape.slice(cls, 1, 0, k)?,
            bbox: tape.slice(cls, 1, k, 4)?,
        })
    }

    /// Summed losses: binary cross-entropy on objectness over non-ignored
    /// anchors, cross-entropy on the classes of positive anchors, and
    /// smooth-L1 on both heads' offsets for positive anchors.
    pub fn loss(&self, tape: &Tape<T>, p: &Bound, image: Var, targets: &DetectionTargets) -> Result<DetectionLoss> {
        targets.validate(self.config.num_classes)?;
        let shape = tape.shape(image);
        if shape.len() != 3 || shape[0] != targets.height || shape[1] != targets.width {
            return Err(Error::dim(
                "detection_loss",
                format!("image {shape:?} with targets for {}×{}", targets.height, targets.width),
            ));
        }
        let out = self.forward(tape, p, image)?;
        let anchors = anchors(&self.config, shape[0], shape[1]);
        let assign = match_anchors(&self.config, &anchors, targets);
        let k = self.config.num_classes;

        let kept: Arc<[usize]> = (0..assign.len()).filter(|&i| assign[i] != Assignment::Ignored).collect();
        let positives: Vec<(usize, usize)> = assign
            .iter()
            .enumerate()
            .filter_map(|(i, a)| match a {
                Assignment::Positive(t) => Some((i, *t)),
                _ => None,
            })
            .collect();
        let zero = || tape.constant(Tensor::scalar(T::zero()));

        // BCE(z, y) = softplus(z) − y·z
        let logits = tape.gather(out.obj, kept)?;
        let mut obj = tape.sum(tape.softplus(logits));
        if !positives.is_empty() {
            let pos_idx: Arc<[usize]> = positives.iter().map(|&(i, _)| i).collect();
            let pos_logits = tape.gather(out.obj, pos_idx)?;
            obj = tape.sub(obj, tape.sum(pos_logits))?;
        }

        let (cls, bbox, rpn) = if positives.is_empty() {
            (zero(), zero(), zero())
        } else {
            let rows: Arc<[usize]> = positives.iter().map(|&(i, _)| i).collect();
            let log_probs = tape.log_softmax(tape.gather_rows(out.cls, rows.clone())?)?;
            let picks: Arc<[usize]> = positives
                .iter()
                .enumerate()
                .map(|(r, &(_, t))| r * k + targets.labels[t])
                .collect();
            let cls = tape.neg(tape.sum(tape.gather(log_probs, picks)?));
            let deltas: Vec<T> = positives
                .iter()
                .flat_map(|&(i, t)| encode(&targets.boxes[t], &anchors[i]))
                .map(T::lit)
                .collect();
            let deltas = tape.constant(Tensor::new(vec![positives.len(), 4], deltas)?);
            let beta = T::lit(SMOOTH_L1_BETA);
            let regress = |pred: Var| -> Result<Var> {
                let picked = tape.gather_rows(pred, rows.clone())?;
                let diff = tape.sub(picked, deltas)?;
                Ok(tape.sum(tape.smooth_l1(diff, beta)))
            };
            (cls, regress(out.bbox)?, regress(out.rpn)?)
        };
        let total = tape.add_n(&[cls, bbox, obj, rpn])?;
        Ok(DetectionLoss {
            total,
            cls,
            bbox,
            obj,
            rpn,
        })
    }

    /// Decoded detections above `min_score`, after greedy suppression of
    /// same-class boxes overlapping a higher-scored one by IoU > 0.5.
    pub fn detect(&self, image: &Tensor<T>, min_score: f64) -> Result<Vec<ScoredBox>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let x = tape.constant(image.clone());
        let out = self.forward(&tape, &p, x)?;
        let anchors = anchors(&self.config, image.shape()[0], image.shape()[1]);
        let (obj, cls, bbox) = (tape.value(out.obj), tape.value(out.cls), tape.value(out.bbox));
        let k = self.config.num_classes;
        let mut found = Vec::new();
        for (i, anchor) in anchors.iter().enumerate() {
            let score = crate::autograd::sigmoid(obj.data()[i].as_f64());
            if score < min_score {
                continue;
            }
            let row = &cls.data()[i * k..(i + 1) * k];
            let label = (0..k).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            let d = &bbox.data()[i * 4..(i + 1) * 4];
            let d = [d[0].as_f64(), d[1].as_f64(), d[2].as_f64(), d[3].as_f64()];
            found.push(ScoredBox {
                bbox: decode(&d, anchor),
                label,
                score,
            });
        }
        found.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut kept: Vec<ScoredBox> = Vec::new();
        for cand in found {
            if !kept.iter().any(|k| k.label == cand.label && iou(&k.bbox, &cand.bbox) > 0.5) {
                kept.push(cand);
            }
        }
        Ok(kept)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({ "config": self.config, "precision": T::PRECISION.tag() });
        checkpoint::save_file(path, DETECTOR_TAG, &header, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, records) = checkpoint::load_file::<T>(path, DETECTOR_TAG)?;
        let config: DetectorConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| Error::Format(format!("detector config: {e}")))?;
        let mut det = SurrogateDetector::new(config, 0)?;
        det.store.load_records(records)?;
        Ok(det)
    }
}
