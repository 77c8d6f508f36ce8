//! Synthetic paired scenes, candidate-mask voting, label-consistent
//! augmentation, and dataset storage.
//!
//! Every scene has a textured visible image with coloured targets, an
//! infrared image whose background carries a faint copy of the visible luma
//! and whose targets glow uniformly, and a fused image produced by a fixed
//! blend-and-compress operator. All image values lie on the 8-bit grid so
//! samples survive PNG storage exactly.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::DetectionTargets;
use crate::tensor::Tensor;

pub use io::{
    load_dataset, read_gray, read_rgb, save_dataset, write_rgb_png, Dataset, DatasetManifest, SampleRecord, Split, MANIFEST,
};

/// Smallest generated image side.
pub const MIN_SCENE_SIDE: usize = 32;
pub const MAX_TARGETS: usize = 8;
/// Placement attempts per target before giving up on it.
pub const PLACEMENT_ATTEMPTS: usize = 100;
/// Boxes smaller than this (in px²) are dropped after cropping.
pub const MIN_BOX_AREA: f64 = 4.0;

pub const CLASS_NAMES: [&str; 3] = ["square", "disc", "triangle"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

/// Infrared level of every target pixel.
pub const TARGET_HEAT: f64 = 0.9;
/// Fused value = `FUSED_OFFSET + FUSED_GAIN · (visible + infrared) / 2`.
pub const FUSED_OFFSET: f64 = 0.35;
pub const FUSED_GAIN: f64 = 0.5;

const NUMBER_WORDS: [&str; 9] = ["no", "one", "two", "three", "four", "five", "six", "seven", "eight"];

/// Token vocabulary. Ids index this list.
pub const VOCABULARY: [&str; 26] = [
    "<pad>", "scene", "with", "and", "targets", "no", "one", "two", "three", "four", "five", "six", "seven",
    "eight", "square", "squares", "disc", "discs", "triangle", "triangles", "bright", "thermal", "in", "the",
    "dark", "field",
];

pub fn token_id(word: &str) -> Option<usize> {
    VOCABULARY.iter().position(|w| *w == word)
}

/// Whitespace-separated words to ids; unknown words are an error.
pub fn encode_text(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            token_id(&w.to_lowercase()).ok_or_else(|| Error::Contract(format!("word {w:?} is not in the vocabulary")))
        })
        .collect()
}

pub fn decode_text(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| VOCABULARY.get(i).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Caption listing how many targets of each class the scene holds.
pub fn describe(labels: &[usize]) -> String {
    let mut parts = Vec::new();
    for (class, name) in CLASS_NAMES.iter().enumerate() {
        let n = labels.iter().filter(|&&l| l == class).count();
        if n > 0 {
            let noun = if n == 1 { name.to_string() } else { format!("{name}s") };
            parts.push(format!("{} {noun}", NUMBER_WORDS[n]));
        }
    }
    if parts.is_empty() {
        "scene with no targets".into()
    } else {
        format!("scene with {}", parts.join(" and "))
    }
}

/// One paired multimodal scene. Images are `h×w×3`, masks and labels `h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub visible: Tensor<f32>,
    pub infrared: Tensor<f32>,
    pub fused: Tensor<f32>,
    pub candidate_masks: [Tensor<f32>; 3],
    pub voted_mask: Tensor<f32>,
    pub text_ids: Vec<usize>,
    pub det_targets: DetectionTargets,
    /// 0 for background, `class + 1` on target pixels.
    pub seg_labels: Tensor<f32>,
    pub requested_targets: usize,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.fused.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.fused.shape()[1]
    }

    /// Voted mask shaped `h×w×1`, as the translator consumes it.
    pub fn mask_channel(&self) -> Tensor<f32> {
        self.voted_mask
            .reshape(vec![self.height(), self.width(), 1])
            .expect("mask matches image")
    }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn luma(rgb: &[f64]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Pixel membership of a target shape inside its bounding square.
fn shape_covers(class: usize, size: usize, dx: usize, dy: usize) -> bool {
    let s = size as f64;
    let (x, y) = (dx as f64 + 0.5, dy as f64 + 0.5);
    match class {
        0 => true,
        1 => {
            let r = s / 2.0;
            (x - r).powi(2) + (y - r).powi(2) <= r * r
        }
        // apex at the top centre, base along the bottom row
        _ => (x - s / 2.0).abs() <= 0.5 * s * (y / s) + 0.5,
    }
}

fn bbox_of(pixels: &[(usize, usize)]) -> BBox {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for &(x, y) in pixels {
        x1 = x1.min(x);
        y1 = y1.min(y);
        x2 = x2.max(x + 1);
        y2 = y2.max(y + 1);
    }
    [x1 as f64, y1 as f64, x2 as f64, y2 as f64]
}

fn morph(mask: &[bool], h: usize, w: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut any = false;
            let mut all = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    let v = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && mask[yy as usize * w + xx as usize];
                    any |= v;
                    all &= v;
                }
            }
            out[y * w + x] = if dilate { any } else { all };
        }
    }
    out
}

/// Renders one scene. Fully determined by `seed`.
pub fn generate_scene(seed: u64, h: usize, w: usize, num_targets: usize) -> Result<Sample> {
    if h < MIN_SCENE_SIDE || w < MIN_SCENE_SIDE {
        return Err(Error::Contract(format!(
            "scenes must be at least {MIN_SCENE_SIDE}×{MIN_SCENE_SIDE}, got {h}×{w}"
        )));
    }
    if num_targets > MAX_TARGETS {
        return Err(Error::Contract(format!("at most {MAX_TARGETS} targets, got {num_targets}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Visible background: base colour, a few low-frequency waves, fine grain.
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.6));
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.0..std::f64::consts::TAU),
                std::array::from_fn(|_| rng.gen_range(-0.08..0.08)),
            )
        })
        .collect();
    let mut visible = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut v = base[c];
                for (fx, fy, phase, amp) in &waves {
                    v += amp[c] * (fx * x as f64 + fy * y as f64 + phase).sin();
                }
                v += rng.gen_range(-0.03..0.03);
                visible[(y * w + x) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }

    // Targets: non-overlapping boxes with a 2 px gap.
    let hi = 20.min(h.min(w) / 3).max(8);
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
    'targets: for _ in 0..num_targets {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let class = rng.gen_range(0..NUM_CLASSES);
            let size = rng.gen_range(8..=hi);
            let x0 = rng.gen_range(0..=w - size);
            let y0 = rng.gen_range(0..=h - size);
            let clear = placed
                .iter()
                .all(|&(_, s, px, py)| x0 + size + 2 <= px || px + s + 2 <= x0 || y0 + size + 2 <= py || py + s + 2 <= y0);
            if clear {
                placed.push((class, size, x0, y0));
                continue 'targets;
            }
        }
        break;
    }

    let mut infrared = vec![0.0f64; h * w * 3];
    for p in 0..h * w {
        let heat = 0.15 + 0.1 * luma(&visible[p * 3..p * 3 + 3]);
        infrared[p * 3..p * 3 + 3].fill(heat);
    }
    let mut truth = vec![false; h * w];
    let mut seg = vec![0.0f32; h * w];
    let mut boxes = Vec::with_capacity(placed.len());
    let mut labels = Vec::with_capacity(placed.len());
    for &(class, size, x0, y0) in &placed {
        let colour: [f64; 3] = match class {
            0 => [0.85, 0.2, 0.15],
            1 => [0.2, 0.75, 0.3],
            _ => [0.15, 0.3, 0.9],
        };
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
        let mut pixels = Vec::new();
        for dy in 0..size {
            for dx in 0..size {
                if !shape_covers(class, size, dx, dy) {
                    continue;
                }
                let (x, y) = (x0 + dx, y0 + dy);
                let p = y * w + x;
                pixels.push((x, y));
                truth[p] = true;
                seg[p] = (class + 1) as f32;
                for c in 0..3 {
                    visible[p * 3 + c] = (colour[c] + jitter[c] + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
                    infrared[p * 3 + c] = TARGET_HEAT;
                }
            }
        }
        boxes.push(bbox_of(&pixels));
        labels.push(class);
    }

    let fused: Vec<f32> = visible
        .iter()
        .zip(&infrared)
        .map(|(v, i)| quantize(FUSED_OFFSET + FUSED_GAIN * 0.5 * (v + i)))
        .collect();

    let dilated = morph(&truth, h, w, true);
    let eroded = morph(&truth, h, w, false);
    let mut salted = |m: Vec<bool>| -> Tensor<f32> {
        let data = m
            .into_iter()
            .map(|v| if v || rng.gen_bool(0.01) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![h, w], data).expect("mask")
    };
    let true_mask = Tensor::new(vec![h, w], truth.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())?;
    let candidate_masks = [true_mask, salted(dilated), salted(eroded)];
    let voted_mask = mask_vote(&candidate_masks[0], &candidate_masks[1], &candidate_masks[2])?;

    let text_ids = encode_text(&describe(&labels))?;
    Ok(Sample {
        visible: Tensor::new(vec![h, w, 3], visible.into_iter().map(quantize).collect())?,
        infrared: Tensor::new(vec![h, w, 3], infrared.into_iter().map(quantize).collect())?,
        fused: Tensor::new(vec![h, w, 3], fused)?,
        candidate_masks,
        voted_mask,
        text_ids,
        det_targets: DetectionTargets {
            boxes,
            labels,
            width: w,
            height: h,
        },
        seg_labels: Tensor::new(vec![h, w], seg)?,
        requested_targets: num_targets,
    })
}

/// Per-pixel majority of three binary masks.
pub fn mask_vote(m1: &Tensor<f32>, m2: &Tensor<f32>, m3: &Tensor<f32>) -> Result<Tensor<f32>> {
    if m1.shape() != m2.shape() || m1.shape() != m3.shape() {
        return Err(Error::dim(
            "mask_vote",
            format!("{:?}, {:?}, {:?}", m1.shape(), m2.shape(), m3.shape()),
        ));
    }
    let data = (0..m1.numel())
        .map(|i| {
            let votes = [m1, m2, m3].iter().filter(|m| m.data()[i] > 0.5).count();
            if votes >= 2 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(m1.shape().to_vec(), data)
}

/// Crop window and flip choice for [`augment_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentPlan {
    pub flip: bool,
    pub x0: usize,
    pub y0: usize,
    pub crop: usize,
}

impl AugmentPlan {
    pub fn draw(seed: u64, h: usize, w: usize, crop: usize) -> Result<Self> {
        if crop == 0 || crop > h.min(w) {
            return Err(Error::Contract(format!("crop {crop} does not fit a {h}×{w} sample")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(AugmentPlan {
            flip: rng.gen_bool(0.5),
            x0: rng.gen_range(0..=w - crop),
            y0: rng.gen_range(0..=h - crop),
            crop,
        })
    }
}

/// Flips (optionally) then crops an `h×w` or `h×w×c` tensor.
fn transform(t: &Tensor<f32>, plan: &AugmentPlan) -> Tensor<f32> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let c = if t.rank() == 3 { t.shape()[2] } else { 1 };
    let n = plan.crop;
    let mut out = Vec::with_capacity(n * n * c);
    for y in plan.y0..plan.y0 + n {
        for x in plan.x0..plan.x0 + n {
            let sx = if plan.flip { w - 1 - x } else { x };
            let p = (y * w + sx) * c;
            out.extend_from_slice(&t.data()[p..p + c]);
        }
    }
    debug_assert!(plan.y0 + n <= h);
    let mut shape = vec![n, n];
    if t.rank() == 3 {
        shape.push(c);
    }
    Tensor::new(shape, out).expect("crop shape")
}

/// Random horizontal flip (probability ½) and `crop×crop` window, applied
/// identically to every field.
pub fn augment(sample: &Sample, seed: u64, crop: usize) -> Result<Sample> {
    let plan = AugmentPlan::draw(seed, sample.height(), sample.width(), crop)?;
    Ok(augment_with(sample, &plan))
}

pub fn augment_with(sample: &Sample, plan: &AugmentPlan) -> Sample {
    let w = sample.width() as f64;
    let (x0, y0, n) = (plan.x0 as f64, plan.y0 as f64, plan.crop as f64);
    let mut boxes = Vec::new();
    let mut labels = Vec::new();
    for (b, &l) in sample.det_targets.boxes.iter().zip(&sample.det_targets.labels) {
        let b = if plan.flip { [w - b[2], b[1], w - b[0], b[3]] } else { *b };
        let clipped = [
            (b[0] - x0).clamp(0.0, n),
            (b[1] - y0).clamp(0.0, n),
            (b[2] - x0).clamp(0.0, n),
            (b[3] - y0).clamp(0.0, n),
        ];
        if crate::geometry::area(&clipped) >= MIN_BOX_AREA {
            boxes.push(clipped);
            labels.push(l);
        }
    }
    let t = |x: &Tensor<f32>| transform(x, plan);
    Sample {
        visible: t(&sample.visible),
        infrared: t(&sample.infrared),
        fused: t(&sample.fused),
        candidate_masks: [
            t(&sample.candidate_masks[0]),
            t(&sample.candidate_masks[1]),
            t(&sample.candidate_masks[2]),
        ],
        voted_mask: t(&sample.voted_mask),
        text_ids: sample.text_ids.clone(),
        det_targets: DetectionTargets {
            boxes,
            labels,
            width: plan.crop,
            height: plan.crop,
        },
        seg_labels: t(&sample.seg_labels),
        requested_targets: sample.requested_targets,
    }
}

/// Seed of sample `index` within a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `count` scenes of `size×size` with 1 to 4 targets each.
pub fn generate_samples(seed: u64, count: usize, size: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let s = sample_seed(seed, i);
            let targets = 1 + (s % 4) as usize;
            generate_scene(s, size, size, targets)
        })
        .collect()
}
