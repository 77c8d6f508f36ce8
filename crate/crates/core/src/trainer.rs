//! Adam with milestone learning-rate halving, the translator training loop,
//! and surrogate-detector pre-training.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{augment_with, AugmentPlan, Sample};
use crate::error::{Error, Result};
use crate::losses::{tac_loss, DetectorConfig, SurrogateDetector, TacConfig};
use crate::model::TranslatorModel;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Steps at which the learning rate halves. `None` means 50% and 75% of
    /// `max_steps`.
    pub milestones: Option<Vec<usize>>,
    pub max_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Side of the random crop; `None` keeps the full image (flip only).
    pub crop: Option<usize>,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 2,
            milestones: None,
            max_steps: 500,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            crop: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "adam needs betas in [0, 1) and eps > 0, got {} {} {}",
                self.beta1, self.beta2, self.eps
            )));
        }
        if let Some(m) = &self.milestones {
            if m.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("milestones must be strictly increasing, got {m:?}")));
            }
        }
        if self.crop == Some(0) {
            return Err(Error::Config("crop must be positive".into()));
        }
        Ok(())
    }

    pub fn resolved_milestones(&self) -> Vec<usize> {
        match &self.milestones {
            Some(m) => m.clone(),
            None => {
                let (a, b) = (self.max_steps / 2, self.max_steps * 3 / 4);
                if a < b {
                    vec![a, b]
                } else {
                    Vec::new()
                }
            }
        }
    }
}

/// `lr · 2^−k` where `k` counts the milestones at or before `step`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg.resolved_milestones().iter().filter(|&&m| m <= step).count();
    cfg.lr * 0.5f64.powi(k as i32)
}

/// Adam moment buffers, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Fails before touching anything if a
/// gradient is non-finite, naming the parameter.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment buffers",
            store.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::dim(
                "adam_step",
                format!("{}: gradient {:?} for {:?}", store.name(id), g.shape(), store.get(id).shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {}", store.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((id, g), (m, v)) in store.ids().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let p = store.get_mut(id);
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gf = gi.as_f64();
            let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::lit(mf);
            *vi = T::lit(vf);
            let update = lr * (mf / c1) / ((vf / c2).sqrt() + cfg.eps);
            *pi = T::lit(pi.as_f64() - update);
        }
    }
    Ok(())
}

/// One row of the loss curve; every loss is summed over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub charbonnier: f64,
    pub cls: f64,
    pub bbox: f64,
    pub obj: f64,
    pub rpn: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,total,charbonnier,cls,bbox,obj,rpn,lr";

pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in curve {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step, r.total, r.charbonnier, r.cls, r.bbox, r.obj, r.rpn, r.lr
        );
    }
    out
}

/// Sample indices and augmentation plans for one step, fixed by the seed.
fn draw_batch(seed: u64, step: usize, samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<(usize, AugmentPlan)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    (0..cfg.batch_size)
        .map(|_| {
            let i = rng.gen_range(0..samples.len());
            let (h, w) = (samples[i].height(), samples[i].width());
            if cfg.crop.is_none() && h != w {
                return Err(Error::Config(format!("sample {i} is {h}×{w}; non-square samples need a crop")));
            }
            let plan = AugmentPlan::draw(rng.gen(), h, w, cfg.crop.unwrap_or(h))?;
            Ok((i, plan))
        })
        .collect()
}

fn check_finite(step: usize, r: &LossRecord) -> Result<()> {
    let parts = [r.total, r.charbonnier, r.cls, r.bbox, r.obj, r.rpn];
    if parts.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::Numeric(format!(
        "non-finite loss at step {step}: total {} charbonnier {} cls {} bbox {} obj {} rpn {}",
        r.total, r.charbonnier, r.cls, r.bbox, r.obj, r.rpn
    )))
}

fn add_grads<T: Real>(acc: &mut [Tensor<T>], grads: Vec<Tensor<T>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += *y;
        }
    }
}

/// Directory [`train`] writes `step_NNNNNN.ckpt` files into.
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
}

impl CheckpointSink<'_> {
    fn save<T: Real>(&self, model: &TranslatorModel<T>, step: usize) -> Result<()> {
        fs::create_dir_all(self.dir).map_err(|e| Error::io(self.dir, e))?;
        model.save(&self.dir.join(format!("step_{step:06}.ckpt")))
    }
}

/// Trains the translator against a frozen detector. The detector is bound
/// as constants, so its weights never change.
pub fn train<T: Real>(
    model: &mut TranslatorModel<T>,
    samples: &[Sample],
    detector: &SurrogateDetector<T>,
    cfg: &TrainConfig,
    loss_cfg: &TacConfig,
    sink: Option<&CheckpointSink>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if samples.is_empty() && cfg.max_steps > 0 {
        return Err(Error::Contract("training needs at least one sample".into()));
    }
    let mut state = OptimizerState::new(&model.store);
    let mut curve = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let lr = lr_at(step, cfg);
        let mut grads: Vec<Tensor<T>> =
            model.store.ids().map(|id| Tensor::zeros(model.store.get(id).shape().to_vec())).collect();
        let mut rec = LossRecord {
            step,
            total: 0.0,
            charbonnier: 0.0,
            cls: 0.0,
            bbox: 0.0,
            obj: 0.0,
            rpn: 0.0,
            lr,
        };
        for (i, plan) in draw_batch(cfg.seed, step, samples, cfg)? {
            let s = augment_with(&samples[i], &plan);
            let tape = Tape::new();
            let p = model.store.bind(&tape, true);
            let dp = detector.store.bind(&tape, false);
            let fused = tape.constant(s.fused.cast::<T>());
            let mask = tape.constant(s.mask_channel().cast::<T>());
            let visible = tape.constant(s.visible.cast::<T>());
            let out = model.forward(&tape, &p, fused, mask, &s.text_ids)?;
            let loss = tac_loss(&tape, out, fused, visible, &s.det_targets, loss_cfg, detector, &dp)?;
            let scalar = |v| tape.value(v).item().as_f64();
            rec.total += scalar(loss.total);
            rec.charbonnier += scalar(loss.charbonnier);
            if let Some(d) = loss.detection {
                rec.cls += scalar(d.cls);
                rec.bbox += scalar(d.bbox);
                rec.obj += scalar(d.obj);
                rec.rpn += scalar(d.rpn);
            }
            check_finite(step, &rec)?;
            let g = tape.backward(loss.total)?;
            add_grads(&mut grads, p.vars().iter().map(|&v| g.wrt(v)).collect());
        }
        adam_step(&mut model.store, &grads, &mut state, lr, cfg)?;
        curve.push(rec);
        if let Some(sink) = sink {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                sink.save(model, step + 1)?;
            }
        }
    }
    if let Some(sink) = sink {
        sink.save(model, cfg.max_steps)?;
    }
    Ok(curve)
}

/// Trains a fresh surrogate detector on the visible images.
pub fn pretrain_detector<T: Real>(
    samples: &[Sample],
    det_cfg: &DetectorConfig,
    cfg: &TrainConfig,
) -> Result<(SurrogateDetector<T>, Vec<LossRecord>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("detector pre-training needs at least one sample".into()));
    }
    let mut det = SurrogateDetector::<T>::new(det_cfg.clone(), cfg.seed)?;
    let mut state = OptimizerState::new(&det.store);
    let mut curve = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let lr = lr_at(step, cfg);
        let mut grads: Vec<Tensor<T>> =
            det.store.ids().map(|id| Tensor::zeros(det.store.get(id).shape().to_vec())).collect();
        let mut rec = LossRecord {
            step,
            total: 0.0,
            charbonnier: 0.0,
            cls: 0.0,
            bbox: 0.0,
            obj: 0.0,
            rpn: 0.0,
            lr,
        };
        for (i, plan) in draw_batch(cfg.seed ^ 0xD37E_C70B, step, samples, cfg)? {
            let s = augment_with(&samples[i], &plan);
            let tape = Tape::new();
            let p = det.store.bind(&tape, true);
            let img = tape.constant(s.visible.cast::<T>());
            let loss = det.loss(&tape, &p, img, &s.det_targets)?;
            let scalar = |v| tape.value(v).item().as_f64();
            rec.total += scalar(loss.total);
            rec.cls += scalar(loss.cls);
            rec.bbox += scalar(loss.bbox);
            rec.obj += scalar(loss.obj);
            rec.rpn += scalar(loss.rpn);
            check_finite(step, &rec)?;
            let g = tape.backward(loss.total)?;
            add_grads(&mut grads, p.vars().iter().map(|&v| g.wrt(v)).collect());
        }
        adam_step(&mut det.store, &grads, &mut state, lr, cfg)?;
        curve.push(rec);
    }
    Ok((det, curve))
}

/// Summed TAC loss of the un-augmented `samples` under the current weights.
pub fn tac_loss_on<T: Real>(
    model: &TranslatorModel<T>,
    samples: &[Sample],
    detector: &SurrogateDetector<T>,
    loss_cfg: &TacConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let tape = Tape::new();
        let p = model.store.bind(&tape, false);
        let dp = detector.store.bind(&tape, false);
        let fused = tape.constant(s.fused.cast::<T>());
        let mask = tape.constant(s.mask_channel().cast::<T>());
        let visible = tape.constant(s.visible.cast::<T>());
        let out = model.forward(&tape, &p, fused, mask, &s.text_ids)?;
        let loss = tac_loss(&tape, out, fused, visible, &s.det_targets, loss_cfg, detector, &dp)?;
        total += tape.value(loss.total).item().as_f64();
    }
    Ok(total)
}

/// Summed detection loss of `images` under a frozen detector.
pub fn detection_loss_on<T: Real>(
    detector: &SurrogateDetector<T>,
    images: &[Tensor<T>],
    targets: &[crate::losses::DetectionTargets],
) -> Result<f64> {
    let mut total = 0.0;
    for (img, t) in images.iter().zip(targets) {
        let tape = Tape::new();
        let p = detector.store.bind(&tape, false);
        let x = tape.constant(img.clone());
        total += tape.value(detector.loss(&tape, &p, x, t)?.total).item().as_f64();
    }
    Ok(total)
}
