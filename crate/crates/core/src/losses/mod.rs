//! Training objective: a two-reference Charbonnier reconstruction term plus
//! a detection term from a frozen surrogate detector.

mod detector;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::Real;

pub use detector::{
    anchors, grid_size, match_anchors, Assignment, DetectionLoss, DetectionTargets, DetectorConfig, DetectorLayout,
    DetectorOutputs, ScoredBox, SurrogateDetector, SMOOTH_L1_BETA,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CharbonnierConfig {
    /// Weight of the distance to the fused input.
    pub alpha: f64,
    /// Weight of the distance to the visible reference.
    pub beta: f64,
    pub eps: f64,
    pub reduction: Reduction,
}

impl Default for CharbonnierConfig {
    fn default() -> Self {
        CharbonnierConfig {
            alpha: 0.5,
            beta: 0.5,
            eps: 1e-3,
            reduction: Reduction::Sum,
        }
    }
}

impl CharbonnierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "charbonnier needs eps > 0 and non-negative weights, got alpha {} beta {} eps {}",
                self.alpha, self.beta, self.eps
            )));
        }
        Ok(())
    }
}

fn charbonnier_term<T: Real>(tape: &Tape<T>, a: Var, b: Var, eps: f64, reduction: Reduction) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.add_scalar(tape.square(d), T::lit(eps * eps));
    let r = tape.sqrt(d);
    Ok(match reduction {
        Reduction::Sum => tape.sum(r),
        Reduction::Mean => tape.mean(r),
    })
}

/// `α·Σ√((Î−f)² + ε²) + β·Σ√((Î−v)² + ε²)` over every scalar pixel.
pub fn charbonnier_loss<T: Real>(tape: &Tape<T>, i_hat: Var, f: Var, v: Var, cfg: &CharbonnierConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(i_hat);
    if tape.shape(f) != shape || tape.shape(v) != shape {
        return Err(Error::dim(
            "charbonnier_loss",
            format!("{shape:?} against {:?} and {:?}", tape.shape(f), tape.shape(v)),
        ));
    }
    let to_fused = charbonnier_term(tape, i_hat, f, cfg.eps, cfg.reduction)?;
    let to_visible = charbonnier_term(tape, i_hat, v, cfg.eps, cfg.reduction)?;
    tape.add(tape.scale(to_fused, T::lit(cfg.alpha)), tape.scale(to_visible, T::lit(cfg.beta)))
}

/// Detection loss of `image` under a frozen detector bound as constants.
pub fn detection_loss<T: Real>(
    tape: &Tape<T>,
    image: Var,
    targets: &DetectionTargets,
    det: &SurrogateDetector<T>,
    det_params: &Bound,
) -> Result<DetectionLoss> {
    det.loss(tape, det_params, image, targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TacConfig {
    pub charbonnier: CharbonnierConfig,
    pub lambda: f64,
    pub theta: f64,
}

impl Default for TacConfig {
    fn default() -> Self {
        TacConfig {
            charbonnier: CharbonnierConfig::default(),
            lambda: 5.0,
            theta: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TacLoss {
    pub total: Var,
    pub charbonnier: Var,
    /// Absent when `theta` is zero.
    pub detection: Option<DetectionLoss>,
}

/// `λ·charbonnier + θ·detection`. The detection term is skipped entirely
/// when `θ = 0`.
#[allow(clippy::too_many_arguments)]
pub fn tac_loss<T: Real>(
    tape: &Tape<T>,
    i_hat: Var,
    f: Var,
    v: Var,
    targets: &DetectionTargets,
    cfg: &TacConfig,
    det: &SurrogateDetector<T>,
    det_params: &Bound,
) -> Result<TacLoss> {
    if !(cfg.lambda >= 0.0) || !(cfg.theta >= 0.0) {
        return Err(Error::Config(format!(
            "loss weights must be non-negative, got lambda {} theta {}",
            cfg.lambda, cfg.theta
        )));
    }
    let charbonnier = charbonnier_loss(tape, i_hat, f, v, &cfg.charbonnier)?;
    let weighted = tape.scale(charbonnier, T::lit(cfg.lambda));
    if cfg.theta == 0.0 {
        return Ok(TacLoss {
            total: weighted,
            charbonnier,
            detection: None,
        });
    }
    let detection = detection_loss(tape, i_hat, targets, det, det_params)?;
    let total = tape.add(weighted, tape.scale(detection.total, T::lit(cfg.theta)))?;
    Ok(TacLoss {
        total,
        charbonnier,
        detection: Some(detection),
    })
}
