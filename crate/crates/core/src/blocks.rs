//! Text-vision state-space module, the multimodal block built around it, and
//! block stacking.

use serde::{Deserialize, Serialize};

use crate::attention::{mmca, MmcaConfig, MmcaWeights};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Builder, Conv, Depthwise, Linear, Norm, ParamId};
use crate::ssm::{scan3d, Scan3dParams};
use crate::tensor::Real;

/// Latent width multiplier inside the state-space module.
pub const LATENT_EXPANSION: usize = 2;

#[derive(Clone, Copy, Debug)]
pub struct TvSsmWeights {
    pub image_in_proj: Linear,
    pub mask_in_proj: Linear,
    /// Lifts text tokens into the latent width so they can share the scan.
    pub text_in_proj: Linear,
    pub pre_scan_conv: Depthwise,
    pub scan: Scan3dParams,
    pub out_norm: Norm,
    pub out_proj: Linear,
    pub channels: usize,
    pub latent: usize,
}

impl TvSsmWeights {
    pub fn init<T: Real>(b: &mut Builder<'_, T>, channels: usize, state_dim: usize, tied_scan: bool) -> Self {
        let latent = LATENT_EXPANSION * channels;
        TvSsmWeights {
            image_in_proj: b.linear("image_in_proj", channels, latent, true),
            mask_in_proj: b.linear("mask_in_proj", channels, latent, true),
            text_in_proj: b.linear("text_in_proj", channels, latent, true),
            pre_scan_conv: b.depthwise("pre_scan_conv", 3, latent),
            scan: Scan3dParams::init(&mut b.scope("scan"), latent, state_dim, tied_scan),
            out_norm: b.norm("out_norm", latent),
            out_proj: b.linear("out_proj", latent, channels, true),
            channels,
            latent,
        }
    }
}

fn check_inputs<T: Real>(tape: &Tape<T>, op: &'static str, f_i: Var, f_mask: Var, f_text: Var, c: usize) -> Result<()> {
    let shape = tape.shape(f_i);
    let text = tape.shape(f_text);
    if shape.len() != 3
        || shape[2] != c
        || tape.shape(f_mask) != shape
        || text.len() != 2
        || text[1] != c
        || text[0] == 0
    {
        return Err(Error::dim(
            op,
            format!("image {shape:?}, mask {:?}, text {text:?}, width {c}", tape.shape(f_mask)),
        ));
    }
    Ok(())
}

/// Image branch (projection, depthwise conv, SiLU, scan with text) gated by
/// the mask branch (projection, SiLU), normalized and projected back to `c`.
pub fn tv_ssm<T: Real>(tape: &Tape<T>, p: &Bound, w: &TvSsmWeights, f_i: Var, f_mask: Var, f_text: Var) -> Result<Var> {
    check_inputs(tape, "tv_ssm", f_i, f_mask, f_text, w.channels)?;
    let x = w.image_in_proj.forward(tape, p, f_i)?;
    let x = w.pre_scan_conv.forward(tape, p, x)?;
    let x = tape.silu(x);
    let text = w.text_in_proj.forward(tape, p, f_text)?;
    let scanned = scan3d(tape, p, x, text, &w.scan)?.y;
    let m = w.mask_in_proj.forward(tape, p, f_mask)?;
    let m = tape.silu(m);
    let gated = tape.mul(scanned, m)?;
    let normed = w.out_norm.forward(tape, p, gated)?;
    w.out_proj.forward(tape, p, normed)
}

#[derive(Clone, Copy, Debug)]
pub struct MmSsbWeights {
    pub ln1: Norm,
    pub ln2: Norm,
    /// Per-channel residual scale.
    pub s: ParamId,
    pub tv_ssm: TvSsmWeights,
    pub post_conv: Conv,
    pub mmca: MmcaWeights,
}

impl MmSsbWeights {
    pub fn init<T: Real>(b: &mut Builder<'_, T>, mmca_cfg: MmcaConfig, state_dim: usize, tied_scan: bool) -> Self {
        let c = mmca_cfg.embed_dim;
        MmSsbWeights {
            ln1: b.norm("ln1", c),
            ln2: b.norm("ln2", c),
            s: b.ones("s", &[c]),
            tv_ssm: TvSsmWeights::init(&mut b.scope("tv_ssm"), c, state_dim, tied_scan),
            post_conv: b.conv("post_conv", 3, c, c, 1),
            mmca: MmcaWeights::init(&mut b.scope("mmca"), mmca_cfg),
        }
    }
}

/// Block output together with the intermediate `z`.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub z: Var,
    pub out: Var,
}

/// `z = tv_ssm(ln1(f_i), f_mask, f_text) + s ⊙ ln1(f_i)`, then
/// `out = mmca(f_text, post_conv(ln2(z)), f_mask, f_text, target_mask) + z`.
pub fn mm_ssb<T: Real>(
    tape: &Tape<T>,
    p: &Bound,
    w: &MmSsbWeights,
    f_i: Var,
    f_mask: Var,
    f_text: Var,
    target_mask: Var,
) -> Result<BlockOutput> {
    check_inputs(tape, "mm_ssb", f_i, f_mask, f_text, w.tv_ssm.channels)?;
    let normed = w.ln1.forward(tape, p, f_i)?;
    let ssm = tv_ssm(tape, p, &w.tv_ssm, normed, f_mask, f_text)?;
    let scaled = tape.mul_channel(normed, p[w.s])?;
    let z = tape.add(ssm, scaled)?;
    let fused = w.ln2.forward(tape, p, z)?;
    let fused = w.post_conv.forward(tape, p, fused)?;
    let attended = mmca(tape, p, &w.mmca, f_text, fused, f_mask, f_text, target_mask)?;
    let out = tape.add(attended.out, z)?;
    Ok(BlockOutput { z, out })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmSsgConfig {
    pub blocks_per_group: usize,
    pub num_groups: usize,
}

impl MmSsgConfig {
    pub fn depth(&self) -> usize {
        self.blocks_per_group * self.num_groups
    }
}

/// Applies the blocks in order; mask, text and target mask are fed to every
/// block unchanged.
#[allow(clippy::too_many_arguments)]
pub fn mm_ssg_stack<T: Real>(
    tape: &Tape<T>,
    p: &Bound,
    cfg: MmSsgConfig,
    blocks: &[MmSsbWeights],
    f_i: Var,
    f_mask: Var,
    f_text: Var,
    target_mask: Var,
) -> Result<Var> {
    if cfg.blocks_per_group == 0 || cfg.num_groups == 0 {
        return Err(Error::Config("group and block counts must be at least 1".into()));
    }
    if blocks.len() != cfg.depth() {
        return Err(Error::Config(format!(
            "{} groups of {} blocks need {} block weights, got {}",
            cfg.num_groups,
            cfg.blocks_per_group,
            cfg.depth(),
            blocks.len()
        )));
    }
    let mut x = f_i;
    for block in blocks {
        x = mm_ssb(tape, p, block, x, f_mask, f_text, target_mask)?.out;
    }
    Ok(x)
}

#[cfg(test)]
mod tests;
