//! Ternary (mask / image / text) cross-attention.
//!
//! The image, mask, and mean text features are summed into a fusion map,
//! which passes through parallel 1×1 and 3×3 convolutions; their channel
//! concatenation is fused back to `C` channels and projected into keys and
//! values. Text tokens are projected into queries. Each grid position then
//! collects the query outputs weighted by how strongly each query attended
//! to it, and the result is gated by the soft target mask.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Builder, Conv, Linear};
use crate::tensor::Real;

/// Added to the scatter normalizer so positions no query attends to stay finite.
pub const SCATTER_EPS: f64 = 1e-8;

/// Which stream supplies the attention queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionRoles {
    /// Text tokens query the fused image/mask/text grid (the default).
    #[default]
    TextQuery,
    /// Grid positions query the text tokens.
    FusionQuery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MmcaConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub roles: AttentionRoles,
}

impl MmcaConfig {
    pub fn new(embed_dim: usize, num_heads: usize, roles: AttentionRoles) -> Result<Self> {
        if num_heads == 0 || !embed_dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "{num_heads} attention heads do not divide embedding width {embed_dim}"
            )));
        }
        Ok(MmcaConfig {
            embed_dim,
            num_heads,
            roles,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MmcaWeights {
    pub cfg: MmcaConfig,
    pub branch_1x1: Conv,
    pub branch_3x3: Conv,
    pub fuse: Linear,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
}

impl MmcaWeights {
    pub fn init<T: Real>(b: &mut Builder<'_, T>, cfg: MmcaConfig) -> Self {
        let c = cfg.embed_dim;
        MmcaWeights {
            cfg,
            branch_1x1: b.conv("branch_1x1", 1, c, c, 1),
            branch_3x3: b.conv("branch_3x3", 3, c, c, 1),
            fuse: b.linear("fuse", 2 * c, c, true),
            q_proj: b.linear("q_proj", c, c, true),
            k_proj: b.linear("k_proj", c, c, true),
            v_proj: b.linear("v_proj", c, c, true),
            out_proj: b.linear("out_proj", c, c, true),
        }
    }
}

/// The fused grid tokens, `(h·w)×c`, before the key/value projections.
fn fusion_tokens<T: Real>(
    tape: &Tape<T>,
    p: &Bound,
    w: &MmcaWeights,
    fused_feat: Var,
    mask_feat: Var,
    text_summary: Var,
) -> Result<Var> {
    let shape = tape.shape(fused_feat);
    let &[h, wd, c] = shape.as_slice() else {
        return Err(Error::dim("build_kv", format!("fused features must be h×w×c, got {shape:?}")));
    };
    if tape.shape(mask_feat) != shape || tape.shape(text_summary) != [c] || c != w.cfg.embed_dim {
        return Err(Error::dim(
            "build_kv",
            format!(
                "fused {shape:?}, mask {:?}, text summary {:?}, width {}",
                tape.shape(mask_feat),
                tape.shape(text_summary),
                w.cfg.embed_dim
            ),
        ));
    }
    let text_map = tape.broadcast_rows(text_summary, shape.clone())?;
    let fusion = tape.add_n(&[fused_feat, mask_feat, text_map])?;
    let a = w.branch_1x1.forward(tape, p, fusion)?;
    let b = w.branch_3x3.forward(tape, p, fusion)?;
    let both = tape.concat(&[a, b], 2)?;
    let fused = w.fuse.forward(tape, p, both)?;
    tape.reshape(fused, vec![h * wd, c])
}

/// Keys and values (`(h·w)×c` each) from the text-image-mask fusion feature.
pub fn build_kv<T: Real>(
    tape: &Tape<T>,
    p: &Bound,
    w: &MmcaWeights,
    fused_feat: Var,
    mask_feat: Var,
    text_summary: Var,
) -> Result<(Var, Var)> {
    let tokens = fusion_tokens(tape, p, w, fused_feat, mask_feat, text_summary)?;
    Ok((w.k_proj.forward(tape, p, tokens)?, w.v_proj.forward(tape, p, tokens)?))
}

fn head_slices<T: Real>(tape: &Tape<T>, x: Var, heads: usize) -> Result<Vec<Var>> {
    let c = tape.shape(x)[1];
    let hd = c / heads;
    (0..heads).map(|h| tape.slice(x, 1, h * hd, hd)).collect()
}

fn head_logits<T: Real>(tape: &Tape<T>, q: Var, k: Var) -> Result<Var> {
    let hd = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    Ok(tape.scale(raw, T::lit(1.0 / (hd as f64).sqrt())))
}

/// Per-head attention results: the output tokens and each head's
/// `queries × keys` weight matrix.
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Standard multi-head attention: `softmax(q kᵀ / √d) v` per head, heads
/// concatenated. `q` is `Lq×c`, `k` and `v` are `Lk×c`.
pub fn multi_head_attention<T: Real>(tape: &Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Attended> {
    let (qs, ks, vs) = (head_slices(tape, q, heads)?, head_slices(tape, k, heads)?, head_slices(tape, v, heads)?);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for ((qh, kh), vh) in qs.into_iter().zip(ks).zip(vs) {
        let attn = tape.softmax(head_logits(tape, qh, kh)?)?;
        outs.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    Ok(Attended {
        out: tape.concat(&outs, 1)?,
        weights,
    })
}

/// Attention from `Lq` queries over `Lk` keys, transported back onto the
/// keys: key position `j` receives `Σ_q a(q,j)·out(q) / (Σ_q a(q,j) + ε)`.
pub fn scatter_attention<T: Real>(tape: &Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Attended> {
    let (qs, ks, vs) = (head_slices(tape, q, heads)?, head_slices(tape, k, heads)?, head_slices(tape, v, heads)?);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for ((qh, kh), vh) in qs.into_iter().zip(ks).zip(vs) {
        let attn = tape.softmax(head_logits(tape, qh, kh)?)?;
        let per_query = tape.matmul(attn, vh)?;
        let attn_t = tape.transpose(attn)?;
        let mixed = tape.matmul(attn_t, per_query)?;
        let mass = tape.sum_axis(attn, 0)?;
        let mass = tape.add_scalar(mass, T::lit(SCATTER_EPS));
        let inv = tape.recip(mass);
        outs.push(tape.mul_leading(mixed, inv)?);
        weights.push(attn);
    }
    Ok(Attended {
        out: tape.concat(&outs, 1)?,
        weights,
    })
}

/// Full cross-attention result with the intermediate values tests inspect.
pub struct MmcaOutput {
    /// Gated `h×w×c` output.
    pub out: Var,
    /// The same map before mask gating.
    pub pre_gate: Var,
    pub weights: Vec<Var>,
}

/// Cross-attention between text queries and the fused image/mask/text grid,
/// gated by `target_mask` (`h×w`, values in `[0, 1]`).
#[allow(clippy::too_many_arguments)]
pub fn mmca<T: Real>(
    tape: &Tape<T>,
    p: &Bound,
    w: &MmcaWeights,
    query_tokens: Var,
    fused_feat: Var,
    mask_feat: Var,
    text_tokens: Var,
    target_mask: Var,
) -> Result<MmcaOutput> {
    let shape = tape.shape(fused_feat);
    let c = w.cfg.embed_dim;
    if shape.len() != 3 || tape.shape(target_mask) != shape[..2] {
        return Err(Error::dim(
            "mmca",
            format!("fused {shape:?} with target mask {:?}", tape.shape(target_mask)),
        ));
    }
    let q_shape = tape.shape(query_tokens);
    let t_shape = tape.shape(text_tokens);
    if q_shape.len() != 2 || q_shape[1] != c || t_shape.len() != 2 || t_shape[1] != c || t_shape[0] == 0 {
        return Err(Error::dim("mmca", format!("queries {q_shape:?}, text {t_shape:?}, width {c}")));
    }
    let summary = tape.mean_axis(text_tokens, 0)?;
    let tokens = fusion_tokens(tape, p, w, fused_feat, mask_feat, summary)?;
    let heads = w.cfg.num_heads;
    let attended = match w.cfg.roles {
        AttentionRoles::TextQuery => {
            let q = w.q_proj.forward(tape, p, query_tokens)?;
            let k = w.k_proj.forward(tape, p, tokens)?;
            let v = w.v_proj.forward(tape, p, tokens)?;
            scatter_attention(tape, q, k, v, heads)?
        }
        AttentionRoles::FusionQuery => {
            let q = w.q_proj.forward(tape, p, tokens)?;
            let k = w.k_proj.forward(tape, p, query_tokens)?;
            let v = w.v_proj.forward(tape, p, query_tokens)?;
            multi_head_attention(tape, q, k, v, heads)?
        }
    };
    let projected = w.out_proj.forward(tape, p, attended.out)?;
    let pre_gate = tape.reshape(projected, shape)?;
    let out = tape.mul_leading(pre_gate, target_mask)?;
    Ok(MmcaOutput {
        out,
        pre_gate,
        weights: attended.weights,
    })
}
