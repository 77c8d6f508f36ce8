//! The end-to-end translator: shallow feature extraction, the block stack,
//! and convolutional reconstruction.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRoles, MmcaConfig};
use crate::autograd::{Tape, Var};
use crate::blocks::{mm_ssg_stack, MmSsbWeights, MmSsgConfig};
use crate::checkpoint::{self, MODEL_TAG};
use crate::error::{Error, Result};
use crate::params::{Bound, Builder, Conv, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;
/// Longest accepted text prompt, in tokens.
pub const MAX_TEXT_TOKENS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_channels: usize,
    pub num_groups: usize,
    pub blocks_per_group: usize,
    pub state_dim: usize,
    pub num_heads: usize,
    pub text_vocab: usize,
    /// Predict a correction added to the input fused image.
    pub residual_output: bool,
    /// Share one parameter set across the four spatial scan directions.
    pub tied_scan: bool,
    pub attention_roles: AttentionRoles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_channels: 180,
            num_groups: 2,
            blocks_per_group: 2,
            state_dim: 16,
            num_heads: 6,
            text_vocab: 64,
            residual_output: true,
            tied_scan: false,
            attention_roles: AttentionRoles::TextQuery,
        }
    }
}

impl ModelConfig {
    /// A small configuration that trains on a CPU in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            feature_channels: 16,
            num_groups: 2,
            blocks_per_group: 1,
            state_dim: 4,
            num_heads: 2,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_channels", self.feature_channels),
            ("num_groups", self.num_groups),
            ("blocks_per_group", self.blocks_per_group),
            ("state_dim", self.state_dim),
            ("num_heads", self.num_heads),
            ("text_vocab", self.text_vocab),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        MmcaConfig::new(self.feature_channels, self.num_heads, self.attention_roles)?;
        Ok(())
    }

    pub fn stack(&self) -> MmSsgConfig {
        MmSsgConfig {
            blocks_per_group: self.blocks_per_group,
            num_groups: self.num_groups,
        }
    }
}

/// Where each model component lives in the parameter store.
#[derive(Clone, Debug)]
pub struct Layout {
    pub img_conv: Conv,
    pub mask_conv: Conv,
    pub text_embedding: ParamId,
    pub blocks: Vec<MmSsbWeights>,
    pub recon_conv: Conv,
}

fn build<T: Real>(config: &ModelConfig, seed: u64) -> Result<(ParamStore<T>, Layout)> {
    config.validate()?;
    let c = config.feature_channels;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&mut store, &mut rng);
    let img_conv = b.conv("img_conv", 3, 3, c, 1);
    let mask_conv = b.conv("mask_conv", 3, 1, c, 1);
    let text_embedding = b.uniform("text_embedding", &[config.text_vocab, c], 1.0);
    let mmca = MmcaConfig::new(c, config.num_heads, config.attention_roles)?;
    let blocks = (0..config.stack().depth())
        .map(|i| {
            let (g, k) = (i / config.blocks_per_group, i % config.blocks_per_group);
            MmSsbWeights::init(&mut b.scope(&format!("group{g}.block{k}")), mmca, config.state_dim, config.tied_scan)
        })
        .collect();
    let recon_conv = b.zero_conv("recon_conv", 3, c, 3);
    Ok((
        store,
        Layout {
            img_conv,
            mask_conv,
            text_embedding,
            blocks,
            recon_conv,
        },
    ))
}

/// Flattens an `h×w×c` map into `h·w` row-major tokens.
pub fn patch_embed<T: Real>(tape: &Tape<T>, fmap: Var) -> Result<Var> {
    let shape = tape.shape(fmap);
    let &[h, w, c] = shape.as_slice() else {
        return Err(Error::dim("patch_embed", format!("expected h×w×c, got {shape:?}")));
    };
    tape.reshape(fmap, vec![h * w, c])
}

/// Inverse of [`patch_embed`].
pub fn patch_unembed<T: Real>(tape: &Tape<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let shape = tape.shape(tokens);
    if shape.len() != 2 || shape[0] != h * w {
        return Err(Error::dim("patch_unembed", format!("{shape:?} tokens for a {h}×{w} map")));
    }
    tape.reshape(tokens, vec![h, w, shape[1]])
}

/// Shallow features of one sample.
#[derive(Clone, Copy, Debug)]
pub struct Shallow {
    pub image: Var,
    pub mask: Var,
    pub text: Var,
}

#[derive(Clone, Debug)]
pub struct TranslatorModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub layout: Layout,
}

impl<T: Real> TranslatorModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (store, layout) = build(&config, seed)?;
        Ok(TranslatorModel { config, store, layout })
    }

    /// Re-draws every parameter from `seed`.
    pub fn init_weights(mut self, seed: u64) -> Result<Self> {
        let (store, layout) = build(&self.config, seed)?;
        self.store = store;
        self.layout = layout;
        Ok(self)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Image and mask convolutions plus text embedding lookups.
    pub fn extract_shallow(&self, tape: &Tape<T>, p: &Bound, fused: Var, voted_mask: Var, text_ids: &[usize]) -> Result<Shallow> {
        let shape = tape.shape(fused);
        let &[h, w, 3] = shape.as_slice() else {
            return Err(Error::dim("extract_shallow", format!("fused image must be h×w×3, got {shape:?}")));
        };
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Contract(format!("image {h}×{w} is smaller than {MIN_SIDE}×{MIN_SIDE}")));
        }
        if tape.shape(voted_mask) != [h, w, 1] {
            return Err(Error::dim(
                "extract_shallow",
                format!("mask {:?} for a {h}×{w} image", tape.shape(voted_mask)),
            ));
        }
        if text_ids.is_empty() || text_ids.len() > MAX_TEXT_TOKENS {
            return Err(Error::Contract(format!(
                "text must have 1 to {MAX_TEXT_TOKENS} tokens, got {}",
                text_ids.len()
            )));
        }
        Ok(Shallow {
            image: self.layout.img_conv.forward(tape, p, fused)?,
            mask: self.layout.mask_conv.forward(tape, p, voted_mask)?,
            text: tape.embedding(p[self.layout.text_embedding], text_ids)?,
        })
    }

    /// Full differentiable pass; the result is not clamped.
    pub fn forward(&self, tape: &Tape<T>, p: &Bound, fused: Var, voted_mask: Var, text_ids: &[usize]) -> Result<Var> {
        let f = self.extract_shallow(tape, p, fused, voted_mask, text_ids)?;
        let shape = tape.shape(fused);
        let (h, w) = (shape[0], shape[1]);
        let target = tape.reshape(voted_mask, vec![h, w])?;
        let tokens = patch_embed(tape, f.image)?;
        let fmap = patch_unembed(tape, tokens, h, w)?;
        let deep = mm_ssg_stack(tape, p, self.config.stack(), &self.layout.blocks, fmap, f.mask, f.text, target)?;
        let image = self.layout.recon_conv.forward(tape, p, deep)?;
        if self.config.residual_output {
            tape.add(fused, image)
        } else {
            Ok(image)
        }
    }

    /// Inference: `voted_mask` may be `h×w` or `h×w×1`; output clamped to `[0, 1]`.
    pub fn translate(&self, fused: &Tensor<T>, voted_mask: &Tensor<T>, text_ids: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let mask = match voted_mask.shape() {
            &[h, w] => voted_mask.reshape(vec![h, w, 1])?,
            _ => voted_mask.clone(),
        };
        let x = tape.constant(fused.clone());
        let m = tape.constant(mask);
        let y = self.forward(&tape, &p, x, m, text_ids)?;
        Ok(tape.value(y).map(|v| v.max(T::zero()).min(T::one())))
    }

    pub fn header(&self) -> serde_json::Value {
        serde_json::json!({ "config": self.config, "precision": T::PRECISION.tag() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_file(path, MODEL_TAG, &self.header(), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, records) = checkpoint::load_file::<T>(path, MODEL_TAG)?;
        let config: ModelConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut model = TranslatorModel::new(config, 0)?;
        model.store.load_records(records)?;
        Ok(model)
    }
}
