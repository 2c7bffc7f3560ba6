//! ViT encoder with bottleneck adapters and per-layer prompt injection.
//!
//! Blocks are pre-norm. Each block may carry two bottleneck adapters: one
//! inserted serially on the attention path (residually, so a zero-initialized
//! adapter leaves the block unchanged) and one as a parallel branch on the
//! MLP residual. Prompts are added to the token grid before each block.

use ndarray::ArrayD;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    AdapterScale, Attention, Fwd, Init, LayerNorm, Linear, Mlp, ParamGroup, ParamStore,
    WEIGHT_STD,
};
use crate::tensor::{Scalar, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ViTConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Channel width of the image embedding handed to the decoder.
    pub neck_dim: usize,
    pub adapter_bottleneck: usize,
    pub adapter_scale: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            in_channels: 3,
            image_size: 64,
            patch_size: 8,
            depth: 2,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 2.0,
            neck_dim: 32,
            adapter_bottleneck: 8,
            adapter_scale: 0.5,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::config("encoder depth must be at least 1"));
        }
        if self.adapter_bottleneck == 0 || self.adapter_bottleneck >= self.embed_dim {
            return Err(Error::config(format!(
                "adapter bottleneck {} must be in [1, {})",
                self.adapter_bottleneck, self.embed_dim
            )));
        }
        if self.in_channels == 0 || self.neck_dim == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        Ok(())
    }

    /// Tokens per side of the patch grid.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_size() * self.grid_size()
    }
}

/// One transformer block, optionally carrying two bottleneck adapters.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub adapters: Option<(AdapterScale, AdapterScale)>,
}

impl Block {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        adapter: Option<(usize, f64)>,
    ) -> Result<Block> {
        let group = ParamGroup::Backbone;
        let ln1 = LayerNorm::init(store, group, &format!("{name}.ln1"), dim)?;
        let attn = Attention::init(store, rng, group, &format!("{name}.attn"), dim, heads)?;
        let ln2 = LayerNorm::init(store, group, &format!("{name}.ln2"), dim)?;
        let mlp = Mlp::init(store, rng, group, &format!("{name}.mlp"), dim, hidden)?;
        let adapters = match adapter {
            Some((bottleneck, scale)) => Some((
                AdapterScale::init(store, rng, &format!("{name}.adapter1"), dim, bottleneck, scale)?,
                AdapterScale::init(store, rng, &format!("{name}.adapter2"), dim, bottleneck, scale)?,
            )),
            None => None,
        };
        Ok(Block {
            ln1,
            attn,
            ln2,
            mlp,
            adapters,
        })
    }

    /// `h = x + prompt`; attention path sees `h + adapter1(h)` (so a zero
    /// adapter reduces to the plain block); the second adapter branches off
    /// the MLP's normalized input and joins its residual sum.
    pub fn forward<S: Scalar>(&self, f: &Fwd<'_, S>, x: Var, prompt: Option<Var>) -> Var {
        let t = f.tape;
        let h0 = match prompt {
            Some(p) => {
                assert_eq!(t.shape(x), t.shape(p), "prompt shape mismatch");
                t.add(x, p)
            }
            None => x,
        };
        let attn_in = match &self.adapters {
            Some((a1, _)) => t.add(h0, a1.forward(f, h0)),
            None => h0,
        };
        let h1 = t.add(h0, self.attn.forward(f, self.ln1.forward(f, attn_in)));
        let normed = self.ln2.forward(f, h1);
        let out = t.add(h1, self.mlp.forward(f, normed));
        match &self.adapters {
            Some((_, a2)) => t.add(out, a2.forward(f, normed)),
            None => out,
        }
    }
}

/// Cuts `[B, C, H, W]` into non-overlapping `patch x patch` tiles and
/// flattens each in (channel, row, column) order: `[B, N, C * patch^2]`,
/// tokens ordered row-major over the tile grid.
pub fn patchify<S: Scalar>(f: &Fwd<'_, S>, image: Var, patch: usize) -> Result<Var> {
    let t = f.tape;
    let shape = t.shape(image);
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "expected [B, C, H, W] input, got {shape:?}"
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let split = t.reshape(image, &[b, c, gh, patch, gw, patch]);
    let grouped = t.permute(split, &[0, 2, 4, 1, 3, 5]); // [B, gh, gw, C, p, p]
    Ok(t.reshape(grouped, &[b, gh * gw, c * patch * patch]))
}

/// Final encoder state: tokens `[B, N, D]` after the last norm, and the
/// necked spatial embedding `[B, neck_dim, H/p, W/p]`.
pub struct EncoderOutput {
    pub tokens: Var,
    pub spatial: Var,
}

pub struct Encoder {
    pub cfg: ViTConfig,
    pub patch: Linear,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub neck: Linear,
}

impl Encoder {
    /// Create all encoder parameters. Adapter parameters are created only
    /// when `with_adapters` is set, so disabling them removes the parameters
    /// entirely rather than zeroing them.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
        cfg: &ViTConfig,
        with_adapters: bool,
    ) -> Result<Encoder> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_in = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        let patch = Linear::init(
            store,
            rng,
            ParamGroup::Backbone,
            "encoder.patch_embed",
            patch_in,
            d,
            Init::Xavier,
        )?;
        store.insert(
            "encoder.pos_embed",
            ParamGroup::Backbone,
            crate::nn::trunc_normal(&[cfg.num_tokens(), d], WEIGHT_STD, rng),
        )?;
        let hidden = (d as f64 * cfg.mlp_ratio).round() as usize;
        let adapter = with_adapters.then_some((cfg.adapter_bottleneck, cfg.adapter_scale));
        let blocks = (0..cfg.depth)
            .map(|i| {
                Block::init(
                    store,
                    rng,
                    &format!("encoder.block{i}"),
                    d,
                    cfg.heads,
                    hidden,
                    adapter,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::init(store, ParamGroup::Backbone, "encoder.norm", d)?;
        let neck = Linear::init(
            store,
            rng,
            ParamGroup::Backbone,
            "encoder.neck",
            d,
            cfg.neck_dim,
            Init::Xavier,
        )?;
        Ok(Encoder {
            cfg: cfg.clone(),
            patch,
            blocks,
            norm,
            neck,
        })
    }

    /// Patch-embedding tokens (before position encoding): `[B, C, H, W] ->
    /// [B, N, D]`, patches flattened in (channel, row, column) order and
    /// tokens ordered row-major over the patch grid.
    pub fn patch_tokens<S: Scalar>(&self, f: &Fwd<'_, S>, image: Var) -> Result<Var> {
        let shape = f.tape.shape(image);
        if shape.len() == 4 && shape[1] != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "expected {} channels, got {}",
                self.cfg.in_channels, shape[1]
            )));
        }
        let flat = patchify(f, image, self.cfg.patch_size)?;
        Ok(self.patch.forward(f, flat))
    }

    /// Full encoding: patch embedding, position encoding, `depth` blocks with
    /// prompt `i` injected before block `i`, final norm, neck projection.
    /// `prompts` must hold one `[B, N, D]` grid per block, or be empty.
    pub fn encode<S: Scalar>(
        &self,
        f: &Fwd<'_, S>,
        image: Var,
        prompts: &[Var],
    ) -> Result<EncoderOutput> {
        if !prompts.is_empty() && prompts.len() != self.blocks.len() {
            return Err(Error::config(format!(
                "got {} prompts for {} encoder blocks",
                prompts.len(),
                self.blocks.len()
            )));
        }
        let t = f.tape;
        let mut tokens = self.patch_tokens(f, image)?;
        let b = t.shape(tokens)[0];
        let n = t.shape(tokens)[1];
        if n != self.cfg.num_tokens() {
            return Err(Error::shape(format!(
                "position table covers {} tokens, image produced {n}",
                self.cfg.num_tokens()
            )));
        }
        tokens = t.add_bcast0(tokens, f.param("encoder.pos_embed"));
        for (i, block) in self.blocks.iter().enumerate() {
            tokens = block.forward(f, tokens, prompts.get(i).copied());
        }
        tokens = self.norm.forward(f, tokens);
        let necked = self.neck.forward(f, tokens);
        let g = self.cfg.grid_size();
        let spatial = t.permute(
            t.reshape(necked, &[b, g, g, self.cfg.neck_dim]),
            &[0, 3, 1, 2],
        );
        Ok(EncoderOutput {
            tokens: necked,
            spatial,
        })
    }
}

/// Convenience wrapper for plain-array inputs.
pub fn image_leaf<S: Scalar>(f: &Fwd<'_, S>, image: &ArrayD<S>) -> Var {
    f.tape.leaf(image.clone())
}
