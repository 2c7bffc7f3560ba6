//! Prompt-free mask decoder.
//!
//! Two learned tokens attend back and forth against the image embedding
//! (two-way attention), the embedding is upscaled with stride-2 transposed
//! convolutions, and the first token is projected by a small hypernetwork
//! whose output weights the upscaled feature map into per-pixel logits.
//! There are no sparse prompt tokens and the dense prompt contribution is
//! identically zero, which keeps the topology of a promptable decoder while
//! requiring no prompts at inference.

use ndarray::ArrayD;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Attention, Fwd, Init, LayerNorm, Linear, Mlp, ParamGroup, ParamStore, WEIGHT_STD,
};
use crate::tensor::{sigmoid, Scalar, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DecoderConfig {
    /// Channel width of the incoming image embedding.
    pub transformer_dim: usize,
    /// Number of two-way attention blocks.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Number of x2 transposed-convolution stages applied to the embedding.
    pub upscale_stages: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            transformer_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            upscale_stages: 2,
        }
    }
}

impl DecoderConfig {
    /// Channel widths after each upscale stage: C/4 first, halving after.
    pub fn upscale_channels(&self) -> Vec<usize> {
        let mut chans = Vec::with_capacity(self.upscale_stages);
        let mut c = self.transformer_dim / 4;
        for stage in 0..self.upscale_stages {
            if stage > 0 {
                c /= 2;
            }
            chans.push(c);
        }
        chans
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.upscale_stages == 0 {
            return Err(Error::config("decoder depth and upscale stages must be >= 1"));
        }
        if self.transformer_dim == 0 || self.transformer_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "decoder width {} is not divisible by {} heads",
                self.transformer_dim, self.heads
            )));
        }
        let divisor = 4 << (self.upscale_stages - 1);
        if self.transformer_dim % divisor != 0 || self.transformer_dim / divisor == 0 {
            return Err(Error::config(format!(
                "decoder width {} cannot sustain {} upscale stages (needs a multiple of {divisor})",
                self.transformer_dim, self.upscale_stages
            )));
        }
        Ok(())
    }
}

/// One two-way block: token self-attention, token-to-image cross attention,
/// token MLP, image-to-token cross attention, each followed by a norm on the
/// updated side.
#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_t2i: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_i2t: Attention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: &DecoderConfig,
        skip_first_pe: bool,
    ) -> Result<TwoWayBlock> {
        let g = ParamGroup::Decoder;
        let d = cfg.transformer_dim;
        let hidden = (d as f64 * cfg.mlp_ratio).round() as usize;
        Ok(TwoWayBlock {
            self_attn: Attention::init(store, rng, g, &format!("{name}.self_attn"), d, cfg.heads)?,
            norm1: LayerNorm::init(store, g, &format!("{name}.norm1"), d)?,
            cross_t2i: Attention::init(store, rng, g, &format!("{name}.cross_t2i"), d, cfg.heads)?,
            norm2: LayerNorm::init(store, g, &format!("{name}.norm2"), d)?,
            mlp: Mlp::init(store, rng, g, &format!("{name}.mlp"), d, hidden)?,
            norm3: LayerNorm::init(store, g, &format!("{name}.norm3"), d)?,
            cross_i2t: Attention::init(store, rng, g, &format!("{name}.cross_i2t"), d, cfg.heads)?,
            norm4: LayerNorm::init(store, g, &format!("{name}.norm4"), d)?,
            skip_first_pe,
        })
    }

    fn forward<S: Scalar>(
        &self,
        f: &Fwd<'_, S>,
        queries: Var,
        keys: Var,
        query_pe: Var,
        key_pe: Var,
    ) -> (Var, Var) {
        let t = f.tape;
        let mut queries = queries;
        let mut keys = keys;

        if self.skip_first_pe {
            queries = t.add(queries, self.self_attn.forward(f, queries));
        } else {
            let q = t.add(queries, query_pe);
            queries = t.add(queries, self.self_attn.forward_qkv(f, q, q, queries));
        }
        queries = self.norm1.forward(f, queries);

        let q = t.add(queries, query_pe);
        let k = t.add(keys, key_pe);
        queries = t.add(queries, self.cross_t2i.forward_qkv(f, q, k, keys));
        queries = self.norm2.forward(f, queries);

        queries = t.add(queries, self.mlp.forward(f, queries));
        queries = self.norm3.forward(f, queries);

        let q = t.add(queries, query_pe);
        let k = t.add(keys, key_pe);
        keys = t.add(keys, self.cross_i2t.forward_qkv(f, k, q, queries));
        keys = self.norm4.forward(f, keys);

        (queries, keys)
    }
}

pub struct Decoder {
    pub cfg: DecoderConfig,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    norm_final: LayerNorm,
    hyper: Vec<Linear>,
    /// Channel widths produced by each deconv stage.
    up_channels: Vec<usize>,
}

/// Number of learned decoder tokens. Token 0 produces the mask; the second
/// token keeps token self-attention non-degenerate (a lone token attends
/// only to itself, which has zero gradient through the softmax).
pub const NUM_TOKENS: usize = 2;

impl Decoder {
    /// `num_image_tokens` is the flattened size of the incoming embedding
    /// grid and fixes the learned position table.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
        cfg: &DecoderConfig,
        num_image_tokens: usize,
    ) -> Result<Decoder> {
        cfg.validate()?;
        let g = ParamGroup::Decoder;
        let d = cfg.transformer_dim;
        store.insert(
            "decoder.tokens",
            g,
            crate::nn::trunc_normal(&[NUM_TOKENS, d], WEIGHT_STD, rng),
        )?;
        store.insert(
            "decoder.image_pe",
            g,
            crate::nn::trunc_normal(&[num_image_tokens, d], WEIGHT_STD, rng),
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| TwoWayBlock::init(store, rng, &format!("decoder.block{i}"), cfg, i == 0))
            .collect::<Result<Vec<_>>>()?;
        let final_attn = Attention::init(store, rng, g, "decoder.final_attn", d, cfg.heads)?;
        let norm_final = LayerNorm::init(store, g, "decoder.norm_final", d)?;

        let up_channels = cfg.upscale_channels();
        let mut cin = d;
        for (i, &cout) in up_channels.iter().enumerate() {
            store.insert(
                &format!("decoder.up{i}.kernel"),
                g,
                crate::nn::init_array(&[cin, cout, 2, 2], Init::Xavier, rng),
            )?;
            store.insert(
                &format!("decoder.up{i}.bias"),
                g,
                ArrayD::zeros(ndarray::IxDyn(&[cout])),
            )?;
            if i == 0 {
                LayerNorm::init(store, g, "decoder.up_norm", cout)?;
            }
            cin = cout;
        }
        let hyper_out = *up_channels.last().unwrap();
        let hyper = vec![
            Linear::init(store, rng, g, "decoder.hyper.fc0", d, d, Init::Xavier)?,
            Linear::init(store, rng, g, "decoder.hyper.fc1", d, d, Init::Xavier)?,
            Linear::init(store, rng, g, "decoder.hyper.fc2", d, hyper_out, Init::Xavier)?,
        ];
        store.insert("decoder.output_bias", g, ArrayD::zeros(ndarray::IxDyn(&[1])))?;
        Ok(Decoder {
            cfg: cfg.clone(),
            blocks,
            final_attn,
            norm_final,
            hyper,
            up_channels,
        })
    }

    /// Channel-wise layer norm over a `[B, C, H, W]` map.
    fn norm2d<S: Scalar>(&self, f: &Fwd<'_, S>, x: Var, name: &str, c: usize) -> Var {
        let t = f.tape;
        let shape = t.shape(x);
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let moved = t.permute(x, &[0, 2, 3, 1]);
        let gamma = f.param(&format!("{name}.gamma"));
        let beta = f.param(&format!("{name}.beta"));
        let normed = t.layer_norm(moved, gamma, beta, S::from_f64(crate::nn::LN_EPS));
        let _ = (b, h, w, c);
        t.permute(normed, &[0, 3, 1, 2])
    }

    /// Decode an image embedding `[B, C, h, w]` into mask logits
    /// `[B, 1, out_h, out_w]`.
    pub fn decode<S: Scalar>(
        &self,
        f: &Fwd<'_, S>,
        spatial: Var,
        out_size: (usize, usize),
    ) -> Result<Var> {
        let t = f.tape;
        let shape = t.shape(spatial);
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "expected [B, C, h, w] embedding, got {shape:?}"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if c != self.cfg.transformer_dim {
            return Err(Error::config(format!(
                "embedding has {c} channels, decoder is configured for {}",
                self.cfg.transformer_dim
            )));
        }
        let n = h * w;
        let pe_tokens = t.shape(f.param("decoder.image_pe"))[0];
        if pe_tokens != n {
            return Err(Error::config(format!(
                "decoder position table covers {pe_tokens} tokens, embedding has {n}"
            )));
        }

        // tokens <-> image two-way attention
        let token_table = f.param("decoder.tokens");
        let queries0 = t.expand0(token_table, b); // [B, T, C]
        let query_pe = queries0;
        let key_pe = t.expand0(f.param("decoder.image_pe"), b); // [B, N, C]
        let keys0 = t.reshape(t.permute(spatial, &[0, 2, 3, 1]), &[b, n, c]);

        let (mut queries, mut keys) = (queries0, keys0);
        for block in &self.blocks {
            let (q2, k2) = block.forward(f, queries, keys, query_pe, key_pe);
            queries = q2;
            keys = k2;
        }
        let q = t.add(queries, query_pe);
        let k = t.add(keys, key_pe);
        queries = t.add(queries, self.final_attn.forward_qkv(f, q, k, keys));
        queries = self.norm_final.forward(f, queries);

        // hypernetwork weights from the mask token
        let mask_token = t.select_axis1(queries, 0); // [B, C]
        let mut hyper_in = mask_token;
        for (i, layer) in self.hyper.iter().enumerate() {
            hyper_in = layer.forward(f, hyper_in);
            if i + 1 < self.hyper.len() {
                hyper_in = t.relu(hyper_in);
            }
        }

        // upscale the attended image embedding
        let mut up = t.permute(t.reshape(keys, &[b, h, w, c]), &[0, 3, 1, 2]);
        for (i, &cout) in self.up_channels.iter().enumerate() {
            let kernel = f.param(&format!("decoder.up{i}.kernel"));
            let bias = f.param(&format!("decoder.up{i}.bias"));
            up = t.deconv2x(up, kernel, bias);
            if i == 0 {
                up = self.norm2d(f, up, "decoder.up_norm", cout);
            }
            up = t.gelu(up);
        }

        // per-pixel logits: dot product of hyper weights with the upscaled map
        let c_up = *self.up_channels.last().unwrap();
        let (uh, uw) = (h << self.up_channels.len(), w << self.up_channels.len());
        let flat = t.reshape(up, &[b, c_up, uh * uw]);
        let weights = t.reshape(hyper_in, &[b, 1, c_up]);
        let logits = t.reshape(t.bmm(weights, flat), &[b, 1, uh, uw]);
        let logits = t.add_scalar(logits, f.param("decoder.output_bias"));
        Ok(t.bilinear_resize(logits, out_size.0, out_size.1))
    }
}

/// Threshold logits into a binary mask: 1 where `sigmoid(logit) > threshold`.
pub fn logits_to_mask<S: Scalar>(logits: &ArrayD<S>, threshold: f64) -> ArrayD<u8> {
    let probs = sigmoid(logits);
    probs.mapv(|p| u8::from(p.to_f64() > threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::trunc_normal;
    use crate::tensor::Tape;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn toy() -> (ParamStore<f64>, Decoder, DecoderConfig) {
        let cfg = DecoderConfig {
            transformer_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            upscale_stages: 2,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let dec = Decoder::init(&mut store, &mut rng, &cfg, 16).unwrap();
        (store, dec, cfg)
    }

    fn rand_embedding(b: usize, c: usize, hw: usize, seed: u64) -> ArrayD<f64> {
        trunc_normal(&[b, c, hw, hw], 1.0, &mut ChaCha12Rng::seed_from_u64(seed))
    }

    #[test]
    fn logits_match_requested_resolution() {
        let (store, dec, _) = toy();
        let emb = rand_embedding(1, 16, 4, 1);
        for out in [64, 37, 16] {
            let tape = Tape::new();
            let f = Fwd::new(&tape, &store);
            let logits = tape.value(dec.decode(&f, tape.leaf(emb.clone()), (out, out)).unwrap());
            assert_eq!(logits.shape(), [1, 1, out, out]);
            assert!(logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_embedding_with_zero_upscale_weights_yields_bias_logits() {
        let (mut store, dec, _) = toy();
        for i in 0..2 {
            store.get_mut(&format!("decoder.up{i}.kernel")).value.fill(0.0);
            store.get_mut(&format!("decoder.up{i}.bias")).value.fill(0.0);
        }
        store.get_mut("decoder.output_bias").value.fill(0.7);
        let emb = ArrayD::zeros(IxDyn(&[1, 16, 4, 4]));
        let tape = Tape::new();
        let f = Fwd::new(&tape, &store);
        let logits = tape.value(dec.decode(&f, tape.leaf(emb), (32, 32)).unwrap());
        assert!(logits.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn decode_is_deterministic() {
        let (store, dec, _) = toy();
        let emb = rand_embedding(2, 16, 4, 3);
        let run = || {
            let tape = Tape::new();
            let f = Fwd::new(&tape, &store);
            tape.value(dec.decode(&f, tape.leaf(emb.clone()), (24, 24)).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decode_rejects_channel_mismatch() {
        let (store, dec, _) = toy();
        let emb = ArrayD::<f64>::zeros(IxDyn(&[1, 8, 4, 4]));
        let tape = Tape::new();
        let f = Fwd::new(&tape, &store);
        assert!(matches!(
            dec.decode(&f, tape.leaf(emb), (16, 16)),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn config_rejects_unsupportable_upscales() {
        let cfg = DecoderConfig {
            transformer_dim: 4,
            upscale_stages: 2,
            heads: 2,
            ..DecoderConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = DecoderConfig {
            transformer_dim: 30,
            heads: 4,
            ..DecoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_decoder_parameter_receives_gradient() {
        let (store, dec, _) = toy();
        let emb = rand_embedding(1, 16, 4, 5);
        let target = ArrayD::from_shape_fn(IxDyn(&[1, 1, 16, 16]), |ix| {
            f64::from(u8::from((4..10).contains(&ix[2]) && (3..12).contains(&ix[3])))
        });
        let tape = Tape::new();
        let f = Fwd::new(&tape, &store);
        let logits = dec.decode(&f, tape.leaf(emb), (16, 16)).unwrap();
        let loss = tape.bce_with_logits(logits, &target);
        let grads = tape.backward(loss);
        for (name, var) in f.touched() {
            let g = grads
                .get(var)
                .unwrap_or_else(|| panic!("{name} missing gradient"));
            let norm: f64 = g.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "{name} has zero gradient");
        }
        // the decoder exposes every one of its parameters to this pass
        let touched: std::collections::HashSet<String> =
            f.touched().into_iter().map(|(n, _)| n).collect();
        for (name, _) in store.iter() {
            assert!(touched.contains(name.as_str()), "{name} never used");
        }
    }

    #[test]
    fn threshold_saturation_and_boundary() {
        let high = ArrayD::from_elem(IxDyn(&[2, 3]), 10.0f64);
        assert!(logits_to_mask(&high, 0.5).iter().all(|&v| v == 1));
        let zero = ArrayD::<f64>::zeros(IxDyn(&[2, 3]));
        assert!(logits_to_mask(&zero, 0.5).iter().all(|&v| v == 0));
    }

    #[test]
    fn threshold_matches_elementwise_oracle_and_is_monotone() {
        let logits = trunc_normal::<f64>(&[4, 4], 2.0, &mut ChaCha12Rng::seed_from_u64(9));
        for threshold in [0.1, 0.5, 0.9] {
            let mask = logits_to_mask(&logits, threshold);
            for (z, m) in logits.iter().zip(mask.iter()) {
                let want = u8::from(1.0 / (1.0 + (-z).exp()) > threshold);
                assert_eq!(*m, want);
            }
        }
        let lo = logits_to_mask(&logits, 0.3);
        let hi = logits_to_mask(&logits, 0.7);
        for (l, h) in lo.iter().zip(hi.iter()) {
            assert!(h <= l, "raising the threshold added a pixel");
        }
    }
}
