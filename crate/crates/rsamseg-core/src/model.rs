//! Full segmentation model: patch-embedding ViT encoder with bottleneck
//! adapters, a frequency-prompt generator, and a two-way transformer mask
//! decoder, plus checkpointing and backbone import.
//!
//! The prompt generator turns two token grids — the scaled patch embedding
//! and the projected high-frequency component of the input — into one
//! additive prompt per encoder block: a per-layer tuning projection, GELU,
//! and a single up projection shared across layers. Each branch and the
//! adapters can be switched off independently; a disabled part contributes
//! no parameters at all, so group counts reflect the active configuration.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, NUM_TOKENS};
use crate::error::{Error, Result};
use crate::freq;
use crate::nn::{Fwd, Init, Linear, ParamGroup, ParamStore};
use crate::tensor::{Scalar, Tape, Var};
use crate::vit::{patchify, Encoder, ViTConfig};

/// Prompt-generator dimensions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PromptConfig {
    /// Width of the bottleneck space both frequency branches are projected
    /// into before the shared up projection back to the token width.
    pub tune_dim: usize,
    /// Multiplier on the patch-embedding branch before the two branches are
    /// summed.
    pub fpe_scale: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            tune_dim: 4,
            fpe_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub prompt: PromptConfig,
    pub decoder: DecoderConfig,
    /// Feed the patch-embedding branch into the prompt generator.
    pub use_fpe: bool,
    /// Feed the high-frequency branch into the prompt generator.
    pub use_fhfc: bool,
    /// Insert bottleneck adapters into the encoder blocks.
    pub use_adapter_scale: bool,
    /// High-frequency cutoff in `[0, 1]`; larger keeps less of the spectrum.
    pub tau: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vit: ViTConfig::default(),
            prompt: PromptConfig::default(),
            decoder: DecoderConfig::default(),
            use_fpe: true,
            use_fhfc: true,
            use_adapter_scale: true,
            tau: 0.25,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.decoder.validate()?;
        if self.decoder.transformer_dim != self.vit.neck_dim {
            return Err(Error::config(format!(
                "decoder expects {}-channel embeddings but the encoder neck emits {}",
                self.decoder.transformer_dim, self.vit.neck_dim
            )));
        }
        if (self.use_fpe || self.use_fhfc) && self.prompt.tune_dim == 0 {
            return Err(Error::config(
                "prompt tune_dim must be positive when a prompt branch is enabled".to_string(),
            ));
        }
        if !self.prompt.fpe_scale.is_finite() {
            return Err(Error::config(format!(
                "fpe_scale must be finite, got {}",
                self.prompt.fpe_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Frequency-prompt generator. Branch projections exist only for enabled
/// branches; the tuning stack is per encoder block and the up projection is
/// shared. The up projection starts at zero so a fresh model emits zero
/// prompts.
struct PromptGenerator {
    fpe_tune: Option<Linear>,
    hfc_embed: Option<Linear>,
    tune: Vec<Linear>,
    up: Linear,
}

impl PromptGenerator {
    fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha12Rng,
        cfg: &ModelConfig,
    ) -> Result<Option<PromptGenerator>> {
        if !cfg.use_fpe && !cfg.use_fhfc {
            return Ok(None);
        }
        let g = ParamGroup::AdapterFeature;
        let d = cfg.vit.embed_dim;
        let t = cfg.prompt.tune_dim;
        let fpe_tune = if cfg.use_fpe {
            Some(Linear::init(
                store,
                rng,
                g,
                "prompt.fpe_tune",
                d,
                t,
                Init::Xavier,
            )?)
        } else {
            None
        };
        let hfc_embed = if cfg.use_fhfc {
            let patch_in = cfg.vit.in_channels * cfg.vit.patch_size * cfg.vit.patch_size;
            Some(Linear::init(
                store,
                rng,
                g,
                "prompt.hfc_embed",
                patch_in,
                t,
                Init::Xavier,
            )?)
        } else {
            None
        };
        let tune = (0..cfg.vit.depth)
            .map(|i| {
                Linear::init(
                    store,
                    rng,
                    g,
                    &format!("prompt.tune{i}"),
                    t,
                    t,
                    Init::Xavier,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let up = Linear::init(store, rng, g, "prompt.up", t, d, Init::Zeros)?;
        Ok(Some(PromptGenerator {
            fpe_tune,
            hfc_embed,
            tune,
            up,
        }))
    }
}

/// One named parameter as seen by the freeze policy.
#[derive(Debug, Clone, Serialize)]
pub struct RegistryEntry {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    pub elements: usize,
}

/// Snapshot of every parameter with its group, size, and trainability.
#[derive(Debug, Clone, Serialize)]
pub struct ParameterRegistry {
    pub entries: Vec<RegistryEntry>,
}

impl ParameterRegistry {
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.elements).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.elements)
            .sum()
    }

    pub fn group_elements(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.elements)
            .sum()
    }
}

pub struct Model<S: Scalar> {
    cfg: ModelConfig,
    pub store: ParamStore<S>,
    encoder: Encoder,
    decoder: Decoder,
    prompt: Option<PromptGenerator>,
}

impl<S: Scalar> std::fmt::Debug for Model<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.cfg)
            .field("parameters", &self.store.count_total())
            .finish()
    }
}

impl<S: Scalar> Model<S> {
    /// Create a model with freshly initialized parameters. Construction is
    /// fully determined by the config (including its seed). The backbone
    /// starts frozen; see [`Model::freeze_policy`].
    pub fn build(cfg: ModelConfig) -> Result<Model<S>> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let encoder = Encoder::init(&mut store, &mut rng, &cfg.vit, cfg.use_adapter_scale)?;
        let prompt = PromptGenerator::init(&mut store, &mut rng, &cfg)?;
        let decoder = Decoder::init(&mut store, &mut rng, &cfg.decoder, cfg.vit.num_tokens())?;
        let mut model = Model {
            cfg,
            store,
            encoder,
            decoder,
            prompt,
        };
        model.freeze_policy(false);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Set which parameters train: the backbone only if `train_backbone`,
    /// everything else always. Returns the resulting registry snapshot.
    pub fn freeze_policy(&mut self, train_backbone: bool) -> ParameterRegistry {
        self.store
            .set_trainable_by_group(ParamGroup::Backbone, train_backbone);
        self.store
            .set_trainable_by_group(ParamGroup::AdapterScale, true);
        self.store
            .set_trainable_by_group(ParamGroup::AdapterFeature, true);
        self.store
            .set_trainable_by_group(ParamGroup::Decoder, true);
        self.registry()
    }

    pub fn registry(&self) -> ParameterRegistry {
        ParameterRegistry {
            entries: self
                .store
                .iter()
                .map(|(name, p)| RegistryEntry {
                    name: name.clone(),
                    group: p.group,
                    trainable: p.trainable,
                    elements: p.value.len(),
                })
                .collect(),
        }
    }

    fn check_images(&self, images: &ArrayD<S>) -> Result<()> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "expected [B, C, H, W] images, got {shape:?}"
            )));
        }
        let size = self.cfg.vit.image_size;
        if shape[1] != self.cfg.vit.in_channels || shape[2] != size || shape[3] != size {
            return Err(Error::shape(format!(
                "model takes [B, {}, {size}, {size}] images, got {shape:?}",
                self.cfg.vit.in_channels
            )));
        }
        Ok(())
    }

    /// High-frequency component of each image in the batch, computed in f64
    /// and cast back to the working precision.
    fn batch_hfc(&self, images: &ArrayD<S>) -> Result<ArrayD<S>> {
        let shape = images.shape();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut out = ArrayD::<S>::zeros(IxDyn(&[b, c, h, w]));
        for bi in 0..b {
            let one = Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
                images[[bi, ci, y, x]].to_f64()
            });
            let hfc = freq::extract_hfc(&one, self.cfg.tau)?;
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[[bi, ci, y, x]] = S::from_f64(hfc[[ci, y, x]]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// One additive prompt grid per encoder block, or an empty list when
    /// both branches are disabled.
    fn build_prompts(&self, f: &Fwd<'_, S>, img: Var, images: &ArrayD<S>) -> Result<Vec<Var>> {
        let Some(pg) = &self.prompt else {
            return Ok(Vec::new());
        };
        let t = f.tape;
        let mut pre: Option<Var> = None;
        if let Some(fpe_tune) = &pg.fpe_tune {
            let raw = self.encoder.patch_tokens(f, img)?;
            let tuned = t.scale(
                fpe_tune.forward(f, raw),
                S::from_f64(self.cfg.prompt.fpe_scale),
            );
            pre = Some(tuned);
        }
        if let Some(hfc_embed) = &pg.hfc_embed {
            let hfc = t.leaf(self.batch_hfc(images)?);
            let tokens = patchify(f, hfc, self.cfg.vit.patch_size)?;
            let embedded = hfc_embed.forward(f, tokens);
            pre = Some(match pre {
                Some(p) => t.add(p, embedded),
                None => embedded,
            });
        }
        let pre = pre.expect("prompt generator exists only when a branch is enabled");
        let mut prompts = Vec::with_capacity(pg.tune.len());
        for tune in &pg.tune {
            let bottleneck = t.gelu(tune.forward(f, pre));
            prompts.push(pg.up.forward(f, bottleneck));
        }
        Ok(prompts)
    }

    /// Run the model on a batch, recording onto `tape`. Returns the forward
    /// context (for gradient extraction) and the mask logits `[B, 1, H, W]`.
    pub fn forward<'t>(
        &'t self,
        tape: &'t Tape<S>,
        images: &ArrayD<S>,
    ) -> Result<(Fwd<'t, S>, Var)> {
        self.check_images(images)?;
        let f = Fwd::new(tape, &self.store);
        let img = tape.leaf(images.clone());
        let prompts = self.build_prompts(&f, img, images)?;
        let encoded = self.encoder.encode(&f, img, &prompts)?;
        let shape = images.shape();
        let logits = self
            .decoder
            .decode(&f, encoded.spatial, (shape[2], shape[3]))?;
        Ok((f, logits))
    }

    /// Forward pass returning plain logit values.
    pub fn predict_logits(&self, images: &ArrayD<S>) -> Result<ArrayD<S>> {
        let tape = Tape::new();
        let (_f, logits) = self.forward(&tape, images)?;
        Ok(tape.value(logits))
    }

    /// Evaluated prompt grids for a batch, one `[B, N, D]` array per encoder
    /// block; empty when both prompt branches are disabled.
    pub fn prompt_grids(&self, images: &ArrayD<S>) -> Result<Vec<ArrayD<S>>> {
        self.check_images(images)?;
        let tape = Tape::new();
        let f = Fwd::new(&tape, &self.store);
        let img = tape.leaf(images.clone());
        let prompts = self.build_prompts(&f, img, images)?;
        Ok(prompts.into_iter().map(|p| tape.value(p)).collect())
    }

    /// Snapshot the parameters into an archive value.
    pub fn archive(&self, meta: CheckpointMeta) -> Archive<S> {
        Archive {
            config: self.cfg.clone(),
            meta,
            tensors: self
                .store
                .iter()
                .map(|(name, p)| (name.clone(), (p.group, p.value.clone())))
                .collect(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path, meta: CheckpointMeta) -> Result<()> {
        self.archive(meta).save(path)
    }

    /// Rebuild a model from a checkpoint. The archived config drives
    /// construction, then every tensor is restored bit-for-bit. A tensor on
    /// either side without a partner is an error naming it.
    pub fn load_checkpoint(path: &Path) -> Result<(Model<S>, CheckpointMeta)> {
        let archive = Archive::<S>::load(path)?;
        let mut model = Model::build(archive.config.clone())?;
        for (name, (group, value)) in &archive.tensors {
            if !model.store.contains(name) {
                return Err(Error::checkpoint(format!(
                    "archive tensor `{name}` has no counterpart in the model"
                )));
            }
            let param = model.store.get_mut(name);
            if param.value.shape() != value.shape() {
                return Err(Error::checkpoint(format!(
                    "tensor `{name}` has shape {:?} in the archive but {:?} in the model",
                    value.shape(),
                    param.value.shape()
                )));
            }
            if param.group != *group {
                return Err(Error::checkpoint(format!(
                    "tensor `{name}` belongs to group {} in the archive but {} in the model",
                    group.as_str(),
                    param.group.as_str()
                )));
            }
            param.value = value.clone();
        }
        if archive.tensors.len() != model.store.len() {
            let missing: Vec<&String> = model
                .store
                .iter()
                .map(|(n, _)| n)
                .filter(|n| !archive.tensors.contains_key(*n))
                .collect();
            return Err(Error::checkpoint(format!(
                "archive is missing model tensors: {missing:?}"
            )));
        }
        Ok((model, archive.meta))
    }

    /// Overwrite backbone tensors from an archive. Identity-named tensors
    /// land only on backbone parameters; `name_map` (archive name → model
    /// name) can redirect or extend that. Reports what matched, which
    /// backbone parameters were left uncovered, and which archive tensors
    /// went unused. A shape conflict aborts with an error.
    pub fn import_backbone(
        &mut self,
        archive: &Archive<S>,
        name_map: &IndexMap<String, String>,
    ) -> Result<ImportReport> {
        let mut matched = Vec::new();
        let mut unmatched = Vec::new();
        for (src, (_, value)) in &archive.tensors {
            let (target, explicit) = match name_map.get(src) {
                Some(t) => (t.clone(), true),
                None => (src.clone(), false),
            };
            let lands = self.store.contains(&target)
                && (explicit || self.store.get(&target).group == ParamGroup::Backbone);
            if !lands {
                unmatched.push(src.clone());
                continue;
            }
            let param = self.store.get_mut(&target);
            if param.value.shape() != value.shape() {
                return Err(Error::checkpoint(format!(
                    "shape conflict importing `{src}` into `{target}`: {:?} vs {:?}",
                    value.shape(),
                    param.value.shape()
                )));
            }
            param.value = value.clone();
            matched.push(target);
        }
        let missing = self
            .store
            .iter()
            .filter(|(name, p)| p.group == ParamGroup::Backbone && !matched.contains(name))
            .map(|(name, _)| name.clone())
            .collect();
        Ok(ImportReport {
            matched,
            missing,
            unmatched,
        })
    }
}

/// Result of [`Model::import_backbone`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImportReport {
    /// Model tensors that were overwritten.
    pub matched: Vec<String>,
    /// Backbone tensors the archive did not cover.
    pub missing: Vec<String>,
    /// Archive tensors that landed nowhere.
    pub unmatched: Vec<String>,
}

/// Bookkeeping stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Optimizer step the snapshot was taken at.
    pub step: u64,
    /// Selection metric of the snapshot, when one was evaluated.
    pub metric: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    config: ModelConfig,
    meta: CheckpointMeta,
    dtype: String,
}

/// On-disk checkpoint. Layout: magic `RSEG`, format version (u32 LE), header
/// length (u32 LE) and a JSON header (config, metadata, dtype), tensor count
/// (u32 LE), then per tensor: name length (u16 LE), UTF-8 name, group byte,
/// rank byte, each dimension as u32 LE, and the elements in logical
/// (row-major) order as little-endian IEEE-754 words.
pub struct Archive<S: Scalar> {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub tensors: IndexMap<String, (ParamGroup, ArrayD<S>)>,
}

const MAGIC: [u8; 4] = *b"RSEG";
const FORMAT_VERSION: u32 = 1;

fn group_byte(group: ParamGroup) -> u8 {
    match group {
        ParamGroup::Backbone => 0,
        ParamGroup::AdapterScale => 1,
        ParamGroup::AdapterFeature => 2,
        ParamGroup::Decoder => 3,
    }
}

fn byte_group(byte: u8) -> Result<ParamGroup> {
    match byte {
        0 => Ok(ParamGroup::Backbone),
        1 => Ok(ParamGroup::AdapterScale),
        2 => Ok(ParamGroup::AdapterFeature),
        3 => Ok(ParamGroup::Decoder),
        other => Err(Error::checkpoint(format!(
            "unknown parameter group tag {other}"
        ))),
    }
}

fn read_bytes<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::checkpoint(format!("truncated archive while reading {what}: {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_bytes(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

impl<S: Scalar> Archive<S> {
    /// Write the archive. The bytes go to a sibling temporary file first and
    /// are renamed into place, so `path` never holds a partial archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp-write");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(&MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            let header = serde_json::to_vec(&ArchiveHeader {
                config: self.config.clone(),
                meta: self.meta.clone(),
                dtype: S::DTYPE_NAME.to_string(),
            })
            .map_err(|e| Error::checkpoint(format!("could not encode header: {e}")))?;
            w.write_all(&(header.len() as u32).to_le_bytes())?;
            w.write_all(&header)?;
            w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
            for (name, (group, value)) in &self.tensors {
                w.write_all(&(name.len() as u16).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&[group_byte(*group), value.ndim() as u8])?;
                for &dim in value.shape() {
                    w.write_all(&(dim as u32).to_le_bytes())?;
                }
                for &v in value.iter() {
                    w.write_all(&v.to_bits_u64().to_le_bytes()[..S::BYTE_WIDTH])?;
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Archive<S>> {
        let file = fs::File::open(path)
            .map_err(|e| Error::checkpoint(format!("cannot open {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        read_bytes(&mut r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(Error::checkpoint("not a checkpoint archive".to_string()));
        }
        let version = read_u32(&mut r, "format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::checkpoint(format!(
                "unsupported archive format version {version}"
            )));
        }
        let header_len = read_u32(&mut r, "header length")? as usize;
        let mut header_bytes = vec![0u8; header_len];
        read_bytes(&mut r, &mut header_bytes, "header")?;
        let header: ArchiveHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::checkpoint(format!("malformed header: {e}")))?;
        if header.dtype != S::DTYPE_NAME {
            return Err(Error::checkpoint(format!(
                "archive holds {} tensors, expected {}",
                header.dtype,
                S::DTYPE_NAME
            )));
        }

        let count = read_u32(&mut r, "tensor count")? as usize;
        let mut tensors = IndexMap::with_capacity(count);
        for _ in 0..count {
            let mut len_buf = [0u8; 2];
            read_bytes(&mut r, &mut len_buf, "tensor name length")?;
            let mut name_buf = vec![0u8; u16::from_le_bytes(len_buf) as usize];
            read_bytes(&mut r, &mut name_buf, "tensor name")?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::checkpoint("tensor name is not UTF-8".to_string()))?;

            let mut tag = [0u8; 2];
            read_bytes(&mut r, &mut tag, "tensor tags")?;
            let group = byte_group(tag[0])?;
            let mut dims = Vec::with_capacity(tag[1] as usize);
            for _ in 0..tag[1] {
                dims.push(read_u32(&mut r, "tensor dimension")? as usize);
            }
            let elements = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| {
                    Error::checkpoint(format!("tensor `{name}` has overflowing shape {dims:?}"))
                })?;

            let mut payload = vec![0u8; elements * S::BYTE_WIDTH];
            read_bytes(&mut r, &mut payload, "tensor payload")?;
            let data: Vec<S> = payload
                .chunks_exact(S::BYTE_WIDTH)
                .map(|chunk| {
                    let mut bits = 0u64;
                    for (i, &byte) in chunk.iter().enumerate() {
                        bits |= (byte as u64) << (8 * i);
                    }
                    S::from_bits_u64(bits)
                })
                .collect();
            let value = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::checkpoint(format!("tensor `{name}`: {e}")))?;
            if tensors.insert(name.clone(), (group, value)).is_some() {
                return Err(Error::checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::checkpoint(
                "trailing bytes after the last tensor".to_string(),
            ));
        }
        Ok(Archive {
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }
}

fn mlp_hidden(dim: usize, ratio: f64) -> usize {
    (dim as f64 * ratio).round() as usize
}

fn linear_elems(din: usize, dout: usize) -> usize {
    din * dout + dout
}

/// Elements in the encoder backbone: patch projection, position table,
/// `depth` transformer blocks, final norm, and the neck projection.
pub fn backbone_param_count(vit: &ViTConfig) -> usize {
    let d = vit.embed_dim;
    let hidden = mlp_hidden(d, vit.mlp_ratio);
    let attn = 4 * linear_elems(d, d);
    let block = 2 * (2 * d) + attn + linear_elems(d, hidden) + linear_elems(hidden, d);
    linear_elems(vit.in_channels * vit.patch_size * vit.patch_size, d)
        + vit.num_tokens() * d
        + vit.depth * block
        + 2 * d
        + linear_elems(d, vit.neck_dim)
}

/// Elements added by the two bottleneck adapters in each encoder block.
pub fn adapter_scale_param_count(vit: &ViTConfig) -> usize {
    let d = vit.embed_dim;
    let b = vit.adapter_bottleneck;
    vit.depth * 2 * (2 * d * b + d + b)
}

/// Elements in the prompt generator under the configured branch flags.
pub fn prompt_param_count(cfg: &ModelConfig) -> usize {
    if !cfg.use_fpe && !cfg.use_fhfc {
        return 0;
    }
    let d = cfg.vit.embed_dim;
    let t = cfg.prompt.tune_dim;
    let mut n = cfg.vit.depth * linear_elems(t, t) + linear_elems(t, d);
    if cfg.use_fpe {
        n += linear_elems(d, t);
    }
    if cfg.use_fhfc {
        n += linear_elems(
            cfg.vit.in_channels * cfg.vit.patch_size * cfg.vit.patch_size,
            t,
        );
    }
    n
}

/// Elements in the mask decoder for an embedding grid of
/// `num_image_tokens` positions.
pub fn decoder_param_count(dec: &DecoderConfig, num_image_tokens: usize) -> usize {
    let c = dec.transformer_dim;
    let hidden = mlp_hidden(c, dec.mlp_ratio);
    let attn = 4 * linear_elems(c, c);
    let block = 3 * attn + 4 * (2 * c) + linear_elems(c, hidden) + linear_elems(hidden, c);
    let mut n = NUM_TOKENS * c + num_image_tokens * c + dec.depth * block + attn + 2 * c;
    let channels = dec.upscale_channels();
    let mut cin = c;
    for (i, &cout) in channels.iter().enumerate() {
        n += cin * cout * 4 + cout;
        if i == 0 {
            n += 2 * cout;
        }
        cin = cout;
    }
    let c_up = *channels.last().unwrap();
    n += linear_elems(c, c) + linear_elems(c, c) + linear_elems(c, c_up);
    n + 1
}

/// Total element count for a configuration, summing the active groups.
pub fn total_param_count(cfg: &ModelConfig) -> usize {
    let adapters = if cfg.use_adapter_scale {
        adapter_scale_param_count(&cfg.vit)
    } else {
        0
    };
    backbone_param_count(&cfg.vit)
        + adapters
        + prompt_param_count(cfg)
        + decoder_param_count(&cfg.decoder, cfg.vit.num_tokens())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Ix1, Ix2};
    use rand::Rng;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            vit: ViTConfig {
                in_channels: 3,
                image_size: 32,
                patch_size: 8,
                depth: 2,
                embed_dim: 32,
                heads: 4,
                mlp_ratio: 2.0,
                neck_dim: 16,
                adapter_bottleneck: 4,
                adapter_scale: 0.5,
            },
            prompt: PromptConfig {
                tune_dim: 4,
                fpe_scale: 1.0,
            },
            decoder: DecoderConfig {
                transformer_dim: 16,
                depth: 2,
                heads: 4,
                mlp_ratio: 2.0,
                upscale_stages: 2,
            },
            use_fpe: true,
            use_fhfc: true,
            use_adapter_scale: true,
            tau: 0.25,
            seed,
        }
    }

    fn rand_images<S: Scalar>(b: usize, cfg: &ModelConfig, seed: u64) -> ArrayD<S> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let size = cfg.vit.image_size;
        ArrayD::from_shape_fn(
            IxDyn(&[b, cfg.vit.in_channels, size, size]),
            |_| S::from_f64(rng.gen_range(-1.0..1.0)),
        )
    }

    fn bits_of<S: Scalar>(model: &Model<S>) -> Vec<(String, Vec<u64>)> {
        model
            .store
            .iter()
            .map(|(n, p)| (n.clone(), p.value.iter().map(|v| v.to_bits_u64()).collect()))
            .collect()
    }

    #[test]
    fn parameter_counts_match_closed_forms() {
        let cfg = small_config(3);
        let model = Model::<f32>::build(cfg.clone()).unwrap();
        assert_eq!(
            model.store.count_group(ParamGroup::Backbone),
            backbone_param_count(&cfg.vit)
        );
        assert_eq!(
            model.store.count_group(ParamGroup::AdapterScale),
            adapter_scale_param_count(&cfg.vit)
        );
        assert_eq!(
            model.store.count_group(ParamGroup::AdapterFeature),
            prompt_param_count(&cfg)
        );
        assert_eq!(
            model.store.count_group(ParamGroup::Decoder),
            decoder_param_count(&cfg.decoder, cfg.vit.num_tokens())
        );
        assert_eq!(model.store.count_total(), total_param_count(&cfg));
    }

    #[test]
    fn every_flag_combination_builds_with_expected_counts() {
        for bits in 0..8u32 {
            let mut cfg = small_config(5);
            cfg.use_fpe = bits & 1 != 0;
            cfg.use_fhfc = bits & 2 != 0;
            cfg.use_adapter_scale = bits & 4 != 0;
            let model = Model::<f32>::build(cfg.clone()).unwrap();
            assert_eq!(
                model.store.count_total(),
                total_param_count(&cfg),
                "flags fpe={} fhfc={} adapters={}",
                cfg.use_fpe,
                cfg.use_fhfc,
                cfg.use_adapter_scale
            );
            if !cfg.use_adapter_scale {
                assert_eq!(model.store.count_group(ParamGroup::AdapterScale), 0);
            }
            if !cfg.use_fpe && !cfg.use_fhfc {
                assert_eq!(model.store.count_group(ParamGroup::AdapterFeature), 0);
            }
            for flag in 0..3 {
                if bits & (1 << flag) == 0 {
                    let mut on = cfg.clone();
                    match flag {
                        0 => on.use_fpe = true,
                        1 => on.use_fhfc = true,
                        _ => on.use_adapter_scale = true,
                    }
                    assert!(total_param_count(&on) > total_param_count(&cfg));
                }
            }
        }
    }

    #[test]
    fn logits_shape_and_build_determinism() {
        let cfg = small_config(7);
        let model = Model::<f32>::build(cfg.clone()).unwrap();
        let images = rand_images::<f32>(2, &cfg, 11);
        let logits = model.predict_logits(&images).unwrap();
        assert_eq!(logits.shape(), &[2, 1, 32, 32]);
        assert!(logits.iter().all(|v| v.is_finite()));

        let again = Model::<f32>::build(cfg.clone()).unwrap();
        assert_eq!(bits_of(&model), bits_of(&again));
        assert_eq!(
            logits
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            again
                .predict_logits(&images)
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );

        let mut other_cfg = cfg.clone();
        other_cfg.seed = 8;
        let other = Model::<f32>::build(other_cfg).unwrap();
        assert_ne!(bits_of(&model), bits_of(&other));
    }

    #[test]
    fn backbone_is_frozen_by_default_and_policy_flips_it() {
        let mut model = Model::<f32>::build(small_config(2)).unwrap();
        let registry = model.registry();
        for entry in &registry.entries {
            assert_eq!(
                entry.trainable,
                entry.group != ParamGroup::Backbone,
                "{} has unexpected trainability",
                entry.name
            );
        }
        assert_eq!(
            registry.trainable_elements(),
            registry.total_elements() - registry.group_elements(ParamGroup::Backbone)
        );

        let all_on = model.freeze_policy(true);
        assert_eq!(all_on.trainable_elements(), all_on.total_elements());
        let back_off = model.freeze_policy(false);
        assert!(back_off
            .entries
            .iter()
            .filter(|e| e.group == ParamGroup::Backbone)
            .all(|e| !e.trainable));
    }

    /// With zero-initialized adapter up projections and a zero-initialized
    /// prompt up projection, a freshly built full model must produce exactly
    /// the output of a twin with all three features disabled, once the twin
    /// shares the backbone and decoder weights.
    #[test]
    fn fresh_model_matches_prompt_and_adapter_free_twin() {
        let cfg = small_config(13);
        let full = Model::<f32>::build(cfg.clone()).unwrap();

        let mut plain_cfg = cfg.clone();
        plain_cfg.use_fpe = false;
        plain_cfg.use_fhfc = false;
        plain_cfg.use_adapter_scale = false;
        let mut plain = Model::<f32>::build(plain_cfg).unwrap();
        let names: Vec<String> = plain.store.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            plain.store.get_mut(&name).value = full.store.get(&name).value.clone();
        }

        let images = rand_images::<f32>(2, &cfg, 17);
        let a = full.predict_logits(&images).unwrap();
        let b = plain.predict_logits(&images).unwrap();
        let diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff <= 1e-6, "outputs diverge by {diff}");
    }

    /// A constant image has no high-frequency content, so with the
    /// patch-embedding branch disabled the prompts vanish and the model
    /// behaves exactly like its prompt-free twin — while a textured image
    /// drives the prompts away from zero.
    #[test]
    fn constant_image_produces_no_high_frequency_prompt() {
        let mut cfg = small_config(19);
        cfg.use_fpe = false;
        cfg.use_adapter_scale = false;
        let mut model = Model::<f32>::build(cfg.clone()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for name in [
            "prompt.hfc_embed.weight",
            "prompt.tune0.weight",
            "prompt.tune1.weight",
            "prompt.up.weight",
        ] {
            let param = model.store.get_mut(name);
            param.value = param.value.mapv(|_| rng.gen_range(-0.5..0.5f32));
        }

        let mut plain_cfg = cfg.clone();
        plain_cfg.use_fhfc = false;
        let mut plain = Model::<f32>::build(plain_cfg).unwrap();
        let names: Vec<String> = plain.store.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            plain.store.get_mut(&name).value = model.store.get(&name).value.clone();
        }

        let size = cfg.vit.image_size;
        let flat = ArrayD::from_elem(IxDyn(&[1, 3, size, size]), 0.37f32);
        let grids = model.prompt_grids(&flat).unwrap();
        assert_eq!(grids.len(), 2);
        for grid in &grids {
            assert!(grid.iter().all(|v| v.abs() <= 1e-6));
        }
        let a = model.predict_logits(&flat).unwrap();
        let b = plain.predict_logits(&flat).unwrap();
        let same = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(same <= 1e-6);

        let textured = rand_images::<f32>(1, &cfg, 29);
        let grids = model.prompt_grids(&textured).unwrap();
        assert!(grids[0].iter().any(|v| v.abs() > 1e-6));
        let at = model.predict_logits(&textured).unwrap();
        let bt = plain.predict_logits(&textured).unwrap();
        let apart = at
            .iter()
            .zip(bt.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        let scale = at.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-12);
        assert!(
            apart > 1e-3 * scale,
            "prompts had no effect on a textured image ({apart} vs output scale {scale})"
        );
    }

    /// The taped prompt path must agree with the standalone pipeline built
    /// from the same stored weights.
    #[test]
    fn prompt_grids_match_standalone_pipeline() {
        let cfg = small_config(31);
        let mut model = Model::<f64>::build(cfg.clone()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let names: Vec<String> = model
            .store
            .iter()
            .filter(|(n, _)| n.starts_with("prompt."))
            .map(|(n, _)| n.clone())
            .collect();
        for name in names {
            let param = model.store.get_mut(&name);
            param.value = param.value.mapv(|_| rng.gen_range(-0.2..0.2));
        }

        let images = rand_images::<f64>(1, &cfg, 41);
        let grids = model.prompt_grids(&images).unwrap();

        let w2 = |name: &str| {
            model
                .store
                .get(name)
                .value
                .clone()
                .into_dimensionality::<Ix2>()
                .unwrap()
        };
        let w1 = |name: &str| {
            model
                .store
                .get(name)
                .value
                .clone()
                .into_dimensionality::<Ix1>()
                .unwrap()
        };
        let size = cfg.vit.image_size;
        let one = Array3::from_shape_fn((3, size, size), |(c, y, x)| images[[0, c, y, x]]);

        let raw = freq::embed_hfc(
            &one,
            &w2("encoder.patch_embed.weight"),
            &w1("encoder.patch_embed.bias"),
            cfg.vit.patch_size,
        )
        .unwrap();
        let fpe = freq::tune_embedding(
            &raw,
            &w2("prompt.fpe_tune.weight"),
            &w1("prompt.fpe_tune.bias"),
            cfg.prompt.fpe_scale,
        )
        .unwrap();
        let hfc = freq::extract_hfc(&one, cfg.tau).unwrap();
        let fhfc = freq::embed_hfc(
            &hfc,
            &w2("prompt.hfc_embed.weight"),
            &w1("prompt.hfc_embed.bias"),
            cfg.vit.patch_size,
        )
        .unwrap();
        let tune_weights: Vec<Array2<f64>> =
            (0..2).map(|i| w2(&format!("prompt.tune{i}.weight"))).collect();
        let tune_biases: Vec<Array1<f64>> =
            (0..2).map(|i| w1(&format!("prompt.tune{i}.bias"))).collect();
        for (layer, grid) in grids.iter().enumerate() {
            let expected = freq::generate_prompt(
                &fpe,
                &fhfc,
                layer,
                &tune_weights,
                &tune_biases,
                &w2("prompt.up.weight"),
                &w1("prompt.up.bias"),
            )
            .unwrap();
            let diff = grid
                .iter()
                .zip(expected.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(diff <= 1e-9, "layer {layer} prompts diverge by {diff}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = small_config(43);
        let model = Model::<f32>::build(cfg.clone()).unwrap();
        let meta = CheckpointMeta {
            step: 120,
            metric: Some(0.875),
        };
        model.save_checkpoint(&path, meta.clone()).unwrap();

        let (restored, read_meta) = Model::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(read_meta, meta);
        assert_eq!(restored.config(), &cfg);
        assert_eq!(bits_of(&model), bits_of(&restored));

        let images = rand_images::<f32>(1, &cfg, 47);
        assert_eq!(
            model
                .predict_logits(&images)
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            restored
                .predict_logits(&images)
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::<f32>::build(small_config(53)).unwrap();
        model
            .save_checkpoint(&path, CheckpointMeta { step: 0, metric: None })
            .unwrap();
        let bytes = fs::read(&path).unwrap();
        let cut_path = dir.path().join("cut.ckpt");
        for cut in [3, bytes.len() / 3, bytes.len() - 5] {
            fs::write(&cut_path, &bytes[..cut]).unwrap();
            let err = Model::<f32>::load_checkpoint(&cut_path).unwrap_err();
            assert!(
                matches!(err, Error::Checkpoint(_)),
                "cut at {cut} gave {err}"
            );
        }
    }

    #[test]
    fn checkpoint_with_renamed_tensor_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::<f32>::build(small_config(59)).unwrap();
        model
            .save_checkpoint(&path, CheckpointMeta { step: 0, metric: None })
            .unwrap();

        let mut archive = Archive::<f32>::load(&path).unwrap();
        let entry = archive.tensors.shift_remove("decoder.output_bias").unwrap();
        archive
            .tensors
            .insert("decoder.output_bias_v2".to_string(), entry);
        archive.save(&path).unwrap();

        let err = Model::<f32>::load_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("decoder.output_bias"),
            "error does not name the tensor: {msg}"
        );
    }

    #[test]
    fn wrong_precision_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::<f32>::build(small_config(61)).unwrap();
        model
            .save_checkpoint(&path, CheckpointMeta { step: 0, metric: None })
            .unwrap();
        let err = Model::<f64>::load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("f32"));
    }

    #[test]
    fn import_backbone_reports_and_overwrites() {
        let source = Model::<f32>::build(small_config(67)).unwrap();
        let mut target = Model::<f32>::build(small_config(71)).unwrap();
        let before_decoder = target.store.get("decoder.tokens").value.clone();

        let archive = source.archive(CheckpointMeta { step: 9, metric: None });
        let report = target.import_backbone(&archive, &IndexMap::new()).unwrap();

        let backbone_names: Vec<String> = source
            .store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Backbone)
            .map(|(n, _)| n.clone())
            .collect();
        assert_eq!(report.matched, backbone_names);
        assert!(report.missing.is_empty());
        assert_eq!(
            report.unmatched.len(),
            source.store.len() - backbone_names.len()
        );
        for name in &backbone_names {
            assert_eq!(
                target.store.get(name).value,
                source.store.get(name).value,
                "{name} was not imported"
            );
        }
        assert_eq!(target.store.get("decoder.tokens").value, before_decoder);

        let mut partial = source.archive(CheckpointMeta { step: 9, metric: None });
        partial.tensors.shift_remove("encoder.pos_embed");
        let report = target.import_backbone(&partial, &IndexMap::new()).unwrap();
        assert_eq!(report.missing, vec!["encoder.pos_embed".to_string()]);
    }

    #[test]
    fn import_backbone_rejects_shape_conflicts_and_honors_mapping() {
        let mut small_patch = small_config(73);
        small_patch.vit.patch_size = 4;
        let source = Model::<f32>::build(small_patch).unwrap();
        let mut target = Model::<f32>::build(small_config(79)).unwrap();
        let archive = source.archive(CheckpointMeta { step: 0, metric: None });
        let err = target.import_backbone(&archive, &IndexMap::new()).unwrap_err();
        assert!(err.to_string().contains("shape conflict"));

        let donor = Model::<f32>::build(small_config(83)).unwrap();
        let archive = donor.archive(CheckpointMeta { step: 0, metric: None });
        let mut map = IndexMap::new();
        map.insert("decoder.tokens".to_string(), "decoder.tokens".to_string());
        let report = target.import_backbone(&archive, &map).unwrap();
        assert!(report.matched.contains(&"decoder.tokens".to_string()));
        assert_eq!(
            target.store.get("decoder.tokens").value,
            donor.store.get("decoder.tokens").value
        );
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let cfg = small_config(89);
        let model = Model::<f32>::build(cfg).unwrap();
        let bad_size = ArrayD::<f32>::zeros(IxDyn(&[1, 3, 16, 16]));
        assert!(matches!(
            model.predict_logits(&bad_size),
            Err(Error::Shape(_))
        ));
        let bad_channels = ArrayD::<f32>::zeros(IxDyn(&[1, 5, 32, 32]));
        assert!(matches!(
            model.predict_logits(&bad_channels),
            Err(Error::Shape(_))
        ));
        let bad_rank = ArrayD::<f32>::zeros(IxDyn(&[3, 32, 32]));
        assert!(matches!(
            model.predict_logits(&bad_rank),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let mut cfg = small_config(97);
        cfg.decoder.transformer_dim = 8;
        assert!(matches!(Model::<f32>::build(cfg), Err(Error::Config(_))));

        let mut cfg = small_config(97);
        cfg.tau = 1.5;
        assert!(matches!(Model::<f32>::build(cfg), Err(Error::Config(_))));

        let mut cfg = small_config(97);
        cfg.prompt.tune_dim = 0;
        assert!(matches!(Model::<f32>::build(cfg), Err(Error::Config(_))));
    }
}
