//! Dataset ingestion: band composition, scene tiling, per-patch
//! normalization, line-delimited manifests, few-shot subsetting, and a
//! synthetic fixture generator for tests and smoke runs.
//!
//! Rasters are read through the `image` crate (8- and 16-bit PNG/TIFF).
//! Pixel values are carried as raw `f64` until [`normalize`] maps each
//! channel to `[0, 1]`. Labels are strictly binary: a mask file may use
//! either the `{0, 1}` or the `{0, 255}` convention, anything else is
//! rejected at load time.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use indexmap::IndexMap;
use ndarray::{s, Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Channel-first raster patch `[C, H, W]` holding raw sample values.
pub type RawImage = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Inria,
    Cloud38,
    Sentinel2Field,
    DeepglobeRoad,
    Synthetic,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Inria => "inria",
            DatasetKind::Cloud38 => "cloud38",
            DatasetKind::Sentinel2Field => "sentinel2-field",
            DatasetKind::DeepglobeRoad => "deepglobe-road",
            DatasetKind::Synthetic => "synthetic",
        }
    }

    /// How this dataset's rasters map onto the three model channels.
    /// Landsat-8 cloud scenes ship one raster per spectral band and are
    /// composed as R,G,B = bands 4,3,2; the other kinds ship plain RGB.
    pub fn band_spec(self) -> BandSpec {
        match self {
            DatasetKind::Cloud38 => BandSpec::Compose {
                bands: vec!["4".to_string(), "3".to_string(), "2".to_string()],
            },
            _ => BandSpec::Rgb {
                band: "rgb".to_string(),
            },
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<DatasetKind> {
        match s {
            "inria" => Ok(DatasetKind::Inria),
            "cloud38" => Ok(DatasetKind::Cloud38),
            "sentinel2-field" => Ok(DatasetKind::Sentinel2Field),
            "deepglobe-road" => Ok(DatasetKind::DeepglobeRoad),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::parameter(format!(
                "unknown dataset kind `{other}` (expected inria, cloud38, \
                 sentinel2-field, deepglobe-road, or synthetic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One source scene: a set of named band rasters plus an optional label
/// raster, all sharing the declared dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    /// Band identifier → raster path. RGB datasets use the single key
    /// `rgb`; band-composed datasets use one key per spectral band.
    pub bands: IndexMap<String, PathBuf>,
    pub label: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
}

/// How to assemble the three model channels from a scene's rasters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum BandSpec {
    /// One three-channel raster used as-is.
    Rgb { band: String },
    /// Single-channel rasters stacked in the listed output-channel order.
    Compose { bands: Vec<String> },
}

/// Where a patch's pixels come from, ordered by output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ImageRef {
    Rgb { path: PathBuf },
    Bands { paths: Vec<PathBuf> },
}

/// One training/evaluation patch: a window into a scene's rasters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub scene_id: String,
    /// Top-left corner as (row, column).
    pub origin: (usize, usize),
    pub size: usize,
    pub image: ImageRef,
    pub label: PathBuf,
}

impl PatchRecord {
    /// Identity of a patch in reports: `scene@row,col`.
    pub fn key(&self) -> String {
        format!("{}@{},{}", self.scene_id, self.origin.0, self.origin.1)
    }

    /// Identity of a patch in file names: `scene_row_col`.
    pub fn file_stem(&self) -> String {
        format!("{}_{}_{}", self.scene_id, self.origin.0, self.origin.1)
    }
}

/// How a manifest was derived (seed and kept fraction of the source set).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub fraction: f64,
}

/// An ordered, non-empty patch list persisted as line-delimited JSON: one
/// header line (kind, split, provenance) followed by one record per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub split: Split,
    pub provenance: Provenance,
    pub records: Vec<PatchRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    kind: DatasetKind,
    split: Split,
    provenance: Provenance,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::data("manifest holds no records".to_string()));
        }
        let mut seen = HashSet::new();
        for record in &self.records {
            if !seen.insert((record.scene_id.clone(), record.origin)) {
                return Err(Error::data(format!(
                    "duplicate patch: scene {} at {:?}",
                    record.scene_id, record.origin
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut text = String::new();
        let header = ManifestHeader {
            kind: self.kind,
            split: self.split,
            provenance: self.provenance,
        };
        text.push_str(&encode_line(&header)?);
        text.push('\n');
        for record in &self.records {
            text.push_str(&encode_line(record)?);
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut lines = text.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::data(format!("manifest {} is empty", path.display())))?;
        let header: ManifestHeader = serde_json::from_str(header_line)
            .map_err(|e| Error::data(format!("malformed manifest header: {e}")))?;
        let records = lines
            .filter(|line| !line.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                serde_json::from_str(line)
                    .map_err(|e| Error::data(format!("malformed manifest record {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<PatchRecord>>>()?;
        let manifest = DatasetManifest {
            kind: header.kind,
            split: header.split,
            provenance: header.provenance,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

fn encode_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::data(format!("cannot encode manifest: {e}")))
}

fn open_raster(path: &Path) -> Result<DynamicImage> {
    image::open(path)
        .map_err(|e| Error::data(format!("cannot read raster {}: {e}", path.display())))
}

/// Read a single-channel raster as raw sample values, `[H, W]`.
fn gray_plane(path: &Path) -> Result<Array2<f64>> {
    match open_raster(path)? {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64
            }))
        }
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64
            }))
        }
        _ => Err(Error::data(format!(
            "{} is not a single-channel raster",
            path.display()
        ))),
    }
}

/// Read a three-channel raster as raw sample values, `[3, H, W]`.
fn rgb_planes(path: &Path) -> Result<Array3<f64>> {
    match open_raster(path)? {
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            Ok(Array3::from_shape_fn(
                (3, h as usize, w as usize),
                |(c, y, x)| buf.get_pixel(x as u32, y as u32).0[c] as f64,
            ))
        }
        DynamicImage::ImageRgb16(buf) => {
            let (w, h) = buf.dimensions();
            Ok(Array3::from_shape_fn(
                (3, h as usize, w as usize),
                |(c, y, x)| buf.get_pixel(x as u32, y as u32).0[c] as f64,
            ))
        }
        _ => Err(Error::data(format!(
            "{} is not a three-channel raster",
            path.display()
        ))),
    }
}

fn band_path<'a>(scene: &'a SceneRecord, band: &str) -> Result<&'a PathBuf> {
    scene.bands.get(band).ok_or_else(|| {
        Error::data(format!("scene {} is missing band {band}", scene.id))
    })
}

/// Assemble a full scene image in model channel order.
pub fn compose_bands(scene: &SceneRecord, spec: &BandSpec) -> Result<RawImage> {
    let image = match spec {
        BandSpec::Rgb { band } => rgb_planes(band_path(scene, band)?)?,
        BandSpec::Compose { bands } => {
            if bands.len() != 3 {
                return Err(Error::config(format!(
                    "band composition must produce 3 channels, got {}",
                    bands.len()
                )));
            }
            let mut out = Array3::zeros((3, scene.height, scene.width));
            for (ci, id) in bands.iter().enumerate() {
                let plane = gray_plane(band_path(scene, id)?)?;
                if plane.dim() != (scene.height, scene.width) {
                    return Err(Error::data(format!(
                        "band {id} of scene {} is {}x{}, expected {}x{}",
                        scene.id,
                        plane.dim().0,
                        plane.dim().1,
                        scene.height,
                        scene.width
                    )));
                }
                out.slice_mut(s![ci, .., ..]).assign(&plane);
            }
            out
        }
    };
    let (_, h, w) = image.dim();
    if (h, w) != (scene.height, scene.width) {
        return Err(Error::data(format!(
            "scene {} declares {}x{} but its raster is {h}x{w}",
            scene.id, scene.height, scene.width
        )));
    }
    Ok(image)
}

/// The per-channel raster paths a patch of this scene should reference.
pub fn image_ref(scene: &SceneRecord, spec: &BandSpec) -> Result<ImageRef> {
    match spec {
        BandSpec::Rgb { band } => Ok(ImageRef::Rgb {
            path: band_path(scene, band)?.clone(),
        }),
        BandSpec::Compose { bands } => {
            if bands.len() != 3 {
                return Err(Error::config(format!(
                    "band composition must produce 3 channels, got {}",
                    bands.len()
                )));
            }
            let paths = bands
                .iter()
                .map(|id| band_path(scene, id).cloned())
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageRef::Bands { paths })
        }
    }
}

/// Edge handling when a scene is cut into fixed-size tiles.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TilePolicy {
    /// The final row/column of tiles is shifted inward so every tile lies
    /// fully inside the scene; edge tiles may overlap their neighbors.
    #[default]
    InwardShift,
}

fn tile_axis(dim: usize, patch: usize) -> Vec<usize> {
    (0..dim.div_ceil(patch))
        .map(|i| (i * patch).min(dim - patch))
        .collect()
}

/// Cut a labeled scene into a grid of fully-inside patches.
pub fn tile_scene(
    scene: &SceneRecord,
    patch: usize,
    policy: TilePolicy,
    spec: &BandSpec,
) -> Result<Vec<PatchRecord>> {
    let TilePolicy::InwardShift = policy;
    if patch == 0 {
        return Err(Error::parameter("patch size must be positive".to_string()));
    }
    if patch > scene.height || patch > scene.width {
        return Err(Error::data(format!(
            "patch {patch} exceeds scene {} ({}x{})",
            scene.id, scene.height, scene.width
        )));
    }
    let label = scene.label.clone().ok_or_else(|| {
        Error::data(format!("scene {} has no label raster", scene.id))
    })?;
    let image = image_ref(scene, spec)?;
    let mut records = Vec::new();
    for &row in &tile_axis(scene.height, patch) {
        for &col in &tile_axis(scene.width, patch) {
            records.push(PatchRecord {
                scene_id: scene.id.clone(),
                origin: (row, col),
                size: patch,
                image: image.clone(),
                label: label.clone(),
            });
        }
    }
    Ok(records)
}

/// Scan an input directory for scenes laid out by the dataset convention.
///
/// RGB datasets keep one raster per scene under `images/` and its label
/// under `labels/` with the same file stem. Band-composed datasets keep one
/// raster per spectral band under `band<b>/` directories (ids shared across
/// bands) plus `labels/`. Scene ids are returned in lexicographic order.
pub fn discover_scenes(input: &Path, kind: DatasetKind) -> Result<Vec<SceneRecord>> {
    let spec = kind.band_spec();
    let primary_dir = match &spec {
        BandSpec::Rgb { .. } => input.join("images"),
        BandSpec::Compose { bands } => input.join(format!("band{}", bands[0])),
    };
    let labels_dir = input.join("labels");
    if !labels_dir.is_dir() {
        return Err(Error::data(format!(
            "label directory {} is missing",
            labels_dir.display()
        )));
    }
    let mut ids: Vec<String> = raster_stems(&primary_dir)?;
    ids.sort();
    if ids.is_empty() {
        return Err(Error::data(format!(
            "no rasters found under {}",
            primary_dir.display()
        )));
    }

    let mut scenes = Vec::with_capacity(ids.len());
    for id in ids {
        let mut bands = IndexMap::new();
        match &spec {
            BandSpec::Rgb { band } => {
                bands.insert(band.clone(), primary_dir.join(format!("{id}.png")));
            }
            BandSpec::Compose { bands: names } => {
                for name in names {
                    let path = input.join(format!("band{name}")).join(format!("{id}.png"));
                    if !path.is_file() {
                        return Err(Error::data(format!(
                            "scene {id} is missing band raster {}",
                            path.display()
                        )));
                    }
                    bands.insert(name.clone(), path);
                }
            }
        }
        let label = labels_dir.join(format!("{id}.png"));
        if !label.is_file() {
            return Err(Error::data(format!(
                "scene {id} is missing label raster {}",
                label.display()
            )));
        }
        let first = bands.values().next().unwrap();
        let (width, height) = image::image_dimensions(first).map_err(|e| {
            Error::data(format!("cannot read raster {}: {e}", first.display()))
        })?;
        for path in bands.values() {
            let (w, h) = image::image_dimensions(path).map_err(|e| {
                Error::data(format!("cannot read raster {}: {e}", path.display()))
            })?;
            if (w, h) != (width, height) {
                return Err(Error::data(format!(
                    "scene {id}: raster {} is {w}x{h}, expected {width}x{height}",
                    path.display()
                )));
            }
        }
        let (lw, lh) = image::image_dimensions(&label).map_err(|e| {
            Error::data(format!("cannot read label {}: {e}", label.display()))
        })?;
        if (lw, lh) != (width, height) {
            return Err(Error::data(format!(
                "scene {id}: label is {lw}x{lh}, rasters are {width}x{height}"
            )));
        }
        scenes.push(SceneRecord {
            id,
            bands,
            label: Some(label),
            height: height as usize,
            width: width as usize,
        });
    }
    Ok(scenes)
}

/// File stems of the `.png` rasters directly inside `dir`.
fn raster_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot list {}: {e}", dir.display())))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::data(format!("cannot list {}: {e}", dir.display())))?
            .path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    Ok(stems)
}

/// Pixel-scaling policy applied when patches are assembled into batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPolicy {
    /// Each channel is mapped affinely so its patch minimum hits 0 and its
    /// maximum hits 1; a constant channel maps to all zeros.
    #[default]
    MinMaxPerChannel,
}

pub fn normalize(image: &RawImage, policy: NormPolicy) -> RawImage {
    let NormPolicy::MinMaxPerChannel = policy;
    debug_assert!(image.iter().all(|v| v.is_finite()));
    let mut out = image.clone();
    for mut channel in out.outer_iter_mut() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in channel.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            channel.mapv_inplace(|v| (v - lo) / (hi - lo));
        } else {
            channel.fill(0.0);
        }
    }
    out
}

/// Keep a seeded random `floor(fraction * n)`-record subset. Subsets at the
/// same seed are nested across fractions (they are prefixes of one shuffled
/// order); the surviving records keep the manifest's original order, so
/// `fraction = 1.0` returns the manifest unchanged.
pub fn fewshot_subset(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::parameter(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    manifest.validate()?;
    let n = manifest.records.len();
    let keep = (fraction * n as f64).floor() as usize;
    if keep == 0 {
        return Err(Error::parameter(format!(
            "fraction {fraction} of {n} records selects nothing"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let chosen: HashSet<usize> = order[..keep].iter().copied().collect();
    let records = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| chosen.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    Ok(DatasetManifest {
        kind: manifest.kind,
        split: manifest.split,
        provenance: Provenance { seed, fraction },
        records,
    })
}

fn clamp_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One synthetic sample: a filled rectangle or ellipse over a textured wave
/// background, with its exact binary mask. The shape is resampled until its
/// area lands strictly inside (0.05, 0.6) of the patch.
fn synth_sample(size: usize, rng: &mut ChaCha12Rng) -> (image::RgbImage, image::GrayImage) {
    let s = size as f64;
    let fx = rng.gen_range(1.0..4.0);
    let fy = rng.gen_range(1.0..4.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let base: [f64; 3] = [
        rng.gen_range(0.15..0.45),
        rng.gen_range(0.15..0.45),
        rng.gen_range(0.15..0.45),
    ];
    let lift: [f64; 3] = [
        rng.gen_range(0.3..0.5),
        rng.gen_range(0.3..0.5),
        rng.gen_range(0.3..0.5),
    ];

    let mut mask = Array2::<u8>::zeros((size, size));
    for attempt in 0.. {
        let ellipse = rng.gen_bool(0.5);
        let (cy, cx, hy, hx) = if attempt < 64 {
            (
                rng.gen_range(0.25..0.75) * s,
                rng.gen_range(0.25..0.75) * s,
                rng.gen_range(0.12..0.35) * s,
                rng.gen_range(0.12..0.35) * s,
            )
        } else {
            (0.5 * s, 0.5 * s, 0.25 * s, 0.25 * s)
        };
        let mut area = 0usize;
        for y in 0..size {
            for x in 0..size {
                let dy = (y as f64 + 0.5 - cy) / hy;
                let dx = (x as f64 + 0.5 - cx) / hx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                mask[[y, x]] = u8::from(inside);
                area += inside as usize;
            }
        }
        let fraction = area as f64 / (s * s);
        if fraction > 0.05 && fraction < 0.6 {
            break;
        }
    }

    let mut img = image::RgbImage::new(size as u32, size as u32);
    let mut lbl = image::GrayImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let wave = 0.5 + 0.5 * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / s
                + phase)
                .sin();
            let fg = mask[[y, x]] == 1;
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let noise = rng.gen_range(-0.06..0.06);
                let value = base[c] + 0.12 * wave + if fg { lift[c] } else { 0.0 } + noise;
                rgb[c] = clamp_u8(value);
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
            lbl.put_pixel(x as u32, y as u32, image::Luma([mask[[y, x]] * 255]));
        }
    }
    (img, lbl)
}

/// Generate a deterministic labeled dataset of `count` patches of side
/// `size` under `dir` and return its manifest.
pub fn synthetic_fixture(
    dir: &Path,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::data(
            "a synthetic manifest must hold at least one record".to_string(),
        ));
    }
    if size == 0 {
        return Err(Error::parameter("patch size must be positive".to_string()));
    }
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let (img, lbl) = synth_sample(size, &mut rng);
        let img_path = dir.join(format!("img_{i:03}.png"));
        let lbl_path = dir.join(format!("lbl_{i:03}.png"));
        img.save(&img_path)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", img_path.display())))?;
        lbl.save(&lbl_path)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", lbl_path.display())))?;
        records.push(PatchRecord {
            scene_id: format!("synthetic-{i:03}"),
            origin: (0, 0),
            size,
            image: ImageRef::Rgb { path: img_path },
            label: lbl_path,
        });
    }
    let manifest = DatasetManifest {
        kind: DatasetKind::Synthetic,
        split: Split::Train,
        provenance: Provenance {
            seed,
            fraction: 1.0,
        },
        records,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn window2(
    plane: &Array2<f64>,
    origin: (usize, usize),
    size: usize,
    path: &Path,
) -> Result<Array2<f64>> {
    let (h, w) = plane.dim();
    let (r, c) = origin;
    if r + size > h || c + size > w {
        return Err(Error::data(format!(
            "patch at ({r},{c}) of size {size} exceeds raster {} ({h}x{w})",
            path.display()
        )));
    }
    Ok(plane.slice(s![r..r + size, c..c + size]).to_owned())
}

/// Validate a label window and map it to `{0, 1}`. Accepts the `{0, 1}` and
/// `{0, 255}` conventions; any other value — or a mix of the two — is a
/// data error.
pub fn binarize_label(values: &Array2<f64>, path: &Path) -> Result<Array2<u8>> {
    let mut saw_one = false;
    let mut saw_byte = false;
    for &v in values.iter() {
        if v == 0.0 {
            continue;
        } else if v == 1.0 {
            saw_one = true;
        } else if v == 255.0 {
            saw_byte = true;
        } else {
            return Err(Error::data(format!(
                "label {} holds value {v}, expected {{0,1}} or {{0,255}}",
                path.display()
            )));
        }
    }
    if saw_one && saw_byte {
        return Err(Error::data(format!(
            "label {} mixes the {{0,1}} and {{0,255}} conventions",
            path.display()
        )));
    }
    Ok(values.mapv(|v| u8::from(v > 127.0 || v == 1.0)))
}

/// Read one patch: raw image values `[3, size, size]` and a binary label
/// `[size, size]`.
pub fn load_patch(record: &PatchRecord) -> Result<(RawImage, Array2<u8>)> {
    let n = record.size;
    let image = match &record.image {
        ImageRef::Rgb { path } => {
            let full = rgb_planes(path)?;
            let mut out = Array3::zeros((3, n, n));
            for c in 0..3 {
                let plane = full.index_axis(ndarray::Axis(0), c).to_owned();
                out.slice_mut(s![c, .., ..])
                    .assign(&window2(&plane, record.origin, n, path)?);
            }
            out
        }
        ImageRef::Bands { paths } => {
            if paths.len() != 3 {
                return Err(Error::data(format!(
                    "patch of scene {} references {} channel rasters, expected 3",
                    record.scene_id,
                    paths.len()
                )));
            }
            let mut out = Array3::zeros((3, n, n));
            for (c, path) in paths.iter().enumerate() {
                let plane = gray_plane(path)?;
                out.slice_mut(s![c, .., ..])
                    .assign(&window2(&plane, record.origin, n, path)?);
            }
            out
        }
    };
    let label_plane = gray_plane(&record.label)?;
    let window = window2(&label_plane, record.origin, n, &record.label)?;
    let label = binarize_label(&window, &record.label)?;
    Ok((image, label))
}

/// Load and normalize a batch: images `[B, 3, n, n]` and binary targets
/// `[B, 1, n, n]` in the working precision.
pub fn load_batch<S: Scalar>(records: &[PatchRecord]) -> Result<(ArrayD<S>, ArrayD<S>)> {
    if records.is_empty() {
        return Err(Error::data("cannot load an empty batch".to_string()));
    }
    let n = records[0].size;
    let b = records.len();
    let mut images = ArrayD::<S>::zeros(IxDyn(&[b, 3, n, n]));
    let mut labels = ArrayD::<S>::zeros(IxDyn(&[b, 1, n, n]));
    for (bi, record) in records.iter().enumerate() {
        if record.size != n {
            return Err(Error::data(format!(
                "batch mixes patch sizes {n} and {}",
                record.size
            )));
        }
        let (raw, label) = load_patch(record)?;
        let normed = normalize(&raw, NormPolicy::default());
        for c in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    images[[bi, c, y, x]] = S::from_f64(normed[[c, y, x]]);
                }
            }
        }
        for y in 0..n {
            for x in 0..n {
                labels[[bi, 0, y, x]] = S::from_f64(label[[y, x]] as f64);
            }
        }
    }
    Ok((images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn fake_scene(id: &str, height: usize, width: usize) -> SceneRecord {
        let mut bands = IndexMap::new();
        bands.insert("rgb".to_string(), PathBuf::from(format!("{id}.png")));
        SceneRecord {
            id: id.to_string(),
            bands,
            label: Some(PathBuf::from(format!("{id}_lbl.png"))),
            height,
            width,
        }
    }

    fn write_gray(path: &Path, values: &Array2<u8>) {
        let (h, w) = values.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x as u32, y as u32, image::Luma([values[[y, x]]]));
            }
        }
        img.save(path).unwrap();
    }

    fn write_rgb_const(path: &Path, size: usize, value: u8) {
        let mut img = image::RgbImage::new(size as u32, size as u32);
        img.pixels_mut().for_each(|p| *p = image::Rgb([value; 3]));
        img.save(path).unwrap();
    }

    #[test]
    fn discovery_finds_rgb_scenes_in_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("labels")).unwrap();
        for id in ["b", "a"] {
            write_rgb_const(&dir.path().join(format!("images/{id}.png")), 8, 90);
            write_gray(
                &dir.path().join(format!("labels/{id}.png")),
                &Array2::zeros((8, 8)),
            );
        }
        let scenes = discover_scenes(dir.path(), DatasetKind::Inria).unwrap();
        assert_eq!(scenes.len(), 2);
        assert_eq!(scenes[0].id, "a");
        assert_eq!(scenes[1].id, "b");
        assert_eq!((scenes[0].height, scenes[0].width), (8, 8));
        assert!(scenes[0].bands.contains_key("rgb"));
        assert!(scenes[0].label.as_ref().unwrap().ends_with("labels/a.png"));
    }

    #[test]
    fn discovery_assembles_band_directories() {
        let dir = tempfile::tempdir().unwrap();
        for band in ["band4", "band3", "band2"] {
            fs::create_dir_all(dir.path().join(band)).unwrap();
            write_gray(
                &dir.path().join(band).join("s0.png"),
                &Array2::zeros((4, 4)),
            );
        }
        fs::create_dir_all(dir.path().join("labels")).unwrap();
        write_gray(&dir.path().join("labels/s0.png"), &Array2::zeros((4, 4)));
        let scenes = discover_scenes(dir.path(), DatasetKind::Cloud38).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(
            scenes[0].bands.keys().cloned().collect::<Vec<_>>(),
            vec!["4", "3", "2"]
        );
    }

    #[test]
    fn discovery_reports_missing_labels_and_bands_by_path() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        write_rgb_const(&dir.path().join("images/x.png"), 8, 10);
        let err = discover_scenes(dir.path(), DatasetKind::Inria).unwrap_err();
        assert!(err.to_string().contains("labels"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        for band in ["band4", "band3"] {
            fs::create_dir_all(dir.path().join(band)).unwrap();
            write_gray(
                &dir.path().join(band).join("s0.png"),
                &Array2::zeros((4, 4)),
            );
        }
        fs::create_dir_all(dir.path().join("labels")).unwrap();
        write_gray(&dir.path().join("labels/s0.png"), &Array2::zeros((4, 4)));
        let err = discover_scenes(dir.path(), DatasetKind::Cloud38).unwrap_err();
        assert!(err.to_string().contains("band2"), "{err}");
    }

    #[test]
    fn cloud_band_order_puts_band4_in_channel0() {
        let dir = tempfile::tempdir().unwrap();
        let mut bands = IndexMap::new();
        for (id, value) in [("2", 10u8), ("3", 20), ("4", 30)] {
            let path = dir.path().join(format!("band{id}.png"));
            write_gray(&path, &Array2::from_elem((4, 4), value));
            bands.insert(id.to_string(), path);
        }
        let scene = SceneRecord {
            id: "s0".to_string(),
            bands,
            label: None,
            height: 4,
            width: 4,
        };
        let spec = DatasetKind::Cloud38.band_spec();
        let image = compose_bands(&scene, &spec).unwrap();
        assert!(image.slice(s![0, .., ..]).iter().all(|&v| v == 30.0));
        assert!(image.slice(s![1, .., ..]).iter().all(|&v| v == 20.0));
        assert!(image.slice(s![2, .., ..]).iter().all(|&v| v == 10.0));
    }

    #[test]
    fn missing_band_is_named_in_the_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut bands = IndexMap::new();
        for id in ["2", "4"] {
            let path = dir.path().join(format!("band{id}.png"));
            write_gray(&path, &Array2::zeros((4, 4)));
            bands.insert(id.to_string(), path);
        }
        let scene = SceneRecord {
            id: "s0".to_string(),
            bands,
            label: None,
            height: 4,
            width: 4,
        };
        let err = compose_bands(&scene, &DatasetKind::Cloud38.band_spec()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("band 3"), "{err}");
    }

    #[test]
    fn rgb_passthrough_keeps_channel_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.png");
        let mut img = image::RgbImage::new(3, 2);
        for y in 0..2u32 {
            for x in 0..3u32 {
                img.put_pixel(x, y, image::Rgb([(10 + x) as u8, (20 + y) as u8, 40]));
            }
        }
        img.save(&path).unwrap();
        let mut bands = IndexMap::new();
        bands.insert("rgb".to_string(), path);
        let scene = SceneRecord {
            id: "s0".to_string(),
            bands,
            label: None,
            height: 2,
            width: 3,
        };
        let image = compose_bands(&scene, &DatasetKind::Inria.band_spec()).unwrap();
        assert_eq!(image[[0, 0, 2]], 12.0);
        assert_eq!(image[[1, 1, 0]], 21.0);
        assert_eq!(image[[2, 1, 2]], 40.0);
    }

    #[test]
    fn tiling_shifts_the_last_tile_inward() {
        let scene = fake_scene("big", 5000, 5000);
        let spec = DatasetKind::Inria.band_spec();
        let records = tile_scene(&scene, 1024, TilePolicy::InwardShift, &spec).unwrap();
        assert_eq!(records.len(), 25);
        let rows: Vec<usize> = records.iter().map(|r| r.origin.0).collect();
        let expect = [0usize, 1024, 2048, 3072, 3976];
        for (i, &row) in expect.iter().enumerate() {
            assert_eq!(rows[i * 5], row);
            assert_eq!(records[i * 5 + 4].origin, (row, 3976));
        }

        let exact = tile_scene(&fake_scene("one", 1024, 1024), 1024, TilePolicy::InwardShift, &spec)
            .unwrap();
        assert_eq!(exact.len(), 1);
        assert_eq!(exact[0].origin, (0, 0));

        let field = tile_scene(&fake_scene("f", 224, 224), 224, TilePolicy::InwardShift, &spec)
            .unwrap();
        assert_eq!(field.len(), 1);

        let err = tile_scene(&fake_scene("tiny", 100, 100), 224, TilePolicy::InwardShift, &spec)
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn tiling_requires_a_label() {
        let mut scene = fake_scene("s", 64, 64);
        scene.label = None;
        let err = tile_scene(&scene, 32, TilePolicy::InwardShift, &DatasetKind::Inria.band_spec())
            .unwrap_err();
        assert!(err.to_string().contains("label"));
    }

    #[test]
    fn normalize_hits_both_endpoints_and_zeroes_constants() {
        let mut image = Array3::zeros((2, 2, 2));
        image
            .slice_mut(s![0, .., ..])
            .assign(&ndarray::arr2(&[[10.0, 20.0], [25.0, 30.0]]));
        image.slice_mut(s![1, .., ..]).fill(7.0);
        let out = normalize(&image, NormPolicy::default());
        assert_eq!(out[[0, 0, 0]], 0.0);
        assert_eq!(out[[0, 1, 1]], 1.0);
        assert!((out[[0, 0, 1]] - 0.5).abs() < 1e-12);
        assert!(out.slice(s![1, .., ..]).iter().all(|&v| v == 0.0));

        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let random = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(-4.0..9.0));
        let out = normalize(&random, NormPolicy::default());
        for c in 0..3 {
            let ch = out.slice(s![c, .., ..]);
            let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(lo, 0.0);
            assert_eq!(hi, 1.0);
            let raw = random.slice(s![c, .., ..]);
            let rlo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let rhi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (o, r) in ch.iter().zip(raw.iter()) {
                assert!((o - (r - rlo) / (rhi - rlo)).abs() < 1e-12);
            }
        }
    }

    fn fake_manifest(n: usize) -> DatasetManifest {
        let records = (0..n)
            .map(|i| PatchRecord {
                scene_id: format!("scene-{i:04}"),
                origin: (0, 0),
                size: 64,
                image: ImageRef::Rgb {
                    path: PathBuf::from(format!("img{i}.png")),
                },
                label: PathBuf::from(format!("lbl{i}.png")),
            })
            .collect();
        DatasetManifest {
            kind: DatasetKind::Cloud38,
            split: Split::Train,
            provenance: Provenance {
                seed: 0,
                fraction: 1.0,
            },
            records,
        }
    }

    #[test]
    fn fewshot_sizes_and_nesting() {
        let manifest = fake_manifest(660);
        let small = fewshot_subset(&manifest, 0.01, 9).unwrap();
        let medium = fewshot_subset(&manifest, 0.10, 9).unwrap();
        assert_eq!(small.records.len(), 6);
        assert_eq!(medium.records.len(), 66);
        let medium_ids: HashSet<&String> =
            medium.records.iter().map(|r| &r.scene_id).collect();
        for record in &small.records {
            assert!(medium_ids.contains(&record.scene_id));
        }
        assert_eq!(small.provenance.fraction, 0.01);
        assert_eq!(small.provenance.seed, 9);

        let full = fewshot_subset(&manifest, 1.0, 9).unwrap();
        assert_eq!(full.records, manifest.records);

        let other_seed = fewshot_subset(&manifest, 0.01, 10).unwrap();
        assert_ne!(
            small
                .records
                .iter()
                .map(|r| &r.scene_id)
                .collect::<Vec<_>>(),
            other_seed
                .records
                .iter()
                .map(|r| &r.scene_id)
                .collect::<Vec<_>>()
        );

        assert_eq!(fewshot_subset(&fake_manifest(10), 0.25, 3).unwrap().records.len(), 2);
    }

    #[test]
    fn fewshot_rejects_bad_fractions() {
        let manifest = fake_manifest(20);
        for fraction in [0.0, -0.3, 1.5, f64::NAN] {
            assert!(matches!(
                fewshot_subset(&manifest, fraction, 0),
                Err(Error::Parameter(_))
            ));
        }
        assert!(matches!(
            fewshot_subset(&manifest, 0.01, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn subset_keeps_original_record_order() {
        let manifest = fake_manifest(40);
        let subset = fewshot_subset(&manifest, 0.5, 4).unwrap();
        let positions: Vec<usize> = subset
            .records
            .iter()
            .map(|r| {
                manifest
                    .records
                    .iter()
                    .position(|m| m.scene_id == r.scene_id)
                    .unwrap()
            })
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn synthetic_fixture_is_deterministic_and_in_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let a = synthetic_fixture(&dir.path().join("a"), 8, 64, 7).unwrap();
        assert_eq!(a.records.len(), 8);
        assert_eq!(a.kind, DatasetKind::Synthetic);
        for record in &a.records {
            let (image, label) = load_patch(record).unwrap();
            assert_eq!(image.dim(), (3, 64, 64));
            let fg = label.iter().map(|&v| v as usize).sum::<usize>() as f64 / (64.0 * 64.0);
            assert!(
                fg > 0.05 && fg < 0.6,
                "{} has foreground fraction {fg}",
                record.scene_id
            );
            assert!(label.iter().all(|&v| v <= 1));
            let (again, label_again) = load_patch(record).unwrap();
            assert_eq!(image, again);
            assert_eq!(label, label_again);
        }

        let b = synthetic_fixture(&dir.path().join("b"), 8, 64, 7).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            let img_a = fs::read(match &ra.image {
                ImageRef::Rgb { path } => path,
                _ => unreachable!(),
            })
            .unwrap();
            let img_b = fs::read(match &rb.image {
                ImageRef::Rgb { path } => path,
                _ => unreachable!(),
            })
            .unwrap();
            assert_eq!(img_a, img_b);
            assert_eq!(fs::read(&ra.label).unwrap(), fs::read(&rb.label).unwrap());
        }

        assert!(matches!(
            synthetic_fixture(&dir.path().join("c"), 0, 64, 7),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn manifest_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synthetic_fixture(&dir.path().join("data"), 4, 32, 3).unwrap();
        let path = dir.path().join("train.jsonl");
        manifest.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(manifest, loaded);

        let mut dup = manifest.clone();
        dup.records.push(dup.records[0].clone());
        assert!(matches!(dup.validate(), Err(Error::Data(_))));
        let empty = DatasetManifest {
            records: Vec::new(),
            ..manifest
        };
        assert!(matches!(empty.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn labels_accept_both_conventions_and_reject_others() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lbl.png");

        write_gray(&path, &ndarray::arr2(&[[0u8, 255], [255, 0]]));
        let plane = gray_plane(&path).unwrap();
        let label = binarize_label(&plane, &path).unwrap();
        assert_eq!(label, ndarray::arr2(&[[0u8, 1], [1, 0]]));

        write_gray(&path, &ndarray::arr2(&[[0u8, 1], [1, 0]]));
        let plane = gray_plane(&path).unwrap();
        let label = binarize_label(&plane, &path).unwrap();
        assert_eq!(label, ndarray::arr2(&[[0u8, 1], [1, 0]]));

        write_gray(&path, &ndarray::arr2(&[[0u8, 37], [255, 0]]));
        let plane = gray_plane(&path).unwrap();
        let err = binarize_label(&plane, &path).unwrap_err();
        assert!(err.to_string().contains("37"), "{err}");

        write_gray(&path, &ndarray::arr2(&[[1u8, 255], [0, 0]]));
        let plane = gray_plane(&path).unwrap();
        assert!(binarize_label(&plane, &path).is_err());
    }

    #[test]
    fn patch_windows_slice_the_right_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.png");
        let lbl_path = dir.path().join("lbl.png");
        let mut img = image::RgbImage::new(8, 8);
        for y in 0..8u32 {
            for x in 0..8u32 {
                img.put_pixel(x, y, image::Rgb([(y * 8 + x) as u8, 0, 0]));
            }
        }
        img.save(&img_path).unwrap();
        write_gray(
            &lbl_path,
            &Array2::from_shape_fn((8, 8), |(y, x)| u8::from(y >= 2 && x >= 3) * 255),
        );
        let record = PatchRecord {
            scene_id: "s".to_string(),
            origin: (2, 3),
            size: 4,
            image: ImageRef::Rgb { path: img_path },
            label: lbl_path,
        };
        let (image, label) = load_patch(&record).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(image[[0, y, x]], ((y + 2) * 8 + (x + 3)) as f64);
                assert_eq!(label[[y, x]], 1);
            }
        }

        let mut outside = record.clone();
        outside.origin = (6, 6);
        assert!(matches!(load_patch(&outside), Err(Error::Data(_))));
    }

    #[test]
    fn sixteen_bit_rasters_keep_raw_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("band.png");
        let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(4, 4);
        for (i, pixel) in buf.pixels_mut().enumerate() {
            *pixel = image::Luma([(i * 1000) as u16]);
        }
        DynamicImage::ImageLuma16(buf).save(&path).unwrap();
        let plane = gray_plane(&path).unwrap();
        assert_eq!(plane[[0, 0]], 0.0);
        assert_eq!(plane[[0, 3]], 3000.0);
        assert_eq!(plane[[3, 3]], 15000.0);
    }

    #[test]
    fn batches_are_normalized_and_shaped() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synthetic_fixture(dir.path(), 3, 32, 11).unwrap();
        let (images, labels) = load_batch::<f32>(&manifest.records).unwrap();
        assert_eq!(images.shape(), &[3, 3, 32, 32]);
        assert_eq!(labels.shape(), &[3, 1, 32, 32]);
        assert!(images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(labels.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    proptest! {
        #[test]
        fn tiling_covers_every_pixel_within_bounds(
            height in 16usize..200,
            width in 16usize..200,
            patch in 4usize..16,
        ) {
            let scene = fake_scene("p", height, width);
            let records =
                tile_scene(&scene, patch, TilePolicy::InwardShift, &DatasetKind::Inria.band_spec())
                    .unwrap();
            prop_assert_eq!(records.len(), height.div_ceil(patch) * width.div_ceil(patch));
            let mut covered = Array2::<u8>::zeros((height, width));
            for record in &records {
                let (r, c) = record.origin;
                prop_assert!(r + patch <= height && c + patch <= width);
                covered.slice_mut(s![r..r + patch, c..c + patch]).fill(1);
            }
            prop_assert!(covered.iter().all(|&v| v == 1));
        }

        #[test]
        fn fewshot_nesting_holds_for_fraction_pairs(
            n in 8usize..120,
            seed in 0u64..500,
            a in 0.05f64..1.0,
            b in 0.05f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let manifest = fake_manifest(n);
            prop_assume!((lo * n as f64).floor() >= 1.0);
            let small = fewshot_subset(&manifest, lo, seed).unwrap();
            let large = fewshot_subset(&manifest, hi, seed).unwrap();
            let large_ids: HashSet<&String> =
                large.records.iter().map(|r| &r.scene_id).collect();
            for record in &small.records {
                prop_assert!(large_ids.contains(&record.scene_id));
            }
        }
    }
}
