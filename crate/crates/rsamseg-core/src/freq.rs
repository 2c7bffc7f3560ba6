//! High-frequency component extraction and prompt generation math.
//!
//! An image is moved to the frequency domain, its low-frequency band is
//! removed with a center-symmetric binary mask, and the residual is projected
//! onto the encoder's token grid where it joins the patch-embedding features
//! to form per-layer prompts. The functions here are pure (weights are passed
//! in explicitly); the trainable forward pass in the encoder reuses exactly
//! this arithmetic through the tape and is tested against these functions.

use ndarray::{Array1, Array2, Array3, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{gelu_val, Scalar};

/// Binary low-frequency mask. `grid[i][j] == 0` exactly when
/// `4 * |(i - H/2) * (j - W/2)| / (H * W) <= tau`, with real-valued center
/// coordinates `H/2`, `W/2` on the integer pixel grid.
#[derive(Debug, Clone)]
pub struct HfcMask {
    pub height: usize,
    pub width: usize,
    pub tau: f64,
    pub grid: Array2<u8>,
}

impl HfcMask {
    /// Fraction of bins that pass (value 1).
    pub fn pass_fraction(&self) -> f64 {
        let ones: usize = self.grid.iter().filter(|&&v| v == 1).count();
        ones as f64 / (self.height * self.width) as f64
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) || !tau.is_finite() {
        return Err(Error::parameter(format!(
            "mask ratio must lie in [0, 1], got {tau}"
        )));
    }
    Ok(())
}

pub fn make_hfc_mask(height: usize, width: usize, tau: f64) -> Result<HfcMask> {
    if height < 2 || width < 2 {
        return Err(Error::parameter(format!(
            "mask needs height and width >= 2, got {height}x{width}"
        )));
    }
    check_tau(tau)?;
    let (ch, cw) = (height as f64 / 2.0, width as f64 / 2.0);
    let area = (height * width) as f64;
    let grid = Array2::from_shape_fn((height, width), |(i, j)| {
        let d = 4.0 * ((i as f64 - ch) * (j as f64 - cw)).abs() / area;
        u8::from(d > tau)
    });
    Ok(HfcMask {
        height,
        width,
        tau,
        grid,
    })
}

fn roll2(a: &Array2<Complex64>, dy: usize, dx: usize) -> Array2<Complex64> {
    let (h, w) = a.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[(i + dy) % h, (j + dx) % w]] = a[[i, j]];
        }
    }
    out
}

fn fft_rows(a: &mut Array2<Complex64>, inverse: bool) {
    let w = a.dim().1;
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for mut row in a.rows_mut() {
        fft.process(row.as_slice_mut().expect("rows must be contiguous"));
    }
}

fn fft2(a: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let mut m = a.clone();
    fft_rows(&mut m, inverse);
    let mut t = m.t().as_standard_layout().to_owned();
    fft_rows(&mut t, inverse);
    let mut out = t.t().as_standard_layout().to_owned();
    if inverse {
        let scale = 1.0 / (a.len() as f64);
        out.mapv_inplace(|v| v * scale);
    }
    out
}

/// Forward 2-D transform of one channel with the DC bin shifted to the
/// center `(floor(H/2), floor(W/2))`.
pub fn spectrum(channel: &Array2<f64>) -> Array2<Complex64> {
    let complex = channel.mapv(|v| Complex64::new(v, 0.0));
    let (h, w) = channel.dim();
    roll2(&fft2(&complex, false), h / 2, w / 2)
}

/// Inverse of [`spectrum`]: undo the center shift and transform back.
/// The imaginary part is returned so callers can check the residue.
pub fn inverse_spectrum(spec: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = spec.dim();
    fft2(&roll2(spec, h - h / 2, w - w / 2), true)
}

/// Remove the low-frequency band of every channel. Input and output are
/// `[C, H, W]`; the output keeps only the real part of the reconstruction.
/// On even grids the mask is symmetric under the spectrum's conjugate
/// pairing, so the imaginary part of the reconstruction vanishes (to FFT
/// precision); on odd grids the real-valued center breaks that pairing and
/// the real part is the defined projection.
pub fn extract_hfc(image: &Array3<f64>, tau: f64) -> Result<Array3<f64>> {
    check_tau(tau)?;
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("image contains non-finite values"));
    }
    let (c, h, w) = image.dim();
    if h < 2 || w < 2 {
        return Err(Error::parameter(format!(
            "image must be at least 2x2, got {h}x{w}"
        )));
    }
    let mask = make_hfc_mask(h, w, tau)?;
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        let chan = image.index_axis(Axis(0), ci).to_owned();
        let mut spec = spectrum(&chan);
        for i in 0..h {
            for j in 0..w {
                if mask.grid[[i, j]] == 0 {
                    spec[[i, j]] = Complex64::new(0.0, 0.0);
                }
            }
        }
        out.index_axis_mut(Axis(0), ci)
            .assign(&inverse_spectrum(&spec).mapv(|v| v.re));
    }
    Ok(out)
}

fn linear_tokens<S: Scalar>(
    x: &Array3<S>,
    weight: &Array2<S>,
    bias: &Array1<S>,
) -> Result<Array3<S>> {
    let (b, n, din) = x.dim();
    if weight.dim().0 != din {
        return Err(Error::shape(format!(
            "linear expects input width {}, got {din}",
            weight.dim().0
        )));
    }
    let dout = weight.dim().1;
    if bias.len() != dout {
        return Err(Error::shape(format!(
            "bias length {} does not match output width {dout}",
            bias.len()
        )));
    }
    let flat = x
        .to_shape((b * n, din))
        .expect("token tensor must be contiguous")
        .to_owned();
    let mut y = flat.dot(weight);
    for mut row in y.rows_mut() {
        row += bias;
    }
    Ok(y.into_shape_with_order((b, n, dout)).unwrap())
}

/// Project non-overlapping `patch x patch` windows of a `[C, H, W]` image
/// onto tokens. Patches are flattened in `(channel, row, column)` order;
/// `weight` is `[C * p * p, dim]`. Returns a `[1, N, dim]` token grid with
/// `N = (H/p) * (W/p)`, tokens ordered row-major over the patch grid.
pub fn embed_hfc<S: Scalar>(
    hfc: &Array3<S>,
    weight: &Array2<S>,
    bias: &Array1<S>,
    patch: usize,
) -> Result<Array3<S>> {
    let (c, h, w) = hfc.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    if weight.dim().0 != c * patch * patch {
        return Err(Error::shape(format!(
            "patch projection expects {} inputs, got weight rows {}",
            c * patch * patch,
            weight.dim().0
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let n = gh * gw;
    let mut flat = Array2::zeros((n, c * patch * patch));
    for gy in 0..gh {
        for gx in 0..gw {
            let tok = gy * gw + gx;
            for ci in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        flat[[tok, (ci * patch + py) * patch + px]] =
                            hfc[[ci, gy * patch + py, gx * patch + px]];
                    }
                }
            }
        }
    }
    let mut y = flat.dot(weight);
    for mut row in y.rows_mut() {
        row += bias;
    }
    let dout = weight.dim().1;
    Ok(y.into_shape_with_order((1, n, dout)).unwrap())
}

/// Scaled linear layer taking patch-embedding tokens `[B, N, D]` down to the
/// prompt bottleneck width.
pub fn tune_embedding<S: Scalar>(
    fpe_raw: &Array3<S>,
    weight: &Array2<S>,
    bias: &Array1<S>,
    fpe_scale: S,
) -> Result<Array3<S>> {
    let y = linear_tokens(fpe_raw, weight, bias)?;
    Ok(y.mapv(|v| v * fpe_scale))
}

/// Per-layer prompt: `MLP_up(GELU(MLP_tune[layer](fpe + fhfc)))`. The tune
/// projection is layer-specific; the up projection is shared by all layers.
#[allow(clippy::too_many_arguments)]
pub fn generate_prompt<S: Scalar>(
    fpe: &Array3<S>,
    fhfc: &Array3<S>,
    layer: usize,
    tune_weights: &[Array2<S>],
    tune_biases: &[Array1<S>],
    up_weight: &Array2<S>,
    up_bias: &Array1<S>,
) -> Result<Array3<S>> {
    if tune_weights.len() != tune_biases.len() {
        return Err(Error::parameter(
            "per-layer weight and bias counts differ".to_string(),
        ));
    }
    if layer >= tune_weights.len() {
        return Err(Error::parameter(format!(
            "layer {layer} out of range for depth {}",
            tune_weights.len()
        )));
    }
    if fpe.dim() != fhfc.dim() {
        return Err(Error::shape(format!(
            "token grids disagree: {:?} vs {:?}",
            fpe.dim(),
            fhfc.dim()
        )));
    }
    let summed = fpe + fhfc;
    let tuned = linear_tokens(&summed, &tune_weights[layer], &tune_biases[layer])?;
    let activated = tuned.mapv(gelu_val);
    linear_tokens(&activated, up_weight, up_bias)
}
