//! Grayscale conversion, radix-2 2D FFT and the log-magnitude spectrum fed to
//! the frequency branch.

mod image;

pub(crate) use image::{quantize, write_png_bytes};
pub use image::{Domain, ImageSample, Label};

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// How the spectrum is prepared for the frequency branch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumOptions {
    /// Move the zero-frequency bin to `(H/2, W/2)`.
    pub center_dc: bool,
    /// Per-image min-max rescale to `[0, 1]`.
    pub min_max_normalize: bool,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            center_dc: true,
            min_max_normalize: true,
        }
    }
}

/// Complex 2D spectrum, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn bin(&self, u: usize, v: usize) -> Complex64 {
        self.bins[u * self.width + v]
    }
}

/// Log-magnitude spectrum `ln(1 + |F|)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub dc_centered: bool,
}

impl SpectrumMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

pub fn to_grayscale(image: &ImageSample) -> Tensor {
    let [wr, wg, wb] = LUMA_WEIGHTS;
    let values = image
        .pixels()
        .chunks_exact(3)
        // summed blue-first so pure white lands on exactly 1.0
        .map(|p| (wb * p[2] + wg * p[1] + wr * p[0]).clamp(0.0, 1.0))
        .collect();
    Tensor::new(vec![image.height(), image.width()], values).expect("consistent image shape")
}

/// In-place iterative radix-2 Cooley-Tukey FFT (forward, unnormalized).
pub fn fft_in_place(data: &mut [Complex64]) -> Result<()> {
    let n = data.len();
    if !n.is_power_of_two() {
        return Err(Error::Contract(format!(
            "FFT length {n} is not a power of two"
        )));
    }
    if n == 1 {
        return Ok(());
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            data.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = -2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let tw = Complex64::from_polar(1.0, step * k as f64);
                let a = data[start + k];
                let b = data[start + k + half] * tw;
                data[start + k] = a + b;
                data[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
    Ok(())
}

/// Unnormalized forward 2D DFT of an `H x W` real image.
pub fn fft2d(gray: &Tensor) -> Result<Spectrum> {
    let s = gray.shape();
    if s.len() != 2 {
        return Err(shape_err("fft2d", format!("expected HxW, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::Contract(format!(
            "fft2d needs power-of-two sides, got {h}x{w}"
        )));
    }
    let mut bins: Vec<Complex64> = gray
        .values()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    for row in bins.chunks_exact_mut(w) {
        fft_in_place(row)?;
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = bins[y * w + x];
        }
        fft_in_place(&mut col)?;
        for y in 0..h {
            bins[y * w + x] = col[y];
        }
    }
    Ok(Spectrum {
        height: h,
        width: w,
        bins,
    })
}

pub fn log_magnitude(spectrum: &Spectrum, center_dc: bool) -> SpectrumMap {
    let (h, w) = (spectrum.height, spectrum.width);
    let raw: Vec<f64> = spectrum.bins.iter().map(|c| c.norm().ln_1p()).collect();
    let values = if center_dc {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[((y + h / 2) % h) * w + (x + w / 2) % w] = raw[y * w + x];
            }
        }
        out
    } else {
        raw
    };
    SpectrumMap {
        height: h,
        width: w,
        values,
        dc_centered: center_dc,
    }
}

/// `1 x H x W` frequency-branch input. Constant maps become all zeros when
/// normalizing.
pub fn spectrum_to_branch_input(map: &SpectrumMap, min_max_normalize: bool) -> Tensor {
    let values = if min_max_normalize {
        let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if span > 0.0 {
            map.values
                .iter()
                .map(|v| ((v - lo) / span).clamp(0.0, 1.0))
                .collect()
        } else {
            vec![0.0; map.values.len()]
        }
    } else {
        map.values.clone()
    };
    Tensor::new(vec![1, map.height, map.width], values).expect("consistent spectrum shape")
}

pub fn spectrum_map(image: &ImageSample, center_dc: bool) -> SpectrumMap {
    let spec = fft2d(&to_grayscale(image)).expect("ImageSample sides are powers of two");
    log_magnitude(&spec, center_dc)
}

/// Full image → frequency-branch input pipeline.
pub fn frequency_input(image: &ImageSample, opts: SpectrumOptions) -> Tensor {
    spectrum_to_branch_input(&spectrum_map(image, opts.center_dc), opts.min_max_normalize)
}

/// Share of non-DC spectral energy at normalized radius above one half,
/// where radius 1 is the Nyquist frequency along an axis.
pub fn high_frequency_energy_ratio(image: &ImageSample) -> f64 {
    let spec = fft2d(&to_grayscale(image)).expect("ImageSample sides are powers of two");
    let (h, w) = (spec.height, spec.width);
    let (mut high, mut total) = (0.0, 0.0);
    for u in 0..h {
        for v in 0..w {
            if u == 0 && v == 0 {
                continue;
            }
            let fu = signed_freq(u, h) / (h as f64 / 2.0);
            let fv = signed_freq(v, w) / (w as f64 / 2.0);
            let e = spec.bin(u, v).norm_sqr();
            total += e;
            if (fu * fu + fv * fv).sqrt() > 0.5 {
                high += e;
            }
        }
    }
    if total > 0.0 {
        high / total
    } else {
        0.0
    }
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Writes a spectrum map as an 8-bit grayscale PNG, scaled so the largest
/// entry maps to 255 and zero stays black.
pub fn write_spectrum_png(map: &SpectrumMap, path: &Path) -> Result<()> {
    let hi = map.values.iter().copied().fold(0.0, f64::max);
    let bytes: Vec<u8> = map
        .values
        .iter()
        .map(|&v| if hi > 0.0 { quantize(v / hi) } else { 0 })
        .collect();
    write_png_bytes(
        path,
        map.width,
        map.height,
        png::ColorType::Grayscale,
        &bytes,
    )
}

pub fn spectrum_tensor(map: &SpectrumMap) -> Tensor {
    Tensor::new(vec![map.height, map.width], map.values.clone()).expect("consistent spectrum shape")
}
