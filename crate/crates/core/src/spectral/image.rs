use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "0" | "real" => Ok(Label::Real),
            "1" | "fake" => Ok(Label::Fake),
            other => Err(Error::Config(format!("unknown label `{other}`"))),
        }
    }
}

/// The four synthetic forgery families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Additive periodic grid (text-to-image analogue).
    T2i,
    /// Nearest-neighbour 2x upsampling (image-to-image analogue).
    I2i,
    /// Pasted patch with a hard seam (face-swap analogue).
    Fs,
    /// Locally sharpened region (face-edit analogue).
    Fe,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::T2i, Domain::I2i, Domain::Fs, Domain::Fe];

    pub fn tag(self) -> &'static str {
        match self {
            Domain::T2i => "t2i",
            Domain::I2i => "i2i",
            Domain::Fs => "fs",
            Domain::Fe => "fe",
        }
    }

    /// Families whose artifacts live mainly in the spectrum.
    pub fn is_spectral(self) -> bool {
        matches!(self, Domain::T2i | Domain::I2i)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Domain::T2i => "T2I-like",
            Domain::I2i => "I2I-like",
            Domain::Fs => "FS-like",
            Domain::Fe => "FE-like",
        };
        f.write_str(name)
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_end_matches("-like") {
            "t2i" => Ok(Domain::T2i),
            "i2i" => Ok(Domain::I2i),
            "fs" => Ok(Domain::Fs),
            "fe" => Ok(Domain::Fe),
            other => Err(Error::Config(format!(
                "unknown forgery family `{other}` (expected t2i, i2i, fs or fe)"
            ))),
        }
    }
}

/// An RGB image in `[0, 1]`, stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    id: String,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    label: Label,
    domain: Domain,
}

impl ImageSample {
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
        label: Label,
        domain: Domain,
    ) -> Result<Self> {
        let id = id.into();
        if !height.is_power_of_two() || !width.is_power_of_two() {
            return Err(Error::Contract(format!(
                "image `{id}` is {height}x{width}; both sides must be powers of two"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Contract(format!(
                "image `{id}` has {} components, expected {}",
                pixels.len(),
                height * width * 3
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!(
                "image `{id}` has pixel component {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            id,
            height,
            width,
            pixels,
            label,
            domain,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Channel-first `3 x H x W` tensor for the RGB branch.
    pub fn to_chw(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("consistent image shape")
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| quantize(v)).collect();
        write_png_bytes(path, self.width, self.height, png::ColorType::Rgb, &bytes)
    }

    /// Loads an 8-bit RGB (or RGBA, alpha dropped) PNG.
    pub fn read_png(
        path: &Path,
        id: impl Into<String>,
        label: Label,
        domain: Domain,
    ) -> Result<Self> {
        let ingest = |detail: String| Error::Ingestion {
            path: path.to_path_buf(),
            detail,
        };
        let file = File::open(path).map_err(|e| ingest(e.to_string()))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| ingest(e.to_string()))?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| ingest(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(ingest(format!(
                "unsupported bit depth {:?}",
                info.bit_depth
            )));
        }
        let stride = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            other => return Err(ingest(format!("unsupported colour type {other:?}"))),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for px in buf[..info.buffer_size()].chunks_exact(stride) {
            if stride == 1 {
                pixels.extend([px[0]; 3].iter().map(|&b| b as f64 / 255.0));
            } else {
                pixels.extend(px[..3].iter().map(|&b| b as f64 / 255.0));
            }
        }
        Self::new(id, h, w, pixels, label, domain).map_err(|e| ingest(e.to_string()))
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn write_png_bytes(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)?;
    Ok(())
}
