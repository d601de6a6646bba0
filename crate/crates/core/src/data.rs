//! Procedural, class-balanced corpus with four forgery families.
//!
//! Real images are smooth sums of coloured Gaussian blobs plus faint sensor
//! noise. Fakes start from such an image and add one family-specific
//! artifact: a periodic grid (`t2i`), nearest-neighbour upsampling (`i2i`),
//! a pasted patch with a hard seam (`fs`) or a locally sharpened region
//! (`fe`). Every sample draws from its own stream keyed by `(seed, id)`.
//!
//! On-disk layout: `<root>/<domain>/<split>/<id>.png` plus `<root>/manifest.tsv`
//! whose first line is a `#`-prefixed version header naming the protocol,
//! followed by one `id<TAB>label<TAB>domain<TAB>split` record per sample.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::spectral::{Domain, ImageSample, Label};

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "# dualbranch-corpus v1";

/// Per-family artifact strength in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactStrength {
    pub t2i: f64,
    pub i2i: f64,
    pub fs: f64,
    pub fe: f64,
}

impl Default for ArtifactStrength {
    fn default() -> Self {
        Self {
            t2i: 1.0,
            i2i: 1.0,
            fs: 1.0,
            fe: 1.0,
        }
    }
}

impl ArtifactStrength {
    pub fn get(&self, d: Domain) -> f64 {
        match d {
            Domain::T2i => self.t2i,
            Domain::I2i => self.i2i,
            Domain::Fs => self.fs,
            Domain::Fe => self.fe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub image_size: usize,
    pub samples_per_domain_per_class: usize,
    pub seed: u64,
    /// Standard deviation of the per-pixel noise on real images.
    pub noise_sigma: f64,
    pub artifact_strength: ArtifactStrength,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            samples_per_domain_per_class: 500,
            seed: 0,
            noise_sigma: 0.02,
            artifact_strength: ArtifactStrength::default(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 8 {
            return Err(Error::Config(format!(
                "corpus.image_size must be a power of two >= 8, got {}",
                self.image_size
            )));
        }
        if self.samples_per_domain_per_class == 0 {
            return Err(Error::Config(
                "corpus.samples_per_domain_per_class must be positive".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma < 0.5) {
            return Err(Error::Config(format!(
                "corpus.noise_sigma = {} is out of range",
                self.noise_sigma
            )));
        }
        for d in Domain::ALL {
            let s = self.artifact_strength.get(d);
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::Config(format!(
                    "corpus.artifact_strength.{} = {s} must lie in (0, 1]",
                    d.tag()
                )));
            }
        }
        Ok(())
    }
}

/// Which samples go to training and which to testing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// 80/20 split inside one family.
    InDomain(Domain),
    /// Train on all of one family, test on all of another.
    CrossDomain { train: Domain, test: Domain },
    /// 80/20 split inside every family, pooled.
    Pooled,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::InDomain(d) => write!(f, "in-domain:{}", d.tag()),
            Protocol::CrossDomain { train, test } => {
                write!(f, "cross-domain:{}:{}", train.tag(), test.tag())
            }
            Protocol::Pooled => f.write_str("pooled"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["in-domain", d] => Ok(Protocol::InDomain(d.parse()?)),
            ["cross-domain", a, b] => Ok(Protocol::CrossDomain {
                train: a.parse()?,
                test: b.parse()?,
            }),
            ["pooled"] => Ok(Protocol::Pooled),
            _ => Err(Error::Config(format!(
                "unknown protocol `{s}` (expected in-domain:<d>, cross-domain:<a>:<b> or pooled)"
            ))),
        }
    }
}

impl Serialize for Protocol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Protocol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub protocol: Protocol,
}

impl CorpusSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn sample_id(domain: Domain, label: Label, index: usize) -> String {
    let kind = match label {
        Label::Real => "real",
        Label::Fake => "fake",
    };
    format!("{}-{kind}-{index:05}", domain.tag())
}

fn soft_clip(v: f64) -> f64 {
    0.5 + 0.5 * (2.0 * (v - 0.5)).tanh()
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps stream consumption simple
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Smooth blob image, interleaved RGB in `(0, 1)`.
pub fn real_pixels<R: Rng>(size: usize, noise_sigma: f64, rng: &mut R) -> Vec<f64> {
    let n = size as f64;
    let background: [f64; 3] = [
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
    ];
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..rng.gen_range(3..=6))
        .map(|_| {
            let center = [rng.gen_range(0.0..n), rng.gen_range(0.0..n)];
            let sigma = rng.gen_range(n / 8.0..n / 3.0);
            let amp = [
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            ];
            (center, sigma, amp)
        })
        .collect();
    let mut px = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let mut rgb = background;
            for (c, s, a) in &blobs {
                let d2 = (y as f64 + 0.5 - c[0]).powi(2) + (x as f64 + 0.5 - c[1]).powi(2);
                let w = (-d2 / (2.0 * s * s)).exp();
                for k in 0..3 {
                    rgb[k] += a[k] * w;
                }
            }
            px.extend(rgb.iter().map(|&v| soft_clip(v)));
        }
    }
    if noise_sigma > 0.0 {
        for v in px.iter_mut() {
            *v = (*v + noise_sigma * gaussian(rng)).clamp(0.0, 1.0);
        }
    }
    px
}

pub fn generate_real<R: Rng>(
    spec: &CorpusSpec,
    domain: Domain,
    id: &str,
    rng: &mut R,
) -> Result<ImageSample> {
    let px = real_pixels(spec.image_size, spec.noise_sigma, rng);
    ImageSample::new(
        id,
        spec.image_size,
        spec.image_size,
        px,
        Label::Real,
        domain,
    )
}

/// A fake of `family` together with the real image it was derived from.
/// `strength` overrides the spec's per-family strength when given.
pub fn generate_fake_with_base<R: Rng>(
    spec: &CorpusSpec,
    family: Domain,
    id: &str,
    strength: Option<f64>,
    rng: &mut R,
) -> Result<(ImageSample, ImageSample)> {
    let size = spec.image_size;
    let base = real_pixels(size, spec.noise_sigma, rng);
    let s = strength.unwrap_or_else(|| spec.artifact_strength.get(family));
    let mut px = base.clone();
    match family {
        Domain::T2i => add_grid(&mut px, size, s, rng),
        Domain::I2i => upsample_artifact(&mut px, size, s),
        Domain::Fs => {
            let donor = real_pixels(size, spec.noise_sigma, rng);
            paste_patch(&mut px, &donor, size, s, rng);
        }
        Domain::Fe => sharpen_region(&mut px, size, s, rng),
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let base = ImageSample::new(format!("{id}-base"), size, size, base, Label::Real, family)?;
    let fake = ImageSample::new(id, size, size, px, Label::Fake, family)?;
    Ok((base, fake))
}

pub fn generate_fake<R: Rng>(
    spec: &CorpusSpec,
    family: Domain,
    id: &str,
    rng: &mut R,
) -> Result<ImageSample> {
    Ok(generate_fake_with_base(spec, family, id, None, rng)?.1)
}

/// Grid amplitude at full strength.
pub const GRID_AMPLITUDE: f64 = 0.1;

/// Separable product of exact-period cosines in the upper half of the band,
/// identical on every channel. The tones land off-axis, away from the
/// border-discontinuity leakage that real images carry along kx = 0 / ky = 0.
fn add_grid<R: Rng>(px: &mut [f64], size: usize, s: f64, rng: &mut R) {
    let lo = size / 4 + 1;
    let hi = size / 2 - 1;
    let fy = rng.gen_range(lo..=hi) as f64;
    let fx = rng.gen_range(lo..=hi) as f64;
    let (py, pxh) = (
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let a = GRID_AMPLITUDE * s;
    let n = size as f64;
    for y in 0..size {
        for x in 0..size {
            let tau = std::f64::consts::TAU;
            let v =
                a * (tau * fy * y as f64 / n + py).cos() * (tau * fx * x as f64 / n + pxh).cos();
            for c in 0..3 {
                px[(y * size + x) * 3 + c] += v;
            }
        }
    }
}

/// 2x2 average-pool then nearest-neighbour upscale, blended in by `s`.
fn upsample_artifact(px: &mut [f64], size: usize, s: f64) {
    let orig = px.to_vec();
    for y in 0..size {
        for x in 0..size {
            let (by, bx) = (y & !1, x & !1);
            for c in 0..3 {
                let avg = (orig[(by * size + bx) * 3 + c]
                    + orig[(by * size + bx + 1) * 3 + c]
                    + orig[((by + 1) * size + bx) * 3 + c]
                    + orig[((by + 1) * size + bx + 1) * 3 + c])
                    / 4.0;
                let i = (y * size + x) * 3 + c;
                px[i] = orig[i] + s * (avg - orig[i]);
            }
        }
    }
}

/// The rectangle (inclusive-exclusive) a patch or edit occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

fn random_region<R: Rng>(size: usize, rng: &mut R) -> Region {
    let h = rng.gen_range(size / 4..=size / 2);
    let w = rng.gen_range(size / 4..=size / 2);
    // leave room for a one-pixel seam on every side
    let y0 = rng.gen_range(1..=size - h - 1);
    let x0 = rng.gen_range(1..=size - w - 1);
    Region {
        y0,
        x0,
        y1: y0 + h,
        x1: x0 + w,
    }
}

fn paste_patch<R: Rng>(px: &mut [f64], donor: &[f64], size: usize, s: f64, rng: &mut R) {
    let r = random_region(size, rng);
    for y in r.y0 - 1..=r.y1 {
        for x in r.x0 - 1..=r.x1 {
            let inside = y >= r.y0 && y < r.y1 && x >= r.x0 && x < r.x1;
            for c in 0..3 {
                let i = (y * size + x) * 3 + c;
                px[i] = if inside {
                    px[i] + s * (donor[i] - px[i])
                } else {
                    px[i] * (1.0 - 0.5 * s)
                };
            }
        }
    }
}

fn sharpen_region<R: Rng>(px: &mut [f64], size: usize, s: f64, rng: &mut R) {
    let r = random_region(size, rng);
    let orig = px.to_vec();
    let amount = 3.0 * s;
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            for c in 0..3 {
                let mut blur = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let yy = (y as isize + dy) as usize;
                        let xx = (x as isize + dx) as usize;
                        blur += orig[(yy * size + xx) * 3 + c];
                    }
                }
                blur /= 9.0;
                let i = (y * size + x) * 3 + c;
                px[i] = orig[i] + amount * (orig[i] - blur);
            }
        }
    }
}

/// All samples of one family: `n` reals then `n` fakes, in index order.
pub fn generate_domain(spec: &CorpusSpec, domain: Domain) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    let n = spec.samples_per_domain_per_class;
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let id = sample_id(domain, Label::Real, i);
        out.push(generate_real(
            spec,
            domain,
            &id,
            &mut rng::stream(spec.seed, &id),
        )?);
    }
    for i in 0..n {
        let id = sample_id(domain, Label::Fake, i);
        out.push(generate_fake(
            spec,
            domain,
            &id,
            &mut rng::stream(spec.seed, &id),
        )?);
    }
    Ok(out)
}

fn split_in_domain(samples: Vec<ImageSample>) -> (Vec<ImageSample>, Vec<ImageSample>) {
    let n_per_class = samples.iter().filter(|s| s.label() == Label::Real).count();
    let n_train = n_per_class * 4 / 5;
    let mut seen = BTreeMap::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in samples {
        let k = seen.entry(s.label()).or_insert(0usize);
        if *k < n_train {
            train.push(s);
        } else {
            test.push(s);
        }
        *k += 1;
    }
    (train, test)
}

pub fn build_split(spec: &CorpusSpec, protocol: &Protocol) -> Result<CorpusSplit> {
    let (train, test) = match protocol {
        Protocol::InDomain(d) => split_in_domain(generate_domain(spec, *d)?),
        Protocol::CrossDomain { train, test } => {
            if train == test {
                return Err(Error::Config(format!(
                    "cross-domain protocol needs two different families, got {train} twice"
                )));
            }
            (
                generate_domain(spec, *train)?,
                generate_domain(spec, *test)?,
            )
        }
        Protocol::Pooled => {
            let (mut tr, mut te) = (Vec::new(), Vec::new());
            for d in Domain::ALL {
                let (a, b) = split_in_domain(generate_domain(spec, d)?);
                tr.extend(a);
                te.extend(b);
            }
            (tr, te)
        }
    };
    Ok(CorpusSplit {
        train,
        test,
        protocol: protocol.clone(),
    })
}

fn sample_path(root: &Path, sample: &ImageSample, split: &str) -> PathBuf {
    root.join(sample.domain().tag())
        .join(split)
        .join(format!("{}.png", sample.id()))
}

pub fn export_corpus(split: &CorpusSplit, root: &Path) -> Result<()> {
    let mut manifest = format!("{MANIFEST_HEADER} protocol={}\n", split.protocol);
    for (name, samples) in [("train", &split.train), ("test", &split.test)] {
        for s in samples.iter() {
            let path = sample_path(root, s, name);
            fs::create_dir_all(path.parent().expect("sample path has a parent"))?;
            s.write_png(&path)?;
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                s.id(),
                s.label() as u8,
                s.domain().tag(),
                name
            ));
        }
    }
    fs::write(root.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

pub fn import_corpus(root: &Path) -> Result<CorpusSplit> {
    let manifest_path = root.join(MANIFEST_NAME);
    let ingest = |path: &Path, detail: String| Error::Ingestion {
        path: path.to_path_buf(),
        detail,
    };
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| ingest(&manifest_path, e.to_string()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let protocol = header
        .strip_prefix(MANIFEST_HEADER)
        .and_then(|rest| rest.trim().strip_prefix("protocol="))
        .ok_or_else(|| ingest(&manifest_path, format!("bad header line `{header}`")))?
        .parse::<Protocol>()
        .map_err(|e| ingest(&manifest_path, e.to_string()))?;

    let mut split = CorpusSplit {
        train: Vec::new(),
        test: Vec::new(),
        protocol,
    };
    let mut listed = BTreeSet::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| ingest(&manifest_path, format!("line {}: {what}", lineno + 2));
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, label, domain, which] = fields[..] else {
            return Err(bad("expected 4 tab-separated fields"));
        };
        let label: Label = label.parse().map_err(|_| bad("bad label"))?;
        let domain: Domain = domain.parse().map_err(|_| bad("bad domain"))?;
        let path = root
            .join(domain.tag())
            .join(which)
            .join(format!("{id}.png"));
        let sample = ImageSample::read_png(&path, id, label, domain)?;
        listed.insert(path);
        match which {
            "train" => split.train.push(sample),
            "test" => split.test.push(sample),
            _ => return Err(bad("split must be train or test")),
        }
    }
    for path in png_files(root)? {
        if !listed.contains(&path) {
            return Err(ingest(&path, "image has no manifest entry".into()));
        }
    }
    Ok(split)
}

fn png_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "png") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{fft2d, high_frequency_energy_ratio, to_grayscale};

    fn small_spec(n: usize) -> CorpusSpec {
        CorpusSpec {
            samples_per_domain_per_class: n,
            seed: 42,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn real_images_in_range_and_deterministic() {
        let spec = small_spec(1);
        let a = generate_real(&spec, Domain::T2i, "x", &mut rng::stream(1, "x")).unwrap();
        let b = generate_real(&spec, Domain::T2i, "x", &mut rng::stream(1, "x")).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_strength_returns_the_base() {
        let spec = small_spec(1);
        for d in Domain::ALL {
            let (base, fake) =
                generate_fake_with_base(&spec, d, "f", Some(0.0), &mut rng::stream(3, "f"))
                    .unwrap();
            assert_eq!(base.pixels(), fake.pixels(), "{d}");
            assert_eq!(fake.label(), Label::Fake);
            assert_eq!(fake.domain(), d);
        }
    }

    #[test]
    fn grid_bins_dominate_the_base() {
        let spec = small_spec(1);
        for k in 0..200 {
            let id = format!("g{k}");
            let (base, fake) =
                generate_fake_with_base(&spec, Domain::T2i, &id, None, &mut rng::stream(5, &id))
                    .unwrap();
            let fb = fft2d(&to_grayscale(&base)).unwrap();
            let ff = fft2d(&to_grayscale(&fake)).unwrap();
            let ratio = ff
                .bins
                .iter()
                .zip(&fb.bins)
                .map(|(a, b)| a.norm() / b.norm().max(1e-12))
                .fold(0.0, f64::max);
            assert!(ratio >= 10.0, "{id}: {ratio}");
        }
    }

    #[test]
    fn high_frequency_threshold_separates_grid_fakes() {
        let spec = small_spec(1);
        let n = 1000usize;
        let mut scored: Vec<(f64, bool)> = Vec::with_capacity(2 * n);
        for k in 0..n {
            let id = format!("h{k}");
            let (base, f) =
                generate_fake_with_base(&spec, Domain::T2i, &id, None, &mut rng::stream(11, &id))
                    .unwrap();
            scored.push((high_frequency_energy_ratio(&base), false));
            scored.push((high_frequency_energy_ratio(&f), true));
        }
        let mean = |fake: bool| {
            scored
                .iter()
                .filter(|s| s.1 == fake)
                .map(|s| s.0)
                .sum::<f64>()
                / n as f64
        };
        assert!(mean(false) < mean(true));
        // best "ratio > t means fake" threshold over all cut points
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut correct = n; // t below everything: every fake right, every real wrong
        let mut best = correct;
        for &(_, fake) in &scored {
            if fake {
                correct -= 1;
            } else {
                correct += 1;
            }
            best = best.max(correct);
        }
        let acc = best as f64 / (2 * n) as f64;
        assert!(acc > 0.9, "{acc}");
    }

    #[test]
    fn face_swap_changes_only_patch_and_seam() {
        let spec = small_spec(1);
        for k in 0..20 {
            let id = format!("s{k}");
            // replay the stream to recover the region the generator drew
            let mut r = rng::stream(9, &id);
            let (base, fake) =
                generate_fake_with_base(&spec, Domain::Fs, &id, None, &mut r).unwrap();
            let mut replay = rng::stream(9, &id);
            let _ = real_pixels(32, spec.noise_sigma, &mut replay);
            let _ = real_pixels(32, spec.noise_sigma, &mut replay);
            let region = random_region(32, &mut replay);
            for y in 0..32 {
                for x in 0..32 {
                    let near = y + 1 >= region.y0
                        && y <= region.y1
                        && x + 1 >= region.x0
                        && x <= region.x1;
                    if !near {
                        assert_eq!(
                            base.pixel(y, x),
                            fake.pixel(y, x),
                            "({y},{x}) outside {region:?}"
                        );
                    }
                }
            }
            assert_ne!(base.pixels(), fake.pixels());
        }
    }

    #[test]
    fn in_domain_split_is_80_20_and_balanced() {
        let split = build_split(&small_spec(500), &Protocol::InDomain(Domain::Fe)).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (800, 200));
        for part in [&split.train, &split.test] {
            let fakes = part.iter().filter(|s| s.label() == Label::Fake).count();
            assert_eq!(fakes * 2, part.len());
        }
        let ids: BTreeSet<&str> = split
            .train
            .iter()
            .chain(&split.test)
            .map(|s| s.id())
            .collect();
        assert_eq!(ids.len(), 1000);
    }

    #[test]
    fn cross_domain_split() {
        let spec = small_spec(5);
        let p = Protocol::CrossDomain {
            train: Domain::T2i,
            test: Domain::Fs,
        };
        let split = build_split(&spec, &p).unwrap();
        assert!(split.train.iter().all(|s| s.domain() == Domain::T2i));
        assert!(split.test.iter().all(|s| s.domain() == Domain::Fs));
        assert_eq!(split.train.len(), 10);
        let same = Protocol::CrossDomain {
            train: Domain::Fs,
            test: Domain::Fs,
        };
        assert!(matches!(build_split(&spec, &same), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_pure() {
        let spec = small_spec(3);
        assert_eq!(
            build_split(&spec, &Protocol::Pooled).unwrap(),
            build_split(&spec, &Protocol::Pooled).unwrap()
        );
    }

    #[test]
    fn protocol_strings_round_trip() {
        for p in [
            Protocol::Pooled,
            Protocol::InDomain(Domain::I2i),
            Protocol::CrossDomain {
                train: Domain::Fe,
                test: Domain::T2i,
            },
        ] {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
        assert!("in-domain".parse::<Protocol>().is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = build_split(&small_spec(4), &Protocol::InDomain(Domain::I2i)).unwrap();
        export_corpus(&split, dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(
            manifest.lines().filter(|l| !l.starts_with('#')).count(),
            split.len()
        );
        let back = import_corpus(dir.path()).unwrap();
        assert_eq!(back.protocol, split.protocol);
        for (a, b) in split
            .train
            .iter()
            .chain(&split.test)
            .zip(back.train.iter().chain(&back.test))
        {
            assert_eq!(
                (a.id(), a.label(), a.domain()),
                (b.id(), b.label(), b.domain())
            );
            for (x, y) in a.pixels().iter().zip(b.pixels()) {
                assert!((x - y).abs() <= 1.0 / 255.0);
            }
        }
        export_corpus(&back, dir.path()).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap(),
            manifest
        );
    }

    #[test]
    fn import_reports_missing_and_unlisted_files() {
        let dir = tempfile::tempdir().unwrap();
        let split = build_split(&small_spec(2), &Protocol::InDomain(Domain::T2i)).unwrap();
        export_corpus(&split, dir.path()).unwrap();
        let victim = dir.path().join("t2i/train/t2i-real-00000.png");
        fs::remove_file(&victim).unwrap();
        let err = import_corpus(dir.path()).unwrap_err().to_string();
        assert!(err.contains("t2i-real-00000.png"), "{err}");

        export_corpus(&split, dir.path()).unwrap();
        fs::write(dir.path().join("t2i/test/stray.png"), b"x").unwrap();
        let err = import_corpus(dir.path()).unwrap_err().to_string();
        assert!(err.contains("stray.png"), "{err}");
    }
}
