//! The dual-branch detector: an RGB backbone and a spectrum backbone whose
//! feature maps are concatenated, gated per channel, pooled and classified.
//!
//! Backbones are plain `conv3x3 → bias → ReLU` stacks without residual
//! connections or normalization layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::spectral::{frequency_input, ImageSample, SpectrumOptions};
use crate::tensor::{BoundParams, Graph, ParameterSet, Tensor, Var};

pub const KERNEL_SIZE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(0)
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    fn validate(&self, branch: &str, image_size: usize) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Config(format!(
                "{branch}.stage_channels must not be empty"
            )));
        }
        if self.stage_channels.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "{branch}: {} stage channel counts but {} strides",
                self.stage_channels.len(),
                self.strides.len()
            )));
        }
        if self.stage_channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config(format!(
                "{branch}: channels and strides must be positive"
            )));
        }
        if !image_size.is_multiple_of(self.total_stride()) {
            return Err(Error::Config(format!(
                "{branch}: total stride {} does not divide image size {image_size}",
                self.total_stride()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub rgb: BackboneConfig,
    pub fre: BackboneConfig,
    /// Channel reduction ratio of the attention MLP.
    pub attention_reduction: usize,
    pub head_hidden: usize,
    pub spectrum: SpectrumOptions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            rgb: BackboneConfig {
                stage_channels: vec![16, 32, 64],
                strides: vec![2, 2, 2],
            },
            fre: BackboneConfig {
                stage_channels: vec![8, 16, 32],
                strides: vec![2, 2, 2],
            },
            attention_reduction: 4,
            head_hidden: 32,
            spectrum: SpectrumOptions::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 2 {
            return Err(Error::Config(format!(
                "image_size must be a power of two, got {}",
                self.image_size
            )));
        }
        self.rgb.validate("rgb", self.image_size)?;
        self.fre.validate("fre", self.image_size)?;
        if self.rgb.total_stride() != self.fre.total_stride() {
            return Err(Error::Config(format!(
                "branches end at different spatial sizes ({} vs {})",
                self.image_size / self.rgb.total_stride(),
                self.image_size / self.fre.total_stride()
            )));
        }
        let c = self.fused_channels();
        if self.attention_reduction == 0 || !c.is_multiple_of(self.attention_reduction) {
            return Err(Error::Config(format!(
                "attention_reduction {} does not divide fused channel count {c}",
                self.attention_reduction
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn rgb_channels(&self) -> usize {
        self.rgb.out_channels()
    }

    pub fn fre_channels(&self) -> usize {
        self.fre.out_channels()
    }

    pub fn fused_channels(&self) -> usize {
        self.rgb_channels() + self.fre_channels()
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / self.rgb.total_stride()
    }
}

/// How the channel gate is produced.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum AttentionMode {
    #[default]
    Learned,
    /// Use this vector as `M_c` instead of the learned gate.
    Override(Vec<f64>),
}

/// Computation switches for the ablation variants.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelVariant {
    /// Replace the frequency feature map by zeros.
    pub disable_fre_branch: bool,
    pub attention: AttentionMode,
}

/// Branch inputs derived from one image. Not differentiable.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    pub rgb: Tensor,
    pub spectrum: Tensor,
}

impl PreparedInput {
    pub fn new(image: &ImageSample, opts: SpectrumOptions) -> Self {
        Self {
            rgb: image.to_chw(),
            spectrum: frequency_input(image, opts),
        }
    }
}

/// Pooled, attention-weighted embedding plus the gate that produced it.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeature {
    pub embedding: Var,
    pub attention: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Probability of the fake class, shape `[1]`.
    pub p: Var,
    /// L2-normalized fused embedding, shape `[C]`.
    pub z: Var,
    /// GAP of the frequency feature map, shape `[C_fre]`.
    pub f_fre: Var,
    pub attention: Var,
    pub embedding: Var,
    pub rgb_map: Var,
    pub fre_map: Var,
}

/// Conv stack: each stage is a padded 3x3 convolution, a per-channel bias
/// and a ReLU.
pub fn backbone(
    g: &mut Graph,
    input: Var,
    stages: &[(Var, Var)],
    strides: &[usize],
) -> Result<Var> {
    let mut x = input;
    for (&(w, b), &s) in stages.iter().zip(strides) {
        let y = g.conv2d(x, w, s, KERNEL_SIZE / 2)?;
        let y = g.add(y, b)?;
        x = g.relu(y);
    }
    Ok(x)
}

/// `M_c = σ(MLP(avgpool(F)) + MLP(maxpool(F)))` with one MLP shared by both
/// descriptors. `w1` is `(C/r) x C`, `w2` is `C x (C/r)`.
pub fn channel_attention(g: &mut Graph, features: Var, w1: Var, w2: Var) -> Result<Var> {
    let c = g.shape(features)[0];
    let f_avg = g.global_avg_pool(features)?;
    let f_max = g.global_max_pool(features)?;
    let desc = g.stack(&[f_avg, f_max])?;
    let desc = g.transpose(desc)?; // C x 2
    let hidden = g.matmul(w1, desc)?;
    let hidden = g.relu(hidden);
    let out = g.matmul(w2, hidden)?; // C x 2
    let ones = g.constant(&[2, 1], vec![1.0, 1.0])?;
    let summed = g.matmul(out, ones)?;
    let summed = g.reshape(summed, &[c])?;
    Ok(g.sigmoid(summed))
}

/// Concatenates the branch maps, scales channel `k` by `attention[k]` and
/// global-average-pools to a `C`-vector.
pub fn fuse(g: &mut Graph, rgb_map: Var, fre_map: Var, attention: Var) -> Result<Var> {
    let concat = g.concat_channels(rgb_map, fre_map)?;
    fuse_concat(g, concat, attention)
}

fn fuse_concat(g: &mut Graph, concat: Var, attention: Var) -> Result<Var> {
    let c = g.shape(concat)[0];
    if g.shape(attention) != [c] {
        return Err(Error::Shape {
            op: "fuse",
            detail: format!("attention {:?} for {c} channels", g.shape(attention)),
        });
    }
    let gate = g.reshape(attention, &[c, 1, 1])?;
    let weighted = g.mul(concat, gate)?;
    g.global_avg_pool(weighted)
}

/// Two fully connected layers: hidden ReLU, sigmoid output. Returns `[1]`.
pub fn classify(g: &mut Graph, embedding: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let c = g.shape(embedding)[0];
    let col = g.reshape(embedding, &[c, 1])?;
    let h = g.matmul(w1, col)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h);
    let logit = g.matmul(w2, h)?;
    let logit = g.add(logit, b2)?;
    let p = g.sigmoid(logit);
    g.reshape(p, &[1])
}

/// `v / max(‖v‖₂, 1e-12)`.
pub fn l2_normalize(g: &mut Graph, v: Var) -> Result<Var> {
    let sq = g.mul(v, v)?;
    let ss = g.sum(sq);
    let norm = g.sqrt(ss);
    let norm = g.clamp(norm, 1e-12, f64::INFINITY);
    g.div(v, norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualBranchModel {
    config: ModelConfig,
}

impl DualBranchModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn prepare(&self, image: &ImageSample) -> Result<PreparedInput> {
        let n = self.config.image_size;
        if image.height() != n || image.width() != n {
            return Err(Error::Shape {
                op: "prepare",
                detail: format!(
                    "image `{}` is {}x{}, model expects {n}x{n}",
                    image.id(),
                    image.height(),
                    image.width()
                ),
            });
        }
        Ok(PreparedInput::new(image, self.config.spectrum))
    }

    /// Fresh parameters: He-uniform `±sqrt(6/fan_in)` for weights feeding a
    /// ReLU, `±sqrt(1/fan_in)` for the rest, biases zero,
    /// class centers separated by roughly `margin`. Every tensor draws from
    /// its own named stream.
    pub fn init_parameters(&self, seed: u64, margin: f64) -> Result<ParameterSet> {
        let cfg = &self.config;
        let mut ps = ParameterSet::new();
        for (branch, bb, c_in) in [("rgb", &cfg.rgb, 3), ("fre", &cfg.fre, 1)] {
            let mut prev = c_in;
            for (i, &c) in bb.stage_channels.iter().enumerate() {
                let k = KERNEL_SIZE;
                let name = format!("{branch}.stage{i}.weight");
                ps.insert(
                    &name,
                    he_uniform(seed, &name, &[c, prev, k, k], prev * k * k),
                )?;
                ps.insert(format!("{branch}.stage{i}.bias"), Tensor::zeros(&[c, 1, 1]))?;
                prev = c;
            }
        }
        let c = cfg.fused_channels();
        let cr = c / cfg.attention_reduction;
        ps.insert(
            "attention.w1",
            he_uniform(seed, "attention.w1", &[cr, c], c),
        )?;
        ps.insert("attention.w2", uniform(seed, "attention.w2", &[c, cr], cr))?;
        let hid = cfg.head_hidden;
        ps.insert("head.w1", he_uniform(seed, "head.w1", &[hid, c], c))?;
        ps.insert("head.b1", Tensor::zeros(&[hid, 1]))?;
        ps.insert("head.w2", uniform(seed, "head.w2", &[1, hid], hid))?;
        ps.insert("head.b2", Tensor::zeros(&[1, 1]))?;
        ps.insert(
            "centers",
            crate::losses::init_centers(cfg.fre_channels(), margin, seed),
        )?;
        Ok(ps)
    }

    fn stages(&self, params: &BoundParams, branch: &str, n: usize) -> Result<Vec<(Var, Var)>> {
        (0..n)
            .map(|i| {
                Ok((
                    params.get(&format!("{branch}.stage{i}.weight"))?,
                    params.get(&format!("{branch}.stage{i}.bias"))?,
                ))
            })
            .collect()
    }

    fn check_input(&self, g: &Graph, input: Var, channels: usize, op: &'static str) -> Result<()> {
        let n = self.config.image_size;
        if g.shape(input) != [channels, n, n] {
            return Err(Error::Shape {
                op,
                detail: format!(
                    "input {:?}, expected {:?}",
                    g.shape(input),
                    [channels, n, n]
                ),
            });
        }
        Ok(())
    }

    pub fn rgb_branch(&self, g: &mut Graph, params: &BoundParams, input: Var) -> Result<Var> {
        self.check_input(g, input, 3, "rgb_branch")?;
        let bb = &self.config.rgb;
        let stages = self.stages(params, "rgb", bb.stage_channels.len())?;
        backbone(g, input, &stages, &bb.strides)
    }

    pub fn fre_branch(&self, g: &mut Graph, params: &BoundParams, input: Var) -> Result<Var> {
        self.check_input(g, input, 1, "fre_branch")?;
        let bb = &self.config.fre;
        let stages = self.stages(params, "fre", bb.stage_channels.len())?;
        backbone(g, input, &stages, &bb.strides)
    }

    pub fn channel_attention(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        concat: Var,
    ) -> Result<Var> {
        let c = self.config.fused_channels();
        if g.shape(concat)[0] != c {
            return Err(Error::Shape {
                op: "channel_attention",
                detail: format!("{} channels, attention expects {c}", g.shape(concat)[0]),
            });
        }
        channel_attention(
            g,
            concat,
            params.get("attention.w1")?,
            params.get("attention.w2")?,
        )
    }

    pub fn fuse(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        rgb_map: Var,
        fre_map: Var,
        mode: &AttentionMode,
    ) -> Result<FusedFeature> {
        let concat = g.concat_channels(rgb_map, fre_map)?;
        let attention = match mode {
            AttentionMode::Learned => self.channel_attention(g, params, concat)?,
            AttentionMode::Override(v) => g.constant(&[v.len()], v.clone())?,
        };
        let embedding = fuse_concat(g, concat, attention)?;
        Ok(FusedFeature {
            embedding,
            attention,
        })
    }

    pub fn classify(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        feature: &FusedFeature,
    ) -> Result<Var> {
        let c = g.shape(feature.embedding)[0];
        if c != self.config.fused_channels() {
            return Err(Error::Shape {
                op: "classify",
                detail: format!(
                    "embedding of {c}, head expects {}",
                    self.config.fused_channels()
                ),
            });
        }
        classify(
            g,
            feature.embedding,
            params.get("head.w1")?,
            params.get("head.b1")?,
            params.get("head.w2")?,
            params.get("head.b2")?,
        )
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        input: &PreparedInput,
        variant: &ModelVariant,
    ) -> Result<ForwardOutput> {
        let rgb_in = g.leaf(&input.rgb);
        let rgb_map = self.rgb_branch(g, params, rgb_in)?;
        let fre_map = if variant.disable_fre_branch {
            let h = self.config.feature_size();
            let c = self.config.fre_channels();
            g.constant(&[c, h, h], vec![0.0; c * h * h])?
        } else {
            let fre_in = g.leaf(&input.spectrum);
            self.fre_branch(g, params, fre_in)?
        };
        let fused = self.fuse(g, params, rgb_map, fre_map, &variant.attention)?;
        let p = self.classify(g, params, &fused)?;
        let z = l2_normalize(g, fused.embedding)?;
        let f_fre = g.global_avg_pool(fre_map)?;
        Ok(ForwardOutput {
            p,
            z,
            f_fre,
            attention: fused.attention,
            embedding: fused.embedding,
            rgb_map,
            fre_map,
        })
    }

    /// Probability of the fake class for one image.
    pub fn predict(
        &self,
        params: &ParameterSet,
        image: &ImageSample,
        variant: &ModelVariant,
    ) -> Result<f64> {
        let input = self.prepare(image)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let out = self.forward(&mut g, &bound, &input, variant)?;
        Ok(g.scalar(out.p))
    }

    /// Checks that `params` has exactly the tensors this architecture needs.
    pub fn check_parameters(&self, params: &ParameterSet) -> Result<()> {
        let expected = self.init_parameters(0, 1.0)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                None => return Err(Error::Load(format!("checkpoint lacks parameter `{name}`"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Load(format!(
                        "parameter `{name}` has shape {:?}, architecture needs {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.names().find(|n| expected.get(n).is_none()) {
            return Err(Error::Load(format!(
                "checkpoint has unexpected parameter `{extra}`"
            )));
        }
        Ok(())
    }
}

pub(crate) fn uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    uniform_bounded(seed, name, shape, (1.0 / fan_in as f64).sqrt())
}

/// He-uniform, for weights feeding a ReLU.
fn he_uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    uniform_bounded(seed, name, shape, (6.0 / fan_in as f64).sqrt())
}

fn uniform_bounded(seed: u64, name: &str, shape: &[usize], s: f64) -> Tensor {
    let mut r = rng::stream(seed, name);
    let n = shape.iter().product();
    let values = (0..n).map(|_| r.gen_range(-s..=s)).collect();
    Tensor::new(shape.to_vec(), values).expect("consistent init shape")
}
