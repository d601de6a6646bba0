//! The composite training objective: focal loss on the fake probability,
//! supervised contrastive loss on the normalized fused embedding, and a
//! center/margin loss on the frequency features.
//!
//! Batch reductions differ per term: focal is a batch mean, supcon is a mean
//! over anchors that have at least one positive, and the center term is a
//! plain sum over the batch. The center-separation penalty sums over ordered
//! class pairs, so with two classes the single pair counts twice.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::uniform;
use crate::spectral::Label;
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub mu: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.01,
            alpha: 0.25,
            gamma: 2.0,
            tau: 0.1,
            mu: 0.5,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str, v: f64| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("loss.{what} = {v} is out of range")))
            }
        };
        check(
            self.lambda1 >= 0.0 && self.lambda1.is_finite(),
            "lambda1",
            self.lambda1,
        )?;
        check(
            self.lambda2 >= 0.0 && self.lambda2.is_finite(),
            "lambda2",
            self.lambda2,
        )?;
        check(self.alpha > 0.0 && self.alpha < 1.0, "alpha", self.alpha)?;
        check(
            self.gamma >= 0.0 && self.gamma.is_finite(),
            "gamma",
            self.gamma,
        )?;
        check(self.tau > 0.0 && self.tau.is_finite(), "tau", self.tau)?;
        check(self.mu >= 0.0 && self.mu.is_finite(), "mu", self.mu)?;
        check(
            self.margin > 0.0 && self.margin.is_finite(),
            "margin",
            self.margin,
        )?;
        Ok(())
    }
}

/// Per-batch loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub supcon: f64,
    pub f_center: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("focal", self.focal),
            ("supcon", self.supcon),
            ("f_center", self.f_center),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// One trainable center per class, stored as a `2 x C_fre` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCenters(Tensor);

impl ClassCenters {
    pub fn new(centers: Tensor) -> Result<Self> {
        if centers.shape().len() != 2 || centers.shape()[0] != NUM_CLASSES {
            return Err(shape_err(
                "class_centers",
                format!("expected 2 x C, got {:?}", centers.shape()),
            ));
        }
        Ok(Self(centers))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Both centers drawn from the weight-init distribution, then the fake
/// center shifted by `margin / sqrt(C)` per coordinate.
pub fn init_centers(dim: usize, margin: f64, seed: u64) -> Tensor {
    let mut t = uniform(seed, "centers", &[NUM_CLASSES, dim], dim);
    let shift = margin / (dim as f64).sqrt();
    t.values_mut()[dim..].iter_mut().for_each(|v| *v += shift);
    t
}

fn label_mask(labels: &[Label], which: Label) -> Vec<f64> {
    labels
        .iter()
        .map(|&l| if l == which { 1.0 } else { 0.0 })
        .collect()
}

/// Mean over the batch of `-α(1-p)^γ ln p` (fake) / `-(1-α) p^γ ln(1-p)` (real).
pub fn focal_loss(g: &mut Graph, p: Var, labels: &[Label], alpha: f64, gamma: f64) -> Result<Var> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Contract("focal loss on an empty batch".into()));
    }
    if g.shape(p) != [n] {
        return Err(shape_err(
            "focal_loss",
            format!("p {:?} for {n} labels", g.shape(p)),
        ));
    }
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let neg_p = g.neg(p);
    let q = g.add_scalar(neg_p, 1.0);
    let ln_p = g.ln(p);
    let ln_q = g.ln(q);

    let q_pow = g.powf(q, gamma);
    let fake_term = g.mul(q_pow, ln_p)?;
    let fake_term = g.scale(fake_term, -alpha);
    let p_pow = g.powf(p, gamma);
    let real_term = g.mul(p_pow, ln_q)?;
    let real_term = g.scale(real_term, -(1.0 - alpha));

    let fake_mask = g.constant(&[n], label_mask(labels, Label::Fake))?;
    let real_mask = g.constant(&[n], label_mask(labels, Label::Real))?;
    let a = g.mul(fake_mask, fake_term)?;
    let b = g.mul(real_mask, real_term)?;
    let per_sample = g.add(a, b)?;
    Ok(g.mean(per_sample))
}

/// Supervised contrastive loss over `N x C` unit-norm embeddings.
pub fn supcon_loss(g: &mut Graph, z: Var, labels: &[Label], tau: f64) -> Result<Var> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "supcon needs at least 2 samples, got {n}"
        )));
    }
    let s = g.shape(z).to_vec();
    if s.len() != 2 || s[0] != n {
        return Err(shape_err("supcon_loss", format!("z {s:?} for {n} labels")));
    }
    for (i, row) in g.value(z).chunks(s[1]).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "supcon embedding {i} has norm {norm}, expected 1"
            )));
        }
    }

    // contrast set A(i): everything but i; positives P(i): same label, not i
    let mut contrast = vec![false; n * n];
    let mut pos_weight = vec![0.0; n * n];
    let mut anchor_weight = vec![0.0; n];
    let mut anchors = 0usize;
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        for j in 0..n {
            contrast[i * n + j] = j != i;
        }
        if !positives.is_empty() {
            anchors += 1;
            anchor_weight[i] = 1.0;
            let w = 1.0 / positives.len() as f64;
            for j in positives {
                pos_weight[i * n + j] = w;
            }
        }
    }
    if anchors == 0 {
        return g.constant(&[1], vec![0.0]);
    }

    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let logits = g.scale(sim, 1.0 / tau);
    let lse = g.logsumexp_rows(logits, &contrast)?;
    let aw = g.constant(&[n], anchor_weight)?;
    let lse = g.mul(lse, aw)?;
    let pw = g.constant(&[n, n], pos_weight)?;
    let pos = g.mul(logits, pw)?;
    // per anchor: log Σ_A exp(s/τ) - mean_P(s/τ)
    let lse_sum = g.sum(lse);
    let pos_sum = g.sum(pos);
    let total = g.sub(lse_sum, pos_sum)?;
    Ok(g.scale(total, 1.0 / anchors as f64))
}

/// `μ Σ_{j≠k} max(0, m - ‖c_j - c_k‖₂)²` over ordered class pairs.
pub fn center_separation(g: &mut Graph, centers: Var, mu: f64, margin: f64) -> Result<Var> {
    let s = g.shape(centers).to_vec();
    if s.len() != 2 || s[0] != NUM_CLASSES {
        return Err(shape_err(
            "f_center_loss",
            format!("centers {s:?}, expected 2 x C"),
        ));
    }
    let mut terms = Vec::new();
    for j in 0..NUM_CLASSES {
        for k in 0..NUM_CLASSES {
            if j == k {
                continue;
            }
            let cj = g.gather_rows(centers, &[j])?;
            let ck = g.gather_rows(centers, &[k])?;
            let d = g.sub(cj, ck)?;
            let d2 = g.mul(d, d)?;
            let ss = g.sum(d2);
            let dist = g.sqrt(ss);
            let neg = g.neg(dist);
            let gap = g.add_scalar(neg, margin);
            let hinge = g.relu(gap);
            terms.push(g.mul(hinge, hinge)?);
        }
    }
    let stacked = g.stack(&terms)?;
    let sum = g.sum(stacked);
    Ok(g.scale(sum, mu))
}

/// `Σ_i ‖f_i - c_{y_i}‖² + center_separation`.
pub fn f_center_loss(
    g: &mut Graph,
    f: Var,
    labels: &[Label],
    centers: Var,
    mu: f64,
    margin: f64,
) -> Result<Var> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Contract("center loss on an empty batch".into()));
    }
    let (sf, sc) = (g.shape(f).to_vec(), g.shape(centers).to_vec());
    if sf.len() != 2 || sf[0] != n || sc.len() != 2 || sc[1] != sf[1] {
        return Err(shape_err(
            "f_center_loss",
            format!("features {sf:?} / centers {sc:?} for {n} labels"),
        ));
    }
    let rows: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let assigned = g.gather_rows(centers, &rows)?;
    let d = g.sub(f, assigned)?;
    let d2 = g.mul(d, d)?;
    let pull = g.sum(d2);
    let push = center_separation(g, centers, mu, margin)?;
    g.add(pull, push)
}

/// `focal + λ₁·supcon + λ₂·f_center`, plus the component values.
pub fn fsc_total(
    g: &mut Graph,
    focal: Var,
    supcon: Var,
    f_center: Var,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let a = g.scale(supcon, weights.lambda1);
    let b = g.scale(f_center, weights.lambda2);
    let ab = g.add(focal, a)?;
    let total = g.add(ab, b)?;
    let breakdown = LossBreakdown {
        focal: g.scalar(focal),
        supcon: g.scalar(supcon),
        f_center: g.scalar(f_center),
        total: g.scalar(total),
    };
    Ok((total, breakdown))
}
