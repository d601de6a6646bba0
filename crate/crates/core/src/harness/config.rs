//! Run configuration, read from and written to TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CorpusSpec, Protocol};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{AttentionMode, ModelConfig, ModelVariant};
use crate::spectral::Domain;
use crate::tensor::OptimizerKind;

/// One switch per ablation row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Zero the frequency feature map and drop its center-loss pull term.
    pub disable_fre_branch: bool,
    /// Train with `lambda2 = 0`.
    pub disable_f_center: bool,
    /// Fix the channel gate at 1.
    pub disable_attention: bool,
}

impl AblationFlags {
    pub const FULL: Self = Self {
        disable_fre_branch: false,
        disable_f_center: false,
        disable_attention: false,
    };

    /// The full model followed by the three single-component ablations.
    pub fn suite() -> [Self; 4] {
        [
            Self::FULL,
            Self {
                disable_fre_branch: true,
                ..Self::FULL
            },
            Self {
                disable_f_center: true,
                ..Self::FULL
            },
            Self {
                disable_attention: true,
                ..Self::FULL
            },
        ]
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.disable_fre_branch {
            parts.push("w/o Fre-Branch");
        }
        if self.disable_f_center {
            parts.push("w/o L_f-center");
        }
        if self.disable_attention {
            parts.push("w/o M_c");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(", ")
        }
    }

    pub fn variant(&self, model: &ModelConfig) -> ModelVariant {
        ModelVariant {
            disable_fre_branch: self.disable_fre_branch,
            attention: if self.disable_attention {
                AttentionMode::Override(vec![1.0; model.fused_channels()])
            } else {
                AttentionMode::Learned
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds parameter initialization and batch order. The corpus has its
    /// own seed in `corpus.seed`.
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub protocol: Protocol,
    pub out_dir: PathBuf,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            batch_size: 32,
            protocol: Protocol::InDomain(Domain::T2i),
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("RunConfig always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        if self.model.image_size != self.corpus.image_size {
            return Err(Error::Config(format!(
                "model.image_size = {} does not match corpus.image_size = {}",
                self.model.image_size, self.corpus.image_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let lr = self.optimizer.learning_rate;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "optimizer.learning_rate = {lr} must be positive"
            )));
        }
        if let Protocol::CrossDomain { train, test } = self.protocol {
            if train == test {
                return Err(Error::Config(format!(
                    "protocol: cross-domain run trains and tests on {train}"
                )));
            }
        }
        Ok(())
    }

    /// Loss weights with the ablation flags applied.
    pub fn effective_loss(&self) -> LossWeights {
        let mut w = self.loss;
        if self.ablation.disable_f_center {
            w.lambda2 = 0.0;
        }
        w
    }

    /// SHA-256 (hex) of the canonical TOML form, ignoring `out_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg =
            RunConfig::from_toml_str("seed = 9\n[ablation]\ndisable_attention = true\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert!(cfg.ablation.disable_attention);
        assert_eq!(cfg.batch_size, 32);
    }

    #[test]
    fn diagnostics_name_the_field() {
        let err = RunConfig::from_toml_str("[loss]\ntau = -1.0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("loss.tau"), "{err}");
        let err = RunConfig::from_toml_str("[optimizer]\nlerning_rate = 1.0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("lerning_rate"), "{err}");
        let err = RunConfig::from_toml_str("protocol = \"sideways\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("sideways"), "{err}");
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = RunConfig::load(Path::new("/nonexistent/missing.cfg"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("/nonexistent/missing.cfg"), "{err}");
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn ablation_suite_has_one_flag_per_row() {
        let suite = AblationFlags::suite();
        assert_eq!(suite[0], AblationFlags::FULL);
        for f in &suite[1..] {
            let n = [
                f.disable_fre_branch,
                f.disable_f_center,
                f.disable_attention,
            ]
            .iter()
            .filter(|b| **b)
            .count();
            assert_eq!(n, 1);
        }
    }
}
