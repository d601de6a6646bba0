//! Ablation and cross-domain suites.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{AblationFlags, RunConfig};
use super::eval::{evaluate, ModelPredictor};
use super::train::train_on_split;
use crate::data::{build_split, CorpusSplit, Protocol};
use crate::error::{Error, Result};
use crate::model::DualBranchModel;
use crate::spectral::{Domain, ImageSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub flags: AblationFlags,
    pub accuracy: BTreeMap<Domain, f64>,
    /// Accuracy minus the full model's, per domain.
    pub delta: BTreeMap<Domain, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub protocol: String,
    pub domains: Vec<Domain>,
    /// Full model first, then one row per single ablation.
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, flags: AblationFlags) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.flags == flags)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("variant");
        for d in &self.domains {
            write!(s, "\t{}\tdelta_{}", d.tag(), d.tag()).unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.variant);
            for d in &self.domains {
                write!(s, "\t{:.4}\t{:+.4}", r.accuracy[d], r.delta[d]).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Trains the full model and each single ablation on the same corpus split
/// with the same seed, and tabulates per-domain test accuracy.
pub fn run_ablation_suite(config: &RunConfig) -> Result<AblationReport> {
    config.validate()?;
    let split = build_split(&config.corpus, &config.protocol)?;
    run_ablation_suite_on(config, &split)
}

pub fn run_ablation_suite_on(config: &RunConfig, split: &CorpusSplit) -> Result<AblationReport> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for flags in AblationFlags::suite() {
        let mut cfg = config.clone();
        cfg.ablation = flags;
        let outcome = train_on_split(&cfg, split)?;
        let accuracy: BTreeMap<Domain, f64> = outcome
            .report
            .final_eval
            .per_domain
            .iter()
            .map(|(d, c)| (*d, c.accuracy()))
            .collect();
        let delta = match rows.first() {
            Some(full) => accuracy
                .iter()
                .map(|(d, a)| (*d, a - full.accuracy[d]))
                .collect(),
            None => accuracy.keys().map(|d| (*d, 0.0)).collect(),
        };
        rows.push(AblationRow {
            variant: flags.label(),
            flags,
            accuracy,
            delta,
        });
    }
    Ok(AblationReport {
        protocol: split.protocol.to_string(),
        domains: rows[0].accuracy.keys().copied().collect(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainReport {
    pub train_domains: Vec<Domain>,
    pub test_domains: Vec<Domain>,
    /// `accuracy[train][test]`; the diagonal is in-domain accuracy.
    pub accuracy: BTreeMap<Domain, BTreeMap<Domain, f64>>,
    /// Per test domain: mean accuracy over runs that trained on another family.
    pub cross_domain_mean: BTreeMap<Domain, f64>,
}

impl CrossDomainReport {
    pub fn get(&self, train: Domain, test: Domain) -> f64 {
        self.accuracy[&train][&test]
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("train\\test");
        for d in &self.test_domains {
            write!(s, "\t{}", d.tag()).unwrap();
        }
        s.push('\n');
        for tr in &self.train_domains {
            s.push_str(tr.tag());
            for te in &self.test_domains {
                write!(s, "\t{:.4}", self.get(*tr, *te)).unwrap();
            }
            s.push('\n');
        }
        s.push_str("cross-domain mean");
        for te in &self.test_domains {
            match self.cross_domain_mean.get(te) {
                Some(m) => write!(s, "\t{m:.4}").unwrap(),
                None => s.push_str("\t-"),
            }
        }
        s.push('\n');
        s
    }
}

/// Trains one model per family in `train_domains` on that family's 80%
/// training split, then scores it on the held-out 20% of every family.
pub fn run_cross_domain(config: &RunConfig, train_domains: &[Domain]) -> Result<CrossDomainReport> {
    config.validate()?;
    if train_domains.is_empty() {
        return Err(Error::Config(
            "cross-domain suite needs at least one training family".into(),
        ));
    }
    let splits: BTreeMap<Domain, CorpusSplit> = Domain::ALL
        .iter()
        .map(|&d| Ok((d, build_split(&config.corpus, &Protocol::InDomain(d))?)))
        .collect::<Result<_>>()?;
    let model = DualBranchModel::new(config.model.clone())?;
    let variant = config.ablation.variant(&config.model);
    let mut accuracy = BTreeMap::new();
    for &tr in train_domains {
        let mut cfg = config.clone();
        cfg.protocol = Protocol::InDomain(tr);
        let outcome = train_on_split(&cfg, &splits[&tr])?;
        let predictor = ModelPredictor {
            model: &model,
            params: &outcome.params,
            variant: variant.clone(),
        };
        let mut row = BTreeMap::new();
        for (&te, split) in &splits {
            let test: &[ImageSample] = &split.test;
            row.insert(te, evaluate(&predictor, test)?.accuracy);
        }
        accuracy.insert(tr, row);
    }
    let mut cross_domain_mean = BTreeMap::new();
    for te in Domain::ALL {
        let others: Vec<f64> = train_domains
            .iter()
            .filter(|&&tr| tr != te)
            .map(|tr| accuracy[tr][&te])
            .collect();
        if !others.is_empty() {
            cross_domain_mean.insert(te, others.iter().sum::<f64>() / others.len() as f64);
        }
    }
    Ok(CrossDomainReport {
        train_domains: train_domains.to_vec(),
        test_domains: Domain::ALL.to_vec(),
        accuracy,
        cross_domain_mean,
    })
}
