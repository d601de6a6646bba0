//! Thresholded evaluation and confusion counts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DualBranchModel, ModelConfig, ModelVariant};
use crate::spectral::{Domain, ImageSample, Label};
use crate::tensor::{read_checkpoint, ParameterSet};

/// `p > THRESHOLD` is a fake prediction.
pub const THRESHOLD: f64 = 0.5;

/// Anything that maps an image to a fake-class probability.
pub trait Predictor {
    fn predict(&self, image: &ImageSample) -> Result<f64>;
}

impl<F> Predictor for F
where
    F: Fn(&ImageSample) -> Result<f64>,
{
    fn predict(&self, image: &ImageSample) -> Result<f64> {
        self(image)
    }
}

pub struct ModelPredictor<'a> {
    pub model: &'a DualBranchModel,
    pub params: &'a ParameterSet,
    pub variant: ModelVariant,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, image: &ImageSample) -> Result<f64> {
        self.model.predict(self.params, image, &self.variant)
    }
}

/// Fake is the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, truth: Label, predicted_fake: bool) {
        match (truth, predicted_fake) {
            (Label::Fake, true) => self.tp += 1,
            (Label::Real, true) => self.fp += 1,
            (Label::Real, false) => self.tn += 1,
            (Label::Fake, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `(TP + TN) / total`; 0 for an empty table.
    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / self.total() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: Confusion,
    pub per_domain: BTreeMap<Domain, Confusion>,
}

impl EvalReport {
    pub fn domain_accuracy(&self, d: Domain) -> Option<f64> {
        self.per_domain.get(&d).map(Confusion::accuracy)
    }
}

pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    samples: &[ImageSample],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation on an empty test set".into()));
    }
    let mut confusion = Confusion::default();
    let mut per_domain: BTreeMap<Domain, Confusion> = BTreeMap::new();
    for s in samples {
        let fake = predictor.predict(s)? > THRESHOLD;
        confusion.record(s.label(), fake);
        per_domain
            .entry(s.domain())
            .or_default()
            .record(s.label(), fake);
    }
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        confusion,
        per_domain,
    })
}

/// Loads a checkpoint, checks it against the architecture, and evaluates.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    model: &ModelConfig,
    variant: &ModelVariant,
    samples: &[ImageSample],
) -> Result<EvalReport> {
    let file = File::open(checkpoint).map_err(|e| {
        Error::Load(format!(
            "cannot open checkpoint {}: {e}",
            checkpoint.display()
        ))
    })?;
    let params = read_checkpoint(BufReader::new(file))?;
    let model = DualBranchModel::new(model.clone())?;
    model.check_parameters(&params)?;
    evaluate(
        &ModelPredictor {
            model: &model,
            params: &params,
            variant: variant.clone(),
        },
        samples,
    )
}
