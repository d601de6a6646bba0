//! The training loop and the files a run leaves behind.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{evaluate, EvalReport, ModelPredictor, THRESHOLD};
use crate::data::{build_split, CorpusSplit};
use crate::error::{Error, Result};
use crate::losses::{
    center_separation, f_center_loss, focal_loss, fsc_total, supcon_loss, LossBreakdown,
};
use crate::model::{DualBranchModel, PreparedInput};
use crate::rng;
use crate::spectral::Label;
use crate::tensor::{write_checkpoint, Graph, Optimizer, ParameterSet};

pub const REPORT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

const METRICS_HEADER: &str = "# dualbranch-metrics v1";

/// Per-epoch aggregates. Loss columns are batch means; `total_median` is the
/// median batch total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub focal: f64,
    pub supcon: f64,
    pub f_center: f64,
    pub total: f64,
    pub total_median: f64,
    pub train_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub config_hash: String,
    pub protocol: String,
    pub ablation: String,
    pub epochs: Vec<EpochMetrics>,
    /// Test-set evaluation of the freshly initialized model.
    pub initial: EvalReport,
    #[serde(rename = "final")]
    pub final_eval: EvalReport,
    pub wall_clock_seconds: f64,
}

pub struct TrainOutcome {
    pub params: ParameterSet,
    pub report: MetricsReport,
    pub steps: Vec<StepRecord>,
}

/// Builds the corpus split named by the config, then trains on it.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let split = build_split(&config.corpus, &config.protocol)?;
    train_on_split(config, &split)
}

pub fn train_on_split(config: &RunConfig, split: &CorpusSplit) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() && config.epochs > 0 {
        return Err(Error::Contract("training split is empty".into()));
    }
    let started = Instant::now();
    let model = DualBranchModel::new(config.model.clone())?;
    let weights = config.effective_loss();
    let variant = config.ablation.variant(&config.model);
    let mut params = model.init_parameters(config.seed, weights.margin)?;
    let mut optimizer = Optimizer::new(config.optimizer.kind, config.optimizer.learning_rate)?;

    let eval_now = |params: &ParameterSet| {
        evaluate(
            &ModelPredictor {
                model: &model,
                params,
                variant: variant.clone(),
            },
            &split.test,
        )
    };
    let initial = eval_now(&params)?;

    let inputs: Vec<PreparedInput> = split
        .train
        .iter()
        .map(|s| model.prepare(s))
        .collect::<Result<_>>()?;
    let labels: Vec<Label> = split.train.iter().map(|s| s.label()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut steps = Vec::new();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng::stream(
            config.seed,
            &format!("shuffle/epoch{epoch}"),
        ));
        let mut correct = 0usize;
        let mut batch_losses = Vec::new();

        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let batch_labels: Vec<Label> = idx.iter().map(|&i| labels[i]).collect();
            let (mut ps, mut zs, mut fs) = (Vec::new(), Vec::new(), Vec::new());
            for &i in idx {
                let out = model.forward(&mut g, &bound, &inputs[i], &variant)?;
                ps.push(out.p);
                zs.push(out.z);
                fs.push(out.f_fre);
            }
            let n = idx.len();
            let p = g.stack(&ps)?;
            let p = g.reshape(p, &[n])?;
            for (&pi, &l) in g.value(p).iter().zip(&batch_labels) {
                if (pi > THRESHOLD) == (l == Label::Fake) {
                    correct += 1;
                }
            }

            let focal = focal_loss(&mut g, p, &batch_labels, weights.alpha, weights.gamma)?;
            let supcon = if n >= 2 {
                let z = g.stack(&zs)?;
                supcon_loss(&mut g, z, &batch_labels, weights.tau)?
            } else {
                g.constant(&[1], vec![0.0])?
            };
            let centers = bound.get("centers")?;
            let f_center = if variant.disable_fre_branch {
                // no frequency features to pull; only the center margin remains
                center_separation(&mut g, centers, weights.mu, weights.margin)?
            } else {
                let f = g.stack(&fs)?;
                f_center_loss(
                    &mut g,
                    f,
                    &batch_labels,
                    centers,
                    weights.mu,
                    weights.margin,
                )?
            };
            let (total, loss) = fsc_total(&mut g, focal, supcon, f_center, &weights)?;
            if let Some(component) = loss.first_non_finite() {
                return Err(Error::NonFinite {
                    component,
                    epoch,
                    batch,
                });
            }

            g.backward(total)?;
            params.accumulate_grads(&g, &bound)?;
            optimizer.step(&mut params)?;
            params.clear_grads();
            batch_losses.push(loss);
            steps.push(StepRecord { epoch, batch, loss });
        }
        epochs.push(aggregate(epoch, &batch_losses, correct, inputs.len()));
    }

    let final_eval = eval_now(&params)?;
    Ok(TrainOutcome {
        params,
        report: MetricsReport {
            version: REPORT_VERSION,
            config_hash: config.hash(),
            protocol: config.protocol.to_string(),
            ablation: config.ablation.label(),
            epochs,
            initial,
            final_eval,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        },
        steps,
    })
}

fn aggregate(epoch: usize, losses: &[LossBreakdown], correct: usize, seen: usize) -> EpochMetrics {
    let n = losses.len() as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| losses.iter().map(f).sum::<f64>() / n;
    let mut totals: Vec<f64> = losses.iter().map(|l| l.total).collect();
    totals.sort_by(f64::total_cmp);
    let m = totals.len();
    let total_median = if m % 2 == 1 {
        totals[m / 2]
    } else {
        0.5 * (totals[m / 2 - 1] + totals[m / 2])
    };
    EpochMetrics {
        epoch,
        focal: mean(|l| l.focal),
        supcon: mean(|l| l.supcon),
        f_center: mean(|l| l.f_center),
        total: mean(|l| l.total),
        total_median,
        train_acc: correct as f64 / seen as f64,
    }
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut s = format!("{METRICS_HEADER}\nepoch,focal,supcon,f_center,total,train_acc\n");
    for e in &report.epochs {
        writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{:?}",
            e.epoch, e.focal, e.supcon, e.f_center, e.total, e.train_acc
        )
        .unwrap();
    }
    s
}

pub fn steps_csv(steps: &[StepRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\nepoch,batch,focal,supcon,f_center,total\n");
    for r in steps {
        let l = &r.loss;
        writeln!(
            s,
            "{},{},{:?},{:?},{:?},{:?}",
            r.epoch, r.batch, l.focal, l.supcon, l.f_center, l.total
        )
        .unwrap();
    }
    s
}

/// Writes the checkpoint, metrics, per-step losses, summary and resolved
/// config into `dir`.
pub fn write_run(outcome: &TrainOutcome, config: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut ckpt = BufWriter::new(File::create(dir.join(CHECKPOINT_FILE))?);
    write_checkpoint(&outcome.params, &mut ckpt)?;
    ckpt.flush()?;
    fs::write(dir.join(METRICS_FILE), metrics_csv(&outcome.report))?;
    fs::write(dir.join(STEPS_FILE), steps_csv(&outcome.steps))?;
    let summary = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
    fs::write(dir.join(SUMMARY_FILE), summary + "\n")?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml_string())?;
    Ok(())
}
