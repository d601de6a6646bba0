//! Finite-difference gradient checks over every differentiable op, the
//! three loss terms and the model's composite pieces.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{gradient_error, DEFAULT_STEP};
use crate::losses::{f_center_loss, focal_loss, fsc_total, supcon_loss, LossWeights};
use crate::model::{
    channel_attention, classify, fuse, l2_normalize, BackboneConfig, DualBranchModel, ModelConfig,
    ModelVariant, PreparedInput,
};
use crate::rng;
use crate::spectral::{Label, SpectrumOptions};
use crate::tensor::{BoundParams, Graph, PoolKind, Tensor, Var};

pub const MIN_TRIALS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Losses,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Ops, Scope::Losses, Scope::Model];

    /// Largest admissible relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Ops => 1e-4,
            Scope::Losses => 1e-5,
            Scope::Model => 1e-3,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Losses => "losses",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "losses" => Ok(Scope::Losses),
            "model" => Ok(Scope::Model),
            _ => Err(Error::Config(format!(
                "unknown gradcheck scope `{s}` (ops, losses, model)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub target: String,
    pub scope: Scope,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("scope\ttarget\ttrials\tmax_rel_error\ttolerance\tresult\n");
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{}\t{}\t{:.3e}\t{:.0e}\t{}",
                r.scope,
                r.target,
                r.trials,
                r.max_error,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" }
            )
            .unwrap();
        }
        s
    }
}

type Objective = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One randomized instance of a check.
struct Trial {
    inputs: Vec<Tensor>,
    /// `None` probes every element.
    probes: Option<Vec<(usize, usize)>>,
    f: Objective,
}

struct Target {
    name: &'static str,
    scope: Scope,
    build: fn(&mut ChaCha8Rng) -> Result<Trial>,
}

/// Runs every target in `scopes` for `trials` seeded trials each.
pub fn run_gradcheck(scopes: &[Scope], trials: usize, seed: u64) -> Result<GradReport> {
    if trials < 1 {
        return Err(Error::Config("gradcheck needs at least one trial".into()));
    }
    let mut rows = Vec::new();
    for t in targets().into_iter().filter(|t| scopes.contains(&t.scope)) {
        let mut max_error: f64 = 0.0;
        for k in 0..trials {
            let mut r = rng::stream(seed, &format!("gradcheck/{}/{k}", t.name));
            let trial = (t.build)(&mut r)?;
            let err = gradient_error(
                &trial.f,
                &trial.inputs,
                trial.probes.as_deref(),
                DEFAULT_STEP,
            )?;
            // NaN must fail, so compare with a negated test
            max_error = if err.is_nan() {
                f64::NAN
            } else {
                max_error.max(err)
            };
        }
        let tolerance = t.scope.tolerance();
        rows.push(GradRow {
            target: t.name.to_string(),
            scope: t.scope,
            trials,
            max_error,
            tolerance,
            passed: max_error < tolerance,
        });
    }
    Ok(GradReport { rows })
}

/// Names of all targets in `scope`, in report order.
pub fn target_names(scope: Scope) -> Vec<&'static str> {
    targets()
        .into_iter()
        .filter(|t| t.scope == scope)
        .map(|t| t.name)
        .collect()
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.gen_range(lo..hi)).collect(),
    )
    .expect("nonzero shape")
}

/// Magnitudes in `[lo, hi)` with random sign, keeping clear of kinks at 0.
fn signed(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(r, shape, lo, hi);
    for v in t.values_mut() {
        if r.gen::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn labels(r: &mut ChaCha8Rng, n: usize) -> Vec<Label> {
    // both classes always present
    (0..n)
        .map(|i| match i {
            0 => Label::Real,
            1 => Label::Fake,
            _ if r.gen::<bool>() => Label::Fake,
            _ => Label::Real,
        })
        .collect()
}

/// Reduces `out` to a scalar with fixed random weights, so every output
/// element contributes a distinct gradient.
fn readout(g: &mut Graph, out: Var, weights: &[f64]) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(&shape, weights.to_vec())?;
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Builds a trial whose objective is `readout(op(inputs))`.
fn op_trial<F>(r: &mut ChaCha8Rng, inputs: Vec<Tensor>, out_len: usize, op: F) -> Trial
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
{
    let w: Vec<f64> = (0..out_len).map(|_| r.gen_range(-1.0..1.0)).collect();
    Trial {
        inputs,
        probes: None,
        f: Box::new(move |g, v| {
            let out = op(g, v)?;
            readout(g, out, &w)
        }),
    }
}

fn unary_trial(r: &mut ChaCha8Rng, lo: f64, hi: f64, op: fn(&mut Graph, Var) -> Var) -> Trial {
    let x = uniform(r, &[3, 4], lo, hi);
    let n = x.numel();
    op_trial(r, vec![x], n, move |g, v| Ok(op(g, v[0])))
}

/// Row-wise L2 normalization of an `n x c` matrix, built from graph ops.
fn normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let (n, c) = (g.shape(x)[0], g.shape(x)[1]);
    let rows: Vec<Var> = (0..n)
        .map(|i| {
            let row = g.gather_rows(x, &[i])?;
            l2_normalize(g, row)
        })
        .collect::<Result<_>>()?;
    let s = g.stack(&rows)?;
    g.reshape(s, &[n, c])
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        rgb: BackboneConfig {
            stage_channels: vec![3, 4],
            strides: vec![2, 2],
        },
        fre: BackboneConfig {
            stage_channels: vec![2, 2],
            strides: vec![2, 2],
        },
        attention_reduction: 3,
        head_hidden: 4,
        spectrum: SpectrumOptions::default(),
    }
}

fn targets() -> Vec<Target> {
    use Scope::*;
    let t = |name, scope, build| Target { name, scope, build };
    vec![
        t("relu", Ops, |r| {
            let ins = vec![signed(r, &[3, 4], 0.05, 2.0)];
            Ok(op_trial(r, ins, 12, |g, v| Ok(g.relu(v[0]))))
        }),
        t("sigmoid", Ops, |r| {
            Ok(unary_trial(r, -3.0, 3.0, Graph::sigmoid))
        }),
        t("log1p", Ops, |r| {
            Ok(unary_trial(r, -0.5, 2.0, Graph::log1p))
        }),
        t("exp", Ops, |r| Ok(unary_trial(r, -2.0, 2.0, Graph::exp))),
        t("neg", Ops, |r| Ok(unary_trial(r, -2.0, 2.0, Graph::neg))),
        t("ln", Ops, |r| Ok(unary_trial(r, 0.2, 3.0, Graph::ln))),
        t("sqrt", Ops, |r| Ok(unary_trial(r, 0.2, 3.0, Graph::sqrt))),
        t("add_broadcast", Ops, |r| {
            let ins = vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[4], -2.0, 2.0)];
            Ok(op_trial(r, ins, 12, |g, v| g.add(v[0], v[1])))
        }),
        t("sub_broadcast", Ops, |r| {
            let ins = vec![
                uniform(r, &[2, 3, 4], -2.0, 2.0),
                uniform(r, &[3, 1], -2.0, 2.0),
            ];
            Ok(op_trial(r, ins, 24, |g, v| g.sub(v[0], v[1])))
        }),
        t("mul_broadcast", Ops, |r| {
            let ins = vec![
                uniform(r, &[3, 4], -2.0, 2.0),
                uniform(r, &[3, 1], -2.0, 2.0),
            ];
            Ok(op_trial(r, ins, 12, |g, v| g.mul(v[0], v[1])))
        }),
        t("div_broadcast", Ops, |r| {
            let ins = vec![uniform(r, &[3, 4], -2.0, 2.0), signed(r, &[4], 0.5, 2.0)];
            Ok(op_trial(r, ins, 12, |g, v| g.div(v[0], v[1])))
        }),
        t("powf", Ops, |r| {
            let ins = vec![uniform(r, &[3, 4], 0.2, 2.0)];
            Ok(op_trial(r, ins, 12, |g, v| Ok(g.powf(v[0], 2.5))))
        }),
        t("scale", Ops, |r| {
            let ins = vec![uniform(r, &[3, 4], -2.0, 2.0)];
            Ok(op_trial(r, ins, 12, |g, v| Ok(g.scale(v[0], -1.7))))
        }),
        t("add_scalar", Ops, |r| {
            let ins = vec![uniform(r, &[3, 4], -2.0, 2.0)];
            Ok(op_trial(r, ins, 12, |g, v| {
                let y = g.add_scalar(v[0], 0.3);
                g.mul(y, y)
            }))
        }),
        t("clamp", Ops, |r| {
            let ins = vec![uniform(r, &[4, 4], -2.0, 2.0)];
            Ok(op_trial(r, ins, 16, |g, v| Ok(g.clamp(v[0], -1.0, 1.0))))
        }),
        t("matmul", Ops, |r| {
            let ins = vec![
                uniform(r, &[3, 4], -1.0, 1.0),
                uniform(r, &[4, 2], -1.0, 1.0),
            ];
            Ok(op_trial(r, ins, 6, |g, v| g.matmul(v[0], v[1])))
        }),
        t("transpose", Ops, |r| {
            let ins = vec![uniform(r, &[3, 5], -1.0, 1.0)];
            Ok(op_trial(r, ins, 15, |g, v| g.transpose(v[0])))
        }),
        t("reshape", Ops, |r| {
            let ins = vec![uniform(r, &[2, 6], -1.0, 1.0)];
            Ok(op_trial(r, ins, 12, |g, v| g.reshape(v[0], &[3, 4])))
        }),
        t("sum", Ops, |r| {
            let ins = vec![uniform(r, &[3, 4], -1.0, 1.0)];
            Ok(op_trial(r, ins, 1, |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            }))
        }),
        t("mean", Ops, |r| {
            let ins = vec![uniform(r, &[3, 4], -1.0, 1.0)];
            Ok(op_trial(r, ins, 1, |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.mean(sq))
            }))
        }),
        t("conv2d", Ops, |r| {
            let ins = vec![
                uniform(r, &[2, 6, 6], -1.0, 1.0),
                uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
            ];
            Ok(op_trial(r, ins, 3 * 36, |g, v| g.conv2d(v[0], v[1], 1, 1)))
        }),
        t("conv2d_strided", Ops, |r| {
            let ins = vec![
                uniform(r, &[2, 7, 7], -1.0, 1.0),
                uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
            ];
            Ok(op_trial(r, ins, 3 * 16, |g, v| g.conv2d(v[0], v[1], 2, 1)))
        }),
        t("max_pool2d", Ops, |r| {
            let ins = vec![uniform(r, &[2, 6, 6], -1.0, 1.0)];
            Ok(op_trial(r, ins, 2 * 9, |g, v| {
                g.pool2d(PoolKind::Max, v[0], 2, 2)
            }))
        }),
        t("avg_pool2d", Ops, |r| {
            let ins = vec![uniform(r, &[2, 6, 6], -1.0, 1.0)];
            Ok(op_trial(r, ins, 2 * 16, |g, v| {
                g.pool2d(PoolKind::Avg, v[0], 3, 1)
            }))
        }),
        t("global_avg_pool", Ops, |r| {
            let ins = vec![uniform(r, &[3, 4, 4], -1.0, 1.0)];
            Ok(op_trial(r, ins, 3, |g, v| g.global_avg_pool(v[0])))
        }),
        t("global_max_pool", Ops, |r| {
            let ins = vec![uniform(r, &[3, 4, 4], -1.0, 1.0)];
            Ok(op_trial(r, ins, 3, |g, v| g.global_max_pool(v[0])))
        }),
        t("concat_channels", Ops, |r| {
            let ins = vec![
                uniform(r, &[2, 3, 3], -1.0, 1.0),
                uniform(r, &[1, 3, 3], -1.0, 1.0),
            ];
            Ok(op_trial(r, ins, 27, |g, v| g.concat_channels(v[0], v[1])))
        }),
        t("stack", Ops, |r| {
            let ins = (0..3).map(|_| uniform(r, &[4], -1.0, 1.0)).collect();
            Ok(op_trial(r, ins, 12, |g, v| g.stack(v)))
        }),
        t("gather_rows", Ops, |r| {
            let ins = vec![uniform(r, &[4, 3], -1.0, 1.0)];
            Ok(op_trial(r, ins, 9, |g, v| g.gather_rows(v[0], &[2, 0, 2])))
        }),
        t("logsumexp_rows", Ops, |r| {
            let ins = vec![uniform(r, &[3, 4], -3.0, 3.0)];
            let mask: Vec<bool> = (0..12).map(|i| i % 4 == i / 4 || r.gen::<bool>()).collect();
            Ok(op_trial(r, ins, 3, move |g, v| {
                g.logsumexp_rows(v[0], &mask)
            }))
        }),
        t("focal", Losses, |r| {
            let l = labels(r, 8);
            Ok(Trial {
                inputs: vec![uniform(r, &[8], 0.05, 0.95)],
                probes: None,
                f: Box::new(move |g, v| focal_loss(g, v[0], &l, 0.25, 2.0)),
            })
        }),
        t("supcon", Losses, |r| {
            let l = labels(r, 6);
            Ok(Trial {
                inputs: vec![uniform(r, &[6, 5], -1.0, 1.0)],
                probes: None,
                f: Box::new(move |g, v| {
                    let z = normalize_rows(g, v[0])?;
                    supcon_loss(g, z, &l, 0.5)
                }),
            })
        }),
        t("f_center", Losses, |r| {
            let l = labels(r, 6);
            Ok(Trial {
                // margin 3 keeps the separation hinge active for centers in [-1, 1]^4
                inputs: vec![
                    uniform(r, &[6, 4], -1.0, 1.0),
                    uniform(r, &[2, 4], -1.0, 1.0),
                ],
                probes: None,
                f: Box::new(move |g, v| f_center_loss(g, v[0], &l, v[1], 0.5, 3.0)),
            })
        }),
        t("fsc_total", Losses, |r| {
            let l = labels(r, 6);
            let w = LossWeights {
                margin: 3.0,
                ..LossWeights::default()
            };
            Ok(Trial {
                inputs: vec![
                    uniform(r, &[6], 0.05, 0.95),
                    uniform(r, &[6, 5], -1.0, 1.0),
                    uniform(r, &[6, 4], -1.0, 1.0),
                    uniform(r, &[2, 4], -1.0, 1.0),
                ],
                probes: None,
                f: Box::new(move |g, v| {
                    let focal = focal_loss(g, v[0], &l, w.alpha, w.gamma)?;
                    let z = normalize_rows(g, v[1])?;
                    let supcon = supcon_loss(g, z, &l, w.tau)?;
                    let fc = f_center_loss(g, v[2], &l, v[3], w.mu, w.margin)?;
                    Ok(fsc_total(g, focal, supcon, fc, &w)?.0)
                }),
            })
        }),
        t("channel_attention", Model, |r| {
            let ins = vec![
                uniform(r, &[6, 3, 3], -1.0, 1.0),
                uniform(r, &[2, 6], -1.0, 1.0),
                uniform(r, &[6, 2], -1.0, 1.0),
            ];
            Ok(op_trial(r, ins, 6, |g, v| {
                channel_attention(g, v[0], v[1], v[2])
            }))
        }),
        t("fuse", Model, |r| {
            let ins = vec![
                uniform(r, &[4, 3, 3], -1.0, 1.0),
                uniform(r, &[2, 3, 3], -1.0, 1.0),
                uniform(r, &[6], 0.05, 0.95),
            ];
            Ok(op_trial(r, ins, 6, |g, v| fuse(g, v[0], v[1], v[2])))
        }),
        t("classify", Model, |r| {
            let ins = vec![
                uniform(r, &[6], -1.0, 1.0),
                uniform(r, &[5, 6], -1.0, 1.0),
                uniform(r, &[5, 1], -0.5, 0.5),
                uniform(r, &[1, 5], -1.0, 1.0),
                uniform(r, &[1, 1], -0.5, 0.5),
            ];
            Ok(op_trial(r, ins, 1, |g, v| {
                classify(g, v[0], v[1], v[2], v[3], v[4])
            }))
        }),
        t("l2_normalize", Model, |r| {
            let ins = vec![uniform(r, &[6], -1.0, 1.0)];
            Ok(op_trial(r, ins, 6, |g, v| l2_normalize(g, v[0])))
        }),
        t("forward", Model, forward_trial),
    ]
}

/// Whole-model check: perturbs parameters of a tiny network and reads out
/// a mix of `p`, `z` and `f_fre`.
fn forward_trial(r: &mut ChaCha8Rng) -> Result<Trial> {
    let model = DualBranchModel::new(tiny_model())?;
    let mut params = model.init_parameters(r.gen(), 1.0)?;
    // zero biases behind a dead channel put ReLU exactly on its kink
    for (name, t) in params.iter_mut() {
        if name.ends_with("bias") {
            t.values_mut()
                .iter_mut()
                .for_each(|b| *b = r.gen_range(0.05..0.2) * if r.gen() { 1.0 } else { -1.0 });
        }
    }
    let n = model.config().image_size;
    // A real spectrum is point-symmetric, which creates exact ties in the
    // attention's max pool (a genuine kink); random maps avoid them.
    let input = PreparedInput {
        rgb: uniform(r, &[3, n, n], 0.0, 1.0),
        spectrum: uniform(r, &[1, n, n], 0.0, 1.0),
    };
    let names: Vec<String> = params.names().map(String::from).collect();
    let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut probes = Vec::new();
    for _ in 0..40 {
        let i = r.gen_range(0..inputs.len());
        probes.push((i, r.gen_range(0..inputs[i].numel())));
    }
    let wz: Vec<f64> = (0..model.config().fused_channels())
        .map(|_| r.gen_range(-1.0..1.0))
        .collect();
    let wf: Vec<f64> = (0..model.config().fre_channels())
        .map(|_| r.gen_range(-1.0..1.0))
        .collect();
    Ok(Trial {
        inputs,
        probes: Some(probes),
        f: Box::new(move |g, v| {
            let bound: BoundParams = names.iter().cloned().zip(v.iter().copied()).collect();
            let out = model.forward(g, &bound, &input, &ModelVariant::default())?;
            let a = readout(g, out.z, &wz)?;
            let b = readout(g, out.f_fre, &wf)?;
            let ab = g.add(a, b)?;
            g.add(ab, out.p)
        }),
    })
}
