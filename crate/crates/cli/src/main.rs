//! Command-line front end: corpus generation, training, evaluation,
//! ablations, gradient checks and spectrum dumps.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dualbranch::data::{build_split, export_corpus, import_corpus, CorpusSplit, Protocol};
use dualbranch::harness::gradsuite::{run_gradcheck, Scope, MIN_TRIALS};
use dualbranch::harness::{
    evaluate_checkpoint, run_ablation_suite, run_cross_domain, train_on_split, write_run, RunConfig,
};
use dualbranch::spectral::{
    spectrum_map, spectrum_tensor, write_spectrum_png, Domain, ImageSample, Label,
};
use dualbranch::tensor::{write_raw_tensor, OptimizerKind};

/// Dual-branch (RGB + spectrum) forgery detector on a synthetic corpus.
///
/// Settings come from a TOML run config (`--config`); every field has a
/// default, so a file only needs the keys it changes. `show-config` prints
/// the full resolved config. Command-line overrides win over the file.
#[derive(Parser, Debug)]
#[command(name = "dualbranch", version)]
struct Cli {
    /// TOML run config.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run seed (initialization and batch order). Overrides `seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory. Overrides `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and export it as PNGs plus manifest.tsv.
    GenCorpus {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a model; writes checkpoint, metrics.csv, steps.csv and summary.json.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Evaluate a checkpoint on the test split; prints the report as JSON.
    Eval {
        /// Checkpoint to load [default: <out>/checkpoint.ckpt].
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Train the full model and each single ablation; writes ablation.tsv/json.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train on each listed family and test on all four; writes cross_domain.tsv/json.
    CrossDomain {
        /// Training families, comma separated (t2i, i2i, fs, fe).
        #[arg(long, value_delimiter = ',', default_value = "t2i,i2i,fs,fe")]
        train_on: Vec<Domain>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Finite-difference gradient checks; exits nonzero on any failure.
    Gradcheck {
        /// Restrict to scopes (ops, losses, model); repeatable.
        #[arg(long, value_name = "SCOPE")]
        scope: Vec<Scope>,
        /// Random trials per target.
        #[arg(long, default_value_t = MIN_TRIALS)]
        trials: usize,
    },
    /// Dump the centered log-magnitude spectrum of a PNG as PNG + raw tensor.
    Spectrum {
        /// Input image.
        #[arg(value_name = "PNG")]
        input: PathBuf,
    },
    /// Print the resolved run config as TOML.
    ShowConfig,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Split protocol: in-domain:<d>, cross-domain:<a>:<b> or pooled.
    #[arg(long)]
    protocol: Option<Protocol>,
    /// Samples per family and class. Overrides `corpus.samples_per_domain_per_class`.
    #[arg(long, value_name = "N")]
    samples: Option<usize>,
    /// Read an exported corpus instead of generating one.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["protocol", "samples"])]
    corpus: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_name = "LR")]
    learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerChoice>,
}

#[derive(Args, Debug)]
struct AblationArgs {
    /// Zero the frequency branch ("w/o Fre-Branch").
    #[arg(long)]
    disable_fre_branch: bool,
    /// Drop the frequency center loss ("w/o L_f-center").
    #[arg(long)]
    disable_f_center: bool,
    /// Fix channel attention at 1 ("w/o M_c").
    #[arg(long)]
    disable_attention: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum OptimizerChoice {
    Sgd,
    Adam,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }

    match cli.command {
        Command::GenCorpus { data } => {
            data.apply(&mut config);
            config.validate()?;
            let split = data.load(&config)?;
            export_corpus(&split, &config.out_dir)?;
            println!(
                "wrote {} samples ({} train, {} test) to {}",
                split.len(),
                split.train.len(),
                split.test.len(),
                config.out_dir.display()
            );
        }
        Command::Train {
            data,
            run,
            ablation,
        } => {
            data.apply(&mut config);
            run.apply(&mut config);
            ablation.apply(&mut config);
            config.validate()?;
            let split = data.load(&config)?;
            let outcome = train_on_split(&config, &split)?;
            write_run(&outcome, &config, &config.out_dir)?;
            let r = &outcome.report;
            println!(
                "{} epochs in {:.1}s; test accuracy {:.4} (initial {:.4}); outputs in {}",
                r.epochs.len(),
                r.wall_clock_seconds,
                r.final_eval.accuracy,
                r.initial.accuracy,
                config.out_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            ablation,
        } => {
            data.apply(&mut config);
            ablation.apply(&mut config);
            config.validate()?;
            let checkpoint = checkpoint.unwrap_or_else(|| config.out_dir.join("checkpoint.ckpt"));
            let split = data.load(&config)?;
            let variant = config.ablation.variant(&config.model);
            let report = evaluate_checkpoint(&checkpoint, &config.model, &variant, &split.test)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { data, run } => {
            data.apply(&mut config);
            run.apply(&mut config);
            config.validate()?;
            let report = match &data.corpus {
                Some(_) => dualbranch::harness::ablation::run_ablation_suite_on(
                    &config,
                    &data.load(&config)?,
                )?,
                None => run_ablation_suite(&config)?,
            };
            fs::create_dir_all(&config.out_dir)?;
            fs::write(config.out_dir.join("ablation.tsv"), report.to_table())?;
            fs::write(
                config.out_dir.join("ablation.json"),
                serde_json::to_string_pretty(&report)? + "\n",
            )?;
            print!("{}", report.to_table());
        }
        Command::CrossDomain { train_on, run } => {
            run.apply(&mut config);
            config.validate()?;
            let report = run_cross_domain(&config, &train_on)?;
            fs::create_dir_all(&config.out_dir)?;
            fs::write(config.out_dir.join("cross_domain.tsv"), report.to_table())?;
            fs::write(
                config.out_dir.join("cross_domain.json"),
                serde_json::to_string_pretty(&report)? + "\n",
            )?;
            print!("{}", report.to_table());
        }
        Command::Gradcheck { scope, trials } => {
            let scopes = if scope.is_empty() {
                Scope::ALL.to_vec()
            } else {
                scope
            };
            let report = run_gradcheck(&scopes, trials, config.seed)?;
            print!("{}", report.to_table());
            if !report.passed() {
                let failed: Vec<&str> = report.failures().map(|r| r.target.as_str()).collect();
                eprintln!("gradient check failed: {}", failed.join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Spectrum { input } => {
            let (png, raw) = dump_spectrum(&input, &config)?;
            println!("wrote {} and {}", png.display(), raw.display());
        }
        Command::ShowConfig => print!("{}", config.to_toml_string()),
    }
    Ok(ExitCode::SUCCESS)
}

impl DataArgs {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(p) = &self.protocol {
            config.protocol = p.clone();
        }
        if let Some(n) = self.samples {
            config.corpus.samples_per_domain_per_class = n;
        }
    }

    fn load(&self, config: &RunConfig) -> Result<CorpusSplit> {
        Ok(match &self.corpus {
            Some(dir) => import_corpus(dir)?,
            None => build_split(&config.corpus, &config.protocol)?,
        })
    }
}

impl RunArgs {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(e) = self.epochs {
            config.epochs = e;
        }
        if let Some(b) = self.batch_size {
            config.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            config.optimizer.learning_rate = lr;
        }
        if let Some(o) = self.optimizer {
            config.optimizer.kind = match o {
                OptimizerChoice::Sgd => OptimizerKind::Sgd,
                OptimizerChoice::Adam => OptimizerKind::Adam,
            };
        }
    }
}

impl AblationArgs {
    fn apply(&self, config: &mut RunConfig) {
        config.ablation.disable_fre_branch |= self.disable_fre_branch;
        config.ablation.disable_f_center |= self.disable_f_center;
        config.ablation.disable_attention |= self.disable_attention;
    }
}

/// Writes `<stem>.spectrum.png` and `<stem>.spectrum.tensor` into the output
/// directory and returns both paths.
fn dump_spectrum(input: &Path, config: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .with_context(|| format!("{} has no file name", input.display()))?;
    // label and domain are irrelevant for a spectrum dump
    let image = ImageSample::read_png(input, stem, Label::Real, Domain::T2i)?;
    let map = spectrum_map(&image, config.model.spectrum.center_dc);
    fs::create_dir_all(&config.out_dir)?;
    let png = config.out_dir.join(format!("{stem}.spectrum.png"));
    let raw = config.out_dir.join(format!("{stem}.spectrum.tensor"));
    write_spectrum_png(&map, &png)?;
    let mut out = BufWriter::new(File::create(&raw)?);
    write_raw_tensor(&spectrum_tensor(&map), &mut out)?;
    out.flush()?;
    Ok((png, raw))
}
