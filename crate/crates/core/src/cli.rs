//! Command-line surface: `curves`, `gen`, `train`, `eval` and `verify`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{
    gen_classification_pair, gen_segmentation_pair, read_dataset, write_dataset,
    ClassificationDomainSpec, Dataset, DatasetKind, DomainPair, SegmentationDomainSpec,
};
use crate::error::{Error, Result};
use crate::losses::{
    binary_entropy_grad, binary_maxsquare_grad, binary_scaled_entropy_grad, LossKind,
};
use crate::metrics::{emit_report, ClassReport};
use crate::models::{read_checkpoint, write_checkpoint, ModelSpec, Params};
use crate::training::{adapt, evaluate, predict, pretrain_source, write_loss_log, TrainConfig};

const INIT_STREAM: u64 = 21;

#[derive(Debug, Parser)]
#[command(
    name = "maxsq",
    version,
    about = "Maximum squares domain adaptation lab"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Binary gradient magnitudes of entropy, maximum squares and scaled entropy.
    Curves {
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        #[arg(long, default_value_t = 0.01)]
        step: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a source/target pair and write it as UDS1 files.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on the source, adapt to the target, and report per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant suite.
    Verify,
}

#[derive(Debug, Default, Clone, Args)]
pub struct Overrides {
    /// Train a single seed instead of `repeat_seeds`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// Enable the multi-level self-guided objective.
    #[arg(long)]
    pub multi: bool,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long = "lambda-t")]
    pub lambda_t: Option<f64>,
}

/// Where the source/target pair comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Classification(ClassificationDomainSpec),
    Segmentation(SegmentationDomainSpec),
    Files {
        source: PathBuf,
        target: PathBuf,
        /// Labeled copy of the target used only for the final report.
        #[serde(default)]
        target_eval: Option<PathBuf>,
    },
}

/// A training config: the flat [`TrainConfig`] keys plus `model`, `dataset`,
/// `out_dir` and `repeat_seeds`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub dataset: DatasetSource,
    pub out_dir: PathBuf,
    pub repeat_seeds: Vec<u64>,
}

fn config_err(e: serde_json::Error) -> Error {
    Error::config(e.to_string())
}

fn take<T: serde::de::DeserializeOwned>(
    obj: &mut Map<String, Value>,
    key: &str,
) -> Result<Option<T>> {
    obj.remove(key)
        .map(|v| serde_json::from_value(v).map_err(|e| Error::config(format!("{key}: {e}"))))
        .transpose()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(config_err)?;
        let Value::Object(mut obj) = value else {
            return Err(Error::config("config must be a JSON object"));
        };
        let model: ModelSpec =
            take(&mut obj, "model")?.ok_or_else(|| Error::config("missing field `model`"))?;
        let dataset: DatasetSource =
            take(&mut obj, "dataset")?.ok_or_else(|| Error::config("missing field `dataset`"))?;
        let out_dir = take(&mut obj, "out_dir")?.unwrap_or_else(|| PathBuf::from("out"));
        let repeat_seeds: Option<Vec<u64>> = take(&mut obj, "repeat_seeds")?;
        let train: TrainConfig = serde_json::from_value(Value::Object(obj)).map_err(config_err)?;
        let repeat_seeds = repeat_seeds.unwrap_or_else(|| vec![train.seed]);
        let cfg = Self {
            train,
            model,
            dataset,
            out_dir,
            repeat_seeds,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if self.repeat_seeds.is_empty() {
            return Err(Error::config("repeat_seeds must not be empty"));
        }
        match &self.dataset {
            DatasetSource::Classification(s) => s.validate(),
            DatasetSource::Segmentation(s) => s.validate(),
            DatasetSource::Files {
                source,
                target,
                target_eval,
            } => {
                for p in [Some(source), Some(target), target_eval.as_ref()]
                    .into_iter()
                    .flatten()
                {
                    if !p.exists() {
                        return Err(Error::config(format!(
                            "dataset file {} does not exist",
                            p.display()
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.train.seed = s;
            self.repeat_seeds = vec![s];
        }
        if let Some(l) = o.loss {
            self.train.loss = l;
        }
        if o.multi {
            self.train.multi_level = true;
        }
        if let Some(v) = o.gamma {
            self.train.gamma = v;
        }
        if let Some(v) = o.alpha {
            self.train.alpha = v;
        }
        if let Some(v) = o.delta {
            self.train.delta = v;
        }
        if let Some(v) = o.lambda_t {
            self.train.lambda_t = v;
        }
        self.validate()
    }
}

/// CSV of `p, |dH/dp|, |d(max squares)/dp|, |d(scaled H)/dp|` on
/// `p = 0.5 + k step` for `k >= 1` up to `1 - step`.
pub fn render_curves(gamma: f64, step: f64) -> Result<String> {
    if !(step > 0.0 && step <= 0.1) {
        return Err(Error::config(format!(
            "step must lie in (0, 0.1], got {step}"
        )));
    }
    binary_scaled_entropy_grad(0.5, gamma).map_err(|e| Error::config(e.to_string()))?;
    let mut out = String::from("p,grad_entropy,grad_maxsquare,grad_scaled_entropy\n");
    let mut k = 1;
    loop {
        let p = 0.5 + k as f64 * step;
        if p > 1.0 - step + 1e-12 {
            break;
        }
        let _ = writeln!(
            out,
            "{p:.6},{:.6},{:.6},{:.6}",
            binary_entropy_grad(p)?,
            binary_maxsquare_grad(p),
            binary_scaled_entropy_grad(p, gamma)?
        );
        k += 1;
    }
    Ok(out)
}

pub fn cmd_curves(gamma: f64, step: f64, out: &Path) -> Result<()> {
    let text = render_curves(gamma, step)?;
    fs::write(out, text)?;
    Ok(())
}

fn generate(source: &DatasetSource) -> Result<DomainPair> {
    match source {
        DatasetSource::Classification(s) => gen_classification_pair(s),
        DatasetSource::Segmentation(s) => gen_segmentation_pair(s),
        DatasetSource::Files {
            source,
            target,
            target_eval,
        } => {
            let source = read_dataset(source)?;
            let target = match target_eval {
                None => read_dataset(target)?,
                Some(eval) => {
                    let plain = read_dataset(target)?;
                    let labeled = read_dataset(eval)?;
                    if plain.features() != labeled.features() {
                        return Err(Error::config("target and target_eval features differ"));
                    }
                    labeled.hold_out_labels()
                }
            };
            Ok(DomainPair { source, target })
        }
    }
}

/// Writes `source.uds`, `target.uds` (labels held out) and `target_eval.uds`.
pub fn cmd_gen(config: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(config)
        .map_err(|e| Error::config(format!("cannot read spec {}: {e}", config.display())))?;
    let spec: DatasetSource = serde_json::from_str(&text).map_err(config_err)?;
    if matches!(spec, DatasetSource::Files { .. }) {
        return Err(Error::config(
            "gen needs a classification or segmentation spec",
        ));
    }
    let pair = generate(&spec).map_err(|e| match e {
        Error::Generation(_) | Error::Io(_) => e,
        other => Error::config(other.to_string()),
    })?;
    fs::create_dir_all(out)?;
    write_dataset(&pair.source, &out.join("source.uds"))?;
    write_dataset(&pair.target, &out.join("target.uds"))?;
    let eval = pair
        .target
        .with_revealed_labels()
        .unwrap_or_else(|| pair.target.clone());
    write_dataset(&eval, &out.join("target_eval.uds"))?;
    Ok(())
}

fn check_compatible(model: &ModelSpec, d: &Dataset) -> Result<()> {
    if model.num_classes() != d.num_classes() {
        return Err(Error::config(format!(
            "model has {} classes, dataset {}",
            model.num_classes(),
            d.num_classes()
        )));
    }
    match (model, d.kind()) {
        (ModelSpec::Mlp(s), DatasetKind::Classification) => {
            let dim = d.channels() * d.height() * d.width();
            if s.input_dim != dim {
                return Err(Error::config(format!(
                    "mlp input_dim {} but features have {dim}",
                    s.input_dim
                )));
            }
        }
        (ModelSpec::Seg(s), DatasetKind::Segmentation) => {
            if s.in_channels != d.channels() {
                return Err(Error::config(format!(
                    "segnet in_channels {} but images have {}",
                    s.in_channels,
                    d.channels()
                )));
            }
        }
        _ => return Err(Error::config("model kind does not match dataset kind")),
    }
    Ok(())
}

/// Outcome of one seed of `cmd_train`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub report: ClassReport,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn run_seed(cfg: &ExperimentConfig, pair: &DomainPair, seed: u64) -> Result<SeedRun> {
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let model = &cfg.model;
    let init = model.init_params(crate::data::synth::derive_seed(
        seed,
        INIT_STREAM,
        model.init_seed(),
    ));
    let (pretrained, pre_log) = pretrain_source(model, init, &pair.source, &train)?;
    // confidence sets are fixed by the source-only model
    let source_only = predict(model, &pretrained, pair.target.features())?;
    let (params, log) = adapt(
        model,
        pretrained,
        &pair.source,
        pair.target.unlabeled(),
        &train,
    )?;
    let (report, _) = evaluate(model, &params, &pair.target, Some(&source_only))?;

    let dir = seed_dir(&cfg.out_dir, seed);
    fs::create_dir_all(&dir)?;
    let mut ckpt: Params = params;
    ckpt.extend(model.metadata());
    write_checkpoint(&ckpt, &dir.join("model.msqp"))?;
    write_loss_log(&pre_log, &dir.join("pretrain_log.csv"))?;
    write_loss_log(&log, &dir.join("loss_log.csv"))?;
    emit_report(&report, &dir.join("report.csv"))?;
    Ok(SeedRun { seed, dir, report })
}

/// Runs every seed of the experiment; seeds are independent and run in
/// parallel, each writing only into its own directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let pair = generate(&cfg.dataset)?;
    check_compatible(&cfg.model, &pair.source)?;
    check_compatible(&cfg.model, &pair.target)?;
    fs::create_dir_all(&cfg.out_dir)?;
    cfg.repeat_seeds
        .par_iter()
        .map(|&s| run_seed(cfg, &pair, s))
        .collect()
}

/// Reports a checkpoint on `data`; confidence sets come from the checkpoint's
/// own predictions.
pub fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<ClassReport> {
    let mut params = read_checkpoint(checkpoint)?;
    let model = ModelSpec::infer(&params)?;
    params.retain(|k, _| !k.starts_with("meta."));
    let dataset = read_dataset(data)?;
    check_compatible(&model, &dataset)?;
    let (report, _) = evaluate(&model, &params, &dataset, None)?;
    emit_report(&report, out)?;
    Ok(report)
}

/// Prints one line per property; true iff all pass.
pub fn cmd_verify() -> bool {
    let mut ok = true;
    for check in crate::verify::run_suite() {
        println!("{check}");
        ok &= check.passed;
    }
    ok
}

fn summary(run: &SeedRun) -> String {
    let mut s = format!("seed {}: ", run.seed);
    match run.report.miou {
        Some(m) => {
            let _ = write!(s, "miou {m:.4}");
        }
        None => s.push_str("miou n/a"),
    }
    for (k, v) in &run.report.extra {
        let _ = write!(s, ", {k} {v:.4}");
    }
    let _ = write!(s, " -> {}", run.dir.display());
    s
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Curves { gamma, step, out } => cmd_curves(gamma, step, &out),
        Command::Gen { config, out } => cmd_gen(&config, &out),
        Command::Train {
            config,
            out,
            overrides,
        } => ExperimentConfig::load(&config)
            .and_then(|mut cfg| {
                if let Some(out) = out {
                    cfg.out_dir = out;
                }
                cfg.apply(&overrides)?;
                Ok(cfg)
            })
            .and_then(|cfg| cmd_train(&cfg))
            .map(|runs| {
                for r in &runs {
                    println!("{}", summary(r));
                }
            }),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => cmd_eval(&checkpoint, &data, &out).map(|r| {
            if let Some(m) = r.miou {
                println!("miou {m:.6}");
            }
            for (k, v) in &r.extra {
                println!("{k} {v:.6}");
            }
        }),
        Command::Verify => {
            return if cmd_verify() { 0 } else { 2 };
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
