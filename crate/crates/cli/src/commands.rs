//! Command-line definitions and the subcommands.
//!
//! Each command writes its report to `out` and progress or timing lines
//! to `err`; everything on `out` is a deterministic function of the flags
//! and input files.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use convformer_core::accounting::count_config;
use convformer_core::autodiff::suite::{self, Scope, THRESHOLD};
use convformer_core::backbone::{Ablation, Model, ModelConfig};
use convformer_core::rng::Rng;
use convformer_core::tensor::Init;
use convformer_core::train::{make_toy_dataset, train_steps, OptimConfig, Optimizer, TrainConfig};
use convformer_core::Tensor;

use crate::checkpoint;
use crate::config_file::{self, ModelSource};
use crate::format::sig6;
use crate::metrics;
use crate::report::CountDocument;
use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "convformer",
    version,
    about = "ConvFormer cost accounting, inference, gradient checks and toy training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and multiply-accumulate counts.
    Count(CountArgs),
    /// Eval-mode forward pass on a synthetic input.
    Forward(ForwardArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Trains on the synthetic dataset.
    Train(TrainArgs),
    /// Prints a model config as TOML, ready to edit and pass back as file:<path>.
    Config(ConfigArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// convformer-s, convformer-l, tiny or file:<path>.
    #[arg(long)]
    pub model: ModelSource,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// Image size HxW; without it only parameters are counted.
    #[arg(long, value_parser = parse_hw)]
    pub input: Option<(usize, usize)>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[arg(long)]
    pub model: ModelSource,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// Load weights from a checkpoint instead of initializing from --seed.
    #[arg(long, conflicts_with = "seed")]
    pub checkpoint: Option<PathBuf>,
    /// Initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input shape NxCxHxW.
    #[arg(long, value_parser = parse_nchw, default_value = "1x3x224x224")]
    pub input_shape: [usize; 4],
    /// Seed of the uniform [-1, 1] input.
    #[arg(long, default_value_t = 0)]
    pub input_seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// ops, mca, block or model; all scopes when omitted.
    #[arg(long)]
    pub scope: Option<Scope>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "tiny")]
    pub model: ModelSource,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Seed of initialization, batch order and drop-path.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Square image size.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerKind::Adamw)]
    pub optimizer: OptimizerKind,
    /// Metrics CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint path for the final weights.
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub model: ModelSource,
    #[arg(long)]
    pub ablation: Option<Ablation>,
}

fn parse_dims<const N: usize>(s: &str, what: &str) -> Result<[usize; N], String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != N {
        return Err(format!("expected {what}, got {s:?}"));
    }
    let mut dims = [0usize; N];
    for (d, p) in dims.iter_mut().zip(parts) {
        *d = p.trim().parse().map_err(|_| format!("expected {what}, got {s:?}"))?;
        if *d == 0 {
            return Err(format!("dimensions must be positive in {s:?}"));
        }
    }
    Ok(dims)
}

pub fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    parse_dims::<2>(s, "HxW").map(|[h, w]| (h, w))
}

pub fn parse_nchw(s: &str) -> Result<[usize; 4], String> {
    parse_dims::<4>(s, "NxCxHxW")
}

fn io_usage<'a>(what: &'a str, path: &'a Path) -> impl FnOnce(std::io::Error) -> CliError + 'a {
    move |e| CliError::Usage(format!("cannot write {what} {}: {e}", path.display()))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Failure(format!("cannot write output: {e}")))
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Count(a) => count(&a, out),
        Command::Forward(a) => forward(&a, out, err),
        Command::Gradcheck(a) => gradcheck(&a, out),
        Command::Train(a) => train(&a, out, err),
        Command::Config(a) => {
            let config = a.model.resolve(a.ablation)?;
            emit(
                out,
                &format!("# digest {}\n{}", config_file::digest_hex(&config), config_file::canonical_text(&config)),
            )
        }
    }
}

pub fn count(a: &CountArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = a.model.resolve(a.ablation)?;
    let report = count_config(&config, a.input)?;
    let doc = CountDocument::new(
        a.model.to_string(),
        a.ablation.map(|x| x.to_string()),
        config_file::digest_hex(&config),
        &report,
    );
    let text = match a.format {
        Format::Text => doc.to_text(&report),
        Format::Structured => doc.to_json(),
    };
    emit(out, &text)
}

pub fn forward(a: &ForwardArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let config = a.model.resolve(a.ablation)?;
    let model: Model<f32> = match &a.checkpoint {
        Some(path) => checkpoint::load(path, &config)?,
        None => Model::build(&config, &mut Rng::seed(a.seed.unwrap_or(0)))?,
    };
    let x: Tensor =
        Tensor::create(a.input_shape, Init::Uniform { rng: &mut Rng::seed(a.input_seed), lo: -1.0, hi: 1.0 })?;
    let start = Instant::now();
    let logits = model.forward(&x)?;
    let elapsed = start.elapsed();
    if !logits.all_finite() {
        return Err(CliError::Failure("forward pass produced non-finite logits".into()));
    }
    let [n, k, _, _] = logits.dims();
    let [xn, xc, xh, xw] = a.input_shape;
    let mut text = format!("model {}\ninput {xn}x{xc}x{xh}x{xw}\nlogits {n}x{k}\n", a.model);
    for (i, row) in logits.data().chunks(k).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / k as f64;
        text.push_str(&format!(
            "sample {i} argmax {} max {} mean {}\n",
            convformer_core::train::argmax(row),
            sig6(f64::from(max)),
            sig6(mean)
        ));
    }
    emit(out, &text)?;
    writeln!(err, "latency {} ms", sig6(elapsed.as_secs_f64() * 1e3)).ok();
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let scopes = match a.scope {
        Some(s) => vec![s],
        None => Scope::ALL.to_vec(),
    };
    let mut text = format!(
        "{:<6} {:<24} {:>9} {:>11} {:>13} {}\n",
        "scope", "check", "instances", "coordinates", "max_rel_error", "status"
    );
    let mut worst: Option<(Scope, suite::SuiteRow)> = None;
    let mut failed = 0;
    for scope in scopes {
        for row in suite::run(scope, a.seed)? {
            text.push_str(&format!(
                "{:<6} {:<24} {:>9} {:>11} {:>13} {}\n",
                scope.name(),
                row.name,
                row.instances,
                row.coordinates,
                sig6(row.max_rel_error),
                if row.passed() { "PASS" } else { "FAIL" }
            ));
            failed += usize::from(!row.passed());
            if worst.as_ref().is_none_or(|(_, w)| !(row.max_rel_error <= w.max_rel_error)) {
                worst = Some((scope, row));
            }
        }
    }
    text.push_str(&format!("threshold {}\n", sig6(THRESHOLD)));
    emit(out, &text)?;
    match worst {
        Some((scope, row)) if failed > 0 => {
            let at = match (&row.worst, &row.worst_input) {
                (Some((instance, _, coord, analytic, numeric)), Some(input)) => format!(
                    " at {input}[{coord}] of instance {instance} (analytic {}, numeric {})",
                    sig6(*analytic),
                    sig6(*numeric)
                ),
                _ => String::new(),
            };
            Err(CliError::Failure(format!(
                "{failed} check(s) failed; worst offender {} with max relative error {}{at}",
                if row.name.starts_with(scope.name()) { row.name.clone() } else { format!("{scope}/{}", row.name) },
                sig6(row.max_rel_error)
            )))
        }
        _ => Ok(()),
    }
}

pub fn train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let config: ModelConfig = a.model.resolve(None)?;
    if a.size == 0 || !a.size.is_multiple_of(32) {
        return Err(CliError::Usage(format!("--size {} must be a positive multiple of 32", a.size)));
    }
    let data = make_toy_dataset(a.data_seed, a.samples, config.num_classes, a.size)?;
    // Open outputs first so an unwritable path fails before any work.
    let csv = a.out.as_deref().map(|p| File::create(p).map_err(io_usage("metrics", p)).map(|f| (p, f))).transpose()?;
    let ckpt = a.save.as_deref().map(|p| File::create(p).map_err(io_usage("checkpoint", p)).map(|_| p)).transpose()?;

    let mut model = Model::build(&config, &mut Rng::seed(a.seed))?;
    let optimizer = match a.optimizer {
        OptimizerKind::Adamw => OptimConfig::default().optimizer,
        OptimizerKind::Sgd => Optimizer::Sgd { momentum: 0.9 },
    };
    let cfg = TrainConfig {
        optim: OptimConfig { optimizer, learning_rate: a.lr, ..OptimConfig::default() },
        batch_size: a.batch_size,
    };
    let start = Instant::now();
    let log = train_steps(&mut model, &data, &cfg, a.steps, a.seed)?;
    writeln!(err, "trained {} steps in {} s", a.steps, sig6(start.elapsed().as_secs_f64())).ok();

    if let Some((path, mut file)) = csv {
        file.write_all(metrics::to_csv(&log).as_bytes()).map_err(io_usage("metrics", path))?;
    }
    if let Some(path) = ckpt {
        checkpoint::save(path, &model)?;
    }
    let text = match log.last() {
        Some(r) => format!("final step {} loss {} accuracy {}\n", r.step, sig6(r.loss), sig6(r.accuracy)),
        None => "no steps run\n".to_string(),
    };
    emit(out, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_parsers() {
        assert_eq!(parse_hw("224x160").unwrap(), (224, 160));
        assert_eq!(parse_nchw("1x3x32x32").unwrap(), [1, 3, 32, 32]);
        assert!(parse_hw("224").is_err());
        assert!(parse_hw("0x4").is_err());
        assert!(parse_nchw("1x3x32").is_err());
        assert!(parse_nchw("1x3xax32").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
