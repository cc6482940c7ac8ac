//! Command-line front end. Exit codes: 0 success, 2 usage or validation
//! problem, 3 runtime or IO failure.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::ablation::{fold_and_prune, run_protocol, zero_kernels, AblationSpec, Protocol, ReportSet, DEFAULT_TAU};
use crate::data::{gen_classification_dataset, gen_segmentation_dataset, load_cifar10, DatasetDescriptor, LabeledDataset};
use crate::error::Error;
use crate::model::checkpoint::write_atomic;
use crate::model::{fingerprint, load_checkpoint, save_checkpoint, LayerAddress, Model, ResNetConfig, Task, UnitSlot};
use crate::report::{
    compare, parse_reports, reference_pattern, render_csv, render_svg, render_text, save_reports,
};
use crate::train::{evaluate, train_in_place, Hyperparams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "resnet-ablation", version, about = "Train small ResNets, zero their kernels, fold what does not matter")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a run config and write a checkpoint plus history.
    Train {
        /// TOML run config with [model], [data] and [train] tables.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the model, data and shuffle seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// History file; defaults to <out>.history.json.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Run zero-ablation protocols on a checkpoint and write a report file.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = ProtocolArg::All)]
        protocol: ProtocolArg,
        /// Largest absolute metric change still called trivial.
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Run config whose [data] table names the evaluation set.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed of the default synthetic evaluation set (defaults to the model seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Report file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a report file as text, csv or svg, optionally against a reference table.
    Report {
        /// Report file written by `ablate`.
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Reference table id: cifar10-e2, cifar10-e3, t1-e2 or t1-e3.
        #[arg(long)]
        compare: Option<String>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold every trivial conv1/conv2 kernel of a report into constants.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    E1,
    E2,
    E3,
    All,
}

impl ProtocolArg {
    fn protocols(self) -> Vec<Protocol> {
        match self {
            ProtocolArg::E1 => vec![Protocol::E1],
            ProtocolArg::E2 => vec![Protocol::E2],
            ProtocolArg::E3 => vec![Protocol::E3],
            ProtocolArg::All => vec![Protocol::E1, Protocol::E2, Protocol::E3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Svg,
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ResNetConfig,
    pub data: DatasetDescriptor,
    #[serde(default)]
    pub train: Hyperparams,
}

impl RunConfig {
    pub fn desk_classifier(seed: u64) -> Self {
        Self {
            model: ResNetConfig::desk_classifier(seed),
            data: DatasetDescriptor::SyntheticClassification {
                seed,
                n_per_class: 200,
                classes: 10,
                size: 32,
            },
            train: Hyperparams {
                seed,
                ..Hyperparams::default()
            },
        }
    }

    pub fn desk_segmenter(seed: u64) -> Self {
        Self {
            model: ResNetConfig::desk_segmenter(seed),
            data: DatasetDescriptor::SyntheticSegmentation { seed, n: 800, size: 32 },
            train: Hyperparams {
                seed,
                ..Hyperparams::default()
            },
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        match &mut self.data {
            DatasetDescriptor::SyntheticClassification { seed: s, .. }
            | DatasetDescriptor::SyntheticSegmentation { seed: s, .. } => *s = seed,
            DatasetDescriptor::Cifar10 { .. } => {}
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(msg: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.to_string(),
        }
    }

    fn runtime(msg: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: msg.to_string(),
        }
    }
}

/// Library errors: bad settings are the caller's fault, the rest is runtime.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnsupportedTarget(_) | Error::DegenerateBatch => Failure::usage(e),
            _ => Failure::runtime(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

pub fn read_run_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))?;
    cfg.model.validate().map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    cfg.train.validate().map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

/// Materializes the train and test splits a descriptor names.
pub fn load_dataset(desc: &DatasetDescriptor) -> crate::Result<(LabeledDataset, LabeledDataset)> {
    match desc {
        DatasetDescriptor::SyntheticClassification {
            seed,
            n_per_class,
            classes,
            size,
        } => gen_classification_dataset(*seed, *n_per_class, *classes, *size),
        DatasetDescriptor::SyntheticSegmentation { seed, n, size } => gen_segmentation_dataset(*seed, *n, *size),
        DatasetDescriptor::Cifar10 { path } => load_cifar10(Path::new(path)),
    }
}

/// Test split for evaluating `model`: from the config if given, else the
/// default synthetic set for the model's task.
fn eval_set(model: &Model, config: Option<&Path>, seed: Option<u64>) -> CliResult<LabeledDataset> {
    let desc = match config {
        Some(p) => {
            let mut cfg = read_run_config(p)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            cfg.data
        }
        None => {
            let s = seed.unwrap_or(model.config.seed);
            match model.config.task {
                Task::Classify => RunConfig::desk_classifier(s).data,
                Task::Segment => RunConfig::desk_segmenter(s).data,
            }
        }
    };
    Ok(load_dataset(&desc)?.1)
}

fn load_model(path: &Path) -> CliResult<Model> {
    load_checkpoint(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes()).map_err(Failure::runtime)
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>, history: Option<&Path>) -> CliResult<()> {
    let mut cfg = read_run_config(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let (train_set, test_set) = load_dataset(&cfg.data)?;
    let mut model = Model::build(&cfg.model)?;
    println!(
        "training {} parameters on {} samples for {} epochs",
        model.param_count(),
        train_set.len(),
        cfg.train.epochs
    );
    let hist = train_in_place(&mut model, &train_set, &test_set, &cfg.train, |e| {
        println!(
            "epoch {:>3}  lr {:<8}  loss {:.5}  test {:.4}",
            e.epoch + 1,
            e.lr,
            e.train_loss,
            e.test_metric
        )
    })?;
    save_checkpoint(&model, out).map_err(Failure::runtime)?;
    let hpath = history.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".history.json");
        PathBuf::from(p)
    });
    let mut text = serde_json::to_string_pretty(&hist).expect("history serializes");
    text.push('\n');
    write_text(&hpath, &text)?;
    println!(
        "final test {} {:.4}; checkpoint {} ({})",
        hist.metric,
        hist.final_metric().unwrap_or(f64::NAN),
        out.display(),
        fingerprint(&model)?
    );
    Ok(())
}

fn cmd_ablate(
    checkpoint: &Path,
    protocol: ProtocolArg,
    tau: f64,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> CliResult<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Failure::usage(format!("--tau must be positive, got {tau}")));
    }
    let model = load_model(checkpoint)?;
    let data = eval_set(&model, config, seed)?;
    let mut set = ReportSet::default();
    for p in protocol.protocols() {
        let r = run_protocol(&model, &data, p, tau)?;
        print!("{}", render_text(&r));
        set.0.insert(p, r);
    }
    save_reports(&set, out).map_err(Failure::runtime)?;
    Ok(())
}

fn cmd_report(report: &Path, format: Format, reference: Option<&str>, out: Option<&Path>) -> CliResult<()> {
    let text = fs::read_to_string(report).map_err(|e| Failure::runtime(format!("{}: {e}", report.display())))?;
    let set = parse_reports(&text).map_err(|e| Failure::usage(format!("{}: {e}", report.display())))?;
    if set.0.is_empty() {
        return Err(Failure::usage(format!("{} holds no reports", report.display())));
    }
    let mut rendered = String::new();
    match format {
        Format::Text => set.0.values().for_each(|r| rendered.push_str(&render_text(r))),
        Format::Csv => {
            for (i, r) in set.0.values().enumerate() {
                let csv = render_csv(r);
                // one header for the whole file
                rendered.push_str(if i == 0 { &csv } else { csv.split_once('\n').map_or("", |x| x.1) });
            }
        }
        Format::Svg => rendered = render_svg(&set.0.values().collect::<Vec<_>>()),
    }
    if let Some(id) = reference {
        let pattern = reference_pattern(id)?;
        let r = set.0.get(&pattern.protocol).ok_or_else(|| {
            Failure::usage(format!("{} has no {} report to compare with {id}", report.display(), pattern.protocol))
        })?;
        let c = compare(r, pattern)?;
        if format == Format::Svg {
            print!("{}", c.render());
        } else {
            rendered.push_str(&c.render());
        }
    }
    match out {
        Some(p) => write_text(p, &rendered),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}

fn cmd_prune(checkpoint: &Path, report: &Path, out: &Path, config: Option<&Path>, seed: Option<u64>) -> CliResult<()> {
    let model = load_model(checkpoint)?;
    let text = fs::read_to_string(report).map_err(|e| Failure::runtime(format!("{}: {e}", report.display())))?;
    let set = parse_reports(&text).map_err(|e| Failure::usage(format!("{}: {e}", report.display())))?;
    let fp = fingerprint(&model)?;
    let mut targets: BTreeSet<LayerAddress> = BTreeSet::new();
    for r in set.0.values() {
        if r.fingerprint != fp {
            return Err(Failure::usage(format!(
                "report is for model {} but checkpoint is {fp}",
                r.fingerprint
            )));
        }
        targets.extend(
            r.trivial_addresses()
                .into_iter()
                .filter(|a| matches!(a.slot(), Some(UnitSlot::Conv1 | UnitSlot::Conv2))),
        );
    }
    let pruned = fold_and_prune(&model, &targets)?;
    save_checkpoint(&pruned, out).map_err(Failure::runtime)?;
    let names: Vec<String> = targets.iter().map(|a| a.to_string()).collect();
    println!("folded {} kernels: {}", targets.len(), names.join(" "));
    println!(
        "parameters {} -> {} ({} removed)",
        model.param_count(),
        pruned.param_count(),
        model.param_count() - pruned.param_count()
    );
    let data = eval_set(&model, config, seed)?;
    let pruned_metric = evaluate(&pruned, &data)?;
    if targets.is_empty() {
        println!("metric {pruned_metric:.6}");
    } else {
        let zeroed = zero_kernels(&model, &AblationSpec::new(targets, Protocol::Custom))?;
        println!(
            "metric {:.6} pruned, {:.6} zero-ablated, {:.6} original",
            pruned_metric,
            evaluate(&zeroed, &data)?,
            evaluate(&model, &data)?
        );
    }
    Ok(())
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            history,
        } => cmd_train(&config, &out, seed, history.as_deref()),
        Command::Ablate {
            checkpoint,
            protocol,
            tau,
            config,
            seed,
            out,
        } => cmd_ablate(&checkpoint, protocol, tau, config.as_deref(), seed, &out),
        Command::Report {
            report,
            format,
            compare,
            out,
        } => cmd_report(&report, format, compare.as_deref(), out.as_deref()),
        Command::Prune {
            checkpoint,
            report,
            out,
            config,
            seed,
        } => cmd_prune(&checkpoint, &report, &out, config.as_deref(), seed),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_round_trips_through_toml() {
        let cfg = RunConfig::desk_segmenter(4);
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn train_table_is_optional() {
        let text = RunConfig::desk_classifier(0).to_toml();
        let model_and_data = text.split("[train]").next().unwrap();
        let cfg: RunConfig = toml::from_str(model_and_data).unwrap();
        assert_eq!(cfg.train, Hyperparams::default());
    }

    #[test]
    fn seed_override_reaches_every_seed() {
        let cfg = RunConfig::desk_classifier(0).with_seed(9);
        assert_eq!(cfg.model.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert!(matches!(cfg.data, DatasetDescriptor::SyntheticClassification { seed: 9, .. }));
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(Failure::from(Error::config("x")).code, EXIT_USAGE);
        assert_eq!(Failure::from(Error::Checksum).code, EXIT_RUNTIME);
    }
}
