use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use amel_core::config::RunConfig;
use amel_core::data::{make_benchmark, read_dataset, write_dataset, Dataset, DomainData};
use amel_core::eval::{self, Fold, Protocol, StrategyResult};
use amel_core::gradcheck::{run_micro_check, PhaseGradCheck};
use amel_core::model::{checkpoint, AmelModel, ExpertDesign};
use amel_core::trainer::{TrainHooks, TrainVariant};
use amel_core::AmelError;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "amel", version, about = "Domain-expert mixture training and evaluation on synthetic live/spoof data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the synthetic benchmark and write it to <out>/dataset.amel
    GenData,
    /// Train one model per protocol fold
    Train,
    /// Evaluate a checkpoint on its test domain
    Eval,
    /// Expert-design, aggregation-strategy and per-expert inference tables
    Ablate,
    /// Finite-difference check of the phase gradients on the micro model
    Gradcheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    Loo,
    Limited,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Baseline,
    Experts,
    Full,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON run config; missing fields take their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model checkpoint for eval and ablate
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Dataset index held out for testing
    #[arg(long, global = true)]
    target_domain: Option<usize>,
    /// Dataset file written by gen-data
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, global = true)]
    iters: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    gamma: Option<f64>,
    /// Samples per domain per iteration
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    channels: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    lambda_con: Option<f64>,
    /// Target perturbation size of the generated benchmark
    #[arg(long, global = true, allow_negative_numbers = true)]
    delta: Option<f64>,
    /// Samples per class per source domain of the generated benchmark
    #[arg(long, global = true)]
    samples: Option<usize>,
}

impl Overrides {
    fn apply(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_json_file(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c = c.with_seed(s);
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if let Some(p) = self.protocol {
            c.protocol = match p {
                ProtocolArg::Loo => Protocol::Loo,
                ProtocolArg::Limited => Protocol::Limited,
            };
        }
        if self.target_domain.is_some() {
            c.target_domain = self.target_domain;
        }
        if self.dataset.is_some() {
            c.dataset = self.dataset.clone();
        }
        if let Some(v) = self.variant {
            c.train.variant = match v {
                VariantArg::Baseline => TrainVariant::Baseline,
                VariantArg::Experts => TrainVariant::Experts,
                VariantArg::Full => TrainVariant::Full,
            };
        }
        if let Some(v) = self.iters {
            c.train.max_iters = v;
        }
        if let Some(v) = self.epochs {
            c.train.max_epochs = v;
        }
        if let Some(v) = self.beta {
            c.train.beta = v;
        }
        if let Some(v) = self.gamma {
            c.train.gamma = v;
        }
        if let Some(v) = self.batch {
            c.train.batch_per_domain = v;
        }
        if let Some(v) = self.channels {
            c.model.channels = v;
        }
        if let Some(v) = self.lambda_con {
            c.train.loss.lambda_con = v;
        }
        if let Some(v) = self.delta {
            c.benchmark.relevance.delta = v;
        }
        if let Some(v) = self.samples {
            for n in [
                &mut c.benchmark.n_live,
                &mut c.benchmark.n_spoof,
                &mut c.benchmark.target_live,
                &mut c.benchmark.target_spoof,
            ] {
                *n = v;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Records the config, tool version and seed next to a command's outputs.
fn write_run_record(config: &RunConfig, command: Command) -> Result<()> {
    fs::create_dir_all(&config.out_dir).with_context(|| format!("creating {}", config.out_dir.display()))?;
    let name = command.name().replace('-', "_");
    write_json(&config.out_dir.join(format!("{}_config.json", name)), config)?;
    write_json(
        &config.out_dir.join(format!("{}_manifest.json", name)),
        &json!({
            "tool": "amel",
            "version": VERSION,
            "command": command.name(),
            "seed": config.seed,
        }),
    )
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let ds = match &config.dataset {
        Some(p) => read_dataset(p).with_context(|| format!("reading dataset {}", p.display()))?,
        None => make_benchmark(&config.benchmark)?,
    };
    if ds.geometry.image_hw != config.model.input_hw || ds.geometry.depth_hw != config.model.depth_map_hw {
        return Err(AmelError::Config {
            field: "model.input_hw".into(),
            reason: format!(
                "model expects {}x{} images with {}x{} depth, dataset has {}x{} with {}x{}",
                config.model.input_hw,
                config.model.input_hw,
                config.model.depth_map_hw,
                config.model.depth_map_hw,
                ds.geometry.image_hw,
                ds.geometry.image_hw,
                ds.geometry.depth_hw,
                ds.geometry.depth_hw
            ),
        }
        .into());
    }
    Ok(ds)
}

fn test_domain(config: &RunConfig, ds: &Dataset) -> Result<usize> {
    let t = config.target_domain.or(ds.target).ok_or_else(|| AmelError::Config {
        field: "target_domain".into(),
        reason: "dataset has no target; pass --target-domain".into(),
    })?;
    if t >= ds.domains.len() {
        return Err(AmelError::Config {
            field: "target_domain".into(),
            reason: format!("{} is not a domain index (< {})", t, ds.domains.len()),
        }
        .into());
    }
    Ok(t)
}

fn fold_dir(config: &RunConfig, fold: &Fold) -> PathBuf {
    config.out_dir.join(format!("domain{}", fold.test))
}

fn gen_data(config: &RunConfig) -> Result<()> {
    let ds = make_benchmark(&config.benchmark)?;
    let path = config.out_dir.join("dataset.amel");
    write_dataset(&ds, &path)?;
    println!(
        "wrote {} ({} domains, {} samples)",
        path.display(),
        ds.domains.len(),
        ds.domains.iter().map(DomainData::len).sum::<usize>()
    );
    Ok(())
}

fn train(config: &RunConfig) -> Result<()> {
    let ds = load_dataset(config)?;
    let target = config.target_domain.or(ds.target);
    for fold in eval::folds(ds.domains.len(), config.protocol, target)? {
        let dir = fold_dir(config, &fold);
        fs::create_dir_all(&dir)?;
        let mut log = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
        let ckpt = dir.join("checkpoint.bin");
        let hooks = TrainHooks {
            log: Some(&mut log),
            checkpoint: Some(&ckpt),
            eval_domain: Some(&ds.domains[fold.test]),
        };
        let (_, records) = eval::train_fold(&ds, &config.model, &config.train, &fold, hooks)?;
        log.flush()?;
        let last = records.last().expect("at least one iteration");
        println!(
            "fold train {:?} test {}: {} iterations, final L_B {:.4}, checkpoint {}",
            fold.train,
            fold.test,
            records.len(),
            last.loss_b.total,
            ckpt.display()
        );
    }
    Ok(())
}

fn checkpoint_for(config: &RunConfig, explicit: Option<&Path>, test: usize) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.out_dir.join(format!("domain{}", test)).join("checkpoint.bin"))
}

fn load_model(path: &Path) -> Result<AmelModel> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn eval_cmd(config: &RunConfig, explicit: Option<&Path>) -> Result<()> {
    let ds = load_dataset(config)?;
    let test = test_domain(config, &ds)?;
    let model = load_model(&checkpoint_for(config, explicit, test))?;
    let domain = &ds.domains[test];
    let report = eval::evaluate(&model, domain, config.train.variant)?;
    write_json(&config.out_dir.join("eval_report.json"), &report)?;
    fs::write(config.out_dir.join("roc.csv"), eval::roc_csv(&report.roc_points))?;
    let mut dumped: Vec<&DomainData> = ds.domains.iter().enumerate().filter(|(i, _)| *i != test).map(|(_, d)| d).collect();
    dumped.push(domain);
    eval::dump_features(&model, &dumped, &config.out_dir.join("features.csv"))?;
    println!(
        "domain {} ({}): AUC {:.4}, EER {:.4}, HTER@0.5 {:.4}",
        test, report.mode, report.auc, report.eer, report.hter_at["fixed_0.5"]
    );
    Ok(())
}

#[derive(Serialize)]
struct DesignRow {
    design: &'static str,
    auc: f64,
    hter: f64,
}

#[derive(Serialize, Default)]
struct AblationReport {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    expert_designs: Vec<DesignRow>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    aggregation: BTreeMap<String, StrategyResult>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    inference: Vec<(String, StrategyResult)>,
}

fn ablate(config: &RunConfig, explicit: Option<&Path>) -> Result<()> {
    let ds = load_dataset(config)?;
    let test = test_domain(config, &ds)?;
    let domain = &ds.domains[test];
    let fold = Fold {
        train: (0..ds.domains.len()).filter(|&d| d != test).collect(),
        test,
    };
    let mut out = AblationReport::default();
    let mut trained: Option<AmelModel> = None;
    if config.ablation.expert_designs {
        for design in ExpertDesign::ALL {
            let mut model_config = config.model.clone();
            model_config.expert_design = design;
            let (model, _) = eval::train_fold(&ds, &model_config, &config.train, &fold, TrainHooks::default())?;
            let r = eval::evaluate(&model, domain, config.train.variant)?;
            println!("design {:<14} AUC {:.4} HTER {:.4}", design.label(), r.auc, r.eer);
            out.expert_designs.push(DesignRow {
                design: design.label(),
                auc: r.auc,
                hter: r.eer,
            });
            if design == config.model.expert_design {
                trained = Some(model);
            }
        }
    }
    if config.ablation.aggregation || config.ablation.inference {
        let model = match (explicit, trained) {
            (Some(p), _) => load_model(p)?,
            (None, Some(m)) => m,
            (None, None) => eval::train_fold(&ds, &config.model, &config.train, &fold, TrainHooks::default())?.0,
        };
        if config.ablation.aggregation {
            out.aggregation = eval::ablate_aggregation(&model, domain)?;
            for (name, r) in &out.aggregation {
                println!("aggregation {:<18} AUC {:.4} HTER {:.4}", name, r.auc, r.hter);
            }
        }
        if config.ablation.inference {
            out.inference = eval::ablate_inference(&model, domain)?;
            for (name, r) in &out.inference {
                println!("inference {:<18} AUC {:.4} HTER {:.4}", name, r.auc, r.hter);
            }
        }
    }
    write_json(&config.out_dir.join("ablation.json"), &out)
}

#[derive(Serialize)]
struct GradcheckOutput<'a> {
    pass: bool,
    tolerance: f64,
    max_rel_error: f64,
    report: &'a PhaseGradCheck,
}

fn gradcheck(config: &RunConfig) -> Result<()> {
    let report = run_micro_check(&config.gradcheck)?;
    let max = report.max_rel_error();
    let tolerance = config.gradcheck.tolerance;
    let pass = max < tolerance;
    write_json(
        &config.out_dir.join("gradcheck.json"),
        &GradcheckOutput {
            pass,
            tolerance,
            max_rel_error: max,
            report: &report,
        },
    )?;
    for (name, r) in [("L_B", &report.loss_b), ("L_trn", &report.loss_trn), ("L_val", &report.loss_val)] {
        println!("{:<6} max rel error {:.3e} over {} coordinates", name, r.max_rel_error, r.coordinates);
    }
    if !pass {
        bail!(GradcheckFailed { max, tolerance });
    }
    println!("PASS ({} parameters, tolerance {:e})", report.parameters, tolerance);
    Ok(())
}

#[derive(Debug)]
struct GradcheckFailed {
    max: f64,
    tolerance: f64,
}

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "max relative error {:e} is not below {:e}", self.max, self.tolerance)
    }
}

impl std::error::Error for GradcheckFailed {}

fn run(cli: &Cli) -> Result<()> {
    let config = cli.opts.apply()?;
    write_run_record(&config, cli.command)?;
    let ckpt = cli.opts.checkpoint.as_deref();
    match cli.command {
        Command::GenData => gen_data(&config),
        Command::Train => train(&config),
        Command::Eval => eval_cmd(&config, ckpt),
        Command::Ablate => ablate(&config, ckpt),
        Command::Gradcheck => gradcheck(&config),
    }
}

fn error_kind(e: &AmelError) -> &'static str {
    match e {
        AmelError::Shape { .. } => "shape",
        AmelError::InvalidArgument { .. } => "invalid_argument",
        AmelError::UninitializedStats => "uninitialized_stats",
        AmelError::EmptyMaskRow { .. } => "empty_mask_row",
        AmelError::NonScalarLoss { .. } => "non_scalar_loss",
        AmelError::NonFinite(_) => "non_finite",
        AmelError::IndexOutOfRange { .. } => "index_out_of_range",
        AmelError::BadMagic { .. } => "bad_magic",
        AmelError::BadVersion { .. } => "bad_version",
        AmelError::UnexpectedEnd { .. } => "unexpected_end",
        AmelError::Config { .. } => "config",
        AmelError::Io(_) => "io",
        AmelError::Json(_) => "json",
    }
}

/// The error chain joined with `: `, skipping causes the previous
/// message already ends with.
fn message(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for e in err.chain() {
        let s = e.to_string();
        if !parts.last().is_some_and(|p| p.ends_with(&s)) {
            parts.push(s);
        }
    }
    parts.join(": ")
}

/// One JSON line describing the failure.
fn error_record(command: &str, err: &anyhow::Error) -> serde_json::Value {
    let core = err.chain().find_map(|e| e.downcast_ref::<AmelError>());
    let (kind, field) = match core {
        Some(AmelError::Config { field, .. }) => ("config", Some(field.clone())),
        Some(e) => (error_kind(e), None),
        None if err.downcast_ref::<GradcheckFailed>().is_some() => ("gradcheck_failed", None),
        None if err.chain().any(|e| e.downcast_ref::<std::io::Error>().is_some()) => ("io", None),
        None => ("other", None),
    };
    json!({
        "error": {
            "command": command,
            "kind": kind,
            "field": field,
            "message": message(err),
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = error_record(cli.command.name(), &err);
            eprintln!("{}", record);
            if record["error"]["kind"] == "config" {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_record_names_the_field() {
        let err = anyhow::anyhow!(AmelError::Config {
            field: "train.beta".into(),
            reason: "must be finite and > 0".into(),
        });
        let rec = error_record("train", &err);
        assert_eq!(rec["error"]["kind"], "config");
        assert_eq!(rec["error"]["field"], "train.beta");
        assert_eq!(rec["error"]["command"], "train");
    }

    #[test]
    fn overrides_reach_the_config() {
        let cli = Cli::parse_from(["amel", "train", "--seed", "7", "--iters", "3", "--protocol", "limited", "--variant", "baseline"]);
        let c = cli.opts.apply().unwrap();
        assert_eq!((c.seed, c.train.seed, c.benchmark.seed), (7, 7, 7));
        assert_eq!(c.train.max_iters, 3);
        assert_eq!(c.protocol, Protocol::Limited);
        assert_eq!(c.train.variant, TrainVariant::Baseline);
    }

    #[test]
    fn invalid_override_is_a_config_error() {
        let cli = Cli::parse_from(["amel", "train", "--beta", "-1"]);
        let err = cli.opts.apply().unwrap_err();
        assert_eq!(error_record("train", &err)["error"]["field"], "train.beta");
    }
}
