//! `quce`: train models, explain instances, run the benchmark.

mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use quce_core::attribution::{AgiConfig, RiemannConfig, RiemannRule};
use quce_core::data::{load_csv, prepare, Normalizer, Split};
use quce_core::evaluation::{run_benchmark, BenchmarkConfig, BenchmarkMethod};
use quce_core::explain::{explain_instance, ExplainConfig, ExplainMethod, InstanceRef, SCHEMA_VERSION};
use quce_core::generator::GeneratorConfig;
use quce_core::models::{train_classifier, train_vae, TrainConfig};
use quce_core::{Classifier, Dataset, Vae};

#[derive(Parser)]
#[command(
    name = "quce",
    version,
    about = "Counterfactual paths and path-integrated attributions with VAE uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier and the VAE on a CSV file.
    Train(TrainArgs),
    /// Generate a counterfactual and explain it.
    Explain(ExplainArgs),
    /// Run the benchmark over sampled train and test instances.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Name of the binary label column.
    #[arg(long)]
    label: String,
    /// Fraction of rows used for training.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    /// Seed for the split, training and generation.
    #[arg(long, env = "QUCE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out_classifier: PathBuf,
    #[arg(long)]
    out_vae: PathBuf,
    /// Classifier epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    vae_epochs: Option<usize>,
    /// Metrics sidecar; defaults to the classifier path with `.metrics.json`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    vae: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Right,
    Midpoint,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    models: ModelArgs,
    /// Row index into the chosen split, inline comma-separated values in
    /// original units, or `all`.
    #[arg(long, default_value = "0", allow_hyphen_values = true)]
    instance: String,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    instance_split: SplitArg,
    /// Class to move toward; defaults to the class not predicted.
    #[arg(long)]
    target_class: Option<u8>,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda3: f64,
    /// Generator learning rate.
    #[arg(long, default_value_t = 0.05)]
    phi: f64,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    /// Validity threshold on the target-class probability.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    /// Number of generator runs (exquce only).
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Start-point jitter used when k > 1.
    #[arg(long, default_value_t = 0.1)]
    jitter: f64,
    #[arg(long, default_value_t = 500)]
    riemann_k: usize,
    #[arg(long, value_enum, default_value_t = RuleArg::Right)]
    riemann_rule: RuleArg,
    #[arg(long, default_value = "quce")]
    method: ExplainMethod,
    /// AGI step size.
    #[arg(long, default_value_t = 0.05)]
    agi_eta: f64,
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    models: ModelArgs,
    /// Comma-separated subset of quce, ig, agi, proximity.
    #[arg(long, default_value = "quce,ig,agi,proximity")]
    methods: String,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Interpolation points per path for path uncertainty.
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 500)]
    riemann_k: usize,
    /// Report JSON; the text table goes next to it with a `.txt` extension.
    #[arg(long)]
    out: PathBuf,
}

/// Bad flag values found after parsing; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Serialize, Deserialize)]
struct ClassifierMetrics {
    train_accuracy: f64,
    test_accuracy: f64,
    final_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct VaeMetrics {
    final_loss: Option<f64>,
    latent_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainSidecar {
    schema_version: u32,
    seed: u64,
    split: f64,
    n_train: usize,
    n_test: usize,
    feature_names: Vec<String>,
    normalizer: Normalizer,
    classifier: ClassifierMetrics,
    vae: VaeMetrics,
}

fn sidecar_path(classifier: &Path) -> PathBuf {
    classifier.with_extension("metrics.json")
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_split(d: &DataArgs) -> Result<(Dataset, Dataset, Normalizer)> {
    if !(d.split > 0.0 && d.split < 1.0) {
        return Err(usage(format!("--split must lie in (0, 1), got {}", d.split)));
    }
    let data = load_csv::<f64>(&d.data, &d.label).with_context(|| format!("loading {}", d.data.display()))?;
    Ok(prepare(&data, d.split, d.seed)?)
}

fn load_models(m: &ModelArgs, n_features: usize) -> Result<(Classifier, Vae)> {
    let clf = Classifier::load(&m.classifier).with_context(|| format!("loading {}", m.classifier.display()))?;
    let vae = Vae::load(&m.vae).with_context(|| format!("loading {}", m.vae.display()))?;
    if clf.n_features() != n_features || vae.n_features() != n_features {
        bail!(
            "models expect {} / {} features but the data has {n_features}",
            clf.n_features(),
            vae.n_features()
        );
    }
    Ok((clf, vae))
}

/// Warns when the sidecar written at training time disagrees with the
/// normaliser re-derived from the data flags.
fn check_sidecar(m: &ModelArgs, normalizer: &Normalizer) {
    let Ok(text) = fs::read_to_string(sidecar_path(&m.classifier)) else {
        return;
    };
    match serde_json::from_str::<TrainSidecar>(&text) {
        Ok(s) if &s.normalizer != normalizer => log::warn!(
            "normaliser differs from training (trained with --seed {} --split {}); pass the same flags",
            s.seed,
            s.split
        ),
        Ok(_) => {}
        Err(e) => log::warn!("unreadable metrics sidecar: {e}"),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (train, test, normalizer) = load_split(&a.data)?;
    let seed = a.data.seed;
    let mut ccfg = TrainConfig::classifier_default().with_seed(seed);
    if let Some(e) = a.epochs {
        ccfg = ccfg.with_epochs(e);
    }
    let mut vcfg = TrainConfig::vae_default().with_seed(seed);
    if let Some(e) = a.vae_epochs {
        vcfg = vcfg.with_epochs(e);
    }
    let clf = train_classifier(&train, &ccfg)?;
    let vae = train_vae(&train, &vcfg)?;
    clf.save(&a.out_classifier)?;
    vae.save(&a.out_vae)?;
    let sidecar = TrainSidecar {
        schema_version: SCHEMA_VERSION,
        seed,
        split: a.data.split,
        n_train: train.len(),
        n_test: test.len(),
        feature_names: train.feature_names.clone(),
        normalizer,
        classifier: ClassifierMetrics {
            train_accuracy: clf.accuracy(&train)?,
            test_accuracy: clf.accuracy(&test)?,
            final_loss: clf.metrics.final_loss,
        },
        vae: VaeMetrics {
            final_loss: vae.final_loss,
            latent_dim: vae.latent_dim(),
        },
    };
    let path = a.metrics.unwrap_or_else(|| sidecar_path(&a.out_classifier));
    write(&path, &serde_json::to_string_pretty(&sidecar)?)?;
    log::info!(
        "train accuracy {:.4}, test accuracy {:.4}",
        sidecar.classifier.train_accuracy,
        sidecar.classifier.test_accuracy
    );
    Ok(())
}

enum InstanceSel {
    Index(usize),
    Inline(Vec<f64>),
    All,
}

fn parse_instance(s: &str) -> Result<InstanceSel> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("all") {
        return Ok(InstanceSel::All);
    }
    if s.contains(',') {
        let values = s
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| usage(format!("--instance: {e}")))?;
        return Ok(InstanceSel::Inline(values));
    }
    s.parse::<usize>()
        .map(InstanceSel::Index)
        .map_err(|_| usage(format!("--instance must be an index, inline CSV or 'all', got '{s}'")))
}

fn svg_path(base: &Path, index: usize, many: bool) -> PathBuf {
    if !many {
        return base.to_path_buf();
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("explanation");
    base.with_file_name(format!("{stem}-{index}.svg"))
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let selection = parse_instance(&a.instance)?;
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    if a.k > 1 && a.method != ExplainMethod::Exquce {
        return Err(usage("--k > 1 needs --method exquce"));
    }
    if a.target_class.is_some_and(|c| c > 1) {
        return Err(usage("--target-class must be 0 or 1"));
    }
    let (train, test, normalizer) = load_split(&a.data)?;
    let (clf, vae) = load_models(&a.models, train.n_features())?;
    check_sidecar(&a.models, &normalizer);
    let all = matches!(selection, InstanceSel::All);
    let (split, data) = match a.instance_split {
        SplitArg::Train => (Split::Train, &train),
        SplitArg::Test => (Split::Test, &test),
    };

    let cfg = ExplainConfig {
        method: a.method,
        target_class: a.target_class,
        generator: GeneratorConfig {
            lambda: [a.lambda1, a.lambda2, a.lambda3],
            learning_rate: a.phi,
            max_iterations: a.iters,
            threshold: a.theta,
            jitter: if a.k > 1 { a.jitter } else { 0.0 },
            seed: a.data.seed,
            ..GeneratorConfig::default()
        },
        paths: a.k,
        riemann: RiemannConfig {
            steps: a.riemann_k,
            rule: match a.riemann_rule {
                RuleArg::Right => RiemannRule::Right,
                RuleArg::Midpoint => RiemannRule::Midpoint,
            },
        },
        agi: AgiConfig {
            step_size: a.agi_eta,
            threshold: a.theta,
            ..AgiConfig::default()
        },
    };
    cfg.generator.validate().map_err(|e| usage(e.to_string()))?;
    if a.riemann_k == 0 {
        return Err(usage("--riemann-k must be at least 1"));
    }

    let jobs: Vec<(Vec<f64>, InstanceRef)> = match selection {
        InstanceSel::Index(i) => {
            if i >= data.len() {
                return Err(usage(format!(
                    "--instance {i} out of range ({} rows in split)",
                    data.len()
                )));
            }
            vec![(
                data.row(i).to_vec(),
                InstanceRef {
                    index: Some(i),
                    split: Some(split),
                },
            )]
        }
        InstanceSel::Inline(v) => {
            if v.len() != train.n_features() {
                return Err(usage(format!(
                    "--instance has {} values, expected {}",
                    v.len(),
                    train.n_features()
                )));
            }
            vec![(
                normalizer.transform(&v),
                InstanceRef {
                    index: None,
                    split: None,
                },
            )]
        }
        InstanceSel::All => (0..data.len())
            .map(|i| {
                (
                    data.row(i).to_vec(),
                    InstanceRef {
                        index: Some(i),
                        split: Some(split),
                    },
                )
            })
            .collect(),
    };
    let many = all || jobs.len() > 1;
    let docs = jobs
        .into_par_iter()
        .map(|(x, r)| explain_instance(&x, r, &cfg, &clf, &vae, &normalizer, &train.feature_names))
        .collect::<Result<Vec<_>, _>>()?;
    for d in &docs {
        if !d.valid {
            log::warn!("instance {:?}: counterfactual is not valid", d.instance.index);
        }
    }

    if let Some(base) = &a.svg {
        for (n, d) in docs.iter().enumerate() {
            let idx = d.instance.index.unwrap_or(n);
            write(&svg_path(base, idx, many), &svg::render(d))?;
        }
    }
    let json = if many {
        serde_json::to_string_pretty(&docs)?
    } else {
        docs[0].to_json()?
    };
    match &a.out {
        Some(p) => write(p, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let methods = a
        .methods
        .split(',')
        .map(|m| BenchmarkMethod::parse(m.trim()).ok_or_else(|| usage(format!("unknown method '{m}'"))))
        .collect::<Result<Vec<_>>>()?;
    if a.instances == 0 || a.steps == 0 || a.riemann_k == 0 {
        return Err(usage("--instances, --steps and --riemann-k must be at least 1"));
    }
    let (train, test, normalizer) = load_split(&a.data)?;
    let (clf, vae) = load_models(&a.models, train.n_features())?;
    check_sidecar(&a.models, &normalizer);
    let cfg = BenchmarkConfig {
        instances: a.instances,
        steps: a.steps,
        seed: a.data.seed,
        generator: GeneratorConfig {
            seed: a.data.seed,
            ..GeneratorConfig::default()
        },
        riemann: RiemannConfig::new(a.riemann_k),
        ..BenchmarkConfig::default()
    };
    let report = run_benchmark(&[&train, &test], &methods, &cfg, &clf, &vae)?;
    write(&a.out, &report.to_json()?)?;
    let table = report.to_table();
    write(&a.out.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
