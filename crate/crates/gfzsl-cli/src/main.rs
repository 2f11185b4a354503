//! Command-line front end for the `gfzsl` library: fit, tune, predict,
//! transductive refinement, few-shot updates, protocol evaluation, and
//! synthetic dataset generation, with text-file model persistence.
//!
//! Exit codes: 0 on success, 1 on data or model errors, 2 on usage errors.
//! Defaults may be supplied in a `--config` key=value file; explicit flags
//! win over config entries, and a key may be scoped to one subcommand by
//! prefixing it with the command name (`fit.out=model.txt`).

use clap::{Args, Parser, Subcommand};
use gfzsl::dataset::{self, AttributeTable, FeatureTable, SplitView};
use gfzsl::eval;
use gfzsl::expfam::FamilySpec;
use gfzsl::fewshot::FewShotStats;
use gfzsl::model::{GfzslConfig, GfzslModel, RegressorKind};
use gfzsl::persist;
use gfzsl::regression::KernelSpec;
use gfzsl::synthgen::{self, FeatureFileFormat, SynthConfig, TrueGating};
use gfzsl::transductive::{self, EmConfig};
use gfzsl::{ClassId, UNLABELED};
use ndarray::Array1;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser, Debug)]
#[command(
    name = "gfzsl",
    version,
    about = "Attribute-driven zero-shot and few-shot classifiers"
)]
struct Cli {
    /// key=value defaults file; flags override its entries.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit seen-class distributions and synthesize unseen-class parameters
    Fit(FitArgs),
    /// Classify feature vectors with a saved model
    Predict(PredictArgs),
    /// Refine unseen-class parameters on unlabeled data with EM
    Transduce(TransduceArgs),
    /// Fold labeled unseen-class examples into a saved model
    Fewshot(FewshotArgs),
    /// Pick ridge strengths by accuracy on held-out seen classes
    Tune(TuneArgs),
    /// Run the few-shot evaluation protocol against a labeled pool
    Eval(EvalArgs),
    /// Generate a synthetic dataset with known ground truth
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Feature table, CSV (`label,x1,..,xD`) or binary.
    #[arg(long, value_name = "FILE")]
    features: Option<PathBuf>,

    /// Attribute table CSV (`class_id,a1,..,aK`).
    #[arg(long, value_name = "FILE")]
    attributes: Option<PathBuf>,

    /// Seen class ids: comma list, or @file with one id per line.
    #[arg(long, value_name = "IDS")]
    seen: Option<String>,

    /// Unseen class ids: comma list, or @file with one id per line.
    #[arg(long, value_name = "IDS")]
    unseen: Option<String>,

    /// Class-conditional family: gaussian | bernoulli.
    #[arg(long, value_name = "NAME")]
    family: Option<String>,

    /// Attribute regression: linear | kernel.
    #[arg(long, value_name = "NAME")]
    regressor: Option<String>,

    /// Kernel for --regressor kernel: linear | quadratic | rbf.
    #[arg(long, value_name = "NAME")]
    kernel: Option<String>,

    /// RBF kernel width.
    #[arg(long, value_name = "F")]
    gamma: Option<f64>,

    /// Ridge strength for the mean regression.
    #[arg(long, value_name = "F")]
    lambda_mu: Option<f64>,

    /// Ridge strength for the log-variance regression (default: --lambda-mu).
    #[arg(long, value_name = "F")]
    lambda_sigma: Option<f64>,

    /// Rescale attributes with seen-class mean and spread.
    #[arg(long)]
    zscore: bool,

    /// Output model file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Model file written by `fit`, `transduce`, or `fewshot`.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,

    /// Feature table to classify; labels are ignored (-1 for none).
    #[arg(long, value_name = "FILE")]
    features: Option<PathBuf>,

    /// Candidate classes: unseen | all.
    #[arg(long, value_name = "SET")]
    candidates: Option<String>,

    /// Append per-candidate log-likelihood columns.
    #[arg(long)]
    scores: bool,

    /// Prediction CSV destination (default: stdout).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TransduceArgs {
    /// Model file to refine.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,

    /// Unlabeled unseen-class feature table; labels are ignored.
    #[arg(long, value_name = "FILE")]
    unlabeled: Option<PathBuf>,

    /// EM iteration cap.
    #[arg(long, value_name = "N")]
    max_iters: Option<usize>,

    /// Relative log-likelihood change that counts as converged.
    #[arg(long, value_name = "F")]
    tol: Option<f64>,

    /// Write a per-iteration log-likelihood CSV here.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,

    /// Output model file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FewshotArgs {
    /// Model file to update.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,

    /// Labeled unseen-class examples (feature table with labels).
    #[arg(long, value_name = "FILE")]
    labeled: Option<PathBuf>,

    /// Output model file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TuneArgs {
    /// Feature table, CSV or binary.
    #[arg(long, value_name = "FILE")]
    features: Option<PathBuf>,

    /// Attribute table CSV.
    #[arg(long, value_name = "FILE")]
    attributes: Option<PathBuf>,

    /// Seen class ids: comma list or @file.
    #[arg(long, value_name = "IDS")]
    seen: Option<String>,

    /// Unseen class ids: comma list or @file.
    #[arg(long, value_name = "IDS")]
    unseen: Option<String>,

    /// Class-conditional family: gaussian | bernoulli.
    #[arg(long, value_name = "NAME")]
    family: Option<String>,

    /// Attribute regression: linear | kernel.
    #[arg(long, value_name = "NAME")]
    regressor: Option<String>,

    /// Kernel for --regressor kernel: linear | quadratic | rbf.
    #[arg(long, value_name = "NAME")]
    kernel: Option<String>,

    /// RBF kernel width.
    #[arg(long, value_name = "F")]
    gamma: Option<f64>,

    /// Rescale attributes with seen-class mean and spread.
    #[arg(long)]
    zscore: bool,

    /// Comma list of ridge strengths; both lambdas range over it.
    #[arg(long, value_name = "LIST")]
    grid: Option<String>,

    /// Seen classes held out as pseudo-unseen (default: one fifth).
    #[arg(long, value_name = "N")]
    val_classes: Option<usize>,

    /// Seed for the held-out class choice.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model file to evaluate.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,

    /// Labeled evaluation pool (feature table with labels).
    #[arg(long, value_name = "FILE")]
    features: Option<PathBuf>,

    /// Comma list of per-class shot counts; 0 means no update.
    #[arg(long, value_name = "LIST")]
    shots: Option<String>,

    /// Independent resampling rounds.
    #[arg(long, value_name = "N")]
    trials: Option<usize>,

    /// Protocol seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Rank seen and unseen candidates together; seen-class rows in the
    /// pool become fixed test examples.
    #[arg(long)]
    generalized: bool,

    /// Report destination (default: stdout).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Seen class count.
    #[arg(long, value_name = "N")]
    seen: Option<usize>,

    /// Unseen class count.
    #[arg(long, value_name = "N")]
    unseen: Option<usize>,

    /// Attribute dimension K.
    #[arg(long, value_name = "N")]
    attr_dim: Option<usize>,

    /// Feature dimension D.
    #[arg(long, value_name = "N")]
    feat_dim: Option<usize>,

    /// Examples per class.
    #[arg(long, value_name = "N")]
    per_class: Option<usize>,

    /// True attribute-to-parameter map: linear | quadratic.
    #[arg(long, value_name = "NAME")]
    gating: Option<String>,

    /// Spread of the true mean-map weights.
    #[arg(long, value_name = "F")]
    mean_scale: Option<f64>,

    /// Spread of the true log-variance-map weights.
    #[arg(long, value_name = "F")]
    rho_scale: Option<f64>,

    /// Constant added to every true log-variance.
    #[arg(long, value_name = "F")]
    rho_shift: Option<f64>,

    /// Offset added to every unseen-class sample, per coordinate.
    #[arg(long, value_name = "F")]
    shift: Option<f64>,

    /// Generation seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Feature file format: csv | bin.
    #[arg(long, value_name = "NAME")]
    format: Option<String>,

    /// Directory for features, attributes, and class lists.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

/// Errors split by exit code: `Usage` exits 2, `Data` exits 1.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl From<gfzsl::Error> for CliError {
    fn from(err: gfzsl::Error) -> Self {
        CliError::Data(err.to_string())
    }
}

fn usage(msg: String) -> CliError {
    CliError::Usage(msg)
}

fn data(msg: String) -> CliError {
    CliError::Data(msg)
}

/// Per-command view of the config file. Lookups try the command-scoped key
/// (`fit.out`) before the bare key (`out`); unrecognized keys are left for
/// the other subcommands of the same bundle.
struct Ctx {
    cmd: &'static str,
    cfg: BTreeMap<String, String>,
}

impl Ctx {
    fn lookup(&self, key: &str) -> Option<&str> {
        self.cfg
            .get(&format!("{}.{}", self.cmd, key))
            .or_else(|| self.cfg.get(key))
            .map(String::as_str)
    }

    fn parse_raw<T: FromStr>(&self, key: &str, raw: &str) -> Result<T, CliError> {
        raw.parse()
            .map_err(|_| usage(format!("invalid value {raw:?} for --{key}")))
    }

    /// Flag value, else config value, else the given default.
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        match flag {
            Some(v) => Ok(v),
            None => match self.lookup(key) {
                Some(raw) => self.parse_raw(key, raw),
                None => Ok(default),
            },
        }
    }

    /// Flag value, else config value, else none.
    fn get_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => match self.lookup(key) {
                Some(raw) => Ok(Some(self.parse_raw(key, raw)?)),
                None => Ok(None),
            },
        }
    }

    /// Flag value, else config value, else a usage error.
    fn get_req<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, CliError> {
        match flag {
            Some(v) => Ok(v),
            None => match self.lookup(key) {
                Some(raw) => self.parse_raw(key, raw),
                None => Err(usage(format!("missing required --{key}"))),
            },
        }
    }

    /// Boolean switch: the flag can only turn it on, the config can set
    /// either way.
    fn get_flag(&self, set: bool, key: &str) -> Result<bool, CliError> {
        if set {
            return Ok(true);
        }
        match self.lookup(key) {
            Some(raw) => self.parse_raw(key, raw),
            None => Ok(false),
        }
    }
}

fn load_config(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| data(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(usage(format!(
                "config {} line {}: expected key=value",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(data(format!("no such file: {}", path.display())))
    }
}

fn parse_family(raw: &str) -> Result<FamilySpec, CliError> {
    match raw {
        "gaussian" => Ok(FamilySpec::gaussian()),
        "bernoulli" => Ok(FamilySpec::bernoulli()),
        other => Err(usage(format!(
            "unknown family {other:?} (expected gaussian or bernoulli)"
        ))),
    }
}

fn parse_kernel(raw: &str, gamma: f64) -> Result<KernelSpec, CliError> {
    match raw {
        "linear" => Ok(KernelSpec::Linear),
        "quadratic" => Ok(KernelSpec::Quadratic),
        "rbf" => Ok(KernelSpec::Rbf { gamma }),
        other => Err(usage(format!(
            "unknown kernel {other:?} (expected linear, quadratic, or rbf)"
        ))),
    }
}

fn parse_regressor(raw: &str, kernel: &str, gamma: f64) -> Result<RegressorKind, CliError> {
    match raw {
        "linear" => Ok(RegressorKind::Linear),
        "kernel" => Ok(RegressorKind::Kernel(parse_kernel(kernel, gamma)?)),
        other => Err(usage(format!(
            "unknown regressor {other:?} (expected linear or kernel)"
        ))),
    }
}

/// Comma list of ids, or `@file` holding whitespace- or comma-separated ids.
fn parse_class_spec(spec: &str) -> Result<BTreeSet<ClassId>, CliError> {
    let mut out = BTreeSet::new();
    if let Some(path) = spec.strip_prefix('@') {
        let text = std::fs::read_to_string(path)
            .map_err(|e| data(format!("cannot read class list {path}: {e}")))?;
        for tok in text.split(|c: char| c.is_whitespace() || c == ',') {
            if tok.is_empty() {
                continue;
            }
            let id = tok
                .parse()
                .map_err(|_| data(format!("{path}: bad class id {tok:?}")))?;
            out.insert(id);
        }
    } else {
        for tok in spec.split(',') {
            let tok = tok.trim();
            if tok.is_empty() {
                continue;
            }
            let id = tok
                .parse()
                .map_err(|_| usage(format!("bad class id {tok:?} in {spec:?}")))?;
            out.insert(id);
        }
    }
    if out.is_empty() {
        return Err(usage(format!("empty class list {spec:?}")));
    }
    Ok(out)
}

fn parse_shots(raw: &str) -> Result<Vec<usize>, CliError> {
    let mut out = Vec::new();
    for tok in raw.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        out.push(
            tok.parse()
                .map_err(|_| usage(format!("bad shot count {tok:?}")))?,
        );
    }
    if out.is_empty() {
        return Err(usage(format!("empty shots list {raw:?}")));
    }
    Ok(out)
}

fn parse_grid_values(raw: &str) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::new();
    for tok in raw.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        let v: f64 = tok
            .parse()
            .map_err(|_| usage(format!("bad ridge strength {tok:?}")))?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(usage(format!("ridge strength must be positive, got {tok}")));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(usage(format!("empty grid {raw:?}")));
    }
    Ok(out)
}

struct SplitInputs {
    features: FeatureTable,
    attributes: AttributeTable,
    split: SplitView,
}

fn load_split_inputs(
    features: &Path,
    attributes: &Path,
    seen: &str,
    unseen: &str,
) -> Result<SplitInputs, CliError> {
    require_file(features)?;
    require_file(attributes)?;
    let seen_ids = parse_class_spec(seen)?;
    let unseen_ids = parse_class_spec(unseen)?;
    let features = dataset::load_features_auto(features)?;
    let attributes = dataset::load_attributes(attributes, None)?;
    let split = dataset::make_split(&features, &attributes, &seen_ids, &unseen_ids)?;
    Ok(SplitInputs {
        features,
        attributes,
        split,
    })
}

/// Bernoulli fits reject non-binary values deep inside per-class
/// estimation; checking up front lets the message name the offending row
/// of the input file instead.
fn check_binary(features: &FeatureTable, path: &Path) -> Result<(), CliError> {
    for (i, row) in features.features().rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(data(format!(
                    "{}: example {} column {} has non-binary value {} (bernoulli family)",
                    path.display(),
                    i,
                    j + 1,
                    v
                )));
            }
        }
    }
    Ok(())
}

/// Writes to the file when given, else to stdout. File writes are
/// acknowledged on stdout; stdout writes are left bare so the output
/// stays machine-readable.
fn write_text(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            std::fs::write(path, text)
                .map_err(|e| data(format!("cannot write {}: {e}", path.display())))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_fit(args: FitArgs, ctx: &Ctx) -> Result<(), CliError> {
    let features_path: PathBuf = ctx.get_req(args.features, "features")?;
    let attributes_path: PathBuf = ctx.get_req(args.attributes, "attributes")?;
    let seen_spec: String = ctx.get_req(args.seen, "seen")?;
    let unseen_spec: String = ctx.get_req(args.unseen, "unseen")?;
    let family = parse_family(&ctx.get(args.family, "family", "gaussian".into())?)?;
    let regressor_raw: String = ctx.get(args.regressor, "regressor", "linear".into())?;
    let kernel_raw: String = ctx.get(args.kernel, "kernel", "quadratic".into())?;
    let gamma = ctx.get(args.gamma, "gamma", 1.0)?;
    let regressor = parse_regressor(&regressor_raw, &kernel_raw, gamma)?;
    let lambda_mu: f64 = ctx.get_req(args.lambda_mu, "lambda-mu")?;
    let lambda_sigma = ctx.get(args.lambda_sigma, "lambda-sigma", lambda_mu)?;
    let zscore = ctx.get_flag(args.zscore, "zscore")?;
    let out: PathBuf = ctx.get_req(args.out, "out")?;

    let inputs = load_split_inputs(&features_path, &attributes_path, &seen_spec, &unseen_spec)?;
    if matches!(family, FamilySpec::BernoulliProduct { .. }) {
        check_binary(&inputs.features, &features_path)?;
    }
    let config = GfzslConfig {
        family,
        regressor,
        lambda_mu,
        lambda_sigma,
        zscore_attributes: zscore,
    };
    let model = GfzslModel::fit(&inputs.split, &inputs.features, &inputs.attributes, config)?;
    persist::save_model(&model, &out)?;
    println!(
        "fit: S={} U={} D={} K={} lambda_mu={} lambda_sigma={}",
        inputs.split.n_seen(),
        inputs.split.n_unseen(),
        model.dim_d(),
        model.dim_k(),
        lambda_mu,
        lambda_sigma
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_predict(args: PredictArgs, ctx: &Ctx) -> Result<(), CliError> {
    let model_path: PathBuf = ctx.get_req(args.model, "model")?;
    let features_path: PathBuf = ctx.get_req(args.features, "features")?;
    let candidates_raw: String = ctx.get(args.candidates, "candidates", "unseen".into())?;
    let scores = ctx.get_flag(args.scores, "scores")?;
    let out: Option<PathBuf> = ctx.get_opt(args.out, "out")?;

    require_file(&model_path)?;
    require_file(&features_path)?;
    let model = persist::load_model(&model_path)?;
    let features = dataset::load_features_auto(&features_path)?;
    let candidates = match candidates_raw.as_str() {
        "unseen" => model.unseen_ids(),
        "all" => model.all_ids(),
        other => {
            return Err(usage(format!(
                "unknown candidate set {other:?} (expected unseen or all)"
            )))
        }
    };
    let predictions = model.classify_batch(features.features(), &candidates)?;

    let mut text = String::from("example_index,predicted_class");
    if scores {
        for id in &candidates {
            write!(text, ",loglik_{id}").unwrap();
        }
    }
    text.push('\n');
    for (i, pred) in predictions.iter().enumerate() {
        write!(text, "{i},{pred}").unwrap();
        if scores {
            let row_scores = model.score(features.row(i), &candidates)?;
            for ll in row_scores.values() {
                write!(text, ",{ll:.16e}").unwrap();
            }
        }
        text.push('\n');
    }
    write_text(out.as_deref(), &text)
}

fn cmd_transduce(args: TransduceArgs, ctx: &Ctx) -> Result<(), CliError> {
    let model_path: PathBuf = ctx.get_req(args.model, "model")?;
    let unlabeled_path: PathBuf = ctx.get_req(args.unlabeled, "unlabeled")?;
    let max_iters = ctx.get(args.max_iters, "max-iters", 100)?;
    let tol = ctx.get(args.tol, "tol", 1e-6)?;
    let trace_path: Option<PathBuf> = ctx.get_opt(args.trace, "trace")?;
    let out: PathBuf = ctx.get_req(args.out, "out")?;

    require_file(&model_path)?;
    require_file(&unlabeled_path)?;
    let model = persist::load_model(&model_path)?;
    let unlabeled = dataset::load_features_auto(&unlabeled_path)?;
    let em = EmConfig {
        max_iters,
        tol,
        ..EmConfig::default()
    };
    em.validate()?;
    let (refined, trace) =
        transductive::run_em(&model, unlabeled.features(), &model.unseen_ids(), &em, None)?;
    persist::save_model(&refined, &out)?;
    let last = trace
        .entries
        .last()
        .expect("EM always records at least one iteration");
    println!(
        "transduce: {} after {} iterations, log-likelihood {:.6}",
        if trace.converged {
            "converged"
        } else {
            "hit the iteration cap"
        },
        trace.entries.len(),
        last.loglik
    );
    println!("wrote {}", out.display());
    if let Some(path) = trace_path {
        std::fs::write(&path, trace.to_csv())
            .map_err(|e| data(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_fewshot(args: FewshotArgs, ctx: &Ctx) -> Result<(), CliError> {
    let model_path: PathBuf = ctx.get_req(args.model, "model")?;
    let labeled_path: PathBuf = ctx.get_req(args.labeled, "labeled")?;
    let out: PathBuf = ctx.get_req(args.out, "out")?;

    require_file(&model_path)?;
    require_file(&labeled_path)?;
    let mut model = persist::load_model(&model_path)?;
    let raw = std::fs::read(&labeled_path)
        .map_err(|e| data(format!("cannot read {}: {e}", labeled_path.display())))?;
    if raw.iter().all(u8::is_ascii_whitespace) {
        persist::save_model(&model, &out)?;
        println!("fewshot: no labeled examples, model unchanged");
        println!("wrote {}", out.display());
        return Ok(());
    }

    let labeled = dataset::load_features_auto(&labeled_path)?;
    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, &label) in labeled.labels().iter().enumerate() {
        if label == UNLABELED {
            return Err(data(format!(
                "{}: example {} has no class label",
                labeled_path.display(),
                i
            )));
        }
        by_class.entry(label).or_default().push(i);
    }
    for (class, rows) in &by_class {
        let stats = FewShotStats::from_samples(labeled.gather(rows).view());
        model.absorb_fewshot(*class, &stats)?;
        println!("class {}: absorbed {} examples", class, rows.len());
    }
    persist::save_model(&model, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_tune(args: TuneArgs, ctx: &Ctx) -> Result<(), CliError> {
    let features_path: PathBuf = ctx.get_req(args.features, "features")?;
    let attributes_path: PathBuf = ctx.get_req(args.attributes, "attributes")?;
    let seen_spec: String = ctx.get_req(args.seen, "seen")?;
    let unseen_spec: String = ctx.get_req(args.unseen, "unseen")?;
    let family = parse_family(&ctx.get(args.family, "family", "gaussian".into())?)?;
    let regressor_raw: String = ctx.get(args.regressor, "regressor", "linear".into())?;
    let kernel_raw: String = ctx.get(args.kernel, "kernel", "quadratic".into())?;
    let gamma = ctx.get(args.gamma, "gamma", 1.0)?;
    let regressor = parse_regressor(&regressor_raw, &kernel_raw, gamma)?;
    let zscore = ctx.get_flag(args.zscore, "zscore")?;
    let grid_raw: String = ctx.get_req(args.grid, "grid")?;
    let seed = ctx.get(args.seed, "seed", 0)?;

    let inputs = load_split_inputs(&features_path, &attributes_path, &seen_spec, &unseen_spec)?;
    if matches!(family, FamilySpec::BernoulliProduct { .. }) {
        check_binary(&inputs.features, &features_path)?;
    }
    let default_val = (inputs.split.n_seen() / 5).max(1);
    let val_classes = ctx.get(args.val_classes, "val-classes", default_val)?;
    let values = parse_grid_values(&grid_raw)?;
    let mut pairs = Vec::with_capacity(values.len() * values.len());
    for &mu in &values {
        for &sigma in &values {
            pairs.push((mu, sigma));
        }
    }
    // Placeholder lambdas; tune substitutes each grid pair.
    let base = GfzslConfig {
        family,
        regressor,
        lambda_mu: 1.0,
        lambda_sigma: 1.0,
        zscore_attributes: zscore,
    };
    let (train_view, _) = inputs.split.validation_split(val_classes, seed)?;
    let best = eval::tune(
        &train_view,
        &inputs.features,
        &inputs.attributes,
        &base,
        &pairs,
    )?;
    println!("lambda_mu,lambda_sigma,accuracy");
    println!(
        "{},{},{:.6}",
        best.lambda_mu, best.lambda_sigma, best.accuracy
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs, ctx: &Ctx) -> Result<(), CliError> {
    let model_path: PathBuf = ctx.get_req(args.model, "model")?;
    let features_path: PathBuf = ctx.get_req(args.features, "features")?;
    let shots_raw: String = ctx.get(args.shots, "shots", "2,5,10,15,20".into())?;
    let trials = ctx.get(args.trials, "trials", 100)?;
    let seed = ctx.get(args.seed, "seed", 0)?;
    let generalized = ctx.get_flag(args.generalized, "generalized")?;
    let out: Option<PathBuf> = ctx.get_opt(args.out, "out")?;

    require_file(&model_path)?;
    require_file(&features_path)?;
    let model = persist::load_model(&model_path)?;
    let features = dataset::load_features_auto(&features_path)?;
    let shots = parse_shots(&shots_raw)?;

    let unseen_ids = model.unseen_ids();
    let seen_ids = model.seen_ids();
    let mut pool: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    let mut seen_test: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, &label) in features.labels().iter().enumerate() {
        if label == UNLABELED {
            return Err(data(format!(
                "{}: example {} has no class label",
                features_path.display(),
                i
            )));
        }
        if unseen_ids.contains(&label) {
            pool.entry(label).or_default().push(i);
        } else if seen_ids.contains(&label) {
            // Seen-class rows only matter in the generalized setting.
            if generalized {
                seen_test.entry(label).or_default().push(i);
            }
        } else {
            return Err(data(format!(
                "{}: example {} has class {} unknown to the model",
                features_path.display(),
                i,
                label
            )));
        }
    }

    let shots_list = shots
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let mut report = format!("# shots: {shots_list}\n# trials: {trials} seed: {seed}\n");
    if generalized {
        let rows = eval::generalized_protocol(
            &model, &features, &pool, &seen_test, &shots, trials, seed,
        )?;
        report.push_str(
            "shots,unseen_mean,unseen_std,seen_mean,seen_std,overall_mean,overall_std\n",
        );
        for r in rows {
            writeln!(
                report,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.shots,
                r.unseen_mean,
                r.unseen_std,
                r.seen_mean,
                r.seen_std,
                r.overall_mean,
                r.overall_std
            )
            .unwrap();
        }
    } else {
        let rows = eval::fewshot_protocol(&model, &features, &pool, &shots, trials, seed)?;
        report.push_str("shots,mean,std\n");
        for r in rows {
            writeln!(report, "{},{:.6},{:.6}", r.shots, r.mean, r.std).unwrap();
        }
    }
    write_text(out.as_deref(), &report)
}

fn cmd_synth(args: SynthArgs, ctx: &Ctx) -> Result<(), CliError> {
    let seen = ctx.get(args.seen, "seen", 12)?;
    let unseen = ctx.get(args.unseen, "unseen", 3)?;
    let attr_dim = ctx.get(args.attr_dim, "attr-dim", 8)?;
    let feat_dim = ctx.get(args.feat_dim, "feat-dim", 32)?;
    let per_class = ctx.get(args.per_class, "per-class", 100)?;
    let gating_raw: String = ctx.get(args.gating, "gating", "linear".into())?;
    let mean_scale = ctx.get(args.mean_scale, "mean-scale", 2.0)?;
    let rho_scale = ctx.get(args.rho_scale, "rho-scale", 0.1)?;
    let rho_shift = ctx.get(args.rho_shift, "rho-shift", 0.0)?;
    let shift = ctx.get(args.shift, "shift", 0.0)?;
    let seed = ctx.get(args.seed, "seed", 0)?;
    let format_raw: String = ctx.get(args.format, "format", "csv".into())?;
    let out_dir: PathBuf = ctx.get_req(args.out_dir, "out-dir")?;

    let gating = match gating_raw.as_str() {
        "linear" => TrueGating::linear(),
        "quadratic" => TrueGating::Quadratic,
        other => {
            return Err(usage(format!(
                "unknown gating {other:?} (expected linear or quadratic)"
            )))
        }
    };
    let format = match format_raw.as_str() {
        "csv" => FeatureFileFormat::Csv,
        "bin" => FeatureFileFormat::Binary,
        other => {
            return Err(usage(format!(
                "unknown format {other:?} (expected csv or bin)"
            )))
        }
    };
    let config = SynthConfig {
        seen,
        unseen,
        attr_dim,
        feat_dim,
        samples_per_class: per_class,
        gating,
        mean_scale,
        rho_scale,
        rho_shift,
        domain_shift: (shift != 0.0).then(|| Array1::from_elem(feat_dim, shift)),
        seed,
    };
    let generated = synthgen::generate(&config)?;
    let paths = synthgen::write_dataset(
        &generated.features,
        &generated.attributes,
        &generated.split,
        &out_dir,
        format,
    )?;
    println!("wrote {}", paths.features.display());
    println!("wrote {}", paths.attributes.display());
    println!("wrote {}", paths.seen.display());
    println!("wrote {}", paths.unseen.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => BTreeMap::new(),
    };
    let cmd = match &cli.command {
        Command::Fit(_) => "fit",
        Command::Predict(_) => "predict",
        Command::Transduce(_) => "transduce",
        Command::Fewshot(_) => "fewshot",
        Command::Tune(_) => "tune",
        Command::Eval(_) => "eval",
        Command::Synth(_) => "synth",
    };
    let ctx = Ctx { cmd, cfg };
    let threads = ctx.get(cli.threads, "threads", 0)?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| data(format!("cannot size the thread pool: {e}")))?;
    }
    match cli.command {
        Command::Fit(args) => cmd_fit(args, &ctx),
        Command::Predict(args) => cmd_predict(args, &ctx),
        Command::Transduce(args) => cmd_transduce(args, &ctx),
        Command::Fewshot(args) => cmd_fewshot(args, &ctx),
        Command::Tune(args) => cmd_tune(args, &ctx),
        Command::Eval(args) => cmd_eval(args, &ctx),
        Command::Synth(args) => cmd_synth(args, &ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Prints help and version requests to stdout with code 0,
            // genuine usage errors to stderr with code 2.
            let _ = err.print();
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}
