use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use lvae::benchmark::build_model;
use lvae::checkpoint;
use lvae::classifier::{
    auroc, auroc_permutation_p, event_times, fit_bins, Classifier, ClassifierConfig, OutcomeColumns,
};
use lvae::datagen::{self, format_value};
use lvae::kl::verify::{evaluate, random_instance, InstanceLimits};
use lvae::metrics::{imputation_mse, mse_where};
use lvae::nnet::ObservationSet;
use lvae::trainer::{impute, pretrain, train, EpochRecord, ModelState, TrainData};
use lvae::{CovariateMatrix, CovariateSchema, LvaeError};
use serde_json::json;

use crate::config::RunConfig;

/// Exit status 1 for `Usage`, 2 for `Runtime`.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<LvaeError> for Failure {
    fn from(e: LvaeError) -> Self {
        match e {
            LvaeError::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type Outcome = Result<(), Failure>;

/// Options shared by every subcommand after resolution.
pub struct Context {
    pub config: RunConfig,
}

impl Context {
    pub fn load(config: Option<&Path>, seed: Option<u64>) -> Result<Self, Failure> {
        let mut cfg = match config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
                RunConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.set_seed(s);
        }
        Ok(Context { config: cfg })
    }

    /// `flag`, else the config value of `key`, else a usage error.
    pub fn path(&mut self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf, Failure> {
        if let Some(p) = flag {
            self.config.set(key, &p.to_string_lossy()).map_err(Failure::Usage)?;
            return Ok(p);
        }
        match self.config.get(key) {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(Failure::Usage(format!("missing --{} (or `{key}` in the config)", key.replace('_', "-")))),
        }
    }

    /// Writes the resolved configuration to `path`.
    fn echo(&self, path: &Path) -> Outcome {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.config.render()).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
    }
}

/// `<file>.config.txt` beside an output file.
fn echo_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config.txt");
    out.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Outcome {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn json_line(value: &impl serde::Serialize) -> String {
    serde_json::to_string(value).expect("records serialize")
}

fn log_epoch(out: &mut impl Write) -> impl FnMut(&EpochRecord) + '_ {
    move |r| {
        let _ = writeln!(out, "{}", json_line(r));
    }
}

fn load_split(dir: &Path, schema: &CovariateSchema) -> Result<TrainData, Failure> {
    let (y, x) = datagen::load_with_schema(dir, schema)?;
    Ok(TrainData::new(y, x)?)
}

fn load_state(path: &Path) -> Result<ModelState, Failure> {
    Ok(checkpoint::load(path)?)
}

pub fn generate(mut ctx: Context, out: Option<PathBuf>) -> Outcome {
    let out = ctx.path(out, "out")?;
    let data = datagen::generate(&ctx.config.bench.data)?;
    datagen::write(&data, &out)?;
    let ids: Vec<String> = data.prediction_ids.iter().map(i64::to_string).collect();
    write_text(&out.join("prediction_ids.txt"), &(ids.join("\n") + "\n"))?;
    ctx.echo(&out.join("config.txt"))?;
    eprintln!(
        "wrote {} train, {} val and {} test rows to {}",
        data.train.x.len(),
        data.val.x.len(),
        data.test.x.len(),
        out.display()
    );
    Ok(())
}

/// A fresh model for the training split, or the state stored in `init`.
fn initial_state(ctx: &Context, init: Option<&Path>, train_data: &TrainData) -> Result<ModelState, Failure> {
    if let Some(path) = init {
        return load_state(path);
    }
    let bench = &ctx.config.bench;
    let mut arch = bench.architecture();
    arch.data_dim = train_data.y.dim();
    let model = build_model(train_data.x.schema(), &bench.prior_terms, arch, &train_data.x, ctx.config.seed())?;
    Ok(ModelState::new(model))
}

fn read_training_data(dir: &Path) -> Result<(TrainData, Option<TrainData>), Failure> {
    let schema = CovariateSchema::longitudinal();
    let train_data = load_split(&dir.join("train"), &schema)?;
    let val_dir = dir.join("val");
    let val = if val_dir.join("Y.csv").exists() {
        Some(load_split(&val_dir, &schema)?)
    } else {
        None
    };
    Ok((train_data, val))
}

pub fn pretrain_cmd(mut ctx: Context, data_dir: Option<PathBuf>, out: Option<PathBuf>) -> Outcome {
    let data_dir = ctx.path(data_dir, "data_dir")?;
    let out = ctx.path(out, "out")?;
    let (train_data, _) = read_training_data(&data_dir)?;
    let mut state = initial_state(&ctx, None, &train_data)?;
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    pretrain(&mut state, &train_data, &ctx.config.bench.train, &mut log_epoch(&mut lock))?;
    ensure_parent(&out)?;
    checkpoint::save(&state, &out)?;
    ctx.echo(&echo_path(&out))?;
    eprintln!("pretrained for {} epochs; checkpoint {}", state.epoch, out.display());
    Ok(())
}

pub fn train_cmd(mut ctx: Context, data_dir: Option<PathBuf>, out: Option<PathBuf>, init: Option<PathBuf>) -> Outcome {
    let data_dir = ctx.path(data_dir, "data_dir")?;
    let out = ctx.path(out, "out")?;
    let (train_data, val) = read_training_data(&data_dir)?;
    let mut state = initial_state(&ctx, init.as_deref(), &train_data)?;
    let cfg = &ctx.config.bench.train;
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    let mut log = log_epoch(&mut lock);
    if init.is_none() {
        pretrain(&mut state, &train_data, cfg, &mut log)?;
    }
    train(&mut state, &train_data, val.as_ref(), cfg, &mut log)?;
    ensure_parent(&out)?;
    checkpoint::save(&state, &out)?;
    ctx.echo(&echo_path(&out))?;
    match &state.best {
        Some(b) => eprintln!(
            "trained for {} epochs; best validation loss {:.6} at epoch {}; checkpoint {}",
            state.epoch,
            b.val_loss,
            b.epoch,
            out.display()
        ),
        None => eprintln!("trained for {} epochs; checkpoint {}", state.epoch, out.display()),
    }
    Ok(())
}

pub fn verify_bounds(ctx: Context, seeds: usize, out: Option<PathBuf>) -> Outcome {
    let first = ctx.config.seed();
    let mut text = String::new();
    let mut violations = 0;
    for seed in first..first + seeds as u64 {
        let inst = random_instance(seed, InstanceLimits::default())?;
        let rec = evaluate(&inst)?;
        if rec.violates(1e-8) {
            violations += 1;
        }
        let _ = writeln!(text, "{}", json_line(&rec));
    }
    match &out {
        Some(path) => write_text(path, &text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    eprintln!("{seeds} instances, {violations} ordering violations");
    if violations > 0 {
        return Err(Failure::Runtime(format!("{violations} instances violate KL <= D2 <= D1")));
    }
    Ok(())
}

pub fn impute_cmd(mut ctx: Context, checkpoint: PathBuf, data_dir: Option<PathBuf>, split: &str, out: Option<PathBuf>) -> Outcome {
    let data_dir = ctx.path(data_dir, "data_dir")?;
    let out = ctx.path(out, "out")?;
    let state = load_state(&checkpoint)?;
    let model = state.best_model();
    let (y, _) = datagen::load_with_schema(&data_dir.join(split), &model.schema)?;
    let filled = impute(model, &y)?;
    ensure_parent(&out)?;
    datagen::write_y(&out, &filled)?;
    ctx.echo(&echo_path(&out))?;
    eprintln!("imputed {} missing entries into {}", y.len() * y.dim() - y.n_observed(), out.display());
    Ok(())
}

pub fn predict_cmd(
    mut ctx: Context,
    checkpoint: PathBuf,
    data_dir: Option<PathBuf>,
    query: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Outcome {
    let data_dir = ctx.path(data_dir, "data_dir")?;
    let out = ctx.path(out, "out")?;
    let state = load_state(&checkpoint)?;
    let model = state.best_model();
    let train_data = load_split(&data_dir.join("train"), &model.schema)?;
    let query = query.unwrap_or_else(|| data_dir.join("test").join("X.csv"));
    let qx = datagen::read_x(&query, &model.schema)?;
    let cfg = &ctx.config;
    let pred = model.forecast(
        &train_data,
        qx.view(),
        cfg.predictive_path(),
        cfg.bench.mc_samples,
        cfg.seed(),
    )?;
    let d = pred.mean.nrows();
    let header: Vec<String> = (0..d).flat_map(|j| [format!("mean_{j}"), format!("var_{j}")]).collect();
    let mut text = header.join(",") + "\n";
    for n in 0..pred.mean.ncols() {
        let cells: Vec<String> = (0..d)
            .flat_map(|j| [format_value(pred.mean[(j, n)]), format_value(pred.var[(j, n)])])
            .collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    write_text(&out, &text)?;
    ctx.echo(&echo_path(&out))?;
    eprintln!("predicted {} rows into {}", qx.len(), out.display());
    Ok(())
}

/// Instances of `x` whose id does not occur in `known`.
fn unseen_instances(x: &CovariateMatrix, known: &CovariateMatrix) -> Vec<usize> {
    let ids: BTreeSet<i64> = known.blocks().iter().map(|b| b.id).collect();
    (0..x.n_instances()).filter(|&p| !ids.contains(&x.blocks()[p].id)).collect()
}

pub fn classify_cmd(mut ctx: Context, checkpoint: PathBuf, data_dir: Option<PathBuf>, out: Option<PathBuf>) -> Outcome {
    let data_dir = ctx.path(data_dir, "data_dir")?;
    let out = ctx.path(out, "out")?;
    let state = load_state(&checkpoint)?;
    let model = state.best_model();
    let train_data = load_split(&data_dir.join("train"), &model.schema)?;
    let test = load_split(&data_dir.join("test"), &model.schema)?;
    let (x, rows) = test.x.select_instances(&unseen_instances(&test.x, &train_data.x))?;
    if x.is_empty() {
        return Err(Failure::Runtime("the test split holds no subjects absent from training".into()));
    }
    let y = test.y.select(&rows);
    let cfg = &ctx.config;
    let cols = OutcomeColumns::longitudinal(&model.schema)?;
    let bins = fit_bins(&event_times(&train_data.x, &cols), cfg.bench.bins)?;
    let classifier_cfg = ClassifierConfig {
        prior: cfg.classifier_prior,
        mc_samples: cfg.classifier_mc_samples,
        seed: cfg.seed(),
        dense_cap: cfg.bench.train.dense_cap,
    };
    let classifier = Classifier::new(model, &train_data, cols, bins, classifier_cfg)?;
    let scores = classifier.score_split(&y, &x)?;

    let mut text = String::from("id,probability,label\n");
    for s in &scores {
        let label = s.label.map_or(String::new(), |l| u8::from(l).to_string());
        let _ = writeln!(text, "{},{},{label}", s.id, s.probability);
    }
    write_text(&out, &text)?;

    let (p, l): (Vec<f64>, Vec<bool>) = scores.iter().filter_map(|s| s.label.map(|l| (s.probability, l))).unzip();
    let positives = l.iter().filter(|v| **v).count();
    let (auc, p_value) = if positives > 0 && positives < l.len() {
        (
            Some(auroc(&p, &l)?),
            Some(auroc_permutation_p(&p, &l, cfg.bench.permutations, cfg.seed())?),
        )
    } else {
        (None, None)
    };
    let summary = json!({
        "subjects": scores.len(),
        "labelled": l.len(),
        "positives": positives,
        "auroc": auc,
        "p_value": p_value,
        "permutations": cfg.bench.permutations,
    });
    println!("{summary}");
    let mut summary_path = out.clone().into_os_string();
    summary_path.push(".summary.json");
    write_text(Path::new(&summary_path), &(summary.to_string() + "\n"))?;
    ctx.echo(&echo_path(&out))?;
    match auc {
        Some(a) => eprintln!("scored {} subjects, AUROC {a:.4}", scores.len()),
        None => eprintln!("scored {} subjects; AUROC needs both outcomes", scores.len()),
    }
    Ok(())
}

/// Reads a prediction file: either plain `Y.csv`-style rows or the
/// `mean_j,var_j` pairs written by `predict`.
fn read_predictions(path: &Path) -> Result<ObservationSet, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let Some(first) = text.lines().next() else {
        return Err(Failure::Runtime(format!("{}: empty file", path.display())));
    };
    if !first.starts_with("mean_") {
        return Ok(datagen::read_y(path)?);
    }
    let width = first.split(',').count();
    if width % 2 != 0 {
        return Err(Failure::Runtime(format!("{}: unpaired mean/variance columns", path.display())));
    }
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(Failure::Runtime(format!(
                "{}:{}: expected {width} columns, found {}",
                path.display(),
                i + 1,
                cells.len()
            )));
        }
        for c in cells.iter().step_by(2) {
            let v: f64 = c
                .trim()
                .parse()
                .map_err(|_| Failure::Runtime(format!("{}:{}: `{c}` is not a number", path.display(), i + 1)))?;
            entries.push(Some(v));
        }
    }
    Ok(ObservationSet::from_rows(width / 2, entries)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum MetricKind {
    /// Entries missing from the split's `Y.csv`.
    Imputation,
    /// Every entry of rows whose instance also appears in training.
    Prediction,
}

pub fn metrics_cmd(mut ctx: Context, kind: MetricKind, pred: PathBuf, data_dir: Option<PathBuf>, split: &str) -> Outcome {
    let data_dir = ctx.path(data_dir, "data_dir")?;
    let schema = CovariateSchema::longitudinal();
    let dir = data_dir.join(split);
    let (input, x) = datagen::load_with_schema(&dir, &schema)?;
    let truth = datagen::load_truth(&dir)?;
    let pred = read_predictions(&pred)?;
    let report = match kind {
        MetricKind::Imputation => imputation_mse(&pred, &truth, &input, &x)?,
        MetricKind::Prediction => {
            let (_, train_x) = datagen::load_with_schema(&data_dir.join("train"), &schema)?;
            let known: BTreeSet<i64> = train_x.blocks().iter().map(|b| b.id).collect();
            mse_where(&pred, &truth, &x, |n, _| known.contains(&x.id_of_row(n)))?
        }
    };
    println!("{}", json_line(&report));
    eprintln!(
        "MSE {:.6} over {} entries; per-instance mean {:.6} (SE {:.6}, {} instances)",
        report.mse, report.entries, report.instance_mean, report.instance_se, report.instances
    );
    Ok(())
}
