//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and falls
//! back to the default listed in [`KEYS`]; unknown or repeated keys are
//! rejected.

use std::fmt::Write;

use lvae::benchmark::BenchmarkConfig;
use lvae::classifier::HypothesisPrior;
use lvae::predictive::{PredictivePath, EXACT_PATH_CAP};
use lvae::trainer::BoundChoice;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for data generation, initialization, batching and sampling"),
    ("prior", "additive prior term list, or `none` for a standard-normal latent"),
    ("latent_dim", "latent dimensions of the model"),
    ("encoder_hidden", "comma-separated hidden widths of the encoder"),
    ("decoder_hidden", "comma-separated hidden widths of the decoder"),
    ("bound", "KL computation used in training: exact, d2 or d4"),
    ("epochs", "training epochs after pretraining"),
    ("pretrain_epochs", "epochs under the standard-normal prior"),
    ("batch_instances", "instances per mini-batch"),
    ("lr", "Adam learning rate of the network weights"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("eps", "Adam denominator offset"),
    ("gp_lr_scale", "learning-rate multiplier for kernel parameters and inducing locations"),
    ("natgrad_step", "natural-gradient step for the inducing posteriors, in (0, 1]"),
    ("patience", "epochs without validation improvement before stopping; 0 disables"),
    ("inducing_count", "inducing rows per latent dimension"),
    ("dense_cap", "largest N for which a dense N x N covariance is assembled"),
    ("instances", "generated training instances"),
    ("time_points", "rows per generated instance"),
    ("data_dim", "generated observation dimensions"),
    ("gen_latent_dim", "latent dimensions of the generating process"),
    ("noise", "observation noise of the generating process"),
    ("missing_fraction", "fraction of entries removed completely at random"),
    ("prediction_fraction", "fraction of training instances with held-out future rows"),
    ("observed_prefix", "rows kept in training for each prediction instance"),
    ("val_instances", "generated validation instances"),
    ("test_instances", "generated fresh test instances"),
    ("disease_effect", "scale of the disease-time effect in the generating process"),
    ("mc_samples", "decoder samples per prediction"),
    ("predictive_path", "latent predictive: auto, exact, sparse or variational"),
    ("exact_cap", "largest training N for which `auto` uses the exact predictive"),
    ("classifier_prior", "latent prior for outcome hypotheses: conditioned or marginal"),
    ("classifier_mc_samples", "decoder samples per hypothesis ELBO"),
    ("bins", "event-time bins of the outcome classifier"),
    ("permutations", "label permutations for the AUROC p-value"),
    ("data_dir", "data directory (overridden by --data-dir)"),
    ("out", "output path (overridden by --out)"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathChoice {
    Auto,
    Exact,
    Sparse,
    Variational,
}

impl PathChoice {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(PathChoice::Auto),
            "exact" => Ok(PathChoice::Exact),
            "sparse" => Ok(PathChoice::Sparse),
            "variational" => Ok(PathChoice::Variational),
            _ => Err(format!("unknown predictive path `{s}`")),
        }
    }

    fn name(self) -> &'static str {
        match self {
            PathChoice::Auto => "auto",
            PathChoice::Exact => "exact",
            PathChoice::Sparse => "sparse",
            PathChoice::Variational => "variational",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub bench: BenchmarkConfig,
    pub predictive_path: PathChoice,
    pub exact_cap: usize,
    pub classifier_prior: HypothesisPrior,
    pub classifier_mc_samples: usize,
    pub data_dir: String,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            bench: BenchmarkConfig::default(),
            predictive_path: PathChoice::Auto,
            exact_cap: EXACT_PATH_CAP,
            classifier_prior: HypothesisPrior::default(),
            classifier_mc_samples: 4,
            data_dir: String::new(),
            out: String::new(),
        }
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn widths(v: &str) -> Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|w| num(w.trim())).collect()
}

fn join(ws: &[usize]) -> String {
    ws.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format!("line {}: expected `key = value`", i + 1));
            };
            let key = key.trim();
            if seen.contains(&key) {
                return Err(format!("line {}: `{key}` is set twice", i + 1));
            }
            seen.push(key);
            cfg.set(key, value.trim()).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let b = &mut self.bench;
        let t = &mut b.train;
        let d = &mut b.data;
        match key {
            "seed" => {
                t.seed = num(v)?;
                d.seed = t.seed;
            }
            "prior" => b.prior_terms = v.to_string(),
            "latent_dim" => b.latent_dim = num(v)?,
            "encoder_hidden" => b.encoder_hidden = widths(v)?,
            "decoder_hidden" => b.decoder_hidden = widths(v)?,
            "bound" => t.bound = BoundChoice::parse(v).map_err(|e| e.to_string())?,
            "epochs" => t.epochs = num(v)?,
            "pretrain_epochs" => t.pretrain_epochs = num(v)?,
            "batch_instances" => t.batch_instances = num(v)?,
            "lr" => t.adam.lr = num(v)?,
            "beta1" => t.adam.beta1 = num(v)?,
            "beta2" => t.adam.beta2 = num(v)?,
            "eps" => t.adam.eps = num(v)?,
            "gp_lr_scale" => t.gp_lr_scale = num(v)?,
            "natgrad_step" => t.natgrad_step = num(v)?,
            "patience" => t.patience = num(v)?,
            "inducing_count" => t.inducing_count = num(v)?,
            "dense_cap" => t.dense_cap = num(v)?,
            "instances" => d.instances = num(v)?,
            "time_points" => d.time_points = num(v)?,
            "data_dim" => d.data_dim = num(v)?,
            "gen_latent_dim" => d.latent_dim = num(v)?,
            "noise" => d.noise = num(v)?,
            "missing_fraction" => d.missing_fraction = num(v)?,
            "prediction_fraction" => d.prediction_fraction = num(v)?,
            "observed_prefix" => d.observed_prefix = num(v)?,
            "val_instances" => d.val_instances = num(v)?,
            "test_instances" => d.test_instances = num(v)?,
            "disease_effect" => d.disease_effect = num(v)?,
            "mc_samples" => b.mc_samples = num(v)?,
            "predictive_path" => self.predictive_path = PathChoice::parse(v)?,
            "exact_cap" => self.exact_cap = num(v)?,
            "classifier_prior" => self.classifier_prior = HypothesisPrior::parse(v).map_err(|e| e.to_string())?,
            "classifier_mc_samples" => self.classifier_mc_samples = num(v)?,
            "bins" => b.bins = num(v)?,
            "permutations" => b.permutations = num(v)?,
            "data_dir" => self.data_dir = v.to_string(),
            "out" => self.out = v.to_string(),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let b = &self.bench;
        let t = &b.train;
        let d = &b.data;
        Some(match key {
            "seed" => t.seed.to_string(),
            "prior" => b.prior_terms.clone(),
            "latent_dim" => b.latent_dim.to_string(),
            "encoder_hidden" => join(&b.encoder_hidden),
            "decoder_hidden" => join(&b.decoder_hidden),
            "bound" => t.bound.name().to_string(),
            "epochs" => t.epochs.to_string(),
            "pretrain_epochs" => t.pretrain_epochs.to_string(),
            "batch_instances" => t.batch_instances.to_string(),
            "lr" => t.adam.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "eps" => t.adam.eps.to_string(),
            "gp_lr_scale" => t.gp_lr_scale.to_string(),
            "natgrad_step" => t.natgrad_step.to_string(),
            "patience" => t.patience.to_string(),
            "inducing_count" => t.inducing_count.to_string(),
            "dense_cap" => t.dense_cap.to_string(),
            "instances" => d.instances.to_string(),
            "time_points" => d.time_points.to_string(),
            "data_dim" => d.data_dim.to_string(),
            "gen_latent_dim" => d.latent_dim.to_string(),
            "noise" => d.noise.to_string(),
            "missing_fraction" => d.missing_fraction.to_string(),
            "prediction_fraction" => d.prediction_fraction.to_string(),
            "observed_prefix" => d.observed_prefix.to_string(),
            "val_instances" => d.val_instances.to_string(),
            "test_instances" => d.test_instances.to_string(),
            "disease_effect" => d.disease_effect.to_string(),
            "mc_samples" => b.mc_samples.to_string(),
            "predictive_path" => self.predictive_path.name().to_string(),
            "exact_cap" => self.exact_cap.to_string(),
            "classifier_prior" => self.classifier_prior.name().to_string(),
            "classifier_mc_samples" => self.classifier_mc_samples.to_string(),
            "bins" => b.bins.to_string(),
            "permutations" => b.permutations.to_string(),
            "data_dir" => self.data_dir.clone(),
            "out" => self.out.clone(),
            _ => return None,
        })
    }

    /// The full configuration, one commented key per line; parsing the
    /// result gives back `self`.
    pub fn render(&self) -> String {
        let mut out = String::from("# lvae run configuration\n");
        for (key, doc) in KEYS {
            let value = self.get(key).expect("every listed key has a value");
            let _ = writeln!(out, "\n# {doc}\n{key} = {value}");
        }
        out
    }

    pub fn seed(&self) -> u64 {
        self.bench.train.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.bench.train.seed = seed;
        self.bench.data.seed = seed;
    }

    pub fn predictive_path(&self) -> PredictivePath {
        match self.predictive_path {
            PathChoice::Auto => PredictivePath::Auto { cap: self.exact_cap },
            PathChoice::Exact => PredictivePath::Exact,
            PathChoice::Sparse => PredictivePath::Sparse,
            PathChoice::Variational => PredictivePath::Variational,
        }
    }
}
