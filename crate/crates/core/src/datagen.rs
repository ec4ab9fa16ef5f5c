//! Synthetic longitudinal benchmark: latent trajectories drawn from a known
//! additive GP, pushed through a fixed random two-layer map, standardized,
//! and masked completely at random. Also the CSV reader and writer.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariates::{CovariateKind, CovariateMatrix, CovariateSchema, Points};
use crate::error::{LvaeError, Result};
use crate::linalg::Factor;
use crate::nnet::ObservationSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Training instances, including the prediction instances.
    pub instances: usize,
    pub time_points: usize,
    pub data_dim: usize,
    pub latent_dim: usize,
    /// Standard deviation of the observation noise before standardization.
    pub noise: f64,
    pub missing_fraction: f64,
    /// Fraction of training instances whose later time points are held out.
    pub prediction_fraction: f64,
    /// Time points kept in training for each prediction instance.
    pub observed_prefix: usize,
    pub val_instances: usize,
    /// Fresh instances in the test split (for outcome classification).
    pub test_instances: usize,
    /// Output scale of the disease-time term of the ground-truth prior.
    pub disease_effect: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            instances: 60,
            time_points: 20,
            data_dim: 32,
            latent_dim: 4,
            noise: 0.1,
            missing_fraction: 0.25,
            prediction_fraction: 1.0 / 6.0,
            observed_prefix: 5,
            val_instances: 6,
            test_instances: 40,
            disease_effect: 1.5,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn prediction_instances(&self) -> usize {
        (self.prediction_fraction * self.instances as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("instances", self.instances),
            ("time_points", self.time_points),
            ("data_dim", self.data_dim),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(LvaeError::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("missing_fraction", self.missing_fraction),
            ("prediction_fraction", self.prediction_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LvaeError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(LvaeError::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if !(self.disease_effect >= 0.0 && self.disease_effect.is_finite()) {
            return Err(LvaeError::Config("disease_effect must be non-negative".into()));
        }
        if self.prediction_instances() > 0 {
            if self.time_points < 2 {
                return Err(LvaeError::Config(
                    "future prediction needs at least two time points per instance".into(),
                ));
            }
            if self.observed_prefix == 0 || self.observed_prefix >= self.time_points {
                return Err(LvaeError::Config(format!(
                    "observed_prefix must lie in [1, {}), got {}",
                    self.time_points, self.observed_prefix
                )));
            }
        }
        Ok(())
    }
}

/// One split: masked observations, their complete values, and covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: CovariateMatrix,
    pub y: ObservationSet,
    pub truth: ObservationSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub train: Split,
    pub val: Split,
    /// Held-out time points of the prediction instances, then fresh instances.
    pub test: Split,
    /// Ids whose later time points sit in the test split.
    pub prediction_ids: Vec<i64>,
    /// Ground-truth latent values of every generated row, by split (`L×N`).
    pub latent: [DMatrix<f64>; 3],
}

struct Subject {
    sex: f64,
    diseased: bool,
    onset: f64,
    location: f64,
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn se(a: f64, b: f64, scale: f64, ls: f64) -> f64 {
    scale * (-(a - b) * (a - b) / (2.0 * ls * ls)).exp()
}

/// A draw of a zero-mean GP with an SE kernel at the given inputs.
fn draw_se<R: Rng>(rng: &mut R, inputs: &[f64], scale: f64, ls: f64) -> Result<Vec<f64>> {
    let n = inputs.len();
    if n == 0 || scale == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let k = DMatrix::from_fn(n, n, |i, j| se(inputs[i], inputs[j], scale, ls));
    let f = Factor::new(&k, "ground-truth covariance")?;
    let e = DVector::from_fn(n, |_, _| gauss(rng));
    Ok((f.l() * e).iter().copied().collect())
}

/// Generates all three splits.
pub fn generate(config: &GenConfig) -> Result<GeneratedData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let np = config.time_points;
    let total = config.instances + config.val_instances + config.test_instances;
    let tp = np as f64;
    let lo = (tp / 4.0).floor();
    let hi = (3.0 * tp / 4.0).floor().max(lo);
    let subjects: Vec<Subject> = (0..total)
        .map(|_| Subject {
            sex: f64::from(rng.random_range(0..2u8)),
            diseased: rng.random_bool(0.5),
            onset: rng.random_range(lo as i64..=hi as i64) as f64,
            location: f64::from(rng.random_range(0..2u8)),
        })
        .collect();
    let ages: Vec<f64> = (0..np).map(|t| t as f64).collect();

    // latent values, subject-major: z[l][subject * np + t]
    let ls_age = (tp / 3.0).max(1.0);
    let ls_disease = (tp / 5.0).max(1.0);
    let mut z = vec![vec![0.0; total * np]; config.latent_dim];
    let disease_ages: Vec<f64> = {
        let mut v: Vec<f64> = subjects
            .iter()
            .filter(|s| s.diseased)
            .flat_map(|s| ages.iter().map(move |a| a - s.onset))
            .collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    for zl in z.iter_mut() {
        let mult = rng.random_range(0.7..1.3);
        let population = draw_se(&mut rng, &ages, mult, ls_age)?;
        let by_sex = [
            draw_se(&mut rng, &ages, 0.5 * mult, ls_age)?,
            draw_se(&mut rng, &ages, 0.5 * mult, ls_age)?,
        ];
        let disease = draw_se(&mut rng, &disease_ages, config.disease_effect * mult, ls_disease)?;
        for (p, s) in subjects.iter().enumerate() {
            let intercept = (0.3 * mult).sqrt() * gauss(&mut rng);
            let own = draw_se(&mut rng, &ages, 0.3 * mult, ls_age)?;
            for t in 0..np {
                let mut v = intercept + population[t] + own[t] + by_sex[s.sex as usize][t];
                if s.diseased {
                    let da = ages[t] - s.onset;
                    let k = disease_ages.binary_search_by(|x| x.total_cmp(&da)).expect("listed");
                    v += disease[k];
                }
                zl[p * np + t] = v;
            }
        }
    }

    // fixed random two-layer map to observation space
    let hidden = 2 * config.data_dim.max(config.latent_dim);
    let l_dim = config.latent_dim;
    let w1 = DMatrix::from_fn(hidden, l_dim, |_, _| {
        gauss(&mut rng) * (2.0 / l_dim as f64).sqrt()
    });
    let b1 = DVector::from_fn(hidden, |_, _| rng.random_range(-0.5..0.5));
    let w2 = DMatrix::from_fn(config.data_dim, hidden, |_, _| {
        gauss(&mut rng) / (hidden as f64).sqrt()
    });
    let zm = DMatrix::from_fn(l_dim, total * np, |l, i| z[l][i]);
    let mut h = &w1 * &zm;
    for mut col in h.column_iter_mut() {
        col += &b1;
        col.apply(|v| *v = v.tanh());
    }
    let mut y: DMatrix<f64> = &w2 * h;
    y.apply(|v| *v += config.noise * gauss(&mut rng));
    for d in 0..config.data_dim {
        let row = y.row(d);
        let mean = row.mean();
        let sd = row.variance().sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        y.row_mut(d).apply(|v| *v = (*v - mean) / sd);
    }
    let observed: Vec<bool> = (0..total * np * config.data_dim)
        .map(|_| !rng.random_bool(config.missing_fraction))
        .collect();

    let mut train_subjects: Vec<usize> = (0..config.instances).collect();
    train_subjects.shuffle(&mut rng);
    let mut prediction: Vec<usize> = train_subjects[..config.prediction_instances()].to_vec();
    prediction.sort_unstable();

    let row_of = |p: usize, t: usize| -> Vec<Option<f64>> {
        let s = &subjects[p];
        vec![
            Some(p as f64),
            Some(ages[t]),
            Some(s.sex),
            Some(f64::from(u8::from(s.diseased))),
            s.diseased.then_some(ages[t] - s.onset),
            Some(s.location),
        ]
    };
    let build = |rows: &[(usize, usize)]| -> Result<(Split, DMatrix<f64>)> {
        let schema = CovariateSchema::longitudinal();
        let mut pts = Points::empty(schema.len());
        let d = config.data_dim;
        let mut values = Vec::with_capacity(rows.len() * d);
        let mut truth = Vec::with_capacity(rows.len() * d);
        let mut mask = Vec::with_capacity(rows.len() * d);
        let mut lat = DMatrix::zeros(l_dim, rows.len());
        for (r, &(p, t)) in rows.iter().enumerate() {
            pts.push_row(&row_of(p, t));
            let col = p * np + t;
            for j in 0..d {
                truth.push(y[(j, col)]);
                values.push(y[(j, col)]);
                mask.push(observed[col * d + j]);
            }
            for l in 0..l_dim {
                lat[(l, r)] = z[l][col];
            }
        }
        let n = rows.len();
        Ok((
            Split {
                x: CovariateMatrix::new(schema, pts)?,
                y: ObservationSet::new(n, d, values, mask)?,
                truth: ObservationSet::new(n, d, truth, vec![true; n * d])?,
            },
            lat,
        ))
    };

    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for p in 0..config.instances {
        let keep = if prediction.binary_search(&p).is_ok() {
            config.observed_prefix
        } else {
            np
        };
        train_rows.extend((0..keep).map(|t| (p, t)));
        if keep < np {
            test_rows.extend((keep..np).map(|t| (p, t)));
        }
    }
    let val_rows: Vec<(usize, usize)> = (config.instances..config.instances + config.val_instances)
        .flat_map(|p| (0..np).map(move |t| (p, t)))
        .collect();
    test_rows.extend((config.instances + config.val_instances..total).flat_map(|p| (0..np).map(move |t| (p, t))));

    let (train, lt) = build(&train_rows)?;
    let (val, lv) = build(&val_rows)?;
    let (test, ls) = build(&test_rows)?;
    Ok(GeneratedData {
        train,
        val,
        test,
        prediction_ids: prediction.iter().map(|&p| p as i64).collect(),
        latent: [lt, lv, ls],
    })
}

/// `%.9g`-style rendering: nine significant digits, trailing zeros trimmed.
pub fn format_value(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        trim_zeros(&fixed)
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn render_x(x: &CovariateMatrix) -> String {
    let schema = x.schema();
    let mut out = schema.names().collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..x.len() {
        let cells: Vec<String> = x.row(i).iter().map(|v| v.map(format_value).unwrap_or_default()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn render_y(y: &ObservationSet) -> String {
    let mut out = String::new();
    for n in 0..y.len() {
        for d in 0..y.dim() {
            if d > 0 {
                out.push(',');
            }
            if let Some(v) = y.get(n, d) {
                let _ = write!(out, "{}", format_value(v));
            }
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LvaeError::io(path, e))
}

/// Writes `X.csv`, `Y.csv` and (when given) `Y_truth.csv` into `dir`.
pub fn write_split(dir: &Path, x: &CovariateMatrix, y: &ObservationSet, truth: Option<&ObservationSet>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LvaeError::io(dir, e))?;
    write_file(&dir.join("X.csv"), &render_x(x))?;
    write_file(&dir.join("Y.csv"), &render_y(y))?;
    if let Some(t) = truth {
        write_file(&dir.join("Y_truth.csv"), &render_y(t))?;
    }
    Ok(())
}

/// Writes observations alone, in the format of `Y.csv`.
pub fn write_y(path: &Path, y: &ObservationSet) -> Result<()> {
    write_file(path, &render_y(y))
}

/// Writes `train/`, `val/` and `test/` under `out`.
pub fn write(data: &GeneratedData, out: &Path) -> Result<()> {
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        write_split(&out.join(name), &split.x, &split.y, Some(&split.truth))?;
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| LvaeError::io(path, e))
}

fn parse_cell(path: &Path, line: usize, col: usize, cell: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell.parse().map_err(|_| LvaeError::Parse {
        path: path.display().to_string(),
        line,
        message: format!("column {}: `{cell}` is not a number", col + 1),
    })?;
    if !v.is_finite() {
        return Err(LvaeError::Parse {
            path: path.display().to_string(),
            line,
            message: format!("column {}: non-finite value", col + 1),
        });
    }
    Ok(Some(v))
}

/// Reads a covariate file whose header must name the schema's columns in order.
pub fn read_x(path: &Path, schema: &CovariateSchema) -> Result<CovariateMatrix> {
    let text = read_file(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| LvaeError::Parse {
        path: path.display().to_string(),
        line: 1,
        message: "empty file".into(),
    })?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let expected: Vec<&str> = schema.names().collect();
    if names != expected {
        return Err(LvaeError::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!("header `{}` does not match `{}`", names.join(","), expected.join(",")),
        });
    }
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != schema.len() {
            return Err(LvaeError::Parse {
                path: path.display().to_string(),
                line: lineno,
                message: format!("{} fields, expected {}", cells.len(), schema.len()),
            });
        }
        for (c, cell) in cells.iter().enumerate() {
            let v = parse_cell(path, lineno, c, cell)?;
            if let Some(v) = v {
                schema.check_value(c, v).map_err(|e| LvaeError::Parse {
                    path: path.display().to_string(),
                    line: lineno,
                    message: e.to_string(),
                })?;
            }
            values.push(v);
        }
    }
    let points = Points::new(schema.len(), values)?;
    CovariateMatrix::new(schema.clone(), points).map_err(|e| LvaeError::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

/// Reads an observation file; every row must have the same width.
pub fn read_y(path: &Path) -> Result<ObservationSet> {
    let text = read_file(path)?;
    let mut width = None;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(LvaeError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("{} fields, expected {w}", cells.len()),
                })
            }
            _ => {}
        }
        for (c, cell) in cells.iter().enumerate() {
            entries.push(parse_cell(path, i + 1, c, cell)?);
        }
    }
    let Some(width) = width else {
        return Err(LvaeError::Parse {
            path: path.display().to_string(),
            line: 1,
            message: "empty file".into(),
        });
    };
    ObservationSet::from_rows(width, entries)
}

fn split_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join("X.csv"), dir.join("Y.csv"), dir.join("Y_truth.csv"))
}

/// Loads `Y.csv` and `X.csv` of one split directory, checking row alignment.
pub fn load(dir: &Path) -> Result<(ObservationSet, CovariateMatrix)> {
    load_with_schema(dir, &CovariateSchema::longitudinal())
}

pub fn load_with_schema(dir: &Path, schema: &CovariateSchema) -> Result<(ObservationSet, CovariateMatrix)> {
    let (xp, yp, _) = split_paths(dir);
    let x = read_x(&xp, schema)?;
    let y = read_y(&yp)?;
    if x.len() != y.len() {
        return Err(LvaeError::Parse {
            path: yp.display().to_string(),
            line: 0,
            message: format!("{} observation rows but {} covariate rows in X.csv", y.len(), x.len()),
        });
    }
    Ok((y, x))
}

/// Loads `Y_truth.csv` of a split directory.
pub fn load_truth(dir: &Path) -> Result<ObservationSet> {
    read_y(&split_paths(dir).2)
}

/// Fraction of masked entries.
pub fn missing_fraction(y: &ObservationSet) -> f64 {
    let total = y.len() * y.dim();
    if total == 0 {
        return 0.0;
    }
    (total - y.n_observed()) as f64 / total as f64
}

/// True when every column kind in `schema` is representable in the CSV format.
pub fn csv_compatible(schema: &CovariateSchema) -> bool {
    (0..schema.len()).all(|c| matches!(schema.kind(c), CovariateKind::Continuous | CovariateKind::Categorical | CovariateKind::Binary))
}
