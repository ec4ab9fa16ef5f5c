//! Versioned checkpoint file: the architecture descriptor, covariate schema
//! and prior term list, plus every tensor as a named array with its shape.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariates::{CovariateSchema, Points};
use crate::error::{LvaeError, Result};
use crate::kernels::{parse_prior_spec, AdditivePrior};
use crate::kl::{InducingPosterior, InducingState};
use crate::nnet::Architecture;
use crate::trainer::{Adam, Model, ModelState, Phase, Snapshot};

pub const CHECKPOINT_VERSION: &str = "lvae-ckpt-1";

/// Row-major tensor; `null` entries only appear in inducing rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<Option<f64>>,
}

impl NamedArray {
    fn new(name: String, shape: Vec<usize>, data: impl IntoIterator<Item = f64>) -> Self {
        NamedArray {
            name,
            shape,
            data: data.into_iter().map(Some).collect(),
        }
    }

    fn dense(&self) -> Result<Vec<f64>> {
        self.data
            .iter()
            .map(|v| v.ok_or_else(|| LvaeError::Checkpoint(format!("`{}` has a missing entry", self.name))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub architecture: Architecture,
    pub schema: CovariateSchema,
    pub prior_terms: String,
    pub phase: Phase,
    pub epoch: usize,
    pub adam_steps: u64,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub arrays: Vec<NamedArray>,
}

fn model_arrays(prefix: &str, model: &Model, out: &mut Vec<NamedArray>) {
    let layout = model.layout();
    let params = model.params();
    let l = model.latent_dim();
    let name = |s: &str| format!("{prefix}.{s}");
    out.push(NamedArray::new(name("encoder"), vec![layout.encoder.len()], params[layout.encoder.clone()].to_vec()));
    let weights = layout.decoder.start..layout.obs_var.start;
    out.push(NamedArray::new(name("decoder"), vec![weights.len()], params[weights].to_vec()));
    out.push(NamedArray::new(name("decoder.log_obs_var"), vec![layout.obs_var.len()], params[layout.obs_var.clone()].to_vec()));
    let np = model.prior.n_params_per_dim();
    out.push(NamedArray::new(name("prior"), vec![l, np], (0..l).flat_map(|d| model.prior.params(d))));
    if let Some(state) = &model.inducing {
        let m = state.s.len();
        out.push(NamedArray {
            name: name("inducing.s"),
            shape: vec![m, state.s.width()],
            data: state.s.values().to_vec(),
        });
        out.push(NamedArray::new(
            name("inducing.m"),
            vec![l, m],
            state.posteriors.iter().flat_map(|p| p.m.iter().copied().collect::<Vec<_>>()),
        ));
        // row-major per dimension
        out.push(NamedArray::new(
            name("inducing.h"),
            vec![l, m, m],
            state.posteriors.iter().flat_map(|p| p.h.transpose().iter().copied().collect::<Vec<_>>()),
        ));
    }
}

impl Checkpoint {
    pub fn from_state(state: &ModelState) -> Self {
        let mut arrays = Vec::new();
        model_arrays("model", &state.model, &mut arrays);
        if let Some(best) = &state.best {
            model_arrays("best", &best.model, &mut arrays);
        }
        if let Some(pre) = &state.pretrained {
            model_arrays("pretrained", pre, &mut arrays);
        }
        let n = state.adam.m.len();
        arrays.push(NamedArray::new("adam.m".into(), vec![n], state.adam.m.clone()));
        arrays.push(NamedArray::new("adam.v".into(), vec![n], state.adam.v.clone()));
        let model = &state.model;
        Checkpoint {
            version: CHECKPOINT_VERSION.into(),
            architecture: model.arch.clone(),
            schema: model.schema.clone(),
            prior_terms: model.prior.describe(&model.schema),
            phase: state.phase,
            epoch: state.epoch,
            adam_steps: state.adam.t,
            best_epoch: state.best.as_ref().map(|b| b.epoch),
            best_val_loss: state.best.as_ref().map(|b| b.val_loss),
            arrays,
        }
    }

    fn array(&self, name: &str) -> Result<&NamedArray> {
        self.find(name)
            .ok_or_else(|| LvaeError::Checkpoint(format!("missing array `{name}`")))
    }

    fn find(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(LvaeError::Checkpoint(format!(
                "version `{}`, expected `{CHECKPOINT_VERSION}`",
                self.version
            )));
        }
        for a in &self.arrays {
            let n: usize = a.shape.iter().product();
            if n != a.data.len() {
                return Err(LvaeError::Checkpoint(format!(
                    "`{}` has shape {:?} but {} entries",
                    a.name,
                    a.shape,
                    a.data.len()
                )));
            }
            if a.data.iter().flatten().any(|v| !v.is_finite()) {
                return Err(LvaeError::Checkpoint(format!("`{}` holds a non-finite value", a.name)));
            }
        }
        Ok(())
    }

    fn check_shape(&self, a: &NamedArray, shape: &[usize]) -> Result<()> {
        if a.shape != shape {
            return Err(LvaeError::Checkpoint(format!(
                "`{}` has shape {:?}, expected {shape:?}",
                a.name, a.shape
            )));
        }
        Ok(())
    }

    fn model(&self, prefix: &str) -> Result<Model> {
        let arch = self.architecture.clone();
        let l = arch.latent_dim;
        let specs = parse_prior_spec(&self.prior_terms, &self.schema)?;
        let mut prior = if specs.is_empty() {
            AdditivePrior::noise_only(l)
        } else {
            AdditivePrior::new(specs, l, &self.schema, None)?
        };
        let get = |s: &str| self.array(&format!("{prefix}.{s}"));
        let prior_arr = get("prior")?;
        let np = prior.n_params_per_dim();
        self.check_shape(prior_arr, &[l, np])?;
        let prior_values = prior_arr.dense()?;
        for d in 0..l {
            prior.set_params(d, &prior_values[d * np..(d + 1) * np])?;
        }
        let mut model = Model::new(arch, self.schema.clone(), prior, 0)?;

        if let Some(s_arr) = self.find(&format!("{prefix}.inducing.s")) {
            let width = self.schema.len();
            if s_arr.shape.len() != 2 || s_arr.shape[1] != width {
                return Err(LvaeError::Checkpoint(format!("`{}` has shape {:?}", s_arr.name, s_arr.shape)));
            }
            let m = s_arr.shape[0];
            let s = Points::new(width, s_arr.data.clone())?;
            let m_arr = get("inducing.m")?;
            let h_arr = get("inducing.h")?;
            self.check_shape(m_arr, &[l, m])?;
            self.check_shape(h_arr, &[l, m, m])?;
            let (mv, hv) = (m_arr.dense()?, h_arr.dense()?);
            let posteriors = (0..l)
                .map(|d| InducingPosterior {
                    m: DVector::from_column_slice(&mv[d * m..(d + 1) * m]),
                    h: DMatrix::from_row_slice(m, m, &hv[d * m * m..(d + 1) * m * m]),
                })
                .collect();
            model.inducing = Some(InducingState { s, posteriors });
        }

        let layout = model.layout();
        let enc = get("encoder")?;
        let dec = get("decoder")?;
        let obs = get("decoder.log_obs_var")?;
        self.check_shape(enc, &[layout.encoder.len()])?;
        self.check_shape(dec, &[layout.obs_var.start - layout.decoder.start])?;
        self.check_shape(obs, &[layout.obs_var.len()])?;
        let mut flat = Vec::with_capacity(layout.len());
        flat.extend(enc.dense()?);
        flat.extend(dec.dense()?);
        flat.extend(obs.dense()?);
        flat.extend(prior_values);
        if let Some(state) = &model.inducing {
            for &(i, c) in &layout.inducing_coords {
                flat.push(state.s.get(i, c).expect("trainable coordinates are present"));
            }
        }
        model.set_params(&flat)?;
        Ok(model)
    }

    pub fn into_state(self) -> Result<ModelState> {
        self.validate()?;
        let model = self.model("model")?;
        let best = match (self.best_epoch, self.best_val_loss) {
            (Some(epoch), Some(val_loss)) => Some(Snapshot {
                epoch,
                val_loss,
                model: self.model("best")?,
            }),
            (None, None) => None,
            _ => return Err(LvaeError::Checkpoint("incomplete best-snapshot record".into())),
        };
        let pretrained = match self.find("pretrained.encoder") {
            Some(_) => Some(self.model("pretrained")?),
            None => None,
        };
        let n = model.layout().len();
        let m = self.array("adam.m")?;
        let v = self.array("adam.v")?;
        self.check_shape(m, &[n])?;
        self.check_shape(v, &[n])?;
        Ok(ModelState {
            adam: Adam {
                t: self.adam_steps,
                m: m.dense()?,
                v: v.dense()?,
            },
            model,
            phase: self.phase,
            epoch: self.epoch,
            best,
            pretrained,
        })
    }
}

pub fn to_string(state: &ModelState) -> Result<String> {
    let mut s = serde_json::to_string(&Checkpoint::from_state(state))?;
    s.push('\n');
    Ok(s)
}

pub fn from_str(text: &str) -> Result<ModelState> {
    let ckpt: Checkpoint =
        serde_json::from_str(text).map_err(|e| LvaeError::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    ckpt.into_state()
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, to_string(state)?).map_err(|e| LvaeError::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    from_str(&fs::read_to_string(path).map_err(|e| LvaeError::io(path, e))?)
}
