//! Elementary and additive covariance functions over heterogeneous covariates.
//!
//! Each additive term is a product of factors (`se`, `ca`, `bi`) over single
//! covariate columns with one output scale σ² per term. Interaction factors
//! carry no scale of their own. A term evaluates to exactly zero whenever any
//! column it reads is missing in either row.
//!
//! Terms that contain a categorical factor on the instance id are block
//! diagonal across instances; they form the instance part `Σ̂` of the prior
//! covariance, everything else forms the low-rank candidate part `K⁽ᴬ⁾`.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariates::{CovariateKind, CovariateMatrix, CovariateSchema, Points, Rows};
use crate::error::{LvaeError, Result};

/// Upper bound on the number of entries of any Gram matrix we allocate.
pub const MAX_GRAM_ENTRIES: usize = 1 << 27;

/// Default bound on N for dense N×N prior covariances.
pub const DEFAULT_DENSE_CAP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    /// Squared exponential over a continuous column.
    Se,
    /// Categorical: 1 iff the codes are equal.
    Ca,
    /// Binary: 1 iff both values equal 1.
    Bi,
}

impl FactorKind {
    fn token(self) -> &'static str {
        match self {
            FactorKind::Se => "se",
            FactorKind::Ca => "ca",
            FactorKind::Bi => "bi",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelFactor {
    pub kind: FactorKind,
    pub column: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermKind {
    Se,
    Cat,
    Bin,
    Interaction,
}

/// Structure of an additive term without its parameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TermSpec {
    factors: Vec<KernelFactor>,
}

impl TermSpec {
    pub fn new(factors: Vec<KernelFactor>, schema: &CovariateSchema) -> Result<Self> {
        if factors.is_empty() {
            return Err(LvaeError::InvalidParameter("a kernel term needs a factor".into()));
        }
        let n_se = factors.iter().filter(|f| f.kind == FactorKind::Se).count();
        if n_se > 1 {
            return Err(LvaeError::InvalidParameter(
                "an interaction term may hold at most one se factor".into(),
            ));
        }
        for f in &factors {
            if f.column >= schema.len() {
                return Err(LvaeError::Schema(format!("column {} out of range", f.column)));
            }
            let kind = schema.kind(f.column);
            let ok = match f.kind {
                FactorKind::Se => kind == CovariateKind::Continuous,
                FactorKind::Ca => kind != CovariateKind::Continuous,
                FactorKind::Bi => true,
            };
            if !ok {
                return Err(LvaeError::Schema(format!(
                    "{} factor cannot read {:?} column `{}`",
                    f.kind.token(),
                    kind,
                    schema.name(f.column)
                )));
            }
        }
        Ok(TermSpec { factors })
    }

    pub fn factors(&self) -> &[KernelFactor] {
        &self.factors
    }

    pub fn kind(&self) -> TermKind {
        if self.factors.len() > 1 {
            return TermKind::Interaction;
        }
        match self.factors[0].kind {
            FactorKind::Se => TermKind::Se,
            FactorKind::Ca => TermKind::Cat,
            FactorKind::Bi => TermKind::Bin,
        }
    }

    pub fn se_column(&self) -> Option<usize> {
        self.factors
            .iter()
            .find(|f| f.kind == FactorKind::Se)
            .map(|f| f.column)
    }

    pub fn columns(&self) -> impl Iterator<Item = usize> + '_ {
        self.factors.iter().map(|f| f.column)
    }

    /// True when the term holds a categorical factor on the instance id,
    /// which makes it vanish across different instances.
    pub fn reads_instance(&self, id_column: usize) -> bool {
        self.factors
            .iter()
            .any(|f| f.kind == FactorKind::Ca && f.column == id_column)
    }

    /// Renders the term as `ca_x_se(id,age)`.
    pub fn describe(&self, schema: &CovariateSchema) -> String {
        let kinds: Vec<_> = self.factors.iter().map(|f| f.kind.token()).collect();
        let cols: Vec<_> = self.factors.iter().map(|f| schema.name(f.column)).collect();
        format!("{}({})", kinds.join("_x_"), cols.join(","))
    }
}

/// Parses `ca(id) + se(age) + ca_x_se(id,age)` into term structures.
pub fn parse_prior_spec(text: &str, schema: &CovariateSchema) -> Result<Vec<TermSpec>> {
    let text = text.trim();
    if text.is_empty() || text == "none" {
        return Ok(Vec::new());
    }
    text.split('+')
        .map(|raw| {
            let raw = raw.trim();
            let bad = || LvaeError::Config(format!("malformed kernel term `{raw}`"));
            let open = raw.find('(').ok_or_else(bad)?;
            if !raw.ends_with(')') {
                return Err(bad());
            }
            let kinds = raw[..open].trim().split("_x_").map(|k| match k.trim() {
                "se" => Ok(FactorKind::Se),
                "ca" => Ok(FactorKind::Ca),
                "bi" => Ok(FactorKind::Bi),
                other => Err(LvaeError::Config(format!("unknown kernel `{other}` in `{raw}`"))),
            });
            let kinds = kinds.collect::<Result<Vec<_>>>()?;
            let args: Vec<&str> = raw[open + 1..raw.len() - 1]
                .split(',')
                .map(str::trim)
                .collect();
            if args.len() != kinds.len() {
                return Err(LvaeError::Config(format!(
                    "`{raw}` names {} kernels but {} covariates",
                    kinds.len(),
                    args.len()
                )));
            }
            let factors = kinds
                .into_iter()
                .zip(args)
                .map(|(kind, name)| {
                    let column = schema
                        .index_of(name)
                        .ok_or_else(|| LvaeError::Config(format!("unknown covariate `{name}`")))?;
                    Ok(KernelFactor { kind, column })
                })
                .collect::<Result<Vec<_>>>()?;
            TermSpec::new(factors, schema)
        })
        .collect()
}

/// An additive term with its (log-transformed) parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTerm {
    spec: TermSpec,
    log_scale: f64,
    log_lengthscale: Option<f64>,
}

/// Evaluation-ready copy of the term parameters.
#[derive(Clone, Copy)]
struct Prepared {
    scale: f64,
    inv_l2: f64,
}

impl KernelTerm {
    /// `lengthscale` is required exactly when the term holds an `se` factor.
    pub fn new(spec: TermSpec, scale: f64, lengthscale: Option<f64>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(LvaeError::InvalidParameter(format!("scale must be positive, got {scale}")));
        }
        let log_lengthscale = match (spec.se_column(), lengthscale) {
            (Some(_), Some(l)) if l > 0.0 && l.is_finite() => Some(l.ln()),
            (Some(_), Some(l)) => {
                return Err(LvaeError::InvalidParameter(format!(
                    "lengthscale must be positive, got {l}"
                )))
            }
            (Some(_), None) => {
                return Err(LvaeError::InvalidParameter("se term needs a lengthscale".into()))
            }
            (None, Some(_)) => {
                return Err(LvaeError::InvalidParameter(
                    "lengthscale given for a term without an se factor".into(),
                ))
            }
            (None, None) => None,
        };
        Ok(KernelTerm {
            spec,
            log_scale: scale.ln(),
            log_lengthscale,
        })
    }

    pub fn spec(&self) -> &TermSpec {
        &self.spec
    }

    pub fn kind(&self) -> TermKind {
        self.spec.kind()
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn lengthscale(&self) -> Option<f64> {
        self.log_lengthscale.map(f64::exp)
    }

    /// 1 (log σ²) or 2 (log σ², log ℓ).
    pub fn n_params(&self) -> usize {
        1 + usize::from(self.log_lengthscale.is_some())
    }

    /// Unconstrained parameters `[log σ², log ℓ]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = vec![self.log_scale];
        p.extend(self.log_lengthscale);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(LvaeError::Shape(format!(
                "term takes {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        self.log_scale = params[0];
        if let Some(l) = self.log_lengthscale.as_mut() {
            *l = params[1];
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        let ok = self.log_scale.is_finite()
            && self.scale().is_finite()
            && self
                .log_lengthscale
                .is_none_or(|l| l.is_finite() && l.exp().is_finite() && l.exp() > 0.0);
        if ok {
            Ok(())
        } else {
            Err(LvaeError::NonFinite(format!("parameters of term {:?}", self.spec)))
        }
    }

    fn prepare(&self) -> Prepared {
        let inv_l2 = self.lengthscale().map_or(0.0, |l| 1.0 / (l * l));
        Prepared {
            scale: self.scale(),
            inv_l2,
        }
    }

    /// Returns the kernel value and the signed difference on the `se` column.
    #[inline]
    fn eval_prepared(&self, p: Prepared, x: &[Option<f64>], y: &[Option<f64>]) -> (f64, f64) {
        let mut value = p.scale;
        let mut diff = 0.0;
        for f in &self.spec.factors {
            let (Some(a), Some(b)) = (x[f.column], y[f.column]) else {
                return (0.0, 0.0);
            };
            match f.kind {
                FactorKind::Se => {
                    diff = a - b;
                    value *= (-0.5 * diff * diff * p.inv_l2).exp();
                }
                FactorKind::Ca => {
                    if a as i64 != b as i64 {
                        return (0.0, 0.0);
                    }
                }
                FactorKind::Bi => {
                    if a != 1.0 || b != 1.0 {
                        return (0.0, 0.0);
                    }
                }
            }
        }
        (value, diff)
    }

    /// Unchecked evaluation on two rows of the same schema.
    pub fn eval(&self, x: &[Option<f64>], y: &[Option<f64>]) -> f64 {
        self.eval_prepared(self.prepare(), x, y).0
    }
}

/// Evaluates one term on a pair of covariate rows.
pub fn eval_term(term: &KernelTerm, x: &[Option<f64>], y: &[Option<f64>]) -> Result<f64> {
    let width = term.spec.columns().max().unwrap_or(0) + 1;
    if x.len() != y.len() || x.len() < width {
        return Err(LvaeError::Schema(format!(
            "rows of width {} and {} do not fit a term reading column {}",
            x.len(),
            y.len(),
            width - 1
        )));
    }
    term.check_finite()?;
    Ok(term.eval(x, y))
}

fn check_views(term: &KernelTerm, a: Rows<'_>, b: Rows<'_>) -> Result<()> {
    if a.width() != b.width() {
        return Err(LvaeError::Schema(format!(
            "row sets have widths {} and {}",
            a.width(),
            b.width()
        )));
    }
    if let Some(c) = term.spec.columns().max() {
        if c >= a.width() {
            return Err(LvaeError::Schema(format!("term reads column {c} beyond the rows")));
        }
    }
    match a.len().checked_mul(b.len()) {
        Some(n) if n <= MAX_GRAM_ENTRIES => Ok(()),
        _ => Err(LvaeError::DenseCap {
            what: "gram matrix",
            rows: a.len(),
            cols: b.len(),
            cap: MAX_GRAM_ENTRIES,
        }),
    }
}

/// Gram matrix of one term between two row sets.
pub fn gram(term: &KernelTerm, a: &Points, b: &Points) -> Result<DMatrix<f64>> {
    gram_rows(term, a.view(), b.view())
}

pub fn gram_rows(term: &KernelTerm, a: Rows<'_>, b: Rows<'_>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(a.len(), b.len());
    add_gram(term, a, b, &mut out)?;
    Ok(out)
}

/// `out += Gram(term)`.
pub fn add_gram(term: &KernelTerm, a: Rows<'_>, b: Rows<'_>, out: &mut DMatrix<f64>) -> Result<()> {
    check_views(term, a, b)?;
    term.check_finite()?;
    let p = term.prepare();
    for j in 0..b.len() {
        let y = b.row(j);
        for i in 0..a.len() {
            let (k, _) = term.eval_prepared(p, a.row(i), y);
            out[(i, j)] += k;
        }
    }
    Ok(())
}

/// Sum of the Gram matrices of several terms.
pub fn gram_sum<'t>(
    terms: impl IntoIterator<Item = &'t KernelTerm>,
    a: Rows<'_>,
    b: Rows<'_>,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(a.len(), b.len());
    for t in terms {
        add_gram(t, a, b, &mut out)?;
    }
    Ok(out)
}

/// Vector-Jacobian product of a Gram matrix.
///
/// Given the adjoint `adj = ∂f/∂K` of `K = Gram(term, a, b)`, accumulates
/// `∂f/∂[log σ², log ℓ]` into `param_grad` and, when requested, the gradients
/// with respect to the continuous coordinates of `a` and `b`.
pub fn gram_vjp(
    term: &KernelTerm,
    a: Rows<'_>,
    b: Rows<'_>,
    adj: &DMatrix<f64>,
    param_grad: &mut [f64],
    mut a_coords: Option<&mut DMatrix<f64>>,
    mut b_coords: Option<&mut DMatrix<f64>>,
) {
    debug_assert_eq!(adj.shape(), (a.len(), b.len()));
    debug_assert_eq!(param_grad.len(), term.n_params());
    let p = term.prepare();
    let se = term.spec.se_column();
    let mut g_scale = 0.0;
    let mut g_len = 0.0;
    for j in 0..b.len() {
        let y = b.row(j);
        for i in 0..a.len() {
            let w = adj[(i, j)];
            if w == 0.0 {
                continue;
            }
            let (k, d) = term.eval_prepared(p, a.row(i), y);
            if k == 0.0 {
                continue;
            }
            let wk = w * k;
            g_scale += wk;
            if let Some(col) = se {
                g_len += wk * d * d * p.inv_l2;
                let dk = wk * d * p.inv_l2;
                if let Some(g) = a_coords.as_deref_mut() {
                    g[(i, col)] -= dk;
                }
                if let Some(g) = b_coords.as_deref_mut() {
                    g[(j, col)] += dk;
                }
            }
        }
    }
    param_grad[0] += g_scale;
    if se.is_some() {
        param_grad[1] += g_len;
    }
}

/// Per-latent-dimension view of the prior.
#[derive(Clone, Copy, Debug)]
pub struct DimPrior<'a> {
    pub terms: &'a [KernelTerm],
    /// `true` for terms that belong to the block-diagonal instance part.
    pub instance_part: &'a [bool],
}

impl<'a> DimPrior<'a> {
    pub fn a_terms(&self) -> impl Iterator<Item = &'a KernelTerm> + 'a {
        let flags = self.instance_part;
        self.terms
            .iter()
            .zip(flags)
            .filter(|(_, r)| !**r)
            .map(|(t, _)| t)
    }

    pub fn r_terms(&self) -> impl Iterator<Item = &'a KernelTerm> + 'a {
        let flags = self.instance_part;
        self.terms
            .iter()
            .zip(flags)
            .filter(|(_, r)| **r)
            .map(|(t, _)| t)
    }

    pub fn n_params(&self) -> usize {
        self.terms.iter().map(KernelTerm::n_params).sum()
    }

    /// Offset of each term's parameters in the flattened per-dimension vector.
    pub fn param_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.terms
            .iter()
            .map(|t| {
                let o = off;
                off += t.n_params();
                o
            })
            .collect()
    }

    /// Noise variance σ_z², fixed to 1.
    pub fn noise(&self) -> f64 {
        1.0
    }

    /// Full additive kernel (without noise) between two row sets.
    pub fn kernel(&self, a: Rows<'_>, b: Rows<'_>) -> Result<DMatrix<f64>> {
        gram_sum(self.terms.iter(), a, b)
    }

    /// `Σ̂_p = K⁽ᴿ⁾ + σ_z² I` over one instance's rows.
    pub fn instance_block(&self, rows: Rows<'_>) -> Result<DMatrix<f64>> {
        let mut m = gram_sum(self.r_terms(), rows, rows)?;
        for i in 0..m.nrows() {
            m[(i, i)] += self.noise();
        }
        Ok(m)
    }

    /// `K⁽ᴬ⁾` between two row sets.
    pub fn a_kernel(&self, a: Rows<'_>, b: Rows<'_>) -> Result<DMatrix<f64>> {
        gram_sum(self.a_terms(), a, b)
    }

    /// Vector-Jacobian product for a sum over the selected terms.
    pub fn sum_vjp(
        &self,
        part: TermPart,
        a: Rows<'_>,
        b: Rows<'_>,
        adj: &DMatrix<f64>,
        param_grad: &mut [f64],
        mut a_coords: Option<&mut DMatrix<f64>>,
        mut b_coords: Option<&mut DMatrix<f64>>,
    ) {
        let offsets = self.param_offsets();
        for (r, term) in self.terms.iter().enumerate() {
            let selected = match part {
                TermPart::All => true,
                TermPart::Candidate => !self.instance_part[r],
                TermPart::Instance => self.instance_part[r],
            };
            if !selected {
                continue;
            }
            let o = offsets[r];
            gram_vjp(
                term,
                a,
                b,
                adj,
                &mut param_grad[o..o + term.n_params()],
                a_coords.as_deref_mut(),
                b_coords.as_deref_mut(),
            );
        }
    }
}

/// Which additive terms a kernel sum runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermPart {
    All,
    /// The low-rank candidate part `K⁽ᴬ⁾`.
    Candidate,
    /// The block-diagonal instance part `K⁽ᴿ⁾`.
    Instance,
}

/// Multi-output additive GP prior with a diagonal cross-covariance: every
/// latent dimension has its own copy of the same term structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditivePrior {
    specs: Vec<TermSpec>,
    dims: Vec<Vec<KernelTerm>>,
    instance_part: Vec<bool>,
    instance_term: Option<usize>,
}

impl AdditivePrior {
    /// Builds a prior with σ² = 1 and each lengthscale set to half the
    /// empirical range of its covariate in `data` (1 when unavailable).
    pub fn new(
        specs: Vec<TermSpec>,
        latent_dim: usize,
        schema: &CovariateSchema,
        data: Option<&CovariateMatrix>,
    ) -> Result<Self> {
        let terms = specs
            .iter()
            .map(|spec| {
                let l = spec.se_column().map(|c| {
                    let half_range = data.and_then(|x| column_range(x, c)).map(|r| 0.5 * r);
                    match half_range {
                        Some(h) if h > 0.0 => h,
                        _ => 1.0,
                    }
                });
                KernelTerm::new(spec.clone(), 1.0, l)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_terms(vec![terms; latent_dim], schema)
    }

    /// Prior with no kernel terms: `Σ_l = I`, i.e. the standard-normal VAE prior.
    pub fn noise_only(latent_dim: usize) -> Self {
        AdditivePrior {
            specs: Vec::new(),
            dims: vec![Vec::new(); latent_dim],
            instance_part: Vec::new(),
            instance_term: None,
        }
    }

    pub fn from_terms(dims: Vec<Vec<KernelTerm>>, schema: &CovariateSchema) -> Result<Self> {
        if dims.is_empty() {
            return Err(LvaeError::InvalidParameter("latent dimension must be ≥ 1".into()));
        }
        let specs: Vec<TermSpec> = dims[0].iter().map(|t| t.spec.clone()).collect();
        for (l, terms) in dims.iter().enumerate() {
            let same = terms.len() == specs.len()
                && terms.iter().zip(&specs).all(|(t, s)| &t.spec == s);
            if !same {
                return Err(LvaeError::InvalidParameter(format!(
                    "latent dimension {l} has a different term structure"
                )));
            }
        }
        let id = schema.id_index();
        let instance_part: Vec<bool> = specs.iter().map(|s| s.reads_instance(id)).collect();
        let instance_term = specs.iter().position(|s| {
            s.kind() == TermKind::Interaction && s.reads_instance(id) && s.se_column().is_some()
        });
        Ok(AdditivePrior {
            specs,
            dims,
            instance_part,
            instance_term,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.dims.len()
    }

    pub fn n_terms(&self) -> usize {
        self.specs.len()
    }

    pub fn specs(&self) -> &[TermSpec] {
        &self.specs
    }

    pub fn dim(&self, l: usize) -> DimPrior<'_> {
        DimPrior {
            terms: &self.dims[l],
            instance_part: &self.instance_part,
        }
    }

    pub fn terms(&self, l: usize) -> &[KernelTerm] {
        &self.dims[l]
    }

    pub fn terms_mut(&mut self, l: usize) -> &mut [KernelTerm] {
        &mut self.dims[l]
    }

    /// Index of the id × continuous interaction term.
    pub fn instance_term_index(&self) -> Option<usize> {
        self.instance_term
    }

    pub fn instance_part(&self) -> &[bool] {
        &self.instance_part
    }

    pub fn noise_variance(&self) -> f64 {
        1.0
    }

    pub fn n_params_per_dim(&self) -> usize {
        self.dims.first().map_or(0, |t| t.iter().map(KernelTerm::n_params).sum())
    }

    pub fn params(&self, l: usize) -> Vec<f64> {
        self.dims[l].iter().flat_map(|t| t.params()).collect()
    }

    pub fn set_params(&mut self, l: usize, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params_per_dim() {
            return Err(LvaeError::Shape(format!(
                "expected {} prior parameters, got {}",
                self.n_params_per_dim(),
                params.len()
            )));
        }
        let mut rest = params;
        for t in &mut self.dims[l] {
            let (head, tail) = rest.split_at(t.n_params());
            t.set_params(head)?;
            rest = tail;
        }
        Ok(())
    }

    /// The term list in config notation.
    pub fn describe(&self, schema: &CovariateSchema) -> String {
        if self.specs.is_empty() {
            return "none".into();
        }
        self.specs
            .iter()
            .map(|s| s.describe(schema))
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

impl fmt::Display for TermKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TermKind::Se => "SE",
            TermKind::Cat => "CAT",
            TermKind::Bin => "BIN",
            TermKind::Interaction => "INTERACTION",
        };
        f.write_str(s)
    }
}

fn column_range(x: &CovariateMatrix, column: usize) -> Option<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..x.len() {
        if let Some(v) = x.row(i)[column] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (hi >= lo).then_some(hi - lo)
}

/// `Σ_l = Σ_r K⁽ˡʳ⁾ + σ_z² I` as a dense N×N matrix.
pub fn assemble_sigma(prior: &AdditivePrior, l: usize, x: &CovariateMatrix) -> Result<DMatrix<f64>> {
    assemble_sigma_capped(prior, l, x, DEFAULT_DENSE_CAP)
}

pub fn assemble_sigma_capped(
    prior: &AdditivePrior,
    l: usize,
    x: &CovariateMatrix,
    cap: usize,
) -> Result<DMatrix<f64>> {
    let n = x.len();
    if n > cap {
        return Err(LvaeError::DenseCap {
            what: "prior covariance",
            rows: n,
            cols: n,
            cap,
        });
    }
    let dim = prior.dim(l);
    let mut sigma = dim.kernel(x.view(), x.view())?;
    for i in 0..n {
        sigma[(i, i)] += dim.noise();
    }
    Ok(sigma)
}

/// The split `Σ = K⁽ᴬ⁾ + blockdiag(Σ̂₁, …, Σ̂_P)`.
#[derive(Clone, Debug)]
pub struct SplitStructure {
    pub candidate: DMatrix<f64>,
    pub blocks: Vec<DMatrix<f64>>,
}

impl SplitStructure {
    /// Dense `K⁽ᴬ⁾ + blockdiag(Σ̂ₚ)`.
    pub fn reassemble(&self, x: &CovariateMatrix) -> DMatrix<f64> {
        let mut m = self.candidate.clone();
        for (b, block) in x.blocks().iter().zip(&self.blocks) {
            let mut view = m.view_mut((b.start, b.start), (b.len, b.len));
            view += block;
        }
        m
    }
}

pub fn split_structure(prior: &AdditivePrior, l: usize, x: &CovariateMatrix) -> Result<SplitStructure> {
    let dim = prior.dim(l);
    let candidate = dim.a_kernel(x.view(), x.view())?;
    let blocks = (0..x.n_instances())
        .map(|p| dim.instance_block(x.block_view(p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitStructure { candidate, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::CovariateKind;

    fn schema() -> CovariateSchema {
        CovariateSchema::longitudinal()
    }

    fn row(id: f64, age: f64, sex: f64, dp: f64, da: Option<f64>) -> Vec<Option<f64>> {
        vec![Some(id), Some(age), Some(sex), Some(dp), da, Some(0.0)]
    }

    fn term(text: &str, scale: f64, l: Option<f64>) -> KernelTerm {
        let spec = parse_prior_spec(text, &schema()).unwrap().remove(0);
        KernelTerm::new(spec, scale, l).unwrap()
    }

    #[test]
    fn se_values() {
        let t = term("se(age)", 1.0, Some(1.0));
        let a = row(1.0, 0.0, 0.0, 0.0, None);
        let b = row(1.0, 1.0, 0.0, 0.0, None);
        assert_eq!(eval_term(&t, &a, &a).unwrap(), 1.0);
        assert!((eval_term(&t, &a, &b).unwrap() - 0.606_530_659_712_633_4).abs() < 1e-15);
    }

    #[test]
    fn categorical_and_binary() {
        let ca = term("ca(sex)", 1.0, None);
        let bi = term("bi(diseasePresence)", 1.0, None);
        let a = row(1.0, 0.0, 3.0, 1.0, None);
        let b = row(1.0, 0.0, 5.0, 1.0, None);
        assert_eq!(ca.eval(&a, &b), 0.0);
        assert_eq!(bi.eval(&a, &b), 1.0);
        let c = row(1.0, 0.0, 5.0, 2.0, None);
        assert_eq!(bi.eval(&a, &c), 0.0);
    }

    #[test]
    fn missing_covariate_gives_exact_zero() {
        let t = term("bi_x_se(diseasePresence,diseaseAge)", 2.0, Some(1.0));
        let a = row(1.0, 0.0, 0.0, 1.0, Some(0.5));
        let b = row(1.0, 0.0, 0.0, 1.0, None);
        let v = t.eval(&a, &b);
        assert_eq!(v.to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn interaction_restrictions() {
        let s = schema();
        assert!(parse_prior_spec("se_x_se(age,diseaseAge)", &s).is_err());
        assert!(parse_prior_spec("se(sex)", &s).is_err());
        assert!(parse_prior_spec("ca_x_se(id)", &s).is_err());
        assert!(parse_prior_spec("foo(age)", &s).is_err());
        let specs = parse_prior_spec(
            "ca(id) + se(age) + ca_x_se(id,age) + ca_x_se(sex,age) + bi_x_se(diseasePresence,diseaseAge)",
            &s,
        )
        .unwrap();
        assert_eq!(specs.len(), 5);
        assert_eq!(specs[2].kind(), TermKind::Interaction);
        assert_eq!(specs[0].describe(&s), "ca(id)");
        assert_eq!(specs[4].describe(&s), "bi_x_se(diseasePresence,diseaseAge)");
    }

    #[test]
    fn non_finite_parameter_is_an_error() {
        let mut t = term("se(age)", 1.0, Some(1.0));
        t.set_params(&[f64::NAN, 0.0]).unwrap();
        let a = row(1.0, 0.0, 0.0, 0.0, None);
        assert!(matches!(eval_term(&t, &a, &a), Err(LvaeError::NonFinite(_))));
        assert!(eval_term(&t, &a, &a[..2]).is_err());
    }

    fn two_instance_matrix() -> CovariateMatrix {
        let mut vals = Vec::new();
        for (id, age) in [(1.0, 0.0), (1.0, 1.0), (2.0, 0.5), (2.0, 2.0)] {
            vals.extend(row(id, age, 0.0, 0.0, None));
        }
        CovariateMatrix::new(schema(), Points::new(6, vals).unwrap()).unwrap()
    }

    #[test]
    fn categorical_id_gram_is_block_structured() {
        let x = two_instance_matrix();
        let t = term("ca(id)", 1.0, None);
        let k = gram(&t, x.points(), x.points()).unwrap();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1.],
        );
        assert_eq!(k, expected);
    }

    #[test]
    fn noise_only_sigma_is_identity() {
        let x = two_instance_matrix();
        let prior = AdditivePrior::noise_only(2);
        assert_eq!(assemble_sigma(&prior, 1, &x).unwrap(), DMatrix::identity(4, 4));
    }

    #[test]
    fn sigma_with_categorical_id_term() {
        let x = two_instance_matrix();
        let s = schema();
        let prior = AdditivePrior::new(parse_prior_spec("ca(id)", &s).unwrap(), 1, &s, None).unwrap();
        let sigma = assemble_sigma(&prior, 0, &x).unwrap();
        // hand assembly: 1 + δᵢⱼ inside a block, 0 across blocks
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[2., 1., 0., 0., 1., 2., 0., 0., 0., 0., 2., 1., 0., 0., 1., 2.],
        );
        assert_eq!(sigma, expected);
    }

    #[test]
    fn split_structure_reassembles() {
        let x = two_instance_matrix();
        let s = schema();
        let specs =
            parse_prior_spec("ca(id) + se(age) + ca_x_se(id,age) + ca_x_se(sex,age)", &s).unwrap();
        let prior = AdditivePrior::new(specs, 2, &s, Some(&x)).unwrap();
        assert_eq!(prior.instance_term_index(), Some(2));
        assert_eq!(prior.instance_part(), &[true, false, true, false]);
        let split = split_structure(&prior, 1, &x).unwrap();
        assert_eq!(split.blocks.len(), 2);
        let sigma = assemble_sigma(&prior, 1, &x).unwrap();
        let diff = (split.reassemble(&x) - &sigma).abs().max();
        assert!(diff <= 1e-12 * sigma.abs().max());
        // instance term across different ids is exactly zero
        let t = &prior.terms(0)[2];
        assert_eq!(t.eval(x.row(0), x.row(2)), 0.0);
    }

    #[test]
    fn lengthscale_initialized_from_range() {
        let x = two_instance_matrix();
        let s = schema();
        let prior = AdditivePrior::new(parse_prior_spec("se(age)", &s).unwrap(), 1, &s, Some(&x)).unwrap();
        assert_eq!(prior.terms(0)[0].lengthscale(), Some(1.0));
        assert_eq!(prior.terms(0)[0].scale(), 1.0);
    }

    #[test]
    fn gram_vjp_matches_finite_differences() {
        let x = two_instance_matrix();
        let t = term("ca_x_se(sex,age)", 1.3, Some(0.7));
        let adj = DMatrix::from_fn(4, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin());
        let mut g = vec![0.0; 2];
        let mut bc = DMatrix::zeros(4, 6);
        gram_vjp(&t, x.view(), x.view(), &adj, &mut g, None, Some(&mut bc));
        let f = |t: &KernelTerm| crate::linalg::frobenius_dot(&gram(t, x.points(), x.points()).unwrap(), &adj);
        let h = 1e-6;
        for k in 0..2 {
            let mut tp = t.clone();
            let mut tm = t.clone();
            let mut p = t.params();
            p[k] += h;
            tp.set_params(&p).unwrap();
            p[k] -= 2.0 * h;
            tm.set_params(&p).unwrap();
            let fd = (f(&tp) - f(&tm)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7, "param {k}: {fd} vs {}", g[k]);
        }
        // coordinate gradient on the right-hand rows
        for j in 0..4 {
            let bump = |delta: f64| {
                let mut pts = x.points().clone();
                pts.set(j, 1, Some(x.points().get(j, 1).unwrap() + delta));
                crate::linalg::frobenius_dot(&gram(&t, x.points(), &pts).unwrap(), &adj)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((fd - bc[(j, 1)]).abs() < 1e-7);
        }
    }

    #[test]
    fn schema_mismatch_between_row_sets() {
        let t = term("se(age)", 1.0, Some(1.0));
        let a = Points::new(6, row(1.0, 0.0, 0.0, 0.0, None)).unwrap();
        let b = Points::new(2, vec![Some(1.0), Some(0.0)]).unwrap();
        assert!(gram(&t, &a, &b).is_err());
        let _ = CovariateKind::Binary;
    }
}
