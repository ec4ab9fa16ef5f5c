//! Small feedforward encoder/decoder networks with hand-written backward passes.
//!
//! Batches are stored column-wise: a batch of `B` inputs of width `D` is a
//! `D×B` matrix. Flat parameter vectors list each layer's weights in
//! column-major order followed by its bias.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LvaeError, Result};

/// Floor on the latent standard deviation used by the reparameterization.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(LvaeError::Config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Layer {
            weights: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let weights = DMatrix::from_fn(output, input, |_, _| rng.random_range(-bound..=bound));
        Layer {
            weights,
            bias: DVector::zeros(output),
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.weights * x;
        for mut col in out.column_iter_mut() {
            col += &self.bias;
        }
        let act = self.activation;
        out.apply(|v| *v = act.apply(*v));
        out
    }

    /// Backpropagates `d_out` (adjoint of this layer's output), writing the
    /// parameter gradient into `grad` and returning the input adjoint.
    fn backward(
        &self,
        input: &DMatrix<f64>,
        output: &DMatrix<f64>,
        d_out: &DMatrix<f64>,
        grad: &mut [f64],
        need_input: bool,
    ) -> Option<DMatrix<f64>> {
        let act = self.activation;
        let d_pre = d_out.zip_map(output, |g, y| g * act.derivative_from_output(y));
        let gw = &d_pre * input.transpose();
        let (gw_slot, gb_slot) = grad.split_at_mut(self.weights.len());
        for (s, v) in gw_slot.iter_mut().zip(gw.iter()) {
            *s += v;
        }
        for (i, s) in gb_slot.iter_mut().enumerate() {
            *s += d_pre.row(i).sum();
        }
        need_input.then(|| self.weights.transpose() * d_pre)
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weights.as_slice());
        out.extend_from_slice(self.bias.as_slice());
    }

    fn read_params(&mut self, src: &[f64]) -> usize {
        let nw = self.weights.len();
        self.weights.as_mut_slice().copy_from_slice(&src[..nw]);
        let nb = self.bias.len();
        self.bias.as_mut_slice().copy_from_slice(&src[nw..nw + nb]);
        nw + nb
    }
}

/// A chain of dense layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations recorded by a forward pass; entry 0 is the input.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    activations: Vec<DMatrix<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("trace holds the input")
    }
}

impl Mlp {
    /// Hidden layers of the given widths, all with `hidden` activation,
    /// followed by an output layer of width `output` with `out_act`.
    pub fn new<R: Rng>(
        input: usize,
        hidden_widths: &[usize],
        output: usize,
        hidden: Activation,
        out_act: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::new();
        let mut w_in = input;
        for &w in hidden_widths {
            layers.push(Layer::glorot(w_in, w, hidden, rng));
            w_in = w;
        }
        layers.push(Layer::glorot(w_in, output, out_act, rng));
        Mlp { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, Layer::input_width)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_width)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    /// Checks that consecutive layer widths line up (used after deserializing).
    pub fn check_chain(&self) -> Result<()> {
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(LvaeError::Shape(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].output_width(),
                    i + 1,
                    pair[1].input_width()
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &DMatrix<f64>, what: &str) -> Result<MlpTrace> {
        if x.nrows() != self.input_width() {
            return Err(LvaeError::Shape(format!(
                "{what}: input width {} but the network takes {}",
                x.nrows(),
                self.input_width()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(activations.last().unwrap());
            if out.iter().any(|v| !v.is_finite()) {
                return Err(LvaeError::NonFinite(format!("{what} layer {i} activation")));
            }
            activations.push(out);
        }
        Ok(MlpTrace { activations })
    }

    /// Returns the input adjoint when `need_input` is set.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        d_out: DMatrix<f64>,
        grad: &mut [f64],
        need_input: bool,
    ) -> Option<DMatrix<f64>> {
        debug_assert_eq!(grad.len(), self.n_params());
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |o, l| {
                let start = *o;
                *o += l.n_params();
                Some(start)
            })
            .collect();
        let mut d = d_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let slot = &mut grad[offsets[i]..offsets[i] + layer.n_params()];
            let want = need_input || i > 0;
            d = layer.backward(&trace.activations[i], &trace.activations[i + 1], &d, slot, want)?;
        }
        Some(d)
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.write_params(out);
        }
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut used = 0;
        for l in &mut self.layers {
            used += l.read_params(&src[used..]);
        }
        used
    }
}

/// Architecture descriptor shared by checkpoints and configs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn desk_scale(data_dim: usize, latent_dim: usize) -> Self {
        Architecture {
            data_dim,
            latent_dim,
            encoder_hidden: vec![32, 16],
            decoder_hidden: vec![16, 32],
            activation: Activation::Tanh,
        }
    }
}

/// Inference network: a trunk followed by a mean head and a raw log-variance head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub trunk: Mlp,
    pub mean_head: Layer,
    pub log_var_head: Layer,
}

#[derive(Clone, Debug)]
pub struct EncoderTrace {
    trunk: MlpTrace,
    /// Encoder means, `L×B`.
    pub mean: DMatrix<f64>,
    /// Encoder variances, `L×B`, strictly positive.
    pub var: DMatrix<f64>,
}

impl Encoder {
    pub fn new<R: Rng>(arch: &Architecture, rng: &mut R) -> Self {
        let (hidden_widths, last) = match arch.encoder_hidden.split_last() {
            Some((last, rest)) => (rest.to_vec(), *last),
            None => (Vec::new(), arch.data_dim),
        };
        let trunk = if arch.encoder_hidden.is_empty() {
            Mlp { layers: Vec::new() }
        } else {
            Mlp::new(arch.data_dim, &hidden_widths, last, arch.activation, arch.activation, rng)
        };
        Encoder {
            trunk,
            mean_head: Layer::glorot(last, arch.latent_dim, Activation::Identity, rng),
            log_var_head: Layer::glorot(last, arch.latent_dim, Activation::Identity, rng),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mean_head.output_width()
    }

    pub fn input_width(&self) -> usize {
        if self.trunk.layers.is_empty() {
            self.mean_head.input_width()
        } else {
            self.trunk.input_width()
        }
    }

    pub fn n_params(&self) -> usize {
        self.trunk.n_params() + self.mean_head.n_params() + self.log_var_head.n_params()
    }

    /// Encodes the `D×B` input; missing entries must already be zero-filled.
    pub fn encode(&self, y: &DMatrix<f64>) -> Result<EncoderTrace> {
        let trunk = if self.trunk.layers.is_empty() {
            if y.nrows() != self.mean_head.input_width() {
                return Err(LvaeError::Shape(format!(
                    "encoder: input width {} but the network takes {}",
                    y.nrows(),
                    self.mean_head.input_width()
                )));
            }
            MlpTrace {
                activations: vec![y.clone()],
            }
        } else {
            self.trunk.forward(y, "encoder")?
        };
        let h = trunk.output();
        let mean = self.mean_head.forward(h);
        let var = self.log_var_head.forward(h).map(f64::exp);
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(LvaeError::NonFinite("encoder mean head".into()));
        }
        if var.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(LvaeError::NonFinite("encoder variance head".into()));
        }
        Ok(EncoderTrace { trunk, mean, var })
    }

    /// Backward pass from adjoints on the means and (positive) variances.
    pub fn backward(&self, trace: &EncoderTrace, d_mean: &DMatrix<f64>, d_var: &DMatrix<f64>, grad: &mut [f64]) {
        let n_trunk = self.trunk.n_params();
        let n_mean = self.mean_head.n_params();
        let (g_trunk, rest) = grad.split_at_mut(n_trunk);
        let (g_mean, g_var) = rest.split_at_mut(n_mean);
        let h = trace.trunk.output();
        // σ² = exp(raw) ⇒ ∂/∂raw = σ² ∂/∂σ²
        let d_raw = d_var.component_mul(&trace.var);
        // both heads are linear, so their recorded outputs are not needed
        let mut d_h = self
            .mean_head
            .backward(h, &trace.mean, d_mean, g_mean, true)
            .expect("input adjoint requested");
        d_h += self
            .log_var_head
            .backward(h, &trace.var, &d_raw, g_var, true)
            .expect("input adjoint requested");
        if !self.trunk.layers.is_empty() {
            self.trunk.backward(&trace.trunk, d_h, g_trunk, false);
        }
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        self.trunk.write_params(out);
        self.mean_head.write_params(out);
        self.log_var_head.write_params(out);
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut used = self.trunk.read_params(src);
        used += self.mean_head.read_params(&src[used..]);
        used += self.log_var_head.read_params(&src[used..]);
        used
    }
}

/// Generative network with `D` global raw log observation variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub net: Mlp,
    pub log_obs_var: DVector<f64>,
}

impl Decoder {
    pub fn new<R: Rng>(arch: &Architecture, rng: &mut R) -> Self {
        Decoder {
            net: Mlp::new(
                arch.latent_dim,
                &arch.decoder_hidden,
                arch.data_dim,
                arch.activation,
                Activation::Identity,
                rng,
            ),
            log_obs_var: DVector::zeros(arch.data_dim),
        }
    }

    pub fn data_dim(&self) -> usize {
        self.log_obs_var.len()
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params() + self.log_obs_var.len()
    }

    pub fn obs_var(&self) -> DVector<f64> {
        self.log_obs_var.map(f64::exp)
    }

    /// Decodes the `L×B` latent codes into `D×B` means.
    pub fn decode(&self, z: &DMatrix<f64>) -> Result<MlpTrace> {
        let trace = self.net.forward(z, "decoder")?;
        if self.log_obs_var.iter().any(|v| !v.is_finite() || !v.exp().is_finite()) {
            return Err(LvaeError::NonFinite("decoder observation variances".into()));
        }
        Ok(trace)
    }

    /// Backpropagates the mean adjoint; the observation-variance adjoint
    /// (w.r.t. the raw log variances) is added separately by the caller.
    pub fn backward(&self, trace: &MlpTrace, d_mean: DMatrix<f64>, grad: &mut [f64]) -> DMatrix<f64> {
        let n = self.net.n_params();
        self.net
            .backward(trace, d_mean, &mut grad[..n], true)
            .expect("input adjoint requested")
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        self.net.write_params(out);
        out.extend_from_slice(self.log_obs_var.as_slice());
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let used = self.net.read_params(src);
        let d = self.log_obs_var.len();
        self.log_obs_var.as_mut_slice().copy_from_slice(&src[used..used + d]);
        used + d
    }
}

/// Observations `Y` with an observation mask, one row per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    rows: usize,
    dim: usize,
    /// Row-major values; masked entries hold 0.
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl ObservationSet {
    /// Builds from row-major values; `None` marks a missing entry.
    pub fn from_rows(dim: usize, entries: Vec<Option<f64>>) -> Result<Self> {
        if dim == 0 || !entries.len().is_multiple_of(dim) {
            return Err(LvaeError::Shape(format!(
                "{} observation entries do not form rows of width {dim}",
                entries.len()
            )));
        }
        let mask: Vec<bool> = entries.iter().map(Option::is_some).collect();
        let values: Vec<f64> = entries.iter().map(|v| v.unwrap_or(0.0)).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LvaeError::NonFinite("observations".into()));
        }
        Ok(ObservationSet {
            rows: entries.len() / dim,
            dim,
            values,
            mask,
        })
    }

    /// Builds from dense values and a mask; values at masked entries are
    /// replaced by the placeholder 0.
    pub fn new(rows: usize, dim: usize, mut values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != rows * dim || mask.len() != rows * dim {
            return Err(LvaeError::Shape(format!(
                "observations need {} entries, got {} values and {} mask flags",
                rows * dim,
                values.len(),
                mask.len()
            )));
        }
        for (v, m) in values.iter_mut().zip(&mask) {
            if !m {
                *v = 0.0;
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LvaeError::NonFinite("observations".into()));
        }
        Ok(ObservationSet {
            rows,
            dim,
            values,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, d: usize) -> Option<f64> {
        let k = i * self.dim + d;
        self.mask[k].then_some(self.values[k])
    }

    pub fn value(&self, i: usize, d: usize) -> f64 {
        self.values[i * self.dim + d]
    }

    pub fn observed(&self, i: usize, d: usize) -> bool {
        self.mask[i * self.dim + d]
    }

    pub fn row_values(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn select(&self, rows: &[usize]) -> ObservationSet {
        let mut values = Vec::with_capacity(rows.len() * self.dim);
        let mut mask = Vec::with_capacity(rows.len() * self.dim);
        for &i in rows {
            values.extend_from_slice(self.row_values(i));
            mask.extend_from_slice(self.row_mask(i));
        }
        ObservationSet {
            rows: rows.len(),
            dim: self.dim,
            values,
            mask,
        }
    }

    /// `D×B` encoder input with masked entries filled by 0.
    pub fn encoder_input(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dim, self.rows, &self.values)
    }

    /// Column mask as a `D×B` 0/1 matrix.
    pub fn mask_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_iterator(self.dim, self.rows, self.mask.iter().map(|m| f64::from(u8::from(*m))))
    }
}

/// Masked Gaussian log-likelihood with gradients.
#[derive(Clone, Debug)]
pub struct ReconTerm {
    pub loglik: f64,
    /// ∂/∂ decoder mean, `D×B`.
    pub d_mean: DMatrix<f64>,
    /// ∂/∂ raw log observation variances.
    pub d_log_obs_var: DVector<f64>,
}

/// `Σₙ Σ_{d observed} log N(y_nd | mean_dn, σ²_yd)`.
pub fn recon_loglik(obs: &ObservationSet, mean: &DMatrix<f64>, log_obs_var: &DVector<f64>) -> Result<ReconTerm> {
    if mean.nrows() != obs.dim() || mean.ncols() != obs.len() || log_obs_var.len() != obs.dim() {
        return Err(LvaeError::Shape(format!(
            "decoder output {}x{} does not match {} rows of width {}",
            mean.nrows(),
            mean.ncols(),
            obs.len(),
            obs.dim()
        )));
    }
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let inv_var: Vec<f64> = log_obs_var.iter().map(|v| (-v).exp()).collect();
    let mut loglik = 0.0;
    let mut d_mean = DMatrix::zeros(obs.dim(), obs.len());
    let mut d_log_obs_var = DVector::zeros(obs.dim());
    for n in 0..obs.len() {
        let y = obs.row_values(n);
        let m = obs.row_mask(n);
        for d in 0..obs.dim() {
            if !m[d] {
                continue;
            }
            let r = y[d] - mean[(d, n)];
            let q = r * r * inv_var[d];
            loglik -= half_log_2pi + 0.5 * log_obs_var[d] + 0.5 * q;
            d_mean[(d, n)] = r * inv_var[d];
            d_log_obs_var[d] += 0.5 * q - 0.5;
        }
    }
    Ok(ReconTerm {
        loglik,
        d_mean,
        d_log_obs_var,
    })
}

/// `z = μ + max(σ, σ_floor)·ε`.
pub fn sample_latent(mean: &DMatrix<f64>, var: &DMatrix<f64>, noise: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = mean.clone();
    for ((z, v), e) in z.iter_mut().zip(var.iter()).zip(noise.iter()) {
        *z += v.sqrt().max(SIGMA_FLOOR) * e;
    }
    z
}

/// Pulls an adjoint on `z` back onto the variances: `∂z/∂σ² = ε / (2σ)`,
/// zero where the floor is active.
pub fn sample_latent_var_adjoint(var: &DMatrix<f64>, noise: &DMatrix<f64>, d_z: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(var.nrows(), var.ncols(), |i, j| {
        let s = var[(i, j)].sqrt();
        if s > SIGMA_FLOOR {
            d_z[(i, j)] * noise[(i, j)] / (2.0 * s)
        } else {
            0.0
        }
    })
}

/// `KL(N(μ, diag σ²) ‖ N(0, I))` summed over all entries, with its gradients
/// with respect to the means and variances.
pub fn standard_normal_kl(mean: &DMatrix<f64>, var: &DMatrix<f64>) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let mut kl = 0.0;
    for (m, v) in mean.iter().zip(var.iter()) {
        kl += 0.5 * (m * m + v - 1.0 - v.ln());
    }
    let d_var = var.map(|v| 0.5 - 0.5 / v);
    (kl, mean.clone(), d_var)
}
