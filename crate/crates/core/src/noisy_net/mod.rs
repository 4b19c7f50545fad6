//! Q-network with factorised-Gaussian noisy linear layers.
//!
//! A noisy layer with `p` inputs and `q` outputs holds learnable means
//! `(mu_w, mu_b)` and scales `(sigma_w, sigma_b)`. One [`NoiseSample`] draws
//! `p + q` standard normals, maps them through `f(x) = sgn(x)·√|x|`, and induces
//! the rank-1 weight noise `eps_out ⊗ eps_in` and bias noise `eps_out`:
//!
//! ```text
//! y = (mu_w + sigma_w ⊙ (eps_out ⊗ eps_in))·x + mu_b + sigma_b ⊙ eps_out
//! ```
//!
//! The network splits each observation into a position block and a velocity
//! block, encodes each with its own 64-unit layer, and feeds the concatenation
//! through a 128-unit trunk to one Q-value per action. Gradients are derived by
//! hand; for a fixed noise sample, `∂L/∂sigma_w = ∂L/∂W ⊙ ε^w` and
//! `∂L/∂sigma_b = ∂L/∂b ⊙ ε^b`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const LAYER_NAMES: [&str; 4] = ["encoder_pos", "encoder_vel", "trunk", "head"];

/// `sgn(x)·√|x|`.
pub fn scale_noise(x: f64) -> f64 {
    x.signum() * x.abs().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    /// `f(ε)` for each input.
    pub eps_in: Array1<f64>,
    /// `f(ε)` for each output; doubles as the bias noise.
    pub eps_out: Array1<f64>,
}

impl NoiseSample {
    pub fn zeros(p: usize, q: usize) -> Self {
        Self { eps_in: Array1::zeros(p), eps_out: Array1::zeros(q) }
    }

    /// Induced weight noise `eps_out ⊗ eps_in`, shape `(q, p)`.
    pub fn weight_noise(&self) -> Array2<f64> {
        let col = self.eps_out.view().insert_axis(Axis(1));
        let row = self.eps_in.view().insert_axis(Axis(0));
        &col * &row
    }
}

/// Draws `p` input then `q` output normals and scales them.
pub fn sample_factorised_noise<R: Rng + ?Sized>(p: usize, q: usize, rng: &mut R) -> NoiseSample {
    let mut draw = |n: usize| Array1::from_iter((0..n).map(|_| scale_noise(StandardNormal.sample(&mut *rng))));
    let eps_in = draw(p);
    let eps_out = draw(q);
    NoiseSample { eps_in, eps_out }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// One linear layer. `sigma` is absent for plain layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLinearParams {
    /// Shape `(q, p)`: outputs × inputs.
    pub mu_w: Array2<f64>,
    pub mu_b: Array1<f64>,
    pub sigma: Option<SigmaParams>,
}

/// Gradients share the parameter layout.
pub type LayerGradients = NoisyLinearParams;

impl NoisyLinearParams {
    pub fn zeros(p: usize, q: usize, noisy: bool) -> Self {
        Self {
            mu_w: Array2::zeros((q, p)),
            mu_b: Array1::zeros(q),
            sigma: noisy.then(|| SigmaParams { w: Array2::zeros((q, p)), b: Array1::zeros(q) }),
        }
    }

    /// Uniform `[-1/√p, 1/√p]` means; scales `sigma0/√p` on noisy layers.
    pub fn init<R: Rng + ?Sized>(p: usize, q: usize, noisy: bool, sigma0: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (p as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mu_w = Array2::from_shape_simple_fn((q, p), || dist.sample(rng));
        let mu_b = Array1::from_shape_simple_fn(q, || dist.sample(rng));
        let sigma = noisy.then(|| {
            let s = sigma0 / (p as f64).sqrt();
            SigmaParams { w: Array2::from_elem((q, p), s), b: Array1::from_elem(q, s) }
        });
        Self { mu_w, mu_b, sigma }
    }

    pub fn in_dim(&self) -> usize {
        self.mu_w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.mu_w.nrows()
    }

    pub fn is_noisy(&self) -> bool {
        self.sigma.is_some()
    }

    /// Weight and bias actually applied under `noise` (means only when `None`).
    pub fn effective(&self, noise: Option<&NoiseSample>) -> (Array2<f64>, Array1<f64>) {
        match (&self.sigma, noise) {
            (Some(sigma), Some(n)) => {
                let w = &self.mu_w + &(&sigma.w * &n.weight_noise());
                let b = &self.mu_b + &(&sigma.b * &n.eps_out);
                (w, b)
            }
            _ => (self.mu_w.clone(), self.mu_b.clone()),
        }
    }

    fn check_noise(&self, noise: Option<&NoiseSample>) -> Result<()> {
        if let Some(n) = noise {
            if n.eps_in.len() != self.in_dim() || n.eps_out.len() != self.out_dim() {
                return Err(Error::Contract(format!(
                    "noise shape ({}, {}) does not match layer ({}, {})",
                    n.eps_in.len(),
                    n.eps_out.len(),
                    self.in_dim(),
                    self.out_dim()
                )));
            }
        }
        Ok(())
    }

    /// Layer gradients from the gradients of the effective weight and bias.
    fn gradients(&self, noise: Option<&NoiseSample>, dw: Array2<f64>, db: Array1<f64>) -> LayerGradients {
        let dw = dw.as_standard_layout().into_owned();
        let sigma = self.sigma.as_ref().map(|_| match noise {
            Some(n) => SigmaParams { w: &dw * &n.weight_noise(), b: &db * &n.eps_out },
            None => SigmaParams { w: Array2::zeros(dw.raw_dim()), b: Array1::zeros(db.raw_dim()) },
        });
        LayerGradients { mu_w: dw, mu_b: db, sigma }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![slice(&self.mu_w), self.mu_b.as_slice().expect("contiguous")];
        if let Some(s) = &self.sigma {
            out.push(slice(&s.w));
            out.push(s.b.as_slice().expect("contiguous"));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out =
            vec![self.mu_w.as_slice_mut().expect("contiguous"), self.mu_b.as_slice_mut().expect("contiguous")];
        if let Some(s) = &mut self.sigma {
            out.push(s.w.as_slice_mut().expect("contiguous"));
            out.push(s.b.as_slice_mut().expect("contiguous"));
        }
        out
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// Single-vector noisy layer evaluation.
pub fn noisy_forward(params: &NoisyLinearParams, noise: Option<&NoiseSample>, x: &[f64]) -> Result<Array1<f64>> {
    if x.len() != params.in_dim() {
        return Err(Error::Contract(format!("input of length {} for layer with {} inputs", x.len(), params.in_dim())));
    }
    params.check_noise(noise)?;
    let (w, b) = params.effective(noise);
    let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    Ok(affine(&x, &w, &b).row(0).to_owned())
}

/// `x·wᵀ + b` for a batch of row vectors.
fn affine(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += b;
    y
}

fn relu_in_place(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries whose activation was clamped.
fn relu_backward(grad: &mut Array2<f64>, activation: &Array2<f64>) {
    Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub pos_in: usize,
    pub vel_in: usize,
    pub encoder_width: usize,
    pub trunk_width: usize,
    pub n_actions: usize,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            pos_in: crate::highway_env::POSITION_FEATURES,
            vel_in: crate::highway_env::VELOCITY_FEATURES,
            encoder_width: 64,
            trunk_width: 128,
            n_actions: crate::highway_env::N_ACTIONS,
        }
    }
}

impl NetworkShape {
    pub fn input_dim(&self) -> usize {
        self.pos_in + self.vel_in
    }

    /// `(inputs, outputs)` per layer in [`LAYER_NAMES`] order.
    pub fn layer_dims(&self) -> [(usize, usize); 4] {
        [
            (self.pos_in, self.encoder_width),
            (self.vel_in, self.encoder_width),
            (2 * self.encoder_width, self.trunk_width),
            (self.trunk_width, self.n_actions),
        ]
    }
}

/// Which layers carry learnable noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePlacement {
    /// Plain network (the ε-greedy baseline).
    None,
    /// Trunk and head only.
    ValueLayers,
    /// Every layer, encoders included.
    AllLayers,
}

impl NoisePlacement {
    fn noisy(self, layer: usize) -> bool {
        match self {
            Self::None => false,
            Self::ValueLayers => layer >= 2,
            Self::AllLayers => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetworkParams {
    pub encoder_pos: NoisyLinearParams,
    pub encoder_vel: NoisyLinearParams,
    pub trunk: NoisyLinearParams,
    pub head: NoisyLinearParams,
}

/// Gradient of a scalar loss with respect to every network parameter.
pub type QGradients = QNetworkParams;

/// One noise sample per noisy layer; `None` entries evaluate the means.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkNoise {
    pub layers: [Option<NoiseSample>; 4],
}

impl NetworkNoise {
    /// Noise-free evaluation (means only).
    pub fn none() -> Self {
        Self { layers: [None, None, None, None] }
    }
}

/// Activations kept from a batched forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    inputs: Array2<f64>,
    encoded: Array2<f64>,
    hidden: Array2<f64>,
    pub q: Array2<f64>,
    weights: [(Array2<f64>, Array1<f64>); 4],
}

impl QNetworkParams {
    pub fn init<R: Rng + ?Sized>(
        shape: NetworkShape,
        placement: NoisePlacement,
        sigma0: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(sigma0 >= 0.0 && sigma0.is_finite()) {
            return Err(Error::Config(format!("sigma0 must be finite and non-negative, got {sigma0}")));
        }
        let dims = shape.layer_dims();
        let mut layer = |i: usize| {
            let (p, q) = dims[i];
            NoisyLinearParams::init(p, q, placement.noisy(i), sigma0, rng)
        };
        Ok(Self { encoder_pos: layer(0), encoder_vel: layer(1), trunk: layer(2), head: layer(3) })
    }

    pub fn zeros(shape: NetworkShape, placement: NoisePlacement) -> Self {
        let dims = shape.layer_dims();
        let layer = |i: usize| NoisyLinearParams::zeros(dims[i].0, dims[i].1, placement.noisy(i));
        Self { encoder_pos: layer(0), encoder_vel: layer(1), trunk: layer(2), head: layer(3) }
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            pos_in: self.encoder_pos.in_dim(),
            vel_in: self.encoder_vel.in_dim(),
            encoder_width: self.encoder_pos.out_dim(),
            trunk_width: self.trunk.out_dim(),
            n_actions: self.head.out_dim(),
        }
    }

    pub fn layers(&self) -> [&NoisyLinearParams; 4] {
        [&self.encoder_pos, &self.encoder_vel, &self.trunk, &self.head]
    }

    pub fn layers_mut(&mut self) -> [&mut NoisyLinearParams; 4] {
        [&mut self.encoder_pos, &mut self.encoder_vel, &mut self.trunk, &mut self.head]
    }

    pub fn is_noisy(&self) -> bool {
        self.layers().iter().any(|l| l.is_noisy())
    }

    /// Fresh noise for every noisy layer, drawn in layer order. Consumes
    /// `Σ (p + q)` normals over the noisy layers.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> NetworkNoise {
        let mut noise = NetworkNoise::none();
        for (slot, layer) in noise.layers.iter_mut().zip(self.layers()) {
            if layer.is_noisy() {
                *slot = Some(sample_factorised_noise(layer.in_dim(), layer.out_dim(), rng));
            }
        }
        noise
    }

    /// Canonical flat view of every learnable tensor.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers().into_iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut().into_iter().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Q-values for a batch of flattened observations (`B × input_dim`).
    pub fn forward_batch(&self, noise: &NetworkNoise, inputs: Array2<f64>) -> ForwardPass {
        let shape = self.shape();
        assert_eq!(inputs.ncols(), shape.input_dim(), "input width");
        let weights = [0, 1, 2, 3].map(|i| self.layers()[i].effective(noise.layers[i].as_ref()));

        let pos = inputs.slice(s![.., ..shape.pos_in]);
        let vel = inputs.slice(s![.., shape.pos_in..]);
        let mut enc_pos = affine(&pos, &weights[0].0, &weights[0].1);
        let mut enc_vel = affine(&vel, &weights[1].0, &weights[1].1);
        relu_in_place(&mut enc_pos);
        relu_in_place(&mut enc_vel);
        let encoded = concatenate(Axis(1), &[enc_pos.view(), enc_vel.view()]).expect("same batch");
        let mut hidden = affine(&encoded.view(), &weights[2].0, &weights[2].1);
        relu_in_place(&mut hidden);
        let q = affine(&hidden.view(), &weights[3].0, &weights[3].1);
        ForwardPass { inputs, encoded, hidden, q, weights }
    }

    /// Gradients of `Σ_b Σ_a dq[b, a]·Q[b, a]` at the evaluation point of `pass`.
    pub fn backward_batch(&self, noise: &NetworkNoise, pass: &ForwardPass, dq: &Array2<f64>) -> QGradients {
        let shape = self.shape();
        let w = &pass.weights;

        let head_dw = dq.t().dot(&pass.hidden);
        let head_db = dq.sum_axis(Axis(0));
        let mut d_hidden = dq.dot(&w[3].0);
        relu_backward(&mut d_hidden, &pass.hidden);

        let trunk_dw = d_hidden.t().dot(&pass.encoded);
        let trunk_db = d_hidden.sum_axis(Axis(0));
        let mut d_encoded = d_hidden.dot(&w[2].0);
        relu_backward(&mut d_encoded, &pass.encoded);

        let width = shape.encoder_width;
        let d_pos = d_encoded.slice(s![.., ..width]);
        let d_vel = d_encoded.slice(s![.., width..]);
        let x_pos = pass.inputs.slice(s![.., ..shape.pos_in]);
        let x_vel = pass.inputs.slice(s![.., shape.pos_in..]);
        let pos_dw = d_pos.t().dot(&x_pos);
        let pos_db = d_pos.sum_axis(Axis(0));
        let vel_dw = d_vel.t().dot(&x_vel);
        let vel_db = d_vel.sum_axis(Axis(0));

        let n = &noise.layers;
        QGradients {
            encoder_pos: self.encoder_pos.gradients(n[0].as_ref(), pos_dw, pos_db),
            encoder_vel: self.encoder_vel.gradients(n[1].as_ref(), vel_dw, vel_db),
            trunk: self.trunk.gradients(n[2].as_ref(), trunk_dw, trunk_db),
            head: self.head.gradients(n[3].as_ref(), head_dw, head_db),
        }
    }

    fn check_call(&self, noise: &NetworkNoise, input: &[f64]) -> Result<()> {
        let shape = self.shape();
        if input.len() != shape.input_dim() {
            return Err(Error::Contract(format!(
                "observation of length {} for network input {}",
                input.len(),
                shape.input_dim()
            )));
        }
        if let Some(i) = input.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite network input at feature {i}")));
        }
        for (layer, n) in self.layers().iter().zip(&noise.layers) {
            layer.check_noise(n.as_ref())?;
        }
        Ok(())
    }

    /// Q-values of a single flattened observation.
    pub fn q_forward(&self, noise: &NetworkNoise, input: &[f64]) -> Result<Array1<f64>> {
        self.check_call(noise, input)?;
        let batch = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row");
        Ok(self.forward_batch(noise, batch).q.row(0).to_owned())
    }

    /// Gradients of `dl_dq · Q(input)` for a single observation.
    pub fn q_backward(&self, noise: &NetworkNoise, input: &[f64], dl_dq: &[f64]) -> Result<QGradients> {
        self.check_call(noise, input)?;
        if dl_dq.len() != self.shape().n_actions {
            return Err(Error::Contract(format!("dL/dQ of length {}", dl_dq.len())));
        }
        let batch = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row");
        let pass = self.forward_batch(noise, batch);
        let dq = Array2::from_shape_vec((1, dl_dq.len()), dl_dq.to_vec()).expect("row");
        Ok(self.backward_batch(noise, &pass, &dq))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let layers = self
            .layers()
            .iter()
            .zip(LAYER_NAMES)
            .map(|(l, name)| LayerRecord {
                name: name.to_string(),
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                mu_w: slice(&l.mu_w).to_vec(),
                mu_b: l.mu_b.to_vec(),
                sigma_w: l.sigma.as_ref().map(|s| slice(&s.w).to_vec()),
                sigma_b: l.sigma.as_ref().map(|s| s.b.to_vec()),
            })
            .collect();
        Checkpoint { format_version: CHECKPOINT_FORMAT_VERSION, layers }
    }

    /// Rebuilds a network, checking every layer against `expected` when given.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<NetworkShape>) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::CheckpointFormat(format!("unsupported format version {}", ckpt.format_version)));
        }
        let mut layers = Vec::with_capacity(4);
        for (i, name) in LAYER_NAMES.iter().enumerate() {
            let rec = ckpt
                .layers
                .iter()
                .find(|l| l.name == *name)
                .ok_or_else(|| Error::Checkpoint { layer: name.to_string(), reason: "missing".into() })?;
            if let Some(shape) = expected {
                let (p, q) = shape.layer_dims()[i];
                if (rec.in_dim, rec.out_dim) != (p, q) {
                    return Err(Error::Checkpoint {
                        layer: name.to_string(),
                        reason: format!("shape {}x{} but architecture expects {}x{}", rec.out_dim, rec.in_dim, q, p),
                    });
                }
            }
            layers.push(rec.to_layer()?);
        }
        if let Some(extra) = ckpt.layers.iter().find(|l| !LAYER_NAMES.contains(&l.name.as_str())) {
            return Err(Error::Checkpoint { layer: extra.name.clone(), reason: "unknown layer".into() });
        }
        let mut it = layers.into_iter();
        let mut next = || it.next().expect("four layers");
        let net = Self { encoder_pos: next(), encoder_vel: next(), trunk: next(), head: next() };
        let shape = net.shape();
        if net.encoder_vel.out_dim() != shape.encoder_width || net.trunk.in_dim() != 2 * shape.encoder_width {
            return Err(Error::Checkpoint {
                layer: "trunk".into(),
                reason: "input width does not match encoders".into(),
            });
        }
        if net.head.in_dim() != shape.trunk_width {
            return Err(Error::Checkpoint { layer: "head".into(), reason: "input width does not match trunk".into() });
        }
        Ok(net)
    }
}

/// Serialized network: named layers with row-major `(out, in)` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub mu_w: Vec<f64>,
    pub mu_b: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_w: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_b: Option<Vec<f64>>,
}

impl LayerRecord {
    fn to_layer(&self) -> Result<NoisyLinearParams> {
        let bad = |reason: String| Error::Checkpoint { layer: self.name.clone(), reason };
        let matrix = |data: &Vec<f64>, what: &str| {
            Array2::from_shape_vec((self.out_dim, self.in_dim), data.clone())
                .map_err(|_| bad(format!("{what} has {} entries, expected {}", data.len(), self.out_dim * self.in_dim)))
        };
        let vector = |data: &Vec<f64>, what: &str| {
            if data.len() == self.out_dim {
                Ok(Array1::from(data.clone()))
            } else {
                Err(bad(format!("{what} has {} entries, expected {}", data.len(), self.out_dim)))
            }
        };
        let sigma = match (&self.sigma_w, &self.sigma_b) {
            (Some(w), Some(b)) => Some(SigmaParams { w: matrix(w, "sigma_w")?, b: vector(b, "sigma_b")? }),
            (None, None) => None,
            _ => return Err(bad("sigma_w and sigma_b must both be present or absent".into())),
        };
        let layer = NoisyLinearParams { mu_w: matrix(&self.mu_w, "mu_w")?, mu_b: vector(&self.mu_b, "mu_b")?, sigma };
        if layer.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(bad("non-finite parameter".into()));
        }
        Ok(layer)
    }
}

#[cfg(test)]
mod tests;
