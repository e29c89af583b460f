//! A small conditional MLP with hand-written backpropagation and AdamW.
//!
//! Input layout per sample: `[x (d) | sinusoidal time embedding | class
//! embedding row]`. Hidden layers use the configured activation; the output
//! layer is linear and has width d.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-z).exp());
                sig * (1.0 + z * (1.0 - sig))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedDims {
    pub time: usize,
    pub class: usize,
}

/// Shape description of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetArch {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    pub embeds: EmbedDims,
    pub activation: Activation,
    pub class_count: usize,
}

impl NetArch {
    pub fn new(
        data_dim: usize,
        hidden: &[usize],
        activation: Activation,
        time_embed_dim: usize,
        class_embed_dim: usize,
        class_count: usize,
    ) -> Result<NetArch> {
        let mut widths = vec![data_dim + time_embed_dim + class_embed_dim];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let arch = NetArch {
            widths,
            embeds: EmbedDims {
                time: time_embed_dim,
                class: class_embed_dim,
            },
            activation,
            class_count,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Default toy denoiser shape: two hidden layers of 256, SiLU.
    pub fn toy_default(data_dim: usize, class_count: usize) -> NetArch {
        NetArch::new(data_dim, &[256, 256], Activation::Silu, 32, 16, class_count)
            .expect("toy architecture is valid")
    }

    pub fn data_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return invalid("network widths must be positive with at least input and output");
        }
        if self.embeds.time == 0 || !self.embeds.time.is_multiple_of(2) {
            return invalid("time embedding width must be even and positive");
        }
        if self.embeds.class == 0 || self.class_count == 0 {
            return invalid("class embedding width and class count must be positive");
        }
        if self.widths[0] != self.data_dim() + self.embeds.time + self.embeds.class {
            return invalid("input width must equal d + time_embed_dim + class_embed_dim");
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a normalised timestep, with `dim/2` frequencies
/// spaced geometrically from 1 to 1e4: `[sin(f·t)…, cos(f·t)…]`.
pub fn time_embedding(t_norm: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |k: usize| {
        if half <= 1 {
            1.0
        } else {
            1e4_f64.powf(k as f64 / (half - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|k| (freq(k) * t_norm).sin()));
    out.extend((0..half).map(|k| (freq(k) * t_norm).cos()));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    arch: NetArch,
    /// Layer weights, shape `(fan_in, fan_out)`.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    class_embed: Array2<f64>,
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub class_embed: Array2<f64>,
}

impl Grads {
    pub fn zeros_like(net: &DenseNet) -> Grads {
        Grads {
            weights: net
                .weights
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect(),
            biases: net
                .biases
                .iter()
                .map(|b| Array1::zeros(b.raw_dim()))
                .collect(),
            class_embed: Array2::zeros(net.class_embed.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
        self.class_embed += &other.class_embed;
    }

    pub fn scale(&mut self, k: f64) {
        self.weights.iter_mut().for_each(|w| *w *= k);
        self.biases.iter_mut().for_each(|b| *b *= k);
        self.class_embed *= k;
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out.push(self.class_embed.as_slice().expect("standard layout"));
        out
    }
}

struct Cache {
    /// Input to every layer; `inputs[0]` is the assembled network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Array2<f64>>,
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases, class embeddings `0.02·N(0,1)`.
    pub fn init(arch: NetArch, seed: u64) -> Result<DenseNet> {
        arch.validate()?;
        let mut r = rng::item_rng(seed, stream::NET_INIT, 0);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in arch.widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| r.random_range(-bound..=bound));
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        let class_embed = Array2::from_shape_fn((arch.class_count, arch.embeds.class), |_| {
            0.02 * rng::standard_normal(&mut r)
        });
        Ok(DenseNet {
            arch,
            weights,
            biases,
            class_embed,
        })
    }

    pub fn zeros(arch: NetArch) -> Result<DenseNet> {
        arch.validate()?;
        let weights = arch
            .widths
            .windows(2)
            .map(|p| Array2::zeros((p[0], p[1])))
            .collect();
        let biases = arch.widths[1..].iter().map(|&w| Array1::zeros(w)).collect();
        let class_embed = Array2::zeros((arch.class_count, arch.embeds.class));
        Ok(DenseNet {
            arch,
            weights,
            biases,
            class_embed,
        })
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim()
    }

    pub fn class_embeddings(&self) -> &Array2<f64> {
        &self.class_embed
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Array2::len).sum::<usize>()
            + self.biases.iter().map(Array1::len).sum::<usize>()
            + self.class_embed.len()
    }

    /// Mutable parameter views in the same order as [`Grads::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.class_embed.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
            && self.class_embed.iter().all(|v| v.is_finite())
    }

    fn check_inputs(&self, x: &ArrayView2<f64>, t_norm: &[f64], class_ids: &[usize]) -> Result<()> {
        let n = x.nrows();
        if x.ncols() != self.data_dim() {
            return invalid(format!(
                "input dimension {} does not match network dimension {}",
                x.ncols(),
                self.data_dim()
            ));
        }
        if t_norm.len() != n || class_ids.len() != n {
            return invalid("one timestep and one class id per input row required");
        }
        if let Some(&c) = class_ids.iter().find(|&&c| c >= self.arch.class_count) {
            return invalid(format!("class id {c} outside 0..{}", self.arch.class_count));
        }
        Ok(())
    }

    fn assemble_input(
        &self,
        x: &ArrayView2<f64>,
        t_norm: &[f64],
        class_ids: &[usize],
    ) -> Array2<f64> {
        let d = self.data_dim();
        let te = self.arch.embeds.time;
        let mut input = Array2::zeros((x.nrows(), self.arch.widths[0]));
        input.slice_mut(s![.., ..d]).assign(x);
        for (i, (&t, &c)) in t_norm.iter().zip(class_ids).enumerate() {
            let emb = time_embedding(t, te);
            let mut row = input.row_mut(i);
            for (k, v) in emb.into_iter().enumerate() {
                row[d + k] = v;
            }
            row.slice_mut(s![d + te..]).assign(&self.class_embed.row(c));
        }
        input
    }

    fn forward_cached(
        &self,
        x: &ArrayView2<f64>,
        t_norm: &[f64],
        class_ids: &[usize],
    ) -> (Array2<f64>, Cache) {
        let act = self.arch.activation;
        let last = self.weights.len() - 1;
        let mut h = self.assemble_input(x, t_norm, class_ids);
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(last);
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.dot(w);
            z += b;
            inputs.push(h);
            if l == last {
                h = z;
            } else {
                h = z.mapv(|v| act.apply(v));
                pre.push(z);
            }
        }
        (h, Cache { inputs, pre })
    }

    /// Batched forward pass; row `i` uses `t_norm[i]` and `class_ids[i]`.
    pub fn forward_batch(
        &self,
        x: ArrayView2<f64>,
        t_norm: &[f64],
        class_ids: &[usize],
    ) -> Result<Array2<f64>> {
        self.check_inputs(&x, t_norm, class_ids)?;
        Ok(self.forward_cached(&x, t_norm, class_ids).0)
    }

    pub fn forward(&self, x: &[f64], t_norm: f64, class_id: usize) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self
            .forward_batch(view, &[t_norm], &[class_id])?
            .into_raw_vec_and_offset()
            .0)
    }

    /// Output together with the gradient of `Σ_rows output·upstream` with
    /// respect to every parameter.
    pub fn forward_backward_batch(
        &self,
        x: ArrayView2<f64>,
        t_norm: &[f64],
        class_ids: &[usize],
        upstream: impl FnOnce(&Array2<f64>) -> Array2<f64>,
    ) -> Result<(Array2<f64>, Grads)> {
        self.check_inputs(&x, t_norm, class_ids)?;
        let (out, cache) = self.forward_cached(&x, t_norm, class_ids);
        let dout = upstream(&out);
        if dout.dim() != out.dim() {
            return invalid("upstream gradient shape does not match output");
        }
        Ok((out, self.backprop(cache, dout, class_ids)))
    }

    pub fn backward_batch(
        &self,
        x: ArrayView2<f64>,
        t_norm: &[f64],
        class_ids: &[usize],
        upstream: ArrayView2<f64>,
    ) -> Result<Grads> {
        Ok(self
            .forward_backward_batch(x, t_norm, class_ids, |_| upstream.to_owned())?
            .1)
    }

    pub fn backward(
        &self,
        x: &[f64],
        t_norm: f64,
        class_id: usize,
        upstream: &[f64],
    ) -> Result<Grads> {
        let xv = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let uv = ArrayView2::from_shape((1, upstream.len()), upstream)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        self.backward_batch(xv, &[t_norm], &[class_id], uv)
    }

    fn backprop(&self, cache: Cache, dout: Array2<f64>, class_ids: &[usize]) -> Grads {
        let act = self.arch.activation;
        let n_layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); n_layers];
        let mut gb = vec![Array1::zeros(0); n_layers];
        let mut dz = dout;
        let mut dinput = Array2::zeros((0, 0));
        for l in (0..n_layers).rev() {
            gw[l] = cache.inputs[l].t().dot(&dz);
            gb[l] = dz.sum_axis(Axis(0));
            let dh = dz.dot(&self.weights[l].t());
            if l == 0 {
                dinput = dh;
                break;
            }
            let z = &cache.pre[l - 1];
            let mut next = dh;
            ndarray::Zip::from(&mut next)
                .and(z)
                .for_each(|g, &zv| *g *= act.derivative(zv));
            dz = next;
        }
        let mut gc = Array2::zeros(self.class_embed.raw_dim());
        let offset = self.data_dim() + self.arch.embeds.time;
        for (i, &c) in class_ids.iter().enumerate() {
            let mut row = gc.row_mut(c);
            row += &dinput.slice(s![i, offset..]);
        }
        Grads {
            weights: gw,
            biases: gb,
            class_embed: gc,
        }
    }

    pub fn to_weights_json(&self) -> WeightsJson {
        WeightsJson {
            layers: self
                .weights
                .iter()
                .zip(&self.biases)
                .map(|(w, b)| LayerJson {
                    w: w.outer_iter().map(|r| r.to_vec()).collect(),
                    b: b.to_vec(),
                })
                .collect(),
            class_embed: self.class_embed.outer_iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn from_parts(arch: NetArch, weights: &WeightsJson) -> Result<DenseNet> {
        let mut net = DenseNet::zeros(arch)?;
        if weights.layers.len() != net.weights.len() {
            return invalid("checkpoint layer count does not match architecture");
        }
        for (l, layer) in weights.layers.iter().enumerate() {
            fill_matrix(&mut net.weights[l], &layer.w)?;
            if layer.b.len() != net.biases[l].len() {
                return invalid(format!("layer {l} bias length mismatch"));
            }
            net.biases[l].assign(&Array1::from(layer.b.clone()));
        }
        fill_matrix(&mut net.class_embed, &weights.class_embed)?;
        if !net.all_finite() {
            return invalid("checkpoint contains non-finite parameters");
        }
        Ok(net)
    }
}

fn fill_matrix(dst: &mut Array2<f64>, rows: &[Vec<f64>]) -> Result<()> {
    if rows.len() != dst.nrows() || rows.iter().any(|r| r.len() != dst.ncols()) {
        return invalid(format!(
            "checkpoint matrix shape does not match expected {:?}",
            dst.dim()
        ));
    }
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            dst[[i, j]] = *v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerJson {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsJson {
    pub layers: Vec<LayerJson>,
    pub class_embed: Vec<Vec<f64>>,
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    /// `β1 = 0.9`, `β2 = 0.999`, weight decay 0.01.
    pub fn new(shapes: &[usize], learning_rate: f64) -> AdamState {
        AdamState {
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn for_net(net: &mut DenseNet, learning_rate: f64) -> AdamState {
        let shapes: Vec<usize> = net.param_slices_mut().iter().map(|s| s.len()).collect();
        AdamState::new(&shapes, learning_rate)
    }
}

pub fn adamw_update(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return invalid("adamw: parameter, gradient and moment group counts differ");
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.len() != g.len() || p.len() != m.len() {
            return invalid("adamw: parameter, gradient and moment shapes differ");
        }
    }
    state.step_count += 1;
    let step = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(step);
    let bc2 = 1.0 - state.beta2.powi(step);
    let (lr, b1, b2, eps, wd) = (
        state.learning_rate,
        state.beta1,
        state.beta2,
        state.eps,
        state.weight_decay,
    );
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * wd * p[i];
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One AdamW step on the network.
pub fn step_net(net: &mut DenseNet, grads: &Grads, state: &mut AdamState) -> Result<()> {
    let g = grads.slices();
    let mut p = net.param_slices_mut();
    adamw_update(&mut p, &g, state)
}
