//! NTK-parameterized multilayer perceptrons composed with an input encoding.
//!
//! Layer `l` computes `φ(W⁽ˡ⁾ z / √n⁽ˡ⁾ + β b⁽ˡ⁾)` where `n⁽ˡ⁾` is the layer's
//! input width; the last layer is linear. All weights and biases start from
//! `N(0, 1)`. The ReLU derivative at exactly zero is taken to be 0.
//!
//! Flattened parameters are ordered layer by layer (weights row-major, then
//! biases), followed by the grid scalars of a multigrid encoding.

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoding::{interp_footprint, Encoding, EncodingSpec, InterpFootprint};
use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Identity nonlinearity; only used by analytic kernel checks.
    Linear,
}

impl Activation {
    fn apply(self, h: f64) -> f64 {
        match self {
            Activation::Relu => h.max(0.0),
            Activation::Linear => h,
        }
    }

    fn derivative(self, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub beta: f64,
    pub activation: Activation,
    /// When false the first layer omits its `1/√n` factor, giving the
    /// single-hidden-layer form `W⁽²⁾ φ(W⁽¹⁾x + βb)/√n`.
    #[serde(default = "default_true")]
    pub scale_input_layer: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        MlpConfig {
            input_dim,
            hidden,
            output_dim,
            beta: DEFAULT_BETA,
            activation: Activation::Relu,
            scale_input_layer: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config("MLP needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(1..=3).contains(&self.output_dim) {
            return Err(Error::Config(format!(
                "output dimension must be 1..=3, got {}",
                self.output_dim
            )));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// Multiplier on `W z`; `1/√fan_in` under NTK parameterization.
    pub scale: f64,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn input_scale(&self) -> f64 {
        self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    pub layers: Vec<DenseLayer>,
    pub beta: f64,
    pub activation: Activation,
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the `B × n⁽ˡ⁾` input of layer `l`.
    pub inputs: Vec<Array2<f64>>,
    /// `preacts[l]` is the `B × out⁽ˡ⁾` pre-activation of layer `l`.
    pub preacts: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.preacts.last().expect("network has layers")
    }
}

impl MlpNetwork {
    pub fn init(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let widths = config.widths();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(li, w)| {
                let weight = Array2::from_shape_simple_fn((w[1], w[0]), || {
                    StandardNormal.sample(&mut rng)
                });
                let bias = Array1::from_shape_simple_fn(w[1], || StandardNormal.sample(&mut rng));
                let scale = if li == 0 && !config.scale_input_layer {
                    1.0
                } else {
                    1.0 / (w[0] as f64).sqrt()
                };
                DenseLayer { weight, bias, scale }
            })
            .collect();
        Ok(MlpNetwork {
            layers,
            beta: config.beta,
            activation: config.activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("network has layers").fan_out()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(DenseLayer::fan_out).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    /// Mutable reference to flattened parameter `index`.
    pub fn param_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for l in &mut self.layers {
            let nw = l.weight.len();
            if index < nw {
                return l.weight.as_slice_mut().map(|s| &mut s[index]);
            }
            index -= nw;
            if index < l.bias.len() {
                return l.bias.get_mut(index);
            }
            index -= l.bias.len();
        }
        None
    }

    pub fn forward_cache(&self, input: Array2<f64>) -> Result<ForwardCache> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        let depth = self.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut preacts = Vec::with_capacity(depth);
        let mut z = input;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut h = z.dot(&layer.weight.t());
            let scale = layer.input_scale();
            let beta = self.beta;
            for mut row in h.rows_mut() {
                row.zip_mut_with(&layer.bias, |v, &b| *v = *v * scale + beta * b);
            }
            let next = if li + 1 < depth {
                let act = self.activation;
                Some(h.mapv(|v| act.apply(v)))
            } else {
                None
            };
            inputs.push(z);
            preacts.push(h);
            match next {
                Some(n) => z = n,
                None => break,
            }
        }
        let cache = ForwardCache { inputs, preacts };
        if cache.output().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("network output".into()));
        }
        Ok(cache)
    }

    /// Back-propagates `∂L/∂output` (`B × out`) and returns `∂L/∂h⁽ˡ⁾` for every
    /// layer, in layer order.
    pub fn backward_deltas(&self, cache: &ForwardCache, grad_out: Array2<f64>) -> Vec<Array2<f64>> {
        let depth = self.layers.len();
        let mut deltas = vec![Array2::zeros((0, 0)); depth];
        let mut delta = grad_out;
        for li in (0..depth).rev() {
            if li > 0 {
                let layer = &self.layers[li];
                let mut prev = delta.dot(&layer.weight);
                let scale = layer.input_scale();
                let act = self.activation;
                prev.zip_mut_with(&cache.preacts[li - 1], |g, &h| *g *= scale * act.derivative(h));
                deltas[li] = std::mem::replace(&mut delta, prev);
            } else {
                deltas[0] = std::mem::replace(&mut delta, Array2::zeros((0, 0)));
            }
        }
        deltas
    }

    /// `∂L/∂z⁽⁰⁾`, the gradient with respect to the network input.
    pub fn input_gradient(&self, first_delta: &Array2<f64>) -> Array2<f64> {
        let layer = &self.layers[0];
        first_delta.dot(&layer.weight) * layer.input_scale()
    }

    /// Summed parameter gradient in flattened order.
    pub fn param_gradient(&self, cache: &ForwardCache, deltas: &[Array2<f64>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (li, layer) in self.layers.iter().enumerate() {
            let gw = deltas[li].t().dot(&cache.inputs[li]) * layer.input_scale();
            out.extend(gw.iter().copied());
            let gb = deltas[li].sum_axis(Axis(0)) * self.beta;
            out.extend(gb.iter().copied());
        }
        out
    }

    pub fn apply_update(&mut self, lr: f64, grad: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w -= lr * grad[off];
                off += 1;
            }
            for b in l.bias.iter_mut() {
                *b -= lr * grad[off];
                off += 1;
            }
        }
    }
}

/// `f_θ ∘ γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateModel {
    pub encoding: Encoding,
    pub network: MlpNetwork,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
    /// Binary cross-entropy on `sigmoid(output)`.
    Bce,
}

/// Encoded batch plus what backprop through the grid needs.
pub struct EncodedBatch {
    pub features: Array2<f64>,
    /// Per sample, per grid layer footprint (multigrid only).
    pub footprints: Vec<Vec<InterpFootprint>>,
}

/// Grid seeds are derived from the model seed so that the MLP and grid
/// streams never coincide.
fn grid_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Builds a model with NTK initialization; deterministic in `seed`.
///
/// `mlp.input_dim` of 0 means "take it from the encoding".
pub fn init_model(
    encoding: &EncodingSpec,
    coord_dim: usize,
    mlp: &MlpConfig,
    seed: u64,
) -> Result<CoordinateModel> {
    let encoding = encoding.build(coord_dim, grid_seed(seed))?;
    let mut cfg = mlp.clone();
    if cfg.input_dim == 0 {
        cfg.input_dim = encoding.output_dim();
    }
    if cfg.input_dim != encoding.output_dim() {
        return Err(Error::Dimension(format!(
            "network input {} does not match encoding output {}",
            cfg.input_dim,
            encoding.output_dim()
        )));
    }
    cfg.seed = seed;
    let network = MlpNetwork::init(&cfg)?;
    Ok(CoordinateModel { encoding, network })
}

impl CoordinateModel {
    pub fn new(encoding: Encoding, network: MlpNetwork) -> Result<Self> {
        if network.input_dim() != encoding.output_dim() {
            return Err(Error::Dimension(format!(
                "network input {} does not match encoding output {}",
                network.input_dim(),
                encoding.output_dim()
            )));
        }
        Ok(CoordinateModel { encoding, network })
    }

    pub fn coord_dim(&self) -> usize {
        self.encoding.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.network.output_dim()
    }

    pub fn mlp_param_count(&self) -> usize {
        self.network.param_count()
    }

    pub fn grid_param_count(&self) -> usize {
        self.encoding.grid_param_count()
    }

    pub fn param_count(&self) -> usize {
        self.mlp_param_count() + self.grid_param_count()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.network.flat_params();
        if let Some(g) = self.encoding.grid() {
            p.extend(g.flat_params());
        }
        p
    }

    /// Adds `delta` to flattened parameter `index` (MLP block, then grid).
    pub fn perturb_param(&mut self, index: usize, delta: f64) -> Result<()> {
        let n = self.mlp_param_count();
        if index < n {
            *self.network.param_mut(index).expect("index within MLP block") += delta;
            return Ok(());
        }
        let gi = index - n;
        let limit = self.param_count();
        let grid = self.encoding.grid_mut().ok_or(Error::Index {
            what: "parameter",
            index,
            limit,
        })?;
        let mut rest = gi;
        for layer in grid.layers_mut() {
            let w = layer.weights_mut();
            if rest < w.len() {
                w[rest] += delta;
                return Ok(());
            }
            rest -= w.len();
        }
        Err(Error::Index {
            what: "parameter",
            index,
            limit,
        })
    }

    pub fn encode_batch(&self, points: &[Vec<f64>]) -> Result<EncodedBatch> {
        let de = self.encoding.output_dim();
        let mut features = Array2::zeros((points.len(), de));
        let mut footprints = Vec::new();
        let grid = self.encoding.grid();
        for (i, p) in points.iter().enumerate() {
            let enc = self.encoding.encode(p)?;
            features.row_mut(i).assign(&Array1::from(enc));
            if let Some(g) = grid {
                let fps = g
                    .layers()
                    .iter()
                    .map(|l| interp_footprint(p, l))
                    .collect::<Result<Vec<_>>>()?;
                footprints.push(fps);
            }
        }
        Ok(EncodedBatch {
            features,
            footprints,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward_batch(&[x.to_vec()])?;
        Ok(out.row(0).to_vec())
    }

    /// `B × out` outputs for a batch of raw coordinates.
    pub fn forward_batch(&self, points: &[Vec<f64>]) -> Result<Array2<f64>> {
        let enc = self.encode_batch(points)?;
        let cache = self.network.forward_cache(enc.features)?;
        Ok(cache.preacts.into_iter().last().expect("network has layers"))
    }

    /// Forward in chunks to bound memory on large inputs.
    pub fn predict(&self, points: &[Vec<f64>], chunk: usize) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((points.len(), self.output_dim()));
        let chunk = chunk.max(1);
        for (ci, pts) in points.chunks(chunk).enumerate() {
            let y = self.forward_batch(pts)?;
            out.slice_mut(s![ci * chunk..ci * chunk + pts.len(), ..]).assign(&y);
        }
        Ok(out)
    }

    /// Accumulates `∂L/∂φ` given `∂L/∂γ` for each sample.
    pub(crate) fn grid_gradient_from_input_grad(
        &self,
        enc: &EncodedBatch,
        input_grad: &Array2<f64>,
    ) -> Vec<f64> {
        let Some(grid) = self.encoding.grid() else {
            return Vec::new();
        };
        let k = grid.slots();
        let offsets = grid.layer_offsets();
        let mut g = vec![0.0; grid.param_count()];
        for (i, fps) in enc.footprints.iter().enumerate() {
            let row = input_grad.row(i);
            for (li, fp) in fps.iter().enumerate() {
                for s in 0..k {
                    let up = row[li * k + s];
                    if up == 0.0 {
                        continue;
                    }
                    for (node, w) in fp.iter() {
                        g[offsets[li] + node * k + s] += up * w;
                    }
                }
            }
        }
        g
    }

    /// `∂f_c(x)/∂θ` for output channel `c`: MLP parameters then grid scalars.
    pub fn param_jacobian(&self, x: &[f64], channel: usize) -> Result<Vec<f64>> {
        if channel >= self.output_dim() {
            return Err(Error::Index {
                what: "output channel",
                index: channel,
                limit: self.output_dim(),
            });
        }
        let enc = self.encode_batch(&[x.to_vec()])?;
        let cache = self.network.forward_cache(enc.features.clone())?;
        let mut seed = Array2::zeros((1, self.output_dim()));
        seed[(0, channel)] = 1.0;
        let deltas = self.network.backward_deltas(&cache, seed);
        let mut jac = self.network.param_gradient(&cache, &deltas);
        if self.encoding.grid().is_some() {
            let gin = self.network.input_gradient(&deltas[0]);
            jac.extend(self.grid_gradient_from_input_grad(&enc, &gin));
        }
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("parameter Jacobian".into()));
        }
        Ok(jac)
    }

    /// Loss and its gradient with respect to the outputs.
    pub fn loss_and_grad(
        outputs: &Array2<f64>,
        targets: &Array2<f64>,
        loss: Loss,
    ) -> Result<(f64, Array2<f64>)> {
        if outputs.dim() != targets.dim() {
            return Err(Error::Dimension(format!(
                "outputs {:?} vs targets {:?}",
                outputs.dim(),
                targets.dim()
            )));
        }
        let count = outputs.len() as f64;
        let mut grad = Array2::zeros(outputs.dim());
        let mut total = 0.0;
        ndarray::Zip::from(&mut grad)
            .and(outputs)
            .and(targets)
            .for_each(|g, &z, &y| match loss {
                Loss::Mse => {
                    let e = z - y;
                    total += e * e;
                    *g = 2.0 * e / count;
                }
                Loss::Bce => {
                    total += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
                    *g = (sigmoid(z) - y) / count;
                }
            });
        Ok((total / count, grad))
    }

    /// Batch loss and the full flattened gradient.
    pub fn loss_gradient(
        &self,
        points: &[Vec<f64>],
        targets: &Array2<f64>,
        loss: Loss,
    ) -> Result<(f64, Vec<f64>)> {
        if points.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let enc = self.encode_batch(points)?;
        let cache = self.network.forward_cache(enc.features.clone())?;
        let (value, grad_out) = Self::loss_and_grad(cache.output(), targets, loss)?;
        let deltas = self.network.backward_deltas(&cache, grad_out);
        let mut grad = self.network.param_gradient(&cache, &deltas);
        if self.encoding.grid().is_some() {
            let gin = self.network.input_gradient(&deltas[0]);
            grad.extend(self.grid_gradient_from_input_grad(&enc, &gin));
        }
        Ok((value, grad))
    }

    /// One plain SGD step `θ ← θ − η ∇θ L` over MLP and grid parameters.
    /// Returns the batch loss measured before the update.
    pub fn train_step(
        &mut self,
        points: &[Vec<f64>],
        targets: &Array2<f64>,
        lr: f64,
        loss: Loss,
    ) -> Result<f64> {
        let (value, grad) = self.loss_gradient(points, targets, loss)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let max_param = self.flat_params().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return Err(Error::Numeric(format!(
                "training loss {value} (batch of {}, lr {lr}, max |θ| {max_param:e}); \
                 the learning rate is likely too large",
                points.len()
            )));
        }
        let n = self.mlp_param_count();
        self.network.apply_update(lr, &grad[..n]);
        if let Some(g) = self.encoding.grid_mut() {
            g.add_scaled_flat(-lr, &grad[n..])?;
        }
        Ok(value)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Packs row vectors into a `B × d` array.
pub fn rows_to_array(rows: &[Vec<f64>], cols: usize) -> Result<Array2<f64>> {
    let mut a = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::Dimension(format!("row {i} has {} entries, expected {cols}", r.len())));
        }
        a.row_mut(i).assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    Ok(a)
}
