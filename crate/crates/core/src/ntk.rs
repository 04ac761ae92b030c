//! Empirical neural tangent kernels, their spectra, and kernel-regression
//! training dynamics.
//!
//! Kernels are evaluated at the model's current parameters for one output
//! channel: `K[i][j] = ⟨∂f_c/∂θ(xᵢ), ∂f_c/∂θ(xⱼ)⟩`. Time is measured as
//! `learning_rate × steps`, the gradient-flow convention for the loss
//! `½‖f − Y‖²`.

use std::collections::HashMap;
use std::io::Write;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg::{clamp_eigenvalues, fmt_f64, gram_from_jacobians, sym_eig, DenseMatrix, Spectrum};
use crate::network::CoordinateModel;

pub const DEFAULT_GRAM_CAP: usize = 1024;
/// Relative eigenvalue floor below which the kernel is ridged before inversion.
pub const RIDGE_TRIGGER: f64 = 1e-10;
/// Ridge strength as a fraction of `trace(K)/N`.
pub const RIDGE_SCALE: f64 = 1e-8;
/// Largest condition number accepted after ridging.
pub const MAX_CONDITION: f64 = 1e14;
/// Tolerance factor on `‖K‖_max` for Weyl and PSD checks.
pub const WEYL_EPSILON: f64 = 1e-8;
/// Length spectra are resampled to before averaging.
pub const RESAMPLED_LENGTH: usize = 8000;
/// `lr·λ_max` for descent compared against the continuous flow. A mode with
/// `h = lr·λ` decays as `(1 − h)^k` instead of `e^{−hk}`; the gap peaks near
/// `h/(2e)` of the mode's coefficient, so `h` must stay small.
pub const FLOW_LR_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelComponent {
    /// All parameters, MLP and grid.
    Full,
    /// Grid-scalar block excluded.
    MlpOnly,
}

impl KernelComponent {
    pub fn label(self) -> &'static str {
        match self {
            KernelComponent::Full => "full",
            KernelComponent::MlpOnly => "mlp_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NtkOptions {
    pub channel: usize,
    pub include_grid: bool,
    pub cap: usize,
}

impl Default for NtkOptions {
    fn default() -> Self {
        NtkOptions {
            channel: 0,
            include_grid: true,
            cap: DEFAULT_GRAM_CAP,
        }
    }
}

impl NtkOptions {
    pub fn component(&self) -> KernelComponent {
        if self.include_grid {
            KernelComponent::Full
        } else {
            KernelComponent::MlpOnly
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NtkGram {
    pub matrix: DenseMatrix,
    pub sample_ids: Vec<usize>,
    pub component: KernelComponent,
}

impl NtkGram {
    pub fn new(matrix: DenseMatrix, component: KernelComponent) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Dimension(format!(
                "kernel must be square, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        let n = matrix.rows();
        Ok(NtkGram {
            matrix,
            sample_ids: (0..n).collect(),
            component,
        })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spectrum(&self) -> Result<Spectrum> {
        sym_eig(&self.matrix)
    }
}

fn check_points(model: &CoordinateModel, points: &[Vec<f64>], opts: &NtkOptions) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Dimension("kernel needs at least one sample".into()));
    }
    if points.len() > opts.cap {
        return Err(Error::GramCap {
            requested: points.len(),
            cap: opts.cap,
        });
    }
    if opts.channel >= model.output_dim() {
        return Err(Error::Index {
            what: "output channel",
            index: opts.channel,
            limit: model.output_dim(),
        });
    }
    Ok(())
}

/// Per-sample backprop quantities for one output channel.
struct ChannelBackprop {
    /// Layer inputs `z⁽ˡ⁾`, `N × n⁽ˡ⁾`.
    inputs: Vec<Array2<f64>>,
    /// `∂f_c/∂h⁽ˡ⁾`, `N × out⁽ˡ⁾`.
    deltas: Vec<Array2<f64>>,
    /// `∂f_c/∂γ`, `N × d_e`.
    input_grad: Array2<f64>,
}

fn channel_backprop(model: &CoordinateModel, points: &[Vec<f64>], channel: usize) -> Result<(ChannelBackprop, crate::network::EncodedBatch)> {
    let enc = model.encode_batch(points)?;
    let cache = model.network.forward_cache(enc.features.clone())?;
    let mut seed = Array2::zeros((points.len(), model.output_dim()));
    seed.column_mut(channel).fill(1.0);
    let deltas = model.network.backward_deltas(&cache, seed);
    let input_grad = model.network.input_gradient(&deltas[0]);
    if deltas.iter().any(|d| d.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("kernel backprop".into()));
    }
    Ok((
        ChannelBackprop {
            inputs: cache.inputs,
            deltas,
            input_grad,
        },
        enc,
    ))
}

fn symmetric_from_array(a: Array2<f64>) -> DenseMatrix {
    let n = a.nrows();
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Kernel contribution of the MLP weights and biases:
/// `Σₗ (Δₗ Δₗᵀ) ∘ (sₗ² Zₗ Zₗᵀ + β²)` with `sₗ` the layer's input scale.
fn mlp_term(model: &CoordinateModel, bp: &ChannelBackprop) -> Array2<f64> {
    let n = bp.input_grad.nrows();
    let beta2 = model.network.beta * model.network.beta;
    let mut k = Array2::zeros((n, n));
    for ((z, d), layer) in bp.inputs.iter().zip(&bp.deltas).zip(&model.network.layers) {
        let scale2 = layer.scale * layer.scale;
        let zz = z.dot(&z.t());
        let dd = d.dot(&d.t());
        ndarray::Zip::from(&mut k)
            .and(&zz)
            .and(&dd)
            .for_each(|kij, &a, &b| *kij += b * (a * scale2 + beta2));
    }
    k
}

/// Kernel contribution of the grid scalars:
/// `Σ_layer (G G ᵀ) ∘ Overlap`, with `Overlap[i][j] = Σ_node wᵢ(node) wⱼ(node)`.
fn grid_term(model: &CoordinateModel, bp: &ChannelBackprop, enc: &crate::network::EncodedBatch) -> Option<Array2<f64>> {
    let grid = model.encoding.grid()?;
    let n = bp.input_grad.nrows();
    let k = grid.slots();
    let mut out = Array2::zeros((n, n));
    for li in 0..grid.layers().len() {
        let g = bp.input_grad.slice(ndarray::s![.., li * k..(li + 1) * k]);
        let gg = g.dot(&g.t());
        let mut by_node: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
        for (i, fps) in enc.footprints.iter().enumerate() {
            for (node, w) in fps[li].iter() {
                if w != 0.0 {
                    by_node.entry(node).or_default().push((i, w));
                }
            }
        }
        let mut overlap = Array2::<f64>::zeros((n, n));
        let mut nodes: Vec<_> = by_node.into_iter().collect();
        nodes.sort_unstable_by_key(|(node, _)| *node);
        for (_, members) in nodes {
            for &(i, wi) in &members {
                for &(j, wj) in &members {
                    overlap[(i, j)] += wi * wj;
                }
            }
        }
        out += &(gg * overlap);
    }
    Some(out)
}

/// Empirical NTK on `points`.
///
/// With `include_grid` false the grid-scalar block of every Jacobian is
/// zeroed; for encodings without a grid the flag has no effect.
pub fn empirical_ntk(model: &CoordinateModel, points: &[Vec<f64>], opts: &NtkOptions) -> Result<NtkGram> {
    check_points(model, points, opts)?;
    let (bp, enc) = channel_backprop(model, points, opts.channel)?;
    let mut k = mlp_term(model, &bp);
    if opts.include_grid {
        if let Some(g) = grid_term(model, &bp, &enc) {
            k += &g;
        }
    }
    let matrix = symmetric_from_array(k);
    if !matrix.is_finite() {
        return Err(Error::Numeric("kernel entries".into()));
    }
    Ok(NtkGram {
        matrix,
        sample_ids: (0..points.len()).collect(),
        component: opts.component(),
    })
}

/// Gram matrix of the grid-scalar Jacobian block alone; zero without a grid.
pub fn grid_kernel(model: &CoordinateModel, points: &[Vec<f64>], opts: &NtkOptions) -> Result<DenseMatrix> {
    check_points(model, points, opts)?;
    let (bp, enc) = channel_backprop(model, points, opts.channel)?;
    Ok(match grid_term(model, &bp, &enc) {
        Some(g) => symmetric_from_array(g),
        None => DenseMatrix::zeros(points.len(), points.len()),
    })
}

/// `N × P` stacked parameter Jacobians; the grid block is zeroed when
/// `include_grid` is false.
pub fn stacked_jacobian(model: &CoordinateModel, points: &[Vec<f64>], opts: &NtkOptions) -> Result<DenseMatrix> {
    check_points(model, points, opts)?;
    let p = model.param_count();
    let mlp = model.mlp_param_count();
    let mut data = Vec::with_capacity(points.len() * p);
    for x in points {
        let mut row = model.param_jacobian(x, opts.channel)?;
        if !opts.include_grid {
            row[mlp..].fill(0.0);
        }
        data.extend(row);
    }
    DenseMatrix::from_vec(points.len(), p, data)
}

/// Reference assembly: explicit Jacobians followed by pairwise inner products.
pub fn empirical_ntk_reference(model: &CoordinateModel, points: &[Vec<f64>], opts: &NtkOptions) -> Result<NtkGram> {
    let j = stacked_jacobian(model, points, opts)?;
    Ok(NtkGram {
        matrix: gram_from_jacobians(&j)?,
        sample_ids: (0..points.len()).collect(),
        component: opts.component(),
    })
}

/// Mean kernel over independently initialized models.
pub fn seed_averaged_ntk<F>(seeds: &[u64], points: &[Vec<f64>], opts: &NtkOptions, mut make: F) -> Result<NtkGram>
where
    F: FnMut(u64) -> Result<CoordinateModel>,
{
    if seeds.is_empty() {
        return Err(Error::Config("seed averaging needs at least one seed".into()));
    }
    let mut acc: Option<DenseMatrix> = None;
    for &s in seeds {
        let k = empirical_ntk(&make(s)?, points, opts)?.matrix;
        acc = Some(match acc {
            None => k,
            Some(a) => a.add(&k)?,
        });
    }
    let matrix = acc.expect("non-empty seeds").scale(1.0 / seeds.len() as f64);
    Ok(NtkGram {
        matrix,
        sample_ids: (0..points.len()).collect(),
        component: opts.component(),
    })
}

/// At most `cap` evenly strided indices into `0..n`.
pub fn strided_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    if cap == 0 {
        return Vec::new();
    }
    let stride = n.div_ceil(cap);
    (0..n).skip(stride / 2).step_by(stride).collect()
}

/// At most `cap` row-major pixel indices on a regular lattice covering a
/// `width × height` image, centred in each stride cell.
pub fn stratified_indices_2d(width: usize, height: usize, cap: usize) -> Vec<usize> {
    let total = width * height;
    if total <= cap {
        return (0..total).collect();
    }
    if cap == 0 {
        return Vec::new();
    }
    let mut stride = ((total as f64 / cap as f64).sqrt().ceil() as usize).max(1);
    while width.div_ceil(stride) * height.div_ceil(stride) > cap {
        stride += 1;
    }
    let off = stride / 2;
    let rows: Vec<usize> = (0..height).skip(off.min(height - 1)).step_by(stride).collect();
    let cols: Vec<usize> = (0..width).skip(off.min(width - 1)).step_by(stride).collect();
    rows.iter()
        .flat_map(|&r| cols.iter().map(move |&c| r * width + c))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotTag {
    Start,
    Mid,
    End,
}

impl SnapshotTag {
    pub fn label(self) -> &'static str {
        match self {
            SnapshotTag::Start => "start",
            SnapshotTag::Mid => "mid",
            SnapshotTag::End => "end",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSnapshot {
    pub tag: SnapshotTag,
    pub epoch: usize,
    pub component: KernelComponent,
    /// Descending, unclamped.
    pub eigenvalues: Vec<f64>,
}

impl SpectrumSnapshot {
    pub fn clamped(&self) -> Vec<f64> {
        clamp_eigenvalues(&self.eigenvalues)
    }

    pub fn min_clamped(&self) -> f64 {
        self.clamped().last().copied().unwrap_or(f64::NAN)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        crate::linalg::write_spectrum_csv(w, &self.eigenvalues)
    }
}

pub fn spectrum_snapshot(
    model: &CoordinateModel,
    points: &[Vec<f64>],
    opts: &NtkOptions,
    tag: SnapshotTag,
    epoch: usize,
) -> Result<SpectrumSnapshot> {
    let k = empirical_ntk(model, points, opts)?;
    let spec = k.spectrum()?;
    Ok(SpectrumSnapshot {
        tag,
        epoch,
        component: k.component,
        eigenvalues: spec.eigenvalues,
    })
}

/// Sum over ranks of `|log₁₀ a − log₁₀ b|` on clamped spectra.
pub fn log_spectrum_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("spectra of length {} and {}", a.len(), b.len())));
    }
    Ok(clamp_eigenvalues(a)
        .iter()
        .zip(clamp_eigenvalues(b))
        .map(|(x, y)| (x.log10() - y.log10()).abs())
        .sum())
}

/// Resamples a descending spectrum to `len` values by linear interpolation of
/// `log₁₀ λ` against normalized rank.
pub fn resample_spectrum(eigenvalues: &[f64], len: usize) -> Result<Vec<f64>> {
    if eigenvalues.is_empty() || len == 0 {
        return Err(Error::Dimension("cannot resample an empty spectrum".into()));
    }
    let logs: Vec<f64> = clamp_eigenvalues(eigenvalues).iter().map(|v| v.log10()).collect();
    let n = logs.len();
    if n == 1 || len == 1 {
        return Ok(vec![10f64.powf(logs[0]); len]);
    }
    Ok((0..len)
        .map(|j| {
            let pos = j as f64 / (len - 1) as f64 * (n - 1) as f64;
            let i = (pos.floor() as usize).min(n - 2);
            let f = pos - i as f64;
            10f64.powf(logs[i] * (1.0 - f) + logs[i + 1] * f)
        })
        .collect())
}

/// Rank-wise arithmetic mean of spectra resampled to a common length.
pub fn mean_spectrum(spectra: &[Vec<f64>], len: usize) -> Result<Vec<f64>> {
    if spectra.is_empty() {
        return Err(Error::Dimension("no spectra to average".into()));
    }
    let mut acc = vec![0.0; len];
    for s in spectra {
        for (a, v) in acc.iter_mut().zip(resample_spectrum(s, len)?) {
            *a += v;
        }
    }
    let m = spectra.len() as f64;
    Ok(acc.into_iter().map(|v| v / m).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeylRow {
    pub index: usize,
    pub lambda_base: f64,
    pub lambda_composed: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeylReport {
    pub rows: Vec<WeylRow>,
    /// `λ_min(K_composed − K_base)`.
    pub lambda_min_plus: f64,
    pub epsilon: f64,
    pub min_margin: f64,
    /// Whether `K_composed − K_base` is PSD within `epsilon`.
    pub plus_is_psd: bool,
    pub pass: bool,
}

impl WeylReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "index,lambda_base,lambda_composed,margin")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{}",
                r.index,
                fmt_f64(r.lambda_base),
                fmt_f64(r.lambda_composed),
                fmt_f64(r.margin)
            )?;
        }
        Ok(())
    }
}

/// Checks `λᵢ(K_composed) ≥ λᵢ(K_base) + λ_min(K⁺) − ε` and
/// `λᵢ(K_composed) ≥ λᵢ(K_base) − ε` for `K⁺ = K_composed − K_base`,
/// with `ε = 1e-8·‖K_composed‖_max`. A non-PSD difference is reported as a
/// failed precondition rather than an error.
pub fn weyl_check(base: &DenseMatrix, composed: &DenseMatrix) -> Result<WeylReport> {
    if base.rows() != composed.rows() || base.cols() != composed.cols() {
        return Err(Error::Dimension(format!(
            "kernels of order {} and {}",
            base.rows(),
            composed.rows()
        )));
    }
    let epsilon = WEYL_EPSILON * composed.max_abs();
    let plus = composed.sub(base)?;
    let lambda_min_plus = sym_eig(&plus)?.min_eigenvalue();
    let lb = sym_eig(base)?.eigenvalues;
    let lc = sym_eig(composed)?.eigenvalues;
    let rows: Vec<WeylRow> = lb
        .iter()
        .zip(&lc)
        .enumerate()
        .map(|(index, (&b, &c))| WeylRow {
            index,
            lambda_base: b,
            lambda_composed: c,
            margin: c - b,
        })
        .collect();
    let min_margin = rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    let plus_is_psd = lambda_min_plus >= -epsilon;
    let bound = lambda_min_plus.min(0.0);
    let pass = plus_is_psd && rows.iter().all(|r| r.margin >= bound - epsilon && r.margin >= -epsilon);
    Ok(WeylReport {
        rows,
        lambda_min_plus,
        epsilon,
        min_margin,
        plus_is_psd,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsPrediction {
    pub times: Vec<f64>,
    /// `predictions[t][m]`: output for test sample `m` at `times[t]`.
    pub predictions: Vec<Vec<f64>>,
    /// `residuals[t][i] = e^{−λᵢt}|(QY)ᵢ|`.
    pub residuals: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Ridge added to the training kernel, if any.
    pub ridge: Option<f64>,
}

impl DynamicsPrediction {
    /// Writes `t,sample_id,predicted,actual` rows; `actual[t][m]` must align
    /// with `predictions`.
    pub fn write_csv<W: Write>(&self, mut w: W, sample_ids: &[usize], actual: &[Vec<f64>]) -> std::io::Result<()> {
        if let Some(r) = self.ridge {
            writeln!(w, "# ridge={}", fmt_f64(r))?;
        }
        writeln!(w, "t,sample_id,predicted,actual")?;
        for (ti, t) in self.times.iter().enumerate() {
            for (m, p) in self.predictions[ti].iter().enumerate() {
                let a = actual.get(ti).and_then(|row| row.get(m)).copied().unwrap_or(f64::NAN);
                writeln!(w, "{},{},{},{}", fmt_f64(*t), sample_ids[m], fmt_f64(*p), fmt_f64(a))?;
            }
        }
        Ok(())
    }
}

/// Spectrum of the training kernel, ridged by `1e-8·trace/N` when
/// `λ_min < 1e-10·λ_max`.
fn conditioned_spectrum(k: &DenseMatrix) -> Result<(Spectrum, Option<f64>)> {
    let mut spec = sym_eig(k)?;
    let (lmin, lmax) = (spec.min_eigenvalue(), spec.max_eigenvalue());
    if !(lmax > 0.0) {
        return Err(Error::Conditioning(format!("largest eigenvalue is {lmax:e}")));
    }
    let mut ridge = None;
    if lmin < RIDGE_TRIGGER * lmax {
        let r = RIDGE_SCALE * k.trace() / k.rows() as f64;
        for v in &mut spec.eigenvalues {
            *v += r;
        }
        ridge = Some(r);
    }
    let lmin = spec.min_eigenvalue();
    if !(lmin > 0.0) || spec.max_eigenvalue() / lmin > MAX_CONDITION {
        return Err(Error::Conditioning(format!(
            "eigenvalue range [{lmin:e}, {:e}] after ridge",
            spec.max_eigenvalue()
        )));
    }
    Ok((spec, ridge))
}

/// `(1 − e^{−λt})/λ`, continuous at `λ = 0`.
fn flow_weight(lambda: f64, t: f64) -> f64 {
    if lambda == 0.0 {
        t
    } else {
        -(-lambda * t).exp_m1() / lambda
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if let Some(t) = times.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
        return Err(Error::Config(format!("times must be finite and non-negative, got {t}")));
    }
    Ok(())
}

/// Kernel-regression prediction `K_test K⁻¹ (I − e^{−Kt}) Y`.
///
/// Without `k_test` the training inputs are predicted, which reduces to
/// `Qᵀ(I − e^{−Λt})QY` and needs no inversion.
pub fn predict_dynamics(
    k_train: &NtkGram,
    k_test: Option<&DenseMatrix>,
    y: &[f64],
    times: &[f64],
) -> Result<DynamicsPrediction> {
    let n = k_train.len();
    if y.len() != n {
        return Err(Error::Dimension(format!("{} targets for a kernel of order {n}", y.len())));
    }
    if let Some(kt) = k_test {
        if kt.cols() != n {
            return Err(Error::Dimension(format!("test kernel has {} columns, expected {n}", kt.cols())));
        }
    }
    check_times(times)?;
    let (spec, ridge) = match k_test {
        Some(_) => conditioned_spectrum(&k_train.matrix)?,
        None => (k_train.spectrum()?, None),
    };
    let qy = spec.project(y)?;
    let mut predictions = Vec::with_capacity(times.len());
    let mut residuals = Vec::with_capacity(times.len());
    for &t in times {
        let resid: Vec<f64> = qy
            .iter()
            .zip(&spec.eigenvalues)
            .map(|(c, &l)| (-l.max(0.0) * t).exp() * c.abs())
            .collect();
        let pred = match k_test {
            None => {
                let coeffs: Vec<f64> = qy
                    .iter()
                    .zip(&spec.eigenvalues)
                    .map(|(c, &l)| -(-l * t).exp_m1() * c)
                    .collect();
                spec.unproject(&coeffs)?
            }
            Some(kt) => {
                let coeffs: Vec<f64> = qy
                    .iter()
                    .zip(&spec.eigenvalues)
                    .map(|(c, &l)| flow_weight(l, t) * c)
                    .collect();
                kt.matvec(&spec.unproject(&coeffs)?)?
            }
        };
        predictions.push(pred);
        residuals.push(resid);
    }
    Ok(DynamicsPrediction {
        times: times.to_vec(),
        predictions,
        residuals,
        eigenvalues: spec.eigenvalues,
        ridge,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub times: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// `values[t][i] = e^{−λᵢt}|(QY)ᵢ|`.
    pub values: Vec<Vec<f64>>,
}

pub fn residual_decay(k: &NtkGram, y: &[f64], times: &[f64]) -> Result<ResidualTrace> {
    let p = predict_dynamics(k, None, y, times)?;
    Ok(ResidualTrace {
        times: p.times,
        eigenvalues: p.eigenvalues,
        values: p.residuals,
    })
}

/// Full-batch gradient descent on the linearized model
/// `f(θ) = J(θ − θ₀)` with loss `½‖f − Y‖²`, starting from `f = 0`.
///
/// Returns outputs after each step count in `record` (ascending).
pub fn linearized_descent(jacobian: &DenseMatrix, y: &[f64], lr: f64, record: &[usize]) -> Result<Vec<Vec<f64>>> {
    let n = jacobian.rows();
    if y.len() != n {
        return Err(Error::Dimension(format!("{} targets for {n} Jacobian rows", y.len())));
    }
    if record.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("record steps must be ascending".into()));
    }
    let p = jacobian.cols();
    let mut delta = vec![0.0; p];
    let mut f = vec![0.0; n];
    let mut out = Vec::with_capacity(record.len());
    let mut step = 0;
    for &target in record {
        while step < target {
            // δ ← δ − lr·Jᵀ(f − y), then f ← Jδ; row-wise to stay contiguous.
            for i in 0..n {
                let r = lr * (f[i] - y[i]);
                for (d, &jv) in delta.iter_mut().zip(jacobian.row(i)) {
                    *d -= r * jv;
                }
            }
            for (fi, i) in f.iter_mut().zip(0..n) {
                *fi = crate::linalg::dot(jacobian.row(i), &delta);
            }
            step += 1;
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("linearized descent".into()));
        }
        out.push(f.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{EncodingSpec, ResolutionSpec};
    use crate::network::{init_model, Activation, MlpConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
    }

    fn mpe_model(seed: u64) -> CoordinateModel {
        let spec = EncodingSpec::Multigrid {
            slots: 2,
            levels: 2,
            resolution: ResolutionSpec::Range([4, 9]),
        };
        init_model(&spec, 2, &MlpConfig::new(0, vec![16, 12], 3), seed).unwrap()
    }

    fn random_psd(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..rank).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        gram_from_jacobians(&DenseMatrix::from_rows(&rows)).unwrap()
    }

    fn assert_close(a: &DenseMatrix, b: &DenseMatrix, tol: f64) {
        let scale = a.max_abs().max(1.0);
        let d = a.sub(b).unwrap().max_abs();
        assert!(d <= tol * scale, "difference {d:e}");
    }

    #[test]
    fn structured_and_reference_assemblies_agree() {
        let m = mpe_model(3);
        let pts = random_points(20, 2, 5);
        for include_grid in [true, false] {
            for channel in 0..3 {
                let opts = NtkOptions {
                    channel,
                    include_grid,
                    ..Default::default()
                };
                let a = empirical_ntk(&m, &pts, &opts).unwrap();
                let b = empirical_ntk_reference(&m, &pts, &opts).unwrap();
                assert_close(&a.matrix, &b.matrix, 1e-10);
            }
        }
        let ffe = init_model(&EncodingSpec::Fourier { levels: 3 }, 2, &MlpConfig::new(0, vec![10], 1), 1).unwrap();
        let opts = NtkOptions::default();
        assert_close(
            &empirical_ntk(&ffe, &pts, &opts).unwrap().matrix,
            &empirical_ntk_reference(&ffe, &pts, &opts).unwrap().matrix,
            1e-10,
        );
    }

    #[test]
    fn kernel_decomposes_into_mlp_and_grid_terms() {
        let m = mpe_model(8);
        let pts = random_points(24, 2, 9);
        let full = empirical_ntk(&m, &pts, &NtkOptions::default()).unwrap();
        let mlp = empirical_ntk(&m, &pts, &NtkOptions { include_grid: false, ..Default::default() }).unwrap();
        let grid = grid_kernel(&m, &pts, &NtkOptions::default()).unwrap();
        assert_close(&full.matrix, &mlp.matrix.add(&grid).unwrap(), 1e-10);
        let lmin = sym_eig(&grid).unwrap().min_eigenvalue();
        assert!(lmin >= -1e-10 * grid.max_abs());
        assert_eq!(full.component, KernelComponent::Full);
        assert_eq!(mlp.component, KernelComponent::MlpOnly);
    }

    #[test]
    fn single_sample_and_duplicates() {
        let m = mpe_model(1);
        let x = vec![0.3, 0.4];
        let k = empirical_ntk(&m, &[x.clone()], &NtkOptions::default()).unwrap();
        let j = m.param_jacobian(&x, 0).unwrap();
        let norm2: f64 = j.iter().map(|v| v * v).sum();
        assert!((k.matrix[(0, 0)] - norm2).abs() <= 1e-10 * norm2);
        let k = empirical_ntk(&m, &[x.clone(), vec![0.9, 0.1], x], &NtkOptions::default()).unwrap();
        let (a, b, c) = (k.matrix[(0, 0)], k.matrix[(2, 2)], k.matrix[(0, 2)]);
        assert!((a - b).abs() <= 1e-12 * a && (a - c).abs() <= 1e-12 * a);
    }

    #[test]
    fn include_grid_is_inert_without_grid() {
        let m = init_model(&EncodingSpec::Fourier { levels: 2 }, 2, &MlpConfig::new(0, vec![8], 1), 0).unwrap();
        let pts = random_points(6, 2, 0);
        let a = empirical_ntk(&m, &pts, &NtkOptions::default()).unwrap();
        let b = empirical_ntk(&m, &pts, &NtkOptions { include_grid: false, ..Default::default() }).unwrap();
        assert_eq!(a.matrix, b.matrix);
    }

    #[test]
    fn cap_and_channel_errors() {
        let m = mpe_model(0);
        let pts = random_points(5, 2, 0);
        let err = empirical_ntk(&m, &pts, &NtkOptions { cap: 4, ..Default::default() });
        assert!(matches!(err, Err(Error::GramCap { requested: 5, cap: 4 })));
        assert!(empirical_ntk(&m, &pts, &NtkOptions { channel: 3, ..Default::default() }).is_err());
        assert!(empirical_ntk(&m, &[], &NtkOptions::default()).is_err());
    }

    #[test]
    fn wide_linear_layer_matches_limit() {
        let pts = random_points(6, 2, 11);
        let mut cfg = MlpConfig::new(0, vec![4096], 1);
        cfg.activation = Activation::Linear;
        cfg.beta = 0.0;
        cfg.scale_input_layer = false;
        let seeds: Vec<u64> = (0..10).collect();
        let k = seed_averaged_ntk(&seeds, &pts, &NtkOptions::default(), |s| {
            init_model(&EncodingSpec::Identity, 2, &cfg, s)
        })
        .unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let want = 2.0 * (pts[i][0] * pts[j][0] + pts[i][1] * pts[j][1]);
                let rel = (k.matrix[(i, j)] - want).abs() / want;
                assert!(rel < 0.1, "({i},{j}) {} vs {want}", k.matrix[(i, j)]);
            }
        }
    }

    #[test]
    fn weyl_examples() {
        let base = DenseMatrix::identity(2);
        let composed = DenseMatrix::from_diagonal(&[3.0, 1.0]);
        let r = weyl_check(&base, &composed).unwrap();
        assert!(r.pass && r.plus_is_psd);
        assert_eq!(r.rows.iter().map(|r| r.margin).collect::<Vec<_>>(), vec![2.0, 0.0]);
        assert_eq!(r.lambda_min_plus, 0.0);

        let r = weyl_check(&composed, &composed).unwrap();
        assert!(r.pass && r.rows.iter().all(|r| r.margin == 0.0));

        let r = weyl_check(&composed, &base).unwrap();
        assert!(!r.plus_is_psd && !r.pass);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("index,lambda_base,lambda_composed,margin\n0,"));
    }

    #[test]
    fn weyl_holds_for_random_psd_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.random_range(1..=64usize);
            let base = random_psd(n, rng.random_range(1..=n), &mut rng);
            let plus = random_psd(n, rng.random_range(1..=n), &mut rng);
            let r = weyl_check(&base, &base.add(&plus).unwrap()).unwrap();
            assert!(r.pass, "order {n}: min margin {:e}", r.min_margin);
        }
    }

    #[test]
    fn dynamics_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = NtkGram::new(random_psd(6, 6, &mut rng).add(&DenseMatrix::identity(6).scale(0.1)).unwrap(), KernelComponent::Full).unwrap();
        let y: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.5).collect();
        let lmin = k.spectrum().unwrap().min_eigenvalue();
        let t_long = 1e6 / lmin;
        for test in [None, Some(&k.matrix)] {
            let p = predict_dynamics(&k, test, &y, &[0.0, t_long]).unwrap();
            assert!(p.predictions[0].iter().all(|v| v.abs() < 1e-15));
            for (a, b) in p.predictions[1].iter().zip(&y) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ridge_is_applied_to_singular_kernels() {
        let k = NtkGram::new(DenseMatrix::from_diagonal(&[2.0, 0.0]), KernelComponent::Full).unwrap();
        let p = predict_dynamics(&k, Some(&k.matrix), &[1.0, 1.0], &[1.0]).unwrap();
        assert_eq!(p.ridge, Some(1e-8));
        assert!(predict_dynamics(&k, Some(&k.matrix), &[1.0, 1.0], &[-1.0]).is_err());
    }

    #[test]
    fn residuals_on_diagonal_kernel() {
        let lambdas = [3.0, 1.0, 0.25];
        let k = NtkGram::new(DenseMatrix::from_diagonal(&lambdas), KernelComponent::Full).unwrap();
        let y = [0.5, -2.0, 1.5];
        let times = [0.0, 0.7, 4.0];
        let r = residual_decay(&k, &y, &times).unwrap();
        for (ti, t) in times.iter().enumerate() {
            for i in 0..3 {
                let want = (-lambdas[i] * t).exp() * y[i].abs();
                assert!((r.values[ti][i] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn residuals_match_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = NtkGram::new(random_psd(8, 8, &mut rng), KernelComponent::Full).unwrap();
        let y: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
        let spec = k.spectrum().unwrap();
        for t in [0.0, 0.3, 2.0, 10.0] {
            let r = residual_decay(&k, &y, &[t]).unwrap();
            let f = predict_dynamics(&k, None, &y, &[t]).unwrap().predictions.remove(0);
            let diff: Vec<f64> = f.iter().zip(&y).map(|(a, b)| a - b).collect();
            let direct = spec.project(&diff).unwrap();
            for (a, b) in r.values[0].iter().zip(&direct) {
                assert!((a - b.abs()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn descent_tracks_gradient_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..40).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let j = DenseMatrix::from_rows(&rows);
        let k = NtkGram::new(gram_from_jacobians(&j).unwrap(), KernelComponent::Full).unwrap();
        let y: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let lr = 1e-3 * 2.0 / k.spectrum().unwrap().max_eigenvalue();
        let steps = [0usize, 100, 1000, 10000];
        let actual = linearized_descent(&j, &y, lr, &steps).unwrap();
        let times: Vec<f64> = steps.iter().map(|&s| s as f64 * lr).collect();
        let pred = predict_dynamics(&k, None, &y, &times).unwrap();
        for (a, p) in actual.iter().zip(&pred.predictions) {
            for (u, v) in a.iter().zip(p) {
                assert!((u - v).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn strided_subsampling() {
        assert_eq!(strided_indices(5, 10), vec![0, 1, 2, 3, 4]);
        let idx = strided_indices(100, 10);
        assert_eq!(idx.len(), 10);
        let idx = stratified_indices_2d(64, 64, 256);
        assert_eq!(idx.len(), 256);
        assert_eq!(idx[0], 2 * 64 + 2);
        let idx = stratified_indices_2d(10, 7, 20);
        assert!(idx.len() <= 20 && !idx.is_empty());
        let mut sorted = idx.clone();
        sorted.dedup();
        assert_eq!(sorted, idx);
    }

    #[test]
    fn resampling_preserves_endpoints() {
        let s = vec![1.0, 1e-2, 1e-4];
        let r = resample_spectrum(&s, 5).unwrap();
        let want: [f64; 5] = [1.0, 1e-1, 1e-2, 1e-3, 1e-4];
        for (a, b) in r.iter().zip(want) {
            assert!((a.log10() - b.log10()).abs() < 1e-12);
        }
        let m = mean_spectrum(&[s.clone(), s], RESAMPLED_LENGTH).unwrap();
        assert_eq!(m.len(), RESAMPLED_LENGTH);
        assert!((m[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn snapshots_are_deterministic() {
        let m = mpe_model(5);
        let pts = random_points(16, 2, 6);
        let a = spectrum_snapshot(&m, &pts, &NtkOptions::default(), SnapshotTag::Mid, 3).unwrap();
        let b = spectrum_snapshot(&m, &pts, &NtkOptions::default(), SnapshotTag::Mid, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.eigenvalues.len(), 16);
        assert_eq!(log_spectrum_distance(&a.eigenvalues, &b.eigenvalues).unwrap(), 0.0);
    }
}
