//! Input encodings for coordinate networks.
//!
//! * identity: the raw coordinates.
//! * Fourier features: `[sin(2⁰x), cos(2⁰x), …, sin(2^{L-1}x), cos(2^{L-1}x)]`,
//!   sine and cosine each applied to all `d` components before the frequency
//!   advances.
//! * multigrid: multilinear interpolation of `k` learnable scalars per node on
//!   `L` regular grids over `[0,1]^d`, concatenated layer-major then
//!   slot-major, followed by the raw coordinates.
//!
//! Grid scalars are stored node-major with the `k` slots of a node adjacent.
//! Nodes are numbered with axis 0 most significant, so in 2D node `(ix, iy)`
//! has index `ix·r + iy`. A cell's corners are enumerated the same way: corner
//! bit `a` (counting from the most significant of `d` bits) selects the upper
//! node along axis `a`; in 2D the order is `(x₁,y₁), (x₁,y₂), (x₂,y₁), (x₂,y₂)`
//! with `(x₁,y₁)` the minimum-coordinate corner.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points may sit this far outside `[0,1]` and are clamped back in.
pub const DOMAIN_SLACK: f64 = 1e-9;
/// Standard deviation of the grid scalar initialization.
pub const GRID_INIT_STD: f64 = 0.01;
pub const MAX_INPUT_DIM: usize = 3;

fn check_input_dim(d: usize) -> Result<()> {
    if d == 0 || d > MAX_INPUT_DIM {
        return Err(Error::Config(format!("input dimension must be 1..=3, got {d}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfeSpec {
    pub levels: usize,
    pub input_dim: usize,
}

impl FfeSpec {
    pub fn new(levels: usize, input_dim: usize) -> Result<Self> {
        let spec = FfeSpec { levels, input_dim };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("Fourier feature encoding needs L >= 1".into()));
        }
        check_input_dim(self.input_dim)
    }

    pub fn output_dim(&self) -> usize {
        2 * self.input_dim * self.levels
    }
}

pub fn ffe_encode(x: &[f64], spec: &FfeSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if x.len() != spec.input_dim {
        return Err(Error::Dimension(format!(
            "point of dimension {} for a {}-D encoding",
            x.len(),
            spec.input_dim
        )));
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("input coordinate {v}")));
    }
    let mut out = Vec::with_capacity(spec.output_dim());
    ffe_encode_into(x, spec.levels, &mut out);
    Ok(out)
}

fn ffe_encode_into(x: &[f64], levels: usize, out: &mut Vec<f64>) {
    let mut freq = 1.0f64;
    for _ in 0..levels {
        out.extend(x.iter().map(|&v| (freq * v).sin()));
        out.extend(x.iter().map(|&v| (freq * v).cos()));
        freq *= 2.0;
    }
}

pub fn identity_encode(x: &[f64]) -> Vec<f64> {
    x.to_vec()
}

/// One regular grid of `r^d` nodes spanning `[0,1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayer {
    resolution: usize,
    input_dim: usize,
    slots: usize,
    weights: Vec<f64>,
}

impl GridLayer {
    pub fn zeros(resolution: usize, input_dim: usize, slots: usize) -> Result<Self> {
        check_input_dim(input_dim)?;
        if resolution < 2 {
            return Err(Error::Config(format!(
                "grid resolution must be at least 2 nodes per axis, got {resolution}"
            )));
        }
        if slots == 0 {
            return Err(Error::Config("grid needs at least one slot per node".into()));
        }
        let nodes = checked_pow(resolution, input_dim)
            .and_then(|n| n.checked_mul(slots))
            .ok_or_else(|| Error::Config("grid too large".into()))?;
        Ok(GridLayer {
            resolution,
            input_dim,
            slots,
            weights: vec![0.0; nodes],
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn node_count(&self) -> usize {
        self.weights.len() / self.slots
    }

    /// Width of a cell along every axis.
    pub fn cell_size(&self) -> f64 {
        1.0 / (self.resolution - 1) as f64
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn value(&self, node: usize, slot: usize) -> f64 {
        self.weights[node * self.slots + slot]
    }

    pub fn set_value(&mut self, node: usize, slot: usize, v: f64) {
        self.weights[node * self.slots + slot] = v;
    }

    pub fn node_index(&self, coords: &[usize]) -> usize {
        coords.iter().fold(0, |acc, &c| acc * self.resolution + c)
    }

    pub fn node_coords(&self, mut node: usize) -> Vec<usize> {
        let mut c = vec![0; self.input_dim];
        for a in (0..self.input_dim).rev() {
            c[a] = node % self.resolution;
            node /= self.resolution;
        }
        c
    }

    /// Position of a node in `[0,1]^d`.
    pub fn node_position(&self, node: usize) -> Vec<f64> {
        let h = self.cell_size();
        self.node_coords(node).iter().map(|&c| c as f64 * h).collect()
    }

    pub fn interpolate(&self, x: &[f64], slot: usize) -> Result<f64> {
        let fp = interp_footprint(x, self)?;
        Ok(fp.iter().map(|(node, w)| w * self.value(node, slot)).sum())
    }
}

fn checked_pow(base: usize, exp: usize) -> Option<usize> {
    (0..exp).try_fold(1usize, |acc, _| acc.checked_mul(base))
}

/// Corner nodes and multilinear weights of the cell containing a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpFootprint {
    len: usize,
    corners: [usize; 8],
    weights: [f64; 8],
}

impl InterpFootprint {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn corners(&self) -> &[usize] {
        &self.corners[..self.len]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights[..self.len]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.corners().iter().copied().zip(self.weights().iter().copied())
    }
}

pub fn interp_footprint(x: &[f64], layer: &GridLayer) -> Result<InterpFootprint> {
    let d = layer.input_dim;
    if x.len() != d {
        return Err(Error::Dimension(format!(
            "point of dimension {} for a {d}-D grid",
            x.len()
        )));
    }
    let r = layer.resolution;
    let cells = (r - 1) as f64;
    let mut base = [0usize; MAX_INPUT_DIM];
    let mut frac = [0f64; MAX_INPUT_DIM];
    for (a, &v) in x.iter().enumerate() {
        if !(v >= -DOMAIN_SLACK && v <= 1.0 + DOMAIN_SLACK) {
            return Err(Error::Domain(format!(
                "coordinate {a} = {v} outside [0, 1]"
            )));
        }
        let u = v.clamp(0.0, 1.0) * cells;
        // x = 1 belongs to the last cell.
        let i = (u.floor() as usize).min(r - 2);
        base[a] = i;
        frac[a] = u - i as f64;
    }
    let len = 1usize << d;
    let mut fp = InterpFootprint {
        len,
        corners: [0; 8],
        weights: [0.0; 8],
    };
    for c in 0..len {
        let mut node = 0usize;
        let mut w = 1.0;
        for a in 0..d {
            let upper = (c >> (d - 1 - a)) & 1 == 1;
            node = node * r + base[a] + upper as usize;
            w *= if upper { frac[a] } else { 1.0 - frac[a] };
        }
        fp.corners[c] = node;
        fp.weights[c] = w;
    }
    Ok(fp)
}

/// Geometrically spaced integer resolutions from `lo` to `hi` inclusive.
pub fn resolution_schedule(levels: usize, lo: usize, hi: usize) -> Result<Vec<usize>> {
    if levels == 0 {
        return Err(Error::Config("grid needs at least one layer".into()));
    }
    if lo < 2 || hi < lo {
        return Err(Error::Config(format!("invalid resolution range [{lo}, {hi}]")));
    }
    if levels == 1 {
        return Ok(vec![lo]);
    }
    let ratio = (hi as f64 / lo as f64).powf(1.0 / (levels - 1) as f64);
    Ok((0..levels)
        .map(|l| (lo as f64 * ratio.powi(l as i32)).round() as usize)
        .collect())
}

/// The learnable grids of a multigrid encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct GridStack {
    input_dim: usize,
    slots: usize,
    layers: Vec<GridLayer>,
}

impl GridStack {
    pub fn zeros(input_dim: usize, slots: usize, resolutions: &[usize]) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(Error::Config("grid needs at least one layer".into()));
        }
        let layers = resolutions
            .iter()
            .map(|&r| GridLayer::zeros(r, input_dim, slots))
            .collect::<Result<Vec<_>>>()?;
        Ok(GridStack {
            input_dim,
            slots,
            layers,
        })
    }

    /// Scalars drawn i.i.d. from `N(0, std²)`.
    pub fn random(
        input_dim: usize,
        slots: usize,
        resolutions: &[usize],
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut g = Self::zeros(input_dim, slots, resolutions)?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut g.layers {
            for w in &mut layer.weights {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(g)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn layers(&self) -> &[GridLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GridLayer] {
        &mut self.layers
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.resolution).collect()
    }

    /// Length of the interpolated features, `L·k`.
    pub fn feature_dim(&self) -> usize {
        self.layers.len() * self.slots
    }

    pub fn output_dim(&self) -> usize {
        self.feature_dim() + self.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    /// Offset of each layer's block in the flattened grid parameters.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = off;
                off += l.weights.len();
                o
            })
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().all(|w| w.is_finite()))
    }

    /// Adds `scale · delta[i]` to flat parameter `i`.
    pub fn add_scaled_flat(&mut self, scale: f64, delta: &[f64]) -> Result<()> {
        if delta.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "{} grid deltas for {} grid scalars",
                delta.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let n = layer.weights.len();
            for (w, d) in layer.weights.iter_mut().zip(&delta[off..off + n]) {
                *w += scale * d;
            }
            off += n;
        }
        Ok(())
    }

    /// Writes the binary grid format (see [`GridStack::from_bytes`]).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.param_count());
        self.write_binary(&mut out);
        out
    }

    pub(crate) fn write_binary(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&GRID_FORMAT_VERSION.to_le_bytes());
        out.push(self.input_dim as u8);
        out.extend_from_slice(&(self.slots as u32).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.resolution as u32).to_le_bytes());
        }
        for l in &self.layers {
            for w in &l.weights {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
    }

    /// Decodes the binary grid format:
    ///
    /// ```text
    /// magic      4 bytes  "GRID"
    /// version    u16 LE   (1)
    /// d          u8       input dimension, 1..=3
    /// k          u32 LE   slots per node
    /// L          u32 LE   layer count
    /// resolution u32 LE × L
    /// scalars    f64 LE × Σ r_l^d · k   (layer, node, slot order)
    /// ```
    ///
    /// Trailing bytes are an error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "grid");
        let g = Self::read_binary(&mut r)?;
        r.finish()?;
        Ok(g)
    }

    pub(crate) fn read_binary(r: &mut ByteReader<'_>) -> Result<Self> {
        if r.take(4)? != GRID_MAGIC {
            return Err(r.error("bad magic"));
        }
        let version = r.u16()?;
        if version != GRID_FORMAT_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let d = r.u8()? as usize;
        let k = r.u32()? as usize;
        let levels = r.u32()? as usize;
        check_input_dim(d).map_err(|e| r.error(e.to_string()))?;
        if k == 0 || levels == 0 {
            return Err(r.error("empty grid"));
        }
        // Each layer needs at least 4 bytes of resolution; bail before
        // allocating for absurd counts.
        if levels > r.remaining() / 4 {
            return Err(r.error("layer count exceeds input"));
        }
        let mut resolutions = Vec::with_capacity(levels);
        let mut total = 0usize;
        for _ in 0..levels {
            let res = r.u32()? as usize;
            if res < 2 {
                return Err(r.error(format!("resolution {res} below 2")));
            }
            let n = checked_pow(res, d)
                .and_then(|n| n.checked_mul(k))
                .ok_or_else(|| r.error("grid size overflows"))?;
            total = total.checked_add(n).ok_or_else(|| r.error("grid size overflows"))?;
            resolutions.push(res);
        }
        if total.checked_mul(8).map_or(true, |b| b > r.remaining()) {
            return Err(r.error("truncated scalar block"));
        }
        let mut g = GridStack::zeros(d, k, &resolutions).map_err(|e| r.error(e.to_string()))?;
        for layer in &mut g.layers {
            for w in &mut layer.weights {
                let v = r.f64()?;
                if !v.is_finite() {
                    return Err(r.error("non-finite grid scalar"));
                }
                *w = v;
            }
        }
        Ok(g)
    }

    /// CSV export: a `# d=…,k=…,L=…,resolutions=r0;r1…` header line, then
    /// `layer,node,slot,value` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let res: Vec<String> = self.resolutions().iter().map(|r| r.to_string()).collect();
        writeln!(
            w,
            "# d={},k={},L={},resolutions={}",
            self.input_dim,
            self.slots,
            self.layers.len(),
            res.join(";")
        )?;
        writeln!(w, "layer,node,slot,value")?;
        for (li, l) in self.layers.iter().enumerate() {
            for node in 0..l.node_count() {
                for s in 0..self.slots {
                    writeln!(w, "{li},{node},{s},{}", crate::linalg::fmt_f64(l.value(node, s)))?;
                }
            }
        }
        Ok(())
    }
}

const GRID_MAGIC: &[u8; 4] = b"GRID";
const GRID_FORMAT_VERSION: u16 = 1;

/// `γ(x) = g̃^{(0,0)}(x) ⊕ … ⊕ g̃^{(L-1,k-1)}(x) ⊕ x`.
pub fn mpe_encode(x: &[f64], grids: &GridStack) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(grids.output_dim());
    for layer in &grids.layers {
        let fp = interp_footprint(x, layer)?;
        for s in 0..grids.slots {
            out.push(fp.iter().map(|(node, w)| w * layer.value(node, s)).sum());
        }
    }
    out.extend_from_slice(x);
    Ok(out)
}

/// One non-zero of `∂γ/∂φ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGradientEntry {
    /// Index of the encoded feature, `layer·k + slot`.
    pub feature: usize,
    /// Index into the flattened grid scalars.
    pub param: usize,
    pub weight: f64,
}

/// Sparse Jacobian of the interpolated features with respect to the grid
/// scalars. Only the footprint corners carry weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    pub entries: Vec<GridGradientEntry>,
    pub param_count: usize,
}

impl GridGradient {
    /// Dense `∂γ_feature/∂φ` for one feature.
    pub fn dense_for_feature(&self, feature: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.param_count];
        for e in self.entries.iter().filter(|e| e.feature == feature) {
            v[e.param] += e.weight;
        }
        v
    }
}

pub fn mpe_grid_gradient(x: &[f64], grids: &GridStack) -> Result<GridGradient> {
    let k = grids.slots;
    let mut entries = Vec::with_capacity(grids.layers.len() * k * (1 << grids.input_dim));
    for ((li, layer), off) in grids.layers.iter().enumerate().zip(grids.layer_offsets()) {
        let fp = interp_footprint(x, layer)?;
        for s in 0..k {
            for (node, w) in fp.iter() {
                entries.push(GridGradientEntry {
                    feature: li * k + s,
                    param: off + node * k + s,
                    weight: w,
                });
            }
        }
    }
    Ok(GridGradient {
        entries,
        param_count: grids.param_count(),
    })
}

/// How the grid resolutions of a multigrid encoding are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResolutionSpec {
    /// Every layer uses `x` nodes per axis.
    Single(usize),
    /// Geometric spacing between the bounds `[lo, hi]`.
    Range([usize; 2]),
}

/// Encoding configuration without learnable state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncodingSpec {
    Identity,
    Fourier {
        levels: usize,
    },
    Multigrid {
        slots: usize,
        levels: usize,
        resolution: ResolutionSpec,
    },
}

impl EncodingSpec {
    pub fn resolutions(&self) -> Result<Vec<usize>> {
        match *self {
            EncodingSpec::Multigrid {
                levels, resolution, ..
            } => match resolution {
                ResolutionSpec::Single(r) => {
                    if levels == 0 {
                        return Err(Error::Config("grid needs at least one layer".into()));
                    }
                    Ok(vec![r; levels])
                }
                ResolutionSpec::Range([lo, hi]) => resolution_schedule(levels, lo, hi),
            },
            _ => Ok(Vec::new()),
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match *self {
            EncodingSpec::Identity => input_dim,
            EncodingSpec::Fourier { levels } => 2 * input_dim * levels,
            EncodingSpec::Multigrid { slots, levels, .. } => slots * levels + input_dim,
        }
    }

    pub fn is_multigrid(&self) -> bool {
        matches!(self, EncodingSpec::Multigrid { .. })
    }

    /// Instantiates the encoding; grid scalars are seeded from `seed`.
    pub fn build(&self, input_dim: usize, seed: u64) -> Result<Encoding> {
        check_input_dim(input_dim)?;
        Ok(match *self {
            EncodingSpec::Identity => Encoding::Identity { input_dim },
            EncodingSpec::Fourier { levels } => Encoding::Fourier(FfeSpec::new(levels, input_dim)?),
            EncodingSpec::Multigrid { slots, .. } => Encoding::Multigrid(GridStack::random(
                input_dim,
                slots,
                &self.resolutions()?,
                GRID_INIT_STD,
                seed,
            )?),
        })
    }

    pub fn label(&self) -> String {
        match self {
            EncodingSpec::Identity => "identity".into(),
            EncodingSpec::Fourier { levels } => format!("fourier(L={levels})"),
            EncodingSpec::Multigrid {
                slots,
                levels,
                resolution,
            } => match resolution {
                ResolutionSpec::Single(r) => format!("multigrid(k={slots},L={levels},x={r})"),
                ResolutionSpec::Range([lo, hi]) => {
                    format!("multigrid(k={slots},L={levels},x=[{lo},{hi}])")
                }
            },
        }
    }
}

/// An instantiated encoding `γ`.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoding {
    Identity { input_dim: usize },
    Fourier(FfeSpec),
    Multigrid(GridStack),
}

impl Encoding {
    pub fn input_dim(&self) -> usize {
        match self {
            Encoding::Identity { input_dim } => *input_dim,
            Encoding::Fourier(s) => s.input_dim,
            Encoding::Multigrid(g) => g.input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoding::Identity { input_dim } => *input_dim,
            Encoding::Fourier(s) => s.output_dim(),
            Encoding::Multigrid(g) => g.output_dim(),
        }
    }

    pub fn grid(&self) -> Option<&GridStack> {
        match self {
            Encoding::Multigrid(g) => Some(g),
            _ => None,
        }
    }

    pub fn grid_mut(&mut self) -> Option<&mut GridStack> {
        match self {
            Encoding::Multigrid(g) => Some(g),
            _ => None,
        }
    }

    pub fn grid_param_count(&self) -> usize {
        self.grid().map_or(0, GridStack::param_count)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "point of dimension {} for a {}-D encoding",
                x.len(),
                self.input_dim()
            )));
        }
        match self {
            Encoding::Identity { .. } => Ok(identity_encode(x)),
            Encoding::Fourier(s) => ffe_encode(x, s),
            Encoding::Multigrid(g) => mpe_encode(x, g),
        }
    }
}

/// Little-endian cursor shared by the binary decoders.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], format: &'static str) -> Self {
        ByteReader {
            bytes,
            pos: 0,
            format,
        }
    }

    pub(crate) fn error(&self, msg: impl std::fmt::Display) -> Error {
        Error::parse(self.format, format!("{msg} (at byte {})", self.pos))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error("unexpected end of input"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error("trailing bytes"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_cell_2d(values: [[f64; 2]; 2]) -> GridLayer {
        let mut l = GridLayer::zeros(2, 2, 1).unwrap();
        for ix in 0..2 {
            for iy in 0..2 {
                let n = l.node_index(&[ix, iy]);
                l.set_value(n, 0, values[ix][iy]);
            }
        }
        l
    }

    #[test]
    fn ffe_examples() {
        let spec = FfeSpec::new(2, 1).unwrap();
        assert_eq!(ffe_encode(&[0.0], &spec).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(FfeSpec::new(6, 2).unwrap().output_dim(), 24);
        let v = ffe_encode(&[0.5], &FfeSpec::new(1, 1).unwrap()).unwrap();
        assert!((v[0] - 0.479_425_538_604_203).abs() < 1e-12);
        assert!((v[1] - 0.877_582_561_890_372_8).abs() < 1e-12);
        assert!(matches!(FfeSpec::new(0, 2), Err(Error::Config(_))));
    }

    #[test]
    fn ffe_layout_is_sin_block_then_cos_block() {
        let spec = FfeSpec::new(2, 2).unwrap();
        let v = ffe_encode(&[0.3, 0.7], &spec).unwrap();
        let want = [
            0.3f64.sin(),
            0.7f64.sin(),
            0.3f64.cos(),
            0.7f64.cos(),
            0.6f64.sin(),
            1.4f64.sin(),
            0.6f64.cos(),
            1.4f64.cos(),
        ];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        // Out-of-domain inputs are encoded as-is.
        assert_eq!(ffe_encode(&[-3.0, 5.0], &spec).unwrap().len(), 8);
    }

    #[test]
    fn footprint_at_node_and_center() {
        let layer = GridLayer::zeros(5, 2, 1).unwrap();
        let fp = interp_footprint(&[0.25, 0.5], &layer).unwrap();
        let node = layer.node_index(&[1, 2]);
        for (c, w) in fp.iter() {
            assert_eq!(w, if c == node { 1.0 } else { 0.0 });
        }
        let fp = interp_footprint(&[0.125, 0.375], &layer).unwrap();
        assert!(fp.weights().iter().all(|&w| (w - 0.25).abs() < 1e-15));
    }

    #[test]
    fn bilinear_corner_convention() {
        let layer = unit_cell_2d([[1.0, 2.0], [3.0, 4.0]]);
        let v = layer.interpolate(&[0.25, 0.75], 0).unwrap();
        assert!((v - 2.25).abs() < 1e-15);
    }

    #[test]
    fn domain_handling() {
        let layer = GridLayer::zeros(4, 2, 1).unwrap();
        assert!(interp_footprint(&[1.0 + 5e-10, -5e-10], &layer).is_ok());
        assert!(matches!(
            interp_footprint(&[1.0 + 1e-6, 0.5], &layer),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            interp_footprint(&[f64::NAN, 0.5], &layer),
            Err(Error::Domain(_))
        ));
        // x = 1 lands in the last cell.
        let fp = interp_footprint(&[1.0, 1.0], &layer).unwrap();
        let last = layer.node_index(&[3, 3]);
        assert_eq!(fp.corners()[3], last);
        assert_eq!(fp.weights()[3], 1.0);
    }

    #[test]
    fn layer_config_errors() {
        assert!(GridLayer::zeros(1, 2, 1).is_err());
        assert!(GridLayer::zeros(4, 0, 1).is_err());
        assert!(GridLayer::zeros(4, 4, 1).is_err());
        assert!(GridLayer::zeros(4, 2, 0).is_err());
        assert!(GridStack::zeros(2, 1, &[]).is_err());
    }

    #[test]
    fn mpe_examples() {
        let g = GridStack::zeros(2, 2, &[5, 7]).unwrap();
        assert_eq!(mpe_encode(&[0.3, 0.9], &g).unwrap(), vec![0.0, 0.0, 0.0, 0.0, 0.3, 0.9]);
        let g = GridStack::zeros(2, 3, &[96, 277]).unwrap();
        assert_eq!(g.output_dim(), 8);
        let mut g = GridStack::zeros(2, 1, &[6]).unwrap();
        g.layers_mut()[0].weights_mut().fill(0.37);
        let v = mpe_encode(&[0.41, 0.13], &g).unwrap();
        assert!((v[0] - 0.37).abs() < 1e-15);
        assert_eq!(&v[1..], &[0.41, 0.13]);
    }

    #[test]
    fn grid_gradient_at_node_is_one_hot() {
        let g = GridStack::random(2, 2, &[5], 0.1, 3).unwrap();
        let grad = mpe_grid_gradient(&[0.5, 0.75], &g).unwrap();
        let node = g.layers()[0].node_index(&[2, 3]);
        for slot in 0..2 {
            let dense = grad.dense_for_feature(slot);
            for (i, v) in dense.iter().enumerate() {
                let want = if i == node * 2 + slot { 1.0 } else { 0.0 };
                assert_eq!(*v, want);
            }
        }
    }

    #[test]
    fn grid_gradient_matches_finite_differences() {
        let g0 = GridStack::random(2, 2, &[4, 7], 0.3, 11).unwrap();
        let x = [0.613, 0.287];
        let grad = mpe_grid_gradient(&x, &g0).unwrap();
        let h = 1e-4;
        let n = g0.param_count();
        for p in 0..n {
            let mut delta = vec![0.0; n];
            delta[p] = 1.0;
            let mut plus = g0.clone();
            plus.add_scaled_flat(h, &delta).unwrap();
            let mut minus = g0.clone();
            minus.add_scaled_flat(-h, &delta).unwrap();
            let fp = mpe_encode(&x, &plus).unwrap();
            let fm = mpe_encode(&x, &minus).unwrap();
            for feature in 0..g0.feature_dim() {
                let fd = (fp[feature] - fm[feature]) / (2.0 * h);
                let an = grad.dense_for_feature(feature)[p];
                let err = (fd - an).abs() / an.abs().max(1e-12);
                assert!(an == 0.0 && fd.abs() < 1e-10 || err < 1e-6, "p={p} fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn schedule() {
        assert_eq!(resolution_schedule(1, 100, 100).unwrap(), vec![100]);
        assert_eq!(resolution_schedule(2, 96, 277).unwrap(), vec![96, 277]);
        let r = resolution_schedule(3, 16, 64).unwrap();
        assert_eq!(r, vec![16, 32, 64]);
        assert!(resolution_schedule(0, 4, 8).is_err());
        assert!(resolution_schedule(2, 8, 4).is_err());
    }

    #[test]
    fn encoding_spec_build() {
        let spec = EncodingSpec::Multigrid {
            slots: 3,
            levels: 2,
            resolution: ResolutionSpec::Range([96, 277]),
        };
        let e = spec.build(2, 1).unwrap();
        assert_eq!(e.output_dim(), 8);
        assert_eq!(e.grid().unwrap().resolutions(), vec![96, 277]);
        assert_eq!(spec.build(2, 1).unwrap(), e);
        assert_eq!(EncodingSpec::Fourier { levels: 6 }.build(2, 0).unwrap().output_dim(), 24);
        assert_eq!(EncodingSpec::Identity.build(3, 0).unwrap().output_dim(), 3);
        assert_eq!(identity_encode(&[0.2, 0.7]), vec![0.2, 0.7]);
    }

    #[test]
    fn grid_binary_roundtrip_and_rejects_garbage() {
        let g = GridStack::random(3, 2, &[2, 3], 0.5, 9).unwrap();
        let bytes = g.to_bytes();
        assert_eq!(GridStack::from_bytes(&bytes).unwrap(), g);
        assert!(GridStack::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(GridStack::from_bytes(&extra).is_err());
        assert!(GridStack::from_bytes(b"GRID\x01\x00\x02\xff\xff\xff\xff\xff\xff\xff\xff").is_err());
        assert!(GridStack::from_bytes(b"").is_err());
    }

    #[test]
    fn grid_csv_header() {
        let g = GridStack::zeros(2, 1, &[2]).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# d=2,k=1,L=1,resolutions=2\nlayer,node,slot,value\n"));
        assert_eq!(text.lines().count(), 2 + 4);
    }

    fn point_in_unit(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..=1.0, d)
    }

    proptest! {
        #[test]
        fn ffe_bounded_and_unit_pairs(x in proptest::collection::vec(-10.0f64..10.0, 1..=3), levels in 1usize..12) {
            let d = x.len();
            let v = ffe_encode(&x, &FfeSpec::new(levels, d).unwrap()).unwrap();
            prop_assert_eq!(v.len(), 2 * d * levels);
            prop_assert!(v.iter().all(|c| (-1.0..=1.0).contains(c)));
            for l in 0..levels {
                for a in 0..d {
                    let s = v[2 * d * l + a];
                    let c = v[2 * d * l + d + a];
                    prop_assert!((s * s + c * c - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn footprint_partition_of_unity(x in point_in_unit(3), r in 2usize..9) {
            let layer = GridLayer::zeros(r, 3, 1).unwrap();
            let fp = interp_footprint(&x, &layer).unwrap();
            prop_assert_eq!(fp.len(), 8);
            prop_assert!(fp.weights().iter().all(|w| (0.0..=1.0).contains(w)));
            prop_assert!((fp.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn interpolation_exact_at_nodes_and_affine_on_edges(
            seed in any::<u64>(), r in 2usize..8, ix in 0usize..7, iy in 0usize..7,
        ) {
            let ix = ix.min(r - 1);
            let iy = iy.min(r - 1);
            let g = GridStack::random(2, 1, &[r], 1.0, seed).unwrap();
            let layer = &g.layers()[0];
            let h = layer.cell_size();
            let node = layer.node_index(&[ix, iy]);
            let at_node = layer.interpolate(&[ix as f64 * h, iy as f64 * h], 0).unwrap();
            prop_assert!((at_node - layer.value(node, 0)).abs() < 1e-12);
            if ix + 1 < r {
                let next = layer.node_index(&[ix + 1, iy]);
                let mid = layer.interpolate(&[(ix as f64 + 0.5) * h, iy as f64 * h], 0).unwrap();
                let want = 0.5 * (layer.value(node, 0) + layer.value(next, 0));
                prop_assert!((mid - want).abs() < 1e-12);
            }
        }

        #[test]
        fn interpolation_continuous_across_cell_edges(seed in any::<u64>(), r in 3usize..8, t in 0.0f64..1.0) {
            // Approach an interior vertical edge from both sides.
            let g = GridStack::random(2, 1, &[r], 1.0, seed).unwrap();
            let layer = &g.layers()[0];
            let edge = layer.cell_size();
            let left = layer.interpolate(&[edge * (1.0 - 1e-15), t], 0).unwrap();
            let right = layer.interpolate(&[edge, t], 0).unwrap();
            prop_assert!((left - right).abs() < 1e-12);
        }

        #[test]
        fn output_lengths(d in 1usize..=3, k in 1usize..4, levels in 1usize..3, ffe_levels in 1usize..10) {
            let res = vec![3; levels];
            let g = GridStack::zeros(d, k, &res).unwrap();
            let x = vec![0.5; d];
            prop_assert_eq!(mpe_encode(&x, &g).unwrap().len(), levels * k + d);
            prop_assert_eq!(ffe_encode(&x, &FfeSpec::new(ffe_levels, d).unwrap()).unwrap().len(), 2 * d * ffe_levels);
            prop_assert_eq!(identity_encode(&x).len(), d);
        }

        #[test]
        fn grid_gradient_sums_to_one_per_slot(x in point_in_unit(2), seed in any::<u64>()) {
            let g = GridStack::random(2, 3, &[5, 9], 0.1, seed).unwrap();
            let grad = mpe_grid_gradient(&x, &g).unwrap();
            for feature in 0..g.feature_dim() {
                let s: f64 = grad.entries.iter().filter(|e| e.feature == feature).map(|e| e.weight).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert_eq!(grad.entries.iter().filter(|e| e.feature == feature).count(), 4);
            }
        }

        #[test]
        fn grid_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            let _ = GridStack::from_bytes(&bytes);
        }
    }
}
