//! Grid visualization and ReLU activation-region analysis.

use std::collections::HashMap;

use ndarray::Array2;

use crate::encoding::GridStack;
use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::network::{Activation, CoordinateModel};

/// Default side of the sampling lattice used by [`count_regions`].
pub const DEFAULT_REGION_RESOLUTION: usize = 256;

/// Scalars of one slot of one 2D grid layer as an `r × r` image, min-max
/// normalized. Pixel `(col, row)` is node `(ix, iy)`. A constant grid maps
/// to 0.5 everywhere.
pub fn grid_to_image(grids: &GridStack, layer: usize, slot: usize) -> Result<GrayImage> {
    if grids.input_dim() != 2 {
        return Err(Error::Unsupported(format!(
            "grid images need a 2D grid, got {}D",
            grids.input_dim()
        )));
    }
    let layers = grids.layers();
    let g = layers.get(layer).ok_or(Error::Index {
        what: "grid layer",
        index: layer,
        limit: layers.len(),
    })?;
    if slot >= g.slots() {
        return Err(Error::Index {
            what: "grid slot",
            index: slot,
            limit: g.slots(),
        });
    }
    let r = g.resolution();
    let raw: Vec<f64> = (0..r * r).map(|p| g.value(g.node_index(&[p % r, p / r]), slot)).collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi > lo {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; r * r]
    };
    GrayImage::from_vec(r, r, data)
}

/// Pearson correlation of two equally long samples; 0 when either is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!("samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Correlation between an interpolated grid slot and a grayscale target,
/// both sampled at the target's pixel coordinates.
pub fn grid_image_correlation(grids: &GridStack, layer: usize, slot: usize, target: &GrayImage) -> Result<f64> {
    let g = grids.layers().get(layer).ok_or(Error::Index {
        what: "grid layer",
        index: layer,
        limit: grids.layers().len(),
    })?;
    let coords = crate::regress2d::pixel_coords(target.width(), target.height());
    let values = coords.iter().map(|p| g.interpolate(p, slot)).collect::<Result<Vec<_>>>()?;
    pearson(&values, target.as_slice())
}

/// One bit per hidden ReLU neuron, layers in order; set iff the
/// pre-activation is strictly positive.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationPattern {
    pub bits: Vec<bool>,
}

impl ActivationPattern {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    fn packed(&self) -> Vec<u64> {
        self.bits
            .chunks(64)
            .map(|c| c.iter().enumerate().fold(0u64, |acc, (i, &b)| acc | ((b as u64) << i)))
            .collect()
    }
}

fn hidden_preacts(model: &CoordinateModel, points: &[Vec<f64>]) -> Result<Vec<Array2<f64>>> {
    if model.network.activation != Activation::Relu {
        return Err(Error::Unsupported("activation patterns need a ReLU network".into()));
    }
    let enc = model.encode_batch(points)?;
    let mut cache = model.network.forward_cache(enc.features)?;
    cache.preacts.pop();
    Ok(cache.preacts)
}

pub fn activation_patterns(model: &CoordinateModel, points: &[Vec<f64>]) -> Result<Vec<ActivationPattern>> {
    let pre = hidden_preacts(model, points)?;
    Ok((0..points.len())
        .map(|i| ActivationPattern {
            bits: pre.iter().flat_map(|z| z.row(i).iter().map(|v| *v > 0.0).collect::<Vec<_>>()).collect(),
        })
        .collect())
}

pub fn activation_pattern(model: &CoordinateModel, x: &[f64]) -> Result<ActivationPattern> {
    Ok(activation_patterns(model, &[x.to_vec()])?.remove(0))
}

/// Distinct activation patterns over an `n × n` lattice on `[0,1]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub resolution: usize,
    pub count: usize,
    /// Row-major region ids, numbered in first-seen order.
    pub ids: Vec<u32>,
}

impl RegionMap {
    /// Region ids hashed to colours; equal ids give equal colours.
    pub fn colorized(&self) -> RgbImage {
        let n = self.resolution;
        RgbImage::from_fn(n, n, |c, r| {
            let h = splitmix(self.ids[r * n + c] as u64);
            [0, 1, 2].map(|k| 0.15 + 0.85 * ((h >> (16 * k)) & 0xFF) as f64 / 255.0)
        })
        .expect("positive size")
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counts activation regions hit by the lattice `{i/(n−1)}²`. Lattices
/// whose spacing divides another's are nested, so refining can only add
/// regions. The count is a lower bound on the true number of regions.
pub fn count_regions(model: &CoordinateModel, resolution: usize) -> Result<RegionMap> {
    if model.coord_dim() != 2 {
        return Err(Error::Unsupported(format!(
            "region counting needs 2D inputs, model takes {}",
            model.coord_dim()
        )));
    }
    if resolution < 2 {
        return Err(Error::Config(format!("region lattice needs at least 2 points per axis, got {resolution}")));
    }
    let h = 1.0 / (resolution - 1) as f64;
    let mut seen: HashMap<Vec<u64>, u32> = HashMap::new();
    let mut ids = Vec::with_capacity(resolution * resolution);
    // One lattice row per batch bounds memory for wide networks.
    for r in 0..resolution {
        let pts: Vec<Vec<f64>> = (0..resolution).map(|c| vec![c as f64 * h, r as f64 * h]).collect();
        for p in activation_patterns(model, &pts)? {
            let next = seen.len() as u32;
            ids.push(*seen.entry(p.packed()).or_insert(next));
        }
    }
    Ok(RegionMap {
        resolution,
        count: seen.len(),
        ids,
    })
}
