//! Single-file model checkpoints.
//!
//! ```text
//! magic        4 bytes  "GNTK"
//! version      u16 LE   (1)
//! config_len   u32 LE
//! config       UTF-8 TOML of the experiment configuration
//! activation   u8       0 = ReLU, 1 = linear
//! beta         f64 LE
//! layers       u32 LE   dense layer count n ≥ 2
//! widths       u32 LE × (n + 1)
//! scales       f64 LE × n
//! param_count  u64 LE   must equal Σ (out·in + out)
//! params       f64 LE × param_count, per layer: weight (row-major), bias
//! encoding     u8       0 = identity, 1 = Fourier, 2 = multigrid
//!   identity:  u8 input dimension
//!   Fourier:   u8 input dimension, u32 LE levels
//!   multigrid: embedded grid stack in its own binary format
//! ```
//!
//! All floats must be finite; trailing bytes are an error.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::config::ExperimentConfig;
use crate::encoding::{ByteReader, Encoding, FfeSpec, GridStack};
use crate::error::{Error, Result};
use crate::network::{Activation, CoordinateModel, DenseLayer, MlpNetwork};

const MAGIC: &[u8; 4] = b"GNTK";
pub const CHECKPOINT_VERSION: u16 = 1;
/// Guards allocation on hostile headers.
const MAX_LAYERS: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub model: CoordinateModel,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let toml = toml::to_string(&self.config).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        let net = &self.model.network;
        let mut out = Vec::with_capacity(64 + toml.len() + 8 * self.model.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(toml.len() as u32).to_le_bytes());
        out.extend_from_slice(toml.as_bytes());
        out.push(match net.activation {
            Activation::Relu => 0,
            Activation::Linear => 1,
        });
        out.extend_from_slice(&net.beta.to_le_bytes());
        out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
        out.extend_from_slice(&(net.input_dim() as u32).to_le_bytes());
        for l in &net.layers {
            out.extend_from_slice(&(l.fan_out() as u32).to_le_bytes());
        }
        for l in &net.layers {
            out.extend_from_slice(&l.scale.to_le_bytes());
        }
        out.extend_from_slice(&(net.param_count() as u64).to_le_bytes());
        for l in &net.layers {
            for v in l.weight.iter().chain(l.bias.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.model.encoding {
            Encoding::Identity { input_dim } => {
                out.push(0);
                out.push(*input_dim as u8);
            }
            Encoding::Fourier(s) => {
                out.push(1);
                out.push(s.input_dim as u8);
                out.extend_from_slice(&(s.levels as u32).to_le_bytes());
            }
            Encoding::Multigrid(g) => {
                out.push(2);
                g.write_binary(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(4)? != MAGIC {
            return Err(r.error("bad magic"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| r.error(format!("config is not UTF-8: {e}")))?;
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| r.error(format!("bad config: {e}")))?;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Linear,
            a => return Err(r.error(format!("unknown activation {a}"))),
        };
        let beta = r_f64(&mut r)?;
        let n = r.u32()? as usize;
        if !(2..=MAX_LAYERS).contains(&n) {
            return Err(r.error(format!("layer count {n} outside 2..={MAX_LAYERS}")));
        }
        let widths = (0..=n).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        if widths.contains(&0) {
            return Err(r.error("zero layer width"));
        }
        let scales = (0..n).map(|_| r_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut expected = 0usize;
        for w in widths.windows(2) {
            let c = w[0].checked_mul(w[1]).and_then(|m| m.checked_add(w[1])).ok_or_else(|| r.error("layer size overflows"))?;
            expected = expected.checked_add(c).ok_or_else(|| r.error("layer size overflows"))?;
        }
        let count = r.u64()?;
        if count != expected as u64 {
            return Err(r.error(format!("parameter count {count} does not match widths ({expected})")));
        }
        if expected.checked_mul(8).map_or(true, |b| b > r.remaining()) {
            return Err(r.error("truncated parameter block"));
        }
        let mut layers = Vec::with_capacity(n);
        for (w, &scale) in widths.windows(2).zip(&scales) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight = (0..fan_in * fan_out).map(|_| r_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            let bias = (0..fan_out).map(|_| r_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            layers.push(DenseLayer {
                weight: Array2::from_shape_vec((fan_out, fan_in), weight).expect("sized above"),
                bias: Array1::from(bias),
                scale,
            });
        }
        let encoding = match r.u8()? {
            0 => Encoding::Identity {
                input_dim: r.u8()? as usize,
            },
            1 => {
                let d = r.u8()? as usize;
                let levels = r.u32()? as usize;
                Encoding::Fourier(FfeSpec::new(levels, d).map_err(|e| r.error(e.to_string()))?)
            }
            2 => Encoding::Multigrid(GridStack::read_binary(&mut r)?),
            t => return Err(r.error(format!("unknown encoding tag {t}"))),
        };
        r.finish()?;
        if !(1..=crate::encoding::MAX_INPUT_DIM).contains(&encoding.input_dim()) {
            return Err(r.error(format!("input dimension {} out of range", encoding.input_dim())));
        }
        let network = MlpNetwork {
            layers,
            beta,
            activation,
        };
        let model = CoordinateModel::new(encoding, network).map_err(|e| r.error(e.to_string()))?;
        Ok(Checkpoint { config, model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn r_f64(r: &mut ByteReader<'_>) -> Result<f64> {
    let v = r.f64()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(r.error("non-finite value"))
    }
}
