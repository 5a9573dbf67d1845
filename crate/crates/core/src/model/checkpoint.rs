//! Versioned binary checkpoint.
//!
//! All integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "NIMACKPT"
//! version    u32      = 1
//! n_buckets  u32      then n_buckets × f64 bucket values
//! resize_to  u32
//! crop_to    u32
//! seed       u64
//! n_stats    u32      then n_stats × f64 shift, n_stats × f64 scale
//! n_layers   u32      backbone layers + head
//! per layer: inputs u32, outputs u32, activation u8,
//!            inputs×outputs f64 weights (row-major), outputs f64 bias
//! echo_len   u32      then echo_len bytes of UTF-8 config echo
//! ```

use std::fs;
use std::path::Path;

use super::net::{Activation, Dense, InputGeometry, InputNorm, ModelParams};
use crate::dist::BucketScale;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NIMACKPT";
pub const VERSION: u32 = 1;

/// A model plus the textual echo of the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config_echo: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, p.scale.len());
        for v in p.scale.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, p.geometry.resize_to);
        put_u32(&mut out, p.geometry.crop_to);
        out.extend_from_slice(&p.seed.to_le_bytes());
        put_u32(&mut out, p.input_norm.shift.len());
        for v in p.input_norm.shift.iter().chain(&p.input_norm.scale) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, p.backbone.len() + 1);
        for layer in p.layers() {
            put_u32(&mut out, layer.inputs);
            put_u32(&mut out, layer.outputs);
            out.push(layer.activation.tag());
            for v in layer.weights.iter().chain(&layer.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.config_echo.len());
        out.extend_from_slice(self.config_echo.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let n = r.u32()? as usize;
        let scale = BucketScale::new((0..n).map(|_| r.f64()).collect::<Result<_>>()?)?;
        let geometry = InputGeometry {
            resize_to: r.u32()? as usize,
            crop_to: r.u32()? as usize,
        };
        let seed = r.u64()?;
        let n_stats = r.u32()? as usize;
        if n_stats * 16 > bytes.len() {
            return Err(bad(format!("implausible normalization length {n_stats}")));
        }
        let input_norm = InputNorm {
            shift: (0..n_stats).map(|_| r.f64()).collect::<Result<_>>()?,
            scale: (0..n_stats).map(|_| r.f64()).collect::<Result<_>>()?,
        };
        let n_layers = r.u32()? as usize;
        if n_layers == 0 {
            return Err(bad("no layers"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let inputs = r.u32()? as usize;
            let outputs = r.u32()? as usize;
            let activation = Activation::from_tag(r.u8()?)
                .ok_or_else(|| bad(format!("layer {i}: unknown activation")))?;
            let count = inputs
                .checked_mul(outputs)
                .filter(|c| c * 8 <= bytes.len())
                .ok_or_else(|| bad(format!("layer {i}: implausible shape {inputs}x{outputs}")))?;
            let weights = (0..count).map(|_| r.f64()).collect::<Result<_>>()?;
            let bias = (0..outputs).map(|_| r.f64()).collect::<Result<_>>()?;
            layers.push(Dense {
                inputs,
                outputs,
                weights,
                bias,
                activation,
            });
        }
        let echo_len = r.u32()? as usize;
        let config_echo = String::from_utf8(r.take(echo_len)?.to_vec())
            .map_err(|_| bad("config echo is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let head = layers.pop().expect("n_layers > 0");
        let params = ModelParams {
            scale,
            input_norm,
            backbone: layers,
            head,
            geometry,
            seed,
        };
        params.validate().map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            params,
            config_echo,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
