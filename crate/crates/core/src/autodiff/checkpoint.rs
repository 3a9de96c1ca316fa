//! Binary network checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "DYNODE1"            7 bytes magic
//! activation           u8   (0 tanh, 1 relu)
//! output activation    u8   (0 identity, 1 tanh)
//! layer count          u32
//! per layer            u32 out, u32 in
//! per layer            out*in weights (row-major), then out biases, as f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, Layer, MlpParams, OutputActivation, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 7] = b"DYNODE1";

pub fn encode(params: &MlpParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.push(match params.activation {
        Activation::Tanh => 0,
        Activation::Relu => 1,
    });
    out.push(match params.output_activation {
        OutputActivation::Identity => 0,
        OutputActivation::Tanh => 1,
    });
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        out.extend_from_slice(&(l.outputs() as u32).to_le_bytes());
        out.extend_from_slice(&(l.inputs() as u32).to_le_bytes());
    }
    for l in &params.layers {
        for v in l.weight.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<MlpParams, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err("bad magic".into());
    }
    let activation = match c.take(1)?[0] {
        0 => Activation::Tanh,
        1 => Activation::Relu,
        x => return Err(format!("unknown activation tag {x}")),
    };
    let output_activation = match c.take(1)?[0] {
        0 => OutputActivation::Identity,
        1 => OutputActivation::Tanh,
        x => return Err(format!("unknown output activation tag {x}")),
    };
    let n = c.u32()? as usize;
    if n == 0 || n > 1024 {
        return Err(format!("implausible layer count {n}"));
    }
    let dims = (0..n).map(|_| Ok((c.u32()? as usize, c.u32()? as usize))).collect::<std::result::Result<Vec<_>, String>>()?;
    let mut layers = Vec::with_capacity(n);
    for (out, inp) in dims {
        let w = (0..out * inp).map(|_| c.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let b = (0..out).map(|_| c.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        layers.push(Layer {
            weight: Tensor::new(vec![out, inp], w).map_err(|e| e.to_string())?,
            bias: Tensor::new(vec![out], b).map_err(|e| e.to_string())?,
        });
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    MlpParams::from_layers(layers, activation, output_activation).map_err(|e| e.to_string())
}

pub fn save(params: &MlpParams, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<MlpParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::format(path, reason))
}
