//! Versioned little-endian checkpoint files.
//!
//! Layout: 8-byte magic, u32 version, the layer table, u64 epoch, a
//! velocity flag, a u64 length per block, then every block as f64 values.

use std::path::Path;

use super::{init_network, Activation, CnnConfig, CnnModel, LayerSpec, Momentum, Params, Pooling};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HYSTGCNN";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Parameter blocks, then running statistics, then optional velocity.
fn blocks<'a>(model: &'a CnnModel, velocity: Option<&'a Params>) -> Vec<&'a [f64]> {
    let mut out = model.params.blocks();
    for l in 0..model.running_mean.len() {
        out.push(&model.running_mean[l]);
        out.push(&model.running_var[l]);
    }
    if let Some(v) = velocity {
        out.extend(v.blocks());
    }
    out
}

pub fn encode(model: &CnnModel, optimizer: Option<&Momentum>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, model.config.input_size);
    put_u32(&mut out, model.config.layers.len());
    for l in &model.config.layers {
        put_u32(&mut out, l.out_channels);
        put_u32(&mut out, l.kernel);
        out.push(match l.activation {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        });
        out.push(u8::from(l.abs));
        match l.pool {
            Pooling::Average { window, stride, pad } => {
                out.push(0);
                put_u32(&mut out, window);
                put_u32(&mut out, stride);
                put_u32(&mut out, pad);
            }
            Pooling::Global => {
                out.push(1);
                out.extend_from_slice(&[0; 12]);
            }
        }
    }
    out.extend_from_slice(&(model.epoch as u64).to_le_bytes());
    out.push(u8::from(optimizer.is_some()));
    let bs = blocks(model, optimizer.map(|o| &o.velocity));
    put_u32(&mut out, bs.len());
    for b in &bs {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    }
    for b in &bs {
        for v in *b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CnnModel, Option<Momentum>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let input_size = r.u32()?;
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let out_channels = r.u32()?;
        let kernel = r.u32()?;
        let activation = match r.u8()? {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            a => return Err(Error::Checkpoint(format!("unknown activation code {a}"))),
        };
        let abs = r.u8()? != 0;
        let kind = r.u8()?;
        let (window, stride, pad) = (r.u32()?, r.u32()?, r.u32()?);
        let pool = match kind {
            0 => Pooling::Average { window, stride, pad },
            1 => Pooling::Global,
            k => return Err(Error::Checkpoint(format!("unknown pooling code {k}"))),
        };
        layers.push(LayerSpec {
            out_channels,
            kernel,
            activation,
            abs,
            pool,
        });
    }
    let config = CnnConfig { input_size, layers };
    let mut model = init_network(&config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    model.epoch = r.u64()? as usize;
    let has_velocity = r.u8()? != 0;
    let mut optimizer = has_velocity.then(|| Momentum::new(&model.params));

    let n_blocks = r.u32()?;
    let mut lengths = Vec::with_capacity(n_blocks.min(1024));
    for _ in 0..n_blocks {
        lengths.push(r.u64()? as usize);
    }
    {
        let expected: Vec<usize> = blocks(&model, optimizer.as_ref().map(|o| &o.velocity))
            .iter()
            .map(|b| b.len())
            .collect();
        if expected != lengths {
            return Err(Error::Checkpoint("dimension table does not match the layer table".into()));
        }
    }
    let mut targets: Vec<&mut [f64]> = model.params.blocks_mut();
    for (m, v) in model.running_mean.iter_mut().zip(model.running_var.iter_mut()) {
        targets.push(m);
        targets.push(v);
    }
    if let Some(o) = optimizer.as_mut() {
        targets.extend(o.velocity.blocks_mut());
    }
    for t in targets {
        for v in t.iter_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((model, optimizer))
}

pub fn save(path: impl AsRef<Path>, model: &CnnModel, optimizer: Option<&Momentum>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model, optimizer)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(CnnModel, Option<Momentum>)> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
