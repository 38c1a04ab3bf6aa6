//! Versioned binary model files.
//!
//! All integers are little-endian `u32` unless noted.
//!
//! ```text
//! magic          8 bytes  "OCCNETMD"
//! version        u32      FORMAT_VERSION
//! channels       u32
//! input_size     u32
//! filters        3 × u32
//! kernel         u32
//! padding        u32
//! classes        u32
//! tensor_count   u32      8
//! table          tensor_count × { name_len u8, name (UTF-8), rank u8, rank × u32 dims }
//! parameters     f32 LE values of every tensor in table order
//! momentum       f32 LE values of every momentum buffer in table order
//! ```

use std::fs;
use std::path::Path;

use super::{Architecture, CnnModel, LayerParams, ModelError, Params, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"OCCNETMD";
pub const FORMAT_VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_model(model: &CnnModel<f32>) -> Vec<u8> {
    let arch = model.architecture();
    let mut buf = Vec::with_capacity(32 + 8 * model.params().num_values());
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, FORMAT_VERSION as usize);
    for v in [arch.channels, arch.input_size]
        .into_iter()
        .chain(arch.filters)
        .chain([arch.kernel, arch.padding, arch.classes])
    {
        push_u32(&mut buf, v);
    }
    let named: Vec<_> = model.params().named().collect();
    push_u32(&mut buf, named.len());
    for (name, t) in &named {
        buf.push(name.len() as u8);
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            push_u32(&mut buf, d);
        }
    }
    for params in [model.params(), model.velocity()] {
        for (_, t) in params.named() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(ModelError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(ModelError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(ModelError::Truncated)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<CnnModel<f32>> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            ModelError::Truncated
        } else {
            ModelError::BadMagic
        });
    }
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let channels = r.u32()?;
    let input_size = r.u32()?;
    let filters = [r.u32()?, r.u32()?, r.u32()?];
    let arch = Architecture {
        channels,
        input_size,
        filters,
        kernel: r.u32()?,
        padding: r.u32()?,
        classes: r.u32()?,
    };
    arch.validate()
        .map_err(|e| ModelError::Malformed(format!("architecture: {e}")))?;

    let expected: Vec<(String, Vec<usize>)> = arch
        .param_shapes()
        .into_iter()
        .zip(super::LAYER_NAMES)
        .flat_map(|((w, b), name)| [(format!("{name}.weight"), w), (format!("{name}.bias"), b)])
        .collect();
    let count = r.u32()?;
    if count != expected.len() {
        return Err(ModelError::Malformed(format!(
            "expected {} tensors, table lists {count}",
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        let len = r.u8()? as usize;
        let found = String::from_utf8_lossy(r.take(len)?).into_owned();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if &found != name || &dims != shape {
            return Err(ModelError::Malformed(format!(
                "table entry {found} {dims:?} does not match {name} {shape:?}"
            )));
        }
    }
    let read_params = |r: &mut Reader| -> Result<Params<f32>> {
        let mut layers = Vec::with_capacity(4);
        for pair in expected.chunks_exact(2) {
            let (w_shape, b_shape) = (&pair[0].1, &pair[1].1);
            let w = r.f32s(w_shape.iter().product())?;
            let b = r.f32s(b_shape.iter().product())?;
            layers.push(LayerParams {
                weights: Tensor::new(w_shape, w)?,
                biases: Tensor::new(b_shape, b)?,
            });
        }
        Ok(Params {
            layers: layers.try_into().expect("four layers"),
        })
    };
    let params = read_params(&mut r)?;
    let velocity = read_params(&mut r)?;
    if r.pos != bytes.len() {
        return Err(ModelError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let mut model = CnnModel::from_params(arch, params)?;
    model.set_velocity(velocity)?;
    Ok(model)
}

pub fn save_model(model: &CnnModel<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CnnModel<f32>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ModelError::NotFound(path.display().to_string()),
        _ => ModelError::Io(e),
    })?;
    decode_model(&bytes)
}
