//! Binary checkpoint: `STEMCKPT`, u32 version, u64 length-prefixed JSON
//! header, then named tensor records
//! `u32 name_len | name | u8 dtype | u32 rank | u64 dims… | f64 values…`,
//! all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"STEMCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: usize,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Model configuration, training step, free-form metadata and named tensors
/// (model parameters plus any optimizer state).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: usize,
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: usize) -> Self {
        Checkpoint {
            config: model.config().clone(),
            step,
            extra: serde_json::Value::Null,
            tensors: model
                .named_params()
                .into_iter()
                .map(|(n, t)| {
                    (
                        n,
                        Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("same shape"),
                    )
                })
                .collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = build_model(&self.config, 0)?;
        model.load_params(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(model)
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header {
        model: ckpt.config.clone(),
        step: ckpt.step,
        extra: ckpt.extra.clone(),
    })?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (name, t) in &ckpt.tensors {
        let bytes = name.as_bytes();
        let len = u32::try_from(bytes.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &dim in t.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

/// Reads one record's name length, or `None` at a clean end of input.
fn read_record_start<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(Error::Format("truncated record header".into()))
            };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let magic: [u8; 8] = read_exact(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, "version")?);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(read_exact(&mut r, "header length")?) as usize;
    let mut header = vec![0u8; hlen];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut tensors = Vec::new();
    while let Some(nlen) = read_record_start(&mut r)? {
        let mut name = vec![0u8; nlen as usize];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated tensor name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let [dtype] = read_exact::<_, 1>(&mut r, "dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!(
                "tensor {name}: unknown dtype tag {dtype}"
            )));
        }
        let rank = u32::from_le_bytes(read_exact(&mut r, "rank")?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(&mut r, "dims")?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("tensor {name}: truncated values: {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint {
        config: header.model,
        step: header.step,
        extra: header.extra,
        tensors,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
