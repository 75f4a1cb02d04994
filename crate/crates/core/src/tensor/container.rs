//! Little-endian binary container for named `f32` tensors.
//!
//! ```text
//! magic[4] | version u32 | count u32 |
//!   count x ( name_len u32 | name utf8 | rank u32 | dims u32 x rank | f32 x prod(dims) )
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"HDLW";
pub const CACHE_MAGIC: [u8; 4] = *b"HDLT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor<f32>) -> Self {
        Self {
            name: name.into(),
            tensor,
        }
    }
}

fn put_u32(out: &mut impl Write, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> TensorError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        TensorError::Format("truncated container".into())
    } else {
        TensorError::Io(e)
    }
}

pub fn write_container(out: &mut impl Write, magic: [u8; 4], entries: &[NamedTensor]) -> Result<()> {
    out.write_all(&magic)?;
    put_u32(out, FORMAT_VERSION)?;
    put_u32(out, entries.len() as u32)?;
    for e in entries {
        put_u32(out, e.name.len() as u32)?;
        out.write_all(e.name.as_bytes())?;
        put_u32(out, e.tensor.rank() as u32)?;
        for &d in e.tensor.shape() {
            put_u32(out, d as u32)?;
        }
        let mut buf = Vec::with_capacity(e.tensor.numel() * 4);
        for v in e.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_container(input: &mut impl Read, magic: [u8; 4]) -> Result<Vec<NamedTensor>> {
    let mut m = [0u8; 4];
    input.read_exact(&mut m).map_err(truncated)?;
    if m != magic {
        return Err(TensorError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = get_u32(input)?;
    if version != FORMAT_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = get_u32(input)?;
    let mut entries = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = get_u32(input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Format("name is not UTF-8".into()))?;
        let rank = get_u32(input)? as usize;
        let dims = (0..rank).map(|_| get_u32(input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|e| TensorError::Format(format!("{name}: {e}")))?;
        entries.push(NamedTensor { name, tensor });
    }
    Ok(entries)
}

/// Hex SHA-256 of the serialized weights container.
pub fn fingerprint(entries: &[NamedTensor]) -> String {
    use sha2::{Digest, Sha256};
    let mut buf = Vec::new();
    write_container(&mut buf, WEIGHTS_MAGIC, entries).expect("writing to memory");
    Sha256::digest(&buf).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_weights(path: &Path, entries: &[NamedTensor]) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, WEIGHTS_MAGIC, entries)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path)?;
    read_container(&mut bytes.as_slice(), WEIGHTS_MAGIC)
}
