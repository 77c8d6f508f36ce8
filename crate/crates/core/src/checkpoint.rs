//! Named-parameter checkpoint files.
//!
//! Layout: a format tag, a `u32` byte length and a JSON header whose object
//! keys are sorted, a `u32` record count, then per record a `u32` name
//! length, the UTF-8 name, and the tensor in its own serialized form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{read_u32, Real, Tensor};

/// Translator checkpoints.
pub const MODEL_TAG: &[u8] = b"MTCKPT1";
/// Surrogate detector checkpoints.
pub const DETECTOR_TAG: &[u8] = b"MTDET1";

fn u32_len(n: usize) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("length {n} does not fit the checkpoint format")))
}

pub fn write_checkpoint<T: Real>(out: &mut impl Write, tag: &[u8], header: &Value, store: &ParamStore<T>) -> Result<()> {
    // serde_json maps are ordered by key, so this is canonical.
    let header = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(tag);
    buf.extend_from_slice(&u32_len(header.len())?);
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&u32_len(store.len())?);
    for (name, tensor) in store.iter() {
        buf.extend_from_slice(&u32_len(name.len())?);
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&tensor.to_bytes());
    }
    out.write_all(&buf).map_err(|e| Error::Format(e.to_string()))
}

pub type Records<T> = Vec<(String, Tensor<T>)>;

pub fn read_checkpoint<T: Real>(input: &mut impl Read, tag: &[u8]) -> Result<(Value, Records<T>)> {
    let mut found = vec![0u8; tag.len()];
    input
        .read_exact(&mut found)
        .map_err(|_| Error::Format("truncated checkpoint tag".into()))?;
    if found != tag {
        return Err(Error::Format(format!(
            "expected checkpoint tag {:?}, found {:?}",
            String::from_utf8_lossy(tag),
            String::from_utf8_lossy(&found)
        )));
    }
    let header = read_bytes(input, "header")?;
    let header: Value = serde_json::from_slice(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let count = read_u32(input)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(input, "record name")?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let tensor = Tensor::read_from(input)?;
        records.push((name, tensor));
    }
    Ok((header, records))
}

fn read_bytes(input: &mut impl Read, what: &str) -> Result<Vec<u8>> {
    let len = read_u32(input)? as usize;
    let mut buf = Vec::new();
    input
        .take(len as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    if buf.len() != len {
        return Err(Error::Format(format!("truncated checkpoint {what}")));
    }
    Ok(buf)
}

pub fn save_file<T: Real>(path: &Path, tag: &[u8], header: &Value, store: &ParamStore<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_checkpoint(&mut out, tag, header, store)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_file<T: Real>(path: &Path, tag: &[u8]) -> Result<(Value, Records<T>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file), tag)
}
