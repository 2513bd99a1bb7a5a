//! Single-file checkpoints: one line of UTF-8 JSON manifest, a newline, then
//! every tensor as little-endian `f64` in manifest order. Entry offsets are
//! byte offsets from the start of the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "mdfn-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Element type of the model that wrote the file; the payload is f64
    /// regardless.
    pub scalar: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub entries: Vec<ManifestEntry>,
}

pub fn write_checkpoint<'a, T: Scalar, W: Write>(
    mut out: W,
    meta: serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let bytes = 8 * t.numel() as u64;
            let e = ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                bytes,
            };
            offset += bytes;
            e
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        scalar: T::NAME.into(),
        meta,
        entries,
    };
    serde_json::to_writer(&mut out, &manifest)?;
    out.write_all(b"\n")?;
    for (_, t) in tensors {
        for v in t.data() {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_header<R: Read>(reader: &mut R) -> Result<Manifest> {
    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        if reader.read(&mut byte)? == 0 {
            return Err(Error::Checkpoint("missing manifest terminator".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
    }
    let manifest: Manifest = serde_json::from_slice(&header)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

pub fn read_checkpoint<T: Scalar, R: Read>(input: R) -> Result<(Manifest, Vec<(String, Tensor<T>)>)> {
    let mut reader = BufReader::new(input);
    let manifest = read_header(&mut reader)?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let numel: usize = e.shape.iter().product();
        let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
        if e.bytes != 8 * numel as u64 || end > payload.len() {
            return Err(Error::Checkpoint(format!("entry {} out of bounds", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest, tensors))
}

pub fn save<'a, T: Scalar>(
    path: &Path,
    meta: serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    write_checkpoint(file, meta, tensors)
}

/// Manifest only, without reading the payload.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    read_header(&mut BufReader::new(File::open(path)?))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Manifest, Vec<(String, Tensor<T>)>)> {
    read_checkpoint(File::open(path)?)
}
