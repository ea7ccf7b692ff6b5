//! `BRW1` weight files.
//!
//! Layout: the 4-byte magic `BRW1`, a little-endian `u64` byte length of the
//! JSON manifest, the UTF-8 manifest itself, then the raw little-endian `f32`
//! blob. The manifest maps each tensor name to
//! `{"dtype": "f32", "shape": [..], "byte_offset": n, "kind": "param"|"buffer"}`
//! with `byte_offset` counted from the start of the blob.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BRW1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    #[serde(default = "default_kind")]
    pub kind: String,
}

fn default_kind() -> String {
    "param".to_string()
}

pub fn write_weights<W: Write>(store: &ParamStore<f32>, mut w: W) -> Result<()> {
    let mut manifest = BTreeMap::new();
    let mut blob = Vec::new();
    for (name, t) in store.all() {
        manifest.insert(
            name.to_string(),
            TensorEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                byte_offset: blob.len() as u64,
                kind: if store.is_param(name) { "param" } else { "buffer" }.into(),
            },
        );
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&blob)?;
    Ok(())
}

pub fn read_weights<R: Read>(mut r: R) -> Result<ParamStore<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::WeightFormat(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: BTreeMap<String, TensorEntry> = serde_json::from_slice(&json)?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;

    let mut store = ParamStore::new();
    for (name, e) in manifest {
        if e.dtype != "f32" {
            return Err(Error::WeightFormat(format!("`{name}`: unsupported dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + 4 * n;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::WeightFormat(format!("`{name}` exceeds blob length")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(&e.shape, data)?;
        match e.kind.as_str() {
            "param" => store.insert_param(name, t)?,
            "buffer" => store.insert_buffer(name, t)?,
            k => return Err(Error::WeightFormat(format!("`{name}`: unknown kind {k}"))),
        }
    }
    Ok(store)
}

pub fn save_weights(store: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_weights(store, std::io::BufWriter::new(f))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    read_weights(std::io::BufReader::new(f))
}
