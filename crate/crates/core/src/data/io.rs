//! Flat binary dataset files.
//!
//! Layout: the 8-byte magic `FOCTTADS`, a little-endian `u32` header length,
//! a JSON header, then all pixels as little-endian `f32` followed by all
//! labels as little-endian `u32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FOCTTADS";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    image_shape: Vec<usize>,
    count: usize,
    classes: usize,
    seed: u64,
}

/// Pixels are narrowed to `f32`.
pub fn export_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        image_shape: data.image_shape().to_vec(),
        count: data.len(),
        classes: data.classes(),
        seed: data.seed(),
    })?;
    let mut bytes = Vec::with_capacity(12 + header.len() + data.pixels().len() * 4 + data.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for &p in data.pixels() {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    for &l in data.labels() {
        bytes.extend_from_slice(&(l as u32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn import_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let bad = |why: &str| Error::Artifact(format!("{}: {why}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a dataset file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12 + hlen..).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| bad(&format!("bad header: {e}")))?;
    let npix = header.count * header.image_shape.iter().product::<usize>();
    if body.len() != 4 * (npix + header.count) {
        return Err(bad("payload size does not match header"));
    }
    let words = body
        .chunks_exact(4)
        .map(|c| <[u8; 4]>::try_from(c).unwrap());
    let pixels = words.clone().take(npix).map(|w| f64::from(f32::from_le_bytes(w))).collect();
    let labels = words.skip(npix).map(|w| u32::from_le_bytes(w) as usize).collect();
    Dataset::new(header.image_shape, header.classes, header.seed, pixels, labels)
        .map_err(|e| bad(&e.to_string()))
}
