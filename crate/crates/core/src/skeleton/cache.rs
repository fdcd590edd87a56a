//! On-disk storage of preprocessed samples.
//!
//! A cached tensor file is the magic `ACTC1`, four little-endian `u32`
//! shape entries, the label as a little-endian `i32`, then the row-major data
//! as little-endian `f64`. A dataset directory holds one such file per sample
//! plus a `manifest.json` listing files, labels and metadata in order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SampleMeta, SkeletonTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"ACTC1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One row of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
    pub subject: Option<u32>,
    pub camera: Option<u32>,
    pub setup: Option<u32>,
    pub replication: Option<u32>,
}

fn encode_cached(sample: &SkeletonTensor) -> Result<Vec<u8>> {
    let shape = sample.data.shape();
    if shape.len() != 4 {
        return Err(Error::dim("write_cached", "rank", "4", shape.len().to_string()));
    }
    let label = i32::try_from(sample.label).map_err(|_| Error::contract("label does not fit in i32"))?;
    let mut out = Vec::with_capacity(5 + 16 + 4 + 8 * sample.data.len());
    out.extend_from_slice(MAGIC);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::contract("dimension does not fit in u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&label.to_le_bytes());
    for x in sample.data.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn decode_cached(bytes: &[u8], path: &Path) -> Result<(Tensor, usize)> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 25 || &bytes[..5] != MAGIC {
        return Err(bad("missing ACTC1 header".into()));
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
    let shape: Vec<usize> = (0..4).map(|k| u32::from_le_bytes(word(5 + 4 * k)) as usize).collect();
    let label = i32::from_le_bytes(word(21));
    if label < 0 {
        return Err(bad(format!("negative label {label}")));
    }
    let n: usize = shape.iter().product();
    let body = &bytes[25..];
    if body.len() != 8 * n {
        return Err(bad(format!("expected {} data bytes for shape {shape:?}, found {}", 8 * n, body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((Tensor::new(shape, data)?, label as usize))
}

pub fn write_cached(path: &Path, sample: &SkeletonTensor) -> Result<()> {
    let bytes = encode_cached(sample)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a cached tensor; metadata is not stored in the file and comes back empty.
pub fn read_cached(path: &Path) -> Result<SkeletonTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (data, label) = decode_cached(&bytes, path)?;
    Ok(SkeletonTensor {
        data,
        label,
        meta: SampleMeta::default(),
    })
}

/// Writes `samples` as `000000.actc`, `000001.actc`, .. plus the manifest.
pub fn save_dataset(dir: &Path, samples: &[SkeletonTensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{i:06}.actc");
        write_cached(&dir.join(&file), s)?;
        manifest.push(ManifestEntry {
            file,
            label: s.label,
            subject: s.meta.subject,
            camera: s.meta.camera,
            setup: s.meta.setup,
            replication: s.meta.replication,
        });
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        context: "dataset manifest".into(),
        source,
    })?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Loads every sample listed in `dir/manifest.json`, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SkeletonTensor>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    manifest
        .into_iter()
        .map(|entry| {
            let file = dir.join(&entry.file);
            let mut sample = read_cached(&file)?;
            if sample.label != entry.label {
                return Err(Error::Format {
                    path: file,
                    message: format!("label {} disagrees with manifest label {}", sample.label, entry.label),
                });
            }
            sample.meta = SampleMeta {
                setup: entry.setup,
                camera: entry.camera,
                subject: entry.subject,
                replication: entry.replication,
            };
            Ok(sample)
        })
        .collect()
}
