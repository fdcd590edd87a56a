//! Checkpoint files (`ACPK1`).
//!
//! ```text
//! "ACPK1"
//! u32 length, canonical JSON {"epoch", "model", "train"} (sorted keys)
//! u32 parameter count
//! per parameter: u32 name length, UTF-8 name, u32 rank, u32 dims..., f64 values
//! ```
//!
//! All integers and floats are little-endian. Files are written to a
//! temporary sibling and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActionCapsNet, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

const MAGIC: &[u8; 5] = b"ACPK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    epoch: usize,
    model: ModelConfig,
    train: TrainConfig,
}

/// Contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: ActionCapsNet,
    pub train: TrainConfig,
    /// Last completed epoch.
    pub epoch: usize,
}

fn json_error(context: &str) -> impl FnOnce(serde_json::Error) -> Error + '_ {
    move |source| Error::Json {
        context: context.to_string(),
        source,
    }
}

/// Serializes through `serde_json::Value`, whose maps keep keys sorted.
pub(crate) fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(json_error("canonical json"))?;
    serde_json::to_string(&v).map_err(json_error("canonical json"))
}

fn push_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::contract(format!("{n} does not fit in u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(net: &ActionCapsNet, train: &TrainConfig, epoch: usize) -> Result<Vec<u8>> {
    let header = canonical_json(&Header {
        epoch,
        model: net.config.clone(),
        train: train.clone(),
    })?;
    let mut out = Vec::with_capacity(net.params.scalar_count() * 8 + header.len() + 64);
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, header.len())?;
    out.extend_from_slice(header.as_bytes());
    push_u32(&mut out, net.params.len())?;
    for (name, t) in net.params.iter() {
        push_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            push_u32(&mut out, d)?;
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.bad(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(r.bad("missing ACPK1 header"));
    }
    let len = r.u32("header length")?;
    let header: Header = serde_json::from_slice(r.take(len, "header")?).map_err(json_error("checkpoint header"))?;
    let count = r.u32("parameter count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| r.bad("tensor too large"))?, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(r.bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let net = ActionCapsNet {
        config: header.model,
        params,
    };
    net.check_layout()?;
    Ok(Checkpoint {
        net,
        train: header.train,
        epoch: header.epoch,
    })
}

/// Writes atomically: a `.tmp` sibling is written, then renamed over `path`.
pub fn save_checkpoint(path: &Path, net: &ActionCapsNet, train: &TrainConfig, epoch: usize) -> Result<()> {
    let bytes = encode_checkpoint(net, train, epoch)?;
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
