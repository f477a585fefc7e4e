//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ISFCKPT\0" | u32 version | u64 meta_len | meta (JSON)
//! u64 tensor_count
//! per tensor: u32 path_len | path | u32 rank | u64 dims[rank] | f64 data[numel]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::features::FeatureSpec;
use super::model::ModelState;
use crate::data::ScalerState;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ISFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: NetworkConfig,
    features: FeatureSpec,
    scaler: ScalerState,
    base_year: i32,
}

pub fn write_state<W: Write>(state: &ModelState, mut w: W) -> Result<()> {
    let meta = Meta {
        config: state.config.clone(),
        features: state.features.clone(),
        scaler: state.scaler.clone(),
        base_year: state.base_year,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut buf = Vec::with_capacity(64 + json.len() + 8 * state.params.scalar_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(state.params.len() as u64).to_le_bytes());
    for (name, t) in state.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} too large")))
    }
}

pub fn read_state<R: Read>(mut r: R) -> Result<ModelState> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(MAGIC.len(), "magic").ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let meta_len = c.len("metadata length")?;
    let meta: Meta = serde_json::from_slice(c.take(meta_len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut features = meta.features;
    features.rebuild_lookups();
    meta.config.validate()?;

    // The expected parameter set, used to validate names and shapes.
    let template = ModelState::fresh_params(&meta.config, &features, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = c.len("tensor count")?;
    if count != template.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, the configuration implies {}",
            template.len()
        )));
    }
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = c.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(c.take(n, "parameter name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.len("dimension")?);
        }
        let expected = template
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
        if expected.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {shape:?}, expected {:?}",
                expected.shape()
            )));
        }
        let numel = expected.numel();
        let raw = c.take(numel * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params
            .insert(name.clone(), Tensor::new(shape, data)?.with_grad())
            .map_err(|_| Error::Checkpoint(format!("parameter {name} stored twice")))?;
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            buf.len() - c.pos
        )));
    }
    // Restore the canonical parameter order.
    let mut ordered = ParamStore::new();
    for name in template.names() {
        let t = params.get(name).expect("validated above").clone();
        ordered.insert(name.clone(), t)?;
    }
    Ok(ModelState {
        config: meta.config,
        features,
        scaler: meta.scaler,
        base_year: meta.base_year,
        params: ordered,
    })
}

pub fn save_state(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_state(state, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_state(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_state(BufReader::new(f))
}
