//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.txt     model configuration, key=value
//! <dir>/manifest.txt   one "key shape offset" line per tensor, shape as 3x3x1x1
//! <dir>/tensors.bin    concatenated tensor records; offset is the byte start
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::config::ModelConfig;
use super::network::Network;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const CONFIG: &str = "config.txt";
const MANIFEST: &str = "manifest.txt";
const BLOB: &str = "tensors.bin";

/// Writes `store` (parameters and running statistics) with its config.
pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut manifest = String::new();
    for (key, t) in store.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{key} {} {}\n", shape.join("x"), blob.len()));
        t.write_to(&mut blob)?;
    }
    // blob first so a manifest never points past the end of its data
    fs::File::create(dir.join(BLOB))?.write_all(&blob)?;
    fs::write(dir.join(MANIFEST), manifest)?;
    fs::write(dir.join(CONFIG), cfg.to_kv())?;
    Ok(())
}

/// Every tensor of a checkpoint by key, validated against the manifest.
pub fn read_tensors(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let blob = fs::read(dir.join(BLOB))?;
    let mut out = BTreeMap::new();
    for (n, line) in manifest.lines().enumerate() {
        let bad = |why: &str| Error::format(format!("manifest line {}: {why}", n + 1));
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [key, shape, offset] = parts[..] else {
            return Err(bad("expected `key shape offset`"));
        };
        let shape = shape
            .split('x')
            .map(|e| e.parse::<usize>().map_err(|_| bad("bad shape")))
            .collect::<Result<Vec<_>>>()?;
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        let record = blob
            .get(offset..)
            .ok_or_else(|| bad("offset past end of tensor data"))?;
        let t = Tensor::read_from(&mut &record[..])?;
        if t.shape() != shape {
            return Err(bad("shape disagrees with tensor record"));
        }
        if out.insert(key.to_string(), t).is_some() {
            return Err(bad("duplicate key"));
        }
    }
    Ok(out)
}

/// Loads a checkpoint into a freshly built network, requiring exactly the
/// key set and shapes that its config implies.
pub fn load_checkpoint(dir: &Path) -> Result<(Network, ParamStore)> {
    let cfg = ModelConfig::from_kv(&fs::read_to_string(dir.join(CONFIG))?)?;
    let net = Network::new(&cfg)?;
    let mut store = net.build(0)?;
    let tensors = read_tensors(dir)?;
    if tensors.len() != store.len() {
        return Err(Error::KeyMismatch(format!(
            "checkpoint has {} tensors, config implies {}",
            tensors.len(),
            store.len()
        )));
    }
    for (k, t) in tensors {
        store.set(&k, t)?;
    }
    Ok((net, store))
}

/// Outcome of [`transfer_weights`]; keys are sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    /// Present in both with different shapes; target value kept.
    pub skipped_shape: Vec<String>,
    /// Target keys absent from the source; target value kept.
    pub missing: Vec<String>,
}

/// Copies every source tensor whose key exists in `target` with the same
/// shape. Any read error leaves `target` untouched.
pub fn transfer_weights(target: &mut ParamStore, source_dir: &Path) -> Result<TransferReport> {
    let source = read_tensors(source_dir)?;
    transfer_from(target, &source)
}

pub fn transfer_from(
    target: &mut ParamStore,
    source: &BTreeMap<String, Tensor>,
) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    let keys: Vec<String> = target.keys().map(String::from).collect();
    for k in keys {
        match source.get(&k) {
            None => report.missing.push(k),
            Some(t) if t.shape() != target.get(&k)?.shape() => report.skipped_shape.push(k),
            Some(t) => {
                target.set(&k, t.clone())?;
                report.copied.push(k);
            }
        }
    }
    Ok(report)
}
