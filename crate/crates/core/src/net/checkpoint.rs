//! Versioned binary checkpoint container: topology, raw parameters as
//! row-major 64-bit floats, the training config echo, and the seed.
//! Identical training runs produce byte-identical files.

use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Layer, NetworkParams, TrainingConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PDNZCK01";

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &NetworkParams,
    config: &TrainingConfig,
) -> Result<()> {
    let path = path.as_ref();
    if config.topology != params.topology {
        return Err(Error::Checkpoint("config/params topology mismatch".into()));
    }
    let config_json =
        serde_json::to_vec(config).map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&config.rng_seed.to_le_bytes());
    out.extend_from_slice(&(params.topology.len() as u32).to_le_bytes());
    for &dim in &params.topology {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    for layer in &params.layers {
        for v in layer.raw_weights.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in layer.raw_bias.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(Error::io(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetworkParams, TrainingConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let mut cur = std::io::Cursor::new(&bytes[..]);
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));

    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic (not a checkpoint or wrong version)"));
    }
    let mut u64buf = [0u8; 8];
    cur.read_exact(&mut u64buf).map_err(|_| bad("truncated"))?;
    let seed = u64::from_le_bytes(u64buf);
    let mut u32buf = [0u8; 4];
    cur.read_exact(&mut u32buf).map_err(|_| bad("truncated"))?;
    let depth = u32::from_le_bytes(u32buf) as usize;
    if !(2..=64).contains(&depth) {
        return Err(bad("implausible topology length"));
    }
    let mut topology = Vec::with_capacity(depth);
    for _ in 0..depth {
        cur.read_exact(&mut u32buf).map_err(|_| bad("truncated"))?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        if dim == 0 || dim > 1 << 20 {
            return Err(bad("implausible layer width"));
        }
        topology.push(dim);
    }
    cur.read_exact(&mut u32buf).map_err(|_| bad("truncated"))?;
    let json_len = u32::from_le_bytes(u32buf) as usize;
    // Validate the full file size against the header before allocating
    // anything sized by untrusted fields.
    let param_bytes: u64 = topology
        .windows(2)
        .map(|w| (w[0] as u64 * w[1] as u64 + w[1] as u64) * 8)
        .sum();
    let expected = 8 + 8 + 4 + 4 * depth as u64 + 4 + json_len as u64 + param_bytes;
    if bytes.len() as u64 != expected {
        return Err(bad("header disagrees with file size"));
    }
    let mut json = vec![0u8; json_len];
    cur.read_exact(&mut json).map_err(|_| bad("truncated"))?;
    let config: TrainingConfig =
        serde_json::from_slice(&json).map_err(|e| bad(&format!("config decode: {e}")))?;
    if config.topology != topology {
        return Err(bad("embedded config disagrees with topology header"));
    }
    if config.rng_seed != seed {
        return Err(bad("embedded config disagrees with seed header"));
    }

    let mut layers = Vec::with_capacity(depth - 1);
    let mut f64buf = [0u8; 8];
    for w in topology.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let mut weights = Array2::zeros((fan_out, fan_in));
        for v in weights.iter_mut() {
            cur.read_exact(&mut f64buf).map_err(|_| bad("truncated parameters"))?;
            *v = f64::from_le_bytes(f64buf);
        }
        let mut bias = Array1::zeros(fan_out);
        for v in bias.iter_mut() {
            cur.read_exact(&mut f64buf).map_err(|_| bad("truncated parameters"))?;
            *v = f64::from_le_bytes(f64buf);
        }
        layers.push(Layer {
            raw_weights: weights,
            raw_bias: bias,
        });
    }
    if cur.position() != bytes.len() as u64 {
        return Err(bad("trailing bytes"));
    }
    let params = NetworkParams { layers, topology };
    if params.layers.iter().any(|l| {
        l.raw_weights.iter().any(|v| !v.is_finite()) || l.raw_bias.iter().any(|v| !v.is_finite())
    }) {
        return Err(bad("non-finite parameters"));
    }
    Ok((params, config))
}
