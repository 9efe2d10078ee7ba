//! Binary checkpoints: `"VTFM"`, `u32` version, the model configuration,
//! then every parameter array in declaration order as `u32` rank, `u32`
//! dims and `f64` data, all little-endian.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Pooling, TransformerParams};
use crate::seed;

pub const MAGIC: &[u8; 4] = b"VTFM";
pub const VERSION: u32 = 1;

pub fn encode(cfg: &ModelConfig, params: &TransformerParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.num_parameters());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    for v in [
        cfg.d_in,
        cfg.d_model,
        cfg.layers,
        cfg.heads,
        cfg.max_positions,
        cfg.num_labels,
        cfg.num_tasks,
    ] {
        out.extend((v as u32).to_le_bytes());
    }
    out.extend(cfg.mlp_ratio.to_le_bytes());
    out.push(u8::from(cfg.use_positional));
    out.push(match cfg.pooling {
        Pooling::Cls => 0,
        Pooling::Mean => 1,
    });
    for t in params.tensors() {
        out.extend((t.data.ndim() as u32).to_le_bytes());
        for &d in t.data.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for x in t.data.iter() {
            out.extend(x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    input: &'a [u8],
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.input.read_exact(&mut buf).map_err(|_| Error::Parse {
            location: "checkpoint".into(),
            message: "truncated checkpoint".into(),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, TransformerParams)> {
    let bad = |m: String| Error::Parse {
        location: "checkpoint".into(),
        message: m,
    };
    let mut r = Reader { input: bytes };
    if &r.take::<4>()? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let mlp_ratio = f64::from_le_bytes(r.take::<8>()?);
    let [use_positional, pooling] = r.take::<2>()?;
    let cfg = ModelConfig {
        d_in: dims[0],
        d_model: dims[1],
        layers: dims[2],
        heads: dims[3],
        max_positions: dims[4],
        num_labels: dims[5],
        num_tasks: dims[6],
        mlp_ratio,
        use_positional: use_positional != 0,
        pooling: match pooling {
            0 => Pooling::Cls,
            1 => Pooling::Mean,
            other => return Err(bad(format!("unknown pooling tag {other}"))),
        },
    };
    cfg.validate()?;
    let mut params = TransformerParams::zeros(&cfg);
    for mut t in params.tensors_mut() {
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != t.data.shape() {
            return Err(bad(format!("{}: shape {:?}, expected {:?}", t.name, shape, t.data.shape())));
        }
        for x in t.data.iter_mut() {
            *x = f64::from_le_bytes(r.take::<8>()?);
        }
    }
    if !r.input.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.input.len())));
    }
    Ok((cfg, params))
}

/// JSON sidecar written next to each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub digest: String,
    pub provenance: serde_json::Value,
}

/// Writes `path` and `path.json`; returns the checkpoint digest.
pub fn save(path: impl AsRef<Path>, cfg: &ModelConfig, params: &TransformerParams, provenance: serde_json::Value) -> Result<String> {
    let path = path.as_ref();
    let bytes = encode(cfg, params);
    let digest = seed::digest_hex(&bytes);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let meta = CheckpointMeta {
        model: cfg.clone(),
        digest: digest.clone(),
        provenance,
    };
    crate::corpus::write_json(sidecar_path(path), &meta)?;
    Ok(digest)
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, TransformerParams, String)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (cfg, params) = decode(&bytes)?;
    Ok((cfg, params, seed::digest_hex(&bytes)))
}

pub fn load_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    crate::corpus::read_json(sidecar_path(path.as_ref()))
}
