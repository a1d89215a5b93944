//! `BKCP` checkpoint files.
//!
//! Layout (little-endian): magic `BKCP`, `u32` version, `u32` length and
//! UTF-8 preset name, `u8` model kind, eight `u64` sizes (state, control,
//! latent, rank, lookback, horizon, kernel, hidden), four `f64`
//! hyperparameters (penalty weight, penalty margin, coupling period,
//! control std floor), the dataset normalization statistics as four
//! length-prefixed `f64` vectors, a `u64` tensor count and each tensor as
//! (`u32` name length, name, `u64` rows, `u64` cols, values), then the
//! trailer `BKCE`. A JSON sidecar next to the file carries training
//! metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelKind, ModelParams};
use super::ModelError;
use crate::datagen::NormStats;
use crate::numerics::Matrix;
use crate::simulators::Preset;

const MAGIC: &[u8; 4] = b"BKCP";
const TRAILER: &[u8; 4] = b"BKCE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub preset: Preset,
    pub params: ModelParams,
    pub stats: NormStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub preset: Preset,
    pub kind: ModelKind,
    pub epoch: usize,
    pub val_loss: f64,
    pub train_seed: u64,
    pub data_seed: u64,
    pub g_norm: f64,
}

impl Checkpoint {
    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_vec(buf: &mut Vec<u8>, vs: &[f64]) {
    put_u64(buf, vs.len() as u64);
    vs.iter().for_each(|&v| put_f64(buf, v));
}

pub(crate) fn encode(ck: &Checkpoint) -> Vec<u8> {
    let c = &ck.params.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let name = ck.preset.name().as_bytes();
    put_u32(&mut buf, name.len() as u32);
    buf.extend_from_slice(name);
    buf.push(match c.kind {
        ModelKind::Linear => 0,
        ModelKind::Bilinear => 1,
    });
    for v in [c.state_dim, c.control_dim, c.latent_dim, c.rank, c.lookback, c.horizon, c.kernel, c.hidden] {
        put_u64(&mut buf, v as u64);
    }
    for v in [c.penalty_weight, c.penalty_margin, c.coupling_period, c.control_std_floor] {
        put_f64(&mut buf, v);
    }
    for v in [&ck.stats.state_mean, &ck.stats.state_std, &ck.stats.control_mean, &ck.stats.control_std] {
        put_vec(&mut buf, v);
    }
    let names = ModelParams::names(c);
    put_u64(&mut buf, ck.params.tensors.len() as u64);
    for (name, t) in names.iter().zip(&ck.params.tensors) {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u64(&mut buf, t.rows() as u64);
        put_u64(&mut buf, t.cols() as u64);
        t.as_slice().iter().for_each(|&v| put_f64(&mut buf, v));
    }
    buf.extend_from_slice(TRAILER);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Integrity(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn size(&mut self) -> Result<usize, ModelError> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&s| s <= self.bytes.len())
            .ok_or_else(|| ModelError::Integrity(format!("implausible size {v}")))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn vec(&mut self) -> Result<Vec<f64>, ModelError> {
        let n = self.size()?;
        self.f64s(n)
    }

    fn string(&mut self) -> Result<String, ModelError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ModelError::Integrity("non-UTF-8 name".into()))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(ModelError::Format("missing BKCP magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let preset: Preset = r
        .string()?
        .parse()
        .map_err(|e| ModelError::Integrity(format!("{e}")))?;
    let kind = match r.u8()? {
        0 => ModelKind::Linear,
        1 => ModelKind::Bilinear,
        k => return Err(ModelError::Integrity(format!("unknown model kind {k}"))),
    };
    let mut sizes = [0usize; 8];
    for s in &mut sizes {
        *s = r.size()?;
    }
    let config = ModelConfig {
        kind,
        state_dim: sizes[0],
        control_dim: sizes[1],
        latent_dim: sizes[2],
        rank: sizes[3],
        lookback: sizes[4],
        horizon: sizes[5],
        kernel: sizes[6],
        hidden: sizes[7],
        penalty_weight: r.f64()?,
        penalty_margin: r.f64()?,
        coupling_period: r.f64()?,
        control_std_floor: r.f64()?,
    };
    let stats = NormStats {
        state_mean: r.vec()?,
        state_std: r.vec()?,
        control_mean: r.vec()?,
        control_std: r.vec()?,
    };
    let count = r.size()?;
    let expected = ModelParams::names(&config);
    if count != expected.len() {
        return Err(ModelError::Integrity(format!("{count} tensors, expected {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for want in &expected {
        let name = r.string()?;
        if &name != want {
            return Err(ModelError::Integrity(format!("tensor `{name}` where `{want}` was expected")));
        }
        let (rows, cols) = (r.size()?, r.size()?);
        let len = rows.checked_mul(cols).ok_or_else(|| ModelError::Integrity("tensor too large".into()))?;
        tensors.push(Matrix::from_vec(rows, cols, r.f64s(len)?).map_err(|e| ModelError::Integrity(e.to_string()))?);
    }
    if r.take(4)? != TRAILER || r.pos != bytes.len() {
        return Err(ModelError::Integrity("bad trailer".into()));
    }
    let (n, m) = (config.state_dim, config.control_dim);
    if stats.state_mean.len() != n || stats.state_std.len() != n || stats.control_mean.len() != m || stats.control_std.len() != m {
        return Err(ModelError::Integrity("normalization statistics do not match dimensions".into()));
    }
    let params = ModelParams::from_tensors(config, tensors).map_err(|e| ModelError::Integrity(e.to_string()))?;
    Ok(Checkpoint { preset, params, stats })
}

/// Writes the checkpoint and, when given, its JSON sidecar.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint, meta: Option<&CheckpointMeta>) -> Result<(), ModelError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(ck))?;
    if let Some(meta) = meta {
        fs::write(Checkpoint::sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let preset = Preset::RscpTv;
        let params = ModelParams::init(ModelConfig::for_preset(preset, ModelKind::Bilinear), 11).unwrap();
        Checkpoint {
            preset,
            params,
            stats: NormStats {
                state_mean: (0..9).map(|i| i as f64).collect(),
                state_std: vec![2.0; 9],
                control_mean: vec![1e6, 2e6, 3e6],
                control_std: vec![1e5; 3],
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.bkcp");
        let meta = CheckpointMeta {
            preset: ck.preset,
            kind: ModelKind::Bilinear,
            epoch: 3,
            val_loss: 0.25,
            train_seed: 1,
            data_seed: 2,
            g_norm: ck.params.g_norm(),
        };
        save_checkpoint(&path, &ck, Some(&meta)).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        let side: CheckpointMeta =
            serde_json::from_str(&fs::read_to_string(Checkpoint::sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side, meta);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&sample());
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(ModelError::Integrity(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(ModelError::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(ModelError::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
