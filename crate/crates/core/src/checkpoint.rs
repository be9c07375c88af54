//! `TQCK` checkpoint container.
//!
//! Layout: magic `TQCK`, `u32` format version, `u64` header length, a JSON
//! header, then the f32 little-endian payload (parameters, then the optional
//! AdamW moments) addressed by element offsets listed in the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Normalization, VariableCatalog};
use crate::model::{Model, ModelConfig};
use crate::params::Params;
use crate::train::{AdamState, LossCurve, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TQCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    decay: bool,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    lead: u32,
    step: u64,
    model: ModelConfig,
    train: TrainConfig,
    grid: GridSpec,
    catalog: VariableCatalog,
    norm: Normalization,
    tensors: Vec<TensorEntry>,
    /// Offsets of the first and second moments, when stored.
    moments: Option<(u64, u64)>,
    optimizer_step: u64,
    curve: LossCurve,
}

/// Everything needed to resume training or forecast with one PM_K.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub lead: u32,
    pub train: TrainConfig,
    pub norm: Normalization,
    pub model: Model<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub curve: LossCurve,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.optimizer.as_ref().map_or(self.curve.steps.len() as u64, |o| o.step)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let mut payload: Vec<f32> = Vec::with_capacity(params.total_elements() * 3);
        let mut tensors = Vec::with_capacity(params.len());
        for id in 0..params.len() {
            let spec = params.spec(id);
            tensors.push(TensorEntry {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                decay: spec.decay,
                offset: payload.len() as u64,
            });
            payload.extend_from_slice(params.get(id));
        }
        let moments = match &self.optimizer {
            Some(opt) => {
                let m_at = payload.len() as u64;
                opt.m.iter().for_each(|t| payload.extend_from_slice(t));
                let v_at = payload.len() as u64;
                opt.v.iter().for_each(|t| payload.extend_from_slice(t));
                Some((m_at, v_at))
            }
            None => None,
        };
        if payload.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        let header = Header {
            lead: self.lead,
            step: self.step(),
            model: self.model.config.clone(),
            train: self.train.clone(),
            grid: self.model.grid.clone(),
            catalog: self.model.catalog.clone(),
            norm: self.norm.clone(),
            tensors,
            moments,
            optimizer_step: self.optimizer.as_ref().map_or(0, |o| o.step),
            curve: self.curve.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { path: path.into(), expected: "TQCK" });
        }
        if bytes.len() < PREFIX_LEN {
            return Err(Error::TruncatedFile { path: path.into(), expected: PREFIX_LEN as u64, found: bytes.len() as u64 });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = PREFIX_LEN as u64 + hlen;
        if (bytes.len() as u64) < body {
            return Err(Error::TruncatedFile { path: path.into(), expected: body, found: bytes.len() as u64 });
        }
        let header: Header =
            serde_json::from_slice(&bytes[PREFIX_LEN..body as usize]).map_err(|e| Error::Serde(e.to_string()))?;
        let payload = &bytes[body as usize..];
        let total: u64 = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() as u64).sum();
        let needed = if header.moments.is_some() { 3 * total } else { total };
        if (payload.len() as u64) < 4 * needed {
            return Err(Error::TruncatedFile { path: path.into(), expected: body + 4 * needed, found: bytes.len() as u64 });
        }
        let read = |offset: u64, n: usize| -> Vec<f32> {
            let start = 4 * offset as usize;
            payload[start..start + 4 * n].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()
        };
        let template = Model::<f32>::new(&header.model, &header.grid, &header.catalog, 0)?;
        let mut params = Params::<f32>::new();
        for t in &header.tensors {
            let n = t.shape.iter().product();
            params.add(t.name.clone(), &t.shape, t.decay, read(t.offset, n));
        }
        let model = template.with_params(params)?;
        let optimizer = header.moments.map(|(m_at, v_at)| {
            let (mut m, mut v) = (Vec::new(), Vec::new());
            let mut off = 0u64;
            for t in &header.tensors {
                let n: usize = t.shape.iter().product();
                m.push(read(m_at + off, n));
                v.push(read(v_at + off, n));
                off += n as u64;
            }
            AdamState { m, v, step: header.optimizer_step }
        });
        Ok(Checkpoint { lead: header.lead, train: header.train, norm: header.norm, model, optimizer, curve: header.curve })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridSpec, VariableCatalog};

    fn sample() -> Checkpoint {
        let grid = GridSpec::uniform(4, 8, 4).unwrap();
        let cat = VariableCatalog::small();
        let cfg = ModelConfig { dim: 8, depth: 1, heads: 2, mlp_ratio: 2, fusion_rank: 4, ..ModelConfig::desk() };
        let model = Model::<f32>::new(&cfg, &grid, &cat, 5).unwrap();
        let mut opt = AdamState::new(&model.params);
        opt.step = 7;
        opt.m[0][0] = 0.25;
        opt.v[1][0] = 1e-9;
        Checkpoint {
            lead: 20,
            train: TrainConfig::desk(),
            norm: Normalization { mean: vec![0.1; cat.k()], std: vec![1.0 / 3.0; cat.k()] },
            model,
            optimizer: Some(opt),
            curve: LossCurve { steps: vec![0, 1], losses: vec![1.5, 0.1 + 0.2] },
        }
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.model.params, ck.model.params);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.norm, ck.norm);
        assert_eq!(back.curve, ck.curve);
        assert_eq!(back.train, ck.train);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("x");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::BadMagic { .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver, p), Err(Error::UnsupportedVersion(9))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4], p), Err(Error::TruncatedFile { .. })));
    }
}
