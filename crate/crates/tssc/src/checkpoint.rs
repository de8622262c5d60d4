//! Model checkpoints: `<name>.json` manifest plus `<name>.bin` payload.
//!
//! The payload is the concatenation of every tensor as little-endian `f32`,
//! parameters first (in the model's canonical order), then the Adam first
//! and second moments if present. The manifest lists each tensor's name,
//! shape and byte offset, the model configuration, and the SHA-256 of the
//! payload, which is verified on load.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tssc_core::denoiser::{DenoiserConfig, DenoiserParams};
use tssc_core::optim::AdamState;
use tssc_core::rng::stream_rng;
use tssc_core::tensor::{ParamSet, Tensor};
use tssc_core::tridir::{TriDirConfig, TriDirNetParams};

use crate::error::{Result, TsscError};
use crate::io::{read_file, write_file};

pub const FORMAT: &str = "tssc-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Denoiser,
    Tridir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

impl TensorEntry {
    fn bytes(&self) -> Option<u64> {
        self.shape.iter().try_fold(4u64, |a, &d| a.checked_mul(d as u64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub step: u64,
    pub m: Vec<TensorEntry>,
    pub v: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub dtype: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub optimizer: Option<OptimizerEntry>,
    /// Payload file name, relative to the manifest.
    pub payload: String,
    pub payload_bytes: u64,
    pub sha256: String,
}

/// `(manifest, payload)` for `x`, `x.json` or `x.bin`.
pub fn checkpoint_pair(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".json")
        .or_else(|| s.strip_suffix(".bin"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{stem}.json")), PathBuf::from(format!("{stem}.bin")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the parameter values in canonical order.
pub fn params_digest<P: ParamSet<f32>>(params: &P) -> String {
    let mut h = Sha256::new();
    for (_, t) in params.tensors() {
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn push_tensors<'a>(
    payload: &mut Vec<u8>,
    items: impl IntoIterator<Item = (String, &'a Tensor<f32>)>,
) -> Vec<TensorEntry> {
    items
        .into_iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name,
                shape: t.shape.clone(),
                offset: payload.len() as u64,
            };
            payload.extend(t.data.iter().flat_map(|v| v.to_le_bytes()));
            e
        })
        .collect()
}

/// Writes a checkpoint and returns the payload digest.
pub fn save_checkpoint<P: ParamSet<f32>, C: Serialize>(
    path: &Path,
    kind: ModelKind,
    config: &C,
    params: &P,
    adam: Option<&AdamState<f32>>,
) -> Result<String> {
    let (man_path, bin_path) = checkpoint_pair(path);
    let mut payload = Vec::new();
    let named = params.tensors();
    let tensors = push_tensors(&mut payload, named.iter().map(|(n, t)| (n.clone(), *t)));
    let optimizer = adam.map(|a| OptimizerEntry {
        step: a.step,
        m: push_tensors(&mut payload, named.iter().zip(&a.m).map(|((n, _), t)| (format!("m.{n}"), t))),
        v: push_tensors(&mut payload, named.iter().zip(&a.v).map(|((n, _), t)| (format!("v.{n}"), t))),
    });
    let digest = sha256_hex(&payload);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        kind,
        dtype: "f32".into(),
        config: serde_json::to_value(config).expect("config serializes"),
        tensors,
        optimizer,
        payload: bin_path.file_name().unwrap().to_string_lossy().into_owned(),
        payload_bytes: payload.len() as u64,
        sha256: digest.clone(),
    };
    write_file(&bin_path, &payload)?;
    write_file(&man_path, &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
    Ok(digest)
}

/// A verified checkpoint held in memory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    path: PathBuf,
    payload: Vec<u8>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let (man_path, _) = checkpoint_pair(path);
        let manifest: Manifest = serde_json::from_slice(&read_file(&man_path)?)
            .map_err(|e| TsscError::format(&man_path, format!("bad checkpoint manifest: {e}")))?;
        let bad = |msg: String| TsscError::format(&man_path, msg);
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(bad(format!("unsupported format {} v{}", manifest.format, manifest.version)));
        }
        if manifest.dtype != "f32" {
            return Err(bad(format!("unsupported dtype {}", manifest.dtype)));
        }
        let bin_path = man_path.with_file_name(&manifest.payload);
        let payload = read_file(&bin_path)?;
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(TsscError::format(
                &bin_path,
                format!("expected {} bytes, found {}", manifest.payload_bytes, payload.len()),
            ));
        }
        let digest = sha256_hex(&payload);
        if digest != manifest.sha256 {
            return Err(TsscError::format(&bin_path, format!("sha256 {digest} does not match manifest {}", manifest.sha256)));
        }
        let all = manifest
            .tensors
            .iter()
            .chain(manifest.optimizer.iter().flat_map(|o| o.m.iter().chain(&o.v)));
        for e in all {
            let end = e.bytes().and_then(|b| b.checked_add(e.offset));
            if end.map_or(true, |end| end > manifest.payload_bytes) {
                return Err(bad(format!("tensor {} lies outside the payload", e.name)));
            }
        }
        Ok(Self {
            manifest,
            path: man_path,
            payload,
        })
    }

    pub fn payload_digest(&self) -> &str {
        &self.manifest.sha256
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.manifest.config.clone())
            .map_err(|e| TsscError::format(&self.path, format!("bad model config: {e}")))
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(TsscError::format(
                &self.path,
                format!("expected a {kind:?} checkpoint, found {:?}", self.manifest.kind),
            ));
        }
        Ok(())
    }

    fn read_tensor(&self, e: &TensorEntry) -> Vec<f32> {
        let start = e.offset as usize;
        let end = start + e.bytes().unwrap() as usize;
        self.payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    fn fill_list(&self, entries: &[TensorEntry], names: &[(String, Vec<usize>)], prefix: &str, dst: Vec<&mut Tensor<f32>>) -> Result<()> {
        if entries.len() != names.len() {
            return Err(TsscError::format(
                &self.path,
                format!("expected {} {prefix}tensors, found {}", names.len(), entries.len()),
            ));
        }
        for ((e, (n, shape)), t) in entries.iter().zip(names).zip(dst) {
            if e.name != format!("{prefix}{n}") || &e.shape != shape {
                return Err(TsscError::format(
                    &self.path,
                    format!("tensor {} {:?} does not match expected {prefix}{n} {:?}", e.name, e.shape, shape),
                ));
            }
            t.data = self.read_tensor(e);
        }
        Ok(())
    }

    /// Overwrites `params` in place; names and shapes must match exactly.
    pub fn fill_params<P: ParamSet<f32>>(&self, params: &mut P) -> Result<()> {
        let names = shapes_of(params);
        self.fill_list(&self.manifest.tensors, &names, "", params.tensors_mut())
    }

    /// Adam state for `params`, if the checkpoint carries one.
    pub fn adam_state<P: ParamSet<f32>>(&self, params: &P) -> Result<Option<AdamState<f32>>> {
        let Some(o) = &self.manifest.optimizer else {
            return Ok(None);
        };
        let names = shapes_of(params);
        let mut st = AdamState::new(params);
        self.fill_list(&o.m, &names, "m.", st.m.iter_mut().collect())?;
        self.fill_list(&o.v, &names, "v.", st.v.iter_mut().collect())?;
        st.step = o.step;
        Ok(Some(st))
    }
}

fn shapes_of<P: ParamSet<f32>>(params: &P) -> Vec<(String, Vec<usize>)> {
    params.tensors().into_iter().map(|(n, t)| (n, t.shape.clone())).collect()
}

#[derive(Debug)]
pub struct LoadedDenoiser {
    pub config: DenoiserConfig,
    pub params: DenoiserParams<f32>,
    pub adam: Option<AdamState<f32>>,
    pub digest: String,
}

#[derive(Debug)]
pub struct LoadedTriDir {
    pub config: TriDirConfig,
    pub params: TriDirNetParams<f32>,
    pub adam: Option<AdamState<f32>>,
    pub digest: String,
}

pub fn save_denoiser(path: &Path, cfg: &DenoiserConfig, params: &DenoiserParams<f32>, adam: Option<&AdamState<f32>>) -> Result<String> {
    save_checkpoint(path, ModelKind::Denoiser, cfg, params, adam)
}

pub fn save_tridir(path: &Path, cfg: &TriDirConfig, params: &TriDirNetParams<f32>, adam: Option<&AdamState<f32>>) -> Result<String> {
    save_checkpoint(path, ModelKind::Tridir, cfg, params, adam)
}

pub fn load_denoiser(path: &Path) -> Result<LoadedDenoiser> {
    let ck = Checkpoint::read(path)?;
    ck.expect_kind(ModelKind::Denoiser)?;
    let config: DenoiserConfig = ck.config()?;
    let mut params = DenoiserParams::init(&config, &mut stream_rng(0, 0))?;
    ck.fill_params(&mut params)?;
    let adam = ck.adam_state(&params)?;
    Ok(LoadedDenoiser {
        config,
        params,
        adam,
        digest: ck.payload_digest().to_string(),
    })
}

pub fn load_tridir(path: &Path) -> Result<LoadedTriDir> {
    let ck = Checkpoint::read(path)?;
    ck.expect_kind(ModelKind::Tridir)?;
    let config: TriDirConfig = ck.config()?;
    let mut params = TriDirNetParams::init(&config, &mut stream_rng(0, 0))?;
    ck.fill_params(&mut params)?;
    let adam = ck.adam_state(&params)?;
    Ok(LoadedTriDir {
        config,
        params,
        adam,
        digest: ck.payload_digest().to_string(),
    })
}
