use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::NetworkProfile;
use crate::optim::{EmaState, LossScaler, Moments};
use crate::Tensor;

use super::engine::TrainState;
use super::experiment::EpochRecord;
use super::TrainError;

const MAGIC: &[u8; 5] = b"CHXO1";
const VERSION: u32 = 1;
const KIND_F64: u8 = 0;
const KIND_JSON: u8 = 1;

/// SHA-256 (hex) of the canonical JSON form of a network profile.
pub fn architecture_fingerprint(profile: &NetworkProfile) -> String {
    let bytes = serde_json::to_vec(profile).expect("profile serializes");
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Number of completed epochs.
    pub epoch: usize,
    pub val_macro_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_macro_f1: Option<f64>,
    pub profile: NetworkProfile,
    pub optimizer_step: u64,
    pub ema_decay: Option<f64>,
    pub ema_updates: u64,
    pub scaler: LossScaler,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
}

/// Full training state: parameters, batch-norm statistics, EMA shadow,
/// optimizer moments and loss-scaler state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub meta: CheckpointMeta,
    blobs: Vec<(String, Vec<usize>, Vec<f64>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn capture(state: &TrainState, meta: CheckpointMeta) -> Self {
        let mut blobs = Vec::new();
        let params = state.net.params();
        for p in params.iter() {
            blobs.push((format!("param/{}", p.name), p.tensor.shape().to_vec(), p.tensor.data().to_vec()));
        }
        for (i, bn) in state.net.running_stats().iter().enumerate() {
            blobs.push((format!("bn/{i}/mean"), vec![bn.mean.len()], bn.mean.clone()));
            blobs.push((format!("bn/{i}/var"), vec![bn.var.len()], bn.var.clone()));
        }
        if let Some(ema) = &state.ema {
            for (p, s) in params.iter().zip(ema.shadow()) {
                blobs.push((format!("ema/{}", p.name), s.shape().to_vec(), s.data().to_vec()));
            }
        }
        for (p, m) in params.iter().zip(&state.opt.state.moments) {
            blobs.push((format!("adam_m/{}", p.name), p.tensor.shape().to_vec(), m.m.clone()));
            blobs.push((format!("adam_v/{}", p.name), p.tensor.shape().to_vec(), m.v.clone()));
        }
        Self {
            fingerprint: architecture_fingerprint(state.net.profile()),
            meta,
            blobs,
        }
    }

    fn blob(&self, name: &str) -> Result<&(String, Vec<usize>, Vec<f64>), String> {
        self.blobs
            .iter()
            .find(|b| b.0 == name)
            .ok_or_else(|| format!("missing blob {name}"))
    }

    /// Copies the stored state into `state`, whose network must have the same architecture.
    pub fn restore_into(&self, state: &mut TrainState) -> Result<(), TrainError> {
        let expected = architecture_fingerprint(state.net.profile());
        if expected != self.fingerprint {
            return Err(TrainError::FingerprintMismatch {
                expected,
                found: self.fingerprint.clone(),
            });
        }
        let err = |message: String| TrainError::Checkpoint {
            path: "<memory>".into(),
            message,
        };
        let names: Vec<String> = state.net.params().iter().map(|p| p.name.clone()).collect();
        let mut shadow = Vec::new();
        let mut moments = Vec::new();
        for (i, name) in names.iter().enumerate() {
            let (_, shape, data) = self.blob(&format!("param/{name}")).map_err(err)?;
            let t = state.net.params_mut().tensor_mut(i);
            if t.shape() != shape.as_slice() {
                return Err(err(format!("shape of {name} is {shape:?}, expected {:?}", t.shape())));
            }
            t.data_mut().copy_from_slice(data);
            if state.ema.is_some() {
                let (_, shape, data) = self.blob(&format!("ema/{name}")).map_err(err)?;
                shadow.push(Tensor::new(shape, data.clone())?);
            }
            let m = self.blob(&format!("adam_m/{name}")).map_err(err)?.2.clone();
            let v = self.blob(&format!("adam_v/{name}")).map_err(err)?.2.clone();
            moments.push(Moments { m, v });
        }
        for (i, bn) in state.net.running_stats_mut().iter_mut().enumerate() {
            bn.mean = self.blob(&format!("bn/{i}/mean")).map_err(err)?.2.clone();
            bn.var = self.blob(&format!("bn/{i}/var")).map_err(err)?.2.clone();
        }
        if let Some(ema) = &mut state.ema {
            *ema = EmaState::from_parts(ema.decay(), shadow, self.meta.ema_updates)?.with_warmup(ema.warmup());
        }
        state.opt.state.moments = moments;
        state.opt.state.step = self.meta.optimizer_step;
        state.scaler = self.meta.scaler.clone();
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let fp: Vec<u8> = (0..32)
            .map(|i| u8::from_str_radix(&self.fingerprint[2 * i..2 * i + 2], 16).expect("hex fingerprint"))
            .collect();
        out.extend_from_slice(&fp);
        out.extend_from_slice(&(self.blobs.len() as u32 + 1).to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut put = |name: &str, kind: u8, shape: &[usize], payload: &[u8]| {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(kind);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        };
        put("meta", KIND_JSON, &[], &meta);
        for (name, shape, data) in &self.blobs {
            let payload: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            put(name, KIND_F64, shape, &payload);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < MAGIC.len() + 4 + 32 + 4 + 32 {
            return Err("file too short".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch (corrupted or truncated file)".into());
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err("bad magic (not a CHXO1 checkpoint)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let fingerprint = hex(r.take(32)?);
        let count = r.u32()?;
        let mut meta = None;
        let mut blobs = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| "blob name is not UTF-8")?;
            let kind = r.u8()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            match kind {
                KIND_JSON if name == "meta" => {
                    meta = Some(serde_json::from_slice(payload).map_err(|e| format!("meta: {e}"))?);
                }
                KIND_F64 => {
                    if len % 8 != 0 || len / 8 != shape.iter().product::<usize>() {
                        return Err(format!("blob {name}: {len} bytes do not match shape {shape:?}"));
                    }
                    let data = payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    blobs.push((name, shape, data));
                }
                other => return Err(format!("blob {name}: unknown kind {other}")),
            }
        }
        if r.pos != body.len() {
            return Err(format!("{} unexpected trailing bytes", body.len() - r.pos));
        }
        Ok(Self {
            fingerprint,
            meta: meta.ok_or("missing meta blob")?,
            blobs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        }
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| TrainError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| TrainError::Checkpoint {
            path: path.display().to_string(),
            message,
        })
    }
}
