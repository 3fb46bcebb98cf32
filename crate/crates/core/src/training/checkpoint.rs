//! Checkpoint persistence: an opaque little-endian parameter blob plus a
//! JSON meta file. Parameters, Adam moments, and step counters are stored
//! as f64 regardless of the training dtype, so a 64-bit resume is
//! bit-compatible and a 32-bit round-trip is lossless (f32→f64→f32 is
//! exact). Loading refuses blobs whose model-profile hash does not match
//! the profile supplied by the caller.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{QualityArm, TrainConfig, TrainState};
use crate::error::{CoreError, Result};
use crate::models::ModelProfile;
use crate::nn::{Adam, HasParams, ParamTensor};
use crate::Element;

pub const CHECKPOINT_BLOB_FILE: &str = "checkpoint.bin";
pub const CHECKPOINT_META_FILE: &str = "checkpoint_meta.json";

const MAGIC: &[u8; 8] = b"PALCKPT1";

/// Sidecar describing what the blob was trained as.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub profile_name: String,
    pub profile_hash: String,
    pub n_classes: usize,
    pub epoch: u32,
    pub global_step: u64,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn append_section<T: Element>(buf: &mut Vec<u8>, model: &mut dyn HasParams<T>, prefix: &str, t: u64) {
    put_u64(buf, t);
    let mut count = 0u64;
    model.visit_params(prefix, &mut |_| count += 1);
    put_u64(buf, count);
    model.visit_params(prefix, &mut |pt: ParamTensor<'_, T>| {
        put_u64(buf, pt.name.len() as u64);
        buf.extend_from_slice(pt.name.as_bytes());
        put_u64(buf, pt.value.ndim() as u64);
        for &d in pt.value.shape() {
            put_u64(buf, d as u64);
        }
        for arr in [&pt.value, &pt.m, &pt.v] {
            for &x in arr.iter() {
                put_f64(buf, Element::to_f64(x));
            }
        }
        // Gradients are transient; they are not checkpointed.
        let _ = pt.grad;
    });
}

/// Writes `checkpoint.bin` + `checkpoint_meta.json` into `dir`.
pub fn save_checkpoint<T: Element>(
    state: &mut TrainState<T>,
    profile: &ModelProfile,
    n_classes: usize,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(u8::from(state.quality.is_some()));
    append_section(&mut buf, &mut state.segnet, "segnet", state.seg_opt.t);
    if let Some(arm) = &mut state.quality {
        append_section(&mut buf, &mut arm.net, "qam", arm.opt.t);
    }
    let blob_path = dir.join(CHECKPOINT_BLOB_FILE);
    fs::write(&blob_path, &buf).map_err(|e| CoreError::io(&blob_path, e))?;

    let meta = CheckpointMeta {
        train: state.cfg.clone(),
        profile_name: profile.name.clone(),
        profile_hash: profile.hash(),
        n_classes,
        epoch: state.epoch,
        global_step: state.global_step,
    };
    let meta_path = dir.join(CHECKPOINT_META_FILE);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| CoreError::json(&meta_path, e))?;
    fs::write(&meta_path, json).map_err(|e| CoreError::io(&meta_path, e))
}

/// Sequential reader over the blob that records the first failure instead
/// of panicking inside a visitor closure.
struct Cursor<'a> {
    buf: &'a [u8],
    off: usize,
    fail: Option<String>,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, off: 0, fail: None }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.fail.is_some() || self.off + n > self.buf.len() {
            self.fail.get_or_insert_with(|| {
                format!("blob truncated at offset {} (wanted {n} bytes)", self.off)
            });
            return None;
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Some(s)
    }

    fn u64(&mut self) -> u64 {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).unwrap_or(0)
    }

    fn f64(&mut self) -> f64 {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).unwrap_or(0.0)
    }

    fn set_fail(&mut self, detail: String) {
        self.fail.get_or_insert(detail);
    }
}

fn read_section<T: Element>(cur: &mut Cursor<'_>, model: &mut dyn HasParams<T>, prefix: &str) -> u64 {
    let t = cur.u64();
    let stored = cur.u64();
    let mut count = 0u64;
    model.visit_params(prefix, &mut |_| count += 1);
    if cur.fail.is_none() && stored != count {
        cur.set_fail(format!("section {prefix}: {stored} stored params, model has {count}"));
    }
    model.visit_params(prefix, &mut |pt: ParamTensor<'_, T>| {
        if cur.fail.is_some() {
            return;
        }
        let name_len = cur.u64() as usize;
        let name = cur.take(name_len).map(|b| String::from_utf8_lossy(b).into_owned());
        if name.as_deref() != Some(pt.name.as_str()) {
            cur.set_fail(format!("expected param {}, found {:?}", pt.name, name));
            return;
        }
        let ndim = cur.u64() as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| cur.u64() as usize).collect();
        if cur.fail.is_none() && dims != pt.value.shape() {
            cur.set_fail(format!(
                "param {}: stored shape {:?}, model shape {:?}",
                pt.name,
                dims,
                pt.value.shape()
            ));
            return;
        }
        let ParamTensor { value, m, v, grad, .. } = pt;
        for arr in [value, m, v] {
            for x in arr {
                *x = T::from_f64(cur.f64());
            }
        }
        let _ = grad;
    });
    t
}

/// Rebuilds a [`TrainState`] from `dir`, refusing on profile-hash mismatch.
pub fn load_checkpoint<T: Element>(
    dir: &Path,
    profile: &ModelProfile,
) -> Result<(TrainState<T>, CheckpointMeta)> {
    let meta_path = dir.join(CHECKPOINT_META_FILE);
    let raw = fs::read_to_string(&meta_path).map_err(|e| CoreError::io(&meta_path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&raw).map_err(|e| CoreError::json(&meta_path, e))?;
    let expected = profile.hash();
    if meta.profile_hash != expected {
        return Err(CoreError::ProfileMismatch { expected, found: meta.profile_hash });
    }
    meta.train.validate()?;

    let blob_path = dir.join(CHECKPOINT_BLOB_FILE);
    let buf = fs::read(&blob_path).map_err(|e| CoreError::io(&blob_path, e))?;
    let corrupt = |detail: String| CoreError::CorruptCheckpoint { path: blob_path.clone(), detail };
    if buf.len() < MAGIC.len() + 1 || &buf[..MAGIC.len()] != MAGIC {
        return Err(corrupt("bad or missing magic header".into()));
    }
    let has_qam = buf[MAGIC.len()] == 1;
    if has_qam != meta.train.strategy.uses_qam() {
        return Err(corrupt(format!(
            "blob quality-arm flag {has_qam} contradicts strategy {}",
            meta.train.strategy.as_str()
        )));
    }

    let mut state = TrainState::<T>::new(&meta.train, profile, meta.n_classes)?;
    let mut cur = Cursor::new(&buf[MAGIC.len() + 1..]);
    state.seg_opt.t = read_section(&mut cur, &mut state.segnet, "segnet");
    if let Some(arm) = &mut state.quality {
        let t = read_section(&mut cur, &mut arm.net, "qam");
        arm.opt.t = t;
    }
    if let Some(detail) = cur.fail {
        return Err(corrupt(detail));
    }
    if cur.off != buf.len() - MAGIC.len() - 1 {
        return Err(corrupt(format!("{} trailing bytes", buf.len() - MAGIC.len() - 1 - cur.off)));
    }
    state.epoch = meta.epoch;
    state.global_step = meta.global_step;
    Ok((state, meta))
}

pub(super) fn fresh_adam(lr: f64) -> Adam {
    Adam::new(lr)
}

pub(super) fn quality_arm<T: Element>(
    cfg: &TrainConfig,
    profile: &ModelProfile,
    n_classes: usize,
) -> Result<Option<QualityArm<T>>> {
    if !cfg.strategy.uses_qam() {
        return Ok(None);
    }
    let net = crate::models::Qam::new(profile.qam_config(n_classes), cfg.seed.wrapping_add(1))?;
    Ok(Some(QualityArm { net, opt: Adam::new(cfg.learning_rate) }))
}
