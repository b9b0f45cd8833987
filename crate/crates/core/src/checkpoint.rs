//! Checkpoints: a TOML manifest (kind, config echo, λ, and the name, shape
//! and byte offset of every parameter) next to a raw little-endian f64 payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TeacherConfig};
use crate::error::{Error, Result};
use crate::io_util::{read_to_string, write_atomic};
use crate::model::NatModel;
use crate::params::ParamSet;
use crate::teacher::Teacher;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest<C> {
    kind: String,
    payload: String,
    lambda: Option<f64>,
    config: C,
    params: Vec<ParamEntry>,
}

/// Payload path for a manifest path: `model.ckpt` -> `model.ckpt.bin`.
pub fn payload_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn save<C: Serialize>(path: &Path, kind: &str, config: &C, lambda: Option<f64>, params: &ParamSet) -> Result<()> {
    let mut payload = Vec::with_capacity(params.num_values() * 8);
    let mut entries = Vec::with_capacity(params.len());
    for p in params.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len(),
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = payload_path(path);
    let manifest = Manifest {
        kind: kind.to_string(),
        payload: bin
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        lambda,
        config,
        params: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Data(format!("cannot serialise manifest: {e}")))?;
    write_atomic(&bin, &payload)?;
    write_atomic(path, text.as_bytes())
}

fn load_manifest<C: for<'de> Deserialize<'de>>(path: &Path, kind: &str) -> Result<(Manifest<C>, Vec<u8>)> {
    let text = read_to_string(path)?;
    let manifest: Manifest<C> =
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.kind != kind {
        return Err(Error::Data(format!(
            "{} holds a {} checkpoint, expected {kind}",
            path.display(),
            manifest.kind
        )));
    }
    let bin = path.with_file_name(&manifest.payload);
    let payload = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    Ok((manifest, payload))
}

/// Copies payload values into `params`, requiring an exact name and shape match.
fn restore(params: &mut ParamSet, entries: &[ParamEntry], payload: &[u8]) -> Result<()> {
    if entries.len() != params.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters, the configured model has {}",
            entries.len(),
            params.len()
        )));
    }
    for (p, e) in params.iter_mut().zip(entries) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.value.shape()
            )));
        }
        let n = p.value.len();
        let bytes = payload
            .get(e.offset..e.offset + n * 8)
            .ok_or_else(|| Error::Data(format!("payload too short for {}", e.name)))?;
        for (dst, chunk) in p.value.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(())
}

pub fn save_model(path: &Path, model: &NatModel) -> Result<()> {
    save(path, "nat", &model.config, model.lambda(), &model.params)
}

pub fn load_model(path: &Path) -> Result<NatModel> {
    let (m, payload) = load_manifest::<ModelConfig>(path, "nat")?;
    let mut model = NatModel::new(m.config)?;
    restore(&mut model.params, &m.params, &payload)?;
    Ok(model)
}

pub fn save_teacher(path: &Path, teacher: &Teacher) -> Result<()> {
    save(path, "teacher", &teacher.config, None, &teacher.params)
}

pub fn load_teacher(path: &Path) -> Result<Teacher> {
    let (m, payload) = load_manifest::<TeacherConfig>(path, "teacher")?;
    let mut teacher = Teacher::new(m.config)?;
    restore(&mut teacher.params, &m.params, &payload)?;
    Ok(teacher)
}
