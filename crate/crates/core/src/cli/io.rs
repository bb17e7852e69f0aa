//! On-disk formats.
//!
//! A trajectory is a raw little-endian `f32` payload holding the states
//! `z_0* ..= z_T*` back to back, plus a JSON sidecar next to it:
//!
//! ```json
//! {"shape": [2], "steps": 50, "prompt_label": "young",
//!  "schedule": {"num_steps": 50, "alphas_cumprod": [1.0, ...]},
//!  "eps_timing": "destination", "config_hash": "..."}
//! ```
//!
//! Single latents use the same payload encoding with a `{"shape": [...]}`
//! sidecar. Input latents are JSON, either `{"shape": [...], "data": [...]}`
//! or a list of such objects.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::angular::{EpsTiming, LatentTrajectory};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub shape: Vec<usize>,
    pub steps: usize,
    pub prompt_label: Option<String>,
    pub schedule: NoiseSchedule,
    pub eps_timing: EpsTiming,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSidecar {
    pub shape: Vec<usize>,
}

/// `path` with its extension replaced by `json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path.display().to_string(), e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e))
}

/// One compact JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::format(path.display().to_string(), e))?);
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

fn encode_f32(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn decode_f32(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected {} bytes of f32 data, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_trajectory(path: &Path, traj: &LatentTrajectory, eps_timing: EpsTiming, config_hash: &str) -> Result<()> {
    let payload = encode_f32(traj.states().iter().flat_map(|s| s.data().iter().copied()));
    write_bytes(path, &payload)?;
    write_json(
        &sidecar_path(path),
        &TrajectorySidecar {
            shape: traj.shape().to_vec(),
            steps: traj.steps(),
            prompt_label: traj.prompt_label().map(str::to_owned),
            schedule: traj.schedule().clone(),
            eps_timing,
            config_hash: config_hash.to_string(),
        },
    )
}

pub fn read_trajectory(path: &Path) -> Result<(LatentTrajectory, TrajectorySidecar)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side: TrajectorySidecar = read_json(&sidecar_path(path))?;
    let len: usize = side.shape.iter().product();
    let values = decode_f32(path, &bytes, len * (side.steps + 1))?;
    let states = values
        .chunks_exact(len.max(1))
        .map(|c| Latent::new(c.to_vec(), side.shape.clone()))
        .collect::<Result<Vec<_>>>()?;
    let traj = LatentTrajectory::new(states, side.schedule.clone(), side.prompt_label.clone())?;
    Ok((traj, side))
}

pub fn write_latent(path: &Path, z: &Latent) -> Result<()> {
    write_bytes(path, &encode_f32(z.data().iter().copied()))?;
    write_json(&sidecar_path(path), &LatentSidecar { shape: z.shape().to_vec() })
}

pub fn read_latent(path: &Path) -> Result<Latent> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side: LatentSidecar = read_json(&sidecar_path(path))?;
    let len = side.shape.iter().product();
    Latent::new(decode_f32(path, &bytes, len)?, side.shape)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LatentInput {
    One(Latent),
    Many(Vec<Latent>),
}

/// Reads one latent or a list of latents from JSON.
pub fn read_input_latents(path: &Path) -> Result<Vec<Latent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: LatentInput =
        serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e))?;
    let list = match parsed {
        LatentInput::One(z) => vec![z],
        LatentInput::Many(v) => v,
    };
    if list.is_empty() {
        return Err(Error::Empty("input latents"));
    }
    list.into_iter()
        .map(|z| Latent::new(z.data().to_vec(), z.shape().to_vec()))
        .collect()
}
