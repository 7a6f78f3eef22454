//! On-disk form of an [`InversionRecord`]: a directory holding
//! `manifest.json` and one little-endian `f32` file per array.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::Condition;
use crate::error::{Error, Result};
use crate::inversion::InversionRecord;
use crate::schedule::TimestepPlan;

pub const FORMAT: &str = "semantix-inversion/1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct ArrayEntry {
    file: String,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct Manifest {
    format: String,
    shape: [usize; 4],
    plan: TimestepPlan,
    condition: Condition,
    omega: f64,
    seed: u64,
    x_t: ArrayEntry,
    noise_maps: BTreeMap<usize, ArrayEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_array(dir: &Path, name: &str, a: &Array4<f32>) -> Result<ArrayEntry> {
    let bytes: Vec<u8> = a.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(name), &bytes)?;
    Ok(ArrayEntry {
        file: name.to_string(),
        sha256: sha256_hex(&bytes),
    })
}

fn read_array(dir: &Path, entry: &ArrayEntry, shape: [usize; 4]) -> Result<Array4<f32>> {
    if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
        return Err(Error::Archive(format!("refusing array path `{}`", entry.file)));
    }
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(Error::Archive(format!("{} does not match its recorded hash", entry.file)));
    }
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Archive(format!("{} holds {} bytes, expected {}", entry.file, bytes.len(), 4 * n)));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), values).map_err(|e| Error::Archive(e.to_string()))
}

/// Writes `record` into `dir`, creating it if needed.
pub fn write_record(dir: &Path, record: &InversionRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (f, c, h, w) = record.shape();
    let x_t = write_array(dir, "x_T.bin", &record.x_t)?;
    let mut noise_maps = BTreeMap::new();
    for (t, z) in &record.noise_maps {
        noise_maps.insert(*t, write_array(dir, &format!("z_{t:04}.bin"), z)?);
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        shape: [f, c, h, w],
        plan: record.plan.clone(),
        condition: record.condition.clone(),
        omega: record.omega,
        seed: record.seed,
        x_t,
        noise_maps,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_record(dir: &Path) -> Result<InversionRecord> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Archive(format!("unsupported archive format `{}`", m.format)));
    }
    let steps = m.plan.ascending();
    if steps.is_empty() || steps.windows(2).any(|w| w[0] >= w[1]) || steps.last() != Some(&m.plan.t_start()) {
        return Err(Error::Archive("plan steps must be strictly increasing and end at t-start".into()));
    }
    if !m.noise_maps.keys().copied().eq(steps.iter().copied()) {
        return Err(Error::Archive("noise maps do not cover the plan".into()));
    }
    let x_t = read_array(dir, &m.x_t, m.shape)?;
    let mut noise_maps = BTreeMap::new();
    for (t, entry) in &m.noise_maps {
        noise_maps.insert(*t, read_array(dir, entry, m.shape)?);
    }
    Ok(InversionRecord {
        x_t,
        noise_maps,
        plan: m.plan,
        condition: m.condition,
        omega: m.omega,
        seed: m.seed,
    })
}
