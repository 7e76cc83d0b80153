//! Volumes, patch sampling, dataset manifests and synthetic phantoms.

mod manifest;
mod patches;
mod phantom;
mod synth;

use std::path::Path;

use crate::error::{Error, Result};

pub use manifest::{load_manifest, write_manifest, Manifest, ManifestRecord};
pub use patches::{
    center_grid_patch, grid_offsets, grid_patches, sample_random_patches, sample_random_starts, stack_patches, Patch, PatchGrid,
};
pub use phantom::{generate_phantom, phantom_signal, ContentClass, PhantomSpec};
pub use synth::{plan_phantoms, synthesize, PhantomRecord, Provenance, SynthConfig, MANIFEST_FILE, PROVENANCE_FILE};

const HVOL_MAGIC: &[u8; 4] = b"HVOL";
const HVOL_VERSION: u32 = 1;
/// Magic, version and three extents.
pub const HVOL_HEADER_BYTES: usize = 20;

/// Scalar 3D image with `x` varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f32>,
    pub meta: Option<String>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Data(format!("volume extents must be positive, got {dims:?}")));
        }
        let n = dims.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::Data(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite voxel {} at flat index {i}", voxels[i])));
        }
        Ok(Volume { dims, voxels, meta: None })
    }

    /// Extents `(X, Y, Z)`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }
}

/// Writes `v` as an HVOL file.
pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    std::fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

/// Reads and validates an HVOL file.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let v = decode_volume(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok(Volume {
        meta: Some(path.display().to_string()),
        ..v
    })
}

/// Parses an in-memory HVOL image.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HVOL_HEADER_BYTES {
        return Err(Error::Format(format!(
            "HVOL header needs {HVOL_HEADER_BYTES} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != HVOL_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"HVOL\"", &bytes[0..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != HVOL_VERSION {
        return Err(Error::Format(format!("unsupported HVOL version {version}")));
    }
    let dims = [word(8) as usize, word(12) as usize, word(16) as usize];
    if dims.contains(&0) {
        return Err(Error::Format(format!("zero extent in HVOL dims {dims:?}")));
    }
    let expected = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .and_then(|p| p.checked_add(HVOL_HEADER_BYTES))
        .ok_or_else(|| Error::Format(format!("HVOL dims {dims:?} overflow")))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "HVOL payload length mismatch: expected {expected} bytes for dims {dims:?}, got {}",
            bytes.len()
        )));
    }
    let voxels = bytes[HVOL_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Volume::new(dims, voxels)
}

/// Serializes `v` to HVOL bytes.
pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HVOL_HEADER_BYTES + 4 * v.voxels.len());
    out.extend_from_slice(HVOL_MAGIC);
    out.extend_from_slice(&HVOL_VERSION.to_le_bytes());
    for d in v.dims {
        let d = u32::try_from(d).expect("HVOL extents fit in u32");
        out.extend_from_slice(&d.to_le_bytes());
    }
    for x in &v.voxels {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Divides by the global maximum so voxels land in `[0, 1]` with max 1.
///
/// Negative voxels are rejected: they would leave the unit interval.
pub fn normalize(v: &Volume) -> Result<Volume> {
    let max = v.voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max <= 0.0 {
        return Err(Error::Data(format!("cannot normalize: maximum voxel is {max}")));
    }
    if let Some(i) = v.voxels.iter().position(|&x| x < 0.0) {
        return Err(Error::Data(format!(
            "cannot normalize: negative voxel {} at flat index {i}",
            v.voxels[i]
        )));
    }
    let voxels = v
        .voxels
        .iter()
        .map(|&x| if x == max { 1.0 } else { (x / max).min(1.0) })
        .collect();
    Ok(Volume {
        dims: v.dims,
        voxels,
        meta: v.meta.clone(),
    })
}
