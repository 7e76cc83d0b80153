use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{generate_phantom, write_manifest, write_volume, ContentClass, ManifestRecord, PhantomSpec};
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::rng::{stream, Stream};

pub const PROVENANCE_FILE: &str = "phantoms.json";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Settings of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub classes: Vec<ContentClass>,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub seed: u64,
    pub extent: usize,
    pub amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 200,
            classes: vec![ContentClass::Blobs, ContentClass::Lattice],
            sigma_lo: 0.05,
            sigma_hi: 0.4,
            seed: 0,
            extent: 32,
            amplitude: 1.0,
        }
    }
}

/// One generated volume and how to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomRecord {
    pub file: String,
    pub spec: PhantomSpec,
    pub score: f64,
}

/// Contents of `phantoms.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: SynthConfig,
    pub phantoms: Vec<PhantomRecord>,
}

impl Provenance {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Phantom specs for a dataset: classes alternate, sigma is uniform in
/// `[lo, hi]`, each phantom gets its own seed.
pub fn plan_phantoms(cfg: &SynthConfig) -> Result<Vec<PhantomSpec>> {
    if cfg.classes.is_empty() {
        return Err(Error::Config("at least one phantom class is required".into()));
    }
    if !(cfg.sigma_lo > 0.0 && cfg.sigma_lo <= cfg.sigma_hi && cfg.sigma_hi.is_finite()) {
        return Err(Error::Config(format!(
            "sigma range {}:{} must satisfy 0 < LO <= HI",
            cfg.sigma_lo, cfg.sigma_hi
        )));
    }
    if cfg.extent == 0 {
        return Err(Error::Config("phantom extent must be positive".into()));
    }
    let mut rng = stream(cfg.seed, Stream::Synth);
    Ok((0..cfg.count)
        .map(|i| {
            let sigma = if cfg.sigma_lo == cfg.sigma_hi {
                cfg.sigma_lo
            } else {
                rng.random_range(cfg.sigma_lo..=cfg.sigma_hi)
            };
            PhantomSpec {
                class: cfg.classes[i % cfg.classes.len()],
                dims: [cfg.extent; 3],
                amplitude: cfg.amplitude,
                sigma,
                seed: rng.random(),
            }
        })
        .collect())
}

/// Writes `count` HVOL phantoms, `manifest.csv` and `phantoms.json` to `out`.
pub fn synthesize(out: &Path, cfg: &SynthConfig) -> Result<Provenance> {
    let specs = plan_phantoms(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let width = cfg.count.saturating_sub(1).to_string().len().max(4);
    let phantoms = map_indexed(specs.len(), |i| {
        let spec = &specs[i];
        let (v, score) = generate_phantom(spec)?;
        let file = format!("phantom_{i:0width$}_{}.hvol", spec.class.as_str());
        write_volume(&out.join(&file), &v)?;
        Ok(PhantomRecord { file, spec: spec.clone(), score })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let records: Vec<ManifestRecord> = phantoms
        .iter()
        .map(|p| ManifestRecord { path: p.file.clone().into(), score: p.score })
        .collect();
    write_manifest(&out.join(MANIFEST_FILE), &records)?;
    let prov = Provenance { config: cfg.clone(), phantoms };
    let json = serde_json::to_string_pretty(&prov)?;
    let path = out.join(PROVENANCE_FILE);
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(prov)
}
