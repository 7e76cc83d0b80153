use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{normalize, Volume};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentClass {
    /// Sum of randomly placed 3D Gaussians.
    Blobs,
    /// Axis-aligned binary stripes.
    Lattice,
}

impl ContentClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ContentClass::Blobs => "blobs",
            ContentClass::Lattice => "lattice",
        }
    }
}

impl std::str::FromStr for ContentClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(ContentClass::Blobs),
            "lattice" => Ok(ContentClass::Lattice),
            other => Err(Error::Config(format!("unknown phantom class {other:?}"))),
        }
    }
}

/// Everything needed to regenerate one phantom bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub class: ContentClass,
    pub dims: [usize; 3],
    /// Mean signal over the support.
    pub amplitude: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// `amplitude / sigma`: the mean over the signal support divided by the
    /// noise level.
    pub fn score(&self) -> f64 {
        self.amplitude / self.sigma
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("phantom sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!(
                "phantom amplitude must be > 0, got {}",
                self.amplitude
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config(format!("phantom extents must be positive, got {:?}", self.dims)));
        }
        Ok(())
    }
}

/// Noiseless signal (x fastest) and its support mask. The field is scaled
/// so its mean over the support equals `spec.amplitude`.
pub fn phantom_signal(spec: &PhantomSpec) -> Result<(Vec<f64>, Vec<bool>)> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let mut rng = stream(spec.seed, Stream::Phantom);
    let mut field = vec![0.0f64; nx * ny * nz];
    let at = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let support: Vec<bool> = match spec.class {
        ContentClass::Blobs => {
            let count = rng.random_range(3..=6);
            let scale = *spec.dims.iter().min().expect("three extents") as f64;
            let blobs: Vec<([f64; 3], f64, f64)> = (0..count)
                .map(|_| {
                    let c = [
                        rng.random_range(0.0..nx as f64),
                        rng.random_range(0.0..ny as f64),
                        rng.random_range(0.0..nz as f64),
                    ];
                    let width = rng.random_range(scale / 10.0..=scale / 5.0).max(0.5);
                    let weight = rng.random_range(0.5..=1.0);
                    (c, width, weight)
                })
                .collect();
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let p = [x as f64, y as f64, z as f64];
                        field[at(x, y, z)] = blobs
                            .iter()
                            .map(|(c, w, a)| {
                                let r2: f64 = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum();
                                a * (-r2 / (2.0 * w * w)).exp()
                            })
                            .sum();
                    }
                }
            }
            let peak = field.iter().copied().fold(0.0, f64::max);
            field.iter().map(|&v| v > 0.1 * peak).collect()
        }
        ContentClass::Lattice => {
            let axis = rng.random_range(0..3);
            let period = rng.random_range(4..=8usize);
            let phase = rng.random_range(0..period);
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let i = [x, y, z][axis];
                        if (i + phase) % period < period / 2 {
                            field[at(x, y, z)] = 1.0;
                        }
                    }
                }
            }
            field.iter().map(|&v| v > 0.0).collect()
        }
    };
    let n_support = support.iter().filter(|&&s| s).count();
    if n_support == 0 {
        return Err(Error::Data(format!("phantom {spec:?} has an empty signal support")));
    }
    let mean: f64 = field.iter().zip(&support).filter(|(_, &s)| s).map(|(v, _)| v).sum::<f64>() / n_support as f64;
    let gain = spec.amplitude / mean;
    for v in &mut field {
        *v *= gain;
    }
    Ok((field, support))
}

/// Magnitude of signal plus white Gaussian noise, normalized by its
/// maximum, together with the phantom's score.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, f64)> {
    let (signal, _) = phantom_signal(spec)?;
    let mut rng = stream(spec.seed, Stream::Synth);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let voxels = signal
        .iter()
        .map(|&s| (s + noise.sample(&mut rng)).abs() as f32)
        .collect();
    let mut v = normalize(&Volume::new(spec.dims, voxels)?)?;
    v.meta = Some(format!("phantom:{}:{}", spec.class.as_str(), spec.seed));
    Ok((v, spec.score()))
}
