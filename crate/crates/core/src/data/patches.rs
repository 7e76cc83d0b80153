use rand::Rng;

use super::Volume;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{Scalar, Tensor};

/// Cubic sub-volume with its start position `(x, y, z)`; voxels are stored
/// with `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub offset: [usize; 3],
    pub extent: usize,
    pub voxels: Vec<f32>,
}

impl Patch {
    /// Copies the `p^3` block starting at `offset` out of `v`.
    pub fn extract(v: &Volume, offset: [usize; 3], p: usize) -> Result<Patch> {
        let dims = v.dims();
        for a in 0..3 {
            if offset[a] + p > dims[a] {
                return Err(Error::Config(format!(
                    "patch of extent {p} at {offset:?} leaves volume {dims:?}"
                )));
            }
        }
        let mut voxels = Vec::with_capacity(p * p * p);
        for z in offset[2]..offset[2] + p {
            for y in offset[1]..offset[1] + p {
                let row = v.index(offset[0], y, z);
                voxels.extend_from_slice(&v.voxels()[row..row + p]);
            }
        }
        Ok(Patch { offset, extent: p, voxels })
    }
}

/// Stacks equally sized patches into an `N x 1 x P x P x P` tensor with
/// depth, height and width along `z`, `y` and `x`.
pub fn stack_patches<T: Scalar>(patches: &[&Patch]) -> Result<Tensor<T>> {
    let Some(first) = patches.first() else {
        return Err(Error::Contract("cannot stack zero patches".into()));
    };
    let p = first.extent;
    if let Some(bad) = patches.iter().find(|q| q.extent != p) {
        return Err(Error::Contract(format!(
            "mixed patch extents {p} and {}",
            bad.extent
        )));
    }
    let data = patches
        .iter()
        .flat_map(|q| q.voxels.iter().map(|&v| T::from_f64_lossy(v as f64)))
        .collect();
    Tensor::from_vec(&[patches.len(), 1, p, p, p], data)
}

/// Per-axis start offsets of a sliding grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub stride: usize,
    pub offsets: [Vec<usize>; 3],
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.offsets.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Start positions in z-major order (`x` varies fastest).
    pub fn starts(&self) -> Vec<[usize; 3]> {
        let [xs, ys, zs] = &self.offsets;
        let mut out = Vec::with_capacity(self.len());
        for &z in zs {
            for &y in ys {
                for &x in xs {
                    out.push([x, y, z]);
                }
            }
        }
        out
    }
}

fn check_fits(dims: [usize; 3], p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::Config("patch extent must be positive".into()));
    }
    if dims.iter().any(|&l| l < p) {
        return Err(Error::Config(format!(
            "patch extent {p} exceeds volume extents {dims:?}"
        )));
    }
    Ok(())
}

/// `0, S, 2S, ...` up to `L - P`, plus `L - P` itself when the stride does
/// not land on it. Strides above the patch extent would leave gaps and are
/// rejected.
pub fn grid_offsets(len: usize, p: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || stride > p {
        return Err(Error::Config(format!(
            "grid stride must be in 1..={p} (the patch extent), got {stride}"
        )));
    }
    check_fits([len, len, len], p)?;
    let last = len - p;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    Ok(out)
}

/// Every grid patch of `v`, enumerated in z-major order.
pub fn grid_patches(v: &Volume, p: usize, stride: usize) -> Result<(PatchGrid, Vec<Patch>)> {
    check_fits(v.dims(), p)?;
    let d = v.dims();
    let grid = PatchGrid {
        patch: p,
        stride,
        offsets: [
            grid_offsets(d[0], p, stride)?,
            grid_offsets(d[1], p, stride)?,
            grid_offsets(d[2], p, stride)?,
        ],
    };
    let patches = grid
        .starts()
        .into_iter()
        .map(|o| Patch::extract(v, o, p))
        .collect::<Result<_>>()?;
    Ok((grid, patches))
}

/// The grid patch whose start is the middle offset on every axis.
pub fn center_grid_patch(v: &Volume, p: usize, stride: usize) -> Result<Patch> {
    check_fits(v.dims(), p)?;
    let d = v.dims();
    let mut start = [0; 3];
    for a in 0..3 {
        let offsets = grid_offsets(d[a], p, stride)?;
        start[a] = offsets[offsets.len() / 2];
    }
    Patch::extract(v, start, p)
}

/// `n` uniform start positions in `[0, L - P]` per axis.
pub fn sample_random_starts(dims: [usize; 3], p: usize, n: usize, seed: u64) -> Result<Vec<[usize; 3]>> {
    check_fits(dims, p)?;
    let mut rng = stream(seed, Stream::Data);
    Ok((0..n)
        .map(|_| {
            let mut o = [0; 3];
            for a in 0..3 {
                o[a] = rng.random_range(0..=dims[a] - p);
            }
            o
        })
        .collect())
}

pub fn sample_random_patches(v: &Volume, p: usize, n: usize, seed: u64) -> Result<Vec<Patch>> {
    sample_random_starts(v.dims(), p, n, seed)?
        .into_iter()
        .map(|o| Patch::extract(v, o, p))
        .collect()
}
