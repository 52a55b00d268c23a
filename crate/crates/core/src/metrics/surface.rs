//! Surface extraction and surface-to-surface distances.
//!
//! Surfaces are the foreground voxels with at least one background 6-neighbor
//! (volume borders count), with centers scaled by the voxel spacing. MSD and
//! Hausdorff distances are computed through an exact anisotropic 3-D squared
//! Euclidean distance transform sampled at the opposing surface's voxels, so
//! they are exact without the quadratic pairwise scan.

use crate::distmap::dt1d_weighted;
use crate::error::{Error, Result};

/// Boundary voxels of one mask, in grid coordinates plus the spacing needed
/// to express them in millimetres.
#[derive(Clone, Debug)]
pub struct SurfaceSet {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// (x, y, z) voxel coordinates in scan order
    pub voxels: Vec<[usize; 3]>,
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Physical coordinates (mm) of every surface point.
    pub fn points_mm(&self) -> Vec<[f64; 3]> {
        self.voxels
            .iter()
            .map(|v| {
                [
                    v[0] as f64 * self.spacing[0],
                    v[1] as f64 * self.spacing[1],
                    v[2] as f64 * self.spacing[2],
                ]
            })
            .collect()
    }
}

/// Extract the surface of a binary volume (x-fastest flat layout).
pub fn surface(mask: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<SurfaceSet> {
    let [w, h, d] = dims;
    if mask.len() != w * h * d {
        return Err(Error::Dim(format!(
            "mask holds {} voxels for dims {dims:?}",
            mask.len()
        )));
    }
    let at = |x: usize, y: usize, z: usize| mask[(z * h + y) * w + x];
    let mut voxels = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(x, y, z) {
                    continue;
                }
                let border = x == 0 || y == 0 || z == 0 || x == w - 1 || y == h - 1 || z == d - 1;
                let exposed = border
                    || !at(x - 1, y, z)
                    || !at(x + 1, y, z)
                    || !at(x, y - 1, z)
                    || !at(x, y + 1, z)
                    || !at(x, y, z - 1)
                    || !at(x, y, z + 1);
                if exposed {
                    voxels.push([x, y, z]);
                }
            }
        }
    }
    Ok(SurfaceSet {
        dims,
        spacing,
        voxels,
    })
}

/// Exact anisotropic squared distance (mm^2) from every voxel to the nearest
/// target voxel, by three separable lower-envelope passes.
fn edt3d_squared(targets: &[[usize; 3]], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [w, h, d] = dims;
    let mut grid = vec![f64::INFINITY; w * h * d];
    for t in targets {
        grid[(t[2] * h + t[1]) * w + t[0]] = 0.0;
    }
    // x pass
    let mut line = vec![0.0; w.max(h).max(d)];
    for z in 0..d {
        for y in 0..h {
            let off = (z * h + y) * w;
            line[..w].copy_from_slice(&grid[off..off + w]);
            let out = dt1d_weighted(&line[..w], spacing[0]);
            grid[off..off + w].copy_from_slice(&out);
        }
    }
    // y pass
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = grid[(z * h + y) * w + x];
            }
            let out = dt1d_weighted(&line[..h], spacing[1]);
            for y in 0..h {
                grid[(z * h + y) * w + x] = out[y];
            }
        }
    }
    // z pass
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                line[z] = grid[(z * h + y) * w + x];
            }
            let out = dt1d_weighted(&line[..d], spacing[2]);
            for z in 0..d {
                grid[(z * h + y) * w + x] = out[z];
            }
        }
    }
    grid
}

fn check_compatible(a: &SurfaceSet, b: &SurfaceSet) -> Result<()> {
    if a.dims != b.dims || a.spacing != b.spacing {
        return Err(Error::Dim(format!(
            "surfaces live on different grids: {:?}/{:?} vs {:?}/{:?}",
            a.dims, a.spacing, b.dims, b.spacing
        )));
    }
    Ok(())
}

/// Directed nearest-distances (mm) from every voxel of `from` to `to`.
fn directed_distances(from: &SurfaceSet, to: &SurfaceSet) -> Vec<f64> {
    let field = edt3d_squared(&to.voxels, from.dims, from.spacing);
    let [w, h, _] = from.dims;
    from.voxels
        .iter()
        .map(|v| field[(v[2] * h + v[1]) * w + v[0]].sqrt())
        .collect()
}

/// Mean surface distance: the symmetric average of mean nearest distances.
/// `None` when either surface is empty.
pub fn msd(a: &SurfaceSet, b: &SurfaceSet) -> Result<Option<f64>> {
    check_compatible(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let ab = directed_distances(a, b);
    let ba = directed_distances(b, a);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Some(0.5 * (mean(&ab) + mean(&ba))))
}

/// Full symmetric Hausdorff distance (the maximum, not a percentile).
/// `None` when either surface is empty.
pub fn hausdorff(a: &SurfaceSet, b: &SurfaceSet) -> Result<Option<f64>> {
    check_compatible(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let ab = directed_distances(a, b);
    let ba = directed_distances(b, a);
    let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    Ok(Some(max(&ab).max(max(&ba))))
}
