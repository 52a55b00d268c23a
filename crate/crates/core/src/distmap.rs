//! Exact 2-D Euclidean distance transforms and per-class truncated signed
//! distance maps.
//!
//! The transform is the separable lower-envelope-of-parabolas method applied
//! to squared distances, which is exact on the pixel grid (no chamfer
//! approximation). Signed maps are positive inside an object, negative
//! outside clamped at `-T`, and constant `-T` on slices where the class is
//! absent. Positive interior distances are never truncated.

use crate::error::{Error, Result};

/// A 2-D binary mask; values are 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarySlice {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl BinarySlice {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<BinarySlice> {
        if values.len() != height * width {
            return Err(Error::Dim(format!(
                "binary slice {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(&bad) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Label(format!("binary slice holds value {bad}")));
        }
        Ok(BinarySlice {
            height,
            width,
            values,
        })
    }

    pub fn is_empty_mask(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }
}

/// A 2-D grid of integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSlice {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelSlice {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<LabelSlice> {
        if labels.len() != height * width {
            return Err(Error::Dim(format!(
                "label slice {height}x{width} needs {} values, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelSlice {
            height,
            width,
            labels,
        })
    }

    /// Binary mask of one class.
    pub fn class_mask(&self, class_id: u8) -> BinarySlice {
        BinarySlice {
            height: self.height,
            width: self.width,
            values: self
                .labels
                .iter()
                .map(|&l| u8::from(l == class_id))
                .collect(),
        }
    }
}

/// Truncated signed distance maps for every foreground class of one slice,
/// channel k-1 holding the map of class k. Values are in pixel units.
#[derive(Clone, Debug)]
pub struct DistanceMapStack {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub threshold: f64,
    /// Channel-major plane data, `channels * height * width` values.
    pub data: Vec<f64>,
}

impl DistanceMapStack {
    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }
}

/// Foreground pixels with at least one background 4-neighbor; pixels on the
/// image border count as boundary. Returned in row-major scan order.
pub fn boundary_pixels(mask: &BinarySlice) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let at = |r: usize, c: usize| mask.values[r * w + c];
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if at(r, c) == 0 {
                continue;
            }
            let on_border = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            let bg_neighbor = (r > 0 && at(r - 1, c) == 0)
                || (r + 1 < h && at(r + 1, c) == 0)
                || (c > 0 && at(r, c - 1) == 0)
                || (c + 1 < w && at(r, c + 1) == 0);
            if on_border || bg_neighbor {
                out.push((r, c));
            }
        }
    }
    out
}

/// One-dimensional squared distance transform: given per-site values f(q),
/// returns min over q of f(q) + (weight * (p - q))^2 for every site p.
/// Lower envelope of parabolas; exact.
pub(crate) fn dt1d_weighted(f: &[f64], weight: f64) -> Vec<f64> {
    let n = f.len();
    let w2 = weight * weight;
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n]; // parabola sites
    let mut z = vec![0.0f64; n + 1]; // envelope boundaries
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let p = v[k];
            let s = if f[p] == f64::INFINITY {
                // parabola at p is everywhere above; replace it
                f64::NEG_INFINITY
            } else {
                ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64))
                    / (2.0 * w2 * (q as f64 - p as f64))
            };
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for p in 0..n {
        while z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        d[p] = if f[q] == f64::INFINITY {
            f64::INFINITY
        } else {
            f[q] + w2 * (p as f64 - q as f64) * (p as f64 - q as f64)
        };
    }
    d
}

/// Exact squared Euclidean distance from every pixel to the nearest target.
pub fn edt_squared(
    height: usize,
    width: usize,
    targets: &[(usize, usize)],
) -> Result<Vec<f64>> {
    if targets.is_empty() {
        return Err(Error::Usage(
            "edt needs a non-empty target set; handle the empty-object branch separately".into(),
        ));
    }
    let mut grid = vec![f64::INFINITY; height * width];
    for &(r, c) in targets {
        if r >= height || c >= width {
            return Err(Error::Dim(format!(
                "target ({r},{c}) outside {height}x{width} slice"
            )));
        }
        grid[r * width + c] = 0.0;
    }
    // pass along rows
    let mut tmp = vec![0.0; height * width];
    for r in 0..height {
        let row: Vec<f64> = grid[r * width..(r + 1) * width].to_vec();
        let d = dt1d_weighted(&row, 1.0);
        tmp[r * width..(r + 1) * width].copy_from_slice(&d);
    }
    // pass along columns
    let mut out = vec![0.0; height * width];
    let mut col = vec![0.0; height];
    for c in 0..width {
        for r in 0..height {
            col[r] = tmp[r * width + c];
        }
        let d = dt1d_weighted(&col, 1.0);
        for r in 0..height {
            out[r * width + c] = d[r];
        }
    }
    Ok(out)
}

/// Exact Euclidean distance (in pixels) from every pixel to the nearest
/// target pixel.
pub fn edt(mask: &BinarySlice, targets: &[(usize, usize)]) -> Result<Vec<f64>> {
    Ok(edt_squared(mask.height, mask.width, targets)?
        .into_iter()
        .map(f64::sqrt)
        .collect())
}

/// The truncated signed distance map of one foreground class: positive
/// (untruncated) distance to the boundary inside the object, negative
/// distance clamped at `-T` outside, constant `-T` when the class is absent.
pub fn signed_truncated_dm(labels: &LabelSlice, class_id: u8, threshold: f64) -> Result<Vec<f64>> {
    if threshold <= 0.0 {
        return Err(Error::Usage(format!(
            "distance threshold must be positive, got {threshold}"
        )));
    }
    if class_id == 0 {
        return Err(Error::Label(
            "class 0 is background, not a foreground class".into(),
        ));
    }
    let mask = labels.class_mask(class_id);
    if mask.is_empty_mask() {
        return Ok(vec![-threshold; labels.height * labels.width]);
    }
    let boundary = boundary_pixels(&mask);
    let dist = edt(&mask, &boundary)?;
    Ok(mask
        .values
        .iter()
        .zip(dist)
        .map(|(&fg, d)| if fg == 1 { d } else { -d.min(threshold) })
        .collect())
}

/// Signed distance maps for classes 1..num_classes-1, stacked channel-major.
pub fn dm_stack(labels: &LabelSlice, num_classes: usize, threshold: f64) -> Result<DistanceMapStack> {
    if num_classes < 2 {
        return Err(Error::Usage(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if let Some(&bad) = labels.labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::Label(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let n = labels.height * labels.width;
    let channels = num_classes - 1;
    let mut data = Vec::with_capacity(channels * n);
    for class in 1..num_classes {
        data.extend(signed_truncated_dm(labels, class as u8, threshold)?);
    }
    Ok(DistanceMapStack {
        height: labels.height,
        width: labels.width,
        channels,
        threshold,
        data,
    })
}

/// Segmentation by zero-levelset thresholding: a pixel takes class k when
/// channel k-1 is positive; among several positive channels the largest
/// value wins (lowest class on exact ties); otherwise background.
pub fn segmentation_from_dm(dm: &DistanceMapStack) -> LabelSlice {
    let n = dm.height * dm.width;
    let mut labels = vec![0u8; n];
    for p in 0..n {
        let mut best = 0.0;
        let mut cls = 0u8;
        for ch in 0..dm.channels {
            let v = dm.data[ch * n + p];
            if v > 0.0 && v > best {
                best = v;
                cls = (ch + 1) as u8;
            }
        }
        labels[p] = cls;
    }
    LabelSlice {
        height: dm.height,
        width: dm.width,
        labels,
    }
}
