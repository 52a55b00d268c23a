//! Slice resampling, centered crop/pad, and intensity normalization.
//!
//! The preprocessing order is fixed: resample, then crop or pad, then clip at
//! the 99th percentile and z-score the whole volume.

use super::{Case, LabelVolume, Volume};
use crate::error::Result;

/// Default in-plane resolution in mm.
pub const DEFAULT_OUT_SPACING: f64 = 1.5625;

fn out_extent(extent: usize, in_sp: f64, out_sp: f64) -> usize {
    ((extent as f64 * in_sp / out_sp).round() as usize).max(1)
}

/// Bilinear resampling of one intensity slice to a new pixel spacing.
/// Pixel centers align: output pixel j samples input coordinate
/// (j + 0.5) * out/in - 0.5, clamped to the image domain.
pub fn resample_slice_bilinear(
    src: &[f32],
    width: usize,
    height: usize,
    in_spacing: [f64; 2],
    out_spacing: f64,
) -> (Vec<f32>, usize, usize) {
    let ow = out_extent(width, in_spacing[0], out_spacing);
    let oh = out_extent(height, in_spacing[1], out_spacing);
    let mut out = vec![0.0f32; ow * oh];
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) * out_spacing / in_spacing[1] - 0.5)
            .clamp(0.0, (height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let fy = sy - y0 as f64;
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) * out_spacing / in_spacing[0] - 0.5)
                .clamp(0.0, (width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let fx = sx - x0 as f64;
            let v00 = src[y0 * width + x0] as f64;
            let v01 = src[y0 * width + x1] as f64;
            let v10 = src[y1 * width + x0] as f64;
            let v11 = src[y1 * width + x1] as f64;
            let v = v00 * (1.0 - fy) * (1.0 - fx)
                + v01 * (1.0 - fy) * fx
                + v10 * fy * (1.0 - fx)
                + v11 * fy * fx;
            out[oy * ow + ox] = v as f32;
        }
    }
    (out, ow, oh)
}

/// Nearest-neighbor resampling of one label slice; never invents labels.
pub fn resample_slice_nearest(
    src: &[u8],
    width: usize,
    height: usize,
    in_spacing: [f64; 2],
    out_spacing: f64,
) -> (Vec<u8>, usize, usize) {
    let ow = out_extent(width, in_spacing[0], out_spacing);
    let oh = out_extent(height, in_spacing[1], out_spacing);
    let mut out = vec![0u8; ow * oh];
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) * out_spacing / in_spacing[1] - 0.5)
            .clamp(0.0, (height - 1) as f64)
            .round() as usize;
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) * out_spacing / in_spacing[0] - 0.5)
                .clamp(0.0, (width - 1) as f64)
                .round() as usize;
            out[oy * ow + ox] = src[sy * width + sx];
        }
    }
    (out, ow, oh)
}

/// Centered crop or zero-pad to a target extent. Asymmetric remainders go to
/// the bottom/right.
pub fn crop_or_pad<T: Copy + Default>(
    src: &[T],
    width: usize,
    height: usize,
    target_w: usize,
    target_h: usize,
) -> Vec<T> {
    let mut out = vec![T::default(); target_w * target_h];
    // source window start (when cropping) and destination start (when padding)
    let src_x0 = width.saturating_sub(target_w) / 2;
    let src_y0 = height.saturating_sub(target_h) / 2;
    let dst_x0 = target_w.saturating_sub(width) / 2;
    let dst_y0 = target_h.saturating_sub(height) / 2;
    let copy_w = width.min(target_w);
    let copy_h = height.min(target_h);
    for y in 0..copy_h {
        let src_row = (src_y0 + y) * width + src_x0;
        let dst_row = (dst_y0 + y) * target_w + dst_x0;
        out[dst_row..dst_row + copy_w].copy_from_slice(&src[src_row..src_row + copy_w]);
    }
    out
}

/// Percentile by linear interpolation between order statistics; q in [0, 1].
pub fn percentile(values: &[f32], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
}

/// Clip above the 99th percentile, then z-score the whole volume. Volumes
/// with (near-)zero spread become all zeros.
pub fn normalize_intensity(vol: &mut Volume) {
    let p99 = percentile(&vol.data, 0.99);
    let n = vol.data.len() as f64;
    let mut sum = 0.0;
    for v in &mut vol.data {
        if (*v as f64) > p99 {
            *v = p99 as f32;
        }
        sum += *v as f64;
    }
    let mean = sum / n;
    let var: f64 = vol
        .data
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let sd = var.sqrt();
    if sd < 1e-6 {
        vol.data.fill(0.0);
        return;
    }
    for v in &mut vol.data {
        *v = ((*v as f64 - mean) / sd) as f32;
    }
}

/// Full per-case pipeline: per-slice 2-D resample (bilinear intensities,
/// nearest labels), centered crop/pad to `target` (width, height), then
/// volume intensity normalization. Through-plane spacing is untouched.
pub fn preprocess_case(
    case: &Case,
    out_spacing: f64,
    target: (usize, usize),
) -> Result<Case> {
    let (tw, th) = target;
    let img = &case.image;
    let lab = &case.labels;
    let in_sp = [img.spacing[0] as f64, img.spacing[1] as f64];
    let mut img_data = Vec::with_capacity(tw * th * img.depth);
    let mut lab_data = Vec::with_capacity(tw * th * lab.depth);
    for z in 0..img.depth {
        let (ri, rw, rh) = resample_slice_bilinear(img.slice(z), img.width, img.height, in_sp, out_spacing);
        img_data.extend(crop_or_pad(&ri, rw, rh, tw, th));
        let (rl, lw, lh) = resample_slice_nearest(lab.slice(z), lab.width, lab.height, in_sp, out_spacing);
        lab_data.extend(crop_or_pad(&rl, lw, lh, tw, th));
    }
    let spacing = [out_spacing as f32, out_spacing as f32, img.spacing[2]];
    let mut image = Volume::new(tw, th, img.depth, img_data, spacing)?;
    image.origin = img.origin;
    normalize_intensity(&mut image);
    let mut labels = LabelVolume::new(tw, th, lab.depth, lab_data, lab.num_classes, spacing)?;
    labels.origin = lab.origin;
    Ok(Case {
        id: case.id.clone(),
        image,
        labels,
        subgroup: case.subgroup.clone(),
    })
}
