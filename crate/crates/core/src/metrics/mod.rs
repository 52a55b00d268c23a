//! Segmentation quality metrics, clinical indices, agreement statistics,
//! connected-component post-processing, and the regional slice breakdown.
//!
//! Conventions: overlap between two empty masks counts as perfect agreement
//! (1.0); genuinely undefined quantities (0/0 rates, distances to an empty
//! surface, zero-variance correlations) are reported as `None` and excluded
//! from aggregates with their exclusion counts.

pub mod components;
pub mod report;
pub mod surface;

pub use components::largest_cc_3d;
pub use report::{evaluate_volume, EvalReport, VolumeReport};
pub use surface::{hausdorff, msd, surface, SurfaceSet};

use crate::dataio::LabelVolume;
use crate::error::{Error, Result};

fn check_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dim(format!(
            "mask sizes differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Dice overlap 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    check_len(a, b)?;
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let total = a.iter().filter(|&&x| x).count() + b.iter().filter(|&&x| x).count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Jaccard overlap |A∩B| / |A∪B|; 1.0 when both masks are empty.
pub fn jaccard(a: &[bool], b: &[bool]) -> Result<f64> {
    check_len(a, b)?;
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Sensitivity, specificity, PPV, NPV of a predicted mask against a
/// reference. A 0/0 rate is `None` and excluded from aggregation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConfusionRates {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
}

pub fn confusion_rates(pred: &[bool], reference: &[bool]) -> Result<ConfusionRates> {
    check_len(pred, reference)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &r) in pred.iter().zip(reference) {
        match (p, r) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    Ok(ConfusionRates {
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        ppv: ratio(tp, tp + fp),
        npv: ratio(tn, tn + fn_),
    })
}

/// Mask volume in millilitres: voxel count times voxel volume (mm^3) / 1000.
pub fn volume_ml(mask: &[bool], spacing: [f64; 3]) -> f64 {
    let count = mask.iter().filter(|&&m| m).count() as f64;
    count * spacing[0] * spacing[1] * spacing[2] / 1000.0
}

/// Ejection fraction in percent; undefined when EDV is not positive.
pub fn ejection_fraction(edv_ml: f64, esv_ml: f64) -> Option<f64> {
    if edv_ml <= 0.0 {
        return None;
    }
    Some((edv_ml - esv_ml) / edv_ml * 100.0)
}

/// Myocardial mass in grams from volume in ml (= cm^3), at 1.06 g/cm^3.
pub fn myo_mass(myo_volume_ml: f64) -> f64 {
    myo_volume_ml * 1.06
}

/// Sample Pearson correlation; undefined for n < 2 or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Bland-Altman agreement of paired measurements: (bias, 1.96 * sd of the
/// differences x - y, sample sd with n-1). Undefined for n < 2.
pub fn bland_altman(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let diffs: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let bias = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - bias) * (d - bias)).sum::<f64>() / (n - 1.0);
    Some((bias, 1.96 * var.sqrt()))
}

/// Heart region along the slice axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Apical,
    Mid,
    Basal,
}

/// Partition the foreground-containing slice range of a reference volume:
/// first 25% (rounded up) apical, last 25% (rounded up) basal, remainder
/// mid. Overlaps resolve apical > basal > mid; slices outside the range get
/// no region. `None` when the volume holds no foreground at all.
pub fn region_split(reference: &LabelVolume) -> Option<Vec<Option<Region>>> {
    let fg: Vec<usize> = (0..reference.depth)
        .filter(|&z| reference.slice_has_foreground(z))
        .collect();
    let (&lo, &hi) = (fg.first()?, fg.last()?);
    let n = hi - lo + 1;
    let quarter = n.div_ceil(4);
    let mut out = vec![None; reference.depth];
    for (z, slot) in out.iter_mut().enumerate().take(hi + 1).skip(lo) {
        let r = if z < lo + quarter {
            Region::Apical
        } else if z > hi - quarter {
            Region::Basal
        } else {
            Region::Mid
        };
        *slot = Some(r);
    }
    Some(out)
}
