//! Synthetic short-axis cardiac phantoms: an LV blood-pool disk (class 3)
//! inside a myocardium ring (class 2) with an RV-like crescent beside it
//! (class 1), plus designated empty apical/basal slices. Deterministic per
//! seed, so generated datasets are byte-reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelVolume, Volume};
use crate::error::{Error, Result};

pub const CLASS_RV: u8 = 1;
pub const CLASS_MYO: u8 = 2;
pub const CLASS_LV: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// Geometry and noise ranges for one phantom volume.
#[derive(Clone, Debug)]
pub struct PhantomSpec {
    /// square in-plane extent, pixels
    pub size: usize,
    /// slices per volume, including empty apical/basal slices
    pub slices: usize,
    /// fraction of this volume's slices left empty of foreground
    pub empty_fraction: f64,
    /// LV blood-pool radius range, pixels
    pub lv_radius: (f64, f64),
    /// myocardium ring thickness range, pixels
    pub myo_thickness: (f64, f64),
    /// RV crescent radius range, pixels
    pub rv_radius: (f64, f64),
    /// max center offset from the image center, pixels
    pub center_jitter: f64,
    /// additive Gaussian intensity noise
    pub noise_sigma: f64,
    /// LV radius multiplier; 1.0 for end-diastole-like, < 1 mimics systole
    pub lv_scale: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 64,
            slices: 10,
            empty_fraction: 0.1,
            lv_radius: (6.0, 9.0),
            myo_thickness: (3.0, 5.0),
            rv_radius: (4.0, 6.0),
            center_jitter: 2.0,
            noise_sigma: 0.05,
            lv_scale: 1.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.slices == 0 {
            return Err(Error::Spec(format!(
                "phantom needs size >= 16 and at least one slice, got {}x{}",
                self.size, self.slices
            )));
        }
        if !(0.0..1.0).contains(&self.empty_fraction) {
            return Err(Error::Spec(format!(
                "empty_fraction must be in [0, 1), got {}",
                self.empty_fraction
            )));
        }
        for (name, (lo, hi)) in [
            ("lv_radius", self.lv_radius),
            ("myo_thickness", self.myo_thickness),
            ("rv_radius", self.rv_radius),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Spec(format!(
                    "{name} range ({lo}, {hi}) breaks the ring-encloses-disk nesting"
                )));
            }
        }
        if !(0.0 < self.lv_scale && self.lv_scale <= 1.0) {
            return Err(Error::Spec(format!(
                "lv_scale must be in (0, 1], got {}",
                self.lv_scale
            )));
        }
        if self.noise_sigma < 0.0 || self.center_jitter < 0.0 {
            return Err(Error::Spec("noise and jitter must be non-negative".into()));
        }
        // the whole heart (LV ring + RV crescent on its left) must fit
        let reach = self.lv_radius.1
            + self.myo_thickness.1
            + 2.0 * self.rv_radius.1
            + self.center_jitter
            + 2.0;
        if reach > self.size as f64 / 2.0 {
            return Err(Error::Spec(format!(
                "geometry reach {reach:.1} px exceeds half the {}-px image",
                self.size
            )));
        }
        Ok(())
    }
}

/// Class intensity means: background, RV pool, myocardium, LV pool.
const CLASS_MEANS: [f64; 4] = [0.20, 0.75, 0.45, 0.90];

fn draw<R: Rng>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

/// Generate one phantom volume and its labels. Identical specs produce
/// identical bytes.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.size;
    let n_empty = (spec.empty_fraction * spec.slices as f64).round() as usize;
    let apical_empty = n_empty.div_ceil(2);
    let basal_empty = n_empty / 2;

    // per-volume geometry
    let cx = s as f64 / 2.0 + draw(&mut rng, (-spec.center_jitter, spec.center_jitter));
    let cy = s as f64 / 2.0 + draw(&mut rng, (-spec.center_jitter, spec.center_jitter));
    let r_in_full = draw(&mut rng, spec.lv_radius);
    let thickness = draw(&mut rng, spec.myo_thickness);
    let r_out = r_in_full + thickness;
    let r_in = r_in_full * spec.lv_scale;
    let r_rv = draw(&mut rng, spec.rv_radius) * (0.5 + 0.5 * spec.lv_scale);
    let rv_angle = draw(&mut rng, (-0.35, 0.35)) + std::f64::consts::PI; // left of the LV
    let rv_dist = r_out + 0.55 * r_rv;
    let (rvx, rvy) = (cx + rv_dist * rv_angle.cos(), cy + rv_dist * rv_angle.sin());

    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("valid sigma");
    let mut voxels = Vec::with_capacity(s * s * spec.slices);
    let mut labels = Vec::with_capacity(s * s * spec.slices);
    for z in 0..spec.slices {
        let empty = z < apical_empty || z >= spec.slices - basal_empty;
        // mild per-slice taper keeps slices distinguishable
        let taper = draw(&mut rng, (0.88, 1.0));
        for y in 0..s {
            for x in 0..s {
                let d_lv = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let d_rv = ((x as f64 - rvx).powi(2) + (y as f64 - rvy).powi(2)).sqrt();
                let label = if empty {
                    0
                } else if d_lv <= r_in * taper {
                    CLASS_LV
                } else if d_lv <= r_out * taper {
                    CLASS_MYO
                } else if d_rv <= r_rv * taper && d_lv > r_out * taper + 1.0 {
                    CLASS_RV
                } else {
                    0
                };
                labels.push(label);
                let v = CLASS_MEANS[label as usize] + noise.sample(&mut rng);
                voxels.push(v as f32);
            }
        }
    }
    let spacing = [1.0, 1.0, 2.0];
    Ok((
        Volume::new(s, s, spec.slices, voxels, spacing)?,
        LabelVolume::new(s, s, spec.slices, labels, NUM_CLASSES, spacing)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_volumes() {
        let spec = PhantomSpec::default();
        let (v1, l1) = gen_phantom(&spec).unwrap();
        let (v2, l2) = gen_phantom(&spec).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn empty_slice_fraction_matches_spec() {
        let spec = PhantomSpec {
            slices: 10,
            empty_fraction: 0.2,
            ..Default::default()
        };
        let (_, labels) = gen_phantom(&spec).unwrap();
        let empty = (0..labels.depth)
            .filter(|&z| !labels.slice_has_foreground(z))
            .count();
        assert_eq!(empty, 2);
        // empties sit at the apical/basal ends
        assert!(!labels.slice_has_foreground(0));
        assert!(!labels.slice_has_foreground(9));
        assert!(labels.slice_has_foreground(5));
    }

    #[test]
    fn ring_encloses_disk_on_every_slice() {
        let spec = PhantomSpec {
            seed: 5,
            ..Default::default()
        };
        let (_, labels) = gen_phantom(&spec).unwrap();
        let (w, h) = (labels.width, labels.height);
        for z in 0..labels.depth {
            let sl = labels.slice(z);
            for y in 0..h {
                for x in 0..w {
                    if sl[y * w + x] != CLASS_LV {
                        continue;
                    }
                    // every 4-neighbor of an LV pixel is LV or MYO
                    for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let n = sl[ny as usize * w + nx as usize];
                        assert!(
                            n == CLASS_LV || n == CLASS_MYO,
                            "LV touches class {n} at slice {z}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn all_foreground_classes_appear() {
        let (_, labels) = gen_phantom(&PhantomSpec::default()).unwrap();
        for class in [CLASS_RV, CLASS_MYO, CLASS_LV] {
            assert!(
                labels.labels.iter().any(|&l| l == class),
                "class {class} missing"
            );
        }
    }

    #[test]
    fn smaller_lv_scale_shrinks_the_blood_pool() {
        let ed = PhantomSpec {
            seed: 3,
            ..Default::default()
        };
        let es = PhantomSpec {
            lv_scale: 0.6,
            ..ed.clone()
        };
        let (_, led) = gen_phantom(&ed).unwrap();
        let (_, les) = gen_phantom(&es).unwrap();
        let ved = led.labels.iter().filter(|&&l| l == CLASS_LV).count();
        let ves = les.labels.iter().filter(|&&l| l == CLASS_LV).count();
        assert!(ves < ved, "ES pool {ves} not smaller than ED pool {ved}");
    }

    #[test]
    fn broken_nesting_is_a_spec_error() {
        let spec = PhantomSpec {
            myo_thickness: (-1.0, 2.0),
            ..Default::default()
        };
        assert!(matches!(gen_phantom(&spec), Err(Error::Spec(_))));
        let too_big = PhantomSpec {
            lv_radius: (30.0, 40.0),
            ..Default::default()
        };
        assert!(matches!(gen_phantom(&too_big), Err(Error::Spec(_))));
    }
}
