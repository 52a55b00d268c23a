//! Per-volume evaluation reports and their CSV serialization.
//!
//! The report CSV holds one row per volume per foreground class followed by
//! three aggregate rows per class (`__mean__`, `__sd__`, `__undefined__`).
//! Undefined metric values serialize as `NA` and are excluded from the mean
//! and sd; the `__undefined__` row counts the exclusions.

use super::{
    confusion_rates, dice, hausdorff, jaccard, msd, region_split, surface, volume_ml, Region,
};
use crate::dataio::LabelVolume;
use crate::error::{Error, Result};

/// All metrics of one (volume, class) pair.
#[derive(Clone, Debug)]
pub struct ClassMetrics {
    pub class: u8,
    pub dice: f64,
    pub jaccard: f64,
    pub msd_mm: Option<f64>,
    pub hd_mm: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub volume_ml_pred: f64,
    pub volume_ml_ref: f64,
    pub dice_apical: Option<f64>,
    pub dice_mid: Option<f64>,
    pub dice_basal: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct VolumeReport {
    pub case_id: String,
    pub classes: Vec<ClassMetrics>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub volumes: Vec<VolumeReport>,
    pub num_classes: usize,
}

fn regional_dice(
    pred: &LabelVolume,
    reference: &LabelVolume,
    regions: &[Option<Region>],
    region: Region,
    class: u8,
) -> Option<f64> {
    let plane = pred.width * pred.height;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (z, r) in regions.iter().enumerate() {
        if *r != Some(region) {
            continue;
        }
        a.extend(pred.slice(z).iter().map(|&l| l == class));
        b.extend(reference.slice(z).iter().map(|&l| l == class));
    }
    debug_assert_eq!(a.len() % plane, 0);
    if a.is_empty() {
        None
    } else {
        Some(dice(&a, &b).expect("equal lengths"))
    }
}

/// Evaluate one predicted volume against its reference. `regional` adds the
/// apical/mid/basal Dice breakdown from the reference's slice partition.
pub fn evaluate_volume(
    case_id: &str,
    pred: &LabelVolume,
    reference: &LabelVolume,
    regional: bool,
) -> Result<VolumeReport> {
    if (pred.width, pred.height, pred.depth) != (reference.width, reference.height, reference.depth)
    {
        return Err(Error::Dim(format!(
            "prediction {}x{}x{} vs reference {}x{}x{}",
            pred.width, pred.height, pred.depth, reference.width, reference.height, reference.depth
        )));
    }
    if pred.num_classes != reference.num_classes {
        return Err(Error::Dim(format!(
            "prediction has {} classes, reference {}",
            pred.num_classes, reference.num_classes
        )));
    }
    let dims = [pred.width, pred.height, pred.depth];
    let spacing = [
        reference.spacing[0] as f64,
        reference.spacing[1] as f64,
        reference.spacing[2] as f64,
    ];
    let regions = if regional { region_split(reference) } else { None };
    let mut classes = Vec::new();
    for class in 1..pred.num_classes as u8 {
        let pm = pred.class_mask(class);
        let rm = reference.class_mask(class);
        let sp = surface(&pm, dims, spacing)?;
        let sr = surface(&rm, dims, spacing)?;
        let rates = confusion_rates(&pm, &rm)?;
        let (dice_apical, dice_mid, dice_basal) = match &regions {
            Some(r) => (
                regional_dice(pred, reference, r, Region::Apical, class),
                regional_dice(pred, reference, r, Region::Mid, class),
                regional_dice(pred, reference, r, Region::Basal, class),
            ),
            None => (None, None, None),
        };
        classes.push(ClassMetrics {
            class,
            dice: dice(&pm, &rm)?,
            jaccard: jaccard(&pm, &rm)?,
            msd_mm: msd(&sp, &sr)?,
            hd_mm: hausdorff(&sp, &sr)?,
            sensitivity: rates.sensitivity,
            specificity: rates.specificity,
            ppv: rates.ppv,
            npv: rates.npv,
            volume_ml_pred: volume_ml(&pm, spacing),
            volume_ml_ref: volume_ml(&rm, spacing),
            dice_apical,
            dice_mid,
            dice_basal,
        });
    }
    Ok(VolumeReport {
        case_id: case_id.to_string(),
        classes,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".to_string(),
    }
}

const METRIC_COLUMNS: [&str; 13] = [
    "dice",
    "jaccard",
    "msd_mm",
    "hd_mm",
    "sensitivity",
    "specificity",
    "ppv",
    "npv",
    "volume_ml_pred",
    "volume_ml_ref",
    "dice_apical",
    "dice_mid",
    "dice_basal",
];

impl ClassMetrics {
    fn column_values(&self) -> Vec<Option<f64>> {
        vec![
            Some(self.dice),
            Some(self.jaccard),
            self.msd_mm,
            self.hd_mm,
            self.sensitivity,
            self.specificity,
            self.ppv,
            self.npv,
            Some(self.volume_ml_pred),
            Some(self.volume_ml_ref),
            self.dice_apical,
            self.dice_mid,
            self.dice_basal,
        ]
    }
}

impl EvalReport {
    pub fn new(num_classes: usize) -> EvalReport {
        EvalReport {
            volumes: Vec::new(),
            num_classes,
        }
    }

    pub fn push(&mut self, report: VolumeReport) {
        self.volumes.push(report);
    }

    /// Mean Dice over foreground classes and volumes.
    pub fn mean_dice(&self) -> f64 {
        let all: Vec<f64> = self
            .volumes
            .iter()
            .flat_map(|v| v.classes.iter().map(|c| c.dice))
            .collect();
        if all.is_empty() {
            return f64::NAN;
        }
        all.iter().sum::<f64>() / all.len() as f64
    }

    /// CSV with one row per volume per class, then per class a mean row, an
    /// sd row, and an undefined-count row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,class,");
        out.push_str(&METRIC_COLUMNS.join(","));
        out.push('\n');
        for v in &self.volumes {
            for c in &v.classes {
                out.push_str(&format!("{},{}", v.case_id, c.class));
                for val in c.column_values() {
                    out.push(',');
                    out.push_str(&fmt_opt(val));
                }
                out.push('\n');
            }
        }
        for class in 1..self.num_classes as u8 {
            let rows: Vec<Vec<Option<f64>>> = self
                .volumes
                .iter()
                .flat_map(|v| v.classes.iter().filter(|c| c.class == class))
                .map(|c| c.column_values())
                .collect();
            let ncols = METRIC_COLUMNS.len();
            let mut means = vec![None; ncols];
            let mut sds = vec![None; ncols];
            let mut undefined = vec![0usize; ncols];
            for col in 0..ncols {
                let defined: Vec<f64> = rows.iter().filter_map(|r| r[col]).collect();
                undefined[col] = rows.len() - defined.len();
                if defined.is_empty() {
                    continue;
                }
                let n = defined.len() as f64;
                let mean = defined.iter().sum::<f64>() / n;
                means[col] = Some(mean);
                let var = defined.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                sds[col] = Some(var.sqrt());
            }
            for (tag, vals) in [("__mean__", &means), ("__sd__", &sds)] {
                out.push_str(&format!("{tag},{class}"));
                for v in vals {
                    out.push(',');
                    out.push_str(&fmt_opt(*v));
                }
                out.push('\n');
            }
            out.push_str(&format!("__undefined__,{class}"));
            for u in &undefined {
                out.push_str(&format!(",{u}"));
            }
            out.push('\n');
        }
        out
    }
}
