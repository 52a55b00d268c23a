//! Volume types, dataset manifests, and everything that turns files into
//! training-ready cases: NIfTI-1 I/O, preprocessing, augmentation, fold
//! splitting, and synthetic phantom generation.

pub mod augment;
pub mod folds;
pub mod nifti;
pub mod phantom;
pub mod preprocess;

use std::path::{Path, PathBuf};

use crate::distmap::LabelSlice;
use crate::error::{Error, Result};

/// A 3-D intensity grid with physical spacing. Voxels are stored x-fastest,
/// then y, then z, matching the NIfTI payload order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub data: Vec<f32>,
    /// mm per voxel along x, y, z.
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
}

impl Volume {
    pub fn new(
        width: usize,
        height: usize,
        depth: usize,
        data: Vec<f32>,
        spacing: [f32; 3],
    ) -> Result<Volume> {
        if data.len() != width * height * depth {
            return Err(Error::Dim(format!(
                "volume {width}x{height}x{depth} needs {} voxels, got {}",
                width * height * depth,
                data.len()
            )));
        }
        if spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::Dim(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Volume {
            width,
            height,
            depth,
            data,
            spacing,
            origin: [0.0; 3],
        })
    }

    pub fn numel(&self) -> usize {
        self.width * self.height * self.depth
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[z * n..(z + 1) * n]
    }
}

/// A 3-D grid of class labels with physical spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
}

impl LabelVolume {
    pub fn new(
        width: usize,
        height: usize,
        depth: usize,
        labels: Vec<u8>,
        num_classes: usize,
        spacing: [f32; 3],
    ) -> Result<LabelVolume> {
        if labels.len() != width * height * depth {
            return Err(Error::Dim(format!(
                "label volume {width}x{height}x{depth} needs {} voxels, got {}",
                width * height * depth,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Label(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::Dim(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(LabelVolume {
            width,
            height,
            depth,
            labels,
            num_classes,
            spacing,
            origin: [0.0; 3],
        })
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.width * self.height;
        &self.labels[z * n..(z + 1) * n]
    }

    pub fn label_slice(&self, z: usize) -> LabelSlice {
        LabelSlice {
            height: self.height,
            width: self.width,
            labels: self.slice(z).to_vec(),
        }
    }

    /// Flat boolean mask of one class over the whole volume.
    pub fn class_mask(&self, class_id: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class_id).collect()
    }

    pub fn slice_has_foreground(&self, z: usize) -> bool {
        self.slice(z).iter().any(|&l| l != 0)
    }
}

/// One dataset case: an image volume, its reference labels, and an optional
/// stratification tag.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub labels: LabelVolume,
    pub subgroup: Option<String>,
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub subgroup: Option<String>,
}

/// Manifest format: one case per line, `case_id, image_path, label_path,
/// subgroup_tag` with an empty tag allowed. `#` starts a comment.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Config(format!(
                "manifest line {}: expected 3 or 4 comma-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let subgroup = fields
            .get(3)
            .filter(|s| !s.is_empty())
            .map(|s| s.to_string());
        entries.push(ManifestEntry {
            case_id: fields[0].to_string(),
            image_path: PathBuf::from(fields[1]),
            label_path: PathBuf::from(fields[2]),
            subgroup,
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!(
            "{}, {}, {}, {}\n",
            e.case_id,
            e.image_path.display(),
            e.label_path.display(),
            e.subgroup.as_deref().unwrap_or("")
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Load every case referenced by a manifest. Relative paths resolve against
/// the manifest's own directory.
pub fn load_cases(manifest_path: &Path, num_classes: usize) -> Result<Vec<Case>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest_path)?;
    let mut cases = Vec::with_capacity(entries.len());
    for e in entries {
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let image = nifti::read_volume(&resolve(&e.image_path))?;
        let labels = nifti::read_label_volume(&resolve(&e.label_path), num_classes)?;
        if (image.width, image.height, image.depth) != (labels.width, labels.height, labels.depth)
        {
            return Err(Error::Dim(format!(
                "case {}: image {}x{}x{} vs labels {}x{}x{}",
                e.case_id,
                image.width,
                image.height,
                image.depth,
                labels.width,
                labels.height,
                labels.depth
            )));
        }
        cases.push(Case {
            id: e.case_id,
            image,
            labels,
            subgroup: e.subgroup,
        });
    }
    Ok(cases)
}

/// Fold file format: one `case_id, fold_index` pair per line.
pub fn write_folds(path: &Path, ids: &[String], folds: &[usize]) -> Result<()> {
    let mut text = String::new();
    for (id, f) in ids.iter().zip(folds) {
        text.push_str(&format!("{id}, {f}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_folds(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, fold) = line.split_once(',').ok_or_else(|| {
            Error::Config(format!("fold file line {}: expected `case_id, fold`", lineno + 1))
        })?;
        let fold = fold.trim().parse::<usize>().map_err(|_| {
            Error::Config(format!("fold file line {}: bad fold index `{fold}`", lineno + 1))
        })?;
        out.push((id.trim().to_string(), fold));
    }
    Ok(out)
}
