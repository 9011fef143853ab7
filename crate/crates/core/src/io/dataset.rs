//! Clip datasets on disk: a JSON manifest next to DSGF blobs, optional per-clip match and
//! mask files, a few-shot annotation file and a class-group file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::blob::{read_blob, write_blob};
use crate::error::{Error, Result};
use crate::graph::{FeatureClip, Grid};
use crate::matcher::{load_matches, save_matches, FrameMatches};
use crate::metrics::ClassGroups;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Blob path relative to the manifest directory.
    pub blob: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frame_ids: Vec<i64>,
    /// Match file (JSON lines) for the clip's consecutive frame pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matches: Option<String>,
    /// Ground-truth masks, in the annotation record format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub window: usize,
    pub grid: Grid,
    pub dim: usize,
    /// Phase count P; labels must be below it.
    pub phases: usize,
    /// Segmentation class count, when masks or annotations are present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_groups: Option<String>,
    pub clips: Vec<ManifestEntry>,
}

/// One frame's patch-resolution mask. `clip` and `frame` locate the features of annotated
/// frames used for prototypes; they are omitted in per-clip mask files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
    pub frame_id: i64,
    pub grid: Grid,
    pub mask: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub split: Split,
    pub clip: FeatureClip,
    pub matches: Option<FrameMatches>,
    /// Ground-truth class per patch, one vector per frame.
    pub masks: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipDataset {
    pub manifest: Manifest,
    pub clips: Vec<ClipRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub class_groups: ClassGroups,
}

impl ClipDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn find(&self, id: &str) -> Option<&ClipRecord> {
        self.clips.iter().find(|c| c.id == id)
    }

    pub fn summary(&self) -> String {
        let m = &self.manifest;
        format!(
            "clips={} P={} w={} n={} d={}",
            self.clips.len(),
            m.phases,
            m.window,
            m.grid.patches(),
            m.dim
        )
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn check_mask(path: &Path, what: &str, record: &AnnotationRecord, grid: Grid, classes: Option<usize>) -> Result<()> {
    if record.grid != grid || record.mask.len() != grid.patches() {
        return Err(Error::format(
            path,
            format!("{what}: mask of {} entries on a {}x{} grid, dataset grid is {}x{}", record.mask.len(), record.grid.rows, record.grid.cols, grid.rows, grid.cols),
        ));
    }
    if let Some(classes) = classes {
        if let Some(&bad) = record.mask.iter().find(|&&c| c >= classes) {
            return Err(Error::format(path, format!("{what}: class {bad} out of range for {classes} classes")));
        }
    }
    Ok(())
}

/// Resolves a manifest path or a directory holding `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() }
}

/// Loads and validates every blob, label, match file and mask the manifest references.
pub fn load_dataset(path: &Path) -> Result<ClipDataset> {
    let manifest_file = manifest_path(path);
    let root = manifest_file.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest: Manifest = read_json(&manifest_file)?;
    if manifest.window == 0 || manifest.grid.patches() == 0 || manifest.dim == 0 {
        return Err(Error::format(&manifest_file, "window, grid and dim must be positive"));
    }
    let n = manifest.grid.patches();
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for entry in &manifest.clips {
        let blob_path = root.join(&entry.blob);
        let blob = read_blob(&blob_path)?;
        if (blob.window, blob.patches, blob.dim()) != (manifest.window, n, manifest.dim) {
            return Err(Error::format(
                &blob_path,
                format!(
                    "blob has w={} n={} d={}, manifest declares w={} n={n} d={}",
                    blob.window,
                    blob.patches,
                    blob.dim(),
                    manifest.window,
                    manifest.dim
                ),
            ));
        }
        if let Some(label) = entry.label {
            if label >= manifest.phases {
                return Err(Error::format(
                    &manifest_file,
                    format!("clip {}: label {label} out of range for {} phases", entry.id, manifest.phases),
                ));
            }
        }
        let frame_ids = if entry.frame_ids.is_empty() { (0..manifest.window as i64).collect() } else { entry.frame_ids.clone() };
        let clip = FeatureClip::new(manifest.window, manifest.grid, blob.features, frame_ids, entry.label)
            .map_err(|e| Error::format(&manifest_file, format!("clip {}: {e}", entry.id)))?;
        let matches = match &entry.matches {
            Some(rel) => {
                let path = root.join(rel);
                let m = load_matches(&path)?;
                for (t, list) in &m.by_pair {
                    if *t + 1 >= manifest.window {
                        return Err(Error::format(&path, format!("frame pair {t} outside a window of {}", manifest.window)));
                    }
                    list.validate(n).map_err(|e| Error::format(&path, format!("frame pair {t}: {e}")))?;
                }
                Some(m)
            }
            None => None,
        };
        let masks = match &entry.masks {
            Some(rel) => {
                let path = root.join(rel);
                let records: Vec<AnnotationRecord> = read_json(&path)?;
                if records.len() != manifest.window {
                    return Err(Error::format(&path, format!("{} masks for a window of {}", records.len(), manifest.window)));
                }
                for (t, r) in records.iter().enumerate() {
                    check_mask(&path, &format!("frame {t}"), r, manifest.grid, manifest.classes)?;
                }
                Some(records.into_iter().map(|r| r.mask).collect())
            }
            None => None,
        };
        clips.push(ClipRecord { id: entry.id.clone(), split: entry.split, clip, matches, masks });
    }
    let annotations = match &manifest.annotations {
        Some(rel) => {
            let path = root.join(rel);
            let records: Vec<AnnotationRecord> = read_json(&path)?;
            for (i, r) in records.iter().enumerate() {
                check_mask(&path, &format!("annotation {i}"), r, manifest.grid, manifest.classes)?;
                let (Some(id), Some(frame)) = (&r.clip, r.frame) else {
                    return Err(Error::format(&path, format!("annotation {i}: missing clip or frame")));
                };
                if !clips.iter().any(|c| &c.id == id) || frame >= manifest.window {
                    return Err(Error::format(&path, format!("annotation {i}: no frame {frame} in clip {id}")));
                }
            }
            records
        }
        None => Vec::new(),
    };
    let class_groups = match &manifest.class_groups {
        Some(rel) => read_json(&root.join(rel))?,
        None => ClassGroups::default(),
    };
    Ok(ClipDataset { manifest, clips, annotations, class_groups })
}

/// Writes the manifest and every referenced file under `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, dataset: &ClipDataset) -> Result<()> {
    let m = &dataset.manifest;
    if m.clips.len() != dataset.clips.len() {
        return Err(Error::Invalid("manifest and clip list disagree".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (entry, record) in m.clips.iter().zip(&dataset.clips) {
        let blob = dir.join(&entry.blob);
        if let Some(parent) = blob.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_blob(&blob, record.clip.window, record.clip.patches(), &record.clip.features)?;
        if let (Some(rel), Some(matches)) = (&entry.matches, &record.matches) {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_matches(&path, matches)?;
        }
        if let (Some(rel), Some(masks)) = (&entry.masks, &record.masks) {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let records: Vec<AnnotationRecord> = masks
                .iter()
                .zip(&record.clip.frame_ids)
                .map(|(mask, &frame_id)| AnnotationRecord { clip: None, frame: None, frame_id, grid: m.grid, mask: mask.clone() })
                .collect();
            write_json(&path, &records)?;
        }
    }
    if let Some(rel) = &m.annotations {
        write_json(&dir.join(rel), &dataset.annotations)?;
    }
    if let Some(rel) = &m.class_groups {
        write_json(&dir.join(rel), &dataset.class_groups)?;
    }
    write_json(&dir.join(MANIFEST_FILE), m)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    read_json(path)
}

pub fn read_class_groups(path: &Path) -> Result<ClassGroups> {
    read_json(path)
}
