//! Dataset ingestion and writing: grayscale image slices, the JSON manifest
//! carrying labels and intensity-calibration metadata, and calibrated
//! conversion.
//!
//! On-disk layout: `<root>/manifest.json` plus `<root>/images/<id>.pgm`.

mod pgm;

pub use pgm::{parse_pgm, write_pgm};

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("not a binary PGM: bad magic")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    BadHeader(String),
    #[error("PGM payload truncated: expected {expected} samples, decoded {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("{0} trailing bytes after PGM raster")]
    TrailingBytes(usize),
    #[error("sample value {value} exceeds max value {max_value}")]
    ValueOverflow { value: u32, max_value: u32 },
    #[error("unsupported max value {0} (must be 255 or 65535)")]
    UnsupportedMaxVal(u64),
    #[error("invalid image slice: {0}")]
    BadSlice(String),
    #[error("manifest schema error: {0}")]
    SchemaError(String),
    #[error("label {label} out of range for class_count {class_count}")]
    LabelOutOfRange { label: f64, class_count: usize },
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("manifest references image {0:?} but images/{0}.pgm does not exist")]
    MissingImage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One grayscale image: raw integer samples in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSlice {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// 255 for 8-bit samples, 65535 for 16-bit.
    pub max_value: u32,
    pub pixels: Vec<u32>,
}

impl ImageSlice {
    pub fn new(
        id: &str,
        width: usize,
        height: usize,
        max_value: u32,
        pixels: Vec<u32>,
    ) -> Result<Self, CorpusError> {
        if id.is_empty() {
            return Err(CorpusError::BadSlice("id must be non-empty".into()));
        }
        if width == 0 || height == 0 {
            return Err(CorpusError::BadSlice(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if max_value != 255 && max_value != 65535 {
            return Err(CorpusError::UnsupportedMaxVal(max_value as u64));
        }
        if pixels.len() != width * height {
            return Err(CorpusError::BadSlice(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(&value) = pixels.iter().find(|&&p| p > max_value) {
            return Err(CorpusError::ValueOverflow { value, max_value });
        }
        Ok(ImageSlice {
            id: id.to_string(),
            width,
            height,
            max_value,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u32) {
        debug_assert!(value <= self.max_value);
        self.pixels[row * self.width + col] = value;
    }
}

/// Affine raw-to-physical intensity mapping, the two DICOM-derived fields
/// the audit needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationMeta {
    pub slope: f64,
    pub intercept: f64,
    /// Expected span of calibrated values, when the source declares one.
    #[serde(default)]
    pub declared_range: Option<(f64, f64)>,
}

impl CalibrationMeta {
    pub fn identity() -> Self {
        CalibrationMeta {
            slope: 1.0,
            intercept: 0.0,
            declared_range: None,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if !self.slope.is_finite() || !self.intercept.is_finite() {
            return Err("calibration slope and intercept must be finite".into());
        }
        if self.slope == 0.0 {
            return Err("calibration slope must be nonzero".into());
        }
        if let Some((lo, hi)) = self.declared_range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(format!("declared_range must satisfy min < max, got ({lo}, {hi})"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Classification => write!(f, "classification"),
            TaskKind::Regression => write!(f, "regression"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Class index (stored as a whole number) or regression target.
    pub label: f64,
    pub calibration: CalibrationMeta,
}

impl ManifestEntry {
    /// Label as a class index; valid only after manifest validation.
    pub fn class(&self) -> usize {
        self.label as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), CorpusError> {
        match self.task {
            TaskKind::Classification => {
                let class_count = self.class_count.ok_or_else(|| {
                    CorpusError::SchemaError(
                        "class_count is required for classification manifests".into(),
                    )
                })?;
                if class_count == 0 {
                    return Err(CorpusError::SchemaError(
                        "class_count must be positive".into(),
                    ));
                }
                for entry in &self.entries {
                    let label = entry.label;
                    if label.fract() != 0.0 || label < 0.0 || label >= class_count as f64 {
                        return Err(CorpusError::LabelOutOfRange { label, class_count });
                    }
                }
            }
            TaskKind::Regression => {
                if self.class_count.is_some() {
                    return Err(CorpusError::SchemaError(
                        "class_count is only valid for classification manifests".into(),
                    ));
                }
                for entry in &self.entries {
                    if !entry.label.is_finite() {
                        return Err(CorpusError::SchemaError(format!(
                            "regression label for {:?} is not finite",
                            entry.id
                        )));
                    }
                }
            }
        }
        let mut seen = BTreeSet::new();
        for entry in &self.entries {
            if entry.id.is_empty() {
                return Err(CorpusError::SchemaError("image id must be non-empty".into()));
            }
            // Ids double as file stems under images/.
            if entry.id.contains(['/', '\\', '\0']) || entry.id == "." || entry.id == ".." {
                return Err(CorpusError::SchemaError(format!(
                    "image id {:?} is not a valid file stem",
                    entry.id
                )));
            }
            if !seen.insert(entry.id.as_str()) {
                return Err(CorpusError::DuplicateId(entry.id.clone()));
            }
            entry
                .calibration
                .validate()
                .map_err(|msg| CorpusError::SchemaError(format!("{:?}: {msg}", entry.id)))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        // serde_json order is the struct field order, so output is stable.
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// Parses and validates a manifest document.
pub fn load_manifest(text: &str) -> Result<DatasetManifest, CorpusError> {
    let manifest: DatasetManifest = serde_json::from_str(text)
        .map_err(|e| CorpusError::SchemaError(e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Image expressed in calibrated units: values[i] = slope * pixels[i] + intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedImage {
    pub source_id: String,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Applies the affine calibration in double precision.
pub fn apply_calibration(slice: &ImageSlice, meta: &CalibrationMeta) -> CalibratedImage {
    CalibratedImage {
        source_id: slice.id.clone(),
        width: slice.width,
        height: slice.height,
        values: slice
            .pixels
            .iter()
            .map(|&p| meta.slope * p as f64 + meta.intercept)
            .collect(),
    }
}

/// A dataset loaded from disk: images are in manifest order, and files that
/// were present but unreferenced are recorded as warnings.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageSlice>,
    pub warnings: Vec<String>,
}

/// Loads `<root>/manifest.json` and every referenced `<root>/images/<id>.pgm`.
/// Extra files under images/ are ignored with a warning; a manifest id with
/// no file is an error.
pub fn load_dataset(root: &Path) -> Result<LoadedDataset, CorpusError> {
    let manifest_path = root.join("manifest.json");
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest = load_manifest(&text)?;

    let images_dir = root.join("images");
    let mut images = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path = images_dir.join(format!("{}.pgm", entry.id));
        let bytes = match std::fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CorpusError::MissingImage(entry.id.clone()))
            }
            Err(e) => return Err(io_err(&path, e)),
        };
        images.push(parse_pgm(&bytes, &entry.id)?);
    }

    let known: BTreeSet<&str> = manifest.entries.iter().map(|e| e.id.as_str()).collect();
    let mut warnings = Vec::new();
    let dir = std::fs::read_dir(&images_dir).map_err(|e| io_err(&images_dir, e))?;
    for item in dir {
        let item = item.map_err(|e| io_err(&images_dir, e))?;
        let name = item.file_name().to_string_lossy().into_owned();
        let stem = name.strip_suffix(".pgm");
        match stem {
            Some(stem) if known.contains(stem) => {}
            _ => warnings.push(format!("ignoring unmanifested file images/{name}")),
        }
    }
    warnings.sort();

    Ok(LoadedDataset {
        manifest,
        images,
        warnings,
    })
}

/// Writes a dataset tree: `<root>/manifest.json` plus one PGM per entry.
/// `images` must match the manifest entries one-to-one, in order.
pub fn save_dataset(
    root: &Path,
    manifest: &DatasetManifest,
    images: &[ImageSlice],
) -> Result<(), CorpusError> {
    manifest.validate()?;
    if manifest.entries.len() != images.len()
        || manifest
            .entries
            .iter()
            .zip(images)
            .any(|(e, img)| e.id != img.id)
    {
        return Err(CorpusError::SchemaError(
            "images do not match manifest entries".into(),
        ));
    }
    let images_dir = root.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| io_err(&images_dir, e))?;
    let manifest_path = root.join("manifest.json");
    std::fs::write(&manifest_path, manifest.to_json())
        .map_err(|e| io_err(&manifest_path, e))?;
    for image in images {
        let path = images_dir.join(format!("{}.pgm", image.id));
        std::fs::write(&path, write_pgm(image)).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}
