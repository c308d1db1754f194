//! Synthetic dataset generation with a genuine class/regression signal and
//! injected, ground-truth-annotated data-quality issues.
//!
//! Every image carries one signal blob whose intensity encodes the label.
//! Issue injection then writes a label-correlated artifact (constant border
//! padding, a circular ring, a bright bottom band, a corner marker) or shifts
//! the calibration metadata of a label-aligned subset while re-expressing the
//! raw pixels in the shifted scale. Injection never overwrites signal pixels,
//! and ground truth records the artifact and signal masks per image.
//!
//! Randomness is drawn from explicit per-image streams (stream index = image
//! index; corpus-level draws use stream `1 << 63`), so identical (spec,
//! issue, seed) inputs produce byte-identical corpora.

use crate::corpus::{
    save_dataset, CalibrationMeta, CorpusError, DatasetManifest, ImageSlice, ManifestEntry,
    TaskKind,
};
use crate::mask::Mask;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

/// Stream index reserved for corpus-level draws (e.g. the alignment shuffle).
const CORPUS_STREAM: u64 = 1 << 63;

const MAX_VALUE: u32 = 65535;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid corpus spec: {0}")]
    SpecError(String),
    #[error("artifact would cover {covered:.0}% of the signal mask of image {id:?}")]
    GeometryOverlap { id: String, covered: f64 },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Parameters of the signal blob every image carries.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    /// Blob radius is drawn uniformly from this range (pixels).
    pub radius: (f64, f64),
    /// Intensity step added inside the blob, scaled by class (or label).
    pub intensity_delta: f64,
    /// Standard deviation of the background Gaussian noise.
    pub noise_sigma: f64,
    /// Mean background level in raw units.
    pub background: f64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        SignalSpec {
            radius: (5.0, 9.0),
            intensity_delta: 400.0,
            noise_sigma: 40.0,
            background: 1000.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    /// Side of the square images, pixels.
    pub image_size: usize,
    pub count: usize,
    pub task: TaskKind,
    /// Number of classes; ignored for regression.
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub signal: SignalSpec,
    pub seed: u64,
}

fn default_classes() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    PaddingConfound,
    CircularArtifact,
    PatientTable,
    CalibrationShift,
    CornerMarker,
}

impl IssueKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            IssueKind::PaddingConfound => "padding_confound",
            IssueKind::CircularArtifact => "circular_artifact",
            IssueKind::PatientTable => "patient_table",
            IssueKind::CalibrationShift => "calibration_shift",
            IssueKind::CornerMarker => "corner_marker",
        }
    }
}

impl std::fmt::Display for IssueKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// Which borders padding is applied to.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sides {
    pub left: bool,
    pub right: bool,
    pub top: bool,
    pub bottom: bool,
}

impl Sides {
    pub fn all() -> Self {
        Sides {
            left: true,
            right: true,
            top: true,
            bottom: true,
        }
    }

    pub fn columns() -> Self {
        Sides {
            left: true,
            right: true,
            top: false,
            bottom: false,
        }
    }
}

/// Kind-specific artifact parameters. Two-element tuples hold the values
/// selected by the per-image binary level; the level is what gets aligned
/// with the label.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IssueParams {
    PaddingConfound {
        width: usize,
        sides: Sides,
        /// Constant fill value per level.
        values: (u32, u32),
    },
    CircularArtifact {
        radius: f64,
        thickness: f64,
        /// Intensity added on the ring per level.
        deltas: (f64, f64),
    },
    PatientTable {
        /// Fraction of the image height occupied by the band at the bottom.
        band_frac: f64,
        /// Intensity added on the band per level.
        deltas: (f64, f64),
    },
    CalibrationShift {
        /// Added to the manifest intercept of level-1 images; their raw
        /// pixels are re-expressed so calibrated content is unchanged.
        shift: f64,
    },
    CornerMarker {
        size: usize,
        corner: Corner,
        /// Constant marker value per level.
        values: (u32, u32),
    },
}

impl IssueParams {
    pub fn kind(&self) -> IssueKind {
        match self {
            IssueParams::PaddingConfound { .. } => IssueKind::PaddingConfound,
            IssueParams::CircularArtifact { .. } => IssueKind::CircularArtifact,
            IssueParams::PatientTable { .. } => IssueKind::PatientTable,
            IssueParams::CalibrationShift { .. } => IssueKind::CalibrationShift,
            IssueParams::CornerMarker { .. } => IssueKind::CornerMarker,
        }
    }

    /// Conventional parameters for a given image size.
    pub fn default_for(kind: IssueKind, image_size: usize) -> Self {
        match kind {
            IssueKind::PaddingConfound => IssueParams::PaddingConfound {
                width: 6,
                sides: Sides::all(),
                values: (0, 2000),
            },
            IssueKind::CircularArtifact => IssueParams::CircularArtifact {
                radius: image_size as f64 / 2.0 - 4.0,
                thickness: 3.0,
                deltas: (500.0, 1000.0),
            },
            IssueKind::PatientTable => IssueParams::PatientTable {
                band_frac: 0.08,
                deltas: (600.0, 1200.0),
            },
            IssueKind::CalibrationShift => IssueParams::CalibrationShift { shift: -500.0 },
            IssueKind::CornerMarker => IssueParams::CornerMarker {
                size: 8,
                corner: Corner::TopLeft,
                values: (300, 2600),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IssueSpec {
    /// Fraction of images whose artifact level is forced to follow the label.
    pub correlation: f64,
    pub params: IssueParams,
}

/// Per-image oracle data recorded by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTruth {
    pub artifact_mask: Mask,
    pub signal_mask: Mask,
    pub kinds: BTreeSet<IssueKind>,
    pub true_calibration: CalibrationMeta,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub images: BTreeMap<String, ImageTruth>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageTruthDoc {
    width: usize,
    height: usize,
    artifact_rle: Vec<usize>,
    signal_rle: Vec<usize>,
    kinds: BTreeSet<IssueKind>,
    true_calibration: CalibrationMeta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthDoc {
    images: BTreeMap<String, ImageTruthDoc>,
}

impl GroundTruth {
    pub fn to_json(&self) -> String {
        let doc = GroundTruthDoc {
            images: self
                .images
                .iter()
                .map(|(id, t)| {
                    (
                        id.clone(),
                        ImageTruthDoc {
                            width: t.signal_mask.width,
                            height: t.signal_mask.height,
                            artifact_rle: t.artifact_mask.to_rle(),
                            signal_rle: t.signal_mask.to_rle(),
                            kinds: t.kinds.clone(),
                            true_calibration: t.true_calibration,
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("ground truth serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let doc: GroundTruthDoc = serde_json::from_str(text)
            .map_err(|e| SynthError::SpecError(format!("ground truth: {e}")))?;
        let mut images = BTreeMap::new();
        for (id, t) in doc.images {
            let artifact = Mask::from_rle(t.width, t.height, &t.artifact_rle)
                .map_err(|e| SynthError::SpecError(format!("{id}: {e}")))?;
            let signal = Mask::from_rle(t.width, t.height, &t.signal_rle)
                .map_err(|e| SynthError::SpecError(format!("{id}: {e}")))?;
            images.insert(
                id,
                ImageTruth {
                    artifact_mask: artifact,
                    signal_mask: signal,
                    kinds: t.kinds,
                    true_calibration: t.true_calibration,
                },
            );
        }
        Ok(GroundTruth { images })
    }
}

/// A generated dataset together with its oracle.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageSlice>,
    pub truth: GroundTruth,
}

fn image_id(index: usize) -> String {
    format!("img{index:05}")
}

fn validate_spec(spec: &CorpusSpec) -> Result<(), SynthError> {
    let err = |msg: String| Err(SynthError::SpecError(msg));
    if spec.image_size < 32 {
        return err(format!("image_size must be >= 32, got {}", spec.image_size));
    }
    if spec.count < 2 {
        return err(format!("count must be >= 2, got {}", spec.count));
    }
    if spec.task == TaskKind::Classification && spec.classes < 2 {
        return err(format!("classes must be >= 2, got {}", spec.classes));
    }
    let s = &spec.signal;
    if s.noise_sigma < 0.0 {
        return err(format!("noise_sigma must be >= 0, got {}", s.noise_sigma));
    }
    if !(s.radius.0 > 0.0 && s.radius.0 <= s.radius.1) {
        return err(format!("radius range invalid: {:?}", s.radius));
    }
    if s.intensity_delta < 0.0 {
        return err(format!("intensity_delta must be >= 0, got {}", s.intensity_delta));
    }
    let (rows, cols) = blob_box(spec.image_size);
    let reach = s.radius.1.ceil() as usize;
    if rows.0 + reach >= rows.1.saturating_sub(reach) || cols.0 + reach >= cols.1.saturating_sub(reach)
    {
        return err(format!(
            "signal radius up to {} does not fit the central placement box of a {}px image",
            s.radius.1, spec.image_size
        ));
    }
    Ok(())
}

/// Central placement box for blob disks (row span, col span). The box keeps
/// signal clear of the borders and of the bottom band where tables go.
fn blob_box(size: usize) -> ((usize, usize), (usize, usize)) {
    let s = size as f64;
    let rows = ((0.15 * s).ceil() as usize, (0.70 * s).floor() as usize);
    let cols = ((0.15 * s).ceil() as usize, (0.85 * s).floor() as usize);
    (rows, cols)
}

fn clamp_to_pixel(v: f64) -> u32 {
    v.round().clamp(0.0, MAX_VALUE as f64) as u32
}

/// Generates a clean corpus: Gaussian background plus one label-encoding
/// signal blob per image; calibration is identity everywhere.
pub fn gen_clean(spec: &CorpusSpec) -> Result<GeneratedCorpus, SynthError> {
    validate_spec(spec)?;
    let size = spec.image_size;
    let (row_box, col_box) = blob_box(size);

    let mut entries = Vec::with_capacity(spec.count);
    let mut images = Vec::with_capacity(spec.count);
    let mut truth = GroundTruth::default();

    for index in 0..spec.count {
        let mut rng = Rng::stream(spec.seed, index as u64);
        let id = image_id(index);

        // Draw order: label (regression), radius, center row, center col, noise.
        let (label, blob_add) = match spec.task {
            TaskKind::Classification => {
                let class = index % spec.classes;
                (
                    class as f64,
                    spec.signal.intensity_delta * (class as f64 + 1.0),
                )
            }
            TaskKind::Regression => {
                let u = rng.next_f64();
                (u, spec.signal.intensity_delta * (0.5 + u))
            }
        };
        let radius = rng.range_f64(spec.signal.radius.0, spec.signal.radius.1);
        let reach = radius.ceil() as usize;
        let center_row = rng.range_usize(row_box.0 + reach, row_box.1 - reach + 1);
        let center_col = rng.range_usize(col_box.0 + reach, col_box.1 - reach + 1);

        let signal_mask = Mask::from_fn(size, size, |r, c| {
            let dr = r as f64 - center_row as f64;
            let dc = c as f64 - center_col as f64;
            dr * dr + dc * dc <= radius * radius
        });

        let mut pixels = Vec::with_capacity(size * size);
        for p in 0..size * size {
            let noise = rng.normal(0.0, spec.signal.noise_sigma);
            let base = spec.signal.background
                + if signal_mask.bits()[p] { blob_add } else { 0.0 };
            pixels.push(clamp_to_pixel(base + noise));
        }

        entries.push(ManifestEntry {
            id: id.clone(),
            label,
            calibration: CalibrationMeta::identity(),
        });
        images.push(ImageSlice::new(&id, size, size, MAX_VALUE, pixels)?);
        truth.images.insert(
            id,
            ImageTruth {
                artifact_mask: Mask::new(size, size),
                signal_mask,
                kinds: BTreeSet::new(),
                true_calibration: CalibrationMeta::identity(),
            },
        );
    }

    let manifest = DatasetManifest {
        task: spec.task,
        class_count: match spec.task {
            TaskKind::Classification => Some(spec.classes),
            TaskKind::Regression => None,
        },
        entries,
    };
    manifest.validate()?;
    Ok(GeneratedCorpus {
        manifest,
        images,
        truth,
    })
}

/// The binary level an image's label maps to when the artifact is aligned.
fn label_level(task: TaskKind, label: f64, classes: usize, label_median: f64) -> usize {
    match task {
        TaskKind::Classification => {
            if (label as usize) * 2 >= classes {
                1
            } else {
                0
            }
        }
        TaskKind::Regression => usize::from(label >= label_median),
    }
}

/// The pixel region an artifact occupies, independent of level.
fn artifact_region(params: &IssueParams, size: usize) -> Mask {
    match *params {
        IssueParams::PaddingConfound { width, sides, .. } => Mask::from_fn(size, size, |r, c| {
            (sides.left && c < width)
                || (sides.right && c >= size - width)
                || (sides.top && r < width)
                || (sides.bottom && r >= size - width)
        }),
        IssueParams::CircularArtifact {
            radius, thickness, ..
        } => {
            let center = (size as f64 - 1.0) / 2.0;
            Mask::from_fn(size, size, |r, c| {
                let d = ((r as f64 - center).powi(2) + (c as f64 - center).powi(2)).sqrt();
                (d - radius).abs() <= thickness / 2.0
            })
        }
        IssueParams::PatientTable { band_frac, .. } => {
            let band_rows = ((band_frac * size as f64).round() as usize).max(1);
            let start = size - band_rows.min(size);
            Mask::from_fn(size, size, |r, _| r >= start)
        }
        IssueParams::CornerMarker { size: m, corner, .. } => {
            let inset = 1usize;
            let (r0, c0) = match corner {
                Corner::TopLeft => (inset, inset),
                Corner::TopRight => (inset, size - inset - m),
                Corner::BottomLeft => (size - inset - m, inset),
                Corner::BottomRight => (size - inset - m, size - inset - m),
            };
            Mask::from_fn(size, size, |r, c| {
                r >= r0 && r < r0 + m && c >= c0 && c < c0 + m
            })
        }
        IssueParams::CalibrationShift { .. } => Mask::new(size, size),
    }
}

fn validate_issue(issue: &IssueSpec, size: usize) -> Result<(), SynthError> {
    let err = |msg: String| Err(SynthError::SpecError(msg));
    if !(0.0..=1.0).contains(&issue.correlation) {
        return err(format!(
            "correlation must be in [0, 1], got {}",
            issue.correlation
        ));
    }
    match issue.params {
        IssueParams::PaddingConfound { width, .. } => {
            if width == 0 || width * 2 >= size {
                return err(format!("padding width {width} does not fit a {size}px image"));
            }
        }
        IssueParams::CircularArtifact {
            radius, thickness, ..
        } => {
            if radius <= 0.0 || thickness <= 0.0 || radius + thickness / 2.0 >= size as f64 / 2.0 {
                return err(format!(
                    "ring radius {radius} / thickness {thickness} does not fit a {size}px image"
                ));
            }
        }
        IssueParams::PatientTable { band_frac, .. } => {
            if !(0.0 < band_frac && band_frac <= 0.25) {
                return err(format!("band_frac must be in (0, 0.25], got {band_frac}"));
            }
        }
        IssueParams::CalibrationShift { shift } => {
            if !shift.is_finite() || shift == 0.0 {
                return err(format!("calibration shift must be finite and nonzero, got {shift}"));
            }
        }
        IssueParams::CornerMarker { size: m, .. } => {
            if m == 0 || m + 1 >= size / 2 {
                return err(format!("marker size {m} does not fit a {size}px image"));
            }
        }
    }
    Ok(())
}

/// Injects one issue into a corpus. A fraction `correlation` of images
/// (chosen by a seeded shuffle, rounded to the nearest count) takes its
/// artifact level from the label; the rest draw a random level. Signal
/// pixels are never overwritten.
pub fn inject_issue(
    corpus: &mut GeneratedCorpus,
    issue: &IssueSpec,
    seed: u64,
) -> Result<(), SynthError> {
    let count = corpus.images.len();
    if count == 0 {
        return Err(SynthError::SpecError("corpus is empty".into()));
    }
    let size = corpus.images[0].width;
    validate_issue(issue, size)?;

    let region = artifact_region(&issue.params, size);

    // Fail before mutating anything.
    for image in &corpus.images {
        if image.width != size || image.height != size {
            return Err(SynthError::SpecError(format!(
                "image {:?} is not {size}x{size}",
                image.id
            )));
        }
        let truth = &corpus.truth.images[&image.id];
        let signal_pixels = truth.signal_mask.count();
        if signal_pixels > 0 {
            let covered = region.overlap(&truth.signal_mask) as f64 / signal_pixels as f64;
            if covered > 0.5 {
                return Err(SynthError::GeometryOverlap {
                    id: image.id.clone(),
                    covered: covered * 100.0,
                });
            }
        }
    }

    // Exactly round(correlation * count) images are label-aligned.
    let mut order: Vec<usize> = (0..count).collect();
    Rng::stream(seed, CORPUS_STREAM).shuffle(&mut order);
    let aligned_count = (issue.correlation * count as f64).round() as usize;
    let aligned: BTreeSet<usize> = order.into_iter().take(aligned_count).collect();

    let label_median = {
        let mut labels: Vec<f64> = corpus.manifest.entries.iter().map(|e| e.label).collect();
        labels.sort_by(f64::total_cmp);
        labels[count / 2]
    };
    let classes = corpus.manifest.class_count.unwrap_or(2);
    let kind = issue.params.kind();

    for index in 0..count {
        let entry = &mut corpus.manifest.entries[index];
        let image = &mut corpus.images[index];
        let truth = corpus
            .truth
            .images
            .get_mut(&entry.id)
            .expect("truth entry exists");

        let level = if aligned.contains(&index) {
            label_level(corpus.manifest.task, entry.label, classes, label_median)
        } else {
            usize::from(Rng::stream(seed, index as u64).next_bool())
        };

        match issue.params {
            IssueParams::PaddingConfound { values, .. }
            | IssueParams::CornerMarker { values, .. } => {
                let value = if level == 0 { values.0 } else { values.1 };
                for r in 0..size {
                    for c in 0..size {
                        if region.get(r, c) && !truth.signal_mask.get(r, c) {
                            image.set(r, c, value);
                            truth.artifact_mask.set(r, c, true);
                        }
                    }
                }
                truth.kinds.insert(kind);
            }
            IssueParams::CircularArtifact { deltas, .. }
            | IssueParams::PatientTable { deltas, .. } => {
                let delta = if level == 0 { deltas.0 } else { deltas.1 };
                for r in 0..size {
                    for c in 0..size {
                        if region.get(r, c) && !truth.signal_mask.get(r, c) {
                            let v = image.get(r, c) as f64 + delta;
                            image.set(r, c, clamp_to_pixel(v));
                            truth.artifact_mask.set(r, c, true);
                        }
                    }
                }
                truth.kinds.insert(kind);
            }
            IssueParams::CalibrationShift { shift } => {
                if level == 1 {
                    let meta = &mut entry.calibration;
                    let raw_shift = shift / meta.slope;
                    for p in image.pixels.iter_mut() {
                        *p = clamp_to_pixel(*p as f64 - raw_shift);
                    }
                    meta.intercept += shift;
                    truth.true_calibration = *meta;
                    truth.kinds.insert(kind);
                }
            }
        }
    }
    Ok(())
}

/// Writes the corpus layout plus `<root>/ground_truth.json`.
pub fn save_corpus(root: &Path, corpus: &GeneratedCorpus) -> Result<(), SynthError> {
    save_dataset(root, &corpus.manifest, &corpus.images)?;
    let path = root.join("ground_truth.json");
    std::fs::write(&path, corpus.truth.to_json()).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Reads `<root>/ground_truth.json`.
pub fn load_ground_truth(root: &Path) -> Result<GroundTruth, SynthError> {
    let path = root.join("ground_truth.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    GroundTruth::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_pgm;

    fn spec(count: usize, task: TaskKind, seed: u64) -> CorpusSpec {
        CorpusSpec {
            image_size: 64,
            count,
            task,
            classes: 2,
            signal: SignalSpec::default(),
            seed,
        }
    }

    fn corpus_bytes(c: &GeneratedCorpus) -> Vec<u8> {
        let mut bytes = c.manifest.to_json().into_bytes();
        for image in &c.images {
            bytes.extend(write_pgm(image));
        }
        bytes.extend(c.truth.to_json().into_bytes());
        bytes
    }

    #[test]
    fn seeded_generation_is_byte_identical() {
        let s = spec(10, TaskKind::Classification, 7);
        let a = gen_clean(&s).unwrap();
        let b = gen_clean(&s).unwrap();
        assert_eq!(corpus_bytes(&a), corpus_bytes(&b));
    }

    #[test]
    fn degenerate_spec_yields_identical_images() {
        let mut s = spec(6, TaskKind::Classification, 3);
        s.signal.noise_sigma = 0.0;
        s.signal.intensity_delta = 0.0;
        let c = gen_clean(&s).unwrap();
        for image in &c.images[1..] {
            assert_eq!(image.pixels, c.images[0].pixels);
        }
    }

    #[test]
    fn regression_label_tracks_blob_intensity() {
        let c = gen_clean(&spec(200, TaskKind::Regression, 11)).unwrap();
        let mut labels = Vec::new();
        let mut means = Vec::new();
        for (entry, image) in c.manifest.entries.iter().zip(&c.images) {
            let mask = &c.truth.images[&entry.id].signal_mask;
            let (mut sum, mut n) = (0.0, 0usize);
            for (p, &inside) in image.pixels.iter().zip(mask.bits()) {
                if inside {
                    sum += *p as f64;
                    n += 1;
                }
            }
            labels.push(entry.label);
            means.push(sum / n as f64);
        }
        let r = pearson(&labels, &means);
        assert!(r >= 0.99, "correlation {r}");
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    /// Plug-in mutual information (nats -> bits) between two binary vectors.
    fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len() as f64;
        let mut joint = [[0.0f64; 2]; 2];
        for (&x, &y) in a.iter().zip(b) {
            joint[x][y] += 1.0;
        }
        let mut mi = 0.0;
        for x in 0..2 {
            for y in 0..2 {
                let pxy = joint[x][y] / n;
                if pxy > 0.0 {
                    let px = (joint[x][0] + joint[x][1]) / n;
                    let py = (joint[0][y] + joint[1][y]) / n;
                    mi += pxy * (pxy / (px * py)).ln();
                }
            }
        }
        mi / std::f64::consts::LN_2
    }

    #[test]
    fn zero_correlation_has_no_label_information() {
        let mut c = gen_clean(&spec(500, TaskKind::Classification, 5)).unwrap();
        let issue = IssueSpec {
            correlation: 0.0,
            params: IssueParams::default_for(IssueKind::CornerMarker, 64),
        };
        inject_issue(&mut c, &issue, 99).unwrap();
        // Recover the level from the written marker value.
        let high = match issue.params {
            IssueParams::CornerMarker { values, .. } => values.1,
            _ => unreachable!(),
        };
        let labels: Vec<usize> = c.manifest.entries.iter().map(|e| e.class()).collect();
        let levels: Vec<usize> = c
            .images
            .iter()
            .map(|img| usize::from(img.get(4, 4) == high))
            .collect();
        let mi = mutual_information(&labels, &levels);
        assert!(mi.abs() <= 0.02, "mutual information {mi}");
    }

    #[test]
    fn padding_mask_is_the_specified_columns() {
        let mut c = gen_clean(&spec(4, TaskKind::Classification, 2)).unwrap();
        let issue = IssueSpec {
            correlation: 1.0,
            params: IssueParams::PaddingConfound {
                width: 6,
                sides: Sides::columns(),
                values: (0, 2000),
            },
        };
        inject_issue(&mut c, &issue, 1).unwrap();
        for truth in c.truth.images.values() {
            let expected = Mask::from_fn(64, 64, |_, col| col < 6 || col >= 58);
            assert_eq!(truth.artifact_mask, expected);
        }
    }

    #[test]
    fn calibration_shift_moves_raw_means_by_shift_over_slope() {
        let mut c = gen_clean(&spec(100, TaskKind::Classification, 13)).unwrap();
        let issue = IssueSpec {
            correlation: 1.0,
            params: IssueParams::CalibrationShift { shift: -500.0 },
        };
        inject_issue(&mut c, &issue, 17).unwrap();
        let mut class_mean = [0.0f64; 2];
        let mut class_n = [0usize; 2];
        for (entry, image) in c.manifest.entries.iter().zip(&c.images) {
            let mean = image.pixels.iter().map(|&p| p as f64).sum::<f64>()
                / image.pixels.len() as f64;
            class_mean[entry.class()] += mean;
            class_n[entry.class()] += 1;
        }
        let diff = class_mean[1] / class_n[1] as f64 - class_mean[0] / class_n[0] as f64;
        assert!((diff - 500.0).abs() < 20.0, "raw mean difference {diff}");
        // Level-1 images carry the shifted metadata.
        for (entry, truth) in c.manifest.entries.iter().zip(c.truth.images.values()) {
            if entry.class() == 1 {
                assert_eq!(entry.calibration.intercept, -500.0);
                assert!(truth.kinds.contains(&IssueKind::CalibrationShift));
            } else {
                assert_eq!(entry.calibration.intercept, 0.0);
            }
        }
    }

    /// Two-sample Kolmogorov-Smirnov statistic.
    fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (n, m) = (a.len(), b.len());
        let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
        while i < n && j < m {
            let x = a[i].min(b[j]);
            while i < n && a[i] <= x {
                i += 1;
            }
            while j < m && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
        }
        d
    }

    #[test]
    fn calibrated_space_is_invariant_under_shift() {
        let mut c = gen_clean(&spec(60, TaskKind::Classification, 23)).unwrap();
        let issue = IssueSpec {
            correlation: 1.0,
            params: IssueParams::CalibrationShift { shift: -500.0 },
        };
        inject_issue(&mut c, &issue, 29).unwrap();
        let mut per_class: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for (entry, image) in c.manifest.entries.iter().zip(&c.images) {
            let truth = &c.truth.images[&entry.id];
            let meta = truth.true_calibration;
            for (idx, &p) in image.pixels.iter().enumerate() {
                if !truth.signal_mask.bits()[idx] {
                    per_class[entry.class()].push(meta.slope * p as f64 + meta.intercept);
                }
            }
        }
        let [a, b] = per_class;
        let d = ks_statistic(a, b);
        assert!(d < 0.1, "KS statistic {d}");
    }

    #[test]
    fn alignment_fraction_matches_request() {
        for &corr in &[0.0, 0.3, 0.7, 1.0] {
            let mut c = gen_clean(&spec(100, TaskKind::Classification, 31)).unwrap();
            let issue = IssueSpec {
                correlation: corr,
                params: IssueParams::default_for(IssueKind::CornerMarker, 64),
            };
            inject_issue(&mut c, &issue, 37).unwrap();
            let high = 2600;
            // Count images whose level equals the label level.
            let matches = c
                .manifest
                .entries
                .iter()
                .zip(&c.images)
                .filter(|(e, img)| usize::from(img.get(4, 4) == high) == e.class())
                .count() as f64;
            // Aligned images match by construction; the rest match half the
            // time, so the expected match fraction is corr + (1 - corr) / 2.
            let expected = corr + (1.0 - corr) / 2.0;
            let tol = 2.0 / (100.0f64).sqrt();
            assert!(
                (matches / 100.0 - expected).abs() <= tol,
                "corr {corr}: match fraction {} vs expected {expected}",
                matches / 100.0
            );
        }
    }

    #[test]
    fn injection_never_touches_signal() {
        let mut c = gen_clean(&spec(30, TaskKind::Classification, 41)).unwrap();
        let before: Vec<Vec<u32>> = c.images.iter().map(|i| i.pixels.clone()).collect();
        for kind in [
            IssueKind::PaddingConfound,
            IssueKind::CircularArtifact,
            IssueKind::PatientTable,
            IssueKind::CornerMarker,
        ] {
            let issue = IssueSpec {
                correlation: 0.5,
                params: IssueParams::default_for(kind, 64),
            };
            inject_issue(&mut c, &issue, 43).unwrap();
        }
        for ((image, before), truth) in c
            .images
            .iter()
            .zip(&before)
            .zip(c.truth.images.values())
        {
            assert_eq!(truth.artifact_mask.overlap(&truth.signal_mask), 0);
            for (idx, (&now, &was)) in image.pixels.iter().zip(before).enumerate() {
                if truth.signal_mask.bits()[idx] {
                    assert_eq!(now, was, "signal pixel changed in {}", image.id);
                }
            }
        }
    }

    #[test]
    fn oversized_artifact_is_rejected() {
        let mut c = gen_clean(&spec(4, TaskKind::Classification, 2)).unwrap();
        let issue = IssueSpec {
            correlation: 1.0,
            params: IssueParams::PaddingConfound {
                width: 40,
                sides: Sides::all(),
                values: (0, 1),
            },
        };
        assert!(matches!(
            inject_issue(&mut c, &issue, 1),
            Err(SynthError::SpecError(_))
        ));
    }

    #[test]
    fn invalid_correlation_rejected() {
        let mut c = gen_clean(&spec(4, TaskKind::Classification, 2)).unwrap();
        let issue = IssueSpec {
            correlation: 1.5,
            params: IssueParams::default_for(IssueKind::CornerMarker, 64),
        };
        match inject_issue(&mut c, &issue, 1) {
            Err(SynthError::SpecError(msg)) => assert!(msg.contains("correlation")),
            other => panic!("expected SpecError, got {other:?}"),
        }
    }

    #[test]
    fn ground_truth_json_round_trip() {
        let mut c = gen_clean(&spec(5, TaskKind::Classification, 47)).unwrap();
        let issue = IssueSpec {
            correlation: 1.0,
            params: IssueParams::default_for(IssueKind::PatientTable, 64),
        };
        inject_issue(&mut c, &issue, 53).unwrap();
        let text = c.truth.to_json();
        let back = GroundTruth::from_json(&text).unwrap();
        assert_eq!(back, c.truth);
    }
}
