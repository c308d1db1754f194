//! Attribution: which pixels drive a prediction. Three methods with one
//! output type — occlusion sensitivity (patch replacement), gradient x
//! input saliency, and a greedy critical-subset search that finds a small
//! set of grid cells whose occlusion flips the model's confidence below a
//! threshold.
//!
//! Scores are probabilities of the target class for classification and the
//! raw output for regression. Occlusion drops are clamped at zero: the
//! audit asks which regions *support* the prediction.

use crate::corpus::ImageSlice;
use crate::mask::Mask;
use crate::prototype::{forward, grad_input, Plane, Prediction, PrototypeError, PrototypeModel, Target};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("shape mismatch: map/plane is {map:?}, other is {other:?}")]
    ShapeMismatch {
        map: (usize, usize),
        other: (usize, usize),
    },
    #[error("bad explain config: {0}")]
    BadConfig(String),
    #[error("attribution map has zero total mass")]
    ZeroMass,
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Occlusion,
    GradInput,
    CriticalSubset,
}

impl AttributionMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttributionMethod::Occlusion => "occlusion",
            AttributionMethod::GradInput => "grad_input",
            AttributionMethod::CriticalSubset => "critical_subset",
        }
    }
}

/// Serializable attribution target: a class index or the regression output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    Class(usize),
    Regression,
}

impl From<Target> for TargetSpec {
    fn from(t: Target) -> Self {
        match t {
            Target::Class(k) => TargetSpec::Class(k),
            Target::Regression => TargetSpec::Regression,
        }
    }
}

impl From<TargetSpec> for Target {
    fn from(t: TargetSpec) -> Self {
        match t {
            TargetSpec::Class(k) => Target::Class(k),
            TargetSpec::Regression => Target::Regression,
        }
    }
}

/// Per-pixel non-negative attribution values for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub method: AttributionMethod,
    pub image_id: String,
    pub target: TargetSpec,
}

impl AttributionMap {
    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    Zero,
    /// Mean of the model-input planes over the dataset under audit.
    DatasetMean { value: f64 },
    /// Mean of the occluded patch itself.
    LocalMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionConfig {
    pub patch: usize,
    pub stride: usize,
    pub baseline: Baseline,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            patch: 8,
            stride: 4,
            baseline: Baseline::DatasetMean { value: 0.0 },
        }
    }
}

/// What the model currently scores on this input: probability of the
/// target class, or the regression output.
pub fn target_score(
    model: &PrototypeModel,
    plane: &Plane,
    target: Target,
) -> Result<f64, ExplainError> {
    let pred = forward(model, plane)?;
    match (pred, target) {
        (Prediction::Classification { probs }, Target::Class(k)) => {
            probs.get(k).copied().ok_or_else(|| {
                ExplainError::BadConfig(format!("target class {k} out of range"))
            })
        }
        (Prediction::Regression { value }, Target::Regression) => Ok(value),
        _ => Err(ExplainError::BadConfig(
            "target does not match model head".into(),
        )),
    }
}

/// The natural attribution target for this input: the predicted class, or
/// the regression output.
pub fn predicted_target(
    model: &PrototypeModel,
    plane: &Plane,
) -> Result<Target, ExplainError> {
    Ok(match forward(model, plane)? {
        Prediction::Classification { probs } => Target::Class(
            probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0),
        ),
        Prediction::Regression { .. } => Target::Regression,
    })
}

fn fill_patch(plane: &mut Plane, orig: &Plane, r0: usize, c0: usize, size: usize, baseline: &Baseline) {
    let value = match baseline {
        Baseline::Zero => 0.0,
        Baseline::DatasetMean { value } => *value,
        Baseline::LocalMean => {
            let mut sum = 0.0;
            for r in r0..r0 + size {
                for c in c0..c0 + size {
                    sum += orig.values[r * orig.width + c];
                }
            }
            sum / (size * size) as f64
        }
    };
    for r in r0..r0 + size {
        for c in c0..c0 + size {
            plane.values[r * plane.width + c] = value;
        }
    }
}

fn restore_patch(plane: &mut Plane, orig: &Plane, r0: usize, c0: usize, size: usize) {
    for r in r0..r0 + size {
        for c in c0..c0 + size {
            plane.values[r * plane.width + c] = orig.values[r * orig.width + c];
        }
    }
}

/// Patch start offsets covering a length `len` fully: stride steps plus a
/// final flush-right position.
fn patch_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut pos = 0usize;
    while pos + patch <= len {
        starts.push(pos);
        pos += stride;
    }
    if let Some(&last) = starts.last() {
        if last + patch < len {
            starts.push(len - patch);
        }
    }
    starts
}

/// Occlusion sensitivity: per-pixel mean of the clamped score drops of all
/// covering patches.
pub fn occlusion_map(
    model: &PrototypeModel,
    image_id: &str,
    plane: &Plane,
    cfg: &OcclusionConfig,
    target: Target,
) -> Result<AttributionMap, ExplainError> {
    if cfg.patch == 0 || cfg.stride == 0 || cfg.stride > cfg.patch {
        return Err(ExplainError::BadConfig(format!(
            "occlusion needs 1 <= stride <= patch, got patch {} stride {}",
            cfg.patch, cfg.stride
        )));
    }
    if cfg.patch > plane.width || cfg.patch > plane.height {
        return Err(ExplainError::BadConfig(format!(
            "patch {} exceeds image {}x{}",
            cfg.patch, plane.width, plane.height
        )));
    }
    let orig_score = target_score(model, plane, target)?;
    let mut sums = vec![0.0f64; plane.values.len()];
    let mut counts = vec![0u32; plane.values.len()];
    let mut work = plane.clone();
    for &r0 in &patch_starts(plane.height, cfg.patch, cfg.stride) {
        for &c0 in &patch_starts(plane.width, cfg.patch, cfg.stride) {
            fill_patch(&mut work, plane, r0, c0, cfg.patch, &cfg.baseline);
            let occluded = target_score(model, &work, target)?;
            restore_patch(&mut work, plane, r0, c0, cfg.patch);
            let drop = (orig_score - occluded).max(0.0);
            for r in r0..r0 + cfg.patch {
                for c in c0..c0 + cfg.patch {
                    sums[r * plane.width + c] += drop;
                    counts[r * plane.width + c] += 1;
                }
            }
        }
    }
    let values = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    Ok(AttributionMap {
        width: plane.width,
        height: plane.height,
        values,
        method: AttributionMethod::Occlusion,
        image_id: image_id.to_string(),
        target: target.into(),
    })
}

/// Gradient x input magnitude.
pub fn saliency_map(
    model: &PrototypeModel,
    image_id: &str,
    plane: &Plane,
    target: Target,
) -> Result<AttributionMap, ExplainError> {
    let grad = grad_input(model, plane, target)?;
    let values = grad
        .values
        .iter()
        .zip(&plane.values)
        .map(|(g, x)| (g * x).abs())
        .collect();
    Ok(AttributionMap {
        width: plane.width,
        height: plane.height,
        values,
        method: AttributionMethod::GradInput,
        image_id: image_id.to_string(),
        target: target.into(),
    })
}

/// One selected grid cell: pixel coordinates of its top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalSet {
    pub patches: Vec<GridCell>,
    pub resulting_confidence: f64,
    pub original_confidence: f64,
}

/// `critical_factors` either finds a set or reports that occluding every
/// cell never drops confidence below the threshold.
#[derive(Debug, Clone, PartialEq)]
pub enum CriticalOutcome {
    Found(CriticalSet),
    NotReachable { floor_confidence: f64 },
}

/// Confidence of the current (possibly occluded) plane relative to the
/// original prediction: target-class probability for classification;
/// for regression, 1 - |change| / max(|original|, 1e-12), floored at 0.
fn relative_confidence(
    model: &PrototypeModel,
    plane: &Plane,
    target: Target,
    original: f64,
) -> Result<f64, ExplainError> {
    let score = target_score(model, plane, target)?;
    Ok(match target {
        Target::Class(_) => score,
        Target::Regression => {
            let scale = original.abs().max(1e-12);
            (1.0 - (score - original).abs() / scale).max(0.0)
        }
    })
}

/// Greedy critical-subset search. Repeatedly occludes the unselected grid
/// cell that lowers confidence most until confidence <= gamma * original,
/// then removes redundant cells (restore-and-check to a fixpoint). Ties
/// break toward the earlier cell in row-major order.
pub fn critical_factors(
    model: &PrototypeModel,
    plane: &Plane,
    grid_size: usize,
    gamma: f64,
    baseline: &Baseline,
) -> Result<CriticalOutcome, ExplainError> {
    if grid_size == 0 || plane.width % grid_size != 0 || plane.height % grid_size != 0 {
        return Err(ExplainError::BadConfig(format!(
            "grid size {grid_size} does not divide image {}x{}",
            plane.width, plane.height
        )));
    }
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(ExplainError::BadConfig(format!(
            "drop threshold must be in (0, 1), got {gamma}"
        )));
    }
    let target = predicted_target(model, plane)?;
    let original = target_score(model, plane, target)?;
    let original_confidence = match target {
        Target::Class(_) => original,
        Target::Regression => 1.0,
    };
    let threshold = gamma * original_confidence;

    let mut cells = Vec::new();
    for r in (0..plane.height).step_by(grid_size) {
        for c in (0..plane.width).step_by(grid_size) {
            cells.push(GridCell {
                row: r,
                col: c,
                size: grid_size,
            });
        }
    }

    let mut work = plane.clone();
    let mut selected: Vec<GridCell> = Vec::new();
    let mut remaining: Vec<GridCell> = cells.clone();
    let mut confidence = relative_confidence(model, &work, target, original)?;
    while confidence > threshold {
        if remaining.is_empty() {
            return Ok(CriticalOutcome::NotReachable {
                floor_confidence: confidence,
            });
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, cell) in remaining.iter().enumerate() {
            fill_patch(&mut work, plane, cell.row, cell.col, cell.size, baseline);
            let conf = relative_confidence(model, &work, target, original)?;
            restore_selected(&mut work, plane, *cell, &selected, baseline);
            if best.is_none() || conf < best.unwrap().1 {
                best = Some((i, conf));
            }
        }
        let (i, conf) = best.expect("remaining nonempty");
        let cell = remaining.remove(i);
        fill_patch(&mut work, plane, cell.row, cell.col, cell.size, baseline);
        selected.push(cell);
        confidence = conf;
    }

    // Backward minimality to a fixpoint: drop any cell whose restoration
    // keeps confidence at or below the threshold.
    loop {
        let mut removed = false;
        let mut i = 0;
        while i < selected.len() {
            let cell = selected[i];
            restore_patch(&mut work, plane, cell.row, cell.col, cell.size);
            let conf = relative_confidence(model, &work, target, original)?;
            if conf <= threshold {
                selected.remove(i);
                confidence = conf;
                removed = true;
            } else {
                fill_patch(&mut work, plane, cell.row, cell.col, cell.size, baseline);
                i += 1;
            }
        }
        if !removed {
            break;
        }
    }

    Ok(CriticalOutcome::Found(CriticalSet {
        patches: selected,
        resulting_confidence: confidence,
        original_confidence,
    }))
}

/// Undo a trial occlusion of `cell`, re-occluding it only if it belongs to
/// the selected set (it never does during search, so this is a restore).
fn restore_selected(
    work: &mut Plane,
    orig: &Plane,
    cell: GridCell,
    selected: &[GridCell],
    baseline: &Baseline,
) {
    restore_patch(work, orig, cell.row, cell.col, cell.size);
    if selected.contains(&cell) {
        fill_patch(work, orig, cell.row, cell.col, cell.size, baseline);
    }
}

/// A critical set rendered as an attribution map: 1 inside selected cells.
pub fn critical_set_map(
    set: &CriticalSet,
    width: usize,
    height: usize,
    image_id: &str,
    target: TargetSpec,
) -> AttributionMap {
    let mut values = vec![0.0f64; width * height];
    for cell in &set.patches {
        for r in cell.row..cell.row + cell.size {
            for c in cell.col..cell.col + cell.size {
                values[r * width + c] = 1.0;
            }
        }
    }
    AttributionMap {
        width,
        height,
        values,
        method: AttributionMethod::CriticalSubset,
        image_id: image_id.to_string(),
        target,
    }
}

/// Threshold at the q-quantile of the positive values (ascending sort,
/// index floor(q*n); ties at the threshold are included). An all-zero map
/// gives an empty mask.
pub fn binarize(map: &AttributionMap, q: f64) -> Result<Mask, ExplainError> {
    if !(0.0 < q && q < 1.0) {
        return Err(ExplainError::BadConfig(format!(
            "quantile must be in (0, 1), got {q}"
        )));
    }
    let mut positives: Vec<f64> = map.values.iter().copied().filter(|&v| v > 0.0).collect();
    if positives.is_empty() {
        return Ok(Mask::new(map.width, map.height));
    }
    positives.sort_by(f64::total_cmp);
    let k = ((q * positives.len() as f64 + 1e-9).floor() as usize).min(positives.len() - 1);
    let threshold = positives[k];
    Ok(Mask::from_fn(map.width, map.height, |r, c| {
        map.values[r * map.width + c] >= threshold
    }))
}

/// Fraction of total attribution mass inside the region.
pub fn mass_fraction(map: &AttributionMap, region: &Mask) -> Result<f64, ExplainError> {
    if region.width != map.width || region.height != map.height {
        return Err(ExplainError::ShapeMismatch {
            map: (map.width, map.height),
            other: (region.width, region.height),
        });
    }
    let total = map.total_mass();
    if total <= 0.0 {
        return Err(ExplainError::ZeroMass);
    }
    let inside: f64 = map
        .values
        .iter()
        .zip(region.bits())
        .filter(|(_, &b)| b)
        .map(|(v, _)| v)
        .sum();
    Ok(inside / total)
}

const MAP_MAGIC: &[u8; 8] = b"AUDLMAP1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapHeader {
    method: AttributionMethod,
    image_id: String,
    target: TargetSpec,
    width: usize,
    height: usize,
}

/// Serializes a map: magic, little-endian header length + JSON header,
/// then each value as a little-endian f32.
pub fn map_bytes(map: &AttributionMap) -> Vec<u8> {
    let header = serde_json::to_vec(&MapHeader {
        method: map.method,
        image_id: map.image_id.clone(),
        target: map.target,
        width: map.width,
        height: map.height,
    })
    .expect("map header serializes");
    let mut bytes = Vec::with_capacity(12 + header.len() + map.values.len() * 4);
    bytes.extend_from_slice(MAP_MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for v in &map.values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    bytes
}

pub fn map_from_bytes(bytes: &[u8]) -> Result<AttributionMap, ExplainError> {
    let bad = |msg: &str| ExplainError::BadConfig(format!("attribution map file: {msg}"));
    if bytes.len() < 12 || &bytes[..8] != MAP_MAGIC {
        return Err(bad("missing or unknown magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(bad("truncated header"));
    }
    let header: MapHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| bad(&format!("header: {e}")))?;
    let payload = &bytes[12 + header_len..];
    if payload.len() != header.width * header.height * 4 {
        return Err(bad("value payload length mismatch"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(bad("values must be finite and non-negative"));
    }
    Ok(AttributionMap {
        width: header.width,
        height: header.height,
        values,
        method: header.method,
        image_id: header.image_id,
        target: header.target,
    })
}

/// 8-bit preview scaled so the map maximum lands at 255.
pub fn preview_pgm(map: &AttributionMap) -> ImageSlice {
    let max = map.values.iter().copied().fold(0.0f64, f64::max);
    let pixels: Vec<u32> = map
        .values
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v / max * 255.0).round() as u32
            } else {
                0
            }
        })
        .collect();
    ImageSlice::new(
        &format!("{}_{}", map.image_id, map.method.as_str()),
        map.width,
        map.height,
        255,
        pixels,
    )
    .expect("preview dimensions are valid")
}
