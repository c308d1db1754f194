//! Remediation: turn audit findings into a reviewable plan, apply the plan
//! to produce a corrected dataset plus a provenance log, and compare a
//! re-audit against the baseline report.
//!
//! Applying a plan never touches pixels outside the planned regions, and
//! every action is logged with before/after statistics so the change is
//! traceable image by image.

use crate::audit::{AuditReport, FindingKind, KindAggregate, RegionParams};
use crate::corpus::{CalibrationMeta, DatasetManifest, ImageSlice};
use crate::mask::{Mask, RleMask};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RemedyError {
    #[error("no action configured for finding kind {kind}")]
    PolicyGap { kind: String },
    #[error("plan references image {image} not present in the dataset")]
    UnknownImage { image: String },
    #[error("{image}: {detail}")]
    GeometryError { image: String, detail: String },
    #[error("reports are not comparable: {0}")]
    DatasetMismatch(String),
    #[error("bad plan: {0}")]
    BadPlan(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemedyAction {
    /// Drop the image (and its manifest entry) from the dataset.
    Exclude,
    /// Remove the detected constant border rows/columns.
    CropPadding,
    /// Overwrite the region with the fill rule.
    MaskRegion,
    /// Fill the detected rows; image dimensions are preserved.
    RemoveTableRows,
    /// Re-express pixels under the dataset's majority calibration.
    Recalibrate,
    Ignore,
}

impl RemedyAction {
    pub fn as_str(&self) -> &'static str {
        match self {
            RemedyAction::Exclude => "exclude",
            RemedyAction::CropPadding => "crop_padding",
            RemedyAction::MaskRegion => "mask_region",
            RemedyAction::RemoveTableRows => "remove_table_rows",
            RemedyAction::Recalibrate => "recalibrate",
            RemedyAction::Ignore => "ignore",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum FillRule {
    /// Median of the image's pixels outside the region being filled.
    BackgroundEstimate,
    Constant { value: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemediationPolicy {
    pub actions: BTreeMap<FindingKind, RemedyAction>,
    /// Findings below this severity are left alone.
    pub severity_threshold: f64,
    pub fill: FillRule,
}

impl Default for RemediationPolicy {
    fn default() -> Self {
        let actions = BTreeMap::from([
            (FindingKind::CalibrationAnomaly, RemedyAction::Exclude),
            (FindingKind::PaddingConfound, RemedyAction::CropPadding),
            (FindingKind::CircularArtifact, RemedyAction::MaskRegion),
            (FindingKind::PatientTable, RemedyAction::RemoveTableRows),
            (FindingKind::OperatorRegion, RemedyAction::MaskRegion),
        ]);
        RemediationPolicy {
            actions,
            severity_threshold: 0.25,
            fill: FillRule::BackgroundEstimate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedAction {
    pub image: String,
    pub kind: FindingKind,
    pub action: RemedyAction,
    pub severity: f64,
    pub region_rle: RleMask,
    pub params: RegionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemediationPlan {
    pub version: u32,
    pub dataset: String,
    pub policy: RemediationPolicy,
    pub actions: Vec<PlannedAction>,
}

impl RemediationPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RemedyError> {
        let plan: RemediationPlan =
            serde_json::from_str(text).map_err(|e| RemedyError::BadPlan(e.to_string()))?;
        if plan.version != 1 {
            return Err(RemedyError::BadPlan(format!(
                "unsupported plan version {}",
                plan.version
            )));
        }
        Ok(plan)
    }
}

/// Select findings at or above the policy threshold and map each to its
/// configured action. An image slated for exclusion drops its other
/// actions. Output order is (image, kind).
pub fn plan_remediation(
    report: &AuditReport,
    policy: &RemediationPolicy,
) -> Result<RemediationPlan, RemedyError> {
    let mut actions: Vec<PlannedAction> = Vec::new();
    for finding in &report.findings {
        if finding.severity < policy.severity_threshold {
            continue;
        }
        let action = *policy
            .actions
            .get(&finding.kind)
            .ok_or_else(|| RemedyError::PolicyGap {
                kind: finding.kind.to_string(),
            })?;
        if action == RemedyAction::Ignore {
            continue;
        }
        actions.push(PlannedAction {
            image: finding.image.clone(),
            kind: finding.kind,
            action,
            severity: finding.severity,
            region_rle: finding.region_rle.clone(),
            params: finding.params.clone(),
        });
    }
    let excluded: std::collections::BTreeSet<String> = actions
        .iter()
        .filter(|a| a.action == RemedyAction::Exclude)
        .map(|a| a.image.clone())
        .collect();
    actions.retain(|a| a.action == RemedyAction::Exclude || !excluded.contains(&a.image));
    actions.sort_by(|a, b| a.image.cmp(&b.image).then_with(|| a.kind.cmp(&b.kind)));
    Ok(RemediationPlan {
        version: 1,
        dataset: report.dataset.clone(),
        policy: policy.clone(),
        actions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageStats {
    pub width: usize,
    pub height: usize,
    pub mean: f64,
    pub min: u32,
    pub max: u32,
}

impl ImageStats {
    fn of(image: &ImageSlice) -> Self {
        let mut min = u32::MAX;
        let mut max = 0u32;
        let mut sum = 0.0f64;
        for &p in &image.pixels {
            min = min.min(p);
            max = max.max(p);
            sum += p as f64;
        }
        ImageStats {
            width: image.width,
            height: image.height,
            mean: sum / image.pixels.len() as f64,
            min,
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceRecord {
    pub image: String,
    pub kind: FindingKind,
    pub action: RemedyAction,
    pub severity: f64,
    /// Unix seconds; the caller resolves this (e.g. from SOURCE_DATE_EPOCH)
    /// so identical runs log identical times.
    pub timestamp: u64,
    pub before: ImageStats,
    /// Absent when the image was excluded.
    pub after: Option<ImageStats>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProvenanceLog {
    pub records: Vec<ProvenanceRecord>,
}

impl ProvenanceLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, RemedyError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(line)
                    .map_err(|e| RemedyError::BadPlan(format!("provenance line {}: {e}", i + 1)))?,
            );
        }
        Ok(ProvenanceLog { records })
    }
}

fn region_mask(action: &PlannedAction) -> Result<Mask, RemedyError> {
    Mask::try_from(&action.region_rle).map_err(|e| RemedyError::BadPlan(format!(
        "{} {}: {e}",
        action.image, action.kind
    )))
}

/// Fill value for masked pixels: the median of pixels outside the region,
/// or the configured constant.
fn fill_value(image: &ImageSlice, region: &Mask, fill: FillRule) -> Result<u32, RemedyError> {
    match fill {
        FillRule::Constant { value } => Ok(value.min(image.max_value)),
        FillRule::BackgroundEstimate => {
            let mut outside: Vec<u32> = image
                .pixels
                .iter()
                .enumerate()
                .filter(|&(i, _)| !region.bits()[i])
                .map(|(_, &p)| p)
                .collect();
            if outside.is_empty() {
                return Err(RemedyError::GeometryError {
                    image: image.id.clone(),
                    detail: "region covers the whole image; no background to estimate".into(),
                });
            }
            outside.sort_unstable();
            Ok(outside[outside.len() / 2])
        }
    }
}

/// Majority (slope, intercept) in the manifest; ties prefer the pair
/// closest to identity.
fn majority_calibration(manifest: &DatasetManifest) -> CalibrationMeta {
    let mut groups: BTreeMap<(u64, u64), (usize, CalibrationMeta)> = BTreeMap::new();
    for e in &manifest.entries {
        let key = (e.calibration.slope.to_bits(), e.calibration.intercept.to_bits());
        let g = groups.entry(key).or_insert((0, e.calibration.clone()));
        g.0 += 1;
    }
    let mut best: Option<(usize, f64, CalibrationMeta)> = None;
    for (count, meta) in groups.into_values() {
        let dist = (meta.slope - 1.0).abs() + meta.intercept.abs();
        let better = match &best {
            None => true,
            Some((c, d, _)) => count > *c || (count == *c && dist < *d),
        };
        if better {
            best = Some((count, dist, meta));
        }
    }
    best.map(|(_, _, m)| m).unwrap_or_else(CalibrationMeta::identity)
}

/// Apply a plan to a dataset, returning the corrected manifest, images,
/// and a provenance log with one record per applied action. Pixels outside
/// planned regions are untouched; crops run before region fills so region
/// coordinates (recorded on original geometry) translate cleanly.
pub fn apply_remediation(
    plan: &RemediationPlan,
    manifest: &DatasetManifest,
    images: &[ImageSlice],
    timestamp: u64,
) -> Result<(DatasetManifest, Vec<ImageSlice>, ProvenanceLog), RemedyError> {
    let mut by_image: BTreeMap<&str, Vec<&PlannedAction>> = BTreeMap::new();
    for action in &plan.actions {
        by_image.entry(&action.image).or_default().push(action);
    }
    let index: BTreeMap<&str, usize> = images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.id.as_str(), i))
        .collect();
    for image in by_image.keys() {
        if !index.contains_key(image) {
            return Err(RemedyError::UnknownImage {
                image: image.to_string(),
            });
        }
    }
    let reference_calibration = majority_calibration(manifest);

    let mut out_manifest = manifest.clone();
    let mut out_images: Vec<ImageSlice> = images.to_vec();
    let mut log = ProvenanceLog::default();
    let mut excluded: Vec<String> = Vec::new();

    for (image_id, actions) in by_image {
        let idx = index[image_id];
        let before = ImageStats::of(&images[idx]);
        if let Some(exclude) = actions.iter().find(|a| a.action == RemedyAction::Exclude) {
            excluded.push(image_id.to_string());
            log.records.push(ProvenanceRecord {
                image: image_id.to_string(),
                kind: exclude.kind,
                action: RemedyAction::Exclude,
                severity: exclude.severity,
                timestamp,
                before,
                after: None,
                detail: "image removed from the dataset".into(),
            });
            continue;
        }
        // Crops first; later region coordinates shift by the crop offsets.
        let mut ordered: Vec<&PlannedAction> = actions.clone();
        ordered.sort_by_key(|a| (a.action != RemedyAction::CropPadding, a.kind));
        let (mut off_r, mut off_c) = (0usize, 0usize);
        let mut current = images[idx].clone();
        for action in ordered {
            let before = ImageStats::of(&current);
            let detail = match action.action {
                RemedyAction::CropPadding => {
                    let RegionParams::Padding {
                        left,
                        right,
                        top,
                        bottom,
                    } = action.params
                    else {
                        return Err(RemedyError::BadPlan(format!(
                            "{image_id}: crop_padding needs padding params"
                        )));
                    };
                    if left + right >= current.width + off_c || top + bottom >= current.height + off_r
                    {
                        return Err(RemedyError::GeometryError {
                            image: image_id.to_string(),
                            detail: format!(
                                "cropping l{left} r{right} t{top} b{bottom} leaves no pixels"
                            ),
                        });
                    }
                    let (l, t) = (left.saturating_sub(off_c), top.saturating_sub(off_r));
                    let new_w = current.width - l - right.min(current.width);
                    let new_h = current.height - t - bottom.min(current.height);
                    if new_w == 0 || new_h == 0 {
                        return Err(RemedyError::GeometryError {
                            image: image_id.to_string(),
                            detail: format!(
                                "cropping l{left} r{right} t{top} b{bottom} leaves no pixels"
                            ),
                        });
                    }
                    let mut pixels = Vec::with_capacity(new_w * new_h);
                    for r in t..t + new_h {
                        for c in l..l + new_w {
                            pixels.push(current.get(r, c));
                        }
                    }
                    current = ImageSlice::new(
                        &current.id,
                        new_w,
                        new_h,
                        current.max_value,
                        pixels,
                    )
                    .map_err(|e| RemedyError::GeometryError {
                        image: image_id.to_string(),
                        detail: e.to_string(),
                    })?;
                    off_r += t;
                    off_c += l;
                    format!("cropped borders l{left} r{right} t{top} b{bottom}")
                }
                RemedyAction::MaskRegion | RemedyAction::RemoveTableRows => {
                    let original = region_mask(action)?;
                    let shifted = Mask::from_fn(current.width, current.height, |r, c| {
                        let (r, c) = (r + off_r, c + off_c);
                        r < original.height && c < original.width && original.get(r, c)
                    });
                    if shifted.is_empty() {
                        continue;
                    }
                    let value = fill_value(&current, &shifted, plan.policy.fill)?;
                    let mut filled = 0usize;
                    for r in 0..current.height {
                        for c in 0..current.width {
                            if shifted.get(r, c) {
                                current.set(r, c, value);
                                filled += 1;
                            }
                        }
                    }
                    format!("filled {filled} px with {value}")
                }
                RemedyAction::Recalibrate => {
                    let entry = out_manifest
                        .entries
                        .iter_mut()
                        .find(|e| e.id == image_id)
                        .ok_or_else(|| RemedyError::UnknownImage {
                            image: image_id.to_string(),
                        })?;
                    let old = entry.calibration.clone();
                    for p in current.pixels.iter_mut() {
                        let calibrated = old.slope * *p as f64 + old.intercept;
                        let raw = (calibrated - reference_calibration.intercept)
                            / reference_calibration.slope;
                        *p = raw.round().clamp(0.0, current.max_value as f64) as u32;
                    }
                    entry.calibration = CalibrationMeta {
                        slope: reference_calibration.slope,
                        intercept: reference_calibration.intercept,
                        declared_range: old.declared_range,
                    };
                    format!(
                        "re-expressed from ({}, {}) to ({}, {})",
                        old.slope,
                        old.intercept,
                        reference_calibration.slope,
                        reference_calibration.intercept
                    )
                }
                RemedyAction::Exclude | RemedyAction::Ignore => continue,
            };
            log.records.push(ProvenanceRecord {
                image: image_id.to_string(),
                kind: action.kind,
                action: action.action,
                severity: action.severity,
                timestamp,
                before,
                after: Some(ImageStats::of(&current)),
                detail,
            });
        }
        out_images[idx] = current;
    }

    if !excluded.is_empty() {
        out_manifest.entries.retain(|e| !excluded.contains(&e.id));
        out_images.retain(|img| !excluded.contains(&img.id));
    }
    Ok((out_manifest, out_images, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Improved,
    Unchanged,
    Regressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindDelta {
    pub flagged_fraction_before: f64,
    pub flagged_fraction_after: f64,
    pub mean_severity_before: f64,
    pub mean_severity_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationReport {
    pub version: u32,
    pub before: String,
    pub after: String,
    pub kinds: BTreeMap<String, KindDelta>,
    pub verdict: Verdict,
}

impl VerificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verification serializes")
    }
}

/// Tolerated flagged-fraction increase before a kind counts as regressed.
pub const FLAG_REGRESSION_TOLERANCE: f64 = 0.02;

/// Compare a re-audit to its baseline. The after-audit must cover a subset
/// of the baseline's images (exclusions shrink datasets) for the same
/// task. Improved means every kind flagged at baseline got strictly better
/// (lower mean severity, or nothing flagged any more) and no kind's
/// flagged fraction rose by more than the tolerance.
pub fn verify_remediation(
    before: &AuditReport,
    after: &AuditReport,
) -> Result<VerificationReport, RemedyError> {
    if before.task != after.task {
        return Err(RemedyError::DatasetMismatch(format!(
            "task changed from {} to {}",
            before.task, after.task
        )));
    }
    let before_ids: std::collections::BTreeSet<&String> = before.images.iter().collect();
    let missing: Vec<&String> = after
        .images
        .iter()
        .filter(|id| !before_ids.contains(id))
        .collect();
    if !missing.is_empty() {
        return Err(RemedyError::DatasetMismatch(format!(
            "after-audit contains {} image(s) absent from the baseline, e.g. {}",
            missing.len(),
            missing[0]
        )));
    }
    if after.images.is_empty() {
        return Err(RemedyError::DatasetMismatch(
            "after-audit contains no images".into(),
        ));
    }

    let default = KindAggregate::default();
    let mut kinds: BTreeMap<String, KindDelta> = BTreeMap::new();
    let names: std::collections::BTreeSet<&String> =
        before.aggregates.keys().chain(after.aggregates.keys()).collect();
    for name in names {
        let b = before.aggregates.get(name).unwrap_or(&default);
        let a = after.aggregates.get(name).unwrap_or(&default);
        kinds.insert(
            name.clone(),
            KindDelta {
                flagged_fraction_before: b.flagged_fraction,
                flagged_fraction_after: a.flagged_fraction,
                mean_severity_before: b.mean_severity,
                mean_severity_after: a.mean_severity,
            },
        );
    }

    let regressed = kinds
        .values()
        .any(|d| d.flagged_fraction_after - d.flagged_fraction_before > FLAG_REGRESSION_TOLERANCE);
    let active: Vec<&KindDelta> = kinds
        .values()
        .filter(|d| d.flagged_fraction_before > 0.0)
        .collect();
    let verdict = if regressed {
        Verdict::Regressed
    } else if active.is_empty() {
        Verdict::Unchanged
    } else if active
        .iter()
        .all(|d| d.mean_severity_after < d.mean_severity_before || d.flagged_fraction_after == 0.0)
    {
        Verdict::Improved
    } else if active.iter().all(|d| {
        d.mean_severity_after == d.mean_severity_before
            && d.flagged_fraction_after == d.flagged_fraction_before
    }) {
        Verdict::Unchanged
    } else {
        Verdict::Regressed
    };

    Ok(VerificationReport {
        version: 1,
        before: before.dataset.clone(),
        after: after.dataset.clone(),
        kinds,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::{AuditConfig, AuditFinding};
    use crate::corpus::{ManifestEntry, TaskKind};

    fn finding(image: &str, kind: FindingKind, severity: f64) -> AuditFinding {
        let mask = match kind {
            FindingKind::PaddingConfound => Mask::from_fn(16, 16, |_, c| c < 4),
            FindingKind::PatientTable => Mask::from_fn(16, 16, |r, _| r >= 12),
            FindingKind::CalibrationAnomaly => Mask::new(16, 16),
            _ => Mask::from_fn(16, 16, |r, c| r >= 4 && r < 8 && c >= 4 && c < 8),
        };
        let params = match kind {
            FindingKind::PaddingConfound => RegionParams::Padding {
                left: 4,
                right: 0,
                top: 0,
                bottom: 0,
            },
            FindingKind::PatientTable => RegionParams::Table {
                row_runs: vec![[12, 16]],
            },
            FindingKind::CalibrationAnomaly => RegionParams::Calibration {
                tests: vec!["metadata_inconsistency".into()],
            },
            FindingKind::CircularArtifact => RegionParams::Circle {
                center: [7.5, 7.5],
                radius: 5.0,
                inner: 4.0,
                outer: 6.0,
                response_ratio: 9.0,
            },
            FindingKind::OperatorRegion => RegionParams::Operator {
                label: "marker".into(),
            },
        };
        AuditFinding {
            image: image.into(),
            kind,
            severity,
            region_rle: (&mask).into(),
            params,
            evidence: String::new(),
        }
    }

    fn report_with(findings: Vec<AuditFinding>, images: &[&str]) -> AuditReport {
        AuditReport {
            version: 1,
            dataset: "ds".into(),
            model: "ckpt".into(),
            task: TaskKind::Classification,
            images: images.iter().map(|s| s.to_string()).collect(),
            config: AuditConfig::default(),
            findings,
            aggregates: BTreeMap::new(),
            calibration: Default::default(),
            errors: vec![],
        }
    }

    #[test]
    fn default_policy_maps_kinds_and_filters_by_threshold() {
        let report = report_with(
            vec![
                finding("a", FindingKind::PaddingConfound, 0.8),
                finding("a", FindingKind::PatientTable, 0.1), // below threshold
                finding("b", FindingKind::CircularArtifact, 0.3),
            ],
            &["a", "b"],
        );
        let plan = plan_remediation(&report, &RemediationPolicy::default()).unwrap();
        let got: Vec<(&str, RemedyAction)> = plan
            .actions
            .iter()
            .map(|a| (a.image.as_str(), a.action))
            .collect();
        assert_eq!(
            got,
            vec![
                ("a", RemedyAction::CropPadding),
                ("b", RemedyAction::MaskRegion)
            ]
        );
    }

    #[test]
    fn missing_kind_mapping_is_a_policy_gap() {
        let report = report_with(vec![finding("a", FindingKind::PatientTable, 0.9)], &["a"]);
        let mut policy = RemediationPolicy::default();
        policy.actions.remove(&FindingKind::PatientTable);
        let err = plan_remediation(&report, &policy).unwrap_err();
        assert!(matches!(err, RemedyError::PolicyGap { ref kind } if kind == "patient_table"));
    }

    #[test]
    fn exclusion_collapses_other_actions_for_the_image() {
        let report = report_with(
            vec![
                finding("a", FindingKind::CalibrationAnomaly, 0.9),
                finding("a", FindingKind::PaddingConfound, 0.8),
                finding("b", FindingKind::PaddingConfound, 0.8),
            ],
            &["a", "b"],
        );
        let plan = plan_remediation(&report, &RemediationPolicy::default()).unwrap();
        let for_a: Vec<RemedyAction> = plan
            .actions
            .iter()
            .filter(|a| a.image == "a")
            .map(|a| a.action)
            .collect();
        assert_eq!(for_a, vec![RemedyAction::Exclude]);
        assert_eq!(plan.actions.len(), 2);
    }

    fn dataset(ids: &[&str]) -> (DatasetManifest, Vec<ImageSlice>) {
        let manifest = DatasetManifest {
            task: TaskKind::Classification,
            class_count: Some(2),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| ManifestEntry {
                    id: id.to_string(),
                    label: (i % 2) as f64,
                    calibration: CalibrationMeta::identity(),
                })
                .collect(),
        };
        let images = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let pixels = (0..256).map(|p| (p as u32 * 7 + i as u32) % 1000).collect();
                ImageSlice::new(id, 16, 16, 65535, pixels).unwrap()
            })
            .collect();
        (manifest, images)
    }

    fn single_action_plan(action: PlannedAction) -> RemediationPlan {
        RemediationPlan {
            version: 1,
            dataset: "ds".into(),
            policy: RemediationPolicy::default(),
            actions: vec![action],
        }
    }

    #[test]
    fn exclude_removes_image_and_entry() {
        let (manifest, images) = dataset(&["a", "b", "c"]);
        let mut f = finding("b", FindingKind::CalibrationAnomaly, 0.9);
        f.severity = 0.9;
        let plan = single_action_plan(PlannedAction {
            image: "b".into(),
            kind: f.kind,
            action: RemedyAction::Exclude,
            severity: f.severity,
            region_rle: f.region_rle,
            params: f.params,
        });
        let (m, imgs, log) = apply_remediation(&plan, &manifest, &images, 1000).unwrap();
        assert_eq!(
            m.entries.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(),
            vec!["a", "c"]
        );
        assert_eq!(imgs.len(), 2);
        assert_eq!(log.records.len(), 1);
        assert!(log.records[0].after.is_none());
        assert_eq!(log.records[0].timestamp, 1000);
    }

    #[test]
    fn crop_removes_exactly_the_border() {
        let (manifest, images) = dataset(&["a"]);
        let f = finding("a", FindingKind::PaddingConfound, 0.9);
        let plan = single_action_plan(PlannedAction {
            image: "a".into(),
            kind: f.kind,
            action: RemedyAction::CropPadding,
            severity: f.severity,
            region_rle: f.region_rle,
            params: f.params,
        });
        let (_, imgs, log) = apply_remediation(&plan, &manifest, &images, 0).unwrap();
        assert_eq!((imgs[0].width, imgs[0].height), (12, 16));
        for r in 0..16 {
            for c in 0..12 {
                assert_eq!(imgs[0].get(r, c), images[0].get(r, c + 4));
            }
        }
        assert_eq!(log.records[0].after.unwrap().width, 12);
    }

    #[test]
    fn mask_fills_with_background_median_and_preserves_outside() {
        let (manifest, images) = dataset(&["a"]);
        let f = finding("a", FindingKind::CircularArtifact, 0.9);
        let region = Mask::try_from(&f.region_rle).unwrap();
        let plan = single_action_plan(PlannedAction {
            image: "a".into(),
            kind: f.kind,
            action: RemedyAction::MaskRegion,
            severity: f.severity,
            region_rle: f.region_rle,
            params: f.params,
        });
        let (_, imgs, _) = apply_remediation(&plan, &manifest, &images, 0).unwrap();
        let mut outside: Vec<u32> = images[0]
            .pixels
            .iter()
            .enumerate()
            .filter(|&(i, _)| !region.bits()[i])
            .map(|(_, &p)| p)
            .collect();
        outside.sort_unstable();
        let median = outside[outside.len() / 2];
        for r in 0..16 {
            for c in 0..16 {
                if region.get(r, c) {
                    assert_eq!(imgs[0].get(r, c), median);
                } else {
                    assert_eq!(imgs[0].get(r, c), images[0].get(r, c));
                }
            }
        }
    }

    #[test]
    fn table_rows_are_filled_and_dimensions_kept() {
        let (manifest, images) = dataset(&["a"]);
        let f = finding("a", FindingKind::PatientTable, 0.9);
        let plan = single_action_plan(PlannedAction {
            image: "a".into(),
            kind: f.kind,
            action: RemedyAction::RemoveTableRows,
            severity: f.severity,
            region_rle: f.region_rle,
            params: f.params,
        });
        let (_, imgs, _) = apply_remediation(&plan, &manifest, &images, 0).unwrap();
        assert_eq!((imgs[0].width, imgs[0].height), (16, 16));
        let filled = imgs[0].get(12, 0);
        for r in 12..16 {
            for c in 0..16 {
                assert_eq!(imgs[0].get(r, c), filled);
            }
        }
        for r in 0..12 {
            for c in 0..16 {
                assert_eq!(imgs[0].get(r, c), images[0].get(r, c));
            }
        }
    }

    #[test]
    fn region_coordinates_shift_after_a_crop() {
        // Crop 4 left columns, then mask a region recorded in original
        // coordinates; the fill must land on the same original pixels.
        let (manifest, images) = dataset(&["a"]);
        let pad = finding("a", FindingKind::PaddingConfound, 0.9);
        let circ = finding("a", FindingKind::CircularArtifact, 0.9);
        let region = Mask::try_from(&circ.region_rle).unwrap();
        let plan = RemediationPlan {
            version: 1,
            dataset: "ds".into(),
            policy: RemediationPolicy::default(),
            actions: vec![
                PlannedAction {
                    image: "a".into(),
                    kind: circ.kind,
                    action: RemedyAction::MaskRegion,
                    severity: circ.severity,
                    region_rle: circ.region_rle,
                    params: circ.params,
                },
                PlannedAction {
                    image: "a".into(),
                    kind: pad.kind,
                    action: RemedyAction::CropPadding,
                    severity: pad.severity,
                    region_rle: pad.region_rle,
                    params: pad.params,
                },
            ],
        };
        let (_, imgs, log) = apply_remediation(&plan, &manifest, &images, 0).unwrap();
        assert_eq!(log.records[0].action, RemedyAction::CropPadding);
        assert_eq!((imgs[0].width, imgs[0].height), (12, 16));
        for r in 0..16 {
            for c in 0..12 {
                let orig_c = c + 4;
                if region.get(r, orig_c) {
                    assert_ne!(imgs[0].get(r, c), images[0].get(r, orig_c));
                } else {
                    assert_eq!(imgs[0].get(r, c), images[0].get(r, orig_c));
                }
            }
        }
    }

    #[test]
    fn crop_that_empties_the_image_is_a_geometry_error() {
        let (manifest, images) = dataset(&["a"]);
        let plan = single_action_plan(PlannedAction {
            image: "a".into(),
            kind: FindingKind::PaddingConfound,
            action: RemedyAction::CropPadding,
            severity: 0.9,
            region_rle: (&Mask::from_fn(16, 16, |_, _| true)).into(),
            params: RegionParams::Padding {
                left: 8,
                right: 8,
                top: 0,
                bottom: 0,
            },
        });
        let err = apply_remediation(&plan, &manifest, &images, 0).unwrap_err();
        assert!(matches!(err, RemedyError::GeometryError { .. }), "{err}");
    }

    #[test]
    fn unknown_image_is_rejected() {
        let (manifest, images) = dataset(&["a"]);
        let f = finding("zz", FindingKind::PatientTable, 0.9);
        let plan = single_action_plan(PlannedAction {
            image: "zz".into(),
            kind: f.kind,
            action: RemedyAction::RemoveTableRows,
            severity: f.severity,
            region_rle: f.region_rle,
            params: f.params,
        });
        let err = apply_remediation(&plan, &manifest, &images, 0).unwrap_err();
        assert!(matches!(err, RemedyError::UnknownImage { ref image } if image == "zz"));
    }

    #[test]
    fn recalibrate_preserves_calibrated_values() {
        let (mut manifest, mut images) = dataset(&["a", "b", "c"]);
        manifest.entries[1].calibration = CalibrationMeta {
            slope: 1.0,
            intercept: -500.0,
            declared_range: None,
        };
        // Keep raw pixels representable after the shift.
        for p in images[1].pixels.iter_mut() {
            *p += 600;
        }
        let old = manifest.entries[1].calibration.clone();
        let before_cal: Vec<f64> = images[1]
            .pixels
            .iter()
            .map(|&p| old.slope * p as f64 + old.intercept)
            .collect();
        let plan = single_action_plan(PlannedAction {
            image: "b".into(),
            kind: FindingKind::CalibrationAnomaly,
            action: RemedyAction::Recalibrate,
            severity: 0.9,
            region_rle: (&Mask::new(16, 16)).into(),
            params: RegionParams::Calibration {
                tests: vec!["metadata_inconsistency".into()],
            },
        });
        let (m, imgs, _) = apply_remediation(&plan, &manifest, &images, 0).unwrap();
        assert_eq!(m.entries[1].calibration, CalibrationMeta::identity());
        for (i, &p) in imgs[1].pixels.iter().enumerate() {
            let new_cal = p as f64; // identity calibration
            assert!(
                (new_cal - before_cal[i]).abs() <= 0.5 + 1e-9,
                "calibrated value moved: {} -> {}",
                before_cal[i],
                new_cal
            );
        }
    }

    #[test]
    fn provenance_round_trips_through_jsonl() {
        let (manifest, images) = dataset(&["a", "b"]);
        let f = finding("a", FindingKind::PatientTable, 0.9);
        let plan = single_action_plan(PlannedAction {
            image: "a".into(),
            kind: f.kind,
            action: RemedyAction::RemoveTableRows,
            severity: f.severity,
            region_rle: f.region_rle,
            params: f.params,
        });
        let (_, _, log) = apply_remediation(&plan, &manifest, &images, 777).unwrap();
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 1);
        let back = ProvenanceLog::from_jsonl(&text).unwrap();
        assert_eq!(back, log);
    }

    fn agg(flagged_fraction: f64, mean_severity: f64) -> KindAggregate {
        KindAggregate {
            flagged_fraction,
            mean_severity,
            finding_count: if mean_severity > 0.0 { 1 } else { 0 },
            flagged_images: (flagged_fraction * 10.0).round() as usize,
        }
    }

    fn report_with_aggregates(
        images: &[&str],
        pairs: &[(&str, KindAggregate)],
    ) -> AuditReport {
        let mut report = report_with(vec![], images);
        report.aggregates = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        report
    }

    #[test]
    fn verify_reports_improvement_and_regression() {
        let ids = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
        let before = report_with_aggregates(
            &ids,
            &[("patient_table", agg(0.5, 0.6)), ("padding_confound", agg(0.0, 0.0))],
        );
        let improved = report_with_aggregates(
            &ids,
            &[("patient_table", agg(0.1, 0.2)), ("padding_confound", agg(0.0, 0.0))],
        );
        let v = verify_remediation(&before, &improved).unwrap();
        assert_eq!(v.verdict, Verdict::Improved);

        let regressed = report_with_aggregates(
            &ids,
            &[("patient_table", agg(0.5, 0.6)), ("padding_confound", agg(0.3, 0.4))],
        );
        let v = verify_remediation(&before, &regressed).unwrap();
        assert_eq!(v.verdict, Verdict::Regressed);

        let unchanged = verify_remediation(&before, &before).unwrap();
        assert_eq!(unchanged.verdict, Verdict::Unchanged);
    }

    #[test]
    fn verify_requires_after_images_to_be_a_subset() {
        let before = report_with_aggregates(&["a", "b"], &[]);
        let after = report_with_aggregates(&["a", "x"], &[]);
        let err = verify_remediation(&before, &after).unwrap_err();
        assert!(matches!(err, RemedyError::DatasetMismatch(_)), "{err}");
        // Shrinking is fine.
        let smaller = report_with_aggregates(&["a"], &[]);
        assert!(verify_remediation(&before, &smaller).is_ok());
    }

    #[test]
    fn plan_round_trips_through_json() {
        let report = report_with(
            vec![finding("a", FindingKind::PaddingConfound, 0.8)],
            &["a"],
        );
        let plan = plan_remediation(&report, &RemediationPolicy::default()).unwrap();
        let text = plan.to_json();
        assert_eq!(RemediationPlan::from_json(&text).unwrap(), plan);
    }
}
