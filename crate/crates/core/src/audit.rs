//! Dataset auditing: pixel-level detectors for acquisition artifacts
//! (constant border padding, centered rings, bright bottom bands), a
//! metadata/statistics detector for calibration anomalies, and severity
//! scoring that ties each detected region to the attribution mass the
//! model places inside it.
//!
//! Severity is the fraction of an image's total attribution falling in the
//! region, so it directly measures "how much the model relies on the
//! artifact" and is comparable across images.

use crate::corpus::{apply_calibration, DatasetManifest, ImageSlice, TaskKind};
use crate::explain::{
    mass_fraction, occlusion_map, predicted_target, AttributionMap, Baseline, ExplainError,
    OcclusionConfig,
};
use crate::mask::{Mask, RleMask};
use crate::prototype::{PrototypeError, PrototypeModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit config: {0}")]
    BadConfig(String),
    #[error("report: {0}")]
    BadReport(String),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    PaddingConfound,
    CircularArtifact,
    PatientTable,
    CalibrationAnomaly,
    /// A suspect region supplied by the operator rather than a detector.
    OperatorRegion,
}

impl FindingKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FindingKind::PaddingConfound => "padding_confound",
            FindingKind::CircularArtifact => "circular_artifact",
            FindingKind::PatientTable => "patient_table",
            FindingKind::CalibrationAnomaly => "calibration_anomaly",
            FindingKind::OperatorRegion => "operator_region",
        }
    }
}

impl std::fmt::Display for FindingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Detector-specific localization record accompanying each region mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegionParams {
    Padding {
        left: usize,
        right: usize,
        top: usize,
        bottom: usize,
    },
    Circle {
        center: [f64; 2],
        /// Mid-line radius of the ring.
        radius: f64,
        inner: f64,
        outer: f64,
        /// Peak edge response over the median response.
        response_ratio: f64,
    },
    Table {
        /// Half-open [start, end) row runs, full image width.
        row_runs: Vec<[usize; 2]>,
    },
    Operator {
        label: String,
    },
    Calibration {
        tests: Vec<String>,
    },
}

/// A detected (or supplied) pixel region with its parameter record.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub mask: Mask,
    pub kind: FindingKind,
    pub params: RegionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditFinding {
    pub image: String,
    pub kind: FindingKind,
    pub severity: f64,
    pub region_rle: RleMask,
    pub params: RegionParams,
    pub evidence: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindAggregate {
    /// Fraction of audited images with a finding of this kind at or above
    /// the flag threshold.
    pub flagged_fraction: f64,
    /// Mean severity over all findings of this kind (0 when none).
    pub mean_severity: f64,
    pub finding_count: usize,
    pub flagged_images: usize,
}

/// Region supplied on the side: scored on every image like a detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraRegion {
    pub label: String,
    pub region: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    /// Minimum constant border run flagged as padding (rows/columns).
    pub w_min: usize,
    /// Ring edge response must exceed this multiple of the median response.
    pub k_c: f64,
    /// Ring mask thickness when only one edge is found (pixels).
    pub t_c: f64,
    /// Bottom-band start as a fraction of image height.
    pub beta: f64,
    /// Table rows must exceed the image mean by this many image std-devs.
    pub k_t: f64,
    /// Tolerated fraction of calibrated pixels outside the declared range.
    pub p_v: f64,
    /// Held-out balanced accuracy above which raw dynamic range counts as
    /// label-predictive.
    pub a_c: f64,
    /// Minimum between-level quantile separation, in units of the typical
    /// within-image pixel spread, for the dynamic-range test to fire.
    pub e_c: f64,
    /// Association (Cramer's V / |r|) above which metadata clusters count
    /// as label-aligned.
    pub v_c: f64,
    /// Findings at or above this severity flag their image.
    pub s_flag: f64,
    pub occlusion: OcclusionConfig,
    pub extra_regions: Vec<ExtraRegion>,
    /// Worker threads for per-image stages; 0 = available parallelism.
    pub workers: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            w_min: 3,
            k_c: 4.0,
            t_c: 2.0,
            beta: 0.75,
            k_t: 2.0,
            p_v: 0.01,
            a_c: 0.7,
            e_c: 1.0,
            v_c: 0.5,
            s_flag: 0.25,
            occlusion: OcclusionConfig::default(),
            extra_regions: Vec::new(),
            workers: 0,
        }
    }
}

/// Constant border runs: from each border inward, a maximal run of >= w_min
/// lines (rows or columns), each with zero variance and one shared value
/// across the run, is padding.
pub fn detect_padding(image: &ImageSlice, w_min: usize) -> Option<RegionMask> {
    let (w, h) = (image.width, image.height);
    let line_constant = |line: &mut dyn Iterator<Item = u32>| -> Option<u32> {
        let mut it = line.peekable();
        let first = *it.peek()?;
        it.all(|p| p == first).then_some(first)
    };
    let run_from = |count: usize, nth_line: &dyn Fn(usize, &ImageSlice) -> Vec<u32>| -> usize {
        let mut shared: Option<u32> = None;
        let mut run = 0usize;
        for i in 0..count {
            let line = nth_line(i, image);
            match line_constant(&mut line.into_iter()) {
                Some(v) if shared.is_none() || shared == Some(v) => {
                    shared = Some(v);
                    run += 1;
                }
                _ => break,
            }
        }
        run
    };
    let row = |i: usize, img: &ImageSlice| (0..w).map(|c| img.get(i, c)).collect::<Vec<_>>();
    let row_rev =
        |i: usize, img: &ImageSlice| (0..w).map(|c| img.get(h - 1 - i, c)).collect::<Vec<_>>();
    let col = |i: usize, img: &ImageSlice| (0..h).map(|r| img.get(r, i)).collect::<Vec<_>>();
    let col_rev =
        |i: usize, img: &ImageSlice| (0..h).map(|r| img.get(r, w - 1 - i)).collect::<Vec<_>>();

    let top = run_from(h, &row);
    let bottom = run_from(h, &row_rev);
    let left = run_from(w, &col);
    let right = run_from(w, &col_rev);

    let keep = |run: usize| if run >= w_min { run } else { 0 };
    let (top, bottom, left, right) = (keep(top), keep(bottom), keep(left), keep(right));
    if top + bottom + left + right == 0 {
        return None;
    }
    let mask = Mask::from_fn(w, h, |r, c| {
        r < top || r >= h - bottom.min(h) || c < left || c >= w - right.min(w)
    });
    Some(RegionMask {
        mask,
        kind: FindingKind::PaddingConfound,
        params: RegionParams::Padding {
            left,
            right,
            top,
            bottom,
        },
    })
}

/// Centered ring / field-of-view boundary. Bins pixels by rounded distance
/// from the image center, takes the absolute difference of adjacent bin
/// means as the edge response, and looks for responses above k_c times the
/// median. Two nearby strong edges bound a ring; a single edge gets a band
/// of thickness t_c around it. Edges closer to the center than a quarter of
/// the image are ignored: scanner bores and reconstruction fields inscribe
/// the frame, while small-radius curvature is indistinguishable from
/// anatomy or signal and is better handled as an operator region.
pub fn detect_fov_circle(image: &ImageSlice, k_c: f64, t_c: f64) -> Option<RegionMask> {
    let (w, h) = (image.width, image.height);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let r_max = (w.min(h) / 2).saturating_sub(1);
    let r_min = (w.min(h) / 4).max(2);
    if r_max < 4 {
        return None;
    }
    // Per-pixel outward gradient: |I(one pixel further from center) - I|,
    // averaged over each rounded-radius bin. Unlike a difference of bin
    // means this does not shrink with bin size, so the max/median ratio is
    // stable on pure noise.
    let mut sums = vec![0.0f64; r_max + 1];
    let mut counts = vec![0usize; r_max + 1];
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            let d = (dy * dy + dx * dx).sqrt();
            let bin = d.round() as usize;
            if bin < 2 || bin > r_max || d == 0.0 {
                continue;
            }
            let (oy, ox) = (cy + dy * (d + 1.0) / d, cx + dx * (d + 1.0) / d);
            let (oy, ox) = (oy.round(), ox.round());
            if oy < 0.0 || ox < 0.0 || oy >= h as f64 || ox >= w as f64 {
                continue;
            }
            let outward = image.get(oy as usize, ox as usize) as f64;
            sums[bin] += (outward - image.get(r, c) as f64).abs();
            counts[bin] += 1;
        }
    }
    // response[r]: edge strength between bins r and r+1.
    let responses: Vec<(usize, f64)> = (2..r_max)
        .filter(|&r| counts[r] >= 8)
        .map(|r| (r, sums[r] / counts[r] as f64))
        .collect();
    if responses.is_empty() {
        return None;
    }
    let mut sorted: Vec<f64> = responses.iter().map(|&(_, v)| v).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let threshold = k_c * median;
    let mut peaks: Vec<(usize, f64)> = responses
        .iter()
        .copied()
        .filter(|&(r, v)| r >= r_min && v > threshold && v > 0.0)
        .collect();
    if peaks.is_empty() {
        return None;
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (r1, v1) = peaks[0];
    // Second edge: strongest remaining peak forming a plausible ring span.
    let partner = peaks[1..]
        .iter()
        .find(|&&(r2, _)| {
            let gap = r2.abs_diff(r1);
            (2..=8).contains(&gap)
        })
        .copied();
    let ratio = if median > 0.0 { v1 / median } else { f64::INFINITY };
    let (inner, outer) = match partner {
        Some((r2, _)) => {
            let lo = r1.min(r2) as f64 + 0.5;
            let hi = r1.max(r2) as f64 + 0.5;
            (lo, hi)
        }
        None => {
            let edge = r1 as f64 + 0.5;
            ((edge - t_c / 2.0).max(0.0), edge + t_c / 2.0)
        }
    };
    let mask = Mask::from_fn(w, h, |r, c| {
        let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
        d >= inner && d <= outer
    });
    if mask.is_empty() {
        return None;
    }
    Some(RegionMask {
        mask,
        kind: FindingKind::CircularArtifact,
        params: RegionParams::Circle {
            center: [cy, cx],
            radius: (inner + outer) / 2.0,
            inner,
            outer,
            response_ratio: ratio,
        },
    })
}

/// Bright rows in the bottom band: rows at or below beta * height whose
/// mean exceeds the whole-image mean by k_t whole-image std-devs, grouped
/// into maximal runs.
pub fn detect_table(image: &ImageSlice, beta: f64, k_t: f64) -> Option<RegionMask> {
    let (w, h) = (image.width, image.height);
    let n = (w * h) as f64;
    let mean = image.pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
    let var = image
        .pixels
        .iter()
        .map(|&p| (p as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return None;
    }
    let band_start = (beta * h as f64).floor() as usize;
    let threshold = mean + k_t * sd;
    let mut flagged: Vec<usize> = Vec::new();
    for r in band_start..h {
        let row_mean = (0..w).map(|c| image.get(r, c) as f64).sum::<f64>() / w as f64;
        if row_mean > threshold {
            flagged.push(r);
        }
    }
    if flagged.is_empty() {
        return None;
    }
    let mut row_runs: Vec<[usize; 2]> = Vec::new();
    for &r in &flagged {
        match row_runs.last_mut() {
            Some(run) if run[1] == r => run[1] = r + 1,
            _ => row_runs.push([r, r + 1]),
        }
    }
    let in_run = |r: usize| row_runs.iter().any(|run| r >= run[0] && r < run[1]);
    let mask = Mask::from_fn(w, h, |r, _| in_run(r));
    Some(RegionMask {
        mask,
        kind: FindingKind::PatientTable,
        params: RegionParams::Table { row_runs },
    })
}

/// Outcome of one calibration test on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFlag {
    pub image: String,
    pub test: String,
    pub severity: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationDiagnostic {
    pub insufficient_data: bool,
    /// (slope, intercept, image count, is reference) per metadata cluster.
    pub clusters: Vec<(f64, f64, usize, bool)>,
    /// Cramer's V (classification) or |point-biserial r| (regression)
    /// between cluster membership and label, when > 1 cluster.
    pub cluster_label_association: Option<f64>,
    /// Held-out balanced accuracy of the per-image raw summary statistics
    /// (mean and quantiles) as label predictors.
    pub holdout_balanced_accuracy: Option<BTreeMap<String, f64>>,
    /// Between-level separation of each quantile, in units of the typical
    /// within-image pixel spread.
    pub quantile_effect: Option<BTreeMap<String, f64>>,
    pub flags: Vec<CalibrationFlag>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).max(1).min(n) - 1;
    sorted[idx]
}

/// Best threshold rule (value, predict-1-above or below) for binary levels
/// on (stat, level) pairs, by balanced accuracy.
fn fit_threshold(stats: &[f64], levels: &[bool]) -> Option<(f64, bool)> {
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| stats[a].total_cmp(&stats[b]));
    let mut best: Option<(f64, (f64, bool))> = None;
    let mut candidates: Vec<f64> = vec![stats[order[0]] - 1.0];
    for w in order.windows(2) {
        if stats[w[0]] != stats[w[1]] {
            candidates.push((stats[w[0]] + stats[w[1]]) / 2.0);
        }
    }
    candidates.push(stats[order[order.len() - 1]] + 1.0);
    for &theta in &candidates {
        for &above in &[true, false] {
            let ba = balanced_accuracy(stats, levels, theta, above)?;
            if best.is_none() || ba > best.unwrap().0 {
                best = Some((ba, (theta, above)));
            }
        }
    }
    best.map(|(_, rule)| rule)
}

fn balanced_accuracy(stats: &[f64], levels: &[bool], theta: f64, above: bool) -> Option<f64> {
    let (mut tp, mut fp, mut tn, mut fnn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in stats.iter().zip(levels) {
        let pred = if above { s > theta } else { s < theta };
        match (pred, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fnn += 1,
        }
    }
    if tp + fnn == 0 || fp + tn == 0 {
        return None; // only one level present
    }
    Some(0.5 * (tp as f64 / (tp + fnn) as f64 + tn as f64 / (fp + tn) as f64))
}

/// Three calibration tests: (a) label-aligned metadata clusters,
/// (b) calibrated values violating the declared range, (c) raw dynamic
/// range (both 5th and 95th percentile jointly) predicting the label on a
/// held-out split. Fewer than 10 images reports insufficient data.
pub fn detect_calibration_anomaly(
    manifest: &DatasetManifest,
    images: &[ImageSlice],
    cfg: &AuditConfig,
) -> CalibrationDiagnostic {
    let mut diag = CalibrationDiagnostic::default();
    let n = manifest.entries.len();
    if n < 10 {
        diag.insufficient_data = true;
        return diag;
    }

    // Binary label level: upper classes, or labels at/above the median.
    let levels: Vec<bool> = match manifest.task {
        TaskKind::Classification => {
            let classes = manifest.class_count.unwrap_or(2);
            manifest
                .entries
                .iter()
                .map(|e| e.class() * 2 >= classes)
                .collect()
        }
        TaskKind::Regression => {
            let mut labels: Vec<f64> = manifest.entries.iter().map(|e| e.label).collect();
            labels.sort_by(f64::total_cmp);
            let median = labels[n / 2];
            manifest.entries.iter().map(|e| e.label >= median).collect()
        }
    };

    // (a) metadata clusters, grouped by exact (slope, intercept).
    let mut clusters: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        clusters
            .entry((e.calibration.slope.to_bits(), e.calibration.intercept.to_bits()))
            .or_default()
            .push(i);
    }
    let mut cluster_list: Vec<(f64, f64, Vec<usize>)> = clusters
        .into_values()
        .map(|members| {
            let e = &manifest.entries[members[0]].calibration;
            (e.slope, e.intercept, members)
        })
        .collect();
    // Reference = largest cluster; ties prefer the one closest to identity.
    cluster_list.sort_by(|a, b| {
        b.2.len()
            .cmp(&a.2.len())
            .then_with(|| {
                let da = (a.0 - 1.0).abs() + a.1.abs();
                let db = (b.0 - 1.0).abs() + b.1.abs();
                da.total_cmp(&db)
            })
    });
    diag.clusters = cluster_list
        .iter()
        .enumerate()
        .map(|(i, (s, ic, m))| (*s, *ic, m.len(), i == 0))
        .collect();

    let mut suspect_cluster_members: Vec<usize> = Vec::new();
    if cluster_list.len() > 1 {
        let in_reference: Vec<bool> = {
            let mut v = vec![false; n];
            for &i in &cluster_list[0].2 {
                v[i] = true;
            }
            v
        };
        // Association between non-reference membership and label level.
        let member: Vec<bool> = (0..n).map(|i| !in_reference[i]).collect();
        let assoc = binary_association(&member, &levels);
        diag.cluster_label_association = Some(assoc);
        if assoc >= cfg.v_c {
            for (slope, intercept, members) in &cluster_list[1..] {
                for &i in members {
                    suspect_cluster_members.push(i);
                    diag.flags.push(CalibrationFlag {
                        image: manifest.entries[i].id.clone(),
                        test: "metadata_inconsistency".into(),
                        severity: assoc.min(1.0),
                        detail: format!(
                            "calibration ({slope}, {intercept}) differs from the reference cluster and membership is label-associated"
                        ),
                    });
                }
            }
        }
    }

    // (b) declared-range violations.
    for (e, image) in manifest.entries.iter().zip(images) {
        if let Some((lo, hi)) = e.calibration.declared_range {
            let cal = apply_calibration(image, &e.calibration);
            let out = cal.values.iter().filter(|&&v| v < lo || v > hi).count();
            let fraction = out as f64 / cal.values.len() as f64;
            if fraction > cfg.p_v {
                diag.flags.push(CalibrationFlag {
                    image: e.id.clone(),
                    test: "range_violation".into(),
                    severity: fraction,
                    detail: format!(
                        "{:.2}% of calibrated values outside [{lo}, {hi}]",
                        fraction * 100.0
                    ),
                });
            }
        }
    }

    // (c) dynamic-range/label association with a held-out threshold rule.
    // A calibration problem re-expresses the whole raw scale, so the lower
    // tail, the median, and the upper tail all move together and by a
    // material amount; a localized bright or dark artifact (or the
    // legitimate signal) displaces order statistics only fractionally. The
    // test fires when all three quantiles are label-predictive on held-out
    // images AND each separates the levels by at least e_c typical
    // within-image pixel spreads. The mean is reported for diagnostics.
    let mut sds: Vec<f64> = Vec::with_capacity(images.len());
    let stats: Vec<[f64; 4]> = images
        .iter()
        .map(|img| {
            let mut v: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            sds.push(var.sqrt());
            [
                mean,
                percentile(&v, 0.05),
                percentile(&v, 0.50),
                percentile(&v, 0.95),
            ]
        })
        .collect();
    sds.sort_by(f64::total_cmp);
    let scale = sds[sds.len() / 2].max(1e-9);
    // Stratified split: alternate within each level so both halves see
    // both levels regardless of how the dataset interleaves its labels.
    let mut train_idx: Vec<usize> = Vec::new();
    let mut hold_idx: Vec<usize> = Vec::new();
    let mut seen = [0usize; 2];
    for (i, &level) in levels.iter().enumerate() {
        let k = &mut seen[level as usize];
        if *k % 2 == 0 {
            train_idx.push(i);
        } else {
            hold_idx.push(i);
        }
        *k += 1;
    }
    let mut bas: BTreeMap<String, f64> = BTreeMap::new();
    let mut rules: BTreeMap<String, (f64, bool)> = BTreeMap::new();
    for (name, pick) in [
        ("mean", 0usize),
        ("p5", 1usize),
        ("p50", 2usize),
        ("p95", 3usize),
    ] {
        let get = |i: usize| stats[i][pick];
        let train_stats: Vec<f64> = train_idx.iter().map(|&i| get(i)).collect();
        let train_levels: Vec<bool> = train_idx.iter().map(|&i| levels[i]).collect();
        let hold_stats: Vec<f64> = hold_idx.iter().map(|&i| get(i)).collect();
        let hold_levels: Vec<bool> = hold_idx.iter().map(|&i| levels[i]).collect();
        if let Some((theta, above)) = fit_threshold(&train_stats, &train_levels) {
            if let Some(ba) = balanced_accuracy(&hold_stats, &hold_levels, theta, above) {
                bas.insert(name.to_string(), ba);
                rules.insert(name.to_string(), (theta, above));
            }
        }
    }
    if !bas.is_empty() {
        diag.holdout_balanced_accuracy = Some(bas.clone());
    }
    let quantiles = ["p5", "p50", "p95"];
    let median_of = |values: &mut Vec<f64>| -> f64 {
        values.sort_by(f64::total_cmp);
        values[values.len() / 2]
    };
    let mut effects: BTreeMap<String, f64> = BTreeMap::new();
    for (name, pick) in [("p5", 1usize), ("p50", 2), ("p95", 3)] {
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for (i, &level) in levels.iter().enumerate() {
            if level {
                hi.push(stats[i][pick]);
            } else {
                lo.push(stats[i][pick]);
            }
        }
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let effect = (median_of(&mut hi) - median_of(&mut lo)).abs() / scale;
        effects.insert(name.to_string(), effect);
    }
    if !effects.is_empty() {
        diag.quantile_effect = Some(effects.clone());
    }
    let joint = quantiles
        .iter()
        .map(|s| bas.get(*s).copied().unwrap_or(0.0))
        .fold(f64::INFINITY, f64::min);
    let material = quantiles.len() == effects.len()
        && effects.values().all(|&e| e >= cfg.e_c);
    if joint.is_finite() && joint >= cfg.a_c && material {
        // Flag the anomalous side of the best quantile's rule: prefer the
        // side aligned with a suspect metadata cluster, else the minority
        // side, else the high side.
        let tail = *quantiles
            .iter()
            .max_by(|a, b| bas[**a].total_cmp(&bas[**b]))
            .expect("three quantiles");
        let (theta, above) = rules[tail];
        let pick = match tail {
            "p5" => 1,
            "p50" => 2,
            _ => 3,
        };
        let stat = |i: usize| stats[i][pick];
        let side: Vec<bool> = (0..n)
            .map(|i| {
                if above {
                    stat(i) > theta
                } else {
                    stat(i) < theta
                }
            })
            .collect();
        let pick_true_side = if !suspect_cluster_members.is_empty() {
            let on_side = suspect_cluster_members
                .iter()
                .filter(|&&i| side[i])
                .count();
            on_side * 2 >= suspect_cluster_members.len()
        } else {
            let true_count = side.iter().filter(|&&s| s).count();
            if true_count * 2 == n {
                // Even split: take the side with the higher stat values.
                above
            } else {
                true_count * 2 < n
            }
        };
        let severity = (2.0 * joint - 1.0).clamp(0.0, 1.0);
        for i in 0..n {
            if side[i] == pick_true_side {
                diag.flags.push(CalibrationFlag {
                    image: manifest.entries[i].id.clone(),
                    test: "dynamic_range_association".into(),
                    severity,
                    detail: format!(
                        "raw {tail} on the {} side of {theta:.2} predicts the label (held-out balanced accuracy {joint:.3})",
                        if pick_true_side == above { "flagged" } else { "opposite" }
                    ),
                });
            }
        }
    }
    diag.flags.sort_by(|a, b| {
        a.image
            .cmp(&b.image)
            .then_with(|| a.test.cmp(&b.test))
    });
    diag
}

/// Cramer's V for 2x2 tables == |phi coefficient|; equals the absolute
/// Pearson correlation of the two binary indicators.
fn binary_association(a: &[bool], b: &[bool]) -> f64 {
    let (mut n11, mut n10, mut n01, mut n00) = (0.0f64, 0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        match (x, y) {
            (true, true) => n11 += 1.0,
            (true, false) => n10 += 1.0,
            (false, true) => n01 += 1.0,
            (false, false) => n00 += 1.0,
        }
    }
    let (r1, r0) = (n11 + n10, n01 + n00);
    let (c1, c0) = (n11 + n01, n10 + n00);
    let denom = (r1 * r0 * c1 * c0).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    ((n11 * n00 - n10 * n01) / denom).abs().min(1.0)
}

/// Severity = attribution mass fraction inside the region.
pub fn score_finding(
    map: &AttributionMap,
    region: &RegionMask,
) -> Result<AuditFinding, ExplainError> {
    let severity = mass_fraction(map, &region.mask)?;
    let evidence = match &region.params {
        RegionParams::Padding {
            left,
            right,
            top,
            bottom,
        } => format!("constant borders l{left} r{right} t{top} b{bottom}"),
        RegionParams::Circle {
            radius,
            inner,
            outer,
            response_ratio,
            ..
        } => format!(
            "ring r={radius:.1} ({inner:.1}..{outer:.1}), edge response {response_ratio:.1}x median"
        ),
        RegionParams::Table { row_runs } => format!("bright bottom rows {row_runs:?}"),
        RegionParams::Operator { label } => format!("operator region {label:?}"),
        RegionParams::Calibration { tests } => format!("calibration tests {tests:?}"),
    };
    Ok(AuditFinding {
        image: map.image_id.clone(),
        kind: region.kind,
        severity,
        region_rle: (&region.mask).into(),
        params: region.params.clone(),
        evidence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditReport {
    pub version: u32,
    pub dataset: String,
    pub model: String,
    pub task: TaskKind,
    /// Sorted ids of all audited images.
    pub images: Vec<String>,
    pub config: AuditConfig,
    pub findings: Vec<AuditFinding>,
    pub aggregates: BTreeMap<String, KindAggregate>,
    pub calibration: CalibrationDiagnostic,
    pub errors: Vec<String>,
}

impl AuditReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AuditError> {
        let report: AuditReport =
            serde_json::from_str(text).map_err(|e| AuditError::BadReport(e.to_string()))?;
        if report.version != 1 {
            return Err(AuditError::BadReport(format!(
                "unsupported report version {}",
                report.version
            )));
        }
        Ok(report)
    }

    /// True if any finding flags its image (severity >= s_flag).
    pub fn has_flagged_findings(&self) -> bool {
        self.findings
            .iter()
            .any(|f| f.severity >= self.config.s_flag)
    }
}

fn recompute_aggregates(
    findings: &[AuditFinding],
    image_count: usize,
    s_flag: f64,
) -> BTreeMap<String, KindAggregate> {
    let mut out: BTreeMap<String, KindAggregate> = BTreeMap::new();
    for kind in [
        FindingKind::PaddingConfound,
        FindingKind::CircularArtifact,
        FindingKind::PatientTable,
        FindingKind::CalibrationAnomaly,
    ] {
        out.insert(kind.as_str().into(), KindAggregate::default());
    }
    let mut flagged: BTreeMap<String, std::collections::BTreeSet<&str>> = BTreeMap::new();
    for f in findings {
        let agg = out.entry(f.kind.as_str().into()).or_default();
        agg.finding_count += 1;
        agg.mean_severity += f.severity;
        if f.severity >= s_flag {
            flagged
                .entry(f.kind.as_str().into())
                .or_default()
                .insert(&f.image);
        }
    }
    for (kind, agg) in out.iter_mut() {
        if agg.finding_count > 0 {
            agg.mean_severity /= agg.finding_count as f64;
        }
        agg.flagged_images = flagged.get(kind).map_or(0, |s| s.len());
        agg.flagged_fraction = if image_count > 0 {
            agg.flagged_images as f64 / image_count as f64
        } else {
            0.0
        };
    }
    out
}

/// Full audit pass: per-image attribution and geometric detectors (in
/// parallel, deterministically assembled), dataset-level calibration
/// tests, severity scoring, and per-kind aggregation. Per-image failures
/// become report errors, not an aborted run.
pub fn audit_dataset(
    model: &PrototypeModel,
    manifest: &DatasetManifest,
    images: &[ImageSlice],
    cfg: &AuditConfig,
    dataset_id: &str,
    model_id: &str,
) -> Result<AuditReport, AuditError> {
    if images.len() != manifest.entries.len() {
        return Err(AuditError::BadConfig(format!(
            "{} manifest entries vs {} images",
            manifest.entries.len(),
            images.len()
        )));
    }
    let mut cfg = cfg.clone();
    for extra in &cfg.extra_regions {
        Mask::try_from(&extra.region)
            .map_err(|e| AuditError::BadConfig(format!("extra region {:?}: {e}", extra.label)))?;
    }

    // Resolve the dataset-mean baseline from the model-input planes.
    let planes: Vec<_> = images.iter().map(|img| model.input_plane(img)).collect();
    if let Baseline::DatasetMean { .. } = cfg.occlusion.baseline {
        let (mut sum, mut count) = (0.0f64, 0usize);
        for plane in &planes {
            sum += plane.values.iter().sum::<f64>();
            count += plane.values.len();
        }
        let value = if count > 0 { sum / count as f64 } else { 0.0 };
        cfg.occlusion.baseline = Baseline::DatasetMean { value };
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| AuditError::BadConfig(format!("worker pool: {e}")))?;
    // Worker count never changes results (verified by test), so the echoed
    // config normalizes it; reports stay byte-identical across worker counts.
    cfg.workers = 0;

    let extra_masks: Vec<(String, Mask)> = cfg
        .extra_regions
        .iter()
        .map(|er| {
            (
                er.label.clone(),
                Mask::try_from(&er.region).expect("validated above"),
            )
        })
        .collect();

    type PerImage = (Vec<AuditFinding>, Vec<String>);
    let per_image: Vec<PerImage> = pool.install(|| {
        images
            .par_iter()
            .zip(planes.par_iter())
            .map(|(image, plane)| {
                let mut findings = Vec::new();
                let mut errors = Vec::new();
                let mut regions: Vec<RegionMask> = Vec::new();
                if let Some(r) = detect_padding(image, cfg.w_min) {
                    regions.push(r);
                }
                if let Some(r) = detect_fov_circle(image, cfg.k_c, cfg.t_c) {
                    regions.push(r);
                }
                if let Some(r) = detect_table(image, cfg.beta, cfg.k_t) {
                    regions.push(r);
                }
                for (label, mask) in &extra_masks {
                    if mask.width == image.width && mask.height == image.height {
                        regions.push(RegionMask {
                            mask: mask.clone(),
                            kind: FindingKind::OperatorRegion,
                            params: RegionParams::Operator {
                                label: label.clone(),
                            },
                        });
                    } else {
                        errors.push(format!(
                            "{}: extra region {label:?} is {}x{}, image is {}x{}",
                            image.id, mask.width, mask.height, image.width, image.height
                        ));
                    }
                }
                if regions.is_empty() {
                    return (findings, errors);
                }
                let map = predicted_target(model, plane)
                    .and_then(|t| occlusion_map(model, &image.id, plane, &cfg.occlusion, t));
                match map {
                    Ok(map) => {
                        for region in &regions {
                            match score_finding(&map, region) {
                                Ok(f) => findings.push(f),
                                Err(e) => errors.push(format!("{}: {e}", image.id)),
                            }
                        }
                    }
                    Err(e) => errors.push(format!("{}: {e}", image.id)),
                }
                (findings, errors)
            })
            .collect()
    });

    let mut findings: Vec<AuditFinding> = Vec::new();
    let mut errors: Vec<String> = Vec::new();
    for (f, e) in per_image {
        findings.extend(f);
        errors.extend(e);
    }

    // Dataset-level calibration tests; one finding per flagged image.
    let calibration = detect_calibration_anomaly(manifest, images, &cfg);
    let mut by_image: BTreeMap<&str, Vec<&CalibrationFlag>> = BTreeMap::new();
    for flag in &calibration.flags {
        by_image.entry(&flag.image).or_default().push(flag);
    }
    for (image, flags) in by_image {
        let severity = flags.iter().map(|f| f.severity).fold(0.0, f64::max);
        let tests: Vec<String> = flags.iter().map(|f| f.test.clone()).collect();
        let evidence = flags
            .iter()
            .map(|f| format!("{}: {}", f.test, f.detail))
            .collect::<Vec<_>>()
            .join("; ");
        let (w, h) = images
            .iter()
            .find(|i| i.id == image)
            .map(|i| (i.width, i.height))
            .unwrap_or((0, 0));
        findings.push(AuditFinding {
            image: image.to_string(),
            kind: FindingKind::CalibrationAnomaly,
            severity: severity.min(1.0),
            region_rle: (&Mask::new(w, h)).into(),
            params: RegionParams::Calibration { tests },
            evidence,
        });
    }

    findings.sort_by(|a, b| {
        a.image
            .cmp(&b.image)
            .then_with(|| a.kind.cmp(&b.kind))
            .then_with(|| a.evidence.cmp(&b.evidence))
    });
    errors.sort();

    let aggregates = recompute_aggregates(&findings, images.len(), cfg.s_flag);
    let mut image_ids: Vec<String> = images.iter().map(|i| i.id.clone()).collect();
    image_ids.sort();

    Ok(AuditReport {
        version: 1,
        dataset: dataset_id.to_string(),
        model: model_id.to_string(),
        task: manifest.task,
        images: image_ids,
        config: cfg,
        findings,
        aggregates,
        calibration,
        errors,
    })
}
