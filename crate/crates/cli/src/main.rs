//! Command-line front end: generate synthetic corpora, train the probe
//! model, audit a dataset, apply remediation plans, and compare audits.
//!
//! Exit codes: 0 success (for `audit`, no finding at or above the flag
//! threshold; for `verify`, improved or unchanged), 1 execution error,
//! 2 actionable outcome (`audit` found flagged findings, `verify` saw a
//! regression). Reports are written before exiting with 2.

use auditlens_core::audit::{audit_dataset, AuditConfig, AuditReport, ExtraRegion};
use auditlens_core::corpus::{load_dataset, save_dataset, DatasetManifest, ImageSlice, TaskKind};
use auditlens_core::explain::{occlusion_map, predicted_target, preview_pgm};
use auditlens_core::prototype::{
    init_model, load_checkpoint, save_checkpoint, train, ArchSpec, Head, Normalization,
    PrototypeModel, TrainConfig,
};
use auditlens_core::remedy::{
    apply_remediation, plan_remediation, verify_remediation, RemediationPolicy, Verdict,
};
use auditlens_core::synthgen::{
    gen_clean, inject_issue, save_corpus, Corner, CorpusSpec, IssueKind, IssueParams, IssueSpec,
    SignalSpec,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] auditlens_core::corpus::CorpusError),
    #[error(transparent)]
    Synth(#[from] auditlens_core::synthgen::SynthError),
    #[error(transparent)]
    Prototype(#[from] auditlens_core::prototype::PrototypeError),
    #[error(transparent)]
    Audit(#[from] auditlens_core::audit::AuditError),
    #[error(transparent)]
    Remedy(#[from] auditlens_core::remedy::RemedyError),
}

#[derive(Parser)]
#[command(name = "auditlens", version, about = "Audit image datasets for shortcut artifacts")]
struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image stages (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, optionally with injected issues.
    Gen(GenArgs),
    /// Train the probe model on a dataset.
    Train(TrainArgs),
    /// Audit a dataset with a trained model.
    Audit(AuditArgs),
    /// Plan and apply remediation from an audit report.
    Remediate(RemediateArgs),
    /// Compare a re-audit against its baseline report.
    Verify(VerifyArgs),
}

/// Optional per-command sections of the `--config` file; any field may be
/// omitted. Flags override these, and these override built-in defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    gen: Option<GenSection>,
    train: Option<TrainSection>,
    audit: Option<AuditConfig>,
    remediate: Option<RemediationPolicy>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenSection {
    image_size: Option<usize>,
    count: Option<usize>,
    task: Option<TaskKind>,
    classes: Option<usize>,
    signal: Option<SignalSpec>,
    issues: Option<Vec<IssueSpec>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    normalization: Option<Normalization>,
}

fn load_file_config(path: Option<&PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    let file = load_file_config(cli.config.as_ref())?;
    match cli.command {
        Command::Gen(args) => cmd_gen(args, file.gen.unwrap_or_default(), cli.seed),
        Command::Train(args) => cmd_train(args, file.train.unwrap_or_default(), cli.seed),
        Command::Audit(args) => {
            cmd_audit(args, file.audit.unwrap_or_default(), cli.workers)
        }
        Command::Remediate(args) => cmd_remediate(args, file.remediate.unwrap_or_default()),
        Command::Verify(args) => cmd_verify(args),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------- gen

#[derive(Args)]
struct GenArgs {
    /// Square image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, value_parser = ["classification", "regression"])]
    task: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    /// Issue to inject, e.g. `corner-marker:corr=1.0,size=8` (repeatable).
    #[arg(long)]
    issue: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct GenEcho<'a> {
    spec: &'a CorpusSpec,
    issues: &'a [IssueSpec],
}

/// Signal defaults scale with image size (the stock values suit 64 px).
fn scaled_signal(size: usize) -> SignalSpec {
    let stock = SignalSpec::default();
    let s = size as f64 / 64.0;
    SignalSpec {
        radius: ((stock.radius.0 * s).max(2.0), (stock.radius.1 * s).max(3.0)),
        ..stock
    }
}

fn cmd_gen(args: GenArgs, section: GenSection, seed: Option<u64>) -> Result<ExitCode, CliError> {
    let image_size = args.size.or(section.image_size).unwrap_or(64);
    let task = match args.task.as_deref() {
        Some("classification") => TaskKind::Classification,
        Some("regression") => TaskKind::Regression,
        Some(other) => return Err(CliError::Usage(format!("unknown task {other:?}"))),
        None => section.task.unwrap_or(TaskKind::Classification),
    };
    let spec = CorpusSpec {
        image_size,
        count: args.count.or(section.count).unwrap_or(100),
        task,
        classes: args.classes.or(section.classes).unwrap_or(2),
        signal: section.signal.unwrap_or_else(|| scaled_signal(image_size)),
        seed: seed.unwrap_or(0),
    };
    let mut issues: Vec<IssueSpec> = section.issues.unwrap_or_default();
    for text in &args.issue {
        issues.push(parse_issue(text, image_size).map_err(CliError::Usage)?);
    }

    let mut corpus = gen_clean(&spec)?;
    for issue in &issues {
        inject_issue(&mut corpus, issue, spec.seed)?;
    }
    save_corpus(&args.out, &corpus)?;
    let echo = GenEcho {
        spec: &spec,
        issues: &issues,
    };
    write_file(
        &args.out.join("gen_config.json"),
        serde_json::to_string_pretty(&echo).expect("echo serializes").as_bytes(),
    )?;
    println!(
        "generated {} {}x{} images into {}",
        spec.count,
        image_size,
        image_size,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// `kind:key=value,...` where kind is one of padding, circle, table,
/// calibration-shift, corner-marker (long forms accepted). `corr` sets the
/// label correlation; remaining keys override that issue's geometry.
fn parse_issue(text: &str, image_size: usize) -> Result<IssueSpec, String> {
    let (kind_text, rest) = match text.split_once(':') {
        Some((k, r)) => (k, Some(r)),
        None => (text, None),
    };
    let kind = match kind_text {
        "padding" | "padding-confound" => IssueKind::PaddingConfound,
        "circle" | "circular-artifact" => IssueKind::CircularArtifact,
        "table" | "patient-table" => IssueKind::PatientTable,
        "calibration-shift" => IssueKind::CalibrationShift,
        "corner-marker" => IssueKind::CornerMarker,
        other => return Err(format!("unknown issue kind {other:?}")),
    };
    let mut params = IssueParams::default_for(kind, image_size);
    let mut correlation = 1.0;
    if let Some(rest) = rest {
        for pair in rest.split(',') {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {pair:?}"))?;
            if key == "corr" {
                correlation = value
                    .parse::<f64>()
                    .map_err(|e| format!("corr: {e}"))?;
                continue;
            }
            set_issue_key(&mut params, key, value)?;
        }
    }
    Ok(IssueSpec {
        correlation,
        params,
    })
}

fn set_issue_key(params: &mut IssueParams, key: &str, value: &str) -> Result<(), String> {
    let bad_key = || format!("key {key:?} does not apply to this issue kind");
    let parse_f64 = |v: &str| v.parse::<f64>().map_err(|e| format!("{key}: {e}"));
    let parse_u32 = |v: &str| v.parse::<u32>().map_err(|e| format!("{key}: {e}"));
    let parse_usize = |v: &str| v.parse::<usize>().map_err(|e| format!("{key}: {e}"));
    match params {
        IssueParams::PaddingConfound { width, values, .. } => match key {
            "width" => *width = parse_usize(value)?,
            "value0" => values.0 = parse_u32(value)?,
            "value1" => values.1 = parse_u32(value)?,
            _ => return Err(bad_key()),
        },
        IssueParams::CircularArtifact {
            radius,
            thickness,
            deltas,
        } => match key {
            "radius" => *radius = parse_f64(value)?,
            "thickness" => *thickness = parse_f64(value)?,
            "delta0" => deltas.0 = parse_f64(value)?,
            "delta1" => deltas.1 = parse_f64(value)?,
            _ => return Err(bad_key()),
        },
        IssueParams::PatientTable { band_frac, deltas } => match key {
            "band" => *band_frac = parse_f64(value)?,
            "delta0" => deltas.0 = parse_f64(value)?,
            "delta1" => deltas.1 = parse_f64(value)?,
            _ => return Err(bad_key()),
        },
        IssueParams::CalibrationShift { shift } => match key {
            "shift" => *shift = parse_f64(value)?,
            _ => return Err(bad_key()),
        },
        IssueParams::CornerMarker {
            size,
            corner,
            values,
        } => match key {
            "size" => *size = parse_usize(value)?,
            "corner" => {
                *corner = match value {
                    "tl" => Corner::TopLeft,
                    "tr" => Corner::TopRight,
                    "bl" => Corner::BottomLeft,
                    "br" => Corner::BottomRight,
                    other => return Err(format!("corner: expected tl/tr/bl/br, got {other:?}")),
                }
            }
            "value0" => values.0 = parse_u32(value)?,
            "value1" => values.1 = parse_u32(value)?,
            _ => return Err(bad_key()),
        },
    }
    Ok(())
}

// -------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (manifest.json + images/).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = ["zscore", "minmax", "raw"])]
    norm: Option<String>,
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    data: String,
    arch: &'a ArchSpec,
    config: &'a TrainConfig,
    epoch_loss: &'a [f64],
    train_accuracy: Option<f64>,
}

fn parse_norm(text: &str) -> Normalization {
    match text {
        "minmax" => Normalization::GlobalMinmax,
        "raw" => Normalization::Raw,
        _ => Normalization::PerImageZscore,
    }
}

fn uniform_input_size(images: &[ImageSlice]) -> Result<usize, CliError> {
    let first = images
        .first()
        .ok_or_else(|| CliError::Usage("dataset has no images".into()))?;
    if first.width != first.height {
        return Err(CliError::Usage(format!(
            "model input must be square; {} is {}x{}",
            first.id, first.width, first.height
        )));
    }
    for img in images {
        if img.width != first.width || img.height != first.height {
            return Err(CliError::Usage(format!(
                "images differ in size: {} is {}x{}, {} is {}x{}",
                first.id, first.width, first.height, img.id, img.width, img.height
            )));
        }
    }
    Ok(first.width)
}

fn cmd_train(
    args: TrainArgs,
    section: TrainSection,
    seed: Option<u64>,
) -> Result<ExitCode, CliError> {
    let loaded = load_dataset(&args.data)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: args.epochs.or(section.epochs).unwrap_or(defaults.epochs),
        batch_size: args
            .batch
            .or(section.batch_size)
            .unwrap_or(defaults.batch_size),
        learning_rate: args
            .lr
            .or(section.learning_rate)
            .unwrap_or(defaults.learning_rate),
        seed: seed.unwrap_or(defaults.seed),
        normalization: args
            .norm
            .as_deref()
            .map(parse_norm)
            .or(section.normalization)
            .unwrap_or(defaults.normalization),
    };
    let input_size = uniform_input_size(&loaded.images)?;
    let head = match loaded.manifest.task {
        TaskKind::Classification => Head::Softmax {
            classes: loaded.manifest.class_count.unwrap_or(2),
        },
        TaskKind::Regression => Head::Linear,
    };
    let arch = ArchSpec::default_for(input_size, head);
    let model = init_model(&arch, cfg.seed)?;
    let (trained, epoch_loss) = train(&model, &loaded.manifest, &loaded.images, &cfg)?;
    let train_accuracy = match loaded.manifest.task {
        TaskKind::Classification => Some(dataset_accuracy(
            &trained,
            &loaded.manifest,
            &loaded.images,
        )?),
        TaskKind::Regression => None,
    };

    fs::create_dir_all(&args.out).map_err(|source| CliError::Io {
        path: args.out.clone(),
        source,
    })?;
    save_checkpoint(&args.out.join("model.ckpt"), &trained)?;
    let echo = TrainEcho {
        data: args.data.display().to_string(),
        arch: &arch,
        config: &cfg,
        epoch_loss: &epoch_loss,
        train_accuracy,
    };
    write_file(
        &args.out.join("train_config.json"),
        serde_json::to_string_pretty(&echo).expect("echo serializes").as_bytes(),
    )?;
    match train_accuracy {
        Some(acc) => println!(
            "trained {} epochs, final loss {:.4}, train accuracy {:.3}",
            cfg.epochs,
            epoch_loss.last().copied().unwrap_or(f64::NAN),
            acc
        ),
        None => println!(
            "trained {} epochs, final loss {:.4}",
            cfg.epochs,
            epoch_loss.last().copied().unwrap_or(f64::NAN)
        ),
    }
    Ok(ExitCode::SUCCESS)
}

fn dataset_accuracy(
    model: &PrototypeModel,
    manifest: &DatasetManifest,
    images: &[ImageSlice],
) -> Result<f64, CliError> {
    use auditlens_core::prototype::forward;
    let mut correct = 0usize;
    for (entry, image) in manifest.entries.iter().zip(images) {
        let plane = model.input_plane(image);
        let pred = forward(model, &plane)?;
        if pred.class() == Some(entry.class()) {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len().max(1) as f64)
}

// -------------------------------------------------------------- audit

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with operator-supplied regions: [{"label", "region"}].
    #[arg(long)]
    extra_regions: Option<PathBuf>,
    /// Write an attribution preview PGM for each flagged image.
    #[arg(long)]
    emit_overlays: bool,
}

fn cmd_audit(
    args: AuditArgs,
    mut cfg: AuditConfig,
    workers: Option<usize>,
) -> Result<ExitCode, CliError> {
    if let Some(workers) = workers {
        cfg.workers = workers;
    }
    if let Some(path) = &args.extra_regions {
        let text = read_file(path)?;
        let regions: Vec<ExtraRegion> = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.extra_regions.extend(regions);
    }
    let loaded = load_dataset(&args.data)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let model = load_checkpoint(&args.model)?;
    let report = audit_dataset(
        &model,
        &loaded.manifest,
        &loaded.images,
        &cfg,
        &args.data.display().to_string(),
        &args.model.display().to_string(),
    )?;
    write_file(&args.out.join("report.json"), report.to_json().as_bytes())?;
    if args.emit_overlays {
        emit_overlays(&args.out, &model, &loaded, &report)?;
    }
    let flagged = report
        .findings
        .iter()
        .filter(|f| f.severity >= report.config.s_flag)
        .count();
    println!(
        "audited {} images: {} findings ({} flagged), {} errors",
        report.images.len(),
        report.findings.len(),
        flagged,
        report.errors.len()
    );
    if report.has_flagged_findings() {
        Ok(ExitCode::from(2))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}

/// Attribution previews for flagged images, recomputed with the exact
/// configuration echoed in the report.
fn emit_overlays(
    out: &Path,
    model: &PrototypeModel,
    loaded: &auditlens_core::corpus::LoadedDataset,
    report: &AuditReport,
) -> Result<(), CliError> {
    use auditlens_core::corpus::write_pgm;
    let mut flagged: Vec<&str> = report
        .findings
        .iter()
        .filter(|f| f.severity >= report.config.s_flag)
        .map(|f| f.image.as_str())
        .collect();
    flagged.sort();
    flagged.dedup();
    for id in flagged {
        let Some(image) = loaded.images.iter().find(|i| i.id == id) else {
            continue;
        };
        let plane = model.input_plane(image);
        let target = predicted_target(model, &plane).map_err(auditlens_core::audit::AuditError::from)?;
        let map = occlusion_map(model, id, &plane, &report.config.occlusion, target)
            .map_err(auditlens_core::audit::AuditError::from)?;
        let preview = preview_pgm(&map);
        write_file(
            &out.join("overlays").join(format!("{id}.pgm")),
            &write_pgm(&preview),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------- remediate

#[derive(Args)]
struct RemediateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Audit report to plan from.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write the plan JSON and stop without touching the dataset.
    #[arg(long)]
    dry_run: bool,
}

/// Provenance timestamps honor SOURCE_DATE_EPOCH for reproducible runs.
fn resolve_timestamp() -> u64 {
    if let Ok(text) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(v) = text.trim().parse::<u64>() {
            return v;
        }
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn cmd_remediate(args: RemediateArgs, policy: RemediationPolicy) -> Result<ExitCode, CliError> {
    let report = AuditReport::from_json(&read_file(&args.report)?)?;
    let plan = plan_remediation(&report, &policy)?;
    write_file(&args.out.join("plan.json"), plan.to_json().as_bytes())?;
    if args.dry_run {
        println!(
            "planned {} action(s) for {}; dry run, dataset untouched",
            plan.actions.len(),
            plan.dataset
        );
        return Ok(ExitCode::SUCCESS);
    }
    let loaded = load_dataset(&args.data)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let (manifest, images, log) =
        apply_remediation(&plan, &loaded.manifest, &loaded.images, resolve_timestamp())?;
    save_dataset(&args.out, &manifest, &images)?;
    write_file(&args.out.join("provenance.jsonl"), log.to_jsonl().as_bytes())?;
    println!(
        "applied {} action(s); {} images remain in {}",
        log.records.len(),
        images.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

// -------------------------------------------------------------- verify

#[derive(Args)]
struct VerifyArgs {
    /// Baseline audit report.
    #[arg(long)]
    before: PathBuf,
    /// Re-audit report after remediation.
    #[arg(long)]
    after: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, CliError> {
    let before = AuditReport::from_json(&read_file(&args.before)?)?;
    let after = AuditReport::from_json(&read_file(&args.after)?)?;
    let verification = verify_remediation(&before, &after)?;
    write_file(
        &args.out.join("verification.json"),
        verification.to_json().as_bytes(),
    )?;
    println!("verdict: {:?}", verification.verdict);
    Ok(match verification.verdict {
        Verdict::Improved | Verdict::Unchanged => ExitCode::SUCCESS,
        Verdict::Regressed => ExitCode::from(2),
    })
}
