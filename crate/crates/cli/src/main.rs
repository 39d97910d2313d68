mod manifest;
mod scans;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use ribeval::classify::{build_confusion, ConfusionMatrix};
use ribeval::detect::{froc, match_proposals, MatchResult, DEFAULT_FP_LEVELS, DEFAULT_IOU_THRESHOLD};
use ribeval::fusion::gradcheck::{self, GradCheckReport};
use ribeval::fusion::Pooling;
use ribeval::io::{load_volume, save_metadata, save_raw_labels};
use ribeval::labeling::Connectivity;
use ribeval::pipeline::{
    bone_binarize, extract_proposals, sample_points, tile_windows, windows_from_mask, ProposalParams,
    ScoredProposal, WindowPlan, BONE_THRESHOLD_HU, DEFAULT_BIN_THRESHOLD, DEFAULT_MIN_VOXELS, DEFAULT_POINT_COUNT,
    DEFAULT_STRIDE, DEFAULT_WINDOW,
};
use ribeval::report::{ClassificationReport, DetectionReport};
use ribeval::{Dims, VolumeKind};
use serde::Serialize;

use manifest::{ManifestBuilder, WithManifest};
use scans::InputFault;

#[derive(Parser)]
#[command(name = "ribeval", version, about = "Rib-fracture detection and classification evaluation")]
struct Cli {
    /// Worker threads for per-scan work (default: all cores).
    #[arg(long, global = true, env = "RIBEVAL_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// FROC detection evaluation over paired scans.
    EvalDet(EvalArgs),
    /// Detection-aware classification (confusion matrix and F1).
    EvalCls(ClsArgs),
    /// Probability map to scored detection proposals.
    Pipeline(PipelineArgs),
    /// Sample bone points from a CT volume.
    Points(PointsArgs),
    /// Plan sliding windows over a volume or a mask.
    Tile(TileArgs),
    /// Finite-difference check of the fusion kernel's gradients.
    FuseCheck(FuseCheckArgs),
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    s.parse::<u32>()
        .ok()
        .and_then(Connectivity::from_number)
        .ok_or_else(|| format!("connectivity must be 6 or 26, got {s}"))
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Directory with `<scan>_pred.{nii,nii.gz,json}` and `<scan>_pred.csv`.
    #[arg(long)]
    pred: PathBuf,
    /// Directory with `<scan>_gt.{nii,nii.gz,json}` and optional `<scan>_gt.csv`.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou_threshold: f64,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FP_LEVELS.to_vec())]
    fp_levels: Vec<f64>,
    /// Connectivity used when the inputs were labelled; recorded in reports.
    #[arg(long, default_value = "26", value_parser = parse_connectivity)]
    connectivity: Connectivity,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ClsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    eval: EvalArgs,
    /// Proposals below this confidence are ignored.
    #[arg(long, default_value_t = 0.0)]
    conf_threshold: f64,
}

#[derive(Args, Serialize)]
struct PipelineArgs {
    /// Probability volume.
    #[arg(long)]
    prob: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BIN_THRESHOLD)]
    bin_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_VOXELS)]
    min_voxels: u64,
    /// Binary mask whose voxels can never be part of a proposal.
    #[arg(long)]
    exclusion: Option<PathBuf>,
    #[arg(long, default_value = "26", value_parser = parse_connectivity)]
    connectivity: Connectivity,
    /// Output scan stem (default: input name without extension and `_prob`).
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PointsArgs {
    /// CT volume in Hounsfield units.
    #[arg(long)]
    ct: PathBuf,
    #[arg(long, default_value_t = BONE_THRESHOLD_HU)]
    threshold_hu: f64,
    #[arg(long, default_value_t = DEFAULT_POINT_COUNT)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TileArgs {
    /// Volume size: one value for a cube or `X,Y,Z`.
    #[arg(long, value_delimiter = ',', num_args = 1..=3, conflicts_with_all = ["volume", "mask"])]
    dim: Option<Vec<usize>>,
    /// Take the size from this volume.
    #[arg(long, conflicts_with = "mask")]
    volume: Option<PathBuf>,
    /// Cover the foreground of this binary mask instead of tiling.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    stride: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PoolingChoice {
    Average,
    Max,
    Both,
}

#[derive(Args, Serialize)]
struct FuseCheckArgs {
    #[arg(long, default_value_t = 50)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed_start: u64,
    #[arg(long, value_enum, default_value_t = PoolingChoice::Both)]
    pooling: PoolingChoice,
    #[arg(long)]
    out: PathBuf,
}

fn write_json<T: Serialize>(dir: &Path, name: &str, report: &T, manifest: ManifestBuilder) -> Result<PathBuf> {
    let doc = WithManifest {
        report,
        manifest: manifest.finish()?,
    };
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Loads and matches every scan pair on the worker pool. Results come back
/// in stem order; the first failing stem (in that order) is reported.
fn match_all(
    eval: &EvalArgs,
    manifest: &mut ManifestBuilder,
    require_classes: bool,
) -> Result<Vec<(MatchResult, scans::LoadedScan, scans::LoadedScan)>> {
    let pairs = scans::pair(&eval.pred, &eval.gt)?;
    for p in &pairs {
        for f in p.pred.inputs().iter().chain(&p.gt.inputs()) {
            manifest.input(f);
        }
    }
    pairs
        .par_iter()
        .map(|p| {
            let pred = scans::load(&p.stem, &p.pred, true)?;
            let gt = scans::load(&p.stem, &p.gt, require_classes)?;
            let m = match_proposals(&p.stem, &pred.labels, &pred.confidences(), &gt.labels, eval.iou_threshold)
                .with_context(|| format!("scan {}", p.stem))?;
            Ok((m, pred, gt))
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect()
}

fn eval_det(args: &EvalArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("eval-det", args)?;
    let matched = match_all(args, &mut manifest, false)?;
    let results: Vec<MatchResult> = matched.into_iter().map(|(m, _, _)| m).collect();
    let report = DetectionReport::build(&results, &args.fp_levels, args.connectivity)?;
    create_out(&args.out)?;
    let curve = froc(&results, &args.fp_levels)?;
    let csv = args.out.join("froc.csv");
    std::fs::write(&csv, curve.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let path = write_json(&args.out, "detection.json", &report, manifest)?;
    println!(
        "{} scans, {} instances: avg sensitivity {:.4}, max sensitivity {:.4}, avg FP {:.3} -> {}",
        report.num_scans,
        report.total_gt,
        report.avg_sensitivity,
        report.max_sensitivity,
        report.avg_fp,
        path.display()
    );
    Ok(())
}

fn eval_cls(args: &ClsArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("eval-cls", args)?;
    let matched = match_all(&args.eval, &mut manifest, true)?;
    let mut matrix = ConfusionMatrix::default();
    for (m, pred, gt) in &matched {
        matrix += build_confusion(m, &pred.classes(), &gt.classes(), args.conf_threshold)
            .with_context(|| format!("scan {}", m.scan_id))?;
    }
    let report = ClassificationReport::new(matrix, args.conf_threshold, args.eval.iou_threshold, args.eval.connectivity);
    create_out(&args.eval.out)?;
    let path = write_json(&args.eval.out, "classification.json", &report, manifest)?;
    println!(
        "macro F1: overall {:.4}, target-aware {:.4}, prediction-aware {:.4} -> {}",
        report.f1.overall.macro_f1,
        report.f1.target_aware.macro_f1,
        report.f1.prediction_aware.macro_f1,
        path.display()
    );
    Ok(())
}

fn scan_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let base = [".nii.gz", ".nii", ".json", ".bin"]
        .iter()
        .find_map(|s| name.strip_suffix(s))
        .unwrap_or(&name);
    base.strip_suffix("_prob").unwrap_or(base).to_string()
}

#[derive(Serialize)]
struct PipelineReport<'a> {
    labels: PathBuf,
    metadata: PathBuf,
    proposals: &'a [ScoredProposal],
}

fn pipeline(args: &PipelineArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("pipeline", args)?;
    manifest.input(&args.prob);
    let prob = load_volume(&args.prob, Some(VolumeKind::Probability)).with_context(|| args.prob.display().to_string())?;
    let exclusion = match &args.exclusion {
        Some(p) => {
            manifest.input(p);
            Some(load_volume(p, Some(VolumeKind::Binary)).with_context(|| p.display().to_string())?)
        }
        None => None,
    };
    let params = ProposalParams {
        bin_threshold: args.bin_threshold,
        min_voxels: args.min_voxels,
        connectivity: args.connectivity,
    };
    let proposals = extract_proposals(&prob, &params, exclusion.as_ref())?;
    create_out(&args.out)?;
    let stem = args.name.clone().unwrap_or_else(|| scan_stem(&args.prob));
    let labels = args.out.join(format!("{stem}_pred.json"));
    let metadata = args.out.join(format!("{stem}_pred.csv"));
    save_raw_labels(&proposals.labels, &labels)?;
    save_metadata(&proposals.metadata(), &metadata)?;
    let report = PipelineReport {
        labels: labels.clone(),
        metadata,
        proposals: &proposals.proposals,
    };
    write_json(&args.out, "pipeline.json", &report, manifest)?;
    println!("{} proposals -> {}", proposals.proposals.len(), labels.display());
    Ok(())
}

#[derive(Serialize)]
struct PointsReport {
    points: PathBuf,
    num_points: usize,
    foreground_voxels: usize,
}

fn points(args: &PointsArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("points", args)?;
    manifest.input(&args.ct);
    let ct = load_volume(&args.ct, Some(VolumeKind::IntensityHu)).with_context(|| args.ct.display().to_string())?;
    let bone = bone_binarize(&ct, args.threshold_hu)?;
    let cloud = sample_points(&bone, args.count, args.seed)?;
    create_out(&args.out)?;
    let csv = args.out.join("points.csv");
    std::fs::write(&csv, cloud.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let report = PointsReport {
        points: csv.clone(),
        num_points: cloud.len(),
        foreground_voxels: bone.count_nonzero(),
    };
    write_json(&args.out, "points.json", &report, manifest)?;
    println!("{} points -> {}", cloud.len(), csv.display());
    Ok(())
}

#[derive(Serialize)]
struct TileReport<'a> {
    mode: &'static str,
    dims: Dims,
    #[serde(flatten)]
    plan: &'a WindowPlan,
}

fn tile(args: &TileArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("tile", args)?;
    let (mode, dims, plan) = if let Some(mask) = &args.mask {
        manifest.input(mask);
        let m = load_volume(mask, Some(VolumeKind::Binary)).with_context(|| mask.display().to_string())?;
        ("mask", m.dims(), windows_from_mask(&m, args.window)?)
    } else {
        let dims = match (&args.dim, &args.volume) {
            (Some(d), _) => match d.as_slice() {
                [n] => Dims::cube(*n)?,
                [x, y, z] => Dims::new(*x, *y, *z)?,
                _ => bail!(InputFault("--dim takes one value or three".into())),
            },
            (None, Some(v)) => {
                manifest.input(v);
                load_volume(v, None).with_context(|| v.display().to_string())?.dims()
            }
            (None, None) => bail!(InputFault("one of --dim, --volume, or --mask is required".into())),
        };
        ("grid", dims, tile_windows(dims, args.window, args.stride)?)
    };
    create_out(&args.out)?;
    let report = TileReport { mode, dims, plan: &plan };
    let path = write_json(&args.out, "windows.json", &report, manifest)?;
    println!("{} windows over {dims} -> {}", plan.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct FuseCheckReport {
    passed: bool,
    rel_tolerance: f64,
    conservation_tolerance: f64,
    fd_step: f64,
    max_rel_error: f64,
    checks: Vec<GradCheckReport>,
}

/// Returns whether every check passed.
fn fuse_check(args: &FuseCheckArgs) -> Result<bool> {
    let manifest = ManifestBuilder::new("fuse-check", args)?;
    let poolings: &[Pooling] = match args.pooling {
        PoolingChoice::Average => &[Pooling::Average],
        PoolingChoice::Max => &[Pooling::Max],
        PoolingChoice::Both => &[Pooling::Average, Pooling::Max],
    };
    let jobs: Vec<(u64, Pooling)> = (args.seed_start..args.seed_start + args.seeds)
        .flat_map(|s| poolings.iter().map(move |p| (s, *p)))
        .collect();
    let checks = jobs
        .par_iter()
        .map(|(s, p)| gradcheck::check(*s, *p))
        .collect::<ribeval::Result<Vec<_>>>()?;
    let report = FuseCheckReport {
        passed: checks.iter().all(|c| c.passed),
        rel_tolerance: gradcheck::REL_TOLERANCE,
        conservation_tolerance: gradcheck::CONSERVATION_TOLERANCE,
        fd_step: gradcheck::FD_STEP,
        max_rel_error: checks
            .iter()
            .map(|c| c.max_rel_error.max(c.directional_max_rel_error))
            .fold(0.0, f64::max),
        checks,
    };
    create_out(&args.out)?;
    let path = write_json(&args.out, "fuse_check.json", &report, manifest)?;
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    println!(
        "{} checks, {failed} failed, max relative error {:.2e} -> {}",
        report.checks.len(),
        report.max_rel_error,
        path.display()
    );
    Ok(report.passed)
}

fn is_input_fault(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        cause.downcast_ref::<InputFault>().is_some()
            || cause.downcast_ref::<ribeval::Error>().is_some_and(|e| e.is_input_fault())
    })
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::EvalDet(a) => eval_det(a).map(|_| true),
        Command::EvalCls(a) => eval_cls(a).map(|_| true),
        Command::Pipeline(a) => pipeline(a).map(|_| true),
        Command::Points(a) => points(a).map(|_| true),
        Command::Tile(a) => tile(a).map(|_| true),
        Command::FuseCheck(a) => fuse_check(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_input_fault(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
