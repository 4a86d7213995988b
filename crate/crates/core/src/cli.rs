//! Command-line front end. Exit codes: 0 success, 1 I/O failure,
//! 2 usage or validation error, 3 numeric failure.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, load_pair, save_seg, save_unc};
use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate_setting, filtering_csv, threshold_decision, Confusion, Decision, PerImage, Report, ScoredImage, SettingResult, Tables};
use crate::labels::LabelMap;
use crate::pipeline::{infer_crops, labels_to_frame, prepare_crops, Detector};
use crate::segnet::{count_flops, train_seg};
use crate::synthgen::{generate_dataset, read_dataset, read_pgm, write_dataset, write_pgm, CorruptionKind, GenSpec, Sample};
use crate::uncertainty::{head_flops, landscape_csv, landscape_grid, train_unc, LossKind, UncArch};

pub const THREADS_ENV: &str = "EYESEG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "eyeseg", version, about = "Uncertainty-aware closed-set eye segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Gen(GenArgs),
    /// Train the segmentation network.
    TrainSeg(TrainSegArgs),
    /// Train the uncertainty head on a frozen segmentation checkpoint.
    TrainUnc(TrainUncArgs),
    /// Segment and score every frame of a dataset.
    Infer(InferArgs),
    /// Compute metrics and filtering tables from inference outputs.
    Eval(EvalArgs),
    /// Emit the two-variance loss landscape as CSV.
    Landscape(LandscapeArgs),
    /// Print FLOPs of the configured networks.
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated corruption kinds (blur, occlusion, domain_shift), or "none".
    #[arg(long, default_value = "none")]
    pub corruptions: String,
    /// Severity range "LO,HI" within [0, 1].
    #[arg(long, default_value = "0,1")]
    pub severities: String,
    /// Fraction of samples left clean when corruptions are requested.
    #[arg(long, default_value_t = 0.0)]
    pub clean_fraction: f64,
    #[arg(long, default_value_t = crate::synthgen::DEFAULT_FRAME_HEIGHT)]
    pub height: usize,
    #[arg(long, default_value_t = crate::synthgen::DEFAULT_FRAME_WIDTH)]
    pub width: usize,
}

#[derive(Debug, Args)]
pub struct TrainSegArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Box source for training crops; defaults to the config's `train_detector`.
    #[arg(long)]
    pub detector: Option<Detector>,
}

#[derive(Debug, Args)]
pub struct TrainUncArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seg: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "surrogate")]
    pub loss: LossKind,
    #[arg(long)]
    pub detector: Option<Detector>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seg: PathBuf,
    #[arg(long)]
    pub unc: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "gt-jitter")]
    pub detector: Detector,
    /// Supplies seed, jitter and tau; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "1,2,3,4,5")]
    pub pcts: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Extra inference output evaluated side by side, as NAME=DIR.
    #[arg(long)]
    pub compare: Vec<String>,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub v: String,
    #[arg(long, allow_hyphen_values = true)]
    pub range: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub config: PathBuf,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 1,
        Error::NonFinite(_) | Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| invalid(format!("{}: '{}' is not a number", what, p)))
        })
        .collect()
}

fn parse_pair(s: &str, what: &str) -> Result<(f64, f64)> {
    match parse_floats(s, what)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(invalid(format!("{} expects two comma-separated numbers, got '{}'", what, s))),
    }
}

fn threads_from_env() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| invalid(format!("{} must be a positive integer, got '{}'", THREADS_ENV, v)))?;
        if n == 0 {
            return Err(invalid(format!("{} must be positive", THREADS_ENV)));
        }
        crate::par::set_threads(n);
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match threads_from_env().and_then(|_| run(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::TrainSeg(a) => train_seg_cmd(a),
        Command::TrainUnc(a) => train_unc_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Landscape(a) => landscape(a),
        Command::Flops(a) => flops(a),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let corruptions: Vec<CorruptionKind> = match a.corruptions.trim() {
        "" | "none" => Vec::new(),
        list => list.split(',').map(|k| k.trim().parse()).collect::<Result<_>>()?,
    };
    let (lo, hi) = parse_pair(&a.severities, "--severities")?;
    if a.height < 64 || a.width < 64 {
        return Err(invalid(format!("frame must be at least 64x64, got {}x{}", a.height, a.width)));
    }
    let spec = GenSpec {
        height: a.height,
        width: a.width,
        corruptions,
        clean_fraction: a.clean_fraction,
        severities: (lo, hi),
    };
    spec.validate()?;
    let samples = generate_dataset(a.seed, a.n, &spec)?;
    write_dataset(&samples, &a.out)?;
    println!("{}", dataset_summary(&samples, &a.out));
    Ok(())
}

fn dataset_summary(samples: &[Sample], dir: &Path) -> String {
    let mut by_kind: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for s in samples {
        let k = s.corruption.map_or("none", |k| k.as_str());
        let e = by_kind.entry(k).or_insert((0, f64::INFINITY, f64::NEG_INFINITY));
        e.0 += 1;
        e.1 = e.1.min(s.severity);
        e.2 = e.2.max(s.severity);
    }
    let mut out = format!("wrote {} samples to {}", samples.len(), dir.display());
    for (k, (n, lo, hi)) in by_kind {
        let _ = write!(out, "\n  {:<12} {:>6}  severity [{:.3}, {:.3}]", k, n, lo, hi);
    }
    out
}

fn write_csv(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let samples = read_dataset(dir)?;
    if samples.is_empty() {
        return Err(invalid(format!("dataset {} is empty", dir.display())));
    }
    Ok(samples)
}

fn train_seg_cmd(a: TrainSegArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let samples = load_dataset(&a.data)?;
    let detector = a.detector.unwrap_or(cfg.train_detector);
    let crops = prepare_crops(&samples, detector, cfg.seed, cfg.max_shift, cfg.crop[0], cfg.crop[1])?;
    let (model, log) = train_seg(&crops, &cfg.seg_config())?;
    save_seg(&a.out, &model, &cfg.content_hash())?;
    let mut csv = String::from("epoch,loss,miou\n");
    for l in &log {
        let _ = writeln!(csv, "{},{},{}", l.epoch, l.loss, l.miou);
        eprintln!("epoch {:>3}  loss {:.4}  miou {:.4}", l.epoch, l.loss, l.miou);
    }
    write_csv(&a.out.join("train_log.csv"), &csv)
}

fn train_unc_cmd(a: TrainUncArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let (seg, _) = checkpoint::load_seg(&a.seg)?;
    if seg.arch != cfg.seg_config().arch() {
        return Err(Error::Incompatible(
            "segmentation checkpoint does not match the configured architecture".into(),
        ));
    }
    let samples = load_dataset(&a.data)?;
    let detector = a.detector.unwrap_or(cfg.train_detector);
    let crops = prepare_crops(&samples, detector, cfg.seed, cfg.max_shift, cfg.crop[0], cfg.crop[1])?;
    let (head, log) = train_unc(&crops, &seg, a.loss, &cfg.unc_config())?;
    save_unc(&a.out, &head, &cfg.content_hash())?;
    let mut csv = String::from("epoch,loss,target_error\n");
    for l in &log {
        let _ = writeln!(csv, "{},{},{}", l.epoch, l.loss, l.target_error);
        eprintln!("epoch {:>3}  loss {:.6}  target error {:.6}", l.epoch, l.loss, l.target_error);
    }
    write_csv(&a.out.join("train_log.csv"), &csv)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RunInfo {
    config_hash: String,
    arch_hash: String,
    detector: Detector,
    tau: Option<f64>,
}

fn infer(a: InferArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let (seg, head) = load_pair(&a.seg, &a.unc)?;
    let samples = load_dataset(&a.data)?;
    let crops = prepare_crops(&samples, a.detector, cfg.seed, cfg.max_shift, seg.arch.height, seg.arch.width)?;
    let preds = infer_crops(&seg, &head, &crops)?;

    fs::create_dir_all(a.out.join("pred"))?;
    let tau = cfg.tau.unwrap_or(f64::INFINITY);
    let mut scores = String::from("sample_id,s_unc,accept\n");
    let mut boxes = String::from("sample_id,l,t,h,w\n");
    for (p, s) in preds.iter().zip(&samples) {
        let frame = labels_to_frame(&p.labels, &p.geometry, s.height(), s.width());
        write_pgm(&a.out.join("pred").join(format!("{}.pgm", p.sample_id)), frame.width, frame.height, &frame.data)?;
        let accept = threshold_decision(p.s_unc, tau) == Decision::Accept;
        let _ = writeln!(scores, "{},{},{}", p.sample_id, p.s_unc, accept);
        let b = p.geometry.bbox;
        let _ = writeln!(boxes, "{},{},{},{},{}", p.sample_id, b.l, b.t, b.h, b.w);
    }
    write_csv(&a.out.join("scores.csv"), &scores)?;
    write_csv(&a.out.join("crops.csv"), &boxes)?;
    let info = RunInfo {
        config_hash: cfg.content_hash(),
        arch_hash: checkpoint::arch_hash(&seg.arch),
        detector: a.detector,
        tau: cfg.tau,
    };
    let mut text = serde_json::to_string_pretty(&info)?;
    text.push('\n');
    fs::write(a.out.join("run.json"), text)?;
    eprintln!("scored {} frames into {}", preds.len(), a.out.display());
    Ok(())
}

fn read_scores(dir: &Path) -> Result<HashMap<String, f64>> {
    let path = dir.join("scores.csv");
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path)?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut parts = line.split(',');
        let (Some(id), Some(s)) = (parts.next(), parts.next()) else {
            return Err(Error::Format {
                what: path.display().to_string(),
                detail: format!("line {} has fewer than two fields", i + 1),
            });
        };
        let s: f64 = s.parse().map_err(|_| Error::Format {
            what: path.display().to_string(),
            detail: format!("line {}: bad score '{}'", i + 1, s),
        })?;
        out.insert(id.to_string(), s);
    }
    Ok(out)
}

/// Scored frame-space confusions for every sample of the dataset.
fn scored_images(pred_dir: &Path, samples: &[Sample]) -> Result<Vec<ScoredImage>> {
    let scores = read_scores(pred_dir)?;
    let missing: Vec<&str> = samples
        .iter()
        .filter(|s| !scores.contains_key(&s.sample_id) || !pred_path(pred_dir, &s.sample_id).is_file())
        .map(|s| s.sample_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(invalid(format!(
            "{} has no predictions for {} sample(s): {}",
            pred_dir.display(),
            missing.len(),
            missing.join(", ")
        )));
    }
    crate::par::try_map(samples, |s| {
        let (w, h, data) = read_pgm(&pred_path(pred_dir, &s.sample_id))?;
        let pred = LabelMap::new(h, w, data)?;
        pred.validate(&s.sample_id)?;
        Ok(ScoredImage {
            sample_id: s.sample_id.clone(),
            s_unc: scores[&s.sample_id],
            confusion: Confusion::from_maps(&pred, &s.labels)?,
        })
    })
}

fn pred_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("pred").join(format!("{}.pgm", id))
}

fn eval(a: EvalArgs) -> Result<()> {
    let pcts = parse_floats(&a.pcts, "--pcts")?;
    let samples = load_dataset(&a.data)?;
    let images = scored_images(&a.pred, &samples)?;
    let main = evaluate_setting(&images, &pcts)?;

    let mut ablations = BTreeMap::new();
    for spec in &a.compare {
        let (name, dir) = spec
            .split_once('=')
            .ok_or_else(|| invalid(format!("--compare expects NAME=DIR, got '{}'", spec)))?;
        let imgs = scored_images(Path::new(dir), &samples)?;
        ablations.insert(name.to_string(), evaluate_setting(&imgs, &pcts)?);
    }

    let config_hash = fs::read_to_string(a.pred.join("run.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<RunInfo>(&t).ok())
        .map(|r| r.config_hash)
        .unwrap_or_default();
    let per_image = images
        .iter()
        .zip(&samples)
        .map(|(img, s)| PerImage {
            sample_id: img.sample_id.clone(),
            s_unc: img.s_unc,
            severity: s.severity,
            corruption: s.corruption.map_or("none", |k| k.as_str()).to_string(),
            metrics: img.confusion.metrics(),
        })
        .collect();
    let csv = filtering_csv(&main, &ablations);
    let SettingResult { overall, filtering } = main;
    let report = Report {
        config_hash,
        overall,
        per_image,
        tables: Tables { filtering, ablations },
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_csv(&a.out, &text)?;
    let csv_path = a.out.with_extension("filtering.csv");
    write_csv(&csv_path, &csv)?;
    print!("{}", csv);
    Ok(())
}

fn landscape(a: LandscapeArgs) -> Result<()> {
    let (v1, v2) = parse_pair(&a.v, "--v")?;
    let range = parse_pair(&a.range, "--range")?;
    let rows = landscape_grid([v1, v2], range, a.n)?;
    write_csv(&a.out, &landscape_csv(&rows))
}

fn flops(a: FlopsArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let arch = cfg.seg_config().arch();
    let seg = count_flops(&arch, true);
    let head = head_flops(&UncArch {
        seg: arch,
        head_width: cfg.head_width,
    });
    println!("segmentation (backbone + class head): {}", seg);
    println!("uncertainty head: {}", head);
    println!("total: {}", seg + head);
    Ok(())
}
