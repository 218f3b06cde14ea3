//! Command-line surface. Each subcommand reads its inputs, calls one library operation,
//! writes outputs atomically and prints a report.
//!
//! Exit codes: [`EXIT_OK`], [`EXIT_USAGE`] for bad arguments, [`EXIT_DATA`] for unreadable or
//! inconsistent data. Reports print one `key: value` line per field, or the same fields as
//! JSON with `--json`. Floating-point values are rounded to six significant digits.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::aggregate::{aggregate_features, AggregationConfig};
use crate::error::Error;
use crate::fit::{fit_scene, FitConfig, FitTarget};
use crate::geometry::select_target_views;
use crate::io::{
    read_cameras, read_feature_map, read_instance_mask, read_json, read_png_color, read_png_scalar, read_point_map,
    read_query_vector, read_scene, write_atomic, write_feature_map, write_png_color, write_png_scalar, write_scene,
    ScalarEncoding, ScenePaths,
};
use crate::losses::{
    depth_distill_loss, feature_cosine_loss, instance_contrastive_loss, photometric_loss, pose_distill_loss,
    total_loss, LossComponents, PoseEncoding, Sampling,
};
use crate::maps::{FeatureMap, InstanceMask, PointMap};
use crate::metrics::{psnr, segmentation_metrics, ssim};
use crate::model::{Camera, LossConfig, Scene};
use crate::query::{edit_scene, query_scene, EditOp, QueryTarget};
use crate::raster::{render, RenderOptions};
use crate::sparsify::{default_eps, hierarchical_sparsify};
use crate::synth::{synth_scene, write_synth, Preset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lgs", version, about = "Language-embedded Gaussian scene toolkit")]
pub struct Cli {
    /// Print the report as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Merge geometry Gaussians per voxel and build the semantic set.
    Sparsify(SparsifyArgs),
    /// Render one view.
    Render(RenderArgs),
    /// Choose target views covered by the context views.
    SelectViews(SelectArgs),
    /// Make instance features consistent across views.
    Aggregate(AggregateArgs),
    /// Evaluate the training objective on rendered and target maps.
    Loss(LossArgs),
    /// Optimize a scene against a dataset's target views.
    Fit(FitArgs),
    /// Score Gaussians against a query feature.
    Query(QueryArgs),
    /// Delete or extract queried content.
    Edit(EditArgs),
    /// Image and segmentation metrics.
    Eval(EvalArgs),
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// lattice, two-objects or textured-room.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SparsifyArgs {
    /// Input `*.geo.ply`.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Geometry voxel size (default: 1% of the scene diagonal).
    #[arg(long)]
    pub eps_geo: Option<f64>,
    /// Semantic voxel size (default: 4x the geometry size).
    #[arg(long)]
    pub eps_sem: Option<f64>,
    /// Output `*.geo.ply`; the semantic set goes to the matching `*.sem.ply`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Color,
    Depth,
    Feature,
    Relevance,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    #[arg(long, value_enum, default_value_t = RenderMode::Color)]
    pub mode: RenderMode,
    /// Query vector for relevance mode (raw little-endian f32).
    #[arg(long)]
    pub feature: Option<PathBuf>,
    /// PNG for color, depth and relevance; FMAP for feature.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Dataset directory with `cameras.json` and `points_{i}.pmap`.
    #[arg(long)]
    pub data: PathBuf,
    /// Context view indices, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub context: Vec<usize>,
    /// Coverage threshold; views with coverage strictly above it are selected.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Dataset directory with `points_{i}.pmap`, `feature_{i}.fmap` and `mask_{i}.imsk`.
    #[arg(long)]
    pub data: PathBuf,
    /// Voxel size of the cross-view pooling.
    #[arg(long)]
    pub eps: f64,
    #[arg(long, default_value_t = 1)]
    pub rounds: usize,
    /// Directory for the aggregated `feature_{i}.fmap`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Rendered color PNG.
    #[arg(long)]
    pub render: PathBuf,
    /// Target color PNG.
    #[arg(long)]
    pub target: PathBuf,
    /// Loss weights and hyperparameters (JSON); defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, requires = "target_depth")]
    pub render_depth: Option<PathBuf>,
    #[arg(long, requires = "render_depth")]
    pub target_depth: Option<PathBuf>,
    #[arg(long)]
    pub render_feature: Option<PathBuf>,
    #[arg(long, requires = "render_feature")]
    pub target_feature: Option<PathBuf>,
    /// Instance mask for the contrastive term (uses `--render-feature`).
    #[arg(long, requires = "render_feature")]
    pub mask: Option<PathBuf>,
    /// Predicted cameras for the pose term.
    #[arg(long, requires = "target_pose")]
    pub pose: Option<PathBuf>,
    #[arg(long, requires = "pose")]
    pub target_pose: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset directory with `cameras.json` and `render_{i}.png`.
    #[arg(long)]
    pub data: PathBuf,
    /// Starting scene (default: `<data>/scene_init.geo.ply`).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also supervise depth with `depth_{i}.png`.
    #[arg(long)]
    pub with_depth: bool,
    /// Also supervise features with `feature_{i}.fmap` and `mask_{i}.imsk`.
    #[arg(long)]
    pub with_features: bool,
    /// Output `*.geo.ply`.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration loss CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Query vector (raw little-endian f32).
    #[arg(long)]
    pub feature: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OpArg {
    Delete,
    Extract,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub feature: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, value_enum)]
    pub op: OpArg,
    /// Output `*.geo.ply`; a semantic set goes to the matching `*.sem.ply`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Metric {
    Psnr,
    Ssim,
    Miou,
    Macc,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    pub metrics: Vec<Metric>,
    /// Rendered color PNG (psnr, ssim).
    #[arg(long)]
    pub render: Option<PathBuf>,
    /// Ground-truth color PNG (psnr, ssim).
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Predicted instance mask (miou, macc).
    #[arg(long)]
    pub pred_mask: Option<PathBuf>,
    /// Ground-truth instance mask (miou, macc).
    #[arg(long)]
    pub gt_mask: Option<PathBuf>,
}

/// Why a command failed, and so which exit code it gets.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(e) => write!(f, "{e}"),
        }
    }
}

/// Argument values rejected by a library operation are usage errors.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => Failure::Usage(m),
            e => Failure::Data(e),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Errors while reading inputs are data errors whatever their kind.
fn load<T>(r: crate::Result<T>) -> Outcome<T> {
    r.map_err(Failure::Data)
}

fn usage(m: impl Into<String>) -> Failure {
    Failure::Usage(m.into())
}

/// Rounds to six significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig6).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_value),
        Value::Object(o) => o.values_mut().for_each(round_value),
        _ => {}
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) => u.to_string(),
            (_, Some(i), _) => i.to_string(),
            (_, _, Some(f)) => f.to_string(),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        Value::Null => "null".into(),
        other => other.to_string(),
    }
}

fn text_lines(prefix: &str, v: &Value, out: &mut Vec<String>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(o) => o.iter().for_each(|(k, x)| text_lines(&key(k), x, out)),
        Value::Array(a) if a.iter().all(|x| !x.is_object() && !x.is_array()) => {
            let items: Vec<String> = a.iter().map(scalar_text).collect();
            out.push(format!("{prefix}:{}{}", if items.is_empty() { "" } else { " " }, items.join(", ")));
        }
        Value::Array(a) => a.iter().enumerate().for_each(|(i, x)| text_lines(&format!("{prefix}[{i}]"), x, out)),
        x => out.push(format!("{prefix}: {}", scalar_text(x))),
    }
}

/// Report as printed: six significant digits, JSON or `key: value` lines.
pub fn format_report<T: Serialize>(report: &T, json: bool) -> String {
    let mut v = serde_json::to_value(report).expect("reports serialize");
    round_value(&mut v);
    if json {
        let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
        s.push('\n');
        s
    } else {
        let mut lines = Vec::new();
        text_lines("", &v, &mut lines);
        lines.join("\n") + "\n"
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(&cli.command) {
        Ok(report) => {
            let _ = write!(out, "{}", format_report(&report, cli.json));
            EXIT_OK
        }
        Err(f) => {
            let _ = writeln!(err, "error: {f}");
            f.code()
        }
    }
}

/// Runs one command and returns its report as a JSON value.
pub fn execute(cmd: &Command) -> Outcome<Value> {
    let v = match cmd {
        Command::Synth(a) => to_value(cmd_synth(a)?),
        Command::Sparsify(a) => to_value(cmd_sparsify(a)?),
        Command::Render(a) => to_value(cmd_render(a)?),
        Command::SelectViews(a) => to_value(cmd_select(a)?),
        Command::Aggregate(a) => to_value(cmd_aggregate(a)?),
        Command::Loss(a) => to_value(cmd_loss(a)?),
        Command::Fit(a) => to_value(cmd_fit(a)?),
        Command::Query(a) => to_value(cmd_query(a)?),
        Command::Edit(a) => to_value(cmd_edit(a)?),
        Command::Eval(a) => to_value(cmd_eval(a)?),
    };
    Ok(v)
}

fn to_value<T: Serialize>(r: T) -> Value {
    serde_json::to_value(r).expect("reports serialize")
}

fn cmd_synth(a: &SynthArgs) -> Outcome<crate::synth::SynthManifest> {
    let s = synth_scene(a.preset, a.seed)?;
    load(write_synth(&a.out, &s))?;
    load(read_json(&a.out.join("synth.json")))
}

#[derive(Debug, Serialize)]
pub struct SparsifyReport {
    pub input: usize,
    pub eps_geo: f64,
    pub eps_sem: f64,
    pub geo: usize,
    pub sem: usize,
}

fn sem_sibling(geo: &Path) -> Outcome<PathBuf> {
    ScenePaths::sem_sibling(geo).ok_or_else(|| usage(format!("output {} must end in .geo.ply", geo.display())))
}

fn load_scene(path: &Path) -> Outcome<Scene> {
    load(read_scene(&ScenePaths::from_geo(path)))
}

fn cmd_sparsify(a: &SparsifyArgs) -> Outcome<SparsifyReport> {
    let out_sem = a.out.as_deref().map(sem_sibling).transpose()?;
    let scene = load_scene(&a.input)?;
    let (dg, ds) = default_eps(&scene);
    let eps_geo = a.eps_geo.unwrap_or(dg);
    let eps_sem = a.eps_sem.unwrap_or(if a.eps_geo.is_some() { 4.0 * eps_geo } else { ds });
    let sparse = hierarchical_sparsify(&scene, eps_geo, eps_sem)?;
    if let Some(out) = &a.out {
        load(write_scene(
            &ScenePaths {
                geo: out.clone(),
                sem: out_sem,
            },
            &sparse,
        ))?;
    }
    Ok(SparsifyReport {
        input: scene.len(),
        eps_geo,
        eps_sem,
        geo: sparse.len(),
        sem: sparse.sem.as_ref().map_or(0, Vec::len),
    })
}

fn pick_view(cams: &[Camera], view: usize) -> Outcome<&Camera> {
    cams.get(view)
        .ok_or_else(|| usage(format!("view {view} out of range for {} cameras", cams.len())))
}

#[derive(Debug, Serialize)]
pub struct RenderReport {
    pub mode: RenderMode,
    pub view: usize,
    pub width: usize,
    pub height: usize,
    pub mean_alpha: f64,
}

fn cmd_render(a: &RenderArgs) -> Outcome<RenderReport> {
    if a.mode == RenderMode::Relevance && a.feature.is_none() {
        return Err(usage("relevance mode needs --feature"));
    }
    let scene = load_scene(&a.scene)?;
    let cams = load(read_cameras(&a.cameras))?;
    let cam = pick_view(&cams, a.view)?;
    let opts = RenderOptions {
        features: a.mode == RenderMode::Feature,
        ..Default::default()
    };
    let out = render(&scene, cam, &opts)?;
    match a.mode {
        RenderMode::Color => load(write_png_color(&a.out, &out.color))?,
        RenderMode::Depth => {
            let mut depth = out.depth.clone();
            for (d, al) in depth.data.iter_mut().zip(&out.alpha.data) {
                if *al <= 0.0 {
                    *d = f64::NAN;
                }
            }
            let max = depth.data.iter().filter(|d| d.is_finite()).fold(0.0f64, |m, d| m.max(*d));
            load(write_png_scalar(&a.out, &depth, ScalarEncoding::depth(max)))?;
        }
        RenderMode::Feature => {
            let f = out.feature.as_ref().expect("feature render requested");
            load(write_feature_map(&a.out, f))?;
        }
        RenderMode::Relevance => {
            let q = load(read_query_vector(a.feature.as_deref().expect("checked above")))?;
            let r = query_scene(&scene, &q, 0.0, Some(cam))?;
            let map = r.rendered_relevance.expect("camera given");
            load(write_png_scalar(&a.out, &map, ScalarEncoding::range(-1.0, 1.0)))?;
        }
    }
    let n = out.alpha.data.len().max(1) as f64;
    Ok(RenderReport {
        mode: a.mode,
        view: a.view,
        width: cam.width,
        height: cam.height,
        mean_alpha: out.alpha.data.iter().sum::<f64>() / n,
    })
}

fn dataset_views(dir: &Path) -> Outcome<Vec<Camera>> {
    load(read_cameras(&dir.join("cameras.json")))
}

fn per_view<T>(dir: &Path, n: usize, name: &str, f: fn(&Path) -> crate::Result<T>) -> Outcome<Vec<T>> {
    (0..n).map(|i| load(f(&dir.join(name.replace("{i}", &i.to_string()))))).collect()
}

#[derive(Debug, Serialize)]
pub struct SelectReport {
    pub context: Vec<usize>,
    pub tau: f64,
    pub coverage: Vec<f64>,
    pub selected: Vec<usize>,
}

fn cmd_select(a: &SelectArgs) -> Outcome<SelectReport> {
    let cams = dataset_views(&a.data)?;
    let points: Vec<PointMap> = per_view(&a.data, cams.len(), "points_{i}.pmap", read_point_map)?;
    let cfg = LossConfig {
        tau: a.tau.unwrap_or(LossConfig::default().tau),
        ..Default::default()
    };
    cfg.validate()?;
    let r = select_target_views(&points, &cams, &a.context, &cfg)?;
    Ok(SelectReport {
        context: a.context.clone(),
        tau: cfg.tau,
        coverage: r.coverage,
        selected: r.selected,
    })
}

#[derive(Debug, Serialize)]
pub struct AggregateReport {
    pub views: usize,
    pub dim: usize,
    pub eps: f64,
    pub rounds: usize,
    /// Largest absolute change of any feature entry.
    pub max_change: f64,
}

fn cmd_aggregate(a: &AggregateArgs) -> Outcome<AggregateReport> {
    let cfg = AggregationConfig {
        voxel_eps: a.eps,
        rounds: a.rounds,
    };
    cfg.validate()?;
    let cams = dataset_views(&a.data)?;
    let n = cams.len();
    let points: Vec<PointMap> = per_view(&a.data, n, "points_{i}.pmap", read_point_map)?;
    let feats: Vec<FeatureMap> = per_view(&a.data, n, "feature_{i}.fmap", read_feature_map)?;
    let masks: Vec<InstanceMask> = per_view(&a.data, n, "mask_{i}.imsk", read_instance_mask)?;
    let agg = aggregate_features(&points, &feats, &masks, &cfg)?;
    load(std::fs::create_dir_all(&a.out).map_err(Error::from))?;
    let mut max_change = 0.0f64;
    for (i, (before, after)) in feats.iter().zip(&agg).enumerate() {
        for (x, y) in before.data.iter().zip(&after.data) {
            max_change = max_change.max((x - y).abs());
        }
        load(write_feature_map(&a.out.join(format!("feature_{i}.fmap")), after))?;
    }
    Ok(AggregateReport {
        views: n,
        dim: feats.first().map_or(0, |f| f.dim),
        eps: a.eps,
        rounds: a.rounds,
        max_change,
    })
}

fn load_loss_config(path: Option<&Path>) -> Outcome<LossConfig> {
    let cfg = match path {
        Some(p) => load(read_json::<LossConfig>(p))?,
        None => LossConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_loss(a: &LossArgs) -> Outcome<crate::losses::LossReport> {
    let cfg = load_loss_config(a.config.as_deref())?;
    let rendered = load(read_png_color(&a.render))?;
    let target = load(read_png_color(&a.target))?;
    let mut c = LossComponents {
        photo: photometric_loss(&rendered, &target, cfg.eta).map_err(Failure::Data)?,
        ..Default::default()
    };
    if let (Some(r), Some(t)) = (&a.render_depth, &a.target_depth) {
        let (r, t) = (load(read_png_scalar(r))?, load(read_png_scalar(t))?);
        let valid = crate::maps::BinaryMask {
            width: t.width,
            height: t.height,
            data: r.data.iter().zip(&t.data).map(|(a, b)| a.is_finite() && b.is_finite()).collect(),
        };
        c.depth_distill = depth_distill_loss(&r, &t, Some(&valid)).map_err(Failure::Data)?;
    }
    let feat = a.render_feature.as_deref().map(read_feature_map).transpose().map_err(Failure::Data)?;
    if let (Some(f), Some(t)) = (&feat, &a.target_feature) {
        let t = load(read_feature_map(t))?;
        c.feat = feature_cosine_loss(f, &t, None).map_err(Failure::Data)?;
    }
    if let (Some(f), Some(m)) = (&feat, &a.mask) {
        let m = load(read_instance_mask(m))?;
        c.inst = instance_contrastive_loss(f, &m, cfg.alpha, Sampling::default()).map_err(Failure::Data)?;
    }
    if let (Some(p), Some(t)) = (&a.pose, &a.target_pose) {
        let (p, t) = (load(read_cameras(p))?, load(read_cameras(t))?);
        if p.len() != t.len() || p.is_empty() {
            return Err(Failure::Data(Error::dims(format!("{} predicted vs {} target poses", p.len(), t.len()))));
        }
        let mut sum = 0.0;
        for (a, b) in p.iter().zip(&t) {
            let (ea, eb) = (load(PoseEncoding::from_camera(a))?, load(PoseEncoding::from_camera(b))?);
            sum += pose_distill_loss(&ea, &eb, cfg.huber_delta);
        }
        c.pose_distill = sum / p.len() as f64;
    }
    Ok(total_loss(&c, &cfg))
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub iterations: usize,
    pub seed: u64,
    pub initial_total: f64,
    pub final_total: f64,
    pub final_psnr: Vec<f64>,
    pub mean_psnr: f64,
}

fn cmd_fit(a: &FitArgs) -> Outcome<FitReport> {
    let cfg = FitConfig {
        iterations: a.iters,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate()?;
    let loss_cfg = load_loss_config(a.config.as_deref())?;
    let init_path = a.init.clone().unwrap_or_else(|| a.data.join("scene_init.geo.ply"));
    let init = load_scene(&init_path)?;
    let cams = dataset_views(&a.data)?;
    let n = cams.len();
    let images = per_view(&a.data, n, "render_{i}.png", read_png_color)?;
    let depths = if a.with_depth { Some(per_view(&a.data, n, "depth_{i}.png", read_png_scalar)?) } else { None };
    let (feats, masks) = if a.with_features {
        (
            Some(per_view(&a.data, n, "feature_{i}.fmap", read_feature_map)?),
            Some(per_view(&a.data, n, "mask_{i}.imsk", read_instance_mask)?),
        )
    } else {
        (None, None)
    };
    let targets: Vec<FitTarget> = cams
        .into_iter()
        .zip(images)
        .enumerate()
        .map(|(i, (camera, image))| FitTarget {
            camera,
            image,
            depth: depths.as_ref().map(|d| d[i].clone()),
            feature: feats.as_ref().map(|f| f[i].clone()),
            mask: masks.as_ref().map(|m| m[i].clone()),
        })
        .collect();
    let (scene, trace) = fit_scene(&init, &targets, &cfg, &loss_cfg).map_err(|e| match e {
        Error::InvalidArgument(m) => Failure::Usage(m),
        e => Failure::Data(e),
    })?;
    let out_sem = sem_sibling(&a.out).ok().filter(|_| scene.sem.is_some());
    load(write_scene(
        &ScenePaths {
            geo: a.out.clone(),
            sem: out_sem,
        },
        &scene,
    ))?;
    if let Some(p) = &a.trace {
        load(write_atomic(p, trace.to_csv().as_bytes()))?;
    }
    Ok(FitReport {
        iterations: trace.reports.len(),
        seed: a.seed,
        initial_total: trace.reports.first().map_or(f64::NAN, |r| r.total),
        final_total: trace.reports.last().map_or(f64::NAN, |r| r.total),
        mean_psnr: trace.mean_final_psnr(),
        final_psnr: trace.final_psnr,
    })
}

#[derive(Debug, Serialize)]
pub struct QueryReport {
    pub target: QueryTarget,
    pub candidates: usize,
    pub threshold: f64,
    pub max_relevance: f64,
    pub selected_count: usize,
    pub selected: Vec<usize>,
}

fn cmd_query(a: &QueryArgs) -> Outcome<QueryReport> {
    let scene = load_scene(&a.scene)?;
    let q = load(read_query_vector(&a.feature))?;
    let r = query_scene(&scene, &q, a.threshold, None)?;
    Ok(QueryReport {
        target: r.target,
        candidates: r.relevance.len(),
        threshold: r.threshold,
        max_relevance: r.relevance.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        selected_count: r.selected.len(),
        selected: r.selected,
    })
}

#[derive(Debug, Serialize)]
pub struct EditReport {
    pub op: EditOp,
    pub geo_before: usize,
    pub geo_after: usize,
    pub sem_before: usize,
    pub sem_after: usize,
}

fn cmd_edit(a: &EditArgs) -> Outcome<EditReport> {
    let out_sem = sem_sibling(&a.out)?;
    let scene = load_scene(&a.scene)?;
    let q = load(read_query_vector(&a.feature))?;
    let op = match a.op {
        OpArg::Delete => EditOp::Delete,
        OpArg::Extract => EditOp::Extract,
    };
    let edited = edit_scene(&scene, &q, a.threshold, op)?;
    load(write_scene(
        &ScenePaths {
            geo: a.out.clone(),
            sem: Some(out_sem),
        },
        &edited,
    ))?;
    let sem_len = |s: &Scene| s.sem.as_ref().map_or(0, Vec::len);
    Ok(EditReport {
        op,
        geo_before: scene.len(),
        geo_after: edited.len(),
        sem_before: sem_len(&scene),
        sem_after: sem_len(&edited),
    })
}

fn cmd_eval(a: &EvalArgs) -> Outcome<BTreeMap<String, f64>> {
    let need_images = a.metrics.iter().any(|m| matches!(m, Metric::Psnr | Metric::Ssim));
    let need_masks = a.metrics.iter().any(|m| matches!(m, Metric::Miou | Metric::Macc));
    let images = if need_images {
        let (Some(r), Some(t)) = (&a.render, &a.target) else {
            return Err(usage("psnr and ssim need --render and --target"));
        };
        Some((load(read_png_color(r))?, load(read_png_color(t))?))
    } else {
        None
    };
    let seg = if need_masks {
        let (Some(p), Some(g)) = (&a.pred_mask, &a.gt_mask) else {
            return Err(usage("miou and macc need --pred-mask and --gt-mask"));
        };
        let (p, g) = (load(read_instance_mask(p))?, load(read_instance_mask(g))?);
        Some(segmentation_metrics(&p, &g, None).map_err(Failure::Data)?)
    } else {
        None
    };
    let mut report = BTreeMap::new();
    for m in &a.metrics {
        let (name, v) = match m {
            Metric::Psnr => {
                let (r, t) = images.as_ref().expect("loaded");
                ("psnr", psnr(r, t).map_err(Failure::Data)?)
            }
            Metric::Ssim => {
                let (r, t) = images.as_ref().expect("loaded");
                ("ssim", ssim(r, t).map_err(Failure::Data)?)
            }
            Metric::Miou => ("miou", seg.as_ref().expect("computed").miou),
            Metric::Macc => ("macc", seg.as_ref().expect("computed").macc),
        };
        report.insert(name.to_string(), v);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(round_sig6(0.123456789), 0.123457);
        assert_eq!(round_sig6(1234567.0), 1234570.0);
        assert_eq!(round_sig6(0.74), 0.74);
        assert_eq!(round_sig6(0.0), 0.0);
    }

    #[test]
    fn text_and_json_mirror() {
        let mut m = BTreeMap::new();
        m.insert("psnr", 20.000000001);
        m.insert("ssim", 0.5);
        assert_eq!(format_report(&m, false), "psnr: 20\nssim: 0.5\n");
        let v: Value = serde_json::from_str(&format_report(&m, true)).unwrap();
        assert_eq!(v["psnr"], 20.0);
    }

    #[test]
    fn parse_errors_exit_with_usage_code() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["lgs", "frobnicate"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run(["lgs", "synth", "--preset", "cathedral", "--out", "x"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run(["lgs", "--help"], &mut o, &mut e), EXIT_OK);
    }
}
