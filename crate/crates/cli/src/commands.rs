//! Argument parsing and the subcommands.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use panocal_core::calibration::{
    augment, calibrate_offline, calibrate_online, navigation_calibration, AgentAction, AugmentKind, CalibConfig, Profile,
};
use panocal_core::localization::{
    build_reference_map, localize_query, pose_error, summarize, LocalizeConfig, LocalizeStatus,
};
use panocal_core::losses::{total_loss, LossConfig};
use panocal_core::mapping::{ground_truth_map, map_metrics, run_fixed_trajectory_slam, OdomNoise, Pose2D, SlamConfig, TrajectorySpec};
use panocal_core::metrics::{depth_metrics, DepthMetrics, DEFAULT_LAMBDAS};
use panocal_core::predictor::{shift_image, ImageShiftSpec};
use panocal_core::scene::{build_scene, render_panorama, Scene, SceneSpec};
use panocal_core::{rng, DepthMap, DepthPredictor, Panorama};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::formats::{
    encode_pdr, load_image, parse_floats, read_json, read_pdr, read_pose, save_image, write_depth_png, write_grid_png,
    write_json, write_png, PoseJson,
};
use crate::manifest::{strip_out_dir, Manifest, MANIFEST};
use crate::predictors::{serve, ParamsFile, PredictorSpec};

#[derive(Debug, Parser)]
#[command(name = "panocal", version, about = "Test-time calibration of panoramic depth predictors")]
pub struct Cli {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for per-item loops (default: logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for artifacts and the manifest.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Render RGB-D panoramas of a scene at given poses.
    Synth(SynthArgs),
    /// Fit correction parameters on unlabeled panoramas.
    Calibrate(CalibrateArgs),
    /// Compare predicted and ground-truth depth rasters.
    EvalDepth(EvalArgs),
    /// Evaluate the self-consistency losses on one panorama.
    Losses(LossesArgs),
    /// Write augmented training views of a panorama.
    Augment(AugmentArgs),
    /// Fixed-trajectory occupancy-grid SLAM.
    Map(MapArgs),
    /// Map-free localization of query panoramas against a reference.
    Localize(LocalizeArgs),
    /// Apply image-domain shifts to panoramas.
    Domains(DomainsArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
    /// Answer depth requests on stdin/stdout (for `exec:` predictors).
    #[command(hide = true)]
    Serve(ServeArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Calibrate(_) => "calibrate",
            Command::EvalDepth(_) => "eval-depth",
            Command::Losses(_) => "losses",
            Command::Augment(_) => "augment",
            Command::Map(_) => "map",
            Command::Localize(_) => "localize",
            Command::Domains(_) => "domains",
            Command::Replay(_) => "replay",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SceneArgs {
    /// Scene spec JSON.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Seed for the scene's random obstacles.
    #[arg(long, default_value_t = 0)]
    pub scene_seed: u64,
}

impl SceneArgs {
    fn load(&self) -> Result<Option<Arc<Scene>>> {
        self.scene
            .as_ref()
            .map(|p| {
                let spec: SceneSpec = read_json(p)?;
                Ok(build_scene(&spec, self.scene_seed)?)
            })
            .transpose()
    }

    fn require(&self) -> Result<Arc<Scene>> {
        self.load()?.ok_or_else(|| anyhow!("--scene is required"))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// JSON list of poses `{"rotation": [9], "translation": [3]}`.
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileArg {
    Offline,
    Online,
    NavExplore,
    NavPointgoal,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Offline => Profile::Offline,
            ProfileArg::Online => Profile::Online,
            ProfileArg::NavExplore => Profile::NavExplore,
            ProfileArg::NavPointgoal => Profile::NavPointgoal,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PredictorArgs {
    /// gt | corrupt:<k=v,…> | calibrated:<params.json> | exec:<program>
    #[arg(long, default_value = "gt")]
    pub predictor: String,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub predictor: PredictorArgs,
    /// Unlabeled panoramas; for navigation profiles, the post-forward frames
    /// in order.
    #[arg(long, num_args = 1.., required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "offline")]
    pub profile: ProfileArg,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub n_aug: Option<usize>,
    #[arg(long)]
    pub n_fwd: Option<usize>,
    /// Points per Chamfer and normal evaluation.
    #[arg(long)]
    pub chamfer_samples: Option<usize>,
    /// Box-filter the images by this factor before calibrating.
    #[arg(long, default_value_t = 1)]
    pub downsample: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub gt: Vec<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct LossesArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub predictor: PredictorArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub chamfer_samples: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub predictor: PredictorArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct MapArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub predictor: PredictorArgs,
    /// JSON action list (`["forward", "turn_left", …]`) or a full
    /// trajectory `{"actions": […], "step": m, "turn": rad}`.
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Start pose `x,y,theta`.
    #[arg(long, default_value = "0,0,0")]
    pub start: String,
    /// Odometry noise `sigma_xy,sigma_theta`.
    #[arg(long, default_value = "0,0")]
    pub odom_noise: String,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub predictor: PredictorArgs,
    /// Reference panorama; its pose sidecar anchors the error evaluation.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub queries: Vec<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n_t: usize,
    #[arg(long, default_value_t = 8)]
    pub n_r: usize,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Accuracy gates `t_m:r_deg`, comma separated.
    #[arg(long, default_value = "0.3:5")]
    pub thresholds: String,
}

#[derive(Debug, Args, Serialize)]
pub struct DomainsArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub images: Vec<PathBuf>,
    /// Standard shifts by name, comma separated.
    #[arg(long, default_value = "low_light,white_balance,gamma,speckle,gaussian,salt_pepper,rotation")]
    pub kinds: String,
    /// JSON list of shift specs; replaces --kinds.
    #[arg(long)]
    pub specs: Option<PathBuf>,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Exit nonzero unless the outputs match the manifest.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    /// Answer every request with this depth.
    #[arg(long)]
    pub constant: f64,
}

/// Parses and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(cli: &Cli, argv: &[OsString]) -> Result<()> {
    match &cli.command {
        Command::Serve(a) => return serve_constant(a.constant),
        Command::Replay(a) => return replay(a, &cli.out_dir),
        _ => {}
    }
    if cli.threads == Some(0) {
        bail!("--threads must be at least 1");
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let out = cli.out_dir.as_path();
    let outputs = pool.install(|| match &cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Calibrate(a) => calibrate(a, cli.seed, out),
        Command::EvalDepth(a) => eval_depth(a, out),
        Command::Losses(a) => losses(a, cli.seed, out),
        Command::Augment(a) => augment_cmd(a, cli.seed, out),
        Command::Map(a) => map(a, cli.seed, out),
        Command::Localize(a) => localize(a, cli.seed, out),
        Command::Domains(a) => domains(a, cli.seed, out),
        Command::Replay(_) | Command::Serve(_) => unreachable!("handled above"),
    })?;
    let manifest = Manifest {
        command: cli.command.name().into(),
        argv: strip_out_dir(argv),
        seed: cli.seed,
        threads: cli.threads,
        versions: crate::manifest::Versions::current(),
        config: serde_json::to_value(&cli.command)?,
        outputs: Manifest::describe(out, &outputs)?,
    };
    write_json(&out.join(MANIFEST), &manifest)
}

fn replay(args: &ReplayArgs, out_dir: &Path) -> Result<()> {
    let manifest: Manifest = read_json(&args.manifest)?;
    let mut argv: Vec<OsString> = vec!["panocal".into(), "--out-dir".into(), out_dir.as_os_str().to_owned()];
    argv.extend(manifest.argv.iter().map(OsString::from));
    let cli = Cli::try_parse_from(&argv).context("manifest arguments no longer parse")?;
    if matches!(cli.command, Command::Replay(_) | Command::Serve(_)) {
        bail!("manifest records a `{}` run, which cannot be replayed", cli.command.name());
    }
    execute(&cli, &argv)?;
    let bad = manifest.mismatches(out_dir);
    if args.check && !bad.is_empty() {
        bail!("outputs differ from the manifest: {}", bad.join(", "));
    }
    Ok(())
}

fn serve_constant(value: f64) -> Result<()> {
    ensure!(value > 0.0 && value.is_finite(), "--constant must be a positive depth");
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve(&mut stdin.lock(), &mut stdout.lock(), |img| Ok(DepthMap::constant(img.width(), img.height(), value)?))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

/// Loads images and tags them with their sidecar captures when the
/// predictor needs ground truth.
fn load_images(paths: &[PathBuf], scene: Option<&Arc<Scene>>) -> Result<Vec<Panorama>> {
    paths.par_iter().map(|p| load_image(p, scene.map(|s| &**s))).collect()
}

fn predictor_setup(
    scene_args: &SceneArgs,
    spec: &str,
) -> Result<(PredictorSpec, Option<Arc<Scene>>, panocal_core::calibration::CalibratedPredictor<crate::predictors::BoxedPredictor>)> {
    let spec = PredictorSpec::parse(spec)?;
    let scene = scene_args.load()?;
    if spec.needs_scene() && scene.is_none() {
        bail!("predictor `{}` needs --scene", spec.base_string());
    }
    let predictor = spec.build(scene.as_ref())?;
    Ok((spec, scene, predictor))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn synth(args: &SynthArgs, out: &Path) -> Result<Vec<String>> {
    let scene = args.scene.require()?;
    let poses: Vec<PoseJson> = read_json(&args.poses)?;
    ensure!(!poses.is_empty(), "no poses in {}", args.poses.display());
    let names: Vec<Vec<String>> = poses
        .par_iter()
        .enumerate()
        .map(|(i, pj)| {
            let pose = pj.to_pose()?;
            let (img, depth) = render_panorama(&scene, &pose, args.width, args.height)?;
            let name = format!("view_{i:03}");
            write_png(&out.join(format!("{name}.png")), &img)?;
            fs::write(out.join(format!("{name}.pdr")), encode_pdr(&depth))?;
            write_json(&out.join(format!("{name}.pose.json")), pj)?;
            write_depth_png(&out.join(format!("{name}_depth.png")), &depth)?;
            Ok(["png", "pdr", "pose.json"].iter().map(|e| format!("{name}.{e}")).chain([format!("{name}_depth.png")]).collect())
        })
        .collect::<Result<_>>()?;
    Ok(names.concat())
}

fn loss_config(chamfer_samples: Option<usize>) -> LossConfig {
    let mut cfg = LossConfig::default();
    if let Some(n) = chamfer_samples {
        cfg.chamfer_samples = n;
    }
    cfg
}

fn calibrate(args: &CalibrateArgs, seed: u64, out: &Path) -> Result<Vec<String>> {
    let (spec, scene, predictor) = predictor_setup(&args.scene, &args.predictor.predictor)?;
    ensure!(args.downsample >= 1, "--downsample must be at least 1");
    let images: Vec<Panorama> = load_images(&args.images, scene.as_ref())?
        .iter()
        .map(|img| if args.downsample == 1 { Ok(img.clone()) } else { Ok(img.downsample(args.downsample)?) })
        .collect::<Result<_>>()?;
    let mut cfg = CalibConfig::profile(args.profile.into());
    cfg.seed = rng::derive(seed, "calibrate");
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(n) = args.n_aug {
        cfg.n_aug = n;
    }
    if let Some(n) = args.n_fwd {
        cfg.n_fwd = n;
    }
    let loss_cfg = loss_config(args.chamfer_samples);
    let (params, trace) = match args.profile {
        ProfileArg::Offline => {
            let run = calibrate_offline(&predictor, &images, &cfg, &loss_cfg)?;
            (run.params, run.trace)
        }
        ProfileArg::Online => {
            let mut predictor = predictor;
            let steps = calibrate_online(&mut predictor, &images, &cfg, &loss_cfg)?;
            (predictor.params.clone(), steps.iter().map(|s| s.loss).collect())
        }
        ProfileArg::NavExplore | ProfileArg::NavPointgoal => {
            let log: Vec<(Panorama, AgentAction)> = images.into_iter().map(|i| (i, AgentAction::Forward)).collect();
            let run = navigation_calibration(&predictor, &log, &cfg, &loss_cfg)?;
            (run.params, run.trace)
        }
    };
    let file = ParamsFile {
        log_scale: params.log_scale,
        gamma: params.gamma,
        band_bias: params.band_bias.clone(),
        base: Some(spec.base_string()),
    };
    write_json(&out.join("params.json"), &file)?;
    let mut w = csv_writer(&out.join("trace.csv"))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(vec!["params.json".into(), "trace.csv".into()])
}

const METRIC_HEADER: [&str; 11] =
    ["name", "mae", "abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3", "count", "excluded"];

fn metric_row(name: &str, m: &DepthMetrics) -> Vec<String> {
    let mut row = vec![name.to_string()];
    row.extend([m.mae, m.abs_rel, m.sq_rel, m.rmse, m.rmse_log].iter().map(f64::to_string));
    row.extend(m.inlier.iter().map(|(_, f)| f.to_string()));
    row.extend([m.count.to_string(), m.excluded.to_string()]);
    row
}

fn eval_depth(args: &EvalArgs, out: &Path) -> Result<Vec<String>> {
    ensure!(args.pred.len() == args.gt.len(), "--pred and --gt need the same number of files");
    let metrics: Vec<DepthMetrics> = args
        .pred
        .par_iter()
        .zip(&args.gt)
        .map(|(p, g)| {
            depth_metrics(&read_pdr(p)?, &read_pdr(g)?, &DEFAULT_LAMBDAS)
                .with_context(|| format!("comparing {} with {}", p.display(), g.display()))
        })
        .collect::<Result<_>>()?;
    let n = metrics.len() as f64;
    let avg = |f: &dyn Fn(&DepthMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
    let mean = DepthMetrics {
        mae: avg(&|m| m.mae),
        abs_rel: avg(&|m| m.abs_rel),
        sq_rel: avg(&|m| m.sq_rel),
        rmse: avg(&|m| m.rmse),
        rmse_log: avg(&|m| m.rmse_log),
        inlier: DEFAULT_LAMBDAS.iter().enumerate().map(|(k, l)| (*l, avg(&|m| m.inlier[k].1))).collect(),
        count: metrics.iter().map(|m| m.count).sum(),
        excluded: metrics.iter().map(|m| m.excluded).sum(),
    };
    let mut buf = csv::Writer::from_writer(Vec::new());
    buf.write_record(METRIC_HEADER)?;
    for (p, m) in args.pred.iter().zip(&metrics) {
        buf.write_record(metric_row(&stem(p), m))?;
    }
    buf.write_record(metric_row("mean", &mean))?;
    let bytes = buf.into_inner().map_err(|e| anyhow!("{e}"))?;
    std::io::stdout().write_all(&bytes)?;
    fs::write(out.join("metrics.csv"), &bytes)?;
    Ok(vec!["metrics.csv".into()])
}

fn losses(args: &LossesArgs, seed: u64, out: &Path) -> Result<Vec<String>> {
    let (_, scene, predictor) = predictor_setup(&args.scene, &args.predictor.predictor)?;
    let img = load_image(&args.image, scene.as_deref())?;
    let r = total_loss(&predictor, &img, &loss_config(args.chamfer_samples), &mut rng::stream(seed, "losses"))?;
    let text = format!("stretch,chamfer,normal,total\n{},{},{},{}\n", r.stretch, r.chamfer, r.normal, r.total);
    print!("{text}");
    fs::write(out.join("losses.csv"), text)?;
    Ok(vec!["losses.csv".into()])
}

fn augment_cmd(args: &AugmentArgs, seed: u64, out: &Path) -> Result<Vec<String>> {
    let (_, scene, predictor) = predictor_setup(&args.scene, &args.predictor.predictor)?;
    let img = load_image(&args.image, scene.as_deref())?;
    let d_hat = predictor.predict(&img)?;
    let cfg = LossConfig::default();
    let mut r = rng::stream(seed, "augment");
    let mut names = Vec::new();
    let mut w = csv_writer(&out.join("augment.csv"))?;
    w.write_record(["index", "kind", "k", "tx", "ty", "tz"])?;
    for i in 0..args.n {
        let a = augment(&img, &d_hat, &cfg, &mut r)?;
        let name = format!("aug_{i:03}.png");
        save_image(&out.join(&name), &a.image)?;
        names.push(name.clone());
        if a.image.capture().is_some() {
            names.push(format!("aug_{i:03}.capture.json"));
        }
        let row = match a.kind {
            AugmentKind::Stretch(k) => vec![i.to_string(), "stretch".into(), k.to_string(), String::new(), String::new(), String::new()],
            AugmentKind::Warp(p) => {
                let t = p.translation;
                vec![i.to_string(), "warp".into(), String::new(), t.x.to_string(), t.y.to_string(), t.z.to_string()]
            }
        };
        w.write_record(row)?;
    }
    w.flush()?;
    names.push("augment.csv".into());
    Ok(names)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TrajectoryFile {
    Actions(Vec<AgentAction>),
    Full(TrajectorySpec),
}

fn map(args: &MapArgs, seed: u64, out: &Path) -> Result<Vec<String>> {
    let (_, scene, predictor) = predictor_setup(&args.scene, &args.predictor.predictor)?;
    let scene = scene.ok_or_else(|| anyhow!("map needs --scene"))?;
    let traj = match read_json::<TrajectoryFile>(&args.trajectory)? {
        TrajectoryFile::Actions(a) => TrajectorySpec::new(a)?,
        TrajectoryFile::Full(t) => t,
    };
    let [x, y, theta] = parse_floats::<3>(&args.start).context("--start")?;
    let [sxy, sth] = parse_floats::<2>(&args.odom_noise).context("--odom-noise")?;
    let cfg = SlamConfig {
        odom_noise: OdomNoise { sigma_xy: sxy, sigma_theta: sth },
        width: args.width,
        height: args.height,
        ..SlamConfig::default()
    };
    let run = run_fixed_trajectory_slam(&scene, Pose2D::new(x, y, theta), &traj, &predictor, &cfg, rng::derive(seed, "map"))?;
    let gt = ground_truth_map(&scene, &run.truth, &cfg)?;
    let m = map_metrics(&run.grid, &gt)?;
    write_grid_png(&out.join("map.png"), &run.grid)?;
    write_grid_png(&out.join("gt_map.png"), &gt)?;
    let final_err = run.estimated.last().expect("nonempty").translation_error(run.truth.last().expect("nonempty"));
    let mut w = csv_writer(&out.join("metrics.csv"))?;
    w.write_record(["chamfer2d", "mae", "psnr", "iou", "final_t_err", "collisions", "icp_fallbacks"])?;
    w.write_record([
        m.chamfer2d.to_string(),
        m.mae.to_string(),
        m.psnr.to_string(),
        m.iou.to_string(),
        final_err.to_string(),
        run.collisions.to_string(),
        run.fallbacks.to_string(),
    ])?;
    w.flush()?;
    let mut w = csv_writer(&out.join("poses.csv"))?;
    w.write_record(["step", "est_x", "est_y", "est_theta", "gt_x", "gt_y", "gt_theta"])?;
    for (i, (e, t)) in run.estimated.iter().zip(&run.truth).enumerate() {
        w.write_record([i.to_string(), e.x.to_string(), e.y.to_string(), e.theta.to_string(), t.x.to_string(), t.y.to_string(), t.theta.to_string()])?;
    }
    w.flush()?;
    Ok(["map.png", "gt_map.png", "metrics.csv", "poses.csv"].map(String::from).to_vec())
}

fn parse_thresholds(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(',')
        .map(|g| {
            let (t, r) = g.split_once(':').ok_or_else(|| anyhow!("threshold `{g}` is not t:r"))?;
            Ok((t.trim().parse()?, r.trim().parse()?))
        })
        .collect()
}

fn localize(args: &LocalizeArgs, seed: u64, out: &Path) -> Result<Vec<String>> {
    let (_, scene, predictor) = predictor_setup(&args.scene, &args.predictor.predictor)?;
    let cfg = LocalizeConfig {
        n_t: args.n_t,
        n_r: args.n_r,
        top_k: args.top_k,
        thresholds: parse_thresholds(&args.thresholds)?,
        ..LocalizeConfig::default()
    };
    cfg.validate()?;
    let reference = load_image(&args.reference, scene.as_deref())?;
    let ref_pose = read_pose(&args.reference)?;
    let map = build_reference_map(&reference, &predictor, &cfg, rng::derive(seed, "reference-map"))?;
    let queries = load_images(&args.queries, scene.as_ref())?;
    let results: Vec<_> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| localize_query(q, &map, &cfg, &mut rng::stream(rng::derive_indexed(seed, "localize", i as u64), "ransac")))
        .collect::<panocal_core::Result<_>>()?;
    let mut errors = Vec::new();
    let mut w = csv_writer(&out.join("localize.csv"))?;
    w.write_record(["query", "t_err", "r_err", "inliers", "matches", "status"])?;
    for (path, res) in args.queries.iter().zip(&results) {
        let err = match (ref_pose, read_pose(path)?) {
            (Some(r), Some(q)) => Some(pose_error(&res.pose, &r.inverse().compose(&q))),
            _ => None,
        };
        let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            stem(path),
            fmt(err.map(|e| e.0)),
            fmt(err.map(|e| e.1)),
            res.inliers.to_string(),
            res.matches.to_string(),
            res.status.as_str().to_string(),
        ])?;
        errors.extend(err);
    }
    w.flush()?;
    let mut names = vec!["localize.csv".to_string()];
    if let Some(s) = summarize(&errors, &cfg.thresholds) {
        let mut w = csv_writer(&out.join("summary.csv"))?;
        w.write_record(["queries", "evaluated", "success", "median_t", "median_r", "t_max", "r_max", "accuracy"])?;
        let success = results.iter().filter(|r| r.status == LocalizeStatus::Success).count();
        for ((t, r), acc) in &s.accuracy {
            w.write_record([
                results.len().to_string(),
                errors.len().to_string(),
                success.to_string(),
                s.median_t.to_string(),
                s.median_r.to_string(),
                t.to_string(),
                r.to_string(),
                acc.to_string(),
            ])?;
        }
        w.flush()?;
        names.push("summary.csv".into());
    }
    Ok(names)
}

fn domains(args: &DomainsArgs, seed: u64, out: &Path) -> Result<Vec<String>> {
    let specs: Vec<(String, ImageShiftSpec)> = match &args.specs {
        Some(p) => read_json::<Vec<ImageShiftSpec>>(p)?.into_iter().enumerate().map(|(i, s)| (format!("spec{i}"), s)).collect(),
        None => args
            .kinds
            .split(',')
            .map(|k| Ok((k.trim().to_string(), ImageShiftSpec::standard(k.trim())?)))
            .collect::<Result<_>>()?,
    };
    let scene = args.scene.load()?;
    let images = load_images(&args.images, scene.as_ref())?;
    let jobs: Vec<(usize, usize)> = (0..images.len()).flat_map(|i| (0..specs.len()).map(move |j| (i, j))).collect();
    let names: Vec<Vec<String>> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let (label, spec) = &specs[j];
            let mut r = rng::stream(rng::derive_indexed(seed, "domains", (i * specs.len() + j) as u64), label);
            let shifted = shift_image(&images[i], spec, &mut r)?;
            let name = format!("{}_{label}", stem(&args.images[i]));
            save_image(&out.join(format!("{name}.png")), &shifted)?;
            let mut v = vec![format!("{name}.png")];
            if shifted.capture().is_some() {
                v.push(format!("{name}.capture.json"));
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    Ok(names.concat())
}

