//! Command-line entry point. `run` parses arguments, executes one command and
//! returns the process exit code: 0 success, 1 usage, 2 data error,
//! 3 divergence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::camera::{Camera, CameraModel};
use crate::costmap::DepthSourceKind;
use crate::error::{Error, Result};
use crate::field::{export_mesh, fit_field, render_image, VoxelField};
use crate::image::{DepthMap, Image};
use crate::io::{
    frame_name, init_depth, load_dataset, read_cameras, read_depth, save_dataset, write_cameras, write_depth, Dataset,
    DepthInitSource, Mode, RunConfig,
};
use crate::losses::ssim;
use crate::metrics::{psnr, relative_pose_error, EvalReport};
use crate::optimizer::{refine_fisheye, refine_pinhole, RefineResult, RefineSettings};
use crate::synth::{generate_scene, perturb_poses, render_ground_truth, synthetic_priors, SceneSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

const LOCK_NAME: &str = ".fisheye-ba.lock";

#[derive(Debug, Parser)]
#[command(name = "fisheye-ba", version, about = "Fisheye bundle adjustment and voxel novel-view synthesis")]
struct Cli {
    /// Seed for every random choice; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scene spec (TOML or JSON).
    Synth { spec: PathBuf, out: PathBuf },
    /// Refine poses and depth of a pinhole dataset.
    RefinePinhole {
        dataset: PathBuf,
        #[arg(long, value_enum)]
        depth_init: Option<DepthInitSource>,
        /// Output dataset directory [default: <dataset>.refined]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refine poses (and optionally distortion) of a fisheye dataset.
    RefineFisheye {
        dataset: PathBuf,
        #[arg(long)]
        optimize_distortion: bool,
        /// Output dataset directory [default: <dataset>.refined]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a voxel field to a dataset.
    Fit { dataset: PathBuf, field_out: PathBuf },
    /// Render a field through a camera record.
    Render {
        field: PathBuf,
        camera: PathBuf,
        out: PathBuf,
        /// Record to use when the camera file holds an array.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Compare an estimate against ground truth; JSON on stdout, table on stderr.
    Eval {
        est: PathBuf,
        truth: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Extract an iso-surface as PLY or OBJ (by extension).
    ExportMesh {
        field: PathBuf,
        out: PathBuf,
        #[arg(long)]
        iso: f64,
    },
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("FBINERF_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} threads: {e}", cli.threads);
            return EXIT_USAGE;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged(_) => EXIT_DIVERGED,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Marks an output location as in use for the lifetime of the guard.
struct Lock(PathBuf);

impl Lock {
    fn acquire(path: PathBuf) -> Result<Lock> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} exists: another run is using this output (delete it if that run has ended)",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    fn for_dir(dir: &Path) -> Result<Lock> {
        Lock::acquire(dir.join(LOCK_NAME))
    }

    fn for_file(file: &Path) -> Result<Lock> {
        let mut name = file.file_name().map(OsString::from).unwrap_or_default();
        name.push(".lock");
        Lock::acquire(file.with_file_name(name))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.field.seed = cfg.seed;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { spec, out } => synth(&cfg, spec, out),
        Command::RefinePinhole { dataset, depth_init, out } => {
            let mut cfg = cfg;
            if let Some(src) = depth_init {
                cfg.depth_init.source = *src;
            }
            refine(&cfg, Mode::Pinhole, dataset, out.as_deref())
        }
        Command::RefineFisheye { dataset, optimize_distortion, out } => {
            let mut cfg = cfg;
            cfg.optimizer.optimize_distortion |= *optimize_distortion;
            refine(&cfg, Mode::Fisheye, dataset, out.as_deref())
        }
        Command::Fit { dataset, field_out } => fit(&cfg, dataset, field_out),
        Command::Render { field, camera, out, index } => render(&cfg, field, camera, out, *index),
        Command::Eval { est, truth, json } => eval(est, truth, json.as_deref()),
        Command::ExportMesh { field, out, iso } => {
            let _lock = Lock::for_file(out)?;
            let mesh = export_mesh(&VoxelField::load(field)?, *iso)?;
            mesh.write(out)?;
            eprintln!("wrote {} vertices, {} triangles to {}", mesh.vertices.len(), mesh.triangles.len(), out.display());
            Ok(())
        }
    }
}

fn read_spec(path: &Path) -> Result<SceneSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_str(&text)?)
    } else {
        toml::from_str(&text).map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))
    }
}

/// Writes the dataset with perturbed initial cameras, true depth, optional
/// priors, and the true cameras under `truth/cameras.json`.
fn synth(cfg: &RunConfig, spec: &Path, out: &Path) -> Result<()> {
    let _lock = Lock::for_dir(out)?;
    let spec = read_spec(spec)?;
    let scene = generate_scene(&spec)?;
    let (images, depth): (Vec<Image>, Vec<DepthMap>) = scene.cameras.iter().map(|c| render_ground_truth(&scene, c)).unzip();
    let s = &cfg.synth;
    let mut init = perturb_poses(&scene.cameras, s.perturb_rot_deg, s.perturb_trans_frac, cfg.seed);
    if let Some(k) = s.init_distortion {
        init = init
            .iter()
            .map(|c| match c {
                Camera::Fisheye(f) => f.with_distortion(k).map(Camera::Fisheye),
                other => Ok(*other),
            })
            .collect::<Result<_>>()?;
    }
    let priors = s.prior_scale.map(|scale| synthetic_priors(&depth, scale, s.prior_noise, cfg.seed));
    let data = Dataset { images, cameras: init, depth: Some(depth), priors };
    save_dataset(&data, out)?;
    let truth = out.join("truth");
    std::fs::create_dir_all(&truth).map_err(|e| Error::io(&truth, e))?;
    write_cameras(&truth.join("cameras.json"), &scene.cameras)?;
    eprintln!("wrote {} frames to {}", data.len(), out.display());
    Ok(())
}

fn default_out(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().map(OsString::from).unwrap_or_else(|| "dataset".into());
    name.push(".refined");
    dataset.with_file_name(name)
}

fn refine(cfg: &RunConfig, mode: Mode, dataset: &Path, out: Option<&Path>) -> Result<()> {
    let data = load_dataset(dataset)?;
    let want = match mode {
        Mode::Pinhole => CameraModel::Pinhole,
        Mode::Fisheye => CameraModel::Fisheye,
    };
    if data.model() != Some(want) {
        return Err(Error::InvalidCamera(format!("{} does not hold {want:?} cameras", dataset.display())));
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| default_out(dataset));
    if out == dataset {
        return Err(Error::Config("refinement output must differ from the input dataset".into()));
    }
    let _lock = Lock::for_dir(&out)?;
    let settings = RefineSettings { optimizer: cfg.optimizer.clone(), loss: cfg.loss.clone(), features: cfg.feature.clone() };
    let result: RefineResult = match mode {
        Mode::Pinhole => {
            let depth = init_depth(&data, &cfg.depth_init, dataset)?;
            refine_pinhole(&data.images, &data.cameras, &depth, &settings, None)?
        }
        Mode::Fisheye => {
            let depth = match cfg.optimizer.depth_source {
                DepthSourceKind::Hypotheses => None,
                DepthSourceKind::GroundTruth => Some(init_depth(
                    &data,
                    &crate::io::DepthInitConfig { source: DepthInitSource::GroundTruth, ..cfg.depth_init.clone() },
                    dataset,
                )?),
                DepthSourceKind::Estimate => Some(init_depth(&data, &cfg.depth_init, dataset)?),
            };
            refine_fisheye(&data.images, &data.cameras, depth.as_deref(), &settings, None)?
        }
    };
    let cameras: Vec<Camera> = data
        .cameras
        .iter()
        .zip(&result.poses)
        .map(|(c, p)| match c.with_pose(*p) {
            Camera::Fisheye(f) => f.with_distortion(result.distortion).map(Camera::Fisheye),
            other => Ok(other),
        })
        .collect::<Result<_>>()?;
    let images_out = out.join("images");
    std::fs::create_dir_all(&images_out).map_err(|e| Error::io(&images_out, e))?;
    for i in 0..data.len() {
        let name = format!("{}.png", frame_name(i));
        let src = dataset.join("images").join(&name);
        std::fs::copy(&src, images_out.join(&name)).map_err(|e| Error::io(&src, e))?;
    }
    write_cameras(&out.join("cameras.json"), &cameras)?;
    let depth_out = out.join("depth");
    std::fs::create_dir_all(&depth_out).map_err(|e| Error::io(&depth_out, e))?;
    for (i, d) in result.depth.iter().enumerate() {
        write_depth(&depth_out, &frame_name(i), d)?;
    }
    result.history.write_csv(&out.join("history.csv"))?;
    eprintln!(
        "objective {:.6e} -> {:.6e} (best at iteration {}), wrote {}",
        result.initial_objective,
        result.final_objective,
        result.best_iteration,
        out.display()
    );
    Ok(())
}

/// Field bounds from the config, else from back-projected `depth/` points
/// (1st to 99th percentile per axis, padded by 5%).
fn field_bounds(cfg: &RunConfig, data: &Dataset) -> Result<([f64; 3], [f64; 3])> {
    if let Some([lo, hi]) = cfg.field.bounds {
        return Ok((lo, hi));
    }
    let depth = data.depth.as_ref().ok_or_else(|| Error::Config("set field.bounds or provide depth/".into()))?;
    let mut axes: [Vec<f64>; 3] = Default::default();
    for (cam, d) in data.cameras.iter().zip(depth) {
        let pose = cam.pose();
        for y in 0..d.height {
            for x in 0..d.width {
                let v = d.get(x, y);
                if v.is_finite() && v > 0.0 {
                    let p = pose.transform_point(&cam.unproject_camera_frame(x as f64, y as f64, v)?);
                    for a in 0..3 {
                        axes[a].push(p[a]);
                    }
                }
            }
        }
    }
    if axes[0].is_empty() {
        return Err(Error::NoValidPixels);
    }
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for a in 0..3 {
        axes[a].sort_by(f64::total_cmp);
        let n = axes[a].len();
        let (l, h) = (axes[a][n / 100], axes[a][(n * 99) / 100]);
        let pad = 0.05 * (h - l).max(1e-3);
        lo[a] = l - pad;
        hi[a] = h + pad;
    }
    Ok((lo, hi))
}

fn fit(cfg: &RunConfig, dataset: &Path, field_out: &Path) -> Result<()> {
    let data = load_dataset(dataset)?;
    let _lock = Lock::for_file(field_out)?;
    let (lo, hi) = field_bounds(cfg, &data)?;
    let field = VoxelField::new(cfg.field.resolution, lo, hi, cfg.field.init_density, [0.5; 3])?;
    let result = fit_field(field, &data.images, &data.cameras, &cfg.field)?;
    result.field.save(field_out)?;
    let best = result.history.iter().find(|h| h.iteration == result.best_iteration);
    eprintln!(
        "training PSNR {:.2} dB at iteration {}, wrote {}",
        best.map_or(f64::NAN, |h| h.psnr),
        result.best_iteration,
        field_out.display()
    );
    Ok(())
}

fn render(cfg: &RunConfig, field: &Path, camera: &Path, out: &Path, index: usize) -> Result<()> {
    let field = VoxelField::load(field)?;
    let cams = read_cameras(camera)?;
    let cam = cams
        .get(index)
        .ok_or_else(|| Error::MissingCameraRecord(format!("index {index} of {}", camera.display())))?;
    let _lock = Lock::for_file(out)?;
    let (image, _) = render_image(&field, cam, &cfg.field.render);
    image.save_png(out)
}

/// Cameras, images and depth from a dataset directory, a directory holding
/// only `cameras.json`, or a camera file.
struct Partial {
    cameras: Vec<Camera>,
    images: Option<Vec<Image>>,
    depth: Option<Vec<DepthMap>>,
}

fn load_partial(path: &Path) -> Result<Partial> {
    if path.is_file() {
        return Ok(Partial { cameras: read_cameras(path)?, images: None, depth: None });
    }
    if path.join("images").is_dir() {
        let d = load_dataset(path)?;
        return Ok(Partial { cameras: d.cameras, images: Some(d.images), depth: d.depth });
    }
    let cameras = read_cameras(&path.join("cameras.json"))?;
    let depth_dir = path.join("depth");
    let depth = if depth_dir.is_dir() {
        Some((0..cameras.len()).map(|i| read_depth(&depth_dir, &frame_name(i))).collect::<Result<_>>()?)
    } else {
        None
    };
    Ok(Partial { cameras, images: None, depth })
}

fn eval(est: &Path, truth: &Path, json: Option<&Path>) -> Result<()> {
    let (e, t) = (load_partial(est)?, load_partial(truth)?);
    if e.cameras.len() != t.cameras.len() {
        return Err(Error::DimensionMismatch(format!("{} estimated cameras vs {} true", e.cameras.len(), t.cameras.len())));
    }
    let mut report = EvalReport::default();
    if e.cameras.len() >= 2 {
        let ep: Vec<_> = e.cameras.iter().map(Camera::pose).collect();
        let tp: Vec<_> = t.cameras.iter().map(Camera::pose).collect();
        let (rot, trans) = relative_pose_error(&ep, &tp)?;
        report = report.with_poses(rot, trans);
    }
    if let (Some(a), Some(b)) = (&e.images, &t.images) {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch(format!("{} estimated images vs {} true", a.len(), b.len())));
        }
        let n = a.len() as f64;
        let mse: f64 = a.iter().zip(b).map(|(x, y)| crate::losses::mse(x, y)).sum::<f64>() / n;
        report.psnr = Some(if mse == 0.0 { f64::INFINITY } else { a.iter().zip(b).map(|(x, y)| psnr(x, y, 1.0)).sum::<f64>() / n });
        report.ssim = Some(a.iter().zip(b).map(|(x, y)| ssim(x, y)).sum::<f64>() / n);
    }
    if let (Some(a), Some(b)) = (&e.depth, &t.depth) {
        let errs: Vec<f64> = a.iter().zip(b).filter_map(|(x, y)| x.abs_rel_error(y)).collect();
        if !errs.is_empty() {
            report.depth_abs_rel = Some(errs.iter().sum::<f64>() / errs.len() as f64);
        }
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    eprint!("{}", report.table());
    print!("{text}");
    if let Some(path) = json {
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
