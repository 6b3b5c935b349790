//! Command-line interface: render, mesh, fit, verify, make-scene.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 usage or parse error,
//! 3 numeric failure. Errors print a single `error: ...` line on stderr.
//! The environment variable `GVKF_SEED` overrides `--seed`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gvkf::camera::Camera;
use gvkf::error::Error;
use gvkf::image::ColorImage;
use gvkf::mesh::{export_mesh, marching_cubes, sample_sdf_grid, MeshFormat, SigmaMode};
use gvkf::render::{render_scene, Accel, RenderOptions};
use gvkf::scene::{
    load_camera, make_neural_sphere_scene, make_single_scene, make_sphere_scene, make_wall_scene,
    Scene,
};
use gvkf::train::{fit, FitConfig, LossConfig};
use gvkf::voxel::GridMode;

#[derive(Parser)]
#[command(name = "gvkf", version, about = "Voxel Gaussian kernel fields: render, mesh, fit")]
struct Cli {
    /// Deterministic seed (GVKF_SEED overrides).
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene to a PPM image (optional PFM depth and PPM normals).
    Render(RenderArgs),
    /// Extract the zero level set of the scene's signed distance field.
    Mesh(MeshArgs),
    /// Fit a scene to target views by finite-difference descent.
    Fit(FitArgs),
    /// Run the invariant suite and print one line per property.
    Verify(VerifyArgs),
    /// Generate a built-in synthetic scene.
    MakeScene(MakeSceneArgs),
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    /// Output PPM path.
    #[arg(long)]
    out: PathBuf,
    /// Optional 32-bit float PFM depth output.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Optional PPM normal-map output.
    #[arg(long)]
    normal: Option<PathBuf>,
    /// Background color as r,g,b in [0,1].
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    bg: [f64; 3],
    /// Candidate culling: brute-force or a coarse world grid.
    #[arg(long, value_enum, default_value_t = AccelArg::None)]
    accel: AccelArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum AccelArg {
    None,
    Grid,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Output mesh path.
    #[arg(long)]
    out: PathBuf,
    /// Samples per axis of the SDF grid.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Logistic smooth factor.
    #[arg(long, default_value_t = 8.0)]
    mu: f64,
    /// Iso value of the extracted level set.
    #[arg(long, default_value_t = 0.0)]
    iso: f64,
    #[arg(long, value_enum, default_value_t = SigmaModeArg::PerRay)]
    sigma_mode: SigmaModeArg,
    #[arg(long, value_enum, default_value_t = FormatArg::PlyAscii)]
    format: FormatArg,
    /// Camera file; required for neural scenes (view-conditioned decoders).
    #[arg(long)]
    camera: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaModeArg {
    PerRay,
    Global,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    PlyAscii,
    PlyBinaryLe,
    Obj,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Directory of (view_%04d.json, view_%04d.ppm) pairs.
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    iters: usize,
    /// Output scene path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    lambda_dssim: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_dist: f64,
    /// Voxel evaluation cadence in iterations.
    #[arg(long, default_value_t = 500)]
    eval_interval: usize,
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    bg: [f64; 3],
}

#[derive(Args)]
struct VerifyArgs {
    /// Inject a failing check to prove failures reach the exit code.
    #[arg(long)]
    self_test_negate: bool,
}

#[derive(Args)]
struct MakeSceneArgs {
    #[arg(long, value_enum)]
    kind: SceneKind,
    #[arg(long)]
    out: PathBuf,
    /// Primitive count (sphere variants).
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 0.02)]
    scale: f64,
    #[arg(long, default_value_t = 0.95)]
    opacity: f64,
    #[arg(long, default_value_t = 0.01)]
    voxel_size: f64,
    /// Companion camera file to write next to the scene.
    #[arg(long)]
    camera_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    /// Gaussians on a unit-sphere shell.
    Sphere,
    /// Fronto-parallel Gaussian wall at z = 2.
    Wall,
    /// One Gaussian at the origin.
    Single,
    /// Neural-mode sphere with seeded features and decoders.
    NeuralSphere,
}

fn parse_rgb(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected r,g,b".into());
    }
    let mut rgb = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        rgb[i] = p
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("bad channel {p:?}"))?;
        if !(0.0..=1.0).contains(&rgb[i]) {
            return Err(format!("channel {} outside [0,1]", rgb[i]));
        }
    }
    Ok(rgb)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = match std::env::var("GVKF_SEED") {
        Ok(v) => match v.parse::<u64>() {
            Ok(s) => s,
            Err(_) => {
                eprintln!("error: GVKF_SEED must be an unsigned integer, got {v:?}");
                return ExitCode::from(2);
            }
        },
        Err(_) => cli.seed,
    };
    let threads = cli.threads;
    let run = || -> Result<ExitCode, Error> {
        match cli.command {
            Command::Render(args) => cmd_render(args, threads),
            Command::Mesh(args) => cmd_mesh(args, threads),
            Command::Fit(args) => cmd_fit(args, threads),
            Command::Verify(args) => Ok(cmd_verify(args)),
            Command::MakeScene(args) => cmd_make_scene(args, seed),
        }
    };
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::NanLoss(_) | Error::SolverFailure(_) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn cmd_render(args: RenderArgs, threads: Option<usize>) -> Result<ExitCode, Error> {
    let scene = Scene::load(&args.scene)?;
    let camera = load_camera(&args.camera)?;
    let opts = RenderOptions {
        background: args.bg,
        accel: match args.accel {
            AccelArg::None => Accel::BruteForce,
            AccelArg::Grid => Accel::CoarseGrid,
        },
    };
    let out = gvkf::with_thread_cap(threads, || render_scene(&scene, &camera, &opts))?;
    out.color.save_ppm(&args.out)?;
    if let Some(path) = args.depth {
        out.depth.save_pfm(path)?;
    }
    if let Some(path) = args.normal {
        out.normal.save_ppm(path)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_mesh(args: MeshArgs, threads: Option<usize>) -> Result<ExitCode, Error> {
    let scene = Scene::load(&args.scene)?;
    let camera_position = match &args.camera {
        Some(path) => Some(load_camera(path)?.position),
        None => None,
    };
    if scene.mode() == GridMode::Neural && camera_position.is_none() {
        return Err(Error::MissingCamera);
    }
    let sigma_mode = match args.sigma_mode {
        SigmaModeArg::PerRay => SigmaMode::PerRay,
        SigmaModeArg::Global => SigmaMode::Global,
    };
    let mesh = gvkf::with_thread_cap(threads, || -> Result<_, Error> {
        let grid = sample_sdf_grid(
            &scene,
            None,
            args.resolution,
            args.mu,
            sigma_mode,
            camera_position.as_ref(),
        )?;
        Ok(marching_cubes(&grid, args.iso))
    })?;
    let format = match args.format {
        FormatArg::PlyAscii => MeshFormat::PlyAscii,
        FormatArg::PlyBinaryLe => MeshFormat::PlyBinaryLe,
        FormatArg::Obj => MeshFormat::Obj,
    };
    export_mesh(&mesh, &args.out, format)?;
    println!(
        "mesh: {} vertices, {} faces -> {}",
        mesh.vertices.len(),
        mesh.faces.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Collects (camera, image) target pairs named `view_%04d.{json,ppm}`.
fn load_targets(dir: &Path) -> Result<Vec<(Camera, ColorImage)>, Error> {
    let mut cameras = std::collections::BTreeMap::new();
    let mut images = std::collections::BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(stem) = name.strip_suffix(".json") {
            if stem.starts_with("view_") {
                cameras.insert(stem.to_string(), path.clone());
            }
        } else if let Some(stem) = name.strip_suffix(".ppm") {
            if stem.starts_with("view_") {
                images.insert(stem.to_string(), path.clone());
            }
        }
    }
    let orphans: Vec<String> = cameras
        .keys()
        .filter(|k| !images.contains_key(*k))
        .chain(images.keys().filter(|k| !cameras.contains_key(*k)))
        .cloned()
        .collect();
    if !orphans.is_empty() {
        return Err(Error::parse(
            "targets",
            format!("unpaired views: {}", orphans.join(", ")),
        ));
    }
    if cameras.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no view_*.json / view_*.ppm pairs in {}",
            dir.display()
        )));
    }
    let mut targets = Vec::with_capacity(cameras.len());
    for (stem, cam_path) in &cameras {
        let camera = load_camera(cam_path)?;
        let image = ColorImage::load_ppm(&images[stem])?;
        if image.width != camera.width || image.height != camera.height {
            return Err(Error::ShapeMismatch(format!(
                "{stem}: image {}x{} vs camera {}x{}",
                image.width, image.height, camera.width, camera.height
            )));
        }
        targets.push((camera, image));
    }
    Ok(targets)
}

fn cmd_fit(args: FitArgs, threads: Option<usize>) -> Result<ExitCode, Error> {
    let mut scene = Scene::load(&args.scene)?;
    let targets = load_targets(&args.targets)?;
    let cfg = FitConfig {
        loss: LossConfig {
            lambda_dssim: args.lambda_dssim,
            lambda_dist: args.lambda_dist,
            ..Default::default()
        },
        eval_interval: args.eval_interval,
        background: args.bg,
        ..Default::default()
    };
    let report =
        gvkf::with_thread_cap(threads, || fit(&mut scene, &targets, args.iters, &cfg))?;
    for (i, loss) in report.history.iter().enumerate() {
        let iter = i + 1;
        if iter % 100 == 0 || iter == report.history.len() {
            println!("iter {iter:>6}  loss {loss:.6}");
        }
    }
    for (iter, stats) in &report.evaluations {
        println!(
            "voxel evaluation at iter {iter}: {} subdivided, {} pruned",
            stats.subdivided, stats.pruned
        );
    }
    scene.save(&args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> ExitCode {
    let all_ok = gvkf::checks::run_report(args.self_test_negate, |name, outcome| match outcome {
        Ok(()) => println!("pass  {name}"),
        Err(msg) => println!("FAIL  {name}: {msg}"),
    });
    if all_ok {
        println!("all properties passed");
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_make_scene(args: MakeSceneArgs, seed: u64) -> Result<ExitCode, Error> {
    let scene = match args.kind {
        SceneKind::Sphere => {
            make_sphere_scene(args.count, args.radius, args.scale, args.opacity, args.voxel_size)?
        }
        SceneKind::Wall => make_wall_scene(1.0, 0.02, 2.0, args.scale, args.opacity, args.voxel_size)?,
        SceneKind::Single => make_single_scene(args.scale, args.opacity, args.voxel_size)?,
        SceneKind::NeuralSphere => {
            make_neural_sphere_scene(args.count, args.radius, args.voxel_size.max(0.1), seed)?
        }
    };
    scene.save(&args.out)?;
    if let Some(cam_path) = args.camera_out {
        let camera = Camera::new(
            nalgebra::Vector3::new(0.0, 0.0, -3.2),
            nalgebra::Vector3::zeros(),
            nalgebra::Vector3::new(0.0, 1.0, 0.0),
            50.0,
            129,
            129,
            0.01,
            50.0,
        )?;
        gvkf::scene::save_camera(&camera, cam_path)?;
    }
    println!("scene written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}
