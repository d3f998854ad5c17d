use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use cvdensity::camera::{PanoramaCamera, SatelliteCamera, Vec3, WorldFrame};
use cvdensity::io::{self, Pose};
use cvdensity::map::Map;
use cvdensity::metrics::{self, MetricReport};
use cvdensity::render::{render_panorama, render_trajectory, RenderBuffers, SatelliteView};
use cvdensity::supervise::{sky_histogram, SKY_HISTOGRAM_BINS};
use cvdensity::synth;
use cvdensity::volume::Resolution;
use cvdensity::workflow::{self, depth_png, RunConfig};
use cvdensity::{Error, Result};

#[derive(Parser)]
#[command(name = "cvdensity", version, about = "Explicit density volumes from overhead imagery and ground panoramas")]
struct Cli {
    /// Seed for every random choice. Overrides the scene or config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for rendering and fitting. Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bake a scene and write its overhead image, volume and oracle views.
    Synth {
        /// Scene JSON file or bundled scene name.
        #[arg(long)]
        scene: String,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Baked volume nodes as nx,ny,nz.
        #[arg(long, value_parser = parse_resolution, default_value = "256,256,65")]
        resolution: Resolution,
        /// Oracle view as e,n,u,heading; repeatable.
        #[arg(long = "pose", value_parser = parse_pose, allow_hyphen_values = true)]
        poses: Vec<Pose>,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        /// Samples per ray for the copy-paste color target.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Fit a density volume to the views listed in a run configuration.
    Fit {
        /// Run configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the configuration's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one panorama from a volume and an overhead image.
    Render {
        /// S2DV volume file.
        #[arg(long)]
        volume: PathBuf,
        /// Overhead PNG covering the volume footprint.
        #[arg(long)]
        sat: PathBuf,
        /// Camera as e,n,u,heading.
        #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
        pose: Pose,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Render a panorama for every pose of a CSV path.
    Trajectory {
        /// S2DV volume file.
        #[arg(long)]
        volume: PathBuf,
        /// Overhead PNG covering the volume footprint.
        #[arg(long)]
        sat: PathBuf,
        /// CSV with columns frame,e,n,u,heading_rad.
        #[arg(long)]
        path: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Compare same-named PNG and S2DM files of two directories.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// JSON report to write.
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_numbers(s: &str, n: usize) -> std::result::Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != n || v.iter().any(|x| !x.is_finite()) {
        return Err(format!("expected {n} finite comma-separated numbers"));
    }
    Ok(v)
}

fn parse_pose(s: &str) -> std::result::Result<Pose, String> {
    let v = parse_numbers(s, 4)?;
    Ok(Pose {
        frame: 0,
        e: v[0],
        n: v[1],
        u: v[2],
        heading_rad: v[3],
    })
}

fn parse_resolution(s: &str) -> std::result::Result<Resolution, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [nx, ny, nz] => Ok(Resolution::new(nx, ny, nz)),
        _ => Err("expected nx,ny,nz".into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(0) => Err(Error::domain("--threads must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::domain(e.to_string()))
            .and_then(|pool| pool.install(|| dispatch(&cli))),
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cvdensity: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth {
            scene,
            out,
            resolution,
            poses,
            height,
            width,
            samples,
        } => synth_cmd(scene, out, *resolution, poses, (*height, *width), *samples, cli.seed),
        Command::Fit { config, out } => fit_cmd(config, out.as_deref(), cli.seed),
        Command::Render {
            volume,
            sat,
            pose,
            out,
            height,
            width,
            samples,
        } => {
            let (vol, view) = load_scene_pair(volume, sat)?;
            create_dir(out)?;
            let buffers = render_panorama(&vol, &view, &pose.camera(*height, *width), *samples)?;
            write_buffers(out, "", &buffers, vol.frame())
        }
        Command::Trajectory {
            volume,
            sat,
            path,
            out,
            height,
            width,
            samples,
        } => {
            let (vol, view) = load_scene_pair(volume, sat)?;
            let poses = io::read_poses(path)?;
            let cams: Vec<PanoramaCamera> = poses.iter().map(|p| p.camera(*height, *width)).collect();
            let frames = render_trajectory(&vol, &view, &cams, *samples)?;
            create_dir(out)?;
            for (pose, buffers) in poses.iter().zip(&frames) {
                let stem = format!("frame_{:04}", pose.frame);
                io::write_png(&out.join(format!("{stem}.png")), &buffers.color)?;
                io::write_map(&out.join(format!("{stem}_depth.s2dm")), &buffers.depth)?;
                io::write_png(
                    &out.join(format!("{stem}_depth.png")),
                    &depth_png(&buffers.depth, vol.frame()),
                )?;
            }
            Ok(())
        }
        Command::Eval {
            pred,
            truth,
            report,
        } => eval_cmd(pred, truth, report),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::domain(e.to_string()))?;
    text.push('\n');
    io::write_bytes(path, text.as_bytes())
}

/// The overhead image is assumed to cover the volume's footprint exactly.
fn load_scene_pair(volume: &Path, sat: &Path) -> Result<(cvdensity::volume::DensityVolume, SatelliteView)> {
    let vol = io::read_volume(volume)?;
    let image = io::read_png_rgb(sat)?;
    let cam = SatelliteCamera::covering(vol.frame(), image.height(), image.width());
    Ok((vol, SatelliteView::new(image, cam)?))
}

fn write_buffers(dir: &Path, prefix: &str, b: &RenderBuffers, frame: &WorldFrame) -> Result<()> {
    io::write_map(&dir.join(format!("{prefix}depth.s2dm")), &b.depth)?;
    io::write_map(&dir.join(format!("{prefix}opacity.s2dm")), &b.opacity)?;
    io::write_map(&dir.join(format!("{prefix}color.s2dm")), &b.color)?;
    io::write_png(&dir.join(format!("{prefix}color.png")), &b.color)?;
    io::write_png(&dir.join(format!("{prefix}opacity.png")), &b.opacity)?;
    io::write_png(&dir.join(format!("{prefix}depth.png")), &depth_png(&b.depth, frame))
}

fn synth_cmd(
    scene: &str,
    out: &Path,
    res: Resolution,
    poses: &[Pose],
    (height, width): (usize, usize),
    samples: usize,
    seed: Option<u64>,
) -> Result<()> {
    let mut spec = workflow::load_scene(scene, Path::new("."))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let sat_cam = SatelliteCamera::covering(&spec.frame, 256, 256);
    let scene = synth::Scene::new(spec.clone())?;
    let volume = synth::bake(&scene, res)?;
    create_dir(out)?;
    write_json(&out.join("scene.json"), &spec)?;
    let satellite = SatelliteView::new(synth::render_satellite(&spec, &sat_cam)?, sat_cam)?;
    io::write_png(&out.join("satellite.png"), &satellite.image)?;
    io::write_volume(&out.join("volume.s2dv"), &volume)?;
    let default_pose = [Pose {
        frame: 0,
        e: 0.0,
        n: 0.0,
        u: 2.0,
        heading_rad: 0.0,
    }];
    let poses = if poses.is_empty() { &default_pose[..] } else { poses };
    for (i, pose) in poses.iter().enumerate() {
        let cam = PanoramaCamera::new(Vec3::new(pose.e, pose.n, pose.u), height, width, pose.heading_rad);
        let oracle = synth::oracle_for(&scene, &cam);
        let stem = |s: &str| out.join(format!("view_{i:02}_{s}"));
        io::write_map(&stem("depth.s2dm"), &oracle.depth)?;
        io::write_map(&stem("opacity.s2dm"), &oracle.opacity)?;
        io::write_png(&stem("depth.png"), &depth_png(&oracle.depth, &spec.frame))?;
        io::write_png(&stem("hit_color.png"), &oracle.hit_color)?;
        let copy = render_panorama(&volume, &satellite, &cam, samples)?;
        io::write_png(&stem("copy_paste_color.png"), &copy.color)?;
        io::write_map(&stem("copy_paste_color.s2dm"), &copy.color)?;
        let mask = oracle.sky_mask.to_map();
        io::write_map(&stem("sky.s2dm"), &mask)?;
        io::write_png(&stem("sky.png"), &mask)?;
        if oracle.sky_mask.sky_count() > 0 {
            let hist = sky_histogram(&oracle.hit_color, &oracle.sky_mask, SKY_HISTOGRAM_BINS)?;
            io::write_histogram(&stem("sky.s2dh"), &hist)?;
        }
    }
    Ok(())
}

fn fit_cmd(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut loaded = RunConfig::load(config)?;
    if let Some(s) = seed {
        loaded.config.seed = s;
    }
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| loaded.output_dir.clone())
        .ok_or_else(|| Error::domain(format!("{}: no --out given and no output_dir set", config.display())))?;
    let run = workflow::run(&loaded)?;
    create_dir(&out)?;
    let frame = *run.setup.frame();
    write_json(&out.join("config.json"), &loaded.config)?;
    io::write_png(&out.join("satellite.png"), &run.setup.satellite.image)?;
    io::write_volume(&out.join("volume.s2dv"), &run.fit.volume)?;
    io::write_trace(&out.join("loss.csv"), &run.fit.trace)?;
    let samples = loaded.config.fit.samples_per_ray;
    for (i, obs) in run.train.iter().enumerate() {
        let b = render_panorama(&run.fit.volume, &run.setup.satellite, &obs.camera, samples)?;
        write_buffers(&out, &format!("train_{i:02}_"), &b, &frame)?;
    }
    if let Some((report, renders)) = &run.evaluation {
        for (i, b) in renders.iter().enumerate() {
            write_buffers(&out, &format!("heldout_{i:02}_"), b, &frame)?;
        }
        write_json(&out.join("report.json"), report)?;
    }
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum FileScore {
    /// 8-bit images compared on the 0..255 scale.
    Image(MetricReport),
    /// Float maps compared in their stored units.
    Map { rmse: f64, max_abs: f64 },
}

#[derive(Serialize)]
struct EvalSummary {
    files: BTreeMap<String, FileScore>,
    /// Mean over the image entries.
    images: Option<MetricReport>,
}

fn eval_cmd(pred: &Path, truth: &Path, report: &Path) -> Result<()> {
    let entries = std::fs::read_dir(truth).map_err(|e| Error::io(truth, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(truth, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if (name.ends_with(".png") || name.ends_with(".s2dm")) && pred.join(&name).is_file() {
            names.push(name);
        }
    }
    if names.is_empty() {
        return Err(Error::domain(format!(
            "no PNG or S2DM file of {} has a counterpart in {}",
            truth.display(),
            pred.display()
        )));
    }
    names.sort();
    let mut files = BTreeMap::new();
    let mut images = Vec::new();
    for name in names {
        let (p, t) = (pred.join(&name), truth.join(&name));
        let score = if name.ends_with(".png") {
            let (a, b) = (io::read_png_rgb(&p)?.scaled(255.0), io::read_png_rgb(&t)?.scaled(255.0));
            let r = metrics::report(&a, &b).map_err(|e| named(e, &p))?;
            images.push(r.clone());
            FileScore::Image(r)
        } else {
            let (a, b) = (io::read_map(&p)?, io::read_map(&t)?);
            map_score(&a, &b).map_err(|e| named(e, &p))?
        };
        files.insert(name, score);
    }
    let images = (!images.is_empty()).then(|| mean_report(&images));
    write_json(report, &EvalSummary { files, images })
}

fn named(e: Error, path: &Path) -> Error {
    match e {
        Error::Domain(m) => Error::domain(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn map_score(a: &Map, b: &Map) -> Result<FileScore> {
    let (rmse, _) = metrics::rmse_psnr(a, b)?;
    let max_abs = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(FileScore::Map { rmse, max_abs })
}

fn mean_report(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricReport {
        rmse: mean(|r| r.rmse),
        psnr: mean(|r| r.psnr),
        ssim: mean(|r| r.ssim),
        sd: mean(|r| r.sd),
        per_channel: Vec::new(),
    }
}
