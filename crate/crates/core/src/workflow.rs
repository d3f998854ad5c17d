//! Run configuration and the synthetic fit-and-evaluate pipeline shared by
//! the command-line tool and the test suites.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{PanoramaCamera, SatelliteCamera, Vec3, WorldFrame};
use crate::map::Map;
use crate::optimize::{evaluate_fit, fit_density, EvalReport, FitConfig, FitResult, Observation};
use crate::render::{render_panorama, RenderBuffers, SatelliteView};
use crate::supervise::{LossWeights, Targets};
use crate::synth::{self, Scene, SceneSpec};
use crate::volume::{DensityVolume, Resolution};
use crate::{Error, Result};

/// Panorama size and camera height used for every configured view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PanoramaDefaults {
    pub height_px: usize,
    pub width_px: usize,
    pub camera_height_m: f64,
}

impl Default for PanoramaDefaults {
    fn default() -> Self {
        Self {
            height_px: 128,
            width_px: 512,
            camera_height_m: 2.0,
        }
    }
}

/// Ground position of a configured panorama.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewPose {
    pub e: f64,
    pub n: f64,
    /// Overrides the default camera height.
    #[serde(default)]
    pub u: Option<f64>,
    #[serde(default)]
    pub heading_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must match the scene's frame when given.
    #[serde(default)]
    pub frame: Option<WorldFrame>,
    /// Defaults to a 256x256 image covering the frame.
    #[serde(default)]
    pub satellite: Option<SatelliteCamera>,
    #[serde(default)]
    pub panorama: PanoramaDefaults,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    /// Scene file, relative to the configuration file, or the name of a
    /// bundled gallery scene.
    pub scene: String,
    pub train_views: Vec<ViewPose>,
    #[serde(default)]
    pub heldout_views: Vec<ViewPose>,
    /// Relative to the configuration file. The command line may override it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// A parsed configuration with its scene loaded and paths resolved.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub spec: SceneSpec,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Parses `text` as if it were read from `origin`, resolving relative
    /// paths against `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<LoadedConfig> {
        let fail = |message: String| Error::Config {
            path: origin.to_path_buf(),
            message,
        };
        let config: RunConfig = serde_json::from_str(text).map_err(|e| fail(e.to_string()))?;
        let spec = load_scene(&config.scene, base).map_err(|e| fail(format!("scene: {e}")))?;
        if let Some(frame) = config.frame {
            if frame != spec.frame {
                return Err(fail(format!(
                    "frame {frame:?} differs from the scene frame {:?}",
                    spec.frame
                )));
            }
        }
        config.validate().map_err(|e| fail(e.to_string()))?;
        let output_dir = config.output_dir.as_ref().map(|p| base.join(p));
        Ok(LoadedConfig {
            config,
            spec,
            output_dir,
        })
    }

    fn validate(&self) -> Result<()> {
        self.fit_config().validate()?;
        let p = &self.panorama;
        if p.height_px == 0 || p.width_px == 0 {
            return Err(Error::domain("panorama size must be positive"));
        }
        if !(p.camera_height_m.is_finite() && p.camera_height_m > 0.0) {
            return Err(Error::domain("panorama.camera_height_m must be positive"));
        }
        if self.train_views.is_empty() {
            return Err(Error::domain("train_views must list at least one view"));
        }
        for (i, v) in self.train_views.iter().chain(&self.heldout_views).enumerate() {
            let ok = [v.e, v.n, v.u.unwrap_or(1.0), v.heading_rad]
                .iter()
                .all(|x| x.is_finite());
            if !ok {
                return Err(Error::domain(format!("view {i} has a non-finite coordinate")));
            }
        }
        if let Some(s) = &self.satellite {
            s.validate()?;
        }
        Ok(())
    }

    /// The `fit` section with the top-level weights and seed filled in.
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            weights: self.weights,
            seed: self.seed,
            ..self.fit.clone()
        }
    }

    pub fn satellite_camera(&self, frame: &WorldFrame) -> SatelliteCamera {
        self.satellite
            .unwrap_or_else(|| SatelliteCamera::covering(frame, 256, 256))
    }

    pub fn camera(&self, pose: &ViewPose) -> PanoramaCamera {
        let p = &self.panorama;
        PanoramaCamera::new(
            Vec3::new(pose.e, pose.n, pose.u.unwrap_or(p.camera_height_m)),
            p.height_px,
            p.width_px,
            pose.heading_rad,
        )
    }
}

/// Reads a scene file, falling back to the bundled gallery when `name` is
/// not a file.
pub fn load_scene(name: &str, base: &Path) -> Result<SceneSpec> {
    let path = base.join(name);
    if path.is_file() {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        return SceneSpec::from_json(&text).map_err(|e| match e {
            Error::Format {
                offset, message, ..
            } => Error::format(path.display().to_string(), offset, message),
            other => other,
        });
    }
    synth::gallery_scene(name).map_err(|_| {
        Error::domain(format!(
            "{} is neither a file nor a bundled scene",
            path.display()
        ))
    })
}

/// A synthetic scene paired with its rendered overhead image.
#[derive(Debug, Clone)]
pub struct SceneSetup {
    pub scene: Scene,
    pub satellite: SatelliteView,
}

impl SceneSetup {
    pub fn new(spec: SceneSpec, sat_cam: SatelliteCamera) -> Result<Self> {
        let image = synth::render_satellite(&spec, &sat_cam)?;
        Ok(Self {
            scene: Scene::new(spec)?,
            satellite: SatelliteView::new(image, sat_cam)?,
        })
    }

    pub fn frame(&self) -> &WorldFrame {
        self.scene.frame()
    }

    pub fn ground_truth(&self, res: Resolution) -> Result<DensityVolume> {
        synth::bake(&self.scene, res)
    }

    /// Supervision for a training panorama. Depth comes from the analytic
    /// oracle and color from the copy-paste render of `truth`. Both are left
    /// unsupervised (NaN) wherever the oracle sees nothing inside the
    /// footprint, which leaves those pixels to the sky-mask term.
    pub fn training_view(
        &self,
        truth: &DensityVolume,
        cam: PanoramaCamera,
        samples: usize,
    ) -> Result<Observation> {
        let oracle = synth::oracle_for(&self.scene, &cam);
        let copy = render_panorama(truth, &self.satellite, &cam, samples)?;
        let mut depth = oracle.depth;
        let mut color = copy.color;
        for (i, &o) in oracle.opacity.data().iter().enumerate() {
            if o == 0.0 {
                depth.data_mut()[i] = f64::NAN;
                color.data_mut()[3 * i..3 * i + 3].fill(f64::NAN);
            }
        }
        Ok(Observation {
            camera: cam,
            sky_mask: Some(oracle.sky_mask),
            targets: Targets {
                depth: Some(depth),
                opacity: None,
                color: Some(color),
            },
        })
    }

    /// Fully specified targets for scoring a held-out panorama.
    ///
    /// Depth is the raw depth an exact cube would render, the hit distance
    /// times the oracle opacity. A ray that leaves the cube before reaching
    /// the ground therefore scores against 0.
    pub fn heldout_view(
        &self,
        truth: &DensityVolume,
        cam: PanoramaCamera,
        samples: usize,
    ) -> Result<Observation> {
        let oracle = synth::oracle_for(&self.scene, &cam);
        let copy = render_panorama(truth, &self.satellite, &cam, samples)?;
        let (h, w) = (cam.height_px, cam.width_px);
        let depth = Map::from_fn(h, w, 1, |y, x, _| {
            oracle.depth.get(y, x, 0) * oracle.opacity.get(y, x, 0)
        });
        Ok(Observation {
            camera: cam,
            sky_mask: Some(oracle.sky_mask),
            targets: Targets {
                depth: Some(depth),
                opacity: Some(oracle.opacity),
                color: Some(copy.color),
            },
        })
    }
}

/// Everything produced by one configured fit.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub setup: SceneSetup,
    pub fit: FitResult,
    pub train: Vec<Observation>,
    pub heldout: Vec<Observation>,
    /// Present when the configuration lists held-out views.
    pub evaluation: Option<(EvalReport, Vec<RenderBuffers>)>,
}

pub fn run(loaded: &LoadedConfig) -> Result<RunOutput> {
    let cfg = &loaded.config;
    let fit_cfg = cfg.fit_config();
    let setup = SceneSetup::new(
        loaded.spec.clone(),
        cfg.satellite_camera(&loaded.spec.frame),
    )?;
    let truth = setup.ground_truth(fit_cfg.resolution)?;
    let samples = fit_cfg.samples_per_ray;
    let train = cfg
        .train_views
        .iter()
        .map(|p| setup.training_view(&truth, cfg.camera(p), samples))
        .collect::<Result<Vec<_>>>()?;
    let heldout = cfg
        .heldout_views
        .iter()
        .map(|p| setup.heldout_view(&truth, cfg.camera(p), samples))
        .collect::<Result<Vec<_>>>()?;
    let fit = fit_density(&setup.satellite, setup.frame(), &train, &fit_cfg)?;
    let evaluation = if heldout.is_empty() {
        None
    } else {
        Some(evaluate_fit(&fit.volume, &setup.satellite, &heldout, samples)?)
    };
    Ok(RunOutput {
        setup,
        fit,
        train,
        heldout,
        evaluation,
    })
}

/// Depth normalized by the cube diagonal for PNG export.
pub fn depth_png(depth: &Map, frame: &WorldFrame) -> Map {
    let diag = (frame.extent_e.powi(2) + frame.extent_n.powi(2) + frame.max_height.powi(2)).sqrt();
    crate::io::depth_preview(depth, diag)
}
