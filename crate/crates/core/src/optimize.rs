//! Per-scene density fitting by adaptive-moment gradient descent.
//!
//! Density is parameterized as `softplus(raw)` so it never goes negative.
//! Every step traces a seeded subset of the pooled panorama rays, pulls the
//! loss derivatives back to the grid through the fused adjoint kernel and
//! applies one bias-corrected moment update to the raw parameters.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{panorama_ray_grid, PanoramaCamera, Ray, WorldFrame};
use crate::error::{Error, Result};
use crate::map::Map;
use crate::metrics::{self, MetricReport};
use crate::render::{accumulate, render_panorama, PixelAdjoint, RenderBuffers, SatelliteView};
use crate::supervise::{recon_entry, smoothness_loss, snop_pixel, LossWeights, SkyMask, Targets};
use crate::volume::{DensityVolume, Resolution, DEFAULT_GROUND_DENSITY};

pub const DEFAULT_RAYS_PER_STEP: usize = 32_768;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn default_init_raw() -> f64 {
    softplus_inverse(1e-2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub step_size: f64,
    /// First and second moment decay rates.
    pub moment_decays: [f64; 2],
    pub epsilon: f64,
    /// Supplied by the top level of a run configuration, never by its `fit` section.
    #[serde(skip)]
    pub weights: LossWeights,
    pub samples_per_ray: usize,
    /// Rays traced per step, pooled over all observations. When the pool is
    /// no larger than this, every ray is used every step.
    pub rays_per_step: usize,
    #[serde(skip)]
    pub seed: u64,
    pub init_raw: f64,
    pub resolution: Resolution,
    pub ground_density: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            step_size: 5e-2,
            moment_decays: [0.0, 0.999],
            epsilon: 1e-8,
            weights: LossWeights::default(),
            samples_per_ray: 100,
            rays_per_step: DEFAULT_RAYS_PER_STEP,
            seed: 0,
            init_raw: default_init_raw(),
            resolution: Resolution::default(),
            ground_density: DEFAULT_GROUND_DENSITY,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::domain(format!("step_size {} must be positive", self.step_size)));
        }
        for b in self.moment_decays {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::domain(format!("moment decay {b} must lie in [0, 1)")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::domain("epsilon must be positive"));
        }
        if self.samples_per_ray == 0 || self.rays_per_step == 0 {
            return Err(Error::domain("samples_per_ray and rays_per_step must be at least 1"));
        }
        if !self.init_raw.is_finite() {
            return Err(Error::domain("init_raw must be finite"));
        }
        self.weights.validate()
    }
}

/// Ground-level supervision for one panorama.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub camera: PanoramaCamera,
    pub sky_mask: Option<SkyMask>,
    pub targets: Targets,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.camera.height_px, self.camera.width_px);
        if self.targets.is_empty() && self.sky_mask.is_none() {
            return Err(Error::domain("observation has neither targets nor a sky mask"));
        }
        if let Some(m) = &self.sky_mask {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::domain(format!(
                    "sky mask is {}x{}, panorama is {h}x{w}",
                    m.height(),
                    m.width()
                )));
            }
        }
        let checks = [
            (&self.targets.depth, 1, "depth"),
            (&self.targets.opacity, 1, "opacity"),
            (&self.targets.color, 3, "color"),
        ];
        for (t, c, name) in checks {
            if let Some(t) = t {
                if t.shape() != (h, w, c) {
                    return Err(Error::domain(format!(
                        "{name} target has shape {:?}, expected {:?}",
                        t.shape(),
                        (h, w, c)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Loss terms evaluated at the parameters entering one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub total: f64,
    pub snop: f64,
    pub depth: f64,
    pub opacity: f64,
    pub color: f64,
    pub smooth: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub volume: DensityVolume,
    pub trace: Vec<TraceEntry>,
}

/// A pooled ray with where its supervision lives.
#[derive(Clone, Copy)]
struct RayRef {
    obs: usize,
    pixel: usize,
}

/// Reciprocal counts of the supervised entries in one sampled batch.
#[derive(Default, Clone, Copy)]
struct Norms {
    sky: f64,
    ground: f64,
    depth: f64,
    opacity: f64,
    color: f64,
}

fn recip(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        1.0 / n as f64
    }
}

fn batch_norms(obs: &[Observation], batch: &[RayRef]) -> Norms {
    let (mut sky, mut ground, mut depth, mut opacity, mut color) = (0, 0, 0, 0, 0);
    for r in batch {
        let o = &obs[r.obs];
        if let Some(m) = &o.sky_mask {
            if m.is_sky(r.pixel) {
                sky += 1;
            } else {
                ground += 1;
            }
        }
        if let Some(t) = &o.targets.depth {
            depth += t.data()[r.pixel].is_finite() as usize;
        }
        if let Some(t) = &o.targets.opacity {
            opacity += t.data()[r.pixel].is_finite() as usize;
        }
        if let Some(t) = &o.targets.color {
            color += t.pixel(r.pixel).iter().filter(|v| v.is_finite()).count();
        }
    }
    Norms {
        sky: recip(sky),
        ground: recip(ground),
        depth: recip(depth),
        opacity: recip(opacity),
        color: recip(color),
    }
}

/// Pixel loss terms `[snop, depth, opacity, color]` and their adjoint.
fn pixel_terms(
    o: &Observation,
    pixel: usize,
    out: &crate::render::PixelOut,
    w: &LossWeights,
    n: &Norms,
) -> (PixelAdjoint, [f64; 4]) {
    let mut adj = PixelAdjoint::default();
    let mut terms = [0.0; 4];
    if let Some(m) = &o.sky_mask {
        if w.w_snop != 0.0 {
            let sky = m.is_sky(pixel);
            let (l, g) = snop_pixel(out.opacity, sky, if sky { n.sky } else { n.ground });
            terms[0] = w.w_snop * l;
            adj.opacity += w.w_snop * g;
        }
    }
    if let Some(t) = &o.targets.depth {
        let v = t.data()[pixel];
        if v.is_finite() {
            let (l, g) = recon_entry(out.depth, v, w, n.depth);
            terms[1] = l;
            adj.depth += g;
        }
    }
    if let Some(t) = &o.targets.opacity {
        let v = t.data()[pixel];
        if v.is_finite() {
            let (l, g) = recon_entry(out.opacity, v, w, n.opacity);
            terms[2] = l;
            adj.opacity += g;
        }
    }
    if let Some(t) = &o.targets.color {
        for (c, &v) in t.pixel(pixel).iter().enumerate() {
            if v.is_finite() {
                let (l, g) = recon_entry(out.color[c], v, w, n.color);
                terms[3] += l;
                adj.color[c] += g;
            }
        }
    }
    (adj, terms)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, raw: &mut [f64], grad: &[f64], frozen: impl Fn(usize) -> bool, cfg: &FitConfig) {
        self.t += 1;
        let [b1, b2] = cfg.moment_decays;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..raw.len() {
            if frozen(i) {
                continue;
            }
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            raw[i] -= cfg.step_size * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

fn density_of(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&r| softplus(r)).collect()
}

/// Fits a density volume to the observations. Zero steps returns the
/// initialized volume.
pub fn fit_density(
    sat: &SatelliteView,
    frame: &WorldFrame,
    observations: &[Observation],
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if observations.is_empty() {
        return Err(Error::domain("fitting needs at least one observation"));
    }
    for (i, o) in observations.iter().enumerate() {
        o.validate()
            .map_err(|e| Error::domain(format!("observation {i}: {e}")))?;
    }
    let res = cfg.resolution;
    let mut raw = vec![cfg.init_raw; res.len()];
    let mut vol = DensityVolume::from_grid(*frame, res, cfg.ground_density, density_of(&raw))?;

    let mut rays: Vec<Ray> = Vec::new();
    let mut refs: Vec<RayRef> = Vec::new();
    for (oi, o) in observations.iter().enumerate() {
        let grid = panorama_ray_grid(&o.camera, frame)?;
        refs.extend((0..grid.len()).map(|pixel| RayRef { obs: oi, pixel }));
        rays.extend(grid);
    }
    let pooled = rays.len();
    let use_all = pooled <= cfg.rays_per_step;
    let all_norms = batch_norms(observations, &refs);

    let mut adam = Adam::new(res.len());
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut grad = vec![0.0; res.len()];
    let mut batch_rays: Vec<Ray> = Vec::new();
    let mut batch_refs: Vec<RayRef> = Vec::new();
    for step in 0..cfg.steps {
        let (step_rays, step_refs, norms) = if use_all {
            (&rays[..], &refs[..], all_norms)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(step as u64);
            let mut picked = index::sample(&mut rng, pooled, cfg.rays_per_step).into_vec();
            picked.sort_unstable();
            batch_rays.clear();
            batch_refs.clear();
            batch_rays.extend(picked.iter().map(|&i| rays[i]));
            batch_refs.extend(picked.iter().map(|&i| refs[i]));
            let norms = batch_norms(observations, &batch_refs);
            (&batch_rays[..], &batch_refs[..], norms)
        };

        grad.iter_mut().for_each(|g| *g = 0.0);
        let terms = accumulate(
            &vol,
            sat,
            step_rays,
            cfg.samples_per_ray,
            |i, out| {
                let r = step_refs[i];
                pixel_terms(&observations[r.obs], r.pixel, out, &cfg.weights, &norms)
            },
            &mut grad,
        );
        let mut entry = TraceEntry {
            step,
            ..TraceEntry::default()
        };
        for t in &terms {
            entry.snop += t[0];
            entry.depth += t[1];
            entry.opacity += t[2];
            entry.color += t[3];
        }
        let (smooth, smooth_grad) = smoothness_loss(&vol, cfg.weights.w_smooth);
        entry.smooth = smooth;
        entry.total = entry.snop + entry.depth + entry.opacity + entry.color + entry.smooth;
        if !entry.total.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: entry.total,
            });
        }
        trace.push(entry);

        for (i, g) in grad.iter_mut().enumerate() {
            *g = (*g + smooth_grad[i]) * sigmoid(raw[i]);
        }
        adam.step(&mut raw, &grad, |i| vol.is_pinned(i), cfg);
        if raw.iter().any(|r| !r.is_finite()) {
            return Err(Error::Diverged {
                step,
                loss: f64::NAN,
            });
        }
        vol.set_grid(&density_of(&raw));
    }
    Ok(FitResult { volume: vol, trace })
}

/// Depth maps are scored as images after scaling meters by this factor
/// times `255 / cube diagonal`.
fn depth_scale(frame: &WorldFrame) -> f64 {
    let d = (frame.extent_e.powi(2) + frame.extent_n.powi(2) + frame.max_height.powi(2)).sqrt();
    255.0 / d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub depth_rmse_m: Option<f64>,
    /// Depth scored as an image on `[0, 255]` over the cube diagonal.
    pub depth: Option<MetricReport>,
    pub opacity: Option<MetricReport>,
    pub color: Option<MetricReport>,
    pub mean_sky_opacity: Option<f64>,
    pub mean_nonsky_opacity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    /// Root of the mean squared depth error pooled over all views.
    pub depth_rmse_m: Option<f64>,
    pub depth_psnr: Option<f64>,
    pub depth_ssim: Option<f64>,
    pub color_rmse: Option<f64>,
    pub color_psnr: Option<f64>,
    pub color_ssim: Option<f64>,
    pub color_sd: Option<f64>,
    pub opacity_rmse: Option<f64>,
    pub mean_sky_opacity: Option<f64>,
    pub mean_nonsky_opacity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewReport>,
    pub aggregate: AggregateReport,
}

fn finite_target(t: &Map, what: &str) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain(format!("held-out {what} target has unsupervised entries")))
    }
}

/// Scores one rendered view against its observation.
pub fn score_view(pred: &RenderBuffers, obs: &Observation, frame: &WorldFrame) -> Result<ViewReport> {
    obs.validate()?;
    let t = &obs.targets;
    let mut report = ViewReport {
        depth_rmse_m: None,
        depth: None,
        opacity: None,
        color: None,
        mean_sky_opacity: None,
        mean_nonsky_opacity: None,
    };
    if let Some(d) = &t.depth {
        finite_target(d, "depth")?;
        report.depth_rmse_m = Some(metrics::rmse_psnr(&pred.depth, d)?.0);
        let s = depth_scale(frame);
        report.depth = Some(metrics::report(&pred.depth.scaled(s), &d.scaled(s))?);
    }
    if let Some(o) = &t.opacity {
        finite_target(o, "opacity")?;
        report.opacity = Some(metrics::report(&pred.opacity.scaled(255.0), &o.scaled(255.0))?);
    }
    if let Some(c) = &t.color {
        finite_target(c, "color")?;
        report.color = Some(metrics::report(&pred.color.scaled(255.0), &c.scaled(255.0))?);
    }
    if let Some(m) = &obs.sky_mask {
        let (mut sky, mut ground) = ((0.0, 0usize), (0.0, 0usize));
        for (i, &o) in pred.opacity.data().iter().enumerate() {
            let acc = if m.is_sky(i) { &mut sky } else { &mut ground };
            acc.0 += o;
            acc.1 += 1;
        }
        report.mean_sky_opacity = (sky.1 > 0).then(|| sky.0 / sky.1 as f64);
        report.mean_nonsky_opacity = (ground.1 > 0).then(|| ground.0 / ground.1 as f64);
    }
    Ok(report)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn pooled_rmse(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    mean_of(values.map(|v| v.map(|r| r * r))).map(f64::sqrt)
}

/// Combines per-view reports. RMSE values are pooled as root mean squares,
/// every other field is a plain mean over the views that report it.
pub fn aggregate(views: &[ViewReport]) -> AggregateReport {
    AggregateReport {
        depth_rmse_m: pooled_rmse(views.iter().map(|v| v.depth_rmse_m)),
        depth_psnr: mean_of(views.iter().map(|v| v.depth.as_ref().map(|r| r.psnr))),
        depth_ssim: mean_of(views.iter().map(|v| v.depth.as_ref().map(|r| r.ssim))),
        color_rmse: pooled_rmse(views.iter().map(|v| v.color.as_ref().map(|r| r.rmse))),
        color_psnr: mean_of(views.iter().map(|v| v.color.as_ref().map(|r| r.psnr))),
        color_ssim: mean_of(views.iter().map(|v| v.color.as_ref().map(|r| r.ssim))),
        color_sd: mean_of(views.iter().map(|v| v.color.as_ref().map(|r| r.sd))),
        opacity_rmse: pooled_rmse(views.iter().map(|v| v.opacity.as_ref().map(|r| r.rmse))),
        mean_sky_opacity: mean_of(views.iter().map(|v| v.mean_sky_opacity)),
        mean_nonsky_opacity: mean_of(views.iter().map(|v| v.mean_nonsky_opacity)),
    }
}

/// Renders every held-out view and scores it against its targets.
pub fn evaluate_fit(
    vol: &DensityVolume,
    sat: &SatelliteView,
    heldout: &[Observation],
    samples: usize,
) -> Result<(EvalReport, Vec<RenderBuffers>)> {
    if heldout.is_empty() {
        return Err(Error::domain("evaluation needs at least one held-out view"));
    }
    let mut views = Vec::with_capacity(heldout.len());
    let mut renders = Vec::with_capacity(heldout.len());
    for obs in heldout {
        let pred = render_panorama(vol, sat, &obs.camera, samples)?;
        views.push(score_view(&pred, obs, vol.frame())?);
        renders.push(pred);
    }
    let aggregate = aggregate(&views);
    Ok((EvalReport { views, aggregate }, renders))
}
