//! Forward volume rendering of depth, opacity and copy-paste color, and the
//! reverse-mode derivative of those buffers with respect to the density
//! grid.
//!
//! Along a ray with `S` uniform midpoint samples,
//! `alpha_i = 1 - exp(-sigma_i * delta_i)`, `T_i = prod_{j<i} (1 - alpha_j)`
//! and the per-sample weight is `w_i = T_i * alpha_i`. Depth is
//! `sum w_i d_i` (not divided by opacity), opacity is `sum w_i` and color is
//! `sum w_i c_i` where `c_i` is the overhead image sampled beneath the
//! sample point.
//!
//! Transmittance is carried in log space. Writing `tau_i = sigma_i delta_i`,
//! `w_i = T_i - T_{i+1}`, so for a loss `L` with `g_i = dL/dw_i`
//!
//! ```text
//! dL/dtau_k = g_k T_{k+1} - sum_{i>k} g_i w_i
//! ```
//!
//! which needs no division by `1 - alpha` and stays finite when samples are
//! fully opaque.

use rayon::prelude::*;

use crate::camera::{panorama_ray_grid, world_to_satellite_pixel, PanoramaCamera, Ray, Vec3};
use crate::error::{Error, Result};
use crate::map::Map;
use crate::volume::{Cell, DensityVolume};

pub const DEFAULT_SAMPLES_PER_RAY: usize = 100;

/// Rays per scatter chunk. Gradient contributions are summed chunk by chunk
/// in ray order, so results do not depend on the worker count.
const CHUNK_RAYS: usize = 512;

/// Overhead image together with its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteView {
    pub image: Map,
    pub camera: crate::camera::SatelliteCamera,
}

impl SatelliteView {
    pub fn new(image: Map, camera: crate::camera::SatelliteCamera) -> Result<Self> {
        camera.validate()?;
        if image.channels() != 3 {
            return Err(Error::domain(format!(
                "satellite image must have 3 channels, got {}",
                image.channels()
            )));
        }
        if image.height() != camera.height_px || image.width() != camera.width_px {
            return Err(Error::domain(format!(
                "satellite image is {}x{} but camera expects {}x{}",
                image.height(),
                image.width(),
                camera.height_px,
                camera.width_px
            )));
        }
        Ok(Self { image, camera })
    }

    #[inline]
    pub fn color_at(&self, p: Vec3) -> [f64; 3] {
        let (row, col) = world_to_satellite_pixel(&self.camera, p);
        self.image.bilinear_rgb(row, col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayMarchSamples {
    /// Ray parameters of the sample midpoints.
    pub t: Vec<f64>,
    /// Distance from the camera; equal to `t` for unit directions.
    pub dist: Vec<f64>,
    pub delta: Vec<f64>,
    pub points: Vec<Vec3>,
    pub sigma: Vec<f64>,
}

impl RayMarchSamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

pub fn march_ray(vol: &DensityVolume, ray: &Ray, samples: usize) -> Result<RayMarchSamples> {
    if samples == 0 {
        return Err(Error::domain("samples per ray must be at least 1"));
    }
    ray.validate()?;
    let degenerate = ray.is_degenerate();
    let delta = if degenerate {
        0.0
    } else {
        (ray.t_far - ray.t_near) / samples as f64
    };
    let mut out = RayMarchSamples {
        t: Vec::with_capacity(samples),
        dist: Vec::with_capacity(samples),
        delta: vec![delta; samples],
        points: Vec::with_capacity(samples),
        sigma: Vec::with_capacity(samples),
    };
    for i in 0..samples {
        let t = ray.t_near + (i as f64 + 0.5) * delta;
        let p = ray.at(t);
        out.t.push(t);
        out.dist.push(t);
        out.points.push(p);
        out.sigma.push(if degenerate {
            0.0
        } else {
            vol.sample_density(p)?
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub depth: f64,
    pub opacity: f64,
    /// `T_i * alpha_i` per sample.
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn composite(samples: &RayMarchSamples) -> Result<Composite> {
    let n = samples.len();
    if samples.sigma.len() != n || samples.delta.len() != n || samples.dist.len() != n {
        return Err(Error::domain("sample arrays have mismatched lengths"));
    }
    let mut out = Composite {
        depth: 0.0,
        opacity: 0.0,
        weights: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
    };
    let mut log_t = 0.0f64;
    for i in 0..n {
        let (sigma, delta) = (samples.sigma[i], samples.delta[i]);
        if !(sigma >= 0.0) || !(delta >= 0.0) {
            return Err(Error::domain(format!(
                "sample {i}: density {sigma} and step {delta} must be non-negative"
            )));
        }
        let tau = sigma * delta;
        let trans = log_t.exp();
        let alpha = -(-tau).exp_m1();
        let w = trans * alpha;
        out.transmittance.push(trans);
        out.alpha.push(alpha);
        out.weights.push(w);
        out.depth += w * samples.dist[i];
        out.opacity += w;
        log_t -= tau;
    }
    // Summation can overshoot 1 by an ulp once a ray saturates.
    out.opacity = out.opacity.min(1.0);
    Ok(out)
}

pub fn copy_paste_color(
    samples: &RayMarchSamples,
    weights: &[f64],
    sat: &SatelliteView,
) -> Result<[f64; 3]> {
    if weights.len() != samples.len() {
        return Err(Error::domain(format!(
            "{} weights for {} samples",
            weights.len(),
            samples.len()
        )));
    }
    let mut rgb = [0.0; 3];
    for (p, &w) in samples.points.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let c = sat.color_at(*p);
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
    }
    Ok(rgb)
}

/// Per-pixel outputs of one traced ray.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelOut {
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Upstream derivatives of a scalar loss with respect to one pixel's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelAdjoint {
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl PixelAdjoint {
    fn is_zero(&self) -> bool {
        self.depth == 0.0 && self.opacity == 0.0 && self.color == [0.0; 3]
    }
}

/// Reusable per-ray working memory for the fused forward/backward kernel.
#[derive(Debug, Default)]
pub(crate) struct RayScratch {
    delta: f64,
    t: Vec<f64>,
    cells: Vec<Option<Cell>>,
    tau: Vec<f64>,
    trans_next: Vec<f64>,
    weights: Vec<f64>,
    colors: Vec<[f64; 3]>,
}

pub(crate) fn trace_ray(
    vol: &DensityVolume,
    sat: &SatelliteView,
    ray: &Ray,
    samples: usize,
    scratch: &mut RayScratch,
) -> PixelOut {
    scratch.t.clear();
    scratch.cells.clear();
    scratch.tau.clear();
    scratch.trans_next.clear();
    scratch.weights.clear();
    scratch.colors.clear();
    let mut out = PixelOut::default();
    if ray.is_degenerate() {
        scratch.delta = 0.0;
        return out;
    }
    let delta = (ray.t_far - ray.t_near) / samples as f64;
    scratch.delta = delta;
    let mut log_t = 0.0f64;
    let mut trans = 1.0f64;
    for i in 0..samples {
        let t = ray.t_near + (i as f64 + 0.5) * delta;
        let p = ray.at(t);
        let cell = vol.cell_at(p);
        let sigma = cell.as_ref().map_or(0.0, |c| vol.density_in_cell(c));
        let tau = sigma * delta;
        let alpha = -(-tau).exp_m1();
        let w = trans * alpha;
        log_t -= tau;
        let next = log_t.exp();
        let color = sat.color_at(p);
        out.depth += w * t;
        out.opacity += w;
        for k in 0..3 {
            out.color[k] += w * color[k];
        }
        scratch.t.push(t);
        scratch.cells.push(cell);
        scratch.tau.push(tau);
        scratch.trans_next.push(next);
        scratch.weights.push(w);
        scratch.colors.push(color);
        trans = next;
    }
    out.opacity = out.opacity.min(1.0);
    out
}

/// Emits `(cell, dL/dsigma)` for every in-cube sample of the last traced ray.
pub(crate) fn backprop_ray(
    scratch: &RayScratch,
    adj: &PixelAdjoint,
    mut sink: impl FnMut(&Cell, f64),
) {
    if adj.is_zero() || scratch.delta == 0.0 {
        return;
    }
    // Opacity is 1 - T_end, so its derivative is T_end for every sample.
    // Keeping it out of the suffix sum avoids cancellation noise.
    let opacity_part = adj.opacity * scratch.trans_next.last().copied().unwrap_or(1.0);
    let mut suffix = 0.0f64;
    for k in (0..scratch.t.len()).rev() {
        let c = &scratch.colors[k];
        let g = adj.depth * scratch.t[k]
            + adj.color[0] * c[0]
            + adj.color[1] * c[1]
            + adj.color[2] * c[2];
        let d_tau = g * scratch.trans_next[k] - suffix + opacity_part;
        suffix += g * scratch.weights[k];
        if let Some(cell) = &scratch.cells[k] {
            let d_sigma = d_tau * scratch.delta;
            if d_sigma != 0.0 {
                sink(cell, d_sigma);
            }
        }
    }
}

/// Runs forward + backward over `rays`, letting `adjoint_of` turn each
/// pixel's outputs into upstream derivatives plus an arbitrary per-pixel
/// record. Gradients are added into `grad` in ray order.
pub(crate) fn accumulate<T, F>(
    vol: &DensityVolume,
    sat: &SatelliteView,
    rays: &[Ray],
    samples: usize,
    adjoint_of: F,
    grad: &mut [f64],
) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &PixelOut) -> (PixelAdjoint, T) + Sync,
{
    let batch_chunks = (2 * rayon::current_num_threads()).max(8);
    let mut records = Vec::with_capacity(rays.len());
    let chunks: Vec<(usize, &[Ray])> = rays
        .chunks(CHUNK_RAYS)
        .enumerate()
        .map(|(c, r)| (c * CHUNK_RAYS, r))
        .collect();
    for batch in chunks.chunks(batch_chunks) {
        let results: Vec<(Vec<(Cell, f64)>, Vec<T>)> = batch
            .par_iter()
            .map(|&(start, chunk)| {
                let mut scratch = RayScratch::default();
                let mut contribs = Vec::new();
                let mut recs = Vec::with_capacity(chunk.len());
                for (offset, ray) in chunk.iter().enumerate() {
                    let out = trace_ray(vol, sat, ray, samples, &mut scratch);
                    let (adj, rec) = adjoint_of(start + offset, &out);
                    backprop_ray(&scratch, &adj, |cell, g| contribs.push((*cell, g)));
                    recs.push(rec);
                }
                (contribs, recs)
            })
            .collect();
        for (contribs, recs) in results {
            for (cell, g) in contribs {
                vol.scatter(&cell, g, grad);
            }
            records.extend(recs);
        }
    }
    records
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderBuffers {
    pub depth: Map,
    pub opacity: Map,
    pub color: Map,
    /// Optional per-pixel per-sample compositing weights, `h * w * S` values.
    pub weights: Option<Vec<f64>>,
}

impl RenderBuffers {
    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    /// `depth / opacity` where opacity exceeds 1e-3, else 0. For display only.
    pub fn expected_depth(&self) -> Map {
        Map::from_fn(self.height(), self.width(), 1, |y, x, _| {
            let o = self.opacity.get(y, x, 0);
            if o > 1e-3 {
                self.depth.get(y, x, 0) / o
            } else {
                0.0
            }
        })
    }
}

fn check_samples(samples: usize) -> Result<()> {
    if samples == 0 {
        Err(Error::domain("samples per ray must be at least 1"))
    } else {
        Ok(())
    }
}

fn render_rays(
    vol: &DensityVolume,
    sat: &SatelliteView,
    rays: &[Ray],
    samples: usize,
) -> Vec<PixelOut> {
    rays.par_chunks(CHUNK_RAYS)
        .flat_map_iter(|chunk| {
            let mut scratch = RayScratch::default();
            chunk
                .iter()
                .map(|ray| trace_ray(vol, sat, ray, samples, &mut scratch))
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn render_panorama(
    vol: &DensityVolume,
    sat: &SatelliteView,
    cam: &PanoramaCamera,
    samples: usize,
) -> Result<RenderBuffers> {
    check_samples(samples)?;
    let rays = panorama_ray_grid(cam, vol.frame())?;
    let outs = render_rays(vol, sat, &rays, samples);
    let (h, w) = (cam.height_px, cam.width_px);
    let mut depth = Map::zeros(h, w, 1);
    let mut opacity = Map::zeros(h, w, 1);
    let mut color = Map::zeros(h, w, 3);
    for (idx, out) in outs.iter().enumerate() {
        depth.data_mut()[idx] = out.depth;
        opacity.data_mut()[idx] = out.opacity;
        color.data_mut()[idx * 3..idx * 3 + 3].copy_from_slice(&out.color);
    }
    Ok(RenderBuffers {
        depth,
        opacity,
        color,
        weights: None,
    })
}

/// Like [`render_panorama`] but also keeps every compositing weight.
pub fn render_panorama_with_weights(
    vol: &DensityVolume,
    sat: &SatelliteView,
    cam: &PanoramaCamera,
    samples: usize,
) -> Result<RenderBuffers> {
    check_samples(samples)?;
    let rays = panorama_ray_grid(cam, vol.frame())?;
    let per_ray: Vec<(PixelOut, Vec<f64>)> = rays
        .par_chunks(CHUNK_RAYS)
        .flat_map_iter(|chunk| {
            let mut scratch = RayScratch::default();
            chunk
                .iter()
                .map(|ray| {
                    let out = trace_ray(vol, sat, ray, samples, &mut scratch);
                    let mut w = scratch.weights.clone();
                    w.resize(samples, 0.0);
                    (out, w)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let (h, wd) = (cam.height_px, cam.width_px);
    let mut buffers = RenderBuffers {
        depth: Map::zeros(h, wd, 1),
        opacity: Map::zeros(h, wd, 1),
        color: Map::zeros(h, wd, 3),
        weights: Some(Vec::with_capacity(h * wd * samples)),
    };
    for (idx, (out, w)) in per_ray.into_iter().enumerate() {
        buffers.depth.data_mut()[idx] = out.depth;
        buffers.opacity.data_mut()[idx] = out.opacity;
        buffers.color.data_mut()[idx * 3..idx * 3 + 3].copy_from_slice(&out.color);
        buffers.weights.as_mut().unwrap().extend(w);
    }
    Ok(buffers)
}

/// Upstream derivatives for every pixel of a panorama render.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderAdjoint {
    pub depth: Map,
    pub opacity: Map,
    pub color: Map,
}

impl RenderAdjoint {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            depth: Map::zeros(h, w, 1),
            opacity: Map::zeros(h, w, 1),
            color: Map::zeros(h, w, 3),
        }
    }

    pub fn pixel(&self, idx: usize) -> PixelAdjoint {
        let c = self.color.pixel(idx);
        PixelAdjoint {
            depth: self.depth.data()[idx],
            opacity: self.opacity.data()[idx],
            color: [c[0], c[1], c[2]],
        }
    }
}

/// Gradient of a scalar loss with respect to every stored grid value, given
/// the loss's derivatives with respect to the rendered buffers. Pinned
/// ground nodes receive exactly zero.
pub fn render_gradients(
    vol: &DensityVolume,
    sat: &SatelliteView,
    cam: &PanoramaCamera,
    samples: usize,
    adjoint: &RenderAdjoint,
) -> Result<Vec<f64>> {
    check_samples(samples)?;
    let (h, w) = (cam.height_px, cam.width_px);
    if adjoint.depth.shape() != (h, w, 1)
        || adjoint.opacity.shape() != (h, w, 1)
        || adjoint.color.shape() != (h, w, 3)
    {
        return Err(Error::domain(format!(
            "adjoint buffers do not match the {h}x{w} panorama"
        )));
    }
    let rays = panorama_ray_grid(cam, vol.frame())?;
    let mut grad = vec![0.0; vol.resolution().len()];
    accumulate(
        vol,
        sat,
        &rays,
        samples,
        |idx, _| (adjoint.pixel(idx), ()),
        &mut grad,
    );
    Ok(grad)
}

pub fn render_trajectory(
    vol: &DensityVolume,
    sat: &SatelliteView,
    path: &[PanoramaCamera],
    samples: usize,
) -> Result<Vec<RenderBuffers>> {
    if path.is_empty() {
        return Err(Error::domain("trajectory needs at least one camera"));
    }
    path.iter()
        .map(|cam| render_panorama(vol, sat, cam, samples))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{panorama_pixel_to_ray, SatelliteCamera, WorldFrame, UP};
    use crate::volume::Resolution;

    fn uniform_sat(rgb: [f64; 3]) -> SatelliteView {
        let cam = SatelliteCamera::covering(&WorldFrame::default(), 8, 8);
        SatelliteView::new(Map::from_fn(8, 8, 3, |_, _, c| rgb[c]), cam).unwrap()
    }

    fn samples_from(sigma: &[f64], delta: &[f64], dist: &[f64]) -> RayMarchSamples {
        RayMarchSamples {
            t: dist.to_vec(),
            dist: dist.to_vec(),
            delta: delta.to_vec(),
            points: vec![Vec3::default(); sigma.len()],
            sigma: sigma.to_vec(),
        }
    }

    #[test]
    fn uniform_partition() {
        let vol = DensityVolume::empty(WorldFrame::default(), Resolution::new(4, 4, 3)).unwrap();
        let ray = Ray {
            origin: Vec3::new(0.0, -20.0, 1.0),
            direction: crate::camera::NORTH,
            t_near: 0.0,
            t_far: 10.0,
        };
        let s = march_ray(&vol, &ray, 5).unwrap();
        assert_eq!(s.t, vec![1.0, 3.0, 5.0, 7.0, 9.0]);
        assert!(s.delta.iter().all(|&d| d == 2.0));
        assert!(march_ray(&vol, &ray, 0).is_err());
    }

    #[test]
    fn degenerate_ray_is_empty() {
        let vol = DensityVolume::filled(WorldFrame::default(), Resolution::new(4, 4, 3), 1e3, 2.0)
            .unwrap();
        let ray = Ray::clipped(vol.frame(), Vec3::new(0.0, 0.0, 20.0), UP);
        let s = march_ray(&vol, &ray, 7).unwrap();
        assert!(s.sigma.iter().all(|&v| v == 0.0));
        assert!(s.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_field_samples() {
        let frame = WorldFrame::default();
        let vol = DensityVolume::filled(frame, Resolution::new(4, 4, 5), 1e3, 0.7).unwrap();
        // Stays above the first cell so the ground layer is not involved.
        let ray = Ray::clipped(&frame, Vec3::new(0.0, 0.0, 4.0), crate::camera::EAST);
        let s = march_ray(&vol, &ray, 10).unwrap();
        assert!(s.sigma.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn empty_space_composites_to_zero() {
        let c = composite(&samples_from(&[0.0; 4], &[0.5; 4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(c.opacity, 0.0);
        assert_eq!(c.depth, 0.0);
        assert!(c.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn single_sample_closed_form() {
        let c = composite(&samples_from(&[10.0], &[0.5], &[3.0])).unwrap();
        let alpha = 1.0 - (-5.0f64).exp();
        assert!((c.opacity - alpha).abs() < 1e-15);
        assert!((c.opacity - 0.993_262_1).abs() < 1e-7);
        assert!((c.depth - 2.979_786_2).abs() < 1e-7);
        assert_eq!(c.transmittance[0], 1.0);
    }

    #[test]
    fn first_surface_wins() {
        let c = composite(&samples_from(&[1000.0, 1000.0], &[0.1, 0.1], &[1.0, 1.1])).unwrap();
        assert!((c.opacity - 1.0).abs() < 1e-12);
        assert!((c.depth - 1.0).abs() < 1e-12);
        assert!(c.transmittance[1] < 1e-40);
    }

    #[test]
    fn negative_inputs_rejected() {
        assert!(composite(&samples_from(&[-1.0], &[0.1], &[1.0])).is_err());
        assert!(composite(&samples_from(&[1.0], &[-0.1], &[1.0])).is_err());
    }

    #[test]
    fn uniform_image_factors_out() {
        let sat = uniform_sat([1.0, 0.0, 0.0]);
        let mut s = samples_from(&[0.3, 1.2, 0.4], &[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]);
        // Pick densities so that opacity is exactly 0.8 overall.
        let target_tau = -(0.2f64).ln();
        let scale = target_tau / s.sigma.iter().sum::<f64>();
        s.sigma.iter_mut().for_each(|v| *v *= scale);
        let c = composite(&s).unwrap();
        assert!((c.opacity - 0.8).abs() < 1e-12);
        let rgb = copy_paste_color(&s, &c.weights, &sat).unwrap();
        assert!((rgb[0] - 0.8).abs() < 1e-12 && rgb[1] == 0.0 && rgb[2] == 0.0);
        assert_eq!(copy_paste_color(&s, &[0.0; 3], &sat).unwrap(), [0.0; 3]);
        assert!(copy_paste_color(&s, &[0.0; 2], &sat).is_err());
    }

    #[test]
    fn checkerboard_pixel_center_lookup() {
        let frame = WorldFrame::default();
        let cam = SatelliteCamera::covering(&frame, 16, 16);
        let img = Map::from_fn(16, 16, 3, |y, x, c| {
            if (y + x) % 2 == 0 {
                [0.9, 0.1, 0.3][c]
            } else {
                [0.2, 0.6, 0.05][c]
            }
        });
        let sat = SatelliteView::new(img.clone(), cam).unwrap();
        let (row, col) = (5usize, 11usize);
        let (e, n) = cam.pixel_to_world(row as f64 + 0.5, col as f64 + 0.5);
        let mut s = samples_from(&[1.0], &[1.0], &[1.0]);
        s.points[0] = Vec3::new(e, n, 1.3);
        let rgb = copy_paste_color(&s, &[1.0], &sat).unwrap();
        for c in 0..3 {
            assert_eq!(rgb[c], img.get(row, col, c));
        }
    }

    #[test]
    fn kernel_matches_reference_path() {
        let frame = WorldFrame::new(10.0, 10.0, 4.0).unwrap();
        let res = Resolution::new(6, 6, 5);
        let grid: Vec<f64> = (0..res.len()).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let vol = DensityVolume::from_grid(frame, res, 1e3, grid).unwrap();
        let cam = SatelliteCamera::covering(&frame, 10, 10);
        let sat = SatelliteView::new(
            Map::from_fn(10, 10, 3, |y, x, c| ((y * 3 + x * 5 + c) % 7) as f64 / 6.0),
            cam,
        )
        .unwrap();
        let pano = PanoramaCamera::new(Vec3::new(0.5, -0.5, 2.0), 6, 12, 0.4);
        let buffers = render_panorama_with_weights(&vol, &sat, &pano, 16).unwrap();
        let weights = buffers.weights.as_ref().unwrap();
        for (idx, ray) in panorama_ray_grid(&pano, &frame).unwrap().iter().enumerate() {
            let s = march_ray(&vol, ray, 16).unwrap();
            let c = composite(&s).unwrap();
            let rgb = copy_paste_color(&s, &c.weights, &sat).unwrap();
            assert!((buffers.depth.data()[idx] - c.depth).abs() < 1e-12);
            assert!((buffers.opacity.data()[idx] - c.opacity).abs() < 1e-12);
            for k in 0..3 {
                assert!((buffers.color.pixel(idx)[k] - rgb[k]).abs() < 1e-12);
            }
            for (i, w) in c.weights.iter().enumerate() {
                assert!((weights[idx * 16 + i] - w).abs() < 1e-12);
            }
        }
    }

    fn random_volume(seed: u64, frame: WorldFrame, res: Resolution, max: f64) -> DensityVolume {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = (0..res.len()).map(|_| rng.gen_range(0.0..max)).collect();
        DensityVolume::from_grid(frame, res, 1e3, grid).unwrap()
    }

    fn ground_only(frame: WorldFrame, res: Resolution) -> DensityVolume {
        DensityVolume::empty(frame, res).unwrap()
    }

    #[test]
    fn empty_volume_opacity_gradient_is_positive() {
        let frame = WorldFrame::default();
        let vol = DensityVolume::filled(frame, Resolution::new(8, 8, 5), 0.0, 0.0).unwrap();
        let sat = uniform_sat([0.5, 0.5, 0.5]);
        let cam = PanoramaCamera::at_ground(0.0, 0.0, 4, 8);
        let mut adj = RenderAdjoint::zeros(4, 8);
        adj.opacity.data_mut().fill(1.0);
        let grad = render_gradients(&vol, &sat, &cam, 16, &adj).unwrap();
        assert!(grad.iter().all(|&g| g >= 0.0));
        assert!(grad.iter().filter(|&&g| g > 0.0).count() > 10);
        for k in (0..grad.len()).filter(|&i| vol.is_pinned(i)) {
            assert_eq!(grad[k], 0.0);
        }
    }

    #[test]
    fn single_ray_three_samples_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let sigma: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..5.0)).collect();
            let dist = [1.0, 1.4, 1.8];
            let s = samples_from(&sigma, &[0.4; 3], &dist);
            let adj: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let loss = |sig: &[f64]| {
                let c = composite(&samples_from(sig, &[0.4; 3], &dist)).unwrap();
                adj[0] * c.depth + adj[1] * c.opacity
            };
            // Closed-form reverse pass for this three-sample ray.
            let c = composite(&s).unwrap();
            let t_end = (-(sigma.iter().sum::<f64>()) * 0.4).exp();
            for i in 0..3 {
                let d_alpha = 0.4 * (-sigma[i] * 0.4).exp();
                let mut g = adj[0] * c.transmittance[i] * dist[i] + adj[1] * t_end / (1.0 - c.alpha[i]);
                for j in i + 1..3 {
                    g -= adj[0] * c.weights[j] * dist[j] / (1.0 - c.alpha[i]);
                }
                let analytic = g * d_alpha;
                let h = 1e-4;
                let (mut p, mut m) = (sigma.clone(), sigma.clone());
                p[i] += h;
                m[i] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((analytic - fd).abs() <= 1e-5 * analytic.abs().max(fd.abs()).max(1e-3), "{analytic} {fd}");
            }
        }
    }

    #[test]
    fn panorama_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let frame = WorldFrame::new(8.0, 8.0, 4.0).unwrap();
        let res = Resolution::new(16, 16, 9);
        let vol = random_volume(3, frame, res, 5.0);
        let sat_cam = SatelliteCamera::covering(&frame, 16, 16);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let sat = SatelliteView::new(Map::from_fn(16, 16, 3, |_, _, _| rng.gen_range(0.0..1.0)), sat_cam).unwrap();
        let cam = PanoramaCamera::new(Vec3::new(0.7, -1.1, 1.6), 16, 64, 0.3);
        let depth_t = Map::from_fn(16, 64, 1, |_, _, _| rng.gen_range(0.0..6.0));
        let color_t = Map::from_fn(16, 64, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let loss = |v: &DensityVolume| -> (f64, RenderAdjoint) {
            let b = render_panorama(v, &sat, &cam, 24).unwrap();
            let mut adj = RenderAdjoint::zeros(16, 64);
            let mut l = 0.0;
            for (i, (p, t)) in b.depth.data().iter().zip(depth_t.data()).enumerate() {
                l += (p - t).powi(2);
                adj.depth.data_mut()[i] = 2.0 * (p - t);
            }
            for (i, (p, t)) in b.color.data().iter().zip(color_t.data()).enumerate() {
                l += (p - t).powi(2);
                adj.color.data_mut()[i] = 2.0 * (p - t);
            }
            (l, adj)
        };
        let (_, adj) = loss(&vol);
        let grad = render_gradients(&vol, &sat, &cam, 24, &adj).unwrap();
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let nodes: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-3 * scale).collect();
        for &node in nodes.iter().step_by((nodes.len() / 40).max(1)) {
            let h = 1e-4;
            let mut v = vol.grid().to_vec();
            v[node] += h;
            let mut plus = vol.clone();
            plus.set_grid(&v);
            v[node] -= 2.0 * h;
            let mut minus = vol.clone();
            minus.set_grid(&v);
            let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
            let rel = (grad[node] - fd).abs() / grad[node].abs().max(fd.abs());
            assert!(rel <= 1e-3, "node {node}: {} vs {fd}", grad[node]);
        }
    }

    #[test]
    fn empty_volume_renders_black() {
        let vol = DensityVolume::filled(WorldFrame::default(), Resolution::new(8, 8, 5), 0.0, 0.0).unwrap();
        let b = render_panorama(&vol, &uniform_sat([0.7, 0.2, 0.1]), &PanoramaCamera::at_ground(1.0, 2.0, 8, 16), 20).unwrap();
        assert!(b.opacity.data().iter().all(|&o| o == 0.0));
        assert!(b.color.data().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn ground_plane_depths_follow_the_analytic_plane() {
        let frame = WorldFrame::new(51.2, 51.2, 4.0).unwrap();
        let res = Resolution::new(8, 8, 257);
        let vol = ground_only(frame, res);
        let cam = PanoramaCamera::at_ground(0.0, 0.0, 32, 64);
        let b = render_panorama(&vol, &uniform_sat([0.5; 3]), &cam, 100).unwrap();
        let dz = vol.node_spacing()[2];
        for y in 0..32 {
            for x in 0..64 {
                let ray = panorama_pixel_to_ray(&cam, &frame, x as f64, y as f64).unwrap();
                let (d, o) = (b.depth.get(y, x, 0), b.opacity.get(y, x, 0));
                if ray.direction.u >= 0.0 {
                    assert!(o < 1e-12);
                    continue;
                }
                let t = 2.0 / -ray.direction.u;
                let hit = ray.at(t);
                if !frame.contains_horizontal(hit.e, hit.n) {
                    continue;
                }
                let step = (ray.t_far - ray.t_near) / 100.0;
                // The blended ground layer surfaces slightly above u = 0.
                let bound = dz / -ray.direction.u + step;
                assert!((d - t).abs() <= bound, "row {y}: {d} vs {t}");
            }
        }
    }

    #[test]
    fn doubling_samples_barely_changes_smooth_depth() {
        let frame = WorldFrame::default();
        let res = Resolution::new(32, 32, 17);
        let mut vol = ground_only(frame, res);
        for i in 0..32 {
            for j in 0..32 {
                for k in 1..17 {
                    let p = vol.node_position(i, j, k);
                    let r2 = (p.e - 6.0).powi(2) + (p.n - 4.0).powi(2) + (p.u - 3.0).powi(2);
                    vol.set(i, j, k, 0.8 * (-r2 / 18.0).exp());
                }
            }
        }
        let sat = uniform_sat([0.5; 3]);
        let cam = PanoramaCamera::at_ground(0.0, 0.0, 32, 128);
        let a = render_panorama(&vol, &sat, &cam, 100).unwrap();
        let b = render_panorama(&vol, &sat, &cam, 200).unwrap();
        let diff: f64 = a.depth.data().iter().zip(b.depth.data()).map(|(x, y)| (x - y).powi(2)).sum();
        let norm: f64 = a.depth.data().iter().map(|x| x * x).sum();
        assert!((diff / norm).sqrt() < 0.01);
    }

    #[test]
    fn trajectory_examples() {
        let frame = WorldFrame::new(51.2, 51.2, 4.0).unwrap();
        let vol = ground_only(frame, Resolution::new(8, 8, 129));
        let sat = uniform_sat([0.5; 3]);
        let path = [
            PanoramaCamera::at_ground(0.0, 0.0, 16, 32),
            PanoramaCamera::at_ground(0.0, 1.0, 16, 32),
            PanoramaCamera::at_ground(0.0, 0.0, 16, 32),
        ];
        let frames = render_trajectory(&vol, &sat, &path, 64).unwrap();
        assert_eq!(frames[0], frames[2]);
        let single = render_panorama(&vol, &sat, &path[1], 64).unwrap();
        assert_eq!(render_trajectory(&vol, &sat, &path[1..2], 64).unwrap()[0], single);
        let dz = vol.node_spacing()[2];
        for f in &frames[..2] {
            let down = f.depth.get(15, 0, 0);
            assert!((down - 2.0).abs() <= dz, "{down}");
        }
        assert_eq!(frames[0].depth.get(15, 0, 0), frames[1].depth.get(15, 0, 0));
        assert!(render_trajectory(&vol, &sat, &[], 64).is_err());
    }

    proptest::proptest! {
        #[test]
        fn compositing_invariants(
            sigma in proptest::collection::vec(0.0f64..50.0, 1..40),
            delta in 0.0f64..0.5,
            start in 0.0f64..5.0,
        ) {
            let n = sigma.len();
            let dist: Vec<f64> = (0..n).map(|i| start + (i as f64 + 0.5) * delta).collect();
            let s = samples_from(&sigma, &vec![delta; n], &dist);
            let c = composite(&s).unwrap();
            let product: f64 = c.alpha.iter().map(|a| 1.0 - a).product();
            proptest::prop_assert!((c.weights.iter().sum::<f64>() - (1.0 - product)).abs() <= 1e-10);
            proptest::prop_assert!(c.transmittance.windows(2).all(|p| p[1] <= p[0]));
            proptest::prop_assert!((0.0..=1.0).contains(&c.opacity));
            let t_far = start + n as f64 * delta;
            proptest::prop_assert!(c.depth >= 0.0 && c.depth <= c.opacity * t_far + 1e-12);
        }

        #[test]
        fn color_never_exceeds_opacity(seed in 0u64..200) {
            let frame = WorldFrame::new(12.8, 12.8, 4.0).unwrap();
            let vol = random_volume(seed, frame, Resolution::new(6, 6, 4), 3.0);
            let sat_cam = SatelliteCamera::covering(&frame, 8, 8);
            let sat = SatelliteView::new(
                Map::from_fn(8, 8, 3, |y, x, c| ((y * 5 + x * 3 + c + seed as usize) % 9) as f64 / 8.0),
                sat_cam,
            ).unwrap();
            let cam = PanoramaCamera::new(Vec3::new(1.0, -2.0, 1.5), 6, 12, seed as f64 * 0.1);
            let b = render_panorama(&vol, &sat, &cam, 12).unwrap();
            for i in 0..cam.pixel_count() {
                let o = b.opacity.data()[i];
                proptest::prop_assert!(b.color.pixel(i).iter().all(|&c| c <= o + 1e-12));
            }
        }

        #[test]
        fn refinement_changes_opacity_by_order_one_over_s(sigma in 0.0f64..10.0, len in 0.1f64..2.0) {
            // A linear density profile along the ray; doubling S halves the
            // midpoint-rule error.
            let profile = |t: f64| sigma * t / len;
            let opacity_at = |n: usize| {
                let d = len / n as f64;
                let sig: Vec<f64> = (0..n).map(|i| profile((i as f64 + 0.5) * d)).collect();
                composite(&samples_from(&sig, &vec![d; n], &vec![0.0; n])).unwrap().opacity
            };
            proptest::prop_assert!((opacity_at(32) - opacity_at(64)).abs() < 1e-2);
        }
    }
}
