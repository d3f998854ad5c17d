//! Loss terms and sky descriptors.
//!
//! The opacity term averages over each mask region separately, so its scale
//! does not depend on image size. Reconstruction terms average over the
//! supervised entries of each target channel; non-finite target entries are
//! treated as unsupervised.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::Map;
use crate::render::{RenderAdjoint, RenderBuffers};
use crate::volume::DensityVolume;

pub const SKY_HISTOGRAM_BINS: usize = 90;

/// Per-pixel sky/non-sky partition of a panorama; `true` marks sky.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkyMask {
    height: usize,
    width: usize,
    sky: Vec<bool>,
}

impl SkyMask {
    pub fn new(height: usize, width: usize, sky: Vec<bool>) -> Result<Self> {
        if sky.len() != height * width {
            return Err(Error::domain(format!(
                "sky mask has {} entries, {height}x{width} needs {}",
                sky.len(),
                height * width
            )));
        }
        Ok(Self { height, width, sky })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut sky = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                sky.push(f(y, x));
            }
        }
        Self { height, width, sky }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_sky(&self, idx: usize) -> bool {
        self.sky[idx]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.sky
    }

    pub fn sky_count(&self) -> usize {
        self.sky.iter().filter(|&&s| s).count()
    }

    pub fn ground_count(&self) -> usize {
        self.sky.len() - self.sky_count()
    }

    /// Training pairs need both classes present.
    pub fn validate_for_training(&self) -> Result<()> {
        if self.sky_count() == 0 || self.ground_count() == 0 {
            return Err(Error::domain(
                "sky mask must contain at least one sky and one non-sky pixel",
            ));
        }
        Ok(())
    }

    pub fn to_map(&self) -> Map {
        Map::from_fn(self.height, self.width, 1, |y, x, _| {
            if self.sky[y * self.width + x] {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn from_map(map: &Map) -> Result<Self> {
        if map.channels() != 1 {
            return Err(Error::domain("sky mask map must have one channel"));
        }
        Self::new(
            map.height(),
            map.width(),
            map.data().iter().map(|&v| v >= 0.5).collect(),
        )
    }

    fn check_shape(&self, map: &Map, what: &str) -> Result<()> {
        if map.height() != self.height || map.width() != self.width {
            return Err(Error::domain(format!(
                "{what}: {}x{} map does not match {}x{} sky mask",
                map.height(),
                map.width(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_l2: f64,
    pub w_snop: f64,
    pub w_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_l1: 1.0,
            w_l2: 10.0,
            w_snop: 1.0,
            w_smooth: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            w_l1: 0.0,
            w_l2: 0.0,
            w_snop: 0.0,
            w_smooth: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_l1", self.w_l1),
            ("w_l2", self.w_l2),
            ("w_snop", self.w_snop),
            ("w_smooth", self.w_smooth),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::domain(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One pixel's opacity term and its derivative, given the reciprocal size
/// of the pixel's region.
#[inline]
pub(crate) fn snop_pixel(opacity: f64, is_sky: bool, inv_count: f64) -> (f64, f64) {
    let r = if is_sky { opacity } else { opacity - 1.0 };
    (r.abs() * inv_count, sign(r) * inv_count)
}

/// One supervised entry of an L1 + L2 reconstruction term.
#[inline]
pub(crate) fn recon_entry(pred: f64, target: f64, w: &LossWeights, inv_count: f64) -> (f64, f64) {
    let r = pred - target;
    (
        (w.w_l1 * r.abs() + w.w_l2 * r * r) * inv_count,
        (w.w_l1 * sign(r) + 2.0 * w.w_l2 * r) * inv_count,
    )
}

fn inverse(count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        1.0 / count as f64
    }
}

/// `mean_{non-sky} |O - 1| + mean_{sky} |O|` and its subgradient map.
pub fn snop_loss(opacity: &Map, mask: &SkyMask) -> Result<(f64, Map)> {
    mask.check_shape(opacity, "opacity supervision")?;
    if opacity.channels() != 1 {
        return Err(Error::domain("opacity map must have one channel"));
    }
    let inv_sky = inverse(mask.sky_count());
    let inv_ground = inverse(mask.ground_count());
    let mut grad = Map::zeros(opacity.height(), opacity.width(), 1);
    let mut loss = 0.0;
    for (idx, &o) in opacity.data().iter().enumerate() {
        let sky = mask.is_sky(idx);
        let (l, g) = snop_pixel(o, sky, if sky { inv_sky } else { inv_ground });
        loss += l;
        grad.data_mut()[idx] = g;
    }
    Ok((loss, grad))
}

/// Reconstruction targets; any subset may be present.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Targets {
    pub depth: Option<Map>,
    pub opacity: Option<Map>,
    pub color: Option<Map>,
}

impl Targets {
    pub fn is_empty(&self) -> bool {
        self.depth.is_none() && self.opacity.is_none() && self.color.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconLoss {
    pub total: f64,
    pub depth: f64,
    pub opacity: f64,
    pub color: f64,
    pub adjoint: RenderAdjoint,
}

fn channel_term(pred: &Map, target: &Map, w: &LossWeights, grad: &mut Map) -> f64 {
    let count = target.data().iter().filter(|v| v.is_finite()).count();
    let inv = inverse(count);
    let mut loss = 0.0;
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        if t.is_finite() {
            let (l, g) = recon_entry(p, t, w, inv);
            loss += l;
            grad.data_mut()[i] = g;
        }
    }
    loss
}

/// `sum_channels (w_l1 mean|p - t| + w_l2 mean (p - t)^2)` with exact
/// derivatives with respect to the prediction buffers.
pub fn recon_loss(pred: &RenderBuffers, targets: &Targets, w: &LossWeights) -> Result<ReconLoss> {
    if targets.is_empty() {
        return Err(Error::domain("reconstruction loss needs at least one target"));
    }
    let mut adjoint = RenderAdjoint::zeros(pred.height(), pred.width());
    let mut out = (0.0, 0.0, 0.0);
    if let Some(t) = &targets.depth {
        pred.depth.ensure_same_shape(t, "depth target")?;
        out.0 = channel_term(&pred.depth, t, w, &mut adjoint.depth);
    }
    if let Some(t) = &targets.opacity {
        pred.opacity.ensure_same_shape(t, "opacity target")?;
        out.1 = channel_term(&pred.opacity, t, w, &mut adjoint.opacity);
    }
    if let Some(t) = &targets.color {
        pred.color.ensure_same_shape(t, "color target")?;
        out.2 = channel_term(&pred.color, t, w, &mut adjoint.color);
    }
    Ok(ReconLoss {
        total: out.0 + out.1 + out.2,
        depth: out.0,
        opacity: out.1,
        color: out.2,
        adjoint,
    })
}

/// Neighbor pairs used by the smoothness term: forward differences along
/// every axis, skipping any pair that touches the pinned ground layer.
fn smoothness_pairs(vol: &DensityVolume) -> impl Iterator<Item = (usize, usize)> + '_ {
    let r = vol.resolution();
    let (sx, sy) = (r.ny * r.nz, r.nz);
    (0..r.nx).flat_map(move |i| {
        (0..r.ny).flat_map(move |j| {
            (1..r.nz).flat_map(move |k| {
                let a = vol.index(i, j, k);
                let x = (i + 1 < r.nx).then_some((a, a + sx));
                let y = (j + 1 < r.ny).then_some((a, a + sy));
                let z = (k + 1 < r.nz).then_some((a, a + 1));
                [x, y, z].into_iter().flatten()
            })
        })
    })
}

/// `w_smooth * mean squared forward difference` over the non-pinned grid.
pub fn smoothness_loss(vol: &DensityVolume, w_smooth: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; vol.resolution().len()];
    let count = smoothness_pairs(vol).count();
    if count == 0 || w_smooth == 0.0 {
        return (0.0, grad);
    }
    let scale = w_smooth / count as f64;
    let g = vol.grid();
    let mut loss = 0.0;
    for (a, b) in smoothness_pairs(vol) {
        let d = g[b] - g[a];
        loss += d * d;
        grad[b] += 2.0 * scale * d;
        grad[a] -= 2.0 * scale * d;
    }
    (loss * scale, grad)
}

/// Per-channel normalized color histogram of the sky region, `[R | G | B]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkyHistogram {
    bins: usize,
    values: Vec<f64>,
}

impl SkyHistogram {
    pub fn from_values(bins: usize, values: Vec<f64>) -> Result<Self> {
        if bins == 0 || values.len() != 3 * bins {
            return Err(Error::domain(format!(
                "histogram with {bins} bins needs {} values, got {}",
                3 * bins,
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::domain("histogram entries must be finite and >= 0"));
        }
        Ok(Self { bins, values })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.bins..(c + 1) * self.bins]
    }

    /// Histogram mean per channel, in `[0, 1]` using bin centers.
    pub fn mean_color(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self
                .channel(c)
                .iter()
                .enumerate()
                .map(|(b, m)| m * (b as f64 + 0.5) / self.bins as f64)
                .sum();
        }
        out
    }
}

pub fn sky_histogram(image: &Map, mask: &SkyMask, bins: usize) -> Result<SkyHistogram> {
    mask.check_shape(image, "sky histogram")?;
    if image.channels() != 3 {
        return Err(Error::domain("sky histogram needs a 3-channel image"));
    }
    if bins == 0 {
        return Err(Error::domain("histogram needs at least one bin"));
    }
    let count = mask.sky_count();
    if count == 0 {
        return Err(Error::domain("sky histogram of an image without sky pixels"));
    }
    let mut values = vec![0.0; 3 * bins];
    for idx in (0..mask.sky.len()).filter(|&i| mask.is_sky(i)) {
        for (c, &v) in image.pixel(idx).iter().enumerate() {
            let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
            values[c * bins + b] += 1.0;
        }
    }
    let inv = 1.0 / count as f64;
    values.iter_mut().for_each(|v| *v *= inv);
    SkyHistogram::from_values(bins, values)
}
