//! Pixel-similarity metrics on the 0-255 scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::Map;

/// PSNR-style scores are capped here for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const PEAK: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: PEAK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub sd: f64,
    pub per_channel: Vec<ChannelMetrics>,
}

fn check_shapes(a: &Map, b: &Map) -> Result<()> {
    a.ensure_same_shape(b, "metric inputs")?;
    if a.data().is_empty() {
        return Err(Error::domain("metric inputs are empty"));
    }
    Ok(())
}

fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse < PEAK * 10f64.powf(-PSNR_CAP / 20.0) {
        PSNR_CAP
    } else {
        20.0 * (PEAK / rmse).log10()
    }
}

fn rmse_of(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sum / a.len() as f64).sqrt()
}

pub fn rmse_psnr(a: &Map, b: &Map) -> Result<(f64, f64)> {
    check_shapes(a, b)?;
    let rmse = rmse_of(a.data(), b.data());
    Ok((rmse, psnr_from_rmse(rmse)))
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" convolution of one channel.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams) -> f64 {
    let k = gaussian_kernel(p.window, p.sigma);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (mu_a, oh, ow) = filter_valid(a, h, w, &k);
    let (mu_b, ..) = filter_valid(b, h, w, &k);
    let (aa, ..) = filter_valid(&prod(a, a), h, w, &k);
    let (bb, ..) = filter_valid(&prod(b, b), h, w, &k);
    let (ab, ..) = filter_valid(&prod(a, b), h, w, &k);
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (oh * ow) as f64
}

fn planes(m: &Map) -> Vec<Vec<f64>> {
    (0..m.channels())
        .map(|c| m.data().iter().skip(c).step_by(m.channels()).copied().collect())
        .collect()
}

/// Gaussian-windowed SSIM per channel, averaged.
pub fn ssim_with(a: &Map, b: &Map, p: &SsimParams) -> Result<Vec<f64>> {
    check_shapes(a, b)?;
    if a.height() < p.window || a.width() < p.window {
        return Err(Error::domain(format!(
            "image {}x{} is smaller than the {} px SSIM window",
            a.height(),
            a.width(),
            p.window
        )));
    }
    let (pa, pb) = (planes(a), planes(b));
    Ok(pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| ssim_channel(x, y, a.height(), a.width(), p))
        .collect())
}

pub fn ssim(a: &Map, b: &Map) -> Result<f64> {
    let per = ssim_with(a, b, &SsimParams::default())?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Sum of absolute forward differences along rows and columns, for every
/// pixel that has both a right and a lower neighbor.
fn gradient_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((h - 1) * (w - 1));
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let v = plane[y * w + x];
            out.push((plane[y * w + x + 1] - v).abs() + (plane[(y + 1) * w + x] - v).abs());
        }
    }
    out
}

fn sd_of(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let ga = gradient_magnitude(a, h, w);
    let gb = gradient_magnitude(b, h, w);
    psnr_from_rmse(rmse_of(&ga, &gb))
}

/// Sharpness difference: PSNR between forward-difference gradient
/// magnitude maps.
pub fn sharpness_difference(a: &Map, b: &Map) -> Result<f64> {
    check_shapes(a, b)?;
    if a.height() < 2 || a.width() < 2 {
        return Err(Error::domain("sharpness difference needs at least 2x2 pixels"));
    }
    let (h, w) = (a.height(), a.width());
    let (pa, pb) = (planes(a), planes(b));
    let ga: Vec<f64> = pa.iter().flat_map(|p| gradient_magnitude(p, h, w)).collect();
    let gb: Vec<f64> = pb.iter().flat_map(|p| gradient_magnitude(p, h, w)).collect();
    Ok(psnr_from_rmse(rmse_of(&ga, &gb)))
}

/// All metrics for two images already on the 0-255 scale.
pub fn report(a: &Map, b: &Map) -> Result<MetricReport> {
    let (rmse, psnr) = rmse_psnr(a, b)?;
    let ssim_per = ssim_with(a, b, &SsimParams::default())?;
    let sd = sharpness_difference(a, b)?;
    let (h, w) = (a.height(), a.width());
    let (pa, pb) = (planes(a), planes(b));
    let per_channel = (0..a.channels())
        .map(|c| {
            let r = rmse_of(&pa[c], &pb[c]);
            ChannelMetrics {
                rmse: r,
                psnr: psnr_from_rmse(r),
                ssim: ssim_per[c],
                sd: sd_of(&pa[c], &pb[c], h, w),
            }
        })
        .collect();
    Ok(MetricReport {
        rmse,
        psnr,
        ssim: ssim_per.iter().sum::<f64>() / ssim_per.len() as f64,
        sd,
        per_channel,
    })
}
