//! World frame, the overhead parallel-projection camera and the
//! equirectangular ground panorama camera.
//!
//! World coordinates are `(e, n, u)`: east, north and up in meters. The
//! origin sits on the ground directly beneath the center of the overhead
//! image. The world cube is
//! `[-extent_e/2, extent_e/2) x [-extent_n/2, extent_n/2) x [0, max_height)`.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point or direction in world coordinates `(e, n, u)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub e: f64,
    pub n: f64,
    pub u: f64,
}

impl Vec3 {
    pub const fn new(e: f64, n: f64, u: f64) -> Self {
        Self { e, n, u }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.e * o.e + self.n * o.n + self.u * o.u
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.n * o.u - self.u * o.n,
            self.u * o.e - self.e * o.u,
            self.e * o.n - self.n * o.e,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn is_finite(self) -> bool {
        self.e.is_finite() && self.n.is_finite() && self.u.is_finite()
    }

    fn axis(self, i: usize) -> f64 {
        match i {
            0 => self.e,
            1 => self.n,
            _ => self.u,
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.e + o.e, self.n + o.n, self.u + o.u)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.e - o.e, self.n - o.n, self.u - o.u)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.e * s, self.n * s, self.u * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.e, -self.n, -self.u)
    }
}

pub const EAST: Vec3 = Vec3::new(1.0, 0.0, 0.0);
pub const NORTH: Vec3 = Vec3::new(0.0, 1.0, 0.0);
pub const UP: Vec3 = Vec3::new(0.0, 0.0, 1.0);

/// Metric extent of the modeled region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFrame {
    pub extent_e: f64,
    pub extent_n: f64,
    #[serde(default = "default_max_height")]
    pub max_height: f64,
}

fn default_max_height() -> f64 {
    8.0
}

impl Default for WorldFrame {
    fn default() -> Self {
        Self {
            extent_e: 51.2,
            extent_n: 51.2,
            max_height: 8.0,
        }
    }
}

impl WorldFrame {
    pub fn new(extent_e: f64, extent_n: f64, max_height: f64) -> Result<Self> {
        let frame = Self {
            extent_e,
            extent_n,
            max_height,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.extent_e) || !ok(self.extent_n) || !ok(self.max_height) {
            return Err(Error::domain(format!(
                "world frame extents must be positive and finite, got ({}, {}, {})",
                self.extent_e, self.extent_n, self.max_height
            )));
        }
        Ok(())
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        (
            [-self.extent_e / 2.0, -self.extent_n / 2.0, 0.0],
            [self.extent_e / 2.0, self.extent_n / 2.0, self.max_height],
        )
    }

    /// Half-open cube membership.
    pub fn contains(&self, p: Vec3) -> bool {
        let (lo, hi) = self.bounds();
        (0..3).all(|i| {
            let v = p.axis(i);
            v >= lo[i] && v < hi[i]
        })
    }

    /// Horizontal footprint membership (half-open), ignoring height.
    pub fn contains_horizontal(&self, e: f64, n: f64) -> bool {
        e >= -self.extent_e / 2.0
            && e < self.extent_e / 2.0
            && n >= -self.extent_n / 2.0
            && n < self.extent_n / 2.0
    }

    /// Parametric interval `[t_near, t_far]` of the ray inside the cube,
    /// with `t_near >= 0`. Rays that miss return `(0, 0)`.
    pub fn clip(&self, origin: Vec3, direction: Vec3) -> (f64, f64) {
        let (lo, hi) = self.bounds();
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let o = origin.axis(i);
            let d = direction.axis(i);
            if d == 0.0 {
                if o < lo[i] || o > hi[i] {
                    return (0.0, 0.0);
                }
                continue;
            }
            let a = (lo[i] - o) / d;
            let b = (hi[i] - o) / d;
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        let t_near = t0.max(0.0);
        if !(t1 > t_near) {
            return (0.0, 0.0);
        }
        (t_near, t1)
    }
}

/// Overhead camera with parallel projection. Image top is north.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SatelliteCamera {
    pub height_px: usize,
    pub width_px: usize,
    /// Meters per pixel along north (image rows).
    pub scale_n: f64,
    /// Meters per pixel along east (image columns).
    pub scale_e: f64,
}

impl Default for SatelliteCamera {
    fn default() -> Self {
        Self {
            height_px: 256,
            width_px: 256,
            scale_n: 0.2,
            scale_e: 0.2,
        }
    }
}

impl SatelliteCamera {
    /// Camera whose image exactly covers the frame's footprint.
    pub fn covering(frame: &WorldFrame, height_px: usize, width_px: usize) -> Self {
        Self {
            height_px,
            width_px,
            scale_n: frame.extent_n / height_px as f64,
            scale_e: frame.extent_e / width_px as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height_px == 0 || self.width_px == 0 {
            return Err(Error::domain("satellite image size must be positive"));
        }
        if !(self.scale_n > 0.0 && self.scale_e > 0.0)
            || !self.scale_n.is_finite()
            || !self.scale_e.is_finite()
        {
            return Err(Error::domain("satellite scale must be positive and finite"));
        }
        Ok(())
    }

    /// Fractional `(row, col)` of a world point; pixel `(r, c)` covers
    /// `[r, r+1) x [c, c+1)` so its center is at `(r + 0.5, c + 0.5)`.
    pub fn world_to_pixel(&self, p: Vec3) -> (f64, f64) {
        world_to_satellite_pixel(self, p)
    }

    /// World `(e, n)` of a fractional pixel position.
    pub fn pixel_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        let e = (col - self.width_px as f64 / 2.0) * self.scale_e;
        let n = (self.height_px as f64 / 2.0 - row) * self.scale_n;
        (e, n)
    }
}

pub fn world_to_satellite_pixel(cam: &SatelliteCamera, p: Vec3) -> (f64, f64) {
    let row = cam.height_px as f64 / 2.0 - p.n / cam.scale_n;
    let col = cam.width_px as f64 / 2.0 + p.e / cam.scale_e;
    (row, col)
}

/// Spherical equirectangular ground camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanoramaCamera {
    pub position: Vec3,
    pub height_px: usize,
    pub width_px: usize,
    /// Compass azimuth faced by the central column, radians in `[0, 2pi)`.
    pub heading: f64,
}

impl PanoramaCamera {
    pub fn new(position: Vec3, height_px: usize, width_px: usize, heading: f64) -> Self {
        Self {
            position,
            height_px,
            width_px,
            heading: heading.rem_euclid(2.0 * PI),
        }
    }

    /// Camera 2 m above the ground at `(e, n)` facing north.
    pub fn at_ground(e: f64, n: f64, height_px: usize, width_px: usize) -> Self {
        Self::new(Vec3::new(e, n, 2.0), height_px, width_px, 0.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.height_px * self.width_px
    }

    /// Unit view direction through fractional pixel `(x, y)`; the pixel
    /// center convention adds 0.5 to both coordinates. No bounds check, so
    /// azimuth wraps with period `width_px`.
    pub fn direction(&self, x: f64, y: f64) -> Vec3 {
        let zenith = PI * (y + 0.5) / self.height_px as f64;
        let theta = 2.0 * PI * (x + 0.5) / self.width_px as f64;
        let azimuth = (theta - PI + self.heading).rem_euclid(2.0 * PI);
        let (sz, cz) = zenith.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        NORTH * (sz * ca) + EAST * (sz * sa) + UP * cz
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Ray clipped to the frame's cube.
    pub fn clipped(frame: &WorldFrame, origin: Vec3, direction: Vec3) -> Self {
        let (t_near, t_far) = frame.clip(origin, direction);
        Self {
            origin,
            direction,
            t_near,
            t_far,
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn is_degenerate(&self) -> bool {
        self.t_far <= self.t_near
    }

    pub fn validate(&self) -> Result<()> {
        if !self.origin.is_finite() || !self.direction.is_finite() {
            return Err(Error::domain("ray origin/direction must be finite"));
        }
        if (self.direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::domain("ray direction must be unit length"));
        }
        if !(self.t_near >= 0.0 && self.t_near <= self.t_far) || !self.t_far.is_finite() {
            return Err(Error::domain(format!(
                "invalid ray interval [{}, {}]",
                self.t_near, self.t_far
            )));
        }
        Ok(())
    }
}

pub fn panorama_pixel_to_ray(
    cam: &PanoramaCamera,
    frame: &WorldFrame,
    x: f64,
    y: f64,
) -> Result<Ray> {
    let (w, h) = (cam.width_px as f64, cam.height_px as f64);
    if !(x >= 0.0 && x < w && y >= 0.0 && y < h) {
        return Err(Error::domain(format!(
            "pixel ({x}, {y}) outside {}x{} panorama",
            cam.height_px, cam.width_px
        )));
    }
    Ok(Ray::clipped(frame, cam.position, cam.direction(x, y)))
}

/// All pixel rays in row-major order.
pub fn panorama_ray_grid(cam: &PanoramaCamera, frame: &WorldFrame) -> Result<Vec<Ray>> {
    if cam.height_px == 0 || cam.width_px == 0 {
        return Err(Error::domain("panorama image size must be positive"));
    }
    let mut rays = Vec::with_capacity(cam.pixel_count());
    for y in 0..cam.height_px {
        for x in 0..cam.width_px {
            rays.push(panorama_pixel_to_ray(cam, frame, x as f64, y as f64)?);
        }
    }
    Ok(rays)
}
