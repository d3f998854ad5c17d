//! Procedural ground-truth scenes and an analytic ray-cast oracle.
//!
//! Scenes are a ground plane plus axis-aligned boxes and upright cylinders.
//! The oracle intersects rays with these shapes exactly and never touches
//! the density grid, so it can be used to check the marcher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{PanoramaCamera, SatelliteCamera, Vec3, WorldFrame};
use crate::error::{Error, Result};
use crate::map::Map;
use crate::supervise::SkyMask;
use crate::volume::{DensityVolume, Resolution, DEFAULT_GROUND_DENSITY};

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum GroundAlbedo {
    Solid { color: Rgb },
    /// Alternating squares of side `size_m` aligned with the world axes;
    /// the square containing the origin's south-west corner uses `c1`.
    Checker { size_m: f64, c1: Rgb, c2: Rgb },
}

impl GroundAlbedo {
    pub fn at(&self, e: f64, n: f64) -> Rgb {
        match self {
            GroundAlbedo::Solid { color } => *color,
            GroundAlbedo::Checker { size_m, c1, c2 } => {
                let parity = (e / size_m).floor() as i64 + (n / size_m).floor() as i64;
                if parity.rem_euclid(2) == 0 {
                    *c1
                } else {
                    *c2
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Box {
        center_e: f64,
        center_n: f64,
        size_e: f64,
        size_n: f64,
        height_m: f64,
        albedo: Rgb,
    },
    Cylinder {
        center_e: f64,
        center_n: f64,
        radius_m: f64,
        height_m: f64,
        albedo: Rgb,
    },
}

impl Primitive {
    pub fn height(&self) -> f64 {
        match self {
            Primitive::Box { height_m, .. } | Primitive::Cylinder { height_m, .. } => *height_m,
        }
    }

    pub fn albedo(&self) -> Rgb {
        match self {
            Primitive::Box { albedo, .. } | Primitive::Cylinder { albedo, .. } => *albedo,
        }
    }

    /// Horizontal bounding rectangle `(e_min, e_max, n_min, n_max)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Primitive::Box {
                center_e,
                center_n,
                size_e,
                size_n,
                ..
            } => (
                center_e - size_e / 2.0,
                center_e + size_e / 2.0,
                center_n - size_n / 2.0,
                center_n + size_n / 2.0,
            ),
            Primitive::Cylinder {
                center_e,
                center_n,
                radius_m,
                ..
            } => (
                center_e - radius_m,
                center_e + radius_m,
                center_n - radius_m,
                center_n + radius_m,
            ),
        }
    }

    /// Footprint membership with closed boundaries.
    pub fn covers(&self, e: f64, n: f64) -> bool {
        match *self {
            Primitive::Box { .. } => {
                let (e0, e1, n0, n1) = self.bounds();
                e >= e0 && e <= e1 && n >= n0 && n <= n1
            }
            Primitive::Cylinder {
                center_e,
                center_n,
                radius_m,
                ..
            } => {
                let (de, dn) = (e - center_e, n - center_n);
                de * de + dn * dn <= radius_m * radius_m
            }
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.u >= 0.0 && p.u <= self.height() && self.covers(p.e, p.n)
    }

    /// Entry distance of the ray into the solid, if it enters at `t >= 0`.
    /// A ray starting inside reports 0.
    pub fn intersect(&self, o: Vec3, d: Vec3) -> Option<f64> {
        let (t0, t1) = match *self {
            Primitive::Box { height_m, .. } => {
                let (e0, e1, n0, n1) = self.bounds();
                slab_interval([e0, n0, 0.0], [e1, n1, height_m], o, d)?
            }
            Primitive::Cylinder {
                center_e,
                center_n,
                radius_m,
                height_m,
                ..
            } => {
                let (oe, on) = (o.e - center_e, o.n - center_n);
                let a = d.e * d.e + d.n * d.n;
                let c = oe * oe + on * on - radius_m * radius_m;
                let (mut lo, mut hi) = if a < 1e-300 {
                    if c > 0.0 {
                        return None;
                    }
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    let b = oe * d.e + on * d.n;
                    let disc = b * b - a * c;
                    if disc < 0.0 {
                        return None;
                    }
                    let s = disc.sqrt();
                    ((-b - s) / a, (-b + s) / a)
                };
                let (z0, z1) = axis_interval(o.u, d.u, 0.0, height_m)?;
                lo = lo.max(z0);
                hi = hi.min(z1);
                if lo > hi {
                    return None;
                }
                (lo, hi)
            }
        };
        if t1 < 0.0 {
            None
        } else {
            Some(t0.max(0.0))
        }
    }

    /// The same primitive grown (positive) or shrunk (negative) by `m[0]`
    /// along e, `m[1]` along n and `m[2]` at both the bottom and the top.
    /// Cylinders use the larger horizontal margin for the radius. Returns
    /// `None` when shrinking removes the solid.
    pub fn offset(&self, m: [f64; 3]) -> Option<Primitive> {
        let grown = match *self {
            Primitive::Box {
                center_e,
                center_n,
                size_e,
                size_n,
                height_m,
                albedo,
            } => Primitive::Box {
                center_e,
                center_n,
                size_e: size_e + 2.0 * m[0],
                size_n: size_n + 2.0 * m[1],
                height_m: height_m + 2.0 * m[2],
                albedo,
            },
            Primitive::Cylinder {
                center_e,
                center_n,
                radius_m,
                height_m,
                albedo,
            } => Primitive::Cylinder {
                center_e,
                center_n,
                radius_m: radius_m + if m[0].abs() > m[1].abs() { m[0] } else { m[1] },
                height_m: height_m + 2.0 * m[2],
                albedo,
            },
        };
        let ok = match grown {
            Primitive::Box { size_e, size_n, .. } => size_e > 0.0 && size_n > 0.0,
            Primitive::Cylinder { radius_m, .. } => radius_m > 0.0,
        };
        (ok && grown.height() > 0.0).then_some(grown)
    }

    /// Entry distance into the primitive lifted by `lift` (solid spans
    /// `u` in `[lift, lift + height]`).
    fn intersect_lifted(&self, o: Vec3, d: Vec3, lift: f64) -> Option<f64> {
        self.intersect(Vec3::new(o.e, o.n, o.u - lift), d)
    }
}

fn axis_interval(o: f64, d: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    if d == 0.0 {
        if o < lo || o > hi {
            None
        } else {
            Some((f64::NEG_INFINITY, f64::INFINITY))
        }
    } else {
        let a = (lo - o) / d;
        let b = (hi - o) / d;
        Some((a.min(b), a.max(b)))
    }
}

fn slab_interval(lo: [f64; 3], hi: [f64; 3], o: Vec3, d: Vec3) -> Option<(f64, f64)> {
    let (oa, da) = ([o.e, o.n, o.u], [d.e, d.n, d.u]);
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let (x, y) = axis_interval(oa[a], da[a], lo[a], hi[a])?;
        t0 = t0.max(x);
        t1 = t1.min(y);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Seeded random placement of extra primitives (trees, pillars, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scatter {
    pub count: usize,
    pub shape: ScatterShape,
    /// Radius for cylinders, half the side for boxes.
    pub size_range: [f64; 2],
    pub height_range: [f64; 2],
    pub albedo: Rgb,
    /// No scattered primitive comes closer than this to any listed point.
    #[serde(default)]
    pub keep_clear: Vec<[f64; 2]>,
    #[serde(default = "default_clearance")]
    pub clearance_m: f64,
    /// Margin kept free along the footprint border.
    #[serde(default = "default_clearance")]
    pub border_m: f64,
}

fn default_clearance() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterShape {
    Box,
    Cylinder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub frame: WorldFrame,
    pub ground: GroundAlbedo,
    #[serde(default)]
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub scatter: Option<Scatter>,
    pub sky_color: Rgb,
    #[serde(default)]
    pub seed: u64,
}

fn check_rgb(c: &Rgb, what: &str) -> Result<()> {
    if c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::domain(format!("{what}: color {c:?} outside [0, 1]")))
    }
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::format("scene spec", e.column() as u64, e.to_string()))
    }

    /// Explicit primitives followed by the scattered ones.
    pub fn all_primitives(&self) -> Result<Vec<Primitive>> {
        let mut out = self.primitives.clone();
        if let Some(s) = &self.scatter {
            out.extend(scatter_primitives(s, &self.frame, self.seed)?);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<Vec<Primitive>> {
        self.frame.validate()?;
        check_rgb(&self.sky_color, "sky_color")?;
        match &self.ground {
            GroundAlbedo::Solid { color } => check_rgb(color, "ground")?,
            GroundAlbedo::Checker { size_m, c1, c2 } => {
                if !(size_m.is_finite() && *size_m > 0.0) {
                    return Err(Error::domain(format!("checker size {size_m} must be positive")));
                }
                check_rgb(c1, "checker c1")?;
                check_rgb(c2, "checker c2")?;
            }
        }
        let prims = self.all_primitives()?;
        let (he, hn) = (self.frame.extent_e / 2.0, self.frame.extent_n / 2.0);
        for (i, p) in prims.iter().enumerate() {
            check_rgb(&p.albedo(), &format!("primitive {i}"))?;
            let (e0, e1, n0, n1) = p.bounds();
            let sized = match *p {
                Primitive::Box { size_e, size_n, .. } => size_e > 0.0 && size_n > 0.0,
                Primitive::Cylinder { radius_m, .. } => radius_m > 0.0,
            };
            if !sized || !(p.height() > 0.0) {
                return Err(Error::domain(format!("primitive {i} has a non-positive size")));
            }
            if !(e0 >= -he && e1 <= he && n0 >= -hn && n1 <= hn) {
                return Err(Error::domain(format!(
                    "primitive {i} spans e [{e0}, {e1}], n [{n0}, {n1}] outside the footprint"
                )));
            }
            if p.height() > self.frame.max_height {
                return Err(Error::domain(format!(
                    "primitive {i} is {} m tall, above max height {}",
                    p.height(),
                    self.frame.max_height
                )));
            }
        }
        Ok(prims)
    }
}

fn scatter_primitives(s: &Scatter, frame: &WorldFrame, seed: u64) -> Result<Vec<Primitive>> {
    let [smin, smax] = s.size_range;
    let [hmin, hmax] = s.height_range;
    if !(smin > 0.0 && smin <= smax && hmin > 0.0 && hmin <= hmax) {
        return Err(Error::domain("scatter ranges must be positive and ordered"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (he, hn) = (frame.extent_e / 2.0, frame.extent_n / 2.0);
    let mut out: Vec<(f64, f64, f64)> = Vec::with_capacity(s.count);
    let mut prims = Vec::with_capacity(s.count);
    let mut attempts = 0;
    while prims.len() < s.count {
        attempts += 1;
        if attempts > 10_000 * s.count.max(1) {
            return Err(Error::domain(format!(
                "could not place {} scattered primitives without overlap",
                s.count
            )));
        }
        let size = rng.gen_range(smin..=smax);
        let height = rng.gen_range(hmin..=hmax);
        let lim_e = he - s.border_m - size;
        let lim_n = hn - s.border_m - size;
        if lim_e <= 0.0 || lim_n <= 0.0 {
            return Err(Error::domain("scatter border leaves no room"));
        }
        let e = rng.gen_range(-lim_e..lim_e);
        let n = rng.gen_range(-lim_n..lim_n);
        let clear = s
            .keep_clear
            .iter()
            .all(|[ce, cn]| ((e - ce).powi(2) + (n - cn).powi(2)).sqrt() >= size * 1.5 + s.clearance_m);
        let apart = out
            .iter()
            .all(|&(oe, on, os)| ((e - oe).powi(2) + (n - on).powi(2)).sqrt() >= (size + os) * 1.5 + 0.5);
        if !(clear && apart) {
            continue;
        }
        out.push((e, n, size));
        prims.push(match s.shape {
            ScatterShape::Cylinder => Primitive::Cylinder {
                center_e: e,
                center_n: n,
                radius_m: size,
                height_m: height,
                albedo: s.albedo,
            },
            ScatterShape::Box => Primitive::Box {
                center_e: e,
                center_n: n,
                size_e: 2.0 * size,
                size_n: 2.0 * size,
                height_m: height,
                albedo: s.albedo,
            },
        });
    }
    Ok(prims)
}

/// Surface color seen from straight above: the top of the tallest primitive
/// covering `(e, n)`, else the ground texture.
#[derive(Debug, Clone, PartialEq)]
pub struct AlbedoField {
    ground: GroundAlbedo,
    primitives: Vec<Primitive>,
}

impl AlbedoField {
    pub fn at(&self, e: f64, n: f64) -> Rgb {
        self.tallest(e, n)
            .map_or_else(|| self.ground.at(e, n), |p| p.albedo())
    }

    fn tallest(&self, e: f64, n: f64) -> Option<&Primitive> {
        self.primitives
            .iter()
            .filter(|p| p.covers(e, n))
            .fold(None, |best: Option<&Primitive>, p| match best {
                Some(b) if b.height() >= p.height() => Some(b),
                _ => Some(p),
            })
    }
}

/// A validated scene with its primitive list expanded.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        let primitives = spec.validate()?;
        Ok(Self { spec, primitives })
    }

    pub fn frame(&self) -> &WorldFrame {
        &self.spec.frame
    }

    pub fn albedo(&self) -> AlbedoField {
        AlbedoField {
            ground: self.spec.ground.clone(),
            primitives: self.primitives.clone(),
        }
    }

    pub fn occupied(&self, p: Vec3) -> bool {
        self.primitives.iter().any(|q| q.contains(p))
    }

    /// Nearest surface hit: distance and surface color. The ground is an
    /// infinite plane here; callers decide what counts as inside the cube.
    pub fn cast(&self, o: Vec3, d: Vec3) -> Option<(f64, Rgb)> {
        let mut best: Option<(f64, Rgb)> = None;
        if d.u < 0.0 && o.u >= 0.0 {
            let t = -o.u / d.u;
            let h = o + d * t;
            best = Some((t, self.spec.ground.at(h.e, h.n)));
        }
        for p in &self.primitives {
            if let Some(t) = p.intersect(o, d) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, p.albedo()));
                }
            }
        }
        best
    }

    /// Whether the ray's first surface is a primitive that stays resolvable
    /// at a grid spacing of `voxel`: the ray still hits that primitive when
    /// it is eroded by two voxels on every side, and no other surface grown
    /// by two voxels (the ground plane raised by two layers included) is
    /// met before the true hit. Ground hits never qualify because the
    /// ground is a single layer thick.
    pub fn resolvable_hit(&self, o: Vec3, d: Vec3, voxel: [f64; 3]) -> bool {
        let m = [2.0 * voxel[0], 2.0 * voxel[1], 2.0 * voxel[2]];
        let mut first: Option<(usize, f64)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = p.intersect(o, d) {
                if first.map_or(true, |(_, bt)| t < bt) {
                    first = Some((i, t));
                }
            }
        }
        let Some((hit, t_hit)) = first else {
            return false;
        };
        if d.u < 0.0 && o.u >= 0.0 && -o.u / d.u <= t_hit {
            return false;
        }
        let core = self.primitives[hit].offset([-m[0], -m[1], -m[2]]);
        if core.and_then(|c| c.intersect_lifted(o, d, m[2])).is_none() {
            return false;
        }
        if d.u < 0.0 && o.u >= m[2] && (m[2] - o.u) / d.u < t_hit {
            return false;
        }
        self.primitives.iter().enumerate().all(|(i, p)| {
            i == hit
                || p.offset(m)
                    .and_then(|g| g.intersect_lifted(o, d, -m[2]))
                    .map_or(true, |t| t >= t_hit)
        })
    }

    /// Whether the pixel's oracle opacity survives a two-voxel change of
    /// every surface: the answer is the same with all primitives, the
    /// ground plane and the footprint grown by two voxels as with all of
    /// them shrunk by two voxels.
    pub fn resolvable_opacity(&self, o: Vec3, d: Vec3, voxel: [f64; 3]) -> bool {
        let m = [2.0 * voxel[0], 2.0 * voxel[1], 2.0 * voxel[2]];
        self.opaque_with(o, d, m) == self.opaque_with(o, d, [-m[0], -m[1], -m[2]])
    }

    fn opaque_with(&self, o: Vec3, d: Vec3, m: [f64; 3]) -> bool {
        let mut best = f64::INFINITY;
        if d.u < 0.0 && o.u >= m[2] {
            best = (m[2] - o.u) / d.u;
        }
        for p in &self.primitives {
            if let Some(t) = p.offset(m).and_then(|g| g.intersect_lifted(o, d, -m[2])) {
                best = best.min(t);
            }
        }
        if !best.is_finite() {
            return false;
        }
        let h = o + d * best;
        let f = self.frame();
        h.e.abs() <= f.extent_e / 2.0 + m[0] && h.n.abs() <= f.extent_n / 2.0 + m[1]
    }
}

pub fn bake_scene(spec: &SceneSpec, res: Resolution) -> Result<(DensityVolume, AlbedoField)> {
    let scene = Scene::new(spec.clone())?;
    let vol = bake(&scene, res)?;
    Ok((vol, scene.albedo()))
}

/// Samples occupancy at every grid node: the ground density inside any
/// primitive and on the ground layer, zero elsewhere.
pub fn bake(scene: &Scene, res: Resolution) -> Result<DensityVolume> {
    let mut vol = DensityVolume::empty(*scene.frame(), res)?;
    let g = DEFAULT_GROUND_DENSITY;
    let column = res.nz;
    let values: Vec<f64> = (0..res.nx * res.ny)
        .into_par_iter()
        .flat_map_iter(|col| {
            let (i, j) = (col / res.ny, col % res.ny);
            let vol = &vol;
            (0..column).map(move |k| {
                if k == 0 || scene.occupied(vol.node_position(i, j, k)) {
                    g
                } else {
                    0.0
                }
            })
        })
        .collect();
    vol.set_grid(&values);
    Ok(vol)
}

/// Orthographic top view: one albedo lookup per pixel center.
pub fn render_satellite(spec: &SceneSpec, cam: &SatelliteCamera) -> Result<Map> {
    let scene = Scene::new(spec.clone())?;
    cam.validate()?;
    let albedo = scene.albedo();
    let mut img = Map::zeros(cam.height_px, cam.width_px, 3);
    let w = cam.width_px;
    img.data_mut()
        .par_chunks_mut(w * 3)
        .enumerate()
        .for_each(|(r, row)| {
            for c in 0..w {
                let (e, n) = cam.pixel_to_world(r as f64 + 0.5, c as f64 + 0.5);
                row[c * 3..c * 3 + 3].copy_from_slice(&albedo.at(e, n));
            }
        });
    Ok(img)
}

/// Analytic per-pixel ground truth of one panorama.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleMaps {
    /// Distance to the nearest hit, 0 on sky.
    pub depth: Map,
    /// 1 where the hit lies over the footprint, else 0.
    pub opacity: Map,
    /// Albedo of the hit surface; `sky_color` on sky pixels. This is the
    /// "photo" color, not the copy-paste target used for fitting.
    pub hit_color: Map,
    /// True where the ray meets neither the ground plane nor a primitive.
    pub sky_mask: SkyMask,
}

pub fn oracle_ground_truth(spec: &SceneSpec, cam: &PanoramaCamera) -> Result<OracleMaps> {
    let scene = Scene::new(spec.clone())?;
    Ok(oracle_for(&scene, cam))
}

pub fn oracle_for(scene: &Scene, cam: &PanoramaCamera) -> OracleMaps {
    let (h, w) = (cam.height_px, cam.width_px);
    let frame = scene.frame();
    let per_pixel: Vec<(f64, f64, Rgb, bool)> = (0..h * w)
        .into_par_iter()
        .map(|idx| {
            let (y, x) = (idx / w, idx % w);
            let d = cam.direction(x as f64, y as f64);
            match scene.cast(cam.position, d) {
                None => (0.0, 0.0, scene.spec.sky_color, true),
                Some((t, color)) => {
                    let hit = cam.position + d * t;
                    let inside = frame.contains_horizontal(hit.e, hit.n);
                    (t, if inside { 1.0 } else { 0.0 }, color, false)
                }
            }
        })
        .collect();
    let mut depth = Map::zeros(h, w, 1);
    let mut opacity = Map::zeros(h, w, 1);
    let mut hit_color = Map::zeros(h, w, 3);
    let mut sky = Vec::with_capacity(h * w);
    for (idx, (t, o, c, s)) in per_pixel.into_iter().enumerate() {
        depth.data_mut()[idx] = t;
        opacity.data_mut()[idx] = o;
        hit_color.data_mut()[idx * 3..idx * 3 + 3].copy_from_slice(&c);
        sky.push(s);
    }
    OracleMaps {
        depth,
        opacity,
        hit_color,
        sky_mask: SkyMask::new(h, w, sky).expect("mask size matches"),
    }
}

macro_rules! gallery {
    ($($name:literal),* $(,)?) => {
        /// Bundled benchmark scenes as `(name, json)`.
        pub const GALLERY: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../scenes/", $name, ".json")))),*
        ];
    };
}

gallery!(
    "empty",
    "plane-box",
    "forest",
    "street-canyon",
    "plaza-columns",
    "tower",
    "row-houses",
    "courtyard",
    "parking-lot",
    "mixed-block",
);

pub fn gallery_scene(name: &str) -> Result<SceneSpec> {
    let (_, text) = GALLERY
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::domain(format!("no bundled scene named {name:?}")))?;
    SceneSpec::from_json(text)
}
