//! Binary volume, map and histogram files, PNG exports and CSV tables.
//!
//! All binary formats are little-endian with 32-bit floats:
//!
//! | file | header                                                       |
//! |------|--------------------------------------------------------------|
//! | S2DV | `"S2DV"`, version, nx, ny, nz (u32), extent_e, extent_n,     |
//! |      | max_height, ground_density (f32); 36 bytes                   |
//! | S2DM | `"S2DM"`, version, h, w, channels (u32); 20 bytes            |
//! | S2DH | `"S2DH\0\0\0\0"`; 8 bytes, then 3 x 90 bin values            |
//!
//! Payloads follow the header directly: the volume grid in storage order
//! (x slowest, z fastest), maps row-major with interleaved channels, and
//! histograms as red, green then blue bins.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{PanoramaCamera, Vec3, WorldFrame};
use crate::error::{Error, Result};
use crate::map::Map;
use crate::optimize::TraceEntry;
use crate::supervise::{SkyHistogram, SKY_HISTOGRAM_BINS};
use crate::volume::{DensityVolume, Resolution};

pub const VOLUME_MAGIC: &[u8; 4] = b"S2DV";
pub const MAP_MAGIC: &[u8; 4] = b"S2DM";
pub const HISTOGRAM_MAGIC: &[u8; 8] = b"S2DH\0\0\0\0";
pub const FORMAT_VERSION: u32 = 1;
pub const VOLUME_HEADER_BYTES: usize = 36;
pub const MAP_HEADER_BYTES: usize = 20;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Sequential little-endian reader that reports the byte offset of every
/// failure.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], context: &'a str) -> Self {
        Self {
            bytes,
            pos: 0,
            context,
        }
    }

    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::format(self.context, offset as u64, message)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(self.fail(
                self.bytes.len(),
                format!("truncated {what}: missing {} bytes", n - left),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expect: &[u8]) -> Result<()> {
        let got = self.take(expect.len(), "header")?;
        if got != expect {
            return Err(self.fail(0, format!("bad magic {:?}, expected {:?}", got, expect)));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()))
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos;
        let v = self.u32("header")?;
        if v != FORMAT_VERSION {
            return Err(self.fail(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn payload(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count * 4, "payload")?;
        if self.pos != self.bytes.len() {
            return Err(self.fail(
                self.pos,
                format!("{} unexpected trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Widens a stored header scalar to the shortest decimal that rounds to it,
/// so extents such as 51.2 come back exactly as they were configured.
fn widen(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

fn push_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

fn dim(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::domain(format!("{what} {v} does not fit in 32 bits")))
}

pub fn encode_volume(vol: &DensityVolume) -> Result<Vec<u8>> {
    let r = vol.resolution();
    let f = vol.frame();
    let mut out = Vec::with_capacity(VOLUME_HEADER_BYTES + 4 * r.len());
    out.extend_from_slice(VOLUME_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, dim(r.nx, "nx")?);
    push_u32(&mut out, dim(r.ny, "ny")?);
    push_u32(&mut out, dim(r.nz, "nz")?);
    push_f32(&mut out, f.extent_e);
    push_f32(&mut out, f.extent_n);
    push_f32(&mut out, f.max_height);
    push_f32(&mut out, vol.ground_density());
    for &v in vol.grid() {
        push_f32(&mut out, v);
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8], context: &str) -> Result<DensityVolume> {
    let mut c = Cursor::new(bytes, context);
    c.magic(VOLUME_MAGIC)?;
    c.version()?;
    let dims_at = c.pos;
    let nx = c.u32("header")? as usize;
    let ny = c.u32("header")? as usize;
    let nz = c.u32("header")? as usize;
    let frame_at = c.pos;
    let extent_e = widen(c.f32("header")?);
    let extent_n = widen(c.f32("header")?);
    let max_height = widen(c.f32("header")?);
    let ground = widen(c.f32("header")?);
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(c.fail(dims_at, format!("resolution {nx}x{ny}x{nz} needs at least 2 per axis")));
    }
    let frame = WorldFrame {
        extent_e,
        extent_n,
        max_height,
    };
    frame
        .validate()
        .map_err(|e| c.fail(frame_at, e.to_string()))?;
    if !(ground.is_finite() && ground >= 0.0) {
        return Err(c.fail(frame_at + 12, format!("ground density {ground} is invalid")));
    }
    let res = Resolution::new(nx, ny, nz);
    let count = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or_else(|| c.fail(dims_at, "resolution overflows"))?;
    let payload = c.payload(count)?;
    if let Some(i) = payload.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(c.fail(
            VOLUME_HEADER_BYTES + 4 * i,
            format!("density {} is negative or non-finite", payload[i]),
        ));
    }
    DensityVolume::from_grid(frame, res, ground, payload.into_iter().map(f64::from).collect())
}

pub fn write_volume(path: &Path, vol: &DensityVolume) -> Result<()> {
    write_bytes(path, &encode_volume(vol)?)
}

pub fn read_volume(path: &Path) -> Result<DensityVolume> {
    decode_volume(&read_bytes(path)?, &path.display().to_string())
}

pub fn encode_map(map: &Map) -> Result<Vec<u8>> {
    let (h, w, ch) = map.shape();
    let mut out = Vec::with_capacity(MAP_HEADER_BYTES + 4 * map.data().len());
    out.extend_from_slice(MAP_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, dim(h, "height")?);
    push_u32(&mut out, dim(w, "width")?);
    push_u32(&mut out, dim(ch, "channels")?);
    for &v in map.data() {
        push_f32(&mut out, v);
    }
    Ok(out)
}

pub fn decode_map(bytes: &[u8], context: &str) -> Result<Map> {
    let mut c = Cursor::new(bytes, context);
    c.magic(MAP_MAGIC)?;
    c.version()?;
    let dims_at = c.pos;
    let h = c.u32("header")? as usize;
    let w = c.u32("header")? as usize;
    let ch = c.u32("header")? as usize;
    if ch == 0 {
        return Err(c.fail(dims_at + 8, "zero channels"));
    }
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(ch))
        .ok_or_else(|| c.fail(dims_at, "map size overflows"))?;
    let payload = c.payload(count)?;
    Map::from_vec(h, w, ch, payload.into_iter().map(f64::from).collect())
}

pub fn write_map(path: &Path, map: &Map) -> Result<()> {
    write_bytes(path, &encode_map(map)?)
}

pub fn read_map(path: &Path) -> Result<Map> {
    decode_map(&read_bytes(path)?, &path.display().to_string())
}

pub fn encode_histogram(hist: &SkyHistogram) -> Result<Vec<u8>> {
    if hist.bins() != SKY_HISTOGRAM_BINS {
        return Err(Error::domain(format!(
            "histogram files hold {SKY_HISTOGRAM_BINS} bins per channel, got {}",
            hist.bins()
        )));
    }
    let mut out = Vec::with_capacity(HISTOGRAM_MAGIC.len() + 4 * hist.values().len());
    out.extend_from_slice(HISTOGRAM_MAGIC);
    for &v in hist.values() {
        push_f32(&mut out, v);
    }
    Ok(out)
}

pub fn decode_histogram(bytes: &[u8], context: &str) -> Result<SkyHistogram> {
    let mut c = Cursor::new(bytes, context);
    c.magic(HISTOGRAM_MAGIC)?;
    let payload = c.payload(3 * SKY_HISTOGRAM_BINS)?;
    SkyHistogram::from_values(
        SKY_HISTOGRAM_BINS,
        payload.into_iter().map(f64::from).collect(),
    )
    .map_err(|e| Error::format(context, HISTOGRAM_MAGIC.len() as u64, e.to_string()))
}

pub fn write_histogram(path: &Path, hist: &SkyHistogram) -> Result<()> {
    write_bytes(path, &encode_histogram(hist)?)
}

pub fn read_histogram(path: &Path) -> Result<SkyHistogram> {
    decode_histogram(&read_bytes(path)?, &path.display().to_string())
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel map with values in `[0, 1]` as an 8-bit PNG.
/// Values outside the range are clamped; non-finite values become 0.
pub fn write_png(path: &Path, map: &Map) -> Result<()> {
    let (h, w, ch) = map.shape();
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| if v.is_finite() { quantize(v) } else { 0 })
        .collect();
    let color = match ch {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::domain(format!("cannot export {ch}-channel map as PNG"))),
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        dim(w, "width")?,
        dim(h, "height")?,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })
}

/// Reads any PNG as an RGB map with values in `[0, 1]`.
pub fn read_png_rgb(path: &Path) -> Result<Map> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Map::from_vec(h as usize, w as usize, 3, data)
}

/// Depth map scaled for viewing: `depth / max_depth`, clamped.
pub fn depth_preview(depth: &Map, max_depth: f64) -> Map {
    depth.scaled(1.0 / max_depth)
}

/// One row of a trajectory file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub frame: usize,
    pub e: f64,
    pub n: f64,
    pub u: f64,
    pub heading_rad: f64,
}

impl Pose {
    pub fn camera(&self, height_px: usize, width_px: usize) -> PanoramaCamera {
        PanoramaCamera::new(
            Vec3::new(self.e, self.n, self.u),
            height_px,
            width_px,
            self.heading_rad,
        )
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::format(path.display().to_string(), offset, e.to_string())
}

/// Reads a `frame,e,n,u,heading_rad` table. Frames must be listed in
/// increasing order.
pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let expected = ["frame", "e", "n", "u", "heading_rad"];
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::format(
            path.display().to_string(),
            0,
            format!("header must be {}", expected.join(",")),
        ));
    }
    let mut poses: Vec<Pose> = Vec::new();
    for row in rdr.deserialize() {
        let pose: Pose = row.map_err(|e| csv_error(path, e))?;
        let finite = [pose.e, pose.n, pose.u, pose.heading_rad]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain(format!(
                "{}: frame {} has a non-finite value",
                path.display(),
                pose.frame
            )));
        }
        if poses.last().is_some_and(|p| p.frame >= pose.frame) {
            return Err(Error::domain(format!(
                "{}: frame {} is out of order",
                path.display(),
                pose.frame
            )));
        }
        poses.push(pose);
    }
    if poses.is_empty() {
        return Err(Error::domain(format!("{}: no poses", path.display())));
    }
    Ok(poses)
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for p in poses {
        w.serialize(p).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loss trace as `step,total,snop,depth,opacity,color,smooth`.
pub fn write_trace(path: &Path, trace: &[TraceEntry]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(["step", "total", "snop", "depth", "opacity", "color", "smooth"])
        .map_err(|e| csv_error(path, e))?;
    for t in trace {
        w.serialize(t).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEntry>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}
