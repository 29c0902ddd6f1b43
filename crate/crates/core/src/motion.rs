//! Dense motion fields: `.flo` file I/O, bilinear sampling, multi-hop
//! composition and the floor-based transfer of points and boxes.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{clip_to_frame, BBox, Detection, FrameSize};

/// Magic number at the start of every `.flo` file ("PIEH" in ASCII).
pub const FLO_MAGIC: f32 = 202021.25;
const FLO_HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad flow magic {found} (expected {FLO_MAGIC})")]
    BadMagic { found: f32 },
    #[error("flow payload length mismatch: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid flow dimensions {width}x{height}")]
    BadDimensions { width: i64, height: i64 },
    #[error("non-finite flow value at pixel ({x}, {y})")]
    NonFinite { x: usize, y: usize },
    #[error("motion chain is empty")]
    EmptyChain,
    #[error("motion chain mixes frame sizes")]
    SizeMismatch,
}

impl FlowError {
    /// Format problems as opposed to filesystem failures.
    pub fn is_format(&self) -> bool {
        !matches!(self, FlowError::Io { .. })
    }
}

/// Per-pixel (du, dv) displacement between two consecutive frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    size: FrameSize,
    data: Vec<f32>,
}

impl MotionField {
    pub fn zeros(size: FrameSize) -> Self {
        Self {
            size,
            data: vec![0.0; size.pixel_count() * 2],
        }
    }

    pub fn constant(size: FrameSize, du: f32, dv: f32) -> Self {
        let mut data = Vec::with_capacity(size.pixel_count() * 2);
        for _ in 0..size.pixel_count() {
            data.push(du);
            data.push(dv);
        }
        Self { size, data }
    }

    /// Builds a field from interleaved (du, dv) values in row-major order.
    pub fn from_interleaved(size: FrameSize, data: Vec<f32>) -> Result<Self, FlowError> {
        let expected = size.pixel_count() * 2;
        if data.len() != expected {
            return Err(FlowError::Truncated {
                expected: expected * 4,
                found: data.len() * 4,
            });
        }
        let width = size.width() as usize;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let p = i / 2;
            return Err(FlowError::NonFinite {
                x: p % width,
                y: p / width,
            });
        }
        Ok(Self { size, data })
    }

    pub fn from_fn(size: FrameSize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut data = Vec::with_capacity(size.pixel_count() * 2);
        for y in 0..size.height() as usize {
            for x in 0..size.width() as usize {
                let (du, dv) = f(x, y);
                data.push(du);
                data.push(dv);
            }
        }
        Self { size, data }
    }

    pub fn size(&self) -> FrameSize {
        self.size
    }

    pub fn as_interleaved(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = (y * self.size.width() as usize + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, x: usize, y: usize, du: f32, dv: f32) {
        let i = (y * self.size.width() as usize + x) * 2;
        self.data[i] = du;
        self.data[i + 1] = dv;
    }

    /// Bilinear lookup at a continuous position; positions are clamped to
    /// the pixel lattice `[0, w-1] x [0, h-1]` first.
    pub fn sample(&self, u: f64, v: f64) -> (f64, f64) {
        let max_x = (self.size.width() - 1) as f64;
        let max_y = (self.size.height() - 1) as f64;
        let u = if u.is_nan() { 0.0 } else { u.clamp(0.0, max_x) };
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, max_y) };
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;
        let x0 = x0 as usize;
        let y0 = y0 as usize;
        let x1 = (x0 + 1).min(max_x as usize);
        let y1 = (y0 + 1).min(max_y as usize);

        let lerp = |a: (f32, f32), b: (f32, f32), t: f64| {
            (
                a.0 as f64 + (b.0 as f64 - a.0 as f64) * t,
                a.1 as f64 + (b.1 as f64 - a.1 as f64) * t,
            )
        };
        let top = lerp(self.get(x0, y0), self.get(x1, y0), fx);
        let bottom = lerp(self.get(x0, y1), self.get(x1, y1), fx);
        (
            top.0 + (bottom.0 - top.0) * fy,
            top.1 + (bottom.1 - top.1) * fy,
        )
    }

    pub fn to_flo_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FLO_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        out.extend_from_slice(&(self.size.width() as i32).to_le_bytes());
        out.extend_from_slice(&(self.size.height() as i32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_flo_bytes(bytes: &[u8]) -> Result<Self, FlowError> {
        if bytes.len() < FLO_HEADER_LEN {
            if bytes.len() >= 4 {
                check_magic(&bytes[0..4])?;
            }
            return Err(FlowError::Truncated {
                expected: FLO_HEADER_LEN,
                found: bytes.len(),
            });
        }
        check_magic(&bytes[0..4])?;
        let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap()) as i64;
        let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap()) as i64;
        if width <= 0 || height <= 0 || width > u32::MAX as i64 || height > u32::MAX as i64 {
            return Err(FlowError::BadDimensions { width, height });
        }
        let size = FrameSize::new(width as u32, height as u32)
            .map_err(|_| FlowError::BadDimensions { width, height })?;
        let expected = (width as usize)
            .checked_mul(height as usize)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(FLO_HEADER_LEN))
            .ok_or(FlowError::BadDimensions { width, height })?;
        if bytes.len() != expected {
            return Err(FlowError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let data = bytes[FLO_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_interleaved(size, data)
    }
}

fn check_magic(bytes: &[u8]) -> Result<(), FlowError> {
    let found = f32::from_le_bytes(bytes.try_into().unwrap());
    if found.to_bits() != FLO_MAGIC.to_bits() {
        return Err(FlowError::BadMagic { found });
    }
    Ok(())
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<MotionField, FlowError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FlowError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    MotionField::from_flo_bytes(&bytes)
}

pub fn write_flow(field: &MotionField, path: impl AsRef<Path>) -> Result<(), FlowError> {
    let path = path.as_ref();
    let io_err = |source| FlowError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&field.to_flo_bytes()).map_err(io_err)?;
    Ok(())
}

/// How the fields in a multi-hop chain are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CompositionMode {
    /// Each hop is sampled at the position reached by the previous hops.
    #[default]
    Trajectory,
    /// Every hop is sampled at the starting position and the vectors summed.
    Additive,
}

impl std::str::FromStr for CompositionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trajectory" => Ok(Self::Trajectory),
            "additive" => Ok(Self::Additive),
            other => Err(format!("unknown composition mode '{other}'")),
        }
    }
}

impl std::fmt::Display for CompositionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Trajectory => "trajectory",
            Self::Additive => "additive",
        })
    }
}

/// An ordered chain of fields, applied source-to-target.
#[derive(Debug, Clone)]
pub struct ComposedMotion<'a> {
    fields: Vec<&'a MotionField>,
    mode: CompositionMode,
}

impl<'a> ComposedMotion<'a> {
    pub fn new(fields: Vec<&'a MotionField>, mode: CompositionMode) -> Result<Self, FlowError> {
        let first = fields.first().ok_or(FlowError::EmptyChain)?;
        if fields.iter().any(|f| f.size() != first.size()) {
            return Err(FlowError::SizeMismatch);
        }
        Ok(Self { fields, mode })
    }

    pub fn single(field: &'a MotionField) -> Self {
        Self {
            fields: vec![field],
            mode: CompositionMode::Trajectory,
        }
    }

    pub fn mode(&self) -> CompositionMode {
        self.mode
    }

    pub fn hops(&self) -> usize {
        self.fields.len()
    }

    /// Total continuous displacement for a point starting at (u, v).
    pub fn displacement(&self, u: f64, v: f64) -> (f64, f64) {
        let (mut du, mut dv) = (0.0, 0.0);
        for field in &self.fields {
            let (su, sv) = match self.mode {
                CompositionMode::Trajectory => (u + du, v + dv),
                CompositionMode::Additive => (u, v),
            };
            let (a, b) = field.sample(su, sv);
            du += a;
            dv += b;
        }
        (du, dv)
    }
}

/// Moves a pixel through the chain and floors the end position once.
pub fn transfer_point(u: f64, v: f64, motion: &ComposedMotion<'_>) -> (i64, i64) {
    let (du, dv) = motion.displacement(u, v);
    ((u + du).floor() as i64, (v + dv).floor() as i64)
}

/// Hull of a box's four transferred corners, before any frame clipping.
///
/// Corners on the far edges (`x2`, `y2`) are exclusive, so their motion is
/// sampled at the last covered pixel (`x2 - 1`, `y2 - 1`) and then applied to
/// the edge itself. `None` when the hull collapses to zero width or height.
pub fn transfer_hull(b: &BBox, motion: &ComposedMotion<'_>) -> Option<BBox> {
    let near_x = (b.x1(), b.x1());
    let near_y = (b.y1(), b.y1());
    let far_x = (b.x2(), (b.x2() - 1.0).max(b.x1()));
    let far_y = (b.y2(), (b.y2() - 1.0).max(b.y1()));

    let mut xs = [0.0f64; 4];
    let mut ys = [0.0f64; 4];
    for (n, ((bx, sx), (by, sy))) in [
        (near_x, near_y),
        (far_x, near_y),
        (near_x, far_y),
        (far_x, far_y),
    ]
    .into_iter()
    .enumerate()
    {
        let (du, dv) = motion.displacement(sx, sy);
        xs[n] = (bx + du).floor();
        ys[n] = (by + dv).floor();
    }
    let min = |a: &[f64; 4]| a.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |a: &[f64; 4]| a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    BBox::new(min(&xs), min(&ys), max(&xs), max(&ys)).ok()
}

/// Transfers a detection through `motion` corner by corner, clips the hull
/// to the frame and drops it when less than `min_coverage` stays visible.
/// Class, score and offset pass through unchanged.
pub fn transfer_box(
    det: &Detection,
    motion: &ComposedMotion<'_>,
    size: FrameSize,
    min_coverage: f64,
) -> Option<Detection> {
    let hull = transfer_hull(&det.bbox, motion)?;
    let (clipped, coverage) = clip_to_frame(&hull, size)?;
    if coverage < min_coverage {
        return None;
    }
    Some(det.with_bbox(clipped))
}

/// 8-bit image, one (grey) or three (RGB) channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    size: FrameSize,
    channels: u8,
    data: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("frame buffer has {found} bytes, expected {expected}")]
    BadLength { expected: usize, found: usize },
    #[error("unsupported channel count {0}")]
    BadChannels(u8),
}

impl Frame {
    pub fn new(size: FrameSize, channels: u8, data: Vec<u8>) -> Result<Self, FrameError> {
        if channels != 1 && channels != 3 {
            return Err(FrameError::BadChannels(channels));
        }
        let expected = size.pixel_count() * channels as usize;
        if data.len() != expected {
            return Err(FrameError::BadLength {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            size,
            channels,
            data,
        })
    }

    pub fn size(&self) -> FrameSize {
        self.size
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Rec. 601 luma of pixel (x, y).
    pub fn luminance(&self, x: usize, y: usize) -> f64 {
        let i = (y * self.size.width() as usize + x) * self.channels as usize;
        if self.channels == 1 {
            self.data[i] as f64
        } else {
            0.299 * self.data[i] as f64 + 0.587 * self.data[i + 1] as f64 + 0.114 * self.data[i + 2] as f64
        }
    }

    /// Binary PGM (one channel) or PPM (three channels).
    pub fn write_pnm(&self, path: impl AsRef<Path>) -> Result<(), FrameError> {
        use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
        use image::{ExtendedColorType, ImageEncoder};

        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|source| FrameError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let writer = io::BufWriter::new(file);
        let (subtype, color) = if self.channels == 1 {
            (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
        } else {
            (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
        };
        PnmEncoder::new(writer)
            .with_subtype(subtype)
            .write_image(&self.data, self.size.width(), self.size.height(), color)
            .map_err(|e| FrameError::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn read_pnm(path: impl AsRef<Path>) -> Result<Self, FrameError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| FrameError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let decode_err = |e: image::ImageError| FrameError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
            .map_err(decode_err)?;
        let size = FrameSize::new(img.width(), img.height()).map_err(|e| FrameError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        match img {
            image::DynamicImage::ImageLuma8(buf) => Frame::new(size, 1, buf.into_raw()),
            other => Frame::new(size, 3, other.to_rgb8().into_raw()),
        }
    }
}
