//! Grayscale rasters, the normalized coordinate frame, bilinear sampling and
//! portable-graymap I/O.
//!
//! Normalized coordinates are corner-anchored: `(-1, -1)` is the center of the
//! top-left pixel and `(1, 1)` the center of the bottom-right pixel.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A point in the normalized `[-1, 1]²` frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
}

impl NormalizedPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Single-channel raster, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimensions { width, height });
        }
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "image data has {} samples, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Normalized coordinate of the center of pixel `(x, y)`.
    pub fn pixel_center(&self, x: usize, y: usize) -> NormalizedPoint {
        from_pixel(x as f64, y as f64, self.width, self.height)
    }

    /// Bilinear sample at a normalized point, with the analytic gradient of
    /// the interpolant with respect to the normalized coordinates.
    ///
    /// Out-of-range points are clamped to the edge; the gradient component
    /// along a clamped axis is zero. On a pixel node, where the interpolant
    /// has a kink, the gradient is the mean of the two one-sided slopes (on
    /// the frame border one of them is the zero slope of the clamp).
    pub fn bilinear_sample(&self, p: NormalizedPoint) -> (f64, [f64; 2]) {
        let (px, py) = to_pixel_unchecked(p, self.width, self.height);
        let cx = cell(px, self.width);
        let cy = cell(py, self.height);
        let (w, h) = (self.width, self.height);

        // column/row interpolants along the other axis
        let col = |x: usize| {
            let a = self.get(x, cy.base);
            a + cy.frac * (self.get(x, cy.next) - a)
        };
        let row = |y: usize| {
            let a = self.get(cx.base, y);
            a + cx.frac * (self.get(cx.next, y) - a)
        };

        let top = row(cy.base);
        let bottom = row(cy.next);
        let value = top + cy.frac * (bottom - top);

        let dpx = match cx.kind {
            Edge::Outside => 0.0,
            Edge::Node(k) => 0.5 * (col(k + 1) - col(k - 1)),
            Edge::Border => 0.5 * (col(cx.next) - col(cx.base)),
            Edge::Inside => col(cx.next) - col(cx.base),
        };
        let dpy = match cy.kind {
            Edge::Outside => 0.0,
            Edge::Node(k) => 0.5 * (row(k + 1) - row(k - 1)),
            Edge::Border => 0.5 * (bottom - top),
            Edge::Inside => bottom - top,
        };
        // d(pixel)/d(normalized) = (n - 1) / 2
        let gx = dpx * 0.5 * w.saturating_sub(1) as f64;
        let gy = dpy * 0.5 * h.saturating_sub(1) as f64;
        (value, [gx, gy])
    }

    /// Value-only bilinear sample.
    #[inline]
    pub fn sample(&self, p: NormalizedPoint) -> f64 {
        self.bilinear_sample(p).0
    }

    /// Resample to a new size through the normalized frame.
    pub fn resize(&self, width: usize, height: usize) -> Result<Image> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        Image::from_fn(width, height, |x, y| {
            self.sample(from_pixel(x as f64, y as f64, width, height))
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_pgm(&bytes)
    }

    /// The image as [`Image::save`] then [`Image::load`] would return it.
    pub fn quantized(&self) -> Image {
        let scale = 1.0 / 255.0;
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize(v) as f64 * scale).collect(),
        }
    }

    /// Writes a binary (P5) graymap with maxval 255 and round-half-up quantization.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

#[derive(Clone, Copy)]
enum Edge {
    Outside,
    /// exactly on interior node `k`
    Node(usize),
    /// on the first or last node; the outward slope is zero under clamping
    Border,
    Inside,
}

#[derive(Clone, Copy)]
struct Cell {
    base: usize,
    next: usize,
    frac: f64,
    kind: Edge,
}

/// Positions this close to an integer sample the node value exactly.
const NODE_SNAP: f64 = 1e-10;
/// Positions this close to an interior node take the symmetric slope.
const NODE_GRAD_BAND: f64 = 1e-6;

#[inline]
fn cell(p: f64, n: usize) -> Cell {
    if n == 1 {
        return Cell { base: 0, next: 0, frac: 0.0, kind: Edge::Outside };
    }
    let max = (n - 1) as f64;
    if p < -NODE_SNAP {
        return Cell { base: 0, next: 1, frac: 0.0, kind: Edge::Outside };
    }
    if p > max + NODE_SNAP {
        return Cell { base: n - 2, next: n - 1, frac: 1.0, kind: Edge::Outside };
    }
    let r = p.round();
    let k = r as usize;
    let off = p - r;
    if off.abs() <= NODE_SNAP {
        if k == n - 1 {
            return Cell { base: n - 2, next: n - 1, frac: 1.0, kind: Edge::Border };
        }
        if k == 0 {
            return Cell { base: 0, next: 1, frac: 0.0, kind: Edge::Border };
        }
        return Cell { base: k, next: k + 1, frac: 0.0, kind: Edge::Node(k) };
    }
    let base = (p.floor() as usize).min(n - 2);
    let kind = if off.abs() <= NODE_GRAD_BAND && k > 0 && k < n - 1 {
        Edge::Node(k)
    } else if off.abs() <= NODE_GRAD_BAND {
        Edge::Border
    } else {
        Edge::Inside
    };
    Cell { base, next: base + 1, frac: p - base as f64, kind }
}

#[inline]
fn to_pixel_unchecked(p: NormalizedPoint, w: usize, h: usize) -> (f64, f64) {
    (
        (p.x + 1.0) * 0.5 * (w - 1) as f64,
        (p.y + 1.0) * 0.5 * (h - 1) as f64,
    )
}

/// Map a normalized point to continuous pixel coordinates.
pub fn to_pixel(p: NormalizedPoint, w: usize, h: usize) -> Result<(f64, f64)> {
    if w == 0 || h == 0 {
        return Err(Error::InvalidDimensions { width: w, height: h });
    }
    Ok(to_pixel_unchecked(p, w, h))
}

/// Inverse of [`to_pixel`]. A one-pixel axis maps to 0.
pub fn from_pixel(px: f64, py: f64, w: usize, h: usize) -> NormalizedPoint {
    let axis = |v: f64, n: usize| {
        if n <= 1 {
            0.0
        } else {
            2.0 * v / (n - 1) as f64 - 1.0
        }
    };
    NormalizedPoint::new(axis(px, w), axis(py, h))
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn next(&mut self) -> Option<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn header_number(&mut self, what: &str) -> Result<usize> {
        let tok = self
            .next()
            .ok_or_else(|| Error::MalformedHeader(format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| {
                Error::MalformedHeader(format!("bad {what}: {:?}", String::from_utf8_lossy(tok)))
            })
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut tokens = Tokens { bytes, pos: 0 };
    let magic = tokens
        .next()
        .ok_or_else(|| Error::MalformedHeader("empty file".into()))?;
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        b"P1" | b"P3" | b"P4" | b"P6" | b"P7" => {
            return Err(Error::UnsupportedFormat(
                String::from_utf8_lossy(magic).into_owned(),
            ))
        }
        other => {
            return Err(Error::MalformedHeader(format!(
                "unknown magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = tokens.header_number("width")?;
    let height = tokens.header_number("height")?;
    let maxval = tokens.header_number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("zero dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedHeader(format!("maxval {maxval} out of range")));
    }
    let expected = width * height;
    let scale = 1.0 / maxval as f64;
    let mut data = Vec::with_capacity(expected);

    if binary {
        // exactly one whitespace byte separates maxval from the raster
        let start = tokens.pos + 1;
        let raster = bytes.get(start..).unwrap_or(&[]);
        let wide = maxval > 255;
        let per = if wide { 2 } else { 1 };
        let found = raster.len() / per;
        if found < expected {
            return Err(Error::TruncatedData { expected, found });
        }
        for i in 0..expected {
            let v = if wide {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as usize
            } else {
                raster[i] as usize
            };
            if v > maxval {
                return Err(Error::MalformedHeader(format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 * scale);
        }
    } else {
        while data.len() < expected {
            let Some(tok) = tokens.next() else {
                return Err(Error::TruncatedData { expected, found: data.len() });
            };
            let v = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| {
                    Error::MalformedHeader(format!(
                        "bad sample {:?}",
                        String::from_utf8_lossy(tok)
                    ))
                })?;
            if v > maxval {
                return Err(Error::MalformedHeader(format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 * scale);
        }
    }
    Image::new(width, height, data)
}
