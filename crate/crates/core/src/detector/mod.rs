//! Heatmap landmark detection: response maps, soft-argmax decoding, Gaussian
//! targets, and a small trainable encoder-decoder.

mod checkpoint;
mod layers;
mod network;

pub use checkpoint::Checkpoint;
pub use network::{DetectorConfig, DetectorTrace, ToyDetector};

use crate::error::{Error, Result};
use crate::imaging::{from_pixel, to_pixel};
use crate::landmarks::LandmarkSet;

/// `L` nonnegative response maps, row-major, stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    count: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl HeatmapStack {
    pub fn new(count: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimensions { width, height });
        }
        if data.len() != count * width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {count} maps of {width}x{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::ShapeMismatch(format!("heatmap value {v} is not finite and nonnegative")));
        }
        Ok(Self {
            count,
            width,
            height,
            data,
        })
    }

    pub fn zeros(count: usize, width: usize, height: usize) -> Self {
        Self {
            count,
            width,
            height,
            data: vec![0.0; count * width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(L, H, W)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.count, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, i: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn map_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[i * n..(i + 1) * n]
    }
}

/// Intensity-weighted centroid of each map, in normalized coordinates,
/// together with each map's total mass `ζ`.
pub fn soft_argmax(h: &HeatmapStack) -> Result<(LandmarkSet, Vec<f64>)> {
    let (w, hh) = (h.width, h.height);
    let mut points = Vec::with_capacity(h.count);
    let mut masses = Vec::with_capacity(h.count);
    for i in 0..h.count {
        let (mut zeta, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for (y, row) in h.map(i).chunks_exact(w).enumerate() {
            let mut row_mass = 0.0;
            for (x, &r) in row.iter().enumerate() {
                row_mass += r;
                sx += r * x as f64;
            }
            zeta += row_mass;
            sy += row_mass * y as f64;
        }
        if !(zeta > 0.0 && zeta.is_finite()) {
            return Err(Error::DegenerateHeatmap(i));
        }
        points.push(from_pixel(sx / zeta, sy / zeta, w, hh));
        masses.push(zeta);
    }
    Ok((LandmarkSet::new(points), masses))
}

/// Pulls a cotangent on decoded (normalized) landmarks back to the maps.
pub fn soft_argmax_backward(
    h: &HeatmapStack,
    decoded: &LandmarkSet,
    masses: &[f64],
    cotangent: &[[f64; 2]],
) -> Result<Vec<f64>> {
    if decoded.len() != h.count || masses.len() != h.count || cotangent.len() != h.count {
        return Err(Error::ShapeMismatch("soft-argmax backward operands".into()));
    }
    let (w, hh) = (h.width, h.height);
    let sx = if w > 1 { 2.0 / (w - 1) as f64 } else { 0.0 };
    let sy = if hh > 1 { 2.0 / (hh - 1) as f64 } else { 0.0 };
    let mut out = vec![0.0; h.data.len()];
    for i in 0..h.count {
        let (cx, cy) = to_pixel(decoded[i], w, hh)?;
        let gx = cotangent[i][0] * sx / masses[i];
        let gy = cotangent[i][1] * sy / masses[i];
        let n = w * hh;
        for (y, row) in out[i * n..(i + 1) * n].chunks_exact_mut(w).enumerate() {
            let base = gy * (y as f64 - cy);
            for (x, g) in row.iter_mut().enumerate() {
                *g = base + gx * (x as f64 - cx);
            }
        }
    }
    Ok(out)
}

/// One unnormalized Gaussian bump per landmark, cut to zero beyond `4σ`.
pub fn render_gaussian_heatmaps(p: &LandmarkSet, sigma: f64, width: usize, height: usize) -> Result<HeatmapStack> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let mut h = HeatmapStack::zeros(p.len(), width, height);
    let cutoff2 = (4.0 * sigma).powi(2);
    for (i, &q) in p.iter().enumerate() {
        let (cx, cy) = to_pixel(q, width, height)?;
        for (y, row) in h.map_mut(i).chunks_exact_mut(width).enumerate() {
            let dy2 = (y as f64 - cy).powi(2);
            if dy2 > cutoff2 {
                continue;
            }
            for (x, v) in row.iter_mut().enumerate() {
                let d2 = (x as f64 - cx).powi(2) + dy2;
                if d2 <= cutoff2 {
                    *v = (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    Ok(h)
}
