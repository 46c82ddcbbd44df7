//! Procedural face-like images with exactly known landmarks.
//!
//! Layout (21 points, left to right in the image within each feature):
//! brows 0..=2 and 3..=5 (outer/inner end and arch), eyes 6..=9 and
//! 10..=13 (corners, top, bottom), nose wedge 14..=16 (apex, base corners),
//! mouth 17..=20 (corners, top, bottom).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{face_size, Sample};
use super::seed_for;
use crate::error::{Error, Result};
use crate::imaging::{Image, NormalizedPoint};
use crate::landmarks::LandmarkSet;

pub const SYNTH_LANDMARKS: usize = 21;
/// Outer eye corners, used for the inter-ocular distance.
pub const OUTER_EYE_CORNERS: (usize, usize) = (6, 12);

/// Geometry and shading of one synthetic face.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub center: [f64; 2],
    pub tilt: f64,
    pub head: [f64; 2],
    pub eye_offset: f64,
    pub eye_y: f64,
    pub eye_radius: [f64; 2],
    pub brow_gap: f64,
    pub brow_half_width: f64,
    pub brow_arch: f64,
    pub nose_base_y: f64,
    pub nose_half_width: f64,
    pub mouth_y: f64,
    pub mouth_radius: [f64; 2],
    pub background: f64,
    pub skin: f64,
    /// Contrast above skin for brows, eyes, nose, mouth.
    pub contrast: [f64; 4],
    pub light: [f64; 2],
    pub noise: f64,
}

impl FaceParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let cy: f64 = rng.gen_range(-0.06..0.06);
        let a: f64 = rng.gen_range(0.58..0.72);
        let b = (a * rng.gen_range(1.12..1.25)).min(0.93 - cy.abs());
        Self {
            center: [rng.gen_range(-0.08..0.08), cy],
            tilt: rng.gen_range(-0.15..0.15),
            head: [a, b],
            eye_offset: a * rng.gen_range(0.36..0.44),
            eye_y: b * rng.gen_range(-0.26..-0.16),
            eye_radius: [a * rng.gen_range(0.14..0.18), a * rng.gen_range(0.07..0.09)],
            brow_gap: a * rng.gen_range(0.12..0.18),
            brow_half_width: a * rng.gen_range(0.17..0.23),
            brow_arch: a * rng.gen_range(0.03..0.07),
            nose_base_y: b * rng.gen_range(0.1..0.2),
            nose_half_width: a * rng.gen_range(0.1..0.15),
            mouth_y: b * rng.gen_range(0.42..0.52),
            mouth_radius: [a * rng.gen_range(0.28..0.38), a * rng.gen_range(0.06..0.09)],
            background: rng.gen_range(0.05..0.15),
            skin: rng.gen_range(0.3..0.42),
            contrast: [
                rng.gen_range(0.3..0.4),
                rng.gen_range(0.45..0.55),
                rng.gen_range(0.28..0.36),
                rng.gen_range(0.35..0.45),
            ],
            light: [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)],
            noise: 0.01,
        }
    }

    /// Landmarks in face-local coordinates (before tilt and centering).
    #[rustfmt::skip]
    fn local_landmarks(&self) -> Vec<[f64; 2]> {
        let (ex, ey) = (self.eye_offset, self.eye_y);
        let [rx, ry] = self.eye_radius;
        let by = ey - ry - self.brow_gap;
        let bw = self.brow_half_width;
        let arch = self.brow_arch;
        let apex_y = ey + 0.5 * ry;
        let [mw, mh] = self.mouth_radius;
        let (ny, nw, my) = (self.nose_base_y, self.nose_half_width, self.mouth_y);
        vec![
            [-ex - bw, by], [-ex, by - arch], [-ex + bw, by],
            [ex - bw, by], [ex, by - arch], [ex + bw, by],
            [-ex - rx, ey], [-ex, ey - ry], [-ex + rx, ey], [-ex, ey + ry],
            [ex - rx, ey], [ex, ey - ry], [ex + rx, ey], [ex, ey + ry],
            [0.0, apex_y], [-nw, ny], [nw, ny],
            [-mw, my], [0.0, my - mh], [mw, my], [0.0, my + mh],
        ]
    }

    fn to_image_frame(&self, p: [f64; 2]) -> NormalizedPoint {
        let (s, c) = self.tilt.sin_cos();
        NormalizedPoint::new(
            self.center[0] + c * p[0] - s * p[1],
            self.center[1] + s * p[0] + c * p[1],
        )
    }

    fn to_local(&self, u: f64, v: f64) -> [f64; 2] {
        let (s, c) = self.tilt.sin_cos();
        let (du, dv) = (u - self.center[0], v - self.center[1]);
        [c * du + s * dv, -s * du + c * dv]
    }

    pub fn landmarks(&self) -> LandmarkSet {
        self.local_landmarks().into_iter().map(|p| self.to_image_frame(p)).collect()
    }

    /// Renders at `size × size`, quantized to 8 bits.
    pub fn render<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Image> {
        if size < 8 {
            return Err(Error::InvalidDimensions { width: size, height: size });
        }
        let pixel = 2.0 / (size - 1) as f64;
        let lm = self.local_landmarks();
        // feature shapes are drawn slightly larger than their landmark hull so
        // that every landmark sits on bright pixels
        let eyes = [[-self.eye_offset, self.eye_y], [self.eye_offset, self.eye_y]];
        let eye_r = [self.eye_radius[0] * 1.3, self.eye_radius[1] * 1.45];
        let mouth_c = [0.0, self.mouth_y];
        let mouth_r = [self.mouth_radius[0] * 1.25, self.mouth_radius[1] * 1.35];
        let nose = grow_triangle([lm[14], lm[15], lm[16]], 1.45);
        let brow_half_thickness = 0.045;
        let noise = Normal::new(0.0, self.noise).expect("valid noise");

        let [bg, skin] = [self.background, self.skin];
        let level = |k: usize| skin + self.contrast[k];
        let data = (0..size * size)
            .map(|idx| {
                let u = (idx % size) as f64 * pixel - 1.0;
                let v = (idx / size) as f64 * pixel - 1.0;
                let q = self.to_local(u, v);
                let mut val = bg + (skin - bg) * ellipse_cover(q, [0.0, 0.0], self.head, pixel);
                for brow in [&lm[0..3], &lm[3..6]] {
                    let d = polyline_distance(q, brow);
                    val += (level(0) - val) * coverage(brow_half_thickness - d, pixel);
                }
                for c in eyes {
                    val += (level(1) - val) * ellipse_cover(q, c, eye_r, pixel);
                }
                val += (level(2) - val) * coverage(triangle_depth(q, &nose), pixel);
                val += (level(3) - val) * ellipse_cover(q, mouth_c, mouth_r, pixel);
                let shade = 1.0 + self.light[0] * u + self.light[1] * v;
                (val * shade + noise.sample(rng)).clamp(0.0, 1.0)
            })
            .collect();
        Ok(Image::new(size, size, data)?.quantized())
    }
}

/// Anti-aliased coverage from a signed depth (positive inside), one pixel wide.
fn coverage(depth: f64, pixel: f64) -> f64 {
    (depth / pixel + 0.5).clamp(0.0, 1.0)
}

fn ellipse_cover(q: [f64; 2], c: [f64; 2], r: [f64; 2], pixel: f64) -> f64 {
    let (dx, dy) = ((q[0] - c[0]) / r[0], (q[1] - c[1]) / r[1]);
    let rho = (dx * dx + dy * dy).sqrt();
    coverage((1.0 - rho) * r[0].min(r[1]), pixel)
}

fn polyline_distance(q: [f64; 2], pts: &[[f64; 2]]) -> f64 {
    pts.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let t = (((q[0] - a[0]) * ex + (q[1] - a[1]) * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
            (q[0] - a[0] - t * ex).hypot(q[1] - a[1] - t * ey)
        })
        .fold(f64::INFINITY, f64::min)
}

fn grow_triangle(t: [[f64; 2]; 3], factor: f64) -> [[f64; 2]; 3] {
    let c = [(t[0][0] + t[1][0] + t[2][0]) / 3.0, (t[0][1] + t[1][1] + t[2][1]) / 3.0];
    t.map(|p| [c[0] + factor * (p[0] - c[0]), c[1] + factor * (p[1] - c[1])])
}

/// Distance to the nearest edge line, positive inside the triangle.
fn triangle_depth(q: [f64; 2], t: &[[f64; 2]; 3]) -> f64 {
    let area2 = (t[1][0] - t[0][0]) * (t[2][1] - t[0][1]) - (t[1][1] - t[0][1]) * (t[2][0] - t[0][0]);
    let orient = area2.signum();
    (0..3)
        .map(|i| {
            let (a, b) = (t[i], t[(i + 1) % 3]);
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            orient * (ex * (q[1] - a[1]) - ey * (q[0] - a[0])) / ex.hypot(ey)
        })
        .fold(f64::INFINITY, f64::min)
}

/// `n` rendered faces with their landmarks and normalizers, deterministic in `seed`.
pub fn synth_dataset(n: usize, seed: u64, size: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, &[0x5e7, i as u64]));
            let params = FaceParams::sample(&mut rng);
            let image = params.render(size, &mut rng)?;
            let landmarks = params.landmarks();
            let (a, b) = OUTER_EYE_CORNERS;
            let interocular = (landmarks[a].x - landmarks[b].x).hypot(landmarks[a].y - landmarks[b].y);
            Sample::new(image, landmarks.clone(), face_size(&landmarks), interocular)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::{assign_groups, validate_structure, GroupScheme};
    use crate::imaging::to_pixel;

    #[test]
    fn deterministic_and_distinct() {
        let a = synth_dataset(12, 3, 64).unwrap();
        let b = synth_dataset(12, 3, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert_ne!(a[i].landmarks, a[j].landmarks);
            }
        }
        assert_ne!(synth_dataset(1, 4, 64).unwrap()[0], a[0]);
        assert!(synth_dataset(0, 0, 64).is_err());
    }

    #[test]
    fn landmarks_sit_on_bright_features() {
        let size = 64;
        for s in synth_dataset(100, 7, size).unwrap() {
            assert_eq!(s.landmarks.len(), SYNTH_LANDMARKS);
            for p in s.landmarks.iter() {
                assert!(p.x.abs() < 1.0 && p.y.abs() < 1.0);
                let (px, py) = to_pixel(*p, size, size).unwrap();
                let (x, y) = (px.round() as usize, py.round() as usize);
                let mut window = Vec::new();
                for wy in y.saturating_sub(5)..(y + 6).min(size) {
                    for wx in x.saturating_sub(5)..(x + 6).min(size) {
                        window.push(s.image.get(wx, wy));
                    }
                }
                window.sort_by(f64::total_cmp);
                let background = window[window.len() / 4];
                assert!(s.image.get(x, y) >= background + 0.1, "landmark at ({x},{y})");
            }
            assert!(s.face_size > 0.0 && s.interocular > 0.0);
        }
    }

    #[test]
    fn layout_matches_the_synthetic_groups() {
        let groups = assign_groups(SYNTH_LANDMARKS, GroupScheme::Synthetic).unwrap();
        for s in synth_dataset(20, 1, 64).unwrap() {
            assert!(validate_structure(&groups, &s.landmarks, &s.landmarks).unwrap());
            let p = &s.landmarks;
            // left-to-right ordering within paired features
            assert!(p[0].x < p[1].x && p[1].x < p[2].x && p[3].x < p[4].x && p[4].x < p[5].x);
            assert!(p[6].x < p[8].x && p[10].x < p[12].x && p[17].x < p[19].x);
        }
    }
}
