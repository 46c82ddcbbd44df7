//! Identity embeddings `f: Image → R^n_z` with input gradients.
//!
//! [`ToyEmbedder`] is a fixed random network (zero-mean 3×3 filters, tanh,
//! average pooling, dense projection, ℓ2 normalization). It is never trained;
//! it only has to be a smooth map that responds to facial geometry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::{from_pixel, to_pixel, Image};

pub const DEFAULT_EMBEDDING_DIM: usize = 128;
pub const DEFAULT_EMBEDDER_SIZE: usize = 64;

/// Unit-norm identity representation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn embedding_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// A differentiable face recognizer.
pub trait Embedder: Send + Sync {
    /// Expected input `(width, height)`.
    fn input_size(&self) -> (usize, usize);

    fn dim(&self) -> usize;

    fn embed(&self, img: &Image) -> Result<EmbeddingVector>;

    /// `∂⟨cotangent, embed(img)⟩ / ∂img`, row-major per pixel.
    fn embed_input_grad(&self, img: &Image, cotangent: &EmbeddingVector) -> Result<Vec<f64>>;

    fn check_size(&self, img: &Image) -> Result<()> {
        let (w, h) = self.input_size();
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::ShapeMismatch(format!(
                "embedder expects {}x{}, got {}x{}",
                w,
                h,
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }
}

/// Embed an image of any size, resampling bilinearly to the embedder's input.
pub fn embed_resized(e: &dyn Embedder, img: &Image) -> Result<EmbeddingVector> {
    let (w, h) = e.input_size();
    e.embed(&img.resize(w, h)?)
}

/// Input gradient for [`embed_resized`], pulled back through the resampling.
pub fn embed_resized_grad(
    e: &dyn Embedder,
    img: &Image,
    cotangent: &EmbeddingVector,
) -> Result<Vec<f64>> {
    let (w, h) = e.input_size();
    if (img.width(), img.height()) == (w, h) {
        return e.embed_input_grad(img, cotangent);
    }
    let small = img.resize(w, h)?;
    let g_small = e.embed_input_grad(&small, cotangent)?;
    Ok(resize_vjp(img.width(), img.height(), w, h, &g_small))
}

/// Transpose of bilinear resampling from `src_w×src_h` to `dst_w×dst_h`.
fn resize_vjp(src_w: usize, src_h: usize, dst_w: usize, dst_h: usize, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; src_w * src_h];
    let axis = |p: f64, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let p = p.clamp(0.0, (n - 1) as f64);
        let i0 = (p.floor() as usize).min(n - 2);
        (i0, i0 + 1, p - i0 as f64)
    };
    for y in 0..dst_h {
        for x in 0..dst_w {
            let gv = g[y * dst_w + x];
            if gv == 0.0 {
                continue;
            }
            let q = from_pixel(x as f64, y as f64, dst_w, dst_h);
            let (px, py) = to_pixel(q, src_w, src_h).expect("nonzero dims");
            let (x0, x1, fx) = axis(px, src_w);
            let (y0, y1, fy) = axis(py, src_h);
            out[y0 * src_w + x0] += gv * (1.0 - fx) * (1.0 - fy);
            out[y0 * src_w + x1] += gv * fx * (1.0 - fy);
            out[y1 * src_w + x0] += gv * (1.0 - fx) * fy;
            out[y1 * src_w + x1] += gv * fx * fy;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    seed: u64,
    size: usize,
    channels: usize,
    pool: usize,
    gain: f64,
    dim: usize,
    /// `channels × 9`
    filters: Vec<f64>,
    /// `dim × features`, row-major
    projection: Vec<f64>,
}

struct Forward {
    /// tanh activations, `channels × size × size`
    act: Vec<f64>,
    pre_norm: Vec<f64>,
    norm: f64,
}

impl ToyEmbedder {
    pub fn new(seed: u64) -> Self {
        Self::with_config(seed, DEFAULT_EMBEDDER_SIZE, DEFAULT_EMBEDDING_DIM)
    }

    pub fn with_config(seed: u64, size: usize, dim: usize) -> Self {
        let channels = 8;
        let pool = 8;
        assert!(size >= pool && size.is_multiple_of(pool), "embedder size must be a multiple of {pool}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e4be_dde7);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut filters = Vec::with_capacity(channels * 9);
        for _ in 0..channels {
            let mut f: Vec<f64> = (0..9).map(|_| normal.sample(&mut rng)).collect();
            // zero-mean filters ignore flat regions and respond to structure
            let mean = f.iter().sum::<f64>() / 9.0;
            f.iter_mut().for_each(|v| *v -= mean);
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            filters.extend(f.iter().map(|v| v / norm));
        }
        let cells = size / pool;
        let features = channels * cells * cells;
        let scale = 1.0 / (features as f64).sqrt();
        let projection = (0..dim * features)
            .map(|_| normal.sample(&mut rng) * scale)
            .collect();
        Self {
            seed,
            size,
            channels,
            pool,
            gain: 1.0,
            dim,
            filters,
            projection,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn features(&self) -> usize {
        let cells = self.size / self.pool;
        self.channels * cells * cells
    }

    fn forward(&self, img: &Image) -> Forward {
        let s = self.size;
        let data = img.data();
        let mut act = vec![0.0; self.channels * s * s];
        for c in 0..self.channels {
            let f = &self.filters[c * 9..(c + 1) * 9];
            let out = &mut act[c * s * s..(c + 1) * s * s];
            for (k, &w) in f.iter().enumerate() {
                let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                for y in 0..s {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= s as isize {
                        continue;
                    }
                    let src = &data[sy as usize * s..(sy as usize + 1) * s];
                    let dst = &mut out[y * s..(y + 1) * s];
                    let (x0, x1) = (dx.max(0) as usize, (s as isize + dx.min(0)) as usize);
                    for x in x0..x1 {
                        dst[(x as isize - dx) as usize] += w * src[x];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v = (self.gain * *v).tanh());
        }
        let pooled = self.pool_forward(&act);
        let feats = self.features();
        let pre_norm: Vec<f64> = (0..self.dim)
            .map(|i| {
                let row = &self.projection[i * feats..(i + 1) * feats];
                row.iter().zip(&pooled).map(|(a, b)| a * b).sum()
            })
            .collect();
        let norm = pre_norm.iter().map(|v| v * v).sum::<f64>().sqrt();
        Forward { act, pre_norm, norm }
    }

    fn pool_forward(&self, act: &[f64]) -> Vec<f64> {
        let (s, p) = (self.size, self.pool);
        let cells = s / p;
        let inv = 1.0 / (p * p) as f64;
        let mut pooled = vec![0.0; self.features()];
        for c in 0..self.channels {
            for y in 0..s {
                for x in 0..s {
                    pooled[(c * cells + y / p) * cells + x / p] += act[(c * s + y) * s + x] * inv;
                }
            }
        }
        pooled
    }
}

impl Embedder for ToyEmbedder {
    fn input_size(&self) -> (usize, usize) {
        (self.size, self.size)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, img: &Image) -> Result<EmbeddingVector> {
        self.check_size(img)?;
        let fwd = self.forward(img);
        let inv = 1.0 / fwd.norm.max(1e-300);
        Ok(EmbeddingVector(fwd.pre_norm.iter().map(|v| v * inv).collect()))
    }

    fn embed_input_grad(&self, img: &Image, cotangent: &EmbeddingVector) -> Result<Vec<f64>> {
        self.check_size(img)?;
        if cotangent.dim() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "cotangent dim {} vs embedding dim {}",
                cotangent.dim(),
                self.dim
            )));
        }
        let (s, p) = (self.size, self.pool);
        let fwd = self.forward(img);
        let inv = 1.0 / fwd.norm.max(1e-300);
        // normalization Jacobian: (I - z zᵀ) / |y|
        let z: Vec<f64> = fwd.pre_norm.iter().map(|v| v * inv).collect();
        let zc: f64 = z.iter().zip(&cotangent.0).map(|(a, b)| a * b).sum();
        let g_pre: Vec<f64> = cotangent.0.iter().zip(&z).map(|(c, zi)| (c - zi * zc) * inv).collect();

        let feats = self.features();
        let mut g_pooled = vec![0.0; feats];
        for (i, &g) in g_pre.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.projection[i * feats..(i + 1) * feats];
            g_pooled.iter_mut().zip(row).for_each(|(acc, w)| *acc += g * w);
        }

        let cells = s / p;
        let pool_inv = 1.0 / (p * p) as f64;
        let mut g_img = vec![0.0; s * s];
        let mut g_act = vec![0.0; s * s];
        for c in 0..self.channels {
            let act = &fwd.act[c * s * s..(c + 1) * s * s];
            for y in 0..s {
                for x in 0..s {
                    let t = act[y * s + x];
                    g_act[y * s + x] =
                        g_pooled[(c * cells + y / p) * cells + x / p] * pool_inv * self.gain * (1.0 - t * t);
                }
            }
            let f = &self.filters[c * 9..(c + 1) * 9];
            for (k, &w) in f.iter().enumerate() {
                let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                for y in 0..s {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= s as isize {
                        continue;
                    }
                    let src = &g_act[y * s..(y + 1) * s];
                    let dst = &mut g_img[sy as usize * s..(sy as usize + 1) * s];
                    let (x0, x1) = (dx.max(0) as usize, (s as isize + dx.min(0)) as usize);
                    for x in x0..x1 {
                        dst[x] += w * src[(x as isize - dx) as usize];
                    }
                }
            }
        }
        Ok(g_img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rel_err;
    use rand::Rng;

    fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
        // smooth-ish content so tanh is not saturated everywhere
        let phase: f64 = rng.gen_range(0.0..6.0);
        Image::from_fn(size, size, |x, y| {
            0.5 + 0.3 * ((x as f64) * 0.3 + phase).sin() * ((y as f64) * 0.2).cos()
                + 0.05 * rng.gen_range(-1.0..1.0)
        })
        .unwrap()
    }

    fn random_cotangent(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        EmbeddingVector((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn deterministic_and_normalized() {
        let e = ToyEmbedder::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 64);
        let a = e.embed(&img).unwrap();
        let b = ToyEmbedder::new(3).embed(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 128);
        assert!((a.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let e = ToyEmbedder::new(0);
        let img = Image::filled(32, 32, 0.5).unwrap();
        assert!(matches!(e.embed(&img), Err(Error::ShapeMismatch(_))));
        let z = EmbeddingVector(vec![0.0; 128]);
        assert!(e.embed_input_grad(&img, &z).is_err());
        assert!(embed_resized(&e, &img).is_ok());
    }

    #[test]
    fn one_pixel_nudge_moves_embedding_little() {
        let e = ToyEmbedder::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 64);
        let mut nudged = img.clone();
        nudged.set(20, 31, img.get(20, 31) + 1e-6);
        let d = embedding_distance(&e.embed(&img).unwrap(), &e.embed(&nudged).unwrap()).unwrap();
        assert!(d < 1e-3);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let e = ToyEmbedder::new(9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 64);
        let cot = random_cotangent(&mut rng, 128);
        let grad = e.embed_input_grad(&img, &cot).unwrap();
        let objective = |im: &Image| -> f64 {
            let z = e.embed(im).unwrap();
            z.0.iter().zip(&cot.0).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..50 {
            let (x, y) = (rng.gen_range(0..64), rng.gen_range(0..64));
            let mut plus = img.clone();
            plus.set(x, y, img.get(x, y) + h);
            let mut minus = img.clone();
            minus.set(x, y, img.get(x, y) - h);
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let g = grad[y * 64 + x];
            assert!((g - fd).abs() <= 1e-3 * fd.abs().max(1e-6), "pixel ({x},{y}): {g} vs {fd}");
            analytic.push(g);
            numeric.push(fd);
        }
        assert!(rel_err(&analytic, &numeric) < 1e-3);
    }

    #[test]
    fn input_gradient_is_linear_in_cotangent() {
        let e = ToyEmbedder::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 64);
        let (c1, c2) = (random_cotangent(&mut rng, 128), random_cotangent(&mut rng, 128));
        let (a, b) = (0.7, -1.3);
        let mix = EmbeddingVector(c1.0.iter().zip(&c2.0).map(|(x, y)| a * x + b * y).collect());
        let g1 = e.embed_input_grad(&img, &c1).unwrap();
        let g2 = e.embed_input_grad(&img, &c2).unwrap();
        let gm = e.embed_input_grad(&img, &mix).unwrap();
        for i in 0..gm.len() {
            assert!((gm[i] - (a * g1[i] + b * g2[i])).abs() < 1e-8);
        }
        let zero = e.embed_input_grad(&img, &EmbeddingVector(vec![0.0; 128])).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resized_gradient_matches_finite_differences() {
        let e = ToyEmbedder::with_config(1, 16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, 24);
        let cot = random_cotangent(&mut rng, 8);
        let grad = embed_resized_grad(&e, &img, &cot).unwrap();
        let objective = |im: &Image| -> f64 {
            let z = embed_resized(&e, im).unwrap();
            z.0.iter().zip(&cot.0).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for _ in 0..20 {
            let (x, y) = (rng.gen_range(0..24), rng.gen_range(0..24));
            let mut plus = img.clone();
            plus.set(x, y, img.get(x, y) + h);
            let mut minus = img.clone();
            minus.set(x, y, img.get(x, y) - h);
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert!((grad[y * 24 + x] - fd).abs() <= 1e-3 * fd.abs().max(1e-6));
        }
    }

    #[test]
    fn distance_axioms() {
        let e1 = EmbeddingVector(vec![1.0, 0.0]);
        let e2 = EmbeddingVector(vec![0.0, 1.0]);
        assert_eq!(embedding_distance(&e1, &e1).unwrap(), 0.0);
        assert!((embedding_distance(&e1, &e2).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(embedding_distance(&e1, &EmbeddingVector(vec![1.0])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            EmbeddingVector(v.into_iter().map(|x| x / n).collect())
        };
        for _ in 0..200 {
            let (a, b, c) = (unit(&mut rng), unit(&mut rng), unit(&mut rng));
            let ab = embedding_distance(&a, &b).unwrap();
            assert_eq!(ab, embedding_distance(&b, &a).unwrap());
            assert!(ab <= 2.0);
            let ac = embedding_distance(&a, &c).unwrap();
            let cb = embedding_distance(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-12);
        }
    }
}
