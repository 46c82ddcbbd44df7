//! Thin-plate-spline fitting, evaluation, backward image warping and the
//! vector-Jacobian product of a warp with respect to its control points.
//!
//! A fit solves the bordered system
//!
//! ```text
//! [ K + λI  Φ ] [ W ]   [ T ]
//! [ Φᵀ      0 ] [ A ] = [ 0 ]
//! ```
//!
//! with `K_ij = U(|c_i - c_j|)`, `U(r) = r² ln r²`, `Φ_i = [1, x_i, y_i]`.

use nalgebra::{DMatrix, Dyn, LU};

use crate::error::{Error, Result};
use crate::imaging::{Image, NormalizedPoint};
use crate::landmarks::LandmarkSet;

/// Ridge used for attack-time and pipeline fits.
pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Ridge of the single retry after a singular solve.
pub const FALLBACK_RIDGE: f64 = 1e-4;

const PIVOT_RATIO_FLOOR: f64 = 1e-13;

/// `U` as a function of the squared radius `s = r²`: `s ln s`, with `U(0) = 0`.
#[inline]
pub fn kernel(s: f64) -> f64 {
    if s > 0.0 {
        s * s.ln()
    } else {
        0.0
    }
}

/// `dU/ds = ln s + 1`, taken as 0 at the origin where the full gradient
/// `2 (ln s + 1) (p - c)` vanishes in the limit.
#[inline]
fn kernel_ds(s: f64) -> f64 {
    if s > 0.0 {
        s.ln() + 1.0
    } else {
        0.0
    }
}

#[inline]
fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Per-landmark offsets `d_i = P_adv_i - P_i`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DisplacementField(pub Vec<[f64; 2]>);

impl DisplacementField {
    pub fn zeros(len: usize) -> Self {
        Self(vec![[0.0; 2]; len])
    }

    pub fn between(source: &LandmarkSet, target: &LandmarkSet) -> Result<Self> {
        source.ensure_same_len(target, "displacement")?;
        Ok(Self(
            source
                .iter()
                .zip(target.iter())
                .map(|(s, t)| [t.x - s.x, t.y - s.y])
                .collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply(&self, source: &LandmarkSet) -> LandmarkSet {
        source
            .iter()
            .zip(&self.0)
            .map(|(p, d)| NormalizedPoint::new(p.x + d[0], p.y + d[1]))
            .collect()
    }

    /// Largest absolute coordinate (ℓ∞ norm over the whole field).
    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().flatten().all(|&v| v == 0.0)
    }
}

/// Fitted spline mapping the control points onto the fit targets.
#[derive(Debug, Clone)]
pub struct TpsTransform {
    control_points: Vec<[f64; 2]>,
    /// Row `d`: `[constant, x coefficient, y coefficient]` for output axis `d`.
    affine: [[f64; 3]; 2],
    kernel_weights: Vec<[f64; 2]>,
    regularization: f64,
}

/// The LU-factored bordered system for one set of control points.
struct TpsSystem {
    lu: LU<f64, Dyn, Dyn>,
    ridge: f64,
}

impl TpsSystem {
    fn build(sources: &[[f64; 2]], ridge: f64) -> Option<Self> {
        let n = sources.len();
        let m = system_matrix(sources, ridge);
        let lu = m.lu();
        let diag = lu.u().diagonal();
        let max = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let min = diag.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        if !(max.is_finite() && max > 0.0 && min / max > PIVOT_RATIO_FLOOR) || diag.len() != n + 3 {
            return None;
        }
        Some(Self { lu, ridge })
    }

    /// Factor with the requested ridge, retrying once with [`FALLBACK_RIDGE`].
    fn build_with_fallback(sources: &[[f64; 2]], ridge: f64) -> Result<Self> {
        if sources.len() < 3 {
            return Err(Error::TooFewControlPoints(sources.len()));
        }
        if sources.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateControlPoints("non-finite control point".into()));
        }
        if let Some(sys) = Self::build(sources, ridge) {
            return Ok(sys);
        }
        log::debug!("singular spline system at ridge {ridge}, retrying with {FALLBACK_RIDGE}");
        Self::build(sources, ridge.max(FALLBACK_RIDGE)).ok_or_else(|| {
            Error::DegenerateControlPoints(format!(
                "singular system for {} control points (collinear or coincident)",
                sources.len()
            ))
        })
    }

    fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lu
            .solve(rhs)
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::DegenerateControlPoints("solve produced non-finite values".into()))
    }
}

fn system_matrix(sources: &[[f64; 2]], ridge: f64) -> DMatrix<f64> {
    let n = sources.len();
    let mut m = DMatrix::<f64>::zeros(n + 3, n + 3);
    for i in 0..n {
        for j in (i + 1)..n {
            let u = kernel(sq_dist(sources[i], sources[j]));
            m[(i, j)] = u;
            m[(j, i)] = u;
        }
        m[(i, i)] = ridge;
        let row = [1.0, sources[i][0], sources[i][1]];
        for (k, v) in row.into_iter().enumerate() {
            m[(i, n + k)] = v;
            m[(n + k, i)] = v;
        }
    }
    m
}

impl TpsTransform {
    /// The exact identity on the given control points.
    pub fn identity(control_points: &LandmarkSet) -> Self {
        Self {
            control_points: control_points.to_xy(),
            affine: [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            kernel_weights: vec![[0.0; 2]; control_points.len()],
            regularization: 0.0,
        }
    }

    pub fn control_points(&self) -> &[[f64; 2]] {
        &self.control_points
    }

    pub fn affine(&self) -> &[[f64; 3]; 2] {
        &self.affine
    }

    pub fn kernel_weights(&self) -> &[[f64; 2]] {
        &self.kernel_weights
    }

    /// Ridge actually used by the solve (after any fallback).
    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    #[inline]
    pub fn eval_point(&self, p: NormalizedPoint) -> NormalizedPoint {
        let a = &self.affine;
        let mut x = a[0][0] + a[0][1] * p.x + a[0][2] * p.y;
        let mut y = a[1][0] + a[1][1] * p.x + a[1][2] * p.y;
        for (c, w) in self.control_points.iter().zip(&self.kernel_weights) {
            let u = kernel(sq_dist([p.x, p.y], *c));
            x += w[0] * u;
            y += w[1] * u;
        }
        NormalizedPoint::new(x, y)
    }

    /// Jacobian `∂out_d / ∂p_e` at `p`, indexed `[d][e]`.
    pub fn jacobian_at(&self, p: NormalizedPoint) -> [[f64; 2]; 2] {
        let a = &self.affine;
        let mut j = [[a[0][1], a[0][2]], [a[1][1], a[1][2]]];
        for (c, w) in self.control_points.iter().zip(&self.kernel_weights) {
            let g = 2.0 * kernel_ds(sq_dist([p.x, p.y], *c));
            let (dx, dy) = (p.x - c[0], p.y - c[1]);
            for d in 0..2 {
                j[d][0] += w[d] * g * dx;
                j[d][1] += w[d] * g * dy;
            }
        }
        j
    }

    /// Largest violation of `Σ w = 0`, `Σ w x = 0`, `Σ w y = 0`.
    pub fn side_condition_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for d in 0..2 {
            let (mut s0, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for (c, w) in self.control_points.iter().zip(&self.kernel_weights) {
                s0 += w[d];
                sx += w[d] * c[0];
                sy += w[d] * c[1];
            }
            worst = worst.max(s0.abs()).max(sx.abs()).max(sy.abs());
        }
        worst
    }
}

/// Fit the spline taking `source` onto `target`.
///
/// A bitwise-equal pair yields the exact identity. Singular systems are
/// retried once with [`FALLBACK_RIDGE`] before failing.
pub fn fit_tps(source: &LandmarkSet, target: &LandmarkSet, ridge: f64) -> Result<TpsTransform> {
    source.ensure_same_len(target, "spline fit")?;
    if source.len() < 3 {
        return Err(Error::TooFewControlPoints(source.len()));
    }
    if source == target {
        return Ok(TpsTransform::identity(source));
    }
    let sources = source.to_xy();
    let system = TpsSystem::build_with_fallback(&sources, ridge)?;
    let n = sources.len();
    let mut rhs = DMatrix::<f64>::zeros(n + 3, 2);
    for (i, t) in target.iter().enumerate() {
        rhs[(i, 0)] = t.x;
        rhs[(i, 1)] = t.y;
    }
    let theta = system.solve(&rhs)?;
    let kernel_weights = (0..n).map(|i| [theta[(i, 0)], theta[(i, 1)]]).collect();
    let mut affine = [[0.0; 3]; 2];
    for (d, row) in affine.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = theta[(n + k, d)];
        }
    }
    Ok(TpsTransform {
        control_points: sources,
        affine,
        kernel_weights,
        regularization: system.ridge,
    })
}

pub fn eval_tps(t: &TpsTransform, pts: &LandmarkSet) -> LandmarkSet {
    pts.iter().map(|&p| t.eval_point(p)).collect()
}

/// Apply a fitted backward map to every output pixel center.
pub fn warp_with(img: &Image, t: &TpsTransform) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(img.sample(t.eval_point(img.pixel_center(x, y))));
        }
    }
    Image::new(w, h, data).expect("dimensions preserved")
}

/// Backward warp moving the content at `p` to `p_adv`.
///
/// The spline is fit from `p_adv` onto `p` and each output pixel samples the
/// input at the mapped location.
pub fn warp_image(img: &Image, p: &LandmarkSet, p_adv: &LandmarkSet, ridge: f64) -> Result<Image> {
    let t = fit_tps(p_adv, p, ridge)?;
    Ok(warp_with(img, &t))
}

/// Map landmarks predicted on a manipulated image back into the original
/// frame using the swapped-role fit (`p_adv` onto `p`).
pub fn invert_landmarks(
    p: &LandmarkSet,
    p_adv: &LandmarkSet,
    predicted: &LandmarkSet,
    ridge: f64,
) -> Result<LandmarkSet> {
    let t = fit_tps(p_adv, p, ridge)?;
    Ok(eval_tps(&t, predicted))
}

/// Gradient of `⟨cotangent, warp_image(img, p, p_adv)⟩` with respect to `p_adv`.
///
/// Chains the bilinear sampling gradient through the kernel evaluation and,
/// via one adjoint solve, through the dependence of the spline coefficients
/// on the control points.
pub fn warp_vjp(
    img: &Image,
    p: &LandmarkSet,
    p_adv: &LandmarkSet,
    cotangent: &[f64],
    ridge: f64,
) -> Result<Vec<[f64; 2]>> {
    p.ensure_same_len(p_adv, "warp vjp")?;
    let (w, h) = (img.width(), img.height());
    if cotangent.len() != w * h {
        return Err(Error::ShapeMismatch(format!(
            "cotangent has {} entries, image {}x{}",
            cotangent.len(),
            w,
            h
        )));
    }
    let n = p.len();
    let sources = p_adv.to_xy();
    let system = TpsSystem::build_with_fallback(&sources, ridge)?;
    let mut rhs = DMatrix::<f64>::zeros(n + 3, 2);
    for (i, t) in p.iter().enumerate() {
        rhs[(i, 0)] = t.x;
        rhs[(i, 1)] = t.y;
    }
    let theta = system.solve(&rhs)?;
    let weights: Vec<[f64; 2]> = (0..n).map(|i| [theta[(i, 0)], theta[(i, 1)]]).collect();
    let affine = [
        [theta[(n, 0)], theta[(n + 1, 0)], theta[(n + 2, 0)]],
        [theta[(n, 1)], theta[(n + 1, 1)], theta[(n + 2, 1)]],
    ];

    let mut grad = vec![[0.0; 2]; n];
    // ∂loss/∂θ accumulated over pixels
    let mut g_theta = DMatrix::<f64>::zeros(n + 3, 2);
    let mut s = vec![0.0; n];
    let mut u = vec![0.0; n];

    for py in 0..h {
        for px in 0..w {
            let g = cotangent[py * w + px];
            if g == 0.0 {
                continue;
            }
            let x = img.pixel_center(px, py);
            let mut out = [
                affine[0][0] + affine[0][1] * x.x + affine[0][2] * x.y,
                affine[1][0] + affine[1][1] * x.x + affine[1][2] * x.y,
            ];
            for j in 0..n {
                s[j] = sq_dist([x.x, x.y], sources[j]);
                u[j] = kernel(s[j]);
                out[0] += weights[j][0] * u[j];
                out[1] += weights[j][1] * u[j];
            }
            let (_, gi) = img.bilinear_sample(NormalizedPoint::new(out[0], out[1]));
            let a = [g * gi[0], g * gi[1]];
            if a[0] == 0.0 && a[1] == 0.0 {
                continue;
            }
            for j in 0..n {
                g_theta[(j, 0)] += a[0] * u[j];
                g_theta[(j, 1)] += a[1] * u[j];
                // explicit dependence of U(|x - c_j|) on c_j
                let aw = a[0] * weights[j][0] + a[1] * weights[j][1];
                let k = -2.0 * kernel_ds(s[j]) * aw;
                grad[j][0] += k * (x.x - sources[j][0]);
                grad[j][1] += k * (x.y - sources[j][1]);
            }
            for d in 0..2 {
                g_theta[(n, d)] += a[d];
                g_theta[(n + 1, d)] += a[d] * x.x;
                g_theta[(n + 2, d)] += a[d] * x.y;
            }
        }
    }

    // θ = M⁻¹ Y  ⇒  ∂loss/∂M = -Λ θᵀ with M Λ = ∂loss/∂θ (M symmetric)
    let lambda = system.solve(&g_theta)?;
    let g_m = -(&lambda * theta.transpose());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let coef = g_m[(i, j)] + g_m[(j, i)];
            let k = 2.0 * kernel_ds(sq_dist(sources[i], sources[j])) * coef;
            grad[i][0] += k * (sources[i][0] - sources[j][0]);
            grad[i][1] += k * (sources[i][1] - sources[j][1]);
        }
        grad[i][0] += g_m[(i, n + 1)] + g_m[(n + 1, i)];
        grad[i][1] += g_m[(i, n + 2)] + g_m[(n + 2, i)];
    }
    Ok(grad)
}
