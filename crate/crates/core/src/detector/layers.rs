//! Dense CHW kernels with hand-written backward passes.
//!
//! All maps are square, `s × s`, channel-major.

/// Copies `c` square maps of side `s` into a zero border of width one.
fn pad1(input: &[f64], c: usize, s: usize) -> Vec<f64> {
    let p = s + 2;
    let mut out = vec![0.0; c * p * p];
    for ch in 0..c {
        for y in 0..s {
            let src = &input[(ch * s + y) * s..(ch * s + y + 1) * s];
            out[ch * p * p + (y + 1) * p + 1..][..s].copy_from_slice(src);
        }
    }
    out
}

/// `dst[x] += w[0] row[x] + w[1] row[x+1] + w[2] row[x+2]`.
#[inline]
fn tap_row(dst: &mut [f64], row: &[f64], w: &[f64]) {
    let (w0, w1, w2) = (w[0], w[1], w[2]);
    let n = dst.len();
    let (r0, r1, r2) = (&row[..n], &row[1..n + 1], &row[2..n + 2]);
    for x in 0..n {
        dst[x] += w0 * r0[x] + w1 * r1[x] + w2 * r2[x];
    }
}

/// Correlates padded `src` (side `s + 2`) with one 3×3 kernel into `dst` (side `s`).
#[inline]
fn correlate_padded(src: &[f64], s: usize, w: &[f64], dst: &mut [f64]) {
    let p = s + 2;
    for (y, d) in dst.chunks_exact_mut(s).enumerate() {
        for ky in 0..3 {
            tap_row(d, &src[(y + ky) * p..(y + ky + 1) * p], &w[ky * 3..ky * 3 + 3]);
        }
    }
}

/// Dot product accumulated in four lanes so it vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Fills `dst` (side `s`) with the window of padded `src` offset by tap `t`.
#[inline]
fn shifted_window(src: &[f64], s: usize, t: usize, dst: &mut [f64]) {
    let p = s + 2;
    let (ky, kx) = (t / 3, t % 3);
    for (y, row) in dst.chunks_exact_mut(s).enumerate() {
        row.copy_from_slice(&src[(y + ky) * p + kx..][..s]);
    }
}

/// 3×3 zero-padded convolution. `w` is `[cout][cin][3][3]`.
pub fn conv3x3(input: &[f64], cin: usize, s: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    let n = s * s;
    let pn = (s + 2) * (s + 2);
    let padded = pad1(input, cin, s);
    for (o, &bo) in b.iter().enumerate() {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.fill(bo);
        for i in 0..cin {
            let k = (o * cin + i) * 9;
            correlate_padded(&padded[i * pn..(i + 1) * pn], s, &w[k..k + 9], dst);
        }
    }
}

/// Accumulates weight/bias gradients and, when requested, the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    s: usize,
    w: &[f64],
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    gin: Option<&mut [f64]>,
) {
    let n = s * s;
    let p = s + 2;
    let pn = p * p;
    let cout = gb.len();
    let padded = pad1(input, cin, s);
    for (o, g) in gout.chunks_exact(n).take(cout).enumerate() {
        gb[o] += g.iter().sum::<f64>();
    }
    let mut shifted = vec![0.0; n];
    for i in 0..cin {
        for t in 0..9 {
            shifted_window(&padded[i * pn..(i + 1) * pn], s, t, &mut shifted);
            for o in 0..cout {
                gw[(o * cin + i) * 9 + t] += dot(&gout[o * n..(o + 1) * n], &shifted);
            }
        }
    }
    if let Some(gin) = gin {
        // correlation of the padded output gradient with the flipped kernel
        let gpad = pad1(gout, cout, s);
        let mut flipped = [0.0; 9];
        for i in 0..cin {
            let dst = &mut gin[i * n..(i + 1) * n];
            for o in 0..cout {
                let k = (o * cin + i) * 9;
                for (t, f) in flipped.iter_mut().enumerate() {
                    *f = w[k + 8 - t];
                }
                correlate_padded(&gpad[o * pn..(o + 1) * pn], s, &flipped, dst);
            }
        }
    }
}

pub fn relu(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `g` where the (post-activation) output was not positive.
pub fn relu_backward(out: &[f64], g: &mut [f64]) {
    for (gv, &o) in g.iter_mut().zip(out) {
        if o <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// 2×2 average pool, `s → s/2`.
pub fn avg_pool2(input: &[f64], c: usize, s: usize, out: &mut [f64]) {
    let h = s / 2;
    for ch in 0..c {
        let src = &input[ch * s * s..(ch + 1) * s * s];
        let dst = &mut out[ch * h * h..(ch + 1) * h * h];
        for y in 0..h {
            for x in 0..h {
                let a = 2 * y * s + 2 * x;
                dst[y * h + x] = 0.25 * (src[a] + src[a + 1] + src[a + s] + src[a + s + 1]);
            }
        }
    }
}

pub fn avg_pool2_backward(g: &[f64], c: usize, s: usize, gin: &mut [f64]) {
    let h = s / 2;
    for ch in 0..c {
        let src = &g[ch * h * h..(ch + 1) * h * h];
        let dst = &mut gin[ch * s * s..(ch + 1) * s * s];
        for y in 0..h {
            for x in 0..h {
                let v = 0.25 * src[y * h + x];
                let a = 2 * y * s + 2 * x;
                dst[a] += v;
                dst[a + 1] += v;
                dst[a + s] += v;
                dst[a + s + 1] += v;
            }
        }
    }
}

/// Nearest-neighbour 2× upsampling, added into `out` (`s → 2s`).
pub fn upsample2_add(input: &[f64], c: usize, s: usize, out: &mut [f64]) {
    let t = 2 * s;
    for ch in 0..c {
        let src = &input[ch * s * s..(ch + 1) * s * s];
        let dst = &mut out[ch * t * t..(ch + 1) * t * t];
        for y in 0..t {
            for x in 0..t {
                dst[y * t + x] += src[(y / 2) * s + x / 2];
            }
        }
    }
}

pub fn upsample2_backward(g: &[f64], c: usize, s: usize, gin: &mut [f64]) {
    let t = 2 * s;
    for ch in 0..c {
        let src = &g[ch * t * t..(ch + 1) * t * t];
        let dst = &mut gin[ch * s * s..(ch + 1) * s * s];
        for y in 0..t {
            for x in 0..t {
                dst[(y / 2) * s + x / 2] += src[y * t + x];
            }
        }
    }
}

/// Per-channel linear map over pixels. `w` is `[cout][cin]`.
pub fn pointwise(input: &[f64], cin: usize, n: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    for (o, &bo) in b.iter().enumerate() {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.fill(bo);
        for i in 0..cin {
            let wk = w[o * cin + i];
            for (a, &v) in dst.iter_mut().zip(&input[i * n..(i + 1) * n]) {
                *a += wk * v;
            }
        }
    }
}

pub fn pointwise_backward(
    input: &[f64],
    cin: usize,
    n: usize,
    w: &[f64],
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    gin: &mut [f64],
) {
    for o in 0..gb.len() {
        let g = &gout[o * n..(o + 1) * n];
        gb[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            gw[o * cin + i] += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
            let wk = w[o * cin + i];
            for (a, &v) in gin[i * n..(i + 1) * n].iter_mut().zip(g) {
                *a += wk * v;
            }
        }
    }
}

/// Corner-aligned bilinear resampling along one axis, `from → to` samples.
#[derive(Debug, Clone)]
pub struct Resample {
    taps: Vec<(usize, f64)>,
}

impl Resample {
    pub fn new(from: usize, to: usize) -> Self {
        let taps = (0..to)
            .map(|x| {
                if from == 1 || to == 1 {
                    return (0, 0.0);
                }
                let p = x as f64 * (from - 1) as f64 / (to - 1) as f64;
                let i0 = (p.floor() as usize).min(from - 2);
                (i0, p - i0 as f64)
            })
            .collect();
        Self { taps }
    }

    fn pair(&self, x: usize, from: usize) -> (usize, usize, f64) {
        let (i0, f) = self.taps[x];
        (i0, (i0 + 1).min(from - 1), f)
    }

    /// Upsamples `c` square maps of side `from` to side `to`.
    pub fn forward(&self, input: &[f64], c: usize, from: usize, out: &mut [f64]) {
        let to = self.taps.len();
        for ch in 0..c {
            let src = &input[ch * from * from..(ch + 1) * from * from];
            let dst = &mut out[ch * to * to..(ch + 1) * to * to];
            for y in 0..to {
                let (y0, y1, fy) = self.pair(y, from);
                for x in 0..to {
                    let (x0, x1, fx) = self.pair(x, from);
                    let top = src[y0 * from + x0] * (1.0 - fx) + src[y0 * from + x1] * fx;
                    let bot = src[y1 * from + x0] * (1.0 - fx) + src[y1 * from + x1] * fx;
                    dst[y * to + x] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }

    pub fn backward(&self, g: &[f64], c: usize, from: usize, gin: &mut [f64]) {
        let to = self.taps.len();
        for ch in 0..c {
            let src = &g[ch * to * to..(ch + 1) * to * to];
            let dst = &mut gin[ch * from * from..(ch + 1) * from * from];
            for y in 0..to {
                let (y0, y1, fy) = self.pair(y, from);
                for x in 0..to {
                    let (x0, x1, fx) = self.pair(x, from);
                    let v = src[y * to + x];
                    dst[y0 * from + x0] += v * (1.0 - fx) * (1.0 - fy);
                    dst[y0 * from + x1] += v * fx * (1.0 - fy);
                    dst[y1 * from + x0] += v * (1.0 - fx) * fy;
                    dst[y1 * from + x1] += v * fx * fy;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn seq(n: usize, k: usize) -> Vec<f64> {
        (0..n).map(|i| (((i * k + 3) % 17) as f64 - 8.0) / 8.0).collect()
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        let (cin, cout, s) = (2, 3, 5);
        let x = seq(cin * s * s, 7);
        let w = seq(cout * cin * 9, 5);
        let g = seq(cout * s * s, 11);
        let zero_b = vec![0.0; cout];
        let mut y = vec![0.0; cout * s * s];
        conv3x3(&x, cin, s, &w, &zero_b, &mut y);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; cout];
        let mut gx = vec![0.0; x.len()];
        conv3x3_backward(&x, cin, s, &w, &g, &mut gw, &mut gb, Some(&mut gx));
        // ⟨g, conv(x)⟩ is linear in both x and w
        assert!((dot(&g, &y) - dot(&gx, &x)).abs() < 1e-12);
        assert!((dot(&g, &y) - dot(&gw, &w)).abs() < 1e-12);
        assert!((gb[1] - g[s * s..2 * s * s].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn resampling_ops_are_adjoint() {
        let (c, s) = (2, 4);
        let x = seq(c * s * s, 3);
        let g = seq(c * 4 * s * s, 5);

        let mut y = vec![0.0; c * 4 * s * s];
        upsample2_add(&x, c, s, &mut y);
        let mut gx = vec![0.0; x.len()];
        upsample2_backward(&g, c, s, &mut gx);
        assert!((dot(&g, &y) - dot(&gx, &x)).abs() < 1e-12);

        let big = seq(c * 4 * s * s, 13);
        let mut small = vec![0.0; c * s * s];
        avg_pool2(&big, c, 2 * s, &mut small);
        let mut gbig = vec![0.0; big.len()];
        avg_pool2_backward(&x, c, 2 * s, &mut gbig);
        assert!((dot(&x, &small) - dot(&gbig, &big)).abs() < 1e-12);

        let r = Resample::new(s, 3 * s + 1);
        let t = 3 * s + 1;
        let gt = seq(c * t * t, 9);
        let mut up = vec![0.0; c * t * t];
        r.forward(&x, c, s, &mut up);
        let mut gx = vec![0.0; x.len()];
        r.backward(&gt, c, s, &mut gx);
        assert!((dot(&gt, &up) - dot(&gx, &x)).abs() < 1e-12);
        // corners are exact copies
        assert_eq!(up[0], x[0]);
        assert_eq!(up[t * t - 1], x[s * s - 1]);
    }

    #[test]
    fn pointwise_backward_is_the_adjoint() {
        let (cin, cout, n) = (3, 2, 10);
        let x = seq(cin * n, 7);
        let w = seq(cout * cin, 5);
        let g = seq(cout * n, 3);
        let mut y = vec![0.0; cout * n];
        pointwise(&x, cin, n, &w, &[0.0; 2], &mut y);
        let (mut gw, mut gb, mut gx) = (vec![0.0; w.len()], vec![0.0; 2], vec![0.0; x.len()]);
        pointwise_backward(&x, cin, n, &w, &g, &mut gw, &mut gb, &mut gx);
        assert!((dot(&g, &y) - dot(&gx, &x)).abs() < 1e-12);
        assert!((dot(&g, &y) - dot(&gw, &w)).abs() < 1e-12);
    }
}
