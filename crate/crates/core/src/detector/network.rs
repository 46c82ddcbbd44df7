use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{
    avg_pool2, avg_pool2_backward, conv3x3, conv3x3_backward, pointwise, pointwise_backward, relu, relu_backward,
    upsample2_add, upsample2_backward, Resample,
};
use super::HeatmapStack;
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Architecture of [`ToyDetector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorConfig {
    /// Square input side; must be a multiple of 4.
    pub input_size: usize,
    pub landmarks: usize,
    /// Channels after the first and second encoder stages.
    pub widths: [usize; 2],
}

impl DetectorConfig {
    pub fn new(input_size: usize, landmarks: usize) -> Self {
        Self {
            input_size,
            landmarks,
            widths: [8, 16],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_size < 8 || !self.input_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "detector input size must be a multiple of 4 and at least 8, got {}",
                self.input_size
            )));
        }
        if self.landmarks == 0 || self.widths.contains(&0) {
            return Err(Error::Config("detector needs at least one landmark and channel".into()));
        }
        Ok(())
    }

    /// `(name, shape)` for every parameter tensor, in storage order.
    pub(crate) fn tensors(&self) -> Vec<(&'static str, Vec<usize>)> {
        let [c1, c2] = self.widths;
        vec![
            ("enc1.weight", vec![c1, INPUT_CHANNELS, 3, 3]),
            ("enc1.bias", vec![c1]),
            ("enc2.weight", vec![c2, c1, 3, 3]),
            ("enc2.bias", vec![c2]),
            ("mid.weight", vec![c2, c2, 3, 3]),
            ("mid.bias", vec![c2]),
            ("dec.weight", vec![c2, c2, 3, 3]),
            ("dec.bias", vec![c2]),
            ("head.weight", vec![self.landmarks, c2]),
            ("head.bias", vec![self.landmarks]),
        ]
    }
}

/// Intensity plus two coordinate channels.
const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy)]
struct Span {
    start: usize,
    len: usize,
}

impl Span {
    fn of<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.start..self.start + self.len]
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    enc1: (Span, Span),
    enc2: (Span, Span),
    mid: (Span, Span),
    dec: (Span, Span),
    head: (Span, Span),
    total: usize,
}

impl Layout {
    fn new(cfg: &DetectorConfig) -> Self {
        let mut spans = Vec::new();
        let mut start = 0;
        for (_, shape) in cfg.tensors() {
            let len = shape.iter().product();
            spans.push(Span { start, len });
            start += len;
        }
        Self {
            enc1: (spans[0], spans[1]),
            enc2: (spans[2], spans[3]),
            mid: (spans[4], spans[5]),
            dec: (spans[6], spans[7]),
            head: (spans[8], spans[9]),
            total: start,
        }
    }
}

/// A small fully convolutional heatmap regressor.
///
/// Two 3×3 conv + average-pool encoder stages, a bottleneck conv, a
/// nearest-neighbour upsample with a skip from the second stage, a decoder
/// conv, a 1×1 head, and bilinear upsampling of the logits back to the input
/// size. Each output map is `exp(z − max z)`, so it is positive with peak 1.
///
/// Parameters are kept f32-representable so checkpoints reload bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    config: DetectorConfig,
    params: Vec<f64>,
}

/// Activations from one forward pass, needed by [`ToyDetector::backward`].
#[derive(Debug, Clone, Default)]
pub struct DetectorTrace {
    cache: Option<Activations>,
}

impl DetectorTrace {
    pub fn is_empty(&self) -> bool {
        self.cache.is_none()
    }

    pub fn clear(&mut self) {
        self.cache = None;
    }
}

#[derive(Debug, Clone)]
struct Activations {
    input: Vec<f64>,
    a1: Vec<f64>,
    p1: Vec<f64>,
    a2: Vec<f64>,
    p2: Vec<f64>,
    a3: Vec<f64>,
    u: Vec<f64>,
    a4: Vec<f64>,
    heat: Vec<f64>,
    peaks: Vec<usize>,
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ToyDetector {
    /// He-initialized network, deterministic in `seed`.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde7e_c70f);
        let mut params = Vec::with_capacity(Layout::new(&config).total);
        for (name, shape) in config.tensors() {
            let len: usize = shape.iter().product();
            if name.ends_with(".bias") {
                params.extend(std::iter::repeat_n(0.0, len));
                continue;
            }
            let fan_in: usize = shape[1..].iter().product();
            let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            params.extend((0..len).map(|_| round_f32(normal.sample(&mut rng))));
        }
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: DetectorConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = Layout::new(&config).total;
        if params.len() != expected {
            return Err(Error::Checkpoint(format!("expected {expected} parameters, found {}", params.len())));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Replaces parameters, rounding each to the nearest f32.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a detector with {}",
                params.len(),
                self.params.len()
            )));
        }
        for (dst, &src) in self.params.iter_mut().zip(params) {
            *dst = round_f32(src);
        }
        Ok(())
    }

    /// Unrounded parameter access for gradient checks.
    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        let s = self.config.input_size;
        if img.width() != s || img.height() != s {
            return Err(Error::ShapeMismatch(format!(
                "detector expects {s}x{s}, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    pub fn predict_heatmaps(&self, img: &Image) -> Result<HeatmapStack> {
        let mut trace = DetectorTrace::default();
        self.forward(img, &mut trace)
    }

    /// Forward pass that records the activations for [`Self::backward`].
    pub fn forward(&self, img: &Image, trace: &mut DetectorTrace) -> Result<HeatmapStack> {
        self.check_input(img)?;
        let cfg = &self.config;
        let lay = Layout::new(cfg);
        let p = &self.params;
        let [c1, c2] = cfg.widths;
        let (s, s2, s4) = (cfg.input_size, cfg.input_size / 2, cfg.input_size / 4);
        let l = cfg.landmarks;

        let mut input = Vec::with_capacity(INPUT_CHANNELS * s * s);
        input.extend_from_slice(img.data());
        let coord = |i: usize| 2.0 * i as f64 / (s - 1) as f64 - 1.0;
        input.extend((0..s * s).map(|k| coord(k % s)));
        input.extend((0..s * s).map(|k| coord(k / s)));

        let mut a1 = vec![0.0; c1 * s * s];
        conv3x3(&input, INPUT_CHANNELS, s, lay.enc1.0.of(p), lay.enc1.1.of(p), &mut a1);
        relu(&mut a1);
        let mut p1 = vec![0.0; c1 * s2 * s2];
        avg_pool2(&a1, c1, s, &mut p1);

        let mut a2 = vec![0.0; c2 * s2 * s2];
        conv3x3(&p1, c1, s2, lay.enc2.0.of(p), lay.enc2.1.of(p), &mut a2);
        relu(&mut a2);
        let mut p2 = vec![0.0; c2 * s4 * s4];
        avg_pool2(&a2, c2, s2, &mut p2);

        let mut a3 = vec![0.0; c2 * s4 * s4];
        conv3x3(&p2, c2, s4, lay.mid.0.of(p), lay.mid.1.of(p), &mut a3);
        relu(&mut a3);

        let mut u = a2.clone();
        upsample2_add(&a3, c2, s4, &mut u);
        let mut a4 = vec![0.0; c2 * s2 * s2];
        conv3x3(&u, c2, s2, lay.dec.0.of(p), lay.dec.1.of(p), &mut a4);
        relu(&mut a4);

        let mut z_small = vec![0.0; l * s2 * s2];
        pointwise(&a4, c2, s2 * s2, lay.head.0.of(p), lay.head.1.of(p), &mut z_small);
        let mut heat = vec![0.0; l * s * s];
        Resample::new(s2, s).forward(&z_small, l, s2, &mut heat);

        let mut peaks = Vec::with_capacity(l);
        for map in heat.chunks_exact_mut(s * s) {
            let (k, &m) = map
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("nonempty map");
            if !m.is_finite() {
                return Err(Error::Config("detector produced non-finite logits".into()));
            }
            map.iter_mut().for_each(|v| *v = (*v - m).exp());
            peaks.push(k);
        }
        let out = HeatmapStack::new(l, s, s, heat.clone())?;
        trace.cache = Some(Activations {
            input,
            a1,
            p1,
            a2,
            p2,
            a3,
            u,
            a4,
            heat,
            peaks,
        });
        Ok(out)
    }

    /// Parameter gradient of `⟨cotangent, heatmaps⟩` for the traced pass.
    pub fn backward(&self, trace: &DetectorTrace, cotangent: &[f64]) -> Result<Vec<f64>> {
        let act = trace.cache.as_ref().ok_or(Error::MissingForwardCache)?;
        let cfg = &self.config;
        let lay = Layout::new(cfg);
        let p = &self.params;
        let [c1, c2] = cfg.widths;
        let (s, s2, s4) = (cfg.input_size, cfg.input_size / 2, cfg.input_size / 4);
        let l = cfg.landmarks;
        if cotangent.len() != l * s * s {
            return Err(Error::ShapeMismatch(format!(
                "heatmap cotangent has {} values, expected {}",
                cotangent.len(),
                l * s * s
            )));
        }
        let mut grad = vec![0.0; lay.total];

        // r = exp(z − z[peak]); the peak term is constant only up to which pixel wins
        let mut gz = vec![0.0; l * s * s];
        for (i, ((g, r), gc)) in gz
            .chunks_exact_mut(s * s)
            .zip(act.heat.chunks_exact(s * s))
            .zip(cotangent.chunks_exact(s * s))
            .enumerate()
        {
            let mut total = 0.0;
            for ((gv, &rv), &cv) in g.iter_mut().zip(r).zip(gc) {
                *gv = cv * rv;
                total += *gv;
            }
            g[act.peaks[i]] -= total;
        }
        let mut gz_small = vec![0.0; l * s2 * s2];
        Resample::new(s2, s).backward(&gz, l, s2, &mut gz_small);

        let mut ga4 = vec![0.0; c2 * s2 * s2];
        {
            let (gw, gb) = split_pair(&mut grad, lay.head);
            pointwise_backward(&act.a4, c2, s2 * s2, lay.head.0.of(p), &gz_small, gw, gb, &mut ga4);
        }
        relu_backward(&act.a4, &mut ga4);

        let mut gu = vec![0.0; c2 * s2 * s2];
        {
            let (gw, gb) = split_pair(&mut grad, lay.dec);
            conv3x3_backward(&act.u, c2, s2, lay.dec.0.of(p), &ga4, gw, gb, Some(&mut gu));
        }
        let mut ga2 = gu.clone();
        let mut ga3 = vec![0.0; c2 * s4 * s4];
        upsample2_backward(&gu, c2, s4, &mut ga3);
        relu_backward(&act.a3, &mut ga3);

        let mut gp2 = vec![0.0; c2 * s4 * s4];
        {
            let (gw, gb) = split_pair(&mut grad, lay.mid);
            conv3x3_backward(&act.p2, c2, s4, lay.mid.0.of(p), &ga3, gw, gb, Some(&mut gp2));
        }
        avg_pool2_backward(&gp2, c2, s2, &mut ga2);
        relu_backward(&act.a2, &mut ga2);

        let mut gp1 = vec![0.0; c1 * s2 * s2];
        {
            let (gw, gb) = split_pair(&mut grad, lay.enc2);
            conv3x3_backward(&act.p1, c1, s2, lay.enc2.0.of(p), &ga2, gw, gb, Some(&mut gp1));
        }
        let mut ga1 = vec![0.0; c1 * s * s];
        avg_pool2_backward(&gp1, c1, s, &mut ga1);
        relu_backward(&act.a1, &mut ga1);
        {
            let (gw, gb) = split_pair(&mut grad, lay.enc1);
            conv3x3_backward(&act.input, INPUT_CHANNELS, s, lay.enc1.0.of(p), &ga1, gw, gb, None);
        }
        Ok(grad)
    }
}

/// Disjoint mutable views of a weight span and the bias span that follows it.
fn split_pair(grad: &mut [f64], (w, b): (Span, Span)) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(w.start + w.len, b.start);
    let (head, tail) = grad[w.start..].split_at_mut(w.len);
    (head, &mut tail[..b.len])
}
