use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::detector::ToyDetector;
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;

use super::config::PipelineConfig;
use super::dataset::Sample;
use super::{seed_for, Manipulator};

/// Per-sample distance normalizer for NME.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Distance between the outer eye corners.
    Interocular,
    /// Square root of the ground-truth bounding-box area.
    FaceSize,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "interocular" => Ok(Normalization::Interocular),
            "facesize" | "face_size" => Ok(Normalization::FaceSize),
            _ => Err(Error::Config(format!("unknown normalization {s:?}"))),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Interocular => "interocular",
            Normalization::FaceSize => "facesize",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Mean NME over samples, in percent.
    pub nme_percent: f64,
    /// Per-sample NME as a fraction (not percent).
    pub per_sample: Vec<f64>,
    /// `(threshold, fraction of samples with NME ≤ threshold)`.
    pub ced: Vec<(f64, f64)>,
    /// Samples where the manipulation failed and the coarse pass was used.
    pub fallbacks: usize,
}

/// CED thresholds from 0 to 0.1 in steps of 0.002.
pub fn ced_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 500.0).collect()
}

fn sample_nme(pred: &LandmarkSet, s: &Sample, norm: Normalization, idx: usize) -> Result<f64> {
    pred.ensure_same_len(&s.landmarks, "prediction")?;
    let d = match norm {
        Normalization::Interocular => s.interocular,
        Normalization::FaceSize => s.face_size,
    };
    if !(d > 0.0) {
        return Err(Error::ZeroNormalizer(idx));
    }
    let total: f64 = pred
        .iter()
        .zip(s.landmarks.iter())
        .map(|(a, b)| (a.x - b.x).hypot(a.y - b.y))
        .sum();
    Ok(total / (pred.len() as f64 * d))
}

/// NME and CED of `preds` against `data`.
pub fn evaluate_predictions(preds: &[LandmarkSet], data: &[Sample], norm: Normalization) -> Result<Metrics> {
    if preds.len() != data.len() || data.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} samples",
            preds.len(),
            data.len()
        )));
    }
    let per_sample = preds
        .iter()
        .zip(data)
        .enumerate()
        .map(|(i, (p, s))| sample_nme(p, s, norm, i))
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    let ced = ced_thresholds()
        .into_iter()
        .map(|t| (t, per_sample.iter().filter(|&&e| e <= t).count() as f64 / n))
        .collect();
    Ok(Metrics {
        nme_percent: 100.0 * per_sample.iter().sum::<f64>() / n,
        per_sample,
        ced,
        fallbacks: 0,
    })
}

/// Runs the full test-time procedure on every sample and scores the result.
pub fn evaluate(det: &ToyDetector, data: &[Sample], cfg: &PipelineConfig) -> Result<Metrics> {
    cfg.validate()?;
    let m = Manipulator::new(cfg, det.config().landmarks)?;
    let outs = data
        .par_iter()
        .enumerate()
        .map(|(i, s)| m.infer(det, &s.image, cfg, seed_for(cfg.seed, &[4, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<_> = outs.iter().map(|o| o.landmarks.clone()).collect();
    let mut metrics = evaluate_predictions(&preds, data, cfg.normalization)?;
    metrics.fallbacks = outs.iter().filter(|o| o.fallback).count();
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;

    fn sample(coords: &[[f64; 2]], interocular: f64) -> Sample {
        let p = LandmarkSet::from_xy(coords);
        Sample::new(Image::filled(4, 4, 0.0).unwrap(), p.clone(), super::super::face_size(&p), interocular).unwrap()
    }

    #[test]
    fn nme_of_a_known_offset() {
        let s = sample(&[[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]], 0.5);
        let shifted = LandmarkSet::from_xy(&[[0.045, 0.0], [0.545, 0.0], [0.045, 0.5]]);
        let m = evaluate_predictions(&[shifted], &[s], Normalization::Interocular).unwrap();
        assert!((m.nme_percent - 9.0).abs() < 1e-9);
        assert_eq!(m.ced.len(), 51);
        assert_eq!(m.ced[44].1, 0.0);
        assert_eq!(m.ced[46].1, 1.0);
    }

    #[test]
    fn ced_is_monotone_and_ends_at_the_fraction_within_ten_percent() {
        let s = sample(&[[0.0, 0.0], [0.4, 0.0], [0.0, 0.4]], 0.4);
        let data = vec![s.clone(), s.clone(), s];
        let off = |d: f64| LandmarkSet::from_xy(&[[d, 0.0], [0.4 + d, 0.0], [d, 0.4]]);
        let m = evaluate_predictions(&[off(0.0), off(0.02), off(0.2)], &data, Normalization::Interocular).unwrap();
        assert!(m.ced.windows(2).all(|w| w[0].1 <= w[1].1));
        assert_eq!(m.ced[0].1, 1.0 / 3.0);
        assert_eq!(m.ced[50].1, 2.0 / 3.0);
    }

    #[test]
    fn zero_normalizer_is_reported() {
        let s = sample(&[[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]], 0.0);
        let p = s.landmarks.clone();
        assert!(matches!(
            evaluate_predictions(&[p], &[s], Normalization::Interocular),
            Err(Error::ZeroNormalizer(0))
        ));
    }

    #[test]
    fn normalization_round_trips() {
        for n in [Normalization::Interocular, Normalization::FaceSize] {
            assert_eq!(n.to_string().parse::<Normalization>().unwrap(), n);
        }
    }
}
