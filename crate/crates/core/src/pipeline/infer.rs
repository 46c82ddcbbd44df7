//! Test-time procedure: coarse detection, manipulation, per-branch detection,
//! inverse mapping, fusion.

use crate::aggregate::{branch_scores, final_landmarks, ScoreMatrix};
use crate::attack::ManipulatedFace;
use crate::detector::{soft_argmax, DetectorTrace, HeatmapStack, ToyDetector};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::landmarks::LandmarkSet;
use crate::tps::{eval_tps, fit_tps, TpsTransform};

use super::config::{Fusion, PipelineConfig};
use super::Manipulator;

/// Detector output for one manipulated face, mapped back to the original frame.
pub(crate) struct Branch {
    pub heat: HeatmapStack,
    pub trace: DetectorTrace,
    /// Decoded on the manipulated image.
    pub raw: LandmarkSet,
    pub masses: Vec<f64>,
    pub inverse: TpsTransform,
    /// `raw` mapped through the inverse warp.
    pub compensated: LandmarkSet,
}

pub(crate) fn is_degenerate(e: &Error) -> bool {
    matches!(
        e,
        Error::DegenerateControlPoints(_) | Error::TooFewControlPoints(_) | Error::SamplingExhausted(_)
    )
}

pub(crate) fn run_branch(det: &ToyDetector, face: &ManipulatedFace, ridge: f64, keep_trace: bool) -> Result<Branch> {
    let inverse = fit_tps(&face.control_target, &face.control_source, ridge)?;
    let mut trace = DetectorTrace::default();
    let heat = det.forward(&face.image, &mut trace)?;
    if !keep_trace {
        trace.clear();
    }
    let (raw, masses) = soft_argmax(&heat)?;
    let compensated = eval_tps(&inverse, &raw);
    Ok(Branch {
        heat,
        trace,
        raw,
        masses,
        inverse,
        compensated,
    })
}

pub(crate) fn scores_for(faces: &[ManipulatedFace], fusion: Fusion) -> Result<ScoreMatrix> {
    let l = faces.first().map_or(0, |f| f.displacement.len());
    match fusion.weighting() {
        Some(w) => branch_scores(&faces.iter().map(|f| f.displacement.clone()).collect::<Vec<_>>(), w),
        None => Ok(ScoreMatrix::uniform(l, faces.len())),
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    /// Fused prediction `p^f`.
    pub landmarks: LandmarkSet,
    /// Single-pass prediction on the unmodified image.
    pub coarse: LandmarkSet,
    /// Set when the manipulation failed and `landmarks` is the coarse pass.
    pub fallback: bool,
    pub branches: Vec<ManipulatedFace>,
}

impl Manipulator {
    /// Full test-time prediction with `cfg.k_test` branches.
    pub fn infer(&self, det: &ToyDetector, img: &Image, cfg: &PipelineConfig, seed: u64) -> Result<Inference> {
        let (coarse, _) = soft_argmax(&det.predict_heatmaps(img)?)?;
        let coarse = coarse.clamped();
        let fallback = |err: Error| {
            log::warn!("falling back to the coarse prediction: {err}");
            Ok(Inference {
                landmarks: coarse.clone(),
                coarse: coarse.clone(),
                fallback: true,
                branches: Vec::new(),
            })
        };
        let faces = match self.generate(img, &coarse, cfg.k_test, seed) {
            Ok(f) => f,
            Err(e) if is_degenerate(&e) => return fallback(e),
            Err(e) => return Err(e),
        };
        let mut preds = Vec::with_capacity(faces.len());
        for face in &faces {
            match run_branch(det, face, cfg.attack.ridge, false) {
                Ok(b) => preds.push(b.compensated.clamped()),
                Err(e) if is_degenerate(&e) => return fallback(e),
                Err(e) => return Err(e),
            }
        }
        let sc = scores_for(&faces, cfg.fusion)?;
        Ok(Inference {
            landmarks: final_landmarks(&preds, &sc)?,
            coarse,
            fallback: false,
            branches: faces,
        })
    }
}

/// Predicts landmarks for one image with the configured variant and `k_test`.
pub fn infer(det: &ToyDetector, img: &Image, cfg: &PipelineConfig) -> Result<Inference> {
    cfg.validate()?;
    let m = Manipulator::new(cfg, det.config().landmarks)?;
    m.infer(det, img, cfg, cfg.seed)
}
