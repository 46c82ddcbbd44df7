//! Iterative sign-gradient manipulation of landmark control points.
//!
//! Each of the K branches starts from the identity warp and steps the
//! manipulated landmarks along `sign(∇ cost)`, where the cost is the summed
//! embedding distance to the original face and every previously accepted
//! branch. A branch stops as soon as its nearest peer is at least `τ` away.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedder::{embed_resized, embed_resized_grad, embedding_distance, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::imaging::{Image, NormalizedPoint};
use crate::landmarks::LandmarkSet;
use crate::tps::{warp_image, warp_vjp, DisplacementField, DEFAULT_RIDGE};

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Number of manipulated faces (K).
    pub branches: usize,
    /// Embedding distance threshold τ.
    pub tau: f64,
    /// Per-coordinate displacement bound δ, normalized units.
    pub delta: f64,
    /// Sign step ε, normalized units.
    pub step: f64,
    pub max_iters: usize,
    pub ridge: f64,
    /// Seeds the random first step on coordinates whose gradient is exactly zero.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            branches: 3,
            tau: 0.05,
            delta: 0.05,
            step: 0.005,
            max_iters: 100,
            ridge: DEFAULT_RIDGE,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.branches < 1 {
            return bad("branch count must be at least 1");
        }
        if !(self.tau >= 0.0) {
            return bad("tau must be non-negative");
        }
        if !(self.delta > 0.0) {
            return bad("delta must be positive");
        }
        if !(self.step > 0.0) {
            return bad("step must be positive");
        }
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1");
        }
        if !(self.ridge >= 0.0) {
            return bad("ridge must be non-negative");
        }
        Ok(())
    }

    /// δ as a fraction of a face bounding-box width (normalized units).
    pub fn delta_from_box_width(fraction: f64, box_width: f64) -> f64 {
        fraction * box_width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BranchStatus {
    /// Nearest peer is at least τ away.
    Converged,
    /// Iteration cap hit before reaching τ.
    MaxIters,
    /// A spline fit failed mid-attack; the face is the last valid state.
    Aborted(String),
}

#[derive(Debug, Clone)]
pub struct ManipulatedFace {
    pub image: Image,
    /// P
    pub control_source: LandmarkSet,
    /// P_adv = P + d
    pub control_target: LandmarkSet,
    pub displacement: DisplacementField,
    pub iterations_used: usize,
    pub status: BranchStatus,
    /// Distance to the nearest peer when the branch stopped (NaN if not measured).
    pub min_peer_distance: f64,
}

impl ManipulatedFace {
    /// The unmodified face as a zero-displacement branch.
    pub fn identity(img: &Image, p: &LandmarkSet) -> Self {
        Self {
            image: img.clone(),
            control_source: p.clone(),
            control_target: p.clone(),
            displacement: DisplacementField::zeros(p.len()),
            iterations_used: 0,
            status: BranchStatus::Converged,
            min_peer_distance: f64::NAN,
        }
    }

    pub fn hit_max_iters(&self) -> bool {
        self.status == BranchStatus::MaxIters
    }
}

/// Embeddings of the faces a new branch must move away from.
#[derive(Debug, Clone, Default)]
pub struct PeerSet {
    embeddings: Vec<EmbeddingVector>,
}

impl PeerSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_images(e: &dyn Embedder, images: &[&Image]) -> Result<Self> {
        let mut peers = Self::new();
        for img in images {
            peers.push_image(e, img)?;
        }
        Ok(peers)
    }

    pub fn push_image(&mut self, e: &dyn Embedder, img: &Image) -> Result<()> {
        self.embeddings.push(embed_resized(e, img)?);
        Ok(())
    }

    pub fn push(&mut self, z: EmbeddingVector) {
        self.embeddings.push(z);
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn embeddings(&self) -> &[EmbeddingVector] {
        &self.embeddings
    }

    /// Concatenation, for additivity checks.
    pub fn union(&self, other: &PeerSet) -> PeerSet {
        PeerSet {
            embeddings: self.embeddings.iter().chain(&other.embeddings).cloned().collect(),
        }
    }

    pub fn total_distance(&self, z: &EmbeddingVector) -> Result<f64> {
        self.embeddings.iter().map(|p| embedding_distance(z, p)).sum()
    }

    pub fn min_distance(&self, z: &EmbeddingVector) -> Result<f64> {
        self.embeddings
            .iter()
            .map(|p| embedding_distance(z, p))
            .try_fold(f64::INFINITY, |m, d| d.map(|d| m.min(d)))
    }

    /// `Σ_k (z - z_k) / |z - z_k|`, with zero contribution from exact ties.
    fn distance_gradient(&self, z: &EmbeddingVector) -> EmbeddingVector {
        let mut g = vec![0.0; z.dim()];
        for peer in &self.embeddings {
            let diff: Vec<f64> = z.0.iter().zip(&peer.0).map(|(a, b)| a - b).collect();
            let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                g.iter_mut().zip(&diff).for_each(|(acc, d)| *acc += d / norm);
            }
        }
        EmbeddingVector(g)
    }
}

/// Summed embedding distance from the warped face to every peer.
pub fn attack_cost(
    e: &dyn Embedder,
    img: &Image,
    p: &LandmarkSet,
    p_adv: &LandmarkSet,
    peers: &PeerSet,
    ridge: f64,
) -> Result<f64> {
    if peers.is_empty() {
        return Err(Error::EmptyPeerSet);
    }
    let warped = warp_image(img, p, p_adv, ridge)?;
    peers.total_distance(&embed_resized(e, &warped)?)
}

/// Gradient of [`attack_cost`] with respect to `p_adv`, one `[x, y]` per landmark.
pub fn cost_grad(
    e: &dyn Embedder,
    img: &Image,
    p: &LandmarkSet,
    p_adv: &LandmarkSet,
    peers: &PeerSet,
    ridge: f64,
) -> Result<Vec<[f64; 2]>> {
    if peers.is_empty() {
        return Err(Error::EmptyPeerSet);
    }
    let warped = warp_image(img, p, p_adv, ridge)?;
    let z = embed_resized(e, &warped)?;
    cost_grad_at(e, img, p, p_adv, &warped, &z, peers, ridge)
}

/// [`cost_grad`] reusing an already computed warp and its embedding.
#[allow(clippy::too_many_arguments)]
fn cost_grad_at(
    e: &dyn Embedder,
    img: &Image,
    p: &LandmarkSet,
    p_adv: &LandmarkSet,
    warped: &Image,
    z: &EmbeddingVector,
    peers: &PeerSet,
    ridge: f64,
) -> Result<Vec<[f64; 2]>> {
    let dz = peers.distance_gradient(z);
    let g_img = embed_resized_grad(e, warped, &dz)?;
    warp_vjp(img, p, p_adv, &g_img, ridge)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `P_adv + ε · sign(g)`, with `sign(0) = 0`.
pub fn fgsm_step(p_adv: &LandmarkSet, grad: &[[f64; 2]], step: f64) -> Result<LandmarkSet> {
    if p_adv.len() != grad.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} landmarks vs {} gradient rows",
            p_adv.len(),
            grad.len()
        )));
    }
    Ok(p_adv
        .iter()
        .zip(grad)
        .map(|(q, g)| NormalizedPoint::new(q.x + step * sign(g[0]), q.y + step * sign(g[1])))
        .collect())
}

/// Per-coordinate clamp of `P_adv - P` to `[-δ, δ]`, as a displacement field.
pub fn clip_field(p_adv: &LandmarkSet, p: &LandmarkSet, delta: f64) -> Result<DisplacementField> {
    let mut d = DisplacementField::between(p, p_adv)?;
    d.0.iter_mut()
        .flatten()
        .for_each(|v| *v = v.clamp(-delta, delta));
    Ok(d)
}

/// ℓ∞ projection of the displacement `P_adv - P` onto the δ-box.
pub fn clip_displacement(p_adv: &LandmarkSet, p: &LandmarkSet, delta: f64) -> Result<LandmarkSet> {
    Ok(clip_field(p_adv, p, delta)?.apply(p))
}

/// Maps a raw stepped landmark set to the admissible displacement for one
/// iteration (clipping, and for grouped variants, family projection).
pub(crate) trait StepProjection {
    fn project(&self, p: &LandmarkSet, stepped: &LandmarkSet, delta: f64) -> Result<DisplacementField>;
}

pub(crate) struct BoxClip;

impl StepProjection for BoxClip {
    fn project(&self, p: &LandmarkSet, stepped: &LandmarkSet, delta: f64) -> Result<DisplacementField> {
        clip_field(stepped, p, delta)
    }
}

/// Embedding of a face, resized to the embedder input.
fn embed_face(e: &dyn Embedder, img: &Image) -> Result<EmbeddingVector> {
    embed_resized(e, img)
}

pub(crate) fn run_attack(
    e: &dyn Embedder,
    img: &Image,
    p: &LandmarkSet,
    cfg: &AttackConfig,
    projection: &dyn StepProjection,
) -> Result<Vec<ManipulatedFace>> {
    cfg.validate()?;
    if p.len() < 3 {
        return Err(Error::TooFewControlPoints(p.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut peers = PeerSet::new();
    let z_orig = embed_face(e, img)?;
    peers.push(z_orig.clone());

    let mut faces = Vec::with_capacity(cfg.branches);
    for branch in 0..cfg.branches {
        let mut face = ManipulatedFace::identity(img, p);
        let mut z = z_orig.clone();
        let mut min_dist = peers.min_distance(&z)?;
        let mut iters = 0;
        let mut status = BranchStatus::Converged;

        while min_dist < cfg.tau {
            if iters == cfg.max_iters {
                status = BranchStatus::MaxIters;
                break;
            }
            let step = (|| -> Result<(DisplacementField, Image, EmbeddingVector)> {
                let mut grad = cost_grad_at(
                    e,
                    img,
                    p,
                    &face.control_target,
                    &face.image,
                    &z,
                    &peers,
                    cfg.ridge,
                )?;
                if iters == 0 {
                    // The original is a stationary point of its own distance:
                    // break exact ties with a seeded random direction.
                    for v in grad.iter_mut().flatten() {
                        if *v == 0.0 {
                            *v = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                        }
                    }
                }
                let stepped = fgsm_step(&face.control_target, &grad, cfg.step)?;
                let d = projection.project(p, &stepped, cfg.delta)?;
                let target = d.apply(p);
                let image = warp_image(img, p, &target, cfg.ridge)?;
                let z = embed_face(e, &image)?;
                Ok((d, image, z))
            })();
            match step {
                Ok((d, image, z_new)) => {
                    face.control_target = d.apply(p);
                    face.displacement = d;
                    face.image = image;
                    z = z_new;
                    iters += 1;
                    min_dist = peers.min_distance(&z)?;
                }
                Err(err @ (Error::DegenerateControlPoints(_) | Error::TooFewControlPoints(_))) => {
                    log::warn!("branch {branch}: aborting after {iters} iterations: {err}");
                    status = BranchStatus::Aborted(err.to_string());
                    break;
                }
                Err(err) => return Err(err),
            }
        }
        face.iterations_used = iters;
        face.status = status;
        face.min_peer_distance = min_dist;
        peers.push(z);
        faces.push(face);
    }
    Ok(faces)
}

/// K manipulated faces by per-landmark sign-gradient steps with ℓ∞ clipping.
pub fn generate_adversarial_set(
    e: &dyn Embedder,
    img: &Image,
    p: &LandmarkSet,
    cfg: &AttackConfig,
) -> Result<Vec<ManipulatedFace>> {
    run_attack(e, img, p, cfg, &BoxClip)
}
