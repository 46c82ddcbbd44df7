//! Semantic landmark groups and per-group scale+translation manipulation.
//!
//! A group transform maps each member `p` to `α (p − p̄) + β`, where `p̄` is
//! the group mean. Two generators build on it: a sign-gradient attack whose
//! steps are projected onto that family, and a sampler of random known
//! transforms with structural checks (mirror symmetry, no brow/eye overlap).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attack::{run_attack, AttackConfig, BranchStatus, ManipulatedFace, StepProjection};
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::imaging::{Image, NormalizedPoint};
use crate::landmarks::LandmarkSet;
use crate::tps::{warp_image, DisplacementField};

/// Built-in grouping schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupScheme {
    /// 68-point iBUG layout: two eye+brow groups, nose, mouth, jaw.
    Ibug68,
    /// 21-point layout of the procedural dataset.
    Synthetic,
}

impl GroupScheme {
    pub fn landmark_count(self) -> usize {
        match self {
            GroupScheme::Ibug68 => 68,
            GroupScheme::Synthetic => 21,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupScheme::Ibug68 => "ibug68",
            GroupScheme::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for GroupScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GroupScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ibug68" => Ok(GroupScheme::Ibug68),
            "synthetic" => Ok(GroupScheme::Synthetic),
            other => Err(Error::UnknownScheme(other.to_string())),
        }
    }
}

/// A partition of landmark indices into groups of at least two members.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGroups {
    membership: Vec<usize>,
    members: Vec<Vec<usize>>,
    /// `(sampled, mirrored)`: the second group copies the first's transform
    /// reflected about the vertical axis.
    mirror_pairs: Vec<(usize, usize)>,
    /// `(upper, lower)` groups whose bounding boxes must stay disjoint.
    stacked_pairs: Vec<(usize, usize)>,
}

impl SemanticGroups {
    pub fn new(
        landmark_count: usize,
        members: Vec<Vec<usize>>,
        mirror_pairs: Vec<(usize, usize)>,
        stacked_pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let mut membership = vec![usize::MAX; landmark_count];
        for (g, idx) in members.iter().enumerate() {
            if idx.len() < 2 {
                return Err(Error::Config(format!("group {g} has {} members, need 2", idx.len())));
            }
            for &i in idx {
                if i >= landmark_count {
                    return Err(Error::Config(format!("group {g} references landmark {i}")));
                }
                if membership[i] != usize::MAX {
                    return Err(Error::Config(format!("landmark {i} is in two groups")));
                }
                membership[i] = g;
            }
        }
        if let Some(i) = membership.iter().position(|&g| g == usize::MAX) {
            return Err(Error::Config(format!("landmark {i} is in no group")));
        }
        let n = members.len();
        let pairs_ok = |pairs: &[(usize, usize)]| pairs.iter().all(|&(a, b)| a < n && b < n && a != b);
        if !pairs_ok(&mirror_pairs) || !pairs_ok(&stacked_pairs) {
            return Err(Error::Config("group pair references an unknown group".into()));
        }
        Ok(Self {
            membership,
            members,
            mirror_pairs,
            stacked_pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn landmark_count(&self) -> usize {
        self.membership.len()
    }

    pub fn group_of(&self, landmark: usize) -> usize {
        self.membership[landmark]
    }

    pub fn members(&self, group: usize) -> &[usize] {
        &self.members[group]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn mirror_pairs(&self) -> &[(usize, usize)] {
        &self.mirror_pairs
    }

    pub fn stacked_pairs(&self) -> &[(usize, usize)] {
        &self.stacked_pairs
    }

    fn points(&self, set: &LandmarkSet, group: usize) -> Vec<NormalizedPoint> {
        self.members[group].iter().map(|&i| set[i]).collect()
    }

    fn check_len(&self, set: &LandmarkSet) -> Result<()> {
        if set.len() != self.landmark_count() {
            return Err(Error::ShapeMismatch(format!(
                "groups cover {} landmarks, set has {}",
                self.landmark_count(),
                set.len()
            )));
        }
        Ok(())
    }

    /// Applies one similarity per group to `base`.
    pub fn apply(&self, base: &LandmarkSet, sims: &[GroupSimilarity]) -> Result<LandmarkSet> {
        self.check_len(base)?;
        if sims.len() != self.len() {
            return Err(Error::ShapeMismatch(format!("{} transforms for {} groups", sims.len(), self.len())));
        }
        let mut out = base.clone();
        for (g, sim) in sims.iter().enumerate() {
            let moved = apply_group_transform(&self.points(base, g), sim);
            for (&i, q) in self.members[g].iter().zip(moved) {
                out[i] = q;
            }
        }
        Ok(out)
    }

    /// Least-squares similarity per group from `base` to `target`.
    pub fn fit(&self, base: &LandmarkSet, target: &LandmarkSet) -> Result<Vec<GroupSimilarity>> {
        self.check_len(base)?;
        self.check_len(target)?;
        (0..self.len())
            .map(|g| fit_group_similarity(&self.points(base, g), &self.points(target, g)))
            .collect()
    }

    /// Largest per-group residual of `target` against its fitted similarity.
    pub fn family_residual(&self, base: &LandmarkSet, target: &LandmarkSet) -> Result<f64> {
        self.check_len(base)?;
        self.check_len(target)?;
        (0..self.len()).try_fold(0.0f64, |acc, g| {
            Ok(acc.max(similarity_residual(&self.points(base, g), &self.points(target, g))?))
        })
    }
}

/// Builds the named scheme, checking it matches the landmark count.
pub fn assign_groups(landmark_count: usize, scheme: GroupScheme) -> Result<SemanticGroups> {
    if landmark_count != scheme.landmark_count() {
        return Err(Error::ShapeMismatch(format!(
            "scheme {scheme} is defined for {} landmarks, got {landmark_count}",
            scheme.landmark_count()
        )));
    }
    let range = |a: usize, b: usize| (a..=b).collect::<Vec<_>>();
    let join = |a: Vec<usize>, b: Vec<usize>| a.into_iter().chain(b).collect::<Vec<_>>();
    match scheme {
        // 0: right brow+eye, 1: left brow+eye, 2: nose, 3: mouth, 4: jaw
        GroupScheme::Ibug68 => SemanticGroups::new(
            68,
            vec![
                join(range(17, 21), range(36, 41)),
                join(range(22, 26), range(42, 47)),
                range(27, 35),
                range(48, 67),
                range(0, 16),
            ],
            vec![(1, 0)],
            vec![(0, 3), (1, 3)],
        ),
        // 0/1: right/left brow, 2/3: right/left eye, 4: nose, 5: mouth
        GroupScheme::Synthetic => SemanticGroups::new(
            21,
            vec![
                range(0, 2),
                range(3, 5),
                range(6, 9),
                range(10, 13),
                range(14, 16),
                range(17, 20),
            ],
            vec![(1, 0), (3, 2)],
            vec![(0, 2), (1, 3)],
        ),
    }
}

/// Scale `α` about the group mean, then translation of the mean to `β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSimilarity {
    pub alpha: f64,
    pub beta: [f64; 2],
}

impl GroupSimilarity {
    /// Leaves a group with mean `mean` in place.
    pub fn identity(mean: NormalizedPoint) -> Self {
        Self {
            alpha: 1.0,
            beta: [mean.x, mean.y],
        }
    }

    /// Translation of the group mean, `β − p̄`.
    pub fn offset(&self, mean: NormalizedPoint) -> [f64; 2] {
        [self.beta[0] - mean.x, self.beta[1] - mean.y]
    }
}

pub fn group_mean(points: &[NormalizedPoint]) -> Result<NormalizedPoint> {
    if points.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    Ok(NormalizedPoint::new(sx / n, sy / n))
}

pub fn apply_group_transform(points: &[NormalizedPoint], sim: &GroupSimilarity) -> Vec<NormalizedPoint> {
    let Ok(mean) = group_mean(points) else {
        return Vec::new();
    };
    points
        .iter()
        .map(|p| {
            NormalizedPoint::new(
                sim.alpha * (p.x - mean.x) + sim.beta[0],
                sim.alpha * (p.y - mean.y) + sim.beta[1],
            )
        })
        .collect()
}

/// Closed-form least-squares scale+translation taking `p` onto `q`.
pub fn fit_group_similarity(p: &[NormalizedPoint], q: &[NormalizedPoint]) -> Result<GroupSimilarity> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!("group sizes {} vs {}", p.len(), q.len())));
    }
    let pm = group_mean(p)?;
    let qm = group_mean(q)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        let (ax, ay) = (a.x - pm.x, a.y - pm.y);
        num += ax * (b.x - qm.x) + ay * (b.y - qm.y);
        den += ax * ax + ay * ay;
    }
    if den <= f64::EPSILON * f64::EPSILON {
        return Err(Error::ZeroSpread);
    }
    Ok(GroupSimilarity {
        alpha: num / den,
        beta: [qm.x, qm.y],
    })
}

/// Max coordinate deviation of `q` from the best similarity image of `p`.
pub fn similarity_residual(p: &[NormalizedPoint], q: &[NormalizedPoint]) -> Result<f64> {
    let sim = fit_group_similarity(p, q)?;
    Ok(apply_group_transform(p, &sim)
        .iter()
        .zip(q)
        .map(|(a, b)| (a.x - b.x).abs().max((a.y - b.y).abs()))
        .fold(0.0, f64::max))
}

/// Sampling ranges for known group transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownTransformRanges {
    /// Inclusive scale range.
    pub scale: (f64, f64),
    /// Per-axis bound on the mean's translation, normalized units.
    pub shift: f64,
    pub max_attempts: usize,
}

impl Default for KnownTransformRanges {
    fn default() -> Self {
        Self {
            scale: (0.9, 1.1),
            // 5% of the image width, which spans 2 normalized units
            shift: 0.05 * 2.0,
            max_attempts: 50,
        }
    }
}

fn mirrored_source(groups: &SemanticGroups, g: usize) -> Option<usize> {
    groups.mirror_pairs.iter().find(|&&(_, m)| m == g).map(|&(s, _)| s)
}

/// Draws one structurally valid similarity per group.
///
/// Mirrored groups copy their partner's scale and x-reflected offset; a draw
/// is rejected when stacked groups' bounding boxes collide.
pub fn sample_known_transforms<R: Rng + ?Sized>(
    groups: &SemanticGroups,
    base: &LandmarkSet,
    rng: &mut R,
    ranges: &KnownTransformRanges,
) -> Result<Vec<GroupSimilarity>> {
    groups.check_len(base)?;
    let means = (0..groups.len())
        .map(|g| group_mean(&groups.points(base, g)))
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..ranges.max_attempts {
        let mut draws: Vec<(f64, [f64; 2])> = (0..groups.len())
            .map(|_| {
                let alpha = rng.gen_range(ranges.scale.0..=ranges.scale.1);
                let u = [
                    rng.gen_range(-ranges.shift..=ranges.shift),
                    rng.gen_range(-ranges.shift..=ranges.shift),
                ];
                (alpha, u)
            })
            .collect();
        for g in 0..groups.len() {
            if let Some(s) = mirrored_source(groups, g) {
                let (alpha, u) = draws[s];
                draws[g] = (alpha, [-u[0], u[1]]);
            }
        }
        let sims: Vec<GroupSimilarity> = draws
            .iter()
            .zip(&means)
            .map(|(&(alpha, u), m)| GroupSimilarity {
                alpha,
                beta: [m.x + u[0], m.y + u[1]],
            })
            .collect();
        let moved = groups.apply(base, &sims)?;
        if validate_structure(groups, base, &moved)? {
            return Ok(sims);
        }
    }
    Err(Error::SamplingExhausted(ranges.max_attempts))
}

fn bbox(points: &[NormalizedPoint]) -> (f64, f64, f64, f64) {
    LandmarkSet::new(points.to_vec()).bounds()
}

const MIRROR_TOL: f64 = 1e-9;

/// Checks that stacked groups keep disjoint, ordered bounding boxes and that
/// mirror pairs carry reflected transforms relative to `base`.
pub fn validate_structure(
    groups: &SemanticGroups,
    base: &LandmarkSet,
    transformed: &LandmarkSet,
) -> Result<bool> {
    groups.check_len(base)?;
    groups.check_len(transformed)?;
    for &(upper, lower) in &groups.stacked_pairs {
        let (ux0, uy0, ux1, uy1) = bbox(&groups.points(transformed, upper));
        let (lx0, ly0, lx1, ly1) = bbox(&groups.points(transformed, lower));
        let overlap = ux0 <= lx1 && lx0 <= ux1 && uy0 <= ly1 && ly0 <= uy1;
        // y grows downward
        if overlap || uy0 >= ly0 {
            return Ok(false);
        }
    }
    for &(a, b) in &groups.mirror_pairs {
        let pa = groups.points(base, a);
        let pb = groups.points(base, b);
        let sa = fit_group_similarity(&pa, &groups.points(transformed, a))?;
        let sb = fit_group_similarity(&pb, &groups.points(transformed, b))?;
        let ua = sa.offset(group_mean(&pa)?);
        let ub = sb.offset(group_mean(&pb)?);
        if (sa.alpha - sb.alpha).abs() > MIRROR_TOL
            || (ua[0] + ub[0]).abs() > MIRROR_TOL
            || (ua[1] - ub[1]).abs() > MIRROR_TOL
        {
            return Ok(false);
        }
    }
    Ok(true)
}

/// K faces warped by independently sampled known group transforms.
pub fn generate_known_transform_set<R: Rng + ?Sized>(
    img: &Image,
    p: &LandmarkSet,
    groups: &SemanticGroups,
    branches: usize,
    ranges: &KnownTransformRanges,
    ridge: f64,
    rng: &mut R,
) -> Result<Vec<ManipulatedFace>> {
    (0..branches)
        .map(|_| {
            let sims = sample_known_transforms(groups, p, rng, ranges)?;
            let target = groups.apply(p, &sims)?;
            Ok(ManipulatedFace {
                image: warp_image(img, p, &target, ridge)?,
                control_source: p.clone(),
                displacement: DisplacementField::between(p, &target)?,
                control_target: target,
                iterations_used: 0,
                status: BranchStatus::Converged,
                min_peer_distance: f64::NAN,
            })
        })
        .collect()
}

/// Projects a stepped landmark set onto the per-group similarity family,
/// then shrinks each group's displacement uniformly into the `δ` box.
///
/// Shrinking by `s` keeps the family: `α' = 1 + s(α − 1)`, `β' = p̄ + s(β − p̄)`.
struct GroupClip<'a> {
    groups: &'a SemanticGroups,
}

impl StepProjection for GroupClip<'_> {
    fn project(&self, p: &LandmarkSet, stepped: &LandmarkSet, delta: f64) -> Result<DisplacementField> {
        let sims = self.groups.fit(p, stepped)?;
        let target = self.groups.apply(p, &sims)?;
        let mut d = DisplacementField::between(p, &target)?;
        for g in 0..self.groups.len() {
            let idx = self.groups.members(g);
            let m = idx.iter().map(|&i| d.0[i][0].abs().max(d.0[i][1].abs())).fold(0.0, f64::max);
            if m > delta {
                let s = delta / m;
                for &i in idx {
                    for c in &mut d.0[i] {
                        *c = (*c * s).clamp(-delta, delta);
                    }
                }
            }
        }
        Ok(d)
    }
}

/// K faces by sign-gradient steps projected onto per-group similarities.
pub fn generate_grouped_adversarial_set(
    e: &dyn Embedder,
    img: &Image,
    p: &LandmarkSet,
    groups: &SemanticGroups,
    cfg: &AttackConfig,
) -> Result<Vec<ManipulatedFace>> {
    groups.check_len(p)?;
    run_attack(e, img, p, cfg, &GroupClip { groups })
}
