//! End-to-end training, inference and evaluation on top of the core pieces.

mod config;
mod dataset;
mod infer;
mod metrics;
mod optim;
mod synth;
mod train;

pub use config::{Fusion, Optimizer, PipelineConfig, Variant};
pub use dataset::{face_size, load_dataset, save_dataset, Sample};
pub use infer::{infer, Inference};
pub use metrics::{ced_thresholds, evaluate, evaluate_predictions, Metrics, Normalization};
pub use synth::{synth_dataset, FaceParams, OUTER_EYE_CORNERS, SYNTH_LANDMARKS};
pub use train::{train, TrainReport};

use crate::attack::{generate_adversarial_set, AttackConfig, ManipulatedFace};
use crate::embedder::ToyEmbedder;
use crate::error::Result;
use crate::groups::{
    assign_groups, generate_grouped_adversarial_set, generate_known_transform_set, KnownTransformRanges,
    SemanticGroups,
};
use crate::imaging::Image;
use crate::landmarks::LandmarkSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a stream seed from a base seed and a path of indices.
pub(crate) fn seed_for(base: u64, path: &[u64]) -> u64 {
    // splitmix64 finalizer, folded over the path
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    path.iter()
        .fold(mix(base.wrapping_add(0x9e37_79b9_7f4a_7c15)), |acc, &p| {
            mix(acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15))
        })
}

/// Builds the K manipulated faces for whichever variant is configured.
#[derive(Debug, Clone)]
pub struct Manipulator {
    variant: Variant,
    attack: AttackConfig,
    delta_fraction: f64,
    ranges: KnownTransformRanges,
    groups: Option<SemanticGroups>,
    embedder: ToyEmbedder,
}

impl Manipulator {
    pub fn new(cfg: &PipelineConfig, landmark_count: usize) -> Result<Self> {
        let groups = match cfg.variant {
            Variant::Adv => None,
            Variant::Gadv | Variant::Gk => Some(assign_groups(landmark_count, cfg.groups)?),
        };
        Ok(Self {
            variant: cfg.variant,
            attack: cfg.attack.clone(),
            delta_fraction: cfg.delta_fraction,
            ranges: cfg.known_ranges.clone(),
            groups,
            embedder: ToyEmbedder::new(cfg.embedder_seed),
        })
    }

    /// `branches` manipulated copies of `img` anchored at `p`.
    pub fn generate(&self, img: &Image, p: &LandmarkSet, branches: usize, seed: u64) -> Result<Vec<ManipulatedFace>> {
        let (x0, _, x1, _) = p.bounds();
        let attack = AttackConfig {
            branches,
            delta: AttackConfig::delta_from_box_width(self.delta_fraction, x1 - x0),
            seed,
            ..self.attack.clone()
        };
        match (self.variant, &self.groups) {
            (Variant::Adv, _) => generate_adversarial_set(&self.embedder, img, p, &attack),
            (Variant::Gadv, Some(g)) => generate_grouped_adversarial_set(&self.embedder, img, p, g, &attack),
            (Variant::Gk, Some(g)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                generate_known_transform_set(img, p, g, branches, &self.ranges, attack.ridge, &mut rng)
            }
            (_, None) => unreachable!("grouped variants are built with groups"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_path() {
        let a = seed_for(0, &[1, 2]);
        assert_eq!(a, seed_for(0, &[1, 2]));
        assert_ne!(a, seed_for(0, &[2, 1]));
        assert_ne!(a, seed_for(1, &[1, 2]));
        assert_ne!(seed_for(0, &[]), seed_for(0, &[0]));
    }

    #[test]
    fn every_variant_yields_k_branches() {
        let data = synth_dataset(1, 0, 64).unwrap();
        let s = &data[0];
        for variant in [Variant::Adv, Variant::Gadv, Variant::Gk] {
            let cfg = PipelineConfig { variant, ..PipelineConfig::default() };
            let m = Manipulator::new(&cfg, SYNTH_LANDMARKS).unwrap();
            let faces = m.generate(&s.image, &s.landmarks, 3, 5).unwrap();
            assert_eq!(faces.len(), 3);
            assert!(faces.iter().any(|f| !f.displacement.is_zero()));
            let again = m.generate(&s.image, &s.landmarks, 3, 5).unwrap();
            for (a, b) in faces.iter().zip(&again) {
                assert_eq!(a.image, b.image);
            }
        }
    }
}
