use criterion::{black_box, criterion_group, criterion_main, Criterion};
use gean::attack::{generate_adversarial_set, AttackConfig};
use gean::detector::{soft_argmax, DetectorConfig, DetectorTrace, ToyDetector};
use gean::embedder::ToyEmbedder;
use gean::groups::{assign_groups, generate_known_transform_set, GroupScheme, KnownTransformRanges};
use gean::pipeline::{synth_dataset, Sample, SYNTH_LANDMARKS};
use gean::tps::{warp_image, warp_vjp, DEFAULT_RIDGE};
use gean::{LandmarkSet, NormalizedPoint};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn face() -> Sample {
    synth_dataset(1, 0, 64).unwrap().remove(0)
}

fn nudged(p: &LandmarkSet) -> LandmarkSet {
    p.iter()
        .enumerate()
        .map(|(i, q)| {
            let t = i as f64 * 0.7;
            NormalizedPoint::new(q.x + 0.02 * t.sin(), q.y + 0.02 * t.cos())
        })
        .collect()
}

fn tps(c: &mut Criterion) {
    let s = face();
    let p_adv = nudged(&s.landmarks);
    let cot: Vec<f64> = (0..64 * 64).map(|i| ((i * 37) % 17) as f64 / 17.0 - 0.5).collect();
    c.bench_function("warp_image 64x64, 21 control points", |b| {
        b.iter(|| warp_image(black_box(&s.image), &s.landmarks, &p_adv, DEFAULT_RIDGE).unwrap())
    });
    c.bench_function("warp_vjp 64x64, 21 control points", |b| {
        b.iter(|| warp_vjp(black_box(&s.image), &s.landmarks, &p_adv, &cot, DEFAULT_RIDGE).unwrap())
    });
}

fn manipulation(c: &mut Criterion) {
    let s = face();
    let e = ToyEmbedder::new(0);
    let cfg = AttackConfig::default();
    c.bench_function("adversarial set, K=3", |b| {
        b.iter(|| generate_adversarial_set(&e, black_box(&s.image), &s.landmarks, &cfg).unwrap())
    });
    let groups = assign_groups(SYNTH_LANDMARKS, GroupScheme::Synthetic).unwrap();
    let ranges = KnownTransformRanges::default();
    c.bench_function("known-transform set, K=3", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| generate_known_transform_set(&s.image, &s.landmarks, &groups, 3, &ranges, DEFAULT_RIDGE, &mut rng).unwrap())
    });
}

fn detector(c: &mut Criterion) {
    let s = face();
    let det = ToyDetector::new(DetectorConfig::new(64, SYNTH_LANDMARKS), 0).unwrap();
    c.bench_function("detector forward + decode 64x64", |b| {
        b.iter(|| soft_argmax(&det.predict_heatmaps(black_box(&s.image)).unwrap()).unwrap())
    });
    let mut trace = DetectorTrace::default();
    det.forward(&s.image, &mut trace).unwrap();
    let cot = vec![1e-3; SYNTH_LANDMARKS * 64 * 64];
    c.bench_function("detector backward 64x64", |b| b.iter(|| det.backward(&trace, black_box(&cot)).unwrap()));
}

criterion_group!(benches, tps, manipulation, detector);
criterion_main!(benches);
