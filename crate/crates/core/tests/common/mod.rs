#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use roomsense::features::FeatureConfig;
use roomsense::fusion::{RoomDetector, ScoreDistributions};
use roomsense::gmm::{GaussianMixture, ScenePair};
use roomsense::persistence::{BundleMetadata, ModelBundle};
use roomsense::svm::{Platt, Standardizer, SvmModel};

/// Mostly ordinary doubles with occasional subnormals, signed zeros and
/// extreme exponents.
pub fn awkward(rng: &mut impl Rng) -> f64 {
    match rng.gen_range(0..12) {
        0 => f64::from_bits(rng.gen_range(1..1u64 << 52)),
        1 => -0.0,
        2 => rng.gen_range(-1.0..1.0) * 1e300,
        3 => rng.gen_range(-1.0..1.0) * 1e-300,
        _ => rng.gen_range(-50.0..50.0),
    }
}

fn positive(rng: &mut impl Rng) -> f64 {
    match rng.gen_range(0..8) {
        0 => f64::from_bits(rng.gen_range(1..1u64 << 52)),
        _ => rng.gen_range(1e-3..10.0),
    }
}

pub fn mixture(rng: &mut impl Rng, comps: usize, dim: usize) -> GaussianMixture {
    let raw: Vec<f64> = (0..comps).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let head: f64 = weights[1..].iter().sum();
    weights[0] = 1.0 - head;
    GaussianMixture::from_parts(
        Array1::from(weights),
        Array2::from_shape_fn((comps, dim), |_| awkward(rng)),
        Array2::from_shape_fn((comps, dim), |_| positive(rng)),
    )
    .unwrap()
}

pub fn detector(rng: &mut impl Rng, label: &str, scene_dim: usize, rir_dim: usize) -> RoomDetector {
    let c = rng.gen_range(0.1..100.0);
    let n_sv = rng.gen_range(1..6);
    RoomDetector {
        label: label.to_string(),
        scene: ScenePair::new(mixture(rng, 3, scene_dim), mixture(rng, 2, scene_dim)).unwrap(),
        svm: SvmModel {
            support: Array2::from_shape_fn((n_sv, rir_dim), |_| awkward(rng)),
            coef: Array1::from_shape_fn(n_sv, |_| rng.gen_range(-c..c)),
            bias: awkward(rng),
            gamma: positive(rng),
            c,
            standardizer: Standardizer {
                mean: Array1::from_shape_fn(rir_dim, |_| awkward(rng)),
                scale: Array1::from_shape_fn(rir_dim, |_| positive(rng)),
            },
            platt: Some(Platt {
                a: awkward(rng),
                b: awkward(rng),
            }),
        },
        alpha: rng.gen_range(0.0..=1.0),
        t_c: awkward(rng),
        dists: ScoreDistributions::new(mixture(rng, 4, 1), mixture(rng, 4, 1)).unwrap(),
        omega: positive(rng),
    }
}

/// A structurally valid bundle with random contents.
pub fn random_bundle(seed: u64) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = FeatureConfig::default();
    features.nmfd.k = rng.gen_range(2..5);
    let rir_dim = features.rir_dim().unwrap();
    let labels = ["bathroom", "office", "pantry", "lecture_hall", "classroom"];
    let n = rng.gen_range(1..=labels.len());
    let detectors = labels[..n]
        .iter()
        .map(|l| detector(&mut rng, l, 2 * features.n_ceps, rir_dim))
        .collect();
    ModelBundle {
        metadata: BundleMetadata {
            seed,
            train_buildings: vec!["B1".into(), "B2".into()],
            config: json!({"alpha": 0.1, "note": "fuzz", "seed": seed}),
        },
        features,
        detectors,
    }
}
