//! Stage timing of the seeded estimator on a surface-scene instance.
//! Development aid.

use oaareg::estimator::{
    fsr_estimate, ransac_estimate, select_seeds, spectral_scores, EstimatorConfig,
};
use oaareg::geometry::{Correspondence, CorrespondenceSet};
use oaareg::synth::{generate_pair, simulate_descriptors, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let spec = SceneSpec {
        point_count: 5000,
        overlap_fraction: 1.0,
        noise_sigma: 0.005,
        descriptor_dim: 32,
        descriptor_noise: 0.3,
        rng_seed: 0xACC5,
        ..SceneSpec::default()
    };
    let (mut src, mut tgt, truth) = generate_pair(&spec).unwrap();
    simulate_descriptors(&mut src, &mut tgt, &truth, &spec).unwrap();

    let n = src.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC5);
    let pairs: Vec<Correspondence> = truth
        .true_correspondences
        .pairs()
        .iter()
        .map(|c| {
            let target_index = if rng.random::<f64>() < 0.3 {
                c.target_index
            } else {
                rng.random_range(0..n)
            };
            Correspondence {
                source_index: c.source_index,
                target_index,
                confidence: 1.0,
            }
        })
        .filter({
            let mut seen = std::collections::HashSet::new();
            move |c| seen.insert((c.source_index, c.target_index))
        })
        .collect();
    let set = CorrespondenceSet::new(pairs, n, n).unwrap();
    println!("pairs: {}", set.len());

    let cfg = EstimatorConfig::default();
    // warm everything
    let _ = fsr_estimate(&set, &src, &tgt, &cfg).unwrap();

    let t = Instant::now();
    let scores = spectral_scores(&set, &src, &tgt, &cfg).unwrap();
    println!("spectral_scores: {:?} ({} scores)", t.elapsed(), scores.len());

    let t = Instant::now();
    let seeds = select_seeds(&set, &src, &tgt, &cfg).unwrap();
    println!("select_seeds:    {:?} ({} seeds)", t.elapsed(), seeds.len());

    for _ in 0..3 {
        let t = Instant::now();
        let _ = fsr_estimate(&set, &src, &tgt, &cfg).unwrap();
        println!("fsr total:       {:?}", t.elapsed());
    }
    for _ in 0..2 {
        let t = Instant::now();
        let _ = ransac_estimate(&set, &src, &tgt, &cfg).unwrap();
        println!("ransac:          {:?}", t.elapsed());
    }
}
