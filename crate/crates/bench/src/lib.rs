//! Shared fixtures for the criterion benchmarks.

use crowdped_core::postprocess::Detection;
use crowdped_core::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` random boxes inside a `extent` x `extent` image.
pub fn random_boxes(n: usize, extent: f64, seed: u64) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let w = rng.random_range(4.0..extent / 4.0);
            let h = rng.random_range(4.0..extent / 2.0);
            let x = rng.random_range(0.0..extent - w);
            let y = rng.random_range(0.0..extent - h);
            BBox::from_xywh(x, y, w, h).expect("positive size")
        })
        .collect()
}

/// Candidates clustered like a crowded scene: each carries a full box and a
/// visible box cut from its upper part.
pub fn crowded_detections(n: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_boxes(n, 128.0, seed)
        .into_iter()
        .map(|full| {
            let keep = rng.random_range(0.3..1.0);
            let visible = BBox::new(full.x1(), full.y1(), full.x2(), full.y1() + full.height() * keep).expect("inside full");
            Detection {
                full: Some(full),
                visible: Some(visible),
                score: rng.random_range(0.0..1.0),
                part_scores: None,
            }
        })
        .collect()
}
