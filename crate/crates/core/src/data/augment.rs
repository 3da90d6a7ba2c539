use rand::seq::IndexedRandom;
use rand::Rng;

use super::DepthSample;

pub const FLIP_PROB: f64 = 0.5;
pub const SWAP_PROB: f64 = 0.25;

/// The five non-identity orderings of the colour channels.
const PERMUTATIONS: [[usize; 3]; 5] = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// What [`augment`] did to a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentRecord {
    pub flipped: bool,
    /// Output channel `c` is input channel `permutation[c]`.
    pub permutation: Option<[usize; 3]>,
}

/// Mirror image and depth together, then reorder the colour channels.
pub fn apply_augment(sample: &DepthSample, record: AugmentRecord) -> DepthSample {
    let (mut image, mut depth) = (sample.image.clone(), sample.depth.clone());
    if record.flipped {
        image = image.flip_horizontal();
        depth = depth.flip_horizontal();
    }
    if let Some(p) = record.permutation {
        let src = image.clone();
        for n in 0..image.shape().n {
            for (c, &from) in p.iter().enumerate() {
                image.plane_mut(n, c).copy_from_slice(src.plane(n, from));
            }
        }
    }
    DepthSample { image, depth, d_max: sample.d_max }
}

/// Random horizontal flip (p = 0.5) and colour channel swap (p = 0.25).
pub fn augment<R: Rng + ?Sized>(sample: &DepthSample, rng: &mut R) -> (DepthSample, AugmentRecord) {
    let flipped = rng.random_bool(FLIP_PROB);
    let permutation = if rng.random_bool(SWAP_PROB) { PERMUTATIONS.choose(rng).copied() } else { None };
    let record = AugmentRecord { flipped, permutation };
    (apply_augment(sample, record), record)
}
