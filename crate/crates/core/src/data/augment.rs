use rand::Rng;

use super::{HandAnnotation, SceneSample};
use crate::geometry::hflip_uvd;

/// Mirrors the image column-wise and every hand through `hflip_uvd`.
/// Channels 0 and 1 trade places so the per-side color coding follows the
/// swapped labels. Camera-space annotations do not survive the flip and are
/// dropped.
pub fn flip_sample(sample: &SceneSample) -> SceneSample {
    let width = sample.camera.width;
    let mut hands: Vec<HandAnnotation> = sample
        .hands
        .iter()
        .map(|h| {
            let (uvd, side) = hflip_uvd(&h.uvd, h.side, width);
            HandAnnotation { side, uvd, xyz: None }
        })
        .collect();
    hands.sort_by_key(|h| h.side.class_index());
    let mut image = sample.image.mirrored();
    image.swap_channels(0, 1);
    SceneSample { id: sample.id, image, hands, camera: sample.camera }
}

/// Flips with probability 0.5, otherwise returns the sample unchanged.
pub fn augment<R: Rng + ?Sized>(sample: &SceneSample, rng: &mut R) -> SceneSample {
    if rng.gen_bool(0.5) {
        flip_sample(sample)
    } else {
        sample.clone()
    }
}
