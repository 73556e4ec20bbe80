#![allow(dead_code)]

use lobeseg::anatomy::{derive_regions, hierarchy, RegionPartition};
use lobeseg::volume::{
    softmax_channels, FieldKind, GridShape, LabelSemantics, LabelVolume, ProbabilityField,
    ScalarField4D,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn labels(dims: [usize; 3], semantics: LabelSemantics, data: Vec<u8>) -> LabelVolume {
    LabelVolume::from_vec(GridShape::cube(1, dims).unwrap(), semantics, data).unwrap()
}

/// Random lobe labels with roughly `bv_rate` of the in-lobe voxels carrying a
/// member segment. Voxels 0 and 1 are forced to RS4/RS5 so at least two BV
/// classes exist.
pub fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], bv_rate: f64) -> (LabelVolume, LabelVolume) {
    let h = hierarchy();
    let n = dims.iter().product::<usize>();
    let mut lobe = vec![0u8; n];
    let mut bv = vec![0u8; n];
    for v in 0..n {
        if rng.gen_bool(0.8) {
            let l = rng.gen_range(1..=5u8);
            lobe[v] = l;
            if rng.gen_bool(bv_rate) {
                let m = h.members(l);
                bv[v] = m[rng.gen_range(0..m.len())];
            }
        }
    }
    let rm = h.lobe_id("RightMiddle").unwrap();
    lobe[0] = rm;
    lobe[1] = rm;
    bv[0] = h.segment_id("RS4").unwrap();
    bv[1] = h.segment_id("RS5").unwrap();
    (
        labels(dims, LabelSemantics::BvLabels, bv),
        labels(dims, LabelSemantics::LobeLabels, lobe),
    )
}

pub fn random_regions(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> RegionPartition {
    let (bv, lobe) = random_labels(rng, dims, 0.3);
    derive_regions(&bv, &lobe, &hierarchy()).unwrap()
}

pub fn random_logits(rng: &mut ChaCha8Rng, channels: usize, dims: [usize; 3], scale: f64) -> ScalarField4D {
    let shape = GridShape::cube(channels, dims).unwrap();
    let data = (0..shape.len())
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ScalarField4D::from_vec(shape, FieldKind::Logits, data).unwrap()
}

pub fn random_probs(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> ProbabilityField {
    softmax_channels(&random_logits(rng, 19, dims, 2.0)).unwrap()
}
