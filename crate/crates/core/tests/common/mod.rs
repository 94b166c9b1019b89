#![allow(dead_code)]

use cprc::data::{build_dataset, SceneSpec, SemiDataset};
use cprc::train::{AblationMode, TrainConfig};
use cprc::CaptionerModel;

/// A few hundred scenes: enough for both pools and a test split.
pub fn small_dataset(seed: u64) -> SemiDataset {
    build_dataset(&SceneSpec::default(), 120, 0.1, 12, seed).expect("small dataset builds")
}

/// Two short epochs of the given mode.
pub fn quick_config(mode: AblationMode, seed: u64) -> TrainConfig {
    TrainConfig { epochs: 2, steps_per_epoch: Some(3), seed, mode, ..TrainConfig::default() }
}

pub fn params_bitwise_eq(a: &CaptionerModel<f32>, b: &CaptionerModel<f32>) -> bool {
    let (pa, pb) = (a.params(), b.params());
    pa.names() == pb.names() && pa.tensors().iter().zip(pb.tensors()).all(|(x, y)| x.bitwise_eq(y))
}
