#![allow(dead_code)]

use fedprompt_core::config::{ExperimentConfig, PartitionMode};
use fedprompt_core::data::SyntheticSpec;
use fedprompt_core::federation::{Strategy, TrainConfig};
use fedprompt_core::model::BackboneConfig;

/// A model small enough for a full run in well under a second: 4 layers of
/// width 16, 8×8 images cut into four 4×4 patches, CCMP at layers 2 and 3.
pub fn tiny(seed: u64, strategy: Strategy, rounds: usize) -> ExperimentConfig {
    let mut data = SyntheticSpec::new(4);
    data.image_size = 8;
    data.train_per_class = 12;
    data.test_per_class = 4;
    let model = BackboneConfig {
        dim: 16,
        layers: 4,
        heads: 2,
        image_size: 8,
        patch_size: 4,
        mlp_ratio: 2,
        init_std: 0.1,
    };
    let mut train = TrainConfig::new(4, rounds);
    train.strategy = strategy;
    train.ccmp_layers = vec![2, 3];
    train.batch_size = 8;
    ExperimentConfig {
        seed,
        data,
        partition: PartitionMode::Pathological { classes_per_client: 2 },
        model,
        train,
        heldout_fraction: None,
        workers: 1,
        output_dir: None,
    }
}

/// The 8-class, 12-client, two-classes-per-client setup at default model
/// geometry, 30 rounds.
pub fn desk(seed: u64, strategy: Strategy) -> ExperimentConfig {
    let mut train = TrainConfig::new(12, 30);
    train.strategy = strategy;
    ExperimentConfig {
        seed,
        data: SyntheticSpec::new(8),
        partition: PartitionMode::Pathological { classes_per_client: 2 },
        model: BackboneConfig::default(),
        train,
        heldout_fraction: None,
        workers: 1,
        output_dir: None,
    }
}
