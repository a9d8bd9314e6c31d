//! Shared fixtures for the criterion benchmarks.

use defstereo::datagen::{self, generate_sample, DatagenConfig, Patch, SceneRecipe};
use defstereo::model::ModelConfig;
use defstereo::optics::LayeredScene;
use defstereo::train::{TrainConfig, Trainer};
use defstereo::ModelKind;

/// Desk-sized (128×96) random scene.
pub fn desk_scene(seed: u64) -> LayeredScene {
    let cfg = DatagenConfig::desk();
    datagen::generate_scene(
        &SceneRecipe::random(),
        &cfg,
        &mut datagen::scene_rng(seed, 0),
    )
    .expect("valid desk config")
}

/// A trainer on eight `size`×`size` patches of desk samples.
pub fn desk_trainer(kind: ModelKind, size: usize) -> Trainer {
    let dc = DatagenConfig {
        height: size,
        width: size,
        ..DatagenConfig::desk()
    };
    let patches: Vec<Patch> = (0..8)
        .map(|i| {
            Patch::from_sample(
                &generate_sample(&SceneRecipe::random(), &dc, 1, i).expect("valid config"),
            )
        })
        .collect();
    let cfg = TrainConfig {
        model: ModelConfig::desk(kind),
        patch_h: size,
        patch_w: size,
        ..Default::default()
    };
    Trainer::new(cfg, patches).expect("valid trainer config")
}
