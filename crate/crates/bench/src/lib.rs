//! Shared fixtures for the benchmarks.

use poifusion_core::harness::RunConfig;
use poifusion_core::scene::{generate_scene, OracleEncoder};
use poifusion_core::{FeatureAtlas, Scene};

/// Desk configuration with `channels` feature channels.
pub fn desk_config(channels: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.channels = channels;
    cfg.model.ffn_hidden = 2 * channels;
    cfg.scene.features.channels = channels;
    cfg
}

/// A generated scene and its encoded features.
pub fn fixture(cfg: &RunConfig, seed: u64) -> (Scene, FeatureAtlas) {
    let scene = generate_scene(&cfg.scene, seed).expect("scene generation");
    let atlas = OracleEncoder::new(&cfg.scene).encode(&scene).expect("encoding");
    (scene, atlas)
}
