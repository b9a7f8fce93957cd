#![allow(dead_code)]

use std::sync::OnceLock;

use trailgraph_core::head::{train, HeadShape, HeadWeights, TrainConfig};
use trailgraph_core::synth::{make_edge_dataset, synthetic_extraction, EdgeDatasetConfig, SceneSpec};

/// A small head trained on synthetic scenes, built once per test binary.
pub fn small_head() -> &'static HeadWeights {
    static HEAD: OnceLock<HeadWeights> = OnceLock::new();
    HEAD.get_or_init(|| {
        let template = SceneSpec {
            random_gaps: 2,
            seed: 100,
            ..SceneSpec::default()
        };
        let cfg = EdgeDatasetConfig {
            extraction: synthetic_extraction(),
            sources_per_scene: Some(12),
            ..EdgeDatasetConfig::default()
        };
        let data = make_edge_dataset(60, &template, &cfg).unwrap();
        let shape = HeadShape {
            hidden: 64,
            heads: 4,
            mlp_hidden: 32,
            ..HeadShape::default()
        };
        let init = HeadWeights::init(shape, 1).unwrap();
        let tc = TrainConfig {
            epochs: 30,
            lr: 2e-3,
            ..TrainConfig::default()
        };
        train(&init, &data, &tc).unwrap().weights
    })
}

/// An untrained head; enough where only determinism matters.
pub fn tiny_head() -> HeadWeights {
    HeadWeights::init(
        HeadShape {
            hidden: 16,
            heads: 2,
            mlp_hidden: 8,
            ..HeadShape::default()
        },
        5,
    )
    .unwrap()
}
