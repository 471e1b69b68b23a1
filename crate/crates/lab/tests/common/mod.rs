#![allow(dead_code)]

use feddis_lab::ExperimentConfig;

/// A two-client run small enough for debug-build tests.
pub fn tiny(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        clients: 2,
        synth_nodes_per_client: 3,
        synth_steps: 200,
        input_len: 4,
        horizon: 2,
        rounds: 2,
        batch_size: 16,
        hidden: 4,
        embed_dim: 2,
        layers: 1,
        personal_patterns: 4,
        global_patterns: 3,
        top_k: 2,
        seed: 3,
        ..ExperimentConfig::default()
    }
}
