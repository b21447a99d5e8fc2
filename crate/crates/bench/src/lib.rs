//! Shared fixtures for the criterion benches.

use nalgebra::DVector;
use protoerase::protolab::{embedding_differences, generate_pairs};
use protoerase::semworld::sample_concept_prompts;
use protoerase::{build_world, GuidanceConfig, World, WorldConfig};

pub fn world() -> World {
    build_world(WorldConfig::with_seed(0)).expect("default world builds")
}

/// Embedding differences for the primary concept, as fed to k-means.
pub fn differences(world: &World, prompts: usize, per_prompt: usize) -> Vec<DVector<f64>> {
    let concept = world.primary_concept();
    let prompts = sample_concept_prompts(world, concept, prompts, 1);
    let pairs = generate_pairs(world, &prompts, concept, per_prompt, &GuidanceConfig::default(), 2)
        .expect("pair generation");
    embedding_differences(world, &pairs).expect("differences").diffs
}
