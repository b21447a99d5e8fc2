//! End-to-end prototype construction for one or more concepts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::protolab::{
    build_bank, cluster_prototypes_with_labels, embedding_differences, generate_pairs, optimize_textual_prototype,
    AscentTrace, DifferenceSet, ImagePrototype, KMeansConfig, PairedGenerations, PrototypeBank, TextualConfig, TextualPrototype,
};
use crate::rng::derive_seed;
use crate::semworld::{sample_concept_prompts, ConceptSpec, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Concept prompts per concept (N).
    pub prompts: usize,
    /// Images per prompt and per contrastive prompt (M).
    pub per_prompt: usize,
    /// Prototypes per concept (K).
    pub k: usize,
    pub textual: TextualConfig,
    pub kmeans: KMeansConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            prompts: 40,
            per_prompt: 4,
            k: 3,
            textual: TextualConfig::default(),
            kmeans: KMeansConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompts == 0 || self.per_prompt == 0 || self.k == 0 {
            return Err(Error::Precondition("N, M and K must all be >= 1".into()));
        }
        if self.textual.len == 0 || self.textual.eta.is_nan() || self.textual.eta <= 0.0 {
            return Err(Error::Precondition("L must be >= 1 and eta > 0".into()));
        }
        Ok(())
    }

    fn concept_seed(&self, concept: &str, stage: u64) -> u64 {
        // keyed by name so adding a concept never reshuffles another's stream
        let tag = concept.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
        });
        derive_seed(self.seed, &[tag, stage])
    }
}

/// Paired generations and their differences for one concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEvidence {
    pub concept: String,
    pub pairs: PairedGenerations,
    pub diffs: DifferenceSet,
}

pub fn collect_evidence(
    world: &World,
    concept: &ConceptSpec,
    cfg: &PipelineConfig,
    guidance: &GuidanceConfig,
) -> Result<ConceptEvidence> {
    cfg.validate()?;
    let prompts = sample_concept_prompts(world, concept, cfg.prompts, cfg.concept_seed(&concept.name, 0));
    let pairs = generate_pairs(
        world,
        &prompts,
        concept,
        cfg.per_prompt,
        guidance,
        cfg.concept_seed(&concept.name, 1),
    )?;
    let diffs = embedding_differences(world, &pairs)?;
    Ok(ConceptEvidence {
        concept: concept.name.clone(),
        pairs,
        diffs,
    })
}

/// Image prototypes sorted by cluster size, with each difference's cluster.
pub fn extract_image_prototypes(
    evidence: &ConceptEvidence,
    k: usize,
    cfg: &PipelineConfig,
) -> Result<(Vec<ImagePrototype>, Vec<usize>)> {
    cluster_prototypes_with_labels(&evidence.diffs, k, &cfg.kmeans, cfg.concept_seed(&evidence.concept, 2))
}

/// Soft prompt for prototype `k` of `concept`, seeded from the pipeline seed.
pub fn optimize_entry(
    world: &World,
    concept: &str,
    k: usize,
    proto: &ImagePrototype,
    cfg: &PipelineConfig,
) -> Result<(TextualPrototype, AscentTrace)> {
    let seed = derive_seed(cfg.concept_seed(concept, 3), &[k as u64]);
    optimize_textual_prototype(world, proto, &cfg.textual, concept, k, seed)
}

/// Optimizes one soft prompt per image prototype, in parallel.
pub fn optimize_prototypes(
    world: &World,
    concept: &str,
    protos: &[ImagePrototype],
    cfg: &PipelineConfig,
) -> Result<Vec<TextualPrototype>> {
    protos
        .par_iter()
        .enumerate()
        .map(|(k, p)| optimize_entry(world, concept, k, p, cfg).map(|(tp, _)| tp))
        .collect()
}

/// Full extraction and optimization for every named concept, merged into one bank.
pub fn build_concept_bank(
    world: &World,
    concepts: &[&str],
    cfg: &PipelineConfig,
    guidance: &GuidanceConfig,
) -> Result<PrototypeBank> {
    let mut groups = Vec::with_capacity(concepts.len());
    for name in concepts {
        let spec = world
            .concept(name)
            .ok_or_else(|| Error::Precondition(format!("unknown concept {name:?}")))?;
        let evidence = collect_evidence(world, spec, cfg, guidance)?;
        let (protos, _) = extract_image_prototypes(&evidence, cfg.k, cfg)?;
        groups.push((name.to_string(), optimize_prototypes(world, name, &protos, cfg)?));
    }
    build_bank(world.config.seed, groups)
}
