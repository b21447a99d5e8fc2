#![allow(dead_code)]

use protoerase::erasure::{calibrate_tau, TauCalibration};
use protoerase::evalkit::{calibrate_detector, nearest_tokens, DetectorCalibration};
use protoerase::pipeline::{collect_evidence, extract_image_prototypes, optimize_prototypes, ConceptEvidence, PipelineConfig};
use protoerase::protolab::{build_bank, ImagePrototype, PrototypeBank};
use protoerase::semworld::{sample_concept_prompts, sample_neutral_prompts, ConceptSpec, TokenId, World};
use protoerase::{build_world, GuidanceConfig, WorldConfig};

/// One world seed's worth of fitted artifacts for a single concept.
pub struct Scenario {
    pub world: World,
    pub concept: ConceptSpec,
    pub guidance: GuidanceConfig,
    pub pipeline: PipelineConfig,
    pub evidence: ConceptEvidence,
    pub detector: DetectorCalibration,
}

impl Scenario {
    pub fn new(config: WorldConfig, concept: &str) -> Self {
        let seed = config.seed;
        let world = build_world(config).expect("world builds");
        let concept = world.concept(concept).expect("concept exists").clone();
        let guidance = GuidanceConfig::default();
        let pipeline = PipelineConfig {
            seed,
            ..PipelineConfig::default()
        };
        let evidence = collect_evidence(&world, &concept, &pipeline, &guidance).expect("pairs");
        let detector = calibrate_detector(&world, &concept, 200, &guidance, seed ^ 0xD7).expect("detector");
        Self {
            world,
            concept,
            guidance,
            pipeline,
            evidence,
            detector,
        }
    }

    pub fn image_prototypes(&self, k: usize) -> (Vec<ImagePrototype>, Vec<usize>) {
        extract_image_prototypes(&self.evidence, k, &self.pipeline).expect("clustering")
    }

    pub fn bank(&self, k: usize) -> PrototypeBank {
        let (protos, _) = self.image_prototypes(k);
        let textual = optimize_prototypes(&self.world, &self.concept.name, &protos, &self.pipeline).expect("optimize");
        build_bank(self.world.config.seed, vec![(self.concept.name.clone(), textual)]).expect("bank")
    }

    pub fn tau(&self, bank: &PrototypeBank) -> TauCalibration {
        let s = self.world.config.seed;
        let held = sample_concept_prompts(&self.world, &self.concept, 200, s ^ 0x7A0);
        let neutral = sample_neutral_prompts(&self.world, 200, s ^ 0x7A1);
        calibrate_tau(&self.world, bank, &held, &neutral).expect("tau")
    }

    /// Majority mode (by source prompt) of the differences in each cluster.
    pub fn cluster_modes(&self, k: usize) -> Vec<usize> {
        let (_, labels) = self.image_prototypes(k);
        let mut counts = vec![vec![0usize; self.concept.mode_count()]; k];
        for (&(i, _, _), &l) in self.evidence.diffs.provenance.iter().zip(&labels) {
            let prompt = &self.evidence.pairs.prompts[i];
            let mode = prompt
                .tokens()
                .iter()
                .find_map(|t| self.concept.mode_of(*t))
                .expect("concept prompt");
            counts[l][mode] += 1;
        }
        counts
            .iter()
            .map(|c| (0..c.len()).max_by_key(|&m| (c[m], std::cmp::Reverse(m))).unwrap())
            .collect()
    }
}

pub fn world(seed: u64) -> World {
    build_world(WorldConfig::with_seed(seed)).expect("world builds")
}

/// Top-1 vocabulary token of a prototype vector.
pub fn top_token(world: &World, v: &nalgebra::DVector<f64>) -> TokenId {
    nearest_tokens(world, v, 1).expect("ranking")[0].0
}
