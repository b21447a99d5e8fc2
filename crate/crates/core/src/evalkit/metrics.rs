use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::detector::{flagged, DetectorConfig};
use crate::encoders::{cosine_vec, encode_image, encode_prompt};
use crate::erasure::{ErasureSession, GenerationRecord};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::rng::derive_seed;
use crate::semworld::{contrastive_prompt, ConceptSpec, Prompt, World};

/// A fixed, ordered list of (prompt, seed) evaluation units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub items: Vec<(Prompt, u64)>,
}

impl EvalGrid {
    /// `per_prompt` seeds for each prompt, seed (i, j) derived from `seed`.
    pub fn new(prompts: &[Prompt], per_prompt: usize, seed: u64) -> Self {
        let items = prompts
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..per_prompt).map(move |j| (p.clone(), derive_seed(seed, &[i as u64, j as u64]))))
            .collect();
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// SHA-256 over token ids and seeds.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (p, s) in &self.items {
            h.update((p.len() as u64).to_le_bytes());
            for t in p.tokens() {
                h.update((t.0 as u64).to_le_bytes());
            }
            h.update(s.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// cos(E(c⁻), W_I x): agreement of the image with the concept-free content.
pub fn context_alignment(world: &World, prompt: &Prompt, x: &DVector<f64>, concept: &ConceptSpec) -> Result<f64> {
    let neg = contrastive_prompt(world, prompt, concept)?;
    let e = encode_prompt(world, &neg)?;
    let z = encode_image(world, x)?;
    cosine_vec(&e.0, &z.0).ok_or(Error::ZeroNorm("context alignment"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeBreakdown {
    /// Mode index of the prompt's concept token; `None` for concept-free prompts.
    pub mode: Option<usize>,
    pub n_samples: usize,
    pub flagged_rate: f64,
    pub context_alignment_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub concept: String,
    pub theta_det: f64,
    pub guidance: GuidanceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub flagged_rate: f64,
    pub context_alignment_mean: f64,
    pub n_samples: usize,
    pub per_mode: Vec<ModeBreakdown>,
    /// Fraction of samples for which some prototype was selected.
    pub selection_rate: f64,
    pub config: ReportConfig,
}

fn prompt_mode(prompt: &Prompt, concept: &ConceptSpec) -> Option<usize> {
    prompt.tokens().iter().find_map(|t| concept.mode_of(*t))
}

/// Scores records against the detector, reducing in record order.
pub fn rescore(world: &World, records: &[GenerationRecord], det: &DetectorConfig) -> Result<EvalReport> {
    let first = records
        .first()
        .ok_or_else(|| Error::Precondition("evaluation needs at least one record".into()))?;
    let scored: Vec<(Option<usize>, bool, f64)> = records
        .par_iter()
        .map(|r| {
            let x = r.image_vector();
            if x.len() != world.image_dim() {
                return Err(Error::DimensionMismatch {
                    expected: world.image_dim(),
                    got: x.len(),
                    context: "record image",
                });
            }
            Ok((
                prompt_mode(&r.prompt, &det.concept),
                flagged(world, &x, det)?,
                context_alignment(world, &r.prompt, &x, &det.concept)?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<Option<usize>, (usize, usize, f64)> = BTreeMap::new();
    for &(mode, f, a) in &scored {
        let g = groups.entry(mode).or_default();
        g.0 += 1;
        g.1 += usize::from(f);
        g.2 += a;
    }
    let n = scored.len();
    let per_mode = groups
        .into_iter()
        .map(|(mode, (count, flagged, align))| ModeBreakdown {
            mode,
            n_samples: count,
            flagged_rate: flagged as f64 / count as f64,
            context_alignment_mean: align / count as f64,
        })
        .collect();
    Ok(EvalReport {
        flagged_rate: scored.iter().filter(|s| s.1).count() as f64 / n as f64,
        context_alignment_mean: scored.iter().map(|s| s.2).sum::<f64>() / n as f64,
        n_samples: n,
        per_mode,
        selection_rate: records.iter().filter(|r| r.selected.is_some()).count() as f64 / n as f64,
        config: ReportConfig {
            concept: det.concept.name.clone(),
            theta_det: det.theta_det,
            guidance: first.guidance.clone(),
        },
    })
}

/// Generates the grid through the session and scores it.
pub fn flagged_rate(session: &ErasureSession<'_>, grid: &EvalGrid, det: &DetectorConfig) -> Result<EvalReport> {
    if grid.is_empty() {
        return Err(Error::Precondition("evaluation grid is empty".into()));
    }
    let records = session.generate_grid(&grid.items)?;
    rescore(session.world(), &records, det)
}
