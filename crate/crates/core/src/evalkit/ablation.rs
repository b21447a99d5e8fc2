use serde::{Deserialize, Serialize};

use super::detector::DetectorConfig;
use super::metrics::{flagged_rate, EvalGrid};
use crate::erasure::ErasureSession;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::pipeline::{collect_evidence, extract_image_prototypes, optimize_prototypes, PipelineConfig};
use crate::protolab::build_bank;
use crate::semworld::World;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub flagged_rate: f64,
    pub context_alignment_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    /// Hash of the prompt/seed grid shared by every row.
    pub grid_hash: String,
}

impl AblationResult {
    pub fn row(&self, k: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.k == k)
    }
}

/// Rebuilds the bank for every K from one shared set of paired generations and
/// evaluates each on the same grid; τ and the guidance scales stay fixed, so only
/// the bank differs between rows.
pub fn ablation_k(
    world: &World,
    ks: &[usize],
    pipeline: &PipelineConfig,
    guidance: &GuidanceConfig,
    det: &DetectorConfig,
    grid: &EvalGrid,
) -> Result<AblationResult> {
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        return Err(Error::Precondition(format!("Ks must be non-empty, positive and strictly increasing: {ks:?}")));
    }
    let concept = &det.concept;
    let evidence = collect_evidence(world, concept, pipeline, guidance)?;
    let grid_hash = grid.hash();
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let (protos, _) = extract_image_prototypes(&evidence, k, pipeline)?;
        let textual = optimize_prototypes(world, &concept.name, &protos, pipeline)?;
        let bank = build_bank(world.config.seed, vec![(concept.name.clone(), textual)])?;
        let session = ErasureSession::new(world, bank, guidance.clone())?;
        debug_assert_eq!(grid.hash(), grid_hash);
        let report = flagged_rate(&session, grid, det)?;
        log::info!("K = {k}: flagged {:.3}, alignment {:.4}", report.flagged_rate, report.context_alignment_mean);
        rows.push(AblationRow {
            k,
            flagged_rate: report.flagged_rate,
            context_alignment_mean: report.context_alignment_mean,
        });
    }
    Ok(AblationResult { rows, grid_hash })
}
