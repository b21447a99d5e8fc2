//! Oracle concept detector: cosine of the image embedding against the
//! ground-truth mode directions.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{cosine_vec, encode_image};
use crate::error::{Error, Result};
use crate::guidance::{sample, Condition, GuidanceConfig};
use crate::rng::derive_seed;
use crate::semworld::{contrastive_prompt, sample_concept_prompts, ConceptSpec, World};

pub const MIN_CALIBRATION_SAMPLES: usize = 100;
pub const MIN_TPR: f64 = 0.9;
pub const MAX_FPR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub theta_det: f64,
    pub concept: ConceptSpec,
}

impl DetectorConfig {
    pub fn new(theta_det: f64, concept: ConceptSpec) -> Result<Self> {
        if !(-1.0..=1.0).contains(&theta_det) {
            return Err(Error::Precondition(format!("theta_det {theta_det} outside [-1, 1]")));
        }
        Ok(Self { theta_det, concept })
    }
}

/// max over mode tokens of cos(W_I x, g(m)); `None` for a zero embedding.
pub fn detector_score(world: &World, x: &DVector<f64>, concept: &ConceptSpec) -> Result<Option<f64>> {
    let z = encode_image(world, x)?;
    let mut best: Option<f64> = None;
    for m in concept.mode_tokens() {
        let Some(c) = cosine_vec(&z.0, world.semantic(m)?) else {
            return Ok(None);
        };
        best = Some(best.map_or(c, |b| b.max(c)));
    }
    Ok(best)
}

/// Zero images are never flagged.
pub fn flagged(world: &World, x: &DVector<f64>, det: &DetectorConfig) -> Result<bool> {
    Ok(detector_score(world, x, &det.concept)?.is_some_and(|s| s >= det.theta_det))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorRates {
    pub tpr: f64,
    pub fpr: f64,
}

fn rates(pos: &[f64], neg: &[f64], theta: f64) -> DetectorRates {
    let frac = |s: &[f64]| s.iter().filter(|&&v| v >= theta).count() as f64 / s.len() as f64;
    DetectorRates {
        tpr: frac(pos),
        fpr: frac(neg),
    }
}

/// θ maximizing Youden's J = TPR − FPR over midpoints of the pooled scores
/// (lowest θ on ties).
pub fn youden_threshold(pos: &[f64], neg: &[f64]) -> (f64, f64) {
    let mut pooled: Vec<f64> = pos.iter().chain(neg).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    let mut best = (1.0, f64::NEG_INFINITY);
    for w in pooled.windows(2) {
        let theta = 0.5 * (w[0] + w[1]);
        let r = rates(pos, neg, theta);
        let j = r.tpr - r.fpr;
        if j > best.1 {
            best = (theta, j);
        }
    }
    best
}

/// Baseline (β = 0) samples of concept prompts and of their contrastive
/// counterparts under shared seeds; scores of zero images map to −∞.
fn labelled_scores(
    world: &World,
    concept: &ConceptSpec,
    n: usize,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = guidance.without_erasure();
    let schedule = cfg.schedule()?;
    let prompts = sample_concept_prompts(world, concept, n, derive_seed(seed, &[0]));
    let scored: Vec<(f64, f64)> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<(f64, f64)> {
            let s = derive_seed(seed, &[1, i as u64]);
            let neg = contrastive_prompt(world, p, concept)?;
            let xp = sample(world, &Condition::Hard(p.clone()).resolve(world)?, None, &cfg, &schedule, s)?;
            let xn = sample(world, &Condition::Hard(neg).resolve(world)?, None, &cfg, &schedule, s)?;
            let score = |x| Ok::<_, Error>(detector_score(world, x, concept)?.unwrap_or(f64::NEG_INFINITY));
            Ok((score(&xp)?, score(&xn)?))
        })
        .collect::<Result<_>>()?;
    Ok(scored.into_iter().unzip())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorCalibration {
    pub detector: DetectorConfig,
    pub youden_j: f64,
    pub holdout: DetectorRates,
}

/// Fits θ on `n` positives and `n` negatives, then checks it on a fresh
/// held-out draw of the same size.
pub fn calibrate_detector(
    world: &World,
    concept: &ConceptSpec,
    n: usize,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<DetectorCalibration> {
    if n < MIN_CALIBRATION_SAMPLES {
        return Err(Error::Precondition(format!(
            "detector calibration needs n >= {MIN_CALIBRATION_SAMPLES}, got {n}"
        )));
    }
    let (pos, neg) = labelled_scores(world, concept, n, guidance, derive_seed(seed, &[0]))?;
    let (theta, j) = youden_threshold(&pos, &neg);
    let (hpos, hneg) = labelled_scores(world, concept, n, guidance, derive_seed(seed, &[1]))?;
    let holdout = rates(&hpos, &hneg, theta);
    if !(j.is_finite() && holdout.tpr >= MIN_TPR && holdout.fpr <= MAX_FPR) {
        return Err(Error::CalibrationFailure {
            tpr: holdout.tpr,
            fpr: holdout.fpr,
        });
    }
    Ok(DetectorCalibration {
        detector: DetectorConfig::new(theta.clamp(-1.0, 1.0), concept.clone())?,
        youden_j: j,
        holdout,
    })
}
