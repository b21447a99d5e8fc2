//! Inference-time erasure: top-1 prototype selection against the prompt and
//! guided sampling with the selected prototype as negative condition.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{cosine_vec, encode_prompt};
use crate::error::{Error, Result};
use crate::guidance::{sample, Condition, GuidanceConfig, NoiseSchedule, ResolvedCondition};
use crate::protolab::PrototypeBank;
use crate::semworld::{Prompt, World};

/// Fraction of held-out concept prompts that must clear the calibrated τ.
pub const TAU_COVERAGE: f64 = 0.99;

/// Argmax over `similarities` if it reaches `tau`; ties go to the lowest index.
pub fn select_from_similarities(similarities: &[f64], tau: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in similarities.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.filter(|&(_, s)| s >= tau)
}

/// Cosine of the prompt summary against every bank summary.
pub fn prototype_similarities(world: &World, prompt: &Prompt, bank: &PrototypeBank) -> Result<Vec<f64>> {
    let e = encode_prompt(world, prompt)?;
    bank.entries
        .iter()
        .map(|p| cosine_vec(&e.0, &p.summary.0).ok_or(Error::ZeroNorm("prompt or prototype summary")))
        .collect()
}

pub fn select_prototype(world: &World, prompt: &Prompt, bank: &PrototypeBank, tau: f64) -> Result<Option<(usize, f64)>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    Ok(select_from_similarities(&prototype_similarities(world, prompt, bank)?, tau))
}

/// Immutable erasure context; cheap to share across threads.
#[derive(Debug, Clone)]
pub struct ErasureSession<'w> {
    world: &'w World,
    bank: PrototypeBank,
    cfg: GuidanceConfig,
    schedule: NoiseSchedule,
    resolved: Vec<ResolvedCondition>,
}

impl<'w> ErasureSession<'w> {
    pub fn new(world: &'w World, bank: PrototypeBank, cfg: GuidanceConfig) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::EmptyBank);
        }
        if bank.dim() != world.d() {
            return Err(Error::DimensionMismatch {
                expected: world.d(),
                got: bank.dim(),
                context: "bank vs world",
            });
        }
        cfg.validate()?;
        let schedule = cfg.schedule()?;
        let resolved = bank
            .entries
            .iter()
            .map(|p| ResolvedCondition::from_summary(world, p.summary.clone()))
            .collect::<Result<_>>()?;
        Ok(Self {
            world,
            bank,
            cfg,
            schedule,
            resolved,
        })
    }

    pub fn world(&self) -> &'w World {
        self.world
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn config(&self) -> &GuidanceConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Same bank and schedule, different guidance scales or τ.
    pub fn with_config(&self, cfg: GuidanceConfig) -> Result<Self> {
        Self::new(self.world, self.bank.clone(), cfg)
    }

    pub fn erase_and_generate(&self, prompt: &Prompt, seed: u64) -> Result<GenerationRecord> {
        let similarities = prototype_similarities(self.world, prompt, &self.bank)?;
        let selected = select_from_similarities(&similarities, self.cfg.tau);
        let cond = Condition::Hard(prompt.clone()).resolve(self.world)?;
        let proto = selected.map(|(i, _)| &self.resolved[i]);
        let image = sample(self.world, &cond, proto, &self.cfg, &self.schedule, seed)?;
        Ok(GenerationRecord {
            prompt: prompt.clone(),
            seed,
            selected: selected.map(|(index, similarity)| {
                let p = &self.bank.entries[index];
                SelectedPrototype {
                    index,
                    concept: p.source_concept.clone(),
                    mode_index: p.source_mode,
                    similarity,
                }
            }),
            similarities,
            image: image.iter().copied().collect(),
            guidance: self.cfg.clone(),
        })
    }

    /// Records for every (prompt, seed) pair, in input order.
    pub fn generate_grid(&self, grid: &[(Prompt, u64)]) -> Result<Vec<GenerationRecord>> {
        grid.par_iter()
            .map(|(p, s)| self.erase_and_generate(p, *s))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedPrototype {
    pub index: usize,
    pub concept: String,
    pub mode_index: usize,
    pub similarity: f64,
}

/// One generation with its full selection audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: Prompt,
    pub seed: u64,
    pub selected: Option<SelectedPrototype>,
    pub similarities: Vec<f64>,
    pub image: Vec<f64>,
    pub guidance: GuidanceConfig,
}

impl GenerationRecord {
    pub fn image_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.image)
    }
}

pub fn write_records(records: &[GenerationRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<GenerationRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::CorruptFile(format!("records line {}: {e}", n + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// Outcome of τ calibration over held-out concept prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauCalibration {
    pub tau: f64,
    /// Fraction of concept prompts selecting some prototype at `tau`.
    pub coverage: f64,
    /// Largest similarity seen on the neutral prompts, when any were given.
    pub neutral_max: Option<f64>,
}

/// Largest τ at which at least 99% of `concept_prompts` still select a prototype.
pub fn calibrate_tau(
    world: &World,
    bank: &PrototypeBank,
    concept_prompts: &[Prompt],
    neutral_prompts: &[Prompt],
) -> Result<TauCalibration> {
    if concept_prompts.is_empty() {
        return Err(Error::Precondition("tau calibration needs concept prompts".into()));
    }
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let max_sim = |p: &Prompt| -> Result<f64> {
        Ok(prototype_similarities(world, p, bank)?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max))
    };
    let mut maxima = concept_prompts.iter().map(max_sim).collect::<Result<Vec<_>>>()?;
    maxima.sort_by(f64::total_cmp);
    let n = maxima.len();
    let need = (TAU_COVERAGE * n as f64).ceil() as usize;
    let tau = maxima[n - need];
    let coverage = maxima.iter().filter(|&&m| m >= tau).count() as f64 / n as f64;
    let neutral_max = neutral_prompts
        .iter()
        .map(max_sim)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .reduce(f64::max);
    if let Some(m) = neutral_max {
        if m >= tau {
            log::warn!("calibrated tau {tau:.4} is reached by a neutral prompt (max similarity {m:.4})");
        }
    }
    Ok(TauCalibration {
        tau,
        coverage,
        neutral_max,
    })
}
