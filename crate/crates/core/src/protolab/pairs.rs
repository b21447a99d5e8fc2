use nalgebra::DVector;
use rayon::prelude::*;

use crate::encoders::encode_image;
use crate::error::{Error, Result};
use crate::guidance::{sample, Condition, GuidanceConfig};
use crate::rng::derive_seed;
use crate::semworld::{contains_concept, contrastive_prompt, ConceptSpec, Prompt, World};

/// M images per prompt and per contrastive prompt, image `j` of both sets
/// drawn from the same noise seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedGenerations {
    pub prompts: Vec<Prompt>,
    pub contrastive: Vec<Prompt>,
    pub with_concept: Vec<Vec<DVector<f64>>>,
    pub without_concept: Vec<Vec<DVector<f64>>>,
    pub seeds: Vec<Vec<u64>>,
}

impl PairedGenerations {
    pub fn per_prompt(&self) -> usize {
        self.seeds.first().map_or(0, Vec::len)
    }
}

/// Generates the paired image sets. Negative guidance is never applied here.
pub fn generate_pairs(
    world: &World,
    prompts: &[Prompt],
    concept: &ConceptSpec,
    per_prompt: usize,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<PairedGenerations> {
    if per_prompt == 0 {
        return Err(Error::Precondition("M must be >= 1".into()));
    }
    for p in prompts {
        if !contains_concept(world, p, concept)? {
            return Err(Error::Precondition(format!("prompt {p} lacks concept {:?}", concept.name)));
        }
    }
    let cfg = guidance.without_erasure();
    cfg.validate()?;
    let schedule = cfg.schedule()?;

    type Row = (Prompt, Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<u64>);
    let rows: Vec<Row> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<Row> {
            let neg = contrastive_prompt(world, p, concept)?;
            let cond = Condition::Hard(p.clone()).resolve(world)?;
            let cond_neg = Condition::Hard(neg.clone()).resolve(world)?;
            let seeds: Vec<u64> = (0..per_prompt)
                .map(|j| derive_seed(seed, &[i as u64, j as u64]))
                .collect();
            let pos = seeds
                .iter()
                .map(|s| sample(world, &cond, None, &cfg, &schedule, *s))
                .collect::<Result<Vec<_>>>()?;
            let negs = seeds
                .iter()
                .map(|s| sample(world, &cond_neg, None, &cfg, &schedule, *s))
                .collect::<Result<Vec<_>>>()?;
            Ok((neg, pos, negs, seeds))
        })
        .collect::<Result<_>>()?;

    let mut out = PairedGenerations {
        prompts: prompts.to_vec(),
        contrastive: Vec::with_capacity(rows.len()),
        with_concept: Vec::with_capacity(rows.len()),
        without_concept: Vec::with_capacity(rows.len()),
        seeds: Vec::with_capacity(rows.len()),
    };
    for (neg, pos, negs, seeds) in rows {
        out.contrastive.push(neg);
        out.with_concept.push(pos);
        out.without_concept.push(negs);
        out.seeds.push(seeds);
    }
    Ok(out)
}

/// All cross-paired embedding differences, ordered by (i, j, k).
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceSet {
    pub diffs: Vec<DVector<f64>>,
    pub provenance: Vec<(usize, usize, usize)>,
}

impl DifferenceSet {
    pub fn len(&self) -> usize {
        self.diffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diffs.is_empty()
    }
}

pub fn embedding_differences(world: &World, pg: &PairedGenerations) -> Result<DifferenceSet> {
    let mut diffs = Vec::new();
    let mut provenance = Vec::new();
    for (i, (pos, neg)) in pg.with_concept.iter().zip(&pg.without_concept).enumerate() {
        let zp = pos.iter().map(|x| encode_image(world, x)).collect::<Result<Vec<_>>>()?;
        let zn = neg.iter().map(|x| encode_image(world, x)).collect::<Result<Vec<_>>>()?;
        for (j, a) in zp.iter().enumerate() {
            for (k, b) in zn.iter().enumerate() {
                let diff = &a.0 - &b.0;
                if !crate::linalg::all_finite(diff.iter()) {
                    return Err(Error::Precondition(format!("non-finite difference at ({i}, {j}, {k})")));
                }
                diffs.push(diff);
                provenance.push((i, j, k));
            }
        }
    }
    Ok(DifferenceSet { diffs, provenance })
}
