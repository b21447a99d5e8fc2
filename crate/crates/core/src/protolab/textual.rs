//! Transfer of an image prototype into a soft prompt by cosine ascent through
//! the frozen text encoder.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ImagePrototype;
use crate::encoders::{cosine_vec, encode_text, encode_text_grad, JointEmbedding, SoftPrompt};
use crate::error::{Error, Result};
use crate::rng::{self, rng_from};
use crate::semworld::World;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    #[default]
    GradientAscent,
    Momentum {
        beta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextualConfig {
    /// Soft tokens per prototype (L).
    pub len: usize,
    /// Ascent iterations (U).
    pub iters: usize,
    /// Learning rate (η).
    pub eta: f64,
    pub optimizer: Optimizer,
}

impl Default for TextualConfig {
    fn default() -> Self {
        Self {
            len: 2,
            iters: 2000,
            eta: 5e-2,
            optimizer: Optimizer::GradientAscent,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextualPrototype {
    pub soft_prompt: SoftPrompt,
    /// Cached E(soft_prompt).
    pub summary: JointEmbedding,
    pub achieved_cosine: f64,
    pub best_cosine: f64,
    pub source_concept: String,
    pub source_mode: usize,
    pub image_prototype: ImagePrototype,
}

impl TextualPrototype {
    pub fn dim(&self) -> usize {
        self.summary.dim()
    }

    pub fn soft_len(&self) -> usize {
        self.soft_prompt.len()
    }
}

/// Cosine after every iterate, starting with the random initialization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AscentTrace {
    pub cosines: Vec<f64>,
}

impl AscentTrace {
    /// Smallest step-to-step change; negative means the objective dropped.
    pub fn min_increment(&self) -> f64 {
        self.cosines
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

/// ∇_E cos(p, E) = (p̂ − cos·Ê) / ‖E‖
fn cosine_cotangent(target_unit: &DVector<f64>, emb: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
    let n = emb.norm();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    let unit = emb / n;
    let cos = target_unit.dot(&unit);
    Some((cos, (target_unit - unit * cos) / n))
}

pub fn optimize_textual_prototype(
    world: &World,
    image_prototype: &ImagePrototype,
    cfg: &TextualConfig,
    concept: &str,
    mode: usize,
    seed: u64,
) -> Result<(TextualPrototype, AscentTrace)> {
    if cfg.len == 0 {
        return Err(Error::Precondition("soft prompt length L must be >= 1".into()));
    }
    if cfg.eta.is_nan() || cfg.eta <= 0.0 {
        return Err(Error::Precondition("learning rate must be positive".into()));
    }
    let target = &image_prototype.vec;
    if target.len() != world.d() {
        return Err(Error::DimensionMismatch {
            expected: world.d(),
            got: target.len(),
            context: "image prototype",
        });
    }
    let tn = target.norm();
    if tn == 0.0 || !tn.is_finite() {
        return Err(Error::ZeroNorm("image prototype"));
    }
    let target_unit = target / tn;

    let mut rng = rng_from(seed);
    let mut sp = SoftPrompt::new(rng::normal_matrix(&mut rng, cfg.len, world.d()))?;
    let mut velocity = DMatrix::zeros(cfg.len, world.d());
    let mut trace = AscentTrace::default();
    let mut best = f64::NEG_INFINITY;

    for iteration in 0..cfg.iters {
        let emb = encode_text(world, &sp)?;
        let (cos, cot) = cosine_cotangent(&target_unit, &emb.0).ok_or(Error::NonFiniteGradient {
            iteration,
            cosine: trace.cosines.last().copied().unwrap_or(f64::NAN),
        })?;
        trace.cosines.push(cos);
        best = best.max(cos);
        let grad = encode_text_grad(world, &sp, &cot)?;
        if !crate::linalg::all_finite(grad.iter()) {
            return Err(Error::NonFiniteGradient { iteration, cosine: cos });
        }
        let step = match cfg.optimizer {
            Optimizer::GradientAscent => grad * cfg.eta,
            Optimizer::Momentum { beta } => {
                velocity = &velocity * beta + grad;
                &velocity * cfg.eta
            }
        };
        *sp.rows_mut() += step;
    }

    let summary = encode_text(world, &sp)?;
    let achieved = cosine_vec(&summary.0, target).ok_or(Error::ZeroNorm("textual prototype summary"))?;
    trace.cosines.push(achieved);
    best = best.max(achieved);
    Ok((
        TextualPrototype {
            soft_prompt: sp,
            summary,
            achieved_cosine: achieved,
            best_cosine: best,
            source_concept: concept.to_string(),
            source_mode: mode,
            image_prototype: image_prototype.clone(),
        },
        trace,
    ))
}
