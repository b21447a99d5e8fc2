//! Diffusion side: noise schedule, analytic Gaussian denoiser, classifier-free
//! guidance with an optional negative prototype term, and reverse sampling.
//!
//! Conditional data for a condition with summary embedding `e` is
//! `N(A·e, sigma_data² I)`; unconditional data is `N(0, sigma_uncond² I)`.
//! Under `z_t = √ᾱ_t x₀ + √(1−ᾱ_t) ε` both have closed-form ε-predictions.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_prompt, encode_text, JointEmbedding, SoftPrompt};
use crate::error::{Error, Result};
use crate::rng::{self, rng_from};
use crate::semworld::{Prompt, World};

/// Selection threshold from `erasure::calibrate_tau` on the default world (seed 0,
/// 200 held-out prompts gives 0.2725), rounded down.
pub const DEFAULT_TAU: f64 = 0.27;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;
pub const DEFAULT_STEPS: usize = 30;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    /// Per-step values; index `t - 1` holds step `t`.
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub sigmas: Vec<f64>,
}

/// Linear beta schedule on `[1e-4, 0.02]·(1000/T)`, clamped below 1.
///
/// For `T = 1` the single beta is the (clamped) end value so the start state is
/// near-pure noise.
pub fn make_schedule(steps: usize, stochastic: bool) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Precondition("schedule needs T >= 1".into()));
    }
    let scale = 1000.0 / steps as f64;
    let (lo, hi) = (1e-4 * scale, 0.02 * scale);
    let betas: Vec<f64> = if steps == 1 {
        vec![hi.min(MAX_BETA)]
    } else {
        (0..steps)
            .map(|i| (lo + (hi - lo) * i as f64 / (steps - 1) as f64).min(MAX_BETA))
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sigmas = betas
        .iter()
        .map(|b| if stochastic { b.sqrt() } else { 0.0 })
        .collect();
    Ok(NoiseSchedule {
        steps,
        betas,
        alphas,
        alpha_bars,
        sigmas,
    })
}

impl NoiseSchedule {
    /// ᾱ_t with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn is_stochastic(&self) -> bool {
        self.sigmas.iter().any(|s| *s > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Deterministic DDIM update (x₀ re-projection, no injected noise).
    #[default]
    Ddim,
    /// The ancestral update `z_{t−1} = (z_t − (1−α_t)/√(1−ᾱ_t)·ε)/√α_t + σ_t·n`.
    Ancestral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub steps: usize,
    /// σ_t = √β_t for the ancestral sampler when set, 0 otherwise.
    pub stochastic: bool,
    pub sampler: SamplerKind,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_GUIDANCE_SCALE,
            beta: DEFAULT_GUIDANCE_SCALE,
            tau: DEFAULT_TAU,
            steps: DEFAULT_STEPS,
            stochastic: true,
            sampler: SamplerKind::Ddim,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Precondition("guidance scales must be >= 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::Precondition(format!("tau {} outside [-1, 1]", self.tau)));
        }
        if self.steps == 0 {
            return Err(Error::Precondition("T must be >= 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.stochastic && self.sampler == SamplerKind::Ancestral)
    }

    /// Same config with the negative term disabled.
    pub fn without_erasure(&self) -> Self {
        Self {
            beta: 0.0,
            ..self.clone()
        }
    }
}

/// A conditioning input before resolution through the text encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Hard(Prompt),
    Soft(SoftPrompt),
}

impl Condition {
    pub fn resolve(&self, world: &World) -> Result<ResolvedCondition> {
        let summary = match self {
            Condition::Hard(p) => encode_prompt(world, p)?,
            Condition::Soft(sp) => encode_text(world, sp)?,
        };
        ResolvedCondition::from_summary(world, summary)
    }
}

/// Summary embedding and the image-space mean μ̂ = A·E(condition).
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedCondition {
    pub summary: JointEmbedding,
    pub mean: DVector<f64>,
}

impl ResolvedCondition {
    pub fn from_summary(world: &World, summary: JointEmbedding) -> Result<Self> {
        if summary.dim() != world.d() {
            return Err(Error::DimensionMismatch {
                expected: world.d(),
                got: summary.dim(),
                context: "condition summary",
            });
        }
        let mean = &world.injection * &summary.0;
        if !crate::linalg::all_finite(mean.iter()) {
            return Err(Error::Precondition("condition mean is not finite".into()));
        }
        Ok(Self { summary, mean })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: DVector<f64>,
    pub t: usize,
}

/// ε̂ for data `N(mean, var·I)` at step `t`.
pub fn gaussian_epsilon(
    z: &DVector<f64>,
    mean: Option<&DVector<f64>>,
    var: f64,
    alpha_bar: f64,
) -> DVector<f64> {
    let denom = 1.0 - alpha_bar + alpha_bar * var;
    let coeff = (1.0 - alpha_bar).sqrt() / denom;
    match mean {
        Some(mu) => (z - mu * alpha_bar.sqrt()) * coeff,
        None => z * coeff,
    }
}

pub fn denoise_cond(
    world: &World,
    state: &LatentState,
    cond: &ResolvedCondition,
    schedule: &NoiseSchedule,
) -> DVector<f64> {
    let sd = world.config.sigma_data;
    gaussian_epsilon(&state.z, Some(&cond.mean), sd * sd, schedule.alpha_bar(state.t))
}

pub fn denoise_uncond(world: &World, state: &LatentState, schedule: &NoiseSchedule) -> DVector<f64> {
    let su = world.config.sigma_uncond;
    gaussian_epsilon(&state.z, None, su * su, schedule.alpha_bar(state.t))
}

/// Classifier-free guidance ε_u + α(ε_c − ε_u), evaluated as α·ε_c + (1 − α)·ε_u
/// so that α = 1 returns ε_c bit for bit.
pub fn cfg_epsilon(eps_u: &DVector<f64>, eps_c: &DVector<f64>, alpha: f64) -> DVector<f64> {
    eps_c * alpha + eps_u * (1.0 - alpha)
}

/// ε̃ = ε_u + α(ε_c − ε_u) − β(ε_p − ε_u); the β term is dropped when `eps_p` is absent.
pub fn combine_guidance(
    eps_u: &DVector<f64>,
    eps_c: &DVector<f64>,
    eps_p: Option<&DVector<f64>>,
    alpha: f64,
    beta: f64,
) -> DVector<f64> {
    let mut out = cfg_epsilon(eps_u, eps_c, alpha);
    if let Some(p) = eps_p {
        out -= (p - eps_u) * beta;
    }
    out
}

pub fn guided_epsilon(
    world: &World,
    state: &LatentState,
    cond: &ResolvedCondition,
    proto: Option<&ResolvedCondition>,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> DVector<f64> {
    let eps_u = denoise_uncond(world, state, schedule);
    let eps_c = denoise_cond(world, state, cond, schedule);
    let eps_p = proto.map(|p| denoise_cond(world, state, p, schedule));
    combine_guidance(&eps_u, &eps_c, eps_p.as_ref(), cfg.alpha, cfg.beta)
}

/// Ancestral reverse update from `t` to `t − 1`.
pub fn reverse_step(
    state: &LatentState,
    eps: &DVector<f64>,
    schedule: &NoiseSchedule,
    noise: &DVector<f64>,
) -> Result<LatentState> {
    let t = state.t;
    if t == 0 {
        return Err(Error::StepUnderflow);
    }
    let a = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let mut z = (&state.z - eps * ((1.0 - a) / (1.0 - ab).sqrt())) / a.sqrt();
    let sigma = schedule.sigma(t);
    if sigma != 0.0 {
        z.axpy(sigma, noise, 1.0);
    }
    Ok(LatentState { z, t: t - 1 })
}

/// Inverse of a noise-free [`reverse_step`] for fixed `eps`.
pub fn undo_reverse_step(
    state: &LatentState,
    eps: &DVector<f64>,
    schedule: &NoiseSchedule,
) -> LatentState {
    let t = state.t + 1;
    let a = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let z = &state.z * a.sqrt() + eps * ((1.0 - a) / (1.0 - ab).sqrt());
    LatentState { z, t }
}

/// Deterministic DDIM update from `t` to `t − 1`.
pub fn ddim_step(state: &LatentState, eps: &DVector<f64>, schedule: &NoiseSchedule) -> Result<LatentState> {
    let t = state.t;
    if t == 0 {
        return Err(Error::StepUnderflow);
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let x0 = (&state.z - eps * (1.0 - ab).sqrt()) / ab.sqrt();
    let z = x0 * ab_prev.sqrt() + eps * (1.0 - ab_prev).sqrt();
    Ok(LatentState { z, t: t - 1 })
}

/// Full reverse rollout from `z_T ~ N(0, I)`; the decoder is the identity.
pub fn sample(
    world: &World,
    cond: &ResolvedCondition,
    proto: Option<&ResolvedCondition>,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<DVector<f64>> {
    let dim = world.image_dim();
    let mut rng = rng_from(seed);
    let mut state = LatentState {
        z: rng::normal_vector(&mut rng, dim),
        t: schedule.steps,
    };
    let zero = DVector::zeros(dim);
    while state.t > 0 {
        let eps = guided_epsilon(world, &state, cond, proto, cfg, schedule);
        state = match cfg.sampler {
            SamplerKind::Ddim => ddim_step(&state, &eps, schedule)?,
            SamplerKind::Ancestral => {
                if schedule.sigma(state.t) != 0.0 {
                    let noise = rng::normal_vector(&mut rng, dim);
                    reverse_step(&state, &eps, schedule, &noise)?
                } else {
                    reverse_step(&state, &eps, schedule, &zero)?
                }
            }
        };
    }
    if !crate::linalg::all_finite(state.z.iter()) {
        return Err(Error::Precondition("sampler diverged to non-finite values".into()));
    }
    Ok(state.z)
}

/// Unconditional rollout: ε̃ = ε_u at every step.
pub fn sample_unconditional(
    world: &World,
    sampler: SamplerKind,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<DVector<f64>> {
    let zero = ResolvedCondition {
        summary: JointEmbedding(DVector::zeros(world.d())),
        mean: DVector::zeros(world.image_dim()),
    };
    // α = 0 drops the conditional branch entirely.
    let cfg = GuidanceConfig {
        alpha: 0.0,
        beta: 0.0,
        sampler,
        ..GuidanceConfig::default()
    };
    sample(world, &zero, None, &cfg, schedule, seed)
}
