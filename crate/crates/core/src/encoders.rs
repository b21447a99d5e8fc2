//! Toy joint text/image embedding space.
//!
//! The text encoder mixes each token row with the sequence mean through a tanh
//! layer and projects the pooled summary into the joint space:
//!
//! ```text
//! y_i = tanh(W1 e_i + W2 mean(e))      summary = W3 · pool(y)
//! ```
//!
//! `pool` is the row mean by default (soft prompts have no terminator token),
//! or the last row. The image encoder is the transpose of the world's
//! injection matrix, so it inverts the injection exactly on the joint space.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, matrix_from_rows, matrix_to_rows};
use crate::rng::{self, derive_seed, rng_from};
use crate::semworld::{ground_truth_semantics, Prompt, World};

/// Mean cosine between hard-prompt embeddings and their ground truth that the
/// frozen text encoder must reach.
pub const ALIGNMENT_FLOOR: f64 = 0.8;
const CALIBRATION_PROMPTS: usize = 100;
const CALIBRATION_ATTEMPTS: u64 = 32;

/// A vector in the joint embedding space. Not normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding(pub DVector<f64>);

impl JointEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

impl From<DVector<f64>> for JointEmbedding {
    fn from(v: DVector<f64>) -> Self {
        Self(v)
    }
}

/// L×d matrix of token embeddings, one row per (soft) token.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    rows: DMatrix<f64>,
}

impl SoftPrompt {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::Precondition("soft prompt needs L >= 1".into()));
        }
        if !all_finite(rows.iter()) {
            return Err(Error::Precondition("soft prompt has non-finite entries".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub(crate) fn rows_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SummaryMode {
    #[default]
    Mean,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Diagonal gain of the per-token mixing matrix W1.
    pub token_gain: f64,
    /// Diagonal gain of the sequence-mean mixing matrix W2.
    pub context_gain: f64,
    /// Scale of the seeded Gaussian perturbation added to W1, W2, W3.
    pub perturbation: f64,
    pub summary: SummaryMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            token_gain: 0.5,
            context_gain: 0.2,
            perturbation: 0.05,
            summary: SummaryMode::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.token_gain, self.context_gain, self.perturbation]
            .iter()
            .all(|x| x.is_finite() && *x >= 0.0);
        if !ok || self.token_gain + self.context_gain <= 0.0 {
            return Err(Error::InvalidConfig("encoder gains must be finite, non-negative, and not all zero".into()));
        }
        Ok(())
    }
}

/// Frozen text encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    w1: DMatrix<f64>,
    w2: DMatrix<f64>,
    w3: DMatrix<f64>,
    summary: SummaryMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEncoderRecord {
    pub w1: Vec<Vec<f64>>,
    pub w2: Vec<Vec<f64>>,
    pub w3: Vec<Vec<f64>>,
    pub summary: SummaryMode,
}

struct Forward {
    /// tanh activations, L×d
    y: DMatrix<f64>,
}

impl TextEncoder {
    pub(crate) fn identity(d: usize) -> Self {
        Self {
            w1: DMatrix::identity(d, d),
            w2: DMatrix::zeros(d, d),
            w3: DMatrix::identity(d, d),
            summary: SummaryMode::Mean,
        }
    }

    pub fn from_matrices(
        w1: DMatrix<f64>,
        w2: DMatrix<f64>,
        w3: DMatrix<f64>,
        summary: SummaryMode,
    ) -> Result<Self> {
        let d = w1.nrows();
        for (m, name) in [(&w1, "w1"), (&w2, "w2"), (&w3, "w3")] {
            if m.shape() != (d, d) {
                return Err(Error::CorruptFile(format!("{name} has shape {:?}", m.shape())));
            }
            if !all_finite(m.iter()) {
                return Err(Error::CorruptFile(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self { w1, w2, w3, summary })
    }

    /// Draws near-identity parameters from the world seed, re-drawing until the
    /// hard-prompt alignment check passes.
    pub(crate) fn calibrated(world: &World) -> Result<Self> {
        let cfg = &world.config.encoder;
        let d = world.d();
        let scale = cfg.perturbation / (d as f64).sqrt();
        let mut best = 0.0;
        for attempt in 0..CALIBRATION_ATTEMPTS {
            let mut rng = rng_from(derive_seed(world.config.seed, &[3, attempt]));
            let eye = DMatrix::<f64>::identity(d, d);
            let w1 = &eye * cfg.token_gain + rng::normal_matrix(&mut rng, d, d) * scale;
            let w2 = &eye * cfg.context_gain + rng::normal_matrix(&mut rng, d, d) * scale;
            let w3 = &eye + rng::normal_matrix(&mut rng, d, d) * scale;
            let enc = Self {
                w1,
                w2,
                w3,
                summary: cfg.summary,
            };
            let score = hard_prompt_alignment(world, &enc, derive_seed(world.config.seed, &[4]))?;
            if score >= ALIGNMENT_FLOOR {
                return Ok(enc);
            }
            best = f64::max(best, score);
        }
        Err(Error::InvalidConfig(format!(
            "text encoder calibration failed: best mean alignment {best:.3} < {ALIGNMENT_FLOOR}"
        )))
    }

    pub fn to_record(&self) -> TextEncoderRecord {
        TextEncoderRecord {
            w1: matrix_to_rows(&self.w1),
            w2: matrix_to_rows(&self.w2),
            w3: matrix_to_rows(&self.w3),
            summary: self.summary,
        }
    }

    pub fn from_record(rec: TextEncoderRecord, d: usize) -> Result<Self> {
        let enc = Self::from_matrices(
            matrix_from_rows(&rec.w1, "w1")?,
            matrix_from_rows(&rec.w2, "w2")?,
            matrix_from_rows(&rec.w3, "w3")?,
            rec.summary,
        )?;
        if enc.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: enc.dim(),
                context: "text encoder",
            });
        }
        Ok(enc)
    }

    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn summary_mode(&self) -> SummaryMode {
        self.summary
    }

    pub fn with_summary(mut self, summary: SummaryMode) -> Self {
        self.summary = summary;
        self
    }

    fn pool_weights(&self, len: usize) -> Vec<f64> {
        match self.summary {
            SummaryMode::Mean => vec![1.0 / len as f64; len],
            SummaryMode::Last => {
                let mut w = vec![0.0; len];
                w[len - 1] = 1.0;
                w
            }
        }
    }

    fn forward(&self, sp: &SoftPrompt) -> Forward {
        let e = sp.rows();
        let len = e.nrows();
        let mean: DVector<f64> = e.row_mean().transpose();
        let ctx = &self.w2 * mean;
        let mut y = e * self.w1.transpose();
        for mut row in y.row_iter_mut() {
            for (v, c) in row.iter_mut().zip(ctx.iter()) {
                *v = (*v + c).tanh();
            }
        }
        debug_assert_eq!(y.nrows(), len);
        Forward { y }
    }

    /// EoT-style summary embedding of a (soft) prompt.
    pub fn encode(&self, sp: &SoftPrompt) -> Result<JointEmbedding> {
        self.check_dim(sp)?;
        let fwd = self.forward(sp);
        let weights = self.pool_weights(sp.len());
        let mut pooled = DVector::zeros(self.dim());
        for (row, w) in fwd.y.row_iter().zip(&weights) {
            pooled.axpy(*w, &row.transpose(), 1.0);
        }
        Ok(JointEmbedding(&self.w3 * pooled))
    }

    /// Gradient of ⟨encode(sp), cotangent⟩ with respect to the rows of `sp`.
    pub fn grad(&self, sp: &SoftPrompt, cotangent: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(sp)?;
        if cotangent.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: cotangent.len(),
                context: "cotangent",
            });
        }
        let len = sp.len();
        let fwd = self.forward(sp);
        let weights = self.pool_weights(len);
        let pooled_grad = self.w3.transpose() * cotangent;

        // d/d(pre_i) = w_i * (W3ᵀ c) ⊙ (1 − y_i²)
        let mut g_pre = DMatrix::zeros(len, self.dim());
        for i in 0..len {
            for j in 0..self.dim() {
                let y = fwd.y[(i, j)];
                g_pre[(i, j)] = weights[i] * pooled_grad[j] * (1.0 - y * y);
            }
        }
        // pre_i = W1 e_i + W2 mean(e)
        let mut g_e = &g_pre * &self.w1;
        let shared = (g_pre.row_sum() * &self.w2) / len as f64;
        for mut row in g_e.row_iter_mut() {
            row += &shared;
        }
        Ok(g_e)
    }

    fn check_dim(&self, sp: &SoftPrompt) -> Result<()> {
        if sp.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: sp.dim(),
                context: "soft prompt width",
            });
        }
        Ok(())
    }
}

/// W_I = Aᵀ for the world's injection A.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    weights: DMatrix<f64>,
}

impl ImageEncoder {
    pub fn from_injection(injection: &DMatrix<f64>) -> Self {
        Self {
            weights: injection.transpose(),
        }
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn encode(&self, x: &DVector<f64>) -> Result<JointEmbedding> {
        if x.len() != self.weights.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.ncols(),
                got: x.len(),
                context: "image",
            });
        }
        Ok(JointEmbedding(&self.weights * x))
    }
}

pub fn encode_image(world: &World, x: &DVector<f64>) -> Result<JointEmbedding> {
    world.image_encoder.encode(x)
}

/// Identity lift of each token's ground-truth direction into a row.
pub fn embed_tokens(world: &World, prompt: &Prompt) -> Result<SoftPrompt> {
    let d = world.d();
    let mut rows = DMatrix::zeros(prompt.len(), d);
    for (i, t) in prompt.tokens().iter().enumerate() {
        rows.set_row(i, &world.semantic(*t)?.transpose());
    }
    SoftPrompt::new(rows)
}

pub fn encode_text(world: &World, sp: &SoftPrompt) -> Result<JointEmbedding> {
    world.text_encoder.encode(sp)
}

pub fn encode_text_grad(
    world: &World,
    sp: &SoftPrompt,
    cotangent: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    world.text_encoder.grad(sp, cotangent)
}

/// E(c) for a hard prompt.
pub fn encode_prompt(world: &World, prompt: &Prompt) -> Result<JointEmbedding> {
    encode_text(world, &embed_tokens(world, prompt)?)
}

/// Cosine on raw vectors; `None` when either side has zero norm.
pub fn cosine_vec(a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    Some((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine(a: &JointEmbedding, b: &JointEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
            context: "cosine",
        });
    }
    cosine_vec(&a.0, &b.0).ok_or(Error::ZeroNorm("cosine"))
}

/// Mean cos(E(c), ground truth of c) over random vocabulary prompts.
fn hard_prompt_alignment(world: &World, enc: &TextEncoder, seed: u64) -> Result<f64> {
    use rand::Rng as _;
    let mut rng = rng_from(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    while count < CALIBRATION_PROMPTS {
        let len = rng.random_range(1..=4);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..world.vocab.len())).collect();
        let prompt = Prompt::from_ids(&ids)?;
        let Ok(gt) = ground_truth_semantics(world, &prompt) else {
            continue;
        };
        let emb = enc.encode(&embed_tokens(world, &prompt)?)?;
        if let Some(c) = cosine_vec(&emb.0, &gt) {
            total += c;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Public form of the encoder alignment check used at world build.
pub fn text_alignment_score(world: &World, seed: u64) -> Result<f64> {
    hard_prompt_alignment(world, &world.text_encoder, seed)
}
