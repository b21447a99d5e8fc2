//! The synthetic semantic world: vocabulary with ground-truth directions,
//! multi-mode concepts, prompt sampling and concept-contrastive substitution.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::linalg::{self, matrix_from_rows, matrix_to_rows, orthonormal_columns};
use crate::rng::{self, derive_seed, rng_from};

pub const MAX_PROMPT_LEN: usize = 8;
pub const MIN_CONTEXT_TOKENS: usize = 8;
pub const WORLD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub usize);

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Role {
    Mode { concept: String, mode: usize },
    Replacement { concept: String, mode: usize },
    Context,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabEntry {
    pub token: TokenId,
    pub gt_semantic: DVector<f64>,
    pub role: Role,
}

/// An ordered token sequence of length 1..=8.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<TokenId>", into = "Vec<TokenId>")]
pub struct Prompt {
    tokens: Vec<TokenId>,
}

impl Prompt {
    pub fn new(tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidPrompt("empty prompt".into()));
        }
        if tokens.len() > MAX_PROMPT_LEN {
            return Err(Error::InvalidPrompt(format!(
                "length {} exceeds {MAX_PROMPT_LEN}",
                tokens.len()
            )));
        }
        Ok(Self { tokens })
    }

    pub fn from_ids(ids: &[usize]) -> Result<Self> {
        Self::new(ids.iter().copied().map(TokenId).collect())
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TryFrom<Vec<TokenId>> for Prompt {
    type Error = Error;
    fn try_from(tokens: Vec<TokenId>) -> Result<Self> {
        Prompt::new(tokens)
    }
}

impl From<Prompt> for Vec<TokenId> {
    fn from(p: Prompt) -> Self {
        p.tokens
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.tokens.iter().map(|t| t.0.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// A named concept: disjoint mode-token sets plus a neutral replacement per mode token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub modes: Vec<Vec<TokenId>>,
    pub replacement_map: BTreeMap<TokenId, TokenId>,
}

impl ConceptSpec {
    pub fn new(
        name: impl Into<String>,
        modes: Vec<Vec<TokenId>>,
        replacement_map: BTreeMap<TokenId, TokenId>,
    ) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            modes,
            replacement_map,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("concept {:?}: {msg}", self.name)));
        if self.modes.is_empty() || self.modes.iter().any(Vec::is_empty) {
            return bad("needs at least one non-empty mode".into());
        }
        let mut seen = BTreeMap::new();
        for (m, set) in self.modes.iter().enumerate() {
            for t in set {
                if let Some(prev) = seen.insert(*t, m) {
                    return bad(format!("token {t} appears in modes {prev} and {m}"));
                }
                if !self.replacement_map.contains_key(t) {
                    return bad(format!("mode token {t} has no replacement"));
                }
            }
        }
        for r in self.replacement_map.values() {
            if seen.contains_key(r) {
                return bad(format!("replacement {r} is also a mode token"));
            }
        }
        Ok(())
    }

    pub fn mode_of(&self, token: TokenId) -> Option<usize> {
        self.modes.iter().position(|set| set.contains(&token))
    }

    pub fn mode_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.modes.iter().flatten().copied()
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }
}

/// Name and mode count of a concept laid out by [`build_world`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptLayout {
    pub name: String,
    pub modes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub vocab_size: usize,
    /// Joint embedding dimension.
    pub d: usize,
    /// Image / latent dimension.
    pub image_dim: usize,
    pub sigma_data: f64,
    pub sigma_uncond: f64,
    pub concepts: Vec<ConceptLayout>,
    pub encoder: EncoderConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 64,
            d: 16,
            image_dim: 24,
            sigma_data: 0.05,
            sigma_uncond: 1.0,
            concepts: vec![ConceptLayout {
                name: "hazard".into(),
                modes: 3,
            }],
            encoder: EncoderConfig::default(),
        }
    }
}

impl WorldConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Default world plus a second concept, used by the bank-aggregation runs.
    pub fn two_concepts(seed: u64) -> Self {
        let mut cfg = Self::with_seed(seed);
        cfg.concepts.push(ConceptLayout {
            name: "gore".into(),
            modes: 2,
        });
        cfg
    }

    fn concept_token_count(&self) -> usize {
        self.concepts.iter().map(|c| 2 * c.modes).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d == 0 || self.d > self.image_dim {
            return bad(format!("need 0 < d <= D, got d={} D={}", self.d, self.image_dim));
        }
        if !(self.sigma_data > 0.0 && self.sigma_uncond > 0.0) {
            return bad("sigma values must be positive".into());
        }
        if self.concepts.iter().any(|c| c.modes == 0) {
            return bad("every concept needs at least one mode".into());
        }
        let mut names: Vec<&str> = self.concepts.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.concepts.len() {
            return bad("concept names must be unique".into());
        }
        let concept_tokens = self.concept_token_count();
        if self.vocab_size < concept_tokens + MIN_CONTEXT_TOKENS {
            return bad(format!(
                "vocab_size {} < {} concept tokens + {MIN_CONTEXT_TOKENS} context tokens",
                self.vocab_size, concept_tokens
            ));
        }
        // concept directions are mutually orthonormal and context lives in their complement
        if concept_tokens >= self.d {
            return bad(format!(
                "{concept_tokens} concept tokens leave no context subspace in d={}",
                self.d
            ));
        }
        self.encoder.validate()
    }
}

/// Immutable world: vocabulary, concepts, injection matrix and frozen encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vec<VocabEntry>,
    pub concepts: Vec<ConceptSpec>,
    /// D×d injection with orthonormal columns; conditions map to image means through it.
    pub injection: DMatrix<f64>,
    pub text_encoder: TextEncoder,
    pub image_encoder: ImageEncoder,
}

/// Builds the deterministic world for `config.seed`.
///
/// Token layout: for each concept, for each mode, a mode token immediately
/// followed by its replacement; context tokens fill the rest of the vocabulary.
/// Mode and replacement directions form an orthonormal set, and every context
/// direction is projected onto their orthogonal complement.
pub fn build_world(config: WorldConfig) -> Result<World> {
    config.validate()?;
    let d = config.d;
    let n_concept = config.concept_token_count();

    let mut rng = rng_from(derive_seed(config.seed, &[0]));
    let concept_dirs = orthonormal_columns(rng::normal_matrix(&mut rng, d, n_concept));

    let mut vocab = Vec::with_capacity(config.vocab_size);
    let mut concepts = Vec::with_capacity(config.concepts.len());
    for layout in &config.concepts {
        let mut modes = Vec::with_capacity(layout.modes);
        let mut replacement_map = BTreeMap::new();
        for m in 0..layout.modes {
            let mode_tok = TokenId(vocab.len());
            let repl_tok = TokenId(vocab.len() + 1);
            vocab.push(VocabEntry {
                token: mode_tok,
                gt_semantic: concept_dirs.column(mode_tok.0).into_owned(),
                role: Role::Mode {
                    concept: layout.name.clone(),
                    mode: m,
                },
            });
            vocab.push(VocabEntry {
                token: repl_tok,
                gt_semantic: concept_dirs.column(repl_tok.0).into_owned(),
                role: Role::Replacement {
                    concept: layout.name.clone(),
                    mode: m,
                },
            });
            modes.push(vec![mode_tok]);
            replacement_map.insert(mode_tok, repl_tok);
        }
        concepts.push(ConceptSpec::new(layout.name.clone(), modes, replacement_map)?);
    }

    let mut ctx_rng = rng_from(derive_seed(config.seed, &[1]));
    while vocab.len() < config.vocab_size {
        let mut v = rng::normal_vector(&mut ctx_rng, d);
        for c in concept_dirs.column_iter() {
            let proj = c.dot(&v);
            v.axpy(-proj, &c, 1.0);
        }
        let norm = v.norm();
        if norm < 1e-6 {
            continue;
        }
        vocab.push(VocabEntry {
            token: TokenId(vocab.len()),
            gt_semantic: v / norm,
            role: Role::Context,
        });
    }

    let mut inj_rng = rng_from(derive_seed(config.seed, &[2]));
    let injection = orthonormal_columns(rng::normal_matrix(&mut inj_rng, config.image_dim, d));
    let image_encoder = ImageEncoder::from_injection(&injection);

    let partial = World {
        text_encoder: TextEncoder::identity(d),
        config,
        vocab,
        concepts,
        injection,
        image_encoder,
    };
    let text_encoder = TextEncoder::calibrated(&partial)?;
    Ok(World {
        text_encoder,
        ..partial
    })
}

impl World {
    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn image_dim(&self) -> usize {
        self.config.image_dim
    }

    pub fn entry(&self, token: TokenId) -> Result<&VocabEntry> {
        self.vocab.get(token.0).ok_or(Error::UnknownToken(token.0))
    }

    pub fn semantic(&self, token: TokenId) -> Result<&DVector<f64>> {
        Ok(&self.entry(token)?.gt_semantic)
    }

    pub fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        prompt.tokens().iter().try_for_each(|t| self.entry(*t).map(|_| ()))
    }

    pub fn concept(&self, name: &str) -> Option<&ConceptSpec> {
        self.concepts.iter().find(|c| c.name == name)
    }

    /// The first concept of the world ("hazard" by default).
    pub fn primary_concept(&self) -> &ConceptSpec {
        &self.concepts[0]
    }

    pub fn context_tokens(&self) -> Vec<TokenId> {
        self.vocab
            .iter()
            .filter(|e| e.role == Role::Context)
            .map(|e| e.token)
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = WorldFile::from(self);
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: WorldFile =
            serde_json::from_str(&text).map_err(|e| Error::CorruptFile(format!("world: {e}")))?;
        file.into_world()
    }
}

/// True iff any token of the prompt belongs to a mode set of the concept.
pub fn contains_concept(world: &World, prompt: &Prompt, concept: &ConceptSpec) -> Result<bool> {
    world.check_prompt(prompt)?;
    Ok(prompt.tokens().iter().any(|t| concept.mode_of(*t).is_some()))
}

/// Replaces every mode token by its paired replacement, position for position.
pub fn contrastive_prompt(world: &World, prompt: &Prompt, concept: &ConceptSpec) -> Result<Prompt> {
    world.check_prompt(prompt)?;
    let tokens = prompt
        .tokens()
        .iter()
        .map(|t| concept.replacement_map.get(t).copied().unwrap_or(*t))
        .collect();
    Prompt::new(tokens)
}

fn random_context_prompt(
    rng: &mut rng::Rng,
    contexts: &[TokenId],
    count: usize,
    extra: Option<TokenId>,
) -> Prompt {
    let mut tokens: Vec<TokenId> = sample_indices(rng, contexts.len(), count)
        .into_iter()
        .map(|i| contexts[i])
        .collect();
    if let Some(tok) = extra {
        let pos = rng.random_range(0..=tokens.len());
        tokens.insert(pos, tok);
    }
    Prompt::new(tokens).expect("sampled prompt length is within bounds")
}

/// `n` prompts with one mode token each plus 1–3 distinct context tokens.
/// Modes are assigned round-robin; prompt `i` uses its own derived stream.
pub fn sample_concept_prompts(
    world: &World,
    concept: &ConceptSpec,
    n: usize,
    seed: u64,
) -> Vec<Prompt> {
    let contexts = world.context_tokens();
    (0..n)
        .map(|i| {
            let mut rng = rng_from(derive_seed(seed, &[i as u64]));
            let set = &concept.modes[i % concept.mode_count()];
            let mode_tok = set[rng.random_range(0..set.len())];
            let k = rng.random_range(1..=3);
            random_context_prompt(&mut rng, &contexts, k, Some(mode_tok))
        })
        .collect()
}

/// Concept-free prompts of 2–4 context tokens.
pub fn sample_neutral_prompts(world: &World, n: usize, seed: u64) -> Vec<Prompt> {
    let contexts = world.context_tokens();
    (0..n)
        .map(|i| {
            let mut rng = rng_from(derive_seed(seed, &[i as u64, 0xC0]));
            let k = rng.random_range(2..=4);
            random_context_prompt(&mut rng, &contexts, k, None)
        })
        .collect()
}

/// normalize(Σ gt_semantic(token)). Test and calibration oracle only.
pub fn ground_truth_semantics(world: &World, prompt: &Prompt) -> Result<DVector<f64>> {
    let mut sum = DVector::zeros(world.d());
    for t in prompt.tokens() {
        sum += world.semantic(*t)?;
    }
    let norm = sum.norm();
    if norm < 1e-12 {
        return Err(Error::ZeroNorm("ground-truth semantics"));
    }
    Ok(sum / norm)
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    token: TokenId,
    role: Role,
    semantic: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    format_version: u32,
    config: WorldConfig,
    vocabulary: Vec<VocabRecord>,
    concepts: Vec<ConceptSpec>,
    injection: Vec<Vec<f64>>,
    text_encoder: crate::encoders::TextEncoderRecord,
}

impl From<&World> for WorldFile {
    fn from(w: &World) -> Self {
        Self {
            format_version: WORLD_FORMAT_VERSION,
            config: w.config.clone(),
            vocabulary: w
                .vocab
                .iter()
                .map(|e| VocabRecord {
                    token: e.token,
                    role: e.role.clone(),
                    semantic: linalg::vector_to_vec(&e.gt_semantic),
                })
                .collect(),
            concepts: w.concepts.clone(),
            injection: matrix_to_rows(&w.injection),
            text_encoder: w.text_encoder.to_record(),
        }
    }
}

impl WorldFile {
    fn into_world(self) -> Result<World> {
        if self.format_version != WORLD_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.format_version,
                expected: WORLD_FORMAT_VERSION,
            });
        }
        self.config.validate()?;
        let d = self.config.d;
        let mut vocab = Vec::with_capacity(self.vocabulary.len());
        for (i, rec) in self.vocabulary.into_iter().enumerate() {
            if rec.token.0 != i {
                return Err(Error::CorruptFile(format!("vocabulary entry {i} has id {}", rec.token)));
            }
            if rec.semantic.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: rec.semantic.len(),
                    context: "vocabulary semantic",
                });
            }
            let v = DVector::from_vec(rec.semantic);
            if (v.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvariantViolation {
                    field: format!("vocabulary[{i}].semantic"),
                    detail: format!("norm {} is not 1", v.norm()),
                });
            }
            vocab.push(VocabEntry {
                token: rec.token,
                gt_semantic: v,
                role: rec.role,
            });
        }
        for c in &self.concepts {
            c.validate()?;
        }
        let injection = matrix_from_rows(&self.injection, "injection")?;
        if injection.shape() != (self.config.image_dim, d) {
            return Err(Error::CorruptFile(format!(
                "injection shape {:?}, expected ({}, {d})",
                injection.shape(),
                self.config.image_dim
            )));
        }
        let text_encoder = TextEncoder::from_record(self.text_encoder, d)?;
        Ok(World {
            image_encoder: ImageEncoder::from_injection(&injection),
            config: self.config,
            vocab,
            concepts: self.concepts,
            injection,
            text_encoder,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        build_world(WorldConfig::default()).unwrap()
    }

    #[test]
    fn same_seed_gives_identical_world() {
        assert_eq!(world(), world());
        let other = build_world(WorldConfig::with_seed(1)).unwrap();
        assert_ne!(world().vocab, other.vocab);
    }

    #[test]
    fn default_world_has_three_mode_hazard() {
        let w = world();
        let c = w.primary_concept();
        assert_eq!(c.name, "hazard");
        let modes = w.vocab.iter().filter(|e| matches!(e.role, Role::Mode { .. })).count();
        let repls = w
            .vocab
            .iter()
            .filter(|e| matches!(e.role, Role::Replacement { .. }))
            .count();
        assert_eq!((modes, repls), (3, 3));
        assert_eq!(w.vocab.len(), 64);
    }

    #[test]
    fn rejects_d_larger_than_image_dim() {
        let cfg = WorldConfig {
            d: 30,
            ..WorldConfig::default()
        };
        assert!(matches!(build_world(cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn semantics_are_unit_and_contexts_orthogonal_to_concepts() {
        let w = world();
        for e in &w.vocab {
            assert!((e.gt_semantic.norm() - 1.0).abs() < 1e-9);
        }
        let concept_tokens: Vec<_> = w.vocab.iter().filter(|e| e.role != Role::Context).collect();
        for ctx in w.vocab.iter().filter(|e| e.role == Role::Context) {
            for c in &concept_tokens {
                assert!(ctx.gt_semantic.dot(&c.gt_semantic).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn contains_and_contrastive() {
        let w = world();
        let c = w.primary_concept();
        let ctx = w.context_tokens();
        let m = |i: usize| c.modes[i][0];
        let r = |i: usize| c.replacement_map[&m(i)];

        let p = Prompt::new(vec![ctx[0], m(0)]).unwrap();
        assert!(contains_concept(&w, &p, c).unwrap());
        let p = Prompt::new(vec![ctx[0], ctx[1]]).unwrap();
        assert!(!contains_concept(&w, &p, c).unwrap());
        let p = Prompt::new(vec![r(0)]).unwrap();
        assert!(!contains_concept(&w, &p, c).unwrap());

        let p = Prompt::new(vec![ctx[2], m(1), ctx[0]]).unwrap();
        let q = contrastive_prompt(&w, &p, c).unwrap();
        assert_eq!(q.tokens(), &[ctx[2], r(1), ctx[0]]);

        let p = Prompt::new(vec![m(0), m(2)]).unwrap();
        assert_eq!(contrastive_prompt(&w, &p, c).unwrap().tokens(), &[r(0), r(2)]);

        let p = Prompt::new(vec![ctx[3], ctx[4]]).unwrap();
        assert_eq!(contrastive_prompt(&w, &p, c).unwrap(), p);
    }

    #[test]
    fn unknown_token_is_rejected() {
        let w = world();
        let p = Prompt::from_ids(&[999]).unwrap();
        assert!(matches!(
            contains_concept(&w, &p, w.primary_concept()),
            Err(Error::UnknownToken(999))
        ));
        assert!(contrastive_prompt(&w, &p, w.primary_concept()).is_err());
    }

    #[test]
    fn prompt_length_bounds() {
        assert!(Prompt::new(vec![]).is_err());
        assert!(Prompt::from_ids(&[1; 9]).is_err());
        assert!(Prompt::from_ids(&[1; 8]).is_ok());
    }

    #[test]
    fn concept_prompts_round_robin() {
        let w = world();
        let c = w.primary_concept();
        let ps = sample_concept_prompts(&w, c, 6, 3);
        let mut counts = [0; 3];
        for p in &ps {
            assert!(contains_concept(&w, p, c).unwrap());
            assert!((2..=4).contains(&p.len()));
            let modes: Vec<_> = p.tokens().iter().filter_map(|t| c.mode_of(*t)).collect();
            assert_eq!(modes.len(), 1);
            counts[modes[0]] += 1;
        }
        assert_eq!(counts, [2, 2, 2]);
        assert_eq!(sample_concept_prompts(&w, c, 40, 9).len(), 40);
        assert_eq!(ps, sample_concept_prompts(&w, c, 6, 3));
    }

    #[test]
    fn ground_truth_semantics_cases() {
        let w = world();
        let v = w.context_tokens()[0];
        let g = w.semantic(v).unwrap().clone();
        let single = ground_truth_semantics(&w, &Prompt::new(vec![v]).unwrap()).unwrap();
        assert!((single - &g).norm() < 1e-12);
        let double = ground_truth_semantics(&w, &Prompt::new(vec![v, v]).unwrap()).unwrap();
        assert!((double - &g).norm() < 1e-12);

        // cancellation: overwrite one token's direction with the negation of another
        let mut w2 = w.clone();
        let u = w.context_tokens()[1];
        w2.vocab[u.0].gt_semantic = -g;
        let err = ground_truth_semantics(&w2, &Prompt::new(vec![v, u]).unwrap());
        assert!(matches!(err, Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn world_file_round_trip() {
        let w = build_world(WorldConfig::two_concepts(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.json");
        w.save(&path).unwrap();
        assert_eq!(World::load(&path).unwrap(), w);
    }
}
