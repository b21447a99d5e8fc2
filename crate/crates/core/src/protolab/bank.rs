//! Prototype banks and their versioned JSON file format (`bank.json`).
//!
//! A bank file holds either image prototypes only (the intermediate output of
//! extraction) or complete textual prototypes. Floats are written with the
//! shortest representation that parses back to the identical `f64`.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{ImagePrototype, TextualPrototype};
use crate::encoders::{cosine_vec, JointEmbedding, SoftPrompt};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, matrix_from_rows, matrix_to_rows, vector_to_vec};
use crate::semworld::World;

pub const BANK_FORMAT_VERSION: u32 = 1;
/// Stored achieved cosines must match their recomputation to this tolerance.
pub const COSINE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub world_seed: u64,
    pub entries: Vec<TextualPrototype>,
}

/// Aggregates per-concept prototype groups into one flat bank.
pub fn build_bank(world_seed: u64, groups: Vec<(String, Vec<TextualPrototype>)>) -> Result<PrototypeBank> {
    let mut entries = Vec::new();
    for (concept, protos) in groups {
        for mut p in protos {
            p.source_concept = concept.clone();
            entries.push(p);
        }
    }
    let bank = PrototypeBank { world_seed, entries };
    bank.check_structure()?;
    Ok(bank)
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, TextualPrototype::dim)
    }

    pub fn soft_len(&self) -> usize {
        self.entries.first().map_or(0, TextualPrototype::soft_len)
    }

    /// Non-empty, unique (concept, mode) keys, one shared d and L.
    fn check_structure(&self) -> Result<()> {
        let first = self.entries.first().ok_or(Error::EmptyBank)?;
        let (d, len) = (first.dim(), first.soft_len());
        let mut keys = BTreeSet::new();
        for p in &self.entries {
            for (got, context) in [
                (p.dim(), "bank entry summary"),
                (p.soft_prompt.dim(), "bank entry soft prompt width"),
                (p.image_prototype.vec.len(), "bank entry image prototype"),
            ] {
                if got != d {
                    return Err(Error::DimensionMismatch { expected: d, got, context });
                }
            }
            if p.soft_len() != len {
                return Err(Error::DimensionMismatch {
                    expected: len,
                    got: p.soft_len(),
                    context: "bank entry soft prompt length",
                });
            }
            if !keys.insert((p.source_concept.clone(), p.source_mode)) {
                return Err(Error::DuplicateEntry {
                    concept: p.source_concept.clone(),
                    mode: p.source_mode,
                });
            }
        }
        Ok(())
    }

    /// Concatenates two banks; keys must stay unique.
    pub fn merge(&self, other: &PrototypeBank) -> Result<PrototypeBank> {
        if self.world_seed != other.world_seed {
            return Err(Error::Precondition(format!(
                "cannot merge banks from world seeds {} and {}",
                self.world_seed, other.world_seed
            )));
        }
        let bank = PrototypeBank {
            world_seed: self.world_seed,
            entries: self.entries.iter().chain(&other.entries).cloned().collect(),
        };
        bank.check_structure()?;
        Ok(bank)
    }

    /// Checks cached summaries against the world's text encoder.
    pub fn validate_against(&self, world: &World) -> Result<()> {
        if self.world_seed != world.config.seed {
            return Err(Error::InvariantViolation {
                field: "world_seed".into(),
                detail: format!("bank {} vs world {}", self.world_seed, world.config.seed),
            });
        }
        if self.dim() != world.d() {
            return Err(Error::DimensionMismatch {
                expected: world.d(),
                got: self.dim(),
                context: "bank vs world",
            });
        }
        for (i, p) in self.entries.iter().enumerate() {
            let fresh = world.text_encoder.encode(&p.soft_prompt)?;
            let err = (&fresh.0 - &p.summary.0).amax();
            if err > COSINE_TOLERANCE {
                return Err(Error::InvariantViolation {
                    field: format!("entries[{i}].summary"),
                    detail: format!("differs from E(soft_prompt) by {err:e}"),
                });
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> BankFile {
        BankFile {
            format_version: BANK_FORMAT_VERSION,
            world_seed: self.world_seed,
            d: self.dim(),
            soft_len: Some(self.soft_len()),
            entries: self
                .entries
                .iter()
                .map(|p| BankEntryRecord {
                    concept: p.source_concept.clone(),
                    mode_index: p.source_mode,
                    cluster_size: p.image_prototype.cluster_size,
                    inertia: p.image_prototype.inertia,
                    achieved_cosine: Some(p.achieved_cosine),
                    best_cosine: Some(p.best_cosine),
                    soft_prompt: Some(matrix_to_rows(p.soft_prompt.rows())),
                    summary: Some(vector_to_vec(&p.summary.0)),
                    image_prototype: vector_to_vec(&p.image_prototype.vec),
                })
                .collect(),
        }
    }
}

pub fn save_bank(bank: &PrototypeBank, path: impl AsRef<Path>) -> Result<()> {
    write_json(&bank.to_file(), path)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<PrototypeBank> {
    read_bank_file(path)?.into_bank()
}

/// Image prototypes of one or more concepts, before textual transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBank {
    pub world_seed: u64,
    pub entries: Vec<ImageBankEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBankEntry {
    pub concept: String,
    pub mode_index: usize,
    pub prototype: ImagePrototype,
}

impl ImageBank {
    pub fn to_file(&self) -> BankFile {
        BankFile {
            format_version: BANK_FORMAT_VERSION,
            world_seed: self.world_seed,
            d: self.entries.first().map_or(0, |e| e.prototype.vec.len()),
            soft_len: None,
            entries: self
                .entries
                .iter()
                .map(|e| BankEntryRecord {
                    concept: e.concept.clone(),
                    mode_index: e.mode_index,
                    cluster_size: e.prototype.cluster_size,
                    inertia: e.prototype.inertia,
                    achieved_cosine: None,
                    best_cosine: None,
                    soft_prompt: None,
                    summary: None,
                    image_prototype: vector_to_vec(&e.prototype.vec),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(&self.to_file(), path)
    }

    /// Reads the image-prototype part of any bank file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = read_bank_file(path)?;
        file.check_header()?;
        let entries = file
            .entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let vec = checked_vector(e.image_prototype, file.d, &format!("entries[{i}].image_prototype"))?;
                Ok(ImageBankEntry {
                    concept: e.concept,
                    mode_index: e.mode_index,
                    prototype: ImagePrototype {
                        vec,
                        cluster_size: e.cluster_size,
                        inertia: e.inertia,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if entries.is_empty() {
            return Err(Error::EmptyBank);
        }
        Ok(Self {
            world_seed: file.world_seed,
            entries,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntryRecord {
    pub concept: String,
    pub mode_index: usize,
    pub cluster_size: usize,
    #[serde(default)]
    pub inertia: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub achieved_cosine: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_cosine: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_prompt: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<Vec<f64>>,
    pub image_prototype: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankFile {
    pub format_version: u32,
    pub world_seed: u64,
    pub d: usize,
    #[serde(rename = "L", default)]
    pub soft_len: Option<usize>,
    pub entries: Vec<BankEntryRecord>,
}

fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_bank_file(path: impl AsRef<Path>) -> Result<BankFile> {
    let text = std::fs::read_to_string(path)?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CorruptFile(format!("bank: {e}")))?;
    // check the version before the schema so old/new layouts report the right error
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::CorruptFile("bank: missing format_version".into()))?;
    if version != u64::from(BANK_FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: BANK_FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::CorruptFile(format!("bank: {e}")))
}

fn checked_vector(v: Vec<f64>, d: usize, field: &str) -> Result<DVector<f64>> {
    if v.len() != d {
        return Err(Error::InvariantViolation {
            field: field.to_string(),
            detail: format!("length {} != d = {d}", v.len()),
        });
    }
    if !all_finite(&v) {
        return Err(Error::InvariantViolation {
            field: field.to_string(),
            detail: "non-finite value".into(),
        });
    }
    Ok(DVector::from_vec(v))
}

impl BankFile {
    fn check_header(&self) -> Result<()> {
        if self.format_version != BANK_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.format_version,
                expected: BANK_FORMAT_VERSION,
            });
        }
        if self.entries.is_empty() {
            return Err(Error::EmptyBank);
        }
        Ok(())
    }

    pub fn into_bank(self) -> Result<PrototypeBank> {
        self.check_header()?;
        let d = self.d;
        let len = self.soft_len.ok_or_else(|| Error::InvariantViolation {
            field: "L".into(),
            detail: "bank holds image prototypes only; run optimize first".into(),
        })?;
        let missing = |i: usize, f: &str| Error::InvariantViolation {
            field: format!("entries[{i}].{f}"),
            detail: "missing".into(),
        };
        let mut entries = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.into_iter().enumerate() {
            let rows = e.soft_prompt.ok_or_else(|| missing(i, "soft_prompt"))?;
            let rows = matrix_from_rows(&rows, "soft_prompt")?;
            if rows.shape() != (len, d) {
                return Err(Error::InvariantViolation {
                    field: format!("entries[{i}].soft_prompt"),
                    detail: format!("shape {:?}, expected ({len}, {d})", rows.shape()),
                });
            }
            let soft_prompt = SoftPrompt::new(rows).map_err(|err| Error::InvariantViolation {
                field: format!("entries[{i}].soft_prompt"),
                detail: err.to_string(),
            })?;
            let summary = checked_vector(
                e.summary.ok_or_else(|| missing(i, "summary"))?,
                d,
                &format!("entries[{i}].summary"),
            )?;
            let image = checked_vector(e.image_prototype, d, &format!("entries[{i}].image_prototype"))?;
            let achieved = e.achieved_cosine.ok_or_else(|| missing(i, "achieved_cosine"))?;
            let recomputed = cosine_vec(&summary, &image).ok_or_else(|| Error::InvariantViolation {
                field: format!("entries[{i}]"),
                detail: "zero-norm summary or image prototype".into(),
            })?;
            let drift = (achieved - recomputed).abs();
            if drift.is_nan() || drift > COSINE_TOLERANCE {
                return Err(Error::InvariantViolation {
                    field: format!("entries[{i}].achieved_cosine"),
                    detail: format!("stored {achieved}, recomputed {recomputed}"),
                });
            }
            if e.cluster_size == 0 {
                return Err(Error::InvariantViolation {
                    field: format!("entries[{i}].cluster_size"),
                    detail: "must be >= 1".into(),
                });
            }
            entries.push(TextualPrototype {
                soft_prompt,
                summary: JointEmbedding(summary),
                achieved_cosine: achieved,
                best_cosine: e.best_cosine.unwrap_or(achieved),
                source_concept: e.concept,
                source_mode: e.mode_index,
                image_prototype: ImagePrototype {
                    vec: image,
                    cluster_size: e.cluster_size,
                    inertia: e.inertia,
                },
            });
        }
        let bank = PrototypeBank {
            world_seed: self.world_seed,
            entries,
        };
        bank.check_structure()?;
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protolab::textual::{optimize_textual_prototype, TextualConfig};
    use crate::semworld::{build_world, WorldConfig};

    fn prototypes(world: &World, concept: &str, modes: &[usize]) -> Vec<TextualPrototype> {
        let cfg = TextualConfig {
            iters: 50,
            ..TextualConfig::default()
        };
        modes
            .iter()
            .map(|&m| {
                let ip = ImagePrototype {
                    vec: world.vocab[2 * m].gt_semantic.clone() - &world.vocab[2 * m + 1].gt_semantic,
                    cluster_size: 10 + m,
                    inertia: 0.5,
                };
                optimize_textual_prototype(world, &ip, &cfg, concept, m, m as u64).unwrap().0
            })
            .collect()
    }

    #[test]
    fn flattening_and_aggregation() {
        let w = build_world(WorldConfig::two_concepts(0)).unwrap();
        let one = build_bank(0, vec![("hazard".into(), prototypes(&w, "hazard", &[0, 1, 2]))]).unwrap();
        assert_eq!(one.len(), 3);
        let two = build_bank(
            0,
            vec![
                ("hazard".into(), prototypes(&w, "hazard", &[0, 1, 2])),
                ("gore".into(), prototypes(&w, "gore", &[0, 1])),
            ],
        )
        .unwrap();
        assert_eq!(two.len(), 5);
    }

    #[test]
    fn rejects_duplicates_mismatch_and_empty() {
        let w = build_world(WorldConfig::default()).unwrap();
        let dup = build_bank(
            0,
            vec![("hazard".into(), prototypes(&w, "hazard", &[0, 0]))],
        );
        assert!(matches!(dup, Err(Error::DuplicateEntry { .. })));

        let small = build_world(WorldConfig {
            d: 12,
            ..WorldConfig::default()
        })
        .unwrap();
        let mixed = build_bank(
            0,
            vec![
                ("hazard".into(), prototypes(&w, "hazard", &[0])),
                ("other".into(), prototypes(&small, "other", &[0])),
            ],
        );
        assert!(matches!(mixed, Err(Error::DimensionMismatch { .. })));
        assert!(matches!(build_bank(0, vec![]), Err(Error::EmptyBank)));
    }

    #[test]
    fn save_load_and_tamper() {
        let w = build_world(WorldConfig::default()).unwrap();
        let bank = build_bank(0, vec![("hazard".into(), prototypes(&w, "hazard", &[0, 1, 2]))]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        save_bank(&bank, &path).unwrap();
        let loaded = load_bank(&path).unwrap();
        assert_eq!(loaded, bank);
        loaded.validate_against(&w).unwrap();

        let mut file = bank.to_file();
        file.entries[1].achieved_cosine = Some(file.entries[1].achieved_cosine.unwrap() - 1e-6);
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        match load_bank(&path) {
            Err(Error::InvariantViolation { field, .. }) => assert_eq!(field, "entries[1].achieved_cosine"),
            other => panic!("expected invariant violation, got {other:?}"),
        }

        let mut file = bank.to_file();
        file.format_version = 99;
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(load_bank(&path), Err(Error::VersionMismatch { found: 99, .. })));

        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_bank(&path), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn image_bank_is_not_a_complete_bank() {
        let w = build_world(WorldConfig::default()).unwrap();
        let ib = ImageBank {
            world_seed: 0,
            entries: vec![ImageBankEntry {
                concept: "hazard".into(),
                mode_index: 0,
                prototype: ImagePrototype {
                    vec: w.vocab[0].gt_semantic.clone(),
                    cluster_size: 4,
                    inertia: 0.1,
                },
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        ib.save(&path).unwrap();
        assert_eq!(ImageBank::load(&path).unwrap(), ib);
        assert!(matches!(load_bank(&path), Err(Error::InvariantViolation { .. })));
    }
}
