//! Nearest-token and nearest-image readouts of prototype vectors.

use nalgebra::DVector;

use crate::encoders::{cosine_vec, encode_image};
use crate::error::{Error, Result};
use crate::semworld::{TokenId, World};

fn ranked<T: Copy + Ord>(mut scored: Vec<(T, f64)>, top_n: usize) -> Vec<(T, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_n);
    scored
}

/// Vocabulary tokens by descending cosine to `v`; ties by token id.
pub fn nearest_tokens(world: &World, v: &DVector<f64>, top_n: usize) -> Result<Vec<(TokenId, f64)>> {
    if top_n == 0 {
        return Err(Error::Precondition("top_n must be >= 1".into()));
    }
    if v.len() != world.d() {
        return Err(Error::DimensionMismatch {
            expected: world.d(),
            got: v.len(),
            context: "nearest_tokens query",
        });
    }
    let scored = world
        .vocab
        .iter()
        .map(|e| Ok((e.token, cosine_vec(v, &e.gt_semantic).ok_or(Error::ZeroNorm("nearest_tokens query"))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ranked(scored, top_n))
}

/// Images by descending cos(v, W_I x); ties by index.
pub fn nearest_images(world: &World, v: &DVector<f64>, images: &[DVector<f64>], top_n: usize) -> Result<Vec<(usize, f64)>> {
    if images.is_empty() {
        return Err(Error::Precondition("nearest_images needs at least one image".into()));
    }
    if top_n == 0 {
        return Err(Error::Precondition("top_n must be >= 1".into()));
    }
    let scored = images
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let z = encode_image(world, x)?;
            Ok((i, cosine_vec(v, &z.0).ok_or(Error::ZeroNorm("nearest_images"))?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ranked(scored, top_n))
}
