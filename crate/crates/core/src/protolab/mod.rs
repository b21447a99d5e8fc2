//! Concept-prototype construction: paired generation, embedding differences,
//! clustering into image prototypes and transfer into soft prompts.

pub mod bank;
pub mod kmeans;
pub mod pairs;
pub mod textual;

use nalgebra::DVector;

pub use bank::{build_bank, load_bank, save_bank, ImageBank, ImageBankEntry, PrototypeBank, BANK_FORMAT_VERSION};
pub use kmeans::{kmeans, KMeansConfig, KMeansFit};
pub use pairs::{embedding_differences, generate_pairs, DifferenceSet, PairedGenerations};
pub use textual::{optimize_textual_prototype, AscentTrace, Optimizer, TextualConfig, TextualPrototype};

use crate::error::Result;

/// A k-means centroid of embedding differences.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrototype {
    pub vec: DVector<f64>,
    pub cluster_size: usize,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
}

/// Clusters the differences and returns prototypes by descending cluster size
/// (ties keep k-means order), plus each difference's index into that list.
pub fn cluster_prototypes_with_labels(
    ds: &DifferenceSet,
    k: usize,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<(Vec<ImagePrototype>, Vec<usize>)> {
    let fit = kmeans(&ds.diffs, k, cfg, seed)?;
    let mut sizes = vec![0usize; k];
    let mut inertia = vec![0.0; k];
    for (p, &l) in ds.diffs.iter().zip(&fit.labels) {
        sizes[l] += 1;
        inertia[l] += (p - &fit.centroids[l]).norm_squared();
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));
    let mut rank = vec![0; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    let protos = order
        .iter()
        .map(|&c| ImagePrototype {
            vec: fit.centroids[c].clone(),
            cluster_size: sizes[c],
            inertia: inertia[c],
        })
        .collect();
    Ok((protos, fit.labels.iter().map(|&l| rank[l]).collect()))
}

pub fn cluster_prototypes(ds: &DifferenceSet, k: usize, seed: u64) -> Result<Vec<ImagePrototype>> {
    Ok(cluster_prototypes_with_labels(ds, k, &KMeansConfig::default(), seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_by_cluster_size_with_consistent_labels() {
        let raw = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0], [10.0, 0.5]];
        let ds = DifferenceSet {
            diffs: raw.iter().map(|p| DVector::from_row_slice(p)).collect(),
            provenance: (0..5).map(|i| (0, i, 0)).collect(),
        };
        let (protos, labels) = cluster_prototypes_with_labels(&ds, 2, &KMeansConfig::default(), 0).unwrap();
        assert_eq!(protos[0].cluster_size, 3);
        assert_eq!(protos[1].cluster_size, 2);
        assert_eq!(labels, vec![1, 1, 0, 0, 0]);
        assert!((protos[0].vec[0] - 10.0).abs() < 1e-12);
        assert!((protos[1].inertia - 0.5).abs() < 1e-12);
    }
}
