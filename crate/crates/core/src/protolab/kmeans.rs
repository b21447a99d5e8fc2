//! k-means with k-means++ seeding and best-of-restarts selection.
//!
//! Inputs are put into a canonical (lexicographic) order before any random
//! choice is made, so the fit depends on the multiset of points and the seed,
//! never on input order.

use nalgebra::DVector;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tolerance: f64,
    /// L2-normalize points before clustering.
    pub normalize: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iters: 300,
            tolerance: 1e-6,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<DVector<f64>>,
    /// Cluster index per input point, in the caller's input order.
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub restart_inertias: Vec<f64>,
    pub iterations: usize,
    /// All points identical while k > 1; centroids are duplicates.
    pub degenerate: bool,
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lowest index.
fn nearest(p: &DVector<f64>, centroids: &[DVector<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(points: &[DVector<f64>], k: usize, rng: &mut Rng) -> Vec<DVector<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.random_range(0..points.len()),
        };
        let c = points[next].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Single-point transfers that lower the total inertia once centroids are
/// updated for the move: x leaves `a` for `b` when
/// n_b/(n_b+1)·‖x−c_b‖² < n_a/(n_a−1)·‖x−c_a‖². Lloyd's fixed points are not
/// always stable under this test; its fixed points are a strict subset.
fn hartigan_refine(points: &[DVector<f64>], labels: &mut [usize], centroids: &mut [DVector<f64>], max_passes: usize) {
    let k = centroids.len();
    if k < 2 {
        return;
    }
    let dim = points[0].len();
    let mut sums = vec![DVector::zeros(dim); k];
    let mut sizes = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels.iter()) {
        sums[l] += p;
        sizes[l] += 1;
    }
    for _ in 0..max_passes {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = labels[i];
            if sizes[a] < 2 {
                continue;
            }
            let na = sizes[a] as f64;
            let remove = na / (na - 1.0) * sq_dist(p, &centroids[a]);
            let mut best: Option<(usize, f64)> = None;
            for b in (0..k).filter(|&b| b != a) {
                let nb = sizes[b] as f64;
                let add = nb / (nb + 1.0) * sq_dist(p, &centroids[b]);
                if best.is_none_or(|(_, c)| add < c) {
                    best = Some((b, add));
                }
            }
            let Some((b, add)) = best else { continue };
            // relative margin keeps round-off from cycling a point back and forth
            if add < remove - 1e-12 * remove.max(1e-300) {
                sums[a] -= p;
                sizes[a] -= 1;
                sums[b] += p;
                sizes[b] += 1;
                labels[i] = b;
                centroids[a] = &sums[a] / sizes[a] as f64;
                centroids[b] = &sums[b] / sizes[b] as f64;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

struct Run {
    centroids: Vec<DVector<f64>>,
    labels: Vec<usize>,
    inertia: f64,
    iterations: usize,
}

fn assign(points: &[DVector<f64>], centroids: &[DVector<f64>]) -> (Vec<usize>, Vec<f64>) {
    points.iter().map(|p| nearest(p, centroids)).unzip()
}

fn lloyd(points: &[DVector<f64>], k: usize, cfg: &KMeansConfig, rng: &mut Rng) -> Run {
    let dim = points[0].len();
    let mut centroids = plus_plus_init(points, k, rng);
    let mut iterations = 0;
    let (mut labels, mut dists) = assign(points, &centroids);
    loop {
        iterations += 1;
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        // empty cluster: move its centroid onto the point farthest from its own centroid
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| sizes[labels[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                sizes[labels[i]] -= 1;
                labels[i] = c;
                dists[i] = 0.0;
                sizes[c] = 1;
            }
        }
        let mut sums = vec![DVector::zeros(dim); k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l] += p;
        }
        let mut movement: f64 = 0.0;
        let new_centroids: Vec<DVector<f64>> = sums
            .into_iter()
            .zip(&sizes)
            .zip(&centroids)
            .map(|((s, &n), old)| if n > 0 { s / n as f64 } else { old.clone() })
            .collect();
        for (a, b) in new_centroids.iter().zip(&centroids) {
            movement = movement.max(sq_dist(a, b).sqrt());
        }
        centroids = new_centroids;
        if movement <= cfg.tolerance || iterations >= cfg.max_iters {
            break;
        }
        (labels, dists) = assign(points, &centroids);
    }
    hartigan_refine(points, &mut labels, &mut centroids, cfg.max_iters);
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum();
    Run {
        centroids,
        labels,
        inertia,
        iterations,
    }
}

/// Runs `cfg.restarts` seeded k-means++/Lloyd fits and keeps the lowest inertia
/// (lowest restart index on ties).
pub fn kmeans(points: &[DVector<f64>], k: usize, cfg: &KMeansConfig, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::Precondition("k must be >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::InsufficientPoints { points: points.len(), k });
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: p.len(),
            context: "k-means point",
        });
    }
    let prepared: Vec<DVector<f64>> = if cfg.normalize {
        points
            .iter()
            .map(|p| {
                let n = p.norm();
                if n > 0.0 {
                    p / n
                } else {
                    p.clone()
                }
            })
            .collect()
    } else {
        points.to_vec()
    };

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.sort_by(|&a, &b| {
        prepared[a]
            .iter()
            .zip(prepared[b].iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let canonical: Vec<DVector<f64>> = order.iter().map(|&i| prepared[i].clone()).collect();

    let restarts = cfg.restarts.max(1);
    let runs: Vec<Run> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_from(derive_seed(seed, &[r as u64]));
            lloyd(&canonical, k, cfg, &mut rng)
        })
        .collect();
    let restart_inertias: Vec<f64> = runs.iter().map(|r| r.inertia).collect();
    let best_idx = (0..runs.len())
        .min_by(|&a, &b| runs[a].inertia.total_cmp(&runs[b].inertia).then(a.cmp(&b)))
        .expect("at least one restart");
    let best = runs.into_iter().nth(best_idx).expect("index in range");

    let mut labels = vec![0; canonical.len()];
    for (pos, &orig) in order.iter().enumerate() {
        labels[orig] = best.labels[pos];
    }
    let degenerate = k > 1 && canonical.iter().all(|p| p == &canonical[0]);
    if degenerate {
        log::warn!("k-means on {} identical points with k = {k}: centroids are duplicates", canonical.len());
    }
    Ok(KMeansFit {
        centroids: best.centroids,
        labels,
        inertia: best.inertia,
        restart_inertias,
        iterations: best.iterations,
        degenerate,
    })
}
