//! Mosaic baseline: k-means over patch embeddings, then a fixed fraction of
//! each cluster sampled uniformly.
//!
//! The reference mosaic clusters on colour features with spatial sampling;
//! here it clusters the same low-magnification embeddings the montage uses,
//! which is enough for size and retrieval comparisons.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::sdm::{Method, Montage, Selection};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MosaicConfig {
    pub k: usize,
    pub sample_fraction: f64,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for MosaicConfig {
    fn default() -> Self {
        MosaicConfig {
            k: 9,
            sample_fraction: 0.05,
            seed: 42,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

impl MosaicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("cluster count must be >= 1".into()));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sample fraction must lie in (0, 1], got {}",
                self.sample_fraction
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::InvalidConfig("tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Cluster of each record, aligned with `EmbeddingSet::records`.
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    /// Sum of squared distances to assigned centers after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding. Stops early once every point coincides with a center,
/// so duplicate-heavy inputs get fewer than `k` centers.
fn seed_centers(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, 0);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centers.push(points[pick].clone());
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

/// Lloyd's algorithm from k-means++ seeds. The effective `k` is capped at the
/// number of points. An empty cluster is moved to the point farthest from its
/// assigned center; if every point already sits on a center the empty cluster
/// is dropped, so all returned clusters are nonempty.
pub fn kmeans(set: &EmbeddingSet, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeans> {
    if set.is_empty() {
        return Err(Error::EmptyInput(format!(
            "slide {} has no embeddings to cluster",
            set.wsi_id()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("cluster count must be >= 1".into()));
    }
    let points: Vec<Vec<f64>> = set
        .records()
        .iter()
        .map(|r| r.embedding.values().iter().map(|&v| v as f64).collect())
        .collect();
    let mut centers = seed_centers(&points, k.min(points.len()), seed);
    let mut objective = Vec::new();
    let mut assignments = vec![0usize; points.len()];
    let mut iterations = 0;

    loop {
        let assigned: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centers)).collect();
        for (a, &(c, _)) in assignments.iter_mut().zip(&assigned) {
            *a = c;
        }
        objective.push(assigned.iter().map(|&(_, d)| d).sum());
        iterations += 1;

        let dim = set.dim();
        let mut sums = vec![vec![0.0f64; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| s.into_iter().map(|v| v / n.max(1) as f64).collect())
            .collect();

        // Reseed empty clusters at the worst-served point.
        let mut taken = vec![false; points.len()];
        let mut empties = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            if n == 0 {
                let far = assigned
                    .iter()
                    .enumerate()
                    .filter(|(i, &(_, d))| !taken[*i] && d > 0.0)
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i);
                match far {
                    Some(i) => {
                        taken[i] = true;
                        next[c] = points[i].clone();
                    }
                    None => empties.push(c),
                }
            }
        }
        let reseeded = counts.contains(&0);
        if !empties.is_empty() {
            let keep: Vec<bool> = (0..next.len()).map(|c| !empties.contains(&c)).collect();
            let remap: Vec<usize> = keep
                .iter()
                .scan(0usize, |acc, &k| {
                    let id = *acc;
                    *acc += k as usize;
                    Some(id)
                })
                .collect();
            next = next
                .into_iter()
                .zip(&keep)
                .filter_map(|(c, &k)| k.then_some(c))
                .collect();
            for a in assignments.iter_mut() {
                *a = remap[*a];
            }
        }

        let moved = if next.len() == centers.len() {
            centers
                .iter()
                .zip(&next)
                .map(|(a, b)| sq_dist(a, b).sqrt())
                .fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        centers = next;
        if (!reseeded && moved < tol) || iterations >= max_iters {
            break;
        }
    }

    // Final assignment against the returned centers keeps them consistent.
    let assigned: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centers)).collect();
    let final_obj: f64 = assigned.iter().map(|&(_, d)| d).sum();
    assignments = assigned.iter().map(|&(c, _)| c).collect();
    if final_obj < *objective.last().unwrap() {
        objective.push(final_obj);
    }
    let mut result = KMeans {
        assignments,
        centers,
        objective,
        iterations,
    };
    drop_empty_clusters(&mut result);
    Ok(result)
}

fn drop_empty_clusters(km: &mut KMeans) {
    let sizes = km.cluster_sizes();
    if sizes.iter().all(|&n| n > 0) {
        return;
    }
    let mut remap = vec![usize::MAX; sizes.len()];
    let mut centers = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        if n > 0 {
            remap[c] = centers.len();
            centers.push(km.centers[c].clone());
        }
    }
    km.centers = centers;
    for a in km.assignments.iter_mut() {
        *a = remap[*a];
    }
}

/// Number of patches taken from a cluster of `n` members.
pub fn cluster_quota(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).floor() as usize).clamp(1, n.max(1))
}

/// Clusters the slide and samples `max(1, floor(fraction * size))` patches per
/// cluster. Selections are keyed by cluster id and listed in record order
/// within each cluster.
pub fn select_mosaic(set: &EmbeddingSet, cfg: &MosaicConfig) -> Result<Montage> {
    cfg.validate()?;
    let km = kmeans(set, cfg.k, cfg.seed, cfg.max_iters, cfg.tol)?;
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); km.k()];
    for (r, &c) in set.records().iter().zip(&km.assignments) {
        members[c].push(r.patch_index);
    }
    let mut selections = Vec::new();
    for (cluster, m) in members.iter().enumerate() {
        let quota = cluster_quota(m.len(), cfg.sample_fraction);
        let mut rng = stream_rng(cfg.seed, 1 + cluster as u64);
        let mut picked = sample(&mut rng, m.len(), quota).into_vec();
        picked.sort_unstable();
        selections.extend(picked.into_iter().map(|i| Selection {
            key: cluster as u64,
            member_count: m.len(),
            selected_index: m[i],
        }));
    }
    Ok(Montage {
        wsi_id: set.wsi_id().to_string(),
        method: Method::Mosaic,
        seed: cfg.seed,
        selections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{synth_embeddings, SynthSpec};
    use std::collections::HashSet;

    fn set(rows: Vec<Vec<f32>>) -> EmbeddingSet {
        EmbeddingSet::from_rows(
            "w",
            rows.into_iter().enumerate().map(|(i, v)| (i as u32, v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_far_points_two_clusters() {
        let s = set(vec![vec![0.0, 0.0], vec![100.0, 100.0]]);
        let km = kmeans(&s, 2, 1, 100, 1e-6).unwrap();
        assert_ne!(km.assignments[0], km.assignments[1]);
    }

    #[test]
    fn identical_points_collapse_to_one_center() {
        let s = set(vec![vec![1.5, -2.0]; 12]);
        let km = kmeans(&s, 3, 7, 100, 1e-6).unwrap();
        assert_eq!(km.k(), 1);
        assert!(km.assignments.iter().all(|&a| a == 0));
        assert_eq!(km.centers[0], vec![1.5, -2.0]);
    }

    #[test]
    fn k_is_capped_at_n() {
        let s = set(vec![vec![0.0], vec![5.0], vec![9.0]]);
        let km = kmeans(&s, 9, 0, 100, 1e-6).unwrap();
        assert_eq!(km.k(), 3);
        assert_eq!(km.cluster_sizes(), vec![1, 1, 1]);
    }

    #[test]
    fn empty_input_errors() {
        let empty = EmbeddingSet::new("w", 2, vec![]).unwrap();
        assert!(matches!(kmeans(&empty, 3, 0, 10, 0.0), Err(Error::EmptyInput(_))));
        assert!(matches!(
            select_mosaic(&empty, &MosaicConfig::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn recovers_tight_blobs_up_to_relabeling() {
        let spec = SynthSpec {
            class_means: vec![vec![0.0, 0.0, 0.0], vec![10.0, 0.0, 0.0], vec![0.0, 10.0, 0.0]],
            sigma: 0.01,
            n: 90,
            seed: 2,
        };
        let s = synth_embeddings("w", &spec).unwrap();
        let km = kmeans(&s, 3, 42, 100, 1e-6).unwrap();
        assert_eq!(km.k(), 3);
        let best = permutations(3)
            .into_iter()
            .map(|perm| {
                (0..s.len())
                    .filter(|&i| perm[km.assignments[i]] == spec.class_of(i))
                    .count()
            })
            .max()
            .unwrap();
        assert_eq!(best, s.len());
    }

    #[test]
    fn objective_never_increases() {
        let spec = SynthSpec {
            class_means: (0..6).map(|c| vec![c as f64 * 2.0, (c % 3) as f64, 1.0, 0.0]).collect(),
            sigma: 1.5,
            n: 400,
            seed: 13,
        };
        let s = synth_embeddings("w", &spec).unwrap();
        for seed in 0..5 {
            let km = kmeans(&s, 9, seed, 100, 0.0).unwrap();
            for w in km.objective.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", km.objective);
            }
        }
    }

    #[test]
    fn nine_points_one_each() {
        let s = set((0..9).map(|i| vec![i as f32 * 10.0, 0.0]).collect());
        let m = select_mosaic(&s, &MosaicConfig::default()).unwrap();
        assert_eq!(m.len(), 9);
        assert_eq!(m.method, Method::Mosaic);
    }

    #[test]
    fn tight_blob_quota_matches_cluster_sizes() {
        let spec = SynthSpec {
            class_means: vec![vec![3.0; 6]],
            sigma: 0.01,
            n: 200,
            seed: 4,
        };
        let s = synth_embeddings("w", &spec).unwrap();
        let cfg = MosaicConfig::default();
        let km = kmeans(&s, cfg.k, cfg.seed, cfg.max_iters, cfg.tol).unwrap();
        let expected: usize = km
            .cluster_sizes()
            .iter()
            .map(|&n| ((0.05 * n as f64).floor() as usize).max(1))
            .sum();
        let m = select_mosaic(&s, &cfg).unwrap();
        assert_eq!(m.len(), expected);

        // Each selection belongs to the cluster it is attributed to.
        let cluster_of: std::collections::HashMap<u32, usize> = s
            .records()
            .iter()
            .zip(&km.assignments)
            .map(|(r, &c)| (r.patch_index, c))
            .collect();
        let mut seen = HashSet::new();
        for sel in &m.selections {
            assert_eq!(cluster_of[&sel.selected_index], sel.key as usize);
            assert!(seen.insert(sel.selected_index));
        }
        assert_eq!(m, select_mosaic(&s, &cfg).unwrap());
    }

    #[test]
    fn quota_rule() {
        assert_eq!(cluster_quota(1, 0.05), 1);
        assert_eq!(cluster_quota(39, 0.05), 1);
        assert_eq!(cluster_quota(40, 0.05), 2);
        assert_eq!(cluster_quota(555, 0.05), 27);
        assert_eq!(cluster_quota(10, 1.0), 10);
    }
}
