//! Selection of distinct morphologies.
//!
//! All patch embeddings of a slide are reduced to one centroid, every patch is
//! scored by its Euclidean distance to that centroid, distances are rounded to
//! integers, and each integer value forms a bin. One patch drawn at random
//! from every bin makes up the montage, so the montage size follows the spread
//! of the slide's morphology rather than a fixed parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::write_atomic;
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Patches whose distance to the centroid rounds to the same integer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceBin {
    pub key: u64,
    pub members: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sdm,
    Mosaic,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Sdm => "sdm",
            Method::Mosaic => "mosaic",
        })
    }
}

/// One selected patch. `key` is the distance bin for SDM and the cluster id
/// for the mosaic baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub key: u64,
    pub member_count: usize,
    pub selected_index: u32,
}

/// Selected patch set of one slide, serialized as the montage JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Montage {
    pub wsi_id: String,
    pub method: Method,
    pub seed: u64,
    #[serde(rename = "bins")]
    pub selections: Vec<Selection>,
}

impl Montage {
    pub fn len(&self) -> usize {
        self.selections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selections.is_empty()
    }

    pub fn patch_indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.selections.iter().map(|s| s.selected_index)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read(path)?)
    }
}

/// Component-wise mean of all embeddings, accumulated in f64 in record order.
pub fn centroid(set: &EmbeddingSet) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::EmptyInput(format!(
            "slide {} has no embeddings to average",
            set.wsi_id()
        )));
    }
    let mut sum = vec![0.0f64; set.dim()];
    for r in set.records() {
        for (s, &v) in sum.iter_mut().zip(r.embedding.values()) {
            *s += v as f64;
        }
    }
    let n = set.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

/// Euclidean distance of every embedding to `center`, in record order.
pub fn distances(set: &EmbeddingSet, center: &[f64]) -> Result<Vec<(u32, f64)>> {
    if center.len() != set.dim() {
        return Err(Error::DimMismatch {
            expected: set.dim(),
            actual: center.len(),
        });
    }
    // Each distance is summed sequentially, so the result does not depend on
    // how rayon splits the records.
    Ok(set
        .records()
        .par_iter()
        .map(|r| {
            let sq: f64 = r
                .embedding
                .values()
                .iter()
                .zip(center)
                .map(|(&v, &c)| {
                    let d = v as f64 - c;
                    d * d
                })
                .sum();
            (r.patch_index, sq.sqrt())
        })
        .collect())
}

/// Integer bin of a distance: nearest integer, halves rounded away from zero.
pub fn bin_key(d: f64) -> u64 {
    d.round() as u64
}

/// Groups patches by rounded distance. Bins ascend by key and keep members in
/// input order.
pub fn bin_distances(dists: &[(u32, f64)]) -> Result<Vec<DistanceBin>> {
    let mut bins: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    for &(idx, d) in dists {
        if !(d.is_finite() && d >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "distance {d} of patch {idx} is not a finite non-negative number"
            )));
        }
        bins.entry(bin_key(d)).or_default().push(idx);
    }
    Ok(bins
        .into_iter()
        .map(|(key, members)| DistanceBin { key, members })
        .collect())
}

/// Draws one member uniformly from each bin. The draw for a bin depends only
/// on `(seed, key)` and the bin's members.
pub fn select_montage(wsi_id: &str, bins: &[DistanceBin], seed: u64) -> Result<Montage> {
    if bins.is_empty() {
        return Err(Error::EmptyInput(format!("slide {wsi_id} has no distance bins")));
    }
    let selections = bins
        .iter()
        .map(|bin| {
            if bin.members.is_empty() {
                return Err(Error::InvalidInput(format!("bin {} has no members", bin.key)));
            }
            let pick = stream_rng(seed, bin.key).random_range(0..bin.members.len());
            Ok(Selection {
                key: bin.key,
                member_count: bin.members.len(),
                selected_index: bin.members[pick],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Montage {
        wsi_id: wsi_id.to_string(),
        method: Method::Sdm,
        seed,
        selections,
    })
}

/// Full selection: centroid, distances, binning, one random patch per bin.
pub fn run_sdm(set: &EmbeddingSet, seed: u64) -> Result<Montage> {
    let c = centroid(set)?;
    let d = distances(set, &c)?;
    let bins = bin_distances(&d)?;
    select_montage(set.wsi_id(), &bins, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{synth_embeddings, SynthSpec};
    use proptest::prelude::*;

    fn set(rows: Vec<Vec<f32>>) -> EmbeddingSet {
        EmbeddingSet::from_rows(
            "w",
            rows.into_iter().enumerate().map(|(i, v)| (i as u32, v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid(&set(vec![vec![0.0, 0.0], vec![2.0, 2.0]])).unwrap(), vec![1.0, 1.0]);
        assert_eq!(centroid(&set(vec![vec![3.5, -1.0]])).unwrap(), vec![3.5, -1.0]);
        let cross = set(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
        ]);
        assert_eq!(centroid(&cross).unwrap(), vec![0.0, 0.0]);
        let empty = EmbeddingSet::new("w", 4, vec![]).unwrap();
        assert!(matches!(centroid(&empty), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn distance_examples() {
        let s = set(vec![vec![3.0, 4.0], vec![0.0, 0.0]]);
        assert_eq!(distances(&s, &[0.0, 0.0]).unwrap(), vec![(0, 5.0), (1, 0.0)]);
        assert!(matches!(distances(&s, &[0.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn distances_match_naive_loop() {
        let spec = SynthSpec {
            class_means: vec![vec![0.5; 24], vec![-2.0; 24]],
            sigma: 3.0,
            n: 300,
            seed: 5,
        };
        let s = synth_embeddings("w", &spec).unwrap();
        let c = centroid(&s).unwrap();
        for ((_, d), r) in distances(&s, &c).unwrap().iter().zip(s.records()) {
            let mut naive = 0.0f64;
            for (v, ck) in r.embedding.0.iter().zip(&c) {
                let diff = *v as f64 - ck;
                naive += diff * diff;
            }
            assert!(*d >= 0.0);
            assert!((d * d - naive).abs() <= 1e-9 * naive.max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn binning_examples() {
        let bins = bin_distances(&[(0, 0.4), (1, 1.6), (2, 2.2), (3, 2.4)]).unwrap();
        assert_eq!(
            bins,
            vec![
                DistanceBin { key: 0, members: vec![0] },
                DistanceBin { key: 2, members: vec![1, 2, 3] },
            ]
        );
        let same = bin_distances(&[(0, 3.1), (1, 3.1), (2, 3.1)]).unwrap();
        assert_eq!(same.len(), 1);
        let ties = bin_distances(&[(0, 0.5), (1, 1.5)]).unwrap();
        assert_eq!(ties.iter().map(|b| b.key).collect::<Vec<_>>(), vec![1, 2]);
        assert!(bin_distances(&[(0, f64::NAN)]).is_err());
        assert!(bin_distances(&[(0, -1.0)]).is_err());
    }

    #[test]
    fn singleton_bins_ignore_seed() {
        let bins = vec![
            DistanceBin { key: 1, members: vec![4] },
            DistanceBin { key: 3, members: vec![9] },
        ];
        for seed in 0..20 {
            let m = select_montage("w", &bins, seed).unwrap();
            assert_eq!(m.patch_indices().collect::<Vec<_>>(), vec![4, 9]);
        }
    }

    #[test]
    fn selection_is_deterministic_and_bin_local() {
        let bins = vec![
            DistanceBin { key: 2, members: (0..50).collect() },
            DistanceBin { key: 5, members: (50..90).collect() },
        ];
        let a = select_montage("w", &bins, 42).unwrap();
        assert_eq!(a, select_montage("w", &bins, 42).unwrap());

        // Adding a bin leaves the others' picks untouched.
        let mut more = bins.clone();
        more.insert(1, DistanceBin { key: 3, members: (90..99).collect() });
        let b = select_montage("w", &more, 42).unwrap();
        assert_eq!(b.selections[0], a.selections[0]);
        assert_eq!(b.selections[2], a.selections[1]);
    }

    #[test]
    fn per_bin_selection_is_uniform() {
        let bins = vec![DistanceBin { key: 7, members: vec![10, 11, 12, 13] }];
        let mut counts = [0usize; 4];
        for seed in 0..10_000 {
            let m = select_montage("w", &bins, seed).unwrap();
            counts[(m.selections[0].selected_index - 10) as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() <= 0.05, "frequency {f}");
        }
    }

    #[test]
    fn run_sdm_edge_cases() {
        let one = set(vec![vec![1.0, 2.0, 3.0]]);
        let m = run_sdm(&one, 0).unwrap();
        assert_eq!(m.patch_indices().collect::<Vec<_>>(), vec![0]);

        let flat = synth_embeddings(
            "w",
            &SynthSpec { class_means: vec![vec![2.0; 8]], sigma: 0.0, n: 40, seed: 1 },
        )
        .unwrap();
        assert_eq!(run_sdm(&flat, 0).unwrap().len(), 1);

        let empty = EmbeddingSet::new("w", 3, vec![]).unwrap();
        assert!(matches!(run_sdm(&empty, 0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn three_clusters_at_distinct_radii_are_all_represented() {
        // Clusters placed at radii ~2, ~6 and ~12 from their joint mean.
        let dim = 4;
        let mean = |x: f64, y: f64| {
            let mut v = vec![0.0; dim];
            v[0] = x;
            v[1] = y;
            v
        };
        let spec = SynthSpec {
            class_means: vec![mean(2.0, 0.0), mean(-6.0, 0.0), mean(4.0, 12.0)],
            sigma: 0.05,
            n: 300,
            seed: 8,
        };
        let s = synth_embeddings("w", &spec).unwrap();
        let m = run_sdm(&s, 42).unwrap();

        // Independent binning: naive mean, naive distance, round-half-away.
        let n = s.len() as f64;
        let mut c = vec![0.0f64; dim];
        for r in s.records() {
            for (ck, v) in c.iter_mut().zip(&r.embedding.0) {
                *ck += *v as f64 / n;
            }
        }
        let mut oracle: BTreeMap<i64, Vec<u32>> = BTreeMap::new();
        for r in s.records() {
            let d = (0..dim)
                .map(|k| (r.embedding.0[k] as f64 - c[k]).powi(2))
                .sum::<f64>()
                .sqrt();
            let key = if d - d.floor() >= 0.5 { d.floor() + 1.0 } else { d.floor() };
            oracle.entry(key as i64).or_default().push(r.patch_index);
        }
        assert_eq!(m.len(), oracle.len());
        for (sel, (key, members)) in m.selections.iter().zip(&oracle) {
            assert_eq!(sel.key as i64, *key);
            assert!(members.contains(&sel.selected_index));
        }
        let sources: std::collections::BTreeSet<usize> = m
            .patch_indices()
            .map(|i| spec.class_of(i as usize))
            .collect();
        assert!(sources.len() >= 2, "montage drew from {sources:?}");
    }

    #[test]
    fn montage_json_shape() {
        let m = Montage {
            wsi_id: "s1".into(),
            method: Method::Sdm,
            seed: 42,
            selections: vec![Selection { key: 3, member_count: 5, selected_index: 17 }],
        };
        let v: serde_json::Value = serde_json::from_slice(&m.to_json().unwrap()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "wsi_id": "s1",
                "method": "sdm",
                "seed": 42,
                "bins": [{"key": 3, "member_count": 5, "selected_index": 17}]
            })
        );
        assert_eq!(Montage::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    fn arb_set() -> impl Strategy<Value = EmbeddingSet> {
        (1usize..12, 1usize..60).prop_flat_map(|(dim, n)| {
            proptest::collection::vec(proptest::collection::vec(-20i16..20, dim), n).prop_map(
                move |rows| {
                    set(rows
                        .into_iter()
                        .map(|r| r.into_iter().map(|v| v as f32 * 0.25).collect())
                        .collect())
                },
            )
        })
    }

    proptest! {
        #[test]
        fn bins_partition_indices(s in arb_set(), seed in any::<u64>()) {
            let c = centroid(&s).unwrap();
            let bins = bin_distances(&distances(&s, &c).unwrap()).unwrap();
            let mut all: Vec<u32> = bins.iter().flat_map(|b| b.members.clone()).collect();
            all.sort_unstable();
            let expected: Vec<u32> = (0..s.len() as u32).collect();
            prop_assert_eq!(all, expected);
            let m = run_sdm(&s, seed).unwrap();
            prop_assert_eq!(m.len(), bins.len());
            prop_assert!(m.selections.windows(2).all(|w| w[0].key < w[1].key));
            prop_assert_eq!(m.clone(), run_sdm(&s, seed).unwrap());
        }

        #[test]
        fn distances_scale_linearly(s in arb_set()) {
            // Scaling by a power of two is exact in both f32 and f64.
            let scaled = set(s.records().iter().map(|r| r.embedding.0.iter().map(|v| v * 4.0).collect()).collect());
            let d = distances(&s, &centroid(&s).unwrap()).unwrap();
            let ds = distances(&scaled, &centroid(&scaled).unwrap()).unwrap();
            for ((_, a), (_, b)) in d.iter().zip(&ds) {
                prop_assert!((b - 4.0 * a).abs() <= 1e-12 * b.max(1.0));
            }
        }
    }
}
