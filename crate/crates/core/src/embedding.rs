//! Patch embeddings, the `EMB1` file format and a synthetic generator.
//!
//! `EMB1` layout, all integers little-endian:
//!
//! ```text
//! "EMB1" | u32 record count N | u32 dim D | N x (u32 patch_index, D x f32)
//! ```
//!
//! An optional JSON manifest may sit next to the file (`<file>.json`) and
//! carries the slide id plus free-form provenance.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{write_atomic, Reader};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"EMB1";

/// Feature vector of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub patch_index: u32,
    pub embedding: Embedding,
}

/// All embeddings of one slide at one magnification.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    wsi_id: String,
    dim: usize,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    pub fn new(wsi_id: impl Into<String>, dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("embedding dimension must be >= 1".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.embedding.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: r.embedding.dim(),
                });
            }
            if !seen.insert(r.patch_index) {
                return Err(Error::InvalidInput(format!(
                    "duplicate patch index {}",
                    r.patch_index
                )));
            }
            if r.embedding.0.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "non-finite value in embedding of patch {}",
                    r.patch_index
                )));
            }
        }
        Ok(EmbeddingSet {
            wsi_id: wsi_id.into(),
            dim,
            records,
        })
    }

    /// Builds a set from `(patch_index, values)` pairs; the dimension is taken
    /// from the first row.
    pub fn from_rows(wsi_id: impl Into<String>, rows: Vec<(u32, Vec<f32>)>) -> Result<Self> {
        let dim = rows.first().map(|(_, v)| v.len()).unwrap_or(1);
        let records = rows
            .into_iter()
            .map(|(patch_index, v)| EmbeddingRecord {
                patch_index,
                embedding: Embedding(v),
            })
            .collect();
        Self::new(wsi_id, dim, records)
    }

    pub fn wsi_id(&self) -> &str {
        &self.wsi_id
    }

    pub fn set_wsi_id(&mut self, id: impl Into<String>) {
        self.wsi_id = id.into();
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, patch_index: u32) -> Option<&Embedding> {
        self.records
            .iter()
            .find(|r| r.patch_index == patch_index)
            .map(|r| &r.embedding)
    }

    /// Keeps only records whose patch index satisfies `keep`, preserving order.
    pub fn retain_indices(&self, keep: impl Fn(u32) -> bool) -> EmbeddingSet {
        EmbeddingSet {
            wsi_id: self.wsi_id.clone(),
            dim: self.dim,
            records: self
                .records
                .iter()
                .filter(|r| keep(r.patch_index))
                .cloned()
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = u32::try_from(self.records.len())
            .map_err(|_| Error::InvalidInput("too many records for EMB1".into()))?;
        let d = u32::try_from(self.dim)
            .map_err(|_| Error::InvalidInput("dimension too large for EMB1".into()))?;
        let mut out = Vec::with_capacity(12 + self.records.len() * (4 + 4 * self.dim));
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
        for r in &self.records {
            if r.embedding.dim() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    actual: r.embedding.dim(),
                });
            }
            out.extend_from_slice(&r.patch_index.to_le_bytes());
            for v in &r.embedding.0 {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(wsi_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(&EMBEDDING_MAGIC)?;
        let n = r.u32("record count")? as usize;
        let dim_offset = r.pos();
        let dim = r.u32("dimension")? as usize;
        if dim == 0 {
            return Err(Error::format(dim_offset, "dimension must be >= 1"));
        }
        let record_len = 4 + 4 * dim;
        if r.remaining() != n * record_len {
            return Err(Error::format(
                r.pos(),
                format!(
                    "payload of {} bytes does not hold {n} records of {record_len} bytes",
                    r.remaining()
                ),
            ));
        }
        let mut seen = HashSet::with_capacity(n);
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.pos();
            let patch_index = r.u32("patch index")?;
            if !seen.insert(patch_index) {
                return Err(Error::format(at, format!("duplicate patch index {patch_index}")));
            }
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                let at = r.pos();
                let v = r.f32("embedding value")?;
                if !v.is_finite() {
                    return Err(Error::format(at, format!("non-finite value {v}")));
                }
                values.push(v);
            }
            records.push(EmbeddingRecord {
                patch_index,
                embedding: Embedding(values),
            });
        }
        r.finish()?;
        Self::new(wsi_id, dim, records)
    }
}

/// Optional sidecar describing where an embedding file came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub wsi_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Slide id implied by a file name: the stem up to the first `.`.
pub fn wsi_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

/// Reads an `EMB1` file. The slide id comes from the sidecar manifest when
/// present, otherwise from the file name.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path)?;
    let manifest = manifest_path(path);
    let wsi_id = if manifest.exists() {
        let m: EmbeddingManifest = serde_json::from_slice(&fs::read(&manifest)?)?;
        m.wsi_id
    } else {
        wsi_id_from_path(path)
    };
    EmbeddingSet::from_bytes(wsi_id, &bytes)
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    write_atomic(path, &set.to_bytes()?)
}

pub fn save_manifest(manifest: &EmbeddingManifest, embedding_path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest)?;
    write_atomic(&manifest_path(embedding_path), &json)
}

/// Parameters for a synthetic slide: patch `i` is drawn around
/// `class_means[i % C]` with isotropic Gaussian noise of scale `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub class_means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub n: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Source class of patch `i`.
    pub fn class_of(&self, i: usize) -> usize {
        i % self.class_means.len()
    }
}

pub fn synth_embeddings(wsi_id: impl Into<String>, spec: &SynthSpec) -> Result<EmbeddingSet> {
    if spec.class_means.is_empty() {
        return Err(Error::InvalidInput("at least one class mean is required".into()));
    }
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma must be >= 0, got {}", spec.sigma)));
    }
    let dim = spec.class_means[0].len();
    if let Some(bad) = spec.class_means.iter().find(|m| m.len() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let records = (0..spec.n)
        .map(|i| {
            let mean = &spec.class_means[spec.class_of(i)];
            let values = mean
                .iter()
                .map(|&m| (m + noise.sample(&mut rng)) as f32)
                .collect();
            EmbeddingRecord {
                patch_index: i as u32,
                embedding: Embedding(values),
            }
        })
        .collect();
    EmbeddingSet::new(wsi_id, dim, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EmbeddingSet {
        EmbeddingSet::from_rows("w", vec![(0, vec![1.0, 2.0, 3.0]), (1, vec![4.0, 5.0, 6.0])]).unwrap()
    }

    #[test]
    fn file_layout_is_bit_exact() {
        let bytes = small().to_bytes().unwrap();
        assert_eq!(&bytes[..4], &[0x45, 0x4D, 0x42, 0x31]);
        assert_eq!(&bytes[4..12], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[0, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 2 * (4 + 12));
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slide-7.low.emb");
        save_embeddings(&small(), &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.wsi_id(), "slide-7");
        assert_eq!(back.records(), small().records());
        assert_eq!(back.to_bytes().unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn manifest_overrides_file_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb");
        save_embeddings(&small(), &path).unwrap();
        save_manifest(
            &EmbeddingManifest {
                wsi_id: "TCGA-01".into(),
                provenance: Some(serde_json::json!({"model": "densenet121"})),
            },
            &path,
        )
        .unwrap();
        assert_eq!(load_embeddings(&path).unwrap().wsi_id(), "TCGA-01");
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(
            EmbeddingSet::from_bytes("w", &[]),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn empty_set_with_header_is_valid() {
        let mut bytes = EMBEDDING_MAGIC.to_vec();
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&8u32.to_le_bytes());
        let set = EmbeddingSet::from_bytes("w", &bytes).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.dim(), 8);
    }

    #[test]
    fn decode_errors_name_offsets() {
        let good = small().to_bytes().unwrap();
        assert!(matches!(
            EmbeddingSet::from_bytes("w", &good[..good.len() - 1]),
            Err(Error::Format { offset: 12, .. })
        ));

        let mut nan = good.clone();
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            EmbeddingSet::from_bytes("w", &nan),
            Err(Error::Format { offset: 20, .. })
        ));

        let mut magic = good;
        magic[3] = b'2';
        assert!(matches!(
            EmbeddingSet::from_bytes("w", &magic),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn dim_mismatch_is_a_precondition_violation() {
        let err = EmbeddingSet::from_rows("w", vec![(0, vec![1.0, 2.0]), (1, vec![1.0])]);
        assert!(matches!(err, Err(Error::DimMismatch { expected: 2, actual: 1 })));
    }

    #[test]
    fn synth_zero_noise_reproduces_means() {
        let spec = SynthSpec {
            class_means: vec![vec![1.0, -2.0], vec![0.5, 3.0]],
            sigma: 0.0,
            n: 5,
            seed: 9,
        };
        let set = synth_embeddings("w", &spec).unwrap();
        for (i, r) in set.records().iter().enumerate() {
            assert_eq!(r.patch_index, i as u32);
            let mean: Vec<f32> = spec.class_means[i % 2].iter().map(|&v| v as f32).collect();
            assert_eq!(r.embedding.0, mean);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec {
            class_means: vec![vec![0.0; 16]],
            sigma: 1.0,
            n: 50,
            seed: 3,
        };
        assert_eq!(synth_embeddings("w", &spec).unwrap(), synth_embeddings("w", &spec).unwrap());
        let other = SynthSpec { seed: 4, ..spec.clone() };
        assert_ne!(synth_embeddings("w", &spec).unwrap(), synth_embeddings("w", &other).unwrap());
    }

    #[test]
    fn synth_separated_classes_by_pairwise_scan() {
        // Means 10 sigma apart along one axis.
        let dim = 8;
        let mut far = vec![0.0; dim];
        far[0] = 10.0;
        let spec = SynthSpec {
            class_means: vec![vec![0.0; dim], far],
            sigma: 1.0,
            n: 200,
            seed: 11,
        };
        let set = synth_embeddings("w", &spec).unwrap();
        let dist = |a: &[f32], b: &[f32]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let recs = set.records();
        let (mut intra, mut inter) = (Vec::new(), Vec::new());
        for i in 0..recs.len() {
            for j in i + 1..recs.len() {
                let d = dist(recs[i].embedding.values(), recs[j].embedding.values());
                if spec.class_of(i) == spec.class_of(j) {
                    intra.push(d);
                } else {
                    inter.push(d);
                }
            }
        }
        // Fraction of (intra, inter) pairs ordered correctly.
        inter.sort_by(f64::total_cmp);
        let ordered: usize = intra
            .iter()
            .map(|d| inter.len() - inter.partition_point(|x| x <= d))
            .sum();
        let frac = ordered as f64 / (intra.len() * inter.len()) as f64;
        assert!(frac > 0.999, "ordered fraction {frac}");
    }
}
