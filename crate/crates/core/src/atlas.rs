//! Reference atlas of barcoded slides and median-of-minimum search.
//!
//! `ATL1` layout, integers little-endian:
//!
//! ```text
//! "ATL1" | u32 record count | u32 nbits
//! per record:
//!   u16 len + UTF-8 wsi_id | u16 len + UTF-8 patient_id | u16 len + UTF-8 label
//!   u32 barcode count K | K x ceil(nbits / 8) barcode bytes
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::barcode::{hamming_unchecked, minmax_barcode, Barcode};
use crate::codec::{put_string, write_atomic, Reader};
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::sdm::Montage;

pub const ATLAS_MAGIC: [u8; 4] = *b"ATL1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WsiRecord {
    pub wsi_id: String,
    pub patient_id: String,
    pub label: String,
    pub barcodes: Vec<Barcode>,
}

impl WsiRecord {
    pub fn new(
        wsi_id: impl Into<String>,
        patient_id: impl Into<String>,
        label: impl Into<String>,
        barcodes: Vec<Barcode>,
    ) -> Result<Self> {
        let wsi_id = wsi_id.into();
        let first = barcodes
            .first()
            .ok_or_else(|| Error::EmptyInput(format!("slide {wsi_id} has no barcodes")))?;
        if let Some(b) = barcodes.iter().find(|b| b.nbits() != first.nbits()) {
            return Err(Error::DimMismatch {
                expected: first.nbits(),
                actual: b.nbits(),
            });
        }
        let patient_id = patient_id.into();
        Ok(WsiRecord {
            patient_id: if patient_id.is_empty() {
                wsi_id.clone()
            } else {
                patient_id
            },
            wsi_id,
            label: label.into(),
            barcodes,
        })
    }

    pub fn nbits(&self) -> usize {
        self.barcodes[0].nbits()
    }
}

/// Barcodes each montage patch's high-magnification feature vector, in
/// montage order.
pub fn build_record(
    wsi_id: &str,
    patient_id: &str,
    label: &str,
    montage: &Montage,
    features: &EmbeddingSet,
) -> Result<WsiRecord> {
    if montage.is_empty() {
        return Err(Error::EmptyInput(format!("slide {wsi_id} has an empty montage")));
    }
    let barcodes = montage
        .patch_indices()
        .map(|idx| {
            let e = features.get(idx).ok_or(Error::MissingEmbedding(idx))?;
            minmax_barcode(e.values())
        })
        .collect::<Result<Vec<_>>>()?;
    WsiRecord::new(wsi_id, patient_id, label, barcodes)
}

/// For every query barcode take the smallest Hamming distance to any target
/// barcode, then return the median of those minima. With an even number of
/// query barcodes the median is the mean of the two middle values.
///
/// The measure is directional: `median_of_min(a, b)` and `median_of_min(b, a)`
/// generally differ.
pub fn median_of_min(query: &WsiRecord, target: &WsiRecord) -> Result<f64> {
    if query.nbits() != target.nbits() {
        return Err(Error::DimMismatch {
            expected: query.nbits(),
            actual: target.nbits(),
        });
    }
    let mut mins: Vec<u32> = query
        .barcodes
        .iter()
        .map(|q| {
            target
                .barcodes
                .iter()
                .map(|t| hamming_unchecked(q, t))
                .min()
                .expect("records hold at least one barcode")
        })
        .collect();
    mins.sort_unstable();
    let n = mins.len();
    Ok(if n % 2 == 1 {
        mins[n / 2] as f64
    } else {
        (mins[n / 2 - 1] as f64 + mins[n / 2] as f64) / 2.0
    })
}

/// Which atlas records are hidden from a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exclusion {
    /// Hide every slide of the query's patient.
    #[default]
    Patient,
    /// Hide only the query slide itself.
    Slide,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub wsi_id: String,
    pub label: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub query_id: String,
    pub query_label: String,
    /// Ascending by distance, ties by `wsi_id`.
    pub hits: Vec<Hit>,
}

fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| a.wsi_id.cmp(&b.wsi_id))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atlas {
    records: Vec<WsiRecord>,
    nbits: usize,
}

impl Atlas {
    pub fn new(records: Vec<WsiRecord>) -> Result<Self> {
        let nbits = records
            .first()
            .map(WsiRecord::nbits)
            .ok_or_else(|| Error::EmptyInput("atlas has no records".into()))?;
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if r.nbits() != nbits {
                return Err(Error::DimMismatch {
                    expected: nbits,
                    actual: r.nbits(),
                });
            }
            if !ids.insert(r.wsi_id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate slide id {}", r.wsi_id)));
            }
        }
        Ok(Atlas { records, nbits })
    }

    pub fn records(&self) -> &[WsiRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn nbits(&self) -> usize {
        self.nbits
    }

    pub fn label_set(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.label.as_str()).collect()
    }

    pub fn get(&self, wsi_id: &str) -> Option<&WsiRecord> {
        self.records.iter().find(|r| r.wsi_id == wsi_id)
    }

    /// Ranks every other record against `query_id`.
    pub fn leave_one_out(&self, query_id: &str, exclusion: Exclusion) -> Result<Ranking> {
        let query = self
            .get(query_id)
            .ok_or_else(|| Error::NotFound(format!("slide {query_id} is not in the atlas")))?;
        Ok(self.rank(query, exclusion))
    }

    fn rank(&self, query: &WsiRecord, exclusion: Exclusion) -> Ranking {
        let mut hits: Vec<Hit> = self
            .records
            .iter()
            .filter(|t| t.wsi_id != query.wsi_id)
            .filter(|t| exclusion == Exclusion::Slide || t.patient_id != query.patient_id)
            .map(|t| Hit {
                wsi_id: t.wsi_id.clone(),
                label: t.label.clone(),
                distance: median_of_min(query, t).expect("atlas records share nbits"),
            })
            .collect();
        hits.sort_by(hit_order);
        Ranking {
            query_id: query.wsi_id.clone(),
            query_label: query.label.clone(),
            hits,
        }
    }

    /// Rankings for every record, in atlas order. Queries run in parallel;
    /// each ranking is computed independently so the output is the same for
    /// any thread count.
    pub fn leave_one_out_all(&self, exclusion: Exclusion) -> Vec<Ranking> {
        self.records
            .par_iter()
            .map(|q| self.rank(q, exclusion))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u32::try_from(self.records.len())
            .map_err(|_| Error::InvalidInput("too many records for ATL1".into()))?;
        let nbits = u32::try_from(self.nbits)
            .map_err(|_| Error::InvalidInput("barcode too long for ATL1".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&ATLAS_MAGIC);
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&nbits.to_le_bytes());
        for r in &self.records {
            put_string(&mut out, &r.wsi_id, "wsi_id")?;
            put_string(&mut out, &r.patient_id, "patient_id")?;
            put_string(&mut out, &r.label, "label")?;
            out.extend_from_slice(&(r.barcodes.len() as u32).to_le_bytes());
            for b in &r.barcodes {
                out.extend_from_slice(&b.to_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(&ATLAS_MAGIC)?;
        let count = r.u32("record count")? as usize;
        let nbits_at = r.pos();
        let nbits = r.u32("nbits")? as usize;
        if nbits == 0 {
            return Err(Error::format(nbits_at, "nbits must be >= 1"));
        }
        let code_len = Barcode::byte_len(nbits);
        let mut records = Vec::with_capacity(count.min(1 << 16));
        let mut ids = HashSet::new();
        for _ in 0..count {
            let id_at = r.pos();
            let wsi_id = r.string("wsi_id")?;
            let patient_id = r.string("patient_id")?;
            let label = r.string("label")?;
            let k_at = r.pos();
            let k = r.u32("barcode count")? as usize;
            if k == 0 {
                return Err(Error::format(k_at, format!("slide {wsi_id} has no barcodes")));
            }
            let mut barcodes = Vec::with_capacity(k.min(1 << 16));
            for _ in 0..k {
                let at = r.pos();
                let raw = r.take(code_len, "barcode")?;
                barcodes.push(
                    Barcode::from_bytes(raw, nbits).map_err(|e| Error::format(at, e.to_string()))?,
                );
            }
            if !ids.insert(wsi_id.clone()) {
                return Err(Error::format(id_at, format!("duplicate slide id {wsi_id}")));
            }
            records.push(WsiRecord {
                wsi_id,
                patient_id,
                label,
                barcodes,
            });
        }
        r.finish()?;
        if records.is_empty() {
            return Err(Error::format(4, "atlas has no records"));
        }
        Atlas::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdm::{Method, Selection};

    fn code(s: &str) -> Barcode {
        Barcode::from_bits(&s.chars().map(|c| c == '1').collect::<Vec<_>>()).unwrap()
    }

    fn rec(id: &str, patient: &str, label: &str, codes: &[&str]) -> WsiRecord {
        WsiRecord::new(id, patient, label, codes.iter().map(|c| code(c)).collect()).unwrap()
    }

    #[test]
    fn median_of_min_examples() {
        let a = rec("a", "", "x", &["00", "11"]);
        assert_eq!(median_of_min(&a, &a).unwrap(), 0.0);
        let t = rec("t", "", "x", &["00", "10"]);
        // mins: 00 -> 0, 11 -> 1; median of {0, 1} = 0.5
        assert_eq!(median_of_min(&a, &t).unwrap(), 0.5);
        let odd = rec("o", "", "x", &["000", "111", "011"]);
        let t3 = rec("t3", "", "x", &["000"]);
        assert_eq!(median_of_min(&odd, &t3).unwrap(), 2.0);
        assert!(median_of_min(&a, &odd).is_err());
    }

    #[test]
    fn median_of_min_is_directional() {
        let q = rec("q", "", "x", &["0000"]);
        let t = rec("t", "", "x", &["0000", "1111", "1110"]);
        assert_eq!(median_of_min(&q, &t).unwrap(), 0.0);
        assert_eq!(median_of_min(&t, &q).unwrap(), 3.0);
    }

    #[test]
    fn two_record_atlas() {
        let atlas = Atlas::new(vec![rec("a", "", "x", &["01"]), rec("b", "", "y", &["11"])]).unwrap();
        let r = atlas.leave_one_out("a", Exclusion::Patient).unwrap();
        assert_eq!(r.hits.len(), 1);
        assert_eq!(r.hits[0].wsi_id, "b");
        assert!(matches!(
            atlas.leave_one_out("zzz", Exclusion::Patient),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn ties_break_by_id_and_patients_are_excluded() {
        let atlas = Atlas::new(vec![
            rec("q", "p1", "x", &["0000"]),
            rec("s2", "p1", "x", &["0000"]),
            rec("c", "p3", "y", &["0001"]),
            rec("b", "p2", "y", &["0001"]),
        ])
        .unwrap();
        let r = atlas.leave_one_out("q", Exclusion::Patient).unwrap();
        let ids: Vec<_> = r.hits.iter().map(|h| h.wsi_id.as_str()).collect();
        assert_eq!(ids, vec!["b", "c"]);

        let r = atlas.leave_one_out("q", Exclusion::Slide).unwrap();
        let ids: Vec<_> = r.hits.iter().map(|h| h.wsi_id.as_str()).collect();
        assert_eq!(ids, vec!["s2", "b", "c"]);
        assert!(ids.iter().all(|&id| id != "q"));
    }

    #[test]
    fn blank_patient_defaults_to_slide() {
        assert_eq!(rec("w9", "", "x", &["1"]).patient_id, "w9");
    }

    #[test]
    fn build_record_bookkeeping() {
        let rows = (0..5u32)
            .map(|i| (i, (0..1024).map(|j| ((j * (i + 3)) % 17) as f32).collect()))
            .collect();
        let feats = EmbeddingSet::from_rows("w", rows).unwrap();
        let montage = Montage {
            wsi_id: "w".into(),
            method: Method::Sdm,
            seed: 0,
            selections: [4u32, 0, 2]
                .iter()
                .enumerate()
                .map(|(k, &i)| Selection { key: k as u64, member_count: 1, selected_index: i })
                .collect(),
        };
        let r = build_record("w", "p", "lab", &montage, &feats).unwrap();
        assert_eq!(r.barcodes.len(), 3);
        assert!(r.barcodes.iter().all(|b| b.nbits() == 1023));
        assert_eq!(r.barcodes[0], minmax_barcode(feats.get(4).unwrap().values()).unwrap());

        let mut missing = montage.clone();
        missing.selections[1].selected_index = 99;
        assert!(matches!(
            build_record("w", "p", "lab", &missing, &feats),
            Err(Error::MissingEmbedding(99))
        ));

        let empty = Montage { selections: vec![], ..montage };
        assert!(matches!(
            build_record("w", "p", "lab", &empty, &feats),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn file_round_trip_and_rejections() {
        let atlas = Atlas::new(vec![
            rec("a", "pa", "x", &["1011000001", "0000000001"]),
            rec("b", "pb", "y", &["1111111111"]),
        ])
        .unwrap();
        let bytes = atlas.to_bytes().unwrap();
        assert_eq!(&bytes[..12], &[0x41, 0x54, 0x4C, 0x31, 2, 0, 0, 0, 10, 0, 0, 0]);
        // "a" record: 1+"a", 2+"pa", 1+"x", K=2, 2 x 2 bytes
        assert_eq!(&bytes[12..15], &[1, 0, b'a']);
        assert_eq!(Atlas::from_bytes(&bytes).unwrap(), atlas);

        for cut in [3, 11, 13, bytes.len() - 1] {
            assert!(matches!(Atlas::from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Atlas::from_bytes(&extra).is_err());

        assert!(Atlas::new(vec![rec("a", "", "x", &["10"]), rec("b", "", "x", &["101"])]).is_err());
        assert!(Atlas::new(vec![rec("a", "", "x", &["10"]), rec("a", "", "x", &["10"])]).is_err());
    }

    #[test]
    fn mixed_nbits_file_is_rejected() {
        // Hand-build a file whose second record carries a padding bit beyond nbits=4.
        let mut bytes = ATLAS_MAGIC.to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for (id, code) in [("a", 0x0Fu8), ("b", 0x1F)] {
            for s in [id, id, "x"] {
                bytes.extend_from_slice(&(s.len() as u16).to_le_bytes());
                bytes.extend_from_slice(s.as_bytes());
            }
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.push(code);
        }
        let err = Atlas::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == bytes.len() - 1));
    }
}
