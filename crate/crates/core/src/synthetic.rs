//! Synthetic slides with known labels, for demos and end-to-end tests.
//!
//! Every slide gets a tissue mask whose dense patch grid retains exactly the
//! requested number of patches, plus low- and high-magnification embeddings
//! for every grid patch. Tissue patches are drawn around one of the class's
//! tissue-type prototypes; background patches sit around the origin.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::embedding::{Embedding, EmbeddingRecord, EmbeddingSet};
use crate::error::{Error, Result};
use crate::patching::{PatchingConfig, TissueMask};
use crate::rng::stream_rng;

/// How tissue types are shared between classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TissueLayout {
    /// Each class owns `types_per_class` private tissue types.
    #[default]
    Disjoint,
    /// One tissue type per class; class `c` mixes types `c` and `c + 1`
    /// (mod classes), so no single patch identifies its class.
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub slides_per_class: usize,
    pub patches: usize,
    pub low_dim: usize,
    pub high_dim: usize,
    pub sigma: f64,
    /// Minimum distance between class means, in units of `sigma`.
    pub separation: f64,
    pub types_per_class: usize,
    pub layout: TissueLayout,
    /// Extra slides whose masks hold no tissue at all.
    pub missed: usize,
    pub patching: PatchingConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 3,
            slides_per_class: 20,
            patches: 200,
            low_dim: 64,
            high_dim: 256,
            sigma: 1.0,
            separation: 8.0,
            types_per_class: 3,
            layout: TissueLayout::Disjoint,
            missed: 0,
            patching: PatchingConfig::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub wsi_id: String,
    pub patient_id: String,
    pub label: String,
    pub mask: TissueMask,
    pub low: EmbeddingSet,
    pub high: EmbeddingSet,
    /// Tissue type of each dense patch, `None` for background.
    pub tissue_type: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
struct Prototype {
    low: Vec<f64>,
    high: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    cfg: SynthConfig,
    types: Vec<Prototype>,
    class_types: Vec<Vec<usize>>,
    separation: f64,
}

const GRID_COLS: usize = 20;

impl SyntheticDataset {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        if cfg.classes == 0 || cfg.patches == 0 || cfg.types_per_class == 0 {
            return Err(Error::InvalidConfig(
                "classes, patches and types per class must be >= 1".into(),
            ));
        }
        if cfg.low_dim == 0 || cfg.high_dim < 2 {
            return Err(Error::InvalidConfig(
                "low_dim must be >= 1 and high_dim >= 2".into(),
            ));
        }
        if cfg.sigma.is_nan() || cfg.sigma <= 0.0 || cfg.separation.is_nan() || cfg.separation < 0.0 {
            return Err(Error::InvalidConfig("sigma must be > 0 and separation >= 0".into()));
        }
        cfg.patching.validate()?;

        let (n_types, class_types): (usize, Vec<Vec<usize>>) = match cfg.layout {
            TissueLayout::Disjoint => (
                cfg.classes * cfg.types_per_class,
                (0..cfg.classes)
                    .map(|c| (0..cfg.types_per_class).map(|t| c * cfg.types_per_class + t).collect())
                    .collect(),
            ),
            TissueLayout::Shared => {
                if cfg.classes < 3 {
                    return Err(Error::InvalidConfig(
                        "shared tissue layout needs at least 3 classes".into(),
                    ));
                }
                (
                    cfg.classes,
                    (0..cfg.classes).map(|c| vec![c, (c + 1) % cfg.classes]).collect(),
                )
            }
        };

        let mut rng = stream_rng(cfg.seed, u64::MAX);
        let coord = Normal::new(0.0, 4.0 * cfg.sigma).expect("finite scale");
        let mut types: Vec<Prototype> = (0..n_types)
            .map(|_| Prototype {
                low: (0..cfg.low_dim).map(|_| coord.sample(&mut rng)).collect(),
                high: (0..cfg.high_dim).map(|_| coord.sample(&mut rng)).collect(),
            })
            .collect();

        let mut ds = SyntheticDataset {
            cfg,
            types: Vec::new(),
            class_types,
            separation: 0.0,
        };
        let measured = ds.min_separation_of(&types);
        if measured < ds.cfg.separation * ds.cfg.sigma {
            let scale = ds.cfg.separation * ds.cfg.sigma / measured.max(f64::MIN_POSITIVE);
            for t in &mut types {
                t.low.iter_mut().for_each(|v| *v *= scale);
                t.high.iter_mut().for_each(|v| *v *= scale);
            }
        }
        ds.separation = ds.min_separation_of(&types) / ds.cfg.sigma;
        ds.types = types;
        Ok(ds)
    }

    fn class_mean(&self, types: &[Prototype], class: usize) -> Vec<f64> {
        let ids = &self.class_types[class];
        let mut mean = vec![0.0; self.cfg.low_dim];
        for &t in ids {
            for (m, v) in mean.iter_mut().zip(&types[t].low) {
                *m += v / ids.len() as f64;
            }
        }
        mean
    }

    fn min_separation_of(&self, types: &[Prototype]) -> f64 {
        let means: Vec<Vec<f64>> = (0..self.cfg.classes).map(|c| self.class_mean(types, c)).collect();
        let mut best = f64::INFINITY;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Smallest distance between two class means (low magnification), in sigmas.
    pub fn separation(&self) -> f64 {
        self.separation
    }

    pub fn len(&self) -> usize {
        self.cfg.classes * self.cfg.slides_per_class + self.cfg.missed
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label_of(&self, class: usize) -> String {
        format!("class{class}")
    }

    /// Generates slide `i`; slides past `classes * slides_per_class` are the
    /// tissue-free ones.
    pub fn slide(&self, i: usize) -> Result<SyntheticSlide> {
        if i >= self.len() {
            return Err(Error::NotFound(format!("synthetic slide {i}")));
        }
        let cfg = &self.cfg;
        let regular = cfg.classes * cfg.slides_per_class;
        let (class, wsi_id) = if i < regular {
            let class = i / cfg.slides_per_class;
            (class, format!("wsi-c{class}-{:03}", i % cfg.slides_per_class))
        } else {
            let j = i - regular;
            (j % cfg.classes, format!("wsi-empty-{j:03}"))
        };
        let has_tissue = i < regular;

        let p = &cfg.patching;
        let stride = p.stride() as usize;
        let size = p.patch_size as usize;
        let rows = cfg.patches.div_ceil(GRID_COLS);
        let cols = GRID_COLS.min(cfg.patches);
        // One spare background column and row around the tissue block.
        let (grid_w, grid_h) = (cols + 1, rows + 1);
        let width = (grid_w - 1) * stride + size;
        let height = (grid_h - 1) * stride + size;
        let is_tissue_cell = |cx: usize, cy: usize| has_tissue && cx < cols && cy * cols + cx < cfg.patches;
        // Tissue is the union of the tissue cells' footprints.
        let mut mask = TissueMask::filled(width as u32, height as u32, false)?;
        for cy in 0..grid_h {
            for cx in (0..grid_w).filter(|&cx| is_tissue_cell(cx, cy)) {
                mask.fill_rect(
                    (cx * stride) as u32,
                    (cy * stride) as u32,
                    size as u32,
                    size as u32,
                );
            }
        }

        let mut rng = stream_rng(cfg.seed, i as u64);
        let noise = Normal::new(0.0, cfg.sigma).expect("positive sigma");
        let types = &self.class_types[class];
        let mut tissue_type = Vec::with_capacity(grid_w * grid_h);
        let mut low = Vec::with_capacity(grid_w * grid_h);
        let mut high = Vec::with_capacity(grid_w * grid_h);
        let mut ordinal = 0usize;
        // Randomize which type starts so slides are not all aligned.
        let offset = rng.random_range(0..types.len());
        for cy in 0..grid_h {
            for cx in 0..grid_w {
                let idx = (cy * grid_w + cx) as u32;
                let t = if is_tissue_cell(cx, cy) {
                    let t = types[(ordinal + offset) % types.len()];
                    ordinal += 1;
                    Some(t)
                } else {
                    None
                };
                let sample = |proto: Option<&Vec<f64>>, dim: usize, rng: &mut _| -> Vec<f32> {
                    (0..dim)
                        .map(|k| (proto.map_or(0.0, |p| p[k]) + noise.sample(rng)) as f32)
                        .collect()
                };
                let lo = sample(t.map(|t| &self.types[t].low), cfg.low_dim, &mut rng);
                let hi = sample(t.map(|t| &self.types[t].high), cfg.high_dim, &mut rng);
                low.push(EmbeddingRecord { patch_index: idx, embedding: Embedding(lo) });
                high.push(EmbeddingRecord { patch_index: idx, embedding: Embedding(hi) });
                tissue_type.push(t);
            }
        }

        Ok(SyntheticSlide {
            patient_id: format!("patient-{wsi_id}"),
            label: self.label_of(class),
            mask,
            low: EmbeddingSet::new(wsi_id.clone(), cfg.low_dim, low)?,
            high: EmbeddingSet::new(wsi_id.clone(), cfg.high_dim, high)?,
            wsi_id,
            tissue_type,
        })
    }

    pub fn slides(&self) -> impl Iterator<Item = Result<SyntheticSlide>> + '_ {
        (0..self.len()).map(move |i| self.slide(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::retained_patches;

    fn small() -> SynthConfig {
        SynthConfig {
            classes: 3,
            slides_per_class: 2,
            patches: 45,
            low_dim: 16,
            high_dim: 32,
            missed: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn retained_patch_count_is_exact() {
        let ds = SyntheticDataset::new(small()).unwrap();
        let s = ds.slide(0).unwrap();
        let kept = retained_patches(&s.mask, &ds.config().patching).unwrap();
        assert_eq!(kept.len(), 45);
        for p in &kept {
            assert!(s.tissue_type[p.index as usize].is_some());
        }
        assert_eq!(s.low.len(), s.tissue_type.len());
    }

    #[test]
    fn tissue_free_slides_retain_nothing() {
        let ds = SyntheticDataset::new(small()).unwrap();
        assert_eq!(ds.len(), 7);
        let s = ds.slide(6).unwrap();
        assert_eq!(s.wsi_id, "wsi-empty-000");
        assert_eq!(s.mask.tissue_pixels(), 0);
        assert!(retained_patches(&s.mask, &ds.config().patching).unwrap().is_empty());
    }

    #[test]
    fn separation_is_enforced() {
        let ds = SyntheticDataset::new(SynthConfig { separation: 50.0, ..small() }).unwrap();
        assert!(ds.separation() >= 50.0 - 1e-9);
    }

    #[test]
    fn deterministic() {
        let a = SyntheticDataset::new(small()).unwrap().slide(3).unwrap();
        let b = SyntheticDataset::new(small()).unwrap().slide(3).unwrap();
        assert_eq!(a.low, b.low);
        assert_eq!(a.high, b.high);
        assert_eq!(a.mask, b.mask);
    }
}
