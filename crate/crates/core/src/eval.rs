//! Majority-vote retrieval scoring and the montage-vs-mosaic comparison.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::atlas::{Atlas, Exclusion, Ranking};
use crate::error::{Error, Result};
use crate::sdm::Method;

/// Outcome of a majority vote over the top hits of one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteResult {
    pub query_id: String,
    pub true_label: String,
    pub predicted_label: String,
    /// Votes actually considered; smaller than requested when the ranking is short.
    pub n: usize,
    pub n_requested: usize,
    pub tie_broken: bool,
}

impl VoteResult {
    pub fn correct(&self) -> bool {
        self.true_label == self.predicted_label
    }

    pub fn capped(&self) -> bool {
        self.n != self.n_requested
    }
}

/// Most frequent label among the top `n` hits. A tie between labels goes to
/// whichever tied label appears first in the ranking. When fewer than `n` hits
/// exist, the largest odd count that fits is used instead.
pub fn majority_vote(ranking: &Ranking, n: usize) -> Result<VoteResult> {
    if n == 0 {
        return Err(Error::InvalidInput("vote size must be >= 1".into()));
    }
    let available = ranking.hits.len();
    if available == 0 {
        return Err(Error::EmptyInput(format!(
            "query {} has no retrieval candidates",
            ranking.query_id
        )));
    }
    let used = if n <= available {
        n
    } else if available % 2 == 1 {
        available
    } else {
        available - 1
    };
    let top = &ranking.hits[..used];
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for h in top {
        *counts.entry(h.label.as_str()).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let tied = counts.values().filter(|&&c| c == best).count();
    let predicted = top
        .iter()
        .find(|h| counts[h.label.as_str()] == best)
        .map(|h| h.label.clone())
        .expect("top hits are nonempty");
    Ok(VoteResult {
        query_id: ranking.query_id.clone(),
        true_label: ranking.query_label.clone(),
        predicted_label: predicted,
        n: used,
        n_requested: n,
        tie_broken: tied > 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PatchStats {
    pub median: f64,
    pub std: f64,
    pub min: usize,
    pub max: usize,
}

impl PatchStats {
    /// Median and population standard deviation of per-slide patch counts.
    pub fn from_counts(counts: &[usize]) -> Self {
        if counts.is_empty() {
            return PatchStats::default();
        }
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let mean = sorted.iter().sum::<usize>() as f64 / n as f64;
        let var = sorted.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        PatchStats {
            median,
            std: var.sqrt(),
            min: sorted[0],
            max: sorted[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub evaluated: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Row = true label, column = predicted label, both in `labels` order.
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    pub ties_broken: usize,
    pub capped_votes: usize,
    pub missed_wsis: usize,
    pub patch_stats: PatchStats,
}

impl MetricsReport {
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.confusion) {
            out.push_str(l);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, per-class precision/recall/F1 and their macro and
/// support-weighted averages. Zero denominators score 0. `missed_wsis` and
/// `patch_stats` are left at their defaults for the caller to fill.
pub fn compute_metrics(votes: &[VoteResult]) -> Result<MetricsReport> {
    if votes.is_empty() {
        return Err(Error::EmptyInput("no votes to score".into()));
    }
    let labels: Vec<String> = votes
        .iter()
        .flat_map(|v| [v.true_label.clone(), v.predicted_label.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pos: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let k = labels.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for v in votes {
        confusion[pos[v.true_label.as_str()]][pos[v.predicted_label.as_str()]] += 1;
    }

    let total = votes.len();
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
            let support: usize = confusion[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                label: labels[c].clone(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();

    // Averages run over classes present in the ground truth; labels that were
    // only ever predicted carry no support.
    let supported: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let macro_f1 = supported.iter().map(|m| m.f1).sum::<f64>() / supported.len() as f64;
    let weighted_f1 = supported
        .iter()
        .map(|m| m.f1 * m.support as f64)
        .sum::<f64>()
        / total as f64;

    Ok(MetricsReport {
        evaluated: total,
        accuracy: correct as f64 / total as f64,
        macro_f1,
        weighted_f1,
        per_class,
        labels,
        confusion,
        ties_broken: votes.iter().filter(|v| v.tie_broken).count(),
        capped_votes: votes.iter().filter(|v| v.capped()).count(),
        missed_wsis: 0,
        patch_stats: PatchStats::default(),
    })
}

/// Leave-one-out majority votes at each `n` over every record of an atlas.
pub fn evaluate_atlas(
    atlas: &Atlas,
    n_list: &[usize],
    exclusion: Exclusion,
    missed_wsis: usize,
) -> Result<BTreeMap<usize, MetricsReport>> {
    if atlas.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "leave-one-out needs at least 2 records, atlas has {}",
            atlas.len()
        )));
    }
    let rankings: Vec<Ranking> = atlas
        .leave_one_out_all(exclusion)
        .into_iter()
        .filter(|r| !r.hits.is_empty())
        .collect();
    if rankings.is_empty() {
        return Err(Error::EmptyInput(
            "no query has a candidate outside its own patient".into(),
        ));
    }
    let counts: Vec<usize> = atlas.records().iter().map(|r| r.barcodes.len()).collect();
    let stats = PatchStats::from_counts(&counts);
    n_list
        .iter()
        .map(|&n| {
            let votes = rankings
                .iter()
                .map(|r| majority_vote(r, n))
                .collect::<Result<Vec<_>>>()?;
            let mut report = compute_metrics(&votes)?;
            report.missed_wsis = missed_wsis;
            report.patch_stats = stats;
            Ok((n, report))
        })
        .collect()
}

/// Scores of one method at one `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

impl From<&MetricsReport> for MetricValues {
    fn from(r: &MetricsReport) -> Self {
        MetricValues {
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            weighted_f1: r.weighted_f1,
        }
    }
}

pub const METRIC_NAMES: [&str; 3] = ["accuracy", "macro_f1", "weighted_f1"];

impl MetricValues {
    pub fn get(&self, metric: &str) -> f64 {
        match metric {
            "accuracy" => self.accuracy,
            "macro_f1" => self.macro_f1,
            "weighted_f1" => self.weighted_f1,
            other => panic!("unknown metric {other}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub n: usize,
    pub sdm: f64,
    pub mosaic: f64,
    pub sdm_rank: u32,
    pub mosaic_rank: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub records: usize,
    pub missed_wsis: usize,
    pub patch_stats: PatchStats,
    pub average_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub sdm: MethodSummary,
    pub mosaic: MethodSummary,
}

impl Comparison {
    /// Long-format table: `metric,method,n,value,rank`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,method,n,value,rank\n");
        for r in &self.rows {
            out.push_str(&format!("{},sdm,{},{:.6},{}\n", r.metric, r.n, r.sdm, r.sdm_rank));
            out.push_str(&format!(
                "{},mosaic,{},{:.6},{}\n",
                r.metric, r.n, r.mosaic, r.mosaic_rank
            ));
        }
        for s in [&self.sdm, &self.mosaic] {
            out.push_str(&format!("average_rank,{},,{:.6},\n", s.method, s.average_rank));
            out.push_str(&format!("patches_median,{},,{:.6},\n", s.method, s.patch_stats.median));
            out.push_str(&format!("patches_std,{},,{:.6},\n", s.method, s.patch_stats.std));
            out.push_str(&format!("missed_wsis,{},,{},\n", s.method, s.missed_wsis));
        }
        out
    }
}

/// Rank of two scores where higher is better; equal scores share rank 1.
pub fn pair_ranks(a: f64, b: f64) -> (u32, u32) {
    match a.total_cmp(&b) {
        std::cmp::Ordering::Greater => (1, 2),
        std::cmp::Ordering::Less => (2, 1),
        std::cmp::Ordering::Equal => (1, 1),
    }
}

/// Side-by-side scores of two already-evaluated methods.
pub fn compare_reports(
    sdm: &BTreeMap<usize, MetricsReport>,
    mosaic: &BTreeMap<usize, MetricsReport>,
    sdm_records: usize,
    mosaic_records: usize,
) -> Result<Comparison> {
    let mut rows = Vec::new();
    for metric in METRIC_NAMES {
        for (&n, s) in sdm {
            let m = mosaic
                .get(&n)
                .ok_or_else(|| Error::InvalidInput(format!("mosaic report lacks n={n}")))?;
            let (a, b) = (MetricValues::from(s).get(metric), MetricValues::from(m).get(metric));
            let (ra, rb) = pair_ranks(a, b);
            rows.push(ComparisonRow {
                metric: metric.to_string(),
                n,
                sdm: a,
                mosaic: b,
                sdm_rank: ra,
                mosaic_rank: rb,
            });
        }
    }
    let mean = |f: fn(&ComparisonRow) -> u32| {
        rows.iter().map(|r| f(r) as f64).sum::<f64>() / rows.len().max(1) as f64
    };
    let summary = |method, reports: &BTreeMap<usize, MetricsReport>, records, avg| {
        let any = reports.values().next();
        MethodSummary {
            method,
            records,
            missed_wsis: any.map_or(0, |r| r.missed_wsis),
            patch_stats: any.map_or_else(PatchStats::default, |r| r.patch_stats),
            average_rank: avg,
        }
    };
    Ok(Comparison {
        sdm: summary(Method::Sdm, sdm, sdm_records, mean(|r| r.sdm_rank)),
        mosaic: summary(Method::Mosaic, mosaic, mosaic_records, mean(|r| r.mosaic_rank)),
        rows,
    })
}

/// Evaluates both atlases and ranks them metric by metric.
pub fn compare_methods(
    atlas_sdm: &Atlas,
    atlas_mosaic: &Atlas,
    n_list: &[usize],
    exclusion: Exclusion,
    missed: (usize, usize),
) -> Result<Comparison> {
    let sdm_labels: BTreeMap<&str, &str> = atlas_sdm
        .records()
        .iter()
        .map(|r| (r.wsi_id.as_str(), r.label.as_str()))
        .collect();
    let mut shared = 0;
    for r in atlas_mosaic.records() {
        if let Some(&l) = sdm_labels.get(r.wsi_id.as_str()) {
            shared += 1;
            if l != r.label {
                return Err(Error::InvalidInput(format!(
                    "slide {} is labelled {l} in one atlas and {} in the other",
                    r.wsi_id, r.label
                )));
            }
        }
    }
    if shared == 0 {
        return Err(Error::InvalidInput("the two atlases share no slide ids".into()));
    }
    let s = evaluate_atlas(atlas_sdm, n_list, exclusion, missed.0)?;
    let m = evaluate_atlas(atlas_mosaic, n_list, exclusion, missed.1)?;
    compare_reports(&s, &m, atlas_sdm.len(), atlas_mosaic.len())
}
