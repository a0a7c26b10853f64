use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wsi_montage::atlas::{build_record, Atlas, Exclusion, WsiRecord};
use wsi_montage::embedding::{load_embeddings, save_embeddings, EmbeddingSet};
use wsi_montage::eval::{compare_reports, evaluate_atlas, MetricsReport};
use wsi_montage::patching::{retained_patches, TissueMask};
use wsi_montage::sdm::{run_sdm, Method, Montage};
use wsi_montage::synthetic::{SynthConfig, SyntheticDataset, TissueLayout};
use wsi_montage::{select_mosaic, write_atomic, Error};

use crate::args::{
    CompareArgs, EvaluateArgs, IndexArgs, MontageArgs, SearchArgs, SynthArgs,
};
use crate::labels::{labels_csv, read_labels, LabelRow};
use crate::{Cli, CliError, Command};

pub const N_LIST: [usize; 3] = [1, 3, 5];

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let workers = cli.workers;
    let work = move |buf: &mut Vec<u8>| match cli.command {
        Command::Synth(a) => cmd_synth(&a, buf),
        Command::Montage(a) => cmd_montage(&a, buf),
        Command::Index(a) => cmd_index(&a, buf),
        Command::Search(a) => cmd_search(&a, buf),
        Command::Evaluate(a) => cmd_evaluate(&a, buf),
        Command::Compare(a) => cmd_compare(&a, buf),
    };
    let mut buf = Vec::new();
    let result = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(|| work(&mut buf)),
        None => work(&mut buf),
    };
    out.write_all(&buf)?;
    result
}

fn line(out: &mut dyn Write, s: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", s.as_ref())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_dir() {
        return Err(CliError::Usage(format!("{what} directory {} does not exist", path.display())));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{what} file {} does not exist", path.display())));
    }
    Ok(())
}

/// `<dir>/<id>.<role>.emb`, falling back to `<dir>/<id>.emb`.
pub fn embedding_path(dir: &Path, wsi_id: &str, role: &str) -> Option<PathBuf> {
    [format!("{wsi_id}.{role}.emb"), format!("{wsi_id}.emb")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

fn load_for(dir: &Path, wsi_id: &str, role: &str) -> Result<EmbeddingSet, CliError> {
    let path = embedding_path(dir, wsi_id, role)
        .ok_or_else(|| CliError::Data(format!("no {role} embedding file for {wsi_id}")))?;
    let mut set = load_embeddings(&path)?;
    set.set_wsi_id(wsi_id);
    Ok(set)
}

/// Slide ids found as `<id>.<ext>` in `dir`, sorted.
fn ids_with_extension(dir: &Path, ext: &str) -> Result<Vec<String>, CliError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == ext) {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Sidecar listing slides that produced no montage, next to montages or atlases.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissedList {
    pub missed: Vec<String>,
}

pub fn missed_sidecar(atlas: &Path) -> PathBuf {
    let mut s = atlas.as_os_str().to_owned();
    s.push(".missed.json");
    PathBuf::from(s)
}

fn read_missed(path: &Path) -> Result<MissedList, CliError> {
    if !path.is_file() {
        return Ok(MissedList::default());
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = SynthConfig {
        classes: a.classes,
        slides_per_class: a.slides_per_class,
        patches: a.patches,
        low_dim: a.low_dim,
        high_dim: a.high_dim,
        sigma: a.sigma,
        separation: a.separation,
        types_per_class: a.types_per_class,
        layout: if a.shared_tissue {
            TissueLayout::Shared
        } else {
            TissueLayout::Disjoint
        },
        missed: a.missed,
        patching: a.patching.config(),
        seed: a.seed,
    };
    let ds = SyntheticDataset::new(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let masks = a.out.join("masks");
    let embeddings = a.out.join("embeddings");
    fs::create_dir_all(&masks)?;
    fs::create_dir_all(&embeddings)?;

    let rows = (0..ds.len())
        .into_par_iter()
        .map(|i| -> Result<LabelRow, CliError> {
            let s = ds.slide(i)?;
            s.mask.save(&masks.join(format!("{}.msk", s.wsi_id)))?;
            save_embeddings(&s.low, &embeddings.join(format!("{}.low.emb", s.wsi_id)))?;
            save_embeddings(&s.high, &embeddings.join(format!("{}.high.emb", s.wsi_id)))?;
            Ok(LabelRow {
                wsi_id: s.wsi_id,
                patient_id: s.patient_id,
                label: s.label,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_atomic(&a.out.join("labels.csv"), &labels_csv(&rows)?)?;
    line(
        out,
        format!(
            "synth: {} slides ({} without tissue), class separation {:.2} sigma -> {}",
            rows.len(),
            a.missed,
            ds.separation(),
            a.out.display()
        ),
    )
}

enum MontageOutcome {
    Selected { retained: usize, selected: usize },
    Missed,
    Failed(String),
}

fn montage_one(a: &MontageArgs, wsi_id: &str) -> Result<MontageOutcome, CliError> {
    let mask = TissueMask::load(&a.masks.join(format!("{wsi_id}.msk")))?;
    let cfg = a.patching.config();
    let retained = retained_patches(&mask, &cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    if retained.is_empty() {
        return Ok(MontageOutcome::Missed);
    }
    let set = load_for(&a.embeddings, wsi_id, "low")?;
    let keep: BTreeSet<u32> = retained.iter().map(|p| p.index).collect();
    let set = set.retain_indices(|i| keep.contains(&i));
    if set.len() != keep.len() {
        return Err(CliError::Data(format!(
            "{} of {} retained patches have no embedding",
            keep.len() - set.len(),
            keep.len()
        )));
    }
    let montage = match Method::from(a.method) {
        Method::Sdm => run_sdm(&set, a.seed)?,
        Method::Mosaic => select_mosaic(&set, &a.mosaic_config())?,
    };
    montage.save(&a.out.join(format!("{wsi_id}.json")))?;
    Ok(MontageOutcome::Selected {
        retained: set.len(),
        selected: montage.len(),
    })
}

pub fn cmd_montage(a: &MontageArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_dir(&a.masks, "masks")?;
    require_dir(&a.embeddings, "embeddings")?;
    a.patching
        .config()
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if a.method == crate::args::MethodArg::Mosaic {
        a.mosaic_config()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    fs::create_dir_all(&a.out)?;
    let ids = ids_with_extension(&a.masks, "msk")?;
    if ids.is_empty() {
        return Err(CliError::Data(format!("no .msk files in {}", a.masks.display())));
    }
    let outcomes: Vec<MontageOutcome> = ids
        .par_iter()
        .map(|id| match montage_one(a, id) {
            Ok(o) => Ok(o),
            Err(CliError::Usage(e)) => Err(CliError::Usage(e)),
            Err(e) => Ok(MontageOutcome::Failed(e.to_string())),
        })
        .collect::<Result<_, _>>()?;

    let mut missed = Vec::new();
    let mut failed = 0;
    for (id, o) in ids.iter().zip(&outcomes) {
        if !matches!(o, MontageOutcome::Selected { .. }) {
            // Drop any montage left over from an earlier run.
            let stale = a.out.join(format!("{id}.json"));
            if stale.is_file() {
                fs::remove_file(stale)?;
            }
        }
        match o {
            MontageOutcome::Selected { retained, selected } => {
                line(out, format!("{id}\tretained={retained}\tselected={selected}"))?
            }
            MontageOutcome::Missed => {
                missed.push(id.clone());
                line(out, format!("{id}\tMISSED"))?
            }
            MontageOutcome::Failed(e) => {
                failed += 1;
                line(out, format!("{id}\tERROR\t{e}"))?
            }
        }
    }
    write_json(&a.out.join("missed.json"), &MissedList { missed })?;
    match failed {
        0 => Ok(()),
        f if f == ids.len() => Err(CliError::Data(format!("all {f} slides failed"))),
        f => Err(CliError::Partial {
            failed: f,
            total: ids.len(),
        }),
    }
}

pub fn cmd_index(a: &IndexArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_dir(&a.montages, "montages")?;
    require_dir(&a.embeddings, "embeddings")?;
    require_file(&a.labels, "labels")?;
    let labels = read_labels(&a.labels)?;
    let montage_missed = read_missed(&a.montages.join("missed.json"))?;
    let montage_ids = ids_with_extension(&a.montages, "json")?
        .into_iter()
        .filter(|id| id != "missed")
        .collect::<BTreeSet<_>>();

    let mut errors: Vec<(String, String)> = montage_ids
        .iter()
        .filter(|id| !labels.contains_key(*id))
        .map(|id| (id.clone(), "no label in the labels manifest".to_string()))
        .collect();

    let work: Vec<&LabelRow> = labels.values().filter(|r| montage_ids.contains(&r.wsi_id)).collect();
    let built: Vec<Result<WsiRecord, String>> = work
        .par_iter()
        .map(|row| {
            let montage = Montage::load(&a.montages.join(format!("{}.json", row.wsi_id)))
                .map_err(|e| e.to_string())?;
            let high = load_for(&a.embeddings, &row.wsi_id, "high").map_err(|e| e.to_string())?;
            build_record(&row.wsi_id, &row.patient_id, &row.label, &montage, &high)
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut records = Vec::new();
    let mut missed: BTreeSet<String> = BTreeSet::new();
    for (row, r) in work.iter().zip(built) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => errors.push((row.wsi_id.clone(), e)),
        }
    }
    for id in labels.keys().filter(|id| !montage_ids.contains(*id)) {
        if montage_missed.missed.contains(id) {
            missed.insert(id.clone());
        } else {
            errors.push((id.clone(), "no montage file".to_string()));
        }
    }
    errors.sort();
    for (id, e) in &errors {
        line(out, format!("{id}\tERROR\t{e}"))?;
    }
    if records.is_empty() {
        return Err(CliError::Data("no slide could be indexed".into()));
    }
    let atlas = Atlas::new(records)?;
    atlas.save(&a.out)?;
    write_json(
        &missed_sidecar(&a.out),
        &MissedList {
            missed: missed.into_iter().collect(),
        },
    )?;
    let summary = describe_atlas(&a.out)?;
    line(out, summary)?;
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            failed: errors.len(),
            total: errors.len() + atlas.len(),
        })
    }
}

/// One-line summary of an atlas on disk (records, nbits, missed).
pub fn describe_atlas(path: &Path) -> Result<String, CliError> {
    let atlas = Atlas::load(path)?;
    let missed = read_missed(&missed_sidecar(path))?;
    Ok(format!(
        "atlas {}: records={} nbits={} labels={} missed={}",
        path.display(),
        atlas.len(),
        atlas.nbits(),
        atlas.label_set().len(),
        missed.missed.len()
    ))
}

pub fn cmd_search(a: &SearchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_file(&a.atlas, "atlas")?;
    let atlas = Atlas::load(&a.atlas)?;
    let ranking = atlas
        .leave_one_out(&a.query, a.exclude.into())
        .map_err(|e| match e {
            Error::NotFound(m) => CliError::Usage(m),
            e => e.into(),
        })?;
    line(out, format!("query {} ({})", ranking.query_id, ranking.query_label))?;
    for (rank, h) in ranking.hits.iter().take(a.top).enumerate() {
        line(out, format!("{}\t{}\t{}\t{}", rank + 1, h.wsi_id, h.label, h.distance))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: Method,
    pub exclusion: String,
    pub records: usize,
    pub nbits: usize,
    pub missed_wsis: usize,
    pub missed_ids: Vec<String>,
    pub results: BTreeMap<usize, MetricsReport>,
}

fn exclusion_name(e: Exclusion) -> String {
    match e {
        Exclusion::Patient => "patient",
        Exclusion::Slide => "slide",
    }
    .to_string()
}

fn evaluate_file(
    atlas_path: &Path,
    method: Method,
    exclusion: Exclusion,
) -> Result<(Atlas, EvaluationReport), CliError> {
    require_file(atlas_path, "atlas")?;
    let atlas = Atlas::load(atlas_path)?;
    if atlas.len() < 2 {
        return Err(CliError::Data(format!(
            "atlas {} has {} record(s); leave-one-out needs at least 2",
            atlas_path.display(),
            atlas.len()
        )));
    }
    let missed = read_missed(&missed_sidecar(atlas_path))?;
    let results = evaluate_atlas(&atlas, &N_LIST, exclusion, missed.missed.len())?;
    let report = EvaluationReport {
        method,
        exclusion: exclusion_name(exclusion),
        records: atlas.len(),
        nbits: atlas.nbits(),
        missed_wsis: missed.missed.len(),
        missed_ids: missed.missed,
        results,
    };
    Ok((atlas, report))
}

fn print_results(out: &mut dyn Write, report: &EvaluationReport) -> Result<(), CliError> {
    for (n, r) in &report.results {
        let label = if *n == 1 { "top-1".to_string() } else { format!("MV@{n}") };
        let mut s = format!(
            "{}\t{label}\taccuracy={:.4}\tmacro_f1={:.4}\tweighted_f1={:.4}",
            report.method, r.accuracy, r.macro_f1, r.weighted_f1
        );
        if r.capped_votes > 0 {
            s.push_str(&format!("\tcapped={}", r.capped_votes));
        }
        if r.ties_broken > 0 {
            s.push_str(&format!("\tties={}", r.ties_broken));
        }
        line(out, s)?;
    }
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let method = Method::from(a.method);
    let (_, report) = evaluate_file(&a.atlas, method, a.exclude.into())?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    for (n, r) in &report.results {
        write_atomic(
            &a.out.join(format!("confusion_{method}_{n}.csv")),
            r.confusion_csv().as_bytes(),
        )?;
    }
    line(
        out,
        format!(
            "evaluated {} records ({} missed)",
            report.records, report.missed_wsis
        ),
    )?;
    print_results(out, &report)
}

pub fn cmd_compare(a: &CompareArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let exclusion = a.exclude.into();
    let (sdm_atlas, sdm) = evaluate_file(&a.sdm_atlas, Method::Sdm, exclusion)?;
    let (mosaic_atlas, mosaic) = evaluate_file(&a.mosaic_atlas, Method::Mosaic, exclusion)?;

    let sdm_ids: BTreeMap<&str, &str> = sdm_atlas
        .records()
        .iter()
        .map(|r| (r.wsi_id.as_str(), r.label.as_str()))
        .collect();
    let mut shared = 0;
    for r in mosaic_atlas.records() {
        if let Some(l) = sdm_ids.get(r.wsi_id.as_str()) {
            shared += 1;
            if *l != r.label {
                return Err(CliError::Data(format!(
                    "slide {} has label {l} in the sdm atlas but {} in the mosaic atlas",
                    r.wsi_id, r.label
                )));
            }
        }
    }
    if shared == 0 {
        return Err(CliError::Data("the two atlases share no slide ids".into()));
    }

    let comparison = compare_reports(&sdm.results, &mosaic.results, sdm.records, mosaic.records)?;
    fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join("comparison.csv"), comparison.to_csv().as_bytes())?;
    write_json(&a.out.join("comparison.json"), &comparison)?;
    for report in [&sdm, &mosaic] {
        for (n, r) in &report.results {
            write_atomic(
                &a.out.join(format!("confusion_{}_{n}.csv", report.method)),
                r.confusion_csv().as_bytes(),
            )?;
        }
        print_results(out, report)?;
    }
    for s in [&comparison.sdm, &comparison.mosaic] {
        line(
            out,
            format!(
                "{}\taverage_rank={:.3}\tpatches_median={}\tpatches_std={:.2}\tmissed={}",
                s.method, s.average_rank, s.patch_stats.median, s.patch_stats.std, s.missed_wsis
            ),
        )?;
    }
    Ok(())
}
