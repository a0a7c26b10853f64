use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wsi_montage::{Exclusion, Method, MosaicConfig, PatchingConfig};

#[derive(Debug, Parser)]
#[command(name = "wsi-montage", version, about = "Whole-slide image montage selection and barcode search")]
pub struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on this.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic masks, embeddings and labels for demos.
    Synth(SynthArgs),
    /// Select a montage (or mosaic) per slide.
    Montage(MontageArgs),
    /// Barcode montages into an ATL1 atlas.
    Index(IndexArgs),
    /// Rank the atlas against one of its slides.
    Search(SearchArgs),
    /// Leave-one-patient-out evaluation of an atlas.
    Evaluate(EvaluateArgs),
    /// Compare a montage atlas against a mosaic atlas.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Sdm,
    Mosaic,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Sdm => Method::Sdm,
            MethodArg::Mosaic => Method::Mosaic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExclusionArg {
    Patient,
    Slide,
}

impl From<ExclusionArg> for Exclusion {
    fn from(e: ExclusionArg) -> Self {
        match e {
            ExclusionArg::Patient => Exclusion::Patient,
            ExclusionArg::Slide => Exclusion::Slide,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PatchingArgs {
    #[arg(long, default_value_t = 128)]
    pub patch_size: u32,
    #[arg(long, default_value_t = 0.05)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0.70)]
    pub tissue_threshold: f64,
    #[arg(long, default_value_t = 2.5)]
    pub low_mag: f64,
    #[arg(long, default_value_t = 20.0)]
    pub high_mag: f64,
}

impl PatchingArgs {
    pub fn config(&self) -> PatchingConfig {
        let scale = self.high_mag / self.low_mag;
        PatchingConfig {
            patch_size: self.patch_size,
            overlap: self.overlap,
            tissue_threshold: self.tissue_threshold,
            low_mag: self.low_mag,
            high_mag: self.high_mag,
            high_patch_size: (self.patch_size as f64 * scale).round() as u32,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub slides_per_class: usize,
    #[arg(long, default_value_t = 200)]
    pub patches: usize,
    #[arg(long, default_value_t = 64)]
    pub low_dim: usize,
    #[arg(long, default_value_t = 256)]
    pub high_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Minimum class-mean separation in sigmas.
    #[arg(long, default_value_t = 8.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 3)]
    pub types_per_class: usize,
    /// Let neighbouring classes share tissue types.
    #[arg(long)]
    pub shared_tissue: bool,
    /// Extra slides with no tissue.
    #[arg(long, default_value_t = 0)]
    pub missed: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub patching: PatchingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct MontageArgs {
    /// Directory of `<wsi_id>.msk` tissue masks.
    #[arg(long)]
    pub masks: PathBuf,
    /// Directory of `<wsi_id>.low.emb` (or `<wsi_id>.emb`) embedding files.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Sdm)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub patching: PatchingArgs,
    #[arg(long, default_value_t = 0.05)]
    pub sample_fraction: f64,
    #[arg(long, default_value_t = 9)]
    pub clusters: usize,
    #[arg(long)]
    pub out: PathBuf,
}

impl MontageArgs {
    pub fn mosaic_config(&self) -> MosaicConfig {
        MosaicConfig {
            k: self.clusters,
            sample_fraction: self.sample_fraction,
            seed: self.seed,
            ..MosaicConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub montages: PathBuf,
    /// Directory of `<wsi_id>.high.emb` (or `<wsi_id>.emb`) embedding files.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// CSV with header `wsi_id,patient_id,label`.
    #[arg(long)]
    pub labels: PathBuf,
    /// Output atlas file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub atlas: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long, value_enum, default_value_t = ExclusionArg::Patient)]
    pub exclude: ExclusionArg,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub atlas: PathBuf,
    /// Tag used in output file names.
    #[arg(long, value_enum, default_value_t = MethodArg::Sdm)]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value_t = ExclusionArg::Patient)]
    pub exclude: ExclusionArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub sdm_atlas: PathBuf,
    #[arg(long)]
    pub mosaic_atlas: PathBuf,
    #[arg(long, value_enum, default_value_t = ExclusionArg::Patient)]
    pub exclude: ExclusionArg,
    #[arg(long)]
    pub out: PathBuf,
}
