//! Patch selection and slide-level similarity search for whole-slide images.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`patching`]: tile a low-magnification tissue mask and keep patches
//!    that are mostly tissue.
//! 2. [`sdm`]: reduce the retained patches to a montage with one patch per
//!    integer distance-to-centroid bin, or [`mosaic`] for the k-means baseline.
//! 3. [`barcode`] + [`atlas`]: binarize the montage's high-magnification
//!    features and store them per slide.
//! 4. [`eval`]: leave-one-patient-out search with median-of-minimum Hamming
//!    distances, scored by majority vote.
//!
//! Embeddings are read from `EMB1` files ([`embedding`]); no network runs here.

pub mod atlas;
pub mod barcode;
mod codec;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod mosaic;
pub mod patching;
mod rng;
pub mod sdm;
pub mod synthetic;

pub use atlas::{build_record, median_of_min, Atlas, Exclusion, Hit, Ranking, WsiRecord};
pub use barcode::{hamming, minmax_barcode, Barcode};
pub use codec::write_atomic;
pub use embedding::{load_embeddings, save_embeddings, Embedding, EmbeddingSet};
pub use error::{Error, Result};
pub use eval::{compute_metrics, majority_vote, MetricsReport, VoteResult};
pub use mosaic::{kmeans, select_mosaic, MosaicConfig};
pub use patching::{PatchRef, PatchingConfig, TissueMask};
pub use rng::stream_rng;
pub use sdm::{run_sdm, Method, Montage};
