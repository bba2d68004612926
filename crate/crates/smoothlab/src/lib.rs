//! smoothlab: a training laboratory for smooth neural networks.
//!
//! The crate pairs actual gradient-descent training runs with the
//! data-dependent quantities that govern them: distance from initialization,
//! descent-lemma step-size rules, Hessian spectral-norm probes,
//! stability-based generalization bounds computed from logged training
//! losses, NTK margin estimates at initialization, and a closed-form oracle
//! for large-step SGD on the XOR distribution.
//!
//! Modules follow the pipeline:
//!
//! - [`numerics`]: dense matrices, deterministic counter-based random
//!   streams, power-iteration spectral norms.
//! - [`net`]: the deep smooth MLP and the fixed-sign quadratic net, with
//!   exact backprop and Hessian-vector products.
//! - [`objective`]: classification losses, the empirical objective and its
//!   gradient, measured gradient/Hessian constants, step-size rules.
//! - [`trainer`]: full-batch gradient descent with per-iteration metric
//!   logging, descent checks, and width-condition verdicts.
//! - [`ntk`]: tangent-feature extraction, margin estimation, target-weight
//!   construction, and the stability bound evaluations.
//! - [`xor`]: the large-step XOR experiment with its expected-weight oracle.
//! - [`data`]: IDX ingestion, binarization/normalization, synthetic data,
//!   metrics CSV persistence.

pub mod config;
pub mod data;
pub mod net;
pub mod ntk;
pub mod numerics;
pub mod objective;
pub mod selfcheck;
pub mod trainer;
pub mod xor;

use std::path::{Path, PathBuf};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dataset invalid: {0}")]
    Dataset(String),

    #[error("zero direction vector")]
    ZeroVector,

    #[error("bad idx magic: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic { expected: u32, found: u32 },

    #[error("idx file truncated while reading {0}")]
    IdxTruncated(String),

    #[error("idx image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("csv format error: {0}")]
    Csv(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }
}
