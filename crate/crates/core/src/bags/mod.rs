//! Slide bags: the in-memory type, the binary file format, the manifest and
//! the synthetic generator.

pub mod format;
pub mod manifest;
pub mod synth;

use std::collections::HashSet;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::diff::Tensor;

pub use format::{decode_bag, encode_bag, read_bag, write_bag};
pub use manifest::{
    parse_manifest, parse_manifest_lenient, read_manifest, split_bags, Manifest, ManifestEntry,
    Split,
};
pub use synth::{generate_synthetic, SynthConfig, SynthSummary};

#[derive(Debug, Error)]
pub enum BagError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {0:?}, expected \"WSDB\"")]
    BadMagic([u8; 4]),
    #[error("unsupported bag format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated bag payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("bag payload has trailing bytes: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("bag must have n >= 1 and d >= 1 (n={n}, d={d})")]
    EmptyDimension { n: usize, d: usize },
    #[error("non-finite feature at flat index {index}")]
    NonFinite { index: usize },
    #[error("bag has {n} instances but {coords} coordinates")]
    CoordCount { n: usize, coords: usize },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("manifest line {line}: duplicate slide id {slide_id:?}")]
    DuplicateSlide { line: usize, slide_id: String },
    #[error("manifest line {line}: train slide {slide_id:?} has no non-expert score")]
    MissingNonExpert { line: usize, slide_id: String },
    #[error("unknown split {0:?} (expected train, val or test)")]
    UnknownSplit(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

impl BagError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        BagError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One slide's instance features (`n x d`) and patch-grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub features: Tensor,
    pub coords: Vec<(i32, i32)>,
}

impl Bag {
    pub fn new(
        slide_id: impl Into<String>,
        features: Tensor,
        coords: Vec<(i32, i32)>,
    ) -> Result<Self, BagError> {
        let bag = Self {
            slide_id: slide_id.into(),
            features,
            coords,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<(), BagError> {
        if self.features.rank() != 2 || self.n() == 0 || self.dim() == 0 {
            return Err(BagError::EmptyDimension {
                n: self.n(),
                d: self.dim(),
            });
        }
        if self.coords.len() != self.n() {
            return Err(BagError::CoordCount {
                n: self.n(),
                coords: self.coords.len(),
            });
        }
        if let Some(index) = self.features.data().iter().position(|v| !v.is_finite()) {
            return Err(BagError::NonFinite { index });
        }
        Ok(())
    }

    pub fn has_unique_coords(&self) -> bool {
        let set: HashSet<_> = self.coords.iter().collect();
        set.len() == self.coords.len()
    }

    /// Same bag with instances reordered so that new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Bag {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.features.numel());
        for &p in perm {
            data.extend_from_slice(self.features.row_slice(p));
        }
        Bag {
            slide_id: self.slide_id.clone(),
            features: Tensor::matrix(perm.len(), d, data).expect("permuted features"),
            coords: perm.iter().map(|&p| self.coords[p]).collect(),
        }
    }
}
