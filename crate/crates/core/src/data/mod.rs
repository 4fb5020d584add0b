//! Dataset records, manifests, the hashing tokenizer and the synthetic
//! corpus generator.

mod dataset;
mod synth;
mod tokenizer;

use std::path::PathBuf;

use thiserror::Error;

pub use dataset::{
    load_dataset, load_manifest, load_split, write_split, ClassMap, DataFormat, Dataset,
    DatasetManifest, DatasetRecord,
};
pub use synth::{synth_generate, synth_records, SynthSpec};
pub use tokenizer::{
    fnv1a64, tokenize, TokenizerConfig, CLS_ID, FNV_OFFSET_BASIS, FNV_PRIME, MASK_ID, NUM_SPECIAL,
    PAD_ID, SEP_ID, UNK_ID,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: label `{label}` is not one of the manifest classes")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: String,
    },
    #[error("record {0} has empty text_a")]
    EmptyText(usize),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("synthetic corpus: {0}")]
    Synth(String),
}
