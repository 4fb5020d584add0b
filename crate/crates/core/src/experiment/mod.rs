//! The active-learning loop: pool bookkeeping, per-round training,
//! labeling, the event journal and multi-run orchestration.

mod journal;
mod labels;
mod pool;
mod runner;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::acquisition::AcquisitionError;
use crate::analysis::AnalysisError;
use crate::data::{tokenize, DataError, Dataset, TokenizerConfig};
use crate::model::{EncodedInput, ModelError};

pub use journal::{read_journal, Journal, JournalEvent};
pub use labels::{
    BatchContext, LabelQueue, LabelSource, LabelTask, OracleLabels, PendingBatch, QueueProgress,
    RunStatus, SubmitError, SubmitOutcome,
};
pub use pool::{make_subset, PoolState};
pub use runner::{
    report_from_journals, run_experiment, ArmResult, ExperimentReport, RoundRecord, RunResult,
    JOURNAL_DIR, SCORES_DIR, SNAPSHOT_DIR,
};
pub use train::{evaluate, predict, train_round, TrainedRound};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("pool: {0}")]
    Pool(String),
    #[error("non-finite training loss in round {round}, epoch {epoch}")]
    NonFiniteLoss { round: usize, epoch: usize },
    #[error("journal: {0}")]
    Journal(String),
    #[error("{path}: event {index} does not replay: journal has {found}, recomputed {expected}")]
    JournalMismatch {
        path: PathBuf,
        index: usize,
        expected: String,
        found: String,
    },
    #[error("{arm} run {run} paused waiting for labels in round {round}")]
    Paused {
        arm: String,
        run: usize,
        round: usize,
    },
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("labels: {0}")]
    Labels(String),
}

impl ExperimentError {
    pub(crate) fn io(
        path: &std::path::Path,
    ) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
        move |e| ExperimentError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    }
}

/// A dataset with both splits tokenized; element ids index `train`.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    pub dataset: Dataset,
    pub train: Vec<EncodedInput>,
    pub eval: Vec<EncodedInput>,
    pub train_labels: Vec<usize>,
    pub eval_labels: Vec<usize>,
}

impl EncodedDataset {
    pub fn new(dataset: Dataset, tokenizer: &TokenizerConfig) -> Result<Self, ExperimentError> {
        let enc = |split: &[crate::data::DatasetRecord]| -> Result<Vec<EncodedInput>, DataError> {
            split.iter().map(|r| tokenize(r, tokenizer)).collect()
        };
        let train = enc(&dataset.train)?;
        let eval = enc(&dataset.eval)?;
        let train_labels = dataset
            .train
            .iter()
            .map(|r| dataset.label_index(r))
            .collect();
        let eval_labels = dataset
            .eval
            .iter()
            .map(|r| dataset.label_index(r))
            .collect();
        Ok(EncodedDataset {
            dataset,
            train,
            eval,
            train_labels,
            eval_labels,
        })
    }

    pub fn classes(&self) -> usize {
        self.dataset.classes.len()
    }
}
