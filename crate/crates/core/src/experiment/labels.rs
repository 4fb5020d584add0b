use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::ExperimentError;

/// An element waiting for a label, with its acquisition score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTask {
    pub element_id: usize,
    pub text_a: String,
    pub text_b: Option<String>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchContext {
    pub arm: String,
    pub run: usize,
    pub round: usize,
}

/// Where a run currently stands; reported to label sources between steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub arm: String,
    pub run: usize,
    pub round: usize,
    pub rounds: usize,
    pub t_size: usize,
    pub class_counts: Vec<usize>,
    pub last_accuracy: Option<f64>,
    pub finished: bool,
}

/// Supplies class indices for selected elements, in task order.
pub trait LabelSource: Send + Sync {
    fn labels(
        &self,
        ctx: &BatchContext,
        tasks: &[LabelTask],
    ) -> Result<Vec<usize>, ExperimentError>;

    fn status(&self, _status: &RunStatus) {}

    /// Whether runs may request labels concurrently.
    fn parallel(&self) -> bool {
        false
    }
}

/// Reveals the gold training labels.
pub struct OracleLabels {
    labels: Vec<usize>,
}

impl OracleLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        OracleLabels { labels }
    }
}

impl LabelSource for OracleLabels {
    fn labels(
        &self,
        _ctx: &BatchContext,
        tasks: &[LabelTask],
    ) -> Result<Vec<usize>, ExperimentError> {
        tasks
            .iter()
            .map(|t| {
                self.labels.get(t.element_id).copied().ok_or_else(|| {
                    ExperimentError::Labels(format!("no gold label for element {}", t.element_id))
                })
            })
            .collect()
    }

    fn parallel(&self) -> bool {
        true
    }
}

/// The batch currently shown to annotators; `tasks` holds only the
/// elements that still lack a label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingBatch {
    pub arm: String,
    pub run: usize,
    pub round: usize,
    pub classes: Vec<String>,
    pub size: usize,
    pub tasks: Vec<LabelTask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub accepted: Vec<usize>,
    pub rejected: Vec<(usize, String)>,
    pub remaining: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueProgress {
    pub status: Option<RunStatus>,
    pub pending: usize,
    pub batch_size: usize,
    pub labeled_total: usize,
}

#[derive(Serialize, Deserialize)]
struct StoredLabel {
    arm: String,
    run: usize,
    round: usize,
    element_id: usize,
    label: String,
}

type AnswerKey = (String, usize, usize, usize);

struct QueueState {
    batch: Option<(BatchContext, Vec<LabelTask>)>,
    answers: HashMap<AnswerKey, usize>,
    status: Option<RunStatus>,
    store: Option<File>,
}

/// Human labeling: the loop blocks in [`LabelSource::labels`] until every
/// selected element is answered through [`LabelQueue::submit`], or the
/// timeout passes. Answers are appended to a JSONL store and reloaded on
/// restart; a later answer for the same element overrides an earlier one.
pub struct LabelQueue {
    classes: Vec<String>,
    timeout: Duration,
    store_path: Option<PathBuf>,
    state: Mutex<QueueState>,
    ready: Condvar,
}

impl LabelQueue {
    pub fn new(
        classes: Vec<String>,
        store: Option<&Path>,
        timeout: Duration,
    ) -> Result<Self, ExperimentError> {
        let mut answers = HashMap::new();
        let mut file = None;
        if let Some(path) = store {
            if path.exists() {
                let f = File::open(path).map_err(ExperimentError::io(path))?;
                for (i, line) in BufReader::new(f).lines().enumerate() {
                    let line = line.map_err(ExperimentError::io(path))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    // A torn final write is skipped like any unparsable line.
                    let Ok(s) = serde_json::from_str::<StoredLabel>(&line) else {
                        continue;
                    };
                    let c = classes.iter().position(|c| *c == s.label).ok_or_else(|| {
                        ExperimentError::Labels(format!(
                            "{}:{}: unknown class `{}`",
                            path.display(),
                            i + 1,
                            s.label
                        ))
                    })?;
                    answers.insert((s.arm, s.run, s.round, s.element_id), c);
                }
            }
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(ExperimentError::io(dir))?;
            }
            file = Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(ExperimentError::io(path))?,
            );
        }
        Ok(LabelQueue {
            classes,
            timeout,
            store_path: store.map(Path::to_path_buf),
            state: Mutex::new(QueueState {
                batch: None,
                answers,
                status: None,
                store: file,
            }),
            ready: Condvar::new(),
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn store_path(&self) -> Option<&Path> {
        self.store_path.as_deref()
    }

    fn lock(&self) -> MutexGuard<'_, QueueState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn key(ctx: &BatchContext, id: usize) -> AnswerKey {
        (ctx.arm.clone(), ctx.run, ctx.round, id)
    }

    fn unanswered(st: &QueueState) -> Vec<LabelTask> {
        match &st.batch {
            Some((ctx, tasks)) => tasks
                .iter()
                .filter(|t| !st.answers.contains_key(&Self::key(ctx, t.element_id)))
                .cloned()
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn pending(&self) -> Option<PendingBatch> {
        let st = self.lock();
        let (ctx, tasks) = st.batch.as_ref()?;
        Some(PendingBatch {
            arm: ctx.arm.clone(),
            run: ctx.run,
            round: ctx.round,
            classes: self.classes.clone(),
            size: tasks.len(),
            tasks: Self::unanswered(&st),
        })
    }

    pub fn progress(&self) -> QueueProgress {
        let st = self.lock();
        QueueProgress {
            status: st.status.clone(),
            pending: Self::unanswered(&st).len(),
            batch_size: st.batch.as_ref().map_or(0, |b| b.1.len()),
            labeled_total: st.answers.len(),
        }
    }

    /// Records `(element_id, class name)` answers for the pending batch.
    /// The whole request is refused when no batch is open or `round` names
    /// another round; otherwise each item is accepted or rejected on its
    /// own. Re-answering an element before the round closes overwrites it.
    pub fn submit(
        &self,
        labels: &[(usize, String)],
        round: Option<usize>,
    ) -> Result<SubmitOutcome, SubmitError> {
        let mut st = self.lock();
        let Some((ctx, tasks)) = st.batch.clone() else {
            return Err(SubmitError::NoBatch);
        };
        if let Some(r) = round.filter(|&r| r != ctx.round) {
            return Err(SubmitError::RoundClosed {
                submitted: r,
                pending: ctx.round,
            });
        }
        let mut accepted: Vec<usize> = Vec::new();
        let mut rejected = Vec::new();
        for (id, name) in labels {
            if !tasks.iter().any(|t| t.element_id == *id) {
                rejected.push((*id, "not in the pending batch".to_string()));
                continue;
            }
            let Some(c) = self.classes.iter().position(|c| c == name) else {
                rejected.push((*id, format!("unknown class `{name}`")));
                continue;
            };
            if let Some(f) = st.store.as_mut() {
                let rec = StoredLabel {
                    arm: ctx.arm.clone(),
                    run: ctx.run,
                    round: ctx.round,
                    element_id: *id,
                    label: name.clone(),
                };
                let path = self.store_path.as_deref().unwrap_or(Path::new("labels"));
                writeln!(
                    f,
                    "{}",
                    serde_json::to_string(&rec).expect("label serializes")
                )
                .and_then(|_| f.flush())
                .map_err(|e| SubmitError::Store(ExperimentError::io(path)(e)))?;
            }
            st.answers.insert(Self::key(&ctx, *id), c);
            if !accepted.contains(id) {
                accepted.push(*id);
            }
        }
        let remaining = Self::unanswered(&st).len();
        drop(st);
        self.ready.notify_all();
        Ok(SubmitOutcome {
            accepted,
            rejected,
            remaining,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error("no batch is awaiting labels")]
    NoBatch,
    #[error("round {submitted} is closed; round {pending} is awaiting labels")]
    RoundClosed { submitted: usize, pending: usize },
    #[error(transparent)]
    Store(ExperimentError),
}

impl LabelSource for LabelQueue {
    fn labels(
        &self,
        ctx: &BatchContext,
        tasks: &[LabelTask],
    ) -> Result<Vec<usize>, ExperimentError> {
        let deadline = Instant::now() + self.timeout;
        let mut st = self.lock();
        st.batch = Some((ctx.clone(), tasks.to_vec()));
        loop {
            let answers: Option<Vec<usize>> = tasks
                .iter()
                .map(|t| st.answers.get(&Self::key(ctx, t.element_id)).copied())
                .collect();
            if let Some(a) = answers {
                st.batch = None;
                return Ok(a);
            }
            let now = Instant::now();
            if now >= deadline {
                st.batch = None;
                return Err(ExperimentError::Paused {
                    arm: ctx.arm.clone(),
                    run: ctx.run,
                    round: ctx.round,
                });
            }
            st = self
                .ready
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    fn status(&self, status: &RunStatus) {
        self.lock().status = Some(status.clone());
        self.ready.notify_all();
    }
}
