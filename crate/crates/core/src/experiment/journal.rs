use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::Strategy;
use crate::analysis::LayerDelta;

use super::ExperimentError;

/// One line of a run journal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JournalEvent {
    RunStarted {
        arm: String,
        arm_index: usize,
        run: usize,
        seed: u64,
        strategy: Strategy,
        freeze: i32,
        initial_size: usize,
        pool_size: usize,
        q: usize,
        rounds: usize,
        classes: Vec<String>,
        first_head_layer: i32,
        /// Digest of the settings shared by all runs; a journal written
        /// under different settings does not replay.
        config: String,
    },
    RoundTrained {
        round: usize,
        t_size: usize,
        accuracy: f64,
        train_accuracy: f64,
        class_counts: Vec<usize>,
        mad: Vec<LayerDelta>,
    },
    Scored {
        round: usize,
        strategy: Strategy,
        scored: usize,
    },
    Selected {
        round: usize,
        ids: Vec<usize>,
        scores: Vec<f64>,
    },
    LabelsRequested {
        round: usize,
        ids: Vec<usize>,
    },
    LabelsReceived {
        round: usize,
        labels: Vec<(usize, usize)>,
    },
    RoundDone {
        round: usize,
        t_size: usize,
        wall_ms: u64,
    },
    RunFinished {
        truncated: bool,
        failed: Option<String>,
    },
}

impl JournalEvent {
    /// Same event up to wall-clock fields.
    fn replays(&self, other: &JournalEvent) -> bool {
        match (self, other) {
            (
                JournalEvent::RoundDone { round, t_size, .. },
                JournalEvent::RoundDone {
                    round: r2,
                    t_size: t2,
                    ..
                },
            ) => round == r2 && t_size == t2,
            _ => self == other,
        }
    }
}

/// Reads a journal. A final line that does not parse is treated as an
/// interrupted write and dropped; a bad line elsewhere is an error.
pub fn read_journal(path: &Path) -> Result<Vec<JournalEvent>, ExperimentError> {
    let file = File::open(path).map_err(ExperimentError::io(path))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(ExperimentError::io(path))?;
    let mut events = Vec::new();
    let n = lines.len();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => events.push(e),
            Err(_) if i + 1 == n => break,
            Err(e) => {
                return Err(ExperimentError::Journal(format!(
                    "{}:{}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(events)
}

/// Append-only JSONL journal. Reopening an existing journal enters replay:
/// recorded events are checked against the recomputed ones until the
/// existing log is exhausted, then new events are appended.
pub struct Journal {
    path: PathBuf,
    existing: Vec<JournalEvent>,
    cursor: usize,
    file: Option<File>,
}

impl Journal {
    pub fn open(path: &Path) -> Result<Self, ExperimentError> {
        let existing = if path.exists() {
            read_journal(path)?
        } else {
            Vec::new()
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(ExperimentError::io(dir))?;
        }
        Ok(Journal {
            path: path.to_path_buf(),
            existing,
            cursor: 0,
            file: None,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Events already on disk when the journal was opened.
    pub fn existing(&self) -> &[JournalEvent] {
        &self.existing
    }

    pub fn is_complete(&self) -> bool {
        self.existing
            .iter()
            .any(|e| matches!(e, JournalEvent::RunFinished { .. }))
    }

    pub fn replaying(&self) -> bool {
        self.cursor < self.existing.len()
    }

    /// Labels recorded for `round` at the replay position, if any.
    pub fn replayed_labels(&self, round: usize) -> Option<Vec<(usize, usize)>> {
        match self.existing.get(self.cursor) {
            Some(JournalEvent::LabelsReceived { round: r, labels }) if *r == round => {
                Some(labels.clone())
            }
            _ => None,
        }
    }

    pub fn record(&mut self, event: JournalEvent) -> Result<(), ExperimentError> {
        if let Some(old) = self.existing.get(self.cursor) {
            if !old.replays(&event) {
                return Err(ExperimentError::JournalMismatch {
                    path: self.path.clone(),
                    index: self.cursor,
                    expected: serde_json::to_string(&event).unwrap_or_default(),
                    found: serde_json::to_string(old).unwrap_or_default(),
                });
            }
            self.cursor += 1;
            return Ok(());
        }
        if self.file.is_none() {
            // Rewrite so a dropped partial line does not linger.
            let mut f = File::create(&self.path).map_err(ExperimentError::io(&self.path))?;
            for e in &self.existing {
                writeln!(f, "{}", serde_json::to_string(e).expect("event serializes"))
                    .map_err(ExperimentError::io(&self.path))?;
            }
            drop(f);
            self.file = Some(
                OpenOptions::new()
                    .append(true)
                    .open(&self.path)
                    .map_err(ExperimentError::io(&self.path))?,
            );
        }
        let f = self.file.as_mut().expect("journal open");
        writeln!(
            f,
            "{}",
            serde_json::to_string(&event).expect("event serializes")
        )
        .and_then(|_| f.flush())
        .map_err(ExperimentError::io(&self.path))?;
        self.existing.push(event);
        self.cursor += 1;
        Ok(())
    }

    /// Fails if recorded events remain that the recomputation did not reach.
    pub fn finish(&self) -> Result<(), ExperimentError> {
        if let Some(extra) = self.existing.get(self.cursor) {
            return Err(ExperimentError::JournalMismatch {
                path: self.path.clone(),
                index: self.cursor,
                expected: "end of run".into(),
                found: serde_json::to_string(extra).unwrap_or_default(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn done(round: usize, wall_ms: u64) -> JournalEvent {
        JournalEvent::RoundDone {
            round,
            t_size: 10,
            wall_ms,
        }
    }

    #[test]
    fn replay_ignores_wall_clock() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let mut j = Journal::open(&path).unwrap();
        j.record(done(0, 5)).unwrap();
        j.record(JournalEvent::LabelsReceived {
            round: 1,
            labels: vec![(3, 1)],
        })
        .unwrap();
        drop(j);
        let mut j = Journal::open(&path).unwrap();
        assert!(j.replaying());
        j.record(done(0, 999)).unwrap();
        assert_eq!(j.replayed_labels(1), Some(vec![(3, 1)]));
        assert_eq!(j.replayed_labels(2), None);
        assert!(
            j.record(done(1, 0)).is_err(),
            "labels expected at this position"
        );
    }

    #[test]
    fn partial_last_line_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let good = serde_json::to_string(&done(0, 1)).unwrap();
        fs::write(&path, format!("{good}\n{{\"event\":\"round_do")).unwrap();
        let mut j = Journal::open(&path).unwrap();
        assert_eq!(j.existing().len(), 1);
        j.record(done(0, 1)).unwrap();
        j.record(done(1, 1)).unwrap();
        assert_eq!(read_journal(&path).unwrap().len(), 2);
        fs::write(&path, format!("garbage\n{good}\n")).unwrap();
        assert!(read_journal(&path).is_err());
    }

    #[test]
    fn floats_round_trip_exactly() {
        let e = JournalEvent::RoundTrained {
            round: 0,
            t_size: 10,
            accuracy: 0.1 + 0.2,
            train_accuracy: 1.0 / 3.0,
            class_counts: vec![4, 6],
            mad: vec![LayerDelta {
                layer: 0,
                mad: 1.234_567_890_123_456_7e-7,
                variance: 5e-324,
                count: 3,
            }],
        };
        let back: JournalEvent = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        assert_eq!(back, e);
    }
}
