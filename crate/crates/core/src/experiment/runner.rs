use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::acquisition::{score_pool, select_top_q, Strategy};
use crate::analysis::{mad_per_layer, AccuracyRow, ArmReport, ClassRow, LayerDelta, ReportData};
use crate::config::RunConfig;
use crate::model::{EncoderBase, FreezeSpec, ModelState, ParameterSnapshot};
use crate::rng::{Purpose, RngStream, StreamKey};
use crate::Scalar;

use super::journal::{read_journal, Journal, JournalEvent};
use super::labels::{BatchContext, LabelSource, LabelTask, RunStatus};
use super::pool::{make_subset, PoolState};
use super::train::{evaluate, train_round};
use super::{EncodedDataset, ExperimentError};

pub const JOURNAL_DIR: &str = "journals";
pub const SCORES_DIR: &str = "scores";
pub const SNAPSHOT_DIR: &str = "snapshots";

/// Outcome of one round of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// Size of the training set used this round.
    pub t_size: usize,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub class_counts: Vec<usize>,
    pub mad: Vec<LayerDelta>,
    /// Selected `(element_id, score)`; empty in the last round.
    pub selected: Vec<(usize, f64)>,
    pub labels: Vec<(usize, usize)>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    /// The pool ran out before the last round.
    pub truncated: bool,
    pub failed: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub strategy: Strategy,
    pub freeze: i32,
    pub runs: Vec<RunResult>,
}

impl ArmResult {
    pub fn label(&self) -> String {
        arm_label(self.strategy, self.freeze)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub arms: Vec<ArmResult>,
    pub classes: Vec<String>,
    pub first_head_layer: i32,
}

fn arm_label(strategy: Strategy, freeze: i32) -> String {
    format!("{}_f{}", strategy.name(), freeze)
}

fn journal_path(out: &Path, label: &str, run: usize) -> PathBuf {
    out.join(JOURNAL_DIR)
        .join(format!("{label}-run{run}.jsonl"))
}

impl ExperimentReport {
    /// Report tables over the runs that did not fail. Drift is taken from
    /// the last round and averaged over runs.
    pub fn report_data(&self) -> Result<ReportData, ExperimentError> {
        let mut accuracy = Vec::new();
        let mut arms = Vec::new();
        for arm in &self.arms {
            let ok: Vec<&RunResult> = arm.runs.iter().filter(|r| r.failed.is_none()).collect();
            if ok.is_empty() {
                continue;
            }
            for run in &ok {
                for rec in &run.records {
                    accuracy.push(AccuracyRow {
                        strategy: arm.strategy,
                        freeze: arm.freeze,
                        run: run.run,
                        round: rec.round,
                        t_size: rec.t_size,
                        accuracy: rec.accuracy,
                    });
                }
            }
            arms.push(ArmReport {
                strategy: arm.strategy,
                freeze: arm.freeze,
                mad: mean_final_mad(&ok)?,
                classes: class_rows(&ok, &self.classes),
            });
        }
        if accuracy.is_empty() {
            return Err(ExperimentError::Config(
                "every run failed; nothing to report".into(),
            ));
        }
        Ok(ReportData {
            accuracy,
            arms,
            first_head_layer: self.first_head_layer,
        })
    }
}

fn mean_final_mad(runs: &[&RunResult]) -> Result<Vec<LayerDelta>, ExperimentError> {
    let finals: Vec<&Vec<LayerDelta>> = runs
        .iter()
        .filter_map(|r| r.records.last().map(|x| &x.mad))
        .collect();
    let Some(first) = finals.first() else {
        return Ok(Vec::new());
    };
    let n = finals.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut mad = 0.0;
            let mut variance = 0.0;
            for f in &finals {
                let e = f.get(i).filter(|e| e.layer == d.layer).ok_or_else(|| {
                    ExperimentError::Config("runs of one arm have different layer structure".into())
                })?;
                mad += e.mad;
                variance += e.variance;
            }
            Ok(LayerDelta {
                layer: d.layer,
                mad: mad / n,
                variance: variance / n,
                count: d.count,
            })
        })
        .collect()
}

fn class_rows(runs: &[&RunResult], classes: &[String]) -> Vec<ClassRow> {
    let rounds = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    let n = runs.len() as f64;
    let mut out = Vec::new();
    for i in 0..rounds {
        let delta = runs
            .iter()
            .map(|r| {
                let c = &r.records[i].class_counts;
                (c.iter().max().unwrap_or(&0) - c.iter().min().unwrap_or(&0)) as f64
            })
            .sum::<f64>()
            / n;
        for (k, name) in classes.iter().enumerate() {
            let count = runs
                .iter()
                .map(|r| r.records[i].class_counts[k] as f64)
                .sum::<f64>()
                / n;
            out.push(ClassRow {
                round: runs[0].records[i].round,
                class: name.clone(),
                count,
                delta,
            });
        }
    }
    out
}

struct Job<'a, T> {
    cfg: &'a RunConfig,
    data: &'a EncodedDataset,
    base: Option<&'a EncoderBase<T>>,
    out: &'a Path,
    source: &'a dyn LabelSource,
    arm_index: usize,
    strategy: Strategy,
    freeze: FreezeSpec,
    run: usize,
    digest: &'a str,
}

/// Fingerprint of everything that shapes a run besides its arm and seed:
/// model, training and loop settings, the encoder base and the data.
fn config_digest<T: Scalar>(
    cfg: &RunConfig,
    data: &EncodedDataset,
    base: Option<&EncoderBase<T>>,
) -> String {
    let mut c = cfg.clone();
    c.data.manifest = PathBuf::new();
    c.sweep = None;
    let e = &mut c.experiment;
    e.strategy = Strategy::Bald;
    e.freeze = FreezeSpec(0);
    e.seeds.clear();
    e.num_runs = 0;
    e.label_source = crate::config::LabelSourceKind::Oracle;
    e.label_timeout_secs = 0;
    e.save_snapshots = false;
    let mut bytes = c.to_toml().into_bytes();
    for input in data.train.iter().chain(&data.eval) {
        bytes.extend(input.tokens.iter().flat_map(|t| (*t as u64).to_le_bytes()));
        bytes.extend(
            input
                .segments
                .iter()
                .flat_map(|t| (*t as u64).to_le_bytes()),
        );
    }
    bytes.extend(
        data.train_labels
            .iter()
            .chain(&data.eval_labels)
            .flat_map(|y| (*y as u64).to_le_bytes()),
    );
    if let Some(b) = base {
        b.write(&mut bytes).expect("in-memory write");
    }
    format!("{:016x}", crate::data::fnv1a64(&bytes))
}

/// Runs every `(strategy, freeze)` arm for every seed. Each run keeps a
/// journal under `out/journals`; existing journals are replayed and
/// verified, and finished ones are loaded without recomputation. Runs are
/// spread over threads when the label source allows it.
pub fn run_experiment<T: Scalar>(
    cfg: &RunConfig,
    data: &EncodedDataset,
    base: Option<&EncoderBase<T>>,
    out: &Path,
    source: &dyn LabelSource,
) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    if cfg.head.num_classes != data.classes() {
        return Err(ExperimentError::Config(format!(
            "head has {} classes but the dataset has {}",
            cfg.head.num_classes,
            data.classes()
        )));
    }
    let exp = &cfg.experiment;
    let pool_size = exp.pool_size.unwrap_or(data.train.len());
    if pool_size > data.train.len() || exp.initial_size >= pool_size {
        return Err(ExperimentError::Config(format!(
            "initial_size {} and pool_size {pool_size} do not fit {} training records",
            exp.initial_size,
            data.train.len()
        )));
    }
    let digest = config_digest(cfg, data, base);
    let digest = digest.as_str();
    let arms = cfg.arms();
    let jobs: Vec<Job<'_, T>> = arms
        .iter()
        .enumerate()
        .flat_map(|(arm_index, &(strategy, freeze))| {
            (0..exp.num_runs).map(move |run| Job {
                cfg,
                data,
                base,
                out,
                source,
                arm_index,
                strategy,
                freeze,
                run,
                digest,
            })
        })
        .collect();
    let results: Vec<RunResult> = if source.parallel() {
        jobs.par_iter().map(run_one).collect::<Result<_, _>>()?
    } else {
        jobs.iter().map(run_one).collect::<Result<_, _>>()?
    };
    let mut results = results.into_iter();
    let arms = arms
        .iter()
        .map(|&(strategy, freeze)| ArmResult {
            strategy,
            freeze: freeze.0,
            runs: results.by_ref().take(exp.num_runs).collect(),
        })
        .collect();
    Ok(ExperimentReport {
        arms,
        classes: data.dataset.classes.names().to_vec(),
        first_head_layer: cfg.encoder.layers as i32,
    })
}

fn write_snapshot<T: Scalar>(
    path: &Path,
    snap: &ParameterSnapshot<T>,
) -> Result<(), ExperimentError> {
    let f = fs::File::create(path).map_err(ExperimentError::io(path))?;
    snap.write(std::io::BufWriter::new(f))
        .map_err(|e| ExperimentError::Model(e.into()))
}

fn run_one<T: Scalar>(job: &Job<'_, T>) -> Result<RunResult, ExperimentError> {
    let cfg = job.cfg;
    let exp = &cfg.experiment;
    let data = job.data;
    let label = arm_label(job.strategy, job.freeze.0);
    let seed = exp.seeds[job.run];
    let mut journal = Journal::open(&journal_path(job.out, &label, job.run))?;

    let mut base = ModelState::<T>::build(
        cfg.encoder.clone(),
        cfg.head.clone(),
        &RngStream::new(seed, StreamKey::new(Purpose::Init)),
    )?;
    if let Some(b) = job.base {
        base.load_encoder_base(b)?;
    }
    base.apply_freeze(job.freeze)?;

    let pool_size = exp.pool_size.unwrap_or(data.train.len());
    let started = JournalEvent::RunStarted {
        arm: label.clone(),
        arm_index: job.arm_index,
        run: job.run,
        seed,
        strategy: job.strategy,
        freeze: job.freeze.0,
        initial_size: exp.initial_size,
        pool_size,
        q: exp.q,
        rounds: exp.rounds,
        classes: data.dataset.classes.names().to_vec(),
        first_head_layer: base.first_head_layer(),
        config: job.digest.to_string(),
    };
    if journal.is_complete() {
        // Finished runs are trusted only under the same settings.
        journal.record(started)?;
        let (_, result) = run_from_events(journal.existing())?;
        return Ok(result);
    }

    let ids = make_subset(data.train.len(), pool_size)?;
    let initial: Vec<(usize, usize)> = ids[..exp.initial_size]
        .iter()
        .map(|&id| (id, data.train_labels[id]))
        .collect();
    let mut pool = PoolState::new(initial, ids[exp.initial_size..].to_vec(), data.classes())?;
    let acq = exp.acquisition(job.strategy);
    journal.record(started)?;

    let status = |round: usize, pool: &PoolState, acc: Option<f64>, finished: bool| RunStatus {
        arm: label.clone(),
        run: job.run,
        round,
        rounds: exp.rounds,
        t_size: pool.t_size(),
        class_counts: pool.class_counts().to_vec(),
        last_accuracy: acc,
        finished,
    };

    let mut records = Vec::new();
    let mut truncated = false;
    let mut prev: Option<ModelState<T>> = None;
    let mut last_acc = None;
    for round in 0..=exp.rounds {
        let clock = Instant::now();
        job.source.status(&status(round, &pool, last_acc, false));
        let start = match (&prev, cfg.training.warm_start) {
            (Some(m), true) => m,
            _ => &base,
        };
        let trained = match train_round(
            start,
            pool.labeled(),
            &data.train,
            &cfg.training,
            seed,
            round,
        ) {
            Ok(t) => t,
            Err(e @ ExperimentError::NonFiniteLoss { .. }) => {
                let msg = e.to_string();
                journal.record(JournalEvent::RunFinished {
                    truncated,
                    failed: Some(msg.clone()),
                })?;
                return Ok(RunResult {
                    run: job.run,
                    seed,
                    records,
                    truncated,
                    failed: Some(msg),
                });
            }
            Err(e) => return Err(e),
        };
        let accuracy = evaluate(&trained.model, &data.eval, &data.eval_labels)?;
        let (t_inputs, t_labels): (Vec<_>, Vec<_>) = pool
            .labeled()
            .iter()
            .map(|&(id, y)| (data.train[id].clone(), y))
            .unzip();
        let train_accuracy = evaluate(&trained.model, &t_inputs, &t_labels)?;
        let mad = mad_per_layer(&trained.theta0, &trained.theta_final)?;
        if exp.save_snapshots {
            let dir = job.out.join(SNAPSHOT_DIR);
            fs::create_dir_all(&dir).map_err(ExperimentError::io(&dir))?;
            let stem = format!("{label}-run{}-round{round}", job.run);
            write_snapshot(&dir.join(format!("{stem}-pre.ckpt")), &trained.theta0)?;
            write_snapshot(&dir.join(format!("{stem}-post.ckpt")), &trained.theta_final)?;
        }
        journal.record(JournalEvent::RoundTrained {
            round,
            t_size: pool.t_size(),
            accuracy,
            train_accuracy,
            class_counts: pool.class_counts().to_vec(),
            mad: mad.clone(),
        })?;
        last_acc = Some(accuracy);
        let mut rec = RoundRecord {
            round,
            t_size: pool.t_size(),
            accuracy,
            train_accuracy,
            class_counts: pool.class_counts().to_vec(),
            mad,
            selected: Vec::new(),
            labels: Vec::new(),
            wall_ms: 0,
        };

        if round < exp.rounds {
            if pool.u_size() == 0 {
                truncated = true;
            } else {
                let candidates: Vec<_> = pool
                    .unlabeled()
                    .iter()
                    .map(|&id| (id, data.train[id].clone()))
                    .collect();
                let table = score_pool(&trained.model, &candidates, &acq, seed, round)?;
                let dir = job.out.join(SCORES_DIR);
                fs::create_dir_all(&dir).map_err(ExperimentError::io(&dir))?;
                let path = dir.join(format!("{label}-run{}-round{round}.csv", job.run));
                table.write_csv(fs::File::create(&path).map_err(ExperimentError::io(&path))?)?;
                let q = exp.q.min(table.len());
                truncated |= q < exp.q;
                let chosen = select_top_q(&table, q)?;
                let scores: Vec<f64> = chosen
                    .iter()
                    .map(|&id| table.score_of(id).expect("scored"))
                    .collect();
                journal.record(JournalEvent::Scored {
                    round,
                    strategy: job.strategy,
                    scored: table.len(),
                })?;
                journal.record(JournalEvent::Selected {
                    round,
                    ids: chosen.clone(),
                    scores: scores.clone(),
                })?;
                journal.record(JournalEvent::LabelsRequested {
                    round,
                    ids: chosen.clone(),
                })?;
                let labels = match journal.replayed_labels(round) {
                    Some(l) => l,
                    None => {
                        let tasks: Vec<LabelTask> = chosen
                            .iter()
                            .zip(&scores)
                            .map(|(&id, &score)| {
                                let r = &data.dataset.train[id];
                                LabelTask {
                                    element_id: id,
                                    text_a: r.text_a.clone(),
                                    text_b: r.text_b.clone(),
                                    score,
                                }
                            })
                            .collect();
                        let ctx = BatchContext {
                            arm: label.clone(),
                            run: job.run,
                            round,
                        };
                        let answers = job.source.labels(&ctx, &tasks)?;
                        if answers.len() != chosen.len() {
                            return Err(ExperimentError::Labels(format!(
                                "{} labels for {} elements",
                                answers.len(),
                                chosen.len()
                            )));
                        }
                        chosen.iter().copied().zip(answers).collect()
                    }
                };
                journal.record(JournalEvent::LabelsReceived {
                    round,
                    labels: labels.clone(),
                })?;
                pool.add_labels(&labels)?;
                pool.check()?;
                rec.selected = chosen.into_iter().zip(scores).collect();
                rec.labels = labels;
            }
        }
        rec.wall_ms = clock.elapsed().as_millis() as u64;
        journal.record(JournalEvent::RoundDone {
            round,
            t_size: rec.t_size,
            wall_ms: rec.wall_ms,
        })?;
        records.push(rec);
        prev = Some(trained.model);
        if truncated && pool.u_size() == 0 {
            break;
        }
    }
    journal.record(JournalEvent::RunFinished {
        truncated,
        failed: None,
    })?;
    journal.finish()?;
    job.source
        .status(&status(exp.rounds, &pool, last_acc, true));
    Ok(RunResult {
        run: job.run,
        seed,
        records,
        truncated,
        failed: None,
    })
}

struct RunHeader {
    arm_index: usize,
    strategy: Strategy,
    freeze: i32,
    classes: Vec<String>,
    first_head_layer: i32,
}

fn run_from_events(events: &[JournalEvent]) -> Result<(RunHeader, RunResult), ExperimentError> {
    let bad = |m: &str| ExperimentError::Journal(m.to_string());
    let Some(JournalEvent::RunStarted {
        arm_index,
        run,
        seed,
        strategy,
        freeze,
        classes,
        first_head_layer,
        ..
    }) = events.first()
    else {
        return Err(bad("journal does not start with run_started"));
    };
    let header = RunHeader {
        arm_index: *arm_index,
        strategy: *strategy,
        freeze: *freeze,
        classes: classes.clone(),
        first_head_layer: *first_head_layer,
    };
    let mut result = RunResult {
        run: *run,
        seed: *seed,
        records: Vec::new(),
        truncated: false,
        failed: None,
    };
    let mut current: Option<RoundRecord> = None;
    let mut finished = false;
    for e in &events[1..] {
        match e {
            JournalEvent::RunStarted { .. } => return Err(bad("second run_started")),
            JournalEvent::RoundTrained {
                round,
                t_size,
                accuracy,
                train_accuracy,
                class_counts,
                mad,
            } => {
                current = Some(RoundRecord {
                    round: *round,
                    t_size: *t_size,
                    accuracy: *accuracy,
                    train_accuracy: *train_accuracy,
                    class_counts: class_counts.clone(),
                    mad: mad.clone(),
                    selected: Vec::new(),
                    labels: Vec::new(),
                    wall_ms: 0,
                })
            }
            JournalEvent::Selected { ids, scores, .. } => {
                let rec = current
                    .as_mut()
                    .ok_or_else(|| bad("selected before round_trained"))?;
                rec.selected = ids.iter().copied().zip(scores.iter().copied()).collect();
            }
            JournalEvent::Scored { .. } | JournalEvent::LabelsRequested { .. } => {}
            JournalEvent::LabelsReceived { labels, .. } => {
                let rec = current
                    .as_mut()
                    .ok_or_else(|| bad("labels before round_trained"))?;
                rec.labels = labels.clone();
            }
            JournalEvent::RoundDone { wall_ms, .. } => {
                let mut rec = current
                    .take()
                    .ok_or_else(|| bad("round_done before round_trained"))?;
                rec.wall_ms = *wall_ms;
                result.records.push(rec);
            }
            JournalEvent::RunFinished { truncated, failed } => {
                result.truncated = *truncated;
                result.failed = failed.clone();
                finished = true;
            }
        }
    }
    if !finished {
        return Err(bad("run has not finished"));
    }
    Ok((header, result))
}

/// Rebuilds an experiment report from the journals under `out/journals`.
pub fn report_from_journals(out: &Path) -> Result<ExperimentReport, ExperimentError> {
    let dir = out.join(JOURNAL_DIR);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(ExperimentError::io(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut arms: BTreeMap<usize, ArmResult> = BTreeMap::new();
    let mut meta: Option<(Vec<String>, i32)> = None;
    for path in &paths {
        let events = read_journal(path)?;
        let (h, run) = run_from_events(&events)
            .map_err(|e| ExperimentError::Journal(format!("{}: {e}", path.display())))?;
        match &meta {
            None => meta = Some((h.classes.clone(), h.first_head_layer)),
            Some((c, l)) if *c != h.classes || *l != h.first_head_layer => {
                return Err(ExperimentError::Journal(format!(
                    "{}: class list or model depth differs from other journals",
                    path.display()
                )))
            }
            _ => {}
        }
        let arm = arms.entry(h.arm_index).or_insert_with(|| ArmResult {
            strategy: h.strategy,
            freeze: h.freeze,
            runs: Vec::new(),
        });
        arm.runs.push(run);
    }
    let (classes, first_head_layer) =
        meta.ok_or_else(|| ExperimentError::Journal(format!("no journals in {}", dir.display())))?;
    let mut arms: Vec<ArmResult> = arms.into_values().collect();
    for a in &mut arms {
        a.runs.sort_by_key(|r| r.run);
    }
    Ok(ExperimentReport {
        arms,
        classes,
        first_head_layer,
    })
}
