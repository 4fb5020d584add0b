//! Uncertainty scoring and batch selection.

use std::cmp::Ordering;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ForwardMode, Tensor};
use crate::model::{EncodedInput, ModelError, ModelState};
use crate::rng::{Purpose, RngStream, StreamKey};
use crate::{xlogx, Scalar};

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("prediction samples: {0}")]
    InvalidSamples(String),
    #[error("invalid acquisition config: {0}")]
    InvalidConfig(String),
    #[error("cannot select {q} of {n} scored elements")]
    NotEnoughScores { q: usize, n: usize },
    #[error("non-finite score {score} for element {element_id}")]
    NonFiniteScore { element_id: usize, score: f64 },
    #[error("BALD needs a model with an MC-flagged dropout layer")]
    NoMcLayer,
    #[error("score table csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Bald,
    Random,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Bald => "bald",
            Strategy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bald" => Some(Strategy::Bald),
            "random" => Some(Strategy::Random),
            _ => None,
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub strategy: Strategy,
    /// Stochastic passes per element; 0 for random.
    pub samples: usize,
    pub q: usize,
    pub pool_cap: usize,
}

impl AcquisitionConfig {
    pub fn bald(samples: usize, q: usize, pool_cap: usize) -> Self {
        AcquisitionConfig {
            strategy: Strategy::Bald,
            samples,
            q,
            pool_cap,
        }
    }

    pub fn random(q: usize, pool_cap: usize) -> Self {
        AcquisitionConfig {
            strategy: Strategy::Random,
            samples: 0,
            q,
            pool_cap,
        }
    }

    pub fn validate(&self) -> Result<(), AcquisitionError> {
        let bad = |m: String| Err(AcquisitionError::InvalidConfig(m));
        match self.strategy {
            Strategy::Random if self.samples != 0 => {
                return bad(format!("random uses S = 0, got {}", self.samples))
            }
            Strategy::Bald if self.samples == 0 => return bad("BALD needs S >= 1".into()),
            _ => {}
        }
        if self.q == 0 {
            return bad("Q must be at least 1".into());
        }
        if self.pool_cap < self.q {
            return bad(format!(
                "pool_cap {} smaller than Q {}",
                self.pool_cap, self.q
            ));
        }
        Ok(())
    }
}

/// `S x C` softmax outputs of stochastic passes over one pool element.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSamples<T> {
    pub element_id: usize,
    probs: Tensor<T>,
}

impl<T: Scalar> PredictionSamples<T> {
    pub fn new(element_id: usize, probs: Tensor<T>) -> Result<Self, AcquisitionError> {
        let bad = |m: String| Err(AcquisitionError::InvalidSamples(m));
        if probs.shape().len() != 2 {
            return bad(format!("expected a matrix, got shape {:?}", probs.shape()));
        }
        let (s, c) = probs.rows_cols();
        if s == 0 || c == 0 {
            return bad(format!("empty sample matrix {s}x{c}"));
        }
        let tol = 1e-9f64.max(8.0 * c as f64 * T::epsilon().as_f64());
        for r in 0..s {
            let row = probs.row(r);
            if row.iter().any(|p| !(T::zero()..=T::one()).contains(p)) {
                return bad(format!("row {r} has an entry outside [0, 1]"));
            }
            let sum: f64 = row.iter().map(|p| p.as_f64()).sum();
            if (sum - 1.0).abs() > tol {
                return bad(format!("row {r} sums to {sum}"));
            }
        }
        Ok(PredictionSamples { element_id, probs })
    }

    pub fn from_rows(element_id: usize, rows: &[Vec<T>]) -> Result<Self, AcquisitionError> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(AcquisitionError::InvalidSamples("ragged rows".into()));
        }
        let t = Tensor::matrix(rows.len(), c, rows.concat())
            .map_err(|e| AcquisitionError::InvalidSamples(e.to_string()))?;
        Self::new(element_id, t)
    }

    pub fn samples(&self) -> usize {
        self.probs.rows_cols().0
    }

    pub fn classes(&self) -> usize {
        self.probs.rows_cols().1
    }

    pub fn row(&self, s: usize) -> &[T] {
        self.probs.row(s)
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }
}

/// Mutual information between the predicted label and the dropout mask:
/// entropy of the mean prediction minus the mean per-pass entropy, in nats.
pub fn bald_score<T: Scalar>(samples: &PredictionSamples<T>) -> T {
    let (s, c) = (samples.samples(), samples.classes());
    let n = T::from_usize_lossy(s);
    let mut mean = vec![T::zero(); c];
    let mut mean_entropy = T::zero();
    for r in 0..s {
        let row = samples.row(r);
        for (m, &p) in mean.iter_mut().zip(row) {
            *m += p;
        }
        mean_entropy -= row.iter().map(|&p| xlogx(p)).sum::<T>();
    }
    mean_entropy /= n;
    let entropy_of_mean = -mean.iter().map(|&m| xlogx(m / n)).sum::<T>();
    entropy_of_mean - mean_entropy
}

fn dropout_key(element_id: usize, round: usize, pass: usize) -> StreamKey {
    StreamKey::new(Purpose::Dropout)
        .with(element_id as u64)
        .with(round as u64)
        .with(pass as u64)
}

/// `samples` stochastic passes over precomputed penultimate features.
pub fn mc_samples_from_features<T: Scalar>(
    model: &ModelState<T>,
    features: &[T],
    samples: usize,
    seed: u64,
    round: usize,
    element_id: usize,
) -> Result<PredictionSamples<T>, AcquisitionError> {
    if !model.has_mc_layer() {
        return Err(AcquisitionError::NoMcLayer);
    }
    if samples == 0 {
        return Err(AcquisitionError::InvalidConfig(
            "S must be at least 1".into(),
        ));
    }
    let mut data = Vec::with_capacity(samples * model.head_config().num_classes);
    for s in 0..samples {
        let mut rng = RngStream::new(seed, dropout_key(element_id, round, s));
        data.extend(model.probs_from_features(
            features,
            ForwardMode::StochasticEval,
            Some(&mut rng),
        )?);
    }
    let c = model.head_config().num_classes;
    let t = Tensor::matrix(samples, c, data).map_err(ModelError::from)?;
    PredictionSamples::new(element_id, t)
}

/// One deterministic encoder pass followed by `samples` stochastic head
/// passes; pass `s` draws its dropout mask from key `(element_id, round, s)`
/// under `seed`.
pub fn mc_samples<T: Scalar>(
    model: &ModelState<T>,
    input: &EncodedInput,
    samples: usize,
    seed: u64,
    round: usize,
    element_id: usize,
) -> Result<PredictionSamples<T>, AcquisitionError> {
    if !model.has_mc_layer() {
        return Err(AcquisitionError::NoMcLayer);
    }
    let features = model.penultimate_features(input)?;
    mc_samples_from_features(model, &features, samples, seed, round, element_id)
}

/// Uniform score in `[0, 1)` keyed by `(seed, element_id, round)`.
pub fn random_score(seed: u64, element_id: usize, round: usize) -> f64 {
    let key = StreamKey::new(Purpose::Acquisition)
        .with(element_id as u64)
        .with(round as u64);
    RngStream::new(seed, key).uniform()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub round: usize,
    pub strategy: Strategy,
    /// `(element_id, score)` in pool order.
    pub entries: Vec<(usize, f64)>,
}

impl ScoreTable {
    pub fn new(
        round: usize,
        strategy: Strategy,
        entries: Vec<(usize, f64)>,
    ) -> Result<Self, AcquisitionError> {
        if let Some(&(element_id, score)) = entries.iter().find(|(_, s)| !s.is_finite()) {
            return Err(AcquisitionError::NonFiniteScore { element_id, score });
        }
        Ok(ScoreTable {
            round,
            strategy,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn score_of(&self, element_id: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|(id, _)| *id == element_id)
            .map(|&(_, s)| s)
    }

    /// CSV with header `round,element_id,strategy,score`. Scores use the
    /// shortest representation that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), AcquisitionError> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| AcquisitionError::Csv(e.to_string());
        out.write_record(["round", "element_id", "strategy", "score"])
            .map_err(err)?;
        for &(id, score) in &self.entries {
            out.write_record([
                self.round.to_string(),
                id.to_string(),
                self.strategy.name().to_string(),
                format!("{score:?}"),
            ])
            .map_err(err)?;
        }
        out.flush()
            .map_err(|e| AcquisitionError::Csv(e.to_string()))
    }

    /// Parses tables written by [`ScoreTable::write_csv`]; one table per
    /// `(round, strategy)` in first-seen order.
    pub fn read_csv<R: Read>(r: R) -> Result<Vec<ScoreTable>, AcquisitionError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut tables: Vec<ScoreTable> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| AcquisitionError::Csv(e.to_string()))?;
            let field = |k: usize| {
                rec.get(k).ok_or_else(|| {
                    AcquisitionError::Csv(format!("row {}: missing field {k}", i + 2))
                })
            };
            let num = |k: usize| -> Result<usize, AcquisitionError> {
                field(k)?
                    .parse()
                    .map_err(|e| AcquisitionError::Csv(format!("row {}: {e}", i + 2)))
            };
            let round = num(0)?;
            let id = num(1)?;
            let strategy = Strategy::parse(field(2)?)
                .ok_or_else(|| AcquisitionError::Csv(format!("row {}: unknown strategy", i + 2)))?;
            let score: f64 = field(3)?
                .parse()
                .map_err(|e| AcquisitionError::Csv(format!("row {}: {e}", i + 2)))?;
            match tables
                .iter_mut()
                .find(|t| t.round == round && t.strategy == strategy)
            {
                Some(t) => t.entries.push((id, score)),
                None => tables.push(ScoreTable {
                    round,
                    strategy,
                    entries: vec![(id, score)],
                }),
            }
        }
        Ok(tables)
    }
}

/// Descending by score, ties by ascending id.
fn rank(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `q` highest-scoring ids, best first; ties go to the smaller id.
pub fn select_top_q(scores: &ScoreTable, q: usize) -> Result<Vec<usize>, AcquisitionError> {
    let n = scores.len();
    if q > n {
        return Err(AcquisitionError::NotEnoughScores { q, n });
    }
    let mut sorted = scores.entries.clone();
    if q < n && q > 0 {
        sorted.select_nth_unstable_by(q - 1, rank);
        sorted.truncate(q);
    }
    sorted.sort_by(rank);
    sorted.truncate(q);
    Ok(sorted.into_iter().map(|(id, _)| id).collect())
}

/// Scores the first `pool_cap` elements of `pool` (stored order) with the
/// configured strategy. Work is spread over the rayon pool; the table is
/// in pool order regardless of thread count.
pub fn score_pool<T: Scalar>(
    model: &ModelState<T>,
    pool: &[(usize, EncodedInput)],
    cfg: &AcquisitionConfig,
    seed: u64,
    round: usize,
) -> Result<ScoreTable, AcquisitionError> {
    cfg.validate()?;
    let scored = &pool[..pool.len().min(cfg.pool_cap)];
    let entries: Vec<(usize, f64)> = match cfg.strategy {
        Strategy::Random => scored
            .iter()
            .map(|(id, _)| (*id, random_score(seed, *id, round)))
            .collect(),
        Strategy::Bald => {
            if !model.has_mc_layer() {
                return Err(AcquisitionError::NoMcLayer);
            }
            scored
                .par_iter()
                .map(|(id, input)| {
                    let s = mc_samples(model, input, cfg.samples, seed, round, *id)?;
                    Ok((*id, bald_score(&s).as_f64()))
                })
                .collect::<Result<_, AcquisitionError>>()?
        }
    };
    ScoreTable::new(round, cfg.strategy, entries)
}
