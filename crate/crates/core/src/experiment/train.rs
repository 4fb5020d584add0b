use rayon::prelude::*;

use crate::autodiff::{Adam, AdamConfig, ForwardMode};
use crate::config::TrainingConfig;
use crate::model::{EncodedInput, ModelError, ModelState, ParameterSnapshot};
use crate::rng::{Purpose, RngStream, StreamKey};
use crate::Scalar;

use super::ExperimentError;

const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug)]
pub struct TrainedRound<T> {
    pub model: ModelState<T>,
    /// Parameters before the first epoch.
    pub theta0: ParameterSnapshot<T>,
    /// Parameters after the last epoch.
    pub theta_final: ParameterSnapshot<T>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a copy of `start` on every labeled element for `cfg.epochs`
/// epochs. Epoch order and dropout masks are keyed by `(seed, round, epoch)`.
pub fn train_round<T: Scalar>(
    start: &ModelState<T>,
    labeled: &[(usize, usize)],
    inputs: &[EncodedInput],
    cfg: &TrainingConfig,
    seed: u64,
    round: usize,
) -> Result<TrainedRound<T>, ExperimentError> {
    if labeled.is_empty() {
        return Err(ExperimentError::Config("training set is empty".into()));
    }
    let mut model = start.clone();
    let theta0 = model.snapshot(0);
    let mut adam = Adam::new(AdamConfig::default());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = labeled.to_vec();
        RngStream::new(
            seed,
            StreamKey::new(Purpose::Shuffle)
                .with(round as u64)
                .with(epoch as u64),
        )
        .shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(EncodedInput, usize)> = chunk
                .iter()
                .map(|&(id, y)| (inputs[id].clone(), y))
                .collect();
            let key = StreamKey::new(Purpose::Train)
                .with(round as u64)
                .with(epoch as u64)
                .with(b as u64);
            let step = model.train_step(
                &batch,
                &mut adam,
                cfg.encoder_lr,
                cfg.head_lr,
                &mut RngStream::new(seed, key),
            );
            let loss = match step {
                Ok(s) => s.loss.as_f64(),
                Err(ModelError::Tensor(crate::autodiff::TensorError::NonFiniteGradient {
                    ..
                })) => f64::NAN,
                Err(e) => return Err(e.into()),
            };
            if !loss.is_finite() {
                return Err(ExperimentError::NonFiniteLoss { round, epoch });
            }
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    let theta_final = model.snapshot(cfg.epochs as u32);
    Ok(TrainedRound {
        model,
        theta0,
        theta_final,
        epoch_losses,
    })
}

/// Predicted class (arg-max, lowest index on ties) per input in eval mode.
pub fn predict<T: Scalar>(
    model: &ModelState<T>,
    inputs: &[EncodedInput],
) -> Result<Vec<usize>, ExperimentError> {
    let chunks: Vec<Vec<usize>> = inputs
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let p = model.classify(chunk, ForwardMode::Eval, None)?;
            Ok((0..chunk.len())
                .map(|r| {
                    let row = p.row(r);
                    (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b })
                })
                .collect())
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(chunks.concat())
}

pub fn evaluate<T: Scalar>(
    model: &ModelState<T>,
    inputs: &[EncodedInput],
    labels: &[usize],
) -> Result<f64, ExperimentError> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(model, inputs)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / inputs.len() as f64)
}
