//! Masked-token warm-up of the embeddings and encoder blocks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, CheckpointRecord, ForwardMode, Graph, ParamSlot, Tensor};
use crate::data::{MASK_ID, NUM_SPECIAL};
use crate::rng::{Purpose, RngStream, StreamKey};
use crate::Scalar;

use super::{
    slot, EncodedInput, EncoderConfig, HeadConfig, ModelError, ModelState, EMBEDDING_LAYER,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
}

fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}
fn default_mask_rate() -> f64 {
    0.15
}

impl PretrainConfig {
    pub fn new(steps: usize) -> Self {
        PretrainConfig {
            steps,
            batch_size: default_batch(),
            lr: default_lr(),
            mask_rate: default_mask_rate(),
        }
    }
}

/// Embedding and encoder-block parameters shared by every run of an
/// experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBase<T> {
    pub config: EncoderConfig,
    pub records: Vec<CheckpointRecord<T>>,
}

impl<T: Scalar> EncoderBase<T> {
    pub fn write<W: std::io::Write>(&self, w: W) -> Result<(), ModelError> {
        Ok(crate::autodiff::write_checkpoint(w, &self.records)?)
    }

    pub fn read<R: std::io::Read>(r: R, config: EncoderConfig) -> Result<Self, ModelError> {
        let records = crate::autodiff::read_checkpoint(r)?;
        // Validate against a freshly built structure.
        let mut probe: ModelState<T> = ModelState::build(
            config.clone(),
            HeadConfig::ffnn(2),
            &RngStream::new(0, StreamKey::new(Purpose::Init)),
        )?;
        probe.load_records(&records)?;
        let expected = probe.encoder_records().len();
        if records.len() != expected {
            return Err(ModelError::StructureMismatch(format!(
                "{} encoder tensors, expected {expected}",
                records.len()
            )));
        }
        Ok(EncoderBase { config, records })
    }
}

/// Masks about `rate` of the non-special tokens (at least one when any
/// exist). Returns the corrupted input and `(position, original id)` pairs.
fn mask_tokens(
    input: &EncodedInput,
    rate: f64,
    rng: &mut RngStream,
) -> (EncodedInput, Vec<(usize, usize)>) {
    let candidates: Vec<usize> = (0..input.len())
        .filter(|&i| input.tokens[i] >= NUM_SPECIAL)
        .collect();
    let mut picked: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.uniform::<f64>() < rate)
        .collect();
    if picked.is_empty() && !candidates.is_empty() {
        picked.push(candidates[rng.below(candidates.len())]);
    }
    let mut out = input.clone();
    let targets = picked
        .into_iter()
        .map(|i| {
            out.tokens[i] = MASK_ID;
            (i, input.tokens[i])
        })
        .collect();
    (out, targets)
}

impl<T: Scalar> ModelState<T> {
    /// Builds masked-token logits over the vocabulary for `batch` (output
    /// layer tied to the token table). Returns logits and target ids.
    fn mlm_logits(
        &self,
        g: &mut Graph<T>,
        vars: &[crate::autodiff::Var],
        bias: crate::autodiff::Var,
        batch: &[(EncodedInput, Vec<(usize, usize)>)],
        mut rng: Option<&mut RngStream>,
    ) -> Result<Option<(crate::autodiff::Var, Vec<usize>)>, ModelError> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (input, masked) in batch {
            if masked.is_empty() {
                continue;
            }
            let h = self.encode(g, vars, input, rng.as_deref_mut())?;
            let positions: Vec<usize> = masked.iter().map(|m| m.0).collect();
            rows.push(g.gather_rows(h, &positions)?);
            targets.extend(masked.iter().map(|m| m.1));
        }
        if rows.is_empty() {
            return Ok(None);
        }
        let x = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)?
        };
        let table = self.layer_vars(vars, EMBEDDING_LAYER)[slot::TOKEN];
        let logits = g.matmul_nt(x, table)?;
        Ok(Some((g.add_bias(logits, bias)?, targets)))
    }

    /// Fraction of masked tokens whose original id is the arg-max of the
    /// tied output layer (no output bias), evaluated without dropout.
    pub fn masked_token_accuracy(
        &self,
        corpus: &[EncodedInput],
        rate: f64,
        seed: u64,
    ) -> Result<f64, ModelError> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for (i, input) in corpus.iter().enumerate() {
            let mut r = RngStream::new(
                seed,
                StreamKey::new(Purpose::MaskedLm)
                    .with(u64::MAX)
                    .with(i as u64),
            );
            let masked = mask_tokens(input, rate, &mut r);
            let mut g = Graph::new(ForwardMode::Eval);
            let vars = self.bind(&mut g, |_| false);
            let bias = g.constant(Tensor::zeros(vec![self.encoder.vocab]));
            if let Some((logits, targets)) =
                self.mlm_logits(&mut g, &vars, bias, std::slice::from_ref(&masked), None)?
            {
                let v = g.value(logits);
                for (r, &t) in targets.iter().enumerate() {
                    let row = v.row(r);
                    let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                    hits += usize::from(best == t);
                    total += 1;
                }
            }
        }
        Ok(if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        })
    }
}

/// Masked-token warm-up: each step samples `batch_size` sequences, masks
/// `mask_rate` of their ordinary tokens and trains embeddings and encoder
/// blocks to recover them. `steps = 0` returns the random initialization.
pub fn pretrain_encoder<T: Scalar>(
    corpus: &[EncodedInput],
    encoder: EncoderConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(EncoderBase<T>, Vec<f64>), ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if !(0.0..=1.0).contains(&cfg.mask_rate) || cfg.batch_size == 0 {
        return Err(ModelError::InvalidConfig(format!(
            "pretrain config {cfg:?}"
        )));
    }
    let init = RngStream::new(seed, StreamKey::new(Purpose::Init));
    let mut model: ModelState<T> = ModelState::build(encoder.clone(), HeadConfig::ffnn(2), &init)?;
    let layers = model.encoder.layers as i32;
    let mut bias = Tensor::<T>::zeros(vec![encoder.vocab]);
    let mut adam = Adam::new(AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut pick = RngStream::new(seed, StreamKey::new(Purpose::MaskedLm).with(step as u64));
        let batch: Vec<_> = (0..cfg.batch_size)
            .map(|b| {
                let x = &corpus[pick.below(corpus.len())];
                let mut r = pick.child(b as u64);
                mask_tokens(x, cfg.mask_rate, &mut r)
            })
            .collect();
        let mut g = Graph::new(ForwardMode::Train);
        let vars = model.bind(&mut g, |l| l.index < layers);
        let bias_var = g.leaf(bias.clone(), true);
        let mut dropout_rng = RngStream::new(
            seed,
            StreamKey::new(Purpose::Train)
                .with(u64::MAX)
                .with(step as u64),
        );
        let Some((logits, targets)) =
            model.mlm_logits(&mut g, &vars, bias_var, &batch, Some(&mut dropout_rng))?
        else {
            continue;
        };
        let loss = g.softmax_cross_entropy(logits, &targets)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(ModelError::Tensor(
                crate::autodiff::TensorError::NonFiniteGradient {
                    layer: EMBEDDING_LAYER,
                    param: "masked-token loss".into(),
                },
            ));
        }
        losses.push(value.as_f64());
        let mut grads = g.backward(loss)?;
        let owned: Vec<Option<Vec<T>>> = vars.iter().map(|&v| grads.take(v)).collect();
        let bias_grad = grads.take(bias_var);
        drop(g);
        let mut slots: Vec<ParamSlot<'_, T>> = model
            .params
            .iter_mut()
            .zip(&owned)
            .map(|(p, grad)| ParamSlot {
                layer: p.layer,
                name: &p.name,
                trainable: p.layer < layers,
                lr: cfg.lr,
                value: &mut p.value,
                grad: grad.as_deref(),
            })
            .collect();
        slots.push(ParamSlot {
            layer: layers,
            name: "mlm.bias",
            trainable: true,
            lr: cfg.lr,
            value: &mut bias,
            grad: bias_grad.as_deref(),
        });
        adam.step(&mut slots)?;
    }
    Ok((
        EncoderBase {
            config: encoder,
            records: model.encoder_records(),
        },
        losses,
    ))
}

impl<T: Scalar> ModelState<T> {
    /// Replaces embeddings and encoder blocks with `base`.
    pub fn load_encoder_base(&mut self, base: &EncoderBase<T>) -> Result<(), ModelError> {
        if base.config != self.encoder {
            return Err(ModelError::StructureMismatch(
                "encoder configs differ".into(),
            ));
        }
        self.load_records(&base.records)
    }
}
