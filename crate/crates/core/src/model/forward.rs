use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{dense, multi_head_attention, seq_conv, AttentionVars};
use crate::autodiff::{softmax, Adam, BatchStats, ForwardMode, Graph, ParamSlot, Tensor, Var};
use crate::data::PAD_ID;
use crate::rng::RngStream;
use crate::Scalar;

use super::{slot, HeadKind, LayerInfo, ModelError, ModelState};

/// Token and segment ids of one sequence, as produced by the tokenizer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncodedInput {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
}

impl EncodedInput {
    pub fn single(tokens: Vec<usize>) -> Self {
        let segments = vec![0; tokens.len()];
        EncodedInput { tokens, segments }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStep<T> {
    pub loss: T,
}

fn reborrow<'a>(rng: &'a mut Option<&mut RngStream>) -> Option<&'a mut RngStream> {
    rng.as_deref_mut()
}

impl<T: Scalar> ModelState<T> {
    /// Validates ids and pads sequences shorter than the largest filter.
    fn prepare(&self, input: &EncodedInput) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
        if input.tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if input.tokens.len() != input.segments.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} tokens but {} segment ids",
                input.tokens.len(),
                input.segments.len()
            )));
        }
        let max = self.encoder.max_len;
        if input.tokens.len() > max {
            return Err(ModelError::SequenceTooLong {
                len: input.tokens.len(),
                max,
            });
        }
        if let Some(&id) = input.tokens.iter().find(|&&t| t >= self.encoder.vocab) {
            return Err(ModelError::OutOfVocab {
                id,
                vocab: self.encoder.vocab,
            });
        }
        if let Some(&s) = input.segments.iter().find(|&&s| s > 1) {
            return Err(ModelError::BadSegment(s));
        }
        let mut tokens = input.tokens.clone();
        let mut segments = input.segments.clone();
        let min = self.head.min_len();
        if tokens.len() < min {
            tokens.resize(min, PAD_ID);
            segments.resize(min, 0);
        }
        Ok((tokens, segments))
    }

    /// Records every parameter as a leaf. `track` decides which layers
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, track: impl Fn(&LayerInfo) -> bool) -> Vec<Var> {
        let mut vars = Vec::with_capacity(self.params.len());
        for info in &self.layers {
            let rg = track(info);
            for p in &self.params[info.params.clone()] {
                vars.push(g.leaf(p.value.clone(), rg));
            }
        }
        vars
    }

    pub(super) fn layer_vars<'v>(&self, vars: &'v [Var], index: i32) -> &'v [Var] {
        let info = self.layer(index).expect("layer exists");
        &vars[info.params.clone()]
    }

    /// Encoder hidden states `[n, hidden]` for one sequence.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        input: &EncodedInput,
        mut rng: Option<&mut RngStream>,
    ) -> Result<Var, ModelError> {
        let (tokens, segments) = self.prepare(input)?;
        let emb = self.layer_vars(vars, super::EMBEDDING_LAYER);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = g.gather_rows(emb[slot::TOKEN], &tokens)?;
        let pos = g.gather_rows(emb[slot::POSITION], &positions)?;
        let seg = g.gather_rows(emb[slot::SEGMENT], &segments)?;
        let x = g.add(tok, pos)?;
        let x = g.add(x, seg)?;
        let x = g.layer_norm(x, emb[slot::EMB_LN_G], emb[slot::EMB_LN_B])?;
        let rate = self.encoder.dropout;
        let mut x = g.dropout(x, rate, false, reborrow(&mut rng))?;
        for l in 0..self.encoder.layers {
            let p = self.layer_vars(vars, l as i32);
            let attn = AttentionVars {
                wq: p[slot::WQ],
                bq: p[slot::BQ],
                wk: p[slot::WK],
                bk: p[slot::BK],
                wv: p[slot::WV],
                bv: p[slot::BV],
                wo: p[slot::WO],
                bo: p[slot::BO],
            };
            let a = multi_head_attention(g, x, &attn, self.encoder.heads)?;
            let a = g.dropout(a, rate, false, reborrow(&mut rng))?;
            let res = g.add(x, a)?;
            x = g.layer_norm(res, p[slot::LN1_G], p[slot::LN1_B])?;
            let f = dense(g, x, p[slot::W1], p[slot::B1])?;
            let f = g.gelu(f);
            let f = dense(g, f, p[slot::W2], p[slot::B2])?;
            let f = g.dropout(f, rate, false, reborrow(&mut rng))?;
            let res = g.add(x, f)?;
            x = g.layer_norm(res, p[slot::LN2_G], p[slot::LN2_B])?;
        }
        Ok(x)
    }

    /// Head activations right before the MC-flagged dropout, one row per
    /// sequence. Also returns batch-norm statistics in train mode.
    pub fn head_penultimate(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        hidden: &[Var],
        mut rng: Option<&mut RngStream>,
    ) -> Result<(Var, Vec<BatchStats<T>>), ModelError> {
        let first = self.first_head_layer();
        match self.head.kind {
            HeadKind::Ffnn => {
                let mut cls = Vec::with_capacity(hidden.len());
                for &h in hidden {
                    cls.push(g.gather_rows(h, &[0])?);
                }
                Ok((g.concat_rows(&cls)?, Vec::new()))
            }
            HeadKind::Cnn => {
                let rate = self.head.dropout_rate;
                let mut pooled = Vec::with_capacity(self.head.filter_heights.len());
                let mut stats = Vec::new();
                for (f, &height) in self.head.filter_heights.iter().enumerate() {
                    let p = self.layer_vars(vars, first + f as i32);
                    let mut maps = Vec::with_capacity(hidden.len());
                    let mut lengths = Vec::with_capacity(hidden.len());
                    for &h in hidden {
                        let m = seq_conv(g, h, p[0], p[1], height)?;
                        lengths.push(g.value(m).rows_cols().0);
                        maps.push(m);
                    }
                    let stacked = if maps.len() == 1 {
                        maps[0]
                    } else {
                        g.concat_rows(&maps)?
                    };
                    let rs = &self.bn[f];
                    let (normed, batch) = g.batch_norm(stacked, p[2], p[3], &rs.mean, &rs.var)?;
                    stats.extend(batch);
                    let act = g.relu(normed);
                    let act = g.dropout(act, rate, false, reborrow(&mut rng))?;
                    pooled.push(g.max_pool_segments(act, &lengths)?);
                }
                let cat = if pooled.len() == 1 {
                    pooled[0]
                } else {
                    g.concat_cols(&pooled)?
                };
                let cat = g.dropout(cat, rate, false, reborrow(&mut rng))?;
                let p = self.layer_vars(vars, first + self.head.filter_heights.len() as i32);
                let hid = dense(g, cat, p[0], p[1])?;
                Ok((g.relu(hid), stats))
            }
        }
    }

    /// MC-flagged dropout followed by the output layer.
    pub fn head_output(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        penultimate: Var,
        rng: Option<&mut RngStream>,
    ) -> Result<Var, ModelError> {
        let out_layer = self.first_head_layer() + self.head.layer_count() as i32 - 1;
        let p = self.layer_vars(vars, out_layer);
        let x = g.dropout(
            penultimate,
            self.head.dropout_rate,
            self.head.mc_dropout,
            rng,
        )?;
        Ok(dense(g, x, p[0], p[1])?)
    }

    /// Logits `[batch, classes]` for a batch of sequences.
    pub fn forward_logits(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        batch: &[EncodedInput],
        mut rng: Option<&mut RngStream>,
    ) -> Result<(Var, Vec<BatchStats<T>>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let mut hidden = Vec::with_capacity(batch.len());
        for input in batch {
            hidden.push(self.encode(g, vars, input, reborrow(&mut rng))?);
        }
        let (pen, stats) = self.head_penultimate(g, vars, &hidden, reborrow(&mut rng))?;
        let logits = self.head_output(g, vars, pen, rng)?;
        Ok((logits, stats))
    }

    /// Class probabilities, one row per sequence.
    pub fn classify(
        &self,
        batch: &[EncodedInput],
        mode: ForwardMode,
        rng: Option<&mut RngStream>,
    ) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new(mode);
        let vars = self.bind(&mut g, |_| false);
        let (logits, _) = self.forward_logits(&mut g, &vars, batch, rng)?;
        Ok(softmax(g.value(logits)))
    }

    /// Deterministic activations feeding the MC-flagged dropout. Everything
    /// up to this point is identical across stochastic passes, so it is
    /// computed once per element.
    pub fn penultimate_features(&self, input: &EncodedInput) -> Result<Vec<T>, ModelError> {
        let mut g = Graph::new(ForwardMode::Eval);
        let vars = self.bind(&mut g, |_| false);
        let h = self.encode(&mut g, &vars, input, None)?;
        let (pen, _) = self.head_penultimate(&mut g, &vars, &[h], None)?;
        Ok(g.value(pen).data().to_vec())
    }

    /// Class probabilities from cached penultimate features; in
    /// `StochasticEval` each call with a fresh stream is one MC sample.
    pub fn probs_from_features(
        &self,
        features: &[T],
        mode: ForwardMode,
        rng: Option<&mut RngStream>,
    ) -> Result<Vec<T>, ModelError> {
        let out_layer = self.first_head_layer() + self.head.layer_count() as i32 - 1;
        let info = self.layer(out_layer).expect("output layer");
        let w = &self.params[info.params.start].value;
        let b = &self.params[info.params.start + 1].value;
        let mut g = Graph::new(mode);
        let x = g.constant(Tensor::matrix(1, features.len(), features.to_vec())?);
        let wv = g.constant(w.clone());
        let bv = g.constant(b.clone());
        let x = g.dropout(x, self.head.dropout_rate, self.head.mc_dropout, rng)?;
        let logits = dense(&mut g, x, wv, bv)?;
        Ok(softmax(g.value(logits)).into_data())
    }

    /// One Adam step on a labeled batch. Frozen layers get no gradient and
    /// are skipped by the optimizer; batch-norm running statistics are
    /// updated from the batch.
    pub fn train_step(
        &mut self,
        batch: &[(EncodedInput, usize)],
        adam: &mut Adam<T>,
        encoder_lr: f64,
        head_lr: f64,
        rng: &mut RngStream,
    ) -> Result<TrainStep<T>, ModelError> {
        let inputs: Vec<EncodedInput> = batch.iter().map(|(x, _)| x.clone()).collect();
        let targets: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
        let mut g = Graph::new(ForwardMode::Train);
        let vars = self.bind(&mut g, |l| l.trainable);
        let (logits, stats) = self.forward_logits(&mut g, &vars, &inputs, Some(rng))?;
        let loss = g.softmax_cross_entropy(logits, &targets)?;
        let loss_value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let owned: Vec<Option<Vec<T>>> = vars.iter().map(|&v| grads.take(v)).collect();
        drop(g);

        let first_head = self.first_head_layer();
        let trainable: Vec<bool> = (0..self.params.len())
            .map(|i| self.param_trainable(i))
            .collect();
        let mut slots: Vec<ParamSlot<'_, T>> = self
            .params
            .iter_mut()
            .zip(&owned)
            .zip(&trainable)
            .map(|((p, grad), &trainable)| ParamSlot {
                layer: p.layer,
                name: &p.name,
                trainable,
                lr: if p.layer >= first_head {
                    head_lr
                } else {
                    encoder_lr
                },
                value: &mut p.value,
                grad: grad.as_deref(),
            })
            .collect();
        adam.step(&mut slots)?;
        drop(slots);

        let m = Self::bn_momentum();
        for (rs, batch) in self.bn.iter_mut().zip(stats) {
            for (r, b) in rs.mean.iter_mut().zip(batch.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, b) in rs.var.iter_mut().zip(batch.var) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
        Ok(TrainStep { loss: loss_value })
    }
}
