//! Transformer encoder with a convolutional (or single dense) classification
//! head, per-layer freeze control and parameter snapshots.
//!
//! Layer numbering: `-1` holds the embedding tables, `0..L` are encoder
//! blocks and indices `>= L` are head layers (one per convolution filter
//! height, then the hidden and output dense layers).

mod forward;
mod pretrain;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{CheckpointRecord, Tensor, TensorError};
use crate::rng::RngStream;
use crate::Scalar;

pub use forward::{EncodedInput, TrainStep};
pub use pretrain::{pretrain_encoder, EncoderBase, PretrainConfig};

/// Layer index of the embedding tables.
pub const EMBEDDING_LAYER: i32 = -1;

const BN_MOMENTUM: f64 = 0.1;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("freeze spec {f} outside [-{layers}, {layers}]")]
    FreezeOutOfRange { f: i32, layers: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("segment id {0} is not 0 or 1")]
    BadSegment(usize),
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("parameter structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("model has no MC-flagged dropout layer")]
    NoMcLayer,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub intermediate: usize,
    /// Hidden-state dropout inside the encoder; train mode only.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 64,
            heads: 4,
            vocab: 2000,
            max_len: 48,
            intermediate: 128,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.layers == 0
            || self.hidden == 0
            || self.heads == 0
            || self.vocab == 0
            || self.intermediate == 0
        {
            return bad(format!("all encoder sizes must be positive: {self:?}"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.max_len < 3 {
            return bad(format!(
                "max_len {} leaves no room for [CLS] and two [SEP]",
                self.max_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("encoder dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Parameters in one encoder block.
    pub fn block_param_count(&self) -> usize {
        let h = self.hidden;
        let i = self.intermediate;
        4 * (h * h + h) + 4 * h + (h * i + i) + (i * h + h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Cnn,
    Ffnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    #[serde(default = "default_filters")]
    pub filter_heights: Vec<usize>,
    #[serde(default = "default_maps")]
    pub maps_per_filter: usize,
    /// Width of the hidden dense layer; the output layer has `num_classes`.
    #[serde(default = "default_fc_hidden")]
    pub fc_hidden: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Marks the dropout in front of the output layer as active during
    /// stochastic evaluation.
    #[serde(default = "default_true")]
    pub mc_dropout: bool,
}

fn default_filters() -> Vec<usize> {
    vec![3, 4, 5]
}
fn default_maps() -> usize {
    64
}
fn default_fc_hidden() -> usize {
    64
}
fn default_classes() -> usize {
    2
}
fn default_true() -> bool {
    true
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: HeadKind::Cnn,
            filter_heights: default_filters(),
            maps_per_filter: default_maps(),
            fc_hidden: default_fc_hidden(),
            dropout_rate: 0.1,
            num_classes: 2,
            mc_dropout: true,
        }
    }
}

impl HeadConfig {
    pub fn ffnn(num_classes: usize) -> Self {
        HeadConfig {
            kind: HeadKind::Ffnn,
            num_classes,
            ..HeadConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("head dropout {} outside [0, 1)", self.dropout_rate));
        }
        if self.kind == HeadKind::Cnn {
            if self.filter_heights.is_empty() || self.filter_heights.contains(&0) {
                return bad(format!(
                    "filter heights must be positive: {:?}",
                    self.filter_heights
                ));
            }
            if self.maps_per_filter == 0 || self.fc_hidden == 0 {
                return bad("maps_per_filter and fc_hidden must be positive".into());
            }
        }
        Ok(())
    }

    /// Shortest sequence the head accepts; shorter inputs are padded.
    pub fn min_len(&self) -> usize {
        match self.kind {
            HeadKind::Cnn => self.filter_heights.iter().copied().max().unwrap_or(1),
            HeadKind::Ffnn => 1,
        }
    }

    pub fn layer_count(&self) -> usize {
        match self.kind {
            HeadKind::Cnn => self.filter_heights.len() + 2,
            HeadKind::Ffnn => 1,
        }
    }
}

/// Signed count of frozen encoder layers: `F >= 0` freezes `[0, F)`,
/// `F < 0` freezes `[L + F, L)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FreezeSpec(pub i32);

impl FreezeSpec {
    pub fn frozen_range(self, layers: usize) -> Result<Range<usize>, ModelError> {
        let l = layers as i64;
        let f = i64::from(self.0);
        if f.abs() > l {
            return Err(ModelError::FreezeOutOfRange { f: self.0, layers });
        }
        Ok(if f >= 0 {
            0..f as usize
        } else {
            (l + f) as usize..layers
        })
    }

    pub fn is_frozen(self, layer: usize, layers: usize) -> Result<bool, ModelError> {
        Ok(self.frozen_range(layers)?.contains(&layer))
    }
}

impl std::fmt::Display for FreezeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub layer: i32,
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub index: i32,
    pub name: String,
    pub trainable: bool,
    /// Positions of this layer's tensors in the flat parameter list.
    pub params: Range<usize>,
}

/// Running per-channel batch-norm statistics for one convolution filter.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Deep copy of every parameter, tagged with the epoch it was taken at.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSnapshot<T> {
    pub epoch: u32,
    pub records: Vec<CheckpointRecord<T>>,
}

impl<T: Scalar> ParameterSnapshot<T> {
    pub fn write<W: std::io::Write>(&self, w: W) -> Result<(), TensorError> {
        crate::autodiff::write_checkpoint(w, &self.records)
    }

    pub fn read<R: std::io::Read>(r: R, epoch: u32) -> Result<Self, TensorError> {
        Ok(ParameterSnapshot {
            epoch,
            records: crate::autodiff::read_checkpoint(r)?,
        })
    }

    /// Records belonging to one layer.
    pub fn layer(&self, index: i32) -> impl Iterator<Item = &CheckpointRecord<T>> {
        self.records.iter().filter(move |r| r.layer == index)
    }
}

// Encoder block parameter slots, in storage order.
pub(crate) mod slot {
    pub const WQ: usize = 0;
    pub const BQ: usize = 1;
    pub const WK: usize = 2;
    pub const BK: usize = 3;
    pub const WV: usize = 4;
    pub const BV: usize = 5;
    pub const WO: usize = 6;
    pub const BO: usize = 7;
    pub const LN1_G: usize = 8;
    pub const LN1_B: usize = 9;
    pub const W1: usize = 10;
    pub const B1: usize = 11;
    pub const W2: usize = 12;
    pub const B2: usize = 13;
    pub const LN2_G: usize = 14;
    pub const LN2_B: usize = 15;
    pub const TOKEN: usize = 0;
    pub const POSITION: usize = 1;
    pub const SEGMENT: usize = 2;
    pub const EMB_LN_G: usize = 3;
    pub const EMB_LN_B: usize = 4;
}

/// Encoder + head parameters partitioned into indexed layers.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    encoder: EncoderConfig,
    head: HeadConfig,
    params: Vec<Param<T>>,
    layers: Vec<LayerInfo>,
    bn: Vec<RunningStats<T>>,
    freeze: FreezeSpec,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Builder<'a, T> {
    params: Vec<Param<T>>,
    layers: Vec<LayerInfo>,
    rng: &'a RngStream,
}

impl<T: Scalar> Builder<'_, T> {
    fn layer(&mut self, index: i32, name: &str, tensors: Vec<(&str, Vec<usize>, Init)>) {
        let start = self.params.len();
        for (pname, shape, init) in tensors {
            // Each tensor gets its own stream so the head initialization does
            // not depend on how many encoder parameters precede it.
            let mut r = self.rng.child(fnv(&format!("{name}.{pname}")));
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal(std) => (0..n).map(|_| r.normal(std)).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            self.params.push(Param {
                layer: index,
                name: format!("{name}.{pname}"),
                value: Tensor::new(shape, data).expect("builder shapes consistent"),
            });
        }
        self.layers.push(LayerInfo {
            index,
            name: name.to_string(),
            trainable: true,
            params: start..self.params.len(),
        });
    }
}

fn fnv(s: &str) -> u64 {
    crate::data::fnv1a64(s.as_bytes())
}

impl<T: Scalar> ModelState<T> {
    /// Builds and randomly initializes encoder and head from `init`.
    /// Every layer starts trainable except the embeddings (see
    /// [`ModelState::apply_freeze`]).
    pub fn build(
        encoder: EncoderConfig,
        head: HeadConfig,
        init: &RngStream,
    ) -> Result<Self, ModelError> {
        encoder.validate()?;
        head.validate()?;
        if head.min_len() > encoder.max_len {
            return Err(ModelError::InvalidConfig(format!(
                "largest filter height {} exceeds max_len {}",
                head.min_len(),
                encoder.max_len
            )));
        }
        let h = encoder.hidden;
        let i = encoder.intermediate;
        let mut b = Builder {
            params: Vec::new(),
            layers: Vec::new(),
            rng: init,
        };
        b.layer(
            EMBEDDING_LAYER,
            "embeddings",
            vec![
                ("token", vec![encoder.vocab, h], Init::Normal(INIT_STD)),
                ("position", vec![encoder.max_len, h], Init::Normal(INIT_STD)),
                ("segment", vec![2, h], Init::Normal(INIT_STD)),
                ("ln.gamma", vec![h], Init::Ones),
                ("ln.beta", vec![h], Init::Zeros),
            ],
        );
        for l in 0..encoder.layers {
            b.layer(
                l as i32,
                &format!("encoder.{l}"),
                vec![
                    ("attn.wq", vec![h, h], Init::Normal(INIT_STD)),
                    ("attn.bq", vec![h], Init::Zeros),
                    ("attn.wk", vec![h, h], Init::Normal(INIT_STD)),
                    ("attn.bk", vec![h], Init::Zeros),
                    ("attn.wv", vec![h, h], Init::Normal(INIT_STD)),
                    ("attn.bv", vec![h], Init::Zeros),
                    ("attn.wo", vec![h, h], Init::Normal(INIT_STD)),
                    ("attn.bo", vec![h], Init::Zeros),
                    ("ln1.gamma", vec![h], Init::Ones),
                    ("ln1.beta", vec![h], Init::Zeros),
                    ("ffn.w1", vec![h, i], Init::Normal(INIT_STD)),
                    ("ffn.b1", vec![i], Init::Zeros),
                    ("ffn.w2", vec![i, h], Init::Normal(INIT_STD)),
                    ("ffn.b2", vec![h], Init::Zeros),
                    ("ln2.gamma", vec![h], Init::Ones),
                    ("ln2.beta", vec![h], Init::Zeros),
                ],
            );
        }
        let c = head.num_classes;
        let mut next = encoder.layers as i32;
        let mut bn = Vec::new();
        match head.kind {
            HeadKind::Cnn => {
                let m = head.maps_per_filter;
                for &fh in &head.filter_heights {
                    let fan_in = fh * h;
                    b.layer(
                        next,
                        &format!("head.conv{fh}"),
                        vec![
                            (
                                "w",
                                vec![fan_in, m],
                                Init::Normal((2.0 / fan_in as f64).sqrt()),
                            ),
                            ("b", vec![m], Init::Zeros),
                            ("bn.gamma", vec![m], Init::Ones),
                            ("bn.beta", vec![m], Init::Zeros),
                        ],
                    );
                    bn.push(RunningStats {
                        mean: vec![T::zero(); m],
                        var: vec![T::one(); m],
                    });
                    next += 1;
                }
                let pooled = m * head.filter_heights.len();
                b.layer(
                    next,
                    "head.fc_hidden",
                    vec![
                        (
                            "w",
                            vec![pooled, head.fc_hidden],
                            Init::Normal((2.0 / pooled as f64).sqrt()),
                        ),
                        ("b", vec![head.fc_hidden], Init::Zeros),
                    ],
                );
                b.layer(
                    next + 1,
                    "head.fc_out",
                    vec![
                        (
                            "w",
                            vec![head.fc_hidden, c],
                            Init::Normal((1.0 / head.fc_hidden as f64).sqrt()),
                        ),
                        ("b", vec![c], Init::Zeros),
                    ],
                );
            }
            HeadKind::Ffnn => {
                b.layer(
                    next,
                    "head.fc_out",
                    vec![
                        ("w", vec![h, c], Init::Normal((1.0 / h as f64).sqrt())),
                        ("b", vec![c], Init::Zeros),
                    ],
                );
            }
        }
        let mut model = ModelState {
            encoder,
            head,
            params: b.params,
            layers: b.layers,
            bn,
            freeze: FreezeSpec(0),
        };
        model.apply_freeze(FreezeSpec(0))?;
        Ok(model)
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn head_config(&self) -> &HeadConfig {
        &self.head
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.bn
    }

    pub fn freeze_spec(&self) -> FreezeSpec {
        self.freeze
    }

    /// Index of the first head layer (equals the encoder depth).
    pub fn first_head_layer(&self) -> i32 {
        self.encoder.layers as i32
    }

    pub fn has_mc_layer(&self) -> bool {
        self.head.mc_dropout
    }

    pub fn layer(&self, index: i32) -> Option<&LayerInfo> {
        self.layers.iter().find(|l| l.index == index)
    }

    pub fn layer_param_count(&self, index: i32) -> usize {
        self.layer(index)
            .map(|l| {
                self.params[l.params.clone()]
                    .iter()
                    .map(|p| p.value.len())
                    .sum()
            })
            .unwrap_or(0)
    }

    /// Sets trainable flags from `spec`. Embedding tables stay frozen during
    /// fine-tuning and head layers are always trainable. Returns the number
    /// of trainable parameters.
    pub fn apply_freeze(&mut self, spec: FreezeSpec) -> Result<usize, ModelError> {
        let frozen = spec.frozen_range(self.encoder.layers)?;
        let l = self.encoder.layers as i32;
        for info in &mut self.layers {
            info.trainable = match info.index {
                EMBEDDING_LAYER => false,
                i if i < l => !frozen.contains(&(i as usize)),
                _ => true,
            };
        }
        self.freeze = spec;
        Ok(self.count_trainable())
    }

    pub fn frozen_layers(&self) -> Vec<i32> {
        self.layers
            .iter()
            .filter(|l| l.index >= 0 && !l.trainable)
            .map(|l| l.index)
            .collect()
    }

    pub fn count_trainable(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.trainable)
            .map(|l| self.layer_param_count(l.index))
            .sum()
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_trainable(&self, i: usize) -> bool {
        self.layers
            .iter()
            .any(|l| l.trainable && l.params.contains(&i))
    }

    pub fn snapshot(&self, epoch: u32) -> ParameterSnapshot<T> {
        ParameterSnapshot {
            epoch,
            records: self
                .params
                .iter()
                .map(|p| CheckpointRecord {
                    layer: p.layer,
                    name: p.name.clone(),
                    tensor: p.value.clone(),
                })
                .collect(),
        }
    }

    /// Overwrites parameters by name from `records`. Every record must match
    /// an existing parameter of identical shape; parameters without a record
    /// are left alone.
    pub fn load_records(&mut self, records: &[CheckpointRecord<T>]) -> Result<(), ModelError> {
        for r in records {
            let p = self
                .params
                .iter_mut()
                .find(|p| p.name == r.name)
                .ok_or_else(|| {
                    ModelError::StructureMismatch(format!("unknown parameter `{}`", r.name))
                })?;
            if p.value.shape() != r.tensor.shape() || p.layer != r.layer {
                return Err(ModelError::StructureMismatch(format!(
                    "`{}`: layer {} shape {:?} vs layer {} shape {:?}",
                    r.name,
                    p.layer,
                    p.value.shape(),
                    r.layer,
                    r.tensor.shape()
                )));
            }
            p.value = r.tensor.clone();
        }
        Ok(())
    }

    /// Copies embedding and encoder parameters from `base`, keeping this
    /// model's head.
    pub fn load_encoder_from(&mut self, base: &ModelState<T>) -> Result<(), ModelError> {
        if base.encoder != self.encoder {
            return Err(ModelError::StructureMismatch(
                "encoder configs differ".into(),
            ));
        }
        let l = self.encoder.layers as i32;
        let records: Vec<_> = base
            .snapshot(0)
            .records
            .into_iter()
            .filter(|r| r.layer < l)
            .collect();
        self.load_records(&records)
    }

    /// Encoder-only records (embeddings and blocks), as saved by pre-training.
    pub fn encoder_records(&self) -> Vec<CheckpointRecord<T>> {
        let l = self.encoder.layers as i32;
        self.snapshot(0)
            .records
            .into_iter()
            .filter(|r| r.layer < l)
            .collect()
    }

    /// Same model with every scalar converted to `U`.
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    layer: p.layer,
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            layers: self.layers.clone(),
            bn: self
                .bn
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|x| U::lit(x.as_f64())).collect(),
                    var: s.var.iter().map(|x| U::lit(x.as_f64())).collect(),
                })
                .collect(),
            freeze: self.freeze,
        }
    }

    pub(crate) fn bn_momentum() -> T {
        T::lit(BN_MOMENTUM)
    }
}
