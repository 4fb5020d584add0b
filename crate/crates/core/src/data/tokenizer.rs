use serde::{Deserialize, Serialize};

use crate::model::EncodedInput;

use super::{DataError, DatasetRecord};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;
/// Ids below this are reserved for special tokens.
pub const NUM_SPECIAL: usize = 5;

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default = "yes")]
    pub lowercase: bool,
}

fn yes() -> bool {
    true
}

impl TokenizerConfig {
    pub fn hash_id(&self, word: &str) -> usize {
        let h = if self.lowercase {
            fnv1a64(word.to_lowercase().as_bytes())
        } else {
            fnv1a64(word.as_bytes())
        };
        (h % (self.vocab_size - NUM_SPECIAL) as u64) as usize + NUM_SPECIAL
    }

    fn words(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.hash_id(w)).collect()
    }
}

/// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`. Over-long inputs lose tokens
/// from the end of the longer part first; `[CLS]` and the final `[SEP]`
/// always survive.
pub fn tokenize(record: &DatasetRecord, cfg: &TokenizerConfig) -> Result<EncodedInput, DataError> {
    if cfg.vocab_size <= NUM_SPECIAL || cfg.max_len < 3 {
        return Err(DataError::Manifest(format!(
            "tokenizer needs vocab_size > {NUM_SPECIAL} and max_len >= 3, got {cfg:?}"
        )));
    }
    let mut a = cfg.words(&record.text_a);
    if a.is_empty() {
        return Err(DataError::EmptyText(record.element_id));
    }
    let mut b = record.text_b.as_deref().map(|t| cfg.words(t));
    let specials = if b.is_some() { 3 } else { 2 };
    let budget = cfg.max_len.saturating_sub(specials);
    loop {
        let lb = b.as_ref().map_or(0, Vec::len);
        if a.len() + lb <= budget {
            break;
        }
        match &mut b {
            Some(bv) if bv.len() >= a.len() && !bv.is_empty() => {
                bv.pop();
            }
            _ => {
                a.pop();
            }
        }
    }
    let mut tokens = Vec::with_capacity(cfg.max_len);
    tokens.push(CLS_ID);
    tokens.extend_from_slice(&a);
    tokens.push(SEP_ID);
    let mut segments = vec![0; tokens.len()];
    if let Some(bv) = b {
        tokens.extend_from_slice(&bv);
        tokens.push(SEP_ID);
        segments.resize(tokens.len(), 1);
    }
    Ok(EncodedInput { tokens, segments })
}
