//! Synthetic keyword-theme corpus.
//!
//! Every class owns a small set of common cue words and a larger set of
//! rare cue words; all classes share a pool of filler words. An easy record
//! carries two common cues of its class among fillers. A hard record mixes
//! themes: it carries one common cue of *every* class, so those cancel out,
//! and a single rare cue of its own class decides the label.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rng::{Purpose, RngStream, StreamKey};

use super::{write_split, DataError, DataFormat, DatasetManifest, DatasetRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub pool_size: usize,
    #[serde(default = "default_eval")]
    pub eval_size: usize,
    /// Common cue words per class.
    #[serde(default = "default_theme")]
    pub theme_words: usize,
    /// Rare cue words per class (only used by hard records).
    #[serde(default = "default_rare")]
    pub rare_words: usize,
    #[serde(default = "default_filler")]
    pub filler_words: usize,
    /// Fraction of hard records.
    #[serde(default)]
    pub difficulty: f64,
    /// Per-class hard fraction; overrides `difficulty` when present.
    #[serde(default)]
    pub class_difficulty: Option<Vec<f64>>,
    /// Split each record into a sentence pair.
    #[serde(default)]
    pub pairs: bool,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    pub seed: u64,
}

fn default_eval() -> usize {
    500
}
fn default_theme() -> usize {
    8
}
fn default_rare() -> usize {
    40
}
fn default_filler() -> usize {
    200
}

impl SynthSpec {
    pub fn new(classes: usize, pool_size: usize, difficulty: f64, seed: u64) -> Self {
        SynthSpec {
            classes,
            pool_size,
            eval_size: default_eval(),
            theme_words: default_theme(),
            rare_words: default_rare(),
            filler_words: default_filler(),
            difficulty,
            class_difficulty: None,
            pairs: false,
            class_names: None,
            seed,
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| (0..self.classes).map(|c| format!("c{c}")).collect())
    }

    fn hard_fraction(&self, class: usize) -> f64 {
        match &self.class_difficulty {
            Some(v) => v[class],
            None => self.difficulty,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Synth(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.pool_size < self.classes {
            return bad(format!(
                "pool size {} smaller than class count {}",
                self.pool_size, self.classes
            ));
        }
        if self.theme_words < 2 || self.rare_words == 0 || self.filler_words == 0 {
            return bad("word lists must be non-empty (at least 2 theme words)".into());
        }
        if let Some(v) = &self.class_difficulty {
            if v.len() != self.classes {
                return bad(format!(
                    "{} class difficulties for {} classes",
                    v.len(),
                    self.classes
                ));
            }
        }
        let fractions = self
            .class_difficulty
            .clone()
            .unwrap_or_else(|| vec![self.difficulty]);
        if fractions.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return bad(format!("difficulty outside [0, 1]: {fractions:?}"));
        }
        if self.names().len() != self.classes {
            return bad("class_names length differs from classes".into());
        }
        Ok(())
    }
}

struct Lexicon {
    common: Vec<Vec<String>>,
    rare: Vec<Vec<String>>,
    filler: Vec<String>,
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

fn lexicon(spec: &SynthSpec, rng: &mut RngStream) -> Lexicon {
    let mut seen = BTreeSet::new();
    let mut word = |rng: &mut RngStream| loop {
        let syllables = 2 + rng.below(2);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS[rng.below(ONSETS.len())],
                    VOWELS[rng.below(VOWELS.len())]
                )
            })
            .collect();
        if seen.insert(w.clone()) {
            return w;
        }
    };
    let common = (0..spec.classes)
        .map(|_| (0..spec.theme_words).map(|_| word(rng)).collect())
        .collect();
    let rare = (0..spec.classes)
        .map(|_| (0..spec.rare_words).map(|_| word(rng)).collect())
        .collect();
    let filler = (0..spec.filler_words).map(|_| word(rng)).collect();
    Lexicon {
        common,
        rare,
        filler,
    }
}

fn make_split(
    spec: &SynthSpec,
    lex: &Lexicon,
    n: usize,
    rng: &mut RngStream,
) -> Vec<DatasetRecord> {
    let names = spec.names();
    // Round-robin labels give counts within one of each other; then shuffle.
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    rng.shuffle(&mut labels);
    labels
        .into_iter()
        .enumerate()
        .map(|(id, c)| {
            let hard = rng.uniform::<f64>() < spec.hard_fraction(c);
            let len = 6 + rng.below(7);
            let mut words: Vec<String> = Vec::with_capacity(len);
            if hard {
                for theme in &lex.common {
                    words.push(theme[rng.below(theme.len())].clone());
                }
                words.push(lex.rare[c][rng.below(lex.rare[c].len())].clone());
            } else {
                let theme = &lex.common[c];
                let first = rng.below(theme.len());
                let mut second = rng.below(theme.len() - 1);
                if second >= first {
                    second += 1;
                }
                words.push(theme[first].clone());
                words.push(theme[second].clone());
            }
            let target = len.max(words.len() + 2);
            while words.len() < target {
                words.push(lex.filler[rng.below(lex.filler.len())].clone());
            }
            rng.shuffle(&mut words);
            let (text_a, text_b) = if spec.pairs {
                let cut = 1 + rng.below(words.len() - 1);
                (words[..cut].join(" "), Some(words[cut..].join(" ")))
            } else {
                (words.join(" "), None)
            };
            DatasetRecord {
                element_id: id,
                text_a,
                text_b,
                label: names[c].clone(),
            }
        })
        .collect()
}

/// Generates `(train, eval)` records deterministically from `spec.seed`.
pub fn synth_records(
    spec: &SynthSpec,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>), DataError> {
    spec.validate()?;
    let root = RngStream::new(spec.seed, StreamKey::new(Purpose::Synth));
    let lex = lexicon(spec, &mut root.child(0));
    let train = make_split(spec, &lex, spec.pool_size, &mut root.child(1));
    let eval = make_split(spec, &lex, spec.eval_size, &mut root.child(2));
    Ok((train, eval))
}

/// Writes `train.tsv`, `dev.tsv` and `manifest.toml` into `dir`; returns the
/// manifest path.
pub fn synth_generate(spec: &SynthSpec, dir: &Path) -> Result<PathBuf, DataError> {
    let (train, eval) = synth_records(spec)?;
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_split(&dir.join("train.tsv"), DataFormat::Tsv, &train)?;
    write_split(&dir.join("dev.tsv"), DataFormat::Tsv, &eval)?;
    let manifest = DatasetManifest {
        train: "train.tsv".into(),
        eval: "dev.tsv".into(),
        classes: spec.names(),
        format: DataFormat::Tsv,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(&path, text).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}
