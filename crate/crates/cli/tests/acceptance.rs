//! Acceptance criteria, one `PASS`/`FAIL` line each.
//!
//! The trend checks (`accuracy-trend`, `class-skew`) compare two strategies
//! on small synthetic data and are reported without failing the process;
//! set `ALTC_ACCEPTANCE_STRICT=1` to make them gating too. Artifacts go to a
//! temporary directory unless `ALTC_ACCEPTANCE_OUT` names one.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use altc_core::acquisition::{
    bald_score, score_pool, select_top_q, AcquisitionConfig, PredictionSamples, ScoreTable,
    Strategy,
};
use altc_core::analysis::{
    aggregate_runs, mad_per_layer, read_accuracy_csv, read_delta_csv, read_mad_csv,
};
use altc_core::autodiff::nn::{dense, multi_head_attention, seq_conv, AttentionVars};
use altc_core::autodiff::{grad_check, ForwardMode, Graph, Tensor, TensorError, Var};
use altc_core::config::TrainingConfig;
use altc_core::experiment::train_round;
use altc_core::model::{
    EncodedInput, EncoderConfig, FreezeSpec, HeadConfig, HeadKind, ModelError, ModelState,
};
use altc_core::rng::{Purpose, RngStream, StreamKey};

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    gating: bool,
    run: fn(&Path) -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64, purpose: Purpose, sub: u64) -> RngStream {
    RngStream::new(seed, StreamKey::new(purpose).with(sub))
}

// ---------------------------------------------------------------------------
// BALD

/// Mutual information written term by term in base 2, then converted to nats.
fn oracle_bald(rows: &[Vec<f64>]) -> f64 {
    let s = rows.len() as f64;
    let c = rows[0].len();
    let h = |p: &[f64]| -> f64 { p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum() };
    let mean: Vec<f64> = (0..c)
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / s)
        .collect();
    let expected: f64 = rows.iter().map(|r| h(r)).sum::<f64>() / s;
    (h(&mean) - expected) * std::f64::consts::LN_2
}

fn bald(rows: &[Vec<f64>]) -> Result<f64, String> {
    let p = PredictionSamples::from_rows(0, rows).map_err(|e| e.to_string())?;
    Ok(bald_score(&p))
}

/// Random probability rows; some one-hot, some with exact zeros.
fn random_rows(r: &mut RngStream, s: usize, c: usize) -> Vec<Vec<f64>> {
    (0..s)
        .map(|_| {
            let kind = r.below(5);
            let mut row: Vec<f64> = (0..c)
                .map(|_| match kind {
                    0 => 0.0,
                    1 if r.below(2) == 0 => 0.0,
                    _ => -r.uniform::<f64>().max(1e-300).ln(),
                })
                .collect();
            if row.iter().all(|&x| x == 0.0) {
                row[r.below(c)] = 1.0;
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= sum);
            row
        })
        .collect()
}

fn bald_closed_form(_: &Path) -> Outcome {
    let third = vec![vec![0.8, 0.2], vec![0.6, 0.4], vec![0.7, 0.3]];
    let cases = [
        (vec![vec![0.5, 0.5]; 4], 0.0),
        (vec![vec![1.0, 0.0], vec![0.0, 1.0]], std::f64::consts::LN_2),
        (third.clone(), oracle_bald(&third)),
    ];
    for (rows, want) in &cases {
        let got = bald(rows)?;
        ensure((got - want).abs() < 1e-9, || {
            format!("{rows:?}: {got} vs {want}")
        })?;
    }
    ensure((bald(&third)? - 0.01610).abs() < 5e-6, || {
        "third example is not ~0.01610".into()
    })?;

    let mut r = rng(1, Purpose::Synth, 1);
    let n = 10_000;
    for i in 0..n {
        let (s, c) = (1 + r.below(20), 2 + r.below(6));
        let rows = random_rows(&mut r, s, c);
        let b = bald(&rows)?;
        ensure(b >= -1e-9 && b <= (c as f64).ln() + 1e-9, || {
            format!("sample {i}: {b} outside [0, ln {c}]")
        })?;
        ensure((b - oracle_bald(&rows)).abs() < 1e-9, || {
            format!("sample {i}: differs from oracle")
        })?;

        let mut shuffled = rows.clone();
        for k in (1..shuffled.len()).rev() {
            shuffled.swap(k, r.below(k + 1));
        }
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..c).collect();
            for k in (1..c).rev() {
                p.swap(k, r.below(k + 1));
            }
            p
        };
        let relabeled: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| perm.iter().map(|&j| row[j]).collect())
            .collect();
        ensure((bald(&shuffled)? - b).abs() < 1e-12, || {
            format!("sample {i}: row permutation changed the score")
        })?;
        ensure((bald(&relabeled)? - b).abs() < 1e-12, || {
            format!("sample {i}: class permutation changed the score")
        })?;

        let same = vec![rows[0].clone(); s];
        ensure(bald(&same)?.abs() <= 1e-12, || {
            format!("sample {i}: identical rows score nonzero")
        })?;

        // Replacing one of two consensus rows by a disagreeing one-hot row.
        if s >= 2 {
            let mut consensus = vec![vec![0.0; c]; s];
            consensus.iter_mut().for_each(|row| row[0] = 1.0);
            let mut split = consensus.clone();
            split[0] = vec![0.0; c];
            split[0][1] = 1.0;
            ensure(bald(&split)? > bald(&consensus)?, || {
                format!("sample {i}: disagreement did not raise the score")
            })?;
        }
    }
    Ok(format!("3 examples + {n} random samples"))
}

fn brute_top_q(entries: &[(usize, f64)], q: usize) -> Vec<usize> {
    let mut left = entries.to_vec();
    let mut out = Vec::new();
    for _ in 0..q {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (left[i], left[best]);
            if a.1 > b.1 || (a.1 == b.1 && a.0 < b.0) {
                best = i;
            }
        }
        out.push(left.remove(best).0);
    }
    out
}

fn log_base_invariance(_: &Path) -> Outcome {
    let mut r = rng(2, Purpose::Synth, 2);
    let tables = 1000;
    for t in 0..tables {
        let n = 5 + r.below(300);
        let c = 2 + r.below(4);
        let entries: Vec<(usize, f64)> = (0..n)
            .map(|i| {
                // A coarse grid in a third of the tables forces ties.
                let x = r.uniform::<f64>() * (c as f64).ln();
                (
                    i * 3 + 1,
                    if t % 3 == 0 {
                        (x * 8.0).floor() / 8.0
                    } else {
                        x
                    },
                )
            })
            .collect();
        let q = 1 + r.below(n);
        let table =
            ScoreTable::new(0, Strategy::Bald, entries.clone()).map_err(|e| e.to_string())?;
        let base = select_top_q(&table, q).map_err(|e| e.to_string())?;
        ensure(base == brute_top_q(&entries, q), || {
            format!("table {t}: differs from the brute-force ranking")
        })?;
        let factors = [
            1.0 / std::f64::consts::LN_2,
            1.0 / std::f64::consts::LN_10,
            0.01 + r.uniform::<f64>() * 100.0,
        ];
        for k in factors {
            let scaled: Vec<(usize, f64)> = entries.iter().map(|&(id, s)| (id, s * k)).collect();
            let table = ScoreTable::new(0, Strategy::Bald, scaled).map_err(|e| e.to_string())?;
            let got = select_top_q(&table, q).map_err(|e| e.to_string())?;
            ensure(got == base, || {
                format!("table {t}: selection changed under scale {k}")
            })?;
        }
    }
    Ok(format!("{tables} tables x 3 positive factors"))
}

// ---------------------------------------------------------------------------
// Gradients

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const GRAD_H: f64 = 1e-5;

fn rand_tensor(r: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.normal(1.0)).collect())
        .expect("shape matches data")
}

fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(rand_tensor(&mut rng(seed, Purpose::Synth, 999), &shape));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

type Build = fn(&mut Graph<f64>, &[Var], u64) -> Result<Var, TensorError>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, ForwardMode, Build)> {
    let t = ForwardMode::Train;
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], t, |g, v, s| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, s)
        }),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], t, |g, v, s| {
            let y = g.matmul_nt(v[0], v[1])?;
            project(g, y, s)
        }),
        (
            "add_bias/mul/add/scale",
            vec![vec![3, 4], vec![4], vec![3, 4]],
            t,
            |g, v, s| {
                let a = g.add_bias(v[0], v[1])?;
                let b = g.mul(a, v[2])?;
                let c = g.add(b, v[0])?;
                let d = g.scale(c, 0.7);
                project(g, d, s)
            },
        ),
        ("relu", vec![vec![4, 5]], t, |g, v, s| {
            let y = g.relu(v[0]);
            project(g, y, s)
        }),
        ("gelu", vec![vec![4, 5]], t, |g, v, s| {
            let y = g.gelu(v[0]);
            project(g, y, s)
        }),
        ("softmax_rows", vec![vec![3, 5]], t, |g, v, s| {
            let y = g.softmax_rows(v[0])?;
            project(g, y, s)
        }),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6]],
            t,
            |g, v, s| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                project(g, y, s)
            },
        ),
        (
            "batch_norm (batch stats)",
            vec![vec![6, 3], vec![3], vec![3]],
            t,
            |g, v, s| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0])?;
                project(g, y, s)
            },
        ),
        (
            "batch_norm (running stats)",
            vec![vec![6, 3], vec![3], vec![3]],
            ForwardMode::Eval,
            |g, v, s| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0])?;
                project(g, y, s)
            },
        ),
        (
            "gather/slice/concat",
            vec![vec![5, 4], vec![2, 4]],
            t,
            |g, v, s| {
                let rows = g.gather_rows(v[0], &[4, 0, 4, 2])?;
                let left = g.slice_cols(rows, 1, 2)?;
                let right = g.slice_cols(rows, 3, 1)?;
                let cols = g.concat_cols(&[right, left])?;
                let other = g.slice_cols(v[1], 0, 3)?;
                let stacked = g.concat_rows(&[cols, other])?;
                project(g, stacked, s)
            },
        ),
        ("unfold/max_pool", vec![vec![7, 3]], t, |g, v, s| {
            let u = g.unfold(v[0], 3)?;
            let p = g.max_pool_segments(u, &[2, 3])?;
            project(g, p, s)
        }),
        ("dropout", vec![vec![4, 5]], t, |g, v, s| {
            let mut r = RngStream::new(s, StreamKey::new(Purpose::Dropout));
            let y = g.dropout(v[0], 0.3, false, Some(&mut r))?;
            project(g, y, s)
        }),
        ("softmax_cross_entropy", vec![vec![4, 3]], t, |g, v, _| {
            g.softmax_cross_entropy(v[0], &[0, 2, 1, 2])
        }),
        (
            "dense/seq_conv",
            vec![vec![6, 4], vec![8, 3], vec![3], vec![3, 2], vec![2]],
            t,
            |g, v, s| {
                let c = seq_conv(g, v[0], v[1], v[2], 2)?;
                let d = dense(g, c, v[3], v[4])?;
                project(g, d, s)
            },
        ),
        (
            "multi_head_attention",
            vec![
                vec![5, 4],
                vec![4, 4],
                vec![4],
                vec![4, 4],
                vec![4, 4],
                vec![4],
                vec![4, 4],
                vec![4],
            ],
            t,
            |g, v, s| {
                // The key bias cannot change the output (softmax is shift
                // invariant per row), so it enters as a constant.
                let bk = g.constant(Tensor::from_vec(vec![0.3, -0.1, 0.2, 0.5]));
                let p = AttentionVars {
                    wq: v[1],
                    bq: v[2],
                    wk: v[3],
                    bk,
                    wv: v[4],
                    bv: v[5],
                    wo: v[6],
                    bo: v[7],
                };
                let y = multi_head_attention(g, v[0], &p, 2)?;
                project(g, y, s)
            },
        ),
    ]
}

fn grad_model(seed: u64) -> Result<ModelState<f64>, ModelError> {
    let enc = EncoderConfig {
        layers: 2,
        hidden: 32,
        heads: 2,
        vocab: 60,
        max_len: 12,
        intermediate: 64,
        dropout: 0.1,
    };
    let head = HeadConfig {
        filter_heights: vec![2, 3],
        maps_per_filter: 4,
        fc_hidden: 6,
        num_classes: 3,
        ..HeadConfig::default()
    };
    ModelState::build(
        enc,
        head,
        &RngStream::new(seed, StreamKey::new(Purpose::Init)),
    )
}

fn gradient_suite(_: &Path) -> Outcome {
    let mut worst = 0.0f64;
    let prims = primitives();
    for (name, shapes, mode, build) in &prims {
        for seed in 0..GRAD_SEEDS {
            let mut r = RngStream::new(seed, StreamKey::new(Purpose::Init));
            let params: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut r, s)).collect();
            let total = params.iter().map(Tensor::len).sum();
            let rep = grad_check(
                &params,
                *mode,
                |g, v| build(g, v, seed),
                total,
                GRAD_H,
                &mut r,
            )
            .map_err(|e| e.to_string())?;
            ensure(rep.passes(GRAD_TOL), || {
                format!("{name} seed {seed}: {rep:?}")
            })?;
            worst = worst.max(rep.max_rel_error);
        }
    }

    let batch = vec![
        EncodedInput::single(vec![2, 7, 8, 9, 10, 3]),
        EncodedInput {
            tokens: vec![2, 11, 3, 12, 13, 14, 3],
            segments: vec![0, 0, 0, 1, 1, 1, 1],
        },
        EncodedInput::single(vec![2, 30, 31, 3]),
    ];
    let targets = [0, 2, 1];
    for mode in [ForwardMode::Eval, ForwardMode::Train] {
        for seed in 0..GRAD_SEEDS {
            let m = grad_model(seed).map_err(|e| e.to_string())?;
            // Move off the small-weight initialization so attention gradients
            // stand well above finite-difference noise.
            let mut jitter = rng(seed, Purpose::Synth, 1);
            let all: Vec<Tensor<f64>> = m
                .params()
                .iter()
                .map(|p| {
                    let data = p
                        .value
                        .data()
                        .iter()
                        .map(|x| x + jitter.normal::<f64>(0.3))
                        .collect();
                    Tensor::new(p.value.shape().to_vec(), data).expect("same shape")
                })
                .collect();
            // Parameters whose true gradient is identically zero enter as
            // constants: key biases always, and under batch statistics the
            // convolution biases and the last block's output LN bias (batch
            // norm removes any per-column shift).
            let constant: Vec<bool> = m
                .params()
                .iter()
                .map(|p| {
                    p.name.ends_with("attn.bk")
                        || (mode == ForwardMode::Train
                            && (p.name == "encoder.1.ln2.beta"
                                || (p.name.starts_with("head.conv") && p.name.ends_with(".b"))))
                })
                .collect();
            let free: Vec<Tensor<f64>> = all
                .iter()
                .zip(&constant)
                .filter(|(_, &k)| !k)
                .map(|(t, _)| t.clone())
                .collect();
            let build = |g: &mut Graph<f64>, vars: &[Var]| {
                let mut vars = vars.iter();
                let bound: Vec<Var> = all
                    .iter()
                    .zip(&constant)
                    .map(|(t, &k)| {
                        if k {
                            g.constant(t.clone())
                        } else {
                            *vars.next().expect("free var")
                        }
                    })
                    .collect();
                let mut r = RngStream::new(seed, StreamKey::new(Purpose::Dropout));
                let (logits, _) =
                    m.forward_logits(g, &bound, &batch, Some(&mut r))
                        .map_err(|e| match e {
                            ModelError::Tensor(t) => t,
                            other => TensorError::ShapeMismatch {
                                op: "forward_logits",
                                detail: other.to_string(),
                            },
                        })?;
                g.softmax_cross_entropy(logits, &targets)
            };
            let rep = grad_check(
                &free,
                mode,
                build,
                400,
                GRAD_H,
                &mut rng(seed, Purpose::Synth, 2),
            )
            .map_err(|e| e.to_string())?;
            ensure(rep.passes(GRAD_TOL), || {
                format!("full model {mode:?} seed {seed}: {rep:?}")
            })?;
            worst = worst.max(rep.max_rel_error);
        }
    }
    Ok(format!(
        "{} primitives + full L=2/H=32 model, {GRAD_SEEDS} seeds, worst rel. error {worst:.2e}",
        prims.len()
    ))
}

// ---------------------------------------------------------------------------
// Freezing

fn freeze_semantics(_: &Path) -> Outcome {
    let layers = 12usize;
    let enc = EncoderConfig {
        layers,
        hidden: 8,
        heads: 2,
        vocab: 50,
        max_len: 12,
        intermediate: 16,
        dropout: 0.1,
    };
    let head = HeadConfig {
        filter_heights: vec![2, 3],
        maps_per_filter: 4,
        fc_hidden: 8,
        num_classes: 2,
        ..HeadConfig::default()
    };
    let mut r = rng(3, Purpose::Synth, 3);
    let inputs: Vec<EncodedInput> = (0..24)
        .map(|_| {
            let mut t = vec![2];
            t.extend((0..3 + r.below(6)).map(|_| 5 + r.below(45)));
            t.push(3);
            EncodedInput::single(t)
        })
        .collect();
    let labeled: Vec<(usize, usize)> = (0..inputs.len())
        .map(|i| (i, inputs[i].tokens[1] % 2))
        .collect();
    let training = TrainingConfig {
        epochs: 2,
        batch_size: 6,
        encoder_lr: 1e-2,
        head_lr: 1e-2,
        warm_start: false,
    };
    for f in [0i32, 3, -3, 6, -6] {
        // The interval rules, evaluated directly.
        let expected: Vec<i32> = (0..layers as i32)
            .filter(|&i| {
                if f >= 0 {
                    i < f
                } else {
                    i >= layers as i32 + f
                }
            })
            .collect();
        let mut m = ModelState::<f64>::build(
            enc.clone(),
            head.clone(),
            &RngStream::new(5, StreamKey::new(Purpose::Init)),
        )
        .map_err(|e| e.to_string())?;
        m.apply_freeze(FreezeSpec(f)).map_err(|e| e.to_string())?;
        ensure(m.frozen_layers() == expected, || {
            format!(
                "F={f}: frozen {:?}, expected {expected:?}",
                m.frozen_layers()
            )
        })?;

        let t = train_round(&m, &labeled, &inputs, &training, 7, 0).map_err(|e| e.to_string())?;
        for (a, b) in t.theta0.records.iter().zip(&t.theta_final.records) {
            let frozen = expected.contains(&a.layer);
            let same = a
                .tensor
                .data()
                .iter()
                .zip(b.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(!frozen || same, || {
                format!("F={f}: frozen {} changed", a.name)
            })?;
        }
        let mad = mad_per_layer(&t.theta0, &t.theta_final).map_err(|e| e.to_string())?;
        for d in &mad {
            if expected.contains(&d.layer) {
                ensure(d.mad == 0.0 && d.variance == 0.0, || {
                    format!("F={f}: layer {} MAD {}", d.layer, d.mad)
                })?;
            } else if d.layer >= 0 {
                ensure(d.mad > 0.0, || {
                    format!("F={f}: trainable layer {} did not move", d.layer)
                })?;
            }
        }
    }
    Ok("L=12, F in {0, 3, -3, 6, -6}".into())
}

// ---------------------------------------------------------------------------
// Acquisition against brute force

fn acquisition_brute_force(_: &Path) -> Outcome {
    let enc = EncoderConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        vocab: 100,
        max_len: 10,
        intermediate: 32,
        dropout: 0.1,
    };
    let head = HeadConfig {
        kind: HeadKind::Cnn,
        filter_heights: vec![2, 3],
        maps_per_filter: 4,
        fc_hidden: 8,
        dropout_rate: 0.5,
        num_classes: 3,
        mc_dropout: true,
    };
    let (n, samples, q) = (300, 10, 25);
    for trial in 0..20u64 {
        let m = ModelState::<f64>::build(
            enc.clone(),
            head.clone(),
            &RngStream::new(trial, StreamKey::new(Purpose::Init)),
        )
        .map_err(|e| e.to_string())?;
        let mut r = rng(100 + trial, Purpose::Synth, 0);
        let pool: Vec<(usize, EncodedInput)> = (0..n)
            .map(|i| {
                let mut t = vec![2];
                t.extend((0..3 + r.below(6)).map(|_| 5 + r.below(95)));
                t.push(3);
                (i * 7 + 3, EncodedInput::single(t))
            })
            .collect();
        let round = trial as usize % 3;
        let table = score_pool(
            &m,
            &pool,
            &AcquisitionConfig::bald(samples, q, usize::MAX),
            trial,
            round,
        )
        .map_err(|e| e.to_string())?;
        // Independent oracle: S full stochastic passes per element.
        let mut reference = Vec::with_capacity(n);
        for (id, x) in &pool {
            let rows: Vec<Vec<f64>> = (0..samples)
                .map(|s| {
                    let key = StreamKey::new(Purpose::Dropout)
                        .with(*id as u64)
                        .with(round as u64)
                        .with(s as u64);
                    m.classify(
                        std::slice::from_ref(x),
                        ForwardMode::StochasticEval,
                        Some(&mut RngStream::new(trial, key)),
                    )
                    .map(|p| p.row(0).to_vec())
                    .map_err(|e| e.to_string())
                })
                .collect::<Result<_, _>>()?;
            reference.push((*id, oracle_bald(&rows)));
        }
        for (a, b) in table.entries.iter().zip(&reference) {
            ensure(a.0 == b.0 && (a.1 - b.1).abs() < 1e-9, || {
                format!("trial {trial}: element {} {} vs {}", a.0, a.1, b.1)
            })?;
        }
        let picked = select_top_q(&table, q).map_err(|e| e.to_string())?;
        let expected = brute_top_q(&reference, q);
        ensure(picked == expected, || {
            format!("trial {trial}: {picked:?} vs {expected:?}")
        })?;
    }
    Ok(format!("20 trials, |U|={n}, S={samples}, Q={q}"))
}

// ---------------------------------------------------------------------------
// Runs through the command-line tool

fn altc(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_altc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "`altc {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        )
    })
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn synth(dir: &Path, spec: &str) -> Result<PathBuf, String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let spec_path = dir.join("synth.toml");
    fs::write(&spec_path, spec).map_err(|e| e.to_string())?;
    let data = dir.join("data");
    altc(&["synth", "--config", p(&spec_path), "--out", p(&data)])?;
    Ok(data.join("manifest.toml"))
}

/// The desk-scale model shared by the run-based criteria.
fn run_config(manifest: &Path, experiment: &str) -> String {
    format!(
        r#"[data]
manifest = "{}"

[encoder]
layers = 2
hidden = 32
heads = 2
vocab = 2000
max_len = 32
intermediate = 64

[head]
kind = "cnn"
maps_per_filter = 16
fc_hidden = 16
num_classes = 2

[training]
epochs = 10
encoder_lr = 1e-3
head_lr = 3e-3

[experiment]
{experiment}
"#,
        p(manifest)
    )
}

fn write(path: &Path, text: &str) -> Result<PathBuf, String> {
    fs::write(path, text).map_err(|e| e.to_string())?;
    Ok(path.to_path_buf())
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn selected_ids(out: &Path) -> Result<Vec<Vec<u64>>, String> {
    let mut paths: Vec<PathBuf> = fs::read_dir(out.join("journals"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    paths.sort();
    let mut ids = Vec::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
            if v["event"] == "selected" {
                ids.push(
                    v["ids"]
                        .as_array()
                        .into_iter()
                        .flatten()
                        .filter_map(|x| x.as_u64())
                        .collect(),
                );
            }
        }
    }
    Ok(ids)
}

fn determinism_replay(dir: &Path) -> Outcome {
    let dir = dir.join("determinism");
    let manifest = synth(
        &dir,
        "classes = 2\npool_size = 300\neval_size = 100\ndifficulty = 0.3\nseed = 3\n",
    )?;
    let cfg = write(
        &dir.join("run.toml"),
        &run_config(
            &manifest,
            "initial_size = 10\nq = 10\nrounds = 3\nsamples = 10\nnum_runs = 2\nseeds = [1, 2]\n\n[sweep]\nstrategies = [\"bald\", \"random\"]",
        ),
    )?;
    let (a, b) = (dir.join("a"), dir.join("b"));
    altc(&["run", "--config", p(&cfg), "--out", p(&a)])?;
    altc(&["run", "--config", p(&cfg), "--out", p(&b)])?;
    let (x, y) = (
        read(&a.join("report/accuracy.csv"))?,
        read(&b.join("report/accuracy.csv"))?,
    );
    ensure(x == y, || "accuracy.csv differs between executions".into())?;
    let (ia, ib) = (selected_ids(&a)?, selected_ids(&b)?);
    ensure(ia == ib && !ia.is_empty(), || {
        "selected ids differ between executions".into()
    })?;
    Ok(format!(
        "2 executions, {} bytes of accuracy.csv, {} selections identical",
        x.len(),
        ia.len()
    ))
}

/// Per-run `(t_size, accuracy)` series of one strategy.
fn curves(out: &Path, strategy: Strategy) -> Result<Vec<Vec<(usize, f64)>>, String> {
    let rows = read_accuracy_csv(
        fs::File::open(out.join("report/accuracy.csv")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let runs = rows.iter().map(|r| r.run).max().map_or(0, |m| m + 1);
    Ok((0..runs)
        .map(|k| {
            rows.iter()
                .filter(|r| r.strategy == strategy && r.run == k)
                .map(|r| (r.t_size, r.accuracy))
                .collect()
        })
        .collect())
}

/// Trapezoidal area under accuracy vs |T|, normalized by the |T| span.
fn auc(curve: &[(usize, f64)]) -> f64 {
    let span = (curve[curve.len() - 1].0 - curve[0].0) as f64;
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as f64 * (w[0].1 + w[1].1) / 2.0)
        .sum::<f64>()
        / span
}

type Metric = fn(&[(usize, f64)]) -> f64;

const TREND_EXPERIMENT: &str = "initial_size = 10\nq = 20\nrounds = 5\nsamples = 20\nnum_runs = 5\nseeds = [1, 2, 3, 4, 5]\n\n[sweep]\nstrategies = [\"bald\", \"random\"]";

fn accuracy_trend(dir: &Path) -> Outcome {
    let dir = dir.join("trend");
    let manifest = synth(
        &dir,
        "classes = 2\npool_size = 2000\ndifficulty = 0.3\nseed = 1\n",
    )?;
    let cfg = write(
        &dir.join("run.toml"),
        &run_config(&manifest, TREND_EXPERIMENT),
    )?;
    let out = dir.join("out");
    altc(&["run", "--config", p(&cfg), "--out", p(&out)])?;
    let (b, r) = (
        curves(&out, Strategy::Bald)?,
        curves(&out, Strategy::Random)?,
    );
    let last = |c: &[(usize, f64)]| c[c.len() - 1].1;
    let wins = b.iter().zip(&r).filter(|(x, y)| last(x) >= last(y)).count();
    let mean =
        |v: &[Vec<(usize, f64)>], f: Metric| v.iter().map(|c| f(c)).sum::<f64>() / v.len() as f64;
    let (auc_b, auc_r) = (mean(&b, auc), mean(&r, auc));
    let (fin_b, fin_r) = (mean(&b, last), mean(&r, last));
    let detail = format!(
        "final acc BALD {fin_b:.4} vs Random {fin_r:.4}; BALD >= Random in {wins}/{} seeds; mean AUC {auc_b:.4} vs {auc_r:.4}",
        b.len()
    );
    if wins >= 4 && auc_b > auc_r {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn class_skew(dir: &Path) -> Outcome {
    let dir = dir.join("skew");
    let manifest = synth(&dir, "classes = 2\npool_size = 2000\ndifficulty = 0.3\nclass_difficulty = [0.05, 0.55]\nseed = 1\n")?;
    let cfg = write(
        &dir.join("run.toml"),
        &run_config(&manifest, TREND_EXPERIMENT),
    )?;
    let out = dir.join("out");
    altc(&["run", "--config", p(&cfg), "--out", p(&out)])?;
    let rows =
        read_delta_csv(fs::File::open(out.join("report/delta.csv")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let last = rows.iter().map(|r| r.round).max().unwrap_or(0);
    let delta = |s: Strategy| {
        rows.iter()
            .find(|r| r.strategy == s && r.round == last)
            .map(|r| r.delta)
    };
    let (Some(b), Some(r)) = (delta(Strategy::Bald), delta(Strategy::Random)) else {
        return Err("delta.csv lacks a final-round row".into());
    };
    let detail = format!("final-round mean delta|T| BALD {b:.1} vs Random {r:.1}");
    if b > r {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mad_report(dir: &Path) -> Outcome {
    let dir = dir.join("mad");
    let manifest = synth(&dir, "classes = 2\npool_size = 400\neval_size = 200\ndifficulty = 0.3\npairs = true\nclass_names = [\"entailment\", \"not_entailment\"]\nseed = 2\n")?;
    let cfg = write(
        &dir.join("run.toml"),
        &run_config(&manifest, "initial_size = 10\nq = 20\nrounds = 2\nsamples = 20\nnum_runs = 2\nseeds = [1, 2]\nfreeze = 1"),
    )?;
    let out = dir.join("out");
    altc(&["run", "--config", p(&cfg), "--out", p(&out)])?;
    let mad = read_mad_csv(fs::File::open(out.join("report/mad.csv")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let layer = |i: i32| mad.iter().find(|d| d.layer == i);
    let l0 = layer(0).ok_or("mad.csv has no layer 0")?;
    ensure(l0.mad == 0.0, || {
        format!("frozen layer 0 has MAD {}", l0.mad)
    })?;
    let l1 = layer(1).ok_or("mad.csv has no layer 1")?;
    ensure(l1.mad > 0.0, || "trainable layer 1 did not move".into())?;
    let head = mad.iter().filter(|d| d.layer >= 2).count();
    ensure(
        head > 0 && mad.iter().filter(|d| d.layer >= 2).all(|d| d.mad > 0.0),
        || "head layers missing or static".into(),
    )?;
    let svg = String::from_utf8(read(&out.join("report/mad.svg"))?).map_err(|e| e.to_string())?;
    ensure(
        svg.contains(r#"class="head-boundary" data-layer="2""#),
        || "mad.svg lacks the boundary at L=2".into(),
    )?;
    Ok(format!(
        "F=1 on L=2: layer 0 MAD 0, layer 1 MAD {:.2e}, {head} head layers, boundary at 2",
        l1.mad
    ))
}

fn ci_width(_: &Path) -> Outcome {
    let series: Vec<Vec<(usize, f64)>> = [0.7, 0.8, 0.9].iter().map(|&a| vec![(10, a)]).collect();
    let agg = aggregate_runs(&series).map_err(|e| e.to_string())?;
    let w = agg[0].width;
    ensure((w - 0.4969).abs() < 1e-3, || format!("width {w}"))?;
    Ok(format!("width {w:.6}"))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria = [
        Criterion {
            name: "bald-closed-form",
            gating: true,
            run: bald_closed_form,
        },
        Criterion {
            name: "log-base-invariance",
            gating: true,
            run: log_base_invariance,
        },
        Criterion {
            name: "gradient-suite",
            gating: true,
            run: gradient_suite,
        },
        Criterion {
            name: "freeze-semantics",
            gating: true,
            run: freeze_semantics,
        },
        Criterion {
            name: "acquisition-brute-force",
            gating: true,
            run: acquisition_brute_force,
        },
        Criterion {
            name: "determinism-replay",
            gating: true,
            run: determinism_replay,
        },
        Criterion {
            name: "accuracy-trend",
            gating: false,
            run: accuracy_trend,
        },
        Criterion {
            name: "class-skew",
            gating: false,
            run: class_skew,
        },
        Criterion {
            name: "mad-report",
            gating: true,
            run: mad_report,
        },
        Criterion {
            name: "ci-width",
            gating: true,
            run: ci_width,
        },
    ];
    // `cargo test` passes libtest flags and an optional name filter.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let strict = std::env::var("ALTC_ACCEPTANCE_STRICT").is_ok_and(|v| !v.is_empty() && v != "0");
    let keep = std::env::var_os("ALTC_ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = keep.clone().unwrap_or_else(|| tmp.path().to_path_buf());

    let mut failed_gating = 0;
    let mut passed = 0;
    let mut ran = 0;
    for c in criteria
        .iter()
        .filter(|c| filter.as_deref().is_none_or(|f| c.name.contains(f)))
    {
        ran += 1;
        let start = Instant::now();
        let outcome = (c.run)(&root);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("PASS  {:<24} {secs:>7.1}s  {detail}", c.name);
            }
            Err(detail) => {
                let note = if c.gating || strict {
                    ""
                } else {
                    " [trend, not gating]"
                };
                if c.gating || strict {
                    failed_gating += 1;
                }
                println!("FAIL  {:<24} {secs:>7.1}s  {detail}{note}", c.name);
            }
        }
    }
    println!("{passed}/{ran} acceptance criteria passed");
    if let Some(dir) = keep {
        println!("artifacts kept in {}", dir.display());
    }
    if failed_gating > 0 {
        std::process::exit(1);
    }
}
