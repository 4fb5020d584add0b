//! Finite-difference checks of every differentiable primitive and of the
//! full encoder + head.

use altc_core::autodiff::nn::{dense, multi_head_attention, seq_conv, AttentionVars};
use altc_core::autodiff::{grad_check, ForwardMode, Graph, Tensor, TensorError, Var};
use altc_core::model::{EncodedInput, EncoderConfig, HeadConfig, ModelState};
use altc_core::rng::{Purpose, RngStream, StreamKey};

const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;
const H: f64 = 1e-5;

fn rand_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(1.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output element carries a distinct weight.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.value(out).shape().to_vec();
    let mut r = RngStream::new(seed, StreamKey::new(Purpose::Synth).with(999));
    let w = g.constant(rand_tensor(&mut r, &shape));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn check<F>(name: &str, shapes: &[&[usize]], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var], u64) -> Result<Var, TensorError>,
{
    check_mode(name, shapes, ForwardMode::Train, build)
}

fn check_mode<F>(name: &str, shapes: &[&[usize]], mode: ForwardMode, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var], u64) -> Result<Var, TensorError>,
{
    for seed in 0..SEEDS {
        let mut r = RngStream::new(seed, StreamKey::new(Purpose::Init));
        let params: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut r, s)).collect();
        let total: usize = params.iter().map(Tensor::len).sum();
        let report = grad_check(&params, mode, |g, v| build(g, v, seed), total, H, &mut r).unwrap();
        assert!(report.passes(TOL), "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn matmul() {
    check("matmul", &[&[3, 4], &[4, 2]], |g, v, s| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, s)
    });
}

#[test]
fn matmul_nt() {
    check("matmul_nt", &[&[3, 4], &[5, 4]], |g, v, s| {
        let y = g.matmul_nt(v[0], v[1])?;
        project(g, y, s)
    });
}

#[test]
fn add_bias_add_mul_scale() {
    check("elementwise", &[&[3, 4], &[4], &[3, 4]], |g, v, s| {
        let a = g.add_bias(v[0], v[1])?;
        let b = g.mul(a, v[2])?;
        let c = g.add(b, v[0])?;
        let d = g.scale(c, 0.7);
        project(g, d, s)
    });
}

#[test]
fn relu() {
    check("relu", &[&[4, 5]], |g, v, s| {
        let y = g.relu(v[0]);
        project(g, y, s)
    });
}

#[test]
fn gelu() {
    check("gelu", &[&[4, 5]], |g, v, s| {
        let y = g.gelu(v[0]);
        project(g, y, s)
    });
}

#[test]
fn softmax_rows() {
    check("softmax_rows", &[&[3, 5]], |g, v, s| {
        let y = g.softmax_rows(v[0])?;
        project(g, y, s)
    });
}

#[test]
fn layer_norm() {
    check("layer_norm", &[&[3, 6], &[6], &[6]], |g, v, s| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        project(g, y, s)
    });
}

#[test]
fn batch_norm_train_and_eval() {
    for mode in [ForwardMode::Train, ForwardMode::Eval] {
        check_mode("batch_norm", &[&[6, 3], &[3], &[3]], mode, |g, v, s| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0])?;
            project(g, y, s)
        });
    }
}

#[test]
fn gather_slice_concat() {
    check("gather/slice/concat", &[&[5, 4], &[2, 4]], |g, v, s| {
        let rows = g.gather_rows(v[0], &[4, 0, 4, 2])?;
        let left = g.slice_cols(rows, 1, 2)?;
        let right = g.slice_cols(rows, 3, 1)?;
        let cols = g.concat_cols(&[right, left])?;
        let other = g.slice_cols(v[1], 0, 3)?;
        let stacked = g.concat_rows(&[cols, other])?;
        project(g, stacked, s)
    });
}

#[test]
fn unfold_and_max_pool() {
    check("unfold/max_pool", &[&[7, 3]], |g, v, s| {
        let u = g.unfold(v[0], 3)?;
        let p = g.max_pool_segments(u, &[2, 3])?;
        project(g, p, s)
    });
}

#[test]
fn dropout_with_fixed_mask() {
    check("dropout", &[&[4, 5]], |g, v, s| {
        let mut r = RngStream::new(s, StreamKey::new(Purpose::Dropout));
        let y = g.dropout(v[0], 0.3, false, Some(&mut r))?;
        project(g, y, s)
    });
}

#[test]
fn softmax_cross_entropy() {
    check("softmax_cross_entropy", &[&[4, 3]], |g, v, _| {
        g.softmax_cross_entropy(v[0], &[0, 2, 1, 2])
    });
}

#[test]
fn dense_and_conv() {
    check(
        "dense/seq_conv",
        &[&[6, 4], &[8, 3], &[3], &[3, 2], &[2]],
        |g, v, s| {
            let c = seq_conv(g, v[0], v[1], v[2], 2)?;
            let d = dense(g, c, v[3], v[4])?;
            project(g, d, s)
        },
    );
}

fn attention_vars(v: &[Var], bk: Var) -> AttentionVars {
    AttentionVars {
        wq: v[1],
        bq: v[2],
        wk: v[3],
        bk,
        wv: v[4],
        bv: v[5],
        wo: v[6],
        bo: v[7],
    }
}

// The key bias only shifts every score in a row by the same amount, which
// softmax ignores: its true gradient is zero, so it is checked separately.
#[test]
fn attention() {
    let shapes: &[&[usize]] = &[
        &[5, 4],
        &[4, 4],
        &[4],
        &[4, 4],
        &[4, 4],
        &[4],
        &[4, 4],
        &[4],
    ];
    check("multi_head_attention", shapes, |g, v, s| {
        let bk = g.constant(Tensor::from_vec(vec![0.3, -0.1, 0.2, 0.5]));
        let p = attention_vars(v, bk);
        let y = multi_head_attention(g, v[0], &p, 2)?;
        project(g, y, s)
    });
}

#[test]
fn attention_key_bias_gradient_vanishes() {
    let mut r = RngStream::new(4, StreamKey::new(Purpose::Init));
    let mut g = Graph::new(ForwardMode::Train);
    let v: Vec<Var> = [
        &[5, 4][..],
        &[4, 4],
        &[4],
        &[4, 4],
        &[4, 4],
        &[4],
        &[4, 4],
        &[4],
    ]
    .iter()
    .map(|s| g.leaf(rand_tensor(&mut r, s), true))
    .collect();
    let bk = g.leaf(rand_tensor(&mut r, &[4]), true);
    let p = attention_vars(&v, bk);
    let y = multi_head_attention(&mut g, v[0], &p, 2).unwrap();
    let loss = project(&mut g, y, 4).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(bk).unwrap().iter().all(|x| x.abs() < 1e-10));
}

fn tiny_model(seed: u64) -> ModelState<f64> {
    let enc = EncoderConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        vocab: 40,
        max_len: 12,
        intermediate: 16,
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
    .unwrap()
}

#[test]
fn full_model_cross_entropy() {
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
        for seed in 0..3 {
            let m = tiny_model(seed);
            // Move away from the small-weight initialization so that attention
            // gradients are well above finite-difference noise.
            let mut jitter = RngStream::new(seed, StreamKey::new(Purpose::Synth).with(1));
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
                    Tensor::new(p.value.shape().to_vec(), data).unwrap()
                })
                .collect();
            // Key biases have an identically zero gradient (see above). Under
            // batch statistics so do the convolution biases and the last
            // block's output LN bias: both shift every convolution output row
            // equally and batch norm removes the mean. All enter as constants.
            let is_bk: Vec<bool> = m
                .params()
                .iter()
                .map(|p| {
                    p.name.ends_with("attn.bk")
                        || (mode == ForwardMode::Train
                            && (p.name == "encoder.1.ln2.beta"
                                || (p.name.starts_with("head.conv") && p.name.ends_with(".b"))))
                })
                .collect();
            let params: Vec<Tensor<f64>> = all
                .iter()
                .zip(&is_bk)
                .filter(|(_, &k)| !k)
                .map(|(t, _)| t.clone())
                .collect();
            let build = |g: &mut Graph<f64>, free: &[Var]| {
                let mut free = free.iter();
                let vars: Vec<Var> = all
                    .iter()
                    .zip(&is_bk)
                    .map(|(t, &k)| {
                        if k {
                            g.constant(t.clone())
                        } else {
                            *free.next().unwrap()
                        }
                    })
                    .collect();
                let mut r = RngStream::new(seed, StreamKey::new(Purpose::Dropout));
                let (logits, _) =
                    m.forward_logits(g, &vars, &batch, Some(&mut r))
                        .map_err(|e| match e {
                            altc_core::model::ModelError::Tensor(t) => t,
                            other => panic!("{other}"),
                        })?;
                g.softmax_cross_entropy(logits, &targets)
            };
            let mut r = RngStream::new(seed, StreamKey::new(Purpose::Synth));
            let report = grad_check(&params, mode, build, 400, H, &mut r).unwrap();
            assert!(report.passes(TOL), "{mode:?} seed {seed}: {report:?}");
        }
    }
}
