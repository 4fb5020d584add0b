//! Report files against golden copies, and class-balance statistics.
//!
//! The golden summary numbers were computed separately with SciPy's
//! Student-t quantile.

use std::fs;
use std::path::{Path, PathBuf};

use altc_core::acquisition::{random_score, select_top_q, ScoreTable, Strategy};
use altc_core::analysis::{
    class_delta, emit_report, read_summary_csv, AccuracyRow, ArmReport, ClassRow, LayerDelta,
    ReportData,
};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn fixture() -> ReportData {
    let acc = [
        (Strategy::Bald, [[0.5, 0.7], [0.55, 0.8], [0.6, 0.9]]),
        (Strategy::Random, [[0.5, 0.65], [0.55, 0.7], [0.6, 0.72]]),
    ];
    let mut accuracy = Vec::new();
    for (strategy, runs) in acc {
        for (run, rounds) in runs.iter().enumerate() {
            for (round, &a) in rounds.iter().enumerate() {
                accuracy.push(AccuracyRow {
                    strategy,
                    freeze: 0,
                    run,
                    round,
                    t_size: 10 + 20 * round,
                    accuracy: a,
                });
            }
        }
    }
    let classes = |late: [f64; 2]| {
        let d = (late[0] - late[1]).abs();
        vec![
            ClassRow {
                round: 0,
                class: "c0".into(),
                count: 5.0,
                delta: 0.0,
            },
            ClassRow {
                round: 0,
                class: "c1".into(),
                count: 5.0,
                delta: 0.0,
            },
            ClassRow {
                round: 1,
                class: "c0".into(),
                count: late[0],
                delta: d,
            },
            ClassRow {
                round: 1,
                class: "c1".into(),
                count: late[1],
                delta: d,
            },
        ]
    };
    let delta = |layer, mad, variance, count| LayerDelta {
        layer,
        mad,
        variance,
        count,
    };
    let mad = vec![
        delta(-1, 0.0, 0.0, 400),
        delta(0, 0.0, 0.0, 1200),
        delta(1, 0.0125, 0.0004, 1200),
        delta(2, 0.04, 0.0025, 96),
    ];
    ReportData {
        accuracy,
        arms: vec![
            ArmReport {
                strategy: Strategy::Bald,
                freeze: 0,
                mad: mad.clone(),
                classes: classes([18.0, 12.0]),
            },
            ArmReport {
                strategy: Strategy::Random,
                freeze: 0,
                mad,
                classes: classes([16.0, 14.0]),
            },
        ],
        first_head_layer: 2,
    }
}

#[test]
fn report_csvs_match_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let written = emit_report(&fixture(), dir.path()).unwrap();
    for name in ["accuracy.csv", "mad.csv", "classes.csv", "delta.csv"] {
        assert!(written.contains(&dir.path().join(name)));
        let got = fs::read_to_string(dir.path().join(name)).unwrap();
        let want = fs::read_to_string(golden(name)).unwrap();
        assert_eq!(got, want, "{name}");
    }
    // Quantiles come from two different libraries, so the summary is
    // compared numerically.
    let got =
        read_summary_csv(fs::File::open(dir.path().join("accuracy_summary.csv")).unwrap()).unwrap();
    let want = read_summary_csv(fs::File::open(golden("accuracy_summary.csv")).unwrap()).unwrap();
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(
            (g.strategy, g.freeze, g.round, g.t_size, g.runs),
            (w.strategy, w.freeze, w.round, w.t_size, w.runs)
        );
        for (a, b) in [
            (g.mean, w.mean),
            (g.lower, w.lower),
            (g.upper, w.upper),
            (g.width, w.width),
        ] {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
    assert!((got[1].width - 0.4969).abs() < 1e-3);
    for svg in ["accuracy.svg", "mad.svg", "classes.svg"] {
        let text = fs::read_to_string(dir.path().join(svg)).unwrap();
        assert!(
            text.starts_with("<svg") && text.trim_end().ends_with("</svg>"),
            "{svg}"
        );
    }
    let mad_svg = fs::read_to_string(dir.path().join("mad.svg")).unwrap();
    assert!(mad_svg.contains(r#"data-layer="2""#));
}

#[test]
fn per_arm_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    emit_report(&fixture(), dir.path()).unwrap();
    for arm in ["bald_f0", "random_f0"] {
        assert!(dir.path().join(format!("mad_{arm}.csv")).exists());
        assert!(dir.path().join(format!("classes_{arm}.csv")).exists());
    }
    let bald = fs::read_to_string(dir.path().join("classes_bald_f0.csv")).unwrap();
    assert_eq!(
        bald,
        fs::read_to_string(dir.path().join("classes.csv")).unwrap()
    );
}

#[test]
fn random_draws_from_a_balanced_pool_stay_balanced() {
    // 1000 elements per class; 200 independent draws of 100.
    let label = |id: usize| id % 2;
    let mut total = 0usize;
    for seed in 0..200u64 {
        let entries: Vec<(usize, f64)> = (0..2000)
            .map(|id| (id, random_score(seed, id, 0)))
            .collect();
        let table = ScoreTable::new(0, Strategy::Random, entries).unwrap();
        let picked = select_top_q(&table, 100).unwrap();
        let ones = picked.iter().filter(|&&id| label(id) == 1).count();
        let d = class_delta(&[("a".into(), 100 - ones), ("b".into(), ones)]);
        total += d.delta;
    }
    let mean = total as f64 / 200.0;
    // The binomial expectation of |2k - 100| is about 8.
    assert!(mean < 20.0, "mean delta {mean}");
    assert!(mean > 2.0, "suspiciously balanced: {mean}");
}
