//! CSV and SVG report files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::svg::{accuracy_svg, classes_svg, mad_svg, AccuracyCurve};
use super::{aggregate_runs, AnalysisError, LayerDelta};
use crate::acquisition::Strategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub strategy: Strategy,
    #[serde(rename = "F")]
    pub freeze: i32,
    pub run: usize,
    pub round: usize,
    #[serde(rename = "T_size")]
    pub t_size: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    #[serde(rename = "F")]
    pub freeze: i32,
    pub round: usize,
    #[serde(rename = "T_size")]
    pub t_size: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
    pub runs: usize,
}

/// Per-class size of T after a round, averaged over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub round: usize,
    pub class: String,
    pub count: f64,
    pub delta: f64,
}

/// Mean largest-minus-smallest class count per round and arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub strategy: Strategy,
    #[serde(rename = "F")]
    pub freeze: i32,
    pub round: usize,
    #[serde(rename = "T_size")]
    pub t_size: usize,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MadRow {
    layer: i32,
    #[serde(rename = "MAD")]
    mad: f64,
    variance: f64,
    count: usize,
}

/// Everything one strategy/freeze combination contributes besides accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmReport {
    pub strategy: Strategy,
    pub freeze: i32,
    /// Final-round drift, averaged over runs.
    pub mad: Vec<LayerDelta>,
    pub classes: Vec<ClassRow>,
}

impl ArmReport {
    pub fn label(&self) -> String {
        arm_label(self.strategy, self.freeze)
    }
}

fn arm_label(strategy: Strategy, freeze: i32) -> String {
    format!("{}_f{}", strategy.name(), freeze)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportData {
    pub accuracy: Vec<AccuracyRow>,
    pub arms: Vec<ArmReport>,
    /// Index of the first head layer, i.e. the encoder depth.
    pub first_head_layer: i32,
}

fn write_rows<W: Write, S: Serialize>(
    w: W,
    rows: &[S],
    header: &[&str],
) -> Result<(), AnalysisError> {
    let err = |e: csv::Error| AnalysisError::Csv(e.to_string());
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(header).map_err(err)?;
    for r in rows {
        out.serialize(r).map_err(err)?;
    }
    out.flush().map_err(|e| AnalysisError::Csv(e.to_string()))
}

fn read_rows<R: Read, D: DeserializeOwned>(r: R) -> Result<Vec<D>, AnalysisError> {
    csv::Reader::from_reader(r)
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| AnalysisError::Csv(format!("row {}: {e}", i + 2))))
        .collect()
}

const ACCURACY_HEADER: &[&str] = &["strategy", "F", "run", "round", "T_size", "accuracy"];
const SUMMARY_HEADER: &[&str] = &[
    "strategy", "F", "round", "T_size", "mean", "lower", "upper", "width", "runs",
];
const MAD_HEADER: &[&str] = &["layer", "MAD", "variance", "count"];
const CLASSES_HEADER: &[&str] = &["round", "class", "count", "delta"];
const DELTA_HEADER: &[&str] = &["strategy", "F", "round", "T_size", "delta"];

pub fn write_accuracy_csv<W: Write>(w: W, rows: &[AccuracyRow]) -> Result<(), AnalysisError> {
    write_rows(w, rows, ACCURACY_HEADER)
}

pub fn read_accuracy_csv<R: Read>(r: R) -> Result<Vec<AccuracyRow>, AnalysisError> {
    read_rows(r)
}

pub fn write_summary_csv<W: Write>(w: W, rows: &[SummaryRow]) -> Result<(), AnalysisError> {
    write_rows(w, rows, SUMMARY_HEADER)
}

pub fn read_summary_csv<R: Read>(r: R) -> Result<Vec<SummaryRow>, AnalysisError> {
    read_rows(r)
}

pub fn write_mad_csv<W: Write>(w: W, rows: &[LayerDelta]) -> Result<(), AnalysisError> {
    let rows: Vec<MadRow> = rows
        .iter()
        .map(|d| MadRow {
            layer: d.layer,
            mad: d.mad,
            variance: d.variance,
            count: d.count,
        })
        .collect();
    write_rows(w, &rows, MAD_HEADER)
}

pub fn read_mad_csv<R: Read>(r: R) -> Result<Vec<LayerDelta>, AnalysisError> {
    Ok(read_rows::<_, MadRow>(r)?
        .into_iter()
        .map(|m| LayerDelta {
            layer: m.layer,
            mad: m.mad,
            variance: m.variance,
            count: m.count,
        })
        .collect())
}

pub fn write_classes_csv<W: Write>(w: W, rows: &[ClassRow]) -> Result<(), AnalysisError> {
    write_rows(w, rows, CLASSES_HEADER)
}

pub fn read_classes_csv<R: Read>(r: R) -> Result<Vec<ClassRow>, AnalysisError> {
    read_rows(r)
}

pub fn write_delta_csv<W: Write>(w: W, rows: &[DeltaRow]) -> Result<(), AnalysisError> {
    write_rows(w, rows, DELTA_HEADER)
}

pub fn read_delta_csv<R: Read>(r: R) -> Result<Vec<DeltaRow>, AnalysisError> {
    read_rows(r)
}

/// Arms in first-appearance order of the accuracy rows.
fn arms_of(rows: &[AccuracyRow]) -> Vec<(Strategy, i32)> {
    let mut arms = Vec::new();
    for r in rows {
        if !arms.contains(&(r.strategy, r.freeze)) {
            arms.push((r.strategy, r.freeze));
        }
    }
    arms
}

impl ReportData {
    /// Mean and 95% interval per arm and round.
    pub fn summary(&self) -> Result<Vec<SummaryRow>, AnalysisError> {
        let mut out = Vec::new();
        for (strategy, freeze) in arms_of(&self.accuracy) {
            let mut runs: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
            let mut rounds: BTreeMap<usize, usize> = BTreeMap::new();
            for r in self
                .accuracy
                .iter()
                .filter(|r| r.strategy == strategy && r.freeze == freeze)
            {
                runs.entry(r.run).or_default().push((r.t_size, r.accuracy));
                rounds.insert(r.t_size, r.round);
            }
            let series: Vec<Vec<(usize, f64)>> = runs
                .into_values()
                .map(|mut s| {
                    s.sort_by_key(|p| p.0);
                    s
                })
                .collect();
            for a in aggregate_runs(&series)? {
                out.push(SummaryRow {
                    strategy,
                    freeze,
                    round: rounds[&a.t_size],
                    t_size: a.t_size,
                    mean: a.mean,
                    lower: a.lower,
                    upper: a.upper,
                    width: a.width,
                    runs: a.runs,
                });
            }
        }
        Ok(out)
    }

    pub fn deltas(&self) -> Vec<DeltaRow> {
        let mut out = Vec::new();
        for arm in &self.arms {
            let t_size = |round: usize| {
                self.accuracy
                    .iter()
                    .find(|r| {
                        r.strategy == arm.strategy && r.freeze == arm.freeze && r.round == round
                    })
                    .map_or(0, |r| r.t_size)
            };
            let mut seen = Vec::new();
            for c in &arm.classes {
                if !seen.contains(&c.round) {
                    seen.push(c.round);
                    out.push(DeltaRow {
                        strategy: arm.strategy,
                        freeze: arm.freeze,
                        round: c.round,
                        t_size: t_size(c.round),
                        delta: c.delta,
                    });
                }
            }
        }
        out
    }
}

fn create(path: &Path) -> Result<fs::File, AnalysisError> {
    fs::File::create(path).map_err(|e| AnalysisError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), AnalysisError> {
    create(path)?
        .write_all(text.as_bytes())
        .map_err(|e| AnalysisError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

/// Writes `accuracy.csv`, `accuracy_summary.csv`, `delta.csv`, plus
/// `mad.csv`/`classes.csv` for the first arm and `mad_<arm>.csv`/
/// `classes_<arm>.csv` for every arm, and the matching SVG charts.
/// Returns the written paths.
pub fn emit_report(data: &ReportData, dir: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    if data.accuracy.is_empty() {
        return Err(AnalysisError::EmptyReport);
    }
    fs::create_dir_all(dir).map_err(|e| AnalysisError::Io {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut written = Vec::new();
    let mut emit_csv = |name: &str,
                        f: &dyn Fn(fs::File) -> Result<(), AnalysisError>|
     -> Result<(), AnalysisError> {
        let path = dir.join(name);
        f(create(&path)?)?;
        written.push(path);
        Ok(())
    };

    let summary = data.summary()?;
    emit_csv("accuracy.csv", &|f| write_accuracy_csv(f, &data.accuracy))?;
    emit_csv("accuracy_summary.csv", &|f| write_summary_csv(f, &summary))?;
    emit_csv("delta.csv", &|f| write_delta_csv(f, &data.deltas()))?;
    if let Some(first) = data.arms.first() {
        emit_csv("mad.csv", &|f| write_mad_csv(f, &first.mad))?;
        emit_csv("classes.csv", &|f| write_classes_csv(f, &first.classes))?;
    }
    for arm in &data.arms {
        let label = arm.label();
        emit_csv(&format!("mad_{label}.csv"), &|f| write_mad_csv(f, &arm.mad))?;
        emit_csv(&format!("classes_{label}.csv"), &|f| {
            write_classes_csv(f, &arm.classes)
        })?;
    }

    let curves: Vec<AccuracyCurve> = arms_of(&data.accuracy)
        .into_iter()
        .map(|(s, f)| {
            let pts = summary
                .iter()
                .filter(|r| r.strategy == s && r.freeze == f)
                .map(|r| (r.t_size, r.mean, r.lower, r.upper))
                .collect();
            (arm_label(s, f), pts)
        })
        .collect();
    let mut svgs = vec![("accuracy.svg".to_string(), accuracy_svg(&curves))];
    for (i, arm) in data.arms.iter().enumerate() {
        let label = arm.label();
        let mad = mad_svg(
            &arm.mad,
            data.first_head_layer,
            &format!("Parameter drift ({label})"),
        );
        let classes = classes_svg(&arm.classes, &format!("Class counts in T ({label})"));
        if i == 0 {
            svgs.push(("mad.svg".into(), mad.clone()));
            svgs.push(("classes.svg".into(), classes.clone()));
        }
        svgs.push((format!("mad_{label}.svg"), mad));
        svgs.push((format!("classes_{label}.svg"), classes));
    }
    for (name, text) in svgs {
        let path = dir.join(name);
        write_text(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acc(strategy: Strategy, run: usize, round: usize, a: f64) -> AccuracyRow {
        AccuracyRow {
            strategy,
            freeze: 0,
            run,
            round,
            t_size: 10 + 20 * round,
            accuracy: a,
        }
    }

    #[test]
    fn accuracy_round_trip() {
        let rows = vec![
            acc(Strategy::Bald, 0, 0, 0.1 + 0.2),
            acc(Strategy::Random, 1, 3, 1.0 / 3.0),
        ];
        let mut buf = Vec::new();
        write_accuracy_csv(&mut buf, &rows).unwrap();
        assert!(buf.starts_with(b"strategy,F,run,round,T_size,accuracy\n"));
        assert_eq!(read_accuracy_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn mad_and_classes_round_trip() {
        let mad = vec![
            LayerDelta {
                layer: -1,
                mad: 0.0,
                variance: 0.0,
                count: 4,
            },
            LayerDelta {
                layer: 2,
                mad: 1e-7,
                variance: 3.5e-15,
                count: 9,
            },
        ];
        let mut buf = Vec::new();
        write_mad_csv(&mut buf, &mad).unwrap();
        assert!(buf.starts_with(b"layer,MAD,variance,count\n"));
        assert_eq!(read_mad_csv(&buf[..]).unwrap(), mad);

        let classes = vec![
            ClassRow {
                round: 0,
                class: "pos".into(),
                count: 5.0,
                delta: 0.0,
            },
            ClassRow {
                round: 0,
                class: "a,b".into(),
                count: 5.0 / 3.0,
                delta: 0.0,
            },
        ];
        let mut buf = Vec::new();
        write_classes_csv(&mut buf, &classes).unwrap();
        assert_eq!(read_classes_csv(&buf[..]).unwrap(), classes);
    }

    #[test]
    fn one_run_two_rounds_gives_two_rows() {
        let data = ReportData {
            accuracy: vec![
                acc(Strategy::Bald, 0, 0, 0.5),
                acc(Strategy::Bald, 0, 1, 0.6),
            ],
            arms: vec![],
            first_head_layer: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        emit_report(&data, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("accuracy.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        let summary =
            read_summary_csv(fs::File::open(dir.path().join("accuracy_summary.csv")).unwrap())
                .unwrap();
        assert_eq!(summary.len(), 2);
        assert!(summary.iter().all(|r| r.width == 0.0 && r.runs == 1));
    }

    #[test]
    fn unwritable_dir_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, "x").unwrap();
        let data = ReportData {
            accuracy: vec![acc(Strategy::Bald, 0, 0, 0.5)],
            arms: vec![],
            first_head_layer: 2,
        };
        let err = emit_report(&data, &file.join("sub")).unwrap_err();
        assert!(err.to_string().contains("occupied"), "{err}");
    }

    #[test]
    fn empty_report_rejected() {
        let data = ReportData {
            accuracy: vec![],
            arms: vec![],
            first_head_layer: 0,
        };
        assert!(emit_report(&data, Path::new("/nonexistent")).is_err());
    }
}
