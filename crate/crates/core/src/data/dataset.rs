use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub element_id: usize,
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Tsv,
    Jsonl,
}

/// Locations and label set of a dataset. Relative paths are resolved
/// against the manifest's directory by [`load_manifest`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub train: PathBuf,
    pub eval: PathBuf,
    pub classes: Vec<String>,
    pub format: DataFormat,
}

/// Class name <-> index map in manifest order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Result<Self, DataError> {
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(DataError::Manifest(format!("duplicate class `{n}`")));
            }
        }
        if names.is_empty() {
            return Err(DataError::Manifest("no classes".into()));
        }
        Ok(ClassMap { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Train pool and eval split with their class map.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<DatasetRecord>,
    pub eval: Vec<DatasetRecord>,
    pub classes: ClassMap,
}

impl Dataset {
    pub fn label_index(&self, record: &DatasetRecord) -> usize {
        self.classes
            .index_of(&record.label)
            .expect("labels validated at load")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut m: DatasetManifest = toml::from_str(&text)
        .map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    if m.train.is_relative() {
        m.train = base.join(&m.train);
    }
    if m.eval.is_relative() {
        m.eval = base.join(&m.eval);
    }
    Ok(m)
}

#[derive(Deserialize)]
struct JsonRow {
    label: String,
    text_a: String,
    #[serde(default)]
    text_b: Option<String>,
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.filter(|t| !t.trim().is_empty())
}

/// Reads one split. Element ids are `0..n` in file order.
pub fn load_split(
    path: &Path,
    format: DataFormat,
    classes: &ClassMap,
) -> Result<Vec<DatasetRecord>, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let parse = |line: usize, msg: String| DataError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate();
    if format == DataFormat::Tsv {
        let header = match lines.next() {
            Some((_, l)) => l.map_err(io_err(path))?,
            None => return Err(parse(1, "missing header".into())),
        };
        let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
        if cols.len() < 2
            || cols[0] != "label"
            || cols[1] != "text_a"
            || cols.get(2).is_some_and(|c| *c != "text_b")
        {
            return Err(parse(
                1,
                format!("expected header `label<TAB>text_a<TAB>text_b`, got `{header}`"),
            ));
        }
    }
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (label, text_a, text_b) = match format {
            DataFormat::Tsv => {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() < 2 || fields.len() > 3 {
                    return Err(parse(
                        line_no,
                        format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
                    ));
                }
                (
                    fields[0].to_string(),
                    fields[1].to_string(),
                    fields.get(2).map(|s| s.to_string()),
                )
            }
            DataFormat::Jsonl => {
                let row: JsonRow =
                    serde_json::from_str(line).map_err(|e| parse(line_no, e.to_string()))?;
                (row.label, row.text_a, row.text_b)
            }
        };
        if classes.index_of(&label).is_none() {
            return Err(DataError::UnknownLabel {
                path: path.to_path_buf(),
                line: line_no,
                label,
            });
        }
        if text_a.trim().is_empty() {
            return Err(parse(line_no, "empty text_a".into()));
        }
        records.push(DatasetRecord {
            element_id: records.len(),
            text_a,
            text_b: non_empty(text_b),
            label,
        });
    }
    Ok(records)
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset, DataError> {
    let classes = ClassMap::new(manifest.classes.clone())?;
    let train = load_split(&manifest.train, manifest.format, &classes)?;
    let eval = load_split(&manifest.eval, manifest.format, &classes)?;
    Ok(Dataset {
        train,
        eval,
        classes,
    })
}

/// Writes records in the given format. Tabs and newlines inside text are
/// replaced by spaces so every record stays on one TSV line.
pub fn write_split(
    path: &Path,
    format: DataFormat,
    records: &[DatasetRecord],
) -> Result<(), DataError> {
    let clean = |s: &str| s.replace(['\t', '\n', '\r'], " ");
    let mut out = Vec::new();
    match format {
        DataFormat::Tsv => {
            out.extend_from_slice(b"label\ttext_a\ttext_b\n");
            for r in records {
                let b = r.text_b.as_deref().map(clean).unwrap_or_default();
                out.extend_from_slice(
                    format!("{}\t{}\t{}\n", clean(&r.label), clean(&r.text_a), b).as_bytes(),
                );
            }
        }
        DataFormat::Jsonl => {
            for r in records {
                let v =
                    serde_json::json!({"label": r.label, "text_a": r.text_a, "text_b": r.text_b});
                out.extend_from_slice(v.to_string().as_bytes());
                out.push(b'\n');
            }
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))?;
    Ok(())
}
