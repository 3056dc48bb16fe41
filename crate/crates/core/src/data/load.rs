use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Classification,
    Regression,
}

/// Column roles of a CSV file. Columns neither ignored nor the target are
/// features; those listed in `categorical` are ordinal-encoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub target: String,
    pub target_kind: TargetKind,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub ignore: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
enum Column {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

/// Parsed but not yet encoded table.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub feature_names: Vec<String>,
    columns: Vec<Column>,
    /// Class ids by first appearance over the file, or regression values.
    pub target: Vec<f64>,
    pub class_names: Vec<String>,
    pub target_kind: TargetKind,
}

/// Numeric table ready for models.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTable {
    pub feature_names: Vec<String>,
    /// `[rows, features]`
    pub x: Tensor<f64>,
    pub y: Vec<f64>,
    pub target_kind: TargetKind,
    pub class_names: Vec<String>,
}

fn is_missing(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "NaN" | "nan" | "?")
}

/// Reads a headered UTF-8 CSV file.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let target_idx = header
        .iter()
        .position(|h| *h == schema.target)
        .ok_or_else(|| Error::Schema(format!("target column {:?} not found", schema.target)))?;
    for name in schema.categorical.iter().chain(&schema.ignore) {
        if !header.contains(name) {
            return Err(Error::Schema(format!("column {name:?} not found")));
        }
    }
    let feature_idx: Vec<usize> = (0..header.len())
        .filter(|&i| i != target_idx && !schema.ignore.contains(&header[i]))
        .collect();
    let mut columns: Vec<Column> = feature_idx
        .iter()
        .map(|&i| {
            if schema.categorical.contains(&header[i]) {
                Column::Categorical(Vec::new())
            } else {
                Column::Numeric(Vec::new())
            }
        })
        .collect();
    let mut target = Vec::new();
    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut class_names = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != header.len() {
            return Err(Error::Load { row, col: "*".into(), reason: format!("expected {} fields", header.len()) });
        }
        for (col, &i) in columns.iter_mut().zip(&feature_idx) {
            let cell = record[i].trim();
            match col {
                Column::Categorical(v) => v.push((!is_missing(cell)).then(|| cell.to_string())),
                Column::Numeric(v) => v.push(if is_missing(cell) {
                    None
                } else {
                    Some(cell.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::Load {
                        row,
                        col: header[i].clone(),
                        reason: format!("cannot parse {cell:?} as a number"),
                    })?)
                }),
            }
        }
        let cell = record[target_idx].trim();
        if is_missing(cell) {
            return Err(Error::Load { row, col: schema.target.clone(), reason: "missing target".into() });
        }
        target.push(match schema.target_kind {
            TargetKind::Regression => cell.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::Load {
                row,
                col: schema.target.clone(),
                reason: format!("cannot parse {cell:?} as a number"),
            })?,
            TargetKind::Classification => {
                let next = class_ids.len();
                let id = *class_ids.entry(cell.to_string()).or_insert_with(|| {
                    class_names.push(cell.to_string());
                    next
                });
                id as f64
            }
        });
    }
    if target.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }
    Ok(RawTable {
        feature_names: feature_idx.iter().map(|&i| header[i].clone()).collect(),
        columns,
        target,
        class_names,
        target_kind: schema.target_kind,
    })
}

impl RawTable {
    pub fn rows(&self) -> usize {
        self.target.len()
    }

    /// Class ids as `usize` (classification only).
    pub fn labels(&self) -> Option<Vec<usize>> {
        (self.target_kind == TargetKind::Classification).then(|| self.target.iter().map(|&y| y as usize).collect())
    }

    /// Encodes with statistics from `train_rows` only: categoricals by first
    /// appearance (unseen values share one extra code), missing numerics by
    /// the training mean.
    pub fn encode(&self, train_rows: &[usize]) -> Result<EncodedTable> {
        if train_rows.is_empty() || train_rows.iter().any(|&r| r >= self.rows()) {
            return Err(Error::Input("training rows out of range".into()));
        }
        if self.columns.is_empty() {
            return Err(Error::Schema("no feature columns".into()));
        }
        let (n, d) = (self.rows(), self.columns.len());
        let mut x = vec![0.0; n * d];
        for (j, col) in self.columns.iter().enumerate() {
            let values: Vec<f64> = match col {
                Column::Numeric(v) => {
                    let seen: Vec<f64> = train_rows.iter().filter_map(|&r| v[r]).collect();
                    let mean = if seen.is_empty() { 0.0 } else { seen.iter().sum::<f64>() / seen.len() as f64 };
                    v.iter().map(|c| c.unwrap_or(mean)).collect()
                }
                Column::Categorical(v) => {
                    let mut codes: HashMap<&str, usize> = HashMap::new();
                    for &r in train_rows {
                        if let Some(s) = &v[r] {
                            let next = codes.len();
                            codes.entry(s.as_str()).or_insert(next);
                        }
                    }
                    let unknown = codes.len();
                    v.iter().map(|c| c.as_deref().and_then(|s| codes.get(s).copied()).unwrap_or(unknown) as f64).collect()
                }
            };
            for (r, value) in values.into_iter().enumerate() {
                x[r * d + j] = value;
            }
        }
        Ok(EncodedTable {
            feature_names: self.feature_names.clone(),
            x: Tensor::new(vec![n, d], x)?,
            y: self.target.clone(),
            target_kind: self.target_kind,
            class_names: self.class_names.clone(),
        })
    }
}

impl EncodedTable {
    pub fn n_classes(&self) -> Option<usize> {
        (self.target_kind == TargetKind::Classification).then_some(self.class_names.len())
    }

    /// Rows `idx` as `([len, d], labels)`.
    pub fn select(&self, idx: &[usize]) -> Result<(Tensor<f64>, Vec<f64>)> {
        let d = self.x.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            data.extend_from_slice(self.x.row(r));
        }
        Ok((Tensor::new(vec![idx.len(), d], data)?, idx.iter().map(|&r| self.y[r]).collect()))
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn schema(target: &str, categorical: &[&str]) -> CsvSchema {
        CsvSchema {
            target: target.into(),
            target_kind: TargetKind::Regression,
            categorical: categorical.iter().map(|s| s.to_string()).collect(),
            ignore: vec![],
        }
    }

    #[test]
    fn numeric_round_trip() {
        let f = file("a,b,y\n1.5,-2,0.25\n3,4e-3,1\n0.1,7,2\n");
        let t = load_csv(f.path(), &schema("y", &[])).unwrap().encode(&[0, 1, 2]).unwrap();
        assert_eq!(t.x.data(), &[1.5, -2.0, 3.0, 4e-3, 0.1, 7.0]);
        assert_eq!(t.y, vec![0.25, 1.0, 2.0]);
    }

    #[test]
    fn categorical_first_appearance() {
        let f = file("c,y\na,1\nb,2\na,3\n");
        let t = load_csv(f.path(), &schema("y", &["c"])).unwrap().encode(&[0, 1, 2]).unwrap();
        assert_eq!(t.x.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn missing_numeric_gets_train_mean() {
        let f = file("a,y\n2,0\n,0\n6,0\n100,0\n");
        let t = load_csv(f.path(), &schema("y", &[])).unwrap().encode(&[0, 1, 2]).unwrap();
        assert_eq!(t.x.data(), &[2.0, 4.0, 6.0, 100.0]);
    }

    #[test]
    fn errors_name_row_and_column() {
        let f = file("a,y\n1,0\nzz,1\n");
        match load_csv(f.path(), &schema("y", &[])) {
            Err(Error::Load { row, col, .. }) => assert_eq!((row, col.as_str()), (2, "a")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(load_csv(f.path(), &schema("target", &[])), Err(Error::Schema(_))));
    }
}
