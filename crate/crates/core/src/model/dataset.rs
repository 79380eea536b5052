use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Task;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Split> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Regression(Vector),
    Classification { labels: Vec<usize>, num_classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(v) => v.len(),
            Targets::Classification { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Regression(v) => Targets::Regression(rows.iter().map(|&r| v[r]).collect()),
            Targets::Classification { labels, num_classes } => Targets::Classification {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                num_classes: *num_classes,
            },
        }
    }
}

/// Per-column affine standardisation applied at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Present for regression targets only.
    pub target_mean: Option<f64>,
    pub target_std: Option<f64>,
}

/// How to read a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSchema {
    pub target: String,
    pub task: Task,
    /// Optional column holding `train` / `val` / `test`.
    pub split_column: Option<String>,
    /// Explicit feature columns; default is every other column.
    pub features: Option<Vec<String>>,
    /// Standardise features (and regression targets) with train-split statistics.
    pub standardize: bool,
}

impl DatasetSchema {
    pub fn new(target: impl Into<String>, task: Task) -> Self {
        DatasetSchema {
            target: target.into(),
            task,
            split_column: Some("split".to_string()),
            features: None,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub targets: Targets,
    pub splits: Option<Vec<Split>>,
    pub feature_names: Vec<String>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Targets) -> Result<Self> {
        if features.rows() != targets.len() {
            return Err(Error::structural(format!(
                "{} feature rows but {} targets",
                features.rows(),
                targets.len()
            )));
        }
        if let Targets::Classification { labels, num_classes } = &targets {
            if let Some(bad) = labels.iter().find(|&&l| l >= *num_classes) {
                return Err(Error::structural(format!("class index {bad} >= {num_classes}")));
            }
        }
        let d = features.cols();
        Ok(Dataset {
            features,
            targets,
            splits: None,
            feature_names: (0..d).map(|i| format!("x{i}")).collect(),
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn x(&self, n: usize) -> &[f64] {
        self.features.row(n)
    }

    pub fn task(&self) -> Task {
        match self.targets {
            Targets::Regression(_) => Task::Regression,
            Targets::Classification { .. } => Task::Classification,
        }
    }

    /// Rows tagged `split`; when the data carry no tags every row counts as
    /// training data and the other splits are empty.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        match &self.splits {
            Some(tags) => (0..self.len()).filter(|&i| tags[i] == split).collect(),
            None if split == Split::Train => (0..self.len()).collect(),
            None => Vec::new(),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.x(r));
        }
        Dataset {
            features: Matrix::from_vec_unchecked(rows.len(), d, data),
            targets: self.targets.select(rows),
            splits: self.splits.as_ref().map(|s| rows.iter().map(|&r| s[r]).collect()),
            feature_names: self.feature_names.clone(),
            standardization: self.standardization.clone(),
        }
    }

    pub fn split(&self, split: Split) -> Dataset {
        self.subset(&self.split_indices(split))
    }
}

/// Load a comma-separated file with a header row.
pub fn load_dataset_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset_csv(&text, schema)
}

pub(crate) fn parse_dataset_csv(text: &str, schema: &DatasetSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::ParseLine { line: 1, message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let target_col = col(&schema.target)
        .ok_or_else(|| Error::Schema(format!("target column '{}' not found", schema.target)))?;
    let split_col = schema.split_column.as_deref().and_then(col);
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names
            .iter()
            .map(|n| col(n).ok_or_else(|| Error::Schema(format!("feature column '{n}' not found"))))
            .collect::<Result<_>>()?,
        None => (0..header.len())
            .filter(|&c| c != target_col && Some(c) != split_col)
            .collect(),
    };
    if feature_cols.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }

    let mut features = Vec::new();
    let mut reg_targets = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::ParseLine {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::ParseLine {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let number = |c: usize| -> Result<f64> {
            let cell = &record[c];
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::ParseLine {
                    line,
                    message: format!("column '{}': '{}' is not a finite number", header[c], cell),
                })
        };
        for &c in &feature_cols {
            features.push(number(c)?);
        }
        match schema.task {
            Task::Regression => reg_targets.push(number(target_col)?),
            Task::Classification => {
                let cell = &record[target_col];
                let label = cell.parse::<usize>().map_err(|_| Error::ParseLine {
                    line,
                    message: format!("class label '{cell}' is not a non-negative integer"),
                })?;
                labels.push(label);
            }
        }
        if let Some(sc) = split_col {
            let tag = Split::parse(&record[sc]).ok_or_else(|| Error::ParseLine {
                line,
                message: format!("unknown split tag '{}'", &record[sc]),
            })?;
            splits.push(tag);
        }
    }

    let n = features.len() / feature_cols.len();
    let d = feature_cols.len();
    let targets = match schema.task {
        Task::Regression => Targets::Regression(Vector::new(reg_targets)),
        Task::Classification => {
            let num_classes = labels.iter().max().map_or(0, |m| m + 1);
            Targets::Classification { labels, num_classes }
        }
    };
    let mut data = Dataset::new(Matrix::new(n, d, features)?, targets)?;
    data.feature_names = feature_cols.iter().map(|&c| header[c].clone()).collect();
    if split_col.is_some() {
        data.splits = Some(splits);
    }
    if schema.standardize {
        standardize(&mut data);
    }
    Ok(data)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

fn standardize(data: &mut Dataset) {
    let train = data.split_indices(Split::Train);
    let rows = if train.is_empty() { (0..data.len()).collect() } else { train };
    let d = data.dim();
    let mut fm = Vec::with_capacity(d);
    let mut fs = Vec::with_capacity(d);
    for c in 0..d {
        let (m, s) = mean_std(rows.iter().map(|&r| data.features[(r, c)]));
        fm.push(m);
        fs.push(s);
    }
    for r in 0..data.len() {
        for c in 0..d {
            data.features[(r, c)] = (data.features[(r, c)] - fm[c]) / fs[c];
        }
    }
    let (mut tm, mut ts) = (None, None);
    if let Targets::Regression(y) = &mut data.targets {
        let (m, s) = mean_std(rows.iter().map(|&r| y[r]));
        for v in y.iter_mut() {
            *v = (*v - m) / s;
        }
        tm = Some(m);
        ts = Some(s);
    }
    data.standardization = Some(Standardization {
        feature_mean: fm,
        feature_std: fs,
        target_mean: tm,
        target_std: ts,
    });
}
