//! Data model and file ingestion.
//!
//! A [`DataBundle`] holds four splits (labelled, unlabelled, validation, test),
//! each an [`InstanceSet`] of dense features plus the binary LF firing matrix.
//! Two on-disk layouts are supported: one canonical JSON file, and a directory
//! of CSV files with a `meta.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json parse error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv parse error in {path} at row {row}: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("{split}: {what} has {found}, expected {expected}")]
    DimensionMismatch {
        split: &'static str,
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("{split}: label out of range at row {row}: {value} (num_classes = {num_classes})")]
    LabelOutOfRange {
        split: &'static str,
        row: usize,
        value: i64,
        num_classes: usize,
    },
    #[error("{split}: lf value out of range at ({row},{col}): {value}")]
    LfValueOutOfRange {
        split: &'static str,
        row: usize,
        col: usize,
        value: i64,
    },
    #[error("{split}: labels are required but missing")]
    MissingLabels { split: &'static str },
    #[error("{split}: split must be non-empty")]
    EmptySplit { split: &'static str },
    #[error("invalid bundle metadata: {0}")]
    Meta(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Json,
    CsvDir,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "json" => Ok(Format::Json),
            "csv-dir" | "csv" => Ok(Format::CsvDir),
            other => Err(format!("unknown format '{other}', expected json or csv-dir")),
        }
    }
}

/// Instances of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSet {
    /// n × d feature matrix.
    pub features: Array2<f64>,
    /// n × m LF firing matrix, entries 0 or 1.
    pub lf_outputs: Array2<u8>,
    pub labels: Option<Vec<usize>>,
}

impl InstanceSet {
    pub fn new(
        features: Array2<f64>,
        lf_outputs: Array2<u8>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let set = InstanceSet {
            features,
            lf_outputs,
            labels,
        };
        set.check_shape("instances")?;
        Ok(set)
    }

    pub fn empty(dim: usize, num_lfs: usize, labelled: bool) -> Self {
        InstanceSet {
            features: Array2::zeros((0, dim)),
            lf_outputs: Array2::zeros((0, num_lfs)),
            labels: labelled.then(Vec::new),
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_lfs(&self) -> usize {
        self.lf_outputs.ncols()
    }

    pub fn x(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn l(&self, i: usize) -> ArrayView1<'_, u8> {
        self.lf_outputs.row(i)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Rows `idx` of this set, in the given order.
    pub fn select(&self, idx: &[usize]) -> InstanceSet {
        InstanceSet {
            features: self.features.select(Axis(0), idx),
            lf_outputs: self.lf_outputs.select(Axis(0), idx),
            labels: self
                .labels
                .as_ref()
                .map(|ys| idx.iter().map(|&i| ys[i]).collect()),
        }
    }

    /// Concatenation of two sets; labels survive only if both carry them.
    pub fn concat(&self, other: &InstanceSet) -> InstanceSet {
        let features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .expect("feature widths agree");
        let lf_outputs =
            ndarray::concatenate(Axis(0), &[self.lf_outputs.view(), other.lf_outputs.view()])
                .expect("lf widths agree");
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        InstanceSet {
            features,
            lf_outputs,
            labels,
        }
    }

    fn check_shape(&self, split: &'static str) -> Result<()> {
        let n = self.features.nrows();
        if self.lf_outputs.nrows() != n {
            return Err(DataError::DimensionMismatch {
                split,
                what: "lf_outputs rows".into(),
                expected: n,
                found: self.lf_outputs.nrows(),
            });
        }
        if let Some(ys) = &self.labels {
            if ys.len() != n {
                return Err(DataError::DimensionMismatch {
                    split,
                    what: "labels".into(),
                    expected: n,
                    found: ys.len(),
                });
            }
        }
        for ((i, j), &v) in self.lf_outputs.indexed_iter() {
            if v > 1 {
                return Err(DataError::LfValueOutOfRange {
                    split,
                    row: i,
                    col: j,
                    value: v as i64,
                });
            }
        }
        Ok(())
    }
}

/// Features, LF outputs, labels and split membership.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub num_classes: usize,
    pub num_lfs: usize,
    /// Class each LF votes for when it fires.
    pub lf_classes: Vec<usize>,
    pub quality_guides: Option<Vec<f64>>,
    pub labelled: InstanceSet,
    pub unlabelled: InstanceSet,
    pub validation: InstanceSet,
    pub test: InstanceSet,
}

impl DataBundle {
    pub fn dim(&self) -> usize {
        self.labelled.dim()
    }

    pub fn splits(&self) -> [(&'static str, &InstanceSet); 4] {
        [
            ("labelled", &self.labelled),
            ("unlabelled", &self.unlabelled),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }

    /// Checks every structural invariant of the bundle.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(DataError::Meta(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_lfs < 1 {
            return Err(DataError::Meta("num_lfs must be >= 1".into()));
        }
        if self.lf_classes.len() != self.num_lfs {
            return Err(DataError::DimensionMismatch {
                split: "meta",
                what: "lf_classes".into(),
                expected: self.num_lfs,
                found: self.lf_classes.len(),
            });
        }
        if let Some(j) = self.lf_classes.iter().position(|&k| k >= self.num_classes) {
            return Err(DataError::Meta(format!(
                "lf_classes[{j}] = {} is not a valid class",
                self.lf_classes[j]
            )));
        }
        if let Some(q) = &self.quality_guides {
            if q.len() != self.num_lfs {
                return Err(DataError::DimensionMismatch {
                    split: "meta",
                    what: "quality_guides".into(),
                    expected: self.num_lfs,
                    found: q.len(),
                });
            }
            if let Some(j) = q.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(DataError::Meta(format!(
                    "quality_guides[{j}] = {} outside [0,1]",
                    q[j]
                )));
            }
        }
        let dim = self.dim();
        for (name, set) in self.splits() {
            set.check_shape(name)?;
            if set.dim() != dim {
                return Err(DataError::DimensionMismatch {
                    split: name,
                    what: "feature columns".into(),
                    expected: dim,
                    found: set.dim(),
                });
            }
            if set.num_lfs() != self.num_lfs {
                return Err(DataError::DimensionMismatch {
                    split: name,
                    what: "lf columns".into(),
                    expected: self.num_lfs,
                    found: set.num_lfs(),
                });
            }
            if let Some(ys) = &set.labels {
                if let Some(row) = ys.iter().position(|&y| y >= self.num_classes) {
                    return Err(DataError::LabelOutOfRange {
                        split: name,
                        row,
                        value: ys[row] as i64,
                        num_classes: self.num_classes,
                    });
                }
            }
        }
        for (name, set) in [
            ("labelled", &self.labelled),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            if set.labels.is_none() {
                return Err(DataError::MissingLabels { split: name });
            }
        }
        Ok(())
    }

    /// Training needs labelled and validation instances.
    pub fn require_trainable(&self) -> Result<()> {
        if self.labelled.is_empty() {
            return Err(DataError::EmptySplit { split: "labelled" });
        }
        if self.validation.is_empty() {
            return Err(DataError::EmptySplit { split: "validation" });
        }
        Ok(())
    }

    /// Moves the unlabelled rows `idx` into the labelled split, attaching `labels`.
    pub fn promote(&self, idx: &[usize], labels: &[usize]) -> Result<DataBundle> {
        if idx.len() != labels.len() {
            return Err(DataError::DimensionMismatch {
                split: "unlabelled",
                what: "promoted labels".into(),
                expected: idx.len(),
                found: labels.len(),
            });
        }
        let mut picked = self.unlabelled.select(idx);
        picked.labels = Some(labels.to_vec());
        let keep: Vec<usize> = (0..self.unlabelled.len())
            .filter(|i| !idx.contains(i))
            .collect();
        let mut out = self.clone();
        out.labelled = self.labelled.concat(&picked);
        out.unlabelled = self.unlabelled.select(&keep);
        out.unlabelled.labels = None;
        out.validate()?;
        Ok(out)
    }

    /// Precision of each LF on the validation split: among instances where LF j
    /// fires, the fraction whose label is `lf_classes[j]`. An LF that never fires
    /// there gets `1/K`.
    pub fn validation_lf_precision(&self) -> Result<Vec<f64>> {
        let labels = self
            .validation
            .labels()
            .ok_or(DataError::MissingLabels { split: "validation" })?;
        let mut fired = vec![0usize; self.num_lfs];
        let mut correct = vec![0usize; self.num_lfs];
        for (i, &y) in labels.iter().enumerate() {
            for (j, &v) in self.validation.l(i).iter().enumerate() {
                if v == 1 {
                    fired[j] += 1;
                    correct[j] += usize::from(self.lf_classes[j] == y);
                }
            }
        }
        Ok(fired
            .iter()
            .zip(&correct)
            .map(|(&f, &c)| {
                if f == 0 {
                    1.0 / self.num_classes as f64
                } else {
                    c as f64 / f as f64
                }
            })
            .collect())
    }

    /// Returns a copy whose quality guides are the validation precisions when
    /// the bundle has none.
    pub fn with_default_quality_guides(&self) -> Result<DataBundle> {
        let mut out = self.clone();
        if out.quality_guides.is_none() {
            out.quality_guides = Some(self.validation_lf_precision()?);
        }
        Ok(out)
    }
}

/// Standardises each feature column to mean 0 and population variance 1,
/// using statistics from the labelled and unlabelled splits only.
/// Columns with zero variance pass through unchanged.
pub fn standardize_features(bundle: &DataBundle) -> DataBundle {
    let pool = ndarray::concatenate(
        Axis(0),
        &[bundle.labelled.features.view(), bundle.unlabelled.features.view()],
    )
    .expect("splits share feature width");
    let dim = bundle.dim();
    let n = pool.nrows() as f64;
    let mut mean = Array1::<f64>::zeros(dim);
    let mut scale = Array1::<f64>::ones(dim);
    if pool.nrows() > 0 {
        for c in 0..dim {
            let col = pool.column(c);
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            if var > 0.0 {
                mean[c] = mu;
                scale[c] = var.sqrt();
            }
        }
    }
    let apply = |set: &InstanceSet| -> InstanceSet {
        let mut out = set.clone();
        for mut row in out.features.rows_mut() {
            for c in 0..dim {
                row[c] = (row[c] - mean[c]) / scale[c];
            }
        }
        out
    };
    DataBundle {
        labelled: apply(&bundle.labelled),
        unlabelled: apply(&bundle.unlabelled),
        validation: apply(&bundle.validation),
        test: apply(&bundle.test),
        ..bundle.clone()
    }
}

// ---------------------------------------------------------------------------
// JSON layout

#[derive(Debug, Serialize, Deserialize)]
struct SetJson {
    features: Vec<Vec<f64>>,
    lf_outputs: Vec<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<i64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleJson {
    num_classes: usize,
    num_lfs: usize,
    lf_classes: Vec<usize>,
    quality_guides: Option<Vec<f64>>,
    labelled: SetJson,
    unlabelled: SetJson,
    validation: SetJson,
    test: SetJson,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaJson {
    num_classes: usize,
    num_lfs: usize,
    lf_classes: Vec<usize>,
    quality_guides: Option<Vec<f64>>,
    /// Needed to shape empty splits in the CSV layout.
    #[serde(default)]
    num_features: Option<usize>,
}

const SPLITS: [&str; 4] = ["labelled", "unlabelled", "validation", "test"];

fn split_name(name: &str) -> &'static str {
    SPLITS
        .iter()
        .find(|s| **s == name)
        .copied()
        .unwrap_or("instances")
}

fn build_features(split: &'static str, rows: &[Vec<f64>], dim: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(DataError::DimensionMismatch {
                split,
                what: format!("features row {i}"),
                expected: dim,
                found: r.len(),
            });
        }
        for (c, &v) in r.iter().enumerate() {
            out[[i, c]] = v;
        }
    }
    Ok(out)
}

fn build_lf(split: &'static str, rows: &[Vec<i64>], m: usize) -> Result<Array2<u8>> {
    let mut out = Array2::zeros((rows.len(), m));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != m {
            return Err(DataError::DimensionMismatch {
                split,
                what: format!("lf_outputs row {i}"),
                expected: m,
                found: r.len(),
            });
        }
        for (j, &v) in r.iter().enumerate() {
            if v != 0 && v != 1 {
                return Err(DataError::LfValueOutOfRange {
                    split,
                    row: i,
                    col: j,
                    value: v,
                });
            }
            out[[i, j]] = v as u8;
        }
    }
    Ok(out)
}

fn build_labels(split: &'static str, ys: &[i64], k: usize) -> Result<Vec<usize>> {
    ys.iter()
        .enumerate()
        .map(|(row, &y)| {
            if y < 0 || y as usize >= k {
                Err(DataError::LabelOutOfRange {
                    split,
                    row,
                    value: y,
                    num_classes: k,
                })
            } else {
                Ok(y as usize)
            }
        })
        .collect()
}

fn set_from_json(
    split: &'static str,
    raw: &SetJson,
    dim: usize,
    m: usize,
    k: usize,
) -> Result<InstanceSet> {
    let features = build_features(split, &raw.features, dim)?;
    let lf_outputs = build_lf(split, &raw.lf_outputs, m)?;
    let labels = raw
        .labels
        .as_ref()
        .map(|ys| build_labels(split, ys, k))
        .transpose()?;
    let set = InstanceSet {
        features,
        lf_outputs,
        labels,
    };
    set.check_shape(split)?;
    Ok(set)
}

fn set_to_json(set: &InstanceSet, with_labels: bool) -> SetJson {
    SetJson {
        features: set.features.rows().into_iter().map(|r| r.to_vec()).collect(),
        lf_outputs: set
            .lf_outputs
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v as i64).collect())
            .collect(),
        labels: if with_labels {
            set.labels
                .as_ref()
                .map(|ys| ys.iter().map(|&y| y as i64).collect())
        } else {
            None
        },
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_string(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn bundle_from_json_str(text: &str, path: &Path) -> Result<DataBundle> {
    let raw: BundleJson = serde_json::from_str(text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let dim = [&raw.labelled, &raw.unlabelled, &raw.validation, &raw.test]
        .iter()
        .find_map(|s| s.features.first().map(Vec::len))
        .unwrap_or(0);
    let (m, k) = (raw.num_lfs, raw.num_classes);
    let bundle = DataBundle {
        num_classes: k,
        num_lfs: m,
        lf_classes: raw.lf_classes.clone(),
        quality_guides: raw.quality_guides.clone(),
        labelled: set_from_json("labelled", &raw.labelled, dim, m, k)?,
        unlabelled: set_from_json("unlabelled", &raw.unlabelled, dim, m, k)?,
        validation: set_from_json("validation", &raw.validation, dim, m, k)?,
        test: set_from_json("test", &raw.test, dim, m, k)?,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn bundle_to_json_string(bundle: &DataBundle) -> String {
    let raw = BundleJson {
        num_classes: bundle.num_classes,
        num_lfs: bundle.num_lfs,
        lf_classes: bundle.lf_classes.clone(),
        quality_guides: bundle.quality_guides.clone(),
        labelled: set_to_json(&bundle.labelled, true),
        unlabelled: set_to_json(&bundle.unlabelled, false),
        validation: set_to_json(&bundle.validation, true),
        test: set_to_json(&bundle.test, true),
    };
    serde_json::to_string(&raw).expect("bundle serialises")
}

// ---------------------------------------------------------------------------
// CSV-dir layout

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Csv {
            path: path.to_path_buf(),
            row: i,
            message: e.to_string(),
        })?;
        let fields: Vec<String> = rec.iter().map(|f| f.trim().to_string()).collect();
        if fields.len() == 1 && fields[0].is_empty() {
            continue;
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn parse_cells<T: std::str::FromStr>(path: &Path, rows: Vec<Vec<String>>) -> Result<Vec<Vec<T>>> {
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.into_iter()
                .enumerate()
                .map(|(c, cell)| {
                    cell.parse::<T>().map_err(|_| DataError::Csv {
                        path: path.to_path_buf(),
                        row: i,
                        message: format!("column {c}: cannot parse '{cell}'"),
                    })
                })
                .collect()
        })
        .collect()
}

fn load_csv_dir(dir: &Path) -> Result<DataBundle> {
    let meta_path = dir.join("meta.json");
    let meta: MetaJson =
        serde_json::from_str(&read_to_string(&meta_path)?).map_err(|source| DataError::Json {
            path: meta_path.clone(),
            source,
        })?;
    let mut raw_sets = Vec::new();
    for split in SPLITS {
        let fpath = dir.join(format!("features_{split}.csv"));
        let lpath = dir.join(format!("lf_{split}.csv"));
        let ypath = dir.join(format!("labels_{split}.csv"));
        let features: Vec<Vec<f64>> = parse_cells(&fpath, read_csv_rows(&fpath)?)?;
        let lf_outputs: Vec<Vec<i64>> = parse_cells(&lpath, read_csv_rows(&lpath)?)?;
        let labels = if ypath.exists() {
            let rows: Vec<Vec<i64>> = parse_cells(&ypath, read_csv_rows(&ypath)?)?;
            Some(rows.into_iter().flatten().collect::<Vec<i64>>())
        } else {
            None
        };
        raw_sets.push(SetJson {
            features,
            lf_outputs,
            labels,
        });
    }
    let dim = meta
        .num_features
        .or_else(|| raw_sets.iter().find_map(|s| s.features.first().map(Vec::len)))
        .unwrap_or(0);
    let (m, k) = (meta.num_lfs, meta.num_classes);
    let mut sets = raw_sets
        .iter()
        .zip(SPLITS)
        .map(|(raw, name)| set_from_json(split_name(name), raw, dim, m, k));
    let bundle = DataBundle {
        num_classes: k,
        num_lfs: m,
        lf_classes: meta.lf_classes,
        quality_guides: meta.quality_guides,
        labelled: sets.next().unwrap()?,
        unlabelled: sets.next().unwrap()?,
        validation: sets.next().unwrap()?,
        test: sets.next().unwrap()?,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn save_csv_dir(bundle: &DataBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let meta = MetaJson {
        num_classes: bundle.num_classes,
        num_lfs: bundle.num_lfs,
        lf_classes: bundle.lf_classes.clone(),
        quality_guides: bundle.quality_guides.clone(),
        num_features: Some(bundle.dim()),
    };
    write_string(
        &dir.join("meta.json"),
        &serde_json::to_string_pretty(&meta).expect("meta serialises"),
    )?;
    for (split, set) in bundle.splits() {
        let join_rows = |rows: Vec<String>| rows.into_iter().map(|r| r + "\n").collect::<String>();
        let feats = join_rows(
            set.features
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","))
                .collect(),
        );
        let lfs = join_rows(
            set.lf_outputs
                .rows()
                .into_iter()
                .map(|r| r.iter().map(u8::to_string).collect::<Vec<_>>().join(","))
                .collect(),
        );
        write_string(&dir.join(format!("features_{split}.csv")), &feats)?;
        write_string(&dir.join(format!("lf_{split}.csv")), &lfs)?;
        let ypath = dir.join(format!("labels_{split}.csv"));
        match (&set.labels, split) {
            (Some(ys), s) if s != "unlabelled" => {
                write_string(&ypath, &join_rows(ys.iter().map(usize::to_string).collect()))?
            }
            _ => {
                if ypath.exists() {
                    fs::remove_file(&ypath).map_err(|source| DataError::Io {
                        path: ypath.clone(),
                        source,
                    })?;
                }
            }
        }
    }
    Ok(())
}

pub fn load_bundle(path: &Path, format: Format) -> Result<DataBundle> {
    match format {
        Format::Json => bundle_from_json_str(&read_to_string(path)?, path),
        Format::CsvDir => load_csv_dir(path),
    }
}

pub fn save_bundle(bundle: &DataBundle, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Json => write_string(path, &bundle_to_json_string(bundle)),
        Format::CsvDir => save_csv_dir(bundle, path),
    }
}
