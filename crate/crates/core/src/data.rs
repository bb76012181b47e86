//! Datasets, synthetic blobs and the CSV format.
//!
//! CSV layout: a header `f0,...,f{D-1},observed,true`, then one example per
//! row with features as decimal floats and labels as base-10 integers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Distance of every class mean from the origin in [`gen_blobs`].
pub const BLOB_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Features and observed labels only. This is the type the training path sees.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl NoisyDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l >= class_count) {
            return Err(Error::Validation(format!(
                "example {i} has label {l}, class count is {class_count}"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// A dataset with ground truth kept alongside the observed labels. Ground
/// truth is for corruption and evaluation; hand [`LabeledDataset::noisy`] to
/// training code.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    noisy: NoisyDataset,
    true_labels: Vec<usize>,
    split: Split,
}

impl LabeledDataset {
    pub fn new(
        features: Matrix,
        true_labels: Vec<usize>,
        observed_labels: Vec<usize>,
        class_count: usize,
        split: Split,
    ) -> Result<Self> {
        let noisy = NoisyDataset::new(features, observed_labels, class_count)?;
        if true_labels.len() != noisy.len() {
            return Err(Error::Shape(format!(
                "{} true labels for {} examples",
                true_labels.len(),
                noisy.len()
            )));
        }
        if let Some((i, l)) = true_labels.iter().enumerate().find(|(_, l)| **l >= class_count) {
            return Err(Error::Validation(format!(
                "example {i} has true label {l}, class count is {class_count}"
            )));
        }
        Ok(Self {
            noisy,
            true_labels,
            split,
        })
    }

    pub fn noisy(&self) -> &NoisyDataset {
        &self.noisy
    }

    pub fn features(&self) -> &Matrix {
        &self.noisy.features
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.noisy.labels
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn class_count(&self) -> usize {
        self.noisy.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.noisy.dim()
    }

    /// Same features and ground truth, new observed labels.
    pub fn with_observed(&self, observed: Vec<usize>) -> Result<Self> {
        Self::new(
            self.noisy.features.clone(),
            self.true_labels.clone(),
            observed,
            self.class_count(),
            self.split,
        )
    }

    /// Observed labels reset to ground truth.
    pub fn clean(&self) -> Self {
        self.with_observed(self.true_labels.clone()).expect("labels already validated")
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Class means for [`gen_blobs`]: evenly spaced on a circle of radius
/// [`BLOB_RADIUS`] in the first two coordinates, zero elsewhere.
pub fn blob_means(class_count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..class_count)
        .map(|k| {
            let angle = std::f64::consts::TAU * k as f64 / class_count as f64;
            let mut m = vec![0.0; dim];
            m[0] = BLOB_RADIUS * angle.cos();
            m[1] = BLOB_RADIUS * angle.sin();
            m
        })
        .collect()
}

/// Isotropic Gaussian clusters around [`blob_means`], `per_class` examples per
/// class, emitted class by class. Observed labels start equal to the truth.
pub fn gen_blobs(
    class_count: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count < 2 {
        return Err(Error::Validation(format!("need at least 2 classes, got {class_count}")));
    }
    if dim < 2 {
        return Err(Error::Validation(format!("need at least 2 dimensions, got {dim}")));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Validation(format!("spread must be non-negative, got {spread}")));
    }
    let means = blob_means(class_count, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = class_count * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + spread * z);
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(
        Matrix::from_vec(n, dim, data)?,
        labels.clone(),
        labels,
        class_count,
        Split::Train,
    )
}

/// Options for reading the CSV format. The file does not record `C`; without
/// `class_count` it is inferred as one more than the largest label.
#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    pub class_count: Option<usize>,
    pub split: Split,
}

pub fn to_csv_string(ds: &LabeledDataset) -> String {
    let mut out = String::new();
    for j in 0..ds.dim() {
        let _ = write!(out, "f{j},");
    }
    out.push_str("observed,true\n");
    for i in 0..ds.len() {
        for v in ds.features().row(i) {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{},{}", ds.observed_labels()[i], ds.true_labels()[i]);
    }
    out
}

pub fn save_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv_string(ds)).map_err(|e| Error::io(path, e))
}

struct RawCsv {
    dim: usize,
    features: Vec<f64>,
    observed: Vec<usize>,
    truth: Option<Vec<usize>>,
    /// 1-based file line of each row.
    lines: Vec<usize>,
}

fn parse_raw(text: &str, path: &Path, need_truth: bool) -> Result<RawCsv> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    let has_truth = cols.last() == Some(&"true");
    let label_cols = if has_truth { 2 } else { 1 };
    if need_truth && !has_truth {
        return Err(Error::parse(path, 1, "header has no `true` column"));
    }
    if cols.len() < label_cols || cols[cols.len() - label_cols] != "observed" {
        return Err(Error::parse(path, 1, "header must end with `observed,true`"));
    }
    let dim = cols.len() - label_cols;
    for (j, c) in cols[..dim].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::parse(path, 1, format!("expected column `f{j}`, found `{c}`")));
        }
    }

    let mut raw = RawCsv {
        dim,
        features: Vec::new(),
        observed: Vec::new(),
        truth: has_truth.then(Vec::new),
        lines: Vec::new(),
    };
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::parse(
                path,
                lineno,
                format!("{} fields, header has {}", fields.len(), cols.len()),
            ));
        }
        for f in &fields[..dim] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad feature `{f}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, lineno, format!("non-finite feature `{f}`")));
            }
            raw.features.push(v);
        }
        let label = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad label `{s}`")))
        };
        raw.observed.push(label(fields[dim])?);
        raw.lines.push(lineno);
        if let Some(t) = raw.truth.as_mut() {
            t.push(label(fields[dim + 1])?);
        }
    }
    Ok(raw)
}

fn resolve_classes(raw: &RawCsv, class_count: Option<usize>, path: &Path) -> Result<usize> {
    let Some(c) = class_count else {
        let all = raw.observed.iter().chain(raw.truth.iter().flatten());
        return Ok(all.max().map_or(0, |m| m + 1));
    };
    for (row, &line) in raw.lines.iter().enumerate() {
        let obs = raw.observed[row];
        if obs >= c {
            return Err(Error::parse(path, line, format!("observed label {obs} is not below class count {c}")));
        }
        if let Some(t) = raw.truth.as_ref().map(|t| t[row]) {
            if t >= c {
                return Err(Error::parse(path, line, format!("true label {t} is not below class count {c}")));
            }
        }
    }
    Ok(c)
}

pub fn parse_csv(text: &str, path: impl AsRef<Path>, opts: CsvOptions) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let raw = parse_raw(text, path, true)?;
    let classes = resolve_classes(&raw, opts.class_count, path)?;
    let n = raw.observed.len();
    LabeledDataset::new(
        Matrix::from_vec(n, raw.dim, raw.features)?,
        raw.truth.unwrap(),
        raw.observed,
        classes,
        opts.split,
    )
}

pub fn load_csv(path: impl AsRef<Path>, opts: CsvOptions) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path, opts)
}

/// Loader for training code: the `true` column, if present, is dropped.
pub fn load_noisy_csv(path: impl AsRef<Path>, class_count: Option<usize>) -> Result<NoisyDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw = parse_raw(&text, path, false)?;
    raw.truth = None;
    let classes = resolve_classes(&raw, class_count, path)?;
    let n = raw.observed.len();
    NoisyDataset::new(Matrix::from_vec(n, raw.dim, raw.features)?, raw.observed, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_collapses_to_means() {
        let ds = gen_blobs(3, 10, 2, 0.0, 1).unwrap();
        let means = blob_means(3, 2);
        for i in 0..ds.len() {
            assert_eq!(ds.features().row(i), means[ds.true_labels()[i]].as_slice());
        }
        // nearest-mean classification is perfect
        for i in 0..ds.len() {
            let x = ds.features().row(i);
            let best = (0..3)
                .min_by(|a, b| {
                    let d = |k: usize| -> f64 { x.iter().zip(&means[k]).map(|(p, q)| (p - q).powi(2)).sum() };
                    d(*a).total_cmp(&d(*b))
                })
                .unwrap();
            assert_eq!(best, ds.true_labels()[i]);
        }
    }

    #[test]
    fn gen_validates() {
        assert!(gen_blobs(1, 10, 2, 0.5, 0).is_err());
        assert!(gen_blobs(3, 10, 1, 0.5, 0).is_err());
        assert!(gen_blobs(3, 10, 2, -1.0, 0).is_err());
    }

    #[test]
    fn gen_is_deterministic() {
        assert_eq!(gen_blobs(4, 50, 3, 0.6, 9).unwrap(), gen_blobs(4, 50, 3, 0.6, 9).unwrap());
        assert_ne!(gen_blobs(4, 50, 3, 0.6, 9).unwrap(), gen_blobs(4, 50, 3, 0.6, 10).unwrap());
    }

    #[test]
    fn round_trip() {
        let ds = gen_blobs(4, 20, 3, 0.6, 2).unwrap();
        let back = parse_csv(&to_csv_string(&ds), "mem", CsvOptions { class_count: Some(4), split: Split::Train }).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn label_out_of_range_names_line() {
        let text = "f0,f1,observed,true\n0.1,0.2,0,0\n\n0.3,0.4,1,5\n";
        let err = parse_csv(text, "x.csv", CsvOptions { class_count: Some(3), split: Split::Train }).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 4, "{message}");
                assert!(message.contains('5'));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn malformed_rows_name_line() {
        let text = "f0,observed,true\n0.1,0,0\nabc,1,1\n";
        match parse_csv(text, "x.csv", CsvOptions::default()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
        let text = "f0,observed,true\n0.1,0\n";
        assert!(matches!(parse_csv(text, "x", CsvOptions::default()), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_csv("g0,observed,true\n", "x", CsvOptions::default()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn header_only_is_empty() {
        let ds = parse_csv("f0,f1,observed,true\n", "x", CsvOptions::default()).unwrap();
        assert_eq!(ds.len(), 0);
        assert_eq!(ds.dim(), 2);
    }

    #[test]
    fn noisy_loader_drops_truth() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let ds = gen_blobs(3, 5, 2, 0.5, 0).unwrap();
        save_csv(&ds, &p).unwrap();
        let noisy = load_noisy_csv(&p, Some(3)).unwrap();
        assert_eq!(&noisy, ds.noisy());
    }
}
