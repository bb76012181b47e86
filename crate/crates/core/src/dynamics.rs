//! Training-dynamics diagnostics.
//!
//! Group decomposition of training examples by how the predicted, observed and
//! true labels agree:
//!
//! | group    | rule                                             |
//! |----------|--------------------------------------------------|
//! | I        | pred = true, observed = true                     |
//! | II       | pred = true, observed != true (label corrected)  |
//! | III      | pred = observed != true (noise memorized)        |
//! | IV       | pred, observed, true all different               |
//! | residual | observed = true, pred != true                    |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, NoisyDataset};
use crate::error::{Error, Result};
use crate::loss_model::ConfidenceVector;
use crate::matrix::Matrix;
use crate::simplex::argmax;
use crate::trainer::{run, CotrainState, Snapshot, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupCounts {
    pub i: usize,
    pub ii: usize,
    pub iii: usize,
    pub iv: usize,
    pub residual: usize,
}

impl GroupCounts {
    pub fn total(&self) -> usize {
        self.i + self.ii + self.iii + self.iv + self.residual
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupProportions {
    #[serde(rename = "I")]
    pub i: f64,
    #[serde(rename = "II")]
    pub ii: f64,
    #[serde(rename = "III")]
    pub iii: f64,
    #[serde(rename = "IV")]
    pub iv: f64,
    pub residual: f64,
}

impl GroupProportions {
    /// Left-to-right sum of the five buckets.
    pub fn sum(&self) -> f64 {
        self.i + self.ii + self.iii + self.iv + self.residual
    }

    /// `II / (II + IV)`: how often a changed prediction on a noisy example is
    /// the right one. Zero when both are empty.
    pub fn correction_precision(&self) -> f64 {
        let d = self.ii + self.iv;
        if d > 0.0 {
            self.ii / d
        } else {
            0.0
        }
    }

    fn from_counts(c: &GroupCounts) -> Self {
        let n = c.total();
        if n == 0 {
            return Self::default();
        }
        let n = n as f64;
        let mut p = Self {
            i: c.i as f64 / n,
            ii: c.ii as f64 / n,
            iii: c.iii as f64 / n,
            iv: c.iv as f64 / n,
            residual: 0.0,
        };
        // residual closes the partition so the float sum is exactly 1
        let head = p.i + p.ii + p.iii + p.iv;
        p.residual = 1.0 - head;
        if p.residual < 0.0 || p.sum() != 1.0 {
            p.residual = c.residual as f64 / n;
        }
        p
    }
}

pub fn group_counts(pred: &[usize], observed: &[usize], truth: &[usize]) -> Result<GroupCounts> {
    if pred.len() != observed.len() || pred.len() != truth.len() {
        return Err(Error::Validation(format!(
            "label vectors of length {}, {} and {}",
            pred.len(),
            observed.len(),
            truth.len()
        )));
    }
    let mut c = GroupCounts::default();
    for ((&p, &o), &t) in pred.iter().zip(observed).zip(truth) {
        match (p == t, o == t, p == o) {
            (true, true, _) => c.i += 1,
            (true, false, _) => c.ii += 1,
            (false, false, true) => c.iii += 1,
            (false, false, false) => c.iv += 1,
            (false, true, _) => c.residual += 1,
        }
    }
    Ok(c)
}

pub fn group_decompose(pred: &[usize], observed: &[usize], truth: &[usize]) -> Result<GroupProportions> {
    Ok(GroupProportions::from_counts(&group_counts(pred, observed, truth)?))
}

/// Fraction of examples with `w < 0.5`; ties count as clean.
pub fn estimated_noise_fraction(w: &[f64]) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    w.iter().filter(|v| **v < 0.5).count() as f64 / w.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub index: usize,
    pub raw_loss: f64,
    pub w: f64,
    pub observed: usize,
    pub predicted: usize,
    pub pred_confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("index,raw_loss,w,observed,predicted,pred_confidence\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.index, e.raw_loss, e.w, e.observed, e.predicted, e.pred_confidence
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// The `k` largest losses, ties broken by ascending index. `probs` supplies
/// the predicted label and its probability.
pub fn audit_top_losses(
    losses: &[f64],
    w: &[f64],
    probs: &Matrix,
    observed: &[usize],
    k: usize,
) -> Result<AuditReport> {
    if k == 0 {
        return Err(Error::Validation("audit size must be at least 1".into()));
    }
    let n = losses.len();
    if w.len() != n || observed.len() != n || probs.rows() != n {
        return Err(Error::Shape("audit inputs differ in length".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    let entries = order
        .into_iter()
        .take(k)
        .map(|i| {
            let row = probs.row(i);
            let predicted = argmax(row);
            AuditEntry {
                index: i,
                raw_loss: losses[i],
                w: w[i],
                observed: observed[i],
                predicted,
                pred_confidence: row[predicted],
            }
        })
        .collect();
    Ok(AuditReport { entries })
}

/// One line of the records stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub round: usize,
    pub groups: GroupProportions,
    pub test_acc_model0: f64,
    pub test_acc_ensemble: f64,
    pub est_noise_fraction: f64,
    pub mean_w_clean: f64,
    pub mean_w_noisy: f64,
    pub degenerate_gmm: bool,
}

pub fn records_to_jsonl(records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_records(records: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(records_to_jsonl(records).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn parse_records(text: &str, path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, path)
}

/// Flat CSV of records for external plotting.
pub fn records_to_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(
        "round,I,II,III,IV,residual,test_acc_model0,test_acc_ensemble,est_noise_fraction,mean_w_clean,mean_w_noisy,degenerate_gmm\n",
    );
    for r in records {
        let g = &r.groups;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.round,
            g.i,
            g.ii,
            g.iii,
            g.iv,
            g.residual,
            r.test_acc_model0,
            r.test_acc_ensemble,
            r.est_noise_fraction,
            r.mean_w_clean,
            r.mean_w_noisy,
            r.degenerate_gmm
        ));
    }
    out
}

pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    probs.iter_rows().map(argmax).collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

fn mean_where(w: &[f64], mask: impl Fn(usize) -> bool) -> f64 {
    let (s, n) = w
        .iter()
        .enumerate()
        .filter(|(i, _)| mask(*i))
        .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Builds an [`EpochRecord`] from a trainer snapshot. Holds the ground truth
/// the trainer never sees.
pub struct RecordBuilder<'a> {
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub records: Vec<EpochRecord>,
}

impl<'a> RecordBuilder<'a> {
    pub fn new(train: &'a LabeledDataset, test: &'a LabeledDataset) -> Self {
        Self {
            train,
            test,
            records: Vec::new(),
        }
    }

    pub fn record(&self, round: usize, state: &CotrainState, confidence: &ConfidenceVector, degenerate: bool) -> Result<EpochRecord> {
        let train_pred = argmax_rows(&state.ensemble_probs(self.train.features())?);
        let groups = group_decompose(&train_pred, self.train.observed_labels(), self.train.true_labels())?;
        let acc0 = accuracy(&argmax_rows(&state.model_probs(0, self.test.features())?), self.test.true_labels());
        let acc_ens = accuracy(&argmax_rows(&state.ensemble_probs(self.test.features())?), self.test.true_labels());
        let obs = self.train.observed_labels();
        let truth = self.train.true_labels();
        Ok(EpochRecord {
            round,
            groups,
            test_acc_model0: acc0,
            test_acc_ensemble: acc_ens,
            est_noise_fraction: estimated_noise_fraction(&confidence.w),
            mean_w_clean: mean_where(&confidence.w, |i| obs[i] == truth[i]),
            mean_w_noisy: mean_where(&confidence.w, |i| obs[i] != truth[i]),
            degenerate_gmm: degenerate,
        })
    }
}

/// Trains on `train.noisy()` and records one [`EpochRecord`] per phase.
pub fn run_with_records(
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(CotrainState, Vec<EpochRecord>)> {
    let mut builder = RecordBuilder::new(train, test);
    let view: &NoisyDataset = train.noisy();
    let state = {
        let mut observe = |s: &Snapshot<'_>| -> Result<()> {
            let rec = builder.record(s.round, s.state, &s.estimate.confidence, s.degenerate_gmm)?;
            builder.records.push(rec);
            Ok(())
        };
        run(view, config, &mut observe)?
    };
    Ok((state, builder.records))
}
