//! Label corruption. Every function here leaves features and ground truth
//! untouched and only rewrites the observed labels.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceRule {
    /// Flip probability `strength * d_own / d_other`, where `d_own` is the
    /// distance to the example's own class centroid and `d_other` the distance
    /// to the nearest other centroid. Flips go to that nearest other class.
    BoundaryProximity,
}

impl FromStr for InstanceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boundary" => Ok(InstanceRule::BoundaryProximity),
            other => Err(Error::Validation(format!(
                "unknown instance noise rule `{other}` (known: boundary)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseKind {
    Symmetric { rate: f64 },
    Asymmetric { transition: Matrix },
    Instance { rule: InstanceRule, strength: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        match &self.kind {
            NoiseKind::Symmetric { rate } => corrupt_symmetric(ds, *rate, self.seed),
            NoiseKind::Asymmetric { transition } => corrupt_asymmetric(ds, transition, self.seed),
            NoiseKind::Instance { rule, strength } => corrupt_instance(ds, *rule, *strength, self.seed),
        }
    }
}

/// With probability `rate`, redraw the observed label uniformly over all `C`
/// classes. The redraw may land on the true class, so the realized noise rate
/// is `rate * (C - 1) / C`.
pub fn corrupt_symmetric(ds: &LabeledDataset, rate: f64, seed: u64) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Validation(format!("noise rate {rate} outside [0, 1]")));
    }
    let c = ds.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observed = ds
        .observed_labels()
        .iter()
        .map(|&y| {
            let u: f64 = rng.random();
            let redraw = rng.random_range(0..c);
            if u < rate {
                redraw
            } else {
                y
            }
        })
        .collect();
    ds.with_observed(observed)
}

/// Checks that `m` is `C x C` with non-negative rows summing to 1.
pub fn validate_transition(m: &Matrix, class_count: usize) -> Result<()> {
    if m.rows() != class_count || m.cols() != class_count {
        return Err(Error::Validation(format!(
            "transition matrix is {}x{}, expected {class_count}x{class_count}",
            m.rows(),
            m.cols()
        )));
    }
    for (i, row) in m.iter_rows().enumerate() {
        if let Some(v) = row.iter().find(|v| **v < 0.0) {
            return Err(Error::Validation(format!("transition row {i} has negative entry {v}")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_TOL {
            return Err(Error::Validation(format!("transition row {i} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

/// Cyclic pair flip: class `i` goes to `i + 1 mod C` with probability `mass`.
pub fn pair_flip_matrix(class_count: usize, mass: f64) -> Matrix {
    let mut m = Matrix::zeros(class_count, class_count);
    for i in 0..class_count {
        m.set(i, i, 1.0 - mass);
        let j = (i + 1) % class_count;
        let v = m.get(i, j) + mass;
        m.set(i, j, v);
    }
    m
}

fn sample_row<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // u landed in the rounding gap at the top; take the last class with mass
    row.iter().rposition(|p| *p > 0.0).unwrap_or(row.len() - 1)
}

/// Observed label drawn from the transition row of the true class.
pub fn corrupt_asymmetric(ds: &LabeledDataset, transition: &Matrix, seed: u64) -> Result<LabeledDataset> {
    validate_transition(transition, ds.class_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observed = ds
        .true_labels()
        .iter()
        .map(|&y| sample_row(transition.row(y), &mut rng))
        .collect();
    ds.with_observed(observed)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Per-class centroids of the features under ground truth. Empty classes get `None`.
pub fn class_centroids(ds: &LabeledDataset) -> Vec<Option<Vec<f64>>> {
    let (c, d) = (ds.class_count(), ds.dim());
    let mut sums = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    for (i, &y) in ds.true_labels().iter().enumerate() {
        counts[y] += 1;
        sums[y].iter_mut().zip(ds.features().row(i)).for_each(|(s, v)| *s += v);
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// For each example, `(d_own / d_other, nearest other class)`. The ratio is
/// near 1 on a class boundary and near 0 at the centroid.
pub fn boundary_scores(ds: &LabeledDataset) -> Vec<(f64, usize)> {
    let centroids = class_centroids(ds);
    ds.true_labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let x = ds.features().row(i);
            let own = centroids[y].as_ref().map_or(0.0, |m| sq_dist(x, m).sqrt());
            let (other, cls) = centroids
                .iter()
                .enumerate()
                .filter(|(k, m)| *k != y && m.is_some())
                .map(|(k, m)| (sq_dist(x, m.as_ref().unwrap()).sqrt(), k))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap_or((f64::INFINITY, (y + 1) % ds.class_count()));
            let ratio = if other > 0.0 { own / other } else { f64::INFINITY };
            (ratio, cls)
        })
        .collect()
}

/// Per-example flip probability under `rule`, clamped to `[0, 1]`.
pub fn flip_probabilities(ds: &LabeledDataset, rule: InstanceRule, strength: f64) -> Vec<f64> {
    match rule {
        InstanceRule::BoundaryProximity => boundary_scores(ds)
            .into_iter()
            .map(|(s, _)| if strength == 0.0 { 0.0 } else { (strength * s).clamp(0.0, 1.0) })
            .collect(),
    }
}

pub fn corrupt_instance(
    ds: &LabeledDataset,
    rule: InstanceRule,
    strength: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::Validation(format!("strength must be non-negative, got {strength}")));
    }
    let probs = flip_probabilities(ds, rule, strength);
    let targets = match rule {
        InstanceRule::BoundaryProximity => boundary_scores(ds),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observed = ds
        .observed_labels()
        .iter()
        .zip(probs.iter().zip(&targets))
        .map(|(&y, (&p, &(_, other)))| {
            let u: f64 = rng.random();
            if u < p {
                other
            } else {
                y
            }
        })
        .collect();
    ds.with_observed(observed)
}

/// Fraction of examples whose observed label differs from the truth.
pub fn effective_noise_rate(ds: &LabeledDataset) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let wrong = ds
        .observed_labels()
        .iter()
        .zip(ds.true_labels())
        .filter(|(o, t)| o != t)
        .count();
    wrong as f64 / ds.len() as f64
}

/// Reads a headerless CSV of `C` rows by `C` columns.
pub fn load_transition_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(path, i + 1, format!("bad matrix entry `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    fn blobs(n: usize) -> LabeledDataset {
        gen_blobs(4, n, 2, 0.6, 11).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let ds = blobs(100);
        assert_eq!(corrupt_symmetric(&ds, 0.0, 1).unwrap(), ds);
        assert_eq!(corrupt_instance(&ds, InstanceRule::BoundaryProximity, 0.0, 1).unwrap(), ds);
        assert_eq!(corrupt_asymmetric(&ds, &Matrix::identity(4), 1).unwrap(), ds);
    }

    #[test]
    fn symmetric_full_rate_two_classes() {
        let ds = gen_blobs(2, 5000, 2, 0.6, 3).unwrap();
        let noisy = corrupt_symmetric(&ds, 1.0, 4).unwrap();
        assert!((effective_noise_rate(&noisy) - 0.5).abs() <= 0.02);
    }

    #[test]
    fn symmetric_rejects_bad_rate() {
        let ds = blobs(10);
        assert!(corrupt_symmetric(&ds, 1.5, 0).is_err());
        assert!(corrupt_symmetric(&ds, -0.1, 0).is_err());
    }

    #[test]
    fn pair_flip_rate() {
        let ds = blobs(2500);
        let noisy = corrupt_asymmetric(&ds, &pair_flip_matrix(4, 0.4), 5).unwrap();
        assert!((effective_noise_rate(&noisy) - 0.4).abs() <= 0.02);
        for (o, t) in noisy.observed_labels().iter().zip(noisy.true_labels()) {
            assert!(o == t || *o == (t + 1) % 4);
        }
    }

    #[test]
    fn permutation_flips_everything() {
        let ds = blobs(200);
        let perm = Matrix::from_rows(&[
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        let noisy = corrupt_asymmetric(&ds, &perm, 0).unwrap();
        assert_eq!(effective_noise_rate(&noisy), 1.0);
    }

    #[test]
    fn non_stochastic_rows_are_named() {
        let mut m = Matrix::identity(4);
        m.set(2, 1, 0.3);
        let err = validate_transition(&m, 4).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        assert!(corrupt_asymmetric(&blobs(10), &m, 0).is_err());
        assert!(validate_transition(&Matrix::identity(3), 4).is_err());
    }

    #[test]
    fn unknown_rule_is_rejected() {
        assert!("boundary".parse::<InstanceRule>().is_ok());
        assert!(matches!("spiral".parse::<InstanceRule>(), Err(Error::Validation(_))));
    }

    #[test]
    fn untouched_side_band() {
        let ds = blobs(300);
        for noisy in [
            corrupt_symmetric(&ds, 0.7, 1).unwrap(),
            corrupt_asymmetric(&ds, &pair_flip_matrix(4, 0.3), 1).unwrap(),
            corrupt_instance(&ds, InstanceRule::BoundaryProximity, 0.5, 1).unwrap(),
        ] {
            assert_eq!(noisy.features(), ds.features());
            assert_eq!(noisy.true_labels(), ds.true_labels());
        }
    }
}
