//! Prediction metrics and the diagnostic classifier.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lstm::{forward, LstmParameters};
use crate::masked_data::MaskedBatch;
use crate::matrix::{Matrix};
use crate::scalar::Scalar;

/// `v ↦ v·scale + offset`, used to map network outputs back to original
/// measurement units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine<S> {
    pub scale: S,
    pub offset: S,
}

impl<S: Scalar> Affine<S> {
    pub fn identity() -> Self {
        Affine {
            scale: S::one(),
            offset: S::zero(),
        }
    }

    #[inline]
    pub fn apply(&self, v: S) -> S {
        v * self.scale + self.offset
    }
}

/// Network outputs for every sequence of the batch, in batch order.
pub fn predict<S: Scalar>(params: &LstmParameters<S>, batch: &MaskedBatch<S>) -> Result<Vec<Matrix<S>>> {
    batch
        .sequences()
        .par_iter()
        .map(|seq| Ok(forward(params, seq.inputs())?.h))
        .collect()
}

/// Mean absolute error per output node over available target cells, after
/// mapping estimates and targets through `inverse`. A node without any
/// available cell yields `None`.
pub fn mae<S: Scalar>(
    estimates: &[Matrix<S>],
    batch: &MaskedBatch<S>,
    inverse: &[Affine<S>],
) -> Result<Vec<Option<S>>> {
    let m = batch.target_width();
    if estimates.len() != batch.len() || inverse.len() != m {
        return Err(Error::Dimension(format!(
            "mae: {} estimates and {} transforms for {} subjects with {m} nodes",
            estimates.len(),
            inverse.len(),
            batch.len()
        )));
    }
    let mut sums = vec![S::zero(); m];
    let mut counts = vec![0usize; m];
    for (est, seq) in estimates.iter().zip(batch.sequences()) {
        if est.shape() != seq.targets().shape() {
            return Err(Error::Dimension(format!(
                "mae: estimate {:?} vs targets {:?} for subject {}",
                est.shape(),
                seq.targets().shape(),
                seq.subject_id()
            )));
        }
        for t in 0..est.rows() {
            for k in 0..m {
                if seq.target_mask().get(t, k) {
                    let y = inverse[k].apply(est[(t, k)]);
                    let s = inverse[k].apply(seq.targets()[(t, k)]);
                    sums[k] += (y - s).abs();
                    counts[k] += 1;
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s / S::from_count(c)))
        .collect())
}

/// Gaussian classes sharing one covariance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LdaModel<S> {
    classes: Vec<usize>,
    means: Vec<Vec<S>>,
    covariance: Matrix<S>,
    ridge: S,
    priors: Vec<S>,
    weights: Vec<Vec<S>>,
    offsets: Vec<S>,
}

impl<S: Scalar> LdaModel<S> {
    /// Class labels in posterior order.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }
    pub fn means(&self) -> &[Vec<S>] {
        &self.means
    }
    /// Pooled within-class covariance with the ridge already added.
    pub fn covariance(&self) -> &Matrix<S> {
        &self.covariance
    }
    pub fn ridge(&self) -> S {
        self.ridge
    }
    pub fn priors(&self) -> &[S] {
        &self.priors
    }
    pub fn features(&self) -> usize {
        self.covariance.rows()
    }

    /// Position of `label` in the posterior vector.
    pub fn class_position(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    /// Class posteriors for one feature vector, normalized with log-sum-exp.
    pub fn posterior(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.features(), "feature vector length");
        let scores: Vec<S> = self
            .weights
            .iter()
            .zip(&self.offsets)
            .map(|(w, &b)| w.iter().zip(x).map(|(&a, &v)| a * v).sum::<S>() + b)
            .collect();
        let top = scores.iter().copied().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = scores.iter().map(|&s| (s - top).exp()).collect();
        let z: S = exps.iter().copied().sum();
        exps.into_iter().map(|e| e / z).collect()
    }
}

/// Fits class means, pooled covariance plus `ridge·I`, and frequency priors.
/// `ridge = None` uses `1e-6 · trace(Σ) / M`.
pub fn fit_lda<S: Scalar>(features: &[Vec<S>], labels: &[usize], ridge: Option<S>) -> Result<LdaModel<S>> {
    if features.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "lda: {} feature rows, {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features.first().map_or(0, Vec::len);
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::Dimension("lda: feature rows must share a nonzero length".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Data(format!("lda needs at least 2 classes, got {}", classes.len())));
    }
    let mut means = vec![vec![S::zero(); dim]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    let pos = |l: usize| classes.binary_search(&l).expect("label in class list");
    for (x, &l) in features.iter().zip(labels) {
        let k = pos(l);
        counts[k] += 1;
        for (m, &v) in means[k].iter_mut().zip(x) {
            *m += v;
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        if c < 2 {
            return Err(Error::Data(format!(
                "lda needs at least 2 samples per class; class {} has {c}",
                classes[k]
            )));
        }
        let cs = S::from_count(c);
        for m in means[k].iter_mut() {
            *m /= cs;
        }
    }

    let mut cov = Matrix::zeros(dim, dim);
    let mut centered = vec![S::zero(); dim];
    for (x, &l) in features.iter().zip(labels) {
        let k = pos(l);
        for ((c, &v), &m) in centered.iter_mut().zip(x).zip(&means[k]) {
            *c = v - m;
        }
        cov.rank1_acc(&centered, &centered);
    }
    let dof = S::from_count(features.len() - classes.len());
    for v in cov.as_mut_slice() {
        *v /= dof;
    }
    let ridge = match ridge {
        Some(r) => r,
        None => {
            let trace: S = (0..dim).map(|i| cov[(i, i)]).sum();
            S::lit(1e-6) * trace / S::from_count(dim)
        }
    };
    for i in 0..dim {
        cov[(i, i)] += ridge;
    }
    let chol = cholesky(&cov).ok_or(Error::SingularCovariance {
        ridge: ridge.to_f64_lossy(),
    })?;

    let total = S::from_count(features.len());
    let priors: Vec<S> = counts.iter().map(|&c| S::from_count(c) / total).collect();
    let half = S::lit(0.5);
    let mut weights = Vec::with_capacity(classes.len());
    let mut offsets = Vec::with_capacity(classes.len());
    for (mean, &prior) in means.iter().zip(&priors) {
        let w = cholesky_solve(&chol, mean);
        let quad: S = w.iter().zip(mean).map(|(&a, &b)| a * b).sum();
        offsets.push(-half * quad + prior.ln());
        weights.push(w);
    }
    Ok(LdaModel {
        classes,
        means,
        covariance: cov,
        ridge,
        priors,
        weights,
        offsets,
    })
}

/// Lower-triangular `L` with `L Lᵀ = a`, or `None` if `a` is not positive
/// definite.
fn cholesky<S: Scalar>(a: &Matrix<S>) -> Option<Matrix<S>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(sum > S::zero()) || !sum.is_finite() {
                    return None;
                }
                l[(i, i)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

fn cholesky_solve<S: Scalar>(l: &Matrix<S>, b: &[S]) -> Vec<S> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let v = l[(i, k)] * y[k];
            y[i] -= v;
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let v = l[(k, i)] * y[k];
            y[i] -= v;
        }
        y[i] /= l[(i, i)];
    }
    y
}

/// One classified visit: true class position and posteriors in the same
/// class order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredVisit<S> {
    pub label: usize,
    pub posteriors: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairAuc {
    pub first: usize,
    pub second: usize,
    /// `(Â(i|k) + Â(k|i)) / 2`
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    pub multiclass: f64,
    pub pairs: Vec<PairAuc>,
}

/// Hand & Till multi-class AUC from class posteriors, with midranks for
/// ties. Every class position `0..C` (with `C` the posterior length) needs
/// at least one visit.
pub fn multiclass_auc<S: Scalar>(scored: &[ScoredVisit<S>]) -> Result<AucReport> {
    let n_classes = scored.first().map_or(0, |s| s.posteriors.len());
    if n_classes < 2 {
        return Err(Error::Data("auc needs posteriors over at least 2 classes".into()));
    }
    let mut by_class: Vec<Vec<&ScoredVisit<S>>> = vec![Vec::new(); n_classes];
    for s in scored {
        if s.posteriors.len() != n_classes || s.label >= n_classes {
            return Err(Error::Dimension(format!(
                "scored visit with label {} and {} posteriors; expected {n_classes} classes",
                s.label,
                s.posteriors.len()
            )));
        }
        by_class[s.label].push(s);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {empty} has no scored visits")));
    }

    let mut pairs = Vec::new();
    let mut total = 0.0;
    for i in 0..n_classes {
        for k in i + 1..n_classes {
            let (ni, nk) = (by_class[i].len() as f64, by_class[k].len() as f64);
            let sr_i = rank_sum(&by_class[i], &by_class[k], i);
            let sr_k = rank_sum(&by_class[k], &by_class[i], k);
            let term = (sr_i - ni * (ni + 1.0) / 2.0 + sr_k - nk * (nk + 1.0) / 2.0) / (ni * nk);
            total += term;
            pairs.push(PairAuc {
                first: i,
                second: k,
                auc: term / 2.0,
            });
        }
    }
    let c = n_classes as f64;
    Ok(AucReport {
        multiclass: total / (c * (c - 1.0)),
        pairs,
    })
}

/// Sum of ascending midranks of `own`'s scores for class `column` within
/// the concatenation of `own` and `other`.
fn rank_sum<S: Scalar>(own: &[&ScoredVisit<S>], other: &[&ScoredVisit<S>], column: usize) -> f64 {
    let mut all: Vec<(f64, bool)> = own
        .iter()
        .map(|s| (s.posteriors[column].to_f64_lossy(), true))
        .chain(other.iter().map(|s| (s.posteriors[column].to_f64_lossy(), false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut sum = 0.0;
    let mut start = 0;
    while start < all.len() {
        let mut end = start + 1;
        while end < all.len() && all[end].0 == all[start].0 {
            end += 1;
        }
        // ranks start+1 ..= end share their mean
        let mid = (start + 1 + end) as f64 / 2.0;
        sum += mid * all[start..end].iter().filter(|e| e.1).count() as f64;
        start = end;
    }
    sum
}

/// Delimited metrics table: `metric,target,value`, MAE rows first, then one
/// AUC row per class pair and the multi-class row. Undefined values are
/// written as `NA`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub split: String,
    pub mae: Vec<(String, Option<f64>)>,
    pub auc_pairs: Vec<(String, f64)>,
    pub auc_multiclass: Option<(String, f64)>,
}

impl MetricsReport {
    pub fn write(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "# split={}", self.split)?;
        writeln!(out, "metric,target,value")?;
        for (name, v) in &self.mae {
            match v {
                Some(v) => writeln!(out, "mae,{name},{v:e}")?,
                None => writeln!(out, "mae,{name},NA")?,
            }
        }
        for (name, v) in self.auc_pairs.iter().chain(self.auc_multiclass.iter()) {
            writeln!(out, "auc,{name},{v}")?;
        }
        Ok(())
    }

    /// Average of the defined per-node MAE values.
    pub fn mean_mae(&self) -> Option<f64> {
        let vals: Vec<f64> = self.mae.iter().filter_map(|(_, v)| *v).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}
