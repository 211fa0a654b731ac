//! Mean and last-observation-carried-forward baselines. Both return batches
//! whose imputed parts are fully available, so the normalization factors
//! collapse to the complete-data constants.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::masked_data::{MaskedBatch, MaskedSequence};
use crate::matrix::{Mask, Matrix};
use crate::scalar::Scalar;

/// How missing cells are handled before training and prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MissingStrategy {
    /// Zero-substitution with the normalized training rule.
    #[default]
    Masked,
    Mean,
    Forward,
}

impl MissingStrategy {
    pub const ALL: [MissingStrategy; 3] = [Self::Masked, Self::Mean, Self::Forward];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Masked => "masked",
            Self::Mean => "mean",
            Self::Forward => "forward",
        }
    }
}

impl fmt::Display for MissingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MissingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "masked" => Ok(Self::Masked),
            "mean" => Ok(Self::Mean),
            "forward" => Ok(Self::Forward),
            other => Err(Error::Config(format!(
                "unknown missing strategy `{other}` (expected masked, mean or forward)"
            ))),
        }
    }
}

/// Which cells an imputation fills.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ImputeScope {
    #[default]
    InputsAndTargets,
    /// Targets keep their masks; used for held-out evaluation and for the
    /// masked-target training variant.
    InputsOnly,
}

/// Per-node means over available cells of the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeMeans<S> {
    pub inputs: Vec<S>,
    pub targets: Vec<S>,
}

impl<S: Scalar> NodeMeans<S> {
    /// Fails when some node has no available training cell.
    pub fn from_batch(batch: &MaskedBatch<S>) -> Result<Self> {
        let inputs = column_means(batch, |s| (s.inputs(), s.input_mask()), batch.input_width(), "input")?;
        let targets = column_means(batch, |s| (s.targets(), s.target_mask()), batch.target_width(), "target")?;
        Ok(NodeMeans { inputs, targets })
    }
}

fn column_means<S: Scalar>(
    batch: &MaskedBatch<S>,
    pick: impl Fn(&MaskedSequence<S>) -> (&Matrix<S>, &Mask),
    width: usize,
    what: &str,
) -> Result<Vec<S>> {
    let mut sums = vec![S::zero(); width];
    let mut counts = vec![0usize; width];
    for seq in batch.sequences() {
        let (values, mask) = pick(seq);
        for t in 0..values.rows() {
            for c in 0..width {
                if mask.get(t, c) {
                    sums[c] += values[(t, c)];
                    counts[c] += 1;
                }
            }
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(c, (s, n))| {
            if n == 0 {
                Err(Error::Data(format!(
                    "{what} node {c} has no available training value; its mean is undefined"
                )))
            } else {
                Ok(s / S::from_count(n))
            }
        })
        .collect()
}

fn check_means<S: Scalar>(batch: &MaskedBatch<S>, means: &NodeMeans<S>) -> Result<()> {
    if means.inputs.len() != batch.input_width() || means.targets.len() != batch.target_width() {
        return Err(Error::Dimension(format!(
            "node means cover {}/{} nodes, batch has N={} M={}",
            means.inputs.len(),
            means.targets.len(),
            batch.input_width(),
            batch.target_width()
        )));
    }
    Ok(())
}

fn fill_mean<S: Scalar>(values: &Matrix<S>, mask: &Mask, means: &[S]) -> (Matrix<S>, Mask) {
    let filled = Matrix::from_fn(values.rows(), values.cols(), |t, c| {
        if mask.get(t, c) {
            values[(t, c)]
        } else {
            means[c]
        }
    });
    (filled, Mask::full(values.rows(), values.cols(), true))
}

fn fill_forward<S: Scalar>(values: &Matrix<S>, mask: &Mask, means: &[S]) -> (Matrix<S>, Mask) {
    let mut filled = values.clone();
    for c in 0..values.cols() {
        let mut last = means[c];
        for t in 0..values.rows() {
            if mask.get(t, c) {
                last = values[(t, c)];
            } else {
                filled[(t, c)] = last;
            }
        }
    }
    (filled, Mask::full(values.rows(), values.cols(), true))
}

type Fill<S> = fn(&Matrix<S>, &Mask, &[S]) -> (Matrix<S>, Mask);

fn impute_with<S: Scalar>(
    batch: &MaskedBatch<S>,
    means: &NodeMeans<S>,
    scope: ImputeScope,
    fill: Fill<S>,
) -> Result<MaskedBatch<S>> {
    check_means(batch, means)?;
    let sequences = batch
        .sequences()
        .iter()
        .map(|seq| {
            let (inputs, input_mask) = fill(seq.inputs(), seq.input_mask(), &means.inputs);
            let (targets, target_mask) = match scope {
                ImputeScope::InputsAndTargets => fill(seq.targets(), seq.target_mask(), &means.targets),
                ImputeScope::InputsOnly => (seq.targets().clone(), seq.target_mask().clone()),
            };
            MaskedSequence::new(
                seq.subject_id(),
                inputs,
                input_mask,
                targets,
                target_mask,
                seq.labels().to_vec(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    MaskedBatch::new(sequences)
}

/// Replaces every masked cell by its node's training mean.
pub fn mean_impute<S: Scalar>(
    batch: &MaskedBatch<S>,
    means: &NodeMeans<S>,
    scope: ImputeScope,
) -> Result<MaskedBatch<S>> {
    impute_with(batch, means, scope, fill_mean)
}

/// Carries the last available value of each node forward within a subject;
/// leading gaps take the node's training mean.
pub fn forward_impute<S: Scalar>(
    batch: &MaskedBatch<S>,
    means: &NodeMeans<S>,
    scope: ImputeScope,
) -> Result<MaskedBatch<S>> {
    impute_with(batch, means, scope, fill_forward)
}

/// Prepares a batch for `strategy`. `Masked` returns the batch unchanged.
pub fn apply_strategy<S: Scalar>(
    batch: &MaskedBatch<S>,
    strategy: MissingStrategy,
    means: &NodeMeans<S>,
    scope: ImputeScope,
) -> Result<MaskedBatch<S>> {
    match strategy {
        MissingStrategy::Masked => Ok(batch.clone()),
        MissingStrategy::Mean => mean_impute(batch, means, scope),
        MissingStrategy::Forward => forward_impute(batch, means, scope),
    }
}
