//! Masked multivariate sequences and the per-subject normalization factors.
//!
//! Every cell whose mask bit is false holds exactly zero in the value matrix.
//! The forward pass never looks at masks; they are consulted only when the
//! loss is masked and when gradients are normalized.

use crate::error::{Error, Result};
use crate::matrix::{Mask, Matrix};
use crate::scalar::Scalar;

/// One subject's sequence: `T` input steps of width `N`, and the `T`
/// one-step-ahead targets of width `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence<S> {
    subject_id: String,
    inputs: Matrix<S>,
    input_mask: Mask,
    targets: Matrix<S>,
    target_mask: Mask,
    labels: Vec<Option<usize>>,
}

impl<S: Scalar> MaskedSequence<S> {
    /// Validates shapes and zero-substitutes every masked cell. Values behind
    /// a false mask bit are discarded, whatever they are.
    pub fn new(
        subject_id: impl Into<String>,
        mut inputs: Matrix<S>,
        input_mask: Mask,
        mut targets: Matrix<S>,
        target_mask: Mask,
        labels: Vec<Option<usize>>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        let t = inputs.rows();
        if inputs.shape() != input_mask.shape() {
            return Err(Error::Dimension(format!(
                "subject {subject_id}: inputs {:?} vs input mask {:?}",
                inputs.shape(),
                input_mask.shape()
            )));
        }
        if targets.shape() != target_mask.shape() {
            return Err(Error::Dimension(format!(
                "subject {subject_id}: targets {:?} vs target mask {:?}",
                targets.shape(),
                target_mask.shape()
            )));
        }
        if targets.rows() != t || labels.len() != t {
            return Err(Error::Dimension(format!(
                "subject {subject_id}: inputs have {t} steps, targets {}, labels {}",
                targets.rows(),
                labels.len()
            )));
        }
        if t == 0 || inputs.cols() == 0 || targets.cols() == 0 {
            return Err(Error::Dimension(format!(
                "subject {subject_id}: empty sequence"
            )));
        }
        zero_masked(&mut inputs, &input_mask);
        zero_masked(&mut targets, &target_mask);
        if input_mask.count() == 0 {
            return Err(Error::Data(format!(
                "subject {subject_id} has no available input values"
            )));
        }
        if !inputs.is_finite() || !targets.is_finite() {
            return Err(Error::Data(format!(
                "subject {subject_id} has a non-finite available value"
            )));
        }
        Ok(MaskedSequence {
            subject_id,
            inputs,
            input_mask,
            targets,
            target_mask,
            labels,
        })
    }

    /// A sequence with every cell available and no labels.
    pub fn dense(subject_id: impl Into<String>, inputs: Matrix<S>, targets: Matrix<S>) -> Result<Self> {
        let (t, n) = inputs.shape();
        let m = targets.cols();
        Self::new(
            subject_id,
            inputs,
            Mask::full(t, n, true),
            targets,
            Mask::full(t, m, true),
            vec![None; t],
        )
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }
    pub fn inputs(&self) -> &Matrix<S> {
        &self.inputs
    }
    pub fn input_mask(&self) -> &Mask {
        &self.input_mask
    }
    pub fn targets(&self) -> &Matrix<S> {
        &self.targets
    }
    pub fn target_mask(&self) -> &Mask {
        &self.target_mask
    }
    /// Class label of the visit each target row describes.
    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }
    pub fn steps(&self) -> usize {
        self.inputs.rows()
    }
    pub fn input_width(&self) -> usize {
        self.inputs.cols()
    }
    pub fn target_width(&self) -> usize {
        self.targets.cols()
    }

    /// `|x_j|`: available input cells in the window.
    pub fn available_inputs(&self) -> usize {
        self.input_mask.count()
    }
}

fn zero_masked<S: Scalar>(values: &mut Matrix<S>, mask: &Mask) {
    for (v, keep) in values.as_mut_slice().iter_mut().zip(mask.iter()) {
        if !keep {
            *v = S::zero();
        }
    }
}

/// `J` dimension-compatible sequences processed together as one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch<S> {
    sequences: Vec<MaskedSequence<S>>,
    steps: usize,
    input_width: usize,
    target_width: usize,
}

impl<S: Scalar> MaskedBatch<S> {
    pub fn new(sequences: Vec<MaskedSequence<S>>) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::Data("a batch needs at least one sequence".into()))?;
        let (steps, input_width, target_width) =
            (first.steps(), first.input_width(), first.target_width());
        for s in &sequences {
            if (s.steps(), s.input_width(), s.target_width()) != (steps, input_width, target_width) {
                return Err(Error::Dimension(format!(
                    "subject {} has shape T={} N={} M={}, batch expects T={steps} N={input_width} M={target_width}",
                    s.subject_id(),
                    s.steps(),
                    s.input_width(),
                    s.target_width()
                )));
            }
        }
        Ok(MaskedBatch {
            sequences,
            steps,
            input_width,
            target_width,
        })
    }

    pub fn sequences(&self) -> &[MaskedSequence<S>] {
        &self.sequences
    }
    pub fn into_sequences(self) -> Vec<MaskedSequence<S>> {
        self.sequences
    }
    /// `J`
    pub fn len(&self) -> usize {
        self.sequences.len()
    }
    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
    /// `T`
    pub fn steps(&self) -> usize {
        self.steps
    }
    /// `N`
    pub fn input_width(&self) -> usize {
        self.input_width
    }
    /// `M`
    pub fn target_width(&self) -> usize {
        self.target_width
    }

    pub fn validate(&self) -> BatchReport {
        validate_batch(
            self.input_width,
            self.sequences
                .iter()
                .map(|s| (s.subject_id(), s.input_mask())),
        )
    }
}

/// Subject-specific normalization factors, indexed `[j]`, `[j][m]` and `[j][n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationFactors<S> {
    /// `β_x^j = J·|x_j| / (T·N)`
    pub beta_x: Vec<S>,
    /// `β_m^j(m) = |y_j(m)|`
    pub beta_m: Vec<Vec<usize>>,
    /// `β_n^j(n) = |x_j(n)| / T`
    pub beta_n: Vec<Vec<S>>,
}

impl<S: Scalar> NormalizationFactors<S> {
    /// Factors that leave the loss and gradients unnormalized.
    pub fn unit(subjects: usize, inputs: usize, outputs: usize) -> Self {
        NormalizationFactors {
            beta_x: vec![S::one(); subjects],
            beta_m: vec![vec![1; outputs]; subjects],
            beta_n: vec![vec![S::one(); inputs]; subjects],
        }
    }
}

pub fn compute_factors<S: Scalar>(batch: &MaskedBatch<S>) -> NormalizationFactors<S> {
    let j = S::from_count(batch.len());
    let t = batch.steps();
    let n = batch.input_width();
    let tn = S::from_count(t * n);
    let t_s = S::from_count(t);
    let mut factors = NormalizationFactors {
        beta_x: Vec::with_capacity(batch.len()),
        beta_m: Vec::with_capacity(batch.len()),
        beta_n: Vec::with_capacity(batch.len()),
    };
    for seq in batch.sequences() {
        let avail = S::from_count(seq.available_inputs());
        factors.beta_x.push(j * avail / tn);
        factors.beta_m.push(
            (0..batch.target_width())
                .map(|m| seq.target_mask().count_col(m))
                .collect(),
        );
        factors.beta_n.push(
            (0..n)
                .map(|c| S::from_count(seq.input_mask().count_col(c)) / t_s)
                .collect(),
        );
    }
    factors
}

/// Findings from [`validate_batch`]. Nothing is mutated; callers decide
/// whether a finding is fatal.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchReport {
    /// Input nodes with no available value in any subject; their weight
    /// columns can never receive a gradient.
    pub dead_input_nodes: Vec<usize>,
    /// Subjects without a single available input value.
    pub empty_subjects: Vec<String>,
}

impl BatchReport {
    pub fn is_clean(&self) -> bool {
        self.dead_input_nodes.is_empty() && self.empty_subjects.is_empty()
    }
}

/// Checks raw `(subject, input mask)` pairs, including ones that could not be
/// turned into a [`MaskedSequence`].
pub fn validate_batch<'a>(
    input_width: usize,
    subjects: impl IntoIterator<Item = (&'a str, &'a Mask)>,
) -> BatchReport {
    let mut seen = vec![false; input_width];
    let mut report = BatchReport::default();
    for (id, mask) in subjects {
        if mask.count() == 0 {
            report.empty_subjects.push(id.to_string());
        }
        for (c, s) in seen.iter_mut().enumerate().take(mask.cols()) {
            *s |= mask.count_col(c) > 0;
        }
    }
    report.dead_input_nodes = seen
        .iter()
        .enumerate()
        .filter_map(|(c, &s)| (!s).then_some(c))
        .collect();
    report
}
