//! Backpropagation through time with missing-data normalization.
//!
//! Per output node `m`, the loss is
//!
//! ```text
//! L(m) = ½ Σ_j Σ_t [s_j^t(m) available] (y_j^t(m) − s_j^t(m))² / (β_x^j · β_m^j(m))
//! ```
//!
//! and the input-weight gradient of subject `j` is divided column-wise by
//! `β_n^j(n)`. Every other gradient is the exact derivative of the loss.

use std::ops::{Deref, DerefMut};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lstm::{forward, sigmoid_prime, tanh_prime, ForwardCache, LstmParameters, ARRAY_NAMES};
use crate::masked_data::{compute_factors, MaskedBatch, MaskedSequence, NormalizationFactors};
use crate::matrix::{Mask, Matrix};
use crate::scalar::Scalar;

/// Gradients of the normalized loss, shaped exactly like [`LstmParameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<S>(pub LstmParameters<S>);

impl<S: Scalar> GradientSet<S> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        GradientSet(LstmParameters::zeros(inputs, outputs))
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &GradientSet<S>) {
        for (dst, src) in self.0.arrays_mut().into_iter().zip(other.0.arrays()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for a in self.0.arrays_mut() {
            for v in a.iter_mut() {
                *v *= factor;
            }
        }
    }
}

impl<S> Deref for GradientSet<S> {
    type Target = LstmParameters<S>;
    fn deref(&self) -> &LstmParameters<S> {
        &self.0
    }
}

impl<S> DerefMut for GradientSet<S> {
    fn deref_mut(&mut self) -> &mut LstmParameters<S> {
        &mut self.0
    }
}

/// Per-node loss of one subject and the output adjoint `δy`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectLoss<S> {
    pub per_node: Vec<S>,
    pub dy: Matrix<S>,
}

impl<S: Scalar> SubjectLoss<S> {
    pub fn total(&self) -> S {
        self.per_node.iter().copied().sum()
    }
}

/// Masked, normalized L2 loss for subject `subject` of the batch the factors
/// were computed from. Masked target cells and nodes with `β_m = 0`
/// contribute nothing, and their adjoint is exactly zero.
pub fn masked_loss<S: Scalar>(
    outputs: &Matrix<S>,
    targets: &Matrix<S>,
    target_mask: &Mask,
    factors: &NormalizationFactors<S>,
    subject: usize,
) -> Result<SubjectLoss<S>> {
    if outputs.shape() != targets.shape() || targets.shape() != target_mask.shape() {
        return Err(Error::Dimension(format!(
            "loss: outputs {:?}, targets {:?}, mask {:?}",
            outputs.shape(),
            targets.shape(),
            target_mask.shape()
        )));
    }
    let (steps, m) = outputs.shape();
    let beta_x = factors.beta_x[subject];
    let beta_m = &factors.beta_m[subject];
    let half = S::lit(0.5);
    let mut per_node = vec![S::zero(); m];
    let mut dy = Matrix::zeros(steps, m);
    for (k, node_loss) in per_node.iter_mut().enumerate() {
        if beta_m[k] == 0 {
            continue;
        }
        let denom = beta_x * S::from_count(beta_m[k]);
        for t in 0..steps {
            if !target_mask.get(t, k) {
                continue;
            }
            let r = outputs[(t, k)] - targets[(t, k)];
            *node_loss += half * r * r / denom;
            dy[(t, k)] = r / denom;
        }
    }
    Ok(SubjectLoss { per_node, dy })
}

/// Adjoints of one sequence, every matrix `T × M` except `dx` (`T × N`).
/// `d_*` without suffix are pre-activation adjoints; `*_act` the
/// post-activation ones.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardState<S> {
    pub dy: Matrix<S>,
    pub dh: Matrix<S>,
    pub d_o_act: Matrix<S>,
    pub d_o: Matrix<S>,
    pub d_c_act: Matrix<S>,
    pub d_c: Matrix<S>,
    pub d_z_act: Matrix<S>,
    pub d_z: Matrix<S>,
    pub d_i_act: Matrix<S>,
    pub d_i: Matrix<S>,
    pub d_f_act: Matrix<S>,
    pub d_f: Matrix<S>,
    pub dx: Matrix<S>,
}

/// Runs the adjoint recurrence from `t = T−1` down to `0`. Adjoints at
/// `t = T` are zero.
pub fn backward<S: Scalar>(
    params: &LstmParameters<S>,
    cache: &ForwardCache<S>,
    dy: &Matrix<S>,
) -> Result<BackwardState<S>> {
    let steps = cache.steps();
    let m = params.output_width();
    let n = params.input_width();
    if dy.shape() != (steps, m) || cache.h.cols() != m {
        return Err(Error::Dimension(format!(
            "backward: δy is {:?}, cache is {}x{}, layer has M={m}",
            dy.shape(),
            steps,
            cache.h.cols()
        )));
    }
    let zm = || Matrix::zeros(steps, m);
    let mut st = BackwardState {
        dy: dy.clone(),
        dh: zm(),
        d_o_act: zm(),
        d_o: zm(),
        d_c_act: zm(),
        d_c: zm(),
        d_z_act: zm(),
        d_z: zm(),
        d_i_act: zm(),
        d_i: zm(),
        d_f_act: zm(),
        d_f: zm(),
        dx: Matrix::zeros(steps, n),
    };
    let zero_m = vec![S::zero(); m];

    for t in (0..steps).rev() {
        let last = t + 1 == steps;
        let (df_next, di_next, dz_next, do_next, dc_next, f_act_next) = if last {
            (&zero_m[..], &zero_m[..], &zero_m[..], &zero_m[..], &zero_m[..], &zero_m[..])
        } else {
            (
                st.d_f.row(t + 1),
                st.d_i.row(t + 1),
                st.d_z.row(t + 1),
                st.d_o.row(t + 1),
                st.d_c.row(t + 1),
                cache.f_act.row(t + 1),
            )
        };

        let mut dh = dy.row(t).to_vec();
        params.u_f.gemv_t_acc(df_next, &mut dh);
        params.u_i.gemv_t_acc(di_next, &mut dh);
        params.u_c.gemv_t_acc(dz_next, &mut dh);
        params.u_o.gemv_t_acc(do_next, &mut dh);

        let c_prev = cache.c_prev(t);
        let mut d_o = vec![S::zero(); m];
        let mut d_c = vec![S::zero(); m];
        let mut d_rows = [(); 8].map(|_| vec![S::zero(); m]);
        for k in 0..m {
            let d_o_act = dh[k] * cache.c_act[(t, k)];
            d_o[k] = d_o_act * sigmoid_prime(cache.o[(t, k)]);
            let d_c_act = dh[k] * cache.o_act[(t, k)];
            d_c[k] = d_c_act * tanh_prime(cache.c[(t, k)])
                + dc_next[k] * f_act_next[k]
                + params.v_f[k] * df_next[k]
                + params.v_i[k] * di_next[k]
                + params.v_o[k] * d_o[k];
            let d_z_act = d_c[k] * cache.i_act[(t, k)];
            let d_i_act = d_c[k] * cache.z_act[(t, k)];
            let d_f_act = d_c[k] * c_prev[k];
            d_rows[0][k] = d_o_act;
            d_rows[1][k] = d_c_act;
            d_rows[2][k] = d_z_act;
            d_rows[3][k] = d_z_act * tanh_prime(cache.z[(t, k)]);
            d_rows[4][k] = d_i_act;
            d_rows[5][k] = d_i_act * sigmoid_prime(cache.i[(t, k)]);
            d_rows[6][k] = d_f_act;
            d_rows[7][k] = d_f_act * sigmoid_prime(cache.f[(t, k)]);
        }
        st.dh.row_mut(t).copy_from_slice(&dh);
        st.d_o.row_mut(t).copy_from_slice(&d_o);
        st.d_c.row_mut(t).copy_from_slice(&d_c);
        st.d_o_act.row_mut(t).copy_from_slice(&d_rows[0]);
        st.d_c_act.row_mut(t).copy_from_slice(&d_rows[1]);
        st.d_z_act.row_mut(t).copy_from_slice(&d_rows[2]);
        st.d_z.row_mut(t).copy_from_slice(&d_rows[3]);
        st.d_i_act.row_mut(t).copy_from_slice(&d_rows[4]);
        st.d_i.row_mut(t).copy_from_slice(&d_rows[5]);
        st.d_f_act.row_mut(t).copy_from_slice(&d_rows[6]);
        st.d_f.row_mut(t).copy_from_slice(&d_rows[7]);

        let dx = st.dx.row_mut(t);
        params.w_f.gemv_t_acc(&d_rows[7], dx);
        params.w_i.gemv_t_acc(&d_rows[5], dx);
        params.w_c.gemv_t_acc(&d_rows[3], dx);
        params.w_o.gemv_t_acc(&d_o, dx);
    }
    Ok(st)
}

/// Gradient contribution of a single subject. Input-weight columns are
/// divided by `β_n^j(n)`; columns with `β_n = 0` stay zero.
pub fn subject_gradients<S: Scalar>(
    seq: &MaskedSequence<S>,
    cache: &ForwardCache<S>,
    state: &BackwardState<S>,
    beta_n: &[S],
) -> GradientSet<S> {
    let n = seq.input_width();
    let m = seq.target_width();
    let mut g = GradientSet::zeros(n, m);
    let inputs = seq.inputs();
    let mut scaled_x = vec![S::zero(); n];
    for t in 0..cache.steps() {
        for (c, sx) in scaled_x.iter_mut().enumerate() {
            *sx = if beta_n[c] > S::zero() {
                inputs[(t, c)] / beta_n[c]
            } else {
                S::zero()
            };
        }
        let (df, di, dz, d_o) = (
            state.d_f.row(t),
            state.d_i.row(t),
            state.d_z.row(t),
            state.d_o.row(t),
        );
        g.w_f.rank1_acc(df, &scaled_x);
        g.w_i.rank1_acc(di, &scaled_x);
        g.w_c.rank1_acc(dz, &scaled_x);
        g.w_o.rank1_acc(d_o, &scaled_x);

        let h_prev = cache.h_prev(t);
        g.u_f.rank1_acc(df, h_prev);
        g.u_i.rank1_acc(di, h_prev);
        g.u_c.rank1_acc(dz, h_prev);
        g.u_o.rank1_acc(d_o, h_prev);

        let c_prev = cache.c_prev(t);
        let c_now = cache.c.row(t);
        for k in 0..m {
            g.v_f[k] += df[k] * c_prev[k];
            g.v_i[k] += di[k] * c_prev[k];
            g.v_o[k] += d_o[k] * c_now[k];
            g.b_f[k] += df[k];
            g.b_i[k] += di[k];
            g.b_c[k] += dz[k];
            g.b_o[k] += d_o[k];
        }
    }
    g
}

/// Sums subject contributions in batch order.
pub fn accumulate_gradients<S: Scalar>(
    batch: &MaskedBatch<S>,
    caches: &[ForwardCache<S>],
    states: &[BackwardState<S>],
    factors: &NormalizationFactors<S>,
) -> Result<GradientSet<S>> {
    if caches.len() != batch.len() || states.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "accumulate: {} subjects, {} caches, {} backward states",
            batch.len(),
            caches.len(),
            states.len()
        )));
    }
    let mut total = GradientSet::zeros(batch.input_width(), batch.target_width());
    for (j, seq) in batch.sequences().iter().enumerate() {
        total.add_assign(&subject_gradients(seq, &caches[j], &states[j], &factors.beta_n[j]));
    }
    Ok(total)
}

/// Loss and gradients of a whole batch.
#[derive(Clone, Debug)]
pub struct BatchGradients<S> {
    /// `L(m)` summed over subjects.
    pub loss_per_node: Vec<S>,
    pub grads: GradientSet<S>,
}

impl<S: Scalar> BatchGradients<S> {
    pub fn total_loss(&self) -> S {
        self.loss_per_node.iter().copied().sum()
    }
}

/// Forward, loss, backward and accumulation over the batch. Subjects run in
/// parallel; the reduction is in subject order, so results do not depend on
/// scheduling.
pub fn batch_gradients<S: Scalar>(
    params: &LstmParameters<S>,
    batch: &MaskedBatch<S>,
    factors: &NormalizationFactors<S>,
) -> Result<BatchGradients<S>> {
    let parts: Vec<(Vec<S>, GradientSet<S>)> = batch
        .sequences()
        .par_iter()
        .enumerate()
        .map(|(j, seq)| {
            let cache = forward(params, seq.inputs())?;
            let loss = masked_loss(cache.outputs(), seq.targets(), seq.target_mask(), factors, j)?;
            let state = backward(params, &cache, &loss.dy)?;
            let g = subject_gradients(seq, &cache, &state, &factors.beta_n[j]);
            Ok((loss.per_node, g))
        })
        .collect::<Result<_>>()?;

    let mut loss_per_node = vec![S::zero(); batch.target_width()];
    let mut grads = GradientSet::zeros(batch.input_width(), batch.target_width());
    for (loss, g) in &parts {
        for (acc, &l) in loss_per_node.iter_mut().zip(loss) {
            *acc += l;
        }
        grads.add_assign(g);
    }
    Ok(BatchGradients { loss_per_node, grads })
}

/// Total normalized loss of the batch.
pub fn batch_loss<S: Scalar>(
    params: &LstmParameters<S>,
    batch: &MaskedBatch<S>,
    factors: &NormalizationFactors<S>,
) -> Result<S> {
    let mut total = S::zero();
    for (j, seq) in batch.sequences().iter().enumerate() {
        let cache = forward(params, seq.inputs())?;
        total += masked_loss(cache.outputs(), seq.targets(), seq.target_mask(), factors, j)?.total();
    }
    Ok(total)
}

fn subject_outputs<S: Scalar>(params: &LstmParameters<S>, batch: &MaskedBatch<S>) -> Result<Vec<Matrix<S>>> {
    batch
        .sequences()
        .iter()
        .map(|seq| Ok(forward(params, seq.inputs())?.h))
        .collect()
}

/// `L(plus) − L(minus)` for one subject, differenced term by term as
/// `½ (y⁺ − y⁻)(y⁺ + y⁻ − 2s) / β` so the two totals never cancel.
fn loss_difference<S: Scalar>(
    plus: &Matrix<S>,
    minus: &Matrix<S>,
    seq: &MaskedSequence<S>,
    factors: &NormalizationFactors<S>,
    subject: usize,
) -> S {
    let beta_x = factors.beta_x[subject];
    let beta_m = &factors.beta_m[subject];
    let half = S::lit(0.5);
    let (targets, mask) = (seq.targets(), seq.target_mask());
    let mut total = S::zero();
    for (k, &count) in beta_m.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let denom = beta_x * S::from_count(count);
        for t in 0..targets.rows() {
            if mask.get(t, k) {
                let (a, b) = (plus[(t, k)], minus[(t, k)]);
                total += half * (a - b) * (a + b - targets[(t, k)] - targets[(t, k)]) / denom;
            }
        }
    }
    total
}

/// Largest relative error within one parameter array (or the input
/// gradient, reported as `x`).
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub arrays: Vec<ArrayCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.arrays.iter().all(|a| a.passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &ArrayCheck> {
        self.arrays.iter().filter(|a| !a.passed)
    }
}

/// `|a − b| / max(|a|, |b|, 1e-12)`
pub fn relative_error<S: Scalar>(a: S, b: S) -> S {
    (a - b).abs() / a.abs().max(b.abs()).max(S::lit(1e-12))
}

/// Central-difference estimate of what [`accumulate_gradients`] returns.
///
/// Each parameter entry is perturbed by `±step` and every subject's loss is
/// recomputed. For all arrays but the input weights the estimate is the
/// central difference of the total loss. Input-weight column `n` is
/// combined per subject with weight `1/β_n^j(n)`, which is the normalized
/// gradient the training rule uses rather than the raw derivative.
pub fn numeric_gradients<S: Scalar>(
    params: &LstmParameters<S>,
    batch: &MaskedBatch<S>,
    step: S,
) -> Result<GradientSet<S>> {
    let factors = compute_factors(batch);
    let n = params.input_width();
    let mut probe = params.clone();
    let mut out = GradientSet::zeros(n, params.output_width());
    for a in 0..ARRAY_NAMES.len() {
        let len = params.arrays()[a].len();
        for idx in 0..len {
            let orig = params.arrays()[a][idx];
            probe.arrays_mut()[a][idx] = orig + step;
            let plus = subject_outputs(&probe, batch);
            let hi = probe.arrays()[a][idx];
            probe.arrays_mut()[a][idx] = orig - step;
            let minus = subject_outputs(&probe, batch);
            let lo = probe.arrays()[a][idx];
            probe.arrays_mut()[a][idx] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                _ => return Err(non_finite(a, idx)),
            };
            let two_h = hi - lo;
            let is_input_weight = a < 4;
            let mut acc = S::zero();
            for (j, seq) in batch.sequences().iter().enumerate() {
                let diff = loss_difference(&plus[j], &minus[j], seq, &factors, j);
                if !diff.is_finite() {
                    return Err(non_finite(a, idx));
                }
                if is_input_weight {
                    let beta = factors.beta_n[j][idx % n];
                    if beta > S::zero() {
                        acc += diff / two_h / beta;
                    }
                } else {
                    acc += diff;
                }
            }
            out.arrays_mut()[a][idx] = if is_input_weight { acc } else { acc / two_h };
        }
    }
    Ok(out)
}

fn non_finite(array: usize, index: usize) -> Error {
    Error::NonFiniteCheck {
        array: ARRAY_NAMES[array].to_string(),
        index,
    }
}

/// Analytic `δx` for each subject.
pub fn input_gradients<S: Scalar>(
    params: &LstmParameters<S>,
    batch: &MaskedBatch<S>,
) -> Result<Vec<Matrix<S>>> {
    let factors = compute_factors(batch);
    batch
        .sequences()
        .iter()
        .enumerate()
        .map(|(j, seq)| {
            let cache = forward(params, seq.inputs())?;
            let loss = masked_loss(cache.outputs(), seq.targets(), seq.target_mask(), &factors, j)?;
            Ok(backward(params, &cache, &loss.dy)?.dx)
        })
        .collect()
}

/// Central differences of the total loss with respect to each available
/// input cell; masked cells are left at zero.
pub fn numeric_input_gradients<S: Scalar>(
    params: &LstmParameters<S>,
    batch: &MaskedBatch<S>,
    step: S,
) -> Result<Vec<Matrix<S>>> {
    let factors = compute_factors(batch);
    let mut out = Vec::with_capacity(batch.len());
    for (j, seq) in batch.sequences().iter().enumerate() {
        let (steps, n) = seq.inputs().shape();
        let mut g = Matrix::zeros(steps, n);
        let mut x = seq.inputs().clone();
        for t in 0..steps {
            for c in 0..n {
                if !seq.input_mask().get(t, c) {
                    continue;
                }
                let orig = x[(t, c)];
                x[(t, c)] = orig + step;
                let hi = x[(t, c)];
                let plus = forward(params, &x);
                x[(t, c)] = orig - step;
                let lo = x[(t, c)];
                let minus = forward(params, &x);
                x[(t, c)] = orig;
                let diff = match (plus, minus) {
                    (Ok(p), Ok(m)) => loss_difference(&p.h, &m.h, seq, &factors, j),
                    _ => S::nan(),
                };
                if !diff.is_finite() {
                    return Err(Error::NonFiniteCheck {
                        array: format!("x[{j}]"),
                        index: t * n + c,
                    });
                }
                g[(t, c)] = diff / (hi - lo);
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares two gradient sets array by array.
pub fn compare_gradients<S: Scalar>(
    analytic: &GradientSet<S>,
    numeric: &GradientSet<S>,
    tolerance: f64,
) -> GradCheckReport {
    let arrays = ARRAY_NAMES
        .iter()
        .zip(analytic.arrays().iter().zip(numeric.arrays()))
        .map(|(name, (a, b))| check_slices(name, a.iter().zip(b.iter()), tolerance))
        .collect();
    GradCheckReport { tolerance, arrays }
}

fn check_slices<'a, S: Scalar>(
    name: &str,
    pairs: impl Iterator<Item = (&'a S, &'a S)>,
    tolerance: f64,
) -> ArrayCheck {
    let (mut worst, mut worst_index) = (0.0f64, 0usize);
    for (idx, (&a, &b)) in pairs.enumerate() {
        let e = relative_error(a, b).to_f64_lossy();
        if e > worst || e.is_nan() {
            worst = e;
            worst_index = idx;
        }
    }
    ArrayCheck {
        name: name.to_string(),
        max_rel_error: worst,
        worst_index,
        passed: worst <= tolerance,
    }
}

/// Full finite-difference check: all 15 parameter arrays plus the input
/// gradient `x` over available input cells.
pub fn gradient_check<S: Scalar>(
    params: &LstmParameters<S>,
    batch: &MaskedBatch<S>,
    fd_step: S,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(fd_step > S::zero()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {fd_step}")));
    }
    let factors = compute_factors(batch);
    let analytic = batch_gradients(params, batch, &factors)?.grads;
    let numeric = numeric_gradients(params, batch, fd_step)?;
    let mut report = compare_gradients(&analytic, &numeric, tolerance);

    let dx = input_gradients(params, batch)?;
    let dx_num = numeric_input_gradients(params, batch, fd_step)?;
    let pairs = batch
        .sequences()
        .iter()
        .zip(dx.iter().zip(&dx_num))
        .flat_map(|(seq, (a, b))| {
            seq.input_mask()
                .iter()
                .zip(a.as_slice().iter().zip(b.as_slice()))
                .filter_map(|(keep, pair)| keep.then_some(pair))
        });
    report.arrays.push(check_slices("x", pairs, tolerance));
    Ok(report)
}
