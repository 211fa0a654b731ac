//! Momentum batch gradient descent with weight decay, and the epoch loop.
//!
//! For every parameter array `ω` with gradient `δω`:
//!
//! ```text
//! ϑ ← μ ϑ − α (δω + γ ω)
//! ω ← ω + ϑ
//! ```

use std::io::Write;

use crate::bptt::{batch_gradients, GradientSet};
use crate::error::{Error, Result};
use crate::eval::{mae, predict, Affine};
use crate::lstm::{init_parameters, LstmParameters, ARRAY_NAMES};
use crate::masked_data::{compute_factors, MaskedBatch};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    /// One velocity array per parameter array, starting at zero.
    pub velocity: LstmParameters<S>,
    pub learning_rate: S,
    pub weight_decay: S,
    pub momentum: S,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(
        params: &LstmParameters<S>,
        learning_rate: S,
        weight_decay: S,
        momentum: S,
    ) -> Result<Self> {
        if !(learning_rate > S::zero()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {learning_rate}")));
        }
        if !(weight_decay >= S::zero()) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        if !(momentum >= S::zero() && momentum < S::one()) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(OptimizerState {
            velocity: LstmParameters::zeros(params.input_width(), params.output_width()),
            learning_rate,
            weight_decay,
            momentum,
        })
    }
}

/// Applies one update to all 15 arrays, peepholes and biases included.
/// Nothing is modified when any updated value would be non-finite.
pub fn momentum_step<S: Scalar>(
    params: &mut LstmParameters<S>,
    grads: &GradientSet<S>,
    state: &mut OptimizerState<S>,
) -> Result<()> {
    if params.array_shapes() != grads.array_shapes()
        || params.array_shapes() != state.velocity.array_shapes()
    {
        return Err(Error::Dimension(
            "parameters, gradients and velocity have different shapes".into(),
        ));
    }
    let (alpha, gamma, mu) = (state.learning_rate, state.weight_decay, state.momentum);
    let mut new_params = params.clone();
    let mut new_velocity = state.velocity.clone();
    for (((w, v), g), name) in new_params
        .arrays_mut()
        .into_iter()
        .zip(new_velocity.arrays_mut())
        .zip(grads.arrays())
        .zip(ARRAY_NAMES)
    {
        for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = mu * *v - alpha * (g + gamma * *w);
            *w += *v;
            if !(w.is_finite() && v.is_finite()) {
                return Err(Error::NonFiniteUpdate { array: name });
            }
        }
    }
    *params = new_params;
    state.velocity = new_velocity;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `α`
    pub learning_rate: f64,
    /// `μ`
    pub momentum: f64,
    /// `γ`
    pub weight_decay: f64,
    pub init_seed: u64,
    pub init_range: f64,
    /// Validation MAE is computed every this many epochs and after the last
    /// one; zero disables it.
    pub validation_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0001,
            init_seed: 1,
            init_range: 0.05,
            validation_every: 50,
        }
    }
}

/// Held-out batch and the per-node maps back to original units.
#[derive(Clone, Debug)]
pub struct Validation<'a, S> {
    pub batch: &'a MaskedBatch<S>,
    pub inverse: &'a [Affine<S>],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Total normalized loss before this epoch's update.
    pub loss: f64,
    /// Per-node validation MAE in original units, when computed.
    pub validation_mae: Option<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<S> {
    pub params: LstmParameters<S>,
    pub history: Vec<EpochRecord>,
}

/// Initializes from `config` and trains.
pub fn train<S: Scalar>(
    train_batch: &MaskedBatch<S>,
    validation: Option<&Validation<'_, S>>,
    config: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    let params = init_parameters(
        train_batch.input_width(),
        train_batch.target_width(),
        config.init_seed,
        config.init_range,
    )?;
    train_from(params, train_batch, validation, config)
}

/// Full-batch training for `config.epochs` epochs. No early stopping and no
/// shuffling.
pub fn train_from<S: Scalar>(
    mut params: LstmParameters<S>,
    train_batch: &MaskedBatch<S>,
    validation: Option<&Validation<'_, S>>,
    config: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    if params.input_width() != train_batch.input_width()
        || params.output_width() != train_batch.target_width()
    {
        return Err(Error::Dimension(format!(
            "layer N={} M={} cannot train on data N={} M={}",
            params.input_width(),
            params.output_width(),
            train_batch.input_width(),
            train_batch.target_width()
        )));
    }
    if let Some(v) = validation {
        if v.batch.input_width() != train_batch.input_width()
            || v.batch.target_width() != train_batch.target_width()
            || v.inverse.len() != train_batch.target_width()
        {
            return Err(Error::Dimension(
                "validation batch or inverse transforms do not match the training data".into(),
            ));
        }
    }
    let mut state = OptimizerState::new(
        &params,
        S::lit(config.learning_rate),
        S::lit(config.weight_decay),
        S::lit(config.momentum),
    )?;
    let factors = compute_factors(train_batch);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let step = batch_gradients(&params, train_batch, &factors).map_err(|e| diverged(e, epoch))?;
        let loss = step.total_loss();
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        momentum_step(&mut params, &step.grads, &mut state).map_err(|e| diverged(e, epoch))?;

        let due = config.validation_every > 0
            && (epoch % config.validation_every == 0 || epoch == config.epochs);
        let validation_mae = match validation {
            Some(v) if due => {
                let preds = predict(&params, v.batch).map_err(|e| diverged(e, epoch))?;
                let per_node = mae(&preds, v.batch, v.inverse)?;
                Some(per_node.into_iter().map(|m| m.map(Scalar::to_f64_lossy)).collect())
            }
            _ => None,
        };
        history.push(EpochRecord {
            epoch,
            loss: loss.to_f64_lossy(),
            validation_mae,
        });
    }
    Ok(TrainOutcome { params, history })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFiniteForward { .. } | Error::NonFiniteUpdate { .. } => Error::Divergence { epoch },
        other => other,
    }
}

/// Writes the history log: a header, then `epoch,loss[,mae_1,...,mae_M]`
/// per line. MAE fields are empty on epochs without validation.
pub fn write_history(
    history: &[EpochRecord],
    node_names: &[String],
    mut out: impl Write,
) -> std::io::Result<()> {
    let mut header = vec!["epoch".to_string(), "loss".to_string()];
    header.extend(node_names.iter().map(|n| format!("mae_{n}")));
    writeln!(out, "{}", header.join(","))?;
    for rec in history {
        let mut fields = vec![rec.epoch.to_string(), format!("{:e}", rec.loss)];
        match &rec.validation_mae {
            Some(maes) => fields.extend(
                maes.iter()
                    .map(|m| m.map_or_else(String::new, |v| format!("{v:e}"))),
            ),
            None => fields.extend(node_names.iter().map(|_| String::new())),
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_setup(w: f64, g: f64, alpha: f64, gamma: f64, mu: f64) -> (LstmParameters<f64>, GradientSet<f64>, OptimizerState<f64>) {
        let mut p = LstmParameters::<f64>::zeros(1, 1);
        p.w_f[(0, 0)] = w;
        let mut grads = GradientSet::zeros(1, 1);
        grads.w_f[(0, 0)] = g;
        let state = OptimizerState::new(&p, alpha, gamma, mu).unwrap();
        (p, grads, state)
    }

    #[test]
    fn two_step_hand_trace() {
        let (mut p, g, mut st) = one_param_setup(1.0, 1.0, 0.1, 0.0, 0.9);
        momentum_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(st.velocity.w_f[(0, 0)], -0.1);
        assert_eq!(p.w_f[(0, 0)], 0.9);
        momentum_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(st.velocity.w_f[(0, 0)], -0.19);
        assert_eq!(p.w_f[(0, 0)], 0.71);
    }

    #[test]
    fn no_momentum_no_decay_is_plain_descent() {
        let (mut p, g, mut st) = one_param_setup(0.3, 0.7, 0.05, 0.0, 0.0);
        momentum_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p.w_f[(0, 0)], 0.3 + (-(0.05 * 0.7)));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut p, g, mut st) = one_param_setup(0.4, 0.0, 0.1, 0.0, 0.9);
        let before = p.clone();
        momentum_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn weight_decay_shrinks_norm_monotonically() {
        let mut p = init_parameters::<f64>(3, 2, 7, 0.5).unwrap();
        let g = GradientSet::zeros(3, 2);
        let mut st = OptimizerState::new(&p, 0.1, 0.01, 0.9).unwrap();
        let mut last = p.squared_norm();
        for _ in 0..200 {
            momentum_step(&mut p, &g, &mut st).unwrap();
            let now = p.squared_norm();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn invalid_hyperparameters() {
        let p = LstmParameters::<f64>::zeros(1, 1);
        assert!(OptimizerState::new(&p, 0.0, 0.0, 0.5).is_err());
        assert!(OptimizerState::new(&p, 0.1, -1.0, 0.5).is_err());
        assert!(OptimizerState::new(&p, 0.1, 0.0, 1.0).is_err());
    }

    #[test]
    fn non_finite_update_names_array_and_leaves_params() {
        let mut p = LstmParameters::<f64>::zeros(1, 1);
        let mut g = GradientSet::zeros(1, 1);
        g.b_i[0] = f64::INFINITY;
        let mut st = OptimizerState::new(&p, 0.1, 0.0, 0.9).unwrap();
        let before = p.clone();
        match momentum_step(&mut p, &g, &mut st) {
            Err(Error::NonFiniteUpdate { array }) => assert_eq!(array, "b_i"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p, before);
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.momentum, c.weight_decay, c.epochs), (0.1, 0.9, 0.0001, 1000));
        assert_eq!(c.init_range, 0.05);
    }

    #[test]
    fn history_format() {
        let hist = vec![
            EpochRecord { epoch: 1, loss: 0.5, validation_mae: None },
            EpochRecord { epoch: 2, loss: 0.25, validation_mae: Some(vec![Some(0.1), None]) },
        ];
        let mut buf = Vec::new();
        write_history(&hist, &["a".into(), "b".into()], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,loss,mae_a,mae_b\n1,5e-1,,\n2,2.5e-1,1e-1,\n"
        );
    }
}
