#![allow(dead_code)]

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_lstm::lstm::{init_parameters, LstmParameters};
use robust_lstm::masked_data::{MaskedBatch, MaskedSequence};
use robust_lstm::matrix::{Mask, Matrix};

pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub t: usize,
    pub j: usize,
}

pub const SMALL: Dims = Dims { n: 3, m: 3, t: 5, j: 4 };

/// Random parameters in [-0.5, 0.5], values in [-1, 1], and independent
/// Bernoulli masks. Masked cells carry `garbage` when given, which
/// construction must discard.
pub fn random_instance(
    seed: u64,
    d: &Dims,
    input_missing: f64,
    target_missing: f64,
    garbage: Option<f64>,
) -> (LstmParameters<f64>, MaskedBatch<f64>) {
    let params = init_parameters::<f64>(d.n, d.m, seed ^ 0x5eed, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new_inclusive(-1.0, 1.0).unwrap();
    let sequences = (0..d.j)
        .map(|j| {
            let input_mask = loop {
                let m = Mask::from_fn(d.t, d.n, |_, _| rng.random::<f64>() >= input_missing);
                if m.count() > 0 {
                    break m;
                }
            };
            let target_mask = Mask::from_fn(d.t, d.m, |_, _| rng.random::<f64>() >= target_missing);
            let mut inputs = Matrix::from_fn(d.t, d.n, |_, _| unit.sample(&mut rng));
            let mut targets = Matrix::from_fn(d.t, d.m, |_, _| unit.sample(&mut rng));
            if let Some(g) = garbage {
                for r in 0..d.t {
                    for c in 0..d.n {
                        if !input_mask.get(r, c) {
                            inputs[(r, c)] = g * (1.0 + (r * d.n + c) as f64);
                        }
                    }
                    for c in 0..d.m {
                        if !target_mask.get(r, c) {
                            targets[(r, c)] = -g * (2.0 + c as f64);
                        }
                    }
                }
            }
            MaskedSequence::new(format!("s{j}"), inputs, input_mask, targets, target_mask, vec![None; d.t])
                .unwrap()
        })
        .collect();
    (params, MaskedBatch::new(sequences).unwrap())
}
