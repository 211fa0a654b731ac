mod common;

use common::{random_instance, SMALL};
use proptest::prelude::*;
use robust_lstm::bptt::batch_gradients;
use robust_lstm::cohort::{preprocess, synthesize, LabelScheme, PreprocessConfig, SynthConfig};
use robust_lstm::eval::{fit_lda, mae, multiclass_auc, predict, Affine, ScoredVisit};
use robust_lstm::imputation::{apply_strategy, ImputeScope, MissingStrategy, NodeMeans};
use robust_lstm::lstm::init_parameters;
use robust_lstm::masked_data::compute_factors;
use robust_lstm::optimizer::{momentum_step, train, OptimizerState, TrainConfig};

fn two_class_2d() -> (Vec<Vec<f64>>, Vec<usize>) {
    let a = [[0.0, 0.0], [1.0, 0.5], [0.5, 1.5], [-0.5, 0.2], [0.3, -0.6]];
    let b = [[2.0, 1.0], [3.0, 2.5], [2.2, 2.0], [1.5, 1.8]];
    let features = a.iter().chain(b.iter()).map(|p| p.to_vec()).collect();
    let labels = [0; 5].into_iter().chain([1; 4]).collect();
    (features, labels)
}

/// Posterior of class 0 from the Gaussian densities written out directly.
fn density_ratio_posterior(features: &[Vec<f64>], labels: &[usize], ridge: f64, x: [f64; 2]) -> f64 {
    let mut means = [[0.0; 2]; 2];
    let mut counts = [0.0; 2];
    for (f, &l) in features.iter().zip(labels) {
        means[l][0] += f[0];
        means[l][1] += f[1];
        counts[l] += 1.0;
    }
    for l in 0..2 {
        means[l][0] /= counts[l];
        means[l][1] /= counts[l];
    }
    let mut s = [[0.0; 2]; 2];
    for (f, &l) in features.iter().zip(labels) {
        let d = [f[0] - means[l][0], f[1] - means[l][1]];
        for r in 0..2 {
            for c in 0..2 {
                s[r][c] += d[r] * d[c];
            }
        }
    }
    let dof = features.len() as f64 - 2.0;
    for row in s.iter_mut() {
        for v in row.iter_mut() {
            *v /= dof;
        }
    }
    s[0][0] += ridge;
    s[1][1] += ridge;
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
    let density = |l: usize| {
        let d = [x[0] - means[l][0], x[1] - means[l][1]];
        let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
        (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
    };
    let total = features.len() as f64;
    let (p0, p1) = (counts[0] / total * density(0), counts[1] / total * density(1));
    p0 / (p0 + p1)
}

#[test]
fn lda_matches_density_ratio_in_2d() {
    let (features, labels) = two_class_2d();
    let model = fit_lda(&features, &labels, None).unwrap();
    let ridge = model.ridge();
    for x in [[0.0, 0.0], [1.2, 1.1], [2.5, 2.0], [-1.0, 3.0], [1.7, 0.4]] {
        let got = model.posterior(&x)[0];
        let want = density_ratio_posterior(&features, &labels, ridge, x);
        assert!((got - want).abs() <= 1e-10, "{x:?}: {got} vs {want}");
    }
}

#[test]
fn lda_far_clusters_are_confident() {
    let features: Vec<Vec<f64>> = (0..20)
        .map(|i| {
            let jitter = (i % 5) as f64 * 0.01;
            if i < 10 {
                vec![jitter, -jitter]
            } else {
                vec![100.0 + jitter, 100.0 - jitter]
            }
        })
        .collect();
    let labels: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
    let model = fit_lda(&features, &labels, None).unwrap();
    for (f, &l) in features.iter().zip(&labels) {
        assert!(model.posterior(f)[l] >= 0.99);
    }
}

fn scored(points: &[(usize, Vec<f64>)]) -> Vec<ScoredVisit<f64>> {
    points
        .iter()
        .map(|(l, p)| ScoredVisit {
            label: *l,
            posteriors: p.clone(),
        })
        .collect()
}

fn instance_strategy() -> impl Strategy<Value = Vec<(usize, Vec<f64>)>> {
    prop::collection::vec((0usize..3, prop::collection::vec(0.01f64..1.0, 3)), 6..30).prop_map(|mut v| {
        for (k, item) in v.iter_mut().take(3).enumerate() {
            item.0 = k;
        }
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_is_invariant_under_monotone_column_maps(points in instance_strategy(), column in 0usize..3) {
        let base = multiclass_auc(&scored(&points)).unwrap();
        let mapped: Vec<_> = points
            .iter()
            .map(|(l, p)| {
                let mut p = p.clone();
                p[column] = (3.0 * p[column]).exp() + 7.0;
                (*l, p)
            })
            .collect();
        let after = multiclass_auc(&scored(&mapped)).unwrap();
        prop_assert_eq!(base, after);
    }

    #[test]
    fn auc_pair_terms_are_symmetric(points in instance_strategy()) {
        let base = multiclass_auc(&scored(&points)).unwrap();
        // relabel 0 <-> 1 and swap the matching posterior columns
        let swapped: Vec<_> = points
            .iter()
            .map(|(l, p)| {
                let l = [1, 0, 2][*l];
                (l, vec![p[1], p[0], p[2]])
            })
            .collect();
        let after = multiclass_auc(&scored(&swapped)).unwrap();
        prop_assert!((base.pairs[0].auc - after.pairs[0].auc).abs() <= 1e-15);
        prop_assert!((base.multiclass - after.multiclass).abs() <= 1e-15);
        prop_assert!((0.0..=1.0).contains(&base.multiclass));
    }

    #[test]
    fn lda_posteriors_survive_affine_feature_maps(
        seed in 0u64..1000,
        scale in prop::sample::select(vec![-3.0, 0.5, 2.0, 10.0]),
        shift in -5.0f64..5.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let features: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| vec![l as f64 + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0) - l as f64])
            .collect();
        let moved: Vec<Vec<f64>> = features.iter().map(|f| f.iter().map(|v| scale * v + shift).collect()).collect();
        let a = fit_lda(&features, &labels, None).unwrap();
        let b = fit_lda(&moved, &labels, None).unwrap();
        for (f, g) in features.iter().zip(&moved) {
            for (p, q) in a.posterior(f).iter().zip(b.posterior(g)) {
                prop_assert!((p - q).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn imputation_contracts(seed in 0u64..10_000, strategy in prop::sample::select(vec![MissingStrategy::Mean, MissingStrategy::Forward])) {
        let (_, batch) = random_instance(seed, &SMALL, 0.4, 0.4, None);
        let means = NodeMeans::from_batch(&batch);
        prop_assume!(means.is_ok());
        let means = means.unwrap();
        let once = apply_strategy(&batch, strategy, &means, ImputeScope::InputsAndTargets).unwrap();
        let twice = apply_strategy(&once, strategy, &means, ImputeScope::InputsAndTargets).unwrap();
        prop_assert_eq!(&once, &twice);
        for (before, after) in batch.sequences().iter().zip(once.sequences()) {
            prop_assert!(after.input_mask().all() && after.target_mask().all());
            let kept = |m: &robust_lstm::matrix::Mask, a: &robust_lstm::Matrix, b: &robust_lstm::Matrix| {
                m.iter().zip(a.as_slice().iter().zip(b.as_slice())).all(|(avail, (x, y))| !avail || x == y)
            };
            prop_assert!(kept(before.input_mask(), before.inputs(), after.inputs()));
            prop_assert!(kept(before.target_mask(), before.targets(), after.targets()));
        }
        let f = compute_factors(&once);
        prop_assert!(f.beta_x.iter().all(|&b| b == once.len() as f64));
        prop_assert!(f.beta_n.iter().flatten().all(|&b| b == 1.0));
        prop_assert!(f.beta_m.iter().flatten().all(|&b| b == once.steps()));
    }

    #[test]
    fn mae_is_nonnegative_and_homogeneous(seed in 0u64..10_000) {
        let (params, batch) = random_instance(seed, &SMALL, 0.3, 0.3, None);
        let preds = predict(&params, &batch).unwrap();
        let id = vec![Affine::identity(); 3];
        let doubled = vec![Affine { scale: 2.0, offset: 0.0 }; 3];
        let a = mae(&preds, &batch, &id).unwrap();
        let b = mae(&preds, &batch, &doubled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            match (x, y) {
                (Some(x), Some(y)) => {
                    prop_assert!(*x >= 0.0);
                    prop_assert_eq!(2.0 * x, *y);
                }
                (None, None) => {}
                _ => prop_assert!(false, "definedness differs"),
            }
        }
        let exact: Vec<_> = batch.sequences().iter().map(|s| s.targets().clone()).collect();
        prop_assert!(mae(&exact, &batch, &id).unwrap().iter().flatten().all(|&v| v == 0.0));
    }
}

#[test]
fn scaling_inverts_on_training_values() {
    let raw = synthesize(&SynthConfig::default(), &LabelScheme::default()).unwrap();
    let cohort = preprocess(&raw, &PreprocessConfig::default()).unwrap();
    let by_id: std::collections::HashMap<(&str, u32), &Vec<Option<f64>>> =
        raw.rows.iter().map(|r| ((r.subject_id.as_str(), r.visit), &r.values)).collect();
    let mut checked = 0;
    for row in &cohort.train.table.rows {
        let original = by_id[&(row.subject_id.as_str(), row.visit)];
        for ((scaled, orig), s) in row.values.iter().zip(original).zip(&cohort.scaling.biomarkers) {
            if let (Some(y), Some(x)) = (scaled, orig) {
                assert!((-1.0..=1.0).contains(y));
                assert!((s.inverse(*y) - x).abs() <= 1e-12);
                checked += 1;
            }
        }
    }
    assert!(checked > 1000);
}

#[test]
fn prepared_masks_are_missing_or_outlier_or_outside_window() {
    let raw = synthesize(&SynthConfig::default(), &LabelScheme::default()).unwrap();
    let mut config = PreprocessConfig {
        visits: vec![1, 2, 4, 6, 7, 9],
        ..PreprocessConfig::default()
    };
    config.outlier_ranges.insert("biomarker_2".into(), (1.8, 2.6));
    let cohort = preprocess(&raw, &config).unwrap();
    let lookup: std::collections::HashMap<(&str, u32), &Vec<Option<f64>>> =
        raw.rows.iter().map(|r| ((r.subject_id.as_str(), r.visit), &r.values)).collect();
    for split in [&cohort.train, &cohort.val, &cohort.test] {
        for row in &split.table.rows {
            let visit = config.visits[row.visit as usize];
            let original = lookup[&(row.subject_id.as_str(), visit)];
            for (b, (now, then)) in row.values.iter().zip(original).enumerate() {
                let expected = then.filter(|&v| b != 1 || (1.8..=2.6).contains(&v));
                assert_eq!(now.is_some(), expected.is_some(), "{} visit {visit} biomarker {b}", row.subject_id);
            }
        }
    }
    assert_eq!(cohort, preprocess(&raw, &config).unwrap());
}

#[test]
fn training_descends_and_is_deterministic() {
    let raw = synthesize(&SynthConfig::default(), &LabelScheme::default()).unwrap();
    let cohort = preprocess(&raw, &PreprocessConfig::default()).unwrap();
    let config = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let a = train(&cohort.train.batch, None, &config).unwrap();
    let first = a.history.first().unwrap().loss;
    let last = a.history.last().unwrap().loss;
    assert!(last < first, "{last} >= {first}");
    let b = train(&cohort.train.batch, None, &config).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);

    let zero = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let untouched = train(&cohort.train.batch, None, &zero).unwrap();
    assert!(untouched.history.is_empty());
    assert_eq!(
        untouched.params,
        init_parameters(6, 6, zero.init_seed, zero.init_range).unwrap()
    );
}

#[test]
fn default_step_moves_every_array_with_gradient() {
    let (params, batch) = random_instance(8, &SMALL, 0.3, 0.3, None);
    let grads = batch_gradients(&params, &batch, &compute_factors(&batch)).unwrap().grads;
    let cfg = TrainConfig::default();
    let mut state = OptimizerState::new(&params, cfg.learning_rate, cfg.weight_decay, cfg.momentum).unwrap();
    let mut stepped = params.clone();
    momentum_step(&mut stepped, &grads, &mut state).unwrap();
    for ((before, after), g) in params.arrays().iter().zip(stepped.arrays()).zip(grads.arrays()) {
        if g.iter().any(|&v| v != 0.0) {
            assert_ne!(before, &after);
        }
    }
}
