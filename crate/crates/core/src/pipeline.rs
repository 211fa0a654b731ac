//! End-to-end steps shared by the CLI and the tests: persisting prepared
//! splits, training under a missing-data strategy, and evaluation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::cohort::{load_csv, window, write_csv, LabelScheme, PreparedCohort, PreparedSplit, ScalingSpec, SplitName};
use crate::error::{Error, Result};
use crate::eval::{fit_lda, mae, multiclass_auc, predict, MetricsReport, ScoredVisit};
use crate::imputation::{apply_strategy, ImputeScope, MissingStrategy, NodeMeans};
use crate::lstm::LstmParameters;
use crate::masked_data::MaskedBatch;
use crate::matrix::Matrix;
use crate::optimizer::{train, TrainConfig, TrainOutcome, Validation};

pub const SCALING_FILE: &str = "scaling.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const HISTORY_FILE: &str = "history.csv";

pub fn split_file(split: SplitName) -> String {
    format!("{split}.csv")
}

/// Creates `path` (and its parent directories) and hands a buffered writer
/// to `body`.
pub fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    body(&mut out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Writes `train.csv`, `val.csv`, `test.csv` and the scaling file into `dir`.
pub fn write_prepared(dir: &Path, cohort: &PreparedCohort) -> Result<()> {
    for name in SplitName::ALL {
        write_file(&dir.join(split_file(name)), |out| write_csv(&cohort.split(name).table, out))?;
    }
    write_file(&dir.join(SCALING_FILE), |out| cohort.scaling.write(out))
}

/// Reads one prepared split back. Rows are dense over window positions,
/// so the step count is the largest position.
pub fn read_split(dir: &Path, split: SplitName, scheme: &LabelScheme) -> Result<PreparedSplit> {
    let table = load_csv(dir.join(split_file(split)), scheme)?;
    let steps = table.rows.iter().map(|r| r.visit as usize).max().unwrap_or(0);
    let batch = window(&table, steps)?;
    Ok(PreparedSplit { table, batch })
}

pub fn read_scaling(dir: &Path) -> Result<ScalingSpec> {
    ScalingSpec::read(open(&dir.join(SCALING_FILE))?)
}

pub fn read_checkpoint(path: &Path) -> Result<LstmParameters<f64>> {
    crate::lstm::read_checkpoint(open(path)?)
}

/// Batches as seen by training under `strategy`: the training batch with
/// inputs (and, with `impute_targets`, targets) filled, and the validation
/// batch with inputs filled only. Means come from the training split.
pub fn strategy_batches(
    train_batch: &MaskedBatch<f64>,
    others: &[&MaskedBatch<f64>],
    strategy: MissingStrategy,
    impute_targets: bool,
) -> Result<(MaskedBatch<f64>, Vec<MaskedBatch<f64>>)> {
    if strategy == MissingStrategy::Masked {
        return Ok((train_batch.clone(), others.iter().map(|b| (*b).clone()).collect()));
    }
    let means = NodeMeans::from_batch(train_batch)?;
    let scope = if impute_targets {
        ImputeScope::InputsAndTargets
    } else {
        ImputeScope::InputsOnly
    };
    let train = apply_strategy(train_batch, strategy, &means, scope)?;
    let rest = others
        .iter()
        .map(|b| apply_strategy(b, strategy, &means, ImputeScope::InputsOnly))
        .collect::<Result<_>>()?;
    Ok((train, rest))
}

/// Trains on the training split under `strategy`, tracking validation MAE
/// in original units.
pub fn train_strategy(
    train_split: &MaskedBatch<f64>,
    val_split: &MaskedBatch<f64>,
    scaling: &ScalingSpec,
    strategy: MissingStrategy,
    impute_targets: bool,
    config: &TrainConfig,
) -> Result<TrainOutcome<f64>> {
    let (train_batch, mut rest) = strategy_batches(train_split, &[val_split], strategy, impute_targets)?;
    let val_batch = rest.remove(0);
    let inverse = scaling.inverse_affines();
    let validation = Validation {
        batch: &val_batch,
        inverse: &inverse,
    };
    train(&train_batch, Some(&validation), config)
}

/// Predicted next-visit vectors of every labeled target visit.
fn labeled_features(preds: &[Matrix<f64>], batch: &MaskedBatch<f64>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (pred, seq) in preds.iter().zip(batch.sequences()) {
        for (t, label) in seq.labels().iter().enumerate() {
            if let Some(l) = label {
                features.push(pred.row(t).to_vec());
                labels.push(*l);
            }
        }
    }
    (features, labels)
}

/// MAE per biomarker in original units on `eval_split`, and LDA-based AUC.
/// LDA is fit on predictions for the training split and scored on
/// `eval_split`; inputs of both are imputed under `strategy` first. AUC
/// covers the classes present in both splits.
pub fn evaluate(
    params: &LstmParameters<f64>,
    train_split: &MaskedBatch<f64>,
    eval_split: &MaskedBatch<f64>,
    split_name: &str,
    strategy: MissingStrategy,
    scaling: &ScalingSpec,
    class_names: &[String],
) -> Result<MetricsReport> {
    let (_, inputs) = strategy_batches(train_split, &[train_split, eval_split], strategy, false)?;
    let train_preds = predict(params, &inputs[0])?;
    let eval_preds = predict(params, &inputs[1])?;

    let per_node = mae(&eval_preds, eval_split, &scaling.inverse_affines())?;
    let mae_rows = scaling.names().into_iter().zip(per_node).collect();

    let (features, labels) = labeled_features(&train_preds, train_split);
    let lda = fit_lda(&features, &labels, None)?;
    let (eval_features, eval_labels) = labeled_features(&eval_preds, eval_split);
    let present: Vec<usize> = (0..lda.classes().len())
        .filter(|&pos| eval_labels.iter().any(|&l| lda.class_position(l) == Some(pos)))
        .collect();
    let name = |pos: usize| {
        let class = lda.classes()[pos];
        class_names.get(class).cloned().unwrap_or_else(|| class.to_string())
    };

    let mut auc_pairs = Vec::new();
    let mut auc_multiclass = None;
    if present.len() >= 2 {
        let scored: Vec<ScoredVisit<f64>> = eval_features
            .iter()
            .zip(&eval_labels)
            .filter_map(|(x, &l)| {
                let pos = lda.class_position(l)?;
                let post = lda.posterior(x);
                Some(ScoredVisit {
                    label: present.iter().position(|&p| p == pos)?,
                    posteriors: present.iter().map(|&p| post[p]).collect(),
                })
            })
            .collect();
        let report = multiclass_auc(&scored)?;
        for pair in &report.pairs {
            let label = format!("{} vs {}", name(present[pair.first]), name(present[pair.second]));
            auc_pairs.push((label, pair.auc));
        }
        let all: Vec<String> = present.iter().map(|&p| name(p)).collect();
        auc_multiclass = Some((all.join(" vs "), report.multiclass));
    }

    Ok(MetricsReport {
        split: split_name.to_string(),
        mae: mae_rows,
        auc_pairs,
        auc_multiclass,
    })
}
