use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scaling::{BiomarkerScaling, ScalingSpec};
use super::table::{CohortRow, CohortTable};
use crate::error::{Error, Result};
use crate::masked_data::{MaskedBatch, MaskedSequence};
use crate::matrix::{Mask, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    /// Biomarker columns to model; `None` takes every column of the table.
    pub biomarkers: Option<Vec<String>>,
    /// Divide every biomarker by the `ref_volume` column first.
    pub use_ref_volume: bool,
    /// Visit indices forming the window, in order. `T` is one less than its
    /// length.
    pub visits: Vec<u32>,
    /// Inclusive `[lo, hi]` per biomarker (after reference-volume division);
    /// values outside become missing.
    pub outlier_ranges: BTreeMap<String, (f64, f64)>,
    /// Subjects need at least this many available visits in every biomarker.
    pub min_visits: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            biomarkers: None,
            use_ref_volume: false,
            visits: (0..=10).collect(),
            outlier_ranges: BTreeMap::new(),
            min_visits: 3,
            val_fraction: 0.1,
            test_fraction: 0.1,
            split_seed: 7,
        }
    }
}

impl PreprocessConfig {
    pub fn steps(&self) -> usize {
        self.visits.len().saturating_sub(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [Self::Train, Self::Val, Self::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train, val or test)"))),
        }
    }
}

/// One split: the scaled table (visits re-indexed to window positions
/// `0..=T`, one row per position) and its windowed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSplit {
    pub table: CohortTable,
    pub batch: MaskedBatch<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCohort {
    pub train: PreparedSplit,
    pub val: PreparedSplit,
    pub test: PreparedSplit,
    pub scaling: ScalingSpec,
    /// Subjects dropped by the minimum-visit filter, in table order.
    pub removed: Vec<String>,
}

impl PreparedCohort {
    pub fn split(&self, name: SplitName) -> &PreparedSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// A subject on the window grid: `positions × biomarkers`.
struct Grid {
    id: String,
    values: Vec<Vec<Option<f64>>>,
    labels: Vec<Option<usize>>,
}

impl Grid {
    fn available(&self, b: usize) -> usize {
        self.values.iter().filter(|row| row[b].is_some()).count()
    }

    fn baseline_label(&self) -> Option<usize> {
        self.labels.iter().flatten().next().copied()
    }
}

/// Runs the preparation pipeline:
///
/// 1. divide by reference volume (if configured);
/// 2. keep only the configured visits;
/// 3. mark out-of-range values missing;
/// 4. drop subjects with fewer than `min_visits` available visits in any
///    biomarker;
/// 5. split by baseline label into train/val/test, `⌊fraction · class
///    size⌋` subjects per class for val and test, the rest to train;
/// 6. scale each biomarker to `[-1, 1]` with training-split min/max;
/// 7. window into one-step-ahead sequences.
pub fn preprocess(table: &CohortTable, config: &PreprocessConfig) -> Result<PreparedCohort> {
    let columns = select_columns(table, config)?;
    let names: Vec<String> = columns.iter().map(|&c| table.biomarkers[c].clone()).collect();
    let ranges: Vec<Option<(f64, f64)>> = names
        .iter()
        .map(|n| config.outlier_ranges.get(n).copied())
        .collect();
    for (name, &(lo, hi)) in &config.outlier_ranges {
        if !names.contains(name) {
            return Err(Error::Config(format!("outlier range for unknown biomarker `{name}`")));
        }
        if !(lo <= hi) {
            return Err(Error::Config(format!("outlier range for `{name}` has lo > hi")));
        }
    }
    if config.use_ref_volume && !table.has_ref_volume {
        return Err(Error::Config("ref_volume normalization requested but the table has no ref_volume column".into()));
    }
    if config.visits.len() < 2 {
        return Err(Error::Config("the visit window needs at least two visits".into()));
    }
    let positions: HashMap<u32, usize> = config.visits.iter().enumerate().map(|(p, &v)| (v, p)).collect();
    if positions.len() != config.visits.len() {
        return Err(Error::Config("duplicate visit index in the window".into()));
    }
    for f in [config.val_fraction, config.test_fraction] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!("split fraction {f} outside [0, 1)")));
        }
    }
    if config.val_fraction + config.test_fraction >= 1.0 {
        return Err(Error::Config("validation and test fractions leave no training data".into()));
    }

    let width = config.visits.len();
    let mut grids: Vec<Grid> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for row in &table.rows {
        let g = *index.entry(row.subject_id.as_str()).or_insert_with(|| {
            grids.push(Grid {
                id: row.subject_id.clone(),
                values: vec![vec![None; columns.len()]; width],
                labels: vec![None; width],
            });
            grids.len() - 1
        });
        let Some(&p) = positions.get(&row.visit) else {
            continue;
        };
        grids[g].labels[p] = row.label;
        for (b, &col) in columns.iter().enumerate() {
            grids[g].values[p][b] = cell_value(row, col, config.use_ref_volume, ranges[b]);
        }
    }

    let (kept, removed): (Vec<Grid>, Vec<Grid>) = grids
        .into_iter()
        .partition(|g| (0..columns.len()).all(|b| g.available(b) >= config.min_visits));
    let removed = removed.into_iter().map(|g| g.id).collect();

    let assignment = stratified_split(&kept, table.labels.len(), config);
    let mut parts: [Vec<&Grid>; 3] = Default::default();
    for (g, split) in kept.iter().zip(&assignment) {
        parts[*split as usize].push(g);
    }
    for (split, part) in SplitName::ALL.iter().zip(&parts) {
        if part.is_empty() {
            return Err(Error::Data(format!("the {split} split is empty after filtering")));
        }
    }

    let scaling = fit_scaling(&parts[0], &names, &ranges)?;
    let steps = width - 1;
    let build = |part: &[&Grid]| -> Result<PreparedSplit> {
        let table = scaled_table(part, &scaling, &names, &table.labels);
        let batch = window(&table, steps)?;
        Ok(PreparedSplit { table, batch })
    };
    Ok(PreparedCohort {
        train: build(&parts[0])?,
        val: build(&parts[1])?,
        test: build(&parts[2])?,
        scaling,
        removed,
    })
}

fn select_columns(table: &CohortTable, config: &PreprocessConfig) -> Result<Vec<usize>> {
    match &config.biomarkers {
        None => Ok((0..table.biomarkers.len()).collect()),
        Some(names) if names.is_empty() => Err(Error::Config("no biomarkers selected".into())),
        Some(names) => names
            .iter()
            .map(|n| {
                table
                    .biomarkers
                    .iter()
                    .position(|b| b == n)
                    .ok_or_else(|| Error::Config(format!("biomarker `{n}` is not a column of the table")))
            })
            .collect(),
    }
}

fn cell_value(row: &CohortRow, col: usize, use_ref: bool, range: Option<(f64, f64)>) -> Option<f64> {
    let mut v = row.values[col]?;
    if use_ref {
        match row.ref_volume {
            Some(r) if r > 0.0 => v /= r,
            _ => return None,
        }
    }
    match range {
        Some((lo, hi)) if v < lo || v > hi => None,
        _ => Some(v),
    }
}

/// Assigns 0 = train, 1 = val, 2 = test per kept subject.
fn stratified_split(grids: &[Grid], n_labels: usize, config: &PreprocessConfig) -> Vec<u8> {
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); n_labels + 1];
    for (i, g) in grids.iter().enumerate() {
        strata[g.baseline_label().unwrap_or(n_labels)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.split_seed);
    let mut assignment = vec![0u8; grids.len()];
    for stratum in strata.iter_mut() {
        stratum.shuffle(&mut rng);
        let n = stratum.len() as f64;
        let n_val = (config.val_fraction * n + 1e-9).floor() as usize;
        let n_test = (config.test_fraction * n + 1e-9).floor() as usize;
        for (k, &i) in stratum.iter().enumerate() {
            assignment[i] = if k < n_val {
                1
            } else if k < n_val + n_test {
                2
            } else {
                0
            };
        }
    }
    assignment
}

fn fit_scaling(train: &[&Grid], names: &[String], ranges: &[Option<(f64, f64)>]) -> Result<ScalingSpec> {
    let mut biomarkers = Vec::with_capacity(names.len());
    for (b, name) in names.iter().enumerate() {
        let vals = train.iter().flat_map(|g| g.values.iter().filter_map(move |row| row[b]));
        let (min, max) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !(min < max) {
            return Err(Error::Data(format!(
                "biomarker `{name}` has no spread on the training split (min = max)"
            )));
        }
        biomarkers.push(BiomarkerScaling {
            name: name.clone(),
            outlier: ranges[b],
            min,
            max,
        });
    }
    Ok(ScalingSpec { biomarkers })
}

fn scaled_table(part: &[&Grid], scaling: &ScalingSpec, names: &[String], labels: &[String]) -> CohortTable {
    let mut rows = Vec::new();
    for g in part {
        for (p, (vals, &label)) in g.values.iter().zip(&g.labels).enumerate() {
            rows.push(CohortRow {
                subject_id: g.id.clone(),
                visit: p as u32,
                label,
                values: vals
                    .iter()
                    .zip(&scaling.biomarkers)
                    .map(|(v, s)| v.map(|x| s.forward(x)))
                    .collect(),
                ref_volume: None,
            });
        }
    }
    CohortTable {
        biomarkers: names.to_vec(),
        labels: labels.to_vec(),
        has_ref_volume: false,
        rows,
    }
}

type Label = Option<usize>;

/// Turns a prepared table (visits are window positions `0..=steps`) into
/// one-step-ahead sequences: inputs are positions `0..T−1`, targets
/// `1..T`, and the label of each step is the label of its target visit.
pub fn window(table: &CohortTable, steps: usize) -> Result<MaskedBatch<f64>> {
    if steps == 0 {
        return Err(Error::Config("window needs at least one step".into()));
    }
    let b = table.biomarkers.len();
    let mut order: Vec<&str> = Vec::new();
    let mut grids: HashMap<&str, (Vec<Option<f64>>, Vec<Label>)> = HashMap::new();
    for row in &table.rows {
        let p = row.visit as usize;
        if p > steps {
            return Err(Error::Data(format!(
                "subject {} has visit position {p} beyond the {steps}-step window",
                row.subject_id
            )));
        }
        let entry = grids.entry(row.subject_id.as_str()).or_insert_with(|| {
            order.push(row.subject_id.as_str());
            (vec![None; (steps + 1) * b], vec![None; steps + 1])
        });
        entry.0[p * b..(p + 1) * b].copy_from_slice(&row.values);
        entry.1[p] = row.label;
    }
    let sequences = order
        .into_iter()
        .map(|id| {
            let (vals, labels) = &grids[id];
            let at = |t: usize, c: usize| vals[t * b + c];
            let inputs = Matrix::from_fn(steps, b, |t, c| at(t, c).unwrap_or(0.0));
            let input_mask = Mask::from_fn(steps, b, |t, c| at(t, c).is_some());
            let targets = Matrix::from_fn(steps, b, |t, c| at(t + 1, c).unwrap_or(0.0));
            let target_mask = Mask::from_fn(steps, b, |t, c| at(t + 1, c).is_some());
            MaskedSequence::new(id, inputs, input_mask, targets, target_mask, labels[1..].to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    MaskedBatch::new(sequences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::table::{parse_csv, LabelScheme};

    fn row(id: &str, visit: u32, label: Option<usize>, values: Vec<Option<f64>>, r: Option<f64>) -> CohortRow {
        CohortRow {
            subject_id: id.into(),
            visit,
            label,
            values,
            ref_volume: r,
        }
    }

    /// `n` subjects per class, each with 4 complete visits of one biomarker.
    fn simple_table(per_class: usize) -> CohortTable {
        let mut rows = Vec::new();
        for class in 0..3 {
            for s in 0..per_class {
                let id = format!("c{class}s{s:02}");
                for v in 0..4u32 {
                    let x = (class * 100 + s * 4 + v as usize) as f64;
                    rows.push(row(&id, v, Some(class), vec![Some(x)], None));
                }
            }
        }
        CohortTable {
            biomarkers: vec!["m".into()],
            labels: vec!["CN".into(), "MCI".into(), "AD".into()],
            has_ref_volume: false,
            rows,
        }
    }

    fn cfg4() -> PreprocessConfig {
        PreprocessConfig {
            visits: vec![0, 1, 2, 3],
            ..PreprocessConfig::default()
        }
    }

    #[test]
    fn stratified_floor_rule() {
        let prep = preprocess(&simple_table(25), &cfg4()).unwrap();
        // floor(0.1 * 25) = 2 per class for val and test
        assert_eq!(prep.val.batch.len(), 6);
        assert_eq!(prep.test.batch.len(), 6);
        assert_eq!(prep.train.batch.len(), 63);
        for split in [&prep.val, &prep.test] {
            for class in 0..3 {
                let n = split
                    .batch
                    .sequences()
                    .iter()
                    .filter(|s| s.subject_id().starts_with(&format!("c{class}")))
                    .count();
                assert_eq!(n, 2);
            }
        }
    }

    #[test]
    fn scaling_uses_training_split_and_endpoints() {
        let prep = preprocess(&simple_table(25), &cfg4()).unwrap();
        let s = &prep.scaling.biomarkers[0];
        let train_vals: Vec<f64> = prep
            .train
            .table
            .rows
            .iter()
            .filter_map(|r| r.values[0])
            .collect();
        assert!(train_vals.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(train_vals.contains(&-1.0) && train_vals.contains(&1.0));
        assert_eq!(s.forward(s.min), -1.0);
        assert_eq!(s.forward(s.max), 1.0);
    }

    #[test]
    fn reference_volume_division() {
        let r = row("a", 0, None, vec![Some(10.0)], Some(1000.0));
        assert_eq!(cell_value(&r, 0, true, None), Some(0.01));
        let missing_ref = row("a", 0, None, vec![Some(10.0)], None);
        assert_eq!(cell_value(&missing_ref, 0, true, None), None);
        assert_eq!(cell_value(&r, 0, true, Some((0.0, 0.005))), None);
        assert_eq!(cell_value(&r, 0, false, None), Some(10.0));
    }

    #[test]
    fn two_visit_subject_is_removed() {
        let mut t = simple_table(25);
        for r in t.rows.iter_mut().filter(|r| r.subject_id == "c1s03" && r.visit >= 2) {
            r.values[0] = None;
        }
        let prep = preprocess(&t, &cfg4()).unwrap();
        assert_eq!(prep.removed, vec!["c1s03".to_string()]);
        for split in SplitName::ALL {
            assert!(prep
                .split(split)
                .batch
                .sequences()
                .iter()
                .all(|s| s.subject_id() != "c1s03"));
        }
    }

    #[test]
    fn windowing_is_one_step_ahead() {
        let csv = "subject_id,visit,label,a,b\n\
                   s,0,CN,1,\n\
                   s,1,MCI,2,5\n\
                   s,2,,3,6\n";
        let t = parse_csv(csv.as_bytes(), &LabelScheme::default()).unwrap();
        let batch = window(&t, 2).unwrap();
        let seq = &batch.sequences()[0];
        assert_eq!(seq.inputs().as_slice(), &[1.0, 0.0, 2.0, 5.0]);
        assert!(!seq.input_mask().get(0, 1));
        assert_eq!(seq.targets().as_slice(), &[2.0, 5.0, 3.0, 6.0]);
        assert_eq!(seq.labels(), &[Some(1), None]);
        assert!(window(&t, 1).is_err());
    }

    #[test]
    fn empty_split_and_flat_biomarker_errors() {
        // 5 subjects per class: floor(0.5) = 0 for val
        assert!(matches!(preprocess(&simple_table(5), &cfg4()), Err(Error::Data(_))));
        let mut t = simple_table(25);
        for r in t.rows.iter_mut() {
            r.values[0] = Some(1.0);
        }
        assert!(matches!(preprocess(&t, &cfg4()), Err(Error::Data(_))));
    }

    #[test]
    fn config_errors() {
        let t = simple_table(25);
        let mut c = cfg4();
        c.biomarkers = Some(vec!["nope".into()]);
        assert!(matches!(preprocess(&t, &c), Err(Error::Config(_))));
        let mut c = cfg4();
        c.use_ref_volume = true;
        assert!(matches!(preprocess(&t, &c), Err(Error::Config(_))));
        let mut c = cfg4();
        c.outlier_ranges.insert("zzz".into(), (0.0, 1.0));
        assert!(matches!(preprocess(&t, &c), Err(Error::Config(_))));
        let mut c = cfg4();
        c.val_fraction = 0.6;
        c.test_fraction = 0.5;
        assert!(matches!(preprocess(&t, &c), Err(Error::Config(_))));
    }
}
