//! Flat `key = value` configuration shared by every command.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Lists are comma separated. Unknown and repeated keys are errors.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cohort::{LabelScheme, PreprocessConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::imputation::MissingStrategy;
use crate::lstm::{init_parameters, LstmParameters};
use crate::masked_data::{MaskedBatch, MaskedSequence};
use crate::matrix::{Mask, Matrix};
use crate::optimizer::TrainConfig;

/// Settings of the `gradcheck` command.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub inputs: usize,
    pub outputs: usize,
    pub steps: usize,
    pub subjects: usize,
    pub missing_rate: f64,
    pub tolerance: f64,
    pub fd_step: f64,
    pub seed: u64,
    /// Half-width of the uniform parameter draw.
    pub init_range: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            inputs: 3,
            outputs: 3,
            steps: 5,
            subjects: 4,
            missing_rate: 0.3,
            tolerance: 1e-5,
            fd_step: 1e-6,
            seed: 1,
            init_range: 0.5,
        }
    }
}

impl GradcheckConfig {
    /// Random parameters and a random masked batch for the check. Every
    /// input and target cell is dropped independently with probability
    /// `missing_rate`; each subject keeps at least one input.
    pub fn instance(&self) -> Result<(LstmParameters<f64>, MaskedBatch<f64>)> {
        let params = init_parameters(self.inputs, self.outputs, self.seed, self.init_range)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
        let unit = Uniform::new_inclusive(-1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
        let (t, n, m) = (self.steps, self.inputs, self.outputs);
        let sequences = (0..self.subjects)
            .map(|j| {
                let input_mask = loop {
                    let mask = Mask::from_fn(t, n, |_, _| rng.random::<f64>() >= self.missing_rate);
                    if mask.count() > 0 {
                        break mask;
                    }
                };
                let target_mask = Mask::from_fn(t, m, |_, _| rng.random::<f64>() >= self.missing_rate);
                let inputs = Matrix::from_fn(t, n, |_, _| unit.sample(&mut rng));
                let targets = Matrix::from_fn(t, m, |_, _| unit.sample(&mut rng));
                MaskedSequence::new(format!("r{j}"), inputs, input_mask, targets, target_mask, vec![None; t])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((params, MaskedBatch::new(sequences)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub labels: LabelScheme,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub strategy: MissingStrategy,
    /// Impute targets as well as inputs for the `mean`/`forward` strategies.
    pub impute_targets: bool,
    pub synth: SynthConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            labels: LabelScheme::default(),
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
            strategy: MissingStrategy::Masked,
            impute_targets: true,
            synth: SynthConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let no = i + 1;
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| config_err(no, format!("expected `key = value`, found `{line}`")))?;
            if !seen.insert(key.to_string()) {
                return Err(config_err(no, format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(|m| config_err(no, m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let p = &mut self.preprocess;
        let t = &mut self.train;
        let s = &mut self.synth;
        let g = &mut self.gradcheck;
        match key {
            "labels" => self.labels.names = names(v)?,
            "label_merge" => {
                self.labels.merge = list(v)
                    .map(|pair| {
                        pair.split_once(':')
                            .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                            .filter(|(a, b)| !a.is_empty() && !b.is_empty())
                            .ok_or_else(|| format!("label_merge entry `{pair}` must be `RAW:CLASS`"))
                    })
                    .collect::<std::result::Result<_, _>>()?
            }
            "biomarkers" => p.biomarkers = Some(names(v)?),
            "ref_volume" => p.use_ref_volume = num(v)?,
            "visits" => p.visits = visits(v)?,
            "min_visits" => p.min_visits = num(v)?,
            "split.val" => p.val_fraction = num(v)?,
            "split.test" => p.test_fraction = num(v)?,
            "split.seed" => p.split_seed = num(v)?,
            "train.epochs" => t.epochs = num(v)?,
            "train.learning_rate" => t.learning_rate = num(v)?,
            "train.momentum" => t.momentum = num(v)?,
            "train.weight_decay" => t.weight_decay = num(v)?,
            "train.init_range" => t.init_range = num(v)?,
            "train.seed" => t.init_seed = num(v)?,
            "train.validation_every" => t.validation_every = num(v)?,
            "train.missing_strategy" => self.strategy = num(v)?,
            "train.impute_targets" => self.impute_targets = num(v)?,
            "synth.subjects" => s.subjects = num(v)?,
            "synth.biomarkers" => s.biomarkers = num(v)?,
            "synth.visits" => s.visits = num(v)?,
            "synth.noise" => s.noise = num(v)?,
            "synth.missing_rate" => s.missing_rate = num(v)?,
            "synth.label_missing_rate" => s.label_missing_rate = num(v)?,
            "synth.seed" => s.seed = num(v)?,
            "synth.offset" => (s.offset_min, s.offset_max) = pair(v)?,
            "synth.rate" => (s.rate_min, s.rate_max) = pair(v)?,
            "synth.thresholds" => s.thresholds = pair(v)?,
            "synth.names" => s.biomarker_names = Some(names(v)?),
            "gradcheck.inputs" => g.inputs = num(v)?,
            "gradcheck.outputs" => g.outputs = num(v)?,
            "gradcheck.steps" => g.steps = num(v)?,
            "gradcheck.subjects" => g.subjects = num(v)?,
            "gradcheck.missing_rate" => g.missing_rate = num(v)?,
            "gradcheck.tolerance" => g.tolerance = num(v)?,
            "gradcheck.fd_step" => g.fd_step = num(v)?,
            "gradcheck.seed" => g.seed = num(v)?,
            "gradcheck.init_range" => g.init_range = num(v)?,
            _ => match key.strip_prefix("outlier.") {
                Some(name) if !name.is_empty() => {
                    let (lo, hi) = pair(v)?;
                    if !(lo <= hi) {
                        return Err(format!("outlier range for `{name}` has lo > hi"));
                    }
                    p.outlier_ranges.insert(name.to_string(), (lo, hi));
                }
                _ => return Err(format!("unknown key `{key}`")),
            },
        }
        Ok(())
    }

    /// Checks cross-field constraints that single keys cannot.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let p = &self.preprocess;
        if self.labels.names.len() < 2 {
            return bad("`labels` needs at least two classes".into());
        }
        if p.visits.len() < 2 {
            return bad("`visits` needs at least two indices".into());
        }
        if p.visits.windows(2).any(|w| w[0] >= w[1]) {
            return bad("`visits` must be strictly increasing".into());
        }
        let frac_ok = |f: f64| (0.0..1.0).contains(&f);
        if !frac_ok(p.val_fraction) || !frac_ok(p.test_fraction) || p.val_fraction + p.test_fraction >= 1.0 {
            return bad("split fractions must be in [0, 1) and sum below 1".into());
        }
        let t = &self.train;
        for (name, v) in [
            ("train.learning_rate", t.learning_rate),
            ("train.momentum", t.momentum),
            ("train.weight_decay", t.weight_decay),
            ("train.init_range", t.init_range),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("`{name}` must be a finite non-negative number"));
            }
        }
        if t.momentum >= 1.0 {
            return bad("`train.momentum` must be below 1".into());
        }
        if t.validation_every == 0 {
            return bad("`train.validation_every` must be positive".into());
        }
        let g = &self.gradcheck;
        if g.inputs == 0 || g.outputs == 0 || g.steps == 0 || g.subjects == 0 {
            return bad("gradcheck dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&g.missing_rate) {
            return bad("`gradcheck.missing_rate` must be in [0, 1)".into());
        }
        if !(g.fd_step > 0.0 && g.tolerance > 0.0) {
            return bad("`gradcheck.fd_step` and `gradcheck.tolerance` must be positive".into());
        }
        Ok(())
    }
}

fn config_err(line: usize, message: String) -> Error {
    Error::Config(format!("line {line}: {message}"))
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn names(v: &str) -> std::result::Result<Vec<String>, String> {
    let out: Vec<String> = list(v).map(String::from).collect();
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse().map_err(|e| format!("invalid value `{v}`: {e}"))
}

fn pair(v: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = list(v).collect();
    match parts[..] {
        [a, b] => {
            let (a, b): (f64, f64) = (num(a)?, num(b)?);
            if a.is_finite() && b.is_finite() {
                Ok((a, b))
            } else {
                Err(format!("non-finite value in `{v}`"))
            }
        }
        _ => Err(format!("expected two comma-separated numbers, found `{v}`")),
    }
}

/// `0,1,2,5` or an inclusive range `0-10`.
fn visits(v: &str) -> std::result::Result<Vec<u32>, String> {
    if let Some((a, b)) = v.split_once('-') {
        let (a, b): (u32, u32) = (num(a.trim())?, num(b.trim())?);
        if a > b {
            return Err(format!("empty visit range `{v}`"));
        }
        return Ok((a..=b).collect());
    }
    list(v).map(num).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_hyperparameters() {
        let c = Config::parse("").unwrap();
        assert_eq!(c.train.learning_rate, 0.1);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.weight_decay, 0.0001);
        assert_eq!(c.train.epochs, 1000);
        assert_eq!(c.strategy, MissingStrategy::Masked);
        assert_eq!(c.preprocess.visits, (0..=10).collect::<Vec<_>>());
    }

    #[test]
    fn parses_every_section() {
        let text = "
            # cohort
            labels = CN, MCI, AD
            label_merge = SMC:CN, EMCI:MCI
            biomarkers = hippo, ventricles
            ref_volume = true
            visits = 0-4
            outlier.hippo = 0.001, 0.01   # after ICV division
            split.seed = 3
            train.epochs = 12
            train.missing_strategy = forward
            synth.offset = -2, 4
            synth.names = a,b,c,d,e,f
            gradcheck.tolerance = 1e-7
        ";
        let c = Config::parse(text).unwrap();
        assert_eq!(c.labels.merge[1], ("EMCI".to_string(), "MCI".to_string()));
        assert_eq!(c.preprocess.biomarkers.as_deref().unwrap(), ["hippo", "ventricles"]);
        assert!(c.preprocess.use_ref_volume);
        assert_eq!(c.preprocess.visits, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.preprocess.outlier_ranges["hippo"], (0.001, 0.01));
        assert_eq!(c.train.epochs, 12);
        assert_eq!(c.strategy, MissingStrategy::Forward);
        assert_eq!((c.synth.offset_min, c.synth.offset_max), (-2.0, 4.0));
        assert_eq!(c.gradcheck.tolerance, 1e-7);
    }

    #[test]
    fn rejects_bad_input_with_line_numbers() {
        for (text, needle) in [
            ("train.epochs = ten", "line 1"),
            ("\nbogus = 1", "unknown key"),
            ("split.seed = 1\nsplit.seed = 2", "duplicate"),
            ("visits = 3,2", "increasing"),
            ("no equals sign", "key = value"),
            ("outlier.x = 2, 1", "lo > hi"),
            ("split.val = 0.6\nsplit.test = 0.5", "fractions"),
        ] {
            let err = Config::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
            assert!(err.to_string().contains(needle), "{text}: {err}");
        }
    }

    #[test]
    fn gradcheck_instance_is_seeded() {
        let g = GradcheckConfig::default();
        let (p1, b1) = g.instance().unwrap();
        let (p2, b2) = g.instance().unwrap();
        assert_eq!((p1, b1.clone()), (p2, b2));
        assert_eq!((b1.len(), b1.steps(), b1.input_width()), (4, 5, 3));
    }
}
