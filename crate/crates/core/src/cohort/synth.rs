//! Synthetic longitudinal cohort with sigmoid biomarker trajectories.
//!
//! Each subject follows a latent progression `p(v) = offset + rate·v` over
//! visits `v`. Biomarker `b` reads `base_b + amplitude_b · σ(slope_b ·
//! (p − inflection_b))` plus Gaussian noise with standard deviation
//! `noise · |amplitude_b|`. Labels come from thresholding `p` into three
//! classes, and biomarker cells go missing completely at random.

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::table::{CohortRow, CohortTable, LabelScheme};
use crate::error::{Error, Result};
use crate::lstm::sigmoid;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub subjects: usize,
    pub biomarkers: usize,
    pub visits: usize,
    /// Noise standard deviation relative to each curve's amplitude.
    pub noise: f64,
    pub missing_rate: f64,
    pub label_missing_rate: f64,
    pub seed: u64,
    /// Subject offsets are drawn from `U[offset_min, offset_max]`.
    pub offset_min: f64,
    pub offset_max: f64,
    /// Progression per visit is drawn from `U[rate_min, rate_max]`.
    pub rate_min: f64,
    pub rate_max: f64,
    /// Progression cut points between the first/second and second/third
    /// classes.
    pub thresholds: (f64, f64),
    /// Column names; defaults to `biomarker_1..`.
    pub biomarker_names: Option<Vec<String>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 200,
            biomarkers: 6,
            visits: 11,
            noise: 0.05,
            missing_rate: 0.3,
            label_missing_rate: 0.0,
            seed: 42,
            offset_min: -6.0,
            offset_max: 14.0,
            rate_min: 0.5,
            rate_max: 1.5,
            thresholds: (3.0, 10.0),
            biomarker_names: None,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.subjects == 0 || self.visits == 0 || self.biomarkers == 0 {
            return bad("synthetic cohort needs at least one subject, visit and biomarker".into());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing rate must be in [0, 1), got {}", self.missing_rate));
        }
        if !(0.0..=1.0).contains(&self.label_missing_rate) {
            return bad(format!("label missing rate must be in [0, 1], got {}", self.label_missing_rate));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        if !(self.offset_min <= self.offset_max && self.rate_min <= self.rate_max) {
            return bad("offset and rate ranges must satisfy min <= max".into());
        }
        if !(self.thresholds.0 <= self.thresholds.1) {
            return bad("class thresholds must be ordered".into());
        }
        if let Some(names) = &self.biomarker_names {
            if names.len() != self.biomarkers {
                return bad(format!(
                    "{} biomarker names for {} biomarkers",
                    names.len(),
                    self.biomarkers
                ));
            }
        }
        Ok(())
    }
}

/// One biomarker's noise-free trajectory over latent progression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiomarkerCurve {
    pub base: f64,
    pub amplitude: f64,
    pub slope: f64,
    pub inflection: f64,
}

impl BiomarkerCurve {
    pub fn value(&self, progression: f64) -> f64 {
        self.base + self.amplitude * sigmoid(self.slope * (progression - self.inflection))
    }
}

fn uniform(lo: f64, hi: f64) -> Uniform<f64> {
    Uniform::new_inclusive(lo, hi).expect("validated range")
}

/// Draws the per-biomarker curves; the first draws of the seeded stream.
pub fn draw_curves(rng: &mut impl Rng, count: usize) -> Vec<BiomarkerCurve> {
    (0..count)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            BiomarkerCurve {
                base: uniform(1.0, 3.0).sample(rng),
                amplitude: sign * uniform(0.5, 1.0).sample(rng),
                slope: uniform(0.25, 0.6).sample(rng),
                inflection: uniform(0.0, 14.0).sample(rng),
            }
        })
        .collect()
}

/// Generates a cohort table; deterministic for a fixed config. Every
/// subject has one row per visit `0..visits`, and the same random draws are
/// consumed whatever the missing rates, so changing them only changes
/// which cells are blank.
pub fn synthesize(config: &SynthConfig, scheme: &LabelScheme) -> Result<CohortTable> {
    config.validate()?;
    if scheme.names.len() < 3 {
        return Err(Error::Config("synthetic cohort needs three class names".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let curves = draw_curves(&mut rng, config.biomarkers);
    let offsets = uniform(config.offset_min, config.offset_max);
    let rates = uniform(config.rate_min, config.rate_max);
    let width = config.subjects.to_string().len();

    let mut rows = Vec::with_capacity(config.subjects * config.visits);
    for s in 0..config.subjects {
        let id = format!("S{:0width$}", s + 1);
        let offset = offsets.sample(&mut rng);
        let rate = rates.sample(&mut rng);
        for v in 0..config.visits {
            let p = offset + rate * v as f64;
            let values = curves
                .iter()
                .map(|c| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    let drop = rng.random::<f64>() < config.missing_rate;
                    let x = c.value(p) + config.noise * c.amplitude.abs() * eps;
                    (!drop).then_some(x)
                })
                .collect();
            let class = if p < config.thresholds.0 {
                0
            } else if p < config.thresholds.1 {
                1
            } else {
                2
            };
            let unlabeled = rng.random::<f64>() < config.label_missing_rate;
            rows.push(CohortRow {
                subject_id: id.clone(),
                visit: v as u32,
                label: (!unlabeled).then_some(class),
                values,
                ref_volume: None,
            });
        }
    }
    let biomarkers = config
        .biomarker_names
        .clone()
        .unwrap_or_else(|| (1..=config.biomarkers).map(|i| format!("biomarker_{i}")).collect());
    Ok(CohortTable {
        biomarkers,
        labels: scheme.names.clone(),
        has_ref_volume: false,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_missing_rate_is_fully_observed() {
        let c = SynthConfig {
            subjects: 20,
            missing_rate: 0.0,
            ..SynthConfig::default()
        };
        let t = synthesize(&c, &LabelScheme::default()).unwrap();
        assert_eq!(t.rows.len(), 20 * 11);
        assert_eq!(t.missing_fraction(), 0.0);
        assert!(t.rows.iter().all(|r| r.label.is_some()));
    }

    #[test]
    fn missing_fraction_concentrates() {
        let t = synthesize(&SynthConfig::default(), &LabelScheme::default()).unwrap();
        // 13200 Bernoulli(0.3) cells: sd ≈ 0.004
        assert!((t.missing_fraction() - 0.3).abs() <= 0.02, "{}", t.missing_fraction());
    }

    #[test]
    fn deterministic_and_missingness_only_blanks_cells() {
        let scheme = LabelScheme::default();
        let a = synthesize(&SynthConfig::default(), &scheme).unwrap();
        assert_eq!(a, synthesize(&SynthConfig::default(), &scheme).unwrap());
        let full = synthesize(&SynthConfig { missing_rate: 0.0, ..SynthConfig::default() }, &scheme).unwrap();
        for (r, f) in a.rows.iter().zip(&full.rows) {
            for (x, y) in r.values.iter().zip(&f.values) {
                if let Some(x) = x {
                    assert_eq!(Some(*x), *y);
                }
            }
        }
    }

    #[test]
    fn equal_offsets_equal_trajectories_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let curves = draw_curves(&mut rng, 4);
        let traj = |offset: f64| -> Vec<f64> {
            (0..11)
                .flat_map(|v| curves.iter().map(move |c| c.value(offset + v as f64)))
                .collect()
        };
        assert_eq!(traj(1.25), traj(1.25));
        for c in &curves {
            let (a, b) = (c.value(-50.0), c.value(50.0));
            assert!(if c.amplitude > 0.0 { a < b } else { a > b });
        }
    }

    #[test]
    fn labels_never_regress() {
        let t = synthesize(&SynthConfig::default(), &LabelScheme::default()).unwrap();
        for pair in t.rows.windows(2) {
            if pair[0].subject_id == pair[1].subject_id {
                assert!(pair[1].label >= pair[0].label);
            }
        }
        let baseline: Vec<usize> = t.rows.iter().filter(|r| r.visit == 0).filter_map(|r| r.label).collect();
        for class in 0..3 {
            assert!(baseline.contains(&class));
        }
    }

    #[test]
    fn invalid_configs() {
        let scheme = LabelScheme::default();
        for c in [
            SynthConfig { missing_rate: 1.0, ..SynthConfig::default() },
            SynthConfig { subjects: 0, ..SynthConfig::default() },
            SynthConfig { visits: 0, ..SynthConfig::default() },
            SynthConfig { noise: -1.0, ..SynthConfig::default() },
        ] {
            assert!(matches!(synthesize(&c, &scheme), Err(Error::Config(_))));
        }
    }
}
