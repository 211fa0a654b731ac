//! Longitudinal cohort data: CSV ingestion, preprocessing into masked
//! sequence batches, and a synthetic cohort generator.

mod preprocess;
mod scaling;
mod synth;
mod table;

pub use preprocess::{preprocess, window, PreparedCohort, PreprocessConfig, PreparedSplit, SplitName};
pub use scaling::{BiomarkerScaling, ScalingSpec};
pub use synth::{synthesize, BiomarkerCurve, SynthConfig};
pub use table::{load_csv, parse_csv, write_csv, CohortRow, CohortTable, LabelScheme};
