use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::eval::Affine;

/// Per-biomarker outlier range and training-split extrema.
#[derive(Clone, Debug, PartialEq)]
pub struct BiomarkerScaling {
    pub name: String,
    pub outlier: Option<(f64, f64)>,
    pub min: f64,
    pub max: f64,
}

impl BiomarkerScaling {
    /// Maps `[min, max]` onto `[-1, 1]`. Values outside are not clamped.
    #[inline]
    pub fn forward(&self, x: f64) -> f64 {
        2.0 * (x - self.min) / (self.max - self.min) - 1.0
    }

    pub fn inverse_affine(&self) -> Affine<f64> {
        Affine {
            scale: (self.max - self.min) / 2.0,
            offset: (self.max + self.min) / 2.0,
        }
    }

    #[inline]
    pub fn inverse(&self, y: f64) -> f64 {
        self.inverse_affine().apply(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingSpec {
    pub biomarkers: Vec<BiomarkerScaling>,
}

const MAGIC: &str = "robust-lstm scaling";
const VERSION: &str = "format_version 1";
const HEADER: &str = "name,lo,hi,min,max";

impl ScalingSpec {
    pub fn inverse_affines(&self) -> Vec<Affine<f64>> {
        self.biomarkers.iter().map(BiomarkerScaling::inverse_affine).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.biomarkers.iter().map(|b| b.name.clone()).collect()
    }

    /// ```text
    /// robust-lstm scaling
    /// format_version 1
    /// name,lo,hi,min,max
    /// <name>,<lo or empty>,<hi or empty>,<min>,<max>
    /// ```
    pub fn write(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{MAGIC}")?;
        writeln!(out, "{VERSION}")?;
        writeln!(out, "{HEADER}")?;
        for b in &self.biomarkers {
            let (lo, hi) = b
                .outlier
                .map_or((String::new(), String::new()), |(l, h)| (format!("{l:e}"), format!("{h:e}")));
            writeln!(out, "{},{lo},{hi},{:e},{:e}", b.name, b.min, b.max)?;
        }
        Ok(())
    }

    pub fn read(input: impl BufRead) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse { line, message };
        let lines: Vec<String> = input
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| perr(0, e.to_string()))?;
        let expect = [MAGIC, VERSION, HEADER];
        for (i, want) in expect.iter().enumerate() {
            if lines.get(i).map(String::as_str) != Some(want) {
                return Err(perr(i + 1, format!("expected `{want}`")));
            }
        }
        let num = |no: usize, s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(no, format!("malformed number `{s}`")))
        };
        let mut biomarkers = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(expect.len()) {
            let no = i + 1;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 || f[0].is_empty() {
                return Err(perr(no, "expected `name,lo,hi,min,max`".into()));
            }
            let outlier = match (f[1], f[2]) {
                ("", "") => None,
                (lo, hi) => Some((num(no, lo)?, num(no, hi)?)),
            };
            let (min, max) = (num(no, f[3])?, num(no, f[4])?);
            if !(min < max) {
                return Err(perr(no, format!("min {min} must be below max {max}")));
            }
            biomarkers.push(BiomarkerScaling {
                name: f[0].to_string(),
                outlier,
                min,
                max,
            });
        }
        Ok(ScalingSpec { biomarkers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ScalingSpec {
        ScalingSpec {
            biomarkers: vec![
                BiomarkerScaling {
                    name: "a".into(),
                    outlier: None,
                    min: 0.0,
                    max: 4.0,
                },
                BiomarkerScaling {
                    name: "b".into(),
                    outlier: Some((0.001, 0.05)),
                    min: 0.002_345_678_9,
                    max: 0.041_1,
                },
            ],
        }
    }

    #[test]
    fn endpoints() {
        let a = &sample().biomarkers[0];
        assert_eq!(a.forward(0.0), -1.0);
        assert_eq!(a.forward(4.0), 1.0);
        assert_eq!(a.forward(2.0), 0.0);
        assert_eq!(a.inverse(-1.0), 0.0);
        assert_eq!(a.inverse(1.0), 4.0);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let s = sample();
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        assert_eq!(ScalingSpec::read(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(ScalingSpec::read("nope\n".as_bytes()).is_err());
        let bad = format!("{MAGIC}\n{VERSION}\n{HEADER}\nx,,,2,1\n");
        assert!(ScalingSpec::read(bad.as_bytes()).is_err());
    }
}
