use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Class names plus a map folding raw labels onto them
/// (e.g. `EMCI → MCI`, `MCI-to-AD → AD`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelScheme {
    pub names: Vec<String>,
    pub merge: Vec<(String, String)>,
}

impl Default for LabelScheme {
    fn default() -> Self {
        LabelScheme {
            names: vec!["CN".into(), "MCI".into(), "AD".into()],
            merge: Vec::new(),
        }
    }
}

impl LabelScheme {
    /// Maps a raw label field to a class index; empty means unlabeled.
    pub fn resolve(&self, raw: &str) -> std::result::Result<Option<usize>, String> {
        if raw.is_empty() {
            return Ok(None);
        }
        let canonical = self
            .merge
            .iter()
            .find(|(from, _)| from == raw)
            .map_or(raw, |(_, to)| to.as_str());
        self.names
            .iter()
            .position(|n| n == canonical)
            .map(Some)
            .ok_or_else(|| format!("unknown label `{raw}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortRow {
    pub subject_id: String,
    pub visit: u32,
    /// Index into [`CohortTable::labels`].
    pub label: Option<usize>,
    pub values: Vec<Option<f64>>,
    pub ref_volume: Option<f64>,
}

/// Rows in file order. `(subject, visit)` pairs are unique and visits
/// increase strictly within each subject.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortTable {
    pub biomarkers: Vec<String>,
    pub labels: Vec<String>,
    pub has_ref_volume: bool,
    pub rows: Vec<CohortRow>,
}

impl CohortTable {
    /// Subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.subject_id.as_str()))
            .map(|r| r.subject_id.as_str())
            .collect()
    }

    /// Fraction of biomarker cells that are missing.
    pub fn missing_fraction(&self) -> f64 {
        let total = self.rows.len() * self.biomarkers.len();
        let missing: usize = self
            .rows
            .iter()
            .map(|r| r.values.iter().filter(|v| v.is_none()).count())
            .sum();
        missing as f64 / total.max(1) as f64
    }
}

pub fn load_csv(path: impl AsRef<Path>, scheme: &LabelScheme) -> Result<CohortTable> {
    let file = File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_csv(BufReader::new(file), scheme)
}

/// Parses the cohort CSV grammar: header
/// `subject_id,visit,label,<biomarker>...[,ref_volume]`, comma delimited,
/// no quoting, empty field = missing.
pub fn parse_csv(input: impl BufRead, scheme: &LabelScheme) -> Result<CohortTable> {
    let perr = |line: usize, message: String| Error::Parse { line, message };
    let mut lines = input.lines();
    let header = match lines.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(perr(1, e.to_string())),
        None => return Err(perr(1, "empty file".into())),
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..3] != ["subject_id", "visit", "label"] {
        return Err(perr(
            1,
            "header must start with `subject_id,visit,label` and name at least one biomarker".into(),
        ));
    }
    let has_ref_volume = cols.last() == Some(&"ref_volume");
    let biomarkers: Vec<String> = cols[3..cols.len() - usize::from(has_ref_volume)]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if biomarkers.is_empty() || biomarkers.iter().any(|b| b.is_empty()) {
        return Err(perr(1, "empty biomarker column name".into()));
    }
    let width = cols.len();

    let mut rows = Vec::new();
    let mut seen: HashSet<(String, u32)> = HashSet::new();
    let mut last_visit: HashMap<String, u32> = HashMap::new();
    for (i, line) in lines.enumerate() {
        let no = i + 2;
        let line = line.map_err(|e| perr(no, e.to_string()))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(perr(no, format!("expected {width} fields, found {}", fields.len())));
        }
        let subject_id = fields[0].to_string();
        if subject_id.is_empty() {
            return Err(perr(no, "empty subject_id".into()));
        }
        let visit: u32 = fields[1]
            .parse()
            .map_err(|_| perr(no, format!("malformed visit index `{}`", fields[1])))?;
        let label = scheme.resolve(fields[2]).map_err(|m| perr(no, m))?;
        let number = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(perr(no, format!("malformed number `{s}`"))),
            }
        };
        let values = fields[3..3 + biomarkers.len()]
            .iter()
            .map(|s| number(s))
            .collect::<Result<Vec<_>>>()?;
        let ref_volume = if has_ref_volume {
            number(fields[width - 1])?
        } else {
            None
        };
        if !seen.insert((subject_id.clone(), visit)) {
            return Err(perr(no, format!("duplicate visit {visit} for subject {subject_id}")));
        }
        if let Some(&prev) = last_visit.get(&subject_id) {
            if visit <= prev {
                return Err(perr(
                    no,
                    format!("visit {visit} of subject {subject_id} follows visit {prev}"),
                ));
            }
        }
        last_visit.insert(subject_id.clone(), visit);
        rows.push(CohortRow {
            subject_id,
            visit,
            label,
            values,
            ref_volume,
        });
    }
    Ok(CohortTable {
        biomarkers,
        labels: scheme.names.clone(),
        has_ref_volume,
        rows,
    })
}

/// Writes the table in the same grammar [`parse_csv`] reads. Numbers use
/// the shortest representation that parses back to the same bits.
pub fn write_csv(table: &CohortTable, mut out: impl Write) -> std::io::Result<()> {
    let mut header = vec!["subject_id".to_string(), "visit".into(), "label".into()];
    header.extend(table.biomarkers.iter().cloned());
    if table.has_ref_volume {
        header.push("ref_volume".into());
    }
    writeln!(out, "{}", header.join(","))?;
    let fmt = |v: &Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in &table.rows {
        let mut fields = vec![
            r.subject_id.clone(),
            r.visit.to_string(),
            r.label.map_or_else(String::new, |l| table.labels[l].clone()),
        ];
        fields.extend(r.values.iter().map(fmt));
        if table.has_ref_volume {
            fields.push(fmt(&r.ref_volume));
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "subject_id,visit,label,hippo,ventricles,ref_volume\n\
                          s1,0,CN,3.5,,1500\n\
                          s1,1,EMCI,3.4,20.5,1500\n\
                          s2,0,,3.1,22,\n";

    fn scheme() -> LabelScheme {
        LabelScheme {
            merge: vec![("EMCI".into(), "MCI".into()), ("MCI-to-AD".into(), "AD".into())],
            ..LabelScheme::default()
        }
    }

    #[test]
    fn parses_missing_labels_and_ref_volume() {
        let t = parse_csv(SAMPLE.as_bytes(), &scheme()).unwrap();
        assert_eq!(t.biomarkers, vec!["hippo", "ventricles"]);
        assert!(t.has_ref_volume);
        assert_eq!(t.rows[0].values, vec![Some(3.5), None]);
        assert_eq!(t.rows[1].label, Some(1));
        assert_eq!(t.rows[2].label, None);
        assert_eq!(t.rows[2].ref_volume, None);
        assert_eq!(t.subjects(), vec!["s1", "s2"]);
    }

    #[test]
    fn duplicate_visit_names_line() {
        let csv = "subject_id,visit,label,a\ns1,0,,1\ns1,0,,2\n";
        match parse_csv(csv.as_bytes(), &scheme()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_number_and_unknown_label() {
        let bad_num = "subject_id,visit,label,a\ns1,0,,1.2.3\n";
        assert!(matches!(parse_csv(bad_num.as_bytes(), &scheme()), Err(Error::Parse { line: 2, .. })));
        let bad_label = "subject_id,visit,label,a\ns1,0,XYZ,1\n";
        assert!(matches!(parse_csv(bad_label.as_bytes(), &scheme()), Err(Error::Parse { line: 2, .. })));
        let nan = "subject_id,visit,label,a\ns1,0,,NaN\n";
        assert!(parse_csv(nan.as_bytes(), &scheme()).is_err());
    }

    #[test]
    fn out_of_order_visits_rejected() {
        let csv = "subject_id,visit,label,a\ns1,2,,1\ns1,1,,2\n";
        assert!(matches!(parse_csv(csv.as_bytes(), &scheme()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn bad_header() {
        assert!(parse_csv("id,visit,label,a\n".as_bytes(), &scheme()).is_err());
        assert!(parse_csv("subject_id,visit,label\n".as_bytes(), &scheme()).is_err());
    }

    #[test]
    fn write_then_parse_is_identity() {
        let t = parse_csv(SAMPLE.as_bytes(), &scheme()).unwrap();
        let mut buf = Vec::new();
        write_csv(&t, &mut buf).unwrap();
        let back = parse_csv(buf.as_slice(), &scheme()).unwrap();
        assert_eq!(back, t);
    }
}
