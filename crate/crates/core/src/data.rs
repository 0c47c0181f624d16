//! Feature matrices, knockoff pairs and their CSV representation.
//!
//! The CSV layout is a header row of column names preceded by optional
//! `# key=value` metadata lines. Two keys are understood:
//!
//! - `kinds`: one character per column, `c` for continuous and `b` for binary.
//!   When absent, a column whose values are all 0 or 1 is read as binary.
//! - anything else is kept verbatim as provenance.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Binary,
}

impl ColumnKind {
    fn code(self) -> char {
        match self {
            ColumnKind::Continuous => 'c',
            ColumnKind::Binary => 'b',
        }
    }

    fn from_code(c: char) -> Option<Self> {
        match c {
            'c' => Some(ColumnKind::Continuous),
            'b' => Some(ColumnKind::Binary),
            _ => None,
        }
    }
}

/// An `n x p` sample matrix, one row per sample, with per-column kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Array2<f64>,
    kinds: Vec<ColumnKind>,
    names: Vec<String>,
}

impl DataMatrix {
    pub fn new(values: Array2<f64>, kinds: Vec<ColumnKind>) -> Result<Self> {
        let p = values.ncols();
        let names = (1..=p).map(|j| format!("X{j}")).collect();
        Self::with_names(values, kinds, names)
    }

    pub fn with_names(values: Array2<f64>, kinds: Vec<ColumnKind>, names: Vec<String>) -> Result<Self> {
        crate::error::check_dim("column kinds", values.ncols(), kinds.len())?;
        crate::error::check_dim("column names", values.ncols(), names.len())?;
        for (j, kind) in kinds.iter().enumerate() {
            let column = values.column(j);
            if column.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("column {j} contains non-finite values")));
            }
            if *kind == ColumnKind::Binary && column.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Config(format!("binary column {j} has a value outside {{0, 1}}")));
            }
        }
        Ok(Self { values, kinds, names })
    }

    pub fn continuous(values: Array2<f64>) -> Result<Self> {
        let kinds = vec![ColumnKind::Continuous; values.ncols()];
        Self::new(values, kinds)
    }

    pub fn binary(values: Array2<f64>) -> Result<Self> {
        let kinds = vec![ColumnKind::Binary; values.ncols()];
        Self::new(values, kinds)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_all_binary(&self) -> bool {
        self.kinds.iter().all(|k| *k == ColumnKind::Binary)
    }

    pub fn is_all_continuous(&self) -> bool {
        self.kinds.iter().all(|k| *k == ColumnKind::Continuous)
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> DataMatrix {
        DataMatrix {
            values: self.values.select(Axis(0), rows),
            kinds: self.kinds.clone(),
            names: self.names.clone(),
        }
    }

    /// Keeps the listed columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> DataMatrix {
        DataMatrix {
            values: self.values.select(Axis(1), cols),
            kinds: cols.iter().map(|&j| self.kinds[j]).collect(),
            names: cols.iter().map(|&j| self.names[j].clone()).collect(),
        }
    }

    pub fn column_means(&self) -> Array1<f64> {
        self.values
            .mean_axis(Axis(0))
            .unwrap_or_else(|| Array1::zeros(self.ncols()))
    }

    pub fn write_csv<W: Write>(&self, mut out: W, provenance: &Provenance) -> Result<()> {
        for (key, value) in &provenance.entries {
            writeln!(out, "# {key}={value}")?;
        }
        let kinds: String = self.kinds.iter().map(|k| k.code()).collect();
        writeln!(out, "# kinds={kinds}")?;
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(&self.names)?;
        for row in self.values.rows() {
            writer.write_record(row.iter().map(|v| format_value(*v)))?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), provenance)
    }

    pub fn read_csv<R: Read>(input: R, origin: &Path) -> Result<(DataMatrix, Provenance)> {
        let mut reader = BufReader::new(input);
        let mut provenance = Provenance::default();
        let mut kinds_code: Option<String> = None;
        let mut line_no = 0;
        let mut header = String::new();
        loop {
            header.clear();
            if reader.read_line(&mut header)? == 0 {
                return Err(Error::Empty(format!("{} has no header row", origin.display())));
            }
            line_no += 1;
            let trimmed = header.trim();
            if let Some(meta) = trimmed.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    if k.trim() == "kinds" {
                        kinds_code = Some(v.trim().to_string());
                    } else {
                        provenance.push(k.trim(), v.trim());
                    }
                }
                continue;
            }
            if !trimmed.is_empty() {
                break;
            }
        }
        let names: Vec<String> = header.trim().split(',').map(|s| s.trim().to_string()).collect();
        let p = names.len();
        let mut flat = Vec::new();
        let mut rows = 0;
        let mut csv_reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(reader);
        for (i, record) in csv_reader.records().enumerate() {
            let line = line_no + i + 1;
            let record = record?;
            if record.len() != p {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line,
                    message: format!("expected {p} fields, found {}", record.len()),
                });
            }
            for field in record.iter() {
                let value: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    path: origin.to_path_buf(),
                    line,
                    message: format!("`{field}` is not a number"),
                })?;
                flat.push(value);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::Empty(format!("{} has no data rows", origin.display())));
        }
        let values =
            Array2::from_shape_vec((rows, p), flat).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        let kinds = match kinds_code {
            Some(code) => {
                let kinds: Option<Vec<ColumnKind>> = code.chars().map(ColumnKind::from_code).collect();
                let kinds = kinds.ok_or_else(|| Error::Parse {
                    path: origin.to_path_buf(),
                    line: 1,
                    message: format!("bad kinds code `{code}`"),
                })?;
                crate::error::check_dim("kinds metadata", p, kinds.len())?;
                kinds
            }
            None => values
                .columns()
                .into_iter()
                .map(|c| {
                    if c.iter().all(|&v| v == 0.0 || v == 1.0) {
                        ColumnKind::Binary
                    } else {
                        ColumnKind::Continuous
                    }
                })
                .collect(),
        };
        Ok((DataMatrix::with_names(values, kinds, names)?, provenance))
    }

    pub fn read_csv_file(path: &Path) -> Result<(DataMatrix, Provenance)> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, path)
    }
}

/// Shortest round-trip representation; integers print without a fraction.
pub(crate) fn format_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Ordered `key=value` pairs written above a CSV header.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub entries: BTreeMap<String, String>,
}

impl Provenance {
    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) -> &mut Self {
        self.entries.insert(key.into(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorTag {
    pub name: String,
    pub seed: u64,
}

/// An observed matrix together with a knockoff copy of the same shape.
#[derive(Debug, Clone)]
pub struct KnockoffPair {
    pub original: DataMatrix,
    pub knockoff: DataMatrix,
    pub generator: GeneratorTag,
}

impl KnockoffPair {
    pub fn new(original: DataMatrix, knockoff: Array2<f64>, generator: GeneratorTag) -> Result<Self> {
        crate::error::check_dim("knockoff rows", original.nrows(), knockoff.nrows())?;
        crate::error::check_dim("knockoff columns", original.ncols(), knockoff.ncols())?;
        let kinds = original.kinds().to_vec();
        let names = original.names().iter().map(|n| format!("{n}_knockoff")).collect();
        // Knockoffs of binary columns may legitimately be continuous (e.g. decoder means).
        let kinds = kinds
            .into_iter()
            .zip(knockoff.columns())
            .map(|(k, c)| {
                if k == ColumnKind::Binary && c.iter().all(|&v| v == 0.0 || v == 1.0) {
                    ColumnKind::Binary
                } else {
                    ColumnKind::Continuous
                }
            })
            .collect();
        let knockoff = DataMatrix::with_names(knockoff, kinds, names)?;
        Ok(Self {
            original,
            knockoff,
            generator,
        })
    }

    pub fn p(&self) -> usize {
        self.original.ncols()
    }

    /// The `n x 2p` design `[X, X~]`: column `j` is the original, `p + j` its knockoff.
    pub fn augmented_design(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(1), &[self.original.values(), self.knockoff.values()])
            .expect("shapes checked at construction")
    }

    pub fn provenance(&self, config_hash: Option<&str>) -> Provenance {
        let mut prov = Provenance::default();
        prov.push("generator", &self.generator.name);
        prov.push("seed", self.generator.seed);
        if let Some(hash) = config_hash {
            prov.push("config_hash", hash);
        }
        prov
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_round_trip_keeps_kinds_and_provenance() {
        let m = DataMatrix::new(
            array![[0.25, 1.0], [1.5, 0.0]],
            vec![ColumnKind::Continuous, ColumnKind::Binary],
        )
        .unwrap();
        let mut prov = Provenance::default();
        prov.push("generator", "vae").push("seed", 3);
        let mut buf = Vec::new();
        m.write_csv(&mut buf, &prov).unwrap();
        let (back, prov_back) = DataMatrix::read_csv(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(prov_back.get("generator"), Some("vae"));
    }

    #[test]
    fn kinds_inferred_without_metadata() {
        let text = "a,b\n0,0.5\n1,2\n";
        let (m, _) = DataMatrix::read_csv(text.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(m.kinds(), &[ColumnKind::Binary, ColumnKind::Continuous]);
    }

    #[test]
    fn ragged_row_reports_line() {
        let text = "a,b\n0,1\n1\n";
        let err = DataMatrix::read_csv(text.as_bytes(), Path::new("x.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn binary_column_rejects_other_values() {
        assert!(DataMatrix::binary(array![[0.5]]).is_err());
    }
}
