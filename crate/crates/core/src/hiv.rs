//! HIV-1 protease-inhibitor resistance data: loading, occurrence filters,
//! per-drug views and overlap with a treatment-selected mutation list.
//!
//! A snapshot is a directory with three tab-separated files:
//!
//! - `mutations.tsv`: header `patient<TAB>label...`, then one row per patient
//!   with 0/1 indicators. Labels are a position followed by a residue, e.g.
//!   `10F` or `P10F`.
//! - `susceptibility.tsv`: header `patient<TAB>drug...`, fold-change values,
//!   `NA` or an empty field for missing. Patients absent from this file are
//!   missing for every drug.
//! - `tsm.txt`: one position per line (extra tab-separated fields are
//!   ignored).
//!
//! Lines starting with `#` are comments everywhere. TSM overlap is matched by
//! position only, so a selected `54V` counts when the list has 54 even if the
//! listed residue there is different.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};

use crate::data::{DataMatrix, Provenance};
use crate::error::{Error, Result};

pub const GLOBAL_MIN_OCCURRENCE: usize = 4;
pub const DRUG_MIN_OCCURRENCE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotPaths {
    pub mutations: PathBuf,
    pub susceptibility: PathBuf,
    pub tsm: PathBuf,
}

impl SnapshotPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            mutations: dir.join("mutations.tsv"),
            susceptibility: dir.join("susceptibility.tsv"),
            tsm: dir.join("tsm.txt"),
        }
    }

    pub fn exists(&self) -> bool {
        self.mutations.is_file() && self.susceptibility.is_file() && self.tsm.is_file()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutationDataset {
    patients: Vec<String>,
    mutations: Vec<String>,
    matrix: Array2<f64>,
    drugs: Vec<String>,
    /// `susceptibility[d][i]` for drug `d` and patient `i`.
    susceptibility: Vec<Vec<Option<f64>>>,
    tsm_positions: BTreeSet<u32>,
}

#[derive(Debug, Clone)]
pub struct DrugView {
    pub drug: String,
    pub design: DataMatrix,
    pub response: Array1<f64>,
    pub patients: Vec<String>,
    /// Positions of the kept rows and columns in the full dataset.
    pub rows: Vec<usize>,
    pub columns: Vec<usize>,
    pub dropped_nonpositive: usize,
}

impl DrugView {
    pub fn kept_mutations(&self) -> &[String] {
        self.design.names()
    }

    /// Design as a feature CSV and the log-susceptibility as a one-column CSV.
    pub fn write_csv(&self, design: &Path, response: &Path) -> Result<()> {
        let mut prov = Provenance::default();
        prov.push("drug", &self.drug);
        self.design.write_csv_file(design, &prov)?;
        let mut w = csv::Writer::from_path(response)?;
        w.write_record(["patient", "y"])?;
        for (id, y) in self.patients.iter().zip(&self.response) {
            w.write_record([id.clone(), y.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TsmOverlap {
    pub matched: usize,
    pub selected: usize,
}

impl std::fmt::Display for TsmOverlap {
    /// `matched/selected`, or a bare `0` when nothing was selected.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.selected == 0 {
            f.write_str("0")
        } else {
            write!(f, "{}/{}", self.matched, self.selected)
        }
    }
}

/// Position of a mutation label: the first run of digits (`P54V` and `54V` both give 54).
pub fn mutation_position(label: &str) -> Option<u32> {
    let start = label.find(|c: char| c.is_ascii_digit())?;
    let digits: String = label[start..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

pub fn tsm_overlap<S: AsRef<str>>(selected: &[S], tsm_positions: &BTreeSet<u32>) -> TsmOverlap {
    let matched = selected
        .iter()
        .filter(|label| mutation_position(label.as_ref()).is_some_and(|pos| tsm_positions.contains(&pos)))
        .count();
    TsmOverlap {
        matched,
        selected: selected.len(),
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn tsv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(input)
}

fn record_line(record: &csv::StringRecord) -> usize {
    record.position().map_or(0, |p| p.line() as usize)
}

struct Table {
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

/// Reads a header plus rows, requiring every row to match the header width.
fn read_table<R: Read>(input: R, path: &Path) -> Result<Table> {
    let mut reader = tsv_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r?,
        None => return Err(Error::Empty(format!("{} is empty", path.display()))),
    };
    let header: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    let mut seen = BTreeSet::new();
    for label in &header[1..] {
        if label.is_empty() {
            return Err(parse_error(path, 1, "empty column label"));
        }
        if !seen.insert(label.as_str()) {
            return Err(Error::DuplicateLabel(label.clone()));
        }
    }
    let mut rows = Vec::new();
    for record in records {
        let record = record?;
        let line = record_line(&record);
        if record.len() != header.len() {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        rows.push((line, record.iter().map(|s| s.trim().to_string()).collect()));
    }
    if rows.is_empty() {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }
    Ok(Table { header, rows })
}

struct RawMatrix {
    patients: Vec<String>,
    labels: Vec<String>,
    matrix: Array2<f64>,
}

fn read_mutations<R: Read>(input: R, path: &Path) -> Result<RawMatrix> {
    let table = read_table(input, path)?;
    let labels: Vec<String> = table.header[1..].to_vec();
    for label in &labels {
        if mutation_position(label).is_none() {
            return Err(parse_error(path, 1, format!("label `{label}` has no position")));
        }
    }
    let mut matrix = Array2::zeros((table.rows.len(), labels.len()));
    let mut patients = Vec::with_capacity(table.rows.len());
    let mut seen = BTreeSet::new();
    for (i, (line, fields)) in table.rows.into_iter().enumerate() {
        let id = fields[0].clone();
        if id.is_empty() {
            return Err(parse_error(path, line, "empty patient id"));
        }
        if !seen.insert(id.clone()) {
            return Err(parse_error(path, line, format!("patient `{id}` appears twice")));
        }
        for (j, field) in fields[1..].iter().enumerate() {
            matrix[[i, j]] = match field.as_str() {
                "0" => 0.0,
                "1" => 1.0,
                other => {
                    return Err(parse_error(
                        path,
                        line,
                        format!("indicator for `{}` must be 0 or 1, found `{other}`", labels[j]),
                    ))
                }
            };
        }
        patients.push(id);
    }
    Ok(RawMatrix {
        patients,
        labels,
        matrix,
    })
}

/// Drug names, then one column of values per drug indexed by patient.
type DrugColumns = (Vec<String>, Vec<Vec<Option<f64>>>);

fn read_susceptibility<R: Read>(input: R, path: &Path, patients: &[String]) -> Result<DrugColumns> {
    let table = read_table(input, path)?;
    let drugs: Vec<String> = table.header[1..].to_vec();
    let index: HashMap<&str, usize> = patients.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let mut values = vec![vec![None; patients.len()]; drugs.len()];
    let mut seen = BTreeSet::new();
    for (line, fields) in table.rows {
        let id = fields[0].as_str();
        let &i = index
            .get(id)
            .ok_or_else(|| parse_error(path, line, format!("patient `{id}` is not in the mutation matrix")))?;
        if !seen.insert(i) {
            return Err(parse_error(path, line, format!("patient `{id}` appears twice")));
        }
        for (d, field) in fields[1..].iter().enumerate() {
            values[d][i] = match field.as_str() {
                "" | "NA" | "na" | "NaN" => None,
                text => {
                    let v: f64 = text
                        .parse()
                        .map_err(|_| parse_error(path, line, format!("`{text}` is not a number")))?;
                    if !v.is_finite() {
                        return Err(parse_error(path, line, format!("`{text}` is not finite")));
                    }
                    Some(v)
                }
            };
        }
    }
    Ok((drugs, values))
}

fn read_tsm<R: Read>(input: R, path: &Path) -> Result<BTreeSet<u32>> {
    let mut positions = BTreeSet::new();
    for record in tsv_reader(input).records() {
        let record = record?;
        let field = record.get(0).unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        let pos = mutation_position(field)
            .ok_or_else(|| parse_error(path, record_line(&record), format!("`{field}` has no position")))?;
        positions.insert(pos);
    }
    Ok(positions)
}

fn occurrence_filter(matrix: &Array2<f64>, min_occurrence: usize) -> Vec<usize> {
    matrix
        .sum_axis(Axis(0))
        .iter()
        .enumerate()
        .filter(|(_, &count)| count >= min_occurrence as f64)
        .map(|(j, _)| j)
        .collect()
}

impl MutationDataset {
    /// Loads a snapshot and keeps mutations seen at least `min_occurrence` times.
    pub fn load(paths: &SnapshotPaths, min_occurrence: usize) -> Result<Self> {
        let open = |p: &Path| std::fs::File::open(p).map(std::io::BufReader::new);
        let raw = read_mutations(open(&paths.mutations)?, &paths.mutations)?;
        let (drugs, susceptibility) =
            read_susceptibility(open(&paths.susceptibility)?, &paths.susceptibility, &raw.patients)?;
        let tsm_positions = read_tsm(open(&paths.tsm)?, &paths.tsm)?;
        Self::from_parts(
            raw.patients,
            raw.labels,
            raw.matrix,
            drugs,
            susceptibility,
            tsm_positions,
        )?
        .filter_occurrence(min_occurrence)
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::load(&SnapshotPaths::in_dir(dir), GLOBAL_MIN_OCCURRENCE)
    }

    pub fn from_parts(
        patients: Vec<String>,
        mutations: Vec<String>,
        matrix: Array2<f64>,
        drugs: Vec<String>,
        susceptibility: Vec<Vec<Option<f64>>>,
        tsm_positions: BTreeSet<u32>,
    ) -> Result<Self> {
        crate::error::check_dim("mutation matrix rows", patients.len(), matrix.nrows())?;
        crate::error::check_dim("mutation matrix columns", mutations.len(), matrix.ncols())?;
        crate::error::check_dim("drug outcome tables", drugs.len(), susceptibility.len())?;
        for column in &susceptibility {
            crate::error::check_dim("drug outcome length", patients.len(), column.len())?;
        }
        if matrix.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config("mutation matrix must be 0/1".into()));
        }
        let mut seen = BTreeSet::new();
        for label in &mutations {
            if !seen.insert(label) {
                return Err(Error::DuplicateLabel(label.clone()));
            }
        }
        Ok(Self {
            patients,
            mutations,
            matrix,
            drugs,
            susceptibility,
            tsm_positions,
        })
    }

    /// Drops mutations with fewer than `min_occurrence` carriers. Patients are kept.
    pub fn filter_occurrence(self, min_occurrence: usize) -> Result<Self> {
        let keep = occurrence_filter(&self.matrix, min_occurrence);
        if keep.is_empty() {
            return Err(Error::Empty(format!(
                "no mutation occurs at least {min_occurrence} times"
            )));
        }
        Ok(Self {
            matrix: self.matrix.select(Axis(1), &keep),
            mutations: keep.iter().map(|&j| self.mutations[j].clone()).collect(),
            ..self
        })
    }

    pub fn n(&self) -> usize {
        self.patients.len()
    }

    pub fn p(&self) -> usize {
        self.mutations.len()
    }

    pub fn patients(&self) -> &[String] {
        &self.patients
    }

    pub fn mutations(&self) -> &[String] {
        &self.mutations
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn drugs(&self) -> &[String] {
        &self.drugs
    }

    pub fn tsm_positions(&self) -> &BTreeSet<u32> {
        &self.tsm_positions
    }

    /// The full filtered design, all patients.
    pub fn design(&self) -> Result<DataMatrix> {
        DataMatrix::with_names(
            self.matrix.clone(),
            vec![crate::data::ColumnKind::Binary; self.p()],
            self.mutations.clone(),
        )
    }

    /// Rows with a positive measured outcome for `drug`, `y = ln(susceptibility)`,
    /// and mutations carried by at least `DRUG_MIN_OCCURRENCE` of those rows.
    pub fn per_drug_view(&self, drug: &str) -> Result<DrugView> {
        let d = self
            .drugs
            .iter()
            .position(|name| name == drug)
            .ok_or_else(|| Error::UnknownDrug {
                drug: drug.to_string(),
                available: self.drugs.clone(),
            })?;
        let mut rows = Vec::new();
        let mut response = Vec::new();
        let mut dropped_nonpositive = 0;
        for (i, value) in self.susceptibility[d].iter().enumerate() {
            match value {
                Some(v) if *v > 0.0 => {
                    rows.push(i);
                    response.push(v.ln());
                }
                Some(_) => dropped_nonpositive += 1,
                None => {}
            }
        }
        if dropped_nonpositive > 0 {
            log::warn!("{drug}: dropped {dropped_nonpositive} rows with nonpositive susceptibility");
        }
        if rows.is_empty() {
            return Err(Error::Empty(format!("drug {drug} has no usable outcomes")));
        }
        let subset = self.matrix.select(Axis(0), &rows);
        let keep = occurrence_filter(&subset, DRUG_MIN_OCCURRENCE);
        if keep.is_empty() {
            return Err(Error::Empty(format!(
                "drug {drug}: no mutation occurs at least {DRUG_MIN_OCCURRENCE} times"
            )));
        }
        let design = DataMatrix::with_names(
            subset.select(Axis(1), &keep),
            vec![crate::data::ColumnKind::Binary; keep.len()],
            keep.iter().map(|&j| self.mutations[j].clone()).collect(),
        )?;
        Ok(DrugView {
            drug: drug.to_string(),
            design,
            response: Array1::from(response),
            patients: rows.iter().map(|&i| self.patients[i].clone()).collect(),
            rows,
            columns: keep,
            dropped_nonpositive,
        })
    }

    /// Writes the three snapshot files, unfiltered format, into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let paths = SnapshotPaths::in_dir(dir);
        let tsv = |p: &Path| csv::WriterBuilder::new().delimiter(b'\t').from_path(p);

        let mut w = tsv(&paths.mutations)?;
        w.write_record(std::iter::once("patient").chain(self.mutations.iter().map(String::as_str)))?;
        for (id, row) in self.patients.iter().zip(self.matrix.rows()) {
            w.write_record(std::iter::once(id.clone()).chain(row.iter().map(|v| (*v as u8).to_string())))?;
        }
        w.flush()?;

        let mut w = tsv(&paths.susceptibility)?;
        w.write_record(std::iter::once("patient").chain(self.drugs.iter().map(String::as_str)))?;
        for (i, id) in self.patients.iter().enumerate() {
            let cells = self
                .susceptibility
                .iter()
                .map(|col| col[i].map_or_else(|| "NA".to_string(), |v| v.to_string()));
            w.write_record(std::iter::once(id.clone()).chain(cells))?;
        }
        w.flush()?;

        let mut f = std::fs::File::create(&paths.tsm)?;
        for pos in &self.tsm_positions {
            writeln!(f, "{pos}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        std::fs::write(dir.join(name), text).unwrap();
    }

    fn toy(dir: &Path) {
        write(
            dir,
            "mutations.tsv",
            "patient\t10F\t54V\t82A\t90M\n\
             a\t1\t1\t0\t1\n\
             b\t1\t1\t0\t0\n\
             c\t1\t1\t1\t1\n\
             d\t1\t1\t1\t0\n\
             e\t0\t1\t1\t1\n",
        );
        write(
            dir,
            "susceptibility.tsv",
            "# fold change\npatient\tAPV\tATV\tNONE\n\
             a\t2.0\tNA\tNA\n\
             b\t4.0\t1.5\t\n\
             c\t0\t3.0\tNA\n\
             d\t8.0\tNA\tNA\n",
        );
        write(dir, "tsm.txt", "# positions\n54\tLV\n90\n");
    }

    fn loaded(min: usize) -> MutationDataset {
        let dir = tempfile::tempdir().unwrap();
        toy(dir.path());
        MutationDataset::load(&SnapshotPaths::in_dir(dir.path()), min).unwrap()
    }

    #[test]
    fn occurrence_threshold_is_inclusive() {
        let data = loaded(4);
        // 82A occurs 3 times, 90M 3 times.
        assert_eq!(data.mutations(), ["10F", "54V"]);
        assert_eq!(data.n(), 5);
        let data = loaded(3);
        assert_eq!(data.p(), 4);
    }

    #[test]
    fn filtering_is_idempotent() {
        let once = loaded(4);
        let twice = once.clone().filter_occurrence(4).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn per_drug_view_restricts_rows_and_logs() {
        let data = loaded(1);
        let view = data.per_drug_view("APV").unwrap();
        // c has susceptibility 0 and e is absent from the outcome file.
        assert_eq!(view.patients, ["a", "b", "d"]);
        assert_eq!(view.dropped_nonpositive, 1);
        assert!((view.response[2] - 8f64.ln()).abs() < 1e-15);
        // 82A and 90M each occur once among a, b, d.
        assert_eq!(view.kept_mutations(), ["10F", "54V"]);
        assert_eq!(
            (view.rows.as_slice(), view.columns.as_slice()),
            ([0, 1, 3].as_slice(), [0, 1].as_slice())
        );
        assert!(view.response.iter().all(|y| y.is_finite()));
    }

    #[test]
    fn per_drug_errors() {
        let data = loaded(1);
        match data.per_drug_view("XYZ").unwrap_err() {
            Error::UnknownDrug { available, .. } => assert_eq!(available, ["APV", "ATV", "NONE"]),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(data.per_drug_view("NONE").unwrap_err(), Error::Empty(_)));
    }

    #[test]
    fn malformed_input_reports_lines() {
        let dir = tempfile::tempdir().unwrap();
        toy(dir.path());
        write(dir.path(), "mutations.tsv", "patient\t10F\na\t1\nb\t2\n");
        match MutationDataset::load_dir(dir.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        write(dir.path(), "mutations.tsv", "patient\t10F\t10F\na\t1\t1\n");
        assert!(matches!(
            MutationDataset::load_dir(dir.path()).unwrap_err(),
            Error::DuplicateLabel(_)
        ));
        write(dir.path(), "mutations.tsv", "");
        assert!(matches!(
            MutationDataset::load_dir(dir.path()).unwrap_err(),
            Error::Empty(_)
        ));
        write(dir.path(), "mutations.tsv", "patient\t10F\na\t1\t0\n");
        assert!(matches!(
            MutationDataset::load_dir(dir.path()).unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn unknown_outcome_patient_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        toy(dir.path());
        write(dir.path(), "susceptibility.tsv", "patient\tAPV\na\t1\nzz\t2\n");
        match MutationDataset::load_dir(dir.path()).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("zz"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn tsm_overlap_counts_by_position() {
        let tsm: BTreeSet<u32> = [54, 90].into_iter().collect();
        let none: [&str; 0] = [];
        assert_eq!(
            tsm_overlap(&none, &tsm),
            TsmOverlap {
                matched: 0,
                selected: 0
            }
        );
        assert_eq!(tsm_overlap(&["54V", "P90M"], &tsm).to_string(), "2/2");
        assert_eq!(tsm_overlap(&["54A", "10F"], &tsm).to_string(), "1/2");
        assert_eq!(TsmOverlap::default().to_string(), "0");
    }

    #[test]
    fn positions_parse() {
        assert_eq!(mutation_position("P54V"), Some(54));
        assert_eq!(mutation_position("101ins"), Some(101));
        assert_eq!(mutation_position("V"), None);
    }

    #[test]
    fn snapshot_round_trip() {
        let data = loaded(1);
        let dir = tempfile::tempdir().unwrap();
        data.write_snapshot(dir.path()).unwrap();
        let again = MutationDataset::load(&SnapshotPaths::in_dir(dir.path()), 1).unwrap();
        assert_eq!(data, again);
    }
}
