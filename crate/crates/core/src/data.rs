//! Labelled datasets of latent codes (or pixel rows) and their CSV form.

use std::path::Path;

use crate::error::{check_finite, AuditError, Result};
use crate::linalg::Matrix;

/// Column prefix used in the CSV header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    /// `z0,...,z{d-1},label`
    Latent,
    /// `p0,...,p{m-1},label`
    Pixel,
}

impl Space {
    fn prefix(self) -> &'static str {
        match self {
            Space::Latent => "z",
            Space::Pixel => "p",
        }
    }
}

/// `n × d` feature rows with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(AuditError::Shape {
                context: "dataset labels",
                expected: rows.len(),
                actual: labels.len(),
            });
        }
        let features = Matrix::from_rows(&rows)?;
        check_finite("dataset features", features.as_slice())?;
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        (0..self.len()).map(move |i| (self.row(i), self.labels[i]))
    }

    /// Largest label + 1.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Rows selected by `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let rows = indices.iter().map(|&i| self.row(i).to_vec()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(rows, labels).expect("subset of a valid dataset")
    }

    /// Applies `f` to every row, keeping labels.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<Dataset> {
        let rows = (0..self.len()).map(|i| f(self.row(i))).collect::<Result<Vec<_>>>()?;
        Dataset::new(rows, self.labels.clone())
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&y| y >= num_classes) {
            Some(y) => Err(AuditError::Argument(format!(
                "label {y} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn to_csv(&self, space: Space) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("{}{j}", space.prefix())).collect();
        header.push("label".into());
        w.write_record(&header).map_err(csv_err)?;
        for (row, y) in self.iter() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| AuditError::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses either header flavour; returns the detected space.
    pub fn from_csv(text: &str) -> Result<(Self, Space)> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        let cols = header.len();
        if cols < 2 || &header[cols - 1] != "label" {
            return Err(AuditError::Format("dataset header must end with `label`".into()));
        }
        let space = if header[0].starts_with('p') { Space::Pixel } else { Space::Latent };
        for (j, name) in header.iter().take(cols - 1).enumerate() {
            if name != format!("{}{j}", space.prefix()) {
                return Err(AuditError::Format(format!("unexpected column `{name}` at position {j}")));
            }
        }
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let row = rec
                .iter()
                .take(cols - 1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| AuditError::Format(format!("row {}: {e}", line + 1)))?;
            let y = rec[cols - 1]
                .trim()
                .parse::<usize>()
                .map_err(|e| AuditError::Format(format!("row {} label: {e}", line + 1)))?;
            rows.push(row);
            labels.push(y);
        }
        Ok((Dataset::new(rows, labels)?, space))
    }

    pub fn load(path: &Path) -> Result<(Self, Space)> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn csv_err(e: csv::Error) -> AuditError {
    AuditError::Format(e.to_string())
}

/// Reads a single unlabelled CSV row, optionally preceded by a header line.
pub fn parse_row(text: &str) -> Result<Vec<f64>> {
    let mut values = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.iter().all(|f| f.parse::<f64>().is_ok()) {
            values = Some(fields.iter().map(|f| f.parse::<f64>().expect("checked")).collect::<Vec<_>>());
            break;
        }
    }
    let values = values.ok_or_else(|| AuditError::Format("no numeric row found".into()))?;
    check_finite("input row", &values)?;
    Ok(values)
}
