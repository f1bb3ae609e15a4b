use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cell, PreparedVisit};
use crate::error::{Error, Result};

/// On-disk form of one visit: line-delimited JSON, one record per visit.
/// `values` holds `null` where no post-carry-forward measurement exists and
/// `indicators` is 1 exactly there. Imputation happens at training time from
/// training-split statistics, never at generation time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitRecord {
    pub visit_id: u64,
    pub domain: String,
    pub label: u8,
    pub subgroup: usize,
    pub length: usize,
    pub values: Vec<Vec<Option<f64>>>,
    pub indicators: Vec<Vec<u8>>,
}

impl VisitRecord {
    pub fn from_visit(v: &PreparedVisit, domain_name: &str) -> Self {
        let values: Vec<Vec<Option<f64>>> =
            v.cells.iter().map(|row| row.iter().map(Cell::value).collect()).collect();
        let indicators: Vec<Vec<u8>> = v
            .cells
            .iter()
            .map(|row| row.iter().map(|c| c.needs_indicator() as u8).collect())
            .collect();
        VisitRecord {
            visit_id: v.visit_id,
            domain: domain_name.to_string(),
            label: v.label as u8,
            subgroup: v.subgroup,
            length: v.cells.len(),
            values,
            indicators,
        }
    }

    pub fn to_visit(&self, domain_tag: u8) -> Result<PreparedVisit> {
        if self.values.len() != self.length || self.indicators.len() != self.length {
            return Err(Error::InvalidData(format!(
                "visit {}: length field disagrees with rows",
                self.visit_id
            )));
        }
        let mut cells = Vec::with_capacity(self.length);
        for (vrow, irow) in self.values.iter().zip(&self.indicators) {
            if vrow.len() != irow.len() {
                return Err(Error::InvalidData(format!(
                    "visit {}: ragged row",
                    self.visit_id
                )));
            }
            let row: Vec<Cell> = vrow
                .iter()
                .zip(irow)
                .map(|(v, &ind)| match (v, ind) {
                    (Some(x), 0) => Ok(Cell::Observed(*x)),
                    (Some(x), _) => Ok(Cell::Imputed(*x)),
                    (None, _) => Ok(Cell::Missing),
                })
                .collect::<Result<_>>()?;
            cells.push(row);
        }
        if self.label > 1 {
            return Err(Error::BadLabel(self.label as f64));
        }
        Ok(PreparedVisit {
            visit_id: self.visit_id,
            domain: domain_tag,
            label: self.label as f64,
            subgroup: self.subgroup,
            cells,
        })
    }
}

pub fn write_jsonl(path: &Path, records: &[VisitRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<VisitRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
