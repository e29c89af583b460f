//! Class-tagged collections of d-dimensional vectors and their CSV form
//! (`class_id,v1,…,vd`).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{invalid, Error, Result};

/// Class id reserved for the unconditional (null) condition.
pub const NULL_CLASS: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    values: Array2<f64>,
    class_ids: Vec<usize>,
}

impl Batch {
    pub fn new(values: Array2<f64>, class_ids: Vec<usize>) -> Result<Batch> {
        if values.nrows() != class_ids.len() {
            return invalid(format!(
                "batch has {} rows but {} class ids",
                values.nrows(),
                class_ids.len()
            ));
        }
        if values.ncols() == 0 {
            return invalid("batch dimension must be >= 1");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("batch contains non-finite values");
        }
        Ok(Batch { values, class_ids })
    }

    pub fn from_rows(rows: &[Vec<f64>], class_ids: Vec<usize>) -> Result<Batch> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return invalid("batch rows differ in dimension");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Batch::new(values, class_ids)
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    /// Distinct class ids, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut ids = self.class_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Row indices grouped by class id.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.class_ids.iter().enumerate() {
            map.entry(c).or_default().push(i);
        }
        map
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            values: self.values.select(Axis(0), indices),
            class_ids: indices.iter().map(|&i| self.class_ids[i]).collect(),
        }
    }

    /// Items whose class id is `class_id`.
    pub fn of_class(&self, class_id: usize) -> Batch {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.class_ids[i] == class_id)
            .collect();
        self.select(&idx)
    }

    pub fn concat(parts: &[Batch]) -> Result<Batch> {
        let Some(first) = parts.first() else {
            return invalid("cannot concatenate zero batches");
        };
        let views: Vec<_> = parts.iter().map(|b| b.values.view()).collect();
        if parts.iter().any(|b| b.dim() != first.dim()) {
            return invalid("cannot concatenate batches of different dimension");
        }
        let values = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let class_ids = parts.iter().flat_map(|b| b.class_ids.clone()).collect();
        Ok(Batch { values, class_ids })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = String::from("class_id");
        for j in 1..=self.dim() {
            header.push_str(&format!(",v{j}"));
        }
        writeln!(out, "{header}")?;
        for (i, row) in self.values.outer_iter().enumerate() {
            let mut line = self.class_ids[i].to_string();
            for v in row {
                line.push(',');
                line.push_str(&format_float(*v));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Batch> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty batch csv".into()))??;
        let dim = header.split(',').count().saturating_sub(1);
        if !header.starts_with("class_id") || dim == 0 {
            return Err(Error::Parse(format!("bad batch csv header `{header}`")));
        }
        let mut flat = Vec::new();
        let mut ids = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let id = fields
                .next()
                .and_then(|f| f.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Parse(format!("line {}: bad class id", n + 2)))?;
            let before = flat.len();
            for f in fields {
                let v = f
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", n + 2)))?;
                flat.push(v);
            }
            if flat.len() - before != dim {
                return Err(Error::Parse(format!(
                    "line {}: expected {dim} values",
                    n + 2
                )));
            }
            ids.push(id);
        }
        let values = Array2::from_shape_vec((ids.len(), dim), flat)
            .map_err(|e| Error::Parse(e.to_string()))?;
        Batch::new(values, ids)
    }
}

/// Shortest decimal text that parses back to the same f64.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}
