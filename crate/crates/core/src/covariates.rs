//! Auxiliary covariates: schema, row storage with missingness, and the
//! grouping of rows into contiguous per-instance blocks.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{LvaeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Categorical,
    Binary,
}

/// Names and kinds of the covariate columns, with one designated instance id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    entries: Vec<(String, CovariateKind)>,
    id_index: usize,
}

impl CovariateSchema {
    pub fn new(entries: Vec<(String, CovariateKind)>, id_name: &str) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(other, _)| other == name) {
                return Err(LvaeError::Schema(format!("duplicate covariate name `{name}`")));
            }
        }
        let id_index = entries
            .iter()
            .position(|(name, _)| name == id_name)
            .ok_or_else(|| LvaeError::Schema(format!("no id covariate named `{id_name}`")))?;
        if entries[id_index].1 != CovariateKind::Categorical {
            return Err(LvaeError::Schema(format!(
                "id covariate `{id_name}` must be categorical"
            )));
        }
        Ok(CovariateSchema { entries, id_index })
    }

    /// The schema of the synthetic longitudinal benchmark:
    /// `id,age,sex,diseasePresence,diseaseAge,location`.
    pub fn longitudinal() -> Self {
        use CovariateKind::*;
        let entries = [
            ("id", Categorical),
            ("age", Continuous),
            ("sex", Categorical),
            ("diseasePresence", Binary),
            ("diseaseAge", Continuous),
            ("location", Binary),
        ]
        .into_iter()
        .map(|(n, k)| (n.to_string(), k))
        .collect();
        CovariateSchema::new(entries, "id").expect("static schema is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id_index(&self) -> usize {
        self.id_index
    }

    pub fn name(&self, column: usize) -> &str {
        &self.entries[column].0
    }

    pub fn kind(&self, column: usize) -> CovariateKind {
        self.entries[column].1
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    /// Checks a single value against the column kind.
    pub fn check_value(&self, column: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(LvaeError::Schema(format!(
                "non-finite value in column `{}`",
                self.name(column)
            )));
        }
        match self.kind(column) {
            CovariateKind::Continuous => Ok(()),
            CovariateKind::Categorical | CovariateKind::Binary => {
                if value.fract() != 0.0 || value < 0.0 {
                    Err(LvaeError::Schema(format!(
                        "column `{}` expects a non-negative integer code, got {value}",
                        self.name(column)
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Row-major table of covariate values where `None` marks a missing entry.
///
/// Unlike [`CovariateMatrix`] this carries no block structure, so it also
/// holds inducing locations whose id column is irrelevant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Points {
    width: usize,
    values: Vec<Option<f64>>,
}

impl Points {
    pub fn new(width: usize, values: Vec<Option<f64>>) -> Result<Self> {
        if width == 0 || !values.len().is_multiple_of(width) {
            return Err(LvaeError::Shape(format!(
                "{} values do not form rows of width {width}",
                values.len()
            )));
        }
        Ok(Points { width, values })
    }

    pub fn empty(width: usize) -> Self {
        Points {
            width,
            values: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[Option<f64>] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn get(&self, i: usize, column: usize) -> Option<f64> {
        self.values[i * self.width + column]
    }

    pub fn set(&mut self, i: usize, column: usize, value: Option<f64>) {
        self.values[i * self.width + column] = value;
    }

    pub fn push_row(&mut self, row: &[Option<f64>]) {
        assert_eq!(row.len(), self.width, "row width");
        self.values.extend_from_slice(row);
    }

    pub fn select(&self, rows: &[usize]) -> Points {
        let mut out = Points::empty(self.width);
        for &r in rows {
            out.push_row(self.row(r));
        }
        out
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn view(&self) -> Rows<'_> {
        Rows {
            values: &self.values,
            width: self.width,
        }
    }

    pub fn view_range(&self, range: Range<usize>) -> Rows<'_> {
        Rows {
            values: &self.values[range.start * self.width..range.end * self.width],
            width: self.width,
        }
    }
}

/// Borrowed run of rows.
#[derive(Clone, Copy, Debug)]
pub struct Rows<'a> {
    values: &'a [Option<f64>],
    width: usize,
}

impl<'a> Rows<'a> {
    pub fn len(&self) -> usize {
        self.values.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &'a [Option<f64>] {
        &self.values[i * self.width..(i + 1) * self.width]
    }
}

/// A contiguous run of rows that share one instance id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceBlock {
    pub id: i64,
    pub start: usize,
    pub len: usize,
}

impl InstanceBlock {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// N×Q covariates grouped into P instance blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateMatrix {
    schema: CovariateSchema,
    points: Points,
    blocks: Vec<InstanceBlock>,
    block_of_id: HashMap<i64, usize>,
}

impl CovariateMatrix {
    /// Validates the rows against the schema and derives the instance blocks.
    /// Rows of one instance must be contiguous.
    pub fn new(schema: CovariateSchema, points: Points) -> Result<Self> {
        if points.width() != schema.len() {
            return Err(LvaeError::Schema(format!(
                "rows have {} columns but the schema has {}",
                points.width(),
                schema.len()
            )));
        }
        let id_col = schema.id_index();
        let mut blocks: Vec<InstanceBlock> = Vec::new();
        let mut block_of_id = HashMap::new();
        for i in 0..points.len() {
            for (c, v) in points.row(i).iter().enumerate() {
                if let Some(v) = v {
                    schema
                        .check_value(c, *v)
                        .map_err(|e| LvaeError::Schema(format!("row {i}: {e}")))?;
                }
            }
            let id = points.get(i, id_col).ok_or_else(|| {
                LvaeError::Schema(format!("row {i}: the instance id may not be missing"))
            })? as i64;
            match blocks.last_mut() {
                Some(b) if b.id == id => b.len += 1,
                _ => {
                    if block_of_id.insert(id, blocks.len()).is_some() {
                        return Err(LvaeError::Schema(format!(
                            "row {i}: rows of instance {id} are not contiguous"
                        )));
                    }
                    blocks.push(InstanceBlock {
                        id,
                        start: i,
                        len: 1,
                    });
                }
            }
        }
        Ok(CovariateMatrix {
            schema,
            points,
            blocks,
            block_of_id,
        })
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn points(&self) -> &Points {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn row(&self, i: usize) -> &[Option<f64>] {
        self.points.row(i)
    }

    pub fn view(&self) -> Rows<'_> {
        self.points.view()
    }

    pub fn block_view(&self, block: usize) -> Rows<'_> {
        self.points.view_range(self.blocks[block].range())
    }

    pub fn blocks(&self) -> &[InstanceBlock] {
        &self.blocks
    }

    pub fn n_instances(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_of_id(&self, id: i64) -> Option<&InstanceBlock> {
        self.block_of_id.get(&id).map(|&b| &self.blocks[b])
    }

    pub fn id_of_row(&self, i: usize) -> i64 {
        self.points.get(i, self.schema.id_index()).unwrap_or_default() as i64
    }

    /// Copy of the rows belonging to the given blocks (in the given order).
    pub fn select_instances(&self, blocks: &[usize]) -> Result<(CovariateMatrix, Vec<usize>)> {
        let mut rows = Vec::new();
        for &b in blocks {
            let block = self.blocks.get(b).ok_or_else(|| {
                LvaeError::Batch(format!("instance index {b} out of range"))
            })?;
            rows.extend(block.range());
        }
        let x = CovariateMatrix::new(self.schema.clone(), self.points.select(&rows))?;
        Ok((x, rows))
    }

    /// Builds a mini-batch of whole instances.
    pub fn batch(&self, blocks: &[usize]) -> Result<InstanceBatch> {
        let (x, rows) = self.select_instances(blocks)?;
        Ok(InstanceBatch {
            x,
            rows,
            total_instances: self.n_instances(),
            total_rows: self.len(),
        })
    }

    /// Builds a mini-batch from explicit row indices, rejecting any batch that
    /// holds only part of an instance.
    pub fn batch_from_rows(&self, rows: &[usize]) -> Result<InstanceBatch> {
        let x = CovariateMatrix::new(self.schema.clone(), self.points.select(rows))?;
        for b in x.blocks() {
            let full = self.block_of_id(b.id).ok_or_else(|| {
                LvaeError::Batch(format!("instance {} is not part of the data", b.id))
            })?;
            if full.len != b.len {
                return Err(LvaeError::Batch(format!(
                    "instance {} is split: batch holds {} of its {} rows",
                    b.id, b.len, full.len
                )));
            }
        }
        Ok(InstanceBatch {
            x,
            rows: rows.to_vec(),
            total_instances: self.n_instances(),
            total_rows: self.len(),
        })
    }

    /// Replaces one column value in every row of the matrix.
    pub fn with_column(&self, column: usize, value: impl Fn(usize) -> Option<f64>) -> Result<Self> {
        let mut points = self.points.clone();
        for i in 0..points.len() {
            points.set(i, column, value(i));
        }
        CovariateMatrix::new(self.schema.clone(), points)
    }
}

/// Whole instances drawn from a larger data set, with the sizes of that set.
#[derive(Clone, Debug)]
pub struct InstanceBatch {
    pub x: CovariateMatrix,
    /// Row indices into the full data set.
    pub rows: Vec<usize>,
    pub total_instances: usize,
    pub total_rows: usize,
}

impl InstanceBatch {
    /// The batch-normalization factor `P / P̂`.
    pub fn scale(&self) -> f64 {
        self.total_instances as f64 / self.x.n_instances() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_instances() -> CovariateMatrix {
        let s = CovariateSchema::longitudinal();
        let rows = [
            [1.0, 0.0, 0.0, 0.0, f64::NAN, 1.0],
            [1.0, 1.0, 0.0, 0.0, f64::NAN, 1.0],
            [7.0, 0.0, 1.0, 1.0, -1.0, 0.0],
            [7.0, 1.0, 1.0, 1.0, 0.0, 0.0],
            [7.0, 2.0, 1.0, 1.0, 1.0, 0.0],
        ];
        let values = rows
            .iter()
            .flat_map(|r| r.iter().map(|v| if v.is_nan() { None } else { Some(*v) }))
            .collect();
        CovariateMatrix::new(s.clone(), Points::new(s.len(), values).unwrap()).unwrap()
    }

    #[test]
    fn schema_rejects_duplicates_and_non_categorical_id() {
        use CovariateKind::*;
        let dup = vec![("id".into(), Categorical), ("id".into(), Continuous)];
        assert!(CovariateSchema::new(dup, "id").is_err());
        let bad_id = vec![("id".into(), Continuous)];
        assert!(CovariateSchema::new(bad_id, "id").is_err());
    }

    #[test]
    fn blocks_partition_rows() {
        let x = two_instances();
        assert_eq!(x.n_instances(), 2);
        assert_eq!(x.blocks()[0].len + x.blocks()[1].len, x.len());
        assert_eq!(x.block_of_id(7).unwrap().start, 2);
    }

    #[test]
    fn non_contiguous_ids_rejected() {
        let s = CovariateSchema::longitudinal();
        let mut vals = Vec::new();
        for id in [1.0, 2.0, 1.0] {
            vals.extend([Some(id), Some(0.0), Some(0.0), Some(0.0), None, Some(0.0)]);
        }
        let err = CovariateMatrix::new(s.clone(), Points::new(6, vals).unwrap()).unwrap_err();
        assert!(err.to_string().contains("not contiguous"));
    }

    #[test]
    fn missing_id_and_bad_codes_rejected() {
        let s = CovariateSchema::longitudinal();
        let vals = vec![None, Some(0.0), Some(0.0), Some(0.0), None, Some(0.0)];
        assert!(CovariateMatrix::new(s.clone(), Points::new(6, vals).unwrap()).is_err());
        let vals = vec![Some(1.0), Some(0.0), Some(0.5), Some(0.0), None, Some(0.0)];
        assert!(CovariateMatrix::new(s, Points::new(6, vals).unwrap()).is_err());
    }

    #[test]
    fn batch_from_rows_rejects_split_instance() {
        let x = two_instances();
        assert!(x.batch_from_rows(&[2, 3, 4]).is_ok());
        let err = x.batch_from_rows(&[0, 1, 2]).unwrap_err();
        assert!(matches!(err, LvaeError::Batch(_)));
        let b = x.batch(&[1]).unwrap();
        assert_eq!(b.rows, vec![2, 3, 4]);
        assert_eq!(b.scale(), 2.0);
    }
}
