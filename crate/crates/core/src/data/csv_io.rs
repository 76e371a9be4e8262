use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{ClusterPartition, ClusteredIVData};
use crate::error::{CcivError, Result};

/// Column layout `cluster_id,y,x,w_1..w_dw,zl_1..zl_dz,z_1..z_K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnSchema {
    pub num_controls: usize,
    pub num_lowdim_iv: usize,
    pub num_many_iv: usize,
}

impl ColumnSchema {
    pub fn new(num_controls: usize, num_lowdim_iv: usize, num_many_iv: usize) -> Self {
        Self {
            num_controls,
            num_lowdim_iv,
            num_many_iv,
        }
    }

    /// Derives the column counts from the `w_`, `zl_` and `z_` prefixes of a
    /// header. The result is then checked column by column on load.
    pub fn infer(header: &[&str]) -> Self {
        let count = |prefix: &str| {
            header
                .iter()
                .filter(|h| {
                    h.strip_prefix(prefix)
                        .is_some_and(|rest| rest.parse::<usize>().is_ok())
                })
                .count()
        };
        Self::new(count("w_"), count("zl_"), count("z_"))
    }

    pub fn header(&self) -> Vec<String> {
        let mut cols = vec!["cluster_id".to_string(), "y".into(), "x".into()];
        cols.extend((1..=self.num_controls).map(|k| format!("w_{k}")));
        cols.extend((1..=self.num_lowdim_iv).map(|k| format!("zl_{k}")));
        cols.extend((1..=self.num_many_iv).map(|k| format!("z_{k}")));
        cols
    }

    pub fn of(data: &ClusteredIVData) -> Self {
        Self::new(data.num_controls(), data.num_lowdim_iv(), data.num_many_iv())
    }
}

/// Reads a clustered IV dataset. Rows are regrouped into contiguous cluster
/// blocks, clusters ordered by first appearance and rows within a cluster
/// kept in file order. `schema = None` infers the column counts.
pub fn load_csv(path: impl AsRef<Path>, schema: Option<ColumnSchema>) -> Result<ClusteredIVData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let schema = schema.unwrap_or_else(|| ColumnSchema::infer(&header_refs));

    let position: HashMap<&str, usize> = header_refs.iter().enumerate().map(|(i, h)| (*h, i)).collect();
    let expected = schema.header();
    let mut index = Vec::with_capacity(expected.len());
    for name in &expected {
        match position.get(name.as_str()) {
            Some(&i) => index.push(i),
            None => return Err(CcivError::Schema(format!("missing column `{name}`"))),
        }
    }

    let mut cluster_of_label: HashMap<String, usize> = HashMap::new();
    let mut labels: Vec<String> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_no + 1;
        let label = record
            .get(index[0])
            .ok_or_else(|| CcivError::Parse {
                row,
                column: "cluster_id".into(),
                message: "missing field".into(),
            })?
            .to_string();
        let mut parsed = Vec::with_capacity(expected.len() - 1);
        for (name, &col) in expected.iter().zip(&index).skip(1) {
            let cell = record.get(col).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| CcivError::Parse {
                row,
                column: name.clone(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(CcivError::Parse {
                    row,
                    column: name.clone(),
                    message: "value is not finite".into(),
                });
            }
            parsed.push(v);
        }
        let g = *cluster_of_label.entry(label.clone()).or_insert_with(|| {
            labels.push(label);
            members.push(Vec::new());
            members.len() - 1
        });
        members[g].push(values.len());
        values.push(parsed);
    }
    if values.is_empty() {
        return Err(CcivError::InvalidInput("data file has no rows".into()));
    }

    let order: Vec<usize> = members.iter().flatten().copied().collect();
    let partition = ClusterPartition::new(members.iter().map(Vec::len).collect())?;
    let n = order.len();
    let (dw, dz, k) = (schema.num_controls, schema.num_lowdim_iv, schema.num_many_iv);
    let col = |offset: usize, width: usize| {
        DMatrix::from_fn(n, width, |i, j| values[order[i]][offset + j])
    };
    let y = DVector::from_fn(n, |i, _| values[order[i]][0]);
    let x = DVector::from_fn(n, |i, _| values[order[i]][1]);
    ClusteredIVData::with_labels(
        y,
        x,
        col(2, dw),
        col(2 + dw + dz, k),
        col(2 + dw, dz),
        partition,
        labels,
    )
}

/// Writes `data` in the layout [`load_csv`] reads, with round-trip float
/// formatting.
pub fn write_csv(data: &ClusteredIVData, out: impl Write) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(ColumnSchema::of(data).header())?;
    let membership = data.partition().membership();
    for i in 0..data.n() {
        let mut record = vec![data.labels()[membership[i]].clone()];
        record.push(data.y()[i].to_string());
        record.push(data.x()[i].to_string());
        for m in [data.controls(), data.lowdim_iv(), data.many_iv()] {
            record.extend(m.row(i).iter().map(|v| v.to_string()));
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
