use std::path::Path;

use super::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loads a headed CSV; the label column holds integer class indices and every
/// other column is a numeric feature.
pub fn load_csv_table(
    path: &Path,
    classes: usize,
    label_column: &str,
    norm: Option<&Normalization>,
) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let label_at = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::Config(format!("{} has no column {label_column:?}", path.display()))
        })?;
    let width = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, field) in rec.iter().enumerate() {
            let bad = || Error::Format {
                offset: rec.position().map_or(0, |p| p.byte()),
                msg: format!(
                    "row {}: column {j} value {field:?} is not a number",
                    row + 1
                ),
            };
            if j == label_at {
                labels.push(field.trim().parse::<usize>().map_err(|_| bad())?);
            } else {
                data.push(field.trim().parse::<f64>().map_err(|_| bad())?);
            }
        }
    }
    if let Some(norm) = norm {
        norm.apply(&mut data, width, 1)?;
    }
    Dataset::new(
        Tensor::new(vec![labels.len(), width], data)?,
        labels,
        classes,
    )
}
