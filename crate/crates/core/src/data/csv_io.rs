use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Original label value for each contiguous class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub original: Vec<i64>,
}

impl LabelMapping {
    pub fn is_identity(&self) -> bool {
        self.original.iter().enumerate().all(|(i, &v)| v == i as i64)
    }
}

fn parse_err(line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        msg: msg.into(),
    }
}

/// Reads a headered CSV; every column except `label_column` is a feature.
/// Integer labels are remapped onto `0..C` in ascending order.
pub fn load_csv(path: &Path, label_column: &str) -> Result<(Dataset, LabelMapping)> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let header = reader.headers().map_err(csv_error)?.clone();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| parse_err(1, format!("missing label column {label_column:?}")))?;
    let width = header.len();
    let dim = width - 1;

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(parse_err(
                line,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        for (j, field) in rec.iter().enumerate() {
            if j == label_idx {
                let y: i64 = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("label {field:?} is not an integer")))?;
                raw_labels.push(y);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    parse_err(line, format!("column {:?}: {field:?} is not numeric", &header[j]))
                })?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("column {:?} is not finite", &header[j])));
                }
                features.push(v);
            }
        }
    }

    let mut original = raw_labels.clone();
    original.sort_unstable();
    original.dedup();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|y| original.binary_search(y).expect("label present"))
        .collect();
    let mapping = LabelMapping { original };
    if !mapping.is_identity() {
        log::info!("remapped labels {:?} onto 0..{}", mapping.original, mapping.original.len());
    }
    let n = labels.len();
    let num_classes = mapping.original.len();
    let ds = Dataset::new(Matrix::from_vec(n, dim, features)?, labels, num_classes)?;
    Ok((ds, mapping))
}

/// Writes feature columns `x0..x{d-1}` followed by a `label` column.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_error)?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        row.push(data.labels[i].to_string());
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => parse_err(line, format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn fixture(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_rows_round_trip_exactly() {
        let f = fixture("a,b,label\n0.1,-2.5,0\n3e-7,4,1\n");
        let (ds, map) = load_csv(f.path(), "label").unwrap();
        assert_eq!(ds.features.to_rows(), vec![vec![0.1, -2.5], vec![3e-7, 4.0]]);
        assert_eq!(ds.labels, vec![0, 1]);
        assert!(map.is_identity());
    }

    #[test]
    fn sparse_labels_are_remapped() {
        let f = fixture("x,label\n1,7\n2,3\n3,7\n");
        let (ds, map) = load_csv(f.path(), "label").unwrap();
        assert_eq!(ds.labels, vec![1, 0, 1]);
        assert_eq!(map.original, vec![3, 7]);
        assert_eq!(ds.num_classes, 2);
    }

    #[test]
    fn label_column_can_be_anywhere() {
        let f = fixture("cls,x\n1,0.5\n0,0.25\n");
        let (ds, _) = load_csv(f.path(), "cls").unwrap();
        assert_eq!(ds.features.as_slice(), &[0.5, 0.25]);
        assert_eq!(ds.labels, vec![1, 0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let f = fixture("x,label\n1,0\n2\n");
        assert!(matches!(load_csv(f.path(), "label"), Err(Error::Parse { line: 3, .. })));
        let f = fixture("x,label\n1,0\nabc,1\n");
        assert!(matches!(load_csv(f.path(), "label"), Err(Error::Parse { line: 3, .. })));
        let f = fixture("x,y\n1,0\n");
        assert!(matches!(load_csv(f.path(), "label"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn write_then_read_is_identity() {
        let ds = Dataset::new(
            Matrix::from_rows(&[vec![0.1 + 0.2, -1e-300], vec![5.0, 1.0 / 3.0]]).unwrap(),
            vec![1, 0],
            2,
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(f.path(), &ds).unwrap();
        let (back, _) = load_csv(f.path(), "label").unwrap();
        assert_eq!(back, ds);
    }
}
