//! CSV ingestion: rows partitioned into groups, covariates split into
//! focal and nuisance designs.
//!
//! Required columns are `group` and `y` (exact, case-sensitive names).
//! Every remaining column is a focal covariate unless listed as
//! nuisance. Cells must parse as finite numbers; groups appear in the
//! output in order of first appearance.

use crate::error::{FabError, Result};
use crate::model::GroupData;
use nalgebra::{DMatrix, DVector};
use std::io::Read;

struct RawGroup {
    id: String,
    y: Vec<f64>,
    x_rows: Vec<Vec<f64>>,
    z_rows: Vec<Vec<f64>>,
}

/// Reads a CSV table from any reader. `nuisance` names the columns that
/// form the nuisance design; each must exist in the header.
pub fn ingest_csv_reader<R: Read>(reader: R, nuisance: &[String]) -> Result<Vec<GroupData>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| FabError::Parse(format!("header: {e}")))?
        .clone();
    let names: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    let group_col = names
        .iter()
        .position(|h| h == "group")
        .ok_or_else(|| FabError::Parse("missing required column 'group'".into()))?;
    let y_col = names
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| FabError::Parse("missing required column 'y'".into()))?;
    for nz in nuisance {
        if !names.iter().any(|h| h == nz) {
            return Err(FabError::Parse(format!("nuisance column '{nz}' not in header")));
        }
        if nz == "group" || nz == "y" {
            return Err(FabError::Parse(format!("'{nz}' cannot be a nuisance column")));
        }
    }
    let mut focal_cols = Vec::new();
    let mut nuisance_cols = Vec::new();
    for (i, h) in names.iter().enumerate() {
        if i == group_col || i == y_col {
            continue;
        }
        if nuisance.iter().any(|nz| nz == h) {
            nuisance_cols.push(i);
        } else {
            focal_cols.push(i);
        }
    }
    if focal_cols.is_empty() {
        return Err(FabError::Parse("no focal covariate columns".into()));
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, RawGroup> = std::collections::HashMap::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let row_no = row_idx + 2; // header is line 1
        let record = record.map_err(|e| FabError::Parse(format!("row {row_no}: {e}")))?;
        if record.len() != names.len() {
            return Err(FabError::Parse(format!(
                "row {row_no}: expected {} fields, found {}",
                names.len(),
                record.len()
            )));
        }
        let parse_cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| {
                FabError::Parse(format!("row {row_no}, column '{}': not a number: '{raw}'", names[col]))
            })?;
            if !v.is_finite() {
                return Err(FabError::Parse(format!(
                    "row {row_no}, column '{}': non-finite value '{raw}'",
                    names[col]
                )));
            }
            Ok(v)
        };
        let gid = record.get(group_col).unwrap_or("").trim().to_string();
        if gid.is_empty() {
            return Err(FabError::Parse(format!("row {row_no}: empty group label")));
        }
        let y = parse_cell(y_col)?;
        let mut x_row = Vec::with_capacity(focal_cols.len());
        for &c in &focal_cols {
            x_row.push(parse_cell(c)?);
        }
        let mut z_row = Vec::with_capacity(nuisance_cols.len());
        for &c in &nuisance_cols {
            z_row.push(parse_cell(c)?);
        }
        let entry = groups.entry(gid.clone()).or_insert_with(|| {
            order.push(gid.clone());
            RawGroup { id: gid, y: Vec::new(), x_rows: Vec::new(), z_rows: Vec::new() }
        });
        entry.y.push(y);
        entry.x_rows.push(x_row);
        entry.z_rows.push(z_row);
    }
    if order.is_empty() {
        return Err(FabError::Parse("no data rows".into()));
    }

    let p = focal_cols.len();
    let q = nuisance_cols.len();
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let raw = groups.remove(&id).expect("group recorded in order");
        let n = raw.y.len();
        let y = DVector::from_vec(raw.y);
        let x = DMatrix::from_fn(n, p, |i, j| raw.x_rows[i][j]);
        let z = if q == 0 {
            None
        } else {
            Some(DMatrix::from_fn(n, q, |i, j| raw.z_rows[i][j]))
        };
        out.push(GroupData::new(y, x, z, raw.id)?);
    }
    Ok(out)
}

/// Convenience wrapper over a string.
pub fn ingest_csv_str(text: &str, nuisance: &[String]) -> Result<Vec<GroupData>> {
    ingest_csv_reader(text.as_bytes(), nuisance)
}

/// Reads a CSV file from disk.
pub fn ingest_csv_path(path: &std::path::Path, nuisance: &[String]) -> Result<Vec<GroupData>> {
    let f = std::fs::File::open(path)
        .map_err(|e| FabError::Io(format!("{}: {e}", path.display())))?;
    ingest_csv_reader(std::io::BufReader::new(f), nuisance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_groups_partition_by_first_appearance() {
        let text = "group,y,x1\nb,1.0,0.5\nb,2.0,1.5\na,3.0,2.5\n";
        let gs = ingest_csv_str(text, &[]).unwrap();
        assert_eq!(gs.len(), 2);
        assert_eq!(gs[0].group_id, "b");
        assert_eq!(gs[0].n(), 2);
        assert_eq!(gs[1].group_id, "a");
        assert_eq!(gs[1].n(), 1);
    }

    #[test]
    fn nuisance_split() {
        let text = "group,y,x1,x2\ng,1.0,2.0,3.0\ng,2.0,4.0,5.0\n";
        let gs = ingest_csv_str(text, &["x2".to_string()]).unwrap();
        assert_eq!(gs[0].x.ncols(), 1);
        assert_eq!(gs[0].z.as_ref().unwrap().ncols(), 1);
        assert_eq!(gs[0].x[(0, 0)], 2.0);
        assert_eq!(gs[0].z.as_ref().unwrap()[(1, 0)], 5.0);
    }

    #[test]
    fn nan_cell_is_rejected_with_location() {
        let text = "group,y,x1\ng,NaN,1.0\n";
        match ingest_csv_str(text, &[]) {
            Err(FabError::Parse(msg)) => {
                assert!(msg.contains("row 2"), "{msg}");
                assert!(msg.contains('y'), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_row_and_column() {
        let text = "group,y,x1\ng,1.0,apple\n";
        match ingest_csv_str(text, &[]) {
            Err(FabError::Parse(msg)) => {
                assert!(msg.contains("row 2") && msg.contains("x1"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_required_columns() {
        assert!(matches!(ingest_csv_str("y,x\n1,2\n", &[]), Err(FabError::Parse(_))));
        assert!(matches!(ingest_csv_str("group,x\ng,2\n", &[]), Err(FabError::Parse(_))));
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let text = "group,y,x1\ng,1.0\n";
        assert!(matches!(ingest_csv_str(text, &[]), Err(FabError::Parse(_))));
    }

    #[test]
    fn unknown_nuisance_name_is_rejected() {
        let text = "group,y,x1\ng,1.0,2.0\n";
        assert!(ingest_csv_str(text, &["zz".to_string()]).is_err());
    }

    #[test]
    fn row_shuffle_within_group_changes_nothing_structural() {
        let a = ingest_csv_str("group,y,x1\ng,1.0,0.1\ng,2.0,0.2\n", &[]).unwrap();
        let b = ingest_csv_str("group,y,x1\ng,2.0,0.2\ng,1.0,0.1\n", &[]).unwrap();
        assert_eq!(a[0].n(), b[0].n());
        let mut ya: Vec<f64> = a[0].y.iter().copied().collect();
        let mut yb: Vec<f64> = b[0].y.iter().copied().collect();
        ya.sort_by(|x, y| x.partial_cmp(y).unwrap());
        yb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(ya, yb);
    }
}
