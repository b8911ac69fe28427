use std::collections::HashSet;
use std::path::Path;

use log::warn;

use super::{CaseRecord, DataError, Decision, FeatureSchema};

/// HMDA-style outcome column. Code 1 is an approval, 3 a denial; any other
/// status (withdrawn, incomplete, ...) is excluded.
pub const LABEL_COLUMN: &str = "action_taken";
const ID_COLUMN: &str = "id";
const MISSING_MARKERS: [&str; 3] = ["", "NA", "Exempt"];

#[derive(Debug, Clone, PartialEq)]
pub struct CsvLoad {
    pub cases: Vec<CaseRecord>,
    /// Rows dropped because a numeric field was missing.
    pub dropped_count: usize,
    /// Rows whose outcome was neither approval nor denial.
    pub excluded_count: usize,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<CsvLoad, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();

    let mut feature_cols = vec![None; schema.dims()];
    let mut label_col = None;
    let mut id_col = None;
    for (i, h) in headers.iter().enumerate() {
        if h == LABEL_COLUMN {
            label_col = Some(i);
        } else if h == ID_COLUMN {
            id_col = Some(i);
        } else if let Some(j) = schema.index_of(h) {
            if feature_cols[j].replace(i).is_some() {
                return Err(schema_err(h, "appears more than once"));
            }
        } else {
            return Err(schema_err(h, "is not part of the schema"));
        }
    }
    let label_col = label_col.ok_or_else(|| schema_err(LABEL_COLUMN, "is missing"))?;
    let feature_cols: Vec<usize> = feature_cols
        .iter()
        .zip(&schema.features)
        .map(|(c, f)| c.ok_or_else(|| schema_err(&f.name, "is missing")))
        .collect::<Result<_, _>>()?;

    let mut out = CsvLoad { cases: Vec::new(), dropped_count: 0, excluded_count: 0 };
    let mut seen = HashSet::new();
    for (row_index, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(row_index as u64 + 2, |p| p.line());
        let row_err = |message: String| DataError::Row { line, message };

        let code = record.get(label_col).unwrap_or("");
        let label = match code.parse::<i64>() {
            Ok(1) => Decision::Approve,
            Ok(3) => Decision::Deny,
            Ok(_) => {
                out.excluded_count += 1;
                continue;
            }
            Err(_) => return Err(row_err(format!("{LABEL_COLUMN} value {code:?} is not an integer code"))),
        };

        let mut features = Vec::with_capacity(feature_cols.len());
        let mut missing = false;
        for (&col, spec) in feature_cols.iter().zip(&schema.features) {
            let cell = record.get(col).unwrap_or("");
            if MISSING_MARKERS.contains(&cell) {
                missing = true;
                break;
            }
            let v: f64 =
                cell.parse().map_err(|_| row_err(format!("column {:?}: {cell:?} is not numeric", spec.name)))?;
            if !v.is_finite() {
                return Err(row_err(format!("column {:?}: value is not finite", spec.name)));
            }
            features.push(v);
        }
        if missing {
            out.dropped_count += 1;
            continue;
        }

        let id = match id_col {
            Some(c) => {
                let raw = record.get(c).unwrap_or("");
                raw.parse().map_err(|_| row_err(format!("id {raw:?} is not an unsigned integer")))?
            }
            None => row_index as u64,
        };
        if !seen.insert(id) {
            return Err(row_err(format!("duplicate id {id}")));
        }
        out.cases.push(CaseRecord { id, features, label });
    }
    if out.dropped_count > 0 {
        warn!("dropped {} rows with missing numeric fields", out.dropped_count);
    }
    Ok(out)
}

fn schema_err(column: &str, reason: &str) -> DataError {
    DataError::Schema { column: column.to_string(), reason: reason.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema() -> FeatureSchema {
        FeatureSchema::with_dims(3).unwrap()
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn well_formed_file() {
        let f = write(
            "income,loan_amount,dti_ratio,action_taken\n\
             80,200,30,1\n\
             40,500,55,3\n\
             120,300,20,1\n",
        );
        let load = load_csv(f.path(), &schema()).unwrap();
        assert_eq!(load.cases.len(), 3);
        assert_eq!(load.dropped_count, 0);
        assert_eq!(load.cases[1].label, Decision::Deny);
        assert_eq!(load.cases[2].features, vec![120.0, 300.0, 20.0]);
        assert_eq!(load.cases[2].id, 2);
    }

    #[test]
    fn missing_field_row_is_dropped() {
        let f = write(
            "income,loan_amount,dti_ratio,action_taken\n\
             80,200,30,1\n\
             40,500,,3\n\
             120,300,20,1\n",
        );
        let load = load_csv(f.path(), &schema()).unwrap();
        assert_eq!(load.cases.len(), 2);
        assert_eq!(load.dropped_count, 1);
    }

    #[test]
    fn non_decision_codes_are_excluded() {
        let f = write(
            "id,income,loan_amount,dti_ratio,action_taken\n\
             10,80,200,30,1\n\
             11,40,500,50,4\n\
             12,120,300,20,3\n",
        );
        let load = load_csv(f.path(), &schema()).unwrap();
        assert_eq!(load.cases.iter().map(|c| c.id).collect::<Vec<_>>(), vec![10, 12]);
        assert_eq!(load.excluded_count, 1);
    }

    #[test]
    fn bad_header_names_column() {
        let f = write("income,loan_amt,dti_ratio,action_taken\n1,2,3,1\n");
        match load_csv(f.path(), &schema()) {
            Err(DataError::Schema { column, .. }) => assert_eq!(column, "loan_amt"),
            other => panic!("expected schema error, got {other:?}"),
        }
        let f = write("income,loan_amount,action_taken\n1,2,1\n");
        match load_csv(f.path(), &schema()) {
            Err(DataError::Schema { column, .. }) => assert_eq!(column, "dti_ratio"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_line() {
        let f = write(
            "income,loan_amount,dti_ratio,action_taken\n\
             80,200,30,1\n\
             80,abc,30,1\n",
        );
        match load_csv(f.path(), &schema()) {
            Err(DataError::Row { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("loan_amount"));
            }
            other => panic!("expected row error, got {other:?}"),
        }
    }
}
