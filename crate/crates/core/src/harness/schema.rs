use std::path::Path;

use super::{io_err, HarnessError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnType {
    /// Non-negative integer.
    Count,
    /// Finite float.
    Real,
    /// Finite float in `[0, 1]`.
    Rate,
    /// Non-empty text.
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvSchema {
    pub file: &'static str,
    pub columns: &'static [(&'static str, ColumnType)],
}

use ColumnType::{Count, Rate, Real, Text};

/// Every CSV file the tools write.
pub const SCHEMAS: &[CsvSchema] = &[
    CsvSchema {
        file: "metrics.csv",
        columns: &[
            ("wall_time_s", Real),
            ("env_steps", Count),
            ("episodes", Count),
            ("solve_rate", Rate),
            ("mean_return", Real),
            ("loss", Real),
            ("pg_loss", Real),
            ("baseline_loss", Real),
            ("entropy", Real),
        ],
    },
    CsvSchema {
        file: "eval.csv",
        columns: &[
            ("wall_time_s", Real),
            ("env_steps", Count),
            ("episodes", Count),
            ("solve_rate", Rate),
            ("mean_return", Real),
        ],
    },
    CsvSchema {
        file: "attention.csv",
        columns: &[
            ("block", Count),
            ("head", Count),
            ("source_cell", Text),
            ("source_object", Text),
            ("target_cell", Text),
            ("target_object", Text),
            ("weight", Rate),
        ],
    },
    CsvSchema {
        file: "generalization.csv",
        columns: &[
            ("condition", Text),
            ("split", Text),
            ("solution_length", Text),
            ("episodes", Count),
            ("solved", Count),
            ("solve_rate", Rate),
            ("mean_return", Real),
        ],
    },
    CsvSchema {
        file: "random_baseline.csv",
        columns: &[
            ("solution_length", Count),
            ("episodes", Count),
            ("solved", Count),
            ("solve_rate", Rate),
        ],
    },
];

pub fn schema_for(file_name: &str) -> Option<&'static CsvSchema> {
    SCHEMAS.iter().find(|s| s.file == file_name)
}

fn check_field(value: &str, ty: ColumnType) -> Result<(), String> {
    match ty {
        Count => value.parse::<u64>().map(|_| ()).map_err(|_| format!("{value:?} is not a count")),
        Real | Rate => {
            let v: f64 = value.parse().map_err(|_| format!("{value:?} is not a number"))?;
            if !v.is_finite() {
                return Err(format!("{value:?} is not finite"));
            }
            if ty == Rate && !(0.0..=1.0).contains(&v) {
                return Err(format!("{value} is outside [0, 1]"));
            }
            Ok(())
        }
        Text => {
            if value.is_empty() {
                Err("empty text field".into())
            } else {
                Ok(())
            }
        }
    }
}

/// Parses `path` against `schema`: exact header, exact column count, typed
/// fields. Returns the number of data rows.
pub fn check_csv(path: &Path, schema: &CsvSchema) -> Result<usize, HarnessError> {
    let schema_err = |line: u64, detail: String| HarnessError::Schema {
        path: path.to_owned(),
        line,
        detail,
    };
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(schema_err(1, "missing header".into())),
    };
    let expected: Vec<&str> = schema.columns.iter().map(|(n, _)| *n).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(schema_err(1, format!("header {:?}, expected {expected:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = 0;
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != schema.columns.len() {
            return Err(schema_err(line, format!("{} fields, expected {}", rec.len(), schema.columns.len())));
        }
        for (value, (name, ty)) in rec.iter().zip(schema.columns) {
            check_field(value, *ty).map_err(|d| schema_err(line, format!("column {name}: {d}")))?;
        }
        rows += 1;
    }
    Ok(rows)
}

/// Checks every known CSV file directly inside `dir`; returns
/// `(file name, rows)` for each one found.
pub fn check_dir(dir: &Path) -> Result<Vec<(String, usize)>, HarnessError> {
    let mut found = Vec::new();
    for schema in SCHEMAS {
        let path = dir.join(schema.file);
        if path.exists() {
            found.push((schema.file.to_owned(), check_csv(&path, schema)?));
        }
    }
    Ok(found)
}
