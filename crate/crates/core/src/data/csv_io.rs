use std::path::Path;

use super::{DataError, RawSeries, Result};

const DATE_NAMES: [&str; 3] = ["date", "time", "timestamp"];

/// Loads a headered CSV. All columns except the date column are channels.
///
/// When `date_column` is `None`, a leading column named `date`, `time` or
/// `timestamp` (any case) is treated as the date column. Dates are kept as
/// opaque strings.
pub fn load_csv(path: impl AsRef<Path>, date_column: Option<&str>) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    if headers.iter().all(|h| h.parse::<f64>().is_ok()) {
        return Err(DataError::MissingHeader(path.to_path_buf()));
    }

    let date_idx = match date_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::UnknownColumn(name.to_string()))?,
        ),
        None => headers
            .get(0)
            .filter(|h| DATE_NAMES.iter().any(|d| h.eq_ignore_ascii_case(d)))
            .map(|_| 0),
    };
    let channel_cols: Vec<usize> = (0..headers.len()).filter(|&i| Some(i) != date_idx).collect();
    if channel_cols.is_empty() {
        return Err(DataError::Invalid(format!("{}: no numeric channels", path.display())));
    }
    let channel_names: Vec<String> = channel_cols.iter().map(|&i| headers[i].to_string()).collect();

    let mut values = Vec::new();
    let mut timestamps = date_idx.map(|_| Vec::new());
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = i + 1;
        if record.len() != headers.len() {
            return Err(DataError::Ragged {
                path: path.to_path_buf(),
                row,
                found: record.len(),
                expected: headers.len(),
            });
        }
        for &col in &channel_cols {
            let cell = &record[col];
            let v = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::NonNumeric {
                    path: path.to_path_buf(),
                    row,
                    column: col + 1,
                    name: headers[col].to_string(),
                    value: cell.to_string(),
                })?;
            values.push(v);
        }
        if let (Some(ts), Some(d)) = (timestamps.as_mut(), date_idx) {
            ts.push(record[d].to_string());
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    RawSeries::new(values, channel_names, timestamps)
}

/// Writes a series with a leading `date` column when timestamps are present.
pub fn write_csv(series: &RawSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<&str> = Vec::new();
    if series.timestamps().is_some() {
        header.push("date");
    }
    header.extend(series.channel_names().iter().map(String::as_str));
    writer.write_record(&header).map_err(csv_err)?;
    for r in 0..series.len() {
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ts) = series.timestamps() {
            record.push(ts[r].clone());
        }
        // `{}` on f64 prints the shortest string that parses back to the same bits
        record.extend(series.row(r).iter().map(|v| format!("{v}")));
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}
