//! Sample dumps: header `z0,…,z{d−1}`, one sample per row, 17 significant
//! digits in exponent notation.

use std::path::Path;

use ndarray::Array2;

use crate::error::CliError;

pub fn format_samples(samples: &Array2<f64>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record((0..samples.ncols()).map(|j| format!("z{j}")))
        .expect("writing to memory");
    for row in samples.rows() {
        w.write_record(row.iter().map(|x| format!("{x:.16e}")))
            .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("ASCII output")
}

pub fn write_samples(path: &Path, samples: &Array2<f64>) -> Result<(), CliError> {
    std::fs::write(path, format_samples(samples)).map_err(|e| CliError::io(path, e))
}

pub fn parse_samples(text: &str) -> Result<Array2<f64>, String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let d = r.headers().map_err(|e| e.to_string())?.len();
    let mut values = Vec::new();
    let mut n = 0;
    for record in r.records() {
        let record = record.map_err(|e| e.to_string())?;
        for field in record.iter() {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| format!("row {}: {e}", n + 1))?,
            );
        }
        n += 1;
    }
    Array2::from_shape_vec((n, d), values).map_err(|e| e.to_string())
}
