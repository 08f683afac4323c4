//! CSV ingestion and export of datasets with columns `z, a, y, x1..xd`.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pseudo::fmt_num;

/// Treatment values accepted on ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TreatmentKind {
    #[default]
    Binary,
    Continuous,
}

pub fn ingest_csv(path: &Path, kind: TreatmentKind) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_csv(file, kind)
}

/// Parses a dataset; rows are numbered from 1 after the header.
pub fn read_csv<R: Read>(reader: R, kind: TreatmentKind) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) if !h.is_empty() && !(h.len() == 1 && h[0].is_empty()) => h.clone(),
        _ => return Err(Error::EmptyFile),
    };
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let col = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let (iz, ia, iy) = (col("z")?, col("a")?, col("y")?);
    let d = headers
        .iter()
        .filter_map(|h| h.strip_prefix(['x', 'X']).and_then(|k| k.parse::<usize>().ok()))
        .max()
        .unwrap_or(0);
    let ix = (1..=d).map(|k| col(&format!("x{k}"))).collect::<Result<Vec<_>>>()?;

    let (mut x, mut z, mut a, mut y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec?;
        let cell = |i: usize| -> Result<f64> {
            let raw = rec.get(i).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::NonNumericCell { row, column: headers[i].to_string(), value: raw.to_string() })
        };
        let av = cell(ia)?;
        if kind == TreatmentKind::Binary && av != 0.0 && av != 1.0 {
            return Err(Error::NonBinaryTreatment { row, value: av });
        }
        z.push(cell(iz)?);
        a.push(av);
        y.push(cell(iy)?);
        for &i in &ix {
            x.push(cell(i)?);
        }
    }
    if z.is_empty() {
        return Err(Error::EmptyFile);
    }
    Dataset::new(x, d, z, a, y)
}

pub fn write_csv<W: Write>(data: &Dataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["z".to_string(), "a".to_string(), "y".to_string()];
    header.extend((1..=data.d()).map(|k| format!("x{k}")));
    out.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![fmt_num(data.z[i]), fmt_num(data.a[i]), fmt_num(data.y[i])];
        rec.extend(data.x_row(i).iter().map(|&v| fmt_num(v)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
