//! Run records and their CSV form.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "run_id,seed,method,sparsity,metric,dataset,value,wall_time_s";

/// One measured value. `(run_id, seed, method, sparsity, metric, dataset)`
/// identifies it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub sparsity: f64,
    pub metric: String,
    pub dataset: String,
    pub value: f64,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn key(&self) -> (&str, u64, &str, u64, &str, &str) {
        (&self.run_id, self.seed, &self.method, self.sparsity.to_bits(), &self.metric, &self.dataset)
    }
}

fn data_err(e: csv::Error) -> Error {
    Error::Data(format!("records csv: {e}"))
}

/// Rejects record sets that repeat an identifying key.
pub fn check_unique(records: &[RunRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.key()) {
            return Err(Error::arg(format!(
                "duplicate record {} seed {} {} {} {} {}",
                r.run_id, r.seed, r.method, r.sparsity, r.metric, r.dataset
            )));
        }
    }
    Ok(())
}

/// Writes records as CSV with the fixed header. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv(records: &[RunRecord], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(',')).map_err(data_err)?;
    for r in records {
        w.serialize(r).map_err(data_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(records: &[RunRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

pub fn read_csv(input: impl Read) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(data_err)?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Data(format!("unexpected records header '{}'", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(data_err)).collect()
}

pub fn save(path: &std::path::Path, records: &[RunRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_csv(records, std::fs::File::create(path)?)
}

pub fn load(path: &std::path::Path) -> Result<Vec<RunRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(metric: &str, value: f64) -> RunRecord {
        RunRecord {
            run_id: "snip_0.9".into(),
            seed: 2,
            method: "snip".into(),
            sparsity: 0.9,
            metric: metric.into(),
            dataset: "clean, \"quoted\"".into(),
            value,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let rs = vec![rec("accuracy", 0.1 + 0.2), rec("brier", 1e-300), rec("lipschitz", -0.0)];
        let text = to_csv_string(&rs).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        let back = read_csv(text.as_bytes()).unwrap();
        assert_eq!(back, rs);
        assert!(back.iter().zip(&rs).all(|(a, b)| a.value.to_bits() == b.value.to_bits()));
    }

    #[test]
    fn header_is_checked() {
        assert!(read_csv("a,b\n1,2\n".as_bytes()).is_err());
        let empty = to_csv_string(&[]).unwrap();
        assert_eq!(empty.trim_end(), CSV_HEADER);
        assert!(read_csv(empty.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn duplicates_are_rejected() {
        assert!(check_unique(&[rec("a", 1.0), rec("b", 1.0)]).is_ok());
        assert!(check_unique(&[rec("a", 1.0), rec("a", 2.0)]).is_err());
    }
}
