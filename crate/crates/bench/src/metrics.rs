//! Evaluation records and their tidy CSV / JSON emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One evaluated policy. `lambda` is the multiplier the policy was obtained
/// at (the terminal multiplier for δ-sweeps); `delta` is the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub lambda: f64,
    pub delta: f64,
    #[serde(rename = "J", with = "nan_as_null")]
    pub j: f64,
    #[serde(rename = "Jc", with = "nan_as_null")]
    pub jc: f64,
    #[serde(rename = "J_stderr", with = "nan_as_null")]
    pub j_stderr: f64,
    #[serde(rename = "Jc_stderr", with = "nan_as_null")]
    pub jc_stderr: f64,
    /// Seconds spent producing the policy; zero unless timing is requested.
    pub wallclock: f64,
    pub seed: u64,
    /// `ok`, or the error that stopped this point.
    pub status: String,
}

impl MetricsRecord {
    pub fn failed(method: &str, lambda: f64, delta: f64, seed: u64, error: impl ToString) -> Self {
        Self {
            method: method.to_string(),
            lambda,
            delta,
            j: f64::NAN,
            jc: f64::NAN,
            j_stderr: f64::NAN,
            jc_stderr: f64::NAN,
            wallclock: 0.0,
            seed,
            status: error.to_string(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Failed points carry NaN, written as an empty CSV field or JSON `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

pub const CSV_HEADER: [&str; 10] =
    ["method", "lambda", "delta", "J", "Jc", "J_stderr", "Jc_stderr", "wallclock", "seed", "status"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

pub fn write_csv<W: Write>(records: &[MetricsRecord], out: W) -> csv::Result<()> {
    // serde would omit the header for an empty list
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> csv::Result<Vec<MetricsRecord>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn write_json<W: Write>(records: &[MetricsRecord], mut out: W) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut out, records)?;
    writeln!(out)
}

/// Writes `records` to `path` in the given format.
pub fn emit(records: &[MetricsRecord], format: Format, path: &Path) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        Format::Csv => write_csv(records, &mut out).map_err(std::io::Error::other)?,
        Format::Json => write_json(records, &mut out)?,
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<MetricsRecord> {
        vec![
            MetricsRecord {
                method: "exact_npg".into(),
                lambda: 10.0,
                delta: 0.1,
                j: 88.951_660_123_456_78,
                jc: 0.168_414,
                j_stderr: 0.25,
                jc_stderr: 1.5e-3,
                wallclock: 0.0,
                seed: 7,
                status: "ok".into(),
            },
            MetricsRecord::failed("npg", 100.0, 0.1, 8, "closed loop is not stable, spectral radius 1.2"),
        ]
    }

    #[test]
    fn empty_list_is_header_only() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), CSV_HEADER.join(",") + "\n");
    }

    #[test]
    fn csv_roundtrip() {
        let mut buf = Vec::new();
        write_csv(&sample(), &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0], sample()[0]);
        // NaN never compares equal
        assert!(back[1].j.is_nan() && back[1].status == sample()[1].status);
    }

    #[test]
    fn json_and_csv_agree() {
        let mut c = Vec::new();
        write_csv(&sample(), &mut c).unwrap();
        let mut j = Vec::new();
        write_json(&sample(), &mut j).unwrap();
        let from_json: Vec<MetricsRecord> = serde_json::from_slice(&j).unwrap();
        let from_csv = read_csv(c.as_slice()).unwrap();
        assert_eq!(from_json[0], from_csv[0]);
        assert!(from_json[1].jc.is_nan() && from_csv[1].jc.is_nan());
    }

    #[test]
    fn unwritable_path_is_an_error() {
        assert!(emit(&sample(), Format::Csv, Path::new("/nonexistent-dir/m.csv")).is_err());
    }
}
