//! CSV and JSON emission. Floats always carry 17 significant digits.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

/// `x` in scientific notation with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.16e}")
    }
}

/// One CSV cell.
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_f64(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

pub const TAU_SERIES_HEADER: [&str; 5] = ["block", "k", "tau_star", "lambda_pow_k_tau", "t_k"];
pub const BLOWUP_CURVE_HEADER: [&str; 5] = ["block", "x_mid", "T_j", "depth", "status"];
pub const ERROR_TABLE_HEADER: [&str; 4] = ["I", "rel_l2", "rel_linf", "eval_time"];
pub const NORM_TRACE_HEADER: [&str; 4] = ["t", "l2", "linf", "level"];
pub const SNAPSHOTS_HEADER: [&str; 5] = ["level", "k", "x", "t", "value"];
pub const CONVERGENCE_HEADER: [&str; 6] = [
    "I",
    "I_next",
    "order_l2",
    "order_linf",
    "ratio",
    "below_threshold",
];

/// Writes a header and rows; a row of the wrong width is an error.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<Cell>]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for (n, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!(
                    "row {n} has {} cells, header has {}",
                    row.len(),
                    header.len()
                ),
            ));
        }
        w.write_record(row.iter().map(Cell::render))?;
    }
    w.flush()
}

/// Pretty JSON whose floats use the same 17-digit form as the CSV files.
pub struct FixedDigits<'a>(PrettyFormatter<'a>);

impl Default for FixedDigits<'_> {
    fn default() -> Self {
        Self(PrettyFormatter::with_indent(b"  "))
    }
}

impl Formatter for FixedDigits<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedDigits::default());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let s = to_json_string(value).map_err(io::Error::other)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(s.as_bytes())?;
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_keep_17_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.0), "-2.0000000000000000e0");
        assert_eq!(fmt_f64(f64::NAN), "nan");
        let back: f64 = fmt_f64(std::f64::consts::PI).parse().unwrap();
        assert_eq!(back, std::f64::consts::PI);
    }

    #[test]
    fn json_floats_round_trip() {
        let v = serde_json::json!({"a": [0.1, 2.5], "n": 3, "nan": f64::NAN});
        let s = to_json_string(&v).unwrap();
        assert!(s.contains("1.0000000000000001e-1"));
        assert!(s.contains("\"nan\": null"));
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["a"][0].as_f64(), Some(0.1));
        assert_eq!(back["n"].as_u64(), Some(3));
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let rows = vec![vec![Cell::from(1usize), Cell::from(0.5)]];
        write_csv(&path, &["a", "b"], &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "a,b\n1,5.0000000000000000e-1\n");
        assert!(write_csv(&path, &["a"], &rows).is_err());
    }
}
