//! Snapshot matrices and their on-disk formats.
//!
//! Two formats are supported:
//!
//! * `csv`: one snapshot per row, column 0 is time, remaining columns are
//!   space points. An optional header row names the columns.
//! * `f64bin`: little-endian binary: magic `MRCO`, `u32` format version,
//!   `u64` n_space, `u64` n_time, `n_time` times, then `n_time` blocks of
//!   `n_space` values (one contiguous block per snapshot).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const F64BIN_MAGIC: &[u8; 4] = b"MRCO";
pub const F64BIN_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Relative tolerance on the time step when checking grid uniformity.
pub const GRID_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Csv,
    F64bin,
}

impl FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(MatrixFormat::Csv),
            "f64bin" | "bin" => Ok(MatrixFormat::F64bin),
            other => Err(Error::Config(format!("unknown matrix format '{other}'"))),
        }
    }
}

impl MatrixFormat {
    /// Guess the format from a file extension, defaulting to `f64bin`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::F64bin,
        }
    }
}

/// Real data on a uniform time grid, stored space × time.
///
/// Each column is one snapshot. Multi-variable data is stacked along the
/// space axis; `space_labels` can record which rows belong to which variable.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    values: DMatrix<f64>,
    times: Vec<f64>,
    space_labels: Option<Vec<String>>,
}

impl SnapshotMatrix {
    pub fn new(values: DMatrix<f64>, times: Vec<f64>) -> Result<Self> {
        Self::with_labels(values, times, None)
    }

    pub fn with_labels(
        values: DMatrix<f64>,
        times: Vec<f64>,
        space_labels: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n_space, n_time) = values.shape();
        if n_space < 1 {
            return Err(Error::InvalidMatrix("n_space must be at least 1".into()));
        }
        if n_time < 2 {
            return Err(Error::InvalidMatrix("n_time must be at least 2".into()));
        }
        if times.len() != n_time {
            return Err(Error::InvalidMatrix(format!(
                "{} times for {} snapshots",
                times.len(),
                n_time
            )));
        }
        if let Some(labels) = &space_labels {
            if labels.len() != n_space {
                return Err(Error::InvalidMatrix(format!(
                    "{} space labels for {} space points",
                    labels.len(),
                    n_space
                )));
            }
        }
        for (i, t) in times.iter().enumerate() {
            if !t.is_finite() {
                return Err(Error::NonFiniteValue { row: i, col: 0 });
            }
        }
        check_uniform_grid(&times)?;
        for j in 0..n_time {
            for i in 0..n_space {
                if !values[(i, j)].is_finite() {
                    return Err(Error::NonFiniteValue { row: j, col: i + 1 });
                }
            }
        }
        Ok(SnapshotMatrix {
            values,
            times,
            space_labels,
        })
    }

    /// Build a matrix on the grid `t0, t0 + dt, ...`.
    pub fn from_grid(values: DMatrix<f64>, t0: f64, dt: f64) -> Result<Self> {
        let times = (0..values.ncols()).map(|i| t0 + dt * i as f64).collect();
        Self::new(values, times)
    }

    pub fn n_space(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_time(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn space_labels(&self) -> Option<&[String]> {
        self.space_labels.as_deref()
    }

    /// Mean sampling interval.
    pub fn dt(&self) -> f64 {
        (self.times[self.times.len() - 1] - self.times[0]) / (self.times.len() - 1) as f64
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    /// Replace the values, keeping the time grid and labels.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        Self::with_labels(values, self.times.clone(), self.space_labels.clone())
    }
}

fn check_uniform_grid(times: &[f64]) -> Result<()> {
    let n = times.len();
    let expected = (times[n - 1] - times[0]) / (n - 1) as f64;
    if expected <= 0.0 {
        return Err(Error::NonUniformTimeGrid {
            row: 1,
            step: times[1] - times[0],
            expected,
        });
    }
    for i in 1..n {
        let step = times[i] - times[i - 1];
        if (step - expected).abs() > GRID_RTOL * expected {
            return Err(Error::NonUniformTimeGrid {
                row: i,
                step,
                expected,
            });
        }
    }
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<SnapshotMatrix> {
    let path = path.as_ref();
    match format {
        MatrixFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(&text, path)
        }
        MatrixFormat::F64bin => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_f64bin(&bytes, path)
        }
    }
}

pub fn save_matrix(m: &SnapshotMatrix, path: impl AsRef<Path>, format: MatrixFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        MatrixFormat::Csv => encode_csv(m).into_bytes(),
        MatrixFormat::F64bin => encode_f64bin(m),
    };
    write_atomic(path, &bytes)
}

/// Write to a sibling temporary file and rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn parse_csv(text: &str, path: &Path) -> Result<SnapshotMatrix> {
    let parse_err = |row: usize, col: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        col,
        msg,
    };

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();

    let mut labels = None;
    if let Some(&(_, first)) = lines.peek() {
        let head = first.split(',').next().unwrap_or("").trim();
        if head.parse::<f64>().is_err() {
            let cols: Vec<String> = first.split(',').map(|s| s.trim().to_string()).collect();
            labels = Some(cols[1..].to_vec());
            lines.next();
        }
    }

    let mut times = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let mut width = labels.as_ref().map(|l| l.len());
    for (line_no, line) in lines {
        let mut fields = line.split(',');
        let t_field = fields.next().unwrap_or("");
        let t = t_field
            .trim()
            .parse::<f64>()
            .map_err(|e| parse_err(line_no, 1, format!("time '{t_field}': {e}")))?;
        if !t.is_finite() {
            return Err(Error::NonFiniteValue {
                row: line_no,
                col: 1,
            });
        }
        let mut count = 0;
        for (c, field) in fields.enumerate() {
            let v = field
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(line_no, c + 2, format!("value '{field}': {e}")))?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    row: line_no,
                    col: c + 2,
                });
            }
            data.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(parse_err(
                    line_no,
                    count + 1,
                    format!("expected {w} space columns, found {count}"),
                ))
            }
            _ => {}
        }
        times.push(t);
    }

    let n_space = width.unwrap_or(0);
    let n_time = times.len();
    if n_space == 0 || n_time < 2 {
        return Err(parse_err(
            n_time + 1,
            1,
            format!("need at least one space column and two snapshots, found {n_space}x{n_time}"),
        ));
    }
    // `data` is time-major which is exactly the column-major layout of a
    // space × time matrix.
    let values = DMatrix::from_vec(n_space, n_time, data);
    check_uniform_grid(&times).map_err(|e| match e {
        // report the file line rather than the snapshot index
        Error::NonUniformTimeGrid {
            row,
            step,
            expected,
        } => Error::NonUniformTimeGrid {
            row: row + 1 + usize::from(labels.is_some()),
            step,
            expected,
        },
        other => other,
    })?;
    SnapshotMatrix::with_labels(values, times, labels)
}

fn encode_csv(m: &SnapshotMatrix) -> String {
    let mut out = String::new();
    out.push('t');
    for i in 0..m.n_space() {
        out.push(',');
        match m.space_labels() {
            Some(labels) => out.push_str(&labels[i]),
            None => out.push_str(&format!("s{i}")),
        }
    }
    out.push('\n');
    for j in 0..m.n_time() {
        out.push_str(&format_f64(m.times[j]));
        for i in 0..m.n_space() {
            out.push(',');
            out.push_str(&format_f64(m.values[(i, j)]));
        }
        out.push('\n');
    }
    out
}

/// Shortest decimal that round-trips to the same bits.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn encode_f64bin(m: &SnapshotMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * (m.n_time() * (m.n_space() + 1)));
    out.extend_from_slice(F64BIN_MAGIC);
    out.extend_from_slice(&F64BIN_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.n_space() as u64).to_le_bytes());
    out.extend_from_slice(&(m.n_time() as u64).to_le_bytes());
    for t in &m.times {
        out.extend_from_slice(&t.to_le_bytes());
    }
    // column-major storage already holds one snapshot per contiguous block
    for v in m.values.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode_f64bin(bytes: &[u8], path: &Path) -> Result<SnapshotMatrix> {
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        row: 0,
        col: 0,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(format!(
            "file too short for header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[0..4] != F64BIN_MAGIC {
        return Err(parse_err("bad magic, expected MRCO".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != F64BIN_VERSION {
        return Err(parse_err(format!("unsupported format version {version}")));
    }
    let n_space = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let n_time = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = n_time
        .checked_mul(n_space + 1)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| parse_err("header dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(parse_err(format!(
            "expected {expected} bytes for {n_space}x{n_time}, found {}",
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (times, values) = floats.split_at(n_time);
    let values = DMatrix::from_column_slice(n_space, n_time, values);
    SnapshotMatrix::new(values, times.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn csv_constant_field() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "t,s0,s1\n0,1,2\n0.5,1,2\n1.0,1,2").unwrap();
        let m = load_matrix(&p, MatrixFormat::Csv).unwrap();
        assert_eq!(m.n_space(), 2);
        assert_eq!(m.n_time(), 3);
        assert_eq!(m.dt(), 0.5);
        assert_eq!(
            m.space_labels().unwrap(),
            &["s0".to_string(), "s1".to_string()]
        );
        assert_eq!(m.values()[(1, 2)], 2.0);

        let b = dir.path().join("a.f64bin");
        save_matrix(&m, &b, MatrixFormat::F64bin).unwrap();
        let back = load_matrix(&b, MatrixFormat::F64bin).unwrap();
        assert_eq!(back.values(), m.values());
        assert_eq!(back.times(), m.times());
    }

    #[test]
    fn csv_non_uniform_grid() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "t,s0\n0,1\n0.5,1\n1.1,1\n").unwrap();
        match load_matrix(&p, MatrixFormat::Csv) {
            Err(Error::NonUniformTimeGrid { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected NonUniformTimeGrid, got {other:?}"),
        }
    }

    #[test]
    fn csv_non_finite_and_malformed() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "t,s0,s1\n0,1,2\n1,NaN,2\n").unwrap();
        assert!(matches!(
            load_matrix(&p, MatrixFormat::Csv),
            Err(Error::NonFiniteValue { row: 3, col: 2 })
        ));
        fs::write(&p, "t,s0,s1\n0,1,2\n1,x,2\n").unwrap();
        assert!(matches!(
            load_matrix(&p, MatrixFormat::Csv),
            Err(Error::Parse { row: 3, col: 2, .. })
        ));
        fs::write(&p, "0,1,2\n1,2\n").unwrap();
        assert!(matches!(
            load_matrix(&p, MatrixFormat::Csv),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn csv_small_matrix_layout() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("small.csv");
        let m = SnapshotMatrix::new(DMatrix::from_row_slice(1, 2, &[0.1, 0.2]), vec![0.0, 1.0])
            .unwrap();
        save_matrix(&m, &p, MatrixFormat::Csv).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec!["t,s0", "0.0,0.1", "1.0,0.2"]);
        let back = load_matrix(&p, MatrixFormat::Csv).unwrap();
        assert_eq!(back.values(), m.values());
        assert_eq!(back.times(), m.times());
        assert_eq!(back.space_labels(), Some(&["s0".to_string()][..]));
    }

    #[test]
    fn unwritable_path() {
        let m = SnapshotMatrix::new(DMatrix::from_row_slice(1, 2, &[0.1, 0.2]), vec![0.0, 1.0])
            .unwrap();
        let err = save_matrix(&m, "/nonexistent-dir/x/y.f64bin", MatrixFormat::F64bin).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn f64bin_rejects_truncation_and_bad_magic() {
        let m = SnapshotMatrix::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            vec![0.0, 1.0],
        )
        .unwrap();
        let bytes = encode_f64bin(&m);
        let p = Path::new("mem");
        assert!(decode_f64bin(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_f64bin(&bad, p).is_err());
        assert_eq!(decode_f64bin(&bytes, p).unwrap(), m);
    }

    #[test]
    fn invariants_enforced() {
        assert!(SnapshotMatrix::new(DMatrix::zeros(1, 1), vec![0.0]).is_err());
        assert!(SnapshotMatrix::new(DMatrix::zeros(1, 2), vec![1.0, 0.0]).is_err());
        let mut v = DMatrix::zeros(2, 3);
        v[(1, 2)] = f64::INFINITY;
        assert!(matches!(
            SnapshotMatrix::new(v, vec![0.0, 1.0, 2.0]),
            Err(Error::NonFiniteValue { row: 2, col: 2 })
        ));
    }
}
