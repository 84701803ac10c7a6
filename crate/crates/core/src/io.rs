//! CSV and JSON artifacts: matrices, snapshots, trajectories and reports.
//!
//! Matrices are stored as CSV with a leading `# rows=R cols=C` line and
//! floats in `{:e}` form, so a zero-column matrix round-trips. Tables use
//! Rust's shortest round-trip float formatting, which keeps output
//! byte-identical across runs.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DktvError, Result};
use crate::net::{LayerSpec, LossBreakdown, ObservableNet};
use crate::pipeline::DkrSnapshot;
use crate::regression::KoopmanMatrices;

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(fs::File::create(path)?)
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "# rows={} cols={}", m.nrows(), m.ncols())?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

fn parse_shape(line: &str) -> Option<(usize, usize)> {
    let rest = line.strip_prefix("# rows=")?;
    let (r, c) = rest.trim().split_once(" cols=")?;
    Some((r.parse().ok()?, c.parse().ok()?))
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let (rows, cols) =
        parse_shape(&first).ok_or_else(|| DktvError::Parse(format!("{}: missing '# rows=R cols=C' header", path.display())))?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut seen = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != cols && !(cols == 0 && rec.len() == 1 && rec[0].is_empty()) {
            return Err(DktvError::Parse(format!("{}: row {seen} has {} fields, expected {cols}", path.display(), rec.len())));
        }
        for field in rec.iter().take(cols) {
            data.push(field.trim().parse::<f64>().map_err(|e| DktvError::Parse(format!("{}: {e}", path.display())))?);
        }
        seen += 1;
    }
    if seen != rows && cols > 0 {
        return Err(DktvError::Parse(format!("{}: {seen} rows, expected {rows}", path.display())));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Writes a numeric table with a header row. `None` cells are left empty.
pub fn write_table(path: &Path, headers: &[String], rows: &[Vec<Option<f64>>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(headers)?;
    for row in rows {
        if row.len() != headers.len() {
            return Err(DktvError::dims("table row", headers.len(), row.len()));
        }
        w.write_record(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table written by [`write_table`]; empty cells become `None`.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut row = Vec::with_capacity(rec.len());
        for f in rec.iter() {
            row.push(if f.is_empty() {
                None
            } else {
                Some(f.parse::<f64>().map_err(|e| DktvError::Parse(format!("{}: {e}", path.display())))?)
            });
        }
        rows.push(row);
    }
    Ok((headers, rows))
}

/// `t, x1..xn, u1..um`; the final row has no input.
pub fn write_trajectory_csv(path: &Path, times: &[f64], states: &DMatrix<f64>, inputs: &DMatrix<f64>) -> Result<()> {
    let (n, m) = (states.nrows(), inputs.nrows());
    let mut headers = vec!["t".to_string()];
    headers.extend((1..=n).map(|i| format!("x{i}")));
    headers.extend((1..=m).map(|i| format!("u{i}")));
    let rows: Vec<Vec<Option<f64>>> = (0..states.ncols())
        .map(|k| {
            let mut row = vec![times.get(k).copied()];
            row.extend(states.column(k).iter().map(|&v| Some(v)));
            row.extend((0..m).map(|i| (k < inputs.ncols()).then(|| inputs[(i, k)])));
            row
        })
        .collect();
    write_table(path, &headers, &rows)
}

/// Reads a file written by [`write_trajectory_csv`] back into
/// `(times, states, inputs)`; inputs have one column fewer than states.
pub fn read_trajectory_csv(path: &Path) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (headers, rows) = read_table(path)?;
    let n = headers.iter().filter(|h| h.starts_with('x')).count();
    let m = headers.iter().filter(|h| h.starts_with('u')).count();
    if headers.first().map(String::as_str) != Some("t") || headers.len() != 1 + n + m {
        return Err(DktvError::Parse(format!("{}: not a trajectory table", path.display())));
    }
    let missing = || DktvError::Parse(format!("{}: missing value", path.display()));
    let len = rows.len();
    let mut times = Vec::with_capacity(len);
    let mut states = DMatrix::zeros(n, len);
    let mut inputs = DMatrix::zeros(m, len.saturating_sub(1));
    for (k, row) in rows.iter().enumerate() {
        times.push(row[0].ok_or_else(missing)?);
        for i in 0..n {
            states[(i, k)] = row[1 + i].ok_or_else(missing)?;
        }
        if k + 1 < len {
            for i in 0..m {
                inputs[(i, k)] = row[1 + n + i].ok_or_else(missing)?;
            }
        }
    }
    Ok((times, states, inputs))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(fs::File::open(path)?))?)
}

/// Hex SHA-256 of the matrix shape and little-endian element bytes.
pub fn matrix_hash(m: &DMatrix<f64>) -> String {
    let mut h = Sha256::new();
    h.update((m.nrows() as u64).to_le_bytes());
    h.update((m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    tau: usize,
    k_start: usize,
    beta: usize,
    diverged: bool,
    n: usize,
    m: usize,
    r: usize,
    layers: Vec<LayerSpec>,
    #[serde(default)]
    passthrough: bool,
}

/// Writes one snapshot as `manifest.json`, `A.csv`, `B.csv`, `C.csv`,
/// `theta.txt` and `loss.csv` under `dir`.
pub fn save_snapshot(dir: &Path, s: &DkrSnapshot) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        tau: s.tau,
        k_start: s.k_start,
        beta: s.beta,
        diverged: s.diverged,
        n: s.n(),
        m: s.m(),
        r: s.r(),
        layers: s.net.layers().to_vec(),
        passthrough: s.net.passthrough(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_matrix_csv(&dir.join("A.csv"), &s.matrices.a)?;
    write_matrix_csv(&dir.join("B.csv"), &s.matrices.b)?;
    write_matrix_csv(&dir.join("C.csv"), &s.matrices.c)?;
    let mut f = create(&dir.join("theta.txt"))?;
    for v in s.net.params().iter() {
        writeln!(f, "{v:e}")?;
    }
    let headers: Vec<String> = ["epoch", "loss", "l1", "l2", "penalty"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<Option<f64>>> = s
        .train_stats
        .iter()
        .enumerate()
        .map(|(e, l)| vec![Some(e as f64), Some(l.total), Some(l.l1), Some(l.l2), Some(l.penalty)])
        .collect();
    write_table(&dir.join("loss.csv"), &headers, &rows)
}

pub fn load_snapshot(dir: &Path) -> Result<DkrSnapshot> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let text = fs::read_to_string(dir.join("theta.txt"))?;
    let theta = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>().map_err(|e| DktvError::Parse(format!("theta.txt: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let net = ObservableNet::new(manifest.layers, theta)?.with_passthrough(manifest.passthrough);
    let matrices = KoopmanMatrices {
        a: read_matrix_csv(&dir.join("A.csv"))?,
        b: read_matrix_csv(&dir.join("B.csv"))?,
        c: read_matrix_csv(&dir.join("C.csv"))?,
    };
    if matrices.a.shape() != (manifest.r, manifest.r)
        || matrices.b.shape() != (manifest.r, manifest.m)
        || matrices.c.shape() != (manifest.n, manifest.r)
    {
        return Err(DktvError::Parse(format!("{}: matrix shapes disagree with manifest", dir.display())));
    }
    let (_, rows) = read_table(&dir.join("loss.csv"))?;
    let train_stats = rows
        .iter()
        .map(|r| LossBreakdown {
            total: r[1].unwrap_or(f64::NAN),
            l1: r[2].unwrap_or(f64::NAN),
            l2: r[3].unwrap_or(f64::NAN),
            penalty: r[4].unwrap_or(f64::NAN),
        })
        .collect();
    Ok(DkrSnapshot {
        net,
        matrices,
        tau: manifest.tau,
        k_start: manifest.k_start,
        beta: manifest.beta,
        train_stats,
        diverged: manifest.diverged,
    })
}

pub fn snapshot_dir(root: &Path, tau: usize) -> PathBuf {
    root.join(format!("snapshot_{tau:04}"))
}

pub fn save_run(root: &Path, snapshots: &[DkrSnapshot]) -> Result<()> {
    for s in snapshots {
        save_snapshot(&snapshot_dir(root, s.tau), s)?;
    }
    Ok(())
}

/// Loads `snapshot_0000`, `snapshot_0001`, ... until the first gap.
pub fn load_run(root: &Path) -> Result<Vec<DkrSnapshot>> {
    let mut out = Vec::new();
    while snapshot_dir(root, out.len()).join("manifest.json").exists() {
        out.push(load_snapshot(&snapshot_dir(root, out.len()))?);
    }
    if out.is_empty() {
        return Err(DktvError::MissingSnapshots(root.to_path_buf()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{chain_layers, Activation};

    #[test]
    fn matrix_round_trip_including_empty() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.5e-17, 3.0, f64::MAX, 0.1, -0.0]);
        let p = dir.path().join("m.csv");
        write_matrix_csv(&p, &m).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), m);
        let e = DMatrix::<f64>::zeros(4, 0);
        write_matrix_csv(&p, &e).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap().shape(), (4, 0));
        fs::write(&p, "1,2\n").unwrap();
        assert!(read_matrix_csv(&p).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = ObservableNet::seeded(chain_layers(2, &[(5, Activation::Relu), (3, Activation::Gaussian)]), 4).unwrap();
        let s = DkrSnapshot {
            net,
            matrices: KoopmanMatrices {
                a: DMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 * 0.1),
                b: DMatrix::from_fn(3, 1, |i, _| i as f64),
                c: DMatrix::from_fn(2, 3, |i, j| (i + j) as f64 / 7.0),
            },
            tau: 0,
            k_start: 0,
            beta: 8,
            train_stats: vec![LossBreakdown {
                total: 1.5,
                l1: 0.5,
                l2: 0.25,
                penalty: 0.0,
            }],
            diverged: false,
        };
        save_run(dir.path(), std::slice::from_ref(&s)).unwrap();
        let back = load_run(dir.path()).unwrap();
        assert_eq!(back, vec![s]);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_run(empty.path()), Err(DktvError::MissingSnapshots(_))));
    }

    #[test]
    fn trajectory_table_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let x = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let u = DMatrix::from_row_slice(1, 2, &[0.5, 0.25]);
        write_trajectory_csv(&p, &[0.0, 0.1, 0.2], &x, &u).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "t,x1,x2,u1\n0,0,3,0.5\n0.1,1,4,0.25\n0.2,2,5,\n");
        let (h, rows) = read_table(&p).unwrap();
        assert_eq!(h, vec!["t", "x1", "x2", "u1"]);
        assert_eq!(rows[2][3], None);
        let (t, xs, us) = read_trajectory_csv(&p).unwrap();
        assert_eq!(t, vec![0.0, 0.1, 0.2]);
        assert_eq!(xs, x);
        assert_eq!(us, u);
    }

    #[test]
    fn hash_depends_on_shape_and_values() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(1, 4, &[1.0, 3.0, 2.0, 4.0]);
        assert_ne!(matrix_hash(&a), matrix_hash(&b));
        assert_eq!(matrix_hash(&a), matrix_hash(&a.clone()));
        assert_eq!(matrix_hash(&a).len(), 64);
    }
}
