//! Run-directory management and CSV/snapshot emission.
//!
//! All floating-point values are written with 17 significant digits
//! (`{:.16e}`), so CSVs round-trip losslessly and identical runs produce
//! byte-identical files.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{Array2, ArrayD, ArrayViewD};

use coordflow_core::grid::GridRef;
use coordflow_core::integrator::StepRecord;
use coordflow_core::tt::TensorTrain;

/// Lossless float formatting (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Exclusive ownership of an output directory for the duration of a run.
/// The lock file is removed when the guard drops, including on abort; a
/// stale lock after a crash must be removed by hand.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| {
                format!(
                    "output directory {} is locked by another run \
                     (remove {} if that run crashed)",
                    dir.display(),
                    path.display()
                )
            })?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// A line-buffered CSV file, flushed after every row so partial output
/// survives an abort.
pub struct CsvFile {
    w: BufWriter<File>,
}

impl CsvFile {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let file = File::create(path)
            .with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{header}")?;
        w.flush()?;
        Ok(Self { w })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.w, "{}", fields.join(","))?;
        self.w.flush()?;
        Ok(())
    }
}

/// Column header for steps.csv at dimension `d`.
pub fn steps_header(d: usize) -> String {
    let ranks: Vec<String> = (1..d).map(|i| format!("r_{i}")).collect();
    format!(
        "t,{},rank_1norm,normal_norm,mass,cost_value",
        ranks.join(",")
    )
}

/// One steps.csv row from a step record.
pub fn steps_row(rec: &StepRecord) -> Vec<String> {
    let d = rec.ranks.len() - 1;
    let mut out = vec![fmt_f64(rec.t)];
    for i in 1..d {
        out.push(rec.ranks[i].to_string());
    }
    out.push(rec.rank_1norm.to_string());
    out.push(fmt_f64(rec.normal_norm));
    out.push(fmt_f64(rec.mass));
    out.push(fmt_f64(rec.cost_value));
    out
}

/// Column header for gamma.csv at dimension `d`.
pub fn gamma_header(d: usize) -> String {
    let mut cols = vec!["t".to_string()];
    for i in 1..=d {
        for j in 1..=d {
            cols.push(format!("g_{i}{j}"));
        }
    }
    cols.join(",")
}

/// One gamma.csv row: time followed by Γ in row-major order.
pub fn gamma_row(t: f64, gamma: &Array2<f64>) -> Vec<String> {
    let mut out = vec![fmt_f64(t)];
    out.extend(gamma.iter().map(|&x| fmt_f64(x)));
    out
}

/// Evaluate a train on the plane spanned by `axes`, all other coordinates
/// held at the grid node nearest zero, returning the slice values row-major
/// in `axes` order.
fn slice_plane(v: &TensorTrain, axes: (usize, usize)) -> Array2<f64> {
    let d = v.d();
    let (a, b) = axes;
    let (na, nb) = (v.grids()[a].n(), v.grids()[b].n());
    let mut out = Array2::<f64>::zeros((na, nb));
    for ia in 0..na {
        for ib in 0..nb {
            // Left-to-right chain product with off-plane modes pinned to
            // their slice node.
            let mut row = ndarray::Array1::<f64>::ones(1);
            for m in 0..d {
                let idx = if m == a {
                    ia
                } else if m == b {
                    ib
                } else {
                    nearest_zero_node(&v.grids()[m])
                };
                row = row.dot(&v.core(m).index_axis(ndarray::Axis(1), idx));
            }
            out[[ia, ib]] = row[0];
        }
    }
    out
}

/// Index of the grid node closest to the origin.
fn nearest_zero_node(g: &GridRef) -> usize {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for (i, &x) in g.nodes().iter().enumerate() {
        if x.abs() < dist {
            dist = x.abs();
            best = i;
        }
    }
    best
}

/// Write contour-slice CSVs for a train: one file per coordinate plane
/// (`contour_x1x2_<label>.csv`, …), columns `x_a,x_b,value`. The field is
/// the one carried by the solver — in transformed coordinates for adaptive
/// runs — and pairs with gamma.csv for rendering in Cartesian axes.
pub fn write_contours(dir: &Path, v: &TensorTrain, label: &str) -> Result<()> {
    let d = v.d();
    let planes: Vec<(usize, usize)> = match d {
        1 => vec![],
        2 => vec![(0, 1)],
        _ => vec![(0, 1), (0, 2), (1, 2)],
    };
    for (a, b) in planes {
        let path = dir.join(format!("contour_x{}x{}_{label}.csv", a + 1, b + 1));
        let vals = slice_plane(v, (a, b));
        let mut csv = CsvFile::create(&path, &format!("x{},x{},value", a + 1, b + 1))?;
        let (xa, xb) = (v.grids()[a].nodes(), v.grids()[b].nodes());
        for ia in 0..vals.shape()[0] {
            for ib in 0..vals.shape()[1] {
                csv.row(&[
                    fmt_f64(xa[ia]),
                    fmt_f64(xb[ib]),
                    fmt_f64(vals[[ia, ib]]),
                ])?;
            }
        }
    }
    Ok(())
}

/// Write a dense full-grid contour slice (benchmark output), same schema as
/// [`write_contours`].
pub fn write_full_contours(
    dir: &Path,
    grids: &[GridRef],
    values: ArrayViewD<'_, f64>,
    label: &str,
) -> Result<()> {
    let d = grids.len();
    let planes: Vec<(usize, usize)> = match d {
        1 => vec![],
        2 => vec![(0, 1)],
        _ => vec![(0, 1), (0, 2), (1, 2)],
    };
    for (a, b) in planes {
        let path = dir.join(format!("contour_x{}x{}_{label}.csv", a + 1, b + 1));
        let mut csv = CsvFile::create(&path, &format!("x{},x{},value", a + 1, b + 1))?;
        let (xa, xb) = (grids[a].nodes(), grids[b].nodes());
        let mut idx: Vec<usize> = grids.iter().map(nearest_zero_node).collect();
        for ia in 0..grids[a].n() {
            for ib in 0..grids[b].n() {
                idx[a] = ia;
                idx[b] = ib;
                csv.row(&[
                    fmt_f64(xa[ia]),
                    fmt_f64(xb[ib]),
                    fmt_f64(values[idx.as_slice()]),
                ])?;
            }
        }
    }
    Ok(())
}

/// `state_<step>.bin` / `bench_<step>.bin` naming shared by run, bench, and
/// compare.
pub fn snapshot_name(prefix: &str, step: usize) -> String {
    format!("{prefix}_{step:08}.bin")
}

/// Parse a snapshot file name produced by [`snapshot_name`] back to its
/// step index.
pub fn snapshot_step(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?
        .strip_prefix('_')?
        .strip_suffix(".bin")?
        .parse()
        .ok()
}

/// Sorted step indices of all `<prefix>_<step>.bin` snapshots in a
/// directory.
pub fn list_snapshots(dir: &Path, prefix: &str) -> Result<Vec<usize>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut steps = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        if let Some(step) = name.to_str().and_then(|n| snapshot_step(n, prefix)) {
            steps.push(step);
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

/// Dense values stored in a full-grid snapshot, with its grids and time.
pub struct LoadedBench {
    pub grids: Vec<GridRef>,
    pub values: ArrayD<f64>,
    pub t: f64,
}
