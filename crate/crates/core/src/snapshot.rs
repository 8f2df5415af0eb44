//! Flat binary snapshots of solver state, used for restart and error
//! comparison.
//!
//! Layout (all fields little-endian):
//!
//! ```text
//! u64 tag            1 = tensor-train, 2 = full grid
//! u64 d              number of dimensions
//! u64 × (d+1)        ranks r_0..r_d (all zero for full-grid snapshots)
//! d × { u64 n, f64 L }   per-dimension grid
//! f64 t              simulation time
//! payload            tag 1: cores in index order, row-major, then the
//!                    d×d coordinate map Γ row-major
//!                    tag 2: nodal values, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, ArrayViewD, IxDyn};

use crate::error::{CoreError, Result};
use crate::grid::{make_grid, GridRef};
use crate::tt::TensorTrain;

const TAG_TT: u64 = 1;
const TAG_FULL: u64 = 2;

/// A deserialized snapshot of either representation.
#[derive(Debug, Clone)]
pub enum Snapshot {
    TensorTrain {
        value: TensorTrain,
        gamma: Array2<f64>,
        t: f64,
    },
    FullGrid {
        grids: Vec<GridRef>,
        values: ArrayD<f64>,
        t: f64,
    },
}

impl Snapshot {
    pub fn t(&self) -> f64 {
        match self {
            Snapshot::TensorTrain { t, .. } => *t,
            Snapshot::FullGrid { t, .. } => *t,
        }
    }

    pub fn grids(&self) -> &[GridRef] {
        match self {
            Snapshot::TensorTrain { value, .. } => value.grids(),
            Snapshot::FullGrid { grids, .. } => grids,
        }
    }
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64_slice<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for &v in values {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_f64_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; len];
    for v in &mut out {
        *v = read_f64(r)?;
    }
    Ok(out)
}

fn write_header<W: Write>(
    w: &mut W,
    tag: u64,
    grids: &[GridRef],
    ranks: &[u64],
    t: f64,
) -> Result<()> {
    write_u64(w, tag)?;
    write_u64(w, grids.len() as u64)?;
    for &r in ranks {
        write_u64(w, r)?;
    }
    for g in grids {
        write_u64(w, g.n() as u64)?;
        write_f64(w, g.length())?;
    }
    write_f64(w, t)?;
    Ok(())
}

/// Serialize a tensor-train state with its coordinate map.
pub fn write_tt_snapshot(
    path: &Path,
    value: &TensorTrain,
    gamma: &Array2<f64>,
    t: f64,
) -> Result<()> {
    let d = value.d();
    if gamma.shape() != [d, d] {
        return Err(CoreError::DimensionMismatch(format!(
            "snapshot: Γ has shape {:?} for a {d}-dimensional value",
            gamma.shape()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let ranks: Vec<u64> = value.ranks().iter().map(|&r| r as u64).collect();
    write_header(&mut w, TAG_TT, value.grids(), &ranks, t)?;
    for i in 0..d {
        write_f64_slice(&mut w, value.core(i).as_slice().expect("core contiguous"))?;
    }
    write_f64_slice(&mut w, gamma.as_slice().expect("Γ contiguous"))?;
    w.flush()?;
    Ok(())
}

/// Serialize a dense full-grid state (benchmark solutions).
pub fn write_full_snapshot(
    path: &Path,
    grids: &[GridRef],
    values: ArrayViewD<'_, f64>,
    t: f64,
) -> Result<()> {
    let shape: Vec<usize> = grids.iter().map(|g| g.n()).collect();
    if values.shape() != shape.as_slice() {
        return Err(CoreError::GridMismatch(format!(
            "snapshot: value shape {:?} does not match grids {:?}",
            values.shape(),
            shape
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let ranks = vec![0u64; grids.len() + 1];
    write_header(&mut w, TAG_FULL, grids, &ranks, t)?;
    let owned;
    let flat = match values.as_slice() {
        Some(s) => s,
        None => {
            owned = values.to_owned();
            owned.as_slice().expect("owned array is contiguous")
        }
    };
    write_f64_slice(&mut w, flat)?;
    w.flush()?;
    Ok(())
}

/// Deserialize a snapshot of either kind.
fn read_header<R: Read>(r: &mut R) -> Result<(u64, Vec<usize>, Vec<GridRef>, f64)> {
    let tag = read_u64(r)?;
    if tag != TAG_TT && tag != TAG_FULL {
        return Err(CoreError::MalformedSnapshot(format!(
            "unknown type tag {tag}"
        )));
    }
    let d = read_u64(r)? as usize;
    if d == 0 || d > 16 {
        return Err(CoreError::MalformedSnapshot(format!(
            "implausible dimension count {d}"
        )));
    }
    let mut ranks = Vec::with_capacity(d + 1);
    for _ in 0..=d {
        ranks.push(read_u64(r)? as usize);
    }
    let mut grids = Vec::with_capacity(d);
    for _ in 0..d {
        let n = read_u64(r)? as usize;
        let l = read_f64(r)?;
        grids.push(make_grid(n, l).map_err(|e| {
            CoreError::MalformedSnapshot(format!("invalid grid in header: {e}"))
        })?);
    }
    let t = read_f64(r)?;
    Ok((tag, ranks, grids, t))
}

/// Read only the recorded time of a snapshot (header peek; the payload is
/// not touched). Used to pair run and benchmark states by time.
pub fn read_snapshot_time(path: &Path) -> Result<f64> {
    let mut r = BufReader::new(File::open(path)?);
    let (_, _, _, t) = read_header(&mut r)?;
    Ok(t)
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let mut r = BufReader::new(File::open(path)?);
    let (tag, ranks, grids, t) = read_header(&mut r)?;
    let d = grids.len();
    match tag {
        TAG_TT => {
            if ranks[0] != 1 || ranks[d] != 1 || ranks.iter().any(|&x| x == 0) {
                return Err(CoreError::MalformedSnapshot(format!(
                    "invalid rank vector {ranks:?}"
                )));
            }
            let mut cores = Vec::with_capacity(d);
            for i in 0..d {
                let (r1, n, r2) = (ranks[i], grids[i].n(), ranks[i + 1]);
                let data = read_f64_vec(&mut r, r1 * n * r2)?;
                cores.push(
                    Array3::from_shape_vec((r1, n, r2), data)
                        .expect("length matches shape"),
                );
            }
            let gdata = read_f64_vec(&mut r, d * d)?;
            let gamma =
                Array2::from_shape_vec((d, d), gdata).expect("length matches shape");
            let value = TensorTrain::new(grids, cores)
                .map_err(|e| CoreError::MalformedSnapshot(format!("invalid cores: {e}")))?;
            Ok(Snapshot::TensorTrain { value, gamma, t })
        }
        _ => {
            let shape: Vec<usize> = grids.iter().map(|g| g.n()).collect();
            let total: usize = shape.iter().product();
            let data = read_f64_vec(&mut r, total)?;
            let values = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .expect("length matches shape");
            Ok(Snapshot::FullGrid { grids, values, t })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use ndarray::{Array1, Array2};

    fn sample_tt() -> TensorTrain {
        let grids: Vec<GridRef> = vec![make_grid(16, 4.0).unwrap(), make_grid(8, 2.0).unwrap()];
        let terms: Vec<Vec<Array1<f64>>> = vec![
            vec![
                grids[0].nodes().mapv(|x| (-x * x).exp()),
                grids[1].nodes().mapv(|x| x.cos()),
            ],
            vec![
                grids[0].nodes().mapv(|x| x.sin()),
                grids[1].nodes().mapv(|x| (-x * x / 2.0).exp()),
            ],
        ];
        TensorTrain::from_separable(grids, &terms, &[1.0, -0.5]).unwrap()
    }

    #[test]
    fn tt_snapshot_round_trips() {
        let dir = std::env::temp_dir().join("coordflow-snap-tt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.bin");
        let v = sample_tt();
        let gamma = Array2::from_shape_vec((2, 2), vec![1.0, 0.25, -0.5, 2.0]).unwrap();
        write_tt_snapshot(&path, &v, &gamma, 0.75).unwrap();
        assert_eq!(read_snapshot_time(&path).unwrap(), 0.75);
        match read_snapshot(&path).unwrap() {
            Snapshot::TensorTrain { value, gamma: g, t } => {
                assert_eq!(t, 0.75);
                assert_eq!(g, gamma);
                assert_eq!(value.ranks(), v.ranks());
                assert_eq!(value.to_full().unwrap(), v.to_full().unwrap());
                assert_eq!(value.grids()[0].n(), 16);
                assert_eq!(value.grids()[1].length(), 2.0);
            }
            _ => panic!("expected tensor-train snapshot"),
        }
    }

    #[test]
    fn full_snapshot_round_trips() {
        let dir = std::env::temp_dir().join("coordflow-snap-full");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bench.bin");
        let v = sample_tt();
        let full = v.to_full().unwrap();
        write_full_snapshot(&path, v.grids(), full.view(), 1.5).unwrap();
        match read_snapshot(&path).unwrap() {
            Snapshot::FullGrid { grids, values, t } => {
                assert_eq!(t, 1.5);
                assert_eq!(values, full);
                assert_eq!(grids.len(), 2);
                assert_eq!(grids[0].n(), 16);
            }
            _ => panic!("expected full-grid snapshot"),
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = std::env::temp_dir().join("coordflow-snap-bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        std::fs::write(&path, 99u64.to_le_bytes()).unwrap();
        assert!(matches!(
            read_snapshot(&path),
            Err(CoreError::MalformedSnapshot(_)) | Err(CoreError::Io(_))
        ));
        // Truncated header.
        std::fs::write(&path, 1u64.to_le_bytes()).unwrap();
        assert!(read_snapshot(&path).is_err());
    }
}
