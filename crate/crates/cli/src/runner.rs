//! Drivers for the `run`, `bench`, and `compare` commands.
//!
//! A run writes into its output directory:
//!
//! * `config.toml` — the resolved configuration,
//! * `steps.csv` — one row per time node,
//! * `gamma.csv` — the coordinate map at every time node,
//! * `state_<step>.bin` — state snapshots at the error cadence,
//! * `state_final.bin` on success, `state_abort.bin` if stepping fails,
//! * `error.csv` — when a benchmark is supplied, one row per cadence node
//!   whose time matches a benchmark snapshot,
//! * `contour_*_initial.csv` / `contour_*_final.csv` — plane slices for
//!   figure reproduction (paired with `gamma.csv` for Cartesian rendering).
//!
//! A bench run writes `bench_<step>.bin` snapshots at the same cadence plus
//! `bench_final.bin`, and final contour slices. `compare` pairs run and
//! bench snapshots by time after the fact and rewrites `error.csv`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};

use coordflow_core::integrator::run;
use coordflow_core::pde_ops::CoordinateMap;
use coordflow_core::reference::{compare, solve_full_with, FullGridSolution, SamplePlan};
use coordflow_core::snapshot::{
    read_snapshot, read_snapshot_time, write_full_snapshot, write_tt_snapshot, Snapshot,
};

use crate::config::ExperimentConfig;
use crate::output::{
    fmt_f64, gamma_header, gamma_row, list_snapshots, snapshot_name, steps_header, steps_row,
    write_contours, write_full_contours, CsvFile, DirLock,
};
use crate::problems::{build_problem, step_config};

/// Command-line overrides applied on top of a parsed configuration.
#[derive(Debug, Default, Clone)]
pub struct RunOverrides {
    pub output_dir: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// What a completed run produced, for callers that inspect results
/// programmatically.
#[derive(Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    /// Number of time nodes recorded (steps + 1).
    pub rows: usize,
    pub final_t: f64,
    pub final_rank_1norm: usize,
    pub final_mass: f64,
}

fn resolve_dir(over: Option<&Path>, cfg: Option<&Path>, what: &str) -> Result<PathBuf> {
    over.or(cfg).map(Path::to_path_buf).ok_or_else(|| {
        anyhow!("no {what} directory: set output_dir in the config or pass --output-dir")
    })
}

/// `<path><suffix>` on the last component.
fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Time-sorted `(t, path)` index over benchmark snapshots: a directory is
/// scanned for `bench_*.bin` plus `bench_final.bin`, a single file stands
/// for itself. Only headers are read.
fn bench_index(path: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let mut entries = Vec::new();
    if path.is_dir() {
        for step in list_snapshots(path, "bench")? {
            let p = path.join(snapshot_name("bench", step));
            entries.push((read_snapshot_time(&p)?, p));
        }
        let fin = path.join("bench_final.bin");
        if fin.is_file() {
            entries.push((read_snapshot_time(&fin)?, fin));
        }
        if entries.is_empty() {
            bail!("no bench_*.bin snapshots in {}", path.display());
        }
    } else if path.is_file() {
        entries.push((read_snapshot_time(path)?, path.to_path_buf()));
    } else {
        bail!("benchmark path {} does not exist", path.display());
    }
    dedupe_by_time(&mut entries);
    Ok(entries)
}

fn dedupe_by_time(entries: &mut Vec<(f64, PathBuf)>) {
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    entries.dedup_by(|a, b| same_time(a.0, b.0));
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

/// Load the benchmark snapshot matching time `t`, if any.
fn lookup_bench(index: &[(f64, PathBuf)], t: f64) -> Result<Option<FullGridSolution>> {
    let Some((_, path)) = index.iter().find(|(tb, _)| same_time(*tb, t)) else {
        return Ok(None);
    };
    load_bench(path).map(Some)
}

fn load_bench(path: &Path) -> Result<FullGridSolution> {
    match read_snapshot(path)? {
        Snapshot::FullGrid { grids, values, t } => Ok(FullGridSolution::new(grids, values, t)?),
        Snapshot::TensorTrain { .. } => bail!(
            "{} is a tensor-train snapshot; benchmarks must be full-grid states",
            path.display()
        ),
    }
}

/// Execute a configured experiment, writing all outputs into the resolved
/// directory. Stepping failures propagate as errors after the last good
/// state has been written to `state_abort.bin`.
pub fn run_experiment(cfg: &ExperimentConfig, over: &RunOverrides) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    if let Some(seed) = over.seed {
        cfg.seed = seed;
    }
    let dir = resolve_dir(
        over.output_dir.as_deref(),
        cfg.output_dir.as_deref(),
        "output",
    )?;
    let _lock = DirLock::acquire(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string())
        .with_context(|| format!("writing resolved config into {}", dir.display()))?;

    let bench = match &over.benchmark {
        Some(p) => Some(bench_index(p)?),
        None => None,
    };
    let problem = build_problem(&cfg)?;
    let sc = step_config(&cfg);
    let d = cfg.pde.d();
    let n_steps = (cfg.t_final / cfg.dt).round() as usize;
    let cadence = cfg.error_cadence;

    let mut steps_csv = CsvFile::create(&dir.join("steps.csv"), &steps_header(d))?;
    let mut gamma_csv = CsvFile::create(&dir.join("gamma.csv"), &gamma_header(d))?;
    let mut error_csv = match &bench {
        Some(_) => Some(CsvFile::create(&dir.join("error.csv"), "t,linf,l2")?),
        None => None,
    };
    write_contours(&dir, &problem.ic, "initial")?;

    info!(
        "run `{}`: {} steps of {:e} to t = {:e} in {}",
        cfg.name,
        n_steps,
        cfg.dt,
        cfg.t_final,
        dir.display()
    );

    let mut k = 0usize;
    let mut sink_err: Option<anyhow::Error> = None;
    let mut last_state = None;
    let outcome = run(&sc, &problem.ic, &problem.spec, |rec, v| {
        if sink_err.is_none() {
            let wrote = (|| -> Result<()> {
                steps_csv.row(&steps_row(rec))?;
                gamma_csv.row(&gamma_row(rec.t, &rec.gamma))?;
                if k % cadence == 0 || k == n_steps {
                    let path = dir.join(snapshot_name("state", k));
                    write_tt_snapshot(&path, v, &rec.gamma, rec.t)?;
                    if let (Some(index), Some(csv)) = (&bench, &mut error_csv) {
                        if let Some(b) = lookup_bench(index, rec.t)? {
                            let map = CoordinateMap::new(rec.gamma.clone())?;
                            let rep = compare(v, &map, &b, &SamplePlan::Auto)?;
                            csv.row(&[fmt_f64(rec.t), fmt_f64(rep.linf), fmt_f64(rep.l2)])?;
                        }
                    }
                }
                Ok(())
            })();
            if let Err(e) = wrote {
                sink_err = Some(e);
            }
        }
        last_state = Some((rec.t, rec.gamma.clone(), v.clone()));
        k += 1;
    });

    let out = match outcome {
        Ok(out) => out,
        Err(e) => {
            if let Some((t, gamma, v)) = &last_state {
                let path = dir.join("state_abort.bin");
                write_tt_snapshot(&path, v, gamma, *t)?;
                warn!(
                    "integration aborted; last good state at t = {t:e} kept in {}",
                    path.display()
                );
            }
            return Err(anyhow::Error::new(e).context("integration aborted"));
        }
    };
    if let Some(e) = sink_err {
        return Err(e.context("writing run outputs"));
    }

    write_tt_snapshot(
        &dir.join("state_final.bin"),
        &out.v,
        out.flow.map.gamma(),
        cfg.t_final,
    )?;
    write_contours(&dir, &out.v, "final")?;

    let last = out.records.last().expect("a run records at least t = 0");
    info!(
        "run `{}` finished: rank 1-norm {}, mass {:e}",
        cfg.name, last.rank_1norm, last.mass
    );
    Ok(RunSummary {
        dir,
        rows: out.records.len(),
        final_t: last.t,
        final_rank_1norm: last.rank_1norm,
        final_mass: last.mass,
    })
}

/// Solve the same problem densely on the full grid and write benchmark
/// snapshots at the error cadence. Returns the benchmark directory.
pub fn bench_experiment(cfg: &ExperimentConfig, output_dir: Option<&Path>) -> Result<PathBuf> {
    let suffixed_default = cfg.output_dir.as_deref().map(|p| suffixed(p, "-bench"));
    let dir = resolve_dir(output_dir, suffixed_default.as_deref(), "benchmark")?;
    let _lock = DirLock::acquire(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string())
        .with_context(|| format!("writing resolved config into {}", dir.display()))?;

    let problem = build_problem(cfg)?;
    let ic_full = problem.ic.to_full()?;
    let grids = problem.spec.grids.clone();
    let n_steps = (cfg.t_final / cfg.dt).round() as usize;
    let cadence = cfg.error_cadence;

    info!(
        "bench `{}`: {} dense steps on {:?} in {}",
        cfg.name,
        n_steps,
        grids.iter().map(|g| g.n()).collect::<Vec<_>>(),
        dir.display()
    );

    let mut write_err: Option<anyhow::Error> = None;
    let sol = solve_full_with(
        &problem.spec,
        ic_full.view(),
        cfg.dt,
        cfg.t_final,
        cfg.scheme,
        |step, u| {
            if write_err.is_some() {
                return;
            }
            let t = step as f64 * cfg.dt;
            let wrote = (|| -> Result<()> {
                if step % cadence == 0 {
                    write_full_snapshot(&dir.join(snapshot_name("bench", step)), &grids, u.view(), t)?;
                }
                if step == n_steps {
                    write_full_snapshot(&dir.join("bench_final.bin"), &grids, u.view(), t)?;
                }
                Ok(())
            })();
            if let Err(e) = wrote {
                write_err = Some(e);
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e.context("writing benchmark snapshots"));
    }
    write_full_contours(&dir, &grids, sol.values().view(), "final")?;
    Ok(dir)
}

/// Pair the snapshots of a finished run with benchmark snapshots by time and
/// rewrite `error.csv` in the run directory.
pub fn compare_runs(run_dir: &Path, bench_path: &Path) -> Result<PathBuf> {
    let index = bench_index(bench_path)?;
    let mut entries = Vec::new();
    for step in list_snapshots(run_dir, "state")? {
        let p = run_dir.join(snapshot_name("state", step));
        entries.push((read_snapshot_time(&p)?, p));
    }
    let fin = run_dir.join("state_final.bin");
    if fin.is_file() {
        entries.push((read_snapshot_time(&fin)?, fin));
    }
    if entries.is_empty() {
        bail!("no state_*.bin snapshots in {}", run_dir.display());
    }
    dedupe_by_time(&mut entries);

    let out_path = run_dir.join("error.csv");
    let mut csv = CsvFile::create(&out_path, "t,linf,l2")?;
    let mut rows = 0usize;
    for (t, path) in &entries {
        let Some(b) = lookup_bench(&index, *t)? else {
            continue;
        };
        let Snapshot::TensorTrain { value, gamma, .. } = read_snapshot(path)? else {
            bail!("{} is not a tensor-train snapshot", path.display());
        };
        let map = CoordinateMap::new(gamma)?;
        let rep = compare(&value, &map, &b, &SamplePlan::Auto)?;
        csv.row(&[fmt_f64(*t), fmt_f64(rep.linf), fmt_f64(rep.l2)])?;
        rows += 1;
    }
    if rows == 0 {
        bail!(
            "no snapshot times in {} match the benchmark at {}",
            run_dir.display(),
            bench_path.display()
        );
    }
    info!("compared {rows} snapshot pairs into {}", out_path.display());
    Ok(out_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn tiny_vortex(name: &str, extra: &str) -> ExperimentConfig {
        let text = format!(
            r#"
            name = "{name}"
            pde = "liouville2d"
            d = 2
            n = [16, 16]
            l = [30, 30]
            dt = 1e-2
            t_final = 5e-2
            delta = 1e-8
            ic.beta = [8, 8]
            ic.t = [3, 3]
            drift.alpha = 4.73
            {extra}
            "#
        );
        parse_config(&text).unwrap()
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("coordflow-runner-{tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    fn read(path: &Path) -> String {
        std::fs::read_to_string(path).unwrap()
    }

    #[test]
    fn run_writes_the_documented_files_with_one_row_per_node() {
        let cfg = tiny_vortex("files", "coordinates = \"fixed\"");
        let dir = temp_dir("files");
        let over = RunOverrides {
            output_dir: Some(dir.clone()),
            ..Default::default()
        };
        let summary = run_experiment(&cfg, &over).unwrap();
        assert_eq!(summary.rows, 6, "5 steps plus the initial node");

        let steps = read(&dir.join("steps.csv"));
        assert_eq!(steps.lines().count(), 7, "header plus 6 rows");
        assert_eq!(
            steps.lines().next().unwrap(),
            "t,r_1,rank_1norm,normal_norm,mass,cost_value"
        );

        // Fixed coordinates: every gamma row is the identity.
        let gamma = read(&dir.join("gamma.csv"));
        assert_eq!(gamma.lines().next().unwrap(), "t,g_11,g_12,g_21,g_22");
        for line in gamma.lines().skip(1) {
            let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
            assert_eq!(&f[1..], &[1.0, 0.0, 0.0, 1.0]);
        }

        for name in [
            "config.toml",
            "state_00000000.bin",
            "state_00000005.bin",
            "state_final.bin",
            "contour_x1x2_initial.csv",
            "contour_x1x2_final.csv",
        ] {
            assert!(dir.join(name).is_file(), "{name} missing");
        }
        assert!(!dir.join(".lock").exists(), "lock must be released");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn identical_configs_produce_byte_identical_outputs() {
        let cfg = tiny_vortex("det", "coordinates = \"adaptive\"");
        let (da, db) = (temp_dir("det-a"), temp_dir("det-b"));
        for d in [&da, &db] {
            let over = RunOverrides {
                output_dir: Some(d.clone()),
                ..Default::default()
            };
            run_experiment(&cfg, &over).unwrap();
        }
        for name in ["steps.csv", "gamma.csv"] {
            assert_eq!(read(&da.join(name)), read(&db.join(name)), "{name} differs");
        }
        assert_eq!(
            std::fs::read(da.join("state_final.bin")).unwrap(),
            std::fs::read(db.join("state_final.bin")).unwrap()
        );
        for d in [&da, &db] {
            std::fs::remove_dir_all(d).unwrap();
        }
    }

    #[test]
    fn live_and_post_hoc_error_files_agree() {
        let cfg = tiny_vortex("err", "coordinates = \"fixed\"\nerror_cadence = 5");
        let bench_dir = temp_dir("err-bench");
        bench_experiment(&cfg, Some(&bench_dir)).unwrap();
        assert!(bench_dir.join("bench_00000000.bin").is_file());
        assert!(bench_dir.join("bench_00000005.bin").is_file());
        assert!(bench_dir.join("bench_final.bin").is_file());

        let run_dir = temp_dir("err-run");
        let over = RunOverrides {
            output_dir: Some(run_dir.clone()),
            benchmark: Some(bench_dir.clone()),
            ..Default::default()
        };
        run_experiment(&cfg, &over).unwrap();
        let live = read(&run_dir.join("error.csv"));
        assert_eq!(live.lines().count(), 3, "header plus t = 0 and t = 0.05");

        // A δ = 1e−8 train on the same grid and stepper tracks the dense
        // benchmark to rounding noise.
        for line in live.lines().skip(1) {
            let linf: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert!(linf <= 1e-7, "live error too large: {line}");
        }

        compare_runs(&run_dir, &bench_dir).unwrap();
        assert_eq!(
            live,
            read(&run_dir.join("error.csv")),
            "post-hoc comparison must reproduce the live rows"
        );
        for d in [&run_dir, &bench_dir] {
            std::fs::remove_dir_all(d).unwrap();
        }
    }

    #[test]
    fn aborted_integration_keeps_the_last_good_state() {
        // A time step far beyond the advection stability limit blows up;
        // the run must fail, keep its partial CSVs, and save the last
        // finite state.
        let cfg = parse_config(
            r#"
            name = "abort"
            pde = "liouville2d"
            d = 2
            n = [16, 16]
            l = [30, 30]
            dt = 10.0
            t_final = 10000.0
            delta = 1e-8
            scheme = "euler"
            coordinates = "fixed"
            ic.beta = [8, 8]
            ic.t = [3, 3]
            drift.alpha = 4.73
            "#,
        )
        .unwrap();
        let dir = temp_dir("abort");
        let over = RunOverrides {
            output_dir: Some(dir.clone()),
            ..Default::default()
        };
        let err = run_experiment(&cfg, &over).unwrap_err();
        assert!(format!("{err:#}").contains("aborted"), "{err:#}");
        assert!(dir.join("state_abort.bin").is_file());
        assert!(
            read(&dir.join("steps.csv")).lines().count() > 2,
            "some rows must have been recorded before the abort"
        );
        assert!(!dir.join("state_final.bin").exists());
        assert!(!dir.join(".lock").exists(), "lock must be released on abort");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
