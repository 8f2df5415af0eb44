//! Experiment configuration: a flat TOML schema with dotted keys.
//!
//! ```text
//! name        = "ridge-3d"
//! pde         = "liouville3d"     # liouville2d | liouville3d | fokker_planck3d
//! d           = 3
//! n           = [64, 64, 64]      # grid points per dimension (even)
//! l           = [30, 30, 30]      # domain lengths (periodic, centered at 0)
//! dt          = 1e-3
//! t_final     = 1.0
//! delta       = 1e-5              # relative truncation tolerance
//! coordinates = "adaptive"        # fixed | adaptive
//! ic.beta     = [4, 0.25, 4]      # Gaussian widths
//! ic.t        = [1, -1, 1]        # Gaussian shifts
//! drift.b     = [[0, 1, 0], [-1, 0, 0], [0, 1, 0]]
//! ```
//!
//! Optional keys and their defaults: `delta_op = 1e-10`, `rcond = 1e-10`,
//! `scheme = "ab2"`, `functional = "full_min"`, `error_cadence = 100`,
//! `seed = 0`, `output_dir` (may instead come from the command line).
//! The two-dimensional family takes `drift.alpha` (and optionally `drift.l`,
//! defaulting to the domain length) instead of `drift.b`; `sigma` is the
//! diffusion strength and is required by — and only valid for — the
//! Fokker-Planck family.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde::Deserialize;

use coordflow_core::flowgen::{Functional, Scheme};
use coordflow_core::integrator::CoordinateMode;

/// The three experiment families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdeFamily {
    Liouville2d,
    Liouville3d,
    FokkerPlanck3d,
}

impl PdeFamily {
    pub fn d(self) -> usize {
        match self {
            PdeFamily::Liouville2d => 2,
            _ => 3,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            PdeFamily::Liouville2d => "liouville2d",
            PdeFamily::Liouville3d => "liouville3d",
            PdeFamily::FokkerPlanck3d => "fokker_planck3d",
        }
    }
}

/// Drift parameters: a velocity-gradient matrix for the linear families or a
/// stream-function recirculation for the two-dimensional one.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftParams {
    Matrix(Array2<f64>),
    Stream { alpha: f64, length: f64 },
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub pde: PdeFamily,
    pub n: Vec<usize>,
    pub l: Vec<f64>,
    pub dt: f64,
    pub t_final: f64,
    pub delta: f64,
    pub delta_op: f64,
    pub rcond: f64,
    pub scheme: Scheme,
    pub coordinates: CoordinateMode,
    pub functional: Functional,
    pub ic_beta: Vec<f64>,
    pub ic_shift: Vec<f64>,
    pub drift: DriftParams,
    pub sigma: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub error_cadence: usize,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIc {
    beta: Vec<f64>,
    t: Vec<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawDrift {
    b: Option<Vec<Vec<f64>>>,
    alpha: Option<f64>,
    l: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    pde: String,
    d: usize,
    n: Vec<usize>,
    l: Vec<f64>,
    dt: f64,
    t_final: f64,
    delta: f64,
    delta_op: Option<f64>,
    rcond: Option<f64>,
    scheme: Option<String>,
    coordinates: String,
    functional: Option<String>,
    ic: RawIc,
    drift: Option<RawDrift>,
    sigma: Option<f64>,
    output_dir: Option<String>,
    error_cadence: Option<usize>,
    seed: Option<u64>,
}

/// Parse and validate a configuration document. Every error names the
/// offending key.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).context("invalid configuration")?;

    let pde = match raw.pde.as_str() {
        "liouville2d" => PdeFamily::Liouville2d,
        "liouville3d" => PdeFamily::Liouville3d,
        "fokker_planck3d" => PdeFamily::FokkerPlanck3d,
        other => bail!(
            "pde: unknown family `{other}` (expected liouville2d, liouville3d, \
             or fokker_planck3d)"
        ),
    };
    let d = pde.d();
    if raw.d != d {
        bail!("d: {} expected for {}, got {}", d, pde.key(), raw.d);
    }
    for (key, len) in [
        ("n", raw.n.len()),
        ("l", raw.l.len()),
        ("ic.beta", raw.ic.beta.len()),
        ("ic.t", raw.ic.t.len()),
    ] {
        if len != d {
            bail!("{key}: expected {d} entries, got {len}");
        }
    }
    for (i, &n) in raw.n.iter().enumerate() {
        if n < 4 || n % 2 != 0 {
            bail!("n: entry {i} must be an even integer of at least 4, got {n}");
        }
    }
    for (i, &l) in raw.l.iter().enumerate() {
        if !(l > 0.0 && l.is_finite()) {
            bail!("l: entry {i} must be positive, got {l}");
        }
    }
    for (i, &b) in raw.ic.beta.iter().enumerate() {
        if !(b > 0.0 && b.is_finite()) {
            bail!("ic.beta: entry {i} must be positive, got {b}");
        }
    }
    if !(raw.dt > 0.0 && raw.dt.is_finite()) {
        bail!("dt: must be positive, got {}", raw.dt);
    }
    if !(raw.t_final >= 0.0 && raw.t_final.is_finite()) {
        bail!("t_final: must be non-negative, got {}", raw.t_final);
    }
    if !(raw.delta >= 0.0 && raw.delta.is_finite()) {
        bail!("delta: must be non-negative, got {}", raw.delta);
    }
    let delta_op = raw.delta_op.unwrap_or(1e-10);
    if !(delta_op > 0.0 && delta_op.is_finite()) {
        bail!("delta_op: must be positive, got {delta_op}");
    }
    let rcond = raw.rcond.unwrap_or(1e-10);
    if !(rcond > 0.0 && rcond < 1.0) {
        bail!("rcond: must lie in (0, 1), got {rcond}");
    }
    let error_cadence = raw.error_cadence.unwrap_or(100);
    if error_cadence == 0 {
        bail!("error_cadence: must be at least 1");
    }

    let scheme = match raw.scheme.as_deref() {
        None | Some("ab2") => Scheme::Ab2,
        Some("euler") => Scheme::Euler,
        Some(other) => bail!("scheme: unknown value `{other}` (expected euler or ab2)"),
    };
    let coordinates = match raw.coordinates.as_str() {
        "fixed" => CoordinateMode::Fixed,
        "adaptive" => CoordinateMode::Adaptive,
        other => bail!("coordinates: unknown value `{other}` (expected fixed or adaptive)"),
    };
    let functional = match raw.functional.as_deref() {
        None | Some("full_min") => Functional::FullMin,
        Some("normal_min") => Functional::NormalMin,
        Some(other) => {
            bail!("functional: unknown value `{other}` (expected normal_min or full_min)")
        }
    };

    let drift = raw.drift.unwrap_or_default();
    let drift = match pde {
        PdeFamily::Liouville2d => {
            if drift.b.is_some() {
                bail!("drift.b: only valid for the three-dimensional families; \
                       liouville2d takes drift.alpha");
            }
            let alpha = drift
                .alpha
                .context("drift.alpha: required for liouville2d")?;
            if !(alpha > 0.0 && alpha.is_finite()) {
                bail!("drift.alpha: must be positive, got {alpha}");
            }
            let length = drift.l.unwrap_or(raw.l[0]);
            if !(length > 0.0 && length.is_finite()) {
                bail!("drift.l: must be positive, got {length}");
            }
            DriftParams::Stream { alpha, length }
        }
        _ => {
            if drift.alpha.is_some() || drift.l.is_some() {
                bail!("drift.alpha: only valid for liouville2d; \
                       the three-dimensional families take drift.b");
            }
            let rows = drift.b.context("drift.b: required for this family")?;
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                bail!("drift.b: expected a {d}×{d} matrix");
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            if !flat.iter().all(|x| x.is_finite()) {
                bail!("drift.b: entries must be finite");
            }
            DriftParams::Matrix(
                Array2::from_shape_vec((d, d), flat).expect("shape checked above"),
            )
        }
    };

    let sigma = match (pde, raw.sigma) {
        (PdeFamily::FokkerPlanck3d, Some(s)) => {
            if !(s > 0.0 && s.is_finite()) {
                bail!("sigma: must be positive, got {s}");
            }
            Some(s)
        }
        (PdeFamily::FokkerPlanck3d, None) => bail!("sigma: required for fokker_planck3d"),
        (_, Some(_)) => bail!("sigma: only valid for fokker_planck3d"),
        (_, None) => None,
    };

    if raw.name.is_empty() {
        bail!("name: must not be empty");
    }

    Ok(ExperimentConfig {
        name: raw.name,
        pde,
        n: raw.n,
        l: raw.l,
        dt: raw.dt,
        t_final: raw.t_final,
        delta: raw.delta,
        delta_op,
        rcond,
        scheme,
        coordinates,
        functional,
        ic_beta: raw.ic.beta,
        ic_shift: raw.ic.t,
        drift,
        sigma,
        output_dir: raw.output_dir.map(PathBuf::from),
        error_cadence,
        seed: raw.seed.unwrap_or(0),
    })
}

impl ExperimentConfig {
    /// Render the resolved configuration (defaults filled in) back to the
    /// TOML schema; `parse_config` of the result reproduces `self`.
    pub fn to_toml_string(&self) -> String {
        let fmt_f = |x: f64| {
            // TOML floats need a fraction or exponent part.
            let s = format!("{x:e}");
            if s.contains('e') || s.contains('.') {
                s
            } else {
                format!("{s}.0")
            }
        };
        let fmt_list_f =
            |v: &[f64]| format!("[{}]", v.iter().map(|&x| fmt_f(x)).collect::<Vec<_>>().join(", "));
        let fmt_list_u =
            |v: &[usize]| format!("[{}]", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "));

        let mut out = String::new();
        out.push_str(&format!("name = {:?}\n", self.name));
        out.push_str(&format!("pde = {:?}\n", self.pde.key()));
        out.push_str(&format!("d = {}\n", self.pde.d()));
        out.push_str(&format!("n = {}\n", fmt_list_u(&self.n)));
        out.push_str(&format!("l = {}\n", fmt_list_f(&self.l)));
        out.push_str(&format!("dt = {}\n", fmt_f(self.dt)));
        out.push_str(&format!("t_final = {}\n", fmt_f(self.t_final)));
        out.push_str(&format!("delta = {}\n", fmt_f(self.delta)));
        out.push_str(&format!("delta_op = {}\n", fmt_f(self.delta_op)));
        out.push_str(&format!("rcond = {}\n", fmt_f(self.rcond)));
        out.push_str(&format!(
            "scheme = \"{}\"\n",
            match self.scheme {
                Scheme::Euler => "euler",
                Scheme::Ab2 => "ab2",
            }
        ));
        out.push_str(&format!(
            "coordinates = \"{}\"\n",
            match self.coordinates {
                CoordinateMode::Fixed => "fixed",
                CoordinateMode::Adaptive => "adaptive",
            }
        ));
        out.push_str(&format!(
            "functional = \"{}\"\n",
            match self.functional {
                Functional::NormalMin => "normal_min",
                Functional::FullMin => "full_min",
            }
        ));
        out.push_str(&format!("ic.beta = {}\n", fmt_list_f(&self.ic_beta)));
        out.push_str(&format!("ic.t = {}\n", fmt_list_f(&self.ic_shift)));
        match &self.drift {
            DriftParams::Matrix(b) => {
                let rows: Vec<String> = b
                    .rows()
                    .into_iter()
                    .map(|r| fmt_list_f(r.as_slice().expect("row contiguous")))
                    .collect();
                out.push_str(&format!("drift.b = [{}]\n", rows.join(", ")));
            }
            DriftParams::Stream { alpha, length } => {
                out.push_str(&format!("drift.alpha = {}\n", fmt_f(*alpha)));
                out.push_str(&format!("drift.l = {}\n", fmt_f(*length)));
            }
        }
        if let Some(s) = self.sigma {
            out.push_str(&format!("sigma = {}\n", fmt_f(s)));
        }
        if let Some(dir) = &self.output_dir {
            out.push_str(&format!("output_dir = {:?}\n", dir.display().to_string()));
        }
        out.push_str(&format!("error_cadence = {}\n", self.error_cadence));
        out.push_str(&format!("seed = {}\n", self.seed));
        out
    }
}
