//! Rank-adaptive step-truncation time stepping coupled with the coordinate
//! flow.
//!
//! The solver advances the transformed equation
//! `∂v/∂t = G_y(v) − Σ_ij Σ_ij·(∂v/∂y_i)·y_j` one step at a time. Each step
//! at `t_k = k·Δt`:
//!
//! 1. builds the tangent frame of the current train,
//! 2. (adaptive mode) assembles the quadratic generator program at the
//!    current state and solves it for `Σ_k`,
//! 3. forms the right-hand side `F_k` and records diagnostics — ranks,
//!    normal-component norm, mass, functional value,
//! 4. advances the train by a δ-truncated Euler or AB2 combination — the
//!    truncation is the rank-adaptive mechanism: ranks emerge from the
//!    per-step SVD threshold rather than from an a-priori cap,
//! 5. advances the map by `Γ̇ = ΣΓ` with the matching scheme and rebuilds
//!    the transformed operator for the new `Γ`.
//!
//! Fixed-coordinate mode runs the same loop with `Σ ≡ 0` and `Γ ≡ I`; the
//! generator machinery is bypassed but the normal-norm diagnostic is still
//! recorded so the two modes can be compared step by step. In that mode a
//! degenerate tangent frame (possible when stepping with `δ = 0` keeps
//! numerically-zero singular values) downgrades the diagnostic to NaN
//! instead of aborting; in adaptive mode the frame is load-bearing and the
//! degeneracy propagates as an error.

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::flowgen::{
    assemble, c_field, gamma_step, solve_min_norm, FlowState, Functional, Scheme,
};
use crate::pde_ops::{CoordinateMap, OperatorSpec, SeparatedOperator};
use crate::tangent::ProjectionFrame;
use crate::tt::TensorTrain;

/// Truncation tolerance for intra-step intermediates (operator output and
/// right-hand-side combinations) — well below any practical step tolerance,
/// so it never competes with the solution threshold `δ`.
pub const DELTA_SYS: f64 = 1e-12;

/// Whether the coordinate map evolves or stays at the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordinateMode {
    /// `Γ ≡ I`, `Σ ≡ 0`: plain step-truncation in the original coordinates.
    Fixed,
    /// `Σ_k` solved from the generator program each step; `Γ̇ = ΣΓ`.
    Adaptive,
}

/// Time-stepping configuration.
#[derive(Debug, Clone)]
pub struct StepConfig {
    /// Step size `Δt` (must be positive).
    pub dt: f64,
    /// Final time; must be an integer multiple of `dt` within `1e−9`.
    pub t_final: f64,
    /// Relative truncation tolerance `δ` for the solution train; `0` keeps
    /// every nonzero singular value.
    pub delta: f64,
    /// Linear-multistep scheme for both the train and the map.
    pub scheme: Scheme,
    pub coordinates: CoordinateMode,
    /// Functional minimized for `Σ` in adaptive mode.
    pub functional: Functional,
    /// Relative eigenvalue cutoff of the minimal-norm generator solve.
    pub rcond: f64,
    /// Rebuild the transformed operator every this many steps (≥ 1).
    pub refresh_every: usize,
    /// Warn through the log when the recorded normal norm exceeds this.
    pub eps_monitor: Option<f64>,
    /// Optional explicit rank-increase trigger: freeze the interior ranks on
    /// steps where the normal norm is at most `δ‖v‖/Δt`, so they grow only
    /// when the dynamics measurably leaves the current manifold.
    pub rank_trigger: bool,
}

impl StepConfig {
    /// A configuration with the common defaults: minimal-norm generator from
    /// the normal-component functional, `rcond = 1e−10`, operator refresh
    /// every step, no monitor threshold, no rank trigger.
    pub fn new(
        dt: f64,
        t_final: f64,
        delta: f64,
        scheme: Scheme,
        coordinates: CoordinateMode,
    ) -> Self {
        Self {
            dt,
            t_final,
            delta,
            scheme,
            coordinates,
            functional: Functional::NormalMin,
            rcond: 1e-10,
            refresh_every: 1,
            eps_monitor: None,
            rank_trigger: false,
        }
    }

    /// Number of steps `T/Δt`, validated together with the remaining
    /// invariants.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "step size must be positive, got {}",
                self.dt
            )));
        }
        if !(self.delta >= 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "truncation tolerance must be non-negative, got {}",
                self.delta
            )));
        }
        if !(self.t_final >= 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "final time must be non-negative, got {}",
                self.t_final
            )));
        }
        if self.refresh_every == 0 {
            return Err(CoreError::InvalidConfig(
                "operator refresh cadence must be at least 1".into(),
            ));
        }
        if !(self.rcond > 0.0 && self.rcond < 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "generator solve cutoff must lie in (0, 1), got {}",
                self.rcond
            )));
        }
        let n = (self.t_final / self.dt).round();
        if (n * self.dt - self.t_final).abs() > 1e-9 {
            return Err(CoreError::InvalidConfig(format!(
                "final time {} is not an integer multiple of the step size {}",
                self.t_final, self.dt
            )));
        }
        Ok(n as usize)
    }
}

/// Diagnostics at one time node `t_k`. A run over `N` steps emits `N + 1`
/// records, one per node including both endpoints.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: f64,
    /// Full rank vector `[1, r_1, …, r_{d−1}, 1]` of the state at `t`.
    pub ranks: Vec<usize>,
    /// Sum of the full rank vector, boundary ones included — the complexity
    /// measure plotted against time (a rank-one 3D train scores 4).
    pub rank_1norm: usize,
    /// Norm of the normal component of the right-hand side at the state —
    /// the part of the dynamics the current fixed-rank manifold cannot
    /// represent. NaN when the frame is degenerate (fixed mode only).
    pub normal_norm: f64,
    /// Mass in the original coordinates, `det(Γ)⁻¹·⟨v, 1⟩`.
    pub mass: f64,
    /// Value of the generator functional at the `Σ` in force; `‖G_y(v)‖²`
    /// in fixed-coordinate mode (the cost of leaving `Σ = 0`).
    pub cost_value: f64,
    /// Generator used on the step out of `t`.
    pub sigma: Array2<f64>,
    /// Coordinate map at `t`.
    pub gamma: Array2<f64>,
}

/// Final state of a [`run`].
#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<StepRecord>,
    pub v: TensorTrain,
    pub flow: FlowState,
}

/// Right-hand side of the transformed equation:
/// `G_y(v) − Σ_ij Σ_ij·(∂v/∂y_i)·y_j`, rounded at [`DELTA_SYS`]. With
/// `Σ = 0` this is exactly the compressed operator application.
pub fn rhs(
    v: &TensorTrain,
    op: &SeparatedOperator,
    sigma: &Array2<f64>,
) -> Result<TensorTrain> {
    let g = op.apply_compressed(v, DELTA_SYS)?;
    rhs_from_parts(v, &g, sigma)
}

/// [`rhs`] when `G_y(v)` has already been computed — the run loop reuses a
/// single application for both system assembly and stepping.
fn rhs_from_parts(
    v: &TensorTrain,
    g_of_v: &TensorTrain,
    sigma: &Array2<f64>,
) -> Result<TensorTrain> {
    let d = v.d();
    if sigma.nrows() != d || sigma.ncols() != d {
        return Err(CoreError::DimensionMismatch(format!(
            "generator is {}×{} for a {d}-dimensional state",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let mut f = g_of_v.clone();
    let mut extended = false;
    for j in 0..d {
        for i in 0..d {
            let s = sigma[[i, j]];
            if s != 0.0 {
                f = f.add(&c_field(v, i, j)?.scale(-s))?;
                extended = true;
            }
        }
    }
    if extended {
        f.round(DELTA_SYS)
    } else {
        Ok(f)
    }
}

/// One δ-truncated linear-multistep step.
///
/// Euler: `round(v + Δt·F_k, δ)`. AB2 with a previous right-hand side:
/// `round(v + Δt·(1.5·F_k − 0.5·F_{k−1}), δ)`. AB2 without one falls back
/// to Euler — the bootstrap step.
pub fn step_truncation(
    v: &TensorTrain,
    f_k: &TensorTrain,
    f_prev: Option<&TensorTrain>,
    cfg: &StepConfig,
) -> Result<TensorTrain> {
    step_truncation_capped(v, f_k, f_prev, cfg, None)
}

fn step_truncation_capped(
    v: &TensorTrain,
    f_k: &TensorTrain,
    f_prev: Option<&TensorTrain>,
    cfg: &StepConfig,
    caps: Option<&[usize]>,
) -> Result<TensorTrain> {
    let dt = cfg.dt;
    let stepped = match (cfg.scheme, f_prev) {
        (Scheme::Ab2, Some(fp)) => v
            .add(&f_k.scale(1.5 * dt))?
            .add(&fp.scale(-0.5 * dt))?,
        _ => v.add(&f_k.scale(dt))?,
    };
    stepped.round_with_cap(cfg.delta, caps)
}

/// Mutable state carried across the time loop.
struct LoopState {
    v: TensorTrain,
    flow: FlowState,
    op: SeparatedOperator,
    f_prev: Option<TensorTrain>,
    prev_flow: Option<FlowState>,
}

/// Integrate from the initial train to `t_final`, emitting a [`StepRecord`]
/// per time node through `sink` (and collecting them in the output). The
/// sink also receives the train at the record's time, so callers can write
/// snapshots or compute errors without re-running.
///
/// The operator is rebuilt from `spec` for the current map every
/// `refresh_every` steps in adaptive mode; in fixed mode the map never
/// moves, so the operator built at the identity is reused throughout.
pub fn run(
    cfg: &StepConfig,
    ic: &TensorTrain,
    spec: &OperatorSpec,
    mut sink: impl FnMut(&StepRecord, &TensorTrain),
) -> Result<RunOutput> {
    let n_steps = cfg.steps()?;
    let d = ic.d();
    let one = TensorTrain::constant_one(ic.grids().to_vec());
    let mut st = LoopState {
        v: ic.clone(),
        flow: FlowState::identity(d),
        op: spec.build(&CoordinateMap::identity(d))?,
        f_prev: None,
        prev_flow: None,
    };
    let mut records = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        let record = advance(cfg, spec, &one, &mut st, k, k == n_steps, &mut sink)
            .map_err(|e| abort_at(k, k as f64 * cfg.dt, e))?;
        records.push(record);
    }
    Ok(RunOutput {
        records,
        v: st.v,
        flow: st.flow,
    })
}

/// Wrap a step failure with its time-node context; errors that already
/// carry one pass through.
fn abort_at(step: usize, t: f64, e: CoreError) -> CoreError {
    match e {
        CoreError::NonFinite { .. } | CoreError::IntegrationAbort { .. } => e,
        other => CoreError::IntegrationAbort {
            step,
            t,
            source: Box::new(other),
        },
    }
}

/// Diagnostics at node `k` and, unless `last`, the advance to node `k + 1`.
/// The sink fires after the record is built and before the state moves, so
/// it observes the train at the record's time.
fn advance(
    cfg: &StepConfig,
    spec: &OperatorSpec,
    one: &TensorTrain,
    st: &mut LoopState,
    k: usize,
    last: bool,
    sink: &mut impl FnMut(&StepRecord, &TensorTrain),
) -> Result<StepRecord> {
    let t = k as f64 * cfg.dt;
    let d = st.v.d();
    let adaptive = cfg.coordinates == CoordinateMode::Adaptive;

    // Diagnostics and generator solve at t_k. The frame is load-bearing in
    // adaptive mode; in fixed mode it only feeds the normal-norm diagnostic,
    // so a degenerate state downgrades the diagnostic instead of aborting.
    let frame = match ProjectionFrame::new(&st.v) {
        Ok(f) => Some(f),
        Err(e @ CoreError::DegenerateFrame { .. }) if adaptive => return Err(e),
        Err(CoreError::DegenerateFrame { .. }) => None,
        Err(e) => return Err(e),
    };
    let g = st.op.apply_compressed(&st.v, DELTA_SYS)?;
    let (sigma, cost_value) = if adaptive {
        let frame = frame.as_ref().expect("adaptive frame is present");
        let sys = assemble(&st.v, &g, frame, cfg.functional, DELTA_SYS)?;
        let sigma = solve_min_norm(&sys, cfg.rcond)?;
        let cost = sys.cost(&sigma).max(0.0);
        (sigma, cost)
    } else {
        (Array2::zeros((d, d)), g.inner(&g)?.max(0.0))
    };
    let f_k = rhs_from_parts(&st.v, &g, &sigma)?;
    let normal_norm = match &frame {
        Some(frame) => frame.normal_norm(&f_k)?,
        None => f64::NAN,
    };
    if let Some(eps) = cfg.eps_monitor {
        if normal_norm > eps {
            log::warn!(
                "step {k} (t = {t:.6}): normal norm {normal_norm:.3e} exceeds \
                 the monitor threshold {eps:.3e}"
            );
        }
    }
    let mass = st.v.inner(one)? / st.flow.map.det();
    let ranks = st.v.ranks();
    let record = StepRecord {
        t,
        rank_1norm: ranks.iter().sum(),
        ranks,
        normal_norm,
        mass,
        cost_value,
        sigma: sigma.clone(),
        gamma: st.flow.map.gamma().to_owned(),
    };
    sink(&record, &st.v);
    if last {
        return Ok(record);
    }

    // Advance the train. With the trigger on, steps whose dynamics stays
    // within the manifold (normal norm at most δ‖v‖/Δt) freeze the ranks.
    let caps: Option<Vec<usize>> =
        if cfg.rank_trigger && normal_norm <= cfg.delta * st.v.norm() / cfg.dt {
            Some(record.ranks.clone())
        } else {
            None
        };
    let v_next = step_truncation_capped(&st.v, &f_k, st.f_prev.as_ref(), cfg, caps.as_deref())?;
    if !v_next.all_finite() {
        return Err(CoreError::NonFinite { step: k, t });
    }

    // Advance the map with the matching scheme and refresh the operator.
    // The previous flow state must carry its own generator Σ_{k−1}, so the
    // clone is taken after Σ_k is written into the current state.
    if adaptive {
        st.flow.sigma = sigma;
        let next = gamma_step(&st.flow, st.prev_flow.as_ref(), cfg.dt, cfg.scheme)?;
        st.prev_flow = Some(st.flow.clone());
        st.flow = next;
        if (k + 1) % cfg.refresh_every == 0 {
            st.op = spec.build(&st.flow.map)?;
        }
    } else {
        st.flow.t = t + cfg.dt;
    }
    st.v = v_next;
    st.f_prev = Some(f_k);
    Ok(record)
}
