//! Convex variational construction of rank-reducing linear coordinate flows.
//!
//! At each time the infinitesimal generator `Σ` of the linear flow
//! `y = Γ(t)x` is chosen to minimize a convex quadratic in `Σ`:
//! either the normal component of the material derivative,
//! `‖P_N(G(v) − Σ_ij Σ_ij·c_ij)‖²` (`NormalMin`), or the full material
//! derivative `‖G(v) − Σ_ij Σ_ij·c_ij‖²` (`FullMin`), where
//! `c_ij = (∂v/∂y_i)·y_j`. Both lead to the same symmetric positive
//! semidefinite `d²×d²` normal equations `A·vec(Σ) = b` whose coefficients
//! are quadrature inner products of low-rank fields; when `A` is singular
//! any solution suffices, and we return the minimal-norm one. The flow map
//! then advances by the matrix ODE `Γ̇ = ΣΓ`, `Γ(0) = I`.
//!
//! Vectorization is column-major throughout: entry `(i,j)` of a `d×d`
//! matrix lives at position `i + d·j` of its vectorization.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, Inverse, JobSvd, SVDDC, UPLO};

use crate::error::{CoreError, Result};
use crate::pde_ops::CoordinateMap;
use crate::tangent::ProjectionFrame;
use crate::tt::TensorTrain;

/// Condition number of `Γ` above which `gamma_step` emits a warning.
const CONDITION_WARN: f64 = 1e8;

/// Which convex cost the generator minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Functional {
    /// Minimize `‖P_N(G(v) − Σ_ij Σ_ij·c_ij)‖²` — the normal component
    /// that drives rank growth.
    NormalMin,
    /// Minimize `‖G(v) − Σ_ij Σ_ij·c_ij‖²` — the full time derivative, so
    /// the solution in flowing coordinates varies as little as possible.
    FullMin,
}

/// Explicit time-stepping scheme for the solution and the flow map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    /// Two-step Adams–Bashforth; the first step falls back to Euler.
    Ab2,
}

/// The assembled normal equations `A·vec(Σ) = b` for the generator.
///
/// `a` is `d²×d²` symmetric positive semidefinite (a Gram matrix of the
/// projected coordinate fields), `b` has length `d²`, both in column-major
/// pair order `(i,j) ↦ i + d·j`. `g_norm2` carries `‖·‖²` of the (projected)
/// operator output so the cost at any generator is available as
/// `cost(Σ) = g_norm2 − 2⟨b, vec Σ⟩ + vec(Σ)ᵀ·A·vec(Σ)`.
#[derive(Debug, Clone)]
pub struct GeneratorSystem {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub functional: Functional,
    pub g_norm2: f64,
}

impl GeneratorSystem {
    pub fn d(&self) -> usize {
        (self.a.nrows() as f64).sqrt().round() as usize
    }

    /// Cost of the minimized functional at generator `sigma`, via the
    /// quadratic form.
    pub fn cost(&self, sigma: &Array2<f64>) -> f64 {
        let s = vec_col_major(sigma);
        self.g_norm2 - 2.0 * self.b.dot(&s) + s.dot(&self.a.dot(&s))
    }
}

/// Linear coordinate flow state: the map `Γ(t)`, the generator `Σ` used on
/// the step into time `t`, and `t` itself.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub map: CoordinateMap,
    pub sigma: Array2<f64>,
    pub t: f64,
}

impl FlowState {
    /// Identity map with zero generator at `t = 0`.
    pub fn identity(d: usize) -> Self {
        Self {
            map: CoordinateMap::identity(d),
            sigma: Array2::zeros((d, d)),
            t: 0.0,
        }
    }

    /// Time derivative `Γ̇ = ΣΓ` at this state.
    fn derivative(&self) -> Array2<f64> {
        self.sigma.dot(self.map.gamma())
    }
}

/// Column-major vectorization `(i,j) ↦ i + d·j`.
fn vec_col_major(m: &Array2<f64>) -> Array1<f64> {
    let d = m.nrows();
    Array1::from_shape_fn(d * d, |q| m[[q % d, q / d]])
}

/// Inverse of [`vec_col_major`].
fn unvec_col_major(v: &Array1<f64>, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |(i, j)| v[i + d * j])
}

/// Coordinate field `c_ij = (∂v/∂y_i)·y_j`; ranks unchanged.
pub fn c_field(v: &TensorTrain, i: usize, j: usize) -> Result<TensorTrain> {
    v.mode_derivative(i, 1)?.mode_coordinate_multiply(j)
}

/// Assemble the generator system at `v` for the given operator output
/// `g_of_v = G_y(v)` (already δ-rounded by the caller).
///
/// Exploits symmetry: `(d⁴+d²)/2` distinct inner products fill `A` and `d²`
/// fill `b`. Intermediate fields are rounded at `delta_sys` to bound
/// transient rank fill-in. The frame is consulted only by `NormalMin`.
pub fn assemble(
    v: &TensorTrain,
    g_of_v: &TensorTrain,
    frame: &ProjectionFrame,
    functional: Functional,
    delta_sys: f64,
) -> Result<GeneratorSystem> {
    let d = v.d();
    let dim = d * d;
    let mut fields: Vec<TensorTrain> = Vec::with_capacity(dim);
    for q in 0..dim {
        let (i, j) = (q % d, q / d);
        let c = c_field(v, i, j)?;
        let f = match functional {
            Functional::NormalMin => frame.normal_component(&c)?,
            Functional::FullMin => c,
        };
        fields.push(f.round(delta_sys)?);
    }
    let g_src = match functional {
        Functional::NormalMin => frame.normal_component(g_of_v)?.round(delta_sys)?,
        Functional::FullMin => g_of_v.clone(),
    };

    let mut a = Array2::<f64>::zeros((dim, dim));
    for p in 0..dim {
        for q in p..dim {
            let val = fields[p].inner(&fields[q])?;
            a[[p, q]] = val;
            a[[q, p]] = val;
        }
    }
    let mut b = Array1::<f64>::zeros(dim);
    for p in 0..dim {
        b[p] = g_src.inner(&fields[p])?;
    }
    let g_norm2 = g_src.inner(&g_src)?.max(0.0);
    Ok(GeneratorSystem {
        a,
        b,
        functional,
        g_norm2,
    })
}

/// Minimal-norm least-squares solution of `A·vec(Σ) = b` via symmetric
/// eigendecomposition, discarding eigenvalues below `rcond·λ_max`.
///
/// A numerically zero `A` yields `Σ = 0` when `b` is also negligible and an
/// inconsistent-system error otherwise (the quadratic cost would be
/// unbounded below).
pub fn solve_min_norm(sys: &GeneratorSystem, rcond: f64) -> Result<Array2<f64>> {
    let d = sys.d();
    let (vals, vecs) = sys.a.eigh(UPLO::Lower)?;
    let lambda_max = vals.iter().copied().fold(0.0f64, f64::max);
    let b_norm = sys.b.dot(&sys.b).sqrt();
    if lambda_max <= 0.0 {
        if b_norm > 1e-12 {
            return Err(CoreError::InconsistentSystem { b_norm });
        }
        return Ok(Array2::zeros((d, d)));
    }
    let cut = rcond * lambda_max;
    let mut x = Array1::<f64>::zeros(d * d);
    for (k, &lam) in vals.iter().enumerate() {
        if lam > cut {
            let q = vecs.column(k);
            x.scaled_add(q.dot(&sys.b) / lam, &q);
        }
    }
    Ok(unvec_col_major(&x, d))
}

/// Advance the flow map one step of `Γ̇ = ΣΓ` with the state's generator.
///
/// `prev` supplies the previous state for `Ab2` (falls back to Euler when
/// absent). The new state's `sigma` carries the current generator until the
/// next solve overwrites it. Fails if the stepped map is numerically
/// singular; warns when its condition number exceeds `1e8`.
pub fn gamma_step(
    state: &FlowState,
    prev: Option<&FlowState>,
    dt: f64,
    scheme: Scheme,
) -> Result<FlowState> {
    let f_k = state.derivative();
    let mut gamma = state.map.gamma().to_owned();
    match (scheme, prev) {
        (Scheme::Ab2, Some(p)) => {
            gamma.scaled_add(1.5 * dt, &f_k);
            gamma.scaled_add(-0.5 * dt, &p.derivative());
        }
        _ => gamma.scaled_add(dt, &f_k),
    }
    warn_if_ill_conditioned(&gamma);
    let map = CoordinateMap::new(gamma)?;
    Ok(FlowState {
        map,
        sigma: state.sigma.clone(),
        t: state.t + dt,
    })
}

fn warn_if_ill_conditioned(gamma: &Array2<f64>) {
    if let Ok((_, s, _)) = gamma.svddc(JobSvd::None) {
        let (smax, smin) = (s[0], s[s.len() - 1]);
        if smin <= 0.0 || smax / smin > CONDITION_WARN {
            log::warn!(
                "flow map condition number {:.3e} exceeds {CONDITION_WARN:.0e}",
                if smin > 0.0 { smax / smin } else { f64::INFINITY }
            );
        }
    }
}

/// Matrix exponential by scaling-and-squaring with a [6/6] Padé approximant
/// (ample for the small, well-scaled generators used here; serves the
/// analytic references and flow-accuracy checks).
pub fn matrix_exponential(a: &Array2<f64>) -> Result<Array2<f64>> {
    let d = a.nrows();
    let norm1 = (0..a.ncols())
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let s = if norm1 > 0.5 {
        (norm1 / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let x = a.mapv(|v| v / 2f64.powi(s));
    let q = 6usize;
    let mut c = 1.0;
    let mut num = Array2::<f64>::eye(d);
    let mut den = Array2::<f64>::eye(d);
    let mut pow = Array2::<f64>::eye(d);
    for k in 1..=q {
        c *= (q - k + 1) as f64 / ((k * (2 * q - k + 1)) as f64);
        pow = pow.dot(&x);
        num.scaled_add(c, &pow);
        den.scaled_add(if k % 2 == 0 { c } else { -c }, &pow);
    }
    let mut e = den.inv()?.dot(&num);
    for _ in 0..s {
        e = e.dot(&e);
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, GridRef};
    use crate::pde_ops::{build_fokker_planck, build_liouville, DiagonalDiffusion, DriftSpec};
    use ndarray::{Array3, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grids_of(dims: &[(usize, f64)]) -> Vec<GridRef> {
        dims.iter().map(|&(n, l)| make_grid(n, l).unwrap()).collect()
    }

    fn rand_tt(seed: u64, grids: &[GridRef], ranks: &[usize]) -> TensorTrain {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cores = (0..grids.len())
            .map(|i| {
                Array3::from_shape_fn((ranks[i], grids[i].n(), ranks[i + 1]), |_| {
                    rng.gen_range(-1.0..1.0)
                })
            })
            .collect();
        TensorTrain::new(grids.to_vec(), cores).unwrap()
    }

    fn gaussian_tt(grids: &[GridRef], beta: &[f64], t: &[f64]) -> TensorTrain {
        let term: Vec<Array1<f64>> = grids
            .iter()
            .zip(beta.iter().zip(t))
            .map(|(g, (&b, &ti))| g.nodes().mapv(|x| (-(x + ti) * (x + ti) / b).exp()))
            .collect();
        TensorTrain::from_separable(grids.to_vec(), &[term], &[1.0]).unwrap()
    }

    /// Drift matrix of the benchmark three-dimensional rotation problem.
    fn drift_b() -> Array2<f64> {
        ndarray::arr2(&[[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    }

    #[test]
    fn c_field_matches_dense_and_is_zero_on_constants() {
        let grids = grids_of(&[(16, 8.0), (16, 6.0)]);
        let v = rand_tt(11, &grids, &[1, 3, 1]);
        let full = v.to_full().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let c = c_field(&v, i, j).unwrap();
                assert_eq!(c.ranks(), v.ranks());
                // Dense oracle: spectral derivative along axis i, then
                // node-value scaling along axis j.
                let dm = grids[i].diff_matrix(1).unwrap();
                let shape = full.shape().to_vec();
                let flat = full
                    .clone()
                    .into_shape((
                        shape[..i].iter().product::<usize>(),
                        shape[i],
                        shape[i + 1..].iter().product::<usize>(),
                    ))
                    .unwrap();
                let mut der = Array3::<f64>::zeros(flat.raw_dim());
                for b in 0..flat.shape()[0] {
                    der.index_axis_mut(Axis(0), b)
                        .assign(&dm.dot(&flat.index_axis(Axis(0), b)));
                }
                let mut want = der.into_shape(ndarray::IxDyn(&shape)).unwrap();
                let nodes = grids[j].nodes();
                for (idx, val) in want.indexed_iter_mut() {
                    *val *= nodes[idx[j]];
                }
                let got = c.to_full().unwrap();
                let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let worst = got
                    .iter()
                    .zip(want.iter())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                assert!(worst <= 1e-10 * scale, "c_{i}{j}: {worst}");
            }
        }

        let ones = TensorTrain::constant_one(grids.clone());
        for i in 0..2 {
            for j in 0..2 {
                let c = c_field(&ones, i, j).unwrap();
                assert!(c.norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn radial_gaussian_integrates_by_parts() {
        // ⟨(∂_i v)·y_i, 1⟩ = −⟨v, 1⟩ for decayed fields (no boundary term).
        let grids = grids_of(&[(64, 30.0), (64, 30.0), (64, 30.0)]);
        let v = gaussian_tt(&grids, &[4.0, 4.0, 4.0], &[0.0, 0.0, 0.0]);
        let one = TensorTrain::constant_one(grids.clone());
        let mass = v.inner(&one).unwrap();
        for i in 0..3 {
            let cii = c_field(&v, i, i).unwrap();
            let got = cii.inner(&one).unwrap();
            assert!(
                (got + mass).abs() <= 1e-6 * mass.abs(),
                "mode {i}: {got} vs {}",
                -mass
            );
        }
    }

    #[test]
    fn identity_and_zero_systems_solve_trivially() {
        let b_mat = drift_b();
        let sys = GeneratorSystem {
            a: Array2::eye(9),
            b: vec_col_major(&b_mat),
            functional: Functional::FullMin,
            g_norm2: 0.0,
        };
        let sigma = solve_min_norm(&sys, 1e-10).unwrap();
        let worst = (&sigma - &b_mat)
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(worst <= 1e-14);

        let zero = GeneratorSystem {
            a: Array2::eye(9),
            b: Array1::zeros(9),
            functional: Functional::FullMin,
            g_norm2: 0.0,
        };
        let sigma = solve_min_norm(&zero, 1e-10).unwrap();
        assert!(sigma.iter().all(|&x| x == 0.0));

        // Numerically zero A: consistent with b = 0, inconsistent otherwise.
        let null = GeneratorSystem {
            a: Array2::zeros((9, 9)),
            b: Array1::zeros(9),
            functional: Functional::FullMin,
            g_norm2: 0.0,
        };
        assert!(solve_min_norm(&null, 1e-10).unwrap().iter().all(|&x| x == 0.0));
        let bad = GeneratorSystem {
            a: Array2::zeros((9, 9)),
            b: Array1::ones(9),
            functional: Functional::FullMin,
            g_norm2: 0.0,
        };
        match solve_min_norm(&bad, 1e-10) {
            Err(CoreError::InconsistentSystem { .. }) => {}
            other => panic!("expected inconsistent-system error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_norm_solution_matches_pseudo_inverse() {
        // Rank-deficient PSD A with b in range: the minimal-norm solution
        // must match the SVD pseudo-inverse and solve the system.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Array2::from_shape_fn((9, 5), |_| rng.gen_range(-1.0..1.0));
        let a = m.dot(&m.t()); // PSD, rank 5
        let x0 = Array1::from_shape_fn(9, |_| rng.gen_range(-1.0..1.0));
        let b = a.dot(&x0);
        let sys = GeneratorSystem {
            a: a.clone(),
            b: b.clone(),
            functional: Functional::FullMin,
            g_norm2: 0.0,
        };
        let sigma = solve_min_norm(&sys, 1e-10).unwrap();
        let x = vec_col_major(&sigma);
        let res = (&a.dot(&x) - &b).mapv(|v| v * v).sum().sqrt();
        let b_norm = b.mapv(|v| v * v).sum().sqrt();
        assert!(res <= 1e-9 * b_norm, "residual {res}");

        // Independent oracle: truncated-SVD pseudo-inverse.
        let (u, s, vt) = a.svddc(JobSvd::Some).unwrap();
        let (u, vt) = (u.unwrap(), vt.unwrap());
        let mut want = Array1::<f64>::zeros(9);
        for k in 0..9 {
            if s[k] > 1e-10 * s[0] {
                want.scaled_add(u.column(k).dot(&b) / s[k], &vt.row(k));
            }
        }
        let diff = (&x - &want).mapv(|v| v * v).sum().sqrt();
        assert!(diff <= 1e-9 * want.mapv(|v| v * v).sum().sqrt());
        // Minimality: no solution has a smaller norm than the pseudo-inverse
        // solution; x0 itself is a (generally longer) solution.
        let xn = x.mapv(|v| v * v).sum().sqrt();
        let x0n = x0.mapv(|v| v * v).sum().sqrt();
        assert!(xn <= x0n + 1e-12);
    }

    /// Shared setup: benchmark rotation drift on a rank-2 Gaussian.
    fn liouville_setup(
        n: usize,
    ) -> (Vec<GridRef>, TensorTrain, TensorTrain, ProjectionFrame) {
        let grids = grids_of(&[(n, 30.0), (n, 30.0), (n, 30.0)]);
        let v = gaussian_tt(&grids, &[4.0, 0.25, 4.0], &[1.0, -1.0, 1.0])
            .add(&gaussian_tt(&grids, &[3.0, 1.0, 2.0], &[-0.4, 0.3, 0.2]).scale(0.5))
            .unwrap()
            .round(1e-12)
            .unwrap();
        let op = build_liouville(
            &DriftSpec::Linear(drift_b()),
            &grids,
            &CoordinateMap::identity(3),
            1e-10,
            64,
        )
        .unwrap();
        let g = op.apply(&v).unwrap().round(1e-12).unwrap();
        let frame = ProjectionFrame::new(&v).unwrap();
        (grids, v, g, frame)
    }

    #[test]
    fn assembled_system_is_symmetric_psd_with_consistent_cost() {
        let (_grids, v, g, frame) = liouville_setup(32);
        for functional in [Functional::FullMin, Functional::NormalMin] {
            let sys = assemble(&v, &g, &frame, functional, 1e-12).unwrap();
            assert_eq!(sys.a.nrows(), 9);
            assert_eq!(sys.d(), 3);
            let amax = sys.a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for p in 0..9 {
                for q in 0..9 {
                    assert!((sys.a[[p, q]] - sys.a[[q, p]]).abs() <= 1e-10 * amax);
                }
            }
            let (vals, _) = sys.a.eigh(UPLO::Lower).unwrap();
            let lmax = vals.iter().fold(0.0f64, |m, &x| m.max(x));
            assert!(vals[0] >= -1e-10 * lmax, "eigmin {}", vals[0]);
            // Quadratic-form cost at Σ = 0 is the projected-source energy.
            assert!((sys.cost(&Array2::zeros((3, 3))) - sys.g_norm2).abs() <= 1e-14);
        }
    }

    #[test]
    fn assembly_is_deterministic_across_gauges() {
        let (_grids, v, g, frame) = liouville_setup(16);
        let sys1 = assemble(&v, &g, &frame, Functional::NormalMin, 1e-12).unwrap();
        // Re-gauge the same values and rebuild everything from scratch.
        let v2 = v.clone().right_orthogonalized().unwrap();
        let frame2 = ProjectionFrame::new(&v2).unwrap();
        let sys2 = assemble(&v2, &g, &frame2, Functional::NormalMin, 1e-12).unwrap();
        let amax = sys1.a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let worst_a = (&sys1.a - &sys2.a)
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs()));
        let worst_b = (&sys1.b - &sys2.b)
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(worst_a <= 1e-10 * amax, "A gauge drift {worst_a}");
        assert!(worst_b <= 1e-10 * amax, "b gauge drift {worst_b}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // End-to-end check of the normal equations: the analytic gradient
        // 2(A·vecΣ − b) must match central differences of the cost computed
        // independently by tensor contractions.
        let (_grids, v, g, frame) = liouville_setup(16);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sigma = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-0.5..0.5));
        let dir = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let h = 1e-5;

        let raw_cost = |s: &Array2<f64>, functional: Functional| -> f64 {
            // Q = G(v) − Σ_ij s_ij·c_ij assembled directly from raw fields.
            let mut q = g.clone();
            for i in 0..3 {
                for j in 0..3 {
                    let c = c_field(&v, i, j).unwrap();
                    q = q.add(&c.scale(-s[[i, j]])).unwrap();
                }
            }
            let q = q.round(1e-13).unwrap();
            let norm = match functional {
                Functional::FullMin => q.right_orthogonalized().unwrap().norm(),
                Functional::NormalMin => frame.normal_norm(&q).unwrap(),
            };
            norm * norm
        };

        for functional in [Functional::FullMin, Functional::NormalMin] {
            let sys = assemble(&v, &g, &frame, functional, 1e-13).unwrap();
            let grad = 2.0 * (sys.a.dot(&vec_col_major(&sigma)) - &sys.b);
            let want = grad.dot(&vec_col_major(&dir));
            let plus = raw_cost(&(&sigma + &dir.mapv(|x| x * h)), functional);
            let minus = raw_cost(&(&sigma - &dir.mapv(|x| x * h)), functional);
            let fd = (plus - minus) / (2.0 * h);
            let rel = (fd - want).abs() / want.abs().max(1e-12);
            assert!(rel <= 1e-5, "{functional:?}: fd {fd} vs analytic {want}");
            // The quadratic form agrees with the raw contraction cost.
            let qf = sys.cost(&sigma);
            let direct = raw_cost(&sigma, functional);
            assert!(
                (qf - direct).abs() <= 1e-8 * direct.abs().max(1.0),
                "{functional:?}: quadratic {qf} vs direct {direct}"
            );
        }
    }

    #[test]
    fn full_min_recovers_rotation_generator_at_start() {
        // At t = 0 the advection field is exactly Σ_ij B_ij·c_ij, so vec(B)
        // solves the full-minimization system with zero residual.
        let (_grids, v, g, frame) = liouville_setup(32);
        let sys = assemble(&v, &g, &frame, Functional::FullMin, 1e-12).unwrap();
        let vb = vec_col_major(&drift_b());
        let b_norm = sys.b.dot(&sys.b).sqrt();
        let res = (&sys.a.dot(&vb) - &sys.b).mapv(|x| x * x).sum().sqrt();
        assert!(res <= 1e-8 * b_norm, "residual {res} vs ‖b‖ {b_norm}");
        // The solved generator reproduces the operator: cost ≈ 0.
        let sigma = solve_min_norm(&sys, 1e-10).unwrap();
        let cost = sys.cost(&sigma);
        assert!(cost <= 1e-12 * sys.g_norm2, "cost {cost}");
    }

    #[test]
    fn normal_min_annihilates_rotation_normal_component() {
        let (_grids, v, g, frame) = liouville_setup(32);
        let sys = assemble(&v, &g, &frame, Functional::NormalMin, 1e-12).unwrap();
        let sigma = solve_min_norm(&sys, 1e-10).unwrap();
        let cost = sys.cost(&sigma).max(0.0);
        let g2 = g.inner(&g).unwrap();
        assert!(cost <= 1e-12 * g2, "normal cost {cost} vs ‖G(v)‖² {g2}");
    }

    #[test]
    fn laplacian_of_isotropic_gaussian_is_tangent() {
        // Δv of a rank-1 Gaussian is a sum of one-mode perturbations, hence
        // tangent: the normal-minimization data vanish and Σ = 0 is optimal.
        let grids = grids_of(&[(64, 30.0), (64, 30.0), (64, 30.0)]);
        let v = gaussian_tt(&grids, &[4.0, 4.0, 4.0], &[0.0, 0.0, 0.0]);
        let op = build_fokker_planck(
            &DriftSpec::Linear(Array2::zeros((3, 3))),
            &DiagonalDiffusion::constant(3, 1.0),
            &grids,
            &CoordinateMap::identity(3),
            1e-10,
            64,
        )
        .unwrap();
        let g = op.apply(&v).unwrap().round(1e-12).unwrap();
        let frame = ProjectionFrame::new(&v).unwrap();
        let sys = assemble(&v, &g, &frame, Functional::NormalMin, 1e-12).unwrap();
        let g_scale = g.norm() * v.norm();
        let b_norm = sys.b.dot(&sys.b).sqrt();
        assert!(b_norm <= 1e-10 * g_scale, "‖b‖ = {b_norm}");
        let sigma = solve_min_norm(&sys, 1e-10).unwrap();
        let s_norm = sigma.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(s_norm <= 1e-8, "Σ norm {s_norm}");
    }

    #[test]
    fn matrix_exponential_matches_closed_forms() {
        // Nilpotent: e^N = I + N exactly.
        let n = ndarray::arr2(&[[0.0, 1.0], [0.0, 0.0]]);
        let e = matrix_exponential(&n).unwrap();
        let want = ndarray::arr2(&[[1.0, 1.0], [0.0, 1.0]]);
        assert!((&e - &want).iter().all(|x| x.abs() <= 1e-14));
        // Rotation block: closed-form sine/cosine.
        let th = 1.3;
        let r = ndarray::arr2(&[[0.0, th], [-th, 0.0]]);
        let e = matrix_exponential(&r).unwrap();
        let want = ndarray::arr2(&[
            [th.cos(), th.sin()],
            [-th.sin(), th.cos()],
        ]);
        let worst = (&e - &want).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(worst <= 1e-12, "rotation exp error {worst}");
    }

    #[test]
    fn euler_flow_converges_to_matrix_exponential() {
        let b = drift_b();
        let dt = 1e-4;
        let mut state = FlowState::identity(3);
        state.sigma = b.clone();
        for _ in 0..10_000 {
            state = gamma_step(&state, None, dt, Scheme::Euler).unwrap();
        }
        let want = matrix_exponential(&b).unwrap();
        let err = (state.map.gamma() - &want)
            .mapv(|x| x * x)
            .sum()
            .sqrt();
        assert!(err <= 5e-4, "Euler flow error {err}");
        assert!((state.t - 1.0).abs() <= 1e-9);

        // AB2 with exact history is second order: much tighter at the same
        // step size.
        let mut cur = FlowState::identity(3);
        cur.sigma = b.clone();
        let mut prev: Option<FlowState> = None;
        for _ in 0..10_000 {
            let next = gamma_step(&cur, prev.as_ref(), dt, Scheme::Ab2).unwrap();
            prev = Some(std::mem::replace(&mut cur, next));
        }
        let err2 = (cur.map.gamma() - &want).mapv(|x| x * x).sum().sqrt();
        assert!(err2 <= 1e-6, "AB2 flow error {err2}");
    }

    #[test]
    fn determinant_tracks_trace_identity() {
        // det Γ(t) = exp(∫ tr Σ ds): the benchmark generator is trace-free,
        // so the determinant must hold at 1 up to integrator drift.
        let b = drift_b();
        let mut state = FlowState::identity(3);
        state.sigma = b;
        let mut prev: Option<FlowState> = None;
        for _ in 0..1000 {
            let next = gamma_step(&state, prev.as_ref(), 1e-3, Scheme::Ab2).unwrap();
            prev = Some(std::mem::replace(&mut state, next));
        }
        assert!(
            (state.map.det().abs() - 1.0).abs() <= 1e-3,
            "det drift {}",
            state.map.det()
        );
    }

    #[test]
    fn zero_generator_keeps_map_fixed() {
        let state = FlowState::identity(3);
        let next = gamma_step(&state, None, 0.1, Scheme::Euler).unwrap();
        assert!(next.map.is_identity());
        assert!((next.t - 0.1).abs() <= 1e-15);
    }
}
