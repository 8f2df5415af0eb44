//! Separated (CP-form) linear operators, and builders that realize the
//! Liouville and Fokker-Planck generators in a moving linear coordinate
//! system `y = Γx`.
//!
//! An operator is a sum of terms; each term is a signed weight, one
//! [`OperatorFactor`] per dimension (a diagonal coefficient, a spectral
//! derivative, or both in a stated order), and optionally a tensor-train
//! *multiplier* — a non-separable coefficient field applied pointwise.
//! Plain factors never increase TT ranks, so applying a K-term operator
//! multiplies each interior rank by at most K (multiplier terms additionally
//! scale by the multiplier's rank).
//!
//! Operators always live in y-coordinates on the fixed reference periodic
//! grid. Transformed coefficients such as `f(Γ⁻¹y)` are sampled with
//! per-dimension periodic wrapping of `Γ⁻¹y` and re-separated (SVD in 2D,
//! tensor-train SVD in higher dimensions) to a build tolerance; this wrapping
//! is exact for fields supported away from the boundary and is the documented
//! source of boundary-leak error otherwise. Linear drifts `f(x) = Bx`
//! transform in closed form to the coefficient matrix `ΓBΓ⁻¹` and never
//! sample.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayViewD, Axis};
use ndarray_linalg::{Determinant, Inverse, JobSvd, SVDDCInto};

use crate::error::{CoreError, Result};
use crate::grid::GridRef;
use crate::tt::TensorTrain;

/// Grid-point budget for full-grid sampling and the dense application path.
const DENSE_LIMIT: u128 = 1 << 22;

/// A univariate coefficient profile.
pub type Univariate = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// One univariate building block of a separable drift component:
/// the profile sampled on its grid, then differentiated `deriv` times
/// spectrally. Using the discrete derivative keeps sampled stream-function
/// drifts divergence-free on the grid to machine precision.
#[derive(Clone)]
pub struct DriftFactor {
    pub profile: Univariate,
    pub deriv: u8,
}

impl DriftFactor {
    pub fn plain(profile: Univariate) -> Self {
        Self { profile, deriv: 0 }
    }

    pub fn derivative(profile: Univariate, deriv: u8) -> Self {
        Self { profile, deriv }
    }
}

/// One separable product in a drift component: `weight·∏_m factor_m(x_m)`.
#[derive(Clone)]
pub struct DriftProduct {
    pub weight: f64,
    pub factors: Vec<DriftFactor>,
}

/// Drift field description.
#[derive(Clone)]
pub enum DriftSpec {
    /// `f(x) = Bx`.
    Linear(Array2<f64>),
    /// `f_a(x) = Σ_p w_{a,p}·∏_m g_{a,p,m}(x_m)`, one product list per
    /// component.
    Separable(Vec<Vec<DriftProduct>>),
}

impl std::fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DriftSpec::Linear(b) => write!(f, "DriftSpec::Linear({:?})", b.shape()),
            DriftSpec::Separable(c) => {
                write!(f, "DriftSpec::Separable({} components)", c.len())
            }
        }
    }
}

/// One diagonal diffusion entry `D_ii(x) = σ·profile(x_arg)`.
#[derive(Clone)]
pub struct DiffusionEntry {
    /// Index of the coordinate the profile depends on.
    pub arg: usize,
    pub profile: Univariate,
}

/// Diagonal diffusion tensor `D = σ·diag(g_1(x_{a_1}), …, g_d(x_{a_d}))`.
/// Non-diagonal tensors are out of scope and unrepresentable here.
#[derive(Clone)]
pub struct DiagonalDiffusion {
    pub sigma: f64,
    pub entries: Vec<DiffusionEntry>,
}

impl DiagonalDiffusion {
    /// Constant isotropic diffusion `σ·I` (unit profiles).
    pub fn constant(d: usize, sigma: f64) -> Self {
        Self {
            sigma,
            entries: (0..d)
                .map(|i| DiffusionEntry {
                    arg: i,
                    profile: Arc::new(|_| 1.0),
                })
                .collect(),
        }
    }
}

impl std::fmt::Debug for DiagonalDiffusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "DiagonalDiffusion(σ = {}, {} entries)",
            self.sigma,
            self.entries.len()
        )
    }
}

/// Order in which a coefficient and a derivative acting on the same value
/// are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOrder {
    /// Multiply by the coefficient, then differentiate: `∂(c·v)`.
    MultiplyThenDiff,
    /// Differentiate, then multiply: `c·∂v`.
    DiffThenMultiply,
}

/// Per-dimension action of one operator term.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorFactor {
    /// Diagonal coefficient sampled on this dimension's grid
    /// (`None` = constant 1).
    pub coeff: Option<Array1<f64>>,
    pub deriv_order: u8,
    pub apply_order: ApplyOrder,
}

impl OperatorFactor {
    pub fn identity() -> Self {
        Self {
            coeff: None,
            deriv_order: 0,
            apply_order: ApplyOrder::MultiplyThenDiff,
        }
    }

    pub fn coeff(values: Array1<f64>) -> Self {
        Self {
            coeff: Some(values),
            deriv_order: 0,
            apply_order: ApplyOrder::MultiplyThenDiff,
        }
    }

    pub fn derivative(order: u8) -> Self {
        Self {
            coeff: None,
            deriv_order: order,
            apply_order: ApplyOrder::MultiplyThenDiff,
        }
    }

    pub fn coeff_derivative(values: Array1<f64>, order: u8, apply_order: ApplyOrder) -> Self {
        Self {
            coeff: Some(values),
            deriv_order: order,
            apply_order,
        }
    }

    fn is_identity(&self) -> bool {
        self.coeff.is_none() && self.deriv_order == 0
    }
}

/// One term of a separated operator.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorTerm {
    pub weight: f64,
    /// Exactly one factor per dimension (identity factors explicit).
    pub factors: Vec<OperatorFactor>,
    /// Optional index into the operator's multiplier table.
    pub multiplier: Option<usize>,
    /// Whether the multiplier acts before (`MultiplyThenDiff`) or after
    /// (`DiffThenMultiply`) the factors.
    pub multiplier_order: ApplyOrder,
}

impl OperatorTerm {
    pub fn plain(weight: f64, factors: Vec<OperatorFactor>) -> Self {
        Self {
            weight,
            factors,
            multiplier: None,
            multiplier_order: ApplyOrder::MultiplyThenDiff,
        }
    }
}

/// A non-separable coefficient field, kept in TT form with a dense cache
/// when the grid is small enough for the dense application path.
#[derive(Debug, Clone, PartialEq)]
pub struct Multiplier {
    pub tt: TensorTrain,
    pub full: Option<ArrayD<f64>>,
}

/// Strategy selector for compressed application (tests exercise both).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyStrategy {
    /// Structured for multiplier-free operators (single-mode factors keep
    /// TT ranks, so the exact sum is cheap at any grid size); dense when
    /// multiplier fields are present and the grid fits the point budget.
    Auto,
    Dense,
    Structured,
}

/// A separated linear operator `G(v) = Σ_k w_k·(⊗_i factor_{k,i})·v`,
/// with optional pointwise multiplier fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedOperator {
    grids: Vec<GridRef>,
    pub terms: Vec<OperatorTerm>,
    pub multipliers: Vec<Multiplier>,
}

/// Invertible linear coordinate change `y = Γx`.
#[derive(Debug, Clone)]
pub struct CoordinateMap {
    gamma: Array2<f64>,
    gamma_inv: Array2<f64>,
    det: f64,
}

impl CoordinateMap {
    pub fn new(gamma: Array2<f64>) -> Result<Self> {
        let d = gamma.nrows();
        if gamma.ncols() != d || d == 0 {
            return Err(CoreError::DimensionMismatch(format!(
                "coordinate map must be square, got {:?}",
                gamma.shape()
            )));
        }
        if gamma.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::SingularMap("non-finite entries in Γ".into()));
        }
        let gamma_inv = gamma
            .inv()
            .map_err(|e| CoreError::SingularMap(format!("Γ is not invertible: {e}")))?;
        let residual = {
            let p = gamma.dot(&gamma_inv);
            let mut r: f64 = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let want = if i == j { 1.0 } else { 0.0 };
                    r = r.max((p[[i, j]] - want).abs());
                }
            }
            r
        };
        if residual > 1e-10 {
            return Err(CoreError::SingularMap(format!(
                "Γ·Γ⁻¹ deviates from identity by {residual:.3e}"
            )));
        }
        let det = gamma
            .det()
            .map_err(|e| CoreError::SingularMap(format!("determinant failed: {e}")))?;
        Ok(Self {
            gamma,
            gamma_inv,
            det,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Array2::eye(d),
            gamma_inv: Array2::eye(d),
            det: 1.0,
        }
    }

    pub fn d(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn gamma(&self) -> &Array2<f64> {
        &self.gamma
    }

    pub fn gamma_inv(&self) -> &Array2<f64> {
        &self.gamma_inv
    }

    pub fn det(&self) -> f64 {
        self.det
    }

    pub fn is_identity(&self) -> bool {
        let d = self.d();
        (0..d).all(|i| (0..d).all(|j| self.gamma[[i, j]] == if i == j { 1.0 } else { 0.0 }))
    }

    /// `x = Γ⁻¹y`.
    pub fn inverse_point(&self, y: &[f64]) -> Vec<f64> {
        let d = self.d();
        let mut x = vec![0.0; d];
        for (i, xi) in x.iter_mut().enumerate() {
            for (j, &yj) in y.iter().enumerate() {
                *xi += self.gamma_inv[[i, j]] * yj;
            }
        }
        x
    }
}

/// Which generator to build; carries the diffusion description for
/// Fokker-Planck.
#[derive(Debug, Clone)]
pub enum PdeKind {
    Liouville,
    FokkerPlanck(DiagonalDiffusion),
}

/// Everything needed to (re)build the separated operator for a given Γ.
#[derive(Debug, Clone)]
pub struct OperatorSpec {
    pub pde: PdeKind,
    pub drift: DriftSpec,
    pub grids: Vec<GridRef>,
    pub delta_op: f64,
    pub rank_cap: usize,
}

impl OperatorSpec {
    pub fn build(&self, map: &CoordinateMap) -> Result<SeparatedOperator> {
        match &self.pde {
            PdeKind::Liouville => build_liouville(
                &self.drift,
                &self.grids,
                map,
                self.delta_op,
                self.rank_cap,
            ),
            PdeKind::FokkerPlanck(diffusion) => build_fokker_planck(
                &self.drift,
                diffusion,
                &self.grids,
                map,
                self.delta_op,
                self.rank_cap,
            ),
        }
    }
}

/// Rebuild the operator for the current coordinate map.
pub fn transform_refresh(spec: &OperatorSpec, map: &CoordinateMap) -> Result<SeparatedOperator> {
    spec.build(map)
}

// ---------------------------------------------------------------------------
// Sampling and re-separation helpers
// ---------------------------------------------------------------------------

/// Node values of a drift factor: the profile sampled on the grid, spectrally
/// differentiated `deriv` times.
fn drift_factor_nodes(factor: &DriftFactor, grid: &GridRef) -> Result<Array1<f64>> {
    let mut v = grid.nodes().mapv(&*factor.profile);
    if factor.deriv > 0 {
        let dm = grid.diff_matrix(factor.deriv)?;
        v = dm.dot(&v);
    }
    Ok(v)
}

/// Point evaluator for one drift factor: direct for plain profiles,
/// trigonometric interpolation of the node derivative otherwise (keeping
/// point evaluation consistent with the discrete field).
enum FactorEval {
    Direct(Univariate),
    Interpolated(Array1<f64>),
}

impl FactorEval {
    fn eval(&self, grid: &GridRef, x: f64) -> f64 {
        match self {
            FactorEval::Direct(f) => f(x),
            FactorEval::Interpolated(nodes) => grid.cardinal_weights(x).dot(nodes),
        }
    }
}

/// Per-component point evaluators for a separable drift.
struct PreparedSeparable {
    /// `components[a][p]` = (weight, one evaluator per dimension).
    components: Vec<Vec<(f64, Vec<FactorEval>)>>,
}

impl PreparedSeparable {
    fn new(components: &[Vec<DriftProduct>], grids: &[GridRef]) -> Result<Self> {
        let mut out = Vec::with_capacity(components.len());
        for products in components {
            let mut plist = Vec::with_capacity(products.len());
            for p in products {
                if p.factors.len() != grids.len() {
                    return Err(CoreError::DimensionMismatch(format!(
                        "drift product has {} factors for {} dimensions",
                        p.factors.len(),
                        grids.len()
                    )));
                }
                let evals = p
                    .factors
                    .iter()
                    .zip(grids)
                    .map(|(f, g)| {
                        Ok(if f.deriv == 0 {
                            FactorEval::Direct(f.profile.clone())
                        } else {
                            FactorEval::Interpolated(drift_factor_nodes(f, g)?)
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                plist.push((p.weight, evals));
            }
            out.push(plist);
        }
        Ok(Self { components: out })
    }

    /// `f_a(x)` at an already-wrapped point.
    fn component(&self, a: usize, x: &[f64], grids: &[GridRef]) -> f64 {
        self.components[a]
            .iter()
            .map(|(w, evals)| {
                w * evals
                    .iter()
                    .zip(x)
                    .zip(grids)
                    .map(|((e, &xi), g)| e.eval(g, xi))
                    .product::<f64>()
            })
            .sum()
    }
}

/// Sample a scalar field on the full tensor grid (memory-guarded).
fn sample_full<F: FnMut(&[f64]) -> f64>(grids: &[GridRef], mut f: F) -> Result<ArrayD<f64>> {
    let shape: Vec<usize> = grids.iter().map(|g| g.n()).collect();
    let total: u128 = shape.iter().map(|&n| n as u128).product();
    if total > DENSE_LIMIT {
        return Err(CoreError::MemoryGuard {
            points: total,
            limit: DENSE_LIMIT,
        });
    }
    let mut out = ArrayD::zeros(ndarray::IxDyn(&shape));
    let mut coords = vec![0.0; grids.len()];
    for (idx, v) in out.indexed_iter_mut() {
        for (m, c) in coords.iter_mut().enumerate() {
            *c = grids[m].nodes()[idx[m]];
        }
        *v = f(&coords);
    }
    Ok(out)
}

/// A re-separated coefficient field: either plain separable products or a
/// tensor train that must be applied as a pointwise multiplier.
enum SeparatedField {
    /// `Σ_p ∏_m vectors[p][m]` (weights folded into the first vector).
    Products(Vec<Vec<Array1<f64>>>),
    Tt(TensorTrain),
}

/// Re-separate a sampled field to tolerance `delta_op`, enforcing the
/// operator rank cap.
fn separate_field(
    grids: &[GridRef],
    full: &ArrayD<f64>,
    delta_op: f64,
    cap: usize,
) -> Result<SeparatedField> {
    let d = grids.len();
    if d == 1 {
        let v = Array1::from_iter(full.iter().copied());
        return Ok(SeparatedField::Products(vec![vec![v]]));
    }
    if d == 2 {
        let (n1, n2) = (grids[0].n(), grids[1].n());
        let mat = full
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d field");
        let norm_f = mat.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (u, s, vt) = mat.to_owned().svddc_into(JobSvd::Some)?;
        let (u, vt) = (u.expect("left vectors"), vt.expect("right vectors"));
        // Keep the smallest count whose discarded tail is ≤ δ_op·‖F‖_F.
        let mut k = s.len();
        let mut tail = 0.0;
        let budget = (delta_op * norm_f) * (delta_op * norm_f);
        while k > 1 {
            let t = tail + s[k - 1] * s[k - 1];
            if t > budget {
                break;
            }
            tail = t;
            k -= 1;
        }
        if k > cap {
            return Err(CoreError::OperatorRankExceeded {
                required: k,
                cap,
            });
        }
        let mut products = Vec::with_capacity(k);
        for p in 0..k {
            let a = u.slice(ndarray::s![.., p]).mapv(|x| x * s[p]);
            let b = vt.slice(ndarray::s![p, ..]).to_owned();
            debug_assert_eq!(a.len(), n1);
            debug_assert_eq!(b.len(), n2);
            products.push(vec![a, b]);
        }
        return Ok(SeparatedField::Products(products));
    }
    let tt = TensorTrain::from_full(grids.to_vec(), full.view(), delta_op)?;
    let max_rank = tt.max_interior_rank();
    if max_rank > cap {
        return Err(CoreError::OperatorRankExceeded {
            required: max_rank,
            cap,
        });
    }
    if tt.ranks().iter().all(|&r| r == 1) {
        let fibers = (0..d)
            .map(|m| {
                tt.core(m)
                    .index_axis(Axis(0), 0)
                    .index_axis(Axis(1), 0)
                    .to_owned()
            })
            .collect();
        return Ok(SeparatedField::Products(vec![fibers]));
    }
    Ok(SeparatedField::Tt(tt))
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

fn identity_factors(d: usize) -> Vec<OperatorFactor> {
    (0..d).map(|_| OperatorFactor::identity()).collect()
}

fn check_drift(drift: &DriftSpec, d: usize) -> Result<()> {
    match drift {
        DriftSpec::Linear(b) => {
            if b.shape() != [d, d] {
                return Err(CoreError::DimensionMismatch(format!(
                    "linear drift matrix has shape {:?} for {d} dimensions",
                    b.shape()
                )));
            }
        }
        DriftSpec::Separable(c) => {
            if c.len() != d {
                return Err(CoreError::DimensionMismatch(format!(
                    "separable drift has {} components for {d} dimensions",
                    c.len()
                )));
            }
        }
    }
    Ok(())
}

/// Terms realizing `Σ_p (coeffs_p ⊗ …)·∂^{deriv}_a` from a separated field,
/// with the stated coefficient/derivative order on mode `a`.
fn field_terms(
    grids: &[GridRef],
    field: SeparatedField,
    a: usize,
    deriv: u8,
    weight: f64,
    order: ApplyOrder,
    multipliers: &mut Vec<Multiplier>,
    keep_full: Option<&ArrayD<f64>>,
) -> Vec<OperatorTerm> {
    let d = grids.len();
    match field {
        SeparatedField::Products(products) => products
            .into_iter()
            .map(|vectors| {
                let mut factors = Vec::with_capacity(d);
                for (m, v) in vectors.into_iter().enumerate() {
                    factors.push(if m == a {
                        OperatorFactor::coeff_derivative(v, deriv, order)
                    } else {
                        OperatorFactor::coeff(v)
                    });
                }
                OperatorTerm::plain(weight, factors)
            })
            .collect(),
        SeparatedField::Tt(tt) => {
            let full = keep_full.cloned();
            multipliers.push(Multiplier { tt, full });
            let idx = multipliers.len() - 1;
            let mut factors = identity_factors(d);
            factors[a] = OperatorFactor::derivative(deriv);
            vec![OperatorTerm {
                weight,
                factors,
                multiplier: Some(idx),
                multiplier_order: order,
            }]
        }
    }
}

/// Build the advective Liouville generator
/// `G_y(v) = (Γ f(Γ⁻¹y))·∇_y v`.
pub fn build_liouville(
    drift: &DriftSpec,
    grids: &[GridRef],
    map: &CoordinateMap,
    delta_op: f64,
    rank_cap: usize,
) -> Result<SeparatedOperator> {
    let d = grids.len();
    if map.d() != d {
        return Err(CoreError::DimensionMismatch(format!(
            "map dimension {} vs {} grids",
            map.d(),
            d
        )));
    }
    check_drift(drift, d)?;
    let mut terms = Vec::new();
    let mut multipliers = Vec::new();
    match drift {
        DriftSpec::Linear(b) => {
            // Closed form: (ΓBΓ⁻¹ y)·∇_y, one term per nonzero entry.
            let m = map.gamma().dot(b).dot(map.gamma_inv());
            for a in 0..d {
                for j in 0..d {
                    if m[[a, j]] == 0.0 {
                        continue;
                    }
                    let mut factors = identity_factors(d);
                    if a == j {
                        factors[a] = OperatorFactor::coeff_derivative(
                            grids[a].nodes().to_owned(),
                            1,
                            ApplyOrder::DiffThenMultiply,
                        );
                    } else {
                        factors[j] = OperatorFactor::coeff(grids[j].nodes().to_owned());
                        factors[a] = OperatorFactor::derivative(1);
                    }
                    terms.push(OperatorTerm::plain(m[[a, j]], factors));
                }
            }
        }
        DriftSpec::Separable(components) => {
            if map.is_identity() {
                // Exact per-dimension node sampling, one term per product.
                for (a, products) in components.iter().enumerate() {
                    for p in products {
                        if p.factors.len() != d {
                            return Err(CoreError::DimensionMismatch(format!(
                                "drift product has {} factors for {d} dimensions",
                                p.factors.len()
                            )));
                        }
                        let mut factors = Vec::with_capacity(d);
                        for (m, f) in p.factors.iter().enumerate() {
                            let nodes = drift_factor_nodes(f, &grids[m])?;
                            factors.push(if m == a {
                                OperatorFactor::coeff_derivative(
                                    nodes,
                                    1,
                                    ApplyOrder::DiffThenMultiply,
                                )
                            } else {
                                OperatorFactor::coeff(nodes)
                            });
                        }
                        terms.push(OperatorTerm::plain(p.weight, factors));
                    }
                }
            } else {
                // Sample F_a(y) = Σ_i Γ_ai f_i(wrap(Γ⁻¹y)) and re-separate.
                let prepared = PreparedSeparable::new(components, grids)?;
                for a in 0..d {
                    let full = sample_full(grids, |y| {
                        let mut x = map.inverse_point(y);
                        for (m, xi) in x.iter_mut().enumerate() {
                            *xi = grids[m].wrap(*xi);
                        }
                        (0..d)
                            .map(|i| map.gamma()[[a, i]] * prepared.component(i, &x, grids))
                            .sum()
                    })?;
                    let field = separate_field(grids, &full, delta_op, rank_cap)?;
                    terms.extend(field_terms(
                        grids,
                        field,
                        a,
                        1,
                        1.0,
                        ApplyOrder::DiffThenMultiply,
                        &mut multipliers,
                        Some(&full),
                    ));
                }
            }
        }
    }
    Ok(SeparatedOperator {
        grids: grids.to_vec(),
        terms,
        multipliers,
    })
}

/// Build the Fokker-Planck generator
/// `G_y(v) = −∇_y·(Fv) + Σ_i Σ_{k,l} Γ_ki Γ_li ∂²(D_ii(Γ⁻¹y)·v)/∂y_k∂y_l`
/// with `F = Γf(Γ⁻¹y)` and diagonal `D`.
pub fn build_fokker_planck(
    drift: &DriftSpec,
    diffusion: &DiagonalDiffusion,
    grids: &[GridRef],
    map: &CoordinateMap,
    delta_op: f64,
    rank_cap: usize,
) -> Result<SeparatedOperator> {
    let d = grids.len();
    if map.d() != d {
        return Err(CoreError::DimensionMismatch(format!(
            "map dimension {} vs {} grids",
            map.d(),
            d
        )));
    }
    check_drift(drift, d)?;
    if diffusion.sigma != 0.0 && diffusion.entries.len() != d {
        return Err(CoreError::DimensionMismatch(format!(
            "{} diffusion entries for {d} dimensions",
            diffusion.entries.len()
        )));
    }
    let mut terms = Vec::new();
    let mut multipliers = Vec::new();

    // Drift in divergence form, expanded by the product rule:
    // −∇·(Fv) = −Σ_{a,j} M_aj·y_j·∂_a v − tr(M)·v for linear drift.
    match drift {
        DriftSpec::Linear(b) => {
            let m = map.gamma().dot(b).dot(map.gamma_inv());
            for a in 0..d {
                for j in 0..d {
                    if m[[a, j]] == 0.0 {
                        continue;
                    }
                    let mut factors = identity_factors(d);
                    if a == j {
                        factors[a] = OperatorFactor::coeff_derivative(
                            grids[a].nodes().to_owned(),
                            1,
                            ApplyOrder::DiffThenMultiply,
                        );
                    } else {
                        factors[j] = OperatorFactor::coeff(grids[j].nodes().to_owned());
                        factors[a] = OperatorFactor::derivative(1);
                    }
                    terms.push(OperatorTerm::plain(-m[[a, j]], factors));
                }
            }
            let trace: f64 = (0..d).map(|i| m[[i, i]]).sum();
            if trace != 0.0 {
                terms.push(OperatorTerm::plain(-trace, identity_factors(d)));
            }
        }
        DriftSpec::Separable(components) => {
            if map.is_identity() {
                // −∂_a(f_a v): multiply-then-differentiate, exact sampling.
                for (a, products) in components.iter().enumerate() {
                    for p in products {
                        if p.factors.len() != d {
                            return Err(CoreError::DimensionMismatch(format!(
                                "drift product has {} factors for {d} dimensions",
                                p.factors.len()
                            )));
                        }
                        let mut factors = Vec::with_capacity(d);
                        for (m, f) in p.factors.iter().enumerate() {
                            let nodes = drift_factor_nodes(f, &grids[m])?;
                            factors.push(if m == a {
                                OperatorFactor::coeff_derivative(
                                    nodes,
                                    1,
                                    ApplyOrder::MultiplyThenDiff,
                                )
                            } else {
                                OperatorFactor::coeff(nodes)
                            });
                        }
                        terms.push(OperatorTerm::plain(-p.weight, factors));
                    }
                }
            } else {
                let prepared = PreparedSeparable::new(components, grids)?;
                for a in 0..d {
                    let full = sample_full(grids, |y| {
                        let mut x = map.inverse_point(y);
                        for (m, xi) in x.iter_mut().enumerate() {
                            *xi = grids[m].wrap(*xi);
                        }
                        (0..d)
                            .map(|i| map.gamma()[[a, i]] * prepared.component(i, &x, grids))
                            .sum()
                    })?;
                    let field = separate_field(grids, &full, delta_op, rank_cap)?;
                    terms.extend(field_terms(
                        grids,
                        field,
                        a,
                        1,
                        -1.0,
                        ApplyOrder::MultiplyThenDiff,
                        &mut multipliers,
                        Some(&full),
                    ));
                }
            }
        }
    }

    // Diffusion: Σ_i Σ_{k,l} Γ_ki Γ_li ∂²_{kl}(D_ii·v), D_ii = σ·g_i(x_arg).
    if diffusion.sigma != 0.0 {
        for (i, entry) in diffusion.entries.iter().enumerate() {
            if entry.arg >= d {
                return Err(CoreError::InvalidIndex {
                    index: entry.arg,
                    d,
                });
            }
            if map.is_identity() {
                let coeff = grids[entry.arg].nodes().mapv(&*entry.profile);
                let mut factors = identity_factors(d);
                if entry.arg == i {
                    factors[i] = OperatorFactor::coeff_derivative(
                        coeff,
                        2,
                        ApplyOrder::MultiplyThenDiff,
                    );
                } else {
                    factors[entry.arg] = OperatorFactor::coeff(coeff);
                    factors[i] = OperatorFactor::derivative(2);
                }
                terms.push(OperatorTerm::plain(diffusion.sigma, factors));
                continue;
            }
            // Transformed profile g_i((Γ⁻¹y)_arg) is a non-separable field.
            let full = sample_full(grids, |y| {
                let x = map.inverse_point(y);
                (entry.profile)(grids[entry.arg].wrap(x[entry.arg]))
            })?;
            let field = separate_field(grids, &full, delta_op, rank_cap)?;
            // Reuse one multiplier (or product set) for all derivative pairs.
            let pieces: Vec<(Option<usize>, Vec<Vec<Array1<f64>>>)> = match field {
                SeparatedField::Products(p) => vec![(None, p)],
                SeparatedField::Tt(tt) => {
                    multipliers.push(Multiplier {
                        tt,
                        full: Some(full.clone()),
                    });
                    vec![(Some(multipliers.len() - 1), Vec::new())]
                }
            };
            for k in 0..d {
                for l in k..d {
                    let mut w = diffusion.sigma
                        * map.gamma()[[k, i]]
                        * map.gamma()[[l, i]];
                    if k != l {
                        w *= 2.0;
                    }
                    if w == 0.0 {
                        continue;
                    }
                    for (mult_idx, products) in &pieces {
                        let deriv_factors = |mut factors: Vec<OperatorFactor>| {
                            if k == l {
                                factors[k].deriv_order = 2;
                            } else {
                                factors[k].deriv_order = 1;
                                factors[l].deriv_order = 1;
                            }
                            factors
                        };
                        match mult_idx {
                            Some(idx) => {
                                terms.push(OperatorTerm {
                                    weight: w,
                                    factors: deriv_factors(identity_factors(d)),
                                    multiplier: Some(*idx),
                                    multiplier_order: ApplyOrder::MultiplyThenDiff,
                                });
                            }
                            None => {
                                for vectors in products {
                                    let factors: Vec<OperatorFactor> = vectors
                                        .iter()
                                        .map(|v| OperatorFactor {
                                            coeff: Some(v.clone()),
                                            deriv_order: 0,
                                            apply_order: ApplyOrder::MultiplyThenDiff,
                                        })
                                        .collect();
                                    terms.push(OperatorTerm::plain(w, deriv_factors(factors)));
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(SeparatedOperator {
        grids: grids.to_vec(),
        terms,
        multipliers,
    })
}

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

impl SeparatedOperator {
    pub fn grids(&self) -> &[GridRef] {
        &self.grids
    }

    /// Term count.
    pub fn k(&self) -> usize {
        self.terms.len()
    }

    fn check_grids(&self, v: &TensorTrain) -> Result<()> {
        if v.grids().len() != self.grids.len()
            || v.grids()
                .iter()
                .zip(&self.grids)
                .any(|(a, b)| **a != **b)
        {
            return Err(CoreError::GridMismatch(
                "operator and value live on different grids".into(),
            ));
        }
        Ok(())
    }

    fn apply_factor(
        &self,
        v: TensorTrain,
        mode: usize,
        factor: &OperatorFactor,
    ) -> Result<TensorTrain> {
        if factor.is_identity() {
            return Ok(v);
        }
        match (&factor.coeff, factor.deriv_order) {
            (None, 0) => Ok(v),
            (Some(c), 0) => v.mode_diag_multiply(mode, c.view()),
            (None, ord) => v.mode_derivative(mode, ord),
            (Some(c), ord) => match factor.apply_order {
                ApplyOrder::MultiplyThenDiff => {
                    v.mode_diag_multiply(mode, c.view())?.mode_derivative(mode, ord)
                }
                ApplyOrder::DiffThenMultiply => {
                    v.mode_derivative(mode, ord)?.mode_diag_multiply(mode, c.view())
                }
            },
        }
    }

    fn apply_term(&self, v: &TensorTrain, term: &OperatorTerm) -> Result<TensorTrain> {
        let mut w = match term.multiplier {
            Some(m) if term.multiplier_order == ApplyOrder::MultiplyThenDiff => {
                self.multipliers[m].tt.hadamard(v)?
            }
            _ => v.clone(),
        };
        for (mode, factor) in term.factors.iter().enumerate() {
            w = self.apply_factor(w, mode, factor)?;
        }
        if let Some(m) = term.multiplier {
            if term.multiplier_order == ApplyOrder::DiffThenMultiply {
                w = self.multipliers[m].tt.hadamard(&w)?;
            }
        }
        Ok(w.scale(term.weight))
    }

    /// Exact application: the sum over all terms with no intermediate
    /// truncation. Output interior ranks are at most `Σ_k m_k·r_i`
    /// (multiplier rank `m_k = 1` for plain terms); the caller rounds.
    pub fn apply(&self, v: &TensorTrain) -> Result<TensorTrain> {
        self.check_grids(v)?;
        let mut acc: Option<TensorTrain> = None;
        for term in &self.terms {
            let w = self.apply_term(v, term)?;
            acc = Some(match acc {
                None => w,
                Some(a) => a.add(&w)?,
            });
        }
        Ok(acc.unwrap_or_else(|| TensorTrain::zero(self.grids.clone())))
    }

    /// Dense application on full-grid values (reference solves and the dense
    /// fast path). Arrays must match the operator's grids.
    pub fn dense_apply(&self, values: ArrayViewD<'_, f64>) -> Result<ArrayD<f64>> {
        let shape: Vec<usize> = self.grids.iter().map(|g| g.n()).collect();
        if values.shape() != shape.as_slice() {
            return Err(CoreError::GridMismatch(format!(
                "dense_apply: value shape {:?} vs grids {:?}",
                values.shape(),
                shape
            )));
        }
        // Standard layout keeps the mode reshapes below meaning row-major.
        let base = values.as_standard_layout().into_owned();
        let mut out = ArrayD::zeros(ndarray::IxDyn(&shape));
        for term in &self.terms {
            let mut w = match term.multiplier {
                Some(m) if term.multiplier_order == ApplyOrder::MultiplyThenDiff => {
                    &base * self.multiplier_full(m)?
                }
                _ => base.clone(),
            };
            for (mode, factor) in term.factors.iter().enumerate() {
                w = self.dense_factor(w, mode, factor)?;
            }
            if let Some(m) = term.multiplier {
                if term.multiplier_order == ApplyOrder::DiffThenMultiply {
                    w = &w * self.multiplier_full(m)?;
                }
            }
            out.scaled_add(term.weight, &w);
        }
        Ok(out)
    }

    fn multiplier_full(&self, m: usize) -> Result<&ArrayD<f64>> {
        self.multipliers[m].full.as_ref().ok_or_else(|| {
            CoreError::MemoryGuard {
                points: self.grids.iter().map(|g| g.n() as u128).product(),
                limit: DENSE_LIMIT,
            }
        })
    }

    fn dense_factor(
        &self,
        values: ArrayD<f64>,
        mode: usize,
        factor: &OperatorFactor,
    ) -> Result<ArrayD<f64>> {
        if factor.is_identity() {
            return Ok(values);
        }
        let diag = |vals: ArrayD<f64>, c: &Array1<f64>| -> ArrayD<f64> {
            let mut out = vals;
            for (x, mut lane) in out.axis_iter_mut(Axis(mode)).enumerate() {
                lane *= c[x];
            }
            out
        };
        match (&factor.coeff, factor.deriv_order) {
            (None, 0) => Ok(values),
            (Some(c), 0) => Ok(diag(values, c)),
            (None, ord) => self.dense_derivative(values, mode, ord),
            (Some(c), ord) => match factor.apply_order {
                ApplyOrder::MultiplyThenDiff => {
                    self.dense_derivative(diag(values, c), mode, ord)
                }
                ApplyOrder::DiffThenMultiply => {
                    Ok(diag(self.dense_derivative(values, mode, ord)?, c))
                }
            },
        }
    }

    fn dense_derivative(
        &self,
        values: ArrayD<f64>,
        mode: usize,
        order: u8,
    ) -> Result<ArrayD<f64>> {
        let dm = self.grids[mode].diff_matrix(order)?;
        let shape = values.shape().to_vec();
        let n = shape[mode];
        let before: usize = shape[..mode].iter().product();
        let after: usize = shape[mode + 1..].iter().product();
        let flat = values
            .into_shape((before, n, after))
            .expect("dense arrays are standard layout");
        let mut out = Array3::<f64>::zeros((before, n, after));
        for b in 0..before {
            let slab = flat.index_axis(Axis(0), b);
            out.index_axis_mut(Axis(0), b).assign(&dm.dot(&slab));
        }
        Ok(out
            .into_shape(ndarray::IxDyn(&shape))
            .expect("shape restored"))
    }

    /// δ-compressed application for time stepping. `Auto` uses the dense
    /// route (`dense_apply` + tensor-train SVD) below the grid-point budget
    /// — deterministic, error-controlled, and far cheaper than rounding
    /// rank-`m·r` Hadamard products — and the structured route otherwise.
    /// Aggregate relative error is a small multiple of `delta`.
    pub fn apply_compressed(
        &self,
        v: &TensorTrain,
        delta: f64,
    ) -> Result<TensorTrain> {
        self.apply_with(v, delta, ApplyStrategy::Auto)
    }

    pub fn apply_with(
        &self,
        v: &TensorTrain,
        delta: f64,
        strategy: ApplyStrategy,
    ) -> Result<TensorTrain> {
        self.check_grids(v)?;
        let points: u128 = self.grids.iter().map(|g| g.n() as u128).product();
        let dense = match strategy {
            ApplyStrategy::Auto => {
                !self.multipliers.is_empty() && points <= DENSE_LIMIT
            }
            ApplyStrategy::Dense => {
                if points > DENSE_LIMIT {
                    return Err(CoreError::MemoryGuard {
                        points,
                        limit: DENSE_LIMIT,
                    });
                }
                true
            }
            ApplyStrategy::Structured => false,
        };
        if dense {
            let full = self.dense_apply(v.to_full()?.view())?;
            return TensorTrain::from_full(self.grids.clone(), full.view(), delta);
        }
        self.apply_structured(v, delta)
    }

    /// Structured route: shared multiplier products, rank-preserving factor
    /// application, and chunked accumulation with intermediate rounding.
    fn apply_structured(&self, v: &TensorTrain, delta: f64) -> Result<TensorTrain> {
        // Pointwise products W_m∘v shared by all multiply-then-diff terms
        // of multiplier m.
        let mut products: Vec<Option<TensorTrain>> = vec![None; self.multipliers.len()];
        for term in &self.terms {
            if let Some(m) = term.multiplier {
                if term.multiplier_order == ApplyOrder::MultiplyThenDiff
                    && products[m].is_none()
                {
                    let p = self.multipliers[m].tt.hadamard(v)?.round(delta)?;
                    products[m] = Some(p);
                }
            }
        }
        let chunk_cap = 4 * v.max_interior_rank().max(16);
        let mut acc: Option<TensorTrain> = None;
        let mut rounds = 0usize;
        for term in &self.terms {
            let base = match term.multiplier {
                Some(m) if term.multiplier_order == ApplyOrder::MultiplyThenDiff => {
                    products[m].as_ref().expect("product prepared")
                }
                _ => v,
            };
            let mut w = base.clone();
            for (mode, factor) in term.factors.iter().enumerate() {
                w = self.apply_factor(w, mode, factor)?;
            }
            if let Some(m) = term.multiplier {
                if term.multiplier_order == ApplyOrder::DiffThenMultiply {
                    w = self.multipliers[m].tt.hadamard(&w)?.round(delta)?;
                }
            }
            w = w.scale(term.weight);
            acc = Some(match acc {
                None => w,
                Some(a) => {
                    let s = a.add(&w)?;
                    if self.grids.len() > 2 && s.max_interior_rank() > chunk_cap {
                        rounds += 1;
                        s.round(delta)?
                    } else {
                        s
                    }
                }
            });
        }
        let _ = rounds;
        match acc {
            None => Ok(TensorTrain::zero(self.grids.clone())),
            Some(a) => a.round(delta),
        }
    }
}
