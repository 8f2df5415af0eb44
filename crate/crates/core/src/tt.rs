//! Tensor-train (TT) values over periodic grids.
//!
//! A `TensorTrain` stores a discretized multivariate function as a chain of
//! order-3 cores `G_i` of shape `(r_{i−1}, n_i, r_i)` with boundary ranks
//! `r_0 = r_d = 1`; the represented nodal value at a multi-index
//! `(x_1, …, x_d)` is the matrix product `G_1[x_1]·G_2[x_2]⋯G_d[x_d]`.
//! All operations treat values as immutable and return new tensors.
//!
//! The inner product is the quadrature-weighted L² product with uniform
//! per-dimension weights `L_i/n_i`; cores hold plain node samples (weights
//! are absorbed into contractions, never into cores). Rounding is the
//! standard right-orthogonalize + left-to-right truncated-SVD sweep with the
//! per-site threshold `δ‖v‖/√(d−1)`, which guarantees
//! `‖round(v,δ) − v‖ ≤ δ‖v‖`.

use ndarray::{
    Array, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayViewD, Axis, Dimension, IntoDimension,
    IxDyn,
};
use ndarray_linalg::{JobSvd, QRInto, SVDDCInto};

use crate::error::{CoreError, Result};
use crate::grid::GridRef;

/// Orthogonality state of the core chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ortho {
    None,
    /// Cores `0..d−1` have orthonormal left unfoldings.
    Left,
    /// Cores `1..d` have orthonormal right unfoldings.
    Right,
}

/// Rank vector at a time instant, with its 1-norm complexity measure.
///
/// `rank_1norm` sums the full vector `[1, r_1, …, r_{d−1}, 1]`, boundary
/// ones included — a rank-one train in three dimensions has 1-norm 4.
#[derive(Debug, Clone, PartialEq)]
pub struct RankProfile {
    pub time: f64,
    pub ranks: Vec<usize>,
    pub rank_1norm: usize,
}

impl RankProfile {
    pub fn new(time: f64, ranks: Vec<usize>) -> Self {
        let rank_1norm = ranks.iter().sum();
        Self {
            time,
            ranks,
            rank_1norm,
        }
    }
}

/// Tensor-train decomposition of nodal values on a tensor-product
/// periodic grid.
///
/// Equality is structural (identical grids, cores, and orthogonality flag),
/// which is what operator-rebuild determinism checks need; equal values in
/// different gauges compare unequal.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorTrain {
    grids: Vec<GridRef>,
    cores: Vec<Array3<f64>>,
    ortho: Ortho,
}

/// Memory guard for dense reconstructions (`to_full`, Hadamard products).
const FULL_ELEM_LIMIT: u128 = 1 << 27;

fn same_grids(a: &[GridRef], b: &[GridRef]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| **x == **y)
}

/// Reshape with row-major semantics regardless of the source's memory order.
///
/// `into_shape` reinterprets storage in the array's own contiguity order, so
/// an F-contiguous source — e.g. a transposed QR factor or a sliced SVD
/// factor — would fold column-major and silently permute values. Normalizing
/// to standard layout first pins row-major meaning; already-standard arrays
/// reshape without copying.
pub(crate) fn reshape_std<D, E>(a: Array<f64, D>, shape: E) -> Array<f64, E::Dim>
where
    D: Dimension,
    E: IntoDimension,
{
    let std = if a.is_standard_layout() {
        a
    } else {
        let dim = a.raw_dim();
        Array::from_shape_vec(dim, a.iter().copied().collect()).expect("length unchanged")
    };
    std.into_shape(shape).expect("element count preserved")
}

/// Number of leading singular values to keep so the discarded tail satisfies
/// `Σ_{j≥k} s_j² ≤ τ²`; always keeps at least one.
fn truncation_rank(s: &Array1<f64>, tau: f64) -> usize {
    let mut k = s.len();
    let mut tail = 0.0;
    let budget = tau * tau;
    while k > 1 {
        let t = tail + s[k - 1] * s[k - 1];
        if t > budget {
            break;
        }
        tail = t;
        k -= 1;
    }
    k
}

impl TensorTrain {
    /// Build from explicit cores, validating the shape chain.
    pub fn new(grids: Vec<GridRef>, cores: Vec<Array3<f64>>) -> Result<Self> {
        let tt = Self {
            grids,
            cores,
            ortho: Ortho::None,
        };
        tt.validate()?;
        Ok(tt)
    }

    /// The zero tensor at all-ones ranks.
    pub fn zero(grids: Vec<GridRef>) -> Self {
        let cores = grids
            .iter()
            .map(|g| Array3::zeros((1, g.n(), 1)))
            .collect();
        Self {
            grids,
            cores,
            ortho: Ortho::None,
        }
    }

    /// The constant-1 tensor (rank 1 everywhere).
    pub fn constant_one(grids: Vec<GridRef>) -> Self {
        let cores = grids
            .iter()
            .map(|g| Array3::ones((1, g.n(), 1)))
            .collect();
        Self {
            grids,
            cores,
            ortho: Ortho::None,
        }
    }

    /// Exact TT of a sum of separable products `Σ_k w_k ∏_i g_i^{(k)}`,
    /// with all interior ranks equal to the term count.
    pub fn from_separable(
        grids: Vec<GridRef>,
        terms: &[Vec<Array1<f64>>],
        weights: &[f64],
    ) -> Result<Self> {
        let d = grids.len();
        let k_terms = terms.len();
        if k_terms == 0 || weights.len() != k_terms {
            return Err(CoreError::DimensionMismatch(format!(
                "from_separable: {} terms with {} weights",
                k_terms,
                weights.len()
            )));
        }
        for (t, term) in terms.iter().enumerate() {
            if term.len() != d {
                return Err(CoreError::DimensionMismatch(format!(
                    "from_separable: term {t} has {} factors, expected {d}",
                    term.len()
                )));
            }
            for (i, g) in term.iter().enumerate() {
                if g.len() != grids[i].n() {
                    return Err(CoreError::DimensionMismatch(format!(
                        "from_separable: term {t} factor {i} has length {}, grid has {}",
                        g.len(),
                        grids[i].n()
                    )));
                }
            }
        }
        let mut cores = Vec::with_capacity(d);
        if d == 1 {
            let n = grids[0].n();
            let mut c = Array3::zeros((1, n, 1));
            for (term, &w) in terms.iter().zip(weights) {
                for x in 0..n {
                    c[[0, x, 0]] += w * term[0][x];
                }
            }
            cores.push(c);
        } else {
            for i in 0..d {
                let n = grids[i].n();
                let (r1, r2) = match i {
                    0 => (1, k_terms),
                    _ if i == d - 1 => (k_terms, 1),
                    _ => (k_terms, k_terms),
                };
                let mut c = Array3::zeros((r1, n, r2));
                for (k, (term, &w)) in terms.iter().zip(weights).enumerate() {
                    let scale = if i == 0 { w } else { 1.0 };
                    let (a, b) = (if i == 0 { 0 } else { k }, if i == d - 1 { 0 } else { k });
                    for x in 0..n {
                        c[[a, x, b]] = scale * term[i][x];
                    }
                }
                cores.push(c);
            }
        }
        Self::new(grids, cores)
    }

    pub fn d(&self) -> usize {
        self.cores.len()
    }

    pub fn grids(&self) -> &[GridRef] {
        &self.grids
    }

    pub fn core(&self, i: usize) -> &Array3<f64> {
        &self.cores[i]
    }

    pub fn ortho(&self) -> Ortho {
        self.ortho
    }

    /// Full rank vector `(r_0, …, r_d)` including the boundary ones.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = Vec::with_capacity(self.d() + 1);
        r.push(self.cores[0].shape()[0]);
        for c in &self.cores {
            r.push(c.shape()[2]);
        }
        r
    }

    pub fn rank_profile(&self, time: f64) -> RankProfile {
        RankProfile::new(time, self.ranks())
    }

    pub fn max_interior_rank(&self) -> usize {
        self.ranks()[1..self.d()].iter().copied().max().unwrap_or(1)
    }

    /// Check the core-shape chain and grid compatibility.
    pub fn validate(&self) -> Result<()> {
        if self.cores.len() != self.grids.len() || self.cores.is_empty() {
            return Err(CoreError::DimensionMismatch(format!(
                "tensor train with {} cores over {} grids",
                self.cores.len(),
                self.grids.len()
            )));
        }
        if self.cores[0].shape()[0] != 1 || self.cores[self.d() - 1].shape()[2] != 1 {
            return Err(CoreError::DimensionMismatch(
                "boundary ranks must equal 1".into(),
            ));
        }
        for i in 0..self.d() {
            if self.cores[i].shape()[1] != self.grids[i].n() {
                return Err(CoreError::GridMismatch(format!(
                    "core {i} has {} nodes, grid has {}",
                    self.cores[i].shape()[1],
                    self.grids[i].n()
                )));
            }
            if i + 1 < self.d() && self.cores[i].shape()[2] != self.cores[i + 1].shape()[0] {
                return Err(CoreError::DimensionMismatch(format!(
                    "rank mismatch between cores {i} and {}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    fn require_same_grids(&self, other: &Self) -> Result<()> {
        if !same_grids(&self.grids, &other.grids) {
            return Err(CoreError::GridMismatch(
                "tensor trains live on different grids".into(),
            ));
        }
        Ok(())
    }

    /// Exact sum via block-diagonal core concatenation
    /// (ranks `r_i^a + r_i^b` in the interior).
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.require_same_grids(other)?;
        let d = self.d();
        if d == 1 {
            let c = &self.cores[0] + &other.cores[0];
            return Self::new(self.grids.clone(), vec![c]);
        }
        let mut cores = Vec::with_capacity(d);
        for i in 0..d {
            let a = &self.cores[i];
            let b = &other.cores[i];
            let n = a.shape()[1];
            let (a1, a2) = (a.shape()[0], a.shape()[2]);
            let (b1, b2) = (b.shape()[0], b.shape()[2]);
            let (r1, r2) = match i {
                0 => (1, a2 + b2),
                _ if i == d - 1 => (a1 + b1, 1),
                _ => (a1 + b1, a2 + b2),
            };
            let mut c = Array3::zeros((r1, n, r2));
            let (off1, off2) = (if i == 0 { 0 } else { a1 }, if i == d - 1 { 0 } else { a2 });
            c.slice_mut(ndarray::s![..a1, .., ..a2]).assign(a);
            c.slice_mut(ndarray::s![off1.., .., off2..]).assign(b);
            cores.push(c);
        }
        Self::new(self.grids.clone(), cores)
    }

    /// Multiply by a scalar (applied to the first core).
    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.cores[0] *= c;
        // Scaling keeps right-orthonormality of cores 1..d intact.
        if out.ortho == Ortho::Left {
            out.ortho = Ortho::None;
        }
        out
    }

    /// Quadrature-weighted L² inner product by core-wise contraction.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.require_same_grids(other)?;
        let mut m = Array2::<f64>::ones((1, 1));
        for i in 0..self.d() {
            let a = &self.cores[i];
            let b = &other.cores[i];
            let (ra1, n, ra2) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (rb1, rb2) = (b.shape()[0], b.shape()[2]);
            // p[β, (x,α2)] = Σ_α m[α,β]·a[α,x,α2]
            let a_mat = a
                .view()
                .into_shape((ra1, n * ra2))
                .expect("core is contiguous");
            let p = m.t().dot(&a_mat); // (rb1, n*ra2)
            let p = p
                .into_shape((rb1 * n, ra2))
                .expect("product is contiguous");
            let b_mat = b
                .view()
                .into_shape((rb1 * n, rb2))
                .expect("core is contiguous");
            m = p.t().dot(&b_mat); // (ra2, rb2)
        }
        let w: f64 = self.grids.iter().map(|g| g.weight()).product();
        Ok(w * m[[0, 0]])
    }

    /// Whether every core entry is finite (stepping blow-up guard).
    pub fn all_finite(&self) -> bool {
        self.cores
            .iter()
            .all(|c| c.iter().all(|x| x.is_finite()))
    }

    /// Quadrature L² norm. Orthogonalized forms use the cheap single-core
    /// Frobenius path; otherwise falls back to `√⟨v,v⟩`.
    pub fn norm(&self) -> f64 {
        let w: f64 = self.grids.iter().map(|g| g.weight()).product();
        let frob = |c: &Array3<f64>| c.iter().map(|x| x * x).sum::<f64>().sqrt();
        match self.ortho {
            Ortho::Left => w.sqrt() * frob(&self.cores[self.d() - 1]),
            Ortho::Right => w.sqrt() * frob(&self.cores[0]),
            Ortho::None => self.inner(self).expect("same grids").max(0.0).sqrt(),
        }
    }

    /// Evaluate the tensor-product trigonometric interpolant at a point
    /// (each coordinate wrapped into its period).
    pub fn eval_point(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.d() {
            return Err(CoreError::DimensionMismatch(format!(
                "eval_point: {} coordinates for a {}-dimensional tensor",
                y.len(),
                self.d()
            )));
        }
        let mut row = Array1::<f64>::ones(1);
        for i in 0..self.d() {
            let wts = self.grids[i].cardinal_weights(y[i]);
            let c = &self.cores[i];
            let (r1, n, r2) = (c.shape()[0], c.shape()[1], c.shape()[2]);
            // m[α,β] = Σ_x wts[x]·c[α,x,β]
            let mut m = Array2::<f64>::zeros((r1, r2));
            for x in 0..n {
                let wx = wts[x];
                if wx != 0.0 {
                    m.scaled_add(wx, &c.index_axis(Axis(1), x));
                }
            }
            row = row.dot(&m);
        }
        Ok(row[0])
    }

    /// Apply the spectral derivative of the given order along mode `i`
    /// (ranks unchanged).
    pub fn mode_derivative(&self, i: usize, order: u8) -> Result<Self> {
        if i >= self.d() {
            return Err(CoreError::InvalidIndex {
                index: i,
                d: self.d(),
            });
        }
        let dm = self.grids[i].diff_matrix(order)?;
        let mut out = self.clone();
        out.ortho = Ortho::None;
        let c = &self.cores[i];
        let (r1, n, r2) = (c.shape()[0], c.shape()[1], c.shape()[2]);
        // Copy into standard layout explicitly: `to_owned` on a permuted
        // view keeps the permuted strides, which `into_shape` rejects.
        let mat = Array2::from_shape_fn((n, r1 * r2), |(x, q)| c[[q / r2, x, q % r2]]);
        let der = dm.dot(&mat);
        out.cores[i] = Array3::from_shape_fn((r1, n, r2), |(a, x, b)| der[[x, a * r2 + b]]);
        Ok(out)
    }

    /// Multiply mode `i` fibers pointwise by a diagonal of node values
    /// (ranks unchanged).
    pub fn mode_diag_multiply(&self, i: usize, diag: ArrayView1<'_, f64>) -> Result<Self> {
        if i >= self.d() {
            return Err(CoreError::InvalidIndex {
                index: i,
                d: self.d(),
            });
        }
        if diag.len() != self.grids[i].n() {
            return Err(CoreError::DimensionMismatch(format!(
                "mode_diag_multiply: {} values for {} nodes",
                diag.len(),
                self.grids[i].n()
            )));
        }
        let mut out = self.clone();
        out.ortho = Ortho::None;
        let d3 = diag.into_shape((1, diag.len(), 1)).expect("1-d view");
        out.cores[i] = &self.cores[i] * &d3;
        Ok(out)
    }

    /// Multiply mode `j` by the coordinate `y_j` (node values of grid `j`).
    pub fn mode_coordinate_multiply(&self, j: usize) -> Result<Self> {
        if j >= self.d() {
            return Err(CoreError::InvalidIndex {
                index: j,
                d: self.d(),
            });
        }
        let nodes = self.grids[j].nodes().to_owned();
        self.mode_diag_multiply(j, nodes.view())
    }

    /// Exact pointwise (Hadamard) product; ranks multiply per bond.
    /// Guarded against runaway intermediate sizes.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.require_same_grids(other)?;
        let mut total: u128 = 0;
        for i in 0..self.d() {
            let a = self.cores[i].shape();
            let b = other.cores[i].shape();
            total += (a[0] * b[0]) as u128 * a[1] as u128 * (a[2] * b[2]) as u128;
        }
        if total > FULL_ELEM_LIMIT {
            return Err(CoreError::MemoryGuard {
                points: total,
                limit: FULL_ELEM_LIMIT,
            });
        }
        let mut cores = Vec::with_capacity(self.d());
        for i in 0..self.d() {
            let a = &self.cores[i];
            let b = &other.cores[i];
            let (ra1, n, ra2) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (rb1, rb2) = (b.shape()[0], b.shape()[2]);
            let mut c = Array3::zeros((ra1 * rb1, n, ra2 * rb2));
            for x in 0..n {
                let ax = a.index_axis(Axis(1), x);
                let bx = b.index_axis(Axis(1), x);
                let mut cx = c.index_axis_mut(Axis(1), x);
                for p in 0..ra1 {
                    for q in 0..rb1 {
                        for s in 0..ra2 {
                            for t in 0..rb2 {
                                cx[[p * rb1 + q, s * rb2 + t]] = ax[[p, s]] * bx[[q, t]];
                            }
                        }
                    }
                }
            }
            cores.push(c);
        }
        Self::new(self.grids.clone(), cores)
    }

    /// Left-orthogonalize (QR sweep); represented values unchanged.
    pub fn left_orthogonalized(mut self) -> Result<Self> {
        let d = self.d();
        for i in 0..d.saturating_sub(1) {
            let c = std::mem::replace(&mut self.cores[i], Array3::zeros((0, 0, 0)));
            let (r1, n, r2) = (c.shape()[0], c.shape()[1], c.shape()[2]);
            let m = c.into_shape((r1 * n, r2)).expect("core is contiguous");
            let (q, r) = m.qr_into()?;
            let k = q.shape()[1];
            self.cores[i] = reshape_std(q, (r1, n, k));
            let next = std::mem::replace(&mut self.cores[i + 1], Array3::zeros((0, 0, 0)));
            let (s1, sn, s2) = (next.shape()[0], next.shape()[1], next.shape()[2]);
            let next_mat = next.into_shape((s1, sn * s2)).expect("core is contiguous");
            self.cores[i + 1] = r
                .dot(&next_mat)
                .into_shape((k, sn, s2))
                .expect("product is contiguous");
        }
        self.ortho = Ortho::Left;
        Ok(self)
    }

    /// Right-orthogonalize (LQ sweep via transposed QR); values unchanged.
    pub fn right_orthogonalized(mut self) -> Result<Self> {
        let d = self.d();
        for i in (1..d).rev() {
            let c = std::mem::replace(&mut self.cores[i], Array3::zeros((0, 0, 0)));
            let (r1, n, r2) = (c.shape()[0], c.shape()[1], c.shape()[2]);
            let m = c.into_shape((r1, n * r2)).expect("core is contiguous");
            // M = LQ with orthonormal rows of Q, from QR of Mᵀ.
            let (qt, rt) = m.t().to_owned().qr_into()?;
            let k = qt.shape()[1];
            self.cores[i] = reshape_std(qt.t().to_owned(), (k, n, r2));
            let prev = std::mem::replace(&mut self.cores[i - 1], Array3::zeros((0, 0, 0)));
            let (s1, sn, s2) = (prev.shape()[0], prev.shape()[1], prev.shape()[2]);
            let prev_mat = prev.into_shape((s1 * sn, s2)).expect("core is contiguous");
            self.cores[i - 1] = prev_mat
                .dot(&rt.t())
                .into_shape((s1, sn, k))
                .expect("product is contiguous");
        }
        self.ortho = Ortho::Right;
        Ok(self)
    }

    /// TT-rounding to relative tolerance `δ`: right-orthogonalize, then a
    /// left-to-right truncated-SVD sweep with per-site threshold
    /// `δ‖v‖/√(d−1)`. Ranks never increase; `δ = 0` recompresses exactly.
    pub fn round(&self, delta: f64) -> Result<Self> {
        self.round_with_cap(delta, None)
    }

    /// `round`, additionally capping each interior rank (used by the
    /// trigger-controlled stepping mode).
    pub fn round_with_cap(&self, delta: f64, caps: Option<&[usize]>) -> Result<Self> {
        let d = self.d();
        if d == 1 {
            let mut out = self.clone();
            out.ortho = Ortho::Left;
            return Ok(out);
        }
        let mut w = self.clone().right_orthogonalized()?;
        let norm_f = w.cores[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        let tau = delta * norm_f / ((d - 1) as f64).sqrt();
        for i in 0..d - 1 {
            let c = std::mem::replace(&mut w.cores[i], Array3::zeros((0, 0, 0)));
            let (r1, n, r2) = (c.shape()[0], c.shape()[1], c.shape()[2]);
            let m = c.into_shape((r1 * n, r2)).expect("core is contiguous");
            let (u, s, vt) = m.svddc_into(JobSvd::Some)?;
            let (u, vt) = (u.expect("left vectors"), vt.expect("right vectors"));
            let mut k = truncation_rank(&s, tau);
            if let Some(caps) = caps {
                k = k.min(caps[i + 1].max(1));
            }
            let uk = u.slice(ndarray::s![.., ..k]).to_owned();
            w.cores[i] = reshape_std(uk, (r1, n, k));
            // carry = diag(s_k)·Vtᵀ rows, absorbed into the next core.
            let mut carry = vt.slice(ndarray::s![..k, ..]).to_owned();
            for (j, mut row) in carry.outer_iter_mut().enumerate() {
                row *= s[j];
            }
            let next = std::mem::replace(&mut w.cores[i + 1], Array3::zeros((0, 0, 0)));
            let (s1, sn, s2) = (next.shape()[0], next.shape()[1], next.shape()[2]);
            let next_mat = next.into_shape((s1, sn * s2)).expect("core is contiguous");
            w.cores[i + 1] = carry
                .dot(&next_mat)
                .into_shape((k, sn, s2))
                .expect("product is contiguous");
        }
        w.ortho = Ortho::Left;
        Ok(w)
    }

    /// Reconstruct the dense value array (memory-guarded).
    pub fn to_full(&self) -> Result<ArrayD<f64>> {
        let total: u128 = self.grids.iter().map(|g| g.n() as u128).product();
        if total > FULL_ELEM_LIMIT {
            return Err(CoreError::MemoryGuard {
                points: total,
                limit: FULL_ELEM_LIMIT,
            });
        }
        let mut acc = Array2::<f64>::ones((1, 1));
        for c in &self.cores {
            let (r1, n, r2) = (c.shape()[0], c.shape()[1], c.shape()[2]);
            let m = acc.nrows();
            let c_mat = c.view().into_shape((r1, n * r2)).expect("core contiguous");
            acc = acc
                .dot(&c_mat)
                .into_shape((m * n, r2))
                .expect("product is contiguous");
        }
        let shape: Vec<usize> = self.grids.iter().map(|g| g.n()).collect();
        let flat = acc.into_shape(shape.iter().product::<usize>()).unwrap();
        Ok(flat
            .into_shape(IxDyn(&shape))
            .expect("shape product matches"))
    }

    /// TT-SVD of a dense array to relative tolerance `δ` (per-site threshold
    /// `δ‖F‖_F/√(d−1)` as in `round`).
    pub fn from_full(grids: Vec<GridRef>, values: ArrayViewD<'_, f64>, delta: f64) -> Result<Self> {
        let d = grids.len();
        let shape: Vec<usize> = grids.iter().map(|g| g.n()).collect();
        if values.shape() != shape.as_slice() {
            return Err(CoreError::GridMismatch(format!(
                "from_full: array shape {:?} does not match grids {:?}",
                values.shape(),
                shape
            )));
        }
        let dense = values.as_standard_layout().into_owned();
        if d == 1 {
            let c = reshape_std(dense, (1, shape[0], 1));
            return Self::new(grids, vec![c]);
        }
        let norm_f = dense.iter().map(|x| x * x).sum::<f64>().sqrt();
        let tau = delta * norm_f / ((d - 1) as f64).sqrt();
        let total: usize = shape.iter().product();
        let mut rest = reshape_std(dense, (shape[0], total / shape[0]));
        let mut cores = Vec::with_capacity(d);
        let mut r_prev = 1usize;
        for i in 0..d - 1 {
            let rows = rest.nrows();
            let n_i = shape[i];
            debug_assert_eq!(rows, r_prev * n_i);
            let (u, s, vt) = rest.svddc_into(JobSvd::Some)?;
            let (u, vt) = (u.expect("left vectors"), vt.expect("right vectors"));
            let k = truncation_rank(&s, tau);
            let uk = u.slice(ndarray::s![.., ..k]).to_owned();
            cores.push(reshape_std(uk, (r_prev, n_i, k)));
            let mut carry = vt.slice(ndarray::s![..k, ..]).to_owned();
            for (j, mut row) in carry.outer_iter_mut().enumerate() {
                row *= s[j];
            }
            let cols = carry.ncols();
            let n_next = shape[i + 1];
            rest = reshape_std(carry, (k * n_next, cols / n_next));
            r_prev = k;
        }
        let n_last = shape[d - 1];
        cores.push(reshape_std(rest, (r_prev, n_last, 1)));
        let mut tt = Self::new(grids, cores)?;
        tt.ortho = Ortho::Left;
        Ok(tt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grids3(n: usize, l: f64) -> Vec<GridRef> {
        (0..3).map(|_| make_grid(n, l).unwrap()).collect()
    }

    fn grids2(n: usize, l: f64) -> Vec<GridRef> {
        (0..2).map(|_| make_grid(n, l).unwrap()).collect()
    }

    fn rand_tt(seed: u64, grids: &[GridRef], ranks: &[usize]) -> TensorTrain {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = grids.len();
        assert_eq!(ranks.len(), d + 1);
        let cores = (0..d)
            .map(|i| {
                Array3::from_shape_fn((ranks[i], grids[i].n(), ranks[i + 1]), |_| {
                    rng.gen_range(-1.0..1.0)
                })
            })
            .collect();
        TensorTrain::new(grids.to_vec(), cores).unwrap()
    }

    fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    fn dense_norm(grids: &[GridRef], a: &ArrayD<f64>) -> f64 {
        let w: f64 = grids.iter().map(|g| g.weight()).product();
        (w * a.iter().map(|x| x * x).sum::<f64>()).sqrt()
    }

    #[test]
    fn separable_gaussian_is_rank_one() {
        let grids = grids3(64, 30.0);
        let beta = [4.0, 0.25, 4.0];
        let t = [1.0, -1.0, 1.0];
        let term: Vec<Array1<f64>> = (0..3)
            .map(|i| {
                grids[i]
                    .nodes()
                    .mapv(|x| (-(x + t[i]) * (x + t[i]) / beta[i]).exp())
            })
            .collect();
        let tt = TensorTrain::from_separable(grids, &[term], &[1.0]).unwrap();
        assert_eq!(tt.ranks(), vec![1, 1, 1, 1]);
        assert_eq!(tt.rank_profile(0.0).rank_1norm, 4);
    }

    #[test]
    fn separable_sum_matches_brute_force() {
        let grids = grids3(16, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let terms: Vec<Vec<Array1<f64>>> = (0..3)
            .map(|_| {
                (0..3)
                    .map(|i| Array1::from_shape_fn(grids[i].n(), |_| rng.gen_range(-1.0..1.0)))
                    .collect()
            })
            .collect();
        let weights = [0.7, -1.3, 0.4];
        let tt = TensorTrain::from_separable(grids.clone(), &terms, &weights).unwrap();
        assert_eq!(tt.ranks(), vec![1, 3, 3, 1]);
        let full = tt.to_full().unwrap();
        for ((i, j, k), v) in ndarray::indices((16, 16, 16)).into_iter().zip(full.iter()) {
            let want: f64 = (0..3)
                .map(|t| weights[t] * terms[t][0][i] * terms[t][1][j] * terms[t][2][k])
                .sum();
            assert!((v - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn cancelling_terms_round_to_zero() {
        let grids = grids2(16, 2.0);
        let g: Vec<Array1<f64>> = (0..2).map(|i| grids[i].nodes().mapv(|x| x.cos())).collect();
        let single = TensorTrain::from_separable(grids.clone(), &[g.clone()], &[1.0]).unwrap();
        let tt = TensorTrain::from_separable(grids, &[g.clone(), g], &[1.0, -1.0]).unwrap();
        let r = tt.round(1e-12).unwrap();
        assert!(r.norm() <= 1e-12 * single.norm());
    }

    #[test]
    fn add_and_scale_match_brute_force() {
        let grids = grids2(16, 3.0);
        let a = rand_tt(1, &grids, &[1, 2, 1]);
        let b = rand_tt(2, &grids, &[1, 2, 1]);
        let sum = a.add(&b).unwrap();
        assert_eq!(sum.ranks(), vec![1, 4, 1]);
        let fa = a.to_full().unwrap();
        let fb = b.to_full().unwrap();
        let fs = sum.to_full().unwrap();
        let want = &fa + &fb;
        assert!(max_abs_diff(&fs, &want) <= 1e-12);

        let sc = a.scale(-2.5);
        let fsc = sc.to_full().unwrap();
        assert!(max_abs_diff(&fsc, &fa.mapv(|x| -2.5 * x).into_dyn()) <= 1e-12);
    }

    #[test]
    fn add_zero_is_identity_in_values() {
        let grids = grids2(16, 3.0);
        let a = rand_tt(3, &grids, &[1, 3, 1]);
        let z = TensorTrain::zero(grids);
        let s = a.add(&z).unwrap();
        assert!(max_abs_diff(&s.to_full().unwrap(), &a.to_full().unwrap()) == 0.0);
    }

    #[test]
    fn self_cancellation_rounds_to_zero() {
        let grids = grids3(16, 3.0);
        let a = rand_tt(4, &grids, &[1, 2, 3, 1]);
        let diff = a.add(&a.scale(-1.0)).unwrap().round(1e-12).unwrap();
        assert!(diff.norm() <= 1e-12 * a.norm());
    }

    #[test]
    fn inner_matches_brute_force_and_is_symmetric() {
        let grids = grids3(16, 5.0);
        let a = rand_tt(5, &grids, &[1, 2, 2, 1]);
        let b = rand_tt(6, &grids, &[1, 3, 2, 1]);
        let w: f64 = grids.iter().map(|g| g.weight()).product();
        let brute: f64 = w * a
            .to_full()
            .unwrap()
            .iter()
            .zip(b.to_full().unwrap().iter())
            .map(|(x, y)| x * y)
            .sum::<f64>();
        let got = a.inner(&b).unwrap();
        assert!(
            (got - brute).abs() <= 1e-11 * brute.abs().max(1.0),
            "{got} vs {brute}"
        );
        // Symmetric up to contraction-order roundoff.
        let rev = b.inner(&a).unwrap();
        assert!((got - rev).abs() <= 1e-13 * got.abs().max(1.0));
        // Cauchy–Schwarz and positivity.
        assert!(got.abs() <= a.norm() * b.norm() * (1.0 + 1e-12));
        assert!(a.inner(&a).unwrap() >= 0.0);
        let z = TensorTrain::zero(grids);
        assert!(z.inner(&z).unwrap().abs() <= 1e-14);
    }

    #[test]
    fn normalized_gaussian_has_unit_mass() {
        // n = 256 so the trapezoidal quadrature of the narrow β = 1/4
        // component has converged past 1e−8 (at n = 64 its aliasing error
        // is ~2e−5; runs compare m(t) against m(0), where that offset
        // cancels).
        let grids = grids3(256, 30.0);
        let beta = [4.0, 0.25, 4.0];
        let t = [1.0, -1.0, 1.0];
        let m: f64 = beta
            .iter()
            .map(|b| (std::f64::consts::PI * b).sqrt())
            .product();
        let term: Vec<Array1<f64>> = (0..3)
            .map(|i| {
                grids[i]
                    .nodes()
                    .mapv(|x| (-(x + t[i]) * (x + t[i]) / beta[i]).exp())
            })
            .collect();
        let tt = TensorTrain::from_separable(grids.clone(), &[term], &[1.0 / m]).unwrap();
        let one = TensorTrain::constant_one(grids);
        let mass = tt.inner(&one).unwrap();
        assert!((mass - 1.0).abs() <= 1e-8, "mass = {mass}");
    }

    #[test]
    fn orthogonalization_preserves_values() {
        let grids = grids3(16, 2.0);
        let a = rand_tt(7, &grids, &[1, 3, 2, 1]);
        let fa = a.to_full().unwrap();
        let scale = fa.iter().fold(0.0f64, |m, x| m.max(x.abs()));

        let l = a.clone().left_orthogonalized().unwrap();
        assert!(max_abs_diff(&l.to_full().unwrap(), &fa) <= 1e-10 * scale);
        // Cores must stay standard layout: `into_shape` unfolds follow the
        // storage order, so an F-contiguous core would silently permute
        // values for any indexed consumer.
        for i in 0..3 {
            assert!(l.core(i).is_standard_layout());
        }
        for i in 0..2 {
            let c = l.core(i);
            let (r1, n, r2) = (c.shape()[0], c.shape()[1], c.shape()[2]);
            let m = c.view().into_shape((r1 * n, r2)).unwrap().to_owned();
            let gram = m.t().dot(&m);
            for p in 0..r2 {
                for q in 0..r2 {
                    let want = if p == q { 1.0 } else { 0.0 };
                    assert!((gram[[p, q]] - want).abs() <= 1e-10);
                }
            }
        }

        let r = a.clone().right_orthogonalized().unwrap();
        assert!(max_abs_diff(&r.to_full().unwrap(), &fa) <= 1e-10 * scale);
        for i in 0..3 {
            assert!(r.core(i).is_standard_layout());
        }
        // Indexed access must agree with the contraction-based to_full, i.e.
        // the logical core content matches the unfolding convention.
        let point = [3usize, 5, 7];
        let mut row = Array2::<f64>::eye(1);
        for (i, &x) in point.iter().enumerate() {
            row = row.dot(&r.core(i).index_axis(Axis(1), x));
        }
        assert!((row[[0, 0]] - fa[[3, 5, 7]]).abs() <= 1e-10 * scale);
        // Fast norm paths agree with the brute-force norm.
        let brute = dense_norm(&grids, &fa);
        assert!((l.norm() - brute).abs() <= 1e-10 * brute);
        assert!((r.norm() - brute).abs() <= 1e-10 * brute);
    }

    #[test]
    fn rounding_error_bound_holds() {
        let grids = grids3(16, 3.0);
        let v = rand_tt(8, &grids, &[1, 8, 8, 1]);
        let fv = v.to_full().unwrap();
        let nv = dense_norm(&grids, &fv);
        for delta in [1e-2, 1e-5, 1e-8] {
            let r = v.round(delta).unwrap();
            let fr = r.to_full().unwrap();
            let err = dense_norm(&grids, &(&fr - &fv).into_dyn());
            assert!(err <= delta * nv, "δ={delta}: {err} > {}", delta * nv);
            let rv = v.ranks();
            for (a, b) in r.ranks().iter().zip(&rv) {
                assert!(a <= b, "rank grew under rounding");
            }
        }
    }

    #[test]
    fn rounding_keeps_exact_ranks() {
        // Three independent Gaussian products: exact TT rank 3.
        let grids = grids3(16, 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let terms: Vec<Vec<Array1<f64>>> = (0..3)
            .map(|_| {
                (0..3)
                    .map(|i| {
                        let c: f64 = rng.gen_range(-1.0..1.0);
                        let w: f64 = rng.gen_range(0.5..2.0);
                        grids[i].nodes().mapv(|x| (-(x - c) * (x - c) / w).exp())
                    })
                    .collect()
            })
            .collect();
        let v = TensorTrain::from_separable(grids.clone(), &terms, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(v.ranks(), vec![1, 3, 3, 1]);
        let r = v.round(1e-12).unwrap();
        assert_eq!(r.ranks(), vec![1, 3, 3, 1]);
        let err = max_abs_diff(&r.to_full().unwrap(), &v.to_full().unwrap());
        assert!(err <= 1e-12);

        // v + v rounds back to the ranks of v with doubled values.
        let vv = v.add(&v).unwrap().round(1e-14).unwrap();
        assert_eq!(vv.ranks(), v.ranks());
        let err2 = max_abs_diff(&vv.to_full().unwrap(), &v.to_full().unwrap().mapv(|x| 2.0 * x));
        let scale = v.to_full().unwrap().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err2 <= 1e-12 * scale);
    }

    #[test]
    fn rank_one_round_is_identity() {
        let grids = grids2(16, 2.0);
        let v = rand_tt(13, &grids, &[1, 1, 1]);
        let r = v.round(0.5).unwrap();
        assert_eq!(r.ranks(), vec![1, 1, 1]);
        assert!(max_abs_diff(&r.to_full().unwrap(), &v.to_full().unwrap()) <= 1e-13);
    }

    #[test]
    fn eval_point_matches_grid_values_and_wraps() {
        let grids = grids2(16, 4.0);
        let v = rand_tt(17, &grids, &[1, 3, 1]);
        let fv = v.to_full().unwrap();
        for (i, j) in [(0usize, 0usize), (3, 10), (15, 7)] {
            let y = [grids[0].nodes()[i], grids[1].nodes()[j]];
            let got = v.eval_point(&y).unwrap();
            assert!((got - fv[[i, j]]).abs() <= 1e-11);
            let wrapped = v.eval_point(&[y[0] + 4.0, y[1] - 8.0]).unwrap();
            assert!((wrapped - got).abs() <= 1e-11);
        }
    }

    #[test]
    fn eval_point_hits_gaussian_peak() {
        // Resolution at which the narrow component's interpolant has
        // converged (see normalized_gaussian_has_unit_mass).
        let grids = grids3(256, 30.0);
        let beta = [4.0, 0.25, 4.0];
        let t = [1.0, -1.0, 1.0];
        let m: f64 = beta
            .iter()
            .map(|b| (std::f64::consts::PI * b).sqrt())
            .product();
        let term: Vec<Array1<f64>> = (0..3)
            .map(|i| {
                grids[i]
                    .nodes()
                    .mapv(|x| (-(x + t[i]) * (x + t[i]) / beta[i]).exp())
            })
            .collect();
        let v = TensorTrain::from_separable(grids, &[term], &[1.0 / m]).unwrap();
        let peak = v.eval_point(&[-1.0, 1.0, -1.0]).unwrap();
        assert!(
            ((peak - 1.0 / m) / (1.0 / m)).abs() <= 1e-8,
            "peak {peak} vs {}",
            1.0 / m
        );
    }

    #[test]
    fn mode_derivative_of_flat_mode_is_zero() {
        let grids = grids2(16, 2.0);
        let one = TensorTrain::constant_one(grids);
        let d = one.mode_derivative(0, 1).unwrap();
        assert!(d.norm() <= 1e-12);
    }

    #[test]
    fn mode_derivative_matches_gaussian_closed_form() {
        let grids = grids3(64, 30.0);
        let beta = [4.0, 0.25, 4.0];
        let t = [1.0, -1.0, 1.0];
        let term: Vec<Array1<f64>> = (0..3)
            .map(|i| {
                grids[i]
                    .nodes()
                    .mapv(|x| (-(x + t[i]) * (x + t[i]) / beta[i]).exp())
            })
            .collect();
        let v = TensorTrain::from_separable(grids.clone(), &[term], &[1.0]).unwrap();
        let dv = v.mode_derivative(0, 1).unwrap();
        // Analytic: ∂v/∂y_1 = −(2/β₁)(y₁+t₁)·v.
        let want = v
            .mode_diag_multiply(0, grids[0].nodes().mapv(|x| -(2.0 / 4.0) * (x + 1.0)).view())
            .unwrap();
        let f_dv = dv.to_full().unwrap();
        let f_want = want.to_full().unwrap();
        let scale = f_want.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max_abs_diff(&f_dv, &f_want) <= 1e-6 * scale);
    }

    #[test]
    fn mode_derivative_commutes_with_scale() {
        let grids = grids2(16, 3.0);
        let v = rand_tt(23, &grids, &[1, 2, 1]);
        // Scale touches core 0, derivative touches core 1: results are
        // bitwise identical regardless of order.
        let a = v.scale(3.25).mode_derivative(1, 1).unwrap();
        let b = v.mode_derivative(1, 1).unwrap().scale(3.25);
        assert_eq!(a.to_full().unwrap(), b.to_full().unwrap());
    }

    #[test]
    fn coordinate_multiply_composes_and_matches_brute_force() {
        let grids = grids2(16, 5.0);
        let v = rand_tt(29, &grids, &[1, 2, 1]);
        let twice = v
            .mode_coordinate_multiply(1)
            .unwrap()
            .mode_coordinate_multiply(1)
            .unwrap();
        let fv = v.to_full().unwrap();
        let ft = twice.to_full().unwrap();
        for (j, &y) in grids[1].nodes().iter().enumerate() {
            for i in 0..16 {
                assert!((ft[[i, j]] - y * y * fv[[i, j]]).abs() <= 1e-12);
            }
        }
        let once = v.mode_coordinate_multiply(0).unwrap();
        let fo = once.to_full().unwrap();
        for (i, &y) in grids[0].nodes().iter().enumerate() {
            for j in 0..16 {
                assert!((fo[[i, j]] - y * fv[[i, j]]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn coordinate_multiply_is_odd_against_symmetric_tensor() {
        // ⟨y₁·v, v⟩ vanishes for v even in y₁ (odd integrand); the slight
        // node asymmetry at −L/2 is negligible for a localized v.
        let grids = grids2(32, 20.0);
        let g: Vec<Array1<f64>> = (0..2)
            .map(|i| grids[i].nodes().mapv(|x| (-x * x / 2.0).exp()))
            .collect();
        let v = TensorTrain::from_separable(grids, &[g], &[1.0]).unwrap();
        let yv = v.mode_coordinate_multiply(0).unwrap();
        assert!(yv.inner(&v).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn hadamard_matches_pointwise_product() {
        let grids = grids2(16, 2.0);
        let a = rand_tt(31, &grids, &[1, 2, 1]);
        let b = rand_tt(37, &grids, &[1, 3, 1]);
        let h = a.hadamard(&b).unwrap();
        assert_eq!(h.ranks(), vec![1, 6, 1]);
        let want = &a.to_full().unwrap() * &b.to_full().unwrap();
        assert!(max_abs_diff(&h.to_full().unwrap(), &want.into_dyn()) <= 1e-12);
    }

    #[test]
    fn from_full_round_trips() {
        let grids = grids3(16, 3.0);
        let v = rand_tt(41, &grids, &[1, 3, 2, 1]);
        let fv = v.to_full().unwrap();
        let w = TensorTrain::from_full(grids.clone(), fv.view(), 1e-13).unwrap();
        assert!(max_abs_diff(&w.to_full().unwrap(), &fv) <= 1e-11 * dense_norm(&grids, &fv));
        for (a, b) in w.ranks().iter().zip(v.ranks()) {
            assert!(*a <= b);
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let a = rand_tt(1, &grids2(16, 2.0), &[1, 2, 1]);
        let b = rand_tt(1, &grids2(16, 3.0), &[1, 2, 1]);
        assert!(a.add(&b).is_err());
        assert!(a.inner(&b).is_err());
        assert!(a.hadamard(&b).is_err());
        assert!(a.mode_derivative(5, 1).is_err());
        assert!(a.mode_coordinate_multiply(2).is_err());
    }
}
