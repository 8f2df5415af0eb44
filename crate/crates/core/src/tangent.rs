//! Tangent-space projection for the fixed-rank tensor-train manifold.
//!
//! A [`ProjectionFrame`] caches left- and right-orthonormal factors of a
//! reference tensor train `v_r`. The tangent projector at `v_r` is the
//! standard alternating sum over sites: the `i`-th term keeps the left
//! interface of sites `< i` and the right interface of sites `> i`, varies
//! site `i`, and (for `i < d`) removes the overlap with the left factor so
//! the terms are mutually orthogonal. The projected tensor assembles into a
//! single tensor train of interior ranks at most `2r_i`.
//!
//! The left cache is gauge-fixed by interior SVDs with a deterministic sign
//! convention (the largest-magnitude entry of each singular vector is made
//! nonnegative). Interior singular values falling below `1e−13·‖v_r‖`
//! indicate a (numerically) rank-deficient reference, where the manifold
//! curvature blows up; construction fails rather than regularizing.

use ndarray::{s, Array2, Array3};
use ndarray_linalg::{JobSvd, SVDDCInto};

use crate::error::{CoreError, Result};
use crate::grid::GridRef;
use crate::tt::{reshape_std, TensorTrain};

/// Relative threshold below which an interior singular value marks the
/// frame as degenerate.
const DEGENERACY_RTOL: f64 = 1e-13;

/// Orthonormal factor caches of a reference tensor train.
#[derive(Debug, Clone)]
pub struct ProjectionFrame {
    grids: Vec<GridRef>,
    /// `left[i]` for `i < d−1` are left-orthonormal cores in SVD gauge;
    /// `left[d−1]` carries the remaining factor (and the norm).
    left: Vec<Array3<f64>>,
    /// `right[0]` carries the remaining factor; `right[i]` for `i ≥ 1` are
    /// right-orthonormal cores.
    right: Vec<Array3<f64>>,
    ranks: Vec<usize>,
    norm: f64,
}

/// Left unfolding `(r₁·n, r₂)` of a standard-layout core.
fn left_unfold(c: &Array3<f64>) -> Array2<f64> {
    let (r1, n, r2) = (c.shape()[0], c.shape()[1], c.shape()[2]);
    c.view()
        .into_shape((r1 * n, r2))
        .expect("cores are standard layout")
        .to_owned()
}

/// Fold a `(r₁·n, r₂)` matrix back into a core; safe for any memory layout
/// (SVD factors may come back F-contiguous).
fn fold_left(m: Array2<f64>, r1: usize, n: usize) -> Array3<f64> {
    let r2 = m.ncols();
    reshape_std(m, (r1, n, r2))
}

impl ProjectionFrame {
    /// Build the frame at `v_r`. Fails with a degeneracy diagnostic if any
    /// interior singular value is below `1e−13·‖v_r‖`.
    pub fn new(v: &TensorTrain) -> Result<Self> {
        let d = v.d();
        let norm = v.norm();
        let threshold = DEGENERACY_RTOL * norm;
        if norm == 0.0 {
            return Err(CoreError::DegenerateFrame {
                bond: 0,
                sigma: 0.0,
                threshold,
            });
        }
        let right_form = v.clone().right_orthogonalized()?;
        let right: Vec<Array3<f64>> = (0..d).map(|i| right_form.core(i).clone()).collect();

        // Left sweep with SVD gauge and the sign convention.
        let mut cores: Vec<Array3<f64>> = right.clone();
        let mut left: Vec<Array3<f64>> = Vec::with_capacity(d);
        for i in 0..d.saturating_sub(1) {
            let (r1, n, _r2) = {
                let s = cores[i].shape();
                (s[0], s[1], s[2])
            };
            let m = left_unfold(&cores[i]);
            let (u, sv, vt) = m.svddc_into(JobSvd::Some)?;
            let mut u = u.expect("left singular vectors");
            let mut vt = vt.expect("right singular vectors");
            let k = sv.len();
            let smallest = sv[k - 1];
            if smallest < threshold {
                return Err(CoreError::DegenerateFrame {
                    bond: i + 1,
                    sigma: smallest,
                    threshold,
                });
            }
            // Sign convention: largest-magnitude entry of each left singular
            // vector nonnegative; compensate on the right vectors.
            for p in 0..k {
                let col = u.slice(s![.., p]);
                let mut best = 0usize;
                let mut mag = 0.0;
                for (q, &x) in col.iter().enumerate() {
                    if x.abs() > mag {
                        mag = x.abs();
                        best = q;
                    }
                }
                if u[[best, p]] < 0.0 {
                    u.slice_mut(s![.., p]).mapv_inplace(|x| -x);
                    vt.slice_mut(s![p, ..]).mapv_inplace(|x| -x);
                }
            }
            left.push(fold_left(u, r1, n));
            // carry = diag(s)·Vᵀ absorbed into the next core.
            let mut carry = vt;
            for (p, mut row) in carry.outer_iter_mut().enumerate() {
                row *= sv[p];
            }
            let next = &cores[i + 1];
            let (q1, n2, q2) = (next.shape()[0], next.shape()[1], next.shape()[2]);
            let next_m = next
                .view()
                .into_shape((q1, n2 * q2))
                .expect("cores are standard layout");
            let merged = carry.dot(&next_m);
            cores[i + 1] = reshape_std(merged, (k, n2, q2));
        }
        left.push(cores[d - 1].clone());

        Ok(Self {
            grids: v.grids().to_vec(),
            ranks: v.ranks(),
            left,
            right,
            norm,
        })
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// Reference value rebuilt from the left cache.
    pub fn reference_left(&self) -> TensorTrain {
        TensorTrain::new(self.grids.clone(), self.left.clone())
            .expect("cached cores form a valid chain")
    }

    /// Reference value rebuilt from the right cache.
    pub fn reference_right(&self) -> TensorTrain {
        TensorTrain::new(self.grids.clone(), self.right.clone())
            .expect("cached cores form a valid chain")
    }

    fn check_grids(&self, w: &TensorTrain) -> Result<()> {
        if w.grids().len() != self.grids.len()
            || w.grids().iter().zip(&self.grids).any(|(a, b)| **a != **b)
        {
            return Err(CoreError::GridMismatch(
                "frame and value live on different grids".into(),
            ));
        }
        Ok(())
    }

    /// Orthogonal projection of `w` onto the tangent space at the reference,
    /// returned as a tensor train with interior ranks at most `2r_i`.
    pub fn tangent_project(&self, w: &TensorTrain) -> Result<TensorTrain> {
        self.check_grids(w)?;
        let d = self.grids.len();
        if d == 1 {
            // Rank-(1,1) chains in one dimension span the whole space.
            return Ok(w.clone());
        }

        // Left environments E^L_i = (U_{≤i})ᵀ·(W_{≤i}) ∈ (r_i × s_i).
        let mut env_left: Vec<Array2<f64>> = Vec::with_capacity(d);
        env_left.push(Array2::eye(1));
        for i in 0..d - 1 {
            let u = &self.left[i];
            let wc = w.core(i);
            let n = u.shape()[1];
            let (ru2, sw2) = (u.shape()[2], wc.shape()[2]);
            let mut e = Array2::<f64>::zeros((ru2, sw2));
            let prev = &env_left[i];
            for x in 0..n {
                let ux = u.slice(s![.., x, ..]);
                let wx = wc.slice(s![.., x, ..]);
                e = e + ux.t().dot(&prev.dot(&wx));
            }
            env_left.push(e);
        }

        // Right environments E^R_i = (W_{>i})·(V_{>i})ᵀ ∈ (s_i × r_i).
        let mut env_right: Vec<Array2<f64>> = vec![Array2::eye(1); d];
        for i in (1..d).rev() {
            let v = &self.right[i];
            let wc = w.core(i);
            let n = v.shape()[1];
            let (sw1, rv1) = (wc.shape()[0], v.shape()[0]);
            let mut e = Array2::<f64>::zeros((sw1, rv1));
            let next = &env_right[i];
            for x in 0..n {
                let vx = v.slice(s![.., x, ..]);
                let wx = wc.slice(s![.., x, ..]);
                e = e + wx.dot(&next.dot(&vx.t()));
            }
            env_right[i - 1] = e;
        }

        // Site terms: F_i = E^L_{i−1}·W_i·E^R_i, gauge-corrected below d.
        let mut deltas: Vec<Array3<f64>> = Vec::with_capacity(d);
        for i in 0..d {
            let wc = w.core(i);
            let n = wc.shape()[1];
            let r1 = self.ranks[i];
            let r2 = self.ranks[i + 1];
            let mut f = Array3::<f64>::zeros((r1, n, r2));
            let el = &env_left[i];
            let er = &env_right[i];
            for x in 0..n {
                let wx = wc.slice(s![.., x, ..]);
                f.slice_mut(s![.., x, ..]).assign(&el.dot(&wx).dot(er));
            }
            if i < d - 1 {
                let u = left_unfold(&self.left[i]);
                let fm = left_unfold(&f);
                let overlap = u.t().dot(&fm);
                let delta = fm - u.dot(&overlap);
                deltas.push(fold_left(delta, r1, n));
            } else {
                deltas.push(f);
            }
        }

        // Assemble Σ_i U_{<i}·δF_i·V_{>i} as one block tensor train.
        let mut cores: Vec<Array3<f64>> = Vec::with_capacity(d);
        for i in 0..d {
            let n = self.grids[i].n();
            let r1 = self.ranks[i];
            let r2 = self.ranks[i + 1];
            if i == 0 {
                let mut c = Array3::<f64>::zeros((1, n, 2 * r2));
                c.slice_mut(s![.., .., ..r2]).assign(&deltas[0]);
                c.slice_mut(s![.., .., r2..]).assign(&self.left[0]);
                cores.push(c);
            } else if i == d - 1 {
                let mut c = Array3::<f64>::zeros((2 * r1, n, 1));
                c.slice_mut(s![..r1, .., ..]).assign(&self.right[i]);
                c.slice_mut(s![r1.., .., ..]).assign(&deltas[i]);
                cores.push(c);
            } else {
                let mut c = Array3::<f64>::zeros((2 * r1, n, 2 * r2));
                c.slice_mut(s![..r1, .., ..r2]).assign(&self.right[i]);
                c.slice_mut(s![r1.., .., ..r2]).assign(&deltas[i]);
                c.slice_mut(s![r1.., .., r2..]).assign(&self.left[i]);
                cores.push(c);
            }
        }
        TensorTrain::new(self.grids.clone(), cores)
    }

    /// `w − P_T w`.
    pub fn normal_component(&self, w: &TensorTrain) -> Result<TensorTrain> {
        let p = self.tangent_project(w)?;
        w.add(&p.scale(-1.0))
    }

    /// Quadrature L² norm of the normal component. Orthogonalizes before
    /// taking the norm so near-total cancellation (tangent `w`) is resolved
    /// to machine precision rather than the `√ε·‖w‖` floor of a raw inner
    /// product.
    pub fn normal_norm(&self, w: &TensorTrain) -> Result<f64> {
        Ok(self.normal_component(w)?.right_orthogonalized()?.norm())
    }
}
