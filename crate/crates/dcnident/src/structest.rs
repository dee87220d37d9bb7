//! Constrained SK-iteration: parametric estimation of the structured
//! polynomial matrices A(p), B(p), C(p) from the non-parametric estimates.
//!
//! Each iteration solves a linearly constrained weighted least-squares
//! problem. The residual at frequency k is
//! `M_1(k) = W(k) [A(Omega_k) W_hat(k) - B(Omega_k) R(k) - C(Omega_k)]`
//! with the weighting `W(k) = [Cw_hat^{1/2}(k) A_prev(Omega_k)]^{-1}`
//! refreshed from the previous iterate; stacking the real and imaginary
//! parts gives a real LS problem in the parameter vector, and the equality
//! constraints (known excitation dynamics, topology zeros) enter through a
//! KKT system.
//!
//! Internally everything runs in a frequency-scaled variable `p = w0 ptilde`
//! with `w0` the geometric band mean, which keeps coefficients of different
//! polynomial orders comparable in magnitude; results are scaled back before
//! returning.

use crate::lpm::{psd_repair, NonparamEstimate};
use crate::netmodel::DCNModel;
use crate::polymat::{Polynomial, PolynomialMatrix};
use crate::signalgen::SpectralDataset;
use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StructError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("constraint matrix rank deficient after assembly")]
    RankDeficientConstraints,
    #[error("all constraint targets are zero (Gamma theta = 0 admits theta = 0)")]
    ZeroUpsilon,
    #[error("conflicting pins for coordinate {0}")]
    ConflictingPins(usize),
    #[error("weighting matrix numerically singular at bin {0}")]
    SingularWeight(usize),
    #[error("KKT system singular (parameterization not identifiable)")]
    SingularKKT,
    #[error("SK iteration produced no usable iterate")]
    NoIterate,
}

/// Index layout of the real parameter vector `theta = [theta_a; theta_b;
/// theta_c]`.
///
/// `theta_a` holds the upper-triangle (including diagonal) coefficients of
/// the symmetric A(p), ordered by row `i`, column `j >= i`, then power;
/// `theta_b` the B(p) coefficients by node, excitation, power; `theta_c` the
/// transient coefficients by node and power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub l: usize,
    pub k: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub n_c: usize,
}

impl ParamLayout {
    pub fn from_model(m: &DCNModel) -> Self {
        Self {
            l: m.node_count,
            k: m.excitation_count,
            n_a: m.n_a,
            n_b: m.n_b,
            n_c: m.n_c,
        }
    }

    pub fn na_len(&self) -> usize {
        self.l * (self.l + 1) / 2 * (self.n_a + 1)
    }

    pub fn nb_len(&self) -> usize {
        self.l * self.k * (self.n_b + 1)
    }

    pub fn nc_len(&self) -> usize {
        self.l * (self.n_c + 1)
    }

    pub fn dim(&self) -> usize {
        self.na_len() + self.nb_len() + self.nc_len()
    }

    /// Index of the A coefficient `a_{ij,ell}`; `i` and `j` may be given in
    /// either order.
    pub fn idx_a(&self, i: usize, j: usize, ell: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        debug_assert!(j < self.l && ell <= self.n_a);
        let pair = i * self.l - i * (i + 1) / 2 + j; // pairs before row i, plus offset
        pair * (self.n_a + 1) + ell
    }

    /// Index of the B coefficient `b_{ij,ell}` (node `i`, excitation `j`).
    pub fn idx_b(&self, i: usize, j: usize, ell: usize) -> usize {
        debug_assert!(i < self.l && j < self.k && ell <= self.n_b);
        self.na_len() + (i * self.k + j) * (self.n_b + 1) + ell
    }

    /// Index of the transient coefficient `c_{j,ell}`.
    pub fn idx_c(&self, j: usize, ell: usize) -> usize {
        debug_assert!(j < self.l && ell <= self.n_c);
        self.na_len() + self.nb_len() + j * (self.n_c + 1) + ell
    }

    /// Polynomial order of the coefficient at a given theta index.
    pub fn order_of(&self, idx: usize) -> usize {
        if idx < self.na_len() {
            idx % (self.n_a + 1)
        } else if idx < self.na_len() + self.nb_len() {
            (idx - self.na_len()) % (self.n_b + 1)
        } else {
            (idx - self.na_len() - self.nb_len()) % (self.n_c + 1)
        }
    }

    /// Collect the coefficients of (A, B, C) into a parameter vector.
    pub fn pack(
        &self,
        a: &PolynomialMatrix,
        b: &PolynomialMatrix,
        c: &PolynomialMatrix,
    ) -> Result<DVector<f64>, StructError> {
        if a.rows() != self.l || a.cols() != self.l || b.rows() != self.l || b.cols() != self.k
            || c.rows() != self.l || c.cols() != 1
        {
            return Err(StructError::DimensionMismatch(
                "pack: matrix shapes do not match the layout".into(),
            ));
        }
        let mut theta = DVector::zeros(self.dim());
        for i in 0..self.l {
            for j in i..self.l {
                for ell in 0..=self.n_a {
                    theta[self.idx_a(i, j, ell)] = a.entry(i, j).coeff(ell);
                }
            }
        }
        for i in 0..self.l {
            for j in 0..self.k {
                for ell in 0..=self.n_b {
                    theta[self.idx_b(i, j, ell)] = b.entry(i, j).coeff(ell);
                }
            }
        }
        for j in 0..self.l {
            for ell in 0..=self.n_c {
                theta[self.idx_c(j, ell)] = c.entry(j, 0).coeff(ell);
            }
        }
        Ok(theta)
    }

    /// Rebuild (A, B, C) from a parameter vector; A is symmetric by
    /// construction.
    pub fn unpack(&self, theta: &DVector<f64>) -> (PolynomialMatrix, PolynomialMatrix, PolynomialMatrix) {
        assert_eq!(theta.len(), self.dim(), "theta length mismatch");
        let mut a = PolynomialMatrix::zeros(self.l, self.l);
        for i in 0..self.l {
            for j in i..self.l {
                let coeffs: Vec<f64> = (0..=self.n_a).map(|ell| theta[self.idx_a(i, j, ell)]).collect();
                let p = Polynomial::new(coeffs);
                *a.entry_mut(i, j) = p.clone();
                if i != j {
                    *a.entry_mut(j, i) = p;
                }
            }
        }
        let mut b = PolynomialMatrix::zeros(self.l, self.k);
        for i in 0..self.l {
            for j in 0..self.k {
                let coeffs: Vec<f64> = (0..=self.n_b).map(|ell| theta[self.idx_b(i, j, ell)]).collect();
                *b.entry_mut(i, j) = Polynomial::new(coeffs);
            }
        }
        let mut c = PolynomialMatrix::zeros(self.l, 1);
        for j in 0..self.l {
            let coeffs: Vec<f64> = (0..=self.n_c).map(|ell| theta[self.idx_c(j, ell)]).collect();
            *c.entry_mut(j, 0) = Polynomial::new(coeffs);
        }
        (a, b, c)
    }
}

/// Linear equality constraints `Gamma theta = upsilon`.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub gamma: DMatrix<f64>,
    pub upsilon: DVector<f64>,
}

impl ConstraintSet {
    /// Build a constraint set from single-coordinate pins `(index, value)`.
    pub fn from_pins(dim: usize, pins: &[(usize, f64)]) -> Result<Self, StructError> {
        let mut seen: Vec<Option<f64>> = vec![None; dim];
        let mut unique: Vec<(usize, f64)> = Vec::new();
        for &(idx, val) in pins {
            match seen[idx] {
                Some(prev) if prev != val => return Err(StructError::ConflictingPins(idx)),
                Some(_) => {}
                None => {
                    seen[idx] = Some(val);
                    unique.push((idx, val));
                }
            }
        }
        if unique.iter().all(|&(_, v)| v == 0.0) {
            return Err(StructError::ZeroUpsilon);
        }
        let mut gamma = DMatrix::zeros(unique.len(), dim);
        let mut upsilon = DVector::zeros(unique.len());
        for (row, &(idx, val)) in unique.iter().enumerate() {
            gamma[(row, idx)] = 1.0;
            upsilon[row] = val;
        }
        Ok(Self { gamma, upsilon })
    }

    /// If every row is a single-coordinate pin, return the `(index, value)`
    /// pairs; this enables the elimination fast path in the solver.
    pub fn as_pins(&self) -> Option<Vec<(usize, f64)>> {
        let mut pins = Vec::with_capacity(self.gamma.nrows());
        for r in 0..self.gamma.nrows() {
            let mut found: Option<(usize, f64)> = None;
            for c in 0..self.gamma.ncols() {
                let v = self.gamma[(r, c)];
                if v != 0.0 {
                    if found.is_some() {
                        return None;
                    }
                    found = Some((c, self.upsilon[r] / v));
                }
            }
            pins.push(found?);
        }
        Some(pins)
    }
}

/// Assemble the standard constraint set for a full-network identification:
/// every B coefficient is pinned to its template value (the excitation
/// dynamics are known), structurally absent A coefficients (missing edges and
/// missing orders of present edges) are pinned to zero, and optional known A
/// coefficients may be pinned as well.
pub fn build_constraints(
    layout: &ParamLayout,
    template: &DCNModel,
    known_a: &[(usize, usize, usize, f64)],
) -> Result<ConstraintSet, StructError> {
    if template.node_count != layout.l || template.excitation_count != layout.k {
        return Err(StructError::DimensionMismatch(
            "template does not match layout".into(),
        ));
    }
    let mut pins: Vec<(usize, f64)> = Vec::new();
    for i in 0..layout.l {
        for j in 0..layout.k {
            for ell in 0..=layout.n_b {
                pins.push((layout.idx_b(i, j, ell), template.b.entry(i, j).coeff(ell)));
            }
        }
    }
    for i in 0..layout.l {
        for j in i..layout.l {
            let absent_edge = i != j && !template.topology[i][j];
            for ell in 0..=layout.n_a {
                let structural_zero =
                    absent_edge || (template.a.entry(i, j).coeff(ell) == 0.0 && i != j);
                if structural_zero {
                    pins.push((layout.idx_a(i, j, ell), 0.0));
                }
            }
        }
    }
    for &(i, j, ell, val) in known_a {
        pins.push((layout.idx_a(i, j, ell), val));
    }
    ConstraintSet::from_pins(layout.dim(), &pins)
}

/// Frequency weighting `W(k) = [Cw_hat^{1/2}(k) A_prev(Omega_k)]^{-1}` with
/// `Cw_hat^{1/2}` the lower Cholesky factor of the (repaired) covariance.
pub fn build_weight(
    cw_hat: &DMatrix<Complex64>,
    a_prev_eval: &DMatrix<Complex64>,
    bin: usize,
) -> Result<DMatrix<Complex64>, StructError> {
    let chol = Cholesky::new(psd_repair(cw_hat)).ok_or(StructError::SingularWeight(bin))?;
    let m = chol.l() * a_prev_eval;
    let lu = m.lu();
    let (dmax, dmin) = {
        let u = lu.u();
        let n = u.nrows();
        let mut dmax = 0.0f64;
        let mut dmin = f64::INFINITY;
        for i in 0..n {
            let d = u[(i, i)].norm();
            dmax = dmax.max(d);
            dmin = dmin.min(d);
        }
        (dmax, dmin)
    };
    if dmax == 0.0 || dmin < 1e-13 * dmax {
        return Err(StructError::SingularWeight(bin));
    }
    lu.try_inverse().ok_or(StructError::SingularWeight(bin))
}

/// The weighted regressor block `Q(k)` (L rows): `Q(k) theta = M_1(k)` for
/// every theta, with columns `[Pi_A, -Pi_B, -Pi_C]` in layout order.
///
/// Column `a_{ij,ell}` of `Pi_A` in row `r` is
/// `(W_{ri} W_hat_j + [i<j] W_{rj} W_hat_i) Omega^ell` (symmetric folding);
/// column `b_{ij,ell}` is `W_{ri} R_j Omega^ell`; column `c_{j,ell}` is
/// `W_{rj} Omega^ell`.
pub fn build_regressor(
    layout: &ParamLayout,
    weight: &DMatrix<Complex64>,
    w_hat: &DVector<Complex64>,
    r_k: &DVector<Complex64>,
    omega: Complex64,
) -> DMatrix<Complex64> {
    let l = layout.l;
    let dim = layout.dim();
    let mut q = DMatrix::<Complex64>::zeros(l, dim);
    let max_ord = layout.n_a.max(layout.n_b).max(layout.n_c);
    let mut omega_pow = Vec::with_capacity(max_ord + 1);
    let mut p = Complex64::new(1.0, 0.0);
    for _ in 0..=max_ord {
        omega_pow.push(p);
        p *= omega;
    }
    for r in 0..l {
        for i in 0..l {
            for j in i..l {
                let mut base = weight[(r, i)] * w_hat[j];
                if i < j {
                    base += weight[(r, j)] * w_hat[i];
                }
                for ell in 0..=layout.n_a {
                    q[(r, layout.idx_a(i, j, ell))] = base * omega_pow[ell];
                }
            }
        }
        for i in 0..l {
            for j in 0..layout.k {
                let base = -weight[(r, i)] * r_k[j];
                for ell in 0..=layout.n_b {
                    q[(r, layout.idx_b(i, j, ell))] = base * omega_pow[ell];
                }
            }
        }
        for j in 0..l {
            for ell in 0..=layout.n_c {
                q[(r, layout.idx_c(j, ell))] = -weight[(r, j)] * omega_pow[ell];
            }
        }
    }
    q
}

/// Solve the KKT system `[H, Gamma^T; Gamma, 0] [theta; lambda] = [0; upsilon]`
/// with `H = 2 Re(Q^H Q)` already accumulated over frequencies.
///
/// Columns are equilibrated internally; the equality constraints hold to
/// 1e-10 in the returned solution.
pub fn kkt_solve(
    h: &DMatrix<f64>,
    constraints: &ConstraintSet,
) -> Result<(DVector<f64>, DVector<f64>), StructError> {
    let dim = h.nrows();
    let m = constraints.gamma.nrows();
    if h.ncols() != dim || constraints.gamma.ncols() != dim {
        return Err(StructError::DimensionMismatch("kkt_solve shapes".into()));
    }
    // symmetric column/row equilibration of H, mirrored on Gamma
    let mut s = DVector::from_element(dim, 1.0);
    for j in 0..dim {
        let d = h[(j, j)].abs();
        if d > 0.0 {
            s[j] = 1.0 / d.sqrt();
        }
    }
    let mut kkt = DMatrix::<f64>::zeros(dim + m, dim + m);
    for i in 0..dim {
        for j in 0..dim {
            kkt[(i, j)] = s[i] * h[(i, j)] * s[j];
        }
    }
    // normalize each constraint row after the column scaling so the
    // bordered block is well conditioned regardless of pin magnitudes
    let mut rhs = DVector::<f64>::zeros(dim + m);
    for r in 0..m {
        let mut rmax = 0.0f64;
        for j in 0..dim {
            rmax = rmax.max((constraints.gamma[(r, j)] * s[j]).abs());
        }
        let rscale = if rmax > 0.0 { 1.0 / rmax } else { 1.0 };
        for j in 0..dim {
            let g = constraints.gamma[(r, j)] * s[j] * rscale;
            kkt[(dim + r, j)] = g;
            kkt[(j, dim + r)] = g;
        }
        rhs[dim + r] = constraints.upsilon[r] * rscale;
    }
    let sol = kkt.lu().solve(&rhs).ok_or(StructError::SingularKKT)?;
    let mut theta = DVector::zeros(dim);
    for j in 0..dim {
        theta[j] = sol[j] * s[j];
    }
    let lambda = DVector::from_fn(m, |r, _| sol[dim + r]);
    let feas = (&constraints.gamma * &theta - &constraints.upsilon).amax();
    let scale = constraints.upsilon.amax().max(1.0);
    if !theta.iter().all(|v| v.is_finite()) || feas > 1e-8 * scale {
        return Err(StructError::SingularKKT);
    }
    Ok((theta, lambda))
}

/// Solve the same constrained problem by eliminating pinned coordinates:
/// minimizes `theta^T H theta` with the pinned entries fixed. Identical to
/// [`kkt_solve`] when every constraint row is a single pin, but much cheaper.
fn pin_eliminate_solve(
    h: &DMatrix<f64>,
    pins: &[(usize, f64)],
) -> Result<DVector<f64>, StructError> {
    let dim = h.nrows();
    let mut pinned = vec![None::<f64>; dim];
    for &(idx, val) in pins {
        pinned[idx] = Some(val);
    }
    let free: Vec<usize> = (0..dim).filter(|&j| pinned[j].is_none()).collect();
    let nf = free.len();
    if nf == 0 {
        let mut theta = DVector::zeros(dim);
        for j in 0..dim {
            theta[j] = pinned[j].unwrap();
        }
        return Ok(theta);
    }
    let mut hff = DMatrix::<f64>::zeros(nf, nf);
    let mut rhs = DVector::<f64>::zeros(nf);
    for (a, &fa) in free.iter().enumerate() {
        for (b, &fb) in free.iter().enumerate() {
            hff[(a, b)] = h[(fa, fb)];
        }
        let mut acc = 0.0;
        for j in 0..dim {
            if let Some(v) = pinned[j] {
                acc += h[(fa, j)] * v;
            }
        }
        rhs[a] = -acc;
    }
    // equilibrate and solve
    let mut s = DVector::from_element(nf, 1.0);
    for j in 0..nf {
        let d = hff[(j, j)].abs();
        if d > 0.0 {
            s[j] = 1.0 / d.sqrt();
        }
    }
    for a in 0..nf {
        for b in 0..nf {
            hff[(a, b)] *= s[a] * s[b];
        }
        rhs[a] *= s[a];
    }
    let sol = hff.lu().solve(&rhs).ok_or(StructError::SingularKKT)?;
    let mut theta = DVector::zeros(dim);
    for j in 0..dim {
        if let Some(v) = pinned[j] {
            theta[j] = v;
        }
    }
    for (a, &fa) in free.iter().enumerate() {
        theta[fa] = sol[a] * s[a];
        if !theta[fa].is_finite() {
            return Err(StructError::SingularKKT);
        }
    }
    Ok(theta)
}

/// SK-iteration settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SkSettings {
    pub max_iter: usize,
    /// Relative parameter-change stopping tolerance.
    pub rel_tol: f64,
}

impl Default for SkSettings {
    fn default() -> Self {
        Self {
            max_iter: 50,
            rel_tol: 1e-6,
        }
    }
}

/// One SK iteration record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SkIterate {
    pub iteration: usize,
    /// Weighted residual norm sqrt(theta^T H theta / 2).
    pub residual: f64,
    /// Max absolute parameter change relative to the parameter norm.
    pub rel_change: f64,
}

#[derive(Debug, Clone)]
pub struct SkResult {
    pub theta: DVector<f64>,
    pub history: Vec<SkIterate>,
    pub converged: bool,
}

/// Per-frequency data snapshot used by the SK loop and the SMLE refinement.
pub struct FreqData {
    /// Scaled frequency variable Omega/w0 per bin.
    pub omega_scaled: Vec<Complex64>,
    /// Frequency scale w0 (geometric band mean of |omega|).
    pub w0: f64,
    pub w_hat: Vec<DVector<Complex64>>,
    pub r: Vec<DVector<Complex64>>,
    /// Lower Cholesky factor of the repaired Cw_hat per bin.
    pub cw_chol: Vec<DMatrix<Complex64>>,
}

impl FreqData {
    pub fn assemble(ds: &SpectralDataset, np: &NonparamEstimate) -> Result<Self, StructError> {
        let f = np.freq_count();
        if ds.freq_count() != f {
            return Err(StructError::DimensionMismatch(
                "dataset and nonparametric estimate bands differ".into(),
            ));
        }
        let w0 = (np.grid.iter().map(|w| w.ln()).sum::<f64>() / f as f64).exp();
        // Floor the per-bin covariance at a small fraction of the median
        // trace across the band. With (near-)noiseless data the estimated
        // residual covariance is numerical-noise scale and varies arbitrarily
        // between bins; inverting it would concentrate all fit weight on a
        // few bins. The floor caps that dynamic range while leaving genuinely
        // noisy data (comparable traces across bins) untouched.
        let l = ds.node_count();
        let mut traces: Vec<f64> = np
            .cw_hat
            .iter()
            .map(|cw| (0..l).map(|i| cw[(i, i)].re).sum::<f64>().max(0.0))
            .collect();
        traces.sort_by(|a, b| a.total_cmp(b));
        let t_med = traces[f / 2];
        let floor = if t_med > 0.0 { 1e-2 * t_med / l as f64 } else { 1.0 };
        let cap = if t_med > 0.0 { 1e2 * t_med } else { f64::INFINITY };
        let mut cw_chol = Vec::with_capacity(f);
        for (k, cw) in np.cw_hat.iter().enumerate() {
            let mut repaired = psd_repair(cw);
            let t_k = (0..l).map(|i| repaired[(i, i)].re).sum::<f64>();
            if t_k > cap {
                repaired *= Complex64::new(cap / t_k, 0.0);
            }
            for i in 0..l {
                repaired[(i, i)] += Complex64::new(floor, 0.0);
            }
            let chol = Cholesky::new(repaired).ok_or(StructError::SingularWeight(k))?;
            cw_chol.push(chol.l());
        }
        Ok(Self {
            omega_scaled: np.grid.iter().map(|&w| Complex64::new(0.0, w / w0)).collect(),
            w0,
            w_hat: np.w_hat.clone(),
            r: (0..f)
                .map(|k| DVector::from_fn(ds.excitation_count(), |i, _| ds.r[i][k]))
                .collect(),
            cw_chol,
        })
    }

    pub fn freq_count(&self) -> usize {
        self.omega_scaled.len()
    }

    /// Diagonal that maps scaled parameters back to physical ones:
    /// `theta = theta_scaled / w0^order`.
    pub fn unscale_diag(&self, layout: &ParamLayout) -> DVector<f64> {
        DVector::from_fn(layout.dim(), |j, _| self.w0.powi(-(layout.order_of(j) as i32)))
    }

    /// Transform physical-domain constraints into the scaled domain.
    pub fn scale_constraints(&self, layout: &ParamLayout, c: &ConstraintSet) -> ConstraintSet {
        let d = self.unscale_diag(layout);
        let mut gamma = c.gamma.clone();
        for j in 0..gamma.ncols() {
            let mut col = gamma.column_mut(j);
            col *= d[j];
        }
        ConstraintSet {
            gamma,
            upsilon: c.upsilon.clone(),
        }
    }
}

/// Accumulate `H = 2 Re(Q^H Q)` over all frequencies for the given previous
/// iterate, in the scaled domain.
fn accumulate_normal(
    layout: &ParamLayout,
    fd: &FreqData,
    a_prev: &PolynomialMatrix,
) -> Result<DMatrix<f64>, StructError> {
    let dim = layout.dim();
    let f = fd.freq_count();
    // chunked parallel map with a deterministic sequential reduction
    let chunk = 256usize.max(f / (8 * rayon::current_num_threads().max(1))).min(f.max(1));
    let ranges: Vec<(usize, usize)> = (0..f).step_by(chunk).map(|s| (s, (s + chunk).min(f))).collect();
    let partials: Result<Vec<DMatrix<f64>>, StructError> = ranges
        .par_iter()
        .map(|&(s, e)| {
            let rows_per = layout.l;
            let mut qs = DMatrix::<Complex64>::zeros(rows_per * (e - s), dim);
            for (local, k) in (s..e).enumerate() {
                let a_eval = a_prev.eval_at(fd.omega_scaled[k]);
                // same as build_weight but reusing the precomputed Cholesky
                let m = &fd.cw_chol[k] * &a_eval;
                let lu = m.lu();
                let u = lu.u();
                let (mut dmax, mut dmin) = (0.0f64, f64::INFINITY);
                for i in 0..u.nrows() {
                    let d = u[(i, i)].norm();
                    dmax = dmax.max(d);
                    dmin = dmin.min(d);
                }
                if dmax == 0.0 || dmin < 1e-13 * dmax {
                    return Err(StructError::SingularWeight(k));
                }
                let w = lu.try_inverse().ok_or(StructError::SingularWeight(k))?;
                let q = build_regressor(layout, &w, &fd.w_hat[k], &fd.r[k], fd.omega_scaled[k]);
                qs.rows_mut(local * rows_per, rows_per).copy_from(&q);
            }
            // real-stacked gemm: 2 Re(Q^H Q) = 2 (ReQ^T ReQ + ImQ^T ImQ)
            let re = qs.map(|z| z.re);
            let im = qs.map(|z| z.im);
            let mut hp = re.transpose() * re;
            hp += im.transpose() * im;
            hp *= 2.0;
            Ok(hp)
        })
        .collect();
    let partials = partials?;
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for p in partials {
        h += p;
    }
    Ok(h)
}

/// Run the SK-iteration: starting from `A = I`, alternately refresh the
/// weighting from the previous iterate and solve the constrained weighted LS
/// problem, until the parameter change stalls.
pub fn sk_identify(
    ds: &SpectralDataset,
    np: &NonparamEstimate,
    layout: &ParamLayout,
    constraints: &ConstraintSet,
    settings: &SkSettings,
) -> Result<SkResult, StructError> {
    let fd = FreqData::assemble(ds, np)?;
    let scaled_con = fd.scale_constraints(layout, constraints);
    let pins = scaled_con.as_pins();

    // A^0 = identity in the scaled domain
    let mut a_prev = PolynomialMatrix::identity(layout.l);
    let mut theta_prev: Option<DVector<f64>> = None;
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut history = Vec::new();
    let mut converged = false;

    for iteration in 0..settings.max_iter {
        let h = accumulate_normal(layout, &fd, &a_prev)?;
        let theta = match &pins {
            Some(p) => pin_eliminate_solve(&h, p)?,
            None => kkt_solve(&h, &scaled_con)?.0,
        };
        let residual = ((&theta.transpose() * &h * &theta)[(0, 0)] / 2.0).max(0.0).sqrt();
        let rel_change = match &theta_prev {
            Some(prev) => (&theta - prev).amax() / theta.amax().max(f64::MIN_POSITIVE),
            None => f64::INFINITY,
        };
        history.push(SkIterate {
            iteration,
            residual,
            rel_change,
        });
        if best.as_ref().map_or(true, |(r, _)| residual < *r) {
            best = Some((residual, theta.clone()));
        }
        let (a, _, _) = layout.unpack(&theta);
        a_prev = a;
        let stop = rel_change < settings.rel_tol;
        theta_prev = Some(theta);
        if stop {
            converged = true;
            break;
        }
    }

    let (_, theta_scaled) = best.ok_or(StructError::NoIterate)?;
    let d = fd.unscale_diag(layout);
    let theta = DVector::from_fn(layout.dim(), |j, _| theta_scaled[j] * d[j]);
    Ok(SkResult {
        theta,
        history,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lpm::{run_lpm, LpmSettings};
    use crate::netmodel::rlc_to_dcn;
    use crate::networks::{ten_node_network, two_node_network};
    use crate::signalgen::{generate_excitation, select_band, synth_frequency_data, ExperimentConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn rand_vec(n: usize, rng: &mut ChaCha12Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn pack_unpack_round_trip() {
        let layout = ParamLayout {
            l: 4,
            k: 2,
            n_a: 2,
            n_b: 1,
            n_c: 1,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let theta = rand_vec(layout.dim(), &mut rng);
        let (a, b, c) = layout.unpack(&theta);
        assert!(a.is_symmetric(0.0));
        let packed = layout.pack(&a, &b, &c).unwrap();
        assert!((&packed - &theta).amax() < 1e-15);
    }

    #[test]
    fn layout_indices_are_a_bijection() {
        let layout = ParamLayout {
            l: 5,
            k: 2,
            n_a: 2,
            n_b: 1,
            n_c: 1,
        };
        let mut hit = vec![false; layout.dim()];
        for i in 0..5 {
            for j in i..5 {
                for ell in 0..=2 {
                    let idx = layout.idx_a(i, j, ell);
                    assert!(!hit[idx]);
                    hit[idx] = true;
                    assert_eq!(idx, layout.idx_a(j, i, ell));
                }
            }
        }
        for i in 0..5 {
            for j in 0..2 {
                for ell in 0..=1 {
                    let idx = layout.idx_b(i, j, ell);
                    assert!(!hit[idx]);
                    hit[idx] = true;
                }
            }
        }
        for j in 0..5 {
            for ell in 0..=1 {
                let idx = layout.idx_c(j, ell);
                assert!(!hit[idx]);
                hit[idx] = true;
            }
        }
        assert!(hit.iter().all(|&h| h));
    }

    #[test]
    fn constraints_pin_excitation_and_topology() {
        let net = ten_node_network();
        let model = rlc_to_dcn(&net).unwrap();
        let layout = ParamLayout::from_model(&model);
        let con = build_constraints(&layout, &model, &[]).unwrap();
        // the true parameter vector is feasible
        let theta0 = layout.pack(&model.a, &model.b, &model.c).unwrap();
        assert!((&con.gamma * &theta0 - &con.upsilon).amax() < 1e-12);
        // b_{3,1,1} = 1 appears among the pinned targets (node 3 is index 2)
        let pins = con.as_pins().unwrap();
        let idx = layout.idx_b(2, 0, 1);
        assert!(pins.iter().any(|&(i, v)| i == idx && v == 1.0));
        // absent edge (1,4): all three coefficients pinned to zero
        for ell in 0..=2 {
            let idx = layout.idx_a(0, 3, ell);
            assert!(pins.iter().any(|&(i, v)| i == idx && v == 0.0));
        }
        // upsilon is not identically zero
        assert!(con.upsilon.amax() > 0.0);
    }

    #[test]
    fn weight_examples() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let l = 3;
        let g = DMatrix::<Complex64>::from_fn(l, l, |_, _| {
            Complex64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
        });
        let cw = &g * g.adjoint() + DMatrix::identity(l, l) * Complex64::new(0.1, 0.0);
        let a_prev = DMatrix::<Complex64>::from_fn(l, l, |i, j| {
            Complex64::new(
                if i == j { 2.0 } else { 0.3 },
                rng.sample::<f64, _>(StandardNormal) * 0.1,
            )
        });
        let w = build_weight(&cw, &a_prev, 0).unwrap();
        // inverse check: W (Cw^{1/2} A_prev) = I
        let chol = Cholesky::new(cw.clone()).unwrap();
        let prod = &w * (chol.l() * &a_prev);
        assert!((&prod - DMatrix::<Complex64>::identity(l, l)).norm() < 1e-9);

        // Cw = I -> W = A_prev^{-1}
        let w2 = build_weight(&DMatrix::identity(l, l), &a_prev, 0).unwrap();
        let inv = a_prev.clone().try_inverse().unwrap();
        assert!((&w2 - &inv).norm() < 1e-9 * inv.norm());

        // A_prev = I -> W = Cw^{-1/2} (i.e. W Cw^{1/2} = I)
        let w3 = build_weight(&cw, &DMatrix::identity(l, l), 0).unwrap();
        let prod3 = &w3 * chol.l();
        assert!((&prod3 - DMatrix::<Complex64>::identity(l, l)).norm() < 1e-9);
    }

    #[test]
    fn regressor_scalar_case_and_annihilation() {
        // L = 1, K = 1: Q(k) = [W W_hat Omega_a, -W R Omega_b, -W Omega_c]
        let layout = ParamLayout {
            l: 1,
            k: 1,
            n_a: 2,
            n_b: 1,
            n_c: 1,
        };
        let weight = DMatrix::from_element(1, 1, Complex64::new(0.5, -0.25));
        let w_hat = DVector::from_element(1, Complex64::new(1.0, 2.0));
        let r_k = DVector::from_element(1, Complex64::new(-0.5, 0.75));
        let omega = Complex64::new(0.0, 1.5);
        let q = build_regressor(&layout, &weight, &w_hat, &r_k, omega);
        let wv = weight[(0, 0)];
        for ell in 0..=2usize {
            assert!((q[(0, layout.idx_a(0, 0, ell))] - wv * w_hat[0] * omega.powu(ell as u32)).norm() < 1e-14);
        }
        for ell in 0..=1usize {
            assert!((q[(0, layout.idx_b(0, 0, ell))] + wv * r_k[0] * omega.powu(ell as u32)).norm() < 1e-14);
            assert!((q[(0, layout.idx_c(0, ell))] + wv * omega.powu(ell as u32)).norm() < 1e-14);
        }

        // Q(k) theta equals W (A W_hat - B R - C) for a random theta
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let theta = rand_vec(layout.dim(), &mut rng);
        let (a, b, c) = layout.unpack(&theta);
        let direct = wv
            * (a.eval_at(omega)[(0, 0)] * w_hat[0]
                - b.eval_at(omega)[(0, 0)] * r_k[0]
                - c.eval_at(omega)[(0, 0)]);
        let via_q = (q * DVector::from_iterator(layout.dim(), theta.iter().map(|&v| Complex64::new(v, 0.0))))[0];
        assert!((direct - via_q).norm() < 1e-12 * direct.norm().max(1.0));
    }

    #[test]
    fn regressor_symmetric_folding_matches_unstructured() {
        // the column of a_{ij} (i<j) equals the sum of the two unstructured
        // columns obtained by perturbing a_ij and a_ji independently
        let net = two_node_network();
        let model = rlc_to_dcn(&net).unwrap();
        let layout = ParamLayout::from_model(&model);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let l = 2;
        let weight = DMatrix::<Complex64>::from_fn(l, l, |_, _| {
            Complex64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
        });
        let w_hat = DVector::<Complex64>::from_fn(l, |_, _| {
            Complex64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
        });
        let r_k = DVector::from_element(1, Complex64::new(0.3, -0.9));
        let omega = Complex64::new(0.0, 2.0);
        let q = build_regressor(&layout, &weight, &w_hat, &r_k, omega);
        for ell in 0..=layout.n_a {
            let col = layout.idx_a(0, 1, ell);
            for r in 0..l {
                // unstructured: d/d a_ij of row r of W A W_hat with A not
                // symmetrized is W_{r i} W_hat_j; folding adds both orders
                let expect = (weight[(r, 0)] * w_hat[1] + weight[(r, 1)] * w_hat[0])
                    * omega.powu(ell as u32);
                assert!((q[(r, col)] - expect).norm() < 1e-13);
            }
        }
    }

    fn random_psd(dim: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
        let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
        &g.transpose() * &g + DMatrix::identity(dim, dim) * 1e-3
    }

    /// Null-space elimination reference: theta = theta_p + N z minimizing
    /// theta^T H theta subject to Gamma theta = upsilon.
    pub(crate) fn nullspace_solve(h: &DMatrix<f64>, con: &ConstraintSet) -> DVector<f64> {
        let gamma = &con.gamma;
        let m = gamma.nrows();
        let dim = gamma.ncols();
        // particular solution via Gamma Gamma^T
        let gg = gamma * gamma.transpose();
        let y = gg.lu().solve(&con.upsilon).unwrap();
        let theta_p = gamma.transpose() * y;
        // null-space basis: eigenvectors of Gamma^T Gamma with zero eigenvalue
        let gtg = gamma.transpose() * gamma;
        let eig = nalgebra::SymmetricEigen::new(gtg);
        let lam_max = eig.eigenvalues.amax();
        let n_basis = dim - m;
        let mut cols: Vec<usize> = (0..dim).collect();
        cols.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
        let mut nmat = DMatrix::<f64>::zeros(dim, n_basis);
        for (b, &c) in cols.iter().take(n_basis).enumerate() {
            assert!(eig.eigenvalues[c].abs() < 1e-10 * lam_max, "Gamma not full rank");
            nmat.column_mut(b).copy_from(&eig.eigenvectors.column(c));
        }
        let hn = h * &nmat;
        let lhs = nmat.transpose() * &hn;
        let rhs = -(nmat.transpose() * (h * &theta_p));
        let z = lhs.lu().solve(&rhs).unwrap();
        theta_p + nmat * z
    }

    #[test]
    fn kkt_matches_nullspace_oracle_and_pin_path() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for trial in 0..10 {
            let dim = 12;
            let h = random_psd(dim, &mut rng);
            // general constraints: random full-rank rows
            let m = 3;
            let gamma = DMatrix::<f64>::from_fn(m, dim, |_, _| rng.sample(StandardNormal));
            let upsilon = rand_vec(m, &mut rng);
            let con = ConstraintSet {
                gamma,
                upsilon,
            };
            let (theta, _) = kkt_solve(&h, &con).unwrap();
            let oracle = nullspace_solve(&h, &con);
            assert!(
                (&theta - &oracle).amax() < 1e-8 * oracle.amax().max(1.0),
                "trial {trial}: KKT vs null-space mismatch"
            );
            assert!((&con.gamma * &theta - &con.upsilon).amax() < 1e-10);
        }
        // pin constraints: elimination path agrees with the KKT solve
        for _ in 0..5 {
            let dim = 15;
            let h = random_psd(dim, &mut rng);
            let pins = vec![(2usize, 1.0f64), (7, -0.5), (11, 0.0)];
            let con = ConstraintSet::from_pins(dim, &pins).unwrap();
            let (theta_kkt, _) = kkt_solve(&h, &con).unwrap();
            let theta_pin = pin_eliminate_solve(&h, &pins).unwrap();
            assert!((&theta_kkt - &theta_pin).amax() < 1e-8 * theta_kkt.amax().max(1.0));
        }
    }

    #[test]
    fn kkt_unit_pin_with_orthonormal_q() {
        // H = 2 I (orthonormal columns), pin coordinate 3 to 1 -> theta = e_3
        let dim = 6;
        let h = DMatrix::<f64>::identity(dim, dim) * 2.0;
        let con = ConstraintSet::from_pins(dim, &[(3, 1.0)]).unwrap();
        let (theta, _) = kkt_solve(&h, &con).unwrap();
        for j in 0..dim {
            let expect = if j == 3 { 1.0 } else { 0.0 };
            assert!((theta[j] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn kkt_invariant_to_constraint_row_scaling() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let dim = 10;
        let h = random_psd(dim, &mut rng);
        let gamma = DMatrix::<f64>::from_fn(2, dim, |_, _| rng.sample(StandardNormal));
        let upsilon = rand_vec(2, &mut rng);
        let con = ConstraintSet {
            gamma: gamma.clone(),
            upsilon: upsilon.clone(),
        };
        let mut gamma2 = gamma;
        let mut ups2 = upsilon;
        for r in 0..2 {
            let s = 10f64.powi(r as i32 * 3 - 2);
            for j in 0..dim {
                gamma2[(r, j)] *= s;
            }
            ups2[r] *= s;
        }
        let con2 = ConstraintSet {
            gamma: gamma2,
            upsilon: ups2,
        };
        let (t1, _) = kkt_solve(&h, &con).unwrap();
        let (t2, _) = kkt_solve(&h, &con2).unwrap();
        assert!((&t1 - &t2).amax() < 1e-8 * t1.amax().max(1.0));
    }

    fn two_node_dataset(sigma_e2: f64, seed: u64) -> (DCNModel, SpectralDataset) {
        let net = two_node_network();
        let model = rlc_to_dcn(&net).unwrap();
        let cfg = ExperimentConfig {
            n_samples: 20_000,
            fs_hz: 20_000.0,
            sigma_r2: 1.0,
            sigma_e2,
            band_hz: (500.0, 4000.0),
            seed,
            transient_scale: 0.0,
        };
        let exc = generate_excitation(&cfg, &net.excitation_nodes).unwrap();
        let full = synth_frequency_data(&model, &cfg, &exc.dft).unwrap();
        (model, select_band(&full, cfg.band_hz).unwrap())
    }

    use crate::netmodel::DCNModel;
    use crate::signalgen::SpectralDataset;

    #[test]
    fn sk_recovers_noiseless_two_node() {
        let (model, ds) = two_node_dataset(0.0, 31);
        let np = run_lpm(&ds, &LpmSettings::auto(2, 1)).unwrap();
        let layout = ParamLayout::from_model(&model);
        let con = build_constraints(&layout, &model, &[]).unwrap();
        let res = sk_identify(&ds, &np, &layout, &con, &SkSettings::default()).unwrap();
        let theta0 = layout.pack(&model.a, &model.b, &model.c).unwrap();
        // compare coefficient-wise on the A part relative to its own scale
        let mut max_rel = 0.0f64;
        for i in 0..2 {
            for j in i..2 {
                for ell in 0..=2 {
                    let idx = layout.idx_a(i, j, ell);
                    let truth = theta0[idx];
                    if truth != 0.0 {
                        max_rel = max_rel.max((res.theta[idx] - truth).abs() / truth.abs());
                    }
                }
            }
        }
        assert!(max_rel < 1e-6, "max relative coefficient error {max_rel}");
        assert!(res.converged);
        // constraints hold
        assert!((&con.gamma * &res.theta - &con.upsilon).amax() < 1e-10);
    }

    #[test]
    fn sk_fully_pinned_converges_immediately() {
        let (model, ds) = two_node_dataset(0.0, 32);
        let np = run_lpm(&ds, &LpmSettings::auto(2, 1)).unwrap();
        let layout = ParamLayout::from_model(&model);
        let theta0 = layout.pack(&model.a, &model.b, &model.c).unwrap();
        let pins: Vec<(usize, f64)> = (0..layout.dim()).map(|j| (j, theta0[j])).collect();
        let con = ConstraintSet::from_pins(layout.dim(), &pins).unwrap();
        let res = sk_identify(&ds, &np, &layout, &con, &SkSettings::default()).unwrap();
        assert!((&res.theta - &theta0).amax() < 1e-12 * theta0.amax());
        assert!(res.history.len() <= 2);
    }
}
