//! Subnetwork identification from partial measurements.
//!
//! When only a target node set `J` and its neighbor set `D` are measured, the
//! unmeasured remainder `I` can be eliminated exactly (Kron reduction /
//! immersion): the measured nodes obey an immersed DCN whose `J` rows are the
//! original rows scaled by `d_II = det(A_II)`. The immersed model is
//! identified up to an unknown scalar from the measured channels, and the
//! original subnetwork parameters are then recovered from the polynomial
//! relations `A_JJ Ahat_JD = Ahat_JJ A_JD` and `A_JJ Bhat_J = Ahat_JJ B_J`
//! via a constrained least-squares problem.
//!
//! All polynomial elimination runs in a scaled frequency variable
//! `p = w0 ptilde`; physical-domain coefficients of high-order immersed
//! polynomials span too many decades to survive relative trimming.

use crate::lpm::{run_lpm, LpmSettings};
use crate::netmodel::{ComponentEstimate, ComponentUnit, DCNModel};
use crate::polymat::{PolyError, Polynomial, PolynomialMatrix};
use crate::signalgen::SpectralDataset;
use crate::smle::{smle_refine, GnSettings, SmleResult};
use crate::structest::{
    kkt_solve, sk_identify, ConstraintSet, ParamLayout, SkResult, SkSettings, StructError,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubnetError {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("immersion block A_II numerically singular")]
    SingularImmersionBlock,
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Struct(#[from] StructError),
    #[error(transparent)]
    Lpm(#[from] crate::lpm::LpmError),
}

/// Node partition for subnetwork identification: target nodes `J`, measured
/// neighbors `D`, immersed (unmeasured) nodes `I`. Measured set `M = J u D`,
/// ordered J first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition {
    pub j: Vec<usize>,
    pub d: Vec<usize>,
    pub i: Vec<usize>,
}

impl Partition {
    pub fn measured(&self) -> Vec<usize> {
        let mut m = self.j.clone();
        m.extend_from_slice(&self.d);
        m
    }

    /// Check disjointness and coverage only; sufficient for Kron reduction,
    /// which is defined for any elimination set.
    pub fn validate_cover(&self, node_count: usize) -> Result<(), SubnetError> {
        let mut seen = vec![0usize; node_count];
        for &n in self.j.iter().chain(&self.d).chain(&self.i) {
            if n >= node_count {
                return Err(SubnetError::InvalidPartition(format!("node {n} out of range")));
            }
            seen[n] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(SubnetError::InvalidPartition(
                "J, D, I must be disjoint and cover all nodes".into(),
            ));
        }
        Ok(())
    }

    /// Check [`Self::validate_cover`] plus the structural conditions needed
    /// for subnetwork identification: J non-empty, no edge between J and I,
    /// and every neighbor of J inside J u D.
    pub fn validate(&self, topology: &[Vec<bool>]) -> Result<(), SubnetError> {
        let l = topology.len();
        self.validate_cover(l)?;
        if self.j.is_empty() {
            return Err(SubnetError::InvalidPartition("J must be non-empty".into()));
        }
        let in_i = |n: usize| self.i.contains(&n);
        let in_m = |n: usize| self.j.contains(&n) || self.d.contains(&n);
        for &jn in &self.j {
            for nb in 0..l {
                if topology[jn][nb] {
                    if in_i(nb) {
                        return Err(SubnetError::InvalidPartition(format!(
                            "edge between target node {jn} and immersed node {nb}"
                        )));
                    }
                    if !in_m(nb) {
                        return Err(SubnetError::InvalidPartition(format!(
                            "neighbor {nb} of target node {jn} is not measured"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Exact immersed (Kron-reduced) model over the measured nodes, expressed in
/// the scaled frequency variable `ptilde = p / omega0`.
#[derive(Debug, Clone)]
pub struct ImmersedModel {
    /// |M| x |M| symmetric, in the scaled variable.
    pub a_im: PolynomialMatrix,
    /// |M| x K, in the scaled variable.
    pub b_im: PolynomialMatrix,
    /// det(A_II) in the scaled variable (before GCD normalization).
    pub d_ii: Polynomial,
    /// Frequency scale: physical `p = omega0 * ptilde`.
    pub omega0: f64,
    pub n_a_im: usize,
    pub n_b_im: usize,
}

/// Natural frequency scale of an RLC-structured A(p): sqrt of the ratio
/// between the largest order-0 and order-2 coefficients.
fn natural_scale(a: &PolynomialMatrix) -> f64 {
    let mut c0 = 0.0f64;
    let mut c2 = 0.0f64;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            c0 = c0.max(a.entry(i, j).coeff(0).abs());
            c2 = c2.max(a.entry(i, j).coeff(2).abs());
        }
    }
    if c0 > 0.0 && c2 > 0.0 {
        (c0 / c2).sqrt()
    } else {
        1.0
    }
}

/// Eliminate the immersed nodes by exact polynomial Gaussian elimination:
/// `A_im = d_II A_MM - A_MI adj(A_II) A_IM`,
/// `B_im = d_II B_M - A_MI adj(A_II) B_I`,
/// followed by division through the global GCD of all entries.
pub fn kron_reduce(model: &DCNModel, part: &Partition) -> Result<ImmersedModel, SubnetError> {
    part.validate_cover(model.topology.len())?;
    let m = part.measured();
    let omega0 = natural_scale(&model.a);
    let a_s = model.a.scale_variable(omega0);
    let b_s = model.b.scale_variable(omega0);
    let all_cols: Vec<usize> = (0..model.excitation_count).collect();

    if part.i.is_empty() {
        let a_im = a_s.select(&m, &m);
        let b_im = b_s.select(&m, &all_cols);
        let n_a_im = a_im.max_order().max(0) as usize;
        let n_b_im = b_im.max_order().max(0) as usize;
        return Ok(ImmersedModel {
            a_im,
            b_im,
            d_ii: Polynomial::one(),
            omega0,
            n_a_im,
            n_b_im,
        });
    }

    let a_ii = a_s.select(&part.i, &part.i);
    let d_ii = a_ii.det()?;
    if d_ii.is_zero() {
        return Err(SubnetError::SingularImmersionBlock);
    }
    let adj = a_ii.adjugate()?;
    let a_mm = a_s.select(&m, &m);
    let a_mi = a_s.select(&m, &part.i);
    let a_im_blk = a_s.select(&part.i, &m);
    let b_m = b_s.select(&m, &all_cols);
    let b_i = b_s.select(&part.i, &all_cols);

    let mut a_red = a_mm.scale_poly(&d_ii).sub(&a_mi.matmul(&adj)?.matmul(&a_im_blk)?)?;
    let mut b_red = b_m.scale_poly(&d_ii).sub(&a_mi.matmul(&adj)?.matmul(&b_i)?)?;

    // global GCD normalization for a minimal representation
    let g = PolynomialMatrix::common_gcd(&[&a_red, &b_red], 1e-8)?;
    if g.degree() > 0 {
        let div = |mat: &PolynomialMatrix| -> Result<PolynomialMatrix, PolyError> {
            let mut out = PolynomialMatrix::zeros(mat.rows(), mat.cols());
            for i in 0..mat.rows() {
                for j in 0..mat.cols() {
                    *out.entry_mut(i, j) = mat.entry(i, j).divide_exact(&g, 1e-8)?;
                }
            }
            Ok(out)
        };
        a_red = div(&a_red)?;
        b_red = div(&b_red)?;
    }

    let n_a_im = a_red.max_order().max(0) as usize;
    let n_b_im = b_red.max_order().max(0) as usize;
    Ok(ImmersedModel {
        a_im: a_red,
        b_im: b_red,
        d_ii,
        omega0,
        n_a_im,
        n_b_im,
    })
}

/// Constraint set for the immersed identification with low (practical)
/// orders.
///
/// Since the target rows carry no coupling to the immersed nodes, the exact
/// immersed J-rows are `d_II * (original row)`. A low-order immersed model
/// can therefore represent the J-rows exactly as `t(p) * (original row)`
/// with `deg t = n_a_im - n_a`, and every J-row coefficient outside
/// `[min_deg(a0_ij), deg(a0_ij) + deg t]` is a structural zero. Pinning
/// those zeros (plus the immersed topology zeros and the B_im zero rows)
/// removes the freedom that would otherwise let the optimizer absorb the
/// D-block truncation error into the J-rows. The scale is fixed by pinning
/// `b_im[excited_row, excitation 0, order 1] = 1`.
pub fn immersed_constraints(
    layout: &ParamLayout,
    template: &ImmersedModel,
    nominal: &DCNModel,
    part: &Partition,
    excited_row: usize,
) -> Result<ConstraintSet, SubnetError> {
    let lm = layout.l;
    let m = part.measured();
    let l_j = part.j.len();
    let slack_a = layout.n_a.saturating_sub(nominal.n_a) as i64;
    let slack_b = layout.n_b.saturating_sub(nominal.n_b) as i64;
    let deg_range = |p: &Polynomial| -> Option<(i64, i64)> {
        if p.is_zero() {
            return None;
        }
        let max = p.degree();
        let min = (0..=max).find(|&ell| p.coeff(ell as usize) != 0.0).unwrap_or(0);
        Some((min, max))
    };
    let mut pins: Vec<(usize, f64)> = Vec::new();
    for i in 0..lm {
        for j in i..lm {
            if i < l_j {
                // J row: degree caps from the original entry
                match deg_range(nominal.a.entry(m[i], m[j])) {
                    None => {
                        for ell in 0..=layout.n_a {
                            pins.push((layout.idx_a(i, j, ell), 0.0));
                        }
                    }
                    Some((lo, hi)) => {
                        for ell in 0..=layout.n_a {
                            if (ell as i64) < lo || (ell as i64) > hi + slack_a {
                                pins.push((layout.idx_a(i, j, ell), 0.0));
                            }
                        }
                    }
                }
            } else if template.a_im.entry(i, j).is_zero() {
                // D block: only the immersed topology zeros
                for ell in 0..=layout.n_a {
                    pins.push((layout.idx_a(i, j, ell), 0.0));
                }
            }
        }
    }
    // J rows of B_im obey the same degree caps as the A rows; the D rows of
    // B_im stay fully free even though the exact immersed B_D is zero: with
    // low orders they absorb the D-block truncation error, which would
    // otherwise leak into the shared (symmetric) J-D entries of A_im.
    for i in 0..l_j {
        for q in 0..layout.k {
            match deg_range(nominal.b.entry(m[i], q)) {
                None => {
                    for ell in 0..=layout.n_b {
                        pins.push((layout.idx_b(i, q, ell), 0.0));
                    }
                }
                Some((lo, hi)) => {
                    for ell in 0..=layout.n_b {
                        if i == excited_row && q == 0 && ell == 1 {
                            continue;
                        }
                        if (ell as i64) < lo || (ell as i64) > hi + slack_b {
                            pins.push((layout.idx_b(i, q, ell), 0.0));
                        }
                    }
                }
            }
        }
    }
    pins.push((layout.idx_b(excited_row, 0, 1), 1.0));
    Ok(ConstraintSet::from_pins(layout.dim(), &pins)?)
}

/// Result of the immersed identification: the estimated parameter vector in
/// physical units (up to the unknown immersion scale fixed by the pin).
#[derive(Debug, Clone)]
pub struct ImmersedEstimate {
    pub layout: ParamLayout,
    pub theta: DVector<f64>,
    pub sk: SkResult,
    pub refine: SmleResult,
}

/// Model orders `(n_a_im, n_b_im, n_c_im)` for the immersed identification.
/// These are a user choice: the exact immersion orders grow with the size of
/// the eliminated block and make the immersed model non-identifiable from the
/// measured channels, so practical (low) orders are used instead.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImmersedOrders {
    pub n_a_im: usize,
    pub n_b_im: usize,
    pub n_c_im: usize,
}

/// Identify the (scaled) immersed DCN from the measured channels:
/// LPM, then the constrained SK-iteration, then SMLE refinement, all with the
/// immersed layout and constraints.
pub fn identify_immersed(
    ds_measured: &SpectralDataset,
    template: &ImmersedModel,
    nominal: &DCNModel,
    part: &Partition,
    excited_row: usize,
    orders: ImmersedOrders,
    sk_settings: &SkSettings,
    gn_settings: &GnSettings,
) -> Result<ImmersedEstimate, SubnetError> {
    let lm = ds_measured.node_count();
    let kx = ds_measured.excitation_count();
    let np = run_lpm(ds_measured, &LpmSettings::auto(lm, kx))?;
    identify_immersed_with_np(
        ds_measured,
        &np,
        template,
        nominal,
        part,
        excited_row,
        orders,
        sk_settings,
        gn_settings,
    )
}

/// [`identify_immersed`] with a caller-provided non-parametric estimate.
#[allow(clippy::too_many_arguments)]
pub fn identify_immersed_with_np(
    ds_measured: &SpectralDataset,
    np: &crate::lpm::NonparamEstimate,
    template: &ImmersedModel,
    nominal: &DCNModel,
    part: &Partition,
    excited_row: usize,
    orders: ImmersedOrders,
    sk_settings: &SkSettings,
    gn_settings: &GnSettings,
) -> Result<ImmersedEstimate, SubnetError> {
    part.validate(&nominal.topology)?;
    let lm = ds_measured.node_count();
    let kx = ds_measured.excitation_count();
    let layout = ParamLayout {
        l: lm,
        k: kx,
        n_a: orders.n_a_im,
        n_b: orders.n_b_im,
        n_c: orders.n_c_im,
    };
    let con = immersed_constraints(&layout, template, nominal, part, excited_row)?;
    let sk = sk_identify(ds_measured, np, &layout, &con, sk_settings)?;
    let pins = con.as_pins().expect("immersed constraints are pins");
    let mut mask = vec![true; layout.dim()];
    for (idx, _) in pins {
        mask[idx] = false;
    }
    let refine = smle_refine(&sk.theta, &mask, ds_measured, np, &layout, gn_settings)?;
    // final polish of the J rows on their own (exactly representable)
    // equation error
    let fd = crate::structest::FreqData::assemble(ds_measured, np)?;
    let d = fd.unscale_diag(&layout);
    let mut theta_scaled = DVector::from_fn(layout.dim(), |j, _| refine.theta[j] / d[j]);
    refine_j_rows(&fd, &layout, part.j.len(), &con, &mut theta_scaled)?;
    let theta = DVector::from_fn(layout.dim(), |j, _| theta_scaled[j] * d[j]);
    Ok(ImmersedEstimate {
        layout,
        theta,
        sk,
        refine,
    })
}

/// Final polish of the immersed estimate restricted to the J-row equations.
///
/// With practical (low) immersed orders, the D rows of the immersed model can
/// only be fitted approximately, and through the symmetry of A_im their
/// truncation error biases the shared J-D parameters. The J rows, however,
/// are exactly representable at low order (they equal `t(p)` times the
/// original rows for a free low-degree scalar `t`), and the subnetwork
/// recovery is invariant to `t`. This pass re-estimates only the J-row
/// parameters by iteratively reweighted LS on the J-row equation error,
/// which removes the D-block bias from exactly the quantities the recovery
/// consumes.
fn refine_j_rows(
    fd: &crate::structest::FreqData,
    layout: &ParamLayout,
    l_j: usize,
    con: &ConstraintSet,
    theta_scaled: &mut DVector<f64>,
) -> Result<(), SubnetError> {
    use nalgebra::Cholesky;
    let l = layout.l;
    let f = fd.freq_count();
    // local coordinate subset: all parameters appearing in the J rows
    let mut subset: Vec<usize> = Vec::new();
    for i in 0..l_j {
        for j in i..l {
            for ell in 0..=layout.n_a {
                subset.push(layout.idx_a(i, j, ell));
            }
        }
        for q in 0..layout.k {
            for ell in 0..=layout.n_b {
                subset.push(layout.idx_b(i, q, ell));
            }
        }
        for ell in 0..=layout.n_c {
            subset.push(layout.idx_c(i, ell));
        }
    }
    let mut local_of = vec![usize::MAX; layout.dim()];
    for (c, &idx) in subset.iter().enumerate() {
        local_of[idx] = c;
    }
    let nloc = subset.len();
    // scaled pins restricted to the subset
    let scaled_con = fd.scale_constraints(layout, con);
    let pins = scaled_con
        .as_pins()
        .ok_or(StructError::RankDeficientConstraints)?;
    let local_pins: Vec<(usize, f64)> = pins
        .into_iter()
        .filter(|&(idx, _)| local_of[idx] != usize::MAX)
        .map(|(idx, v)| (local_of[idx], v))
        .collect();
    let mut gamma = DMatrix::<f64>::zeros(local_pins.len(), nloc);
    let mut upsilon = DVector::<f64>::zeros(local_pins.len());
    for (r, &(c, v)) in local_pins.iter().enumerate() {
        gamma[(r, c)] = 1.0;
        upsilon[r] = v;
    }
    let local_con = ConstraintSet { gamma, upsilon };

    let eval_a_row = |theta: &DVector<f64>, i: usize, j: usize, om: Complex64| -> Complex64 {
        let mut acc = Complex64::default();
        for ell in (0..=layout.n_a).rev() {
            acc = acc * om + Complex64::new(theta[layout.idx_a(i, j, ell)], 0.0);
        }
        acc
    };

    let mut prev_local: Option<DVector<f64>> = None;
    for _iter in 0..10 {
        let mut h = DMatrix::<f64>::zeros(nloc, nloc);
        for k in 0..f {
            let om = fd.omega_scaled[k];
            // residual covariance of the J-row equation error
            let a_j = DMatrix::from_fn(l_j, l, |i, j| eval_a_row(theta_scaled, i, j, om));
            let s = &a_j * &fd.cw_chol[k];
            let ce = &s * s.adjoint();
            let ce = crate::lpm::psd_repair(&ce);
            let chol = Cholesky::new(ce).ok_or(StructError::SingularWeight(k))?;
            // regressor rows, then whiten with the lower factor
            let mut q = DMatrix::<Complex64>::zeros(l_j, nloc);
            let mut pow = Vec::with_capacity(layout.n_a.max(layout.n_b).max(layout.n_c) + 1);
            let mut p = Complex64::new(1.0, 0.0);
            for _ in 0..=layout.n_a.max(layout.n_b).max(layout.n_c) {
                pow.push(p);
                p *= om;
            }
            for i in 0..l_j {
                for j in i..l {
                    for ell in 0..=layout.n_a {
                        let c = local_of[layout.idx_a(i, j, ell)];
                        q[(i, c)] += fd.w_hat[k][j] * pow[ell];
                        if j != i && j < l_j {
                            q[(j, c)] += fd.w_hat[k][i] * pow[ell];
                        }
                    }
                }
                for qx in 0..layout.k {
                    for ell in 0..=layout.n_b {
                        let c = local_of[layout.idx_b(i, qx, ell)];
                        q[(i, c)] -= fd.r[k][qx] * pow[ell];
                    }
                }
                for ell in 0..=layout.n_c {
                    let c = local_of[layout.idx_c(i, ell)];
                    q[(i, c)] -= pow[ell];
                }
            }
            let wq = chol.l().solve_lower_triangular(&q).ok_or(StructError::SingularWeight(k))?;
            let re = wq.map(|z| z.re);
            let imq = wq.map(|z| z.im);
            h += re.transpose() * &re;
            h += imq.transpose() * &imq;
        }
        h *= 2.0;
        // tiny ridge: on exactly representable (noise-free) data the free
        // scalar t(p) leaves a flat direction; recovery is invariant to it
        let ridge = 1e-10 * h.diagonal().mean().max(f64::MIN_POSITIVE);
        for j in 0..nloc {
            h[(j, j)] += ridge;
        }
        let (theta_loc, _) = kkt_solve(&h, &local_con)?;
        for (c, &idx) in subset.iter().enumerate() {
            theta_scaled[idx] = theta_loc[c];
        }
        if let Some(prev) = &prev_local {
            let rel = (&theta_loc - prev).norm() / prev.norm().max(f64::MIN_POSITIVE);
            if rel < 1e-10 {
                break;
            }
        }
        prev_local = Some(theta_loc);
    }
    Ok(())
}

/// Index layout of the subnetwork recovery vector
/// `theta_1 = [theta_Ajj (full L_J^2); theta_Ajd; theta_Bj]`.
#[derive(Debug, Clone, Copy)]
pub struct SubnetLayout {
    pub l_j: usize,
    pub l_d: usize,
    pub k: usize,
    pub n_a: usize,
    pub n_b: usize,
}

impl SubnetLayout {
    pub fn idx_ajj(&self, i: usize, j: usize, ell: usize) -> usize {
        (i * self.l_j + j) * (self.n_a + 1) + ell
    }

    pub fn idx_ajd(&self, i: usize, d: usize, ell: usize) -> usize {
        self.l_j * self.l_j * (self.n_a + 1) + (i * self.l_d + d) * (self.n_a + 1) + ell
    }

    pub fn idx_bj(&self, i: usize, q: usize, ell: usize) -> usize {
        (self.l_j * self.l_j + self.l_j * self.l_d) * (self.n_a + 1)
            + (i * self.k + q) * (self.n_b + 1)
            + ell
    }

    pub fn dim(&self) -> usize {
        (self.l_j * self.l_j + self.l_j * self.l_d) * (self.n_a + 1)
            + self.l_j * self.k * (self.n_b + 1)
    }

    pub fn order_of(&self, idx: usize) -> usize {
        let a_len = (self.l_j * self.l_j + self.l_j * self.l_d) * (self.n_a + 1);
        if idx < a_len {
            idx % (self.n_a + 1)
        } else {
            (idx - a_len) % (self.n_b + 1)
        }
    }
}

/// Evaluation of the immersed estimate blocks at one frequency, taken
/// directly from the theta vector (never through trimmed polynomials).
pub struct ImmersedEval {
    pub a_jj: DMatrix<Complex64>,
    pub a_jd: DMatrix<Complex64>,
    pub b_j: DMatrix<Complex64>,
}

/// Evaluate the J-rows of the immersed estimate at `omega` (in whatever
/// variable `theta` is expressed; pass scaled theta with scaled omega).
pub fn eval_immersed_blocks(
    layout: &ParamLayout,
    theta: &DVector<f64>,
    l_j: usize,
    omega: Complex64,
) -> ImmersedEval {
    let l_d = layout.l - l_j;
    let horner_a = |i: usize, j: usize| -> Complex64 {
        let mut acc = Complex64::default();
        for ell in (0..=layout.n_a).rev() {
            acc = acc * omega + Complex64::new(theta[layout.idx_a(i, j, ell)], 0.0);
        }
        acc
    };
    let horner_b = |i: usize, q: usize| -> Complex64 {
        let mut acc = Complex64::default();
        for ell in (0..=layout.n_b).rev() {
            acc = acc * omega + Complex64::new(theta[layout.idx_b(i, q, ell)], 0.0);
        }
        acc
    };
    ImmersedEval {
        a_jj: DMatrix::from_fn(l_j, l_j, |i, j| horner_a(i, j)),
        a_jd: DMatrix::from_fn(l_j, l_d, |i, d| horner_a(i, l_j + d)),
        b_j: DMatrix::from_fn(l_j, layout.k, |i, q| horner_b(i, q)),
    }
}

/// The subnet recovery regressor at one frequency: rows encode
/// `vec(M_3) = vec(A_JJ Ahat_JD - Ahat_JJ A_JD)` and
/// `vec(M_4) = vec(A_JJ Bhat_J - Ahat_JJ B_J)` so that `Q_1 theta_1`
/// evaluates both residual blocks for any `theta_1`.
pub fn build_q1(layout: &SubnetLayout, eval: &ImmersedEval, omega: Complex64) -> DMatrix<Complex64> {
    let (lj, ld, kx) = (layout.l_j, layout.l_d, layout.k);
    let rows = lj * ld + lj * kx;
    let mut q = DMatrix::<Complex64>::zeros(rows, layout.dim());
    let mut pow_a = Vec::with_capacity(layout.n_a.max(layout.n_b) + 1);
    let mut p = Complex64::new(1.0, 0.0);
    for _ in 0..=layout.n_a.max(layout.n_b) {
        pow_a.push(p);
        p *= omega;
    }
    // M_3 rows, indexed (i, d)
    for i in 0..lj {
        for d in 0..ld {
            let row = i * ld + d;
            for j in 0..lj {
                let base = eval.a_jd[(j, d)];
                for ell in 0..=layout.n_a {
                    q[(row, layout.idx_ajj(i, j, ell))] = base * pow_a[ell];
                }
                let base2 = -eval.a_jj[(i, j)];
                for ell in 0..=layout.n_a {
                    q[(row, layout.idx_ajd(j, d, ell))] += base2 * pow_a[ell];
                }
            }
        }
    }
    // M_4 rows, indexed (i, q)
    for i in 0..lj {
        for qx in 0..kx {
            let row = lj * ld + i * kx + qx;
            for j in 0..lj {
                let base = eval.b_j[(j, qx)];
                for ell in 0..=layout.n_a {
                    q[(row, layout.idx_ajj(i, j, ell))] = base * pow_a[ell];
                }
                let base2 = -eval.a_jj[(i, j)];
                for ell in 0..=layout.n_b {
                    q[(row, layout.idx_bj(j, qx, ell))] += base2 * pow_a[ell];
                }
            }
        }
    }
    q
}

/// Constraints for the subnet recovery, from the original (not immersed)
/// nominal model: symmetry rows `a_ij - a_ji = 0` inside J, structural zeros
/// of the nominal A over the J rows, and all B_J coefficients pinned to their
/// known values (this supplies the nonzero pin fixing the scale).
pub fn subnet_constraints(
    layout: &SubnetLayout,
    nominal: &DCNModel,
    part: &Partition,
) -> Result<ConstraintSet, SubnetError> {
    let dim = layout.dim();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();

    // symmetry of A_JJ
    for i in 0..layout.l_j {
        for j in (i + 1)..layout.l_j {
            for ell in 0..=layout.n_a {
                rows.push(vec![
                    (layout.idx_ajj(i, j, ell), 1.0),
                    (layout.idx_ajj(j, i, ell), -1.0),
                ]);
                rhs.push(0.0);
            }
        }
    }
    // structural zeros from the nominal network
    for (bi, &ni) in part.j.iter().enumerate() {
        for (bj, &nj) in part.j.iter().enumerate() {
            if bj < bi {
                continue; // symmetry rows propagate the zeros
            }
            let entry = nominal.a.entry(ni, nj);
            let absent = ni != nj && !nominal.topology[ni][nj];
            for ell in 0..=layout.n_a {
                if absent || (ni != nj && entry.coeff(ell) == 0.0) {
                    rows.push(vec![(layout.idx_ajj(bi, bj, ell), 1.0)]);
                    rhs.push(0.0);
                }
            }
        }
        for (bd, &nd) in part.d.iter().enumerate() {
            let entry = nominal.a.entry(ni, nd);
            let absent = !nominal.topology[ni][nd];
            for ell in 0..=layout.n_a {
                if absent || entry.coeff(ell) == 0.0 {
                    rows.push(vec![(layout.idx_ajd(bi, bd, ell), 1.0)]);
                    rhs.push(0.0);
                }
            }
        }
        // B_J fully known from the original network
        for q in 0..layout.k {
            for ell in 0..=layout.n_b {
                rows.push(vec![(layout.idx_bj(bi, q, ell), 1.0)]);
                rhs.push(nominal.b.entry(ni, q).coeff(ell));
            }
        }
    }
    if rhs.iter().all(|&v| v == 0.0) {
        return Err(StructError::ZeroUpsilon.into());
    }
    let mut gamma = DMatrix::<f64>::zeros(rows.len(), dim);
    let mut upsilon = DVector::<f64>::zeros(rows.len());
    for (r, (terms, &v)) in rows.iter().zip(rhs.iter()).enumerate() {
        for &(c, coef) in terms {
            gamma[(r, c)] += coef;
        }
        upsilon[r] = v;
    }
    Ok(ConstraintSet { gamma, upsilon })
}

/// Recovered subnetwork parameters in original units.
#[derive(Debug, Clone)]
pub struct SubnetEstimate {
    pub layout: SubnetLayout,
    pub theta1: DVector<f64>,
}

/// Solve the constrained LS problem `min || Q_1 theta_1 ||` s.t.
/// `Gamma_1 theta_1 = upsilon_1` over the identification band.
pub fn recover_subnet(
    im: &ImmersedEstimate,
    l_j: usize,
    grid: &[f64],
    layout1: &SubnetLayout,
    con1: &ConstraintSet,
) -> Result<SubnetEstimate, SubnetError> {
    // work in the scaled variable: geometric band mean
    let f = grid.len();
    let w0 = (grid.iter().map(|w| w.ln()).sum::<f64>() / f as f64).exp();
    // scale the immersed estimate: theta_s = theta * w0^order
    let theta_im_s = DVector::from_fn(im.layout.dim(), |j, _| {
        im.theta[j] * w0.powi(im.layout.order_of(j) as i32)
    });
    let dim = layout1.dim();
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for &w in grid {
        let om = Complex64::new(0.0, w / w0);
        let eval = eval_immersed_blocks(&im.layout, &theta_im_s, l_j, om);
        let q = build_q1(layout1, &eval, om);
        let re = q.map(|z| z.re);
        let imq = q.map(|z| z.im);
        h += re.transpose() * &re;
        h += imq.transpose() * &imq;
    }
    h *= 2.0;
    // scale constraints into the scaled-theta domain
    let mut gamma = con1.gamma.clone();
    for j in 0..dim {
        let s = w0.powi(-(layout1.order_of(j) as i32));
        let mut col = gamma.column_mut(j);
        col *= s;
    }
    let scaled = ConstraintSet {
        gamma,
        upsilon: con1.upsilon.clone(),
    };
    let (theta_s, _) = kkt_solve(&h, &scaled)?;
    let theta1 = DVector::from_fn(dim, |j, _| theta_s[j] * w0.powi(-(layout1.order_of(j) as i32)));
    Ok(SubnetEstimate {
        layout: *layout1,
        theta1,
    })
}

/// Physical component values recoverable from the subnet estimate: all
/// branches incident to a target node, and the grounded triples of the
/// target nodes. Names use the original (1-based) node numbering; ordering
/// matches `dcn_to_components` (coupling R, L, C, then grounded per node).
pub fn subnet_components(
    est: &SubnetEstimate,
    part: &Partition,
    nominal: &DCNModel,
    template: &crate::netmodel::RLCNetwork,
) -> Vec<ComponentEstimate> {
    use crate::netmodel::{coefficient_to_value, default_open_threshold};
    let layout = &est.layout;
    let thresholds = default_open_threshold(nominal, template);
    // coefficient of the recovered A at original nodes (ni, nj); None when
    // the slot is not covered by theta_1
    let j_pos = |n: usize| part.j.iter().position(|&x| x == n);
    let d_pos = |n: usize| part.d.iter().position(|&x| x == n);
    let coeff_at = |ni: usize, nj: usize, ell: usize| -> Option<f64> {
        if let (Some(bi), Some(bj)) = (j_pos(ni), j_pos(nj)) {
            return Some(est.theta1[layout.idx_ajj(bi, bj, ell)]);
        }
        if let (Some(bi), Some(bd)) = (j_pos(ni), d_pos(nj)) {
            return Some(est.theta1[layout.idx_ajd(bi, bd, ell)]);
        }
        if let (Some(bi), Some(bd)) = (j_pos(nj), d_pos(ni)) {
            return Some(est.theta1[layout.idx_ajd(bi, bd, ell)]);
        }
        None
    };
    let touches_j = |e: &crate::netmodel::Edge| j_pos(e.a).is_some() || j_pos(e.b).is_some();

    let mut out = Vec::new();
    let mut idx = 1usize;
    let mut push = |out: &mut Vec<ComponentEstimate>, name: String, unit, coeff: f64, ell: usize| {
        let (value, coefficient) = coefficient_to_value(coeff, unit, thresholds[ell]);
        out.push(ComponentEstimate {
            idx,
            name,
            value,
            unit,
            coefficient,
        });
        idx += 1;
    };

    for e in template.edges.iter().filter(|e| touches_j(e) && e.r_ohm.is_some()) {
        if let Some(c) = coeff_at(e.a, e.b, 1) {
            push(&mut out, format!("R_{}{}", e.a + 1, e.b + 1), ComponentUnit::Ohm, -c, 1);
        }
    }
    for e in template.edges.iter().filter(|e| touches_j(e) && e.l_henry.is_some()) {
        if let Some(c) = coeff_at(e.a, e.b, 0) {
            push(&mut out, format!("L_{}{}", e.a + 1, e.b + 1), ComponentUnit::Henry, -c, 0);
        }
    }
    for e in template.edges.iter().filter(|e| touches_j(e) && e.c_farad.is_some()) {
        if let Some(c) = coeff_at(e.a, e.b, 2) {
            push(&mut out, format!("C_{}{}", e.a + 1, e.b + 1), ComponentUnit::Farad, -c, 2);
        }
    }
    for (bj, &nj) in part.j.iter().enumerate() {
        let g = &template.grounded[nj];
        let mut ground = [
            est.theta1[layout.idx_ajj(bj, bj, 2)],
            est.theta1[layout.idx_ajj(bj, bj, 1)],
            est.theta1[layout.idx_ajj(bj, bj, 0)],
        ];
        for e in template.edges.iter().filter(|e| e.a == nj || e.b == nj) {
            for (slot, ell) in [(0usize, 2usize), (1, 1), (2, 0)] {
                if let Some(c) = coeff_at(e.a, e.b, ell) {
                    ground[slot] += c;
                }
            }
        }
        let entries: [(&Option<f64>, ComponentUnit, &str, f64, usize); 3] = [
            (&g.c_farad, ComponentUnit::Farad, "C", ground[0], 2),
            (&g.r_ohm, ComponentUnit::Ohm, "R", ground[1], 1),
            (&g.l_henry, ComponentUnit::Henry, "L", ground[2], 0),
        ];
        for (present, unit, prefix, coeff, ell) in entries {
            if present.is_some() {
                push(&mut out, format!("{}_{}0", prefix, nj + 1), unit, coeff, ell);
            }
        }
    }
    out
}
