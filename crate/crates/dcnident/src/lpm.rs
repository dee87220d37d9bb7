//! Local polynomial method (LPM): non-parametric estimation of the frequency
//! response, transient, and noise covariance from DFT data.
//!
//! In a sliding window of `2n+1` bins around each frequency, the node spectra
//! are modelled as `W(k+r) = G(k+r) R(k+r) + T(k+r) + V(k+r)` with `G` and `T`
//! low-order polynomials in the offset `r`. A local least-squares fit yields
//! the frequency response `G_hat`, the transient `T_hat`, a residual-based
//! noise covariance `Cv_hat`, and the sample mean `W_hat` with its covariance
//! `Cw_hat` used as the weighting model downstream.

use crate::signalgen::SpectralDataset;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LpmError {
    #[error("window [{lo}, {hi}] does not fit the band of {len} bins")]
    WindowOutOfGrid { lo: i64, hi: i64, len: usize },
    #[error("local design matrix rank deficient at bin {bin} (excitation vanishes over the window)")]
    RankDeficientWindow { bin: usize },
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
}

/// Window settings of the local polynomial fit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LpmSettings {
    /// Local polynomial order in the frequency offset.
    pub tau: usize,
    /// Half-width of the window; the window spans `2n+1` bins.
    pub n: usize,
}

impl LpmSettings {
    /// Smallest window with residual degrees of freedom at least `L + 2`,
    /// so the residual covariance estimate has full rank.
    pub fn auto(node_count: usize, excitation_count: usize) -> Self {
        let tau = 3;
        let m = (tau + 1) * (excitation_count + 1);
        // 2n+1 - m >= L+2
        let needed = m + node_count + 2;
        let n = needed / 2; // 2n+1 >= needed  <=>  n >= (needed-1)/2
        Self { tau, n }
    }

    /// Residual degrees of freedom `q = 2n+1 - (tau+1)(K+1)`.
    pub fn dof(&self, excitation_count: usize) -> i64 {
        (2 * self.n + 1) as i64 - ((self.tau + 1) * (excitation_count + 1)) as i64
    }

    pub fn validate(&self, node_count: usize, excitation_count: usize) -> Result<(), LpmError> {
        let q = self.dof(excitation_count);
        if q < (node_count + 2) as i64 {
            return Err(LpmError::InvalidSettings(format!(
                "dof {q} < L+2 = {} (increase n)",
                node_count + 2
            )));
        }
        Ok(())
    }
}

/// Per-frequency non-parametric estimates over the identification band.
#[derive(Debug, Clone)]
pub struct NonparamEstimate {
    /// Angular frequency grid (copied from the dataset band).
    pub grid: Vec<f64>,
    pub band_indices: Vec<usize>,
    /// L x K frequency response estimate per bin.
    pub g_hat: Vec<DMatrix<Complex64>>,
    /// L x 1 transient estimate per bin.
    pub t_hat: Vec<DVector<Complex64>>,
    /// L x L Hermitian PSD residual noise covariance per bin.
    pub cv_hat: Vec<DMatrix<Complex64>>,
    /// Sample mean W_hat(k) = G_hat R(k) + T_hat per bin.
    pub w_hat: Vec<DVector<Complex64>>,
    /// Sample covariance Cw_hat(k) = rho(k) Cv_hat(k).
    pub cw_hat: Vec<DMatrix<Complex64>>,
    /// Central projector diagonal entry per bin, in (0, 1).
    pub rho: Vec<f64>,
    /// Residual degrees of freedom q = 2n+1 - (tau+1)(K+1).
    pub dof: usize,
}

impl NonparamEstimate {
    pub fn freq_count(&self) -> usize {
        self.grid.len()
    }

    pub fn omega(&self, col: usize) -> Complex64 {
        Complex64::new(0.0, self.grid[col])
    }
}

/// Local window around band column `k`: node data `W_n` (L x 2n+1) and design
/// matrix `Z_n` ((tau+1)(K+1) x 2n+1).
///
/// The column for offset `r` stacks, per power `l = 0..=tau`, the K rows
/// `R(k+r) r^l`, followed by the transient rows `r^l`, matching the parameter
/// layout `Theta = [G, g_1..g_tau, T, t_1..t_tau]`. At band edges the window
/// is shifted (not truncated) and offsets are measured from the target bin.
pub fn local_design(
    ds: &SpectralDataset,
    k: usize,
    s: &LpmSettings,
) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>, usize), LpmError> {
    let f = ds.freq_count();
    let l = ds.node_count();
    let kx = ds.excitation_count();
    let width = 2 * s.n + 1;
    if width > f {
        return Err(LpmError::WindowOutOfGrid {
            lo: k as i64 - s.n as i64,
            hi: k as i64 + s.n as i64,
            len: f,
        });
    }
    // shift the window so it stays inside the band
    let lo = k.saturating_sub(s.n).min(f - width);
    let center_col = k - lo;

    let mut w_n = DMatrix::<Complex64>::zeros(l, width);
    let m = (s.tau + 1) * (kx + 1);
    let mut z_n = DMatrix::<Complex64>::zeros(m, width);
    for c in 0..width {
        let idx = lo + c;
        let r_off = idx as f64 - k as f64;
        for i in 0..l {
            w_n[(i, c)] = ds.w[i][idx];
        }
        let mut pow = 1.0;
        for ell in 0..=s.tau {
            for i in 0..kx {
                z_n[(ell * kx + i, c)] = ds.r[i][idx] * pow;
            }
            z_n[((s.tau + 1) * kx + ell, c)] = Complex64::new(pow, 0.0);
            pow *= r_off;
        }
    }
    Ok((w_n, z_n, center_col))
}

/// Thin QR of `Z_n^H`: `Z_n^H = Q R` with `Q` (2n+1) x m, `R` m x m upper
/// triangular. Errors if the design is numerically rank deficient.
fn design_qr(
    z_n: &DMatrix<Complex64>,
    bin: usize,
) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>), LpmError> {
    let m = z_n.nrows();
    let qr = z_n.adjoint().qr();
    let q = qr.q();
    let r = qr.r();
    let mut dmax = 0.0f64;
    let mut dmin = f64::INFINITY;
    for j in 0..m {
        let d = r[(j, j)].norm();
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    if dmax == 0.0 || dmin < 1e-10 * dmax {
        return Err(LpmError::RankDeficientWindow { bin });
    }
    Ok((q, r))
}

/// Least-squares fit `Theta_hat = W_n Z_n^H (Z_n Z_n^H)^{-1}` via a QR
/// factorization of `Z_n^H`, plus the residual `V_n_hat = W_n - Theta_hat Z_n`.
pub fn lpm_fit(
    w_n: &DMatrix<Complex64>,
    z_n: &DMatrix<Complex64>,
    bin: usize,
) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>), LpmError> {
    let (q, r) = design_qr(z_n, bin)?;
    // Z Z^H = R^H R, so Theta = W Q R^{-H}: solve R Theta^H = (W Q)^H
    let wq = w_n * &q;
    let theta_h = r
        .solve_upper_triangular(&wq.adjoint())
        .ok_or(LpmError::RankDeficientWindow { bin })?;
    let theta = theta_h.adjoint();
    let resid = w_n - &theta * z_n;
    Ok((theta, resid))
}

/// Residual noise covariance `Cv_hat = V_n_hat V_n_hat^H / dof`, symmetrized
/// and eigenvalue-clipped to guard the downstream Cholesky factorization.
pub fn noise_covariance(v_n_hat: &DMatrix<Complex64>, dof: usize) -> DMatrix<Complex64> {
    assert!(dof >= 1, "dof must be >= 1");
    let raw = v_n_hat * v_n_hat.adjoint() / Complex64::new(dof as f64, 0.0);
    psd_repair(&raw)
}

/// Hermitize and clip eigenvalues at `1e-12 * trace`.
pub fn psd_repair(c: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let herm = (c + c.adjoint()) * Complex64::new(0.5, 0.0);
    let trace = herm.diagonal().iter().map(|z| z.re).sum::<f64>().abs();
    let floor = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let eig = nalgebra::SymmetricEigen::new(herm.clone());
    let mut needs_fix = false;
    for &lam in eig.eigenvalues.iter() {
        if lam < floor {
            needs_fix = true;
        }
    }
    if !needs_fix {
        return herm;
    }
    let q = &eig.eigenvectors;
    let mut d = DMatrix::<Complex64>::zeros(herm.nrows(), herm.ncols());
    for i in 0..herm.nrows() {
        d[(i, i)] = Complex64::new(eig.eigenvalues[i].max(floor), 0.0);
    }
    q * d * q.adjoint()
}

/// Sample mean and covariance of the node spectrum at the window center:
/// `W_hat = G_hat R(k) + T_hat`, `Cw_hat = rho Cv_hat` with `rho` the central
/// diagonal entry of the projector `Z^H (Z Z^H)^{-1} Z`.
pub fn sample_mean_cov(
    theta_hat: &DMatrix<Complex64>,
    z_n: &DMatrix<Complex64>,
    cv_hat: &DMatrix<Complex64>,
    r_k: &DVector<Complex64>,
    center_col: usize,
) -> (DVector<Complex64>, DMatrix<Complex64>, f64) {
    let kx = r_k.len();
    let l = theta_hat.nrows();
    let tau = z_n.nrows() / (kx + 1) - 1;
    let g_hat = theta_hat.columns(0, kx).clone_owned();
    let t_hat = theta_hat.column((tau + 1) * kx).clone_owned();
    let w_hat = &g_hat * r_k + DVector::from_iterator(l, t_hat.iter().cloned());

    // projector Z^H (Z Z^H)^{-1} Z = Q Q^H, so rho is the squared norm of
    // the center row of Q
    let (q, _) = design_qr(z_n, 0).expect("sample_mean_cov requires a full-rank design");
    let mut rho = 0.0;
    for j in 0..q.ncols() {
        rho += q[(center_col, j)].norm_sqr();
    }
    let cw = cv_hat * Complex64::new(rho, 0.0);
    (w_hat, cw, rho)
}

/// Slide the local polynomial fit over every band frequency.
pub fn run_lpm(ds: &SpectralDataset, s: &LpmSettings) -> Result<NonparamEstimate, LpmError> {
    let l = ds.node_count();
    let kx = ds.excitation_count();
    s.validate(l, kx)?;
    let dof = s.dof(kx) as usize;
    let tau = s.tau;

    let per_bin: Result<Vec<_>, LpmError> = (0..ds.freq_count())
        .into_par_iter()
        .map(|k| {
            let (w_n, z_n, center) = local_design(ds, k, s)?;
            let (theta, resid) = lpm_fit(&w_n, &z_n, ds.band_indices[k])?;
            let cv = noise_covariance(&resid, dof);
            let r_k = DVector::from_fn(kx, |i, _| ds.r[i][k]);
            let (w_hat, cw, rho) = sample_mean_cov(&theta, &z_n, &cv, &r_k, center);
            let g_hat = theta.columns(0, kx).clone_owned();
            let t_hat = DVector::from_iterator(l, theta.column((tau + 1) * kx).iter().cloned());
            Ok((g_hat, t_hat, cv, w_hat, cw, rho))
        })
        .collect();
    let per_bin = per_bin?;

    let mut est = NonparamEstimate {
        grid: ds.grid.clone(),
        band_indices: ds.band_indices.clone(),
        g_hat: Vec::with_capacity(per_bin.len()),
        t_hat: Vec::with_capacity(per_bin.len()),
        cv_hat: Vec::with_capacity(per_bin.len()),
        w_hat: Vec::with_capacity(per_bin.len()),
        cw_hat: Vec::with_capacity(per_bin.len()),
        rho: Vec::with_capacity(per_bin.len()),
        dof,
    };
    for (g, t, cv, w, cw, rho) in per_bin {
        est.g_hat.push(g);
        est.t_hat.push(t);
        est.cv_hat.push(cv);
        est.w_hat.push(w);
        est.cw_hat.push(cw);
        est.rho.push(rho);
    }
    Ok(est)
}
