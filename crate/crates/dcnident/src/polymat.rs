//! Real-coefficient polynomials and polynomial matrices in the differential
//! operator `p`, evaluated at complex frequencies.
//!
//! This is the algebra substrate for network models: symbolic determinants,
//! adjugates, approximate GCDs and exact division are what the polynomial
//! Kron reduction is built on.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

/// Relative coefficient trim tolerance applied after symbolic operations.
pub const TOL_TRIM: f64 = 1e-12;

/// Default cutoff for the approximate GCD remainder test.
pub const TOL_GCD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PolyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("polynomial division remainder too large (|r| = {remainder_norm:.3e}, tol = {tol:.3e})")]
    RemainderTooLarge { remainder_norm: f64, tol: f64 },
    #[error("gcd of two zero polynomials is undefined")]
    BothZero,
    #[error("division by the zero polynomial")]
    DivisionByZero,
}

/// A real-coefficient polynomial stored in ascending powers of `p`.
///
/// The zero polynomial has an empty coefficient vector and degree -1.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        let mut p = Self { coeffs };
        p.trim();
        p
    }

    pub fn zero() -> Self {
        Self { coeffs: Vec::new() }
    }

    pub fn one() -> Self {
        Self::constant(1.0)
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![c])
    }

    /// `c * p^ell`.
    pub fn monomial(c: f64, ell: usize) -> Self {
        let mut coeffs = vec![0.0; ell + 1];
        coeffs[ell] = c;
        Self::new(coeffs)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Coefficient of `p^ell`, zero beyond the stored degree.
    pub fn coeff(&self, ell: usize) -> f64 {
        self.coeffs.get(ell).copied().unwrap_or(0.0)
    }

    /// Degree with the convention that the zero polynomial has degree -1.
    pub fn degree(&self) -> i64 {
        self.coeffs.len() as i64 - 1
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Drop trailing coefficients whose magnitude is below
    /// `TOL_TRIM * max |c|`, and squash near-zero interior dust.
    fn trim(&mut self) {
        let max = self.max_abs_coeff();
        if max == 0.0 || !max.is_finite() {
            self.coeffs.clear();
            return;
        }
        let cut = TOL_TRIM * max;
        for c in self.coeffs.iter_mut() {
            if c.abs() <= cut {
                *c = 0.0;
            }
        }
        while matches!(self.coeffs.last(), Some(&c) if c == 0.0) {
            self.coeffs.pop();
        }
    }

    /// Horner evaluation at a complex frequency.
    pub fn eval(&self, omega: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for &c in self.coeffs.iter().rev() {
            acc = acc * omega + c;
        }
        acc
    }

    pub fn add(&self, other: &Self) -> Self {
        let n = self.coeffs.len().max(other.coeffs.len());
        let mut out = vec![0.0; n];
        for (i, v) in out.iter_mut().enumerate() {
            *v = self.coeff(i) + other.coeff(i);
        }
        Self::new(out)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Self {
        Self::new(self.coeffs.iter().map(|c| -c).collect())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.coeffs.iter().map(|c| c * s).collect())
    }

    pub fn mul(&self, other: &Self) -> Self {
        if self.is_zero() || other.is_zero() {
            return Self::zero();
        }
        let mut out = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Self::new(out)
    }

    /// Scale the variable: returns q with q(p) = self(s * p).
    pub fn scale_variable(&self, s: f64) -> Self {
        let mut out = self.coeffs.clone();
        let mut f = 1.0;
        for c in out.iter_mut() {
            *c *= f;
            f *= s;
        }
        Self::new(out)
    }

    /// Normalize so the leading coefficient is 1.
    pub fn monic(&self) -> Self {
        match self.coeffs.last() {
            Some(&lead) => self.scale(1.0 / lead),
            None => Self::zero(),
        }
    }

    /// Polynomial long division, returning `(quotient, remainder)`.
    pub fn div_rem(&self, den: &Self) -> Result<(Self, Self), PolyError> {
        if den.is_zero() {
            return Err(PolyError::DivisionByZero);
        }
        if self.degree() < den.degree() {
            return Ok((Self::zero(), self.clone()));
        }
        let mut rem = self.coeffs.clone();
        let dn = den.coeffs.len();
        let lead = den.coeffs[dn - 1];
        let qn = rem.len() - dn + 1;
        let mut quot = vec![0.0; qn];
        for i in (0..qn).rev() {
            let q = rem[i + dn - 1] / lead;
            quot[i] = q;
            for j in 0..dn {
                rem[i + j] -= q * den.coeffs[j];
            }
        }
        rem.truncate(dn - 1);
        Ok((Self::new(quot), Self::new(rem)))
    }

    /// Quotient of long division, failing when the remainder exceeds
    /// `tol * max |num coeff|`.
    pub fn divide_exact(&self, den: &Self, tol: f64) -> Result<Self, PolyError> {
        let (q, r) = self.div_rem(den)?;
        let bound = tol * self.max_abs_coeff().max(f64::MIN_POSITIVE);
        if r.max_abs_coeff() > bound {
            return Err(PolyError::RemainderTooLarge {
                remainder_norm: r.max_abs_coeff(),
                tol: bound,
            });
        }
        Ok(q)
    }

    /// Monic approximate GCD by the Euclidean remainder sequence.
    ///
    /// A remainder is declared zero when its largest coefficient falls below
    /// `tol` times the largest coefficient of the dividend.
    pub fn gcd(&self, other: &Self, tol: f64) -> Result<Self, PolyError> {
        if self.is_zero() && other.is_zero() {
            return Err(PolyError::BothZero);
        }
        let mut a = self.monic();
        let mut b = other.monic();
        if a.degree() < b.degree() {
            std::mem::swap(&mut a, &mut b);
        }
        while !b.is_zero() {
            let (_, mut r) = a.div_rem(&b)?;
            if r.max_abs_coeff() <= tol * a.max_abs_coeff().max(1.0) {
                r = Self::zero();
            }
            a = b;
            b = r.monic();
        }
        Ok(a.monic())
    }
}

/// A dense matrix of real-coefficient polynomials, row major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Polynomial>,
}

impl PolynomialMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![Polynomial::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            *m.entry_mut(i, i) = Polynomial::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Polynomial) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(f(i, j));
            }
        }
        Self { rows, cols, entries }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entry(&self, i: usize, j: usize) -> &Polynomial {
        &self.entries[i * self.cols + j]
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut Polynomial {
        &mut self.entries[i * self.cols + j]
    }

    pub fn max_order(&self) -> i64 {
        self.entries.iter().map(|p| p.degree()).max().unwrap_or(-1)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self
            .entries
            .iter()
            .fold(0.0_f64, |m, p| m.max(p.max_abs_coeff()))
            .max(1.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let d = self.entry(i, j).sub(self.entry(j, i));
                if d.max_abs_coeff() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// Element-wise Horner evaluation at a complex frequency.
    pub fn eval_at(&self, omega: Complex64) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.entry(i, j).eval(omega))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.entry(j, i).clone())
    }

    pub fn add(&self, other: &Self) -> Result<Self, PolyError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(PolyError::DimensionMismatch(format!(
                "add {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self::from_fn(self.rows, self.cols, |i, j| {
            self.entry(i, j).add(other.entry(i, j))
        }))
    }

    pub fn sub(&self, other: &Self) -> Result<Self, PolyError> {
        self.add(&other.scale_poly(&Polynomial::constant(-1.0)))
    }

    /// Multiply every entry by a scalar polynomial.
    pub fn scale_poly(&self, s: &Polynomial) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self.entry(i, j).mul(s))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, PolyError> {
        if self.cols != other.rows {
            return Err(PolyError::DimensionMismatch(format!(
                "matmul {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self::from_fn(self.rows, other.cols, |i, j| {
            let mut acc = Polynomial::zero();
            for k in 0..self.cols {
                acc = acc.add(&self.entry(i, k).mul(other.entry(k, j)));
            }
            acc
        }))
    }

    /// Submatrix picking `row_idx` x `col_idx` in the given order.
    pub fn select(&self, row_idx: &[usize], col_idx: &[usize]) -> Self {
        Self::from_fn(row_idx.len(), col_idx.len(), |i, j| {
            self.entry(row_idx[i], col_idx[j]).clone()
        })
    }

    /// Scale the variable in every entry: M(s * p).
    pub fn scale_variable(&self, s: f64) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self.entry(i, j).scale_variable(s))
    }

    /// Symbolic determinant.
    ///
    /// Cofactor expansion for sizes up to 3, fraction-free Bareiss elimination
    /// above that to control coefficient growth.
    pub fn det(&self) -> Result<Polynomial, PolyError> {
        if !self.is_square() {
            return Err(PolyError::DimensionMismatch(format!(
                "determinant of {}x{}",
                self.rows, self.cols
            )));
        }
        match self.rows {
            0 => Ok(Polynomial::one()),
            n if n <= 3 => Ok(self.det_cofactor()),
            _ => self.det_bareiss(),
        }
    }

    fn det_cofactor(&self) -> Polynomial {
        match self.rows {
            0 => Polynomial::one(),
            1 => self.entry(0, 0).clone(),
            2 => self
                .entry(0, 0)
                .mul(self.entry(1, 1))
                .sub(&self.entry(0, 1).mul(self.entry(1, 0))),
            _ => {
                let mut acc = Polynomial::zero();
                for j in 0..self.cols {
                    let minor = self.minor(0, j).det_cofactor();
                    let term = self.entry(0, j).mul(&minor);
                    acc = if j % 2 == 0 { acc.add(&term) } else { acc.sub(&term) };
                }
                acc
            }
        }
    }

    fn det_bareiss(&self) -> Result<Polynomial, PolyError> {
        let n = self.rows;
        let mut m: Vec<Vec<Polynomial>> = (0..n)
            .map(|i| (0..n).map(|j| self.entry(i, j).clone()).collect())
            .collect();
        let mut sign = 1.0;
        let mut prev = Polynomial::one();
        for k in 0..n - 1 {
            if m[k][k].is_zero() {
                let swap = (k + 1..n).find(|&i| !m[i][k].is_zero());
                match swap {
                    Some(i) => {
                        m.swap(k, i);
                        sign = -sign;
                    }
                    None => return Ok(Polynomial::zero()),
                }
            }
            for i in k + 1..n {
                for j in k + 1..n {
                    let num = m[k][k].mul(&m[i][j]).sub(&m[i][k].mul(&m[k][j]));
                    m[i][j] = num.divide_exact(&prev, 1e-9)?;
                }
            }
            prev = m[k][k].clone();
            for row in m.iter_mut().skip(k + 1) {
                row[k] = Polynomial::zero();
            }
        }
        Ok(m[n - 1][n - 1].scale(sign))
    }

    fn minor(&self, row: usize, col: usize) -> Self {
        let rows: Vec<usize> = (0..self.rows).filter(|&i| i != row).collect();
        let cols: Vec<usize> = (0..self.cols).filter(|&j| j != col).collect();
        self.select(&rows, &cols)
    }

    /// Adjugate (transposed cofactor matrix): `M * adj(M) = det(M) * I`.
    pub fn adjugate(&self) -> Result<Self, PolyError> {
        if !self.is_square() {
            return Err(PolyError::DimensionMismatch(format!(
                "adjugate of {}x{}",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        if n == 0 {
            return Ok(Self::zeros(0, 0));
        }
        if n == 1 {
            return Ok(Self::from_fn(1, 1, |_, _| Polynomial::one()));
        }
        let mut adj = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                // adj[i][j] is the (j,i) cofactor.
                let d = self.minor(j, i).det()?;
                let sgn = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                *adj.entry_mut(i, j) = d.scale(sgn);
            }
        }
        Ok(adj)
    }

    /// Monic GCD of all nonzero entries across several matrices.
    pub fn common_gcd(mats: &[&PolynomialMatrix], tol: f64) -> Result<Polynomial, PolyError> {
        let mut acc: Option<Polynomial> = None;
        for m in mats {
            for p in &m.entries {
                if p.is_zero() {
                    continue;
                }
                acc = Some(match acc {
                    None => p.monic(),
                    Some(g) => {
                        if g.degree() == 0 {
                            g
                        } else {
                            g.gcd(p, tol)?
                        }
                    }
                });
            }
        }
        Ok(acc.unwrap_or_else(Polynomial::one))
    }
}
