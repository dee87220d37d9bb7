//! Seeded excitation/noise synthesis and frequency-domain dataset generation.
//!
//! Data are produced directly in the DFT domain (periodic steady state, no
//! leakage); an optional synthetic transient vector exercises the transient
//! machinery downstream. All randomness flows through counter-based ChaCha
//! streams so Monte-Carlo runs are reproducible regardless of thread count.

use crate::netmodel::DCNModel;
use crate::polymat::{Polynomial, PolynomialMatrix};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("A(Omega) numerically singular at bin {bin} (f = {f_hz} Hz)")]
    SingularFrequency { bin: usize, f_hz: f64 },
    #[error("selected band is empty")]
    EmptyBand,
    #[error("band ({0}, {1}) outside (0, fs/2)")]
    BandOutOfRange(f64, f64),
}

/// Experiment-level signal generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Number of time-domain samples (even).
    pub n_samples: usize,
    /// Sampling frequency in Hz.
    pub fs_hz: f64,
    /// Excitation variance sigma_r^2.
    pub sigma_r2: f64,
    /// Node noise variance sigma_e^2.
    pub sigma_e2: f64,
    /// Identification band (f_min, f_max) in Hz.
    pub band_hz: (f64, f64),
    pub seed: u64,
    /// Scale of the synthetic transient polynomial; 0 disables it.
    #[serde(default)]
    pub transient_scale: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), SignalError> {
        if self.n_samples < 2 || self.n_samples % 2 != 0 {
            return Err(SignalError::InvalidConfig(format!(
                "n_samples must be even and >= 2, got {}",
                self.n_samples
            )));
        }
        if self.sigma_r2 <= 0.0 {
            return Err(SignalError::InvalidConfig("sigma_r2 must be > 0".into()));
        }
        let (fmin, fmax) = self.band_hz;
        if !(0.0 < fmin && fmin < fmax && fmax < self.fs_hz / 2.0) {
            return Err(SignalError::BandOutOfRange(fmin, fmax));
        }
        Ok(())
    }
}

/// DFT-domain records of node signals and excitations on a frequency grid.
///
/// `band_indices[i]` is the DFT bin of column `i`; `grid[i]` its angular
/// frequency. A freshly synthesized dataset covers the full half grid
/// `k = 0..N/2`; `select_band` narrows it.
#[derive(Debug, Clone)]
pub struct SpectralDataset {
    /// Angular frequencies omega_k = 2 pi k fs / N, ascending.
    pub grid: Vec<f64>,
    pub band_indices: Vec<usize>,
    /// K x F excitation DFT samples.
    pub r: Vec<Vec<Complex64>>,
    /// L x F node DFT samples.
    pub w: Vec<Vec<Complex64>>,
    pub n_samples: usize,
    pub fs_hz: f64,
}

impl SpectralDataset {
    pub fn node_count(&self) -> usize {
        self.w.len()
    }

    pub fn excitation_count(&self) -> usize {
        self.r.len()
    }

    pub fn freq_count(&self) -> usize {
        self.band_indices.len()
    }

    /// Complex frequency variable Omega_k = j omega_k of column `col`.
    pub fn omega(&self, col: usize) -> Complex64 {
        Complex64::new(0.0, self.grid[col])
    }

    /// Restrict the dataset to a set of measured nodes (rows of W).
    pub fn restrict_nodes(&self, nodes: &[usize]) -> SpectralDataset {
        SpectralDataset {
            grid: self.grid.clone(),
            band_indices: self.band_indices.clone(),
            r: self.r.clone(),
            w: nodes.iter().map(|&j| self.w[j].clone()).collect(),
            n_samples: self.n_samples,
            fs_hz: self.fs_hz,
        }
    }
}

/// Unitary DFT: `S(k) = (1/sqrt(N)) sum_n s(n) exp(-j 2 pi k n / N)`.
pub fn dft(signal: &[f64]) -> Vec<Complex64> {
    let n = signal.len();
    let mut buf: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / (n as f64).sqrt();
    buf.iter_mut().for_each(|z| *z *= scale);
    buf
}

/// Inverse of [`dft`] for real signals (imaginary parts discarded).
pub fn idft(spectrum: &[Complex64]) -> Vec<f64> {
    let n = spectrum.len();
    let mut buf = spectrum.to_vec();
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / (n as f64).sqrt();
    buf.iter().map(|z| z.re * scale).collect()
}

/// Stream ids carved out of one master seed. One substream per (role, node).
fn stream_rng(seed: u64, role: u64, channel: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(role << 32 | channel);
    rng
}

const STREAM_EXCITATION: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_TRANSIENT: u64 = 3;

/// Time-domain white excitation plus its DFT, one channel per excited node.
pub struct Excitation {
    pub time: Vec<Vec<f64>>,
    pub dft: Vec<Vec<Complex64>>,
}

/// i.i.d. Gaussian excitation sequences, deterministic per (config, seed).
pub fn generate_excitation(cfg: &ExperimentConfig, nodes: &[usize]) -> Result<Excitation, SignalError> {
    cfg.validate()?;
    if nodes.is_empty() {
        return Err(SignalError::InvalidConfig("no excitation nodes".into()));
    }
    let std = cfg.sigma_r2.sqrt();
    let mut time = Vec::with_capacity(nodes.len());
    let mut spectra = Vec::with_capacity(nodes.len());
    for &node in nodes {
        let mut rng = stream_rng(cfg.seed, STREAM_EXCITATION, node as u64);
        let series: Vec<f64> = (0..cfg.n_samples)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        spectra.push(dft(&series));
        time.push(series);
    }
    Ok(Excitation { time, dft: spectra })
}

/// Synthesize the frequency-domain node records of a model on the full half
/// grid `k = 0..=N/2`.
///
/// Per bin: `W(k) = A^{-1}(Omega_k) [B(Omega_k) R(k) + F(Omega_k) E(k) + C_s(Omega_k)]`
/// with circular complex Gaussian `E(k)` of per-bin variance sigma_e^2 and a
/// random transient polynomial vector `C_s` scaled by `transient_scale`.
pub fn synth_frequency_data(
    model: &DCNModel,
    cfg: &ExperimentConfig,
    r_dft: &[Vec<Complex64>],
) -> Result<SpectralDataset, SignalError> {
    cfg.validate()?;
    let l = model.node_count;
    let n = cfg.n_samples;
    let half = n / 2;
    let k_count = half + 1;

    // noise spectra per node, conjugate-symmetric convention: bins 1..N/2-1
    // circular complex, bins 0 and N/2 real
    let sigma_e = cfg.sigma_e2.sqrt();
    let mut noise: Vec<Vec<Complex64>> = Vec::with_capacity(l);
    for node in 0..l {
        let mut rng = stream_rng(cfg.seed, STREAM_NOISE, node as u64);
        let mut col = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let z = if k == 0 || k == half {
                Complex64::new(sigma_e * rng.sample::<f64, _>(StandardNormal), 0.0)
            } else {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re, im) * (sigma_e / 2f64.sqrt())
            };
            col.push(z);
        }
        noise.push(col);
    }

    // synthetic transient polynomial vector
    let c_synth = if cfg.transient_scale > 0.0 {
        let mut rng = stream_rng(cfg.seed, STREAM_TRANSIENT, 0);
        let mut m = PolynomialMatrix::zeros(l, 1);
        for j in 0..l {
            let coeffs: Vec<f64> = (0..=model.n_c)
                .map(|_| cfg.transient_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            *m.entry_mut(j, 0) = Polynomial::new(coeffs);
        }
        Some(m)
    } else {
        None
    };

    let mut w: Vec<Vec<Complex64>> = vec![vec![Complex64::default(); k_count]; l];
    let mut grid = Vec::with_capacity(k_count);
    let mut r_cols: Vec<Vec<Complex64>> = vec![vec![Complex64::default(); k_count]; r_dft.len()];

    for k in 0..k_count {
        let omega_k = 2.0 * std::f64::consts::PI * (k as f64) * cfg.fs_hz / (n as f64);
        grid.push(omega_k);
        let omega = Complex64::new(0.0, omega_k);
        let a = model.a.eval_at(omega);
        let b = model.b.eval_at(omega);
        let f = model.f.eval_at(omega);

        let r_k = nalgebra::DVector::from_fn(r_dft.len(), |i, _| r_dft[i][k]);
        let e_k = nalgebra::DVector::from_fn(l, |i, _| noise[i][k]);
        let mut rhs = &b * &r_k + &f * &e_k;
        if let Some(cs) = &c_synth {
            let c_eval = cs.eval_at(omega);
            for i in 0..l {
                rhs[i] += c_eval[(i, 0)];
            }
        }
        let lu = a.clone().lu();
        let w_k = lu.solve(&rhs).ok_or(SignalError::SingularFrequency {
            bin: k,
            f_hz: omega_k / (2.0 * std::f64::consts::PI),
        })?;
        // cheap conditioning probe via the LU diagonal
        let (diag_max, diag_min) = lu_diag_extremes(lu.u());
        if diag_min < diag_max * 1e-12 {
            return Err(SignalError::SingularFrequency {
                bin: k,
                f_hz: omega_k / (2.0 * std::f64::consts::PI),
            });
        }
        for i in 0..l {
            // the Nyquist bin is its own conjugate pair: project it to the
            // real axis so the half grid describes a real time signal
            w[i][k] = if k == half {
                Complex64::new(w_k[i].re, 0.0)
            } else {
                w_k[i]
            };
        }
        for (i, col) in r_cols.iter_mut().enumerate() {
            col[k] = r_dft[i][k];
        }
    }

    Ok(SpectralDataset {
        grid,
        band_indices: (0..k_count).collect(),
        r: r_cols,
        w,
        n_samples: n,
        fs_hz: cfg.fs_hz,
    })
}

fn lu_diag_extremes(u: nalgebra::DMatrix<Complex64>) -> (f64, f64) {
    let n = u.nrows().min(u.ncols());
    let mut max = 0.0f64;
    let mut min = f64::INFINITY;
    for i in 0..n {
        let v = u[(i, i)].norm();
        max = max.max(v);
        min = min.min(v);
    }
    (max, min)
}

/// Keep only bins with `f_min <= k fs / N <= f_max`.
pub fn select_band(ds: &SpectralDataset, band_hz: (f64, f64)) -> Result<SpectralDataset, SignalError> {
    let (fmin, fmax) = band_hz;
    if !(0.0 < fmin && fmin < fmax && fmax < ds.fs_hz / 2.0 + 1e-9) {
        return Err(SignalError::BandOutOfRange(fmin, fmax));
    }
    let tol = 1e-9 * ds.fs_hz;
    let keep: Vec<usize> = (0..ds.freq_count())
        .filter(|&col| {
            let f = ds.grid[col] / (2.0 * std::f64::consts::PI);
            fmin - tol <= f && f <= fmax + tol
        })
        .collect();
    if keep.is_empty() {
        return Err(SignalError::EmptyBand);
    }
    Ok(SpectralDataset {
        grid: keep.iter().map(|&c| ds.grid[c]).collect(),
        band_indices: keep.iter().map(|&c| ds.band_indices[c]).collect(),
        r: ds.r.iter().map(|row| keep.iter().map(|&c| row[c]).collect()).collect(),
        w: ds.w.iter().map(|row| keep.iter().map(|&c| row[c]).collect()).collect(),
        n_samples: ds.n_samples,
        fs_hz: ds.fs_hz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::rlc_to_dcn;
    use crate::networks::{single_node_network, two_node_network};
    use approx::assert_relative_eq;

    fn small_cfg(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            n_samples: 2048,
            fs_hz: 20_000.0,
            sigma_r2: 1.0,
            sigma_e2: 0.0,
            band_hz: (500.0, 4000.0),
            seed,
            transient_scale: 0.0,
        }
    }

    #[test]
    fn dft_of_constant() {
        let n = 64;
        let s = vec![3.0; n];
        let spec = dft(&s);
        assert_relative_eq!(spec[0].re, 3.0 * (n as f64).sqrt(), max_relative = 1e-10);
        for k in 1..n {
            assert!(spec[k].norm() < 1e-10);
        }
    }

    #[test]
    fn dft_of_impulse() {
        let n = 32;
        let mut s = vec![0.0; n];
        s[0] = 1.0;
        let spec = dft(&s);
        for z in &spec {
            assert_relative_eq!(z.re, 1.0 / (n as f64).sqrt(), max_relative = 1e-10);
            assert!(z.im.abs() < 1e-12);
        }
    }

    #[test]
    fn parseval_and_round_trip() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = dft(&s);
        let e_time: f64 = s.iter().map(|x| x * x).sum();
        let e_freq: f64 = spec.iter().map(|z| z.norm_sqr()).sum();
        assert_relative_eq!(e_time, e_freq, max_relative = 1e-10);
        let back = idft(&spec);
        for (a, b) in s.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn excitation_statistics_and_determinism() {
        let mut cfg = small_cfg(42);
        cfg.n_samples = 20_000;
        let exc = generate_excitation(&cfg, &[0, 1]).unwrap();
        let n = cfg.n_samples as f64;
        for series in &exc.time {
            let var: f64 = series.iter().map(|x| x * x).sum::<f64>() / n;
            assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt() * 1.5, "var = {var}");
        }
        // same seed -> identical series
        let exc2 = generate_excitation(&cfg, &[0, 1]).unwrap();
        assert_eq!(exc.time, exc2.time);
        // distinct node streams are uncorrelated
        let dot: f64 = exc.time[0].iter().zip(&exc.time[1]).map(|(a, b)| a * b).sum::<f64>() / n;
        assert!(dot.abs() < 4.0 / n.sqrt(), "cross-correlation {dot}");
    }

    #[test]
    fn noiseless_identity_network_passes_through() {
        let cfg = small_cfg(7);
        // 1-node model A = [[1]], B = [[1]]
        let model = DCNModel {
            a: PolynomialMatrix::identity(1),
            b: PolynomialMatrix::identity(1),
            c: PolynomialMatrix::zeros(1, 1),
            f: PolynomialMatrix::identity(1),
            topology: vec![vec![false]],
            node_count: 1,
            excitation_count: 1,
            n_a: 0,
            n_b: 0,
            n_c: 0,
        };
        let exc = generate_excitation(&cfg, &[0]).unwrap();
        let ds = synth_frequency_data(&model, &cfg, &exc.dft).unwrap();
        for k in 0..ds.freq_count() {
            assert!((ds.w[0][k] - ds.r[0][k]).norm() < 1e-12);
        }
    }

    #[test]
    fn noiseless_data_satisfies_model_equation() {
        let model = rlc_to_dcn(&two_node_network()).unwrap();
        let cfg = small_cfg(11);
        let exc = generate_excitation(&cfg, &[0]).unwrap();
        let full = synth_frequency_data(&model, &cfg, &exc.dft).unwrap();
        let ds = select_band(&full, cfg.band_hz).unwrap();
        for col in 0..ds.freq_count() {
            let omega = ds.omega(col);
            let a = model.a.eval_at(omega);
            let b = model.b.eval_at(omega);
            let w = nalgebra::DVector::from_fn(2, |i, _| ds.w[i][col]);
            let r = nalgebra::DVector::from_fn(1, |i, _| ds.r[i][col]);
            let resid = &a * &w - &b * &r;
            let scale = (&b * &r).norm().max(1e-12);
            assert!(resid.norm() < 1e-9 * scale, "residual at col {col}");
        }
    }

    #[test]
    fn conjugate_symmetry_of_time_domain_signal() {
        // the half-grid data must correspond to a real signal: check the
        // reconstructed time series of node 0 is real by building the full
        // spectrum with W(N-k) = conj(W(k))
        let model = rlc_to_dcn(&single_node_network()).unwrap();
        let mut cfg = small_cfg(5);
        cfg.sigma_e2 = 0.5;
        let exc = generate_excitation(&cfg, &[0]).unwrap();
        let ds = synth_frequency_data(&model, &cfg, &exc.dft).unwrap();
        let n = cfg.n_samples;
        let mut full = vec![Complex64::default(); n];
        for k in 0..=n / 2 {
            full[k] = ds.w[0][k];
            if k != 0 && k != n / 2 {
                full[n - k] = ds.w[0][k].conj();
            }
        }
        let mut buf = full.clone();
        FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
        let max_im = buf.iter().map(|z| z.im.abs()).fold(0.0f64, f64::max);
        let max_re = buf.iter().map(|z| z.re.abs()).fold(0.0f64, f64::max);
        assert!(max_im < 1e-9 * max_re.max(1.0));
    }

    #[test]
    fn band_selection_indices() {
        let model = rlc_to_dcn(&single_node_network()).unwrap();
        let mut cfg = small_cfg(1);
        cfg.n_samples = 20_000;
        let exc = generate_excitation(&cfg, &[0]).unwrap();
        let full = synth_frequency_data(&model, &cfg, &exc.dft).unwrap();
        let ds = select_band(&full, (500.0, 4000.0)).unwrap();
        // fs = 20 kHz, N = 20000 -> bin spacing 1 Hz -> indices 500..=4000
        assert_eq!(ds.band_indices[0], 500);
        assert_eq!(*ds.band_indices.last().unwrap(), 4000);
        assert_eq!(ds.freq_count(), 3501);

        // full-band selection is the identity on the interior grid
        let all = select_band(&full, (1.0, 9999.0)).unwrap();
        assert_eq!(all.freq_count(), 9999);

        assert!(select_band(&full, (12_000.0, 15_000.0)).is_err());
    }

    #[test]
    fn determinism_across_identical_configs() {
        let model = rlc_to_dcn(&two_node_network()).unwrap();
        let mut cfg = small_cfg(99);
        cfg.sigma_e2 = 2.0;
        cfg.transient_scale = 0.1;
        let exc = generate_excitation(&cfg, &[0]).unwrap();
        let a = synth_frequency_data(&model, &cfg, &exc.dft).unwrap();
        let b = synth_frequency_data(&model, &cfg, &exc.dft).unwrap();
        assert_eq!(a.w, b.w);
        assert_eq!(a.r, b.r);
    }

    #[test]
    fn noise_covariance_matches_model() {
        // empirical covariance of V = W - G R at a fixed bin across seeds vs
        // H sigma_e^2 H^H with H = A^{-1}
        let model = rlc_to_dcn(&two_node_network()).unwrap();
        let bin = 900;
        let runs = 200;
        let mut acc = nalgebra::DMatrix::<Complex64>::zeros(2, 2);
        let mut omega = Complex64::default();
        for seed in 0..runs {
            let mut cfg = small_cfg(seed);
            cfg.sigma_e2 = 1.0;
            let exc = generate_excitation(&cfg, &[0]).unwrap();
            let ds = synth_frequency_data(&model, &cfg, &exc.dft).unwrap();
            omega = ds.omega(bin);
            let g = model.frf(omega).unwrap();
            let w = nalgebra::DVector::from_fn(2, |i, _| ds.w[i][bin]);
            let r = nalgebra::DVector::from_fn(1, |i, _| ds.r[i][bin]);
            let v = &w - &g * &r;
            acc += &v * v.adjoint();
        }
        acc /= Complex64::new(runs as f64, 0.0);
        let h = model.a.eval_at(omega).try_inverse().unwrap();
        let truth = &h * h.adjoint(); // sigma_e^2 = 1
        let err = (&acc - &truth).norm() / truth.norm();
        assert!(err < 0.15, "relative covariance error {err}");
    }
}
