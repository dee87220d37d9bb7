//! Monte-Carlo experiment orchestration: config ingestion, sweeps over data
//! lengths, metric computation (RMSE, RPE), fault reports against nominal
//! component values, and CSV/JSON/SVG export.
//!
//! A job is described by a single JSON [`RunConfig`]. Each Monte-Carlo run
//! synthesizes a fresh dataset with a seed derived deterministically from the
//! master seed, runs the full-network or subnetwork identification pipeline,
//! and converts the estimate to component values. Runs execute concurrently;
//! aggregation is ordered by run index, so results are independent of
//! scheduling.

use crate::lpm::{run_lpm, LpmSettings};
use crate::netmodel::{
    dcn_to_components, default_open_threshold, rlc_to_dcn, ComponentEstimate, ComponentUnit,
    DCNModel, ModelError, RLCNetwork,
};
use crate::signalgen::{
    generate_excitation, select_band, synth_frequency_data, ExperimentConfig, SignalError,
    SpectralDataset,
};
use crate::smle::{smle_refine, GnSettings};
use crate::structest::{build_constraints, sk_identify, ParamLayout, SkSettings};
use crate::subnet::{
    identify_immersed, kron_reduce, recover_subnet, subnet_components, subnet_constraints,
    ImmersedOrders, Partition, SubnetLayout,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("all {0} runs failed; first error: {1}")]
    AllRunsFailed(usize, String),
    #[error("zero true-coefficient norm in RMSE")]
    ZeroTrueNorm,
    #[error("metric vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Which identification pipeline a job exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Full,
    Subnet,
}

/// Full-network polynomial orders; the RLC structure fixes them to (2, 1, 1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelOrders {
    pub n_a: usize,
    pub n_b: usize,
    pub n_c: usize,
}

fn default_rpe_threshold() -> f64 {
    10.0
}

/// One experiment job: the network to synthesize data from, the nominal
/// (healthy) network providing the identification template and the expected
/// component values, pipeline settings, and the Monte-Carlo plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// The network the data is synthesized from (may contain defects).
    pub network: RLCNetwork,
    /// Healthy reference network; identification template and fault-report
    /// nominal. Defaults to `network`.
    #[serde(default)]
    pub nominal_network: Option<RLCNetwork>,
    pub experiment: ExperimentConfig,
    /// Local polynomial method settings; `None` selects the automatic window.
    #[serde(default)]
    pub lpm: Option<LpmSettings>,
    #[serde(default)]
    pub sk: SkSettings,
    #[serde(default)]
    pub gn: GnSettings,
    /// Full-model orders; `None` derives (2, 1, 1) from the RLC structure.
    #[serde(default)]
    pub orders: Option<ModelOrders>,
    /// Immersed-model orders; required in subnet mode.
    #[serde(default)]
    pub immersed_orders: Option<ImmersedOrders>,
    pub mode: RunMode,
    #[serde(default)]
    pub partition: Option<Partition>,
    pub mc_runs: usize,
    pub master_seed: u64,
    /// Data lengths for a consistency sweep; empty means a single sweep at
    /// `experiment.n_samples`.
    #[serde(default)]
    pub sweep_lengths: Vec<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// |RPE| above this percentage marks a component as drifted.
    #[serde(default = "default_rpe_threshold")]
    pub rpe_threshold_percent: f64,
    /// Worker threads for the Monte-Carlo loop; `None` uses all cores.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.mc_runs == 0 {
            return bad("mc_runs must be at least 1".into());
        }
        self.network.validate()?;
        if let Some(nom) = &self.nominal_network {
            nom.validate()?;
            if nom.node_count != self.network.node_count {
                return bad("nominal_network node count differs from network".into());
            }
        }
        self.experiment.validate()?;
        for &n in &self.sweep_lengths {
            if n < 2 || n % 2 != 0 {
                return bad(format!("sweep length {n} must be even and >= 2"));
            }
        }
        if self.mode == RunMode::Subnet {
            let part = match &self.partition {
                Some(p) => p,
                None => return bad("subnet mode requires a partition".into()),
            };
            if self.immersed_orders.is_none() {
                return bad("subnet mode requires immersed_orders".into());
            }
            let measured = part.measured();
            for &x in &self.network.excitation_nodes {
                if !measured.contains(&x) {
                    return bad(format!("excitation node {x} is not measured by the partition"));
                }
            }
        }
        Ok(())
    }

    fn nominal(&self) -> &RLCNetwork {
        self.nominal_network.as_ref().unwrap_or(&self.network)
    }

    fn lengths(&self) -> Vec<usize> {
        if self.sweep_lengths.is_empty() {
            vec![self.experiment.n_samples]
        } else {
            self.sweep_lengths.clone()
        }
    }
}

/// Relative mean squared error in coefficient space:
/// `||theta_hat - theta_0||^2 / ||theta_0||^2`.
pub fn rmse(theta_hat: &[f64], theta_true: &[f64]) -> Result<f64, ExperimentError> {
    if theta_hat.len() != theta_true.len() {
        return Err(ExperimentError::LengthMismatch(theta_hat.len(), theta_true.len()));
    }
    let denom: f64 = theta_true.iter().map(|t| t * t).sum();
    if denom <= 0.0 {
        return Err(ExperimentError::ZeroTrueNorm);
    }
    let num: f64 = theta_hat
        .iter()
        .zip(theta_true)
        .map(|(h, t)| (h - t) * (h - t))
        .sum();
    Ok(num / denom)
}

/// Relative parameter error in percent: `100 (v_hat - v_0) / v_0`.
pub fn rpe(value_hat: f64, value_true: f64) -> f64 {
    100.0 * (value_hat - value_true) / value_true
}

/// Structural sanity checks recorded for every successful run.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RunInvariants {
    /// Max coefficient asymmetry |a_ij - a_ji| of the estimated A.
    pub symmetry_max: f64,
    /// Max |coefficient| on entries the topology declares absent.
    pub topology_zero_max: f64,
    /// Constraint residual ||Gamma theta_hat - upsilon||_inf.
    pub constraint_residual: f64,
    /// Whether the SMLE accepted-cost sequence is non-increasing.
    pub cost_nonincreasing: bool,
}

/// One Monte-Carlo run: the derived seed, the data length, the component
/// estimates (empty when the run failed), and the coefficient-space RMSE.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub run: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub converged: bool,
    pub rmse: f64,
    pub estimates: Vec<ComponentEstimate>,
    pub invariants: Option<RunInvariants>,
    pub error: Option<String>,
}

/// RMSE distribution statistics at one data length, over converged runs.
#[derive(Debug, Clone, Serialize)]
pub struct SweepStats {
    pub n_samples: usize,
    pub runs: usize,
    pub converged: usize,
    pub rmse_mean: f64,
    pub rmse_median: f64,
    pub rmse_q1: f64,
    pub rmse_q3: f64,
    pub rmse_min: f64,
    pub rmse_max: f64,
}

/// Per-component aggregate over all converged runs. The mean is taken in
/// coefficient space (where an open circuit is an honest 0), and
/// `value_from_mean` is the raw conversion of the mean coefficient, without
/// the open threshold — for an open resistor this is the large recovered
/// resistance itself.
#[derive(Debug, Clone, Serialize)]
pub struct ComponentAggregate {
    pub idx: usize,
    pub name: String,
    pub unit: ComponentUnit,
    pub truth_coefficient: f64,
    pub mean_coefficient: f64,
    pub std_coefficient: f64,
    pub value_from_mean: Option<f64>,
    /// Mean RPE vs the true value, over runs; `None` when the truth is open.
    pub mean_rpe_percent: Option<f64>,
}

/// Outcome of a Monte-Carlo job.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub records: Vec<RunRecord>,
    pub sweeps: Vec<SweepStats>,
    pub components: Vec<ComponentAggregate>,
    /// True component values on the nominal template slots.
    pub truth: Vec<ComponentEstimate>,
    pub non_converged: usize,
    pub failed: usize,
    pub wall_clock_secs: f64,
}

/// Health verdict of one component against its nominal value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Healthy,
    Drifted,
    Open,
}

#[derive(Debug, Clone, Serialize)]
pub struct FaultEntry {
    pub name: String,
    pub unit: ComponentUnit,
    pub estimate_coefficient: f64,
    pub nominal_coefficient: f64,
    pub rpe_percent: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize)]
pub struct FaultReport {
    pub rpe_threshold_percent: f64,
    pub entries: Vec<FaultEntry>,
}

impl FaultReport {
    /// Names of all components not judged healthy.
    pub fn flagged(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.verdict != Verdict::Healthy)
            .map(|e| e.name.clone())
            .collect()
    }
}

/// Compare component estimates with the nominal (healthy) values: a
/// component is `open` when its recovered coefficient was thresholded to 0,
/// `drifted` when its |RPE| versus nominal exceeds the threshold, otherwise
/// `healthy`. Pure function of its inputs.
pub fn fault_report(
    estimates: &[ComponentEstimate],
    nominal: &[ComponentEstimate],
    rpe_threshold_percent: f64,
) -> FaultReport {
    let entries = estimates
        .iter()
        .filter_map(|e| {
            let n = nominal.iter().find(|n| n.name == e.name)?;
            if !n.value.is_finite() {
                return None; // slot absent in the healthy network
            }
            let open = e.coefficient == 0.0 || !e.value.is_finite();
            let rpe_percent = if open { None } else { Some(rpe(e.value, n.value)) };
            let verdict = if open {
                Verdict::Open
            } else if rpe_percent.unwrap().abs() > rpe_threshold_percent {
                Verdict::Drifted
            } else {
                Verdict::Healthy
            };
            Some(FaultEntry {
                name: e.name.clone(),
                unit: e.unit,
                estimate_coefficient: e.coefficient,
                nominal_coefficient: n.coefficient,
                rpe_percent,
                verdict,
            })
        })
        .collect();
    FaultReport {
        rpe_threshold_percent,
        entries,
    }
}

struct Pipeline {
    model_true: DCNModel,
    nominal_model: DCNModel,
    truth: Vec<ComponentEstimate>,
}

impl Pipeline {
    fn new(cfg: &RunConfig) -> Result<Self, ExperimentError> {
        let model_true = rlc_to_dcn(&cfg.network)?;
        let nominal_model = rlc_to_dcn(cfg.nominal())?;
        let thr = default_open_threshold(&nominal_model, cfg.nominal());
        let truth = dcn_to_components(&model_true, cfg.nominal(), &thr)?;
        Ok(Self {
            model_true,
            nominal_model,
            truth,
        })
    }

    fn synthesize(&self, cfg: &RunConfig, n: usize, seed: u64) -> Result<SpectralDataset, String> {
        let mut ec = cfg.experiment.clone();
        ec.n_samples = n;
        ec.seed = seed;
        let exc = generate_excitation(&ec, &cfg.network.excitation_nodes).map_err(|e| e.to_string())?;
        let full = synth_frequency_data(&self.model_true, &ec, &exc.dft).map_err(|e| e.to_string())?;
        select_band(&full, ec.band_hz).map_err(|e| e.to_string())
    }

    fn run_once_full(
        &self,
        cfg: &RunConfig,
        n: usize,
        seed: u64,
    ) -> Result<(Vec<ComponentEstimate>, bool, RunInvariants), String> {
        let ds = self.synthesize(cfg, n, seed)?;
        let lpm = cfg
            .lpm
            .unwrap_or_else(|| LpmSettings::auto(ds.node_count(), ds.excitation_count()));
        let np = run_lpm(&ds, &lpm).map_err(|e| e.to_string())?;
        let layout = match cfg.orders {
            Some(o) => ParamLayout {
                l: self.nominal_model.node_count,
                k: self.nominal_model.excitation_count,
                n_a: o.n_a,
                n_b: o.n_b,
                n_c: o.n_c,
            },
            None => ParamLayout::from_model(&self.nominal_model),
        };
        let con =
            build_constraints(&layout, &self.nominal_model, &[]).map_err(|e| e.to_string())?;
        let sk = sk_identify(&ds, &np, &layout, &con, &cfg.sk).map_err(|e| e.to_string())?;
        let pins = con.as_pins().ok_or("constraints are not pins")?;
        let mut mask = vec![true; layout.dim()];
        for (idx, _) in pins {
            mask[idx] = false;
        }
        let refined =
            smle_refine(&sk.theta, &mask, &ds, &np, &layout, &cfg.gn).map_err(|e| e.to_string())?;
        let (a, b, c) = layout.unpack(&refined.theta);
        let est_model = DCNModel {
            a,
            b,
            c,
            f: self.nominal_model.f.clone(),
            topology: self.nominal_model.topology.clone(),
            node_count: self.nominal_model.node_count,
            excitation_count: self.nominal_model.excitation_count,
            n_a: layout.n_a,
            n_b: layout.n_b,
            n_c: layout.n_c,
        };
        let thr = default_open_threshold(&self.nominal_model, cfg.nominal());
        let est = dcn_to_components(&est_model, cfg.nominal(), &thr).map_err(|e| e.to_string())?;

        let l = est_model.node_count;
        let mut symmetry_max = 0.0f64;
        let mut topology_zero_max = 0.0f64;
        for i in 0..l {
            for j in 0..l {
                if i == j {
                    continue;
                }
                let pij = est_model.a.entry(i, j);
                let pji = est_model.a.entry(j, i);
                for ell in 0..=layout.n_a {
                    symmetry_max = symmetry_max.max((pij.coeff(ell) - pji.coeff(ell)).abs());
                    if !est_model.topology[i][j] {
                        topology_zero_max = topology_zero_max.max(pij.coeff(ell).abs());
                    }
                }
            }
        }
        let invariants = RunInvariants {
            symmetry_max,
            topology_zero_max,
            constraint_residual: (&con.gamma * &refined.theta - &con.upsilon).amax(),
            cost_nonincreasing: refined
                .cost_history
                .windows(2)
                .all(|w| w[1] <= w[0] * (1.0 + 1e-12)),
        };
        Ok((est, sk.converged && refined.converged, invariants))
    }

    fn run_once_subnet(
        &self,
        cfg: &RunConfig,
        n: usize,
        seed: u64,
    ) -> Result<(Vec<ComponentEstimate>, bool, RunInvariants), String> {
        let part = cfg.partition.as_ref().expect("validated");
        let orders = cfg.immersed_orders.expect("validated");
        let ds = self.synthesize(cfg, n, seed)?;
        let measured = part.measured();
        let ds_m = ds.restrict_nodes(&measured);
        let template = kron_reduce(&self.nominal_model, part).map_err(|e| e.to_string())?;
        let excited_row = measured
            .iter()
            .position(|&x| x == cfg.network.excitation_nodes[0])
            .ok_or("excitation node not measured")?;
        let im = identify_immersed(
            &ds_m,
            &template,
            &self.nominal_model,
            part,
            excited_row,
            orders,
            &cfg.sk,
            &cfg.gn,
        )
        .map_err(|e| e.to_string())?;
        let layout1 = SubnetLayout {
            l_j: part.j.len(),
            l_d: part.d.len(),
            k: self.nominal_model.excitation_count,
            n_a: self.nominal_model.n_a,
            n_b: self.nominal_model.n_b,
        };
        let con1 =
            subnet_constraints(&layout1, &self.nominal_model, part).map_err(|e| e.to_string())?;
        let grid: Vec<f64> = (0..ds_m.freq_count()).map(|k| ds_m.omega(k).im).collect();
        let est1 = recover_subnet(&im, part.j.len(), &grid, &layout1, &con1)
            .map_err(|e| e.to_string())?;
        let comps = subnet_components(&est1, part, &self.nominal_model, cfg.nominal());

        // structural invariants: pins of the immersed fit, symmetry of the
        // recovered A_JJ block, structural zeros of the nominal topology,
        // and the recovery constraint residual
        let con_im = crate::subnet::immersed_constraints(
            &im.layout,
            &template,
            &self.nominal_model,
            part,
            excited_row,
        )
        .map_err(|e| e.to_string())?;
        let pin_resid = (&con_im.gamma * &im.theta - &con_im.upsilon).amax();
        let rec_resid = (&con1.gamma * &est1.theta1 - &con1.upsilon).amax();
        let mut symmetry_max = 0.0f64;
        for i in 0..layout1.l_j {
            for j in 0..layout1.l_j {
                for ell in 0..=layout1.n_a {
                    let d = est1.theta1[layout1.idx_ajj(i, j, ell)]
                        - est1.theta1[layout1.idx_ajj(j, i, ell)];
                    symmetry_max = symmetry_max.max(d.abs());
                }
            }
        }
        let mut topology_zero_max = 0.0f64;
        for (bi, &ni) in part.j.iter().enumerate() {
            for (bc, &nc) in measured.iter().enumerate() {
                if ni == nc || self.nominal_model.topology[ni][nc] {
                    continue;
                }
                for ell in 0..=layout1.n_a {
                    let v = if bc < layout1.l_j {
                        est1.theta1[layout1.idx_ajj(bi, bc, ell)]
                    } else {
                        est1.theta1[layout1.idx_ajd(bi, bc - layout1.l_j, ell)]
                    };
                    topology_zero_max = topology_zero_max.max(v.abs());
                }
            }
        }
        let invariants = RunInvariants {
            symmetry_max,
            topology_zero_max,
            constraint_residual: pin_resid.max(rec_resid),
            cost_nonincreasing: im
                .refine
                .cost_history
                .windows(2)
                .all(|w| w[1] <= w[0] * (1.0 + 1e-12)),
        };
        Ok((comps, im.sk.converged && im.refine.converged, invariants))
    }

    /// Truth components matched by name to an estimate list (the subnet path
    /// recovers a subset of the template slots).
    fn truth_for(&self, est: &[ComponentEstimate]) -> Vec<ComponentEstimate> {
        est.iter()
            .map(|e| {
                self.truth
                    .iter()
                    .find(|t| t.name == e.name)
                    .expect("estimate slot exists in template")
                    .clone()
            })
            .collect()
    }
}

/// Linear-interpolation quantile of a sorted slice, `q` in [0, 1].
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Execute a Monte-Carlo job per `cfg.mode`. Per-run seeds are
/// `master_seed XOR global_run_index`, with the global index running over
/// sweeps in order, so results are independent of worker scheduling.
pub fn run(cfg: &RunConfig) -> Result<RunResult, ExperimentError> {
    cfg.validate()?;
    match cfg.workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
            pool.install(|| run_inner(cfg))
        }
        None => run_inner(cfg),
    }
}

/// [`run`] restricted to full-network mode.
pub fn run_full(cfg: &RunConfig) -> Result<RunResult, ExperimentError> {
    if cfg.mode != RunMode::Full {
        return Err(ExperimentError::InvalidConfig("run_full requires mode = full".into()));
    }
    run(cfg)
}

/// [`run`] restricted to subnetwork mode.
pub fn run_subnet(cfg: &RunConfig) -> Result<RunResult, ExperimentError> {
    if cfg.mode != RunMode::Subnet {
        return Err(ExperimentError::InvalidConfig("run_subnet requires mode = subnet".into()));
    }
    run(cfg)
}

fn run_inner(cfg: &RunConfig) -> Result<RunResult, ExperimentError> {
    let start = std::time::Instant::now();
    let pipe = Pipeline::new(cfg)?;
    let lengths = cfg.lengths();
    let jobs: Vec<(usize, usize)> = lengths
        .iter()
        .flat_map(|&n| (0..cfg.mc_runs).map(move |r| (n, r)))
        .collect();

    let records: Vec<RunRecord> = jobs
        .par_iter()
        .enumerate()
        .map(|(global, &(n, _))| {
            let seed = cfg.master_seed ^ global as u64;
            let outcome = match cfg.mode {
                RunMode::Full => pipe.run_once_full(cfg, n, seed),
                RunMode::Subnet => pipe.run_once_subnet(cfg, n, seed),
            };
            match outcome {
                Ok((estimates, converged, invariants)) => {
                    let truth = pipe.truth_for(&estimates);
                    let hat: Vec<f64> = estimates.iter().map(|e| e.coefficient).collect();
                    let tru: Vec<f64> = truth.iter().map(|t| t.coefficient).collect();
                    let r = rmse(&hat, &tru).unwrap_or(f64::NAN);
                    RunRecord {
                        run: global,
                        n_samples: n,
                        seed,
                        converged,
                        rmse: r,
                        estimates,
                        invariants: Some(invariants),
                        error: None,
                    }
                }
                Err(msg) => RunRecord {
                    run: global,
                    n_samples: n,
                    seed,
                    converged: false,
                    rmse: f64::NAN,
                    estimates: Vec::new(),
                    invariants: None,
                    error: Some(msg),
                },
            }
        })
        .collect();

    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed == records.len() {
        let first = records[0].error.clone().unwrap_or_default();
        return Err(ExperimentError::AllRunsFailed(records.len(), first));
    }
    let non_converged = records
        .iter()
        .filter(|r| r.error.is_none() && !r.converged)
        .count();

    let sweeps = lengths
        .iter()
        .map(|&n| {
            let mut vals: Vec<f64> = records
                .iter()
                .filter(|r| r.n_samples == n && r.converged && r.rmse.is_finite())
                .map(|r| r.rmse)
                .collect();
            vals.sort_by(|a, b| a.total_cmp(b));
            SweepStats {
                n_samples: n,
                runs: cfg.mc_runs,
                converged: vals.len(),
                rmse_mean: vals.iter().sum::<f64>() / vals.len().max(1) as f64,
                rmse_median: quantile(&vals, 0.5),
                rmse_q1: quantile(&vals, 0.25),
                rmse_q3: quantile(&vals, 0.75),
                rmse_min: vals.first().copied().unwrap_or(f64::NAN),
                rmse_max: vals.last().copied().unwrap_or(f64::NAN),
            }
        })
        .collect();

    let components = aggregate_components(cfg, &pipe, &records);

    // truth restricted to the recoverable slots (first successful run)
    let truth = records
        .iter()
        .find(|r| r.error.is_none())
        .map(|r| pipe.truth_for(&r.estimates))
        .unwrap_or_default();

    Ok(RunResult {
        records,
        sweeps,
        components,
        truth,
        non_converged,
        failed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn aggregate_components(
    cfg: &RunConfig,
    pipe: &Pipeline,
    records: &[RunRecord],
) -> Vec<ComponentAggregate> {
    let good: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.error.is_none() && r.converged)
        .collect();
    let proto = match good.first() {
        Some(r) => &r.estimates,
        None => return Vec::new(),
    };
    let truth = pipe.truth_for(proto);
    proto
        .iter()
        .zip(&truth)
        .map(|(p, t)| {
            let coeffs: Vec<f64> = good
                .iter()
                .map(|r| {
                    r.estimates
                        .iter()
                        .find(|e| e.name == p.name)
                        .map(|e| e.coefficient)
                        .unwrap_or(f64::NAN)
                })
                .collect();
            let m = coeffs.iter().sum::<f64>() / coeffs.len() as f64;
            let var = coeffs.iter().map(|c| (c - m) * (c - m)).sum::<f64>()
                / coeffs.len().max(1) as f64;
            let value_from_mean = match p.unit {
                ComponentUnit::Farad => Some(m),
                ComponentUnit::Ohm | ComponentUnit::Henry => {
                    (m != 0.0).then(|| 1.0 / m)
                }
            }
            .filter(|v| v.is_finite());
            let mean_rpe_percent = if t.value.is_finite() {
                let rpes: Vec<f64> = good
                    .iter()
                    .filter_map(|r| {
                        let e = r.estimates.iter().find(|e| e.name == p.name)?;
                        e.value.is_finite().then(|| rpe(e.value, t.value))
                    })
                    .collect();
                (!rpes.is_empty()).then(|| rpes.iter().sum::<f64>() / rpes.len() as f64)
            } else {
                None
            };
            let _ = cfg;
            ComponentAggregate {
                idx: p.idx,
                name: p.name.clone(),
                unit: p.unit,
                truth_coefficient: t.coefficient,
                mean_coefficient: m,
                std_coefficient: var.sqrt(),
                value_from_mean,
                mean_rpe_percent,
            }
        })
        .collect()
}

fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.12e}")
    }
}

fn unit_str(u: ComponentUnit) -> &'static str {
    match u {
        ComponentUnit::Ohm => "ohm",
        ComponentUnit::Henry => "henry",
        ComponentUnit::Farad => "farad",
    }
}

/// Write `estimates.csv`, `rmse.csv`, `summary.json`, and the boxplot SVGs
/// into `output_dir`. CSV output is UTF-8 with '.' decimal separators and is
/// byte-identical for identical configs.
pub fn export(
    result: &RunResult,
    cfg: &RunConfig,
    output_dir: &Path,
) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(output_dir)?;

    // estimates.csv
    let mut est = String::from("run,component_idx,name,value,unit,rpe\n");
    for rec in &result.records {
        if rec.error.is_some() {
            continue;
        }
        let truth = &result.truth;
        for e in &rec.estimates {
            let t = truth.iter().find(|t| t.name == e.name);
            let rpe_s = match t {
                Some(t) if t.value.is_finite() && e.value.is_finite() => {
                    fmt_f64(rpe(e.value, t.value))
                }
                _ => String::new(),
            };
            est.push_str(&format!(
                "{},{},{},{},{},{}\n",
                rec.run,
                e.idx,
                e.name,
                fmt_f64(e.value),
                unit_str(e.unit),
                rpe_s
            ));
        }
    }
    std::fs::write(output_dir.join("estimates.csv"), est)?;

    // rmse.csv
    let mut rm = String::from("run,n_samples,rmse\n");
    for rec in &result.records {
        if rec.error.is_some() {
            continue;
        }
        rm.push_str(&format!("{},{},{}\n", rec.run, rec.n_samples, fmt_f64(rec.rmse)));
    }
    std::fs::write(output_dir.join("rmse.csv"), rm)?;

    // summary.json
    #[derive(Serialize)]
    struct Summary<'a> {
        version: &'static str,
        config: &'a RunConfig,
        sweeps: &'a [SweepStats],
        components: &'a [ComponentAggregate],
        seeds: Vec<u64>,
        non_converged: usize,
        failed: usize,
        wall_clock_secs: f64,
    }
    let summary = Summary {
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        sweeps: &result.sweeps,
        components: &result.components,
        seeds: result.records.iter().map(|r| r.seed).collect(),
        non_converged: result.non_converged,
        failed: result.failed,
        wall_clock_secs: result.wall_clock_secs,
    };
    let mut f = std::fs::File::create(output_dir.join("summary.json"))?;
    f.write_all(serde_json::to_string_pretty(&summary)?.as_bytes())?;
    f.write_all(b"\n")?;

    // RMSE boxplot per sweep length
    let labels: Vec<String> = result.sweeps.iter().map(|s| s.n_samples.to_string()).collect();
    let groups: Vec<Vec<f64>> = result
        .sweeps
        .iter()
        .map(|s| {
            result
                .records
                .iter()
                .filter(|r| r.n_samples == s.n_samples && r.converged && r.rmse.is_finite())
                .map(|r| r.rmse)
                .collect()
        })
        .collect();
    let svg = boxplot_svg("Coefficient RMSE vs data length", "N", &labels, &groups, true);
    std::fs::write(output_dir.join("rmse_boxplot.svg"), svg)?;

    // per-component RPE boxplot (finite-truth components only)
    let mut rpe_labels = Vec::new();
    let mut rpe_groups: Vec<Vec<f64>> = Vec::new();
    for t in &result.truth {
        if !t.value.is_finite() {
            continue;
        }
        let vals: Vec<f64> = result
            .records
            .iter()
            .filter(|r| r.converged)
            .filter_map(|r| {
                let e = r.estimates.iter().find(|e| e.name == t.name)?;
                e.value.is_finite().then(|| rpe(e.value, t.value))
            })
            .collect();
        if !vals.is_empty() {
            rpe_labels.push(t.name.clone());
            rpe_groups.push(vals);
        }
    }
    let svg = boxplot_svg("Relative parameter errors", "component", &rpe_labels, &rpe_groups, false);
    std::fs::write(output_dir.join("rpe_boxplot.svg"), svg)?;

    Ok(())
}

/// Standalone boxplot SVG: one box per group with median, quartiles, and
/// whiskers at 1.5 IQR; samples outside the whiskers drawn as circles.
/// `log_scale` plots log10 of the values (for RMSE spanning decades).
pub fn boxplot_svg(
    title: &str,
    xlabel: &str,
    labels: &[String],
    groups: &[Vec<f64>],
    log_scale: bool,
) -> String {
    let n = groups.len().max(1);
    let (w, h) = (120.0 * n as f64 + 100.0, 380.0);
    let (top, bottom, left) = (40.0, 50.0, 70.0);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
         viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        w / 2.0
    ));

    let tf = |v: f64| if log_scale { v.max(1e-300).log10() } else { v };
    let all: Vec<f64> = groups
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite() && (!log_scale || *v > 0.0))
        .map(tf)
        .collect();
    if all.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let (mut lo, mut hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    let y = |v: f64| top + (hi - tf(v)) / (hi - lo) * (h - top - bottom);

    // axes
    out.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        h - bottom
    ));
    out.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        h - bottom,
        w - 20.0,
        h - bottom
    ));
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let yy = top + (hi - v) / (hi - lo) * (h - top - bottom);
        let label = if log_scale {
            format!("1e{v:.1}")
        } else {
            format!("{v:.2}")
        };
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{label}</text>\n",
            left - 6.0,
            yy + 4.0
        ));
        out.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{yy:.1}\" x2=\"{left}\" y2=\"{yy:.1}\" stroke=\"black\"/>\n",
            left - 4.0
        ));
    }
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xlabel}</text>\n",
        (left + w - 20.0) / 2.0,
        h - 8.0
    ));

    for (g, vals) in groups.iter().enumerate() {
        let mut v: Vec<f64> = vals
            .iter()
            .copied()
            .filter(|x| x.is_finite() && (!log_scale || *x > 0.0))
            .collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        let (q1, med, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let iqr = q3 - q1;
        let wlo = v
            .iter()
            .copied()
            .filter(|&x| x >= q1 - 1.5 * iqr)
            .fold(f64::INFINITY, f64::min);
        let whi = v
            .iter()
            .copied()
            .filter(|&x| x <= q3 + 1.5 * iqr)
            .fold(f64::NEG_INFINITY, f64::max);
        let cx = left + 60.0 + 120.0 * g as f64;
        let bw = 40.0;
        // whiskers
        out.push_str(&format!(
            "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            y(whi),
            y(q3)
        ));
        out.push_str(&format!(
            "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            y(q1),
            y(wlo)
        ));
        for cap in [wlo, whi] {
            out.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
                cx - bw / 4.0,
                y(cap),
                cx + bw / 4.0,
                y(cap)
            ));
        }
        // box and median
        out.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bw}\" height=\"{:.1}\" \
             fill=\"#9ecae1\" stroke=\"black\"/>\n",
            cx - bw / 2.0,
            y(q3),
            (y(q1) - y(q3)).max(0.5)
        ));
        out.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
             stroke=\"black\" stroke-width=\"2\"/>\n",
            cx - bw / 2.0,
            y(med),
            cx + bw / 2.0,
            y(med)
        ));
        // outliers
        for &x in v.iter().filter(|&&x| x < wlo || x > whi) {
            out.push_str(&format!(
                "<circle cx=\"{cx:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"none\" stroke=\"black\"/>\n",
                y(x)
            ));
        }
        if let Some(label) = labels.get(g) {
            out.push_str(&format!(
                "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>\n",
                h - bottom + 18.0
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{two_node_network, seven_node_network};

    fn two_node_config() -> RunConfig {
        RunConfig {
            network: two_node_network(),
            nominal_network: None,
            experiment: ExperimentConfig {
                n_samples: 4096,
                fs_hz: 20_000.0,
                sigma_r2: 1.0,
                sigma_e2: 0.0,
                band_hz: (500.0, 4000.0),
                seed: 0,
                transient_scale: 0.0,
            },
            lpm: None,
            sk: SkSettings::default(),
            gn: GnSettings::default(),
            orders: None,
            immersed_orders: None,
            mode: RunMode::Full,
            partition: None,
            mc_runs: 1,
            master_seed: 11,
            sweep_lengths: Vec::new(),
            output_dir: None,
            rpe_threshold_percent: 10.0,
            workers: Some(2),
        }
    }

    #[test]
    fn rmse_reference_values() {
        let t = [1.0, -2.0, 3.0];
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        let h: Vec<f64> = t.iter().map(|x| 1.01 * x).collect();
        assert!((rmse(&h, &t).unwrap() - 1e-4).abs() < 1e-12);
        let z = [0.0; 3];
        assert!((rmse(&z, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(rmse(&t, &z), Err(ExperimentError::ZeroTrueNorm)));
        assert!(matches!(
            rmse(&t, &[1.0]),
            Err(ExperimentError::LengthMismatch(3, 1))
        ));
    }

    #[test]
    fn rpe_reference_values() {
        assert!((rpe(200.06, 200.0) - 0.03).abs() < 1e-9);
        assert_eq!(rpe(5.0, 5.0), 0.0);
        assert!((rpe(17.92, 18.0) - (-0.4444444444444444)).abs() < 1e-10);
    }

    fn comp(name: &str, value: f64, coeff: f64) -> ComponentEstimate {
        ComponentEstimate {
            idx: 0,
            name: name.into(),
            value,
            unit: ComponentUnit::Ohm,
            coefficient: coeff,
        }
    }

    #[test]
    fn fault_report_verdicts() {
        let nominal = vec![
            comp("R_1", 100.0, 0.01),
            comp("R_2", 200.0, 0.005),
            comp("R_3", 300.0, 1.0 / 300.0),
        ];
        let est = vec![
            comp("R_1", 101.0, 1.0 / 101.0),            // healthy
            comp("R_2", 250.0, 0.004),                  // drifted (+25%)
            comp("R_3", f64::INFINITY, 0.0),            // open
        ];
        let rep = fault_report(&est, &nominal, 10.0);
        assert_eq!(
            rep.entries.iter().map(|e| e.verdict).collect::<Vec<_>>(),
            vec![Verdict::Healthy, Verdict::Drifted, Verdict::Open]
        );
        assert_eq!(rep.flagged(), vec!["R_2".to_string(), "R_3".to_string()]);
        // all-healthy -> no flags
        let rep = fault_report(&nominal, &nominal, 10.0);
        assert!(rep.flagged().is_empty());
    }

    #[test]
    fn config_validation_rejects_bad_jobs() {
        let mut cfg = two_node_config();
        cfg.mc_runs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = two_node_config();
        cfg.mode = RunMode::Subnet;
        assert!(cfg.validate().is_err()); // no partition
        let mut cfg = two_node_config();
        cfg.sweep_lengths = vec![999];
        assert!(cfg.validate().is_err()); // odd length
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = two_node_config();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        back.validate().unwrap();
        assert_eq!(back.master_seed, cfg.master_seed);
        assert_eq!(back.mode, RunMode::Full);
    }

    #[test]
    fn noiseless_single_run_rmse_tiny() {
        let cfg = two_node_config();
        let result = run_full(&cfg).unwrap();
        assert_eq!(result.failed, 0);
        assert!(result.records[0].rmse < 1e-10, "rmse {}", result.records[0].rmse);
    }

    #[test]
    fn export_is_byte_deterministic() {
        let mut cfg = two_node_config();
        cfg.mc_runs = 2;
        cfg.experiment.sigma_e2 = 1e-2;
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = run(&cfg).unwrap();
        export(&r1, &cfg, d1.path()).unwrap();
        let r2 = run(&cfg).unwrap();
        export(&r2, &cfg, d2.path()).unwrap();
        for f in ["estimates.csv", "rmse.csv", "rmse_boxplot.svg", "rpe_boxplot.svg"] {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            let b = std::fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical jobs");
        }
        // per-run estimates differ across seeds but not across repetitions
        assert_ne!(r1.records[0].rmse, r1.records[1].rmse);
    }

    #[test]
    fn rmse_invariant_under_unit_rescaling() {
        // simultaneous rescaling of hat and true coefficient vectors leaves
        // RMSE unchanged
        let t = [0.5, 2.0, -1.0, 4.0];
        let h = [0.52, 1.9, -1.05, 4.2];
        let r0 = rmse(&h, &t).unwrap();
        let s = 1e3;
        let ts: Vec<f64> = t.iter().map(|x| x * s).collect();
        let hs: Vec<f64> = h.iter().map(|x| x * s).collect();
        let r1 = rmse(&hs, &ts).unwrap();
        assert!((r0 - r1).abs() <= 1e-12 * r0.max(1.0));
    }

    #[test]
    fn boxplot_svg_well_formed() {
        let groups = vec![vec![1.0, 2.0, 3.0, 10.0], vec![0.5, 0.6, 0.7]];
        let labels = vec!["a".to_string(), "b".to_string()];
        let svg = boxplot_svg("t", "x", &labels, &groups, false);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<rect").count(), 2);
        // log scale with a non-positive value does not panic
        let svg = boxplot_svg("t", "x", &labels, &[vec![0.0, 1.0]], true);
        assert!(svg.contains("</svg>"));
    }

    #[test]
    fn sweep_aggregation_orders_records_by_run_index() {
        let mut cfg = two_node_config();
        cfg.mc_runs = 2;
        cfg.sweep_lengths = vec![2048, 4096];
        cfg.experiment.sigma_e2 = 1e-2;
        let res = run(&cfg).unwrap();
        assert_eq!(res.records.len(), 4);
        for (i, r) in res.records.iter().enumerate() {
            assert_eq!(r.run, i);
            assert_eq!(r.seed, cfg.master_seed ^ i as u64);
        }
        assert_eq!(res.sweeps.len(), 2);
        assert_eq!(res.sweeps[0].n_samples, 2048);
        assert_eq!(res.sweeps[1].n_samples, 4096);
    }

    #[test]
    fn defect_network_run_reports_open_component() {
        // tiny defect scenario: drop the coupling resistor, keep its slot in
        // the nominal template
        let mut defect = two_node_network();
        defect.edges[0].r_ohm = None;
        let mut cfg = two_node_config();
        cfg.nominal_network = Some(two_node_network());
        cfg.network = defect;
        let res = run(&cfg).unwrap();
        let nominal_model = rlc_to_dcn(&two_node_network()).unwrap();
        let thr = default_open_threshold(&nominal_model, &two_node_network());
        let nominal = dcn_to_components(&nominal_model, &two_node_network(), &thr).unwrap();
        let rep = fault_report(&res.records[0].estimates, &nominal, cfg.rpe_threshold_percent);
        let r12 = rep.entries.iter().find(|e| e.name == "R_12").unwrap();
        assert_eq!(r12.verdict, Verdict::Open);
        let healthy: Vec<_> = rep
            .entries
            .iter()
            .filter(|e| e.name != "R_12")
            .map(|e| e.verdict)
            .collect();
        assert!(healthy.iter().all(|&v| v == Verdict::Healthy));
    }

    #[test]
    fn subnet_mode_runs_on_seven_node_network() {
        let net = seven_node_network();
        let cfg = RunConfig {
            network: net.clone(),
            nominal_network: None,
            experiment: ExperimentConfig {
                n_samples: 8192,
                fs_hz: 20_000.0,
                sigma_r2: 1.0,
                sigma_e2: 0.0,
                band_hz: (500.0, 6000.0),
                seed: 0,
                transient_scale: 0.0,
            },
            lpm: None,
            sk: SkSettings::default(),
            gn: GnSettings::default(),
            orders: None,
            immersed_orders: Some(ImmersedOrders {
                n_a_im: 3,
                n_b_im: 2,
                n_c_im: 1,
            }),
            mode: RunMode::Subnet,
            partition: Some(Partition {
                j: vec![0, 1],
                d: vec![2, 4],
                i: vec![3, 5, 6],
            }),
            mc_runs: 1,
            master_seed: 5,
            sweep_lengths: Vec::new(),
            output_dir: None,
            rpe_threshold_percent: 10.0,
            workers: Some(1),
        };
        let res = run_subnet(&cfg).unwrap();
        assert_eq!(res.failed, 0);
        assert!(
            res.records[0].rmse < 1e-8,
            "noiseless subnet rmse {}",
            res.records[0].rmse
        );
        // structural sanity: every recovered slot exists in the truth list
        assert!(!res.records[0].estimates.is_empty());
    }
}
