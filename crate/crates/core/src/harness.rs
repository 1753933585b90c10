//! Seeded Monte Carlo evaluation, metrics and result files.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{CurvePoint, Policy, PpoHyperparams};
use crate::channel::{self, ChannelParams};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::twin::{episode_seed, QiRecord, Twin, TwinConfig};

/// Environment variable holding the evaluation worker count.
pub const WORKERS_ENV: &str = "REVERB_WORKERS";

/// Printed into every summary so the error metric is unambiguous.
pub const MRMSE_DEFINITION: &str =
    "per-episode mean over QIs of the Euclidean estimation error ||s_t - s_hat_t||_2, averaged over episodes";

/// A full experiment description, echoed into `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub twin: TwinConfig,
    pub ppo: PpoHyperparams,
    /// Evaluation episodes.
    pub episodes: u64,
    /// Master seed for training and evaluation.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Trained policy to evaluate.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            twin: TwinConfig::default(),
            ppo: PpoHyperparams::default(),
            episodes: 100,
            seed: 1,
            output_dir: None,
            checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.twin.validate()?;
        self.ppo.validate()?;
        if self.episodes == 0 {
            return Err(Error::Config("episode count must be at least 1".into()));
        }
        if let Some(path) = &self.checkpoint {
            if !path.is_file() {
                return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

/// Outcome of one evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: u64,
    pub seed: u64,
    /// QIs until the goal or the cap.
    pub qis: u64,
    pub reached_goal: bool,
    /// Uplink power summed over every QI, in watts.
    pub total_power_w: f64,
    pub mean_power_w: f64,
    pub mrmse: f64,
    pub total_selected: u64,
    pub mean_selected: f64,
    /// Fraction of QIs whose posterior variances meet the effective caps.
    pub caps_met_rate: f64,
    /// QIs that scheduled at least one agent.
    pub scheduled_qis: u64,
    /// Of those, QIs where some prior ratio exceeded 1.
    pub scheduled_over_cap: u64,
    pub total_return: f64,
    #[serde(skip)]
    pub trace: Vec<QiRecord>,
}

/// Runs one episode with a deterministic policy.
pub fn run_episode<T: Real, P: Policy<T> + ?Sized>(
    twin: &Twin<T>,
    policy: &P,
    episode: u64,
    seed: u64,
) -> Result<EpisodeMetrics> {
    let mut ep = twin.begin(seed)?;
    let mut trace = Vec::new();
    while !ep.is_done() {
        let raw = policy.act(&ep.policy_input())?;
        trace.push(twin.advance(&mut ep, &raw)?.record);
    }
    let n = trace.len() as f64;
    let total_power_w: f64 = trace.iter().map(|r| r.power_w).sum();
    let total_selected: u64 = trace.iter().map(|r| r.selected as u64).sum();
    let scheduled: Vec<_> = trace.iter().filter(|r| r.selected > 0).collect();
    Ok(EpisodeMetrics {
        episode,
        seed,
        qis: ep.qi(),
        reached_goal: ep.reached_goal(),
        total_power_w,
        mean_power_w: total_power_w / n,
        mrmse: trace.iter().map(|r| r.error).sum::<f64>() / n,
        total_selected,
        mean_selected: total_selected as f64 / n,
        caps_met_rate: trace.iter().filter(|r| r.caps_met).count() as f64 / n,
        scheduled_qis: scheduled.len() as u64,
        scheduled_over_cap: scheduled.iter().filter(|r| r.max_prior_ratio > 1.0).count() as u64,
        total_return: trace.iter().map(|r| r.reward).sum(),
        trace,
    })
}

/// Mean, spread and percentiles of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub p5: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub p95: f64,
    pub max: f64,
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            min: sorted[0],
            p5: percentile(&sorted, 5.0),
            p25: percentile(&sorted, 25.0),
            median: percentile(&sorted, 50.0),
            p75: percentile(&sorted, 75.0),
            p95: percentile(&sorted, 95.0),
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub episode: u64,
    pub seed: u64,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub episodes: u64,
    pub master_seed: u64,
    pub mrmse_definition: String,
    pub success_rate: f64,
    pub qis: Option<Stats>,
    pub total_power_w: Option<Stats>,
    pub mean_power_w: Option<Stats>,
    pub mrmse: Option<Stats>,
    pub mean_selected: Option<Stats>,
    pub caps_met_rate: Option<Stats>,
    pub total_return: Option<Stats>,
    /// Pooled fraction of scheduling QIs preceded by a cap violation.
    pub scheduled_over_cap_rate: Option<f64>,
    pub failures: Vec<EpisodeFailure>,
    pub config: Option<ExperimentConfig>,
}

impl Summary {
    pub fn new(mode: &str, master_seed: u64, episodes: &[EpisodeMetrics], failures: Vec<EpisodeFailure>) -> Self {
        let field = |f: fn(&EpisodeMetrics) -> f64| Stats::of(&episodes.iter().map(f).collect::<Vec<_>>());
        let scheduled: u64 = episodes.iter().map(|e| e.scheduled_qis).sum();
        let over: u64 = episodes.iter().map(|e| e.scheduled_over_cap).sum();
        let n = episodes.len();
        Self {
            mode: mode.to_string(),
            episodes: (n + failures.len()) as u64,
            master_seed,
            mrmse_definition: MRMSE_DEFINITION.to_string(),
            success_rate: if n == 0 {
                0.0
            } else {
                episodes.iter().filter(|e| e.reached_goal).count() as f64 / n as f64
            },
            qis: field(|e| e.qis as f64),
            total_power_w: field(|e| e.total_power_w),
            mean_power_w: field(|e| e.mean_power_w),
            mrmse: field(|e| e.mrmse),
            mean_selected: field(|e| e.mean_selected),
            caps_met_rate: field(|e| e.caps_met_rate),
            total_return: field(|e| e.total_return),
            scheduled_over_cap_rate: (scheduled > 0).then(|| over as f64 / scheduled as f64),
            failures,
            config: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloReport {
    pub episodes: Vec<EpisodeMetrics>,
    pub summary: Summary,
}

/// Worker count from [`WORKERS_ENV`], or rayon's default.
pub fn worker_count() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Evaluates `episodes` episodes with seeds derived from `master_seed`.
///
/// Episodes run on a worker pool; results are ordered by episode index.
/// Failed episodes are listed in the summary rather than dropped.
pub fn run_monte_carlo<T: Real, P: Policy<T> + ?Sized>(
    twin: &Twin<T>,
    policy: &P,
    episodes: u64,
    master_seed: u64,
) -> Result<MonteCarloReport> {
    let run = || {
        (0..episodes)
            .into_par_iter()
            .map(|i| {
                let seed = episode_seed(master_seed, i);
                run_episode(twin, policy, i, seed).map_err(|e| EpisodeFailure {
                    episode: i,
                    seed,
                    error: e.to_string(),
                    exit_code: e.exit_code(),
                })
            })
            .collect::<Vec<_>>()
    };
    let results = match worker_count() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?
            .install(run),
        None => run(),
    };
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(m) => ok.push(m),
            Err(f) => failures.push(f),
        }
    }
    let summary = Summary::new(twin.mode().name(), master_seed, &ok, failures);
    Ok(MonteCarloReport { episodes: ok, summary })
}

pub const EPISODE_COLUMNS: [&str; 14] = [
    "episode",
    "seed",
    "qis",
    "reached_goal",
    "total_power_w",
    "mean_power_w",
    "mrmse",
    "total_selected",
    "mean_selected",
    "caps_met_rate",
    "scheduled_qis",
    "scheduled_over_cap",
    "total_return",
    "trace_rows",
];

pub const TRACE_COLUMNS: [&str; 17] = [
    "qi",
    "true_position",
    "true_velocity",
    "est_position",
    "est_velocity",
    "std_position",
    "std_velocity",
    "selected",
    "agents",
    "power_w",
    "eta_position",
    "eta_velocity",
    "control",
    "reward",
    "max_prior_ratio",
    "caps_met",
    "error",
];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Serialization {
        path: path.into(),
        reason: e.to_string(),
    }
}

fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: Serialize,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `episodes.csv`, one `trace_<episode>.csv` per episode, and
/// `summary.json` into `dir`.
pub fn export_traces(episodes: &[EpisodeMetrics], summary: &Summary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows = episodes.iter().map(|e| {
        (
            e.episode,
            e.seed,
            e.qis,
            e.reached_goal,
            e.total_power_w,
            e.mean_power_w,
            e.mrmse,
            e.total_selected,
            e.mean_selected,
            e.caps_met_rate,
            e.scheduled_qis,
            e.scheduled_over_cap,
            e.total_return,
            e.trace.len(),
        )
    });
    write_csv(&dir.join("episodes.csv"), &EPISODE_COLUMNS, rows)?;
    for e in episodes {
        write_csv(&dir.join(format!("trace_{}.csv", e.episode)), &TRACE_COLUMNS, &e.trace)?;
    }
    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Serialization {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serialization {
        path: path.into(),
        reason: e.to_string(),
    })
}

/// One grid point of [`sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kappa: f64,
    pub capacity: usize,
    pub outage_probability: f64,
    pub success_rate: f64,
    pub median_qis: f64,
    pub mean_total_power_w: f64,
    pub mean_mrmse: f64,
    pub mean_return: f64,
    pub caps_met_rate: f64,
    pub failures: usize,
}

pub const SWEEP_COLUMNS: [&str; 10] = [
    "kappa",
    "capacity",
    "outage_probability",
    "success_rate",
    "median_qis",
    "mean_total_power_w",
    "mean_mrmse",
    "mean_return",
    "caps_met_rate",
    "failures",
];

/// Evaluates `policy` over the grid `kappas × capacities × epsilons`.
pub fn sweep<T: Real, P: Policy<T> + ?Sized>(
    base: &ExperimentConfig,
    policy: &P,
    kappas: &[f64],
    capacities: &[usize],
    epsilons: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &kappa in kappas {
        for &capacity in capacities {
            for &eps in epsilons {
                let mut twin_config = base.twin.clone();
                twin_config.kappa = kappa;
                twin_config.capacity = capacity;
                twin_config.channel.outage_probability = eps;
                let twin = Twin::<T>::new(twin_config)?;
                let report = run_monte_carlo(&twin, policy, base.episodes, base.seed)?;
                let s = &report.summary;
                let pick = |st: &Option<Stats>, f: fn(&Stats) -> f64| st.as_ref().map_or(f64::NAN, f);
                rows.push(SweepRow {
                    kappa,
                    capacity,
                    outage_probability: eps,
                    success_rate: s.success_rate,
                    median_qis: pick(&s.qis, |x| x.median),
                    mean_total_power_w: pick(&s.total_power_w, |x| x.mean),
                    mean_mrmse: pick(&s.mrmse, |x| x.mean),
                    mean_return: pick(&s.total_return, |x| x.mean),
                    caps_met_rate: pick(&s.caps_met_rate, |x| x.mean),
                    failures: s.failures.len(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    write_csv(path, &SWEEP_COLUMNS, rows)
}

pub const CURVE_COLUMNS: [&str; 11] = [
    "iteration",
    "steps",
    "episodes",
    "mean_return",
    "mean_length",
    "success_rate",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_fraction",
];

pub fn write_curve(curve: &[CurvePoint], path: &Path) -> Result<()> {
    write_csv(path, &CURVE_COLUMNS, curve)
}

/// Closed-form power allocation checked against the exact inverse and a
/// Monte Carlo outage estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelCheck {
    pub rician_factor_db: f64,
    pub outage_probability: f64,
    pub distance_m: f64,
    pub y_q: f64,
    pub y_exact: f64,
    pub y_rel_error: f64,
    pub required_power_w: f64,
    pub trials: u64,
    pub mc_outage: f64,
}

pub const CHANNEL_COLUMNS: [&str; 9] = [
    "rician_factor_db",
    "outage_probability",
    "distance_m",
    "y_q",
    "y_exact",
    "y_rel_error",
    "required_power_w",
    "trials",
    "mc_outage",
];

pub fn channel_check(params: &ChannelParams, distance: f64, trials: u64, seed: u64) -> Result<ChannelCheck> {
    params.validate()?;
    let g = params.rician_factor();
    let eps = params.outage_probability;
    let y_q = channel::y_q(g, eps)?;
    let y_exact = channel::y_exact(g, eps)?;
    let power = channel::required_power(distance, params)?;
    Ok(ChannelCheck {
        rician_factor_db: params.rician_factor_db,
        outage_probability: eps,
        distance_m: distance,
        y_q,
        y_exact,
        y_rel_error: (y_q - y_exact).abs() / y_exact,
        required_power_w: power,
        trials,
        mc_outage: channel::outage_probability_mc(power, distance, params, trials, seed)?,
    })
}

pub fn write_channel_checks<W: std::io::Write>(rows: &[ChannelCheck], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let fail = |e: csv::Error| Error::Serialization {
        path: "<stdout>".into(),
        reason: e.to_string(),
    };
    w.write_record(CHANNEL_COLUMNS).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io("<stdout>", e))
}
