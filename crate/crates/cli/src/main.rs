use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reverb::agent::{train, Checkpoint, CostMode, TrainedPolicy};
use reverb::baselines::SchedulingMode;
use reverb::channel::ChannelParams;
use reverb::harness::{
    self, channel_check, export_traces, run_monte_carlo, write_channel_checks, write_curve, ExperimentConfig,
};
use reverb::{Error, Result, Twin64};

#[derive(Parser)]
#[command(name = "reverb", version, about = "Digital-twin networked control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write a checkpoint plus its training curve.
    Train {
        #[command(flatten)]
        common: Common,
        /// PPO iterations (each collects one batch); overrides ppo.total_steps.
        #[arg(long)]
        iterations: Option<u64>,
        /// Checkpoint path; the curve goes next to it as `<stem>.curve.csv`.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over seeded Monte Carlo episodes.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory for episodes.csv, trace_<i>.csv and summary.json.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Check the closed-form power allocation against the exact inverse and
    /// Monte Carlo fading; prints CSV.
    ValidateChannel(ChannelArgs),
    /// Evaluate a checkpoint over a grid of κ, C and ε.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "5e-6")]
        kappas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "10")]
        capacities: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1e-5")]
        epsilons: Vec<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

/// Flags shared by every experiment subcommand; each overrides the
/// corresponding config key.
#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<SchedulingMode>,
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    eta_max: Option<f64>,
    /// PENALTY or PAPER_EQ24.
    #[arg(long, value_parser = parse_cost_mode)]
    cost_mode: Option<CostMode>,
    #[arg(long)]
    fleet_seed: Option<u64>,
}

#[derive(Args)]
struct ChannelArgs {
    /// Rician factor G in dB; comma-separated for a grid.
    #[arg(long, value_delimiter = ',', default_value = "15")]
    rician_db: Vec<f64>,
    /// Outage probability ε; comma-separated for a grid.
    #[arg(long, value_delimiter = ',', default_value = "1e-2")]
    epsilon: Vec<f64>,
    /// Bandwidth W in Hz.
    #[arg(long, default_value_t = 5e6)]
    bandwidth: f64,
    /// Packet size D in bits.
    #[arg(long, default_value_t = 1024.0)]
    packet_bits: f64,
    /// Latency bound τ_max in seconds.
    #[arg(long, default_value_t = 5e-3)]
    latency: f64,
    /// Distance in meters.
    #[arg(long, default_value_t = 20.0)]
    distance: f64,
    /// Path-loss exponent α.
    #[arg(long, default_value_t = 2.0)]
    path_loss: f64,
    #[arg(long, default_value_t = -11.5)]
    noise_dbm: f64,
    #[arg(long, default_value_t = 1_000_000)]
    trials: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn parse_cost_mode(s: &str) -> std::result::Result<CostMode, String> {
    match s.to_ascii_uppercase().replace('-', "_").as_str() {
        "PENALTY" => Ok(CostMode::Penalty),
        "PAPER_EQ24" => Ok(CostMode::PaperEq24),
        other => Err(format!("unknown cost mode {other}")),
    }
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.mode {
            config.twin.mode = v;
        }
        if let Some(v) = self.episodes {
            config.episodes = v;
        }
        if let Some(v) = self.capacity {
            config.twin.capacity = v;
        }
        if let Some(v) = self.kappa {
            config.twin.kappa = v;
        }
        if let Some(v) = self.epsilon {
            config.twin.channel.outage_probability = v;
        }
        if let Some(v) = self.eta_max {
            config.twin.eta_max = v;
        }
        if let Some(v) = self.cost_mode {
            config.twin.cost_mode = v;
        }
        if let Some(v) = self.fleet_seed {
            config.twin.fleet.seed = v;
        }
        Ok(config)
    }
}

/// Loads the checkpoint; its mode applies unless `--mode` was given.
fn load_policy(common: &Common, config: &mut ExperimentConfig, flag: Option<PathBuf>) -> Result<TrainedPolicy<f64>> {
    if flag.is_some() {
        config.checkpoint = flag;
    }
    config.validate()?;
    let path = config
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("a checkpoint is required (--checkpoint or config key)".into()))?;
    let policy = Checkpoint::load(&path)?.to_policy::<f64>()?;
    if common.mode.is_none() {
        config.twin.mode = policy.mode;
    }
    Ok(policy)
}

fn curve_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("policy");
    out.with_file_name(format!("{stem}.curve.csv"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, iterations, out } => {
            let mut config = common.load()?;
            if let Some(n) = iterations {
                config.ppo.total_steps = n * config.ppo.batch_size as u64;
            }
            config.validate()?;
            let policy = train::<f64>(&config.twin, &config.ppo, config.seed)?;
            Checkpoint::from_policy(&policy).save(&out)?;
            let curve = curve_path(&out);
            write_curve(&policy.curve, &curve)?;
            let last = policy.curve.last();
            eprintln!(
                "trained {} for {} iterations; last success rate {}; wrote {} and {}",
                config.twin.mode,
                policy.curve.len(),
                last.and_then(|c| c.success_rate)
                    .map_or("n/a".to_string(), |r| format!("{r:.2}")),
                out.display(),
                curve.display()
            );
            Ok(())
        }
        Command::Evaluate { common, checkpoint, out } => {
            let mut config = common.load()?;
            let policy = load_policy(&common, &mut config, checkpoint)?;
            let dir = out
                .or_else(|| config.output_dir.clone())
                .ok_or_else(|| Error::Config("an output directory is required (--out or output_dir)".into()))?;
            let twin = Twin64::new(config.twin.clone())?;
            let report = run_monte_carlo(&twin, &policy, config.episodes, config.seed)?;
            let mut summary = report.summary;
            summary.config = Some(config);
            export_traces(&report.episodes, &summary, &dir)?;
            eprintln!(
                "{}: success {:.2}, median QIs {}, mean power {} W, MRMSE {}; wrote {}",
                summary.mode,
                summary.success_rate,
                summary.qis.as_ref().map_or(f64::NAN, |s| s.median),
                summary.total_power_w.as_ref().map_or(f64::NAN, |s| s.mean),
                summary.mrmse.as_ref().map_or(f64::NAN, |s| s.mean),
                dir.display()
            );
            match summary.failures.first() {
                Some(f) => Err(Error::NumericalFailure {
                    qi: 0,
                    reason: format!(
                        "{} of {} episodes failed; first was episode {}: {}",
                        summary.failures.len(),
                        summary.episodes,
                        f.episode,
                        f.error
                    ),
                }),
                None => Ok(()),
            }
        }
        Command::ValidateChannel(args) => {
            let mut rows = Vec::new();
            for &db in &args.rician_db {
                for &eps in &args.epsilon {
                    let params = ChannelParams {
                        path_loss_exponent: args.path_loss,
                        bandwidth_hz: args.bandwidth,
                        noise_power_dbm: args.noise_dbm,
                        rician_factor_db: db,
                        outage_probability: eps,
                        max_latency_s: args.latency,
                        packet_bits: args.packet_bits,
                        ..ChannelParams::default()
                    };
                    params.validate()?;
                    rows.push(channel_check(&params, args.distance, args.trials, args.seed)?);
                }
            }
            write_channel_checks(&rows, std::io::stdout().lock())
        }
        Command::Sweep {
            common,
            checkpoint,
            kappas,
            capacities,
            epsilons,
            out,
        } => {
            let mut config = common.load()?;
            let policy = load_policy(&common, &mut config, checkpoint)?;
            let rows = harness::sweep(&config, &policy, &kappas, &capacities, &epsilons)?;
            harness::write_sweep(&rows, &out)?;
            eprintln!("wrote {} sweep rows to {}", rows.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
