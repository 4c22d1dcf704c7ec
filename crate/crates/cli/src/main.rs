use std::path::PathBuf;
use std::process::ExitCode;

use beamhop::harness::{self, episode_seed, PolicySpec};
use beamhop::ppo::ActionMode;
use beamhop::{Config, Error, Scenario};
use clap::{Args, Parser, Subcommand};

/// Multi-satellite beam-hopping simulator and scheduler laboratory.
#[derive(Parser)]
#[command(name = "beamhop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario and training configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the PPO agent; writes training_log.csv, agent.json, result.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override [ppo].episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run a frozen policy over a demand sweep.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["ppo", "tp", "dp", "uswgp", "random"])]
        policy: String,
        /// Agent checkpoint, required with --policy ppo.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Episodes per demand scale.
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Comma-separated multipliers on the configured arrival rates.
        #[arg(long, value_delimiter = ',')]
        demand_scales: Option<Vec<f64>>,
        /// Act on the mode of each head instead of sampling.
        #[arg(long)]
        greedy: bool,
    },
    /// Evaluate several policies on identical traffic and tabulate differences.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Policies to compare (comma-separated or repeated).
        #[arg(long, value_delimiter = ',', required = true,
              value_parser = ["ppo", "tp", "dp", "uswgp", "random"])]
        policy: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of episodes (one per derived seed).
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        #[arg(long)]
        greedy: bool,
    },
    /// Write the channel gain matrix H_t for the first slots to channel.csv.
    DumpChannel {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        slots: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Schema(_)
        | Error::Infeasible(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Checkpoint(_) => 2,
        Error::Dimension(_) => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn spec(name: &str, checkpoint: Option<&PathBuf>, greedy: bool) -> Result<PolicySpec, Error> {
    let mut s = PolicySpec::parse(name, checkpoint.map(PathBuf::as_path))?;
    if let PolicySpec::Ppo { mode, .. } = &mut s {
        if greedy {
            *mode = ActionMode::Greedy;
        }
    }
    Ok(s)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { common, episodes } => {
            let cfg = Config::load(&common.config)?;
            let o = harness::cli_train(&cfg, common.seed, &common.out, episodes)?;
            if let Some(last) = o.log.last() {
                println!(
                    "trained {} episodes; final reward {:.4}, throughput {:.4e} bits, ltcad {:.3} slots",
                    o.log.len(),
                    last.reward,
                    last.throughput_bits,
                    last.ltcad_slots
                );
            }
            println!("log: {}", o.log_path.display());
            println!("checkpoint: {}", o.checkpoint_path.display());
        }
        Command::Evaluate { common, policy, checkpoint, episodes, demand_scales, greedy } => {
            let cfg = Config::load(&common.config)?;
            let s = spec(&policy, checkpoint.as_ref(), greedy)?;
            let scales = demand_scales.unwrap_or_else(harness::default_demand_scales);
            let rows = harness::cli_evaluate(&cfg, &s, &scales, episodes, common.seed, &common.out)?;
            println!("{:>8} {:>14} {:>14} {:>10} {:>10}", "scale", "thr_mean", "thr_std", "ltcad", "ltcad_std");
            for r in rows {
                println!(
                    "{:>8.3} {:>14.4e} {:>14.4e} {:>10.3} {:>10.3}",
                    r.demand_scale, r.throughput_mean_bits, r.throughput_std_bits, r.ltcad_mean_slots, r.ltcad_std_slots
                );
            }
        }
        Command::Compare { common, policy, checkpoint, episodes, greedy } => {
            let cfg = Config::load(&common.config)?;
            let specs = policy
                .iter()
                .map(|p| spec(p, checkpoint.as_ref(), greedy))
                .collect::<Result<Vec<_>, _>>()?;
            let seeds: Vec<u64> = (0..episodes).map(|i| episode_seed(common.seed, i)).collect();
            let c = harness::cli_compare(&cfg, &specs, &seeds, &common.out)?;
            for s in &c.summary {
                println!(
                    "{:>8}  thr {:.4e} bits  ltcad {:.3} slots  G {:.5}",
                    s.policy, s.throughput_mean_bits, s.ltcad_mean_slots, s.utility_mean
                );
            }
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:+.2}%"));
            for p in c.pairs.iter().filter(|p| p.policy_a != p.policy_b) {
                println!(
                    "{:>8} vs {:<8} throughput {:>9}  ltcad {:>9}",
                    p.policy_a,
                    p.policy_b,
                    fmt(p.throughput_delta_pct),
                    fmt(p.ltcad_delta_pct)
                );
            }
            if !c.common_random_numbers {
                eprintln!("warning: arrival sequences differed between policies");
            }
        }
        Command::DumpChannel { common, slots } => {
            let cfg = Config::load(&common.config)?;
            let p = harness::cli_dump_channel(&cfg, slots, &common.out)?;
            let scn = Scenario::build(&cfg)?;
            println!("{}", p.display());
            println!(
                "realised 3 dB beamwidth {:.3} deg",
                2.0 * scn.antenna().half_power_angle().to_degrees()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
