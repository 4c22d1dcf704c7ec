//! Experiment orchestration behind the `beamhop` binary: training runs,
//! demand sweeps, common-random-numbers comparisons and channel dumps, plus
//! the CSV/JSON files they leave behind.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{PolicyKind, SchedulerPolicy};
use crate::channel::channel_matrix;
use crate::env::{run_episode, Env, Scheduler};
use crate::ppo::{ActionMode, Agent, EpisodeLog};
use crate::scenario::Scenario;
use crate::{Config, Error, Result};

/// Environment variable capping worker threads for sweeps and comparisons.
pub const THREADS_ENV: &str = "BEAMHOP_THREADS";

pub const TRAIN_LOG_FILE: &str = "training_log.csv";
pub const CHECKPOINT_FILE: &str = "agent.json";
pub const RESULT_FILE: &str = "result.json";

/// Worker count from `BEAMHOP_THREADS`; `None` lets rayon decide.
pub fn thread_limit() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Schema(format!("{THREADS_ENV} must be a positive integer, got {s:?}"))),
        },
    }
}

fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_limit()? {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Schema(format!("thread pool: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Per-cell series of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerCell {
    pub demand_bits: Vec<f64>,
    pub served_bits: Vec<f64>,
    pub ltcad_slots: Vec<f64>,
}

impl PerCell {
    pub fn from_env(env: &Env) -> Self {
        let st = env.state();
        let scn = env.scenario();
        let slots = st.slot.max(1) as f64;
        Self {
            demand_bits: st.per_cell_arrived.iter().map(|&a| a as f64 * scn.packet_bits).collect(),
            served_bits: st.per_cell_served_bits.clone(),
            ltcad_slots: st.per_cell_delay_sum.iter().map(|d| d / slots).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub scenario_digest: String,
    pub policy: String,
    pub seed: u64,
    pub demand_scale: f64,
    pub episode_rewards: Vec<f64>,
    pub episode_throughput_bits: Vec<f64>,
    pub episode_ltcad_slots: Vec<f64>,
    pub episode_utility: Vec<f64>,
    /// Offered load of each episode in bits.
    pub episode_demand_bits: Vec<f64>,
    /// FNV-1a digest of each episode's arrival draws.
    pub arrival_checksums: Vec<u64>,
    /// Series of the final episode.
    pub per_cell: PerCell,
    pub wall_clock_s: f64,
}

impl ExperimentResult {
    fn empty(scn: &Scenario, policy: &str, seed: u64, demand_scale: f64) -> Self {
        Self {
            scenario_digest: scn.digest(),
            policy: policy.into(),
            seed,
            demand_scale,
            episode_rewards: Vec::new(),
            episode_throughput_bits: Vec::new(),
            episode_ltcad_slots: Vec::new(),
            episode_utility: Vec::new(),
            episode_demand_bits: Vec::new(),
            arrival_checksums: Vec::new(),
            per_cell: PerCell {
                demand_bits: vec![0.0; scn.n_cells],
                served_bits: vec![0.0; scn.n_cells],
                ltcad_slots: vec![0.0; scn.n_cells],
            },
            wall_clock_s: 0.0,
        }
    }

    fn record_env(&mut self, env: &Env) {
        self.per_cell = PerCell::from_env(env);
        self.episode_demand_bits.push(self.per_cell.demand_bits.iter().sum());
        self.arrival_checksums.push(env.state().arrival_checksum);
    }

    pub fn episodes(&self) -> usize {
        self.episode_rewards.len()
    }
}

/// Which scheduler to run.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Baseline(PolicyKind),
    /// Trained agent loaded from a checkpoint.
    Ppo { checkpoint: PathBuf, mode: ActionMode },
}

impl PolicySpec {
    pub fn parse(name: &str, checkpoint: Option<&Path>) -> Result<Self> {
        if name == "ppo" {
            let checkpoint = checkpoint
                .ok_or_else(|| Error::Schema("--policy ppo needs --checkpoint".into()))?
                .to_path_buf();
            return Ok(Self::Ppo { checkpoint, mode: ActionMode::Sample });
        }
        Ok(Self::Baseline(name.parse()?))
    }

    pub fn name(&self) -> String {
        match self {
            Self::Baseline(k) => k.name().into(),
            Self::Ppo { .. } => "ppo".into(),
        }
    }

    /// Fresh scheduler instance, checked against `scn`.
    pub fn instantiate(&self, scn: &Scenario) -> Result<Box<dyn Scheduler + Send>> {
        match self {
            Self::Baseline(k) => Ok(Box::new(SchedulerPolicy::new(*k))),
            Self::Ppo { checkpoint, mode } => {
                let mut a = Agent::<f64>::load(checkpoint, 0)?;
                a.check_compatible(scn)?;
                a.encoder.frozen = true;
                a.mode = *mode;
                Ok(Box::new(a))
            }
        }
    }
}

/// Seed of evaluation episode `i` under master seed `seed`; shared by every
/// policy and demand scale so comparisons use common random numbers.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_word_pos(2 * i as u128);
    r.random()
}

/// Roll `episodes` evaluation episodes of one policy at one demand scale.
pub fn evaluate_policy(
    scn: &Arc<Scenario>,
    policy: &mut dyn Scheduler,
    demand_scale: f64,
    episodes: usize,
    seed: u64,
) -> Result<ExperimentResult> {
    let t0 = Instant::now();
    let mut res = ExperimentResult::empty(scn, &policy.id(), seed, demand_scale);
    let mut env = Env::new(Arc::clone(scn)).with_demand_scale(demand_scale);
    for i in 0..episodes {
        let (m, reward) = run_episode(&mut env, policy, episode_seed(seed, i))?;
        res.episode_rewards.push(reward);
        res.episode_throughput_bits.push(m.throughput_bits);
        res.episode_ltcad_slots.push(m.ltcad_slots);
        res.episode_utility.push(m.utility);
        res.record_env(&env);
    }
    res.wall_clock_s = t0.elapsed().as_secs_f64();
    Ok(res)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// One row of a demand sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    pub demand_scale: f64,
    pub episodes: usize,
    /// Mean offered load in bits per episode.
    pub demand_bits: f64,
    pub throughput_mean_bits: f64,
    pub throughput_std_bits: f64,
    pub ltcad_mean_slots: f64,
    pub ltcad_std_slots: f64,
    pub utility_mean: f64,
    pub utility_std: f64,
}

impl SweepRow {
    pub fn from_result(r: &ExperimentResult, demand_bits: f64) -> Self {
        let (tm, ts) = mean_std(&r.episode_throughput_bits);
        let (dm, ds) = mean_std(&r.episode_ltcad_slots);
        let (um, us) = mean_std(&r.episode_utility);
        Self {
            policy: r.policy.clone(),
            demand_scale: r.demand_scale,
            episodes: r.episodes(),
            demand_bits,
            throughput_mean_bits: tm,
            throughput_std_bits: ts,
            ltcad_mean_slots: dm,
            ltcad_std_slots: ds,
            utility_mean: um,
            utility_std: us,
        }
    }
}

/// Ten evenly spaced demand multipliers, 0.2 to 2.0.
pub fn default_demand_scales() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * 0.2).collect()
}

/// Demand sweep: every scale runs the same episode seeds.
pub fn demand_sweep(
    scn: &Arc<Scenario>,
    spec: &PolicySpec,
    scales: &[f64],
    episodes: usize,
    seed: u64,
) -> Result<(Vec<SweepRow>, Vec<ExperimentResult>)> {
    let results: Vec<ExperimentResult> = pool()?.install(|| {
        scales
            .par_iter()
            .map(|&s| {
                let mut p = spec.instantiate(scn)?;
                evaluate_policy(scn, p.as_mut(), s, episodes, seed)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows = results
        .iter()
        .map(|r| SweepRow::from_result(r, mean_std(&r.episode_demand_bits).0))
        .collect();
    Ok((rows, results))
}

/// Files written by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpisodeLog>,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub result_path: PathBuf,
}

/// Train an agent on `cfg` and write the log, checkpoint and result into `out`.
pub fn cli_train(cfg: &Config, seed: u64, out: &Path, episodes: Option<usize>) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    if let Some(ep) = episodes {
        cfg.ppo.episodes = ep;
    }
    let scn = Arc::new(Scenario::build(&cfg)?);
    std::fs::create_dir_all(out)?;
    let t0 = Instant::now();
    let mut agent = Agent::<f64>::new(&scn, &cfg.ppo, seed)?;
    let mut env = Env::new(Arc::clone(&scn));
    let every = cfg.ppo.checkpoint_every;
    let mut res = ExperimentResult::empty(&scn, "ppo", seed, 1.0);
    let log = agent.train_with(&mut env, seed, |row, a, env| {
        res.record_env(env);
        if every > 0 && (row.episode + 1) % every == 0 {
            a.save(&out.join(format!("agent_ep{:06}.json", row.episode + 1)))?;
        }
        Ok(())
    })?;
    agent.encoder.frozen = true;

    let log_path = out.join(TRAIN_LOG_FILE);
    write_csv(&log_path, &log)?;
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    agent.save(&checkpoint_path)?;

    for r in &log {
        res.episode_rewards.push(r.reward);
        res.episode_throughput_bits.push(r.throughput_bits);
        res.episode_ltcad_slots.push(r.ltcad_slots);
        res.episode_utility.push(crate::env::utility(&scn, r.throughput_bits, r.ltcad_slots, scn.episode_slots));
    }
    res.wall_clock_s = t0.elapsed().as_secs_f64();
    let result_path = out.join(RESULT_FILE);
    write_json(&result_path, &res)?;
    Ok(TrainOutcome { log, log_path, checkpoint_path, result_path })
}

/// Evaluate one policy over a demand sweep; writes `sweep_<policy>.csv` and
/// `evaluate_<policy>.json`.
pub fn cli_evaluate(
    cfg: &Config,
    spec: &PolicySpec,
    scales: &[f64],
    episodes: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    let scn = Arc::new(Scenario::build(cfg)?);
    std::fs::create_dir_all(out)?;
    let (rows, results) = demand_sweep(&scn, spec, scales, episodes, seed)?;
    let name = spec.name();
    write_csv(&out.join(format!("sweep_{name}.csv")), &rows)?;
    write_json(&out.join(format!("evaluate_{name}.json")), &results)?;
    Ok(rows)
}

/// Per-policy means of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub policy: String,
    pub episodes: usize,
    pub throughput_mean_bits: f64,
    pub ltcad_mean_slots: f64,
    pub utility_mean: f64,
    pub utility_median: f64,
}

/// Relative differences `(A - B) / B` in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub policy_a: String,
    pub policy_b: String,
    pub throughput_delta_pct: Option<f64>,
    pub ltcad_delta_pct: Option<f64>,
    pub utility_delta_pct: Option<f64>,
}

pub fn pct_delta(a: f64, b: f64) -> Option<f64> {
    if a == b {
        Some(0.0)
    } else if b == 0.0 {
        None
    } else {
        Some((a - b) / b * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub results: Vec<ExperimentResult>,
    pub summary: Vec<CompareSummary>,
    pub pairs: Vec<PairRow>,
    /// Every policy saw identical arrival sequences.
    pub common_random_numbers: bool,
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Run every policy on the same per-seed episodes (one episode per seed).
pub fn compare(scn: &Arc<Scenario>, specs: &[PolicySpec], seeds: &[u64]) -> Result<Comparison> {
    if specs.len() < 2 {
        return Err(Error::Schema("compare needs at least two policies".into()));
    }
    let results: Vec<ExperimentResult> = pool()?.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let t0 = Instant::now();
                let mut p = spec.instantiate(scn)?;
                let mut res = ExperimentResult::empty(scn, &spec.name(), seeds.first().copied().unwrap_or(0), 1.0);
                let mut env = Env::new(Arc::clone(scn));
                for &s in seeds {
                    let (m, reward) = run_episode(&mut env, p.as_mut(), s)?;
                    res.episode_rewards.push(reward);
                    res.episode_throughput_bits.push(m.throughput_bits);
                    res.episode_ltcad_slots.push(m.ltcad_slots);
                    res.episode_utility.push(m.utility);
                    res.record_env(&env);
                }
                res.wall_clock_s = t0.elapsed().as_secs_f64();
                Ok(res)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let crn = results.windows(2).all(|w| w[0].arrival_checksums == w[1].arrival_checksums);
    let summary: Vec<CompareSummary> = results
        .iter()
        .map(|r| CompareSummary {
            policy: r.policy.clone(),
            episodes: r.episodes(),
            throughput_mean_bits: mean_std(&r.episode_throughput_bits).0,
            ltcad_mean_slots: mean_std(&r.episode_ltcad_slots).0,
            utility_mean: mean_std(&r.episode_utility).0,
            utility_median: median(&r.episode_utility),
        })
        .collect();
    let mut pairs = Vec::new();
    for a in &summary {
        for b in &summary {
            pairs.push(PairRow {
                policy_a: a.policy.clone(),
                policy_b: b.policy.clone(),
                throughput_delta_pct: pct_delta(a.throughput_mean_bits, b.throughput_mean_bits),
                ltcad_delta_pct: pct_delta(a.ltcad_mean_slots, b.ltcad_mean_slots),
                utility_delta_pct: pct_delta(a.utility_mean, b.utility_mean),
            });
        }
    }
    Ok(Comparison {
        seeds: seeds.to_vec(),
        results,
        summary,
        pairs,
        common_random_numbers: crn,
    })
}

/// Compare and write `compare_summary.csv`, `compare_pairs.csv` and
/// `compare.json`.
pub fn cli_compare(cfg: &Config, specs: &[PolicySpec], seeds: &[u64], out: &Path) -> Result<Comparison> {
    let scn = Arc::new(Scenario::build(cfg)?);
    std::fs::create_dir_all(out)?;
    let c = compare(&scn, specs, seeds)?;
    write_csv(&out.join("compare_summary.csv"), &c.summary)?;
    write_csv(&out.join("compare_pairs.csv"), &c.pairs)?;
    write_json(&out.join("compare.json"), &c)?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRow {
    pub slot: usize,
    pub satellite: usize,
    pub cell: usize,
    /// Linear power gain h = G_t * L * G_r.
    pub gain: f64,
}

/// H_t for slots `0..slots`, long format.
pub fn channel_rows(scn: &Scenario, slots: usize) -> Vec<ChannelRow> {
    let mut rows = Vec::with_capacity(slots * scn.n_satellites * scn.n_cells);
    for t in 0..slots {
        let h = channel_matrix(scn, t);
        for i in 0..scn.n_satellites {
            for (n, &g) in h.row(i).iter().enumerate() {
                rows.push(ChannelRow { slot: t, satellite: i, cell: n, gain: g });
            }
        }
    }
    rows
}

pub fn cli_dump_channel(cfg: &Config, slots: usize, out: &Path) -> Result<PathBuf> {
    let scn = Scenario::build(cfg)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("channel.csv");
    write_csv(&path, &channel_rows(&scn, slots))?;
    Ok(path)
}
