//! Slotted MDP over the beam-hopping system.
//!
//! Observation: `[Q_t (N_c packets), H_t row-major (N_s * N_c gains)]`.
//! Action: a beam pattern (K cells per satellite, each drawn from V_i) plus a
//! per-beam power. Reward per slot:
//! `alpha * thr / thr_norm - (1 - alpha) * delay / delay_norm - penalty_b - penalty_p`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{channel_matrix, ChannelMatrix};
use crate::linklayer::{apply_slot, BeamAssignment, LinkReport};
use crate::queueing::{AgeQueue, TrafficProcess};
use crate::scenario::Scenario;
use crate::{Error, Result};

/// Joint beam pattern and power allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridAction {
    /// `pattern[i][k]`: cell illuminated by beam k of satellite i.
    pub pattern: Vec<Vec<usize>>,
    /// `powers[i][k]`: watts on that beam.
    pub powers: Vec<Vec<f64>>,
    pub discrete_logprob: f64,
    pub continuous_logprob: f64,
}

/// Turn categorical picks (indices into each V_i) and raw powers into an
/// action. Powers are clamped to [P_min, P_max]; the per-satellite budget is
/// left to `penalty_p` unless the scenario asks for projection.
pub fn decode_action(
    scn: &Scenario,
    picks: &[Vec<usize>],
    raw_powers: &[Vec<f64>],
) -> Result<HybridAction> {
    let k = scn.beams_per_satellite;
    if picks.len() != scn.n_satellites || raw_powers.len() != scn.n_satellites {
        return Err(Error::Dimension(format!(
            "action for {} / {} satellites, scenario has {}",
            picks.len(),
            raw_powers.len(),
            scn.n_satellites
        )));
    }
    let mut pattern = Vec::with_capacity(scn.n_satellites);
    let mut powers = Vec::with_capacity(scn.n_satellites);
    for (i, (p, v)) in picks.iter().zip(raw_powers).enumerate() {
        if p.len() != k || v.len() != k {
            return Err(Error::Dimension(format!("satellite {i} needs {k} picks and powers")));
        }
        let cov = &scn.coverage_sets[i];
        let cells = p
            .iter()
            .map(|&idx| {
                cov.get(idx).copied().ok_or_else(|| {
                    Error::Domain(format!("pick {idx} outside V_{i} of size {}", cov.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut watts: Vec<f64> = v.iter().map(|&x| x.clamp(scn.p_min_w, scn.p_max_w)).collect();
        if scn.project_power {
            let total: f64 = watts.iter().sum();
            if total > scn.total_power_w {
                let f = scn.total_power_w / total;
                watts.iter_mut().for_each(|w| *w *= f);
            }
        }
        pattern.push(cells);
        powers.push(watts);
    }
    Ok(HybridAction {
        pattern,
        powers,
        discrete_logprob: 0.0,
        continuous_logprob: 0.0,
    })
}

/// `(penalty_b, penalty_p)`: beams beyond the first on any cell, and the
/// relative excess of each satellite's power over P_tot.
pub fn compute_penalties(a: &HybridAction, scn: &Scenario) -> (f64, f64) {
    let mut hits = vec![0usize; scn.n_cells];
    for cells in &a.pattern {
        for &c in cells {
            hits[c] += 1;
        }
    }
    let duplicates: usize = hits.iter().map(|&h| h.saturating_sub(1)).sum();
    let excess: f64 = a
        .powers
        .iter()
        .map(|v| (v.iter().sum::<f64>() - scn.total_power_w).max(0.0) / scn.total_power_w)
        .sum();
    (
        scn.penalty_b_coeff * duplicates as f64,
        scn.penalty_p_coeff * excess,
    )
}

/// Per-component running mean and variance (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningNorm {
    const CLIP: f64 = 10.0;

    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn update(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        x.iter()
            .zip(self.mean.iter().zip(&self.m2))
            .map(|(&v, (&m, &s))| {
                // Floor the scale relative to the mean so tiny-but-constant
                // channel gains map to 0 rather than amplified round-off.
                let denom = (s / n).sqrt().max(1e-6 * m.abs()).max(f64::MIN_POSITIVE);
                ((v - m) / denom).clamp(-Self::CLIP, Self::CLIP)
            })
            .collect()
    }
}

/// Raw observation `[Q_t, H_t]`.
pub fn raw_state(es: &EnvState) -> Vec<f64> {
    let mut v: Vec<f64> = es.queues.iter().map(|q| q.backlog() as f64).collect();
    v.extend_from_slice(&es.channel.gains);
    v
}

/// Observation encoder; owns the running statistics when normalisation is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEncoder {
    pub norm: Option<RunningNorm>,
    /// When frozen, statistics are used but no longer updated.
    pub frozen: bool,
}

impl StateEncoder {
    pub fn new(dim: usize, normalize: bool) -> Self {
        Self {
            norm: normalize.then(|| RunningNorm::new(dim)),
            frozen: false,
        }
    }

    pub fn encode_raw(&mut self, raw: &[f64]) -> Vec<f64> {
        match &mut self.norm {
            None => raw.to_vec(),
            Some(n) => {
                if !self.frozen {
                    n.update(raw);
                }
                n.normalize(raw)
            }
        }
    }

    pub fn encode_state(&mut self, es: &EnvState) -> Vec<f64> {
        self.encode_raw(&raw_state(es))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub slot: usize,
    pub queues: Vec<AgeQueue>,
    pub channel: ChannelMatrix,
    /// Sum of served bits over the episode.
    pub total_bits: f64,
    /// Sum over slots and cells of tau.
    pub delay_sum: f64,
    /// Number of (slot, cell) delay samples in `delay_sum`.
    pub delay_count: u64,
    pub dropped_total: u64,
    pub per_cell_arrived: Vec<u64>,
    pub per_cell_served_bits: Vec<f64>,
    pub per_cell_delay_sum: Vec<f64>,
    /// FNV-1a over every (slot, cell, arrivals) draw of the episode.
    pub arrival_checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub served_bits: Vec<f64>,
    pub served_pkts: Vec<u64>,
    pub tau: Vec<f64>,
    pub dropped: Vec<u64>,
    pub arrivals: Vec<u64>,
    pub penalty_b: f64,
    pub penalty_p: f64,
    /// Sum of served bits this slot.
    pub slot_throughput_bits: f64,
    /// Mean tau over cells this slot.
    pub slot_delay: f64,
    pub link: LinkReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Upsilon: total served bits.
    pub throughput_bits: f64,
    /// Gamma: long-term cumulative average delay, slots.
    pub ltcad_slots: f64,
    /// G = alpha * Upsilon / thr_norm_episode - (1 - alpha) * Gamma / delay_norm.
    pub utility: f64,
}

/// Utility G. Per-slot rewards normalise a single slot's throughput by
/// `thr_norm`; over an episode the same normaliser is scaled by the number
/// of slots so that both terms stay O(1).
pub fn utility(scn: &Scenario, throughput_bits: f64, ltcad_slots: f64, slots: usize) -> f64 {
    let slots = slots.max(1) as f64;
    scn.alpha * throughput_bits / (scn.thr_norm * slots)
        - (1.0 - scn.alpha) * ltcad_slots / scn.delay_norm
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv_mix(mut h: u64, value: u64) -> u64 {
    for b in value.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub struct Env {
    scn: Arc<Scenario>,
    state: EnvState,
    traffic: TrafficProcess,
    demand_scale: f64,
}

impl Env {
    pub fn new(scn: Arc<Scenario>) -> Self {
        let mut env = Self {
            state: Self::blank_state(&scn),
            traffic: TrafficProcess::constant(vec![0.0; scn.n_cells], 0),
            scn,
            demand_scale: 1.0,
        };
        env.reset(0);
        env
    }

    /// Multiply every arrival rate by `scale` (demand sweeps).
    pub fn with_demand_scale(mut self, scale: f64) -> Self {
        self.demand_scale = scale;
        self
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scn
    }

    pub fn scenario_arc(&self) -> Arc<Scenario> {
        Arc::clone(&self.scn)
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn traffic(&self) -> &TrafficProcess {
        &self.traffic
    }

    pub fn is_done(&self) -> bool {
        self.state.slot >= self.scn.episode_slots
    }

    fn blank_state(scn: &Scenario) -> EnvState {
        EnvState {
            slot: 0,
            queues: (0..scn.n_cells)
                .map(|_| AgeQueue::new(scn.ttl_slots, scn.queue_capacity_pkts))
                .collect(),
            channel: channel_matrix(scn, 0),
            total_bits: 0.0,
            delay_sum: 0.0,
            delay_count: 0,
            dropped_total: 0,
            per_cell_arrived: vec![0; scn.n_cells],
            per_cell_served_bits: vec![0.0; scn.n_cells],
            per_cell_delay_sum: vec![0.0; scn.n_cells],
            arrival_checksum: FNV_OFFSET,
        }
    }

    /// Start a new episode. The seed fixes the episode's traffic regime and
    /// its arrival stream; slot-0 arrivals are admitted before the first
    /// observation. Returns the raw observation.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        let scn = &self.scn;
        let mut setup = ChaCha8Rng::seed_from_u64(seed);
        let regimes = match (&scn.arrival_rates, scn.rate_range_pkts) {
            (Some(rows), _) => rows.clone(),
            (None, Some([lo, hi])) => vec![(0..scn.n_cells)
                .map(|_| if hi > lo { setup.random_range(lo..hi) } else { lo })
                .collect()],
            (None, None) => unreachable!("validated at scenario build"),
        };
        let [lo, hi] = scn.episode_scale_range;
        let episode_scale = if hi > lo { setup.random_range(lo..hi) } else { lo };
        let traffic_seed: u64 = setup.random();
        self.traffic = TrafficProcess::new(regimes, scn.regime_period_slots, traffic_seed)
            .with_scale(episode_scale * self.demand_scale);

        self.state = Self::blank_state(scn);
        for n in 0..scn.n_cells {
            let a = self.traffic.sample_arrivals(n, 0);
            self.state.arrival_checksum = fnv_mix(fnv_mix(self.state.arrival_checksum, n as u64), a);
            self.state.per_cell_arrived[n] += a;
            self.state.dropped_total += self.state.queues[n].advance_slot(a);
        }
        raw_state(&self.state)
    }

    pub fn observation(&self) -> Vec<f64> {
        raw_state(&self.state)
    }

    /// Advance one slot under `action`.
    pub fn step(&mut self, action: &HybridAction) -> Result<Transition> {
        let scn = Arc::clone(&self.scn);
        if self.is_done() {
            return Err(Error::EpisodeDone {
                slot: self.state.slot,
                horizon: scn.episode_slots,
            });
        }
        let assign = BeamAssignment::from_action(action, &scn)?;
        let (penalty_b, penalty_p) = compute_penalties(action, &scn);

        let st = &mut self.state;
        let link = apply_slot(&assign, &st.channel, &mut st.queues, &scn);

        let served_bits: Vec<f64> = link.cells.iter().map(|c| c.served_bits).collect();
        let served_pkts: Vec<u64> = link.cells.iter().map(|c| c.served_pkts).collect();
        let tau: Vec<f64> = st.queues.iter().map(AgeQueue::avg_delay).collect();
        let slot_throughput_bits: f64 = served_bits.iter().sum();
        let slot_delay = tau.iter().sum::<f64>() / scn.n_cells as f64;

        let reward = scn.alpha * slot_throughput_bits / scn.thr_norm
            - (1.0 - scn.alpha) * slot_delay / scn.delay_norm
            - penalty_b
            - penalty_p;

        st.total_bits += slot_throughput_bits;
        st.delay_sum += tau.iter().sum::<f64>();
        st.delay_count += scn.n_cells as u64;
        for n in 0..scn.n_cells {
            st.per_cell_served_bits[n] += served_bits[n];
            st.per_cell_delay_sum[n] += tau[n];
        }

        let next = st.slot + 1;
        let mut dropped = Vec::with_capacity(scn.n_cells);
        let mut arrivals = Vec::with_capacity(scn.n_cells);
        for n in 0..scn.n_cells {
            let a = self.traffic.sample_arrivals(n, next);
            st.arrival_checksum = fnv_mix(fnv_mix(st.arrival_checksum, n as u64), a);
            st.per_cell_arrived[n] += a;
            let d = st.queues[n].advance_slot(a);
            st.dropped_total += d;
            dropped.push(d);
            arrivals.push(a);
        }
        st.slot = next;
        if scn.motion != crate::config::Motion::Static {
            st.channel = channel_matrix(&scn, next);
        } else {
            st.channel.slot = next;
        }

        Ok(Transition {
            observation: raw_state(st),
            reward,
            done: st.slot >= scn.episode_slots,
            info: StepInfo {
                served_bits,
                served_pkts,
                tau,
                dropped,
                arrivals,
                penalty_b,
                penalty_p,
                slot_throughput_bits,
                slot_delay,
                link,
            },
        })
    }

    /// Episode throughput, LTCAD and utility so far.
    pub fn episode_metrics(&self) -> EpisodeMetrics {
        let st = &self.state;
        let slots = st.slot;
        let ltcad = if slots == 0 {
            0.0
        } else {
            st.delay_sum / (slots as f64 * self.scn.n_cells as f64)
        };
        EpisodeMetrics {
            throughput_bits: st.total_bits,
            ltcad_slots: ltcad,
            utility: utility(&self.scn, st.total_bits, ltcad, slots),
        }
    }
}

/// Anything that can drive the environment one slot at a time.
pub trait Scheduler {
    fn id(&self) -> String;
    fn act(&mut self, env: &Env) -> Result<HybridAction>;
    /// Called at every episode start.
    fn on_reset(&mut self, _episode_seed: u64) {}
}

/// Roll a full episode with `policy` and return its metrics.
pub fn run_episode(env: &mut Env, policy: &mut dyn Scheduler, seed: u64) -> Result<(EpisodeMetrics, f64)> {
    env.reset(seed);
    policy.on_reset(seed);
    let mut total_reward = 0.0;
    while !env.is_done() {
        let a = policy.act(env)?;
        total_reward += env.step(&a)?.reward;
    }
    Ok((env.episode_metrics(), total_reward))
}
