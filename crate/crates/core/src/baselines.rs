//! Heuristic schedulers: throughput-, delay- and weight-priority top-K, and
//! a uniform random floor. Every one splits P_tot evenly over its K beams and
//! picks per satellite independently, so cross-satellite duplicates can occur
//! in overlap regions.

use std::cmp::Ordering;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, HybridAction, Scheduler};
use crate::queueing::AgeQueue;
use crate::scenario::Scenario;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Tp,
    Dp,
    Uswgp,
    Random,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tp => "tp",
            Self::Dp => "dp",
            Self::Uswgp => "uswgp",
            Self::Random => "random",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tp" => Ok(Self::Tp),
            "dp" => Ok(Self::Dp),
            "uswgp" => Ok(Self::Uswgp),
            "random" => Ok(Self::Random),
            _ => Err(Error::Schema(format!("unknown policy {s:?}"))),
        }
    }
}

/// The `k` cells of `cells` with the largest `key[cell]`; ties go to the
/// lower cell index. Returned best first.
pub fn top_k(key: &[f64], cells: &[usize], k: usize) -> Vec<usize> {
    let rank = |a: &usize, b: &usize| key[*b].total_cmp(&key[*a]).then(a.cmp(b));
    let mut v = cells.to_vec();
    let k = k.min(v.len());
    if k == 0 {
        return Vec::new();
    }
    if k < v.len() {
        v.select_nth_unstable_by(k - 1, rank);
        v.truncate(k);
    }
    v.sort_unstable_by(rank);
    v
}

fn even_split(scn: &Scenario, pattern: Vec<Vec<usize>>) -> HybridAction {
    let k = scn.beams_per_satellite;
    let each = scn.total_power_w / k as f64;
    HybridAction {
        powers: vec![vec![each; k]; pattern.len()],
        pattern,
        discrete_logprob: 0.0,
        continuous_logprob: 0.0,
    }
}

fn by_key(key: &[f64], scn: &Scenario) -> HybridAction {
    let pattern = scn
        .coverage_sets
        .iter()
        .map(|cov| top_k(key, cov, scn.beams_per_satellite))
        .collect();
    even_split(scn, pattern)
}

/// Largest backlog first.
pub fn tp_bh(queues: &[AgeQueue], scn: &Scenario) -> HybridAction {
    let key: Vec<f64> = queues.iter().map(|q| q.backlog() as f64).collect();
    by_key(&key, scn)
}

/// Largest average delay first.
pub fn dp_bh(queues: &[AgeQueue], scn: &Scenario) -> HybridAction {
    let key: Vec<f64> = queues.iter().map(AgeQueue::avg_delay).collect();
    by_key(&key, scn)
}

/// Service weight `w_q * Q / capacity + w_d * tau / T_ttl`.
pub fn uswgp_weight(backlog: f64, tau: f64, capacity: f64, ttl: f64, w_q: f64, w_d: f64) -> f64 {
    w_q * backlog / capacity + w_d * tau / ttl
}

pub fn uswgp_bh(queues: &[AgeQueue], scn: &Scenario, w_q: f64, w_d: f64) -> HybridAction {
    let key: Vec<f64> = queues
        .iter()
        .map(|q| {
            uswgp_weight(
                q.backlog() as f64,
                q.avg_delay(),
                q.capacity() as f64,
                q.ttl() as f64,
                w_q,
                w_d,
            )
        })
        .collect();
    by_key(&key, scn)
}

/// Uniform K-subset of each coverage set.
pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, scn: &Scenario) -> HybridAction {
    let k = scn.beams_per_satellite;
    let pattern = scn
        .coverage_sets
        .iter()
        .map(|cov| {
            let mut idx = rand::seq::index::sample(rng, cov.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| cov[i]).collect()
        })
        .collect();
    even_split(scn, pattern)
}

/// A baseline as a [`Scheduler`].
#[derive(Debug, Clone)]
pub struct SchedulerPolicy {
    pub kind: PolicyKind,
    pub w_q: f64,
    pub w_d: f64,
    rng: ChaCha8Rng,
}

impl SchedulerPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            w_q: 0.5,
            w_d: 0.5,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn uswgp(w_q: f64, w_d: f64) -> Self {
        Self { w_q, w_d, ..Self::new(PolicyKind::Uswgp) }
    }

    pub fn decide(&mut self, queues: &[AgeQueue], scn: &Scenario) -> HybridAction {
        match self.kind {
            PolicyKind::Tp => tp_bh(queues, scn),
            PolicyKind::Dp => dp_bh(queues, scn),
            PolicyKind::Uswgp => uswgp_bh(queues, scn, self.w_q, self.w_d),
            PolicyKind::Random => random_policy(&mut self.rng, scn),
        }
    }
}

impl Scheduler for SchedulerPolicy {
    fn id(&self) -> String {
        self.kind.name().into()
    }

    fn act(&mut self, env: &Env) -> Result<HybridAction> {
        Ok(self.decide(&env.state().queues, env.scenario()))
    }

    fn on_reset(&mut self, episode_seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(episode_seed ^ 0x0bad_5eed);
    }
}

/// Full-sort reference for [`top_k`], used by tests and the evaluator's
/// self-check.
pub fn top_k_by_full_sort(key: &[f64], cells: &[usize], k: usize) -> Vec<usize> {
    let mut v: Vec<(f64, usize)> = cells.iter().map(|&c| (key[c], c)).collect();
    v.sort_by(|a, b| match b.0.partial_cmp(&a.0) {
        Some(Ordering::Equal) | None => a.1.cmp(&b.1),
        Some(o) => o,
    });
    v.into_iter().take(k).map(|(_, c)| c).collect()
}
