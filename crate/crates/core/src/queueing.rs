//! Per-cell age-bucketed FIFO queues with TTL expiry and Poisson arrivals.
//!
//! A slot is processed as: serve from the current backlog (oldest first),
//! then age every bucket by one slot (dropping what passes the TTL), then
//! admit the slot's arrivals at age 1 up to the remaining capacity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeQueue {
    /// `buckets[l - 1]` holds the packets that have waited `l` slots.
    buckets: Vec<u64>,
    capacity: u64,
    backlog: u64,
    pub cum_arrived: u64,
    pub cum_served: u64,
    pub cum_dropped: u64,
}

impl AgeQueue {
    pub fn new(ttl_slots: usize, capacity_pkts: u64) -> Self {
        assert!(ttl_slots >= 1, "ttl must be at least one slot");
        Self {
            buckets: vec![0; ttl_slots],
            capacity: capacity_pkts,
            backlog: 0,
            cum_arrived: 0,
            cum_served: 0,
            cum_dropped: 0,
        }
    }

    pub fn ttl(&self) -> usize {
        self.buckets.len()
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Q: total packets waiting.
    pub fn backlog(&self) -> u64 {
        self.backlog
    }

    pub fn is_empty(&self) -> bool {
        self.backlog == 0
    }

    /// Packets that have waited `age` slots (1-based).
    pub fn bucket(&self, age: usize) -> u64 {
        self.buckets[age - 1]
    }

    pub fn buckets(&self) -> &[u64] {
        &self.buckets
    }

    /// Serve up to `packet_budget` packets, oldest bucket first. Returns L.
    pub fn serve(&mut self, packet_budget: u64) -> u64 {
        let mut remaining = packet_budget.min(self.backlog);
        let served = remaining;
        for b in self.buckets.iter_mut().rev() {
            if remaining == 0 {
                break;
            }
            let take = (*b).min(remaining);
            *b -= take;
            remaining -= take;
        }
        self.backlog -= served;
        self.cum_served += served;
        served
    }

    /// Age the queue by one slot and admit `arrivals`. Returns D, the packets
    /// dropped by TTL expiry plus those refused for lack of capacity.
    pub fn advance_slot(&mut self, arrivals: u64) -> u64 {
        let expired = self.buckets.pop().expect("ttl >= 1");
        self.buckets.insert(0, 0);
        self.backlog -= expired;

        let admitted = arrivals.min(self.capacity - self.backlog);
        self.buckets[0] = admitted;
        self.backlog += admitted;

        let dropped = expired + (arrivals - admitted);
        self.cum_arrived += arrivals;
        self.cum_dropped += dropped;
        dropped
    }

    /// Mean waiting time tau in slots; 0 for an empty queue.
    pub fn avg_delay(&self) -> f64 {
        if self.backlog == 0 {
            return 0.0;
        }
        let weighted: f64 = self
            .buckets
            .iter()
            .enumerate()
            .map(|(i, &c)| (i + 1) as f64 * c as f64)
            .sum();
        weighted / self.backlog as f64
    }

    /// `cum_arrived == cum_served + cum_dropped + backlog`.
    pub fn is_conserved(&self) -> bool {
        self.cum_arrived == self.cum_served + self.cum_dropped + self.backlog
    }
}

/// Per-cell Poisson arrival process with optional regime switching.
#[derive(Debug, Clone)]
pub struct TrafficProcess {
    /// One row of per-cell rates (packets/slot) per regime.
    regimes: Vec<Vec<f64>>,
    regime_period_slots: Option<usize>,
    scale: f64,
    rng: ChaCha8Rng,
}

impl TrafficProcess {
    pub fn new(regimes: Vec<Vec<f64>>, regime_period_slots: Option<usize>, seed: u64) -> Self {
        assert!(!regimes.is_empty(), "at least one regime");
        Self {
            regimes,
            regime_period_slots,
            scale: 1.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Single-regime process.
    pub fn constant(rates: Vec<f64>, seed: u64) -> Self {
        Self::new(vec![rates], None, seed)
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        assert!(scale >= 0.0);
        self.scale = scale;
        self
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// rho_t^n in packets per slot.
    pub fn rate(&self, cell: usize, slot: usize) -> f64 {
        let regime = match self.regime_period_slots {
            Some(p) => (slot / p) % self.regimes.len(),
            None => 0,
        };
        self.regimes[regime][cell] * self.scale
    }

    /// Draw A_t^n ~ Poisson(rho_t^n) from the process's own stream.
    pub fn sample_arrivals(&mut self, cell: usize, slot: usize) -> u64 {
        let rate = self.rate(cell, slot);
        if rate <= 0.0 {
            return 0;
        }
        let dist = Poisson::new(rate).expect("positive finite rate");
        dist.sample(&mut self.rng) as u64
    }
}
