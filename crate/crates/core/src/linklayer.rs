//! SINR, Shannon rate and per-slot service under full frequency reuse.
//!
//! Every active beam radiates through its satellite's antenna pattern, so a
//! victim cell `n` receives beam `(j, k)` with power `p_{j,k} * h_{j,n}`. The
//! serving beam of a cell is the strongest beam aimed at it; every other
//! active beam in the system counts as interference.

use serde::{Deserialize, Serialize};

use crate::channel::ChannelMatrix;
use crate::env::HybridAction;
use crate::queueing::AgeQueue;
use crate::scenario::{Scenario, BOLTZMANN};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub cell: usize,
    pub power_w: f64,
}

/// Active beams per satellite. A satellite may aim two beams at one cell;
/// both radiate, and the duplicate is pure interference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamAssignment {
    pub beams: Vec<Vec<Beam>>,
}

impl BeamAssignment {
    pub fn new(beams: Vec<Vec<Beam>>, scn: &Scenario) -> Result<Self> {
        if beams.len() != scn.n_satellites {
            return Err(Error::Dimension(format!(
                "{} beam lists for {} satellites",
                beams.len(),
                scn.n_satellites
            )));
        }
        for (i, list) in beams.iter().enumerate() {
            if list.len() > scn.beams_per_satellite {
                return Err(Error::Domain(format!(
                    "satellite {i} has {} beams, K = {}",
                    list.len(),
                    scn.beams_per_satellite
                )));
            }
            for b in list {
                if !scn.covers(i, b.cell) {
                    return Err(Error::Domain(format!(
                        "satellite {i} cannot illuminate cell {}",
                        b.cell
                    )));
                }
                if !(b.power_w >= 0.0 && b.power_w <= scn.p_max_w) {
                    return Err(Error::Domain(format!(
                        "beam power {} W outside [0, {}]",
                        b.power_w, scn.p_max_w
                    )));
                }
            }
        }
        Ok(Self { beams })
    }

    pub fn from_action(action: &HybridAction, scn: &Scenario) -> Result<Self> {
        let beams = action
            .pattern
            .iter()
            .zip(&action.powers)
            .map(|(cells, powers)| {
                cells
                    .iter()
                    .zip(powers)
                    .map(|(&cell, &power_w)| Beam { cell, power_w })
                    .collect()
            })
            .collect();
        Self::new(beams, scn)
    }

    /// x_{i,n}: whether satellite `sat` has any beam on `cell`.
    pub fn x(&self, sat: usize, cell: usize) -> bool {
        self.beams[sat].iter().any(|b| b.cell == cell)
    }

    /// p_{i,n}: total power satellite `sat` puts on `cell`.
    pub fn p(&self, sat: usize, cell: usize) -> f64 {
        self.beams[sat].iter().filter(|b| b.cell == cell).map(|b| b.power_w).sum()
    }

    pub fn is_illuminated(&self, cell: usize) -> bool {
        self.beams.iter().any(|l| l.iter().any(|b| b.cell == cell))
    }

    /// `(satellite, beam index)` of every beam aimed at `cell`.
    pub fn beams_on(&self, cell: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.beams.iter().enumerate().flat_map(move |(i, l)| {
            l.iter()
                .enumerate()
                .filter(move |(_, b)| b.cell == cell)
                .map(move |(k, _)| (i, k))
        })
    }

    pub fn active_beams(&self) -> usize {
        self.beams.iter().map(Vec::len).sum()
    }
}

/// Thermal noise k_B * T * B in watts.
pub fn noise_power<T: Scalar>(temp_k: T, bandwidth_hz: T) -> T {
    T::lit(BOLTZMANN) * temp_k * bandwidth_hz
}

/// signal / (noise + sum of interference).
pub fn sinr_from_terms<T: Scalar>(signal: T, interference: &[T], noise: T) -> T {
    let total: T = interference.iter().copied().sum();
    signal / (noise + total)
}

/// Shannon rate B * log2(1 + SINR) in bit/s.
pub fn rate<T: Scalar>(sinr: T, bandwidth_hz: T) -> T {
    bandwidth_hz * (T::one() + sinr).log2()
}

/// SINR at `victim` if beam `(sat, idx)` serves it.
pub fn beam_sinr(
    assign: &BeamAssignment,
    h: &ChannelMatrix,
    scn: &Scenario,
    sat: usize,
    idx: usize,
    victim: usize,
) -> f64 {
    let signal = assign.beams[sat][idx].power_w * h.get(sat, victim);
    let mut interference = 0.0;
    for (j, list) in assign.beams.iter().enumerate() {
        for (k, b) in list.iter().enumerate() {
            if j == sat && k == idx {
                continue;
            }
            interference += b.power_w * h.get(j, victim);
        }
    }
    signal / (scn.noise_power_w + interference)
}

/// Serving beam of `cell` with its SINR: the highest-SINR beam aimed at the
/// cell, lowest (satellite, beam) index on ties.
pub fn serving_beam(
    assign: &BeamAssignment,
    h: &ChannelMatrix,
    scn: &Scenario,
    cell: usize,
) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, k) in assign.beams_on(cell) {
        let s = beam_sinr(assign, h, scn, i, k, cell);
        if best.is_none_or(|(_, _, b)| s > b) {
            best = Some((i, k, s));
        }
    }
    best
}

pub fn compute_sinr(
    assign: &BeamAssignment,
    h: &ChannelMatrix,
    scn: &Scenario,
    cell: usize,
) -> Result<f64> {
    serving_beam(assign, h, scn, cell)
        .map(|(_, _, s)| s)
        .ok_or(Error::NotServed(cell))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLink {
    pub serving_satellite: Option<usize>,
    pub sinr: f64,
    pub rate_bps: f64,
    /// T_t^n = min(kappa R T_slot, Q o).
    pub served_bits: f64,
    /// L_t^n, whole packets removed from the queue.
    pub served_pkts: u64,
    pub kappa: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub cells: Vec<CellLink>,
}

impl LinkReport {
    pub fn total_bits(&self) -> f64 {
        self.cells.iter().map(|c| c.served_bits).sum()
    }

    pub fn total_pkts(&self) -> u64 {
        self.cells.iter().map(|c| c.served_pkts).sum()
    }
}

/// Evaluate every cell's link and drain the served packets from `queues`.
pub fn apply_slot(
    assign: &BeamAssignment,
    h: &ChannelMatrix,
    queues: &mut [AgeQueue],
    scn: &Scenario,
) -> LinkReport {
    // SINRs depend only on the assignment, so fix them before touching queues.
    let serving: Vec<_> = (0..scn.n_cells)
        .map(|n| serving_beam(assign, h, scn, n))
        .collect();
    let cells = serving
        .into_iter()
        .zip(queues.iter_mut())
        .map(|(serve, q)| match serve {
            Some((sat, _, sinr)) => {
                let r = rate(sinr, scn.bandwidth_hz);
                let slot_bits = r * scn.slot_duration_s;
                let backlog = q.backlog();
                let budget = (slot_bits / scn.packet_bits).floor() as u64;
                let served_pkts = q.serve(budget);
                CellLink {
                    serving_satellite: Some(sat),
                    sinr,
                    rate_bps: r,
                    served_bits: slot_bits.min(backlog as f64 * scn.packet_bits),
                    served_pkts,
                    kappa: true,
                }
            }
            None => CellLink {
                serving_satellite: None,
                sinr: 0.0,
                rate_bps: 0.0,
                served_bits: 0.0,
                served_pkts: 0,
                kappa: false,
            },
        })
        .collect();
    LinkReport { cells }
}
