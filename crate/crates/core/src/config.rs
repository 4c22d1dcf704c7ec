//! TOML configuration schema.
//!
//! Units follow the field names: meters, hertz, watts, kelvin, seconds, bits.
//! Cell indices are zero-based everywhere in the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub constellation: ConstellationConfig,
    pub link: LinkConfig,
    pub traffic: TrafficConfig,
    pub episode: EpisodeConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EarthModel {
    #[default]
    Spherical,
    /// Flat ground plane; used for closed-form geometry checks.
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    /// Geometry frozen at slot 0.
    #[default]
    Static,
    /// Circular orbit advancing along the configured ground track.
    Orbital,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationConfig {
    pub n_satellites: usize,
    pub n_cells: usize,
    pub beams_per_satellite: usize,
    pub orbit_altitude_m: f64,
    #[serde(default)]
    pub earth_model: EarthModel,
    #[serde(default)]
    pub motion: Motion,
    /// Hexagonal cell circumradius.
    pub cell_radius_m: f64,
    /// Explicit (east, north) cell centres; hexagonal spiral packing when absent.
    #[serde(default)]
    pub cell_offsets_m: Option<Vec<[f64; 2]>>,
    /// (east, north) sub-satellite point of each satellite at slot 0.
    pub satellite_offsets_m: Vec<[f64; 2]>,
    /// Direction of travel per satellite, degrees counter-clockwise from east.
    #[serde(default)]
    pub track_heading_deg: Option<Vec<f64>>,
    /// Explicit coverage sets V_i.
    #[serde(default)]
    pub coverage_sets: Option<Vec<Vec<usize>>>,
    /// Derive V_i from the slot-0 off-axis angle instead.
    #[serde(default)]
    pub fov_half_angle_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub total_power_w: f64,
    #[serde(default)]
    pub p_min_w: Option<f64>,
    #[serde(default)]
    pub p_max_w: Option<f64>,
    pub aperture_radius_m: f64,
    pub max_tx_gain_linear: f64,
    #[serde(default = "one")]
    pub rx_gain_linear: f64,
    pub noise_temp_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficConfig {
    #[serde(default = "default_packet_bits")]
    pub packet_bits: f64,
    #[serde(default = "default_ttl")]
    pub ttl_slots: usize,
    #[serde(default = "default_capacity")]
    pub queue_capacity_pkts: u64,
    /// Fixed per-cell Poisson rates in packets/slot, one row per regime.
    #[serde(default)]
    pub arrival_rates: Option<Vec<Vec<f64>>>,
    /// Draw each cell's rate uniformly from this range once per episode.
    #[serde(default)]
    pub rate_range_pkts: Option<[f64; 2]>,
    /// Slots spent in each regime row before switching to the next.
    #[serde(default)]
    pub regime_period_slots: Option<usize>,
    /// Per-episode multiplier drawn uniformly from this range.
    #[serde(default = "unit_range")]
    pub episode_scale_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub episode_slots: usize,
    pub slot_duration_s: f64,
    #[serde(default = "half")]
    pub alpha: f64,
    /// Throughput normaliser in bits; derived from the link budget when absent.
    #[serde(default)]
    pub thr_norm: Option<f64>,
    /// Delay normaliser in slots; `ttl_slots` when absent.
    #[serde(default)]
    pub delay_norm: Option<f64>,
    #[serde(default = "default_penalty")]
    pub penalty_b_coeff: f64,
    #[serde(default = "default_penalty")]
    pub penalty_p_coeff: f64,
    /// Rescale powers onto the P_tot budget instead of penalising the excess.
    #[serde(default)]
    pub project_power: bool,
    #[serde(default = "yes")]
    pub normalize_state: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub lr_policy: f64,
    pub lr_critic: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub episodes: usize,
    pub buffer_capacity: usize,
    pub entropy_coeff: f64,
    pub hidden: Vec<usize>,
    /// Global gradient-norm clip; `None` disables it.
    pub max_grad_norm: Option<f64>,
    pub log_std_init: f64,
    pub log_std_bounds: [f64; 2],
    pub shared_critic: bool,
    pub value_coeff: f64,
    /// Write a checkpoint every N episodes (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.4,
            lr_policy: 3e-4,
            lr_critic: 3e-4,
            minibatch: 32,
            epochs: 10,
            episodes: 10_000,
            buffer_capacity: 2048,
            entropy_coeff: 0.01,
            hidden: vec![64, 64],
            max_grad_norm: Some(0.5),
            log_std_init: 0.0,
            log_std_bounds: [-5.0, 1.0],
            shared_critic: false,
            value_coeff: 0.5,
            checkpoint_every: 0,
        }
    }
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}
fn unit_range() -> [f64; 2] {
    [1.0, 1.0]
}
fn default_packet_bits() -> f64 {
    100_000.0
}
fn default_ttl() -> usize {
    50
}
fn default_capacity() -> u64 {
    5000
}
fn default_penalty() -> f64 {
    0.005
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Two-satellite, eight-cell configuration used by tests and the quick-start.
pub const DESK_TOML: &str = include_str!("../../../configs/desk.toml");
/// Full-scale parameter set: 5 satellites, 161 cells, K = 8.
pub const TABLE2_TOML: &str = include_str!("../../../configs/table2.toml");
