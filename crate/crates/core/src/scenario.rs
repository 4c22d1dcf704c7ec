//! Immutable world description: satellite tracks, ground cells, coverage
//! sets, link constants and episode parameters.
//!
//! Geometry lives in a local frame anchored at the service-area centre: `x`
//! east, `y` north, `z` up. With the spherical earth model the Earth's centre
//! sits at `(0, 0, -EARTH_RADIUS_M)`; with the flat model the ground is `z = 0`.

use serde::{Deserialize, Serialize};

use crate::channel;
use crate::config::{Config, EarthModel, Motion};
use crate::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Standard gravitational parameter of the Earth, m^3/s^2.
pub const EARTH_MU: f64 = 3.986_004_418e14;
pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}
pub(crate) fn unit(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Angle between two vectors, accurate near 0 and pi.
pub(crate) fn angle_between(a: Vec3, b: Vec3) -> f64 {
    norm(cross(a, b)).atan2(dot(a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPoint {
    pub position: Vec3,
    /// Local vertical.
    pub up: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatelliteState {
    pub position: Vec3,
    /// Nadir-pointing unit vector.
    pub boresight: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub offset_m: [f64; 2],
    pub ground: GroundPoint,
}

/// Circular-orbit track: `u(t) = u0 cos(wt) + t0 sin(wt)` on the sphere of
/// radius `R_e + H`, or a straight line at orbital speed on the flat model.
#[derive(Debug, Clone, PartialEq)]
struct Track {
    offset_m: [f64; 2],
    heading_rad: f64,
    radial0: Vec3,
    along0: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n_satellites: usize,
    pub n_cells: usize,
    pub beams_per_satellite: usize,
    pub orbit_altitude_m: f64,
    pub earth_model: EarthModel,
    pub motion: Motion,
    pub carrier_hz: f64,
    pub wavelength_m: f64,
    pub bandwidth_hz: f64,
    pub total_power_w: f64,
    pub p_min_w: f64,
    pub p_max_w: f64,
    pub aperture_radius_m: f64,
    pub max_tx_gain_linear: f64,
    pub rx_gain_linear: f64,
    pub noise_temp_k: f64,
    pub noise_power_w: f64,
    pub slot_duration_s: f64,
    pub packet_bits: f64,
    pub ttl_slots: usize,
    pub queue_capacity_pkts: u64,
    pub cell_radius_m: f64,
    pub cells: Vec<Cell>,
    /// Sorted cell indices per satellite.
    pub coverage_sets: Vec<Vec<usize>>,
    pub arrival_rates: Option<Vec<Vec<f64>>>,
    pub rate_range_pkts: Option<[f64; 2]>,
    pub regime_period_slots: Option<usize>,
    pub episode_scale_range: [f64; 2],
    pub episode_slots: usize,
    pub alpha: f64,
    pub thr_norm: f64,
    pub delay_norm: f64,
    pub penalty_b_coeff: f64,
    pub penalty_p_coeff: f64,
    pub project_power: bool,
    pub normalize_state: bool,
    /// Orbital speed for the configured altitude, m/s (0 in static mode).
    pub track_speed_mps: f64,
    tracks: Vec<Track>,
    config: Config,
}

/// First `n` hexagon centres in spiral order (centre, ring 1, ring 2, ...),
/// pointy-top packing with circumradius `radius`.
pub fn hex_layout(n: usize, radius: f64) -> Vec<[f64; 2]> {
    const DIRS: [(i64, i64); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];
    let mut axial = Vec::with_capacity(n);
    if n > 0 {
        axial.push((0i64, 0i64));
    }
    let mut ring = 1i64;
    while axial.len() < n {
        let (mut q, mut r) = (DIRS[4].0 * ring, DIRS[4].1 * ring);
        'ring: for dir in DIRS {
            for _ in 0..ring {
                if axial.len() == n {
                    break 'ring;
                }
                axial.push((q, r));
                q += dir.0;
                r += dir.1;
            }
        }
        ring += 1;
    }
    let s3 = 3f64.sqrt();
    axial
        .into_iter()
        .map(|(q, r)| {
            let (q, r) = (q as f64, r as f64);
            [radius * s3 * (q + r / 2.0), radius * 1.5 * r]
        })
        .collect()
}

fn earth_center() -> Vec3 {
    [0.0, 0.0, -EARTH_RADIUS_M]
}

/// Unit radial vector of the surface point at local offset (east, north).
fn radial_for_offset(offset: [f64; 2]) -> Vec3 {
    let d = (offset[0] * offset[0] + offset[1] * offset[1]).sqrt();
    if d == 0.0 {
        return [0.0, 0.0, 1.0];
    }
    let psi = d / EARTH_RADIUS_M;
    let (s, c) = psi.sin_cos();
    [s * offset[0] / d, s * offset[1] / d, c]
}

fn ground_point(model: EarthModel, offset: [f64; 2]) -> GroundPoint {
    match model {
        EarthModel::Flat => GroundPoint {
            position: [offset[0], offset[1], 0.0],
            up: [0.0, 0.0, 1.0],
        },
        EarthModel::Spherical => {
            let u = radial_for_offset(offset);
            GroundPoint {
                position: add(earth_center(), scale(u, EARTH_RADIUS_M)),
                up: u,
            }
        }
    }
}

/// Circular orbital speed at altitude `h`: sqrt(mu / (R_e + h)).
pub fn orbital_speed(altitude_m: f64) -> f64 {
    (EARTH_MU / (EARTH_RADIUS_M + altitude_m)).sqrt()
}

/// Orbital period at altitude `h`, seconds.
pub fn orbital_period(altitude_m: f64) -> f64 {
    let r = EARTH_RADIUS_M + altitude_m;
    2.0 * std::f64::consts::PI * r / orbital_speed(altitude_m)
}

/// Slant range and off-axis (from boresight) angle from a satellite to a
/// ground point. Fails when the point sits at or below the local horizon.
pub fn slant_geometry(sat: &SatelliteState, ground: &GroundPoint) -> Result<(f64, f64)> {
    let to_cell = sub(ground.position, sat.position);
    let l = norm(to_cell);
    let elevation = (std::f64::consts::FRAC_PI_2 - angle_between(ground.up, scale(to_cell, -1.0)))
        .to_degrees();
    if elevation <= 0.0 {
        return Err(Error::Horizon {
            elevation_deg: elevation,
        });
    }
    let theta = angle_between(sat.boresight, to_cell);
    Ok((l, theta.min(std::f64::consts::FRAC_PI_2)))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Infeasible(format!("{name} must be positive, got {v}")))
    }
}

impl Scenario {
    pub fn build(config: &Config) -> Result<Self> {
        let cc = &config.constellation;
        let lc = &config.link;
        let tc = &config.traffic;
        let ec = &config.episode;

        let k = cc.beams_per_satellite;
        if k == 0 {
            return Err(Error::Infeasible("beams_per_satellite must be at least 1".into()));
        }
        if cc.n_satellites == 0 || cc.n_cells == 0 {
            return Err(Error::Infeasible("need at least one satellite and one cell".into()));
        }
        for (name, v) in [
            ("orbit_altitude_m", cc.orbit_altitude_m),
            ("cell_radius_m", cc.cell_radius_m),
            ("carrier_hz", lc.carrier_hz),
            ("bandwidth_hz", lc.bandwidth_hz),
            ("total_power_w", lc.total_power_w),
            ("aperture_radius_m", lc.aperture_radius_m),
            ("max_tx_gain_linear", lc.max_tx_gain_linear),
            ("rx_gain_linear", lc.rx_gain_linear),
            ("noise_temp_k", lc.noise_temp_k),
            ("slot_duration_s", ec.slot_duration_s),
            ("packet_bits", tc.packet_bits),
        ] {
            positive(name, v)?;
        }
        if tc.ttl_slots == 0 || tc.queue_capacity_pkts == 0 || ec.episode_slots == 0 {
            return Err(Error::Infeasible(
                "ttl_slots, queue_capacity_pkts and episode_slots must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&ec.alpha) {
            return Err(Error::Infeasible(format!("alpha {} outside [0, 1]", ec.alpha)));
        }
        if ec.penalty_b_coeff < 0.0 || ec.penalty_p_coeff < 0.0 {
            return Err(Error::Infeasible("penalty coefficients must be non-negative".into()));
        }

        let p_tot = lc.total_power_w;
        let p_min = lc.p_min_w.unwrap_or(p_tot / (4.0 * k as f64));
        let p_max = lc.p_max_w.unwrap_or((p_tot / 2.0).max(p_tot / k as f64));
        if !(p_min > 0.0 && p_min <= p_max && p_max <= p_tot) {
            return Err(Error::Infeasible(format!(
                "need 0 < P_min <= P_max <= P_tot, got {p_min} / {p_max} / {p_tot}"
            )));
        }
        if k as f64 * p_min > p_tot {
            return Err(Error::Infeasible(format!(
                "K * P_min = {} exceeds P_tot = {p_tot}",
                k as f64 * p_min
            )));
        }

        let offsets = match &cc.cell_offsets_m {
            Some(v) => v.clone(),
            None => hex_layout(cc.n_cells, cc.cell_radius_m),
        };
        if offsets.len() != cc.n_cells {
            return Err(Error::Infeasible(format!(
                "{} cell offsets for {} cells",
                offsets.len(),
                cc.n_cells
            )));
        }
        let cells: Vec<Cell> = offsets
            .iter()
            .map(|&o| Cell {
                offset_m: o,
                ground: ground_point(cc.earth_model, o),
            })
            .collect();

        if cc.satellite_offsets_m.len() != cc.n_satellites {
            return Err(Error::Infeasible(format!(
                "{} satellite offsets for {} satellites",
                cc.satellite_offsets_m.len(),
                cc.n_satellites
            )));
        }
        let headings = match &cc.track_heading_deg {
            Some(h) if h.len() != cc.n_satellites => {
                return Err(Error::Infeasible("one track heading per satellite".into()))
            }
            Some(h) => h.clone(),
            None => vec![0.0; cc.n_satellites],
        };
        let tracks: Vec<Track> = cc
            .satellite_offsets_m
            .iter()
            .zip(&headings)
            .map(|(&offset, &hdeg)| {
                let heading_rad = hdeg.to_radians();
                let radial0 = radial_for_offset(offset);
                let flat_dir = [heading_rad.cos(), heading_rad.sin(), 0.0];
                let along0 = unit(sub(flat_dir, scale(radial0, dot(flat_dir, radial0))));
                Track {
                    offset_m: offset,
                    heading_rad,
                    radial0,
                    along0,
                }
            })
            .collect();

        let track_speed_mps = match cc.motion {
            Motion::Static => 0.0,
            Motion::Orbital => orbital_speed(cc.orbit_altitude_m),
        };

        let wavelength_m = SPEED_OF_LIGHT / lc.carrier_hz;
        let mut scn = Scenario {
            n_satellites: cc.n_satellites,
            n_cells: cc.n_cells,
            beams_per_satellite: k,
            orbit_altitude_m: cc.orbit_altitude_m,
            earth_model: cc.earth_model,
            motion: cc.motion,
            carrier_hz: lc.carrier_hz,
            wavelength_m,
            bandwidth_hz: lc.bandwidth_hz,
            total_power_w: p_tot,
            p_min_w: p_min,
            p_max_w: p_max,
            aperture_radius_m: lc.aperture_radius_m,
            max_tx_gain_linear: lc.max_tx_gain_linear,
            rx_gain_linear: lc.rx_gain_linear,
            noise_temp_k: lc.noise_temp_k,
            noise_power_w: BOLTZMANN * lc.noise_temp_k * lc.bandwidth_hz,
            slot_duration_s: ec.slot_duration_s,
            packet_bits: tc.packet_bits,
            ttl_slots: tc.ttl_slots,
            queue_capacity_pkts: tc.queue_capacity_pkts,
            cell_radius_m: cc.cell_radius_m,
            cells,
            coverage_sets: Vec::new(),
            arrival_rates: tc.arrival_rates.clone(),
            rate_range_pkts: tc.rate_range_pkts,
            regime_period_slots: tc.regime_period_slots,
            episode_scale_range: tc.episode_scale_range,
            episode_slots: ec.episode_slots,
            alpha: ec.alpha,
            thr_norm: 0.0,
            delay_norm: 0.0,
            penalty_b_coeff: ec.penalty_b_coeff,
            penalty_p_coeff: ec.penalty_p_coeff,
            project_power: ec.project_power,
            normalize_state: ec.normalize_state,
            track_speed_mps,
            tracks,
            config: config.clone(),
        };

        scn.coverage_sets = scn.derive_coverage(cc.coverage_sets.as_deref(), cc.fov_half_angle_deg)?;
        let min_cov = scn.coverage_sets.iter().map(Vec::len).min().unwrap_or(0);
        if k > min_cov {
            return Err(Error::Infeasible(format!(
                "K = {k} exceeds the smallest coverage set ({min_cov} cells)"
            )));
        }
        let mut covered = vec![false; scn.n_cells];
        for set in &scn.coverage_sets {
            for &n in set {
                covered[n] = true;
            }
        }
        if let Some(n) = covered.iter().position(|c| !c) {
            return Err(Error::Infeasible(format!("cell {n} is not covered by any satellite")));
        }

        scn.validate_traffic()?;

        scn.delay_norm = ec.delay_norm.unwrap_or(scn.ttl_slots as f64);
        scn.thr_norm = match ec.thr_norm {
            Some(v) => v,
            None => {
                let sinr_ref = scn.p_max_w * scn.nadir_gain() / scn.noise_power_w;
                scn.n_satellites as f64
                    * k as f64
                    * scn.bandwidth_hz
                    * (1.0 + sinr_ref).log2()
                    * scn.slot_duration_s
            }
        };
        positive("thr_norm", scn.thr_norm)?;
        positive("delay_norm", scn.delay_norm)?;
        Ok(scn)
    }

    fn derive_coverage(
        &self,
        explicit: Option<&[Vec<usize>]>,
        fov_deg: Option<f64>,
    ) -> Result<Vec<Vec<usize>>> {
        let mut sets = match (explicit, fov_deg) {
            (Some(sets), _) => {
                if sets.len() != self.n_satellites {
                    return Err(Error::Infeasible(format!(
                        "{} coverage sets for {} satellites",
                        sets.len(),
                        self.n_satellites
                    )));
                }
                sets.to_vec()
            }
            (None, Some(fov)) => {
                let fov = fov.to_radians();
                (0..self.n_satellites)
                    .map(|i| {
                        let st = self.satellite_state_at(i, 0.0);
                        (0..self.n_cells)
                            .filter(|&n| match slant_geometry(&st, &self.cells[n].ground) {
                                Ok((_, theta)) => theta < fov,
                                Err(_) => false,
                            })
                            .collect()
                    })
                    .collect()
            }
            (None, None) => {
                return Err(Error::Schema(
                    "constellation needs coverage_sets or fov_half_angle_deg".into(),
                ))
            }
        };
        for (i, set) in sets.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if let Some(&bad) = set.iter().find(|&&n| n >= self.n_cells) {
                return Err(Error::Infeasible(format!(
                    "coverage set of satellite {i} names cell {bad} (only {} cells)",
                    self.n_cells
                )));
            }
            let st = self.satellite_state_at(i, 0.0);
            for &n in set.iter() {
                if slant_geometry(&st, &self.cells[n].ground).is_err() {
                    return Err(Error::Infeasible(format!(
                        "cell {n} in coverage set of satellite {i} is below its horizon"
                    )));
                }
            }
        }
        Ok(sets)
    }

    fn validate_traffic(&self) -> Result<()> {
        match (&self.arrival_rates, &self.rate_range_pkts) {
            (Some(rows), _) => {
                if rows.is_empty() {
                    return Err(Error::Infeasible("arrival_rates has no regimes".into()));
                }
                for row in rows {
                    if row.len() != self.n_cells {
                        return Err(Error::Infeasible(format!(
                            "arrival regime has {} rates for {} cells",
                            row.len(),
                            self.n_cells
                        )));
                    }
                    if row.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
                        return Err(Error::Infeasible("arrival rates must be finite and >= 0".into()));
                    }
                }
            }
            (None, Some([lo, hi])) => {
                if !(*lo >= 0.0 && lo <= hi && hi.is_finite()) {
                    return Err(Error::Infeasible(format!("bad rate range [{lo}, {hi}]")));
                }
            }
            (None, None) => {
                return Err(Error::Schema(
                    "traffic needs arrival_rates or rate_range_pkts".into(),
                ))
            }
        }
        let [lo, hi] = self.episode_scale_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Infeasible(format!("bad episode scale range [{lo}, {hi}]")));
        }
        if self.regime_period_slots == Some(0) {
            return Err(Error::Infeasible("regime_period_slots must be >= 1".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    /// SHA-256 of the canonical TOML rendering of the source configuration.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.config.to_toml_string().as_bytes()))
    }

    pub fn antenna(&self) -> channel::Antenna<f64> {
        channel::Antenna {
            max_gain: self.max_tx_gain_linear,
            aperture_radius_m: self.aperture_radius_m,
            wavelength_m: self.wavelength_m,
        }
    }

    /// Channel gain of an ideal nadir link: G_m * G_r * FSPL(H).
    pub fn nadir_gain(&self) -> f64 {
        self.max_tx_gain_linear
            * self.rx_gain_linear
            * channel::path_loss(self.orbit_altitude_m, self.wavelength_m)
                .expect("altitude validated positive")
    }

    /// Width of the observation vector: N_c queue lengths plus the N_s x N_c gains.
    pub fn observation_len(&self) -> usize {
        self.n_cells + self.n_satellites * self.n_cells
    }

    pub fn covers(&self, sat: usize, cell: usize) -> bool {
        self.coverage_sets[sat].binary_search(&cell).is_ok()
    }

    /// Satellite state after `time_s` seconds.
    pub fn satellite_state_at(&self, sat: usize, time_s: f64) -> SatelliteState {
        let tr = &self.tracks[sat];
        let h = self.orbit_altitude_m;
        match self.earth_model {
            EarthModel::Flat => {
                let d = self.track_speed_mps * time_s;
                SatelliteState {
                    position: [
                        tr.offset_m[0] + d * tr.heading_rad.cos(),
                        tr.offset_m[1] + d * tr.heading_rad.sin(),
                        h,
                    ],
                    boresight: [0.0, 0.0, -1.0],
                }
            }
            EarthModel::Spherical => {
                let r = EARTH_RADIUS_M + h;
                let phase = self.track_speed_mps / r * time_s;
                let (s, c) = phase.sin_cos();
                let u = add(scale(tr.radial0, c), scale(tr.along0, s));
                SatelliteState {
                    position: add(earth_center(), scale(u, r)),
                    boresight: scale(u, -1.0),
                }
            }
        }
    }

    pub fn satellite_position(&self, sat: usize, slot: usize) -> Result<SatelliteState> {
        if sat >= self.n_satellites {
            return Err(Error::Domain(format!(
                "satellite index {sat} out of range ({} satellites)",
                self.n_satellites
            )));
        }
        Ok(self.satellite_state_at(sat, slot as f64 * self.slot_duration_s))
    }

    /// Altitude of a satellite state above the reference surface.
    pub fn altitude_of(&self, st: &SatelliteState) -> f64 {
        match self.earth_model {
            EarthModel::Flat => st.position[2],
            EarthModel::Spherical => norm(sub(st.position, earth_center())) - EARTH_RADIUS_M,
        }
    }

    /// `(l, theta)` from satellite `sat` to cell `cell` at `slot`.
    pub fn cell_geometry(&self, sat: usize, cell: usize, slot: usize) -> Result<(f64, f64)> {
        if cell >= self.n_cells {
            return Err(Error::Domain(format!("cell index {cell} out of range")));
        }
        let st = self.satellite_position(sat, slot)?;
        slant_geometry(&st, &self.cells[cell].ground)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DESK_TOML;

    fn desk() -> Config {
        Config::from_toml_str(DESK_TOML).unwrap()
    }

    #[test]
    fn hex_layout_spacing() {
        let cells = hex_layout(7, 14_000.0);
        assert_eq!(cells[0], [0.0, 0.0]);
        let spacing = 14_000.0 * 3f64.sqrt();
        for c in &cells[1..] {
            let d = (c[0] * c[0] + c[1] * c[1]).sqrt();
            assert!((d - spacing).abs() < 1e-6, "{d}");
        }
        assert_eq!(hex_layout(161, 14_000.0).len(), 161);
    }

    #[test]
    fn zero_beams_is_infeasible() {
        let mut cfg = desk();
        cfg.constellation.beams_per_satellite = 0;
        assert!(matches!(Scenario::build(&cfg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn too_many_beams_is_infeasible() {
        let mut cfg = desk();
        cfg.constellation.beams_per_satellite = 7;
        assert!(matches!(Scenario::build(&cfg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn uncovered_cell_is_infeasible() {
        let mut cfg = desk();
        cfg.constellation.coverage_sets = Some(vec![vec![0, 1, 2, 3, 4, 5], vec![2, 3, 4, 5, 6]]);
        assert!(matches!(Scenario::build(&cfg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn power_split_infeasible() {
        let mut cfg = desk();
        cfg.link.p_min_w = Some(cfg.link.total_power_w);
        assert!(matches!(Scenario::build(&cfg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn power_defaults() {
        let scn = Scenario::build(&desk()).unwrap();
        let k = scn.beams_per_satellite as f64;
        assert_eq!(scn.p_min_w, scn.total_power_w / (4.0 * k));
        assert_eq!(scn.p_max_w, scn.total_power_w / 2.0);
    }

    #[test]
    fn desk_coverage_union_is_full() {
        let scn = Scenario::build(&desk()).unwrap();
        assert_eq!(scn.coverage_sets[0], vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(scn.coverage_sets[1], vec![2, 3, 4, 5, 6, 7]);
        let mut all: Vec<usize> = scn.coverage_sets.concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn fov_coverage_contains_nadir_cell() {
        let mut cfg = desk();
        cfg.constellation.coverage_sets = None;
        cfg.constellation.fov_half_angle_deg = Some(60.0);
        let scn = Scenario::build(&cfg).unwrap();
        assert!(scn.coverage_sets.iter().all(|s| s.len() == 8));
    }

    #[test]
    fn nadir_geometry() {
        let mut cfg = desk();
        cfg.constellation.satellite_offsets_m = vec![[0.0, 0.0], [0.0, 0.0]];
        cfg.constellation.cell_offsets_m.as_mut().unwrap()[0] = [0.0, 0.0];
        let scn = Scenario::build(&cfg).unwrap();
        let (l, theta) = scn.cell_geometry(0, 0, 0).unwrap();
        assert!((l - 550_000.0).abs() < 1e-6, "{l}");
        assert!(theta.abs() < 1e-12);
    }

    #[test]
    fn flat_earth_pythagoras() {
        let st = SatelliteState {
            position: [0.0, 0.0, 550_000.0],
            boresight: [0.0, 0.0, -1.0],
        };
        let g = ground_point(EarthModel::Flat, [100_000.0, 0.0]);
        let (l, theta) = slant_geometry(&st, &g).unwrap();
        // sqrt(550^2 + 100^2) km
        assert!((l - 559_016.994_374_947_4).abs() < 1e-6);
        assert!((theta - (100.0f64 / 550.0).atan()).abs() < 1e-12);
    }

    #[test]
    fn below_horizon_errors() {
        let st = SatelliteState {
            position: add(earth_center(), [0.0, 0.0, EARTH_RADIUS_M + 550_000.0]),
            boresight: [0.0, 0.0, -1.0],
        };
        // ~45 degrees of arc away: far beyond the horizon at 550 km.
        let g = ground_point(EarthModel::Spherical, [5_000_000.0, 0.0]);
        assert!(matches!(slant_geometry(&st, &g), Err(Error::Horizon { .. })));
    }

    #[test]
    fn orbital_speed_at_550km() {
        // v = sqrt(mu / (R_e + H)) = sqrt(3.986004418e14 / 6.921e6)
        let v = orbital_speed(550_000.0);
        assert!((v - 7589.05).abs() < 0.5, "{v}");
    }

    #[test]
    fn static_mode_is_frozen() {
        let scn = Scenario::build(&desk()).unwrap();
        let a = scn.satellite_position(1, 0).unwrap();
        let b = scn.satellite_position(1, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn orbital_mode_is_periodic_and_keeps_altitude() {
        let mut cfg = desk();
        cfg.constellation.motion = Motion::Orbital;
        cfg.constellation.track_heading_deg = Some(vec![30.0, 120.0]);
        let scn = Scenario::build(&cfg).unwrap();
        let period = orbital_period(scn.orbit_altitude_m);
        for sat in 0..2 {
            let s0 = scn.satellite_state_at(sat, 0.0);
            let s1 = scn.satellite_state_at(sat, period);
            let rel = norm(sub(s0.position, s1.position)) / norm(sub(s0.position, earth_center()));
            assert!(rel < 1e-6, "{rel}");
            for slot in [0usize, 10, 1000, 100_000] {
                let st = scn.satellite_position(sat, slot).unwrap();
                let alt = scn.altitude_of(&st);
                assert!((alt / scn.orbit_altitude_m - 1.0).abs() < 0.01);
            }
        }
        let moved = scn.satellite_position(0, 500).unwrap();
        let start = scn.satellite_position(0, 0).unwrap();
        // 500 slots of 2 ms at ~7.59 km/s: a ~7.59 km chord.
        let arc = orbital_speed(scn.orbit_altitude_m) * 500.0 * scn.slot_duration_s;
        assert!((norm(sub(moved.position, start.position)) - arc).abs() < 1.0);
    }

    #[test]
    fn build_is_deterministic() {
        let a = Scenario::build(&desk()).unwrap();
        let b = Scenario::build(&desk()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
    }
}
