//! Antenna pattern, free-space loss and the per-slot channel gain matrix.

use serde::{Deserialize, Serialize};

use crate::scenario::Scenario;
use crate::{Error, Result, Scalar};

/// Below this argument J1 is summed from its power series; above it the
/// Hankel asymptotic expansion takes over. Both sides stay under 1e-12
/// absolute error in f64.
const J1_SERIES_LIMIT: f64 = 12.0;

/// Bessel function of the first kind, order one.
pub fn bessel_j1<T: Scalar>(x: T) -> T {
    if x < T::zero() {
        return -bessel_j1(-x);
    }
    if x < T::lit(J1_SERIES_LIMIT) {
        j1_series(x)
    } else {
        j1_asymptotic(x)
    }
}

// Summed in f64 whatever T is: the alternating terms cancel heavily near the
// switch point and single precision would lose ~5 digits there.
fn j1_series<T: Scalar>(x: T) -> T {
    let half = x.as_f64() / 2.0;
    let h2 = half * half;
    let mut term = half;
    let mut sum = term;
    let mut k = 1.0;
    for _ in 0..60 {
        term = -term * h2 / (k * (k + 1.0));
        sum += term;
        if term.abs() <= f64::EPSILON * 1e-2 * sum.abs().max(1e-300) {
            break;
        }
        k += 1.0;
    }
    T::lit(sum)
}

fn j1_asymptotic<T: Scalar>(x: T) -> T {
    // mu = 4 nu^2 = 4; a_k = prod_j (mu - (2j-1)^2) / (k! (8x)^k)
    let mu = T::lit(4.0);
    let z = T::lit(8.0) * x;
    let mut p = T::one();
    let mut q = T::zero();
    let mut a = T::one();
    let mut prev = T::infinity();
    for k in 1..60u32 {
        let odd = T::lit(f64::from(2 * k - 1));
        a = a * (mu - odd * odd) / (T::lit(f64::from(k)) * z);
        if a.abs() >= prev {
            break;
        }
        prev = a.abs();
        let sign = if (k / 2) % 2 == 0 { T::one() } else { -T::one() };
        if k % 2 == 1 {
            // (-1)^((k-1)/2)
            let s = if ((k - 1) / 2) % 2 == 0 { T::one() } else { -T::one() };
            q += s * a;
        } else {
            p += sign * a;
        }
        if a.abs() < T::epsilon() * T::lit(1e-2) {
            break;
        }
    }
    let pi = T::lit(std::f64::consts::PI);
    let w = x - T::lit(0.75) * pi;
    (T::lit(2.0) / (pi * x)).sqrt() * (p * w.cos() - q * w.sin())
}

/// Circular-aperture spot-beam antenna.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Antenna<T> {
    /// Boresight gain G_m, linear.
    pub max_gain: T,
    pub aperture_radius_m: T,
    pub wavelength_m: T,
}

impl<T: Scalar> Antenna<T> {
    /// Pattern argument u = (2 pi a / lambda) sin(theta).
    pub fn pattern_arg(&self, theta: T) -> T {
        T::lit(2.0 * std::f64::consts::PI) * self.aperture_radius_m / self.wavelength_m
            * theta.sin()
    }

    /// Normalised pattern |2 J1(u) / u|^2, equal to 1 at boresight.
    pub fn normalized_gain(&self, theta: T) -> Result<T> {
        check_angle(theta)?;
        if theta == T::zero() {
            return Ok(T::one());
        }
        Ok(airy(self.pattern_arg(theta)))
    }

    /// Transmit gain G_m * g(theta), linear.
    pub fn tx_gain(&self, theta: T) -> Result<T> {
        Ok(self.max_gain * self.normalized_gain(theta)?)
    }

    /// Off-axis angle where the normalised pattern falls to one half.
    pub fn half_power_angle(&self) -> T {
        let k = T::lit(2.0 * std::f64::consts::PI) * self.aperture_radius_m / self.wavelength_m;
        let u = half_power_u::<T>();
        if u >= k {
            // Aperture too small for the main lobe to fall to -3 dB before 90 deg.
            return T::lit(std::f64::consts::FRAC_PI_2);
        }
        (u / k).asin()
    }
}

/// |2 J1(u) / u|^2 with its u -> 0 limit.
pub fn airy<T: Scalar>(u: T) -> T {
    if u == T::zero() {
        return T::one();
    }
    let r = T::lit(2.0) * bessel_j1(u) / u;
    r * r
}

/// Argument u at which |2 J1(u)/u|^2 = 1/2, by bisection on the first lobe.
pub fn half_power_u<T: Scalar>() -> T {
    let (mut lo, mut hi) = (T::lit(1e-9), T::lit(3.8));
    for _ in 0..200 {
        let mid = (lo + hi) / T::lit(2.0);
        if airy(mid) > T::lit(0.5) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo + hi) / T::lit(2.0)
}

fn check_angle<T: Scalar>(theta: T) -> Result<()> {
    if theta.is_nan() || theta < T::zero() || theta > T::lit(std::f64::consts::FRAC_PI_2) {
        return Err(Error::Domain(format!("off-axis angle {theta} outside [0, pi/2]")));
    }
    Ok(())
}

/// Free-space loss (lambda / (4 pi l))^2 as a linear power gain.
pub fn path_loss<T: Scalar>(distance_m: T, wavelength_m: T) -> Result<T> {
    if !(distance_m > T::zero()) {
        return Err(Error::Domain(format!("distance {distance_m} must be positive")));
    }
    let r = wavelength_m / (T::lit(4.0 * std::f64::consts::PI) * distance_m);
    Ok(r * r)
}

pub fn to_db<T: Scalar>(linear: T) -> T {
    T::lit(10.0) * linear.log10()
}

pub fn from_db<T: Scalar>(db: T) -> T {
    T::lit(10.0).powf(db / T::lit(10.0))
}

/// Linear channel gain h = G_t(theta) * L * G_r between satellite `sat` and
/// cell `cell` at `slot`; zero when the cell is outside the satellite's
/// coverage set or below its horizon.
pub fn channel_gain(scn: &Scenario, sat: usize, cell: usize, slot: usize) -> f64 {
    if !scn.covers(sat, cell) {
        return 0.0;
    }
    match scn.cell_geometry(sat, cell, slot) {
        Ok((l, theta)) => {
            let g = scn.antenna().tx_gain(theta).expect("visible off-axis angle is in range");
            let loss = path_loss(l, scn.wavelength_m).expect("slant range is positive");
            g * loss * scn.rx_gain_linear
        }
        Err(_) => 0.0,
    }
}

/// N_s x N_c channel gains for one slot, row-major by satellite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMatrix {
    pub slot: usize,
    pub n_satellites: usize,
    pub n_cells: usize,
    pub gains: Vec<f64>,
    pub wavelength_m: f64,
}

impl ChannelMatrix {
    #[inline]
    pub fn get(&self, sat: usize, cell: usize) -> f64 {
        self.gains[sat * self.n_cells + cell]
    }

    pub fn row(&self, sat: usize) -> &[f64] {
        &self.gains[sat * self.n_cells..(sat + 1) * self.n_cells]
    }

    /// CSV rendering: one row per satellite, one column per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("satellite");
        for n in 0..self.n_cells {
            out.push_str(&format!(",cell_{n}"));
        }
        out.push('\n');
        for i in 0..self.n_satellites {
            out.push_str(&i.to_string());
            for g in self.row(i) {
                out.push_str(&format!(",{g:e}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn channel_matrix(scn: &Scenario, slot: usize) -> ChannelMatrix {
    let mut gains = Vec::with_capacity(scn.n_satellites * scn.n_cells);
    for i in 0..scn.n_satellites {
        for n in 0..scn.n_cells {
            gains.push(channel_gain(scn, i, n, slot));
        }
    }
    ChannelMatrix {
        slot,
        n_satellites: scn.n_satellites,
        n_cells: scn.n_cells,
        gains,
        wavelength_m: scn.wavelength_m,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, DESK_TOML};
    use proptest::prelude::*;

    /// J1(x) = (1/pi) * integral_0^pi cos(t - x sin t) dt, trapezoid rule on
    /// the periodic integrand (spectrally accurate).
    fn j1_integral(x: f64) -> f64 {
        let n = 400;
        let h = std::f64::consts::PI / n as f64;
        let f = |t: f64| (t - x * t.sin()).cos();
        let mut s = 0.5 * (f(0.0) + f(std::f64::consts::PI));
        for i in 1..n {
            s += f(i as f64 * h);
        }
        s * h / std::f64::consts::PI
    }

    fn table2_antenna() -> Antenna<f64> {
        Antenna {
            max_gain: from_db(35.9),
            aperture_radius_m: 0.15,
            wavelength_m: crate::scenario::SPEED_OF_LIGHT / 12.4e9,
        }
    }

    #[test]
    fn j1_matches_integral_oracle() {
        let mut worst = 0.0f64;
        for i in 0..4000 {
            let x = i as f64 * 0.01;
            worst = worst.max((bessel_j1(x) - j1_integral(x)).abs());
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn j1_tabulated_roots() {
        for root in [3.831_705_970_207_512, 7.015_586_669_815_619, 10.173_468_135_062_722, 13.323_691_936_314_223] {
            assert!(bessel_j1::<f64>(root).abs() < 1e-10, "{root}");
        }
    }

    #[test]
    fn j1_single_precision_tracks_double() {
        for i in 0..300 {
            let x = i as f64 * 0.13;
            let d = (f64::from(bessel_j1(x as f32)) - bessel_j1(x)).abs();
            assert!(d < 1e-5, "{x}: {d}");
        }
    }

    #[test]
    fn boresight_gain_is_max() {
        let a = table2_antenna();
        assert_eq!(a.normalized_gain(0.0).unwrap(), 1.0);
        assert_eq!(a.tx_gain(0.0).unwrap(), a.max_gain);
    }

    #[test]
    fn first_null() {
        let a = table2_antenna();
        let k = 2.0 * std::f64::consts::PI * a.aperture_radius_m / a.wavelength_m;
        let theta = (3.831_705_970_207_512 / k).asin();
        assert!(a.tx_gain(theta).unwrap() < 1e-6 * a.max_gain);
    }

    #[test]
    fn half_power_point() {
        let u = half_power_u::<f64>();
        assert!((airy(u) - 0.5).abs() < 1e-12);
        assert!((u - 1.616_339_948).abs() < 1e-6, "{u}");
        let a = table2_antenna();
        // Realised -3 dB full width at 12.4 GHz with a 0.15 m aperture.
        let full = 2.0 * a.half_power_angle().to_degrees();
        assert!((full - 4.75).abs() < 0.01, "{full}");
        assert!((a.normalized_gain(a.half_power_angle()).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn angle_out_of_range() {
        let a = table2_antenna();
        assert!(matches!(a.tx_gain(-0.1), Err(Error::Domain(_))));
        assert!(matches!(a.tx_gain(2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn fspl_550km() {
        let lambda = crate::scenario::SPEED_OF_LIGHT / 12.4e9;
        assert!((lambda - 0.024_177).abs() < 1e-5);
        let db = to_db(path_loss(550e3, lambda).unwrap());
        let oracle = -20.0 * (4.0 * std::f64::consts::PI * 550e3 / lambda).log10();
        assert!((db - oracle).abs() < 1e-9);
        assert!((db + 169.1).abs() < 0.05, "{db}");
    }

    #[test]
    fn fspl_doubling_and_identity() {
        let lambda = 0.024;
        let a: f64 = to_db(path_loss(1000.0, lambda).unwrap());
        let b: f64 = to_db(path_loss(2000.0, lambda).unwrap());
        assert!((b - a + 6.020_599_913).abs() < 1e-8);
        let unity = path_loss(lambda / (4.0 * std::f64::consts::PI), lambda).unwrap();
        assert!((unity - 1.0).abs() < 1e-15);
        assert!(path_loss(0.0, lambda).is_err());
        assert!(path_loss(-1.0, lambda).is_err());
    }

    fn desk_scenario() -> Scenario {
        Scenario::build(&Config::from_toml_str(DESK_TOML).unwrap()).unwrap()
    }

    #[test]
    fn nadir_channel_gain_db() {
        let mut cfg = Config::from_toml_str(DESK_TOML).unwrap();
        cfg.constellation.cell_offsets_m.as_mut().unwrap()[2] = [-12124.4, 0.0];
        let scn = Scenario::build(&cfg).unwrap();
        let h = to_db(channel_gain(&scn, 0, 2, 0));
        assert!((h - (35.9 - 169.1)).abs() < 0.06, "{h}");
    }

    #[test]
    fn outside_coverage_is_zero() {
        let scn = desk_scenario();
        assert_eq!(channel_gain(&scn, 0, 7, 0), 0.0);
        assert_eq!(channel_gain(&scn, 1, 0, 0), 0.0);
        assert!(channel_gain(&scn, 0, 0, 0) > 0.0);
    }

    #[test]
    fn gain_is_linear_in_max_gain() {
        let mut cfg = Config::from_toml_str(DESK_TOML).unwrap();
        let base = channel_gain(&Scenario::build(&cfg).unwrap(), 0, 3, 0);
        cfg.link.max_tx_gain_linear *= 2.0;
        let doubled = channel_gain(&Scenario::build(&cfg).unwrap(), 0, 3, 0);
        assert!((doubled / base - 2.0).abs() < 1e-14);
    }

    #[test]
    fn matrix_matches_scalar_calls() {
        let scn = desk_scenario();
        let m = channel_matrix(&scn, 3);
        for i in 0..scn.n_satellites {
            assert!(m.row(i).iter().any(|&g| g > 0.0));
            for n in 0..scn.n_cells {
                assert_eq!(m.get(i, n), channel_gain(&scn, i, n, 3));
            }
        }
        assert_eq!(channel_matrix(&scn, 0), channel_matrix(&scn, 0));
        // static geometry: identical gains at every slot
        assert_eq!(channel_matrix(&scn, 0).gains, channel_matrix(&scn, 99).gains);
    }

    #[test]
    fn csv_dump_shape() {
        let m = channel_matrix(&desk_scenario(), 0);
        let csv = m.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].split(',').count(), 9);
    }

    proptest! {
        #[test]
        fn pattern_never_exceeds_boresight(theta in 1e-9f64..std::f64::consts::FRAC_PI_2) {
            let g = table2_antenna().normalized_gain(theta).unwrap();
            prop_assert!(g < 1.0);
            prop_assert!(g >= 0.0);
        }

        #[test]
        fn main_lobe_is_non_increasing(a in 0.0f64..3.83, b in 0.0f64..3.83) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(airy(lo) >= airy(hi));
        }

        #[test]
        fn path_loss_decreasing(l in 1.0f64..1e7, f in 1.0001f64..10.0) {
            prop_assert!(path_loss(l * f, 0.024).unwrap() < path_loss(l, 0.024).unwrap());
        }
    }
}
