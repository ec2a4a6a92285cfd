//! Decoupled PI control for the dc-voltage station.
//!
//! Inner loops track converter currents with feed-forward of the filter
//! voltage and cancellation of the dq cross-coupling. Outer loops produce the
//! current references from the dc-voltage and reactive-power errors.

use serde::{Deserialize, Serialize};

use crate::params::{require_non_negative, require_positive, ConfigError, StationParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiGains {
    pub kp: f64,
    /// 1/s
    pub ki: f64,
    /// Output saturation (pu), symmetric.
    pub limit: f64,
}

impl PiGains {
    fn validate(&self, field: &str) -> Result<(), ConfigError> {
        require_non_negative(&format!("{field}.kp"), self.kp)?;
        require_positive(&format!("{field}.ki"), self.ki)?;
        require_positive(&format!("{field}.limit"), self.limit)
    }
}

/// PI settings of the classic station. Gains left out of the config are
/// derived from the station parameters by [`PiSettings::resolve`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiSettings {
    /// Sample time (s).
    pub ts_pi: f64,
    pub inner: Option<PiGains>,
    pub dc_voltage: Option<PiGains>,
    pub reactive: Option<PiGains>,
    /// Back-calculation gain; the integral bleeds at `k_aw * ki * (sat - v)`.
    pub k_aw: f64,
    /// Inner-loop PI output limit used when `inner` is derived.
    pub inner_limit: f64,
    /// Outer dc-voltage loop limit used when `dc_voltage` is derived.
    pub dc_limit: f64,
    /// Outer reactive loop limit used when `reactive` is derived.
    pub q_limit: f64,
    /// Reactive-loop bandwidth as a fraction of the inner one.
    pub outer_ratio: f64,
    /// Dc-voltage loop crossover as a fraction of the inner bandwidth.
    pub dc_ratio: f64,
    /// Dc-voltage PI zero `ki / kp` (rad/s).
    pub dc_zero: f64,
}

impl Default for PiSettings {
    fn default() -> Self {
        PiSettings {
            ts_pi: 200e-6,
            inner: None,
            dc_voltage: None,
            reactive: None,
            k_aw: 1.0,
            inner_limit: 0.5,
            dc_limit: 1.0,
            q_limit: 1.0,
            outer_ratio: 0.1,
            dc_ratio: 0.5,
            dc_zero: 1.5,
        }
    }
}

/// Gains of all four loops after defaults are filled in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResolvedGains {
    pub inner: PiGains,
    pub dc_voltage: PiGains,
    pub reactive: PiGains,
}

impl PiSettings {
    /// Equivalent lag of sampling and computation delay.
    pub fn tau(&self) -> f64 {
        2.0 * self.ts_pi
    }

    /// Inner-loop closed-loop bandwidth (rad/s) of the derived gains.
    pub fn inner_bandwidth(&self) -> f64 {
        1.0 / (2.0 * self.tau())
    }

    /// Fills absent gains.
    ///
    /// Inner: the zero cancels the reactor pole `omega_b r_c / l_c` and the
    /// crossover sits at `1 / (2 tau)`. Dc voltage: proportional gain places
    /// the crossover of `omega_b / (c_dc s)` at `dc_ratio` times the inner
    /// bandwidth, with the zero at `dc_zero`. Reactive: integral action at
    /// `outer_ratio` times the inner bandwidth on the unit static gain from
    /// `i_lq` to `q`.
    pub fn resolve(&self, station: &StationParams, omega_b: f64) -> ResolvedGains {
        let tau = self.tau();
        let wc = self.outer_ratio * self.inner_bandwidth();
        let wdc = self.dc_ratio * self.inner_bandwidth();
        let inner = self.inner.unwrap_or(PiGains {
            kp: station.l_c / (omega_b * 2.0 * tau),
            ki: station.r_c / (2.0 * tau),
            limit: self.inner_limit,
        });
        let dc_voltage = self.dc_voltage.unwrap_or_else(|| {
            let kp = station.c_dc * wdc / omega_b;
            PiGains {
                kp,
                ki: kp * self.dc_zero,
                limit: self.dc_limit,
            }
        });
        let reactive = self.reactive.unwrap_or(PiGains {
            kp: 0.1,
            ki: wc,
            limit: self.q_limit,
        });
        ResolvedGains {
            inner,
            dc_voltage,
            reactive,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        require_positive("pi.ts_pi", self.ts_pi)?;
        require_non_negative("pi.k_aw", self.k_aw)?;
        require_positive("pi.inner_limit", self.inner_limit)?;
        require_positive("pi.dc_limit", self.dc_limit)?;
        require_positive("pi.q_limit", self.q_limit)?;
        require_positive("pi.outer_ratio", self.outer_ratio)?;
        require_positive("pi.dc_ratio", self.dc_ratio)?;
        require_positive("pi.dc_zero", self.dc_zero)?;
        if let Some(g) = &self.inner {
            g.validate("pi.inner")?;
        }
        if let Some(g) = &self.dc_voltage {
            g.validate("pi.dc_voltage")?;
        }
        if let Some(g) = &self.reactive {
            g.validate("pi.reactive")?;
        }
        Ok(())
    }
}

/// One saturating PI with back-calculation anti-windup.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PiState {
    pub gains: PiGains,
    pub k_aw: f64,
    /// Accumulated error (pu s).
    pub integral: f64,
}

impl PiState {
    pub fn new(gains: PiGains, k_aw: f64) -> Self {
        PiState {
            gains,
            k_aw,
            integral: 0.0,
        }
    }

    /// Output the integral alone would produce.
    pub fn integral_output(&self) -> f64 {
        self.gains.ki * self.integral
    }

    /// Sets the integral so that a zero error yields `output`.
    pub fn preload(&mut self, output: f64) {
        self.integral = output / self.gains.ki;
    }

    /// Saturated output for `error`; advances the integral by `dt`.
    ///
    /// While saturated the error is not integrated in the saturating
    /// direction, and the back-calculation term pulls the integral back.
    pub fn step(&mut self, error: f64, dt: f64) -> f64 {
        let g = self.gains;
        let v = g.kp * error + g.ki * self.integral;
        let sat = v.clamp(-g.limit, g.limit);
        let winding = (v > g.limit && error > 0.0) || (v < -g.limit && error < 0.0);
        if !winding {
            self.integral += dt * error;
        }
        self.integral += dt * self.k_aw * (sat - v);
        sat
    }
}

/// Inner d and q current loops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InnerLoops {
    pub d: PiState,
    pub q: PiState,
}

/// Decoupled current control: PI plus filter-voltage feed-forward and
/// cross-coupling cancellation.
pub fn inner_current_step(
    loops: &mut InnerLoops,
    i_l: (f64, f64),
    i_ref: (f64, f64),
    v_o: (f64, f64),
    omega: f64,
    l_c: f64,
    dt: f64,
) -> (f64, f64) {
    let ud = loops.d.step(i_ref.0 - i_l.0, dt);
    let uq = loops.q.step(i_ref.1 - i_l.1, dt);
    (ud + v_o.0 - omega * l_c * i_l.1, uq + v_o.1 + omega * l_c * i_l.0)
}

/// Dc-voltage loop. Positive `i_ld` delivers power to the ac side and
/// discharges the link, so the PI output is negated.
pub fn outer_dc_voltage_step(pi: &mut PiState, v_dc: f64, v_dc_ref: f64, dt: f64) -> f64 {
    -pi.step(v_dc_ref - v_dc, dt)
}

/// Reactive-power loop with `q = v_oq i_od - v_od i_oq`. Raising `i_lq`
/// lowers `q`, so the PI output is negated.
pub fn outer_reactive_step(pi: &mut PiState, q_meas: f64, q_ref: f64, dt: f64) -> f64 {
    -pi.step(q_ref - q_meas, dt)
}

/// Complete classic controller of one station.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassicController {
    pub inner: InnerLoops,
    pub dc: PiState,
    pub q: PiState,
    pub l_c: f64,
    pub omega: f64,
    pub ts_pi: f64,
}

/// Current references and converter voltage emitted in one PI interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassicOutput {
    pub i_ref: (f64, f64),
    pub v_cv: (f64, f64),
}

impl ClassicController {
    pub fn new(settings: &PiSettings, station: &StationParams, omega_b: f64) -> Self {
        let g = settings.resolve(station, omega_b);
        ClassicController {
            inner: InnerLoops {
                d: PiState::new(g.inner, settings.k_aw),
                q: PiState::new(g.inner, settings.k_aw),
            },
            dc: PiState::new(g.dc_voltage, settings.k_aw),
            q: PiState::new(g.reactive, settings.k_aw),
            l_c: station.l_c,
            omega: station.omega_g,
            ts_pi: settings.ts_pi,
        }
    }

    /// Preloads all integrators so that zero errors reproduce the given
    /// steady currents and converter voltage.
    pub fn preload(&mut self, i_l: (f64, f64), v_o: (f64, f64), v_cv: (f64, f64)) {
        self.dc.preload(-i_l.0);
        self.q.preload(-i_l.1);
        self.inner.d.preload(v_cv.0 - v_o.0 + self.omega * self.l_c * i_l.1);
        self.inner.q.preload(v_cv.1 - v_o.1 - self.omega * self.l_c * i_l.0);
    }

    pub fn step(
        &mut self,
        i_l: (f64, f64),
        v_o: (f64, f64),
        v_dc: f64,
        q_meas: f64,
        v_dc_ref: f64,
        q_ref: f64,
    ) -> ClassicOutput {
        let dt = self.ts_pi;
        let i_ref = (
            outer_dc_voltage_step(&mut self.dc, v_dc, v_dc_ref, dt),
            outer_reactive_step(&mut self.q, q_meas, q_ref, dt),
        );
        let v_cv = inner_current_step(&mut self.inner, i_l, i_ref, v_o, self.omega, self.l_c, dt);
        ClassicOutput { i_ref, v_cv }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gains(limit: f64) -> PiGains {
        PiGains { kp: 2.0, ki: 10.0, limit }
    }

    #[test]
    fn feed_forward_only() {
        let mut loops = InnerLoops {
            d: PiState::new(gains(1.0), 1.0),
            q: PiState::new(gains(1.0), 1.0),
        };
        let v = inner_current_step(&mut loops, (0.0, 0.0), (0.0, 0.0), (0.98, 0.01), 1.0, 0.15, 2e-4);
        assert_eq!(v, (0.98, 0.01));
    }

    #[test]
    fn decoupling_term() {
        let mut loops = InnerLoops {
            d: PiState::new(gains(1.0), 1.0),
            q: PiState::new(gains(1.0), 1.0),
        };
        let v = inner_current_step(&mut loops, (0.0, 0.5), (0.0, 0.5), (0.0, 0.0), 1.0, 0.15, 2e-4);
        assert_relative_eq!(v.0, -0.075, epsilon = 1e-15);
    }

    #[test]
    fn dc_loop_zero_and_saturation() {
        let mut pi = PiState::new(gains(1.0), 1.0);
        assert_eq!(outer_dc_voltage_step(&mut pi, 1.0, 1.0, 2e-4), 0.0);
        assert_eq!(outer_dc_voltage_step(&mut pi, 0.0, 1.0, 2e-4), -1.0);
        assert_eq!(outer_dc_voltage_step(&mut pi, 2.0, 1.0, 2e-4), 1.0);
    }

    #[test]
    fn reactive_loop_holds_and_clips() {
        let mut pi = PiState::new(gains(0.3), 1.0);
        pi.preload(0.1);
        let out = outer_reactive_step(&mut pi, 0.2, 0.2, 2e-4);
        assert_relative_eq!(out, -0.1, epsilon = 1e-15);
        assert_relative_eq!(pi.integral_output(), 0.1, epsilon = 1e-15);
        assert_eq!(outer_reactive_step(&mut pi, 0.0, 5.0, 2e-4), -0.3);
    }

    #[test]
    fn integral_never_grows_into_saturation() {
        let mut pi = PiState::new(gains(0.5), 1.0);
        let mut last = pi.integral;
        for _ in 0..1000 {
            let out = pi.step(3.0, 1e-3);
            assert_eq!(out, 0.5);
            assert!(pi.integral <= last + 1e-15);
            last = pi.integral;
        }
        // back-calculation lets it recover immediately when the error flips
        let out = pi.step(-0.1, 1e-3);
        assert!(out < 0.5);
    }

    #[test]
    fn derived_inner_gains() {
        let st = StationParams::reference();
        let wb = 2.0 * std::f64::consts::PI * 50.0;
        let g = PiSettings::default().resolve(&st, wb);
        assert_relative_eq!(g.inner.kp, 0.15 / (wb * 8e-4), epsilon = 1e-12);
        // zero cancels the reactor pole
        assert_relative_eq!(g.inner.ki / g.inner.kp, wb * st.r_c / st.l_c, epsilon = 1e-9);
        assert!(g.dc_voltage.kp > 0.0 && g.reactive.ki > 0.0);
    }

    #[test]
    fn preload_reproduces_voltage() {
        let st = StationParams::reference();
        let mut c = ClassicController::new(&PiSettings::default(), &st, 314.159);
        let (i_l, v_o, v_cv) = ((-0.69, 0.05), (1.01, 0.002), (0.97, -0.1));
        c.preload(i_l, v_o, v_cv);
        // errors are zero when q_meas sits at q_ref and v_dc at its reference
        let out = c.step(i_l, v_o, 1.0, 0.0, 1.0, 0.0);
        assert_relative_eq!(out.i_ref.0, i_l.0, epsilon = 1e-12);
        assert_relative_eq!(out.i_ref.1, i_l.1, epsilon = 1e-12);
        assert_relative_eq!(out.v_cv.0, v_cv.0, epsilon = 1e-12);
        assert_relative_eq!(out.v_cv.1, v_cv.1, epsilon = 1e-12);
    }
}
