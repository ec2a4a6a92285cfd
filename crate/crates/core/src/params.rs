//! Per-unit parameters of the point-to-point system and the configuration file.
//!
//! All electrical quantities are per unit on the station rating. Reactor and
//! capacitor values are the per-unit reactance/susceptance at the base
//! frequency, so every dynamic equation carries an explicit `omega_b` factor.
//!
//! The dc side uses `z_dc = v_dc_base^2 / s_base` as base impedance and the
//! same `omega_b` time scaling as the ac side: a dc-link capacitance `C` in
//! farads is `omega_b * z_dc * C` per unit, a line inductance `L` in henries is
//! `omega_b * L / z_dc` per unit.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classic::PiSettings;
use crate::harness::ScenarioDefaults;
use crate::mpc::MpcConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

impl ConfigError {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn require_positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::invalid(field, format!("must be > 0, got {v}")))
    }
}

pub(crate) fn require_non_negative(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(ConfigError::invalid(field, format!("must be >= 0, got {v}")))
    }
}

/// Base quantities of the per-unit system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseValues {
    /// Apparent power (VA).
    pub s_base: f64,
    /// Line-to-line ac voltage (V).
    pub v_ac_base: f64,
    /// Pole-to-pole dc voltage (V).
    pub v_dc_base: f64,
    /// Nominal grid frequency (Hz).
    pub f_nominal: f64,
}

impl BaseValues {
    pub fn reference() -> Self {
        BaseValues {
            s_base: 200e6,
            v_ac_base: 230e3,
            v_dc_base: 200e3,
            f_nominal: 50.0,
        }
    }

    /// Base angular frequency (rad/s).
    pub fn omega_b(&self) -> f64 {
        2.0 * PI * self.f_nominal
    }

    /// dc base impedance (ohm).
    pub fn z_dc(&self) -> f64 {
        self.v_dc_base * self.v_dc_base / self.s_base
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        require_positive("base.s_base", self.s_base)?;
        require_positive("base.v_ac_base", self.v_ac_base)?;
        require_positive("base.v_dc_base", self.v_dc_base)?;
        require_positive("base.f_nominal", self.f_nominal)
    }
}

/// Electrical parameters of one converter station.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationParams {
    pub l_c: f64,
    pub r_c: f64,
    pub c_f: f64,
    pub l_g: f64,
    pub r_g: f64,
    /// Transformer series inductance, lumped into the grid branch.
    pub l_t: f64,
    pub r_t: f64,
    pub c_dc: f64,
    /// Grid voltage amplitude.
    pub v_g_mag: f64,
    /// Grid frequency.
    pub omega_g: f64,
}

impl StationParams {
    pub fn reference() -> Self {
        StationParams {
            l_c: 0.15,
            r_c: 0.0015,
            c_f: 0.094,
            l_g: 0.0739,
            r_g: 0.0521,
            l_t: 0.15,
            r_t: 0.027,
            c_dc: 4.2224,
            v_g_mag: 1.0,
            omega_g: 1.0,
        }
    }

    pub fn validate(&self, prefix: &str, limits: &ValidationLimits) -> Result<(), ConfigError> {
        let f = |name: &str| format!("{prefix}.{name}");
        require_positive(&f("l_c"), self.l_c)?;
        require_non_negative(&f("r_c"), self.r_c)?;
        require_positive(&f("c_f"), self.c_f)?;
        require_positive(&f("l_g"), self.l_g)?;
        require_non_negative(&f("r_g"), self.r_g)?;
        require_positive(&f("l_t"), self.l_t)?;
        require_non_negative(&f("r_t"), self.r_t)?;
        require_positive(&f("c_dc"), self.c_dc)?;
        require_positive(&f("v_g_mag"), self.v_g_mag)?;
        if !(self.omega_g >= limits.omega_g_min && self.omega_g <= limits.omega_g_max) {
            return Err(ConfigError::invalid(
                f("omega_g"),
                format!(
                    "must lie in [{}, {}], got {}",
                    limits.omega_g_min, limits.omega_g_max, self.omega_g
                ),
            ));
        }
        Ok(())
    }
}

/// Series lumping of grid and transformer impedance: `(r_g + r_t, l_g + l_t)`.
pub fn effective_grid_impedance(p: &StationParams) -> (f64, f64) {
    (p.r_g + p.r_t, p.l_g + p.l_t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcLineParams {
    /// km
    pub length: f64,
    /// H/km
    pub l_per_km: f64,
    /// ohm/km
    pub r_per_km: f64,
}

impl DcLineParams {
    pub fn reference() -> Self {
        DcLineParams {
            length: 75.0,
            l_per_km: 2.615e-3,
            r_per_km: 0.011,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        require_positive("dc_line.length", self.length)?;
        require_positive("dc_line.l_per_km", self.l_per_km)?;
        require_non_negative("dc_line.r_per_km", self.r_per_km)
    }
}

/// Total line resistance and inductance in per unit of the dc base.
///
/// Returns `(r_dc_total, l_dc_total)`; the inductance is expressed as the
/// reactance at `omega_b`, matching the ac-side convention.
pub fn dc_line_to_pu(line: &DcLineParams, base: &BaseValues) -> (f64, f64) {
    let z = base.z_dc();
    let r = line.length * line.r_per_km / z;
    let l = base.omega_b() * line.length * line.l_per_km / z;
    (r, l)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PllParams {
    /// Low-pass cut-off of the measured-voltage filter (rad/s).
    pub omega_lp_pll: f64,
    pub k_p_pll: f64,
    pub k_i_pll: f64,
}

impl Default for PllParams {
    fn default() -> Self {
        PllParams {
            omega_lp_pll: 500.0,
            k_p_pll: 0.084,
            k_i_pll: 4.69,
        }
    }
}

impl PllParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        require_positive("pll.omega_lp_pll", self.omega_lp_pll)?;
        require_non_negative("pll.k_p_pll", self.k_p_pll)?;
        require_non_negative("pll.k_i_pll", self.k_i_pll)
    }
}

/// Active ac damping: gain and low-pass cut-off of the high-pass estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DampingParams {
    pub k_ad: f64,
    /// rad/s
    pub omega_ad: f64,
}

impl DampingParams {
    pub fn default_for(base: &BaseValues) -> Self {
        DampingParams {
            k_ad: 0.2,
            omega_ad: base.omega_b() / 10.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        require_non_negative("damping.k_ad", self.k_ad)?;
        require_positive("damping.omega_ad", self.omega_ad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationLimits {
    pub omega_g_min: f64,
    pub omega_g_max: f64,
}

impl Default for ValidationLimits {
    fn default() -> Self {
        ValidationLimits {
            omega_g_min: 0.9,
            omega_g_max: 1.1,
        }
    }
}

/// Plant integration settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSettings {
    /// Plant integration step (s).
    pub dt: f64,
    /// Largest accepted plant step (s).
    pub dt_max: f64,
    /// Record every n-th plant step.
    pub decimation: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            dt: 10e-6,
            dt_max: 50e-6,
            decimation: 10,
        }
    }
}

impl SimulationSettings {
    pub fn validate(&self) -> Result<(), ConfigError> {
        require_positive("simulation.dt", self.dt)?;
        require_positive("simulation.dt_max", self.dt_max)?;
        if self.dt > self.dt_max {
            return Err(ConfigError::invalid(
                "simulation.dt",
                format!("must not exceed dt_max = {}", self.dt_max),
            ));
        }
        if self.decimation == 0 {
            return Err(ConfigError::invalid("simulation.decimation", "must be >= 1"));
        }
        Ok(())
    }
}

/// Everything needed to run the point-to-point system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub base: BaseValues,
    /// MPC-controlled station (active/reactive power).
    pub vsc1: StationParams,
    /// PI-controlled station (dc voltage/reactive power).
    pub vsc2: StationParams,
    pub dc_line: DcLineParams,
    #[serde(default)]
    pub pll: PllParams,
    /// Defaults to `DampingParams::default_for(base)` when omitted.
    #[serde(default)]
    pub damping: Option<DampingParams>,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub pi: PiSettings,
    #[serde(default)]
    pub simulation: SimulationSettings,
    #[serde(default)]
    pub scenario: ScenarioDefaults,
    #[serde(default)]
    pub validation: ValidationLimits,
}

impl SystemConfig {
    /// The point-to-point system with identical reference stations and default controllers.
    pub fn reference() -> Self {
        let base = BaseValues::reference();
        SystemConfig {
            base,
            vsc1: StationParams::reference(),
            vsc2: StationParams::reference(),
            dc_line: DcLineParams::reference(),
            pll: PllParams::default(),
            damping: Some(DampingParams::default_for(&base)),
            mpc: MpcConfig::default(),
            pi: PiSettings::default(),
            simulation: SimulationSettings::default(),
            scenario: ScenarioDefaults::default(),
            validation: ValidationLimits::default(),
        }
    }

    pub fn damping(&self) -> DampingParams {
        self.damping
            .unwrap_or_else(|| DampingParams::default_for(&self.base))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.base.validate()?;
        if !(self.validation.omega_g_min < self.validation.omega_g_max) {
            return Err(ConfigError::invalid(
                "validation.omega_g_min",
                "must be below omega_g_max",
            ));
        }
        self.vsc1.validate("vsc1", &self.validation)?;
        self.vsc2.validate("vsc2", &self.validation)?;
        self.dc_line.validate()?;
        self.pll.validate()?;
        self.damping().validate()?;
        self.mpc.validate()?;
        self.pi.validate()?;
        self.simulation.validate()?;
        self.scenario.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: SystemConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration is always representable as TOML")
    }
}

/// Reads and validates a TOML configuration file.
pub fn load_config(path: impl AsRef<Path>) -> Result<SystemConfig, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    SystemConfig::from_toml_str(&text)
}
