//! Nonlinear average model of one VSC station in the PLL-oriented dq frame.
//!
//! The state holds the seven electrical states (converter reactor current,
//! dc-link voltage, grid current, filter voltage), the four PLL states and the
//! two low-pass states of the active damping estimator. The grid branch is the
//! series lump of grid and transformer impedance behind an ideal stiff source.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{effective_grid_impedance, DampingParams, PllParams, StationParams};

/// Dimension of the full plant state.
pub const N_STATES: usize = 13;
/// Leading electrical states used by the reduced model.
pub const N_ELECTRICAL: usize = 7;
/// Dimension of the full plant input.
pub const N_INPUTS: usize = 4;

/// Smallest dc voltage at which the power-balance division is attempted.
pub const V_DC_MIN: f64 = 1e-6;

pub mod idx {
    pub const I_LD: usize = 0;
    pub const I_LQ: usize = 1;
    pub const V_DC: usize = 2;
    pub const I_OD: usize = 3;
    pub const I_OQ: usize = 4;
    pub const V_OD: usize = 5;
    pub const V_OQ: usize = 6;
    pub const V_PLL_D: usize = 7;
    pub const V_PLL_Q: usize = 8;
    pub const EPS_PLL: usize = 9;
    pub const D_THETA_PLL: usize = 10;
    pub const PHI_D: usize = 11;
    pub const PHI_Q: usize = 12;
}

pub const STATE_NAMES: [&str; N_STATES] = [
    "i_ld",
    "i_lq",
    "v_dc",
    "i_od",
    "i_oq",
    "v_od",
    "v_oq",
    "v_pll_d",
    "v_pll_q",
    "eps_pll",
    "d_theta_pll",
    "phi_d",
    "phi_q",
];

pub const INPUT_NAMES: [&str; N_INPUTS] = ["v_cvd", "v_cvq", "v_g_mag", "i_dc_line"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    #[error("dc-link voltage collapsed to {v_dc:e} pu")]
    DcCollapse { v_dc: f64 },
    #[error("PLL phase undefined: filtered voltage is zero")]
    UndefinedPhase,
    #[error("integration step {dt:e} s outside (0, {dt_max:e}]")]
    InvalidStep { dt: f64, dt_max: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub i_ld: f64,
    pub i_lq: f64,
    pub v_dc: f64,
    pub i_od: f64,
    pub i_oq: f64,
    pub v_od: f64,
    pub v_oq: f64,
    pub v_pll_d: f64,
    pub v_pll_q: f64,
    /// PLL integrator state (rad*s).
    pub eps_pll: f64,
    /// Angle of the PLL frame relative to the grid voltage (rad).
    pub d_theta_pll: f64,
    pub phi_d: f64,
    pub phi_q: f64,
}

impl PlantState {
    pub fn to_array(&self) -> [f64; N_STATES] {
        [
            self.i_ld,
            self.i_lq,
            self.v_dc,
            self.i_od,
            self.i_oq,
            self.v_od,
            self.v_oq,
            self.v_pll_d,
            self.v_pll_q,
            self.eps_pll,
            self.d_theta_pll,
            self.phi_d,
            self.phi_q,
        ]
    }

    pub fn from_array(x: &[f64; N_STATES]) -> Self {
        PlantState {
            i_ld: x[0],
            i_lq: x[1],
            v_dc: x[2],
            i_od: x[3],
            i_oq: x[4],
            v_od: x[5],
            v_oq: x[6],
            v_pll_d: x[7],
            v_pll_q: x[8],
            eps_pll: x[9],
            d_theta_pll: x[10],
            phi_d: x[11],
            phi_q: x[12],
        }
    }

    /// The electrical sub-state `[i_ld i_lq v_dc i_od i_oq v_od v_oq]`.
    pub fn electrical(&self) -> [f64; N_ELECTRICAL] {
        let x = self.to_array();
        let mut e = [0.0; N_ELECTRICAL];
        e.copy_from_slice(&x[..N_ELECTRICAL]);
        e
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Active power delivered at the filter node.
    pub fn p_out(&self) -> f64 {
        self.v_od * self.i_od + self.v_oq * self.i_oq
    }

    /// Reactive power at the filter node, `v_oq*i_od - v_od*i_oq`.
    ///
    /// Positive when the station absorbs reactive power from the grid in the
    /// generator convention used for `i_o`.
    pub fn q_out(&self) -> f64 {
        self.v_oq * self.i_od - self.v_od * self.i_oq
    }

    /// A grid-synchronised, unloaded state: rated filter voltage, PLL settled.
    pub fn unloaded(p: &StationParams, v_dc: f64) -> Self {
        PlantState {
            v_dc,
            v_od: p.v_g_mag,
            v_pll_d: p.v_g_mag,
            phi_d: p.v_g_mag,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantInput {
    pub v_cvd: f64,
    pub v_cvq: f64,
    pub v_g_mag: f64,
    /// dc line current flowing into this station's dc bus.
    pub i_dc_line: f64,
}

impl PlantInput {
    pub fn to_array(&self) -> [f64; N_INPUTS] {
        [self.v_cvd, self.v_cvq, self.v_g_mag, self.i_dc_line]
    }

    pub fn from_array(u: &[f64; N_INPUTS]) -> Self {
        PlantInput {
            v_cvd: u[0],
            v_cvq: u[1],
            v_g_mag: u[2],
            i_dc_line: u[3],
        }
    }

    fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// One station's parameters prepared for repeated derivative evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StationModel {
    pub params: StationParams,
    pub pll: PllParams,
    pub damping: DampingParams,
    pub omega_b: f64,
    pub r_eff: f64,
    pub l_eff: f64,
    /// Largest accepted integration step (s).
    pub dt_max: f64,
}

impl StationModel {
    pub fn new(
        params: StationParams,
        pll: PllParams,
        damping: DampingParams,
        omega_b: f64,
        dt_max: f64,
    ) -> Self {
        let (r_eff, l_eff) = effective_grid_impedance(&params);
        StationModel {
            params,
            pll,
            damping,
            omega_b,
            r_eff,
            l_eff,
            dt_max,
        }
    }
}

/// PLL phase-detector output `atan(v_pll_q / v_pll_d)`.
pub fn pll_phase_error(v_pll_d: f64, v_pll_q: f64) -> Result<f64, PlantError> {
    if v_pll_d == 0.0 && v_pll_q == 0.0 {
        return Err(PlantError::UndefinedPhase);
    }
    Ok((v_pll_q / v_pll_d).atan())
}

/// PLL frequency in pu: the PI output `K_p*atan(..) + K_i*eps` plus `omega_g`.
pub fn pll_frequency(s: &PlantState, pll: &PllParams, omega_g: f64) -> Result<f64, PlantError> {
    let e = pll_phase_error(s.v_pll_d, s.v_pll_q)?;
    Ok(pll.k_p_pll * e + pll.k_i_pll * s.eps_pll + omega_g)
}

/// Dc-side current drawn by the lossless converter.
pub fn power_balance_dc_current(s: &PlantState, u: &PlantInput) -> Result<f64, PlantError> {
    if !(s.v_dc.abs() >= V_DC_MIN) {
        return Err(PlantError::DcCollapse { v_dc: s.v_dc });
    }
    Ok((s.i_ld * u.v_cvd + s.i_lq * u.v_cvq) / s.v_dc)
}

/// Time derivative of the full state, as a state-shaped array.
pub fn derivative_array(
    m: &StationModel,
    x: &[f64; N_STATES],
    u: &PlantInput,
) -> Result<[f64; N_STATES], PlantError> {
    use idx::*;

    if !x.iter().all(|v| v.is_finite()) {
        return Err(PlantError::NonFinite { what: "state" });
    }
    if !u.is_finite() {
        return Err(PlantError::NonFinite { what: "input" });
    }
    if !(x[V_DC] >= V_DC_MIN) {
        return Err(PlantError::DcCollapse { v_dc: x[V_DC] });
    }

    let p = &m.params;
    let wb = m.omega_b;
    let w = wb * p.omega_g;

    let (i_ld, i_lq) = (x[I_LD], x[I_LQ]);
    let (i_od, i_oq) = (x[I_OD], x[I_OQ]);
    let (v_od, v_oq) = (x[V_OD], x[V_OQ]);
    let v_dc = x[V_DC];

    let i_dc = (i_ld * u.v_cvd + i_lq * u.v_cvq) / v_dc;
    let phase = pll_phase_error(x[V_PLL_D], x[V_PLL_Q])?;
    let (sin_t, cos_t) = x[D_THETA_PLL].sin_cos();

    let mut dx = [0.0; N_STATES];
    dx[I_LD] = wb / p.l_c * (u.v_cvd - v_od) - wb * p.r_c / p.l_c * i_ld + w * i_lq;
    dx[I_LQ] = wb / p.l_c * (u.v_cvq - v_oq) - w * i_ld - wb * p.r_c / p.l_c * i_lq;
    dx[V_DC] = wb / p.c_dc * (u.i_dc_line - i_dc);
    dx[I_OD] = wb / m.l_eff * (v_od - u.v_g_mag * cos_t) - wb * m.r_eff / m.l_eff * i_od + w * i_oq;
    dx[I_OQ] = wb / m.l_eff * (v_oq + u.v_g_mag * sin_t) - w * i_od - wb * m.r_eff / m.l_eff * i_oq;
    dx[V_OD] = wb / p.c_f * (i_ld - i_od) + w * v_oq;
    dx[V_OQ] = wb / p.c_f * (i_lq - i_oq) - w * v_od;
    dx[V_PLL_D] = m.pll.omega_lp_pll * (v_od - x[V_PLL_D]);
    dx[V_PLL_Q] = m.pll.omega_lp_pll * (v_oq - x[V_PLL_Q]);
    dx[EPS_PLL] = phase;
    dx[D_THETA_PLL] = wb * (m.pll.k_p_pll * phase + m.pll.k_i_pll * x[EPS_PLL]);
    dx[PHI_D] = m.damping.omega_ad * (v_od - x[PHI_D]);
    dx[PHI_Q] = m.damping.omega_ad * (v_oq - x[PHI_Q]);
    Ok(dx)
}

pub fn derivative(m: &StationModel, s: &PlantState, u: &PlantInput) -> Result<PlantState, PlantError> {
    derivative_array(m, &s.to_array(), u).map(|d| PlantState::from_array(&d))
}

/// Classical fourth-order Runge-Kutta step on a fixed-size vector field.
pub fn rk4<const N: usize, E>(
    x: &[f64; N],
    dt: f64,
    mut f: impl FnMut(&[f64; N]) -> Result<[f64; N], E>,
) -> Result<[f64; N], E> {
    let axpy = |a: &[f64; N], k: &[f64; N], h: f64| {
        let mut out = *a;
        out.iter_mut().zip(k).for_each(|(o, k)| *o += h * k);
        out
    };
    let k1 = f(x)?;
    let k2 = f(&axpy(x, &k1, 0.5 * dt))?;
    let k3 = f(&axpy(x, &k2, 0.5 * dt))?;
    let k4 = f(&axpy(x, &k3, dt))?;
    let mut out = *x;
    for i in 0..N {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(out)
}

/// Advances the plant by `dt` seconds with the input held constant.
pub fn step_rk4(
    m: &StationModel,
    s: &PlantState,
    u: &PlantInput,
    dt: f64,
) -> Result<PlantState, PlantError> {
    if !(dt > 0.0 && dt <= m.dt_max) {
        return Err(PlantError::InvalidStep { dt, dt_max: m.dt_max });
    }
    rk4(&s.to_array(), dt, |x| derivative_array(m, x, u)).map(|x| PlantState::from_array(&x))
}

/// Stored energy in seconds-scaled per unit: `sum(C v^2 + L i^2) / (2 omega_b)`.
pub fn stored_energy(m: &StationModel, s: &PlantState) -> f64 {
    let p = &m.params;
    0.5 / m.omega_b
        * (p.c_dc * s.v_dc * s.v_dc
            + p.l_c * (s.i_ld * s.i_ld + s.i_lq * s.i_lq)
            + p.c_f * (s.v_od * s.v_od + s.v_oq * s.v_oq)
            + m.l_eff * (s.i_od * s.i_od + s.i_oq * s.i_oq))
}

/// Power flowing into the station's storage from the dc line minus the power
/// delivered to the ideal grid source.
pub fn external_power(s: &PlantState, u: &PlantInput) -> f64 {
    let (sin_t, cos_t) = s.d_theta_pll.sin_cos();
    let v_gd = u.v_g_mag * cos_t;
    let v_gq = -u.v_g_mag * sin_t;
    u.i_dc_line * s.v_dc - (s.i_od * v_gd + s.i_oq * v_gq)
}
