//! Point-to-point co-simulation.
//!
//! VSC1 runs the MPC current controller, VSC2 the PI dc-voltage controller.
//! The dc buses are joined by a series R-L line; the line capacitance is part
//! of the station capacitors. Both stations and the line current form one
//! 27-state system integrated with RK4 at the plant step, while the two
//! controllers update at their own sample instants and hold their outputs in
//! between.

use std::io::{self, Write};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classic::ClassicController;
use crate::linear::{self, LinearError, OperatingPoint, OperatingTargets};
use crate::mpc::{CurrentRefs, MpcController, MpcDiagnostics};
use crate::params::{dc_line_to_pu, require_positive, ConfigError, SystemConfig};
use crate::plant::{
    self, derivative_array, PlantError, PlantInput, PlantState, StationModel, N_STATES, STATE_NAMES,
};
use crate::{map_batch, Execution};

/// Length of the combined state: two stations plus the line current.
pub const N_SYSTEM: usize = 2 * N_STATES + 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error("simulation aborted at t = {time} s: {source}")]
    Aborted {
        time: f64,
        source: PlantError,
        last: Box<SystemState>,
    },
    #[error("initial equilibrium: {0}")]
    Equilibrium(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("channel `{0}` is not recorded")]
    UnknownChannel(String),
    #[error("no samples in the window [{from}, {to}] s")]
    EmptyWindow { from: f64, to: f64 },
}

/// Named reference or source quantity a scenario event can change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// VSC1 d-axis current reference.
    ILdRef,
    /// VSC1 q-axis current reference.
    ILqRef,
    /// VSC2 dc-voltage reference.
    VDcRef,
    /// VSC2 reactive-power reference.
    QRef,
    /// Grid voltage magnitude behind VSC1.
    VG1,
    /// Grid voltage magnitude behind VSC2.
    VG2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct References {
    pub i_ld_ref: f64,
    pub i_lq_ref: f64,
    pub v_dc_ref: f64,
    pub q_ref: f64,
    pub v_g1: f64,
    pub v_g2: f64,
}

impl Default for References {
    fn default() -> Self {
        References {
            i_ld_ref: 0.7,
            i_lq_ref: 0.0,
            v_dc_ref: 1.0,
            q_ref: 0.0,
            v_g1: 1.0,
            v_g2: 1.0,
        }
    }
}

impl References {
    pub fn set(&mut self, target: Target, value: f64) {
        match target {
            Target::ILdRef => self.i_ld_ref = value,
            Target::ILqRef => self.i_lq_ref = value,
            Target::VDcRef => self.v_dc_ref = value,
            Target::QRef => self.q_ref = value,
            Target::VG1 => self.v_g1 = value,
            Target::VG2 => self.v_g2 = value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    /// s
    pub time: f64,
    pub target: Target,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// s
    pub duration: f64,
    #[serde(default)]
    pub initial: References,
    #[serde(default)]
    pub events: Vec<Event>,
    /// Plant steps per recorded sample; the config value when absent.
    #[serde(default)]
    pub decimation: Option<usize>,
}

/// Step-scenario timings carried in the system configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioDefaults {
    pub i_ld_initial: f64,
    pub i_ld_down: f64,
    pub i_ld_up: f64,
    pub duration: f64,
    pub t_down: f64,
    pub t_up: f64,
    pub long_duration: f64,
    pub long_t_down: f64,
    pub long_t_up: f64,
}

impl Default for ScenarioDefaults {
    fn default() -> Self {
        ScenarioDefaults {
            i_ld_initial: 0.7,
            i_ld_down: 0.5,
            i_ld_up: 0.75,
            duration: 0.4,
            t_down: 0.15,
            t_up: 0.25,
            long_duration: 35.0,
            long_t_down: 15.0,
            long_t_up: 25.0,
        }
    }
}

impl ScenarioDefaults {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, d, a, b) in [
            ("scenario.duration", self.duration, self.t_down, self.t_up),
            ("scenario.long_duration", self.long_duration, self.long_t_down, self.long_t_up),
        ] {
            require_positive(name, d)?;
            if !(0.0 < a && a < b && b < d) {
                return Err(ConfigError::invalid(
                    name,
                    format!("step times must satisfy 0 < {a} < {b} < {d}"),
                ));
            }
        }
        Ok(())
    }
}

impl Scenario {
    /// Down-then-up step of the VSC1 d-axis current reference.
    pub fn step_response(d: &ScenarioDefaults, long: bool) -> Self {
        let (duration, t1, t2) = if long {
            (d.long_duration, d.long_t_down, d.long_t_up)
        } else {
            (d.duration, d.t_down, d.t_up)
        };
        Scenario {
            duration,
            initial: References {
                i_ld_ref: d.i_ld_initial,
                ..References::default()
            },
            events: vec![
                Event {
                    time: t1,
                    target: Target::ILdRef,
                    value: d.i_ld_down,
                },
                Event {
                    time: t2,
                    target: Target::ILdRef,
                    value: d.i_ld_up,
                },
            ],
            decimation: None,
        }
    }

    /// No power transfer and no events.
    pub fn zero_power(duration: f64) -> Self {
        Scenario {
            duration,
            initial: References {
                i_ld_ref: 0.0,
                ..References::default()
            },
            events: Vec::new(),
            decimation: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario = toml::from_str(text).map_err(ConfigError::from)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(HarnessError::Scenario(format!("duration must be positive, got {}", self.duration)));
        }
        let mut last = f64::NEG_INFINITY;
        for e in &self.events {
            if !(e.time > last) {
                return Err(HarnessError::Scenario(format!(
                    "event times must be strictly increasing ({} after {last})",
                    e.time
                )));
            }
            if !(e.time >= 0.0 && e.time <= self.duration) {
                return Err(HarnessError::Scenario(format!(
                    "event at {} s lies outside [0, {}]",
                    e.time, self.duration
                )));
            }
            if !e.value.is_finite() {
                return Err(HarnessError::Scenario(format!("event at {} s has a non-finite value", e.time)));
            }
            last = e.time;
        }
        if self.decimation == Some(0) {
            return Err(HarnessError::Scenario("decimation must be >= 1".into()));
        }
        Ok(())
    }

    /// Time of the `k`-th event that changes `target`.
    pub fn event_time(&self, target: Target, k: usize) -> Option<f64> {
        self.events.iter().filter(|e| e.target == target).nth(k).map(|e| e.time)
    }
}

/// State of the complete point-to-point system.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SystemState {
    pub vsc1: PlantState,
    pub vsc2: PlantState,
    /// Line current flowing from the VSC2 bus into the VSC1 bus (pu).
    pub i_line: f64,
}

impl SystemState {
    pub fn to_array(&self) -> [f64; N_SYSTEM] {
        let mut x = [0.0; N_SYSTEM];
        x[..N_STATES].copy_from_slice(&self.vsc1.to_array());
        x[N_STATES..2 * N_STATES].copy_from_slice(&self.vsc2.to_array());
        x[2 * N_STATES] = self.i_line;
        x
    }

    pub fn from_array(x: &[f64; N_SYSTEM]) -> Self {
        let (a, b) = split(x);
        SystemState {
            vsc1: PlantState::from_array(&a),
            vsc2: PlantState::from_array(&b),
            i_line: x[2 * N_STATES],
        }
    }
}

fn split(x: &[f64; N_SYSTEM]) -> ([f64; N_STATES], [f64; N_STATES]) {
    let mut a = [0.0; N_STATES];
    let mut b = [0.0; N_STATES];
    a.copy_from_slice(&x[..N_STATES]);
    b.copy_from_slice(&x[N_STATES..2 * N_STATES]);
    (a, b)
}

/// Station models and line parameters of the point-to-point system.
#[derive(Clone, Debug, PartialEq)]
pub struct P2pSystem {
    pub vsc1: StationModel,
    pub vsc2: StationModel,
    /// pu
    pub r_line: f64,
    /// pu
    pub l_line: f64,
    pub omega_b: f64,
}

/// Converter-side inputs of both stations; the line current is a state.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SystemInput {
    pub vsc1: PlantInput,
    pub vsc2: PlantInput,
}

impl P2pSystem {
    pub fn new(cfg: &SystemConfig) -> Self {
        let wb = cfg.base.omega_b();
        let damping = cfg.damping();
        let dt_max = cfg.simulation.dt_max;
        let (r_line, l_line) = dc_line_to_pu(&cfg.dc_line, &cfg.base);
        P2pSystem {
            vsc1: StationModel::new(cfg.vsc1, cfg.pll, damping, wb, dt_max),
            vsc2: StationModel::new(cfg.vsc2, cfg.pll, damping, wb, dt_max),
            r_line,
            l_line,
            omega_b: wb,
        }
    }

    /// Station inputs with the line current filled in.
    pub fn station_inputs(&self, i_line: f64, u: &SystemInput) -> (PlantInput, PlantInput) {
        (
            PlantInput {
                i_dc_line: i_line,
                ..u.vsc1
            },
            PlantInput {
                i_dc_line: -i_line,
                ..u.vsc2
            },
        )
    }

    pub fn line_derivative(&self, v_dc1: f64, v_dc2: f64, i_line: f64) -> f64 {
        self.omega_b / self.l_line * (v_dc2 - v_dc1 - self.r_line * i_line)
    }

    pub fn derivative(&self, x: &[f64; N_SYSTEM], u: &SystemInput) -> Result<[f64; N_SYSTEM], PlantError> {
        let (a, b) = split(x);
        let i_line = x[2 * N_STATES];
        let (u1, u2) = self.station_inputs(i_line, u);
        let da = derivative_array(&self.vsc1, &a, &u1)?;
        let db = derivative_array(&self.vsc2, &b, &u2)?;
        let mut dx = [0.0; N_SYSTEM];
        dx[..N_STATES].copy_from_slice(&da);
        dx[N_STATES..2 * N_STATES].copy_from_slice(&db);
        dx[2 * N_STATES] = self.line_derivative(a[plant::idx::V_DC], b[plant::idx::V_DC], i_line);
        Ok(dx)
    }

    pub fn step(&self, s: &SystemState, u: &SystemInput, dt: f64) -> Result<SystemState, PlantError> {
        let dt_max = self.vsc1.dt_max.min(self.vsc2.dt_max);
        if !(dt > 0.0 && dt <= dt_max) {
            return Err(PlantError::InvalidStep { dt, dt_max });
        }
        plant::rk4(&s.to_array(), dt, |x| self.derivative(x, u)).map(|x| SystemState::from_array(&x))
    }

    fn with_grid(model: &StationModel, v_g: f64) -> StationModel {
        let mut m = *model;
        m.params.v_g_mag = v_g;
        m
    }

    /// VSC1's model as seen by the operating-point solver for the given grid voltage.
    pub fn vsc1_at(&self, v_g: f64) -> StationModel {
        Self::with_grid(&self.vsc1, v_g)
    }

    pub fn vsc2_at(&self, v_g: f64) -> StationModel {
        Self::with_grid(&self.vsc2, v_g)
    }
}

/// Steady state of the whole system for a set of references.
#[derive(Clone, Debug, PartialEq)]
pub struct Equilibrium {
    pub state: SystemState,
    pub input: SystemInput,
    pub op1: OperatingPoint,
    pub op2: OperatingPoint,
}

/// Solves VSC1 at its current references, carries its dc current through the
/// line, then finds the VSC2 currents that absorb it at the dc-voltage
/// reference with the requested reactive power.
pub fn equilibrium(sys: &P2pSystem, refs: &References) -> Result<Equilibrium, HarnessError> {
    let m1 = sys.vsc1_at(refs.v_g1);
    let m2 = sys.vsc2_at(refs.v_g2);
    let v_dc2 = refs.v_dc_ref;

    let solve1 = |v_dc: f64| {
        linear::solve_operating_point(
            &m1,
            &OperatingTargets {
                i_ld: refs.i_ld_ref,
                i_lq: refs.i_lq_ref,
                v_dc,
            },
        )
    };
    // fixed point on the line drop; converges in a few passes as r_line is tiny
    let mut v_dc1 = v_dc2;
    for _ in 0..100 {
        let next = v_dc2 - sys.r_line * solve1(v_dc1)?.u0.i_dc_line;
        let done = (next - v_dc1).abs() < 1e-14;
        v_dc1 = next;
        if done {
            break;
        }
    }
    let op1 = solve1(v_dc1)?;
    let i_line = op1.u0.i_dc_line;

    // Newton on (i_ld2, i_lq2) for dc current -i_line and reactive power q_ref
    let solve2 = |i_ld: f64, i_lq: f64| -> Result<(OperatingPoint, [f64; 2]), HarnessError> {
        let op = linear::solve_operating_point(
            &m2,
            &OperatingTargets {
                i_ld,
                i_lq,
                v_dc: v_dc2,
            },
        )?;
        let r = [op.u0.i_dc_line + i_line, op.x0.q_out() - refs.q_ref];
        Ok((op, r))
    };
    let mut z = [-i_line * v_dc2 / refs.v_g2.max(0.1), 0.0];
    let (mut op2, mut r) = solve2(z[0], z[1])?;
    for _ in 0..50 {
        if r[0].abs().max(r[1].abs()) < 1e-12 {
            break;
        }
        let h = 1e-7;
        let (_, rd) = solve2(z[0] + h, z[1])?;
        let (_, rq) = solve2(z[0], z[1] + h)?;
        let j = [
            [(rd[0] - r[0]) / h, (rq[0] - r[0]) / h],
            [(rd[1] - r[1]) / h, (rq[1] - r[1]) / h],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-14 {
            return Err(HarnessError::Equilibrium("singular VSC2 power-flow Jacobian".into()));
        }
        z[0] -= (j[1][1] * r[0] - j[0][1] * r[1]) / det;
        z[1] -= (-j[1][0] * r[0] + j[0][0] * r[1]) / det;
        let next = solve2(z[0], z[1])?;
        op2 = next.0;
        r = next.1;
    }
    if r[0].abs().max(r[1].abs()) >= 1e-10 {
        return Err(HarnessError::Equilibrium(format!(
            "VSC2 power flow residual {:e} after 50 iterations",
            r[0].abs().max(r[1].abs())
        )));
    }

    let state = SystemState {
        vsc1: op1.x0,
        vsc2: op2.x0,
        i_line,
    };
    let input = SystemInput {
        vsc1: PlantInput {
            i_dc_line: 0.0,
            ..op1.u0
        },
        vsc2: PlantInput {
            i_dc_line: 0.0,
            ..op2.u0
        },
    };
    Ok(Equilibrium {
        state,
        input,
        op1,
        op2,
    })
}

/// Recorded channels on a common time grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimeSeries {
    pub names: Vec<String>,
    pub time: Vec<f64>,
    pub columns: Vec<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(names: Vec<String>) -> Self {
        let columns = vec![Vec::new(); names.len()];
        TimeSeries {
            names,
            time: Vec::new(),
            columns,
        }
    }

    pub fn push(&mut self, t: f64, row: &[f64]) {
        assert_eq!(row.len(), self.names.len(), "row width must match the channel count");
        debug_assert!(self.time.last().is_none_or(|&last| t > last));
        self.time.push(t);
        for (c, v) in self.columns.iter_mut().zip(row) {
            c.push(*v);
        }
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64], HarnessError> {
        self.channel(name).ok_or_else(|| HarnessError::UnknownChannel(name.to_string()))
    }

    /// Sample indices with `from <= t <= to`.
    pub fn window(&self, from: f64, to: f64) -> std::ops::Range<usize> {
        let a = self.time.partition_point(|&t| t < from);
        let b = self.time.partition_point(|&t| t <= to);
        a..b.max(a)
    }

    /// CSV with a header row, one row per sample, shortest round-trip decimals.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "time")?;
        for n in &self.names {
            write!(w, ",{n}")?;
        }
        writeln!(w)?;
        for (k, t) in self.time.iter().enumerate() {
            write!(w, "{t}")?;
            for c in &self.columns {
                write!(w, ",{}", c[k])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }
}

const STATION_EXTRA: [&str; 7] = ["v_cvd", "v_cvq", "i_dc", "i_dc_line", "p", "q", "omega_pll"];
const LINE_CHANNELS: [&str; 5] = ["line.i", "line.p_in", "line.p_out", "line.loss", "line.d_energy"];
const REF_CHANNELS: [&str; 6] = ["ref.i_ld", "ref.i_lq", "ref.v_dc", "ref.q", "ref.v_g1", "ref.v_g2"];
const CTRL_CHANNELS: [&str; 13] = [
    "vsc2.i_ld_ref",
    "vsc2.i_lq_ref",
    "mpc.cost",
    "mpc.epsilon",
    "mpc.iterations",
    "mpc.active",
    "mpc.kkt",
    "mpc.fallback",
    "mpc.v_d",
    "mpc.v_q",
    "mpc.v_ad_d",
    "mpc.v_ad_q",
    "mpc.predicted_violation",
];

fn channel_names() -> Vec<String> {
    let mut names = Vec::new();
    for s in ["vsc1", "vsc2"] {
        names.extend(STATE_NAMES.iter().map(|n| format!("{s}.{n}")));
        names.extend(STATION_EXTRA.iter().map(|n| format!("{s}.{n}")));
    }
    names.extend(LINE_CHANNELS.iter().map(|s| s.to_string()));
    names.extend(REF_CHANNELS.iter().map(|s| s.to_string()));
    names.extend(CTRL_CHANNELS.iter().map(|s| s.to_string()));
    names
}

struct Recorder<'a> {
    sys: &'a P2pSystem,
    row: Vec<f64>,
}

impl Recorder<'_> {
    fn station(&mut self, m: &StationModel, s: &PlantState, u: &PlantInput) -> Result<(), PlantError> {
        self.row.extend_from_slice(&s.to_array());
        let i_dc = plant::power_balance_dc_current(s, u)?;
        let omega = plant::pll_frequency(s, &m.pll, m.params.omega_g)?;
        self.row
            .extend_from_slice(&[u.v_cvd, u.v_cvq, i_dc, u.i_dc_line, s.p_out(), s.q_out(), omega]);
        Ok(())
    }

    fn record(
        &mut self,
        x: &SystemState,
        u: &SystemInput,
        refs: &References,
        i_ref2: (f64, f64),
        diag: Option<&MpcDiagnostics>,
    ) -> Result<&[f64], PlantError> {
        self.row.clear();
        let (u1, u2) = self.sys.station_inputs(x.i_line, u);
        let sys = self.sys;
        self.station(&sys.vsc1, &x.vsc1, &u1)?;
        self.station(&sys.vsc2, &x.vsc2, &u2)?;
        let i = x.i_line;
        let di = self.sys.line_derivative(x.vsc1.v_dc, x.vsc2.v_dc, i);
        self.row.extend_from_slice(&[
            i,
            x.vsc2.v_dc * i,
            x.vsc1.v_dc * i,
            self.sys.r_line * i * i,
            self.sys.l_line / self.sys.omega_b * i * di,
        ]);
        self.row
            .extend_from_slice(&[refs.i_ld_ref, refs.i_lq_ref, refs.v_dc_ref, refs.q_ref, refs.v_g1, refs.v_g2]);
        self.row.extend_from_slice(&[i_ref2.0, i_ref2.1]);
        match diag {
            Some(d) => self.row.extend_from_slice(&[
                d.cost,
                d.epsilon,
                d.iterations as f64,
                d.active_constraints as f64,
                d.kkt_residual,
                if d.fallback { 1.0 } else { 0.0 },
                d.v_mpc.0,
                d.v_mpc.1,
                d.v_damping.0,
                d.v_damping.1,
                d.predicted_output_violation,
            ]),
            None => self.row.extend_from_slice(&[f64::NAN; 11]),
        }
        Ok(&self.row)
    }
}

/// Plant steps per controller sample, required to be a whole number.
fn ticks(field: &str, ts: f64, dt: f64) -> Result<usize, ConfigError> {
    let r = ts / dt;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-6 {
        return Err(ConfigError::invalid(
            field,
            format!("{ts} s is not a whole multiple of the plant step {dt} s"),
        ));
    }
    Ok(n as usize)
}

/// Runs the scenario and records every channel.
pub fn simulate_p2p(cfg: &SystemConfig, scn: &Scenario) -> Result<TimeSeries, HarnessError> {
    cfg.validate()?;
    scn.validate()?;
    let dt = cfg.simulation.dt;
    let n_mpc = ticks("mpc.ts", cfg.mpc.ts, dt)?;
    let n_pi = ticks("pi.ts_pi", cfg.pi.ts_pi, dt)?;
    let decimation = scn.decimation.unwrap_or(cfg.simulation.decimation);

    let sys = P2pSystem::new(cfg);
    let mut refs = scn.initial;
    let eq = equilibrium(&sys, &refs)?;
    let lm = linear::linearize(&sys.vsc1_at(refs.v_g1), &eq.op1)?;
    let mut mpc = MpcController::new(cfg.mpc, cfg.damping(), &lm)?;
    let mut pi = ClassicController::new(&cfg.pi, &cfg.vsc2, sys.omega_b);
    let s2 = &eq.state.vsc2;
    pi.preload(
        (s2.i_ld, s2.i_lq),
        (s2.v_od, s2.v_oq),
        (eq.input.vsc2.v_cvd, eq.input.vsc2.v_cvq),
    );
    let damping = cfg.damping();

    let mut x = eq.state;
    let mut u = eq.input;
    let mut i_ref2 = (s2.i_ld, s2.i_lq);

    let n_ticks = (scn.duration / dt).round() as usize;
    // Each event is applied at the start of its tick or, off-grid, by splitting that tick.
    let events: Vec<(usize, f64, Event)> = scn
        .events
        .iter()
        .map(|e| {
            let r = e.time / dt;
            let on_grid = (r - r.round()).abs() < 1e-9 * r.max(1.0);
            if on_grid {
                (r.round() as usize, 0.0, *e)
            } else {
                (r.floor() as usize, e.time - r.floor() * dt, *e)
            }
        })
        .collect();
    let mut next_event = 0;

    let mut ts = TimeSeries::new(channel_names());
    ts.columns.iter_mut().for_each(|c| c.reserve(n_ticks / decimation + 1));
    let mut rec = Recorder {
        sys: &sys,
        row: Vec::new(),
    };
    let abort = |time: f64, source: PlantError, last: &SystemState| HarnessError::Aborted {
        time,
        source,
        last: Box::new(*last),
    };

    for k in 0..=n_ticks {
        let t = k as f64 * dt;
        while next_event < events.len() && events[next_event].0 == k && events[next_event].1 == 0.0 {
            let e = events[next_event].2;
            debug!("t = {t} s: {:?} -> {}", e.target, e.value);
            refs.set(e.target, e.value);
            next_event += 1;
        }
        u.vsc1.v_g_mag = refs.v_g1;
        u.vsc2.v_g_mag = refs.v_g2;

        if k % n_mpc == 0 {
            let out = mpc.control_step(
                &x.vsc1,
                CurrentRefs {
                    i_ld: refs.i_ld_ref,
                    i_lq: refs.i_lq_ref,
                },
            );
            if out.diagnostics.fallback {
                warn!("t = {t} s: MPC used the fallback input");
            }
            u.vsc1.v_cvd = out.v_ref.0;
            u.vsc1.v_cvq = out.v_ref.1;
        }
        if k % n_pi == 0 {
            let s = &x.vsc2;
            let out = pi.step(
                (s.i_ld, s.i_lq),
                (s.v_od, s.v_oq),
                s.v_dc,
                s.q_out(),
                refs.v_dc_ref,
                refs.q_ref,
            );
            let v_ad = crate::mpc::active_damping(s.v_od, s.v_oq, s.phi_d, s.phi_q, &damping);
            i_ref2 = out.i_ref;
            u.vsc2.v_cvd = out.v_cv.0 - v_ad.0;
            u.vsc2.v_cvq = out.v_cv.1 - v_ad.1;
        }
        if k % decimation == 0 {
            let row = rec
                .record(&x, &u, &refs, i_ref2, mpc.state.diagnostics.as_ref())
                .map_err(|e| abort(t, e, &x))?;
            ts.push(t, row);
        }
        if k == n_ticks {
            break;
        }

        if next_event < events.len() && events[next_event].0 == k && events[next_event].1 > 0.0 {
            let (_, offset, e) = events[next_event];
            x = sys.step(&x, &u, offset).map_err(|err| abort(t, err, &x))?;
            refs.set(e.target, e.value);
            u.vsc1.v_g_mag = refs.v_g1;
            u.vsc2.v_g_mag = refs.v_g2;
            next_event += 1;
            x = sys.step(&x, &u, dt - offset).map_err(|err| abort(t + offset, err, &x))?;
        } else {
            x = sys.step(&x, &u, dt).map_err(|err| abort(t, err, &x))?;
        }
    }
    Ok(ts)
}

/// Step-response figures of one channel after one event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    /// 10-90 % rise time (s).
    pub rise_time: f64,
    /// Time after the event until the channel stays within 2 % of the step (s).
    pub settling_time: f64,
    /// Peak excursion beyond the final level as a fraction of the step.
    pub overshoot: f64,
    /// `|target - final|` when a target is given, else 0 (pu).
    pub steady_state_error: f64,
    pub initial: f64,
    pub final_value: f64,
    /// False when the channel was still outside the band at the window end.
    pub settled: bool,
    /// The step was too small to measure.
    pub degenerate: bool,
}

/// Metrics of `channel` after `event_time` up to the end of the record.
pub fn step_metrics(ts: &TimeSeries, channel: &str, event_time: f64) -> Result<StepMetrics, HarnessError> {
    let end = ts.time.last().copied().unwrap_or(event_time);
    step_metrics_window(ts, channel, event_time, end, None)
}

/// Metrics over `[event_time, end]`. The initial level is the last sample
/// before the event, the final level the mean of the last 5 % of the window.
pub fn step_metrics_window(
    ts: &TimeSeries,
    channel: &str,
    event_time: f64,
    end: f64,
    target: Option<f64>,
) -> Result<StepMetrics, HarnessError> {
    let y = ts.require(channel)?;
    let w = ts.window(event_time, end);
    if w.len() < 2 {
        return Err(HarnessError::EmptyWindow {
            from: event_time,
            to: end,
        });
    }
    let initial = if w.start > 0 { y[w.start - 1] } else { y[w.start] };
    let tail = (w.len() / 20).max(1);
    let final_value = y[w.end - tail..w.end].iter().sum::<f64>() / tail as f64;
    let steady_state_error = target.map_or(0.0, |r| (r - final_value).abs());
    let step = final_value - initial;
    if step.abs() < 1e-9 {
        return Ok(StepMetrics {
            rise_time: 0.0,
            settling_time: 0.0,
            overshoot: 0.0,
            steady_state_error,
            initial,
            final_value,
            settled: true,
            degenerate: true,
        });
    }

    let t = &ts.time[w.clone()];
    let yn: Vec<f64> = y[w.clone()].iter().map(|v| (v - initial) / step).collect();
    // first interpolated crossing of `level`, measured from the event
    let crossing = |level: f64| -> Option<f64> {
        if yn[0] >= level {
            return Some(t[0]);
        }
        yn.windows(2).zip(t.windows(2)).find_map(|(v, tt)| {
            (v[1] >= level).then(|| tt[0] + (level - v[0]) / (v[1] - v[0]) * (tt[1] - tt[0]))
        })
    };
    let window_len = t[t.len() - 1] - event_time;
    let (t10, t90) = (crossing(0.1), crossing(0.9));
    let rise_time = match (t10, t90) {
        (Some(a), Some(b)) => b - a,
        _ => window_len,
    };
    let overshoot = (yn.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 1.0).max(0.0);

    let band = 0.02;
    let last_out = yn.iter().rposition(|v| (v - 1.0).abs() > band);
    let (settling_time, settled) = match last_out {
        None => (0.0, true),
        Some(i) if i + 1 == yn.len() => (window_len, false),
        Some(i) => {
            let target_level = if yn[i] > 1.0 { 1.0 + band } else { 1.0 - band };
            let frac = (target_level - yn[i]) / (yn[i + 1] - yn[i]);
            (t[i] + frac * (t[i + 1] - t[i]) - event_time, true)
        }
    };
    Ok(StepMetrics {
        rise_time,
        settling_time: settling_time.max(rise_time),
        overshoot,
        steady_state_error,
        initial,
        final_value,
        settled,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub w: f64,
    pub metrics: StepMetrics,
}

/// Metrics of `vsc1.i_ld` after the first `i_ld_ref` event of `scn`, up to
/// the next event or the end of the run.
pub fn first_step_metrics(scn: &Scenario, ts: &TimeSeries) -> Result<StepMetrics, HarnessError> {
    let idx = scn
        .events
        .iter()
        .position(|e| e.target == Target::ILdRef)
        .ok_or_else(|| HarnessError::Scenario("no i_ld_ref event to measure".into()))?;
    let e = scn.events[idx];
    let end = scn.events.get(idx + 1).map_or(scn.duration, |n| n.time);
    step_metrics_window(ts, "vsc1.i_ld", e.time, end, Some(e.value))
}

/// One simulation per tracking weight, everything else fixed.
pub fn weight_sweep(
    cfg: &SystemConfig,
    scn: &Scenario,
    weights: &[f64],
    exec: Execution,
) -> Result<Vec<SweepRow>, HarnessError> {
    for &w in weights {
        if !(0.0..=1.0).contains(&w) {
            return Err(ConfigError::invalid("mpc.w", format!("sweep weight {w} outside [0, 1]")).into());
        }
    }
    map_batch(exec, weights, |&w| {
        let mut c = cfg.clone();
        c.mpc.w = w;
        if c.mpc.w_q.is_some() {
            c.mpc.w_q = Some(w);
        }
        let ts = simulate_p2p(&c, scn)?;
        Ok(SweepRow {
            w,
            metrics: first_step_metrics(scn, &ts)?,
        })
    })
    .into_iter()
    .collect()
}

const METRIC_HEADER: [&str; 8] = [
    "w",
    "rise_time_s",
    "settling_time_s",
    "overshoot",
    "steady_state_error",
    "final_value",
    "settled",
    "degenerate",
];

fn metric_fields(r: &SweepRow) -> [String; 8] {
    let m = &r.metrics;
    [
        r.w.to_string(),
        m.rise_time.to_string(),
        m.settling_time.to_string(),
        m.overshoot.to_string(),
        m.steady_state_error.to_string(),
        m.final_value.to_string(),
        m.settled.to_string(),
        m.degenerate.to_string(),
    ]
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = METRIC_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&metric_fields(r).join(","));
        out.push('\n');
    }
    out
}

/// Right-aligned text table of the sweep.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            let m = &r.metrics;
            [
                format!("{:.2}", r.w),
                format!("{:.3e}", m.rise_time),
                format!("{:.3e}", m.settling_time),
                format!("{:.4}", m.overshoot),
                format!("{:.3e}", m.steady_state_error),
                format!("{:.5}", m.final_value),
                m.settled.to_string(),
                m.degenerate.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..8)
        .map(|i| cells.iter().map(|c| c[i].len()).chain([METRIC_HEADER[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |fields: &[&str]| -> String {
        let parts: Vec<String> = fields.iter().zip(&widths).map(|(f, w)| format!("{f:>w$}")).collect();
        parts.join("  ")
    };
    let mut out = line(&METRIC_HEADER);
    out.push('\n');
    for c in &cells {
        let refs: Vec<&str> = c.iter().map(String::as_str).collect();
        out.push_str(&line(&refs));
        out.push('\n');
    }
    out
}
