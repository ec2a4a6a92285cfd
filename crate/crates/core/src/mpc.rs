//! Receding-horizon current controller.
//!
//! Each control interval the controller predicts the converter currents over
//! `p` samples with the discretized reduced model, solves a QP over `m` input
//! moves (held after the last move) plus one slack variable, applies the first
//! move and subtracts the active-damping voltage.
//!
//! Everything inside the QP is in deviation coordinates around the
//! linearization point; bounds and references are shifted accordingly.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linear::{DiscreteModel, LinearModel};
use crate::params::{require_non_negative, require_positive, ConfigError, DampingParams};
use crate::plant::{PlantState, N_ELECTRICAL};
use crate::qp::{self, QpProblem, QpSolution, QpStatus};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcBounds {
    pub i_d_min: f64,
    pub i_d_max: f64,
    pub i_q_min: f64,
    pub i_q_max: f64,
    pub v_d_min: f64,
    pub v_d_max: f64,
    pub v_q_min: f64,
    pub v_q_max: f64,
}

impl Default for MpcBounds {
    fn default() -> Self {
        MpcBounds {
            i_d_min: -1.2,
            i_d_max: 1.2,
            i_q_min: -1.2,
            i_q_max: 1.2,
            v_d_min: -1.2,
            v_d_max: 1.2,
            v_q_min: -1.2,
            v_q_max: 1.2,
        }
    }
}

/// Constraint-softening constants: how far each bound moves per unit of slack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Softening {
    pub v_id: f64,
    pub v_iq: f64,
    pub v_vd: f64,
    pub v_vq: f64,
}

impl Default for Softening {
    fn default() -> Self {
        Softening {
            v_id: 1.0,
            v_iq: 1.0,
            v_vd: 0.0,
            v_vq: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Control sample time (s).
    pub ts: f64,
    /// Prediction horizon (samples).
    pub p: usize,
    /// Control horizon (samples).
    pub m: usize,
    /// Tracking weight of both currents.
    pub w: f64,
    /// Separate q-axis tracking weight; `w` when absent.
    pub w_q: Option<f64>,
    /// Penalty on successive input moves, independent of `w`.
    pub move_weight: f64,
    /// Slack penalty.
    pub rho_eps: f64,
    pub bounds: MpcBounds,
    pub softening: Softening,
    /// Feed the last one-step prediction error forward as a constant state
    /// disturbance over the horizon.
    pub disturbance_feedback: bool,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            ts: 500e-6,
            p: 10,
            m: 3,
            w: 0.6,
            w_q: None,
            move_weight: 0.3,
            rho_eps: 1e5,
            bounds: MpcBounds::default(),
            softening: Softening::default(),
            disturbance_feedback: true,
            qp_tol: qp::DEFAULT_TOL,
            qp_max_iter: qp::DEFAULT_MAX_ITER,
        }
    }
}

impl MpcConfig {
    pub fn weights(&self) -> [f64; 2] {
        [self.w, self.w_q.unwrap_or(self.w)]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        require_positive("mpc.ts", self.ts)?;
        if self.m < 1 || self.m > self.p {
            return Err(ConfigError::invalid(
                "mpc.m",
                format!("need 1 <= m <= p, got m = {}, p = {}", self.m, self.p),
            ));
        }
        for (name, w) in [("mpc.w", Some(self.w)), ("mpc.w_q", self.w_q)] {
            if let Some(w) = w {
                if !(0.0..=1.0).contains(&w) {
                    return Err(ConfigError::invalid(name, format!("must lie in [0, 1], got {w}")));
                }
            }
        }
        require_non_negative("mpc.move_weight", self.move_weight)?;
        require_positive("mpc.rho_eps", self.rho_eps)?;
        let b = &self.bounds;
        for (name, lo, hi) in [
            ("mpc.bounds.i_d", b.i_d_min, b.i_d_max),
            ("mpc.bounds.i_q", b.i_q_min, b.i_q_max),
            ("mpc.bounds.v_d", b.v_d_min, b.v_d_max),
            ("mpc.bounds.v_q", b.v_q_min, b.v_q_max),
        ] {
            if !(lo < hi) {
                return Err(ConfigError::invalid(name, format!("min {lo} must be below max {hi}")));
            }
        }
        let s = &self.softening;
        require_non_negative("mpc.softening.v_id", s.v_id)?;
        require_non_negative("mpc.softening.v_iq", s.v_iq)?;
        require_non_negative("mpc.softening.v_vd", s.v_vd)?;
        require_non_negative("mpc.softening.v_vq", s.v_vq)?;
        require_positive("mpc.qp_tol", self.qp_tol)?;
        if self.qp_max_iter == 0 {
            return Err(ConfigError::invalid("mpc.qp_max_iter", "must be >= 1"));
        }
        Ok(())
    }
}

/// Stacked predictions `Y = phi x + gamma U` over the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `(ny p) x n`
    pub phi: DMatrix<f64>,
    /// `(ny p) x (nu m)`
    pub gamma: DMatrix<f64>,
    pub p: usize,
    pub m: usize,
    pub ny: usize,
    pub nu: usize,
}

pub fn build_prediction(dm: &DiscreteModel, p: usize, m: usize) -> Prediction {
    assert!(m >= 1 && m <= p, "horizons must satisfy 1 <= m <= p");
    let n = dm.n();
    let ny = dm.c_d.nrows();
    let nu = dm.b_d.ncols();

    // markov[k] = C A^k B, powers[k] = C A^k
    let mut powers = Vec::with_capacity(p + 1);
    let mut ak = DMatrix::identity(n, n);
    for _ in 0..=p {
        powers.push(&dm.c_d * &ak);
        ak = &dm.a_d * ak;
    }
    let markov: Vec<DMatrix<f64>> = powers.iter().map(|ca| ca * &dm.b_d).collect();

    let mut phi = DMatrix::zeros(ny * p, n);
    let mut gamma = DMatrix::zeros(ny * p, nu * m);
    for i in 1..=p {
        let r = (i - 1) * ny;
        phi.view_mut((r, 0), (ny, n)).copy_from(&powers[i]);
        for j in 0..m {
            if j > i - 1 {
                break;
            }
            let block = if j < m - 1 {
                markov[i - 1 - j].clone()
            } else {
                // last move is held for the rest of the horizon
                (j..i).fold(DMatrix::zeros(ny, nu), |acc, l| acc + &markov[i - 1 - l])
            };
            gamma.view_mut((r, j * nu), (ny, nu)).copy_from(&block);
        }
    }
    Prediction {
        phi,
        gamma,
        p,
        m,
        ny,
        nu,
    }
}

/// Linearization point the QP is expressed around.
#[derive(Clone, Debug, PartialEq)]
pub struct Origin {
    pub x0: DVector<f64>,
    pub u0: DVector<f64>,
    pub y0: DVector<f64>,
}

impl Origin {
    pub fn zero(n: usize, nu: usize, ny: usize) -> Self {
        Origin {
            x0: DVector::zeros(n),
            u0: DVector::zeros(nu),
            y0: DVector::zeros(ny),
        }
    }
}

/// Builds the QP over `z = [u(k) .. u(k+m-1), eps]`.
///
/// `x_dev` is the state deviation (including any disturbance correction
/// already folded into the free response through `free`), `refs` the stacked
/// absolute output references over the horizon, `u_prev` the absolute input
/// applied in the previous interval.
pub fn assemble_qp(
    pred: &Prediction,
    free: &DVector<f64>,
    refs: &DVector<f64>,
    u_prev: &DVector<f64>,
    cfg: &MpcConfig,
    origin: &Origin,
) -> QpProblem {
    let (p, m, ny, nu) = (pred.p, pred.m, pred.ny, pred.nu);
    let nz = nu * m + 1;
    let eps = nz - 1;
    assert!(ny <= 2 && nu <= 2, "bounds are defined for (d, q) pairs");

    let weights = cfg.weights();
    let wsq = DVector::from_fn(ny * p, |r, _| weights[r % ny].powi(2));

    // tracking error target in deviation coordinates
    let target = DVector::from_fn(ny * p, |r, _| refs[r] - origin.y0[r % ny] - free[r]);

    let gw = DMatrix::from_fn(ny * p, nu * m, |r, c| pred.gamma[(r, c)] * wsq[r]);
    let mut h = DMatrix::zeros(nz, nz);
    let mut f = DVector::zeros(nz);
    let huu = 2.0 * pred.gamma.transpose() * &gw;
    h.view_mut((0, 0), (nu * m, nu * m)).copy_from(&huu);
    let fu = -2.0 * gw.transpose() * &target;
    f.rows_mut(0, nu * m).copy_from(&fu);

    // move suppression: sum_j |u_j - u_{j-1}|^2, u_{-1} = previous input
    if cfg.move_weight > 0.0 {
        let r = cfg.move_weight;
        let prev = u_prev - &origin.u0;
        for j in 0..m {
            for a in 0..nu {
                let i = j * nu + a;
                h[(i, i)] += 2.0 * r;
                if j > 0 {
                    let k = i - nu;
                    h[(k, k)] += 2.0 * r;
                    h[(i, k)] -= 2.0 * r;
                    h[(k, i)] -= 2.0 * r;
                } else {
                    f[i] -= 2.0 * r * prev[a];
                }
            }
        }
    }
    h[(eps, eps)] = 2.0 * cfg.rho_eps;

    let b = &cfg.bounds;
    let s = &cfg.softening;
    let y_lim = [(b.i_d_min, b.i_d_max, s.v_id), (b.i_q_min, b.i_q_max, s.v_iq)];
    let u_lim = [(b.v_d_min, b.v_d_max, s.v_vd), (b.v_q_min, b.v_q_max, s.v_vq)];

    let rows = 2 * ny * p + 2 * nu * m + 1;
    let mut a = DMatrix::zeros(rows, nz);
    let mut bv = DVector::zeros(rows);
    let mut row = 0;
    for r in 0..ny * p {
        let o = r % ny;
        let (lo, hi, soft) = y_lim[o];
        let free_abs = origin.y0[o] + free[r];
        for c in 0..nu * m {
            a[(row, c)] = pred.gamma[(r, c)];
            a[(row + 1, c)] = -pred.gamma[(r, c)];
        }
        a[(row, eps)] = -soft;
        a[(row + 1, eps)] = -soft;
        bv[row] = hi - free_abs;
        bv[row + 1] = free_abs - lo;
        row += 2;
    }
    for j in 0..m {
        for k in 0..nu {
            let (lo, hi, soft) = u_lim[k];
            let c = j * nu + k;
            a[(row, c)] = 1.0;
            a[(row, eps)] = -soft;
            bv[row] = hi - origin.u0[k];
            a[(row + 1, c)] = -1.0;
            a[(row + 1, eps)] = -soft;
            bv[row + 1] = origin.u0[k] - lo;
            row += 2;
        }
    }
    a[(row, eps)] = -1.0;
    bv[row] = 0.0;

    QpProblem {
        h,
        f,
        a_ineq: a,
        b_ineq: bv,
    }
}

/// Damping voltage `K_AD (v_o - phi)` per axis.
pub fn active_damping(v_od: f64, v_oq: f64, phi_d: f64, phi_q: f64, dp: &DampingParams) -> (f64, f64) {
    (dp.k_ad * (v_od - phi_d), dp.k_ad * (v_oq - phi_q))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CurrentRefs {
    pub i_ld: f64,
    pub i_lq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MpcDiagnostics {
    /// Optimal cost including the constant tracking term.
    pub cost: f64,
    #[serde(skip)]
    pub status: Option<QpStatus>,
    pub epsilon: f64,
    pub iterations: usize,
    pub active_constraints: usize,
    pub kkt_residual: f64,
    pub fallback: bool,
    /// Largest amount by which the optimal prediction exceeds a nominal output bound.
    pub predicted_output_violation: f64,
    /// Input before damping and clipping.
    pub v_mpc: (f64, f64),
    pub v_damping: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcState {
    /// Last optimized (absolute) converter voltage, before damping.
    pub last_input: (f64, f64),
    pub last_lambda: Option<DVector<f64>>,
    /// Model response to the last state and applied input, without disturbance.
    pub predicted_next: Option<DVector<f64>>,
    pub disturbance: DVector<f64>,
    pub diagnostics: Option<MpcDiagnostics>,
}

/// Controller instance bound to one linearization.
#[derive(Clone, Debug)]
pub struct MpcController {
    pub cfg: MpcConfig,
    pub damping: DampingParams,
    pub dm: DiscreteModel,
    pub pred: Prediction,
    pub origin: Origin,
    /// `sum_{k<p} A^k` rows mapped to outputs, for the disturbance term.
    dist_gain: DMatrix<f64>,
    pub state: MpcState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcStep {
    /// Converter voltage reference actually emitted.
    pub v_ref: (f64, f64),
    pub diagnostics: MpcDiagnostics,
}

impl MpcController {
    pub fn new(cfg: MpcConfig, damping: DampingParams, lm: &LinearModel) -> Result<Self, crate::linear::LinearError> {
        let dm = crate::linear::discretize_zoh(lm, cfg.ts)?;
        let pred = build_prediction(&dm, cfg.p, cfg.m);
        let origin = Origin {
            x0: lm.x0(),
            u0: DVector::from_vec(vec![lm.op.u0.v_cvd, lm.op.u0.v_cvq]),
            y0: &lm.c * lm.x0(),
        };
        Ok(Self::from_parts(cfg, damping, dm, pred, origin))
    }

    pub fn from_parts(
        cfg: MpcConfig,
        damping: DampingParams,
        dm: DiscreteModel,
        pred: Prediction,
        origin: Origin,
    ) -> Self {
        let n = dm.n();
        // y(k+i) picks up sum_{l<i} C A^l d from a constant disturbance d
        let mut dist_gain = DMatrix::zeros(pred.ny * pred.p, n);
        let mut acc = DMatrix::<f64>::zeros(n, n);
        let mut ak = DMatrix::<f64>::identity(n, n);
        for i in 1..=pred.p {
            acc += &ak;
            ak = &dm.a_d * ak;
            dist_gain
                .view_mut(((i - 1) * pred.ny, 0), (pred.ny, n))
                .copy_from(&(&dm.c_d * &acc));
        }
        let last_input = (origin.u0[0], origin.u0.get(1).copied().unwrap_or(0.0));
        MpcController {
            state: MpcState {
                last_input,
                last_lambda: None,
                predicted_next: None,
                disturbance: DVector::zeros(n),
                diagnostics: None,
            },
            cfg,
            damping,
            dm,
            pred,
            origin,
            dist_gain,
        }
    }

    /// Stacked free response (deviation) and the QP for the given measurement.
    pub fn build_qp(&self, x_dev: &DVector<f64>, refs: CurrentRefs) -> (DVector<f64>, QpProblem) {
        let mut free = &self.pred.phi * x_dev;
        if self.cfg.disturbance_feedback {
            free += &self.dist_gain * &self.state.disturbance;
        }
        let ny = self.pred.ny;
        let r = DVector::from_fn(ny * self.pred.p, |i, _| if i % ny == 0 { refs.i_ld } else { refs.i_lq });
        let u_prev = DVector::from_vec(vec![self.state.last_input.0, self.state.last_input.1]);
        let qp = assemble_qp(&self.pred, &free, &r, &u_prev, &self.cfg, &self.origin);
        (free, qp)
    }

    fn deviation(&self, plant: &PlantState) -> DVector<f64> {
        let x: [f64; N_ELECTRICAL] = plant.electrical();
        DVector::from_column_slice(&x[..self.dm.n()]) - &self.origin.x0
    }

    /// One control interval: solve, take the first move, subtract damping, clip.
    pub fn control_step(&mut self, plant: &PlantState, refs: CurrentRefs) -> MpcStep {
        let x_dev = self.deviation(plant);
        if self.cfg.disturbance_feedback {
            if let Some(pred) = &self.state.predicted_next {
                self.state.disturbance = &x_dev - pred;
            }
        }
        let (free, qp) = self.build_qp(&x_dev, refs);
        let nu = self.pred.nu;
        let nz = qp.n();

        let solved = qp::solve_warm(
            &qp,
            self.cfg.qp_tol,
            self.cfg.qp_max_iter,
            self.state.last_lambda.as_ref(),
        );
        let (z, sol): (DVector<f64>, Option<QpSolution>) = match solved {
            Ok(s) if s.status == QpStatus::Optimal => (s.z.clone(), Some(s)),
            other => {
                debug!("MPC falling back to clipped unconstrained move: {:?}", other.as_ref().map(|s| s.status));
                (self.unconstrained(&qp), other.ok())
            }
        };
        let fallback = sol.as_ref().is_none_or(|s| s.status != QpStatus::Optimal);

        let u_dev = z.rows(0, nu).into_owned();
        let u = (self.origin.u0[0] + u_dev[0], self.origin.u0[1] + u_dev[1]);
        let v_ad = active_damping(plant.v_od, plant.v_oq, plant.phi_d, plant.phi_q, &self.damping);
        let b = &self.cfg.bounds;
        let v_ref = (
            (u.0 - v_ad.0).clamp(b.v_d_min, b.v_d_max),
            (u.1 - v_ad.1).clamp(b.v_q_min, b.v_q_max),
        );

        // constant tracking term so that the reported cost is J itself
        let weights = self.cfg.weights();
        let ny = self.pred.ny;
        let r = DVector::from_fn(ny * self.pred.p, |i, _| if i % ny == 0 { refs.i_ld } else { refs.i_lq });
        let mut constant = 0.0;
        for i in 0..ny * self.pred.p {
            let e = r[i] - self.origin.y0[i % ny] - free[i];
            constant += weights[i % ny].powi(2) * e * e;
        }
        if self.cfg.move_weight > 0.0 {
            let prev = (self.state.last_input.0 - self.origin.u0[0], self.state.last_input.1 - self.origin.u0[1]);
            constant += self.cfg.move_weight * (prev.0 * prev.0 + prev.1 * prev.1);
        }
        let cost = qp.objective(&z) + constant;

        let epsilon = z[nz - 1];
        let y_pred = &free + &self.pred.gamma * z.rows(0, nu * self.pred.m);
        let predicted_output_violation = self.output_violation(&y_pred);

        // next-state prediction uses the input that reaches the plant
        if self.cfg.disturbance_feedback {
            let applied = DVector::from_vec(vec![v_ref.0 - self.origin.u0[0], v_ref.1 - self.origin.u0[1]]);
            self.state.predicted_next = Some(self.dm.step(&x_dev, &applied));
        }

        let diagnostics = MpcDiagnostics {
            cost,
            status: sol.as_ref().map(|s| s.status),
            epsilon,
            iterations: sol.as_ref().map_or(0, |s| s.iterations),
            active_constraints: sol.as_ref().map_or(0, |s| s.active_set.len()),
            kkt_residual: sol.as_ref().map_or(f64::NAN, |s| s.kkt_residual),
            fallback,
            predicted_output_violation,
            v_mpc: u,
            v_damping: v_ad,
        };
        self.state.last_input = u;
        self.state.last_lambda = sol.filter(|s| s.status == QpStatus::Optimal).map(|s| s.lambda);
        self.state.diagnostics = Some(diagnostics.clone());
        MpcStep { v_ref, diagnostics }
    }

    /// Minimizer ignoring constraints, with inputs clipped to their bounds.
    fn unconstrained(&self, qp: &QpProblem) -> DVector<f64> {
        let nz = qp.n();
        let mut h = qp.h.clone();
        for i in 0..nz {
            h[(i, i)] += 1e-9 * (qp.h.trace() / nz as f64).max(1e-12);
        }
        let mut z = h
            .cholesky()
            .map(|c| -c.solve(&qp.f))
            .unwrap_or_else(|| DVector::zeros(nz));
        let b = &self.cfg.bounds;
        let lim = [(b.v_d_min, b.v_d_max), (b.v_q_min, b.v_q_max)];
        for j in 0..self.pred.m {
            for k in 0..self.pred.nu {
                let i = j * self.pred.nu + k;
                z[i] = z[i].clamp(lim[k].0 - self.origin.u0[k], lim[k].1 - self.origin.u0[k]);
            }
        }
        z[nz - 1] = 0.0;
        z
    }

    /// Largest exceedance of the nominal output bounds by a stacked deviation prediction.
    pub fn output_violation(&self, y_dev: &DVector<f64>) -> f64 {
        let b = &self.cfg.bounds;
        let lim = [(b.i_d_min, b.i_d_max), (b.i_q_min, b.i_q_max)];
        let ny = self.pred.ny;
        (0..y_dev.len()).fold(0.0, |acc, i| {
            let y = self.origin.y0[i % ny] + y_dev[i];
            let (lo, hi) = lim[i % ny];
            acc.max(y - hi).max(lo - y)
        })
    }
}
