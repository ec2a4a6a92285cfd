//! Operating points, small-signal models and their discretization.
//!
//! The numeric Jacobian of [`plant::derivative_array`] defines the linear
//! model. [`analytic_reduced`] builds the closed-form reduced matrices, reading
//! the steady-state modulation indices as `D_d = V_cvd0 / V_dc0` and
//! `D_q = V_cvq0 / V_dc0`; [`compare_jacobians`] reports where the two differ.

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::plant::{
    self, derivative_array, idx, PlantError, PlantInput, PlantState, StationModel, INPUT_NAMES,
    N_ELECTRICAL, N_INPUTS, N_STATES, STATE_NAMES,
};

pub type C64 = Complex<f64>;

/// Residual bound an operating point must meet.
pub const OP_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("operating point did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular Jacobian in operating-point solve")]
    SingularJacobian,
    #[error("non-finite Jacobian entry at ({row}, {col})")]
    NonFiniteJacobian { row: usize, col: usize },
    #[error("sI - A is singular at s = {s} ({hz:.3} Hz)")]
    Resonance { s: C64, hz: f64 },
    #[error("eigenvalue iteration failed")]
    EigenFailure,
    #[error("sample time must be positive, got {0}")]
    InvalidSampleTime(f64),
}

/// Regulated quantities an operating point is solved for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OperatingTargets {
    pub i_ld: f64,
    pub i_lq: f64,
    pub v_dc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub x0: PlantState,
    pub u0: PlantInput,
    /// Max-norm of the state derivative at `(x0, u0)`.
    pub residual: f64,
}

impl OperatingPoint {
    /// Steady-state modulation indices `(D_d, D_q)`.
    pub fn modulation(&self) -> (f64, f64) {
        (self.u0.v_cvd / self.x0.v_dc, self.u0.v_cvq / self.x0.v_dc)
    }
}

// Free unknowns of the operating-point problem, in the order they are solved.
const FREE_STATES: [usize; 10] = [
    idx::I_OD,
    idx::I_OQ,
    idx::V_OD,
    idx::V_OQ,
    idx::V_PLL_D,
    idx::V_PLL_Q,
    idx::EPS_PLL,
    idx::D_THETA_PLL,
    idx::PHI_D,
    idx::PHI_Q,
];

fn assemble(
    targets: &OperatingTargets,
    v_g: f64,
    z: &DVector<f64>,
) -> ([f64; N_STATES], PlantInput) {
    let mut x = [0.0; N_STATES];
    x[idx::I_LD] = targets.i_ld;
    x[idx::I_LQ] = targets.i_lq;
    x[idx::V_DC] = targets.v_dc;
    for (k, &i) in FREE_STATES.iter().enumerate() {
        x[i] = z[k];
    }
    let u = PlantInput {
        v_cvd: z[10],
        v_cvq: z[11],
        v_g_mag: v_g,
        i_dc_line: z[12],
    };
    (x, u)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Newton solve of `derivative = 0` with the converter current and dc voltage pinned.
pub fn solve_operating_point(
    m: &StationModel,
    targets: &OperatingTargets,
) -> Result<OperatingPoint, LinearError> {
    const MAX_ITER: usize = 60;
    let p = &m.params;
    let v_g = p.v_g_mag;
    let w = p.omega_g;

    // Start from the lossless phasor solution with the capacitor current neglected.
    let i_od = targets.i_ld;
    let sin_guess = (m.l_eff * w * i_od / v_g).clamp(-0.9, 0.9);
    let mut z = DVector::from_vec(vec![
        i_od,
        targets.i_lq - p.c_f * w * v_g,
        v_g,
        0.0,
        v_g,
        0.0,
        0.0,
        sin_guess.asin(),
        v_g,
        0.0,
        v_g,
        w * p.l_c * targets.i_ld,
        (targets.i_ld * v_g) / targets.v_dc,
    ]);

    let eval = |z: &DVector<f64>| -> Result<DVector<f64>, LinearError> {
        let (x, u) = assemble(targets, v_g, z);
        Ok(DVector::from_column_slice(&derivative_array(m, &x, &u)?))
    };

    let mut f = eval(&z)?;
    let mut residual = f.amax();
    for _ in 0..MAX_ITER {
        if residual < OP_RESIDUAL_TOL * 1e-2 {
            break;
        }
        let mut jac = DMatrix::zeros(N_STATES, N_STATES);
        for j in 0..N_STATES {
            let h = 1e-7 * z[j].abs().max(1.0);
            let mut zp = z.clone();
            zp[j] += h;
            let mut zm = z.clone();
            zm[j] -= h;
            let col = (eval(&zp)? - eval(&zm)?) / (2.0 * h);
            jac.set_column(j, &col);
        }
        let step = jac
            .lu()
            .solve(&(-&f))
            .ok_or(LinearError::SingularJacobian)?;
        if !step.iter().all(|v| v.is_finite()) {
            return Err(LinearError::SingularJacobian);
        }
        // Backtracking keeps the sin/cos branch from overshooting.
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-4 {
            let trial = &z + alpha * &step;
            if let Ok(ft) = eval(&trial) {
                let rt = ft.amax();
                if rt < residual || residual < OP_RESIDUAL_TOL {
                    z = trial;
                    f = ft;
                    residual = rt;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    if !(residual < OP_RESIDUAL_TOL) {
        return Err(LinearError::NoConvergence {
            iterations: MAX_ITER,
            residual,
        });
    }
    let (x, u0) = assemble(targets, v_g, &z);
    Ok(OperatingPoint {
        x0: PlantState::from_array(&x),
        u0,
        residual,
    })
}

/// Continuous small-signal model `dx = A x + B u`, `y = C x + D u`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub op: OperatingPoint,
    pub state_names: Vec<&'static str>,
    pub input_names: Vec<&'static str>,
}

impl LinearModel {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// The reduced operating-point state restricted to this model's states.
    pub fn x0(&self) -> DVector<f64> {
        let x = self.op.x0.to_array();
        DVector::from_column_slice(&x[..self.n()])
    }
}

fn jacobians(
    m: &StationModel,
    op: &OperatingPoint,
) -> Result<(DMatrix<f64>, DMatrix<f64>), LinearError> {
    let x0 = op.x0.to_array();
    let u0 = op.u0.to_array();
    let f = |x: &[f64; N_STATES], u: &[f64; N_INPUTS]| {
        derivative_array(m, x, &PlantInput::from_array(u))
    };
    let step = |v: f64| 1e-6 * v.abs().max(1.0);

    let mut a = DMatrix::zeros(N_STATES, N_STATES);
    for j in 0..N_STATES {
        let h = step(x0[j]);
        let (mut xp, mut xm) = (x0, x0);
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp, &u0)?, f(&xm, &u0)?);
        for i in 0..N_STATES {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let mut b = DMatrix::zeros(N_STATES, N_INPUTS);
    for j in 0..N_INPUTS {
        let h = step(u0[j]);
        let (mut up, mut um) = (u0, u0);
        up[j] += h;
        um[j] -= h;
        let (fp, fm) = (f(&x0, &up)?, f(&x0, &um)?);
        for i in 0..N_STATES {
            b[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    for mat in [&a, &b] {
        for i in 0..mat.nrows() {
            for j in 0..mat.ncols() {
                if !mat[(i, j)].is_finite() {
                    return Err(LinearError::NonFiniteJacobian { row: i, col: j });
                }
            }
        }
    }
    Ok((a, b))
}

fn current_selector(n: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(2, n);
    c[(0, idx::I_LD)] = 1.0;
    c[(1, idx::I_LQ)] = 1.0;
    c
}

/// Full 13-state model with all four plant inputs; outputs `(i_ld, i_lq)`.
pub fn linearize_full(m: &StationModel, op: &OperatingPoint) -> Result<LinearModel, LinearError> {
    let (a, b) = jacobians(m, op)?;
    Ok(LinearModel {
        a,
        b,
        c: current_selector(N_STATES),
        d: DMatrix::zeros(2, N_INPUTS),
        op: *op,
        state_names: STATE_NAMES.to_vec(),
        input_names: INPUT_NAMES.to_vec(),
    })
}

/// Reduced 7-state electrical model driven by `(v_cvd, v_cvq)`.
///
/// Grid voltage and dc line current are held at their operating values and
/// the PLL angle is frozen, so the grid source appears as a constant.
pub fn linearize(m: &StationModel, op: &OperatingPoint) -> Result<LinearModel, LinearError> {
    let full = linearize_full(m, op)?;
    Ok(reduce(&full))
}

/// Restricts a full model to the electrical states and converter-voltage inputs.
pub fn reduce(full: &LinearModel) -> LinearModel {
    let n = N_ELECTRICAL;
    LinearModel {
        a: full.a.view((0, 0), (n, n)).into_owned(),
        b: full.b.view((0, 0), (n, 2)).into_owned(),
        c: current_selector(n),
        d: DMatrix::zeros(2, 2),
        op: full.op,
        state_names: STATE_NAMES[..n].to_vec(),
        input_names: INPUT_NAMES[..2].to_vec(),
    }
}

/// Closed-form reduced matrices: `A` is 7x7, `B` is 7x4 over `[v_cvd v_cvq v_g i_dc]`.
pub fn analytic_reduced(m: &StationModel, op: &OperatingPoint) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = &m.params;
    let wb = m.omega_b;
    let w = wb * p.omega_g;
    let (dd, dq) = op.modulation();
    let v_dc0 = op.x0.v_dc;
    let (i_ld0, i_lq0) = (op.x0.i_ld, op.x0.i_lq);
    let (lc, rc, cf, cdc) = (p.l_c, p.r_c, p.c_f, p.c_dc);
    let (lg, rg) = (m.l_eff, m.r_eff);
    let c33 = wb * (dd * i_ld0 + dq * i_lq0) / (cdc * v_dc0);

    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(7, 7, &[
        -wb * rc / lc, w,             0.0, 0.0,           0.0,           -wb / lc, 0.0,
        -w,            -wb * rc / lc, 0.0, 0.0,           0.0,           0.0,      -wb / lc,
        -dd * wb / cdc, -dq * wb / cdc, c33, 0.0,         0.0,           0.0,      0.0,
        0.0,           0.0,           0.0, -wb * rg / lg, w,             wb / lg,  0.0,
        0.0,           0.0,           0.0, -w,            -wb * rg / lg, 0.0,      wb / lg,
        wb / cf,       0.0,           0.0, -wb / cf,      0.0,           0.0,      w,
        0.0,           wb / cf,       0.0, 0.0,           -wb / cf,      -w,       0.0,
    ]);
    let (s, c) = op.x0.d_theta_pll.sin_cos();
    #[rustfmt::skip]
    let b = DMatrix::from_row_slice(7, 4, &[
        wb / lc,                     0.0,                         0.0,          0.0,
        0.0,                         wb / lc,                     0.0,          0.0,
        -dd * wb / (cdc * v_dc0),    -dq * wb / (cdc * v_dc0),    0.0,          wb / cdc,
        0.0,                         0.0,                         -wb * c / lg, 0.0,
        0.0,                         0.0,                         wb * s / lg,  0.0,
        0.0,                         0.0,                         0.0,          0.0,
        0.0,                         0.0,                         0.0,          0.0,
    ]);
    (a, b)
}

/// Entries of the closed-form `B` that differ from the derivative of the
/// power-balance dc equation: `(row, col)` in the 7x4 input matrix.
pub const DISPUTED_B_ENTRIES: [(usize, usize); 2] = [(2, 0), (2, 1)];

#[derive(Clone, Debug, Serialize)]
pub struct EntryComparison {
    pub matrix: char,
    pub row: usize,
    pub col: usize,
    pub numeric: f64,
    pub analytic: f64,
    pub tolerance: f64,
    pub disputed: bool,
}

impl EntryComparison {
    pub fn agrees(&self) -> bool {
        (self.numeric - self.analytic).abs() <= self.tolerance
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct JacobianReport {
    pub entries: Vec<EntryComparison>,
}

impl JacobianReport {
    /// Non-disputed entries outside tolerance.
    pub fn mismatches(&self) -> Vec<&EntryComparison> {
        self.entries
            .iter()
            .filter(|e| !e.disputed && !e.agrees())
            .collect()
    }

    pub fn disputed(&self) -> Vec<&EntryComparison> {
        self.entries.iter().filter(|e| e.disputed).collect()
    }

    pub fn render_discrepancies(&self) -> String {
        let mut out = String::new();
        for e in self.disputed() {
            out.push_str(&format!(
                "disputed {}[{}][{}]: numeric {:.9e}, closed form {:.9e}, difference {:.3e}\n",
                e.matrix,
                e.row,
                e.col,
                e.numeric,
                e.analytic,
                e.numeric - e.analytic
            ));
        }
        out
    }
}

/// Entrywise comparison of the numeric full-model Jacobian, restricted to the
/// electrical states, against the closed-form reduced matrices.
pub fn compare_jacobians(m: &StationModel, op: &OperatingPoint) -> Result<JacobianReport, LinearError> {
    let full = linearize_full(m, op)?;
    let (aa, ba) = analytic_reduced(m, op);
    let tol = |v: f64| 1e-5f64.max(1e-5 * v.abs());
    let mut entries = Vec::new();
    for i in 0..N_ELECTRICAL {
        for j in 0..N_ELECTRICAL {
            entries.push(EntryComparison {
                matrix: 'A',
                row: i,
                col: j,
                numeric: full.a[(i, j)],
                analytic: aa[(i, j)],
                tolerance: tol(aa[(i, j)]),
                disputed: false,
            });
        }
        for j in 0..N_INPUTS {
            entries.push(EntryComparison {
                matrix: 'B',
                row: i,
                col: j,
                numeric: full.b[(i, j)],
                analytic: ba[(i, j)],
                tolerance: tol(ba[(i, j)]),
                disputed: DISPUTED_B_ENTRIES.contains(&(i, j)),
            });
        }
    }
    Ok(JacobianReport { entries })
}

/// `G(s) = C (sI - A)^-1 B + D`.
pub fn transfer_function(lm: &LinearModel, s: C64) -> Result<DMatrix<C64>, LinearError> {
    let n = lm.n();
    let cplx = |m: &DMatrix<f64>| m.map(|v| C64::new(v, 0.0));
    let si_a = DMatrix::from_diagonal_element(n, n, s) - cplx(&lm.a);
    let resonance = LinearError::Resonance {
        s,
        hz: s.im.abs() / (2.0 * std::f64::consts::PI),
    };
    let lu = si_a.lu();
    // Relative pivot check: LU succeeds numerically on nearly singular matrices.
    let u = lu.u();
    let scale = u.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    let min_pivot = (0..n).fold(f64::INFINITY, |m, i| m.min(u[(i, i)].norm()));
    if !(min_pivot > 1e-13 * scale.max(1e-300)) {
        return Err(resonance);
    }
    let x = lu.solve(&cplx(&lm.b)).ok_or(resonance)?;
    Ok(cplx(&lm.c) * x + cplx(&lm.d))
}

/// Eigenvalues of `A`, sorted by real part, largest first.
pub fn eigenvalues(lm: &LinearModel) -> Result<Vec<C64>, LinearError> {
    matrix_eigenvalues(&lm.a)
}

pub fn matrix_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<C64>, LinearError> {
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), 1e-14, 10_000)
        .ok_or(LinearError::EigenFailure)?;
    let mut ev: Vec<C64> = schur.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
    Ok(ev)
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=30 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.amax() <= f64::EPSILON * 1e-3 * sum.amax() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteModel {
    pub a_d: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub c_d: DMatrix<f64>,
    pub d_d: DMatrix<f64>,
    /// Sample time (s).
    pub ts: f64,
}

impl DiscreteModel {
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a_d * x + &self.b_d * u
    }

    pub fn n(&self) -> usize {
        self.a_d.nrows()
    }
}

/// Zero-order-hold discretization.
pub fn discretize_zoh(lm: &LinearModel, ts: f64) -> Result<DiscreteModel, LinearError> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(LinearError::InvalidSampleTime(ts));
    }
    let (a_d, b_d) = zoh_matrices(&lm.a, &lm.b, ts);
    Ok(DiscreteModel {
        a_d,
        b_d,
        c_d: lm.c.clone(),
        d_d: lm.d.clone(),
        ts,
    })
}

/// `(exp(A ts), integral_0^ts exp(A t) dt B)`.
pub fn zoh_matrices(a: &DMatrix<f64>, b: &DMatrix<f64>, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let a_d = expm(&(a * ts));
    if let Some(inv) = well_conditioned_inverse(a) {
        let b_d = inv * (&a_d - DMatrix::identity(n, n)) * b;
        return (a_d, b_d);
    }
    let (a_aug, b_aug) = augmented_zoh(a, b, ts);
    debug_assert!((&a_aug - &a_d).amax() < 1e-9 * a_d.amax().max(1.0));
    (a_d, b_aug)
}

/// ZOH through the exponential of `[[A, B], [0, 0]] ts`.
pub fn augmented_zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (a.nrows(), b.ncols());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * ts));
    let e = expm(&aug);
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    )
}

fn well_conditioned_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = a.clone().try_inverse()?;
    let cond = a.amax() * inv.amax() * a.nrows() as f64;
    (cond.is_finite() && cond < 1e8).then_some(inv)
}

/// Convenience for callers holding only a plant model and a target.
pub fn nominal_model(
    m: &StationModel,
    targets: &OperatingTargets,
) -> Result<(OperatingPoint, LinearModel), LinearError> {
    let op = solve_operating_point(m, targets)?;
    let lm = linearize(m, &op)?;
    Ok((op, lm))
}

/// Max-norm of the derivative at `(s, u)`.
pub fn residual_at(m: &StationModel, s: &PlantState, u: &PlantInput) -> Result<f64, PlantError> {
    Ok(max_abs(&plant::derivative_array(m, &s.to_array(), u)?))
}
