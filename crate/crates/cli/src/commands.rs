use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;

use hvdc_core::harness::{
    simulate_p2p, step_metrics_window, sweep_csv, sweep_table, weight_sweep, Scenario, StepMetrics, Target,
    TimeSeries,
};
use hvdc_core::linear::{
    compare_jacobians, eigenvalues, linearize, linearize_full, solve_operating_point, transfer_function,
    LinearModel, OperatingTargets, C64,
};
use hvdc_core::params::{load_config, SystemConfig};
use hvdc_core::plant::StationModel;
use hvdc_core::{map_batch, Execution};

use crate::output::{sha256_hex, Manifest, Outputs};
use crate::{CliError, Command, Common};

pub fn run(common: &Common, command: &Command) -> Result<(), CliError> {
    let (cfg, source) = load(common)?;
    let exec = if common.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let mut out = Outputs::new(common.out.as_deref())?;
    let mut manifest = Manifest {
        tool: "hvdc",
        version: env!("CARGO_PKG_VERSION"),
        command: "",
        config_source: source,
        config_sha256: sha256_hex(cfg.to_toml_string().as_bytes()),
        scenario_sha256: None,
        parallel: cfg!(feature = "parallel") && exec == Execution::Parallel,
    };

    match command {
        Command::Simulate { scenario, long_scenario } => {
            manifest.command = "simulate";
            let scn = match scenario {
                Some(path) => read_scenario(path)?,
                None => Scenario::step_response(&cfg.scenario, *long_scenario),
            };
            run_scenario(&cfg, &scn, "timeseries.csv", &mut out, &mut manifest)?;
        }
        Command::Step { long_scenario } => {
            manifest.command = "step";
            let scn = Scenario::step_response(&cfg.scenario, *long_scenario);
            run_scenario(&cfg, &scn, "step.csv", &mut out, &mut manifest)?;
        }
        Command::TuneSweep { weights, long_scenario } => {
            manifest.command = "tune-sweep";
            let scn = Scenario::step_response(&cfg.scenario, *long_scenario);
            manifest.scenario_sha256 = Some(scenario_hash(&scn));
            let rows = weight_sweep(&cfg, &scn, weights, exec)?;
            out.primary("sweep.csv", &sweep_csv(&rows))?;
            out.summary(&sweep_table(&rows));
        }
        Command::Linearize => {
            manifest.command = "linearize";
            linearize_report(&cfg, &mut out)?;
        }
        Command::Bode { f_min, f_max, points } => {
            manifest.command = "bode";
            bode(&cfg, *f_min, *f_max, *points, exec, &mut out)?;
        }
    }
    out.finish(&manifest)
}

fn load(common: &Common) -> Result<(SystemConfig, String), CliError> {
    let (mut cfg, source) = match &common.config {
        Some(path) => (load_config(path)?, path.display().to_string()),
        None => (SystemConfig::reference(), "built-in".to_string()),
    };
    if let Some(ts) = common.ts {
        cfg.mpc.ts = ts;
    }
    if let Some(p) = common.horizon {
        cfg.mpc.p = p;
    }
    if let Some(m) = common.control_horizon {
        cfg.mpc.m = m;
    }
    if let Some(w) = common.weight {
        cfg.mpc.w = w;
    }
    cfg.validate()?;
    Ok((cfg, source))
}

fn read_scenario(path: &std::path::Path) -> Result<Scenario, CliError> {
    let fail = |reason: String| CliError::Scenario {
        path: path.display().to_string(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    Scenario::from_toml_str(&text).map_err(|e| fail(e.to_string()))
}

fn scenario_hash(scn: &Scenario) -> String {
    sha256_hex(serde_json::to_string(scn).expect("scenario serializes").as_bytes())
}

fn run_scenario(
    cfg: &SystemConfig,
    scn: &Scenario,
    name: &str,
    out: &mut Outputs,
    manifest: &mut Manifest,
) -> Result<(), CliError> {
    manifest.scenario_sha256 = Some(scenario_hash(scn));
    let ts = simulate_p2p(cfg, scn)?;
    out.primary(name, &ts.to_csv_string())?;
    let metrics = current_step_metrics(scn, &ts)?;
    out.secondary("metrics.csv", &metrics_csv(&metrics))?;
    out.summary(&metrics_text(&metrics));
    Ok(())
}

/// Metrics of `vsc1.i_ld` after every `i_ld_ref` event, each measured up to
/// the next event of any kind.
fn current_step_metrics(scn: &Scenario, ts: &TimeSeries) -> Result<Vec<(f64, f64, StepMetrics)>, CliError> {
    let mut rows = Vec::new();
    for (i, e) in scn.events.iter().enumerate() {
        if e.target != Target::ILdRef {
            continue;
        }
        let end = scn.events.get(i + 1).map_or(scn.duration, |n| n.time);
        let m = step_metrics_window(ts, "vsc1.i_ld", e.time, end, Some(e.value))?;
        rows.push((e.time, e.value, m));
    }
    Ok(rows)
}

fn metrics_csv(rows: &[(f64, f64, StepMetrics)]) -> String {
    let mut s = String::from("event_time_s,target,rise_time_s,settling_time_s,overshoot,steady_state_error,final_value,settled\n");
    for (t, v, m) in rows {
        let _ = writeln!(
            s,
            "{t},{v},{},{},{},{},{},{}",
            m.rise_time, m.settling_time, m.overshoot, m.steady_state_error, m.final_value, m.settled
        );
    }
    s
}

fn metrics_text(rows: &[(f64, f64, StepMetrics)]) -> String {
    let mut s = String::new();
    for (t, v, m) in rows {
        let _ = writeln!(
            s,
            "i_ld step to {v} at {t} s: rise {:.3} ms, settling {:.3} ms, overshoot {:.2} %, final {:.5}{}",
            m.rise_time * 1e3,
            m.settling_time * 1e3,
            m.overshoot * 100.0,
            m.final_value,
            if m.settled { "" } else { " (not settled)" }
        );
    }
    s
}

fn mpc_station(cfg: &SystemConfig) -> Result<(LinearModel, LinearModel, StationModel), CliError> {
    let m = StationModel::new(cfg.vsc1, cfg.pll, cfg.damping(), cfg.base.omega_b(), cfg.simulation.dt_max);
    let targets = OperatingTargets {
        i_ld: cfg.scenario.i_ld_initial,
        i_lq: 0.0,
        v_dc: 1.0,
    };
    let op = solve_operating_point(&m, &targets)?;
    let reduced = linearize(&m, &op)?;
    let full = linearize_full(&m, &op)?;
    Ok((reduced, full, m))
}

fn matrix_text<'a>(s: &mut String, name: &str, rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64 + 'a) {
    let _ = writeln!(s, "{name} ({rows}x{cols}) =");
    for i in 0..rows {
        for j in 0..cols {
            let _ = write!(s, "{:>15.6e}", at(i, j));
        }
        s.push('\n');
    }
    s.push('\n');
}

fn matrix_csv(rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64) -> String {
    let mut s = String::new();
    for i in 0..rows {
        let line: Vec<String> = (0..cols).map(|j| at(i, j).to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

fn complex_text(z: &C64) -> String {
    if z.im.abs() < 1e-9 {
        format!("{:.6}", z.re)
    } else {
        format!("{:.6} {} {:.6}i", z.re, if z.im < 0.0 { '-' } else { '+' }, z.im.abs())
    }
}

fn linearize_report(cfg: &SystemConfig, out: &mut Outputs) -> Result<(), CliError> {
    let (lm, full, m) = mpc_station(cfg)?;
    let op = &lm.op;
    let ev = eigenvalues(&lm)?;
    let ev_full = eigenvalues(&full)?;
    let g0 = transfer_function(&lm, C64::new(0.0, 0.0))?;
    let check = compare_jacobians(&m, op)?;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "operating point: i_ld = {}, i_lq = {}, v_dc = {}, v_cvd = {:.9}, v_cvq = {:.9}",
        op.x0.i_ld, op.x0.i_lq, op.x0.v_dc, op.u0.v_cvd, op.u0.v_cvq
    );
    let _ = writeln!(s, "states: {}", lm.state_names.join(" "));
    let _ = writeln!(s, "inputs: {}", lm.input_names.join(" "));
    let _ = writeln!(s, "outputs: i_ld i_lq\n");
    matrix_text(&mut s, "A", lm.n(), lm.n(), |i, j| lm.a[(i, j)]);
    matrix_text(&mut s, "B", lm.n(), lm.m(), |i, j| lm.b[(i, j)]);
    matrix_text(&mut s, "C", lm.p(), lm.n(), |i, j| lm.c[(i, j)]);
    matrix_text(&mut s, "D", lm.p(), lm.m(), |i, j| lm.d[(i, j)]);
    matrix_text(&mut s, "G(0)", lm.p(), lm.m(), |i, j| g0[(i, j)].re);
    let _ = writeln!(s, "eigenvalues (reduced, rad/s):");
    for z in &ev {
        let _ = writeln!(s, "  {}", complex_text(z));
    }
    let _ = writeln!(s, "eigenvalues (full, rad/s):");
    for z in &ev_full {
        let _ = writeln!(s, "  {}", complex_text(z));
    }
    let _ = writeln!(
        s,
        "\nclosed-form check: {} entries, {} mismatched, {} disputed",
        check.entries.len(),
        check.mismatches().len(),
        check.disputed().len()
    );
    s.push_str(&check.render_discrepancies());
    for e in check.mismatches() {
        let _ = writeln!(
            s,
            "mismatch {}[{}][{}]: numeric {:.9e}, closed form {:.9e}",
            e.matrix, e.row, e.col, e.numeric, e.analytic
        );
    }
    out.primary("linearize.txt", &s)?;

    out.secondary("A.csv", &matrix_csv(lm.n(), lm.n(), |i, j| lm.a[(i, j)]))?;
    out.secondary("B.csv", &matrix_csv(lm.n(), lm.m(), |i, j| lm.b[(i, j)]))?;
    out.secondary("C.csv", &matrix_csv(lm.p(), lm.n(), |i, j| lm.c[(i, j)]))?;
    out.secondary("D.csv", &matrix_csv(lm.p(), lm.m(), |i, j| lm.d[(i, j)]))?;
    out.secondary("dc_gain.csv", &matrix_csv(lm.p(), lm.m(), |i, j| g0[(i, j)].re))?;
    let mut eig = String::from("model,re,im\n");
    for (model, list) in [("reduced", &ev), ("full", &ev_full)] {
        for z in list {
            let _ = writeln!(eig, "{model},{},{}", z.re, z.im);
        }
    }
    out.secondary("eigenvalues.csv", &eig)?;
    let mut jc = String::from("matrix,row,col,numeric,closed_form,tolerance,disputed,agrees\n");
    for e in &check.entries {
        let _ = writeln!(
            jc,
            "{},{},{},{},{},{},{},{}",
            e.matrix,
            e.row,
            e.col,
            e.numeric,
            e.analytic,
            e.tolerance,
            e.disputed,
            e.agrees()
        );
    }
    out.secondary("jacobian_check.csv", &jc)
}

fn bode(cfg: &SystemConfig, f_min: f64, f_max: f64, points: usize, exec: Execution, out: &mut Outputs) -> Result<(), CliError> {
    if !(f_min > 0.0 && f_max > f_min && f_max.is_finite() && points >= 2) {
        return Err(CliError::Usage(format!(
            "bode needs 0 < f_min < f_max and at least 2 points, got {f_min}, {f_max}, {points}"
        )));
    }
    let (lm, _, _) = mpc_station(cfg)?;
    let ratio = (f_max / f_min).ln();
    let mut freqs: Vec<f64> = (0..points)
        .map(|k| f_min * (ratio * k as f64 / (points - 1) as f64).exp())
        .collect();
    freqs[points - 1] = f_max;
    let responses = map_batch(exec, &freqs, |&f| transfer_function(&lm, C64::new(0.0, 2.0 * PI * f)))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let outputs = ["i_ld", "i_lq"];
    let mut s = String::from("freq_hz");
    for o in outputs.iter().take(lm.p()) {
        for i in lm.input_names.iter() {
            let _ = write!(s, ",{o}/{i}_mag,{o}/{i}_phase_deg");
        }
    }
    s.push('\n');
    for (f, g) in freqs.iter().zip(&responses) {
        let _ = write!(s, "{f}");
        for r in 0..lm.p() {
            for c in 0..lm.m() {
                let z = g[(r, c)];
                let _ = write!(s, ",{},{}", z.norm(), z.arg().to_degrees());
            }
        }
        s.push('\n');
    }
    out.primary("bode.csv", &s)?;

    let peak = responses
        .iter()
        .zip(&freqs)
        .map(|(g, &f)| (g.iter().fold(0.0f64, |m, z| m.max(z.norm())), f))
        .fold((0.0, f_min), |a, b| if b.0 > a.0 { b } else { a });
    let last = responses.last().map_or(0.0, |g| g.iter().fold(0.0f64, |m, z| m.max(z.norm())));
    out.summary(&format!(
        "largest gain {:.4e} at {:.4e} Hz; largest gain at {:.4e} Hz is {:.4e}\n",
        peak.0, peak.1, f_max, last
    ));
    Ok(())
}
