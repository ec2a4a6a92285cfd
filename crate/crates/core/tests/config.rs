use std::path::PathBuf;

use hvdc_core::params::{load_config, ConfigError, DampingParams, SystemConfig};
use proptest::prelude::*;

fn config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

#[test]
fn shipped_config_matches_reference() {
    let cfg = load_config(config_path()).unwrap();
    assert_eq!(cfg, SystemConfig::reference());
    let s = cfg.vsc1;
    assert_eq!(
        (s.l_c, s.r_c, s.c_f, s.l_g, s.r_g, s.l_t, s.r_t, s.c_dc),
        (0.15, 0.0015, 0.094, 0.0739, 0.0521, 0.15, 0.027, 4.2224)
    );
}

#[test]
fn toml_round_trip() {
    let cfg = SystemConfig::reference();
    let back = SystemConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn missing_file_reports_path() {
    match load_config("/nonexistent/system.toml") {
        Err(ConfigError::Io { path, .. }) => assert!(path.contains("nonexistent")),
        other => panic!("expected an io error, got {other:?}"),
    }
}

#[test]
fn unknown_field_is_rejected() {
    let text = SystemConfig::reference().to_toml_string().replace("[vsc1]\n", "[vsc1]\nl_x = 1.0\n");
    assert!(SystemConfig::from_toml_str(&text).is_err());
}

#[test]
fn omitted_damping_falls_back_to_defaults() {
    let text = std::fs::read_to_string(config_path()).unwrap();
    let start = text.find("[damping]").unwrap();
    let end = start + text[start..].find("\n\n").unwrap();
    let trimmed = format!("{}{}", &text[..start], &text[end..]);
    let cfg = SystemConfig::from_toml_str(&trimmed).unwrap();
    assert_eq!(cfg.damping, None);
    assert_eq!(cfg.damping(), DampingParams::default_for(&cfg.base));
}

/// Fields that must be strictly positive, with a setter.
type Setter = (&'static str, fn(&mut SystemConfig, f64));

fn positive_fields() -> Vec<Setter> {
    vec![
        ("vsc1.l_c", |c, v| c.vsc1.l_c = v),
        ("vsc1.c_f", |c, v| c.vsc1.c_f = v),
        ("vsc1.l_g", |c, v| c.vsc1.l_g = v),
        ("vsc2.c_dc", |c, v| c.vsc2.c_dc = v),
        ("vsc2.v_g_mag", |c, v| c.vsc2.v_g_mag = v),
        ("dc_line.length", |c, v| c.dc_line.length = v),
        ("dc_line.l_per_km", |c, v| c.dc_line.l_per_km = v),
        ("pll.omega_lp_pll", |c, v| c.pll.omega_lp_pll = v),
        ("mpc.ts", |c, v| c.mpc.ts = v),
        ("mpc.rho_eps", |c, v| c.mpc.rho_eps = v),
        ("simulation.dt", |c, v| c.simulation.dt = v),
        ("pi.ts_pi", |c, v| c.pi.ts_pi = v),
    ]
}

/// Fields that must be non-negative.
fn non_negative_fields() -> Vec<Setter> {
    vec![
        ("vsc1.r_c", |c, v| c.vsc1.r_c = v),
        ("vsc2.r_g", |c, v| c.vsc2.r_g = v),
        ("vsc1.r_t", |c, v| c.vsc1.r_t = v),
        ("dc_line.r_per_km", |c, v| c.dc_line.r_per_km = v),
        ("pll.k_p_pll", |c, v| c.pll.k_p_pll = v),
        ("pll.k_i_pll", |c, v| c.pll.k_i_pll = v),
        ("mpc.move_weight", |c, v| c.mpc.move_weight = v),
    ]
}

fn rejected_field(cfg: &SystemConfig) -> Option<String> {
    match cfg.validate() {
        Err(ConfigError::Invalid { field, .. }) => Some(field),
        _ => None,
    }
}

proptest! {
    #[test]
    fn non_positive_values_are_rejected(i in 0usize..12, v in -1e3f64..=0.0) {
        let (name, set) = positive_fields()[i];
        let mut cfg = SystemConfig::reference();
        set(&mut cfg, v);
        prop_assert_eq!(rejected_field(&cfg), Some(name.to_string()));
    }

    #[test]
    fn negative_values_are_rejected(i in 0usize..7, v in -1e3f64..-1e-12) {
        let (name, set) = non_negative_fields()[i];
        let mut cfg = SystemConfig::reference();
        set(&mut cfg, v);
        prop_assert_eq!(rejected_field(&cfg), Some(name.to_string()));
    }

    #[test]
    fn non_finite_values_are_rejected(i in 0usize..12, nan in any::<bool>()) {
        let (_, set) = positive_fields()[i];
        let mut cfg = SystemConfig::reference();
        set(&mut cfg, if nan { f64::NAN } else { f64::INFINITY });
        prop_assert!(cfg.validate().is_err());
    }

    #[test]
    fn weights_outside_unit_interval_are_rejected(w in prop_oneof![-10.0f64..-1e-9, 1.0 + 1e-9..10.0]) {
        let mut cfg = SystemConfig::reference();
        cfg.mpc.w = w;
        prop_assert_eq!(rejected_field(&cfg), Some("mpc.w".to_string()));
    }

    #[test]
    fn grid_frequency_outside_band_is_rejected(w in prop_oneof![0.0f64..0.9 - 1e-9, 1.1 + 1e-9..3.0]) {
        let mut cfg = SystemConfig::reference();
        cfg.vsc2.omega_g = w;
        prop_assert_eq!(rejected_field(&cfg), Some("vsc2.omega_g".to_string()));
    }

    #[test]
    fn inverted_bounds_are_rejected(lo in 0.0f64..2.0, gap in 0.0f64..1.0) {
        let mut cfg = SystemConfig::reference();
        cfg.mpc.bounds.v_q_min = lo + gap;
        cfg.mpc.bounds.v_q_max = lo;
        prop_assert_eq!(rejected_field(&cfg), Some("mpc.bounds.v_q".to_string()));
    }
}

#[test]
fn control_horizon_longer_than_prediction_is_rejected() {
    let mut cfg = SystemConfig::reference();
    cfg.mpc.m = cfg.mpc.p + 1;
    assert_eq!(rejected_field(&cfg).as_deref(), Some("mpc.m"));
}
