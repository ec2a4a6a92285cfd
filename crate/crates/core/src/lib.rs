//! VSC-HVDC station modelling and control.
//!
//! - [`params`]: per-unit parameters and the TOML configuration.
//! - [`plant`]: nonlinear dq-frame average model of one station.
//! - [`linear`]: operating points, Jacobians, transfer functions, ZOH.
//! - [`qp`]: dense convex QP solver.
//! - [`mpc`]: receding-horizon current controller.
//! - [`classic`]: decoupled PI benchmark controller.
//! - [`harness`]: point-to-point co-simulation, scenarios and metrics.
//!
//! Independent batches (weight sweeps, frequency grids, QP batches) run on
//! rayon when the `parallel` feature is on.

// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod classic;
pub mod harness;
pub mod linear;
pub mod mpc;
pub mod params;
pub mod plant;
pub mod qp;

/// How a batch of independent jobs is executed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    /// Rayon thread pool; sequential when built without `parallel`.
    #[default]
    Parallel,
    Sequential,
}

/// Maps `f` over `items`, preserving order.
pub fn map_batch<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}
