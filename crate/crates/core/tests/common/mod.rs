#![allow(dead_code)]

use latentprod::simulate::SimConfig;

/// Small panel from the default three-group design.
pub fn small(n: usize, t: usize, seed: u64) -> SimConfig {
    SimConfig {
        n,
        t,
        seed,
        burn_in: 200,
        ..SimConfig::default()
    }
}

/// Shock-free design whose productivity starts away from its stationary
/// mean, so every firm follows a deterministic transient path and the
/// moments identify the parameters exactly.
pub fn noiseless(n: usize, t: usize, seed: u64) -> SimConfig {
    let mut cfg = SimConfig {
        n,
        t,
        seed,
        burn_in: 1,
        initial_omega_offset: 0.3,
        ..SimConfig::default()
    };
    for g in &mut cfg.groups {
        g.sigma_eps = 0.0;
        g.sigma_eta = 0.0;
    }
    cfg
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One-group design built from the first default group.
pub fn homogeneous(n: usize, t: usize, seed: u64) -> SimConfig {
    let mut cfg = small(n, t, seed);
    cfg.groups.truncate(1);
    cfg.groups[0].share = 1.0;
    cfg
}
