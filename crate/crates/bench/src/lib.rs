//! Shared workloads for the benchmarks.

use spinpair::ensemble::RunConfig;
use spinpair::{DynamicsOptions, Mechanism, TimeGrid};

pub fn coherent(grid: TimeGrid) -> RunConfig {
    RunConfig {
        grid,
        concurrence: false,
        ..RunConfig::default()
    }
}

pub fn relaxing(grid: TimeGrid) -> RunConfig {
    RunConfig {
        dynamics: DynamicsOptions::with_relaxation(&[Mechanism::Dipolar]),
        ..coherent(grid)
    }
}

pub fn linear(end: f64, steps: usize) -> TimeGrid {
    TimeGrid::linear(end, steps).expect("valid grid")
}
