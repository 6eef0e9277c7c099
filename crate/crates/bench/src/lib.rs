//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use wienerlab::shifts::{Drift, FeedbackDrift};
use wienerlab::wiener::{sample_brownian, DiscretePath, RngStream, TimeGrid};

pub const SEED: u64 = 7;

pub fn grid(n_steps: usize) -> TimeGrid {
    TimeGrid::uniform(n_steps).expect("positive step count")
}

pub fn paths(grid: &TimeGrid, n: usize) -> Vec<DiscretePath> {
    sample_brownian(grid, 1, n, RngStream::new(SEED, 0)).expect("valid sampling request")
}

pub fn ou() -> Drift {
    Arc::new(FeedbackDrift::ornstein_uhlenbeck(1.0, 1))
}
