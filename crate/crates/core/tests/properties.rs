use std::io::{Seek, SeekFrom};
use std::sync::Arc;

use proptest::prelude::*;
use wienerlab::inverse::solve_inverse_sde;
use wienerlab::shifts::{girsanov_exponent, AffineTimeDrift, FeedbackDrift, ShiftMap};
use wienerlab::sinkhorn::{sinkhorn_divergence, SinkhornConfig};
use wienerlab::stats::{par_fold, MeanAcc};
use wienerlab::wiener::{brownian_path, read_paths_binary, sample_brownian, write_paths_binary, RngStream, TimeGrid};

fn config() -> ProptestConfig {
    ProptestConfig { cases: 24, ..ProptestConfig::default() }
}

#[test]
fn binary_paths_round_trip_through_a_file() {
    let grid = TimeGrid::geometric(3, 4).unwrap();
    let paths = sample_brownian(&grid, 2, 7, RngStream::new(1, 2)).unwrap();
    let mut file = tempfile::tempfile().unwrap();
    write_paths_binary(&paths, &grid, 2, &mut file).unwrap();
    file.seek(SeekFrom::Start(0)).unwrap();
    assert_eq!(read_paths_binary(&file).unwrap(), paths);
}

#[test]
fn truncated_binary_file_is_an_error() {
    let grid = TimeGrid::uniform(8).unwrap();
    let paths = sample_brownian(&grid, 1, 3, RngStream::new(1, 3)).unwrap();
    let mut bytes = Vec::new();
    write_paths_binary(&paths, &grid, 1, &mut bytes).unwrap();
    bytes.truncate(bytes.len() - 5);
    assert!(read_paths_binary(bytes.as_slice()).is_err());
}

#[test]
fn path_statistics_do_not_depend_on_the_thread_count() {
    let grid = TimeGrid::uniform(32).unwrap();
    let stream = RngStream::new(42, 0);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            par_fold(5000, MeanAcc::default, |acc: &mut MeanAcc, i| {
                acc.push(brownian_path(&grid, 1, stream.offset(i as u64)).endpoint()[0].powi(2))
            })
        })
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.mean().to_bits(), four.mean().to_bits());
    assert_eq!(one.variance().to_bits(), four.variance().to_bits());
    assert!((one.mean() - 1.0).abs() < 4.0 * (2.0f64 / 5000.0).sqrt());
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn constant_drift_exponent_matches_closed_form(c in -2.0f64..2.0, seed in 0u64..1000) {
        // ρ(−δu) for u̇ = c is exp(−c W₁ − c²/2) on every path.
        let grid = TimeGrid::uniform(16).unwrap();
        let w = brownian_path(&grid, 1, RngStream::new(seed, 0));
        let got = girsanov_exponent(&AffineTimeDrift::constant(vec![c]), &w).unwrap();
        let want = -c * w.endpoint()[0] - 0.5 * c * c;
        prop_assert!((got - want).abs() < 1e-12 * (1.0 + want.abs()));
    }

    #[test]
    fn solved_inverse_undoes_the_shift(c in 0.1f64..3.0, seed in 0u64..1000) {
        let grid = TimeGrid::uniform(32).unwrap();
        let v = Arc::new(FeedbackDrift::tanh(c, 1));
        let driving = sample_brownian(&grid, 1, 4, RngStream::new(seed, 1)).unwrap();
        let solved = solve_inverse_sde(v.as_ref(), &driving).unwrap();
        let shift = ShiftMap::new(v);
        for (b, w) in solved.iter().zip(&driving) {
            prop_assert!(shift.apply(b).unwrap().max_abs_diff(w) < 1e-12);
        }
    }

    #[test]
    fn shift_is_additive_for_time_only_drifts(a in -1.0f64..1.0, b in -1.0f64..1.0, seed in 0u64..1000) {
        let grid = TimeGrid::uniform(16).unwrap();
        let w = brownian_path(&grid, 1, RngStream::new(seed, 2));
        let sa = ShiftMap::new(Arc::new(AffineTimeDrift::constant(vec![a])));
        let sb = ShiftMap::new(Arc::new(AffineTimeDrift::constant(vec![b])));
        let sab = ShiftMap::new(Arc::new(AffineTimeDrift::constant(vec![a + b])));
        let twice = sb.apply(&sa.apply(&w).unwrap()).unwrap();
        prop_assert!(twice.max_abs_diff(&sab.apply(&w).unwrap()) < 1e-12);
    }

    #[test]
    fn translated_cloud_divergence_is_the_squared_shift(shift in -1.5f64..1.5, seed in 0u64..1000) {
        // The debiased divergence between a cloud and its translate is
        // exactly |shift|² for squared-Euclidean cost.
        let grid = TimeGrid::uniform(1).unwrap();
        let x: Vec<f64> = (0..60).map(|i| brownian_path(&grid, 1, RngStream::new(seed, 3).offset(i)).endpoint()[0]).collect();
        let y: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let d = sinkhorn_divergence(&x, &y, 1, &SinkhornConfig::default()).unwrap();
        prop_assert!((d.value - shift * shift).abs() < 1e-6, "{} vs {}", d.value, shift * shift);
        let back = sinkhorn_divergence(&y, &x, 1, &SinkhornConfig::default()).unwrap();
        prop_assert!((back.value - d.value).abs() < 1e-6);
    }

    #[test]
    fn grid_steps_sum_to_the_horizon(levels in 1usize..6, per in 1usize..6) {
        let g = TimeGrid::geometric(levels, per).unwrap();
        let total: f64 = (0..g.n_steps()).map(|k| g.dt(k)).sum();
        prop_assert!((total - 1.0).abs() < 1e-14);
        prop_assert!(g.times().windows(2).all(|w| w[0] < w[1]));
    }
}
