//! Stage-1 partition search on a stream with one known concept shift.

use driftforge::data::Dataset;
use driftforge::divide::{search_partitions, ImprovedConfig};
use driftforge::ensemble::FitnessConfig;
use driftforge::ga::GaConfig;
use driftforge::rng::seeded;
use rand_distr::{Distribution, Normal};

/// Linear concept whose coefficients flip sign from `shift_at` on.
fn stream(seed: u64, steps: u32, shift_at: u32) -> Dataset {
    let mut rng = seeded(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut d = Dataset::new(3);
    for s in 0..=steps {
        let n = if s == 0 { 300 } else { 80 };
        let sign = if s >= shift_at { -1.0 } else { 1.0 };
        for _ in 0..n {
            let row: Vec<f64> = (0..3).map(|_| unit.sample(&mut rng)).collect();
            let y = sign * (2.0 * row[0] - row[1]) + 0.5 * row[2] + 0.2 * unit.sample(&mut rng);
            d.push(&row, y, s);
        }
    }
    d
}

#[test]
fn best_partition_has_a_boundary_near_the_shift() {
    let (shift, clock, tau) = (12u32, 20u32, 5u32);
    let seeds = 20u64;
    let hits = (0..seeds)
        .filter(|&seed| {
            let future = stream(seed, clock + tau, shift);
            let now = future.snapshot(clock);
            let cfg = ImprovedConfig {
                ga: GaConfig {
                    pop_size: 8,
                    generations: 4,
                    n_max: 4,
                    seed,
                    ..Default::default()
                },
                fitness: FitnessConfig {
                    tau,
                    ..Default::default()
                },
                ..Default::default()
            };
            let run = search_partitions(&cfg, &now, &future).unwrap();
            run.best
                .windows
                .iter()
                .flat_map(|w| w.iter())
                .any(|&b| b.abs_diff(shift) <= 3)
        })
        .count();
    assert!(hits * 10 >= 7 * seeds as usize, "{hits} of {seeds} runs placed a boundary near the shift");
}

#[test]
fn two_window_cap_gives_two_windows() {
    let future = stream(1, 14, 6);
    let now = future.snapshot(10);
    let cfg = ImprovedConfig {
        ga: GaConfig {
            pop_size: 4,
            generations: 2,
            n_max: 2,
            seed: 1,
            ..Default::default()
        },
        fitness: FitnessConfig {
            tau: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    let run = search_partitions(&cfg, &now, &future).unwrap();
    assert_eq!(run.best.windows.len(), 2);
}
