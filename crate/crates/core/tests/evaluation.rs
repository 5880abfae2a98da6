use std::collections::HashSet;

use jamfield::evaluation::{
    parse_results, results_to_csv, rmpv, run_mc, LambdaMode, McConfig, RUN_RESULT_COLUMNS,
};
use jamfield::grid::{make_grid, FieldRaster, GridIndex};
use jamfield::inference::FitConfig;
use jamfield::scene::SceneConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quick(sizes: Vec<usize>, runs: usize, lambda: LambdaMode) -> McConfig {
    McConfig {
        train_sizes: sizes,
        n_runs: runs,
        master_seed: 17,
        lambda,
        fit: FitConfig {
            max_iters: 150,
            ..FitConfig::default()
        },
        ..McConfig::default()
    }
}

#[test]
fn rmpv_matches_direct_formula_on_random_rasters() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let (h, w) = (rng.random_range(2..9), rng.random_range(2..9));
        let spec = make_grid(h, w, 1.0).unwrap();
        let values: Vec<f64> = (0..spec.len())
            .map(|_| rng.random_range(0.0..10.0))
            .collect();
        let mask: Vec<bool> = (0..spec.len())
            .map(|k| k == 0 || rng.random::<f64>() < 0.7)
            .collect();
        let raster = FieldRaster::new(spec, values.clone(), mask.clone(), "dBW^2").unwrap();
        let pts: Vec<GridIndex> = spec.indices().filter(|&p| mask[spec.offset(p)]).collect();
        let mut total = 0.0;
        for p in &pts {
            total += values[p.row * w + p.col];
        }
        let direct = (total / pts.len() as f64).sqrt();
        assert!((rmpv(&raster, &pts).unwrap() - direct).abs() < 1e-12);
    }
}

#[test]
fn single_cell_table_and_determinism() {
    let scene = SceneConfig::default();
    let cfg = quick(vec![20], 1, LambdaMode::default());
    let a = run_mc(&scene, &cfg).unwrap();
    assert_eq!(a.rows.len() + a.failures.len(), 1);
    assert_eq!(a.rows.len(), 1);
    let b = run_mc(&scene, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(results_to_csv(&a.rows), results_to_csv(&b.rows));
    let csv = results_to_csv(&a.rows);
    assert_eq!(
        csv.lines().next().unwrap().split(',').collect::<Vec<_>>(),
        RUN_RESULT_COLUMNS
    );
    assert_eq!(parse_results(&csv, "t").unwrap(), a.rows);
}

#[test]
fn localization_error_falls_with_training_size() {
    let scene = SceneConfig::default();
    let cfg = quick(vec![20, 200], 20, LambdaMode::Fixed(0.0));
    let table = run_mc(&scene, &cfg).unwrap();
    assert_eq!(table.rows.len() + table.failures.len(), 40);
    let small = table.median_at(20, |r| r.loc_error_m).unwrap();
    let large = table.median_at(200, |r| r.loc_error_m).unwrap();
    assert!(
        large < small,
        "median error {large} at 200 vs {small} at 20"
    );
    let floor = (1.0 / cfg.pooling.precision()).sqrt();
    for r in &table.rows {
        assert!(r.test_rmpv_dbw >= floor);
        assert_eq!(r.lambda_selected, 0.0);
        assert_eq!(r.wall_time_s, 0.0);
    }
    let seeds: HashSet<u64> = table.rows.iter().map(|r| r.seed).collect();
    assert_eq!(seeds.len(), table.rows.len());
}

#[test]
fn infeasible_sizes_are_rejected() {
    let cfg = quick(vec![5000], 1, LambdaMode::Fixed(0.0));
    assert!(run_mc(&SceneConfig::default(), &cfg).is_err());
    let cfg = quick(vec![], 1, LambdaMode::Fixed(0.0));
    assert!(run_mc(&SceneConfig::default(), &cfg).is_err());
}
