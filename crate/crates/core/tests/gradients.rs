mod common;

use common::{close, random_psi, small_scene, steps_for, tiny_arch};
use jamfield::experts::cnn::{batch_stats, cnn_forward, CnnMode};
use jamfield::experts::{pl_mean, DropoutMasks};
use jamfield::gradient::{grad_scalar, mean_jacobian_row, Objective};
use jamfield::grid::GridIndex;
use jamfield::model::ModelContext;
use jamfield::oracle::central_differences;
use jamfield::pooling::{NegLogPosterior, PoolingConfig, PriorConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;

#[test]
fn objective_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0;
    for point in 0..100 {
        let scene = small_scene(point / 10);
        let ds = scene.sample(12, point).unwrap();
        let ctx = ModelContext::new(&scene.heights, tiny_arch()).unwrap();
        let psi = random_psi(&ctx, &mut rng);
        let pooling = PoolingConfig::new(rng.random_range(0.0..=1.0), 0.25, 0.4).unwrap();
        let prior = PriorConfig::default().for_data(ds.measurements());
        let obj = NegLogPosterior::new(&ctx, ds.measurements(), pooling, prior);
        let grad = grad_scalar(&obj, &psi).unwrap();
        let fd = central_differences(|x| obj.value(x), &psi, &steps_for(&psi, FD_STEP)).unwrap();
        for (k, (g, f)) in grad.iter().zip(&fd).enumerate() {
            assert!(
                close(*g, *f, REL_TOL, ABS_FLOOR),
                "point {point}, {}: analytic {g} vs fd {f}",
                psi.layout().name_of(k)
            );
            checked += 1;
        }
    }
    assert!(checked > 100 * 100);
}

#[test]
fn gradient_under_a_fixed_dropout_mask_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scene = small_scene(3);
    let ds = scene.sample(15, 1).unwrap();
    let ctx = ModelContext::new(&scene.heights, tiny_arch()).unwrap();
    for _ in 0..10 {
        let psi = random_psi(&ctx, &mut rng);
        let masks = DropoutMasks::sample(ctx.arch(), ctx.spec(), &mut rng);
        let obj = NegLogPosterior::new(
            &ctx,
            ds.measurements(),
            PoolingConfig::default(),
            PriorConfig::default().for_data(ds.measurements()),
        );
        let (_, grad) = obj.value_grad_with(&psi, Some(&masks)).unwrap();
        let fd = central_differences(
            |x| Ok(obj.value_grad_with(x, Some(&masks))?.0),
            &psi,
            &steps_for(&psi, FD_STEP),
        )
        .unwrap();
        for (k, (g, f)) in grad.iter().zip(&fd).enumerate() {
            assert!(
                close(*g, *f, REL_TOL, ABS_FLOOR),
                "{}: {g} vs {f}",
                psi.layout().name_of(k)
            );
        }
    }
}

#[test]
fn jacobian_rows_match_central_differences_of_the_frozen_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for point in 0..100u64 {
        let scene = small_scene(point % 7);
        let ctx = ModelContext::new(&scene.heights, tiny_arch()).unwrap();
        let psi = random_psi(&ctx, &mut rng);
        let pooling = PoolingConfig::new(rng.random_range(0.05..=1.0), 0.3, 0.2).unwrap();
        let cells = scene.heights.outdoor_cells();
        let p = cells[rng.random_range(0..cells.len())];
        let stats = batch_stats(ctx.arch(), ctx.input(), psi.omega()).unwrap();
        let (w_cnn, w_pl) = pooling.weights();
        let spec = *ctx.spec();
        // straight-line pooled mean with the statistics of `psi` held fixed
        let mean = |x: &jamfield::params::ParamVector| -> jamfield::Result<f64> {
            let cnn = cnn_forward(ctx.arch(), ctx.input(), x.omega(), CnnMode::Eval(&stats))?;
            Ok(w_cnn * cnn.values()[spec.offset(p)] + w_pl * pl_mean(p, &x.path_loss(), &spec))
        };
        let row = mean_jacobian_row(p, &psi, &pooling, &ctx).unwrap();
        let fd = central_differences(mean, &psi, &steps_for(&psi, FD_STEP)).unwrap();
        for (k, (g, f)) in row.iter().zip(&fd).enumerate() {
            assert!(
                close(*g, *f, REL_TOL, ABS_FLOOR),
                "point {point} cell {p:?}, {}: {g} vs {f}",
                psi.layout().name_of(k)
            );
        }
    }
}

#[test]
fn objective_matches_a_straight_line_reimplementation() {
    let scene = small_scene(1);
    let ctx = ModelContext::new(&scene.heights, tiny_arch()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let psi = random_psi(&ctx, &mut rng);
    let ds = scene.sample(3, 9).unwrap();
    let pooling = PoolingConfig::new(0.3, 0.5, 0.2).unwrap();
    let priors = PriorConfig::default();
    let prior = priors.for_data(ds.measurements());
    let value = NegLogPosterior::new(&ctx, ds.measurements(), pooling, prior)
        .value(&psi)
        .unwrap();

    let cnn = cnn_forward(
        ctx.arch(),
        ctx.input(),
        psi.omega(),
        CnnMode::Train { dropout: None },
    )
    .unwrap();
    let beta = 0.3 * 0.5 + 0.7 * 0.2;
    let mut sse = 0.0;
    for m in ds.measurements() {
        let (r, c) = (m.position.row as f64, m.position.col as f64);
        let d = 10.0 * ((psi.theta().row - r).powi(2) + (psi.theta().col - c).powi(2)).sqrt();
        let pl = psi.p0() - 10.0 * psi.gamma() * (d + 1.0).log10();
        let mu = (0.3 * 0.5 * cnn.get(m.position).unwrap() + 0.7 * 0.2 * pl) / beta;
        sse += (m.rss - mu).powi(2);
    }
    let omega_sq: f64 = psi.omega().iter().map(|w| w * w).sum();
    let mc = prior.theta_mean;
    let penalty = 0.5 * omega_sq
        + 0.5 * ((psi.theta().row - mc.row).powi(2) + (psi.theta().col - mc.col).powi(2)) / 100.0
        + 0.5 * ((psi.p0() - 12.5) / 7.5).powi(2)
        + 0.5 * ((psi.gamma() - 6.0) / 4.0).powi(2);
    let expected = 0.5 * beta * sse + penalty;
    assert!(
        (value - expected).abs() <= 1e-10 * expected.abs(),
        "{value} vs {expected}"
    );
}

#[test]
fn non_finite_parameters_are_named() {
    let scene = small_scene(0);
    let ctx = ModelContext::new(&scene.heights, tiny_arch()).unwrap();
    let ds = scene.sample(4, 0).unwrap();
    let mut psi = random_psi(&ctx, &mut ChaCha8Rng::seed_from_u64(0));
    let n = psi.layout().omega_len();
    psi.as_mut_slice()[n + 3] = f64::INFINITY;
    let obj = NegLogPosterior::new(
        &ctx,
        ds.measurements(),
        PoolingConfig::default(),
        PriorConfig::default().for_data(ds.measurements()),
    );
    let err = grad_scalar(&obj, &psi).unwrap_err().to_string();
    assert!(err.contains("gamma"), "{err}");
    let err = mean_jacobian_row(GridIndex::new(0, 0), &psi, &PoolingConfig::default(), &ctx)
        .unwrap_err()
        .to_string();
    assert!(err.contains("gamma"), "{err}");
}
