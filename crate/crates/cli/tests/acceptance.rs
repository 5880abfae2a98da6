//! Acceptance checks, one PASS/FAIL line per criterion. Exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use jamfield::evaluation::{rmse, run_mc};
use jamfield::experts::cnn::{batch_stats, cnn_forward, CnnMode};
use jamfield::experts::{pl_mean, CnnArchitecture};
use jamfield::gradient::{grad_scalar, mean_jacobian_row, Objective};
use jamfield::grid::{make_grid, Position};
use jamfield::inference::{
    fit_map_from, fit_posterior, marginal_theta, predict_field, FactorRoute, FitConfig,
    LaplacePosterior,
};
use jamfield::model::{pooled_mean, ModelContext};
use jamfield::oracle::central_differences;
use jamfield::params::{ParamGroup, ParamVector};
use jamfield::pooling::{NegLogPosterior, PoolingConfig, PriorConfig};
use jamfield::scene::{Scene, SceneConfig};
use jamfield_cli::CliConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_ABS_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;
const GRAD_POINTS: u64 = 100;
const CONJUGATE_TOL: f64 = 1e-8;
const SCHUR_TOL: f64 = 1e-8;
const SCHUR_MAX_DIM: usize = 200;
const EXACT_LOC_CELLS: f64 = 0.5;
const EXACT_RMSE_DBW: f64 = 0.5;
const EXACT_N: usize = 200;
const SWEEP_SIZES: [usize; 4] = [20, 50, 100, 200];
const SWEEP_RUNS: usize = 20;
const WEIGHT_SUM_TOL: f64 = 1e-12;

type Check = Result<String, String>;

fn small_scene(seed: u64) -> Scene {
    let cfg = SceneConfig {
        seed,
        grid: make_grid(8, 8, 10.0).unwrap(),
        n_blocks_x: 2,
        n_blocks_y: 2,
        street_width: 2,
        jammer_true: Position::new(4.0, 3.0),
        noise_precision: 1.0,
        ..SceneConfig::default()
    };
    Scene::generate(&cfg).unwrap()
}

fn tiny_arch() -> CnnArchitecture {
    CnnArchitecture {
        hidden_channels: vec![2, 3],
        head_channels: 1,
        dropout: 0.2,
    }
}

fn random_psi(ctx: &ModelContext, rng: &mut ChaCha8Rng) -> ParamVector {
    let mut omega = ctx.init_omega(rng);
    for w in &mut omega {
        *w += 0.05 * (rng.random::<f64>() - 0.5);
    }
    let spec = ctx.spec();
    let theta = Position::new(
        rng.random_range(0.0..(spec.height() - 1) as f64),
        rng.random_range(0.0..(spec.width() - 1) as f64),
    );
    ParamVector::from_parts(
        ctx.layout().clone(),
        &omega,
        theta,
        rng.random_range(0.0..20.0),
        rng.random_range(2.0..5.0),
    )
    .unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= GRAD_ABS_FLOOR.max(GRAD_REL_TOL * a.abs().max(b.abs()))
}

fn steps_for(psi: &ParamVector) -> Vec<f64> {
    psi.as_slice()
        .iter()
        .map(|x| FD_STEP * x.abs().max(1.0))
        .collect()
}

fn gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut entries, mut bad) = (0usize, Vec::new());
    for point in 0..GRAD_POINTS {
        let scene = small_scene(point % 9);
        let ctx = ModelContext::new(&scene.heights, tiny_arch()).map_err(|e| e.to_string())?;
        let ds = scene.sample(12, point).map_err(|e| e.to_string())?;
        let psi = random_psi(&ctx, &mut rng);
        let pooling = PoolingConfig::new(rng.random_range(0.05..=1.0), 0.25, 0.4).unwrap();
        let prior = PriorConfig::default().for_data(ds.measurements());
        let obj = NegLogPosterior::new(&ctx, ds.measurements(), pooling, prior);
        let grad = grad_scalar(&obj, &psi).map_err(|e| e.to_string())?;
        let fd = central_differences(|x| obj.value(x), &psi, &steps_for(&psi))
            .map_err(|e| e.to_string())?;

        let cells = scene.heights.outdoor_cells();
        let p = cells[rng.random_range(0..cells.len())];
        let stats = batch_stats(ctx.arch(), ctx.input(), psi.omega()).map_err(|e| e.to_string())?;
        let (w_cnn, w_pl) = pooling.weights();
        let spec = *ctx.spec();
        let mean = |x: &ParamVector| -> jamfield::Result<f64> {
            let cnn = cnn_forward(ctx.arch(), ctx.input(), x.omega(), CnnMode::Eval(&stats))?;
            Ok(w_cnn * cnn.values()[spec.offset(p)] + w_pl * pl_mean(p, &x.path_loss(), &spec))
        };
        let row = mean_jacobian_row(p, &psi, &pooling, &ctx).map_err(|e| e.to_string())?;
        let fd_row =
            central_differences(mean, &psi, &steps_for(&psi)).map_err(|e| e.to_string())?;

        for (pairs, what) in [((&grad, &fd), "gradient"), ((&row, &fd_row), "jacobian")] {
            for (k, (a, b)) in pairs.0.iter().zip(pairs.1.iter()).enumerate() {
                entries += 1;
                if !close(*a, *b) {
                    bad.push(format!(
                        "point {point} {what} {}: {a} vs {b}",
                        psi.layout().name_of(k)
                    ));
                }
            }
        }
    }
    if bad.is_empty() {
        Ok(format!("{entries} entries over {GRAD_POINTS} points"))
    } else {
        Err(format!(
            "{} of {entries} entries off, first: {}",
            bad.len(),
            bad[0]
        ))
    }
}

fn conjugate() -> Check {
    let frozen = vec![ParamGroup::Omega, ParamGroup::Theta, ParamGroup::Gamma];
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let scene = small_scene(seed);
        let ctx = ModelContext::new(&scene.heights, tiny_arch()).unwrap();
        let ds = scene.sample(10 + seed as usize, seed).unwrap();
        let pooling = PoolingConfig::new(0.0, 0.7, 0.3 + 0.1 * seed as f64).unwrap();
        let prior = PriorConfig::default().for_data(ds.measurements());
        let init = random_psi(&ctx, &mut ChaCha8Rng::seed_from_u64(seed));
        let fit = FitConfig {
            max_iters: 200,
            polish_steps: 3,
            frozen: frozen.clone(),
            ..FitConfig::default()
        };
        let out = fit_map_from(&ds, &ctx, pooling, prior, init.clone(), &fit)
            .map_err(|e| e.to_string())?;
        let post = LaplacePosterior::build(
            &ctx,
            &ds,
            pooling,
            prior,
            &out.psi,
            &frozen,
            out.trace,
            FactorRoute::Auto,
        )
        .map_err(|e| e.to_string())?;

        let beta = pooling.precision();
        let (m0, s0) = (prior.p0_mean, prior.p0_std);
        let shifted: f64 = ds
            .measurements()
            .iter()
            .map(|m| m.rss + init.p0() - pl_mean(m.position, &init.path_loss(), ctx.spec()))
            .sum();
        let precision = 1.0 / (s0 * s0) + beta * ds.len() as f64;
        let mean = (m0 / (s0 * s0) + beta * shifted) / precision;
        worst = worst
            .max((out.psi.p0() - mean).abs())
            .max((post.covariance()[(0, 0)] - 1.0 / precision).abs());
    }
    if worst < CONJUGATE_TOL {
        Ok(format!("max deviation {worst:.1e}"))
    } else {
        Err(format!(
            "max deviation {worst:.3e} exceeds {CONJUGATE_TOL:e}"
        ))
    }
}

fn schur() -> Check {
    let mut worst: f64 = 0.0;
    let mut max_dim = 0;
    for seed in 0..6u64 {
        for route in [FactorRoute::Dense, FactorRoute::LowRank] {
            let scene = small_scene(seed);
            let ctx = ModelContext::new(&scene.heights, tiny_arch()).unwrap();
            let ds = scene.sample(6 + 3 * seed as usize, seed).unwrap();
            let psi = random_psi(&ctx, &mut ChaCha8Rng::seed_from_u64(seed + 40));
            let pooling = PoolingConfig::default()
                .with_lambda(0.2 + 0.1 * seed as f64)
                .unwrap();
            let prior = PriorConfig::default().for_data(ds.measurements());
            let post =
                LaplacePosterior::build(&ctx, &ds, pooling, prior, &psi, &[], Vec::new(), route)
                    .map_err(|e| e.to_string())?;
            let dim = post.hessian().dim();
            if dim > SCHUR_MAX_DIM {
                return Err(format!("model has {dim} parameters"));
            }
            max_dim = max_dim.max(dim);
            let full_inv = post
                .hessian()
                .to_dense()
                .try_inverse()
                .ok_or("singular Hessian")?;
            let t = ctx.layout().range(ParamGroup::Theta).start;
            let sigma = marginal_theta(&post).map_err(|e| e.to_string())?;
            for a in 0..2 {
                for b in 0..2 {
                    let want = full_inv[(t + a, t + b)];
                    worst = worst.max((sigma[(a, b)] - want).abs() / want.abs().max(1e-3));
                }
            }
        }
    }
    if worst <= SCHUR_TOL {
        Ok(format!(
            "max relative deviation {worst:.1e}, up to {max_dim} parameters"
        ))
    } else {
        Err(format!("max relative deviation {worst:.3e}"))
    }
}

fn exactness() -> Check {
    let scene = Scene::generate(&SceneConfig::default().open_field()).map_err(|e| e.to_string())?;
    let ctx = ModelContext::new(&scene.heights, CnnArchitecture::default()).unwrap();
    let ds = scene.sample(EXACT_N, 5).map_err(|e| e.to_string())?;
    let pooling = PoolingConfig::default().with_lambda(0.0).unwrap();
    let (out, post) = fit_posterior(
        &ds,
        &ctx,
        pooling,
        &PriorConfig::default(),
        &FitConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let (theta, truth) = (out.psi.theta(), scene.config.jammer_true);
    let loc = (theta.row - truth.row).hypot(theta.col - truth.col);
    let field = predict_field(&post, &ctx).map_err(|e| e.to_string())?;
    let e = rmse(
        &field.mean,
        &scene.true_field,
        &scene.true_field.outdoor_cells(),
    )
    .map_err(|e| e.to_string())?;
    let msg = format!("loc error {loc:.4} cells, field RMSE {e:.4} dBW");
    if loc < EXACT_LOC_CELLS && e < EXACT_RMSE_DBW {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn sweep_checks() -> (Check, Check) {
    let cfg = CliConfig {
        sweep_sizes: SWEEP_SIZES.to_vec(),
        sweep_runs: SWEEP_RUNS,
        ..CliConfig::default()
    };
    let mc = cfg.mc_config();
    let start = Instant::now();
    let table = match run_mc(&cfg.scene_config(), &mc) {
        Ok(t) => t,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let med = |n, f: fn(&jamfield::evaluation::RunResult) -> f64| {
        table.median_at(n, f).unwrap_or(f64::NAN)
    };
    let (first, last) = (SWEEP_SIZES[0], SWEEP_SIZES[SWEEP_SIZES.len() - 1]);

    let (loc0, loc1) = (med(first, |r| r.loc_error_m), med(last, |r| r.loc_error_m));
    let (std0, std1) = (
        med(first, |r| r.posterior_std_m),
        med(last, |r| r.posterior_std_m),
    );
    let msg = format!(
        "median loc error {loc0:.2} -> {loc1:.2} m, posterior std {std0:.2} -> {std1:.2} m ({} runs, {} failed, {elapsed:.0} s)",
        table.rows.len(),
        table.failures.len()
    );
    let trend = if loc1 < loc0 && std1 < std0 {
        Ok(msg)
    } else {
        Err(msg)
    };

    let mut notes = Vec::new();
    let mut ok = true;
    for n in SWEEP_SIZES {
        let (e, v) = (med(n, |r| r.test_rmse_dbw), med(n, |r| r.test_rmpv_dbw));
        ok &= v >= e;
        notes.push(format!("n={n} RMPV {v:.2} vs RMSE {e:.2}"));
    }
    let below_floor = table
        .rows
        .iter()
        .filter(|r| {
            let beta = mc
                .pooling
                .with_lambda(r.lambda_selected)
                .unwrap()
                .precision();
            r.test_rmpv_dbw < (1.0 / beta).sqrt()
        })
        .count();
    ok &= below_floor == 0;
    let lambdas: Vec<f64> = table.rows.iter().map(|r| r.lambda_selected).collect();
    let msg = format!(
        "{}; {below_floor} runs below the noise floor; λ selected in [{}, {}]",
        notes.join(", "),
        lambdas.iter().cloned().fold(f64::INFINITY, f64::min),
        lambdas.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );
    let conservative = if ok { Ok(msg) } else { Err(msg) };
    (trend, conservative)
}

fn pooling_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let (b1, b2) = (rng.random_range(0.01..10.0), rng.random_range(0.01..10.0));
        let (c, p) = (
            rng.random_range(-150.0..50.0),
            rng.random_range(-150.0..50.0),
        );
        let l = rng.random_range(0.0..=1.0);
        let (w1, w2) = PoolingConfig::new(l, b1, b2).unwrap().weights();
        if (w1 + w2 - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(format!("weights {w1} + {w2} at λ={l}"));
        }
        if PoolingConfig::new(0.0, b1, b2).unwrap().combine(c, p) != p
            || PoolingConfig::new(1.0, b1, b2).unwrap().combine(c, p) != c
        {
            return Err(format!("degenerate pooling of ({c}, {p}) is not exact"));
        }
    }

    let mut cells = 0;
    for seed in 0..4u64 {
        let scene = small_scene(seed);
        let ctx = ModelContext::new(&scene.heights, tiny_arch()).unwrap();
        let psi = random_psi(&ctx, &mut rng);
        let cnn = ctx
            .cnn_train_output(psi.omega(), None)
            .map_err(|e| e.to_string())?;
        for p in scene.heights.outdoor_cells() {
            let pl = pooled_mean(
                p,
                &psi,
                &PoolingConfig::default().with_lambda(0.0).unwrap(),
                &ctx,
            )
            .unwrap();
            let nn = pooled_mean(
                p,
                &psi,
                &PoolingConfig::default().with_lambda(1.0).unwrap(),
                &ctx,
            )
            .unwrap();
            if pl != pl_mean(p, &psi.path_loss(), ctx.spec())
                || nn != cnn.output()[ctx.spec().offset(p)]
            {
                return Err(format!("degenerate pooled mean differs at {p:?}"));
            }
        }
        let ds = scene.sample(8, seed).unwrap();
        for l in [0.0, 0.3, 0.7, 1.0] {
            let pooling = PoolingConfig::default().with_lambda(l).unwrap();
            let prior = PriorConfig::default().for_data(ds.measurements());
            let post = LaplacePosterior::build(
                &ctx,
                &ds,
                pooling,
                prior,
                &psi,
                &[],
                Vec::new(),
                FactorRoute::Auto,
            )
            .map_err(|e| e.to_string())?;
            let field = predict_field(&post, &ctx).map_err(|e| e.to_string())?;
            let floor = 1.0 / pooling.precision();
            for p in scene.heights.outdoor_cells() {
                let v = field.variance.get(p).unwrap();
                cells += 1;
                if v.is_nan() || v < floor {
                    return Err(format!("variance {v} below {floor} at {p:?}, λ={l}"));
                }
            }
        }
    }
    Ok(format!(
        "1000 random poolings, {cells} predictive variances at or above 1/β"
    ))
}

const DETERMINISM_CONFIG: &str = "\
grid_height = 16
grid_width = 16
n_blocks_x = 2
n_blocks_y = 2
street_width = 2
jammer_row = 8
jammer_col = 6
train_size = 40
max_iters = 100
restarts = 1
sweep_sizes = 20, 40
sweep_runs = 3
";

fn run_all_commands(root: &Path, name: &str, cfg: &Path) -> Result<(), String> {
    let out = root.join(name);
    let data = out.join("gen");
    let bin = env!("CARGO_BIN_EXE_jamfield");
    let cfg = cfg.to_str().unwrap();
    let runs: [Vec<String>; 3] = [
        vec!["gen".into(), "--out".into(), data.display().to_string()],
        vec![
            "fit".into(),
            "--dataset".into(),
            data.join("dataset.csv").display().to_string(),
            "--heights".into(),
            data.join("heights.csv").display().to_string(),
            "--out".into(),
            out.join("fit").display().to_string(),
        ],
        vec![
            "sweep".into(),
            "--out".into(),
            out.join("sweep").display().to_string(),
        ],
    ];
    for args in runs {
        let status = Command::new(bin)
            .args(&args)
            .args(["--config", cfg, "--seed", "11"])
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!(
                "`{}` failed: {}",
                args[0],
                String::from_utf8_lossy(&status.stderr)
            ));
        }
    }
    Ok(())
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("config.txt");
    fs::write(&cfg, DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    run_all_commands(tmp.path(), "a", &cfg)?;
    run_all_commands(tmp.path(), "b", &cfg)?;
    let (a, b) = (
        files_under(&tmp.path().join("a")),
        files_under(&tmp.path().join("b")),
    );
    if a.len() != b.len() {
        return Err(format!("{} vs {} output files", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(&b) {
        if fs::read(x).unwrap() != fs::read(y).unwrap() {
            return Err(format!(
                "{} differs between runs",
                x.strip_prefix(tmp.path()).unwrap().display()
            ));
        }
    }
    Ok(format!(
        "{} files byte-identical across gen, fit and sweep",
        a.len()
    ))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, check: Check| {
        let (tag, detail) = match check {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id} [{tag}] {name}: {detail}");
    };
    report(1, "gradient exactness", gradients());
    report(2, "Laplace vs conjugate posterior", conjugate());
    report(3, "Schur marginal vs full inverse", schur());
    report(4, "open-field exactness", exactness());
    let (trend, conservative) = sweep_checks();
    report(5, "training-size trend", trend);
    report(6, "conservative predictive uncertainty", conservative);
    report(7, "pooling algebra", pooling_algebra());
    report(8, "determinism", determinism());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
