#![allow(dead_code)]

use jamfield::experts::CnnArchitecture;
use jamfield::grid::{make_grid, Position};
use jamfield::model::ModelContext;
use jamfield::params::ParamVector;
use jamfield::scene::{Scene, SceneConfig};
use rand::Rng;

/// 8×8 scene with a 2×2 block layout and the jammer on a street crossing.
pub fn small_scene(seed: u64) -> Scene {
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

pub fn tiny_arch() -> CnnArchitecture {
    CnnArchitecture {
        hidden_channels: vec![2, 3],
        head_channels: 1,
        dropout: 0.2,
    }
}

/// A random but well-conditioned parameter point.
pub fn random_psi<R: Rng>(ctx: &ModelContext, rng: &mut R) -> ParamVector {
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

/// `|a − b| <= max(floor, rel · max(|a|, |b|))`.
pub fn close(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= floor.max(rel * a.abs().max(b.abs()))
}

pub fn steps_for(psi: &ParamVector, rel: f64) -> Vec<f64> {
    psi.as_slice()
        .iter()
        .map(|x| rel * x.abs().max(1.0))
        .collect()
}
