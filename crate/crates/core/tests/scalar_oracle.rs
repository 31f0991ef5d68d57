mod common;

use common::{scalar_cost, scalar_system, ScalarGame};
use mfsc_core::dualloop::{outer_loop_are, outer_loop_sare, DualLoopConfig};
use mfsc_core::stabilizer::InitStrategy;

const INSTANCES: u64 = 20;

/// The oracle checks the loop's fixed point, so the gain-change threshold
/// is tightened well below the default; at `ξ = 1e-5` the linearly
/// converging outer loop stops a few `1e-10` short of the root.
fn cfg() -> DualLoopConfig {
    DualLoopConfig { xi: 1e-10, ..DualLoopConfig::default() }
}

fn init() -> InitStrategy {
    InitStrategy::Lmi { seed: 1 }
}

#[test]
fn dual_loop_matches_the_stabilizing_root() {
    let cfg = cfg();
    for seed in 0..INSTANCES {
        let game = ScalarGame::random(seed);
        let (sol, _) = outer_loop_sare(&game.system(), &game.cost(), &cfg, &init())
            .unwrap_or_else(|f| panic!("instance {seed} ({game:?}): {}", f.error));
        let root = game.stabilizing_root();
        let err = (sol.p[(0, 0)] - root).abs();
        assert!(err <= 1e-10 * root.max(1.0), "instance {seed} ({game:?}): |{} - {root}| = {err:e}", sol.p[(0, 0)]);
    }
}

#[test]
fn worked_instance() {
    let sys = scalar_system(-1.0, 1.0, 1.0, 0.0, 0.0);
    let cost = scalar_cost(1.0, 1.0, 0.0, 2.0);
    let (sol, _) = outer_loop_sare(&sys, &cost, &cfg(), &init()).unwrap();
    let expected = (7f64.sqrt() - 2.0) / 1.5;
    assert!((sol.p[(0, 0)] - expected).abs() <= 1e-10, "{}", sol.p[(0, 0)]);
    assert!((expected - 0.430501).abs() < 1e-6);
}

/// With `d = 0` the mean-field equation is `βS² - 2aS - q_s = 0` where
/// `q_s = q - q_Γ + c²P*` and `q_Γ = q(2Γ - Γ²)`.
fn mean_field_root(game: &ScalarGame, coupling: f64, p_star: f64) -> f64 {
    let beta = game.b * game.b / game.r - game.g * game.g / (game.gamma * game.gamma);
    let q_gamma = game.q * (2.0 * coupling - coupling * coupling);
    let q_s = game.q - q_gamma + game.c * game.c * p_star;
    (game.a + (game.a * game.a + beta * q_s).sqrt()) / beta
}

#[test]
fn mean_field_loop_matches_its_root() {
    let cfg = cfg();
    let worked = ScalarGame { a: -1.0, b: 1.0, g: 1.0, c: 0.0, q: 1.0, r: 1.0, gamma: 2.0 };
    let games = std::iter::once(worked).chain((0..INSTANCES).map(ScalarGame::random));
    for (i, game) in games.enumerate() {
        let sys = game.system();
        let cost = scalar_cost(game.q, game.r, 0.5, game.gamma);
        let (p, _) = outer_loop_sare(&sys, &cost, &cfg, &init()).unwrap();
        let (s, _) = outer_loop_are(&sys, &cost, &p.p, &cfg, &init())
            .unwrap_or_else(|f| panic!("instance {i} ({game:?}): {}", f.error));
        let root = mean_field_root(&game, 0.5, p.p[(0, 0)]);
        let err = (s.p[(0, 0)] - root).abs();
        assert!(err <= 1e-10 * root.max(1.0), "instance {i}: |{} - {root}| = {err:e}", s.p[(0, 0)]);
    }
}

#[test]
fn without_coupling_or_noise_both_equations_coincide() {
    let cfg = cfg();
    for seed in 0..5 {
        let mut game = ScalarGame::random(seed);
        game.c = 0.0;
        let (sys, cost) = (game.system(), game.cost());
        let (p, _) = outer_loop_sare(&sys, &cost, &cfg, &init()).unwrap();
        let (s, _) = outer_loop_are(&sys, &cost, &p.p, &cfg, &init()).unwrap();
        assert!((&s.p - &p.p).norm() <= 1e-10 * (1.0 + p.p.norm()), "instance {seed}");
    }
}
