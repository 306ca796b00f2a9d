mod common;

use common::{picard_volterra, Scalar};
use fbsee::backward::solve_backward;
use fbsee::model::ControlProcess;
use fbsee::noise::generate_paths;
use fbsee::resolvent::build_resolvents;
use fbsee::special::mittag_leffler;

const FINE: usize = 8192;

#[test]
fn picard_oracle_matches_mittag_leffler() {
    let y = picard_volterra(0.75, -1.0, 1.0, FINE);
    for k in [1024, 4096, FINE] {
        let tau = k as f64 / FINE as f64;
        let exact = mittag_leffler(0.75, 1.0, -tau.powf(0.75)).unwrap();
        assert!((y[k] - exact).abs() < 1e-5, "tau={tau}: {} vs {exact}", y[k]);
    }
}

#[test]
fn linear_driver_matches_picard_oracle() {
    let n = 512;
    let s = Scalar { n_steps: n, kx: -1.0, lambda: 0.0, ..Default::default() };
    let model = s.model();
    let table = build_resolvents(&model.generator, &model.grid, model.alpha, 64).unwrap();
    let ens = generate_paths(&model.noise, &model.grid, 4).unwrap();
    let u = ControlProcess::constant(&model.grid, &[0.0]).unwrap();
    let solved = solve_backward(&model, &u, &table, &ens).unwrap();
    let oracle = picard_volterra(0.75, -1.0, 1.0, FINE);
    let stride = FINE / n;
    let worst = (0..=n).map(|i| (solved.x.get(0, i)[0] - oracle[(n - i) * stride]).abs() / oracle[(n - i) * stride].abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-2, "relative error {worst}");
    // Zero noise: z vanishes and every path carries the same values.
    assert!(solved.z.as_slice().iter().all(|v| v.abs() <= 1e-10));
    assert!((0..=n).all(|i| solved.x.get(3, i) == solved.x.get(0, i)));
}

#[test]
fn terminal_value_is_reproduced_pathwise() {
    let s = Scalar { n_steps: 32, kx: -0.5, c: 0.3, xi: 1.0, loading: 0.7, ..Default::default() };
    let model = s.model();
    let table = build_resolvents(&model.generator, &model.grid, model.alpha, 64).unwrap();
    let ens = generate_paths(&model.noise, &model.grid, 400).unwrap();
    let u = ControlProcess::constant(&model.grid, &[0.0]).unwrap();
    let solved = solve_backward(&model, &u, &table, &ens).unwrap();
    let b_end = ens.brownian_values();
    for p in 0..400 {
        assert_eq!(solved.x.get(p, 32)[0], 1.0 + 0.7 * b_end.get(p, 32)[0]);
    }
}

#[test]
fn future_increments_do_not_reach_back() {
    let s = Scalar { n_steps: 32, a_gen: -1.0, ..Default::default() };
    let model = s.model();
    let table = build_resolvents(&model.generator, &model.grid, model.alpha, 64).unwrap();
    let ens = generate_paths(&model.noise, &model.grid, 300).unwrap();
    let u = ControlProcess::constant(&model.grid, &[0.0]).unwrap();
    let base = solve_backward(&model, &u, &table, &ens).unwrap();
    let from = 12;
    let source: Vec<usize> = (0..300).map(|p| (p * 7 + 3) % 300).collect();
    let shuffled = solve_backward(&model, &u, &table, &ens.with_future_from(from, &source)).unwrap();
    for p in 0..300 {
        for i in 0..=from {
            let (a, b) = (base.x.get(p, i)[0], shuffled.x.get(p, i)[0]);
            assert!((a - b).abs() <= 1e-13 * a.abs(), "path {p} node {i}: {a} vs {b}");
        }
    }
}

#[test]
fn monte_carlo_error_shrinks_with_paths() {
    let n = 32;
    let noisy = Scalar { n_steps: n, kx: -1.0, loading: 0.5, ..Default::default() };
    let quiet = Scalar { lambda: 0.0, ..noisy };
    let run = |s: &Scalar, m: usize| {
        let model = s.model();
        let table = build_resolvents(&model.generator, &model.grid, model.alpha, 64).unwrap();
        let ens = generate_paths(&model.noise, &model.grid, m).unwrap();
        let u = ControlProcess::constant(&model.grid, &[0.0]).unwrap();
        solve_backward(&model, &u, &table, &ens).unwrap().mean_x0()[0]
    };
    let reference = run(&quiet, 4);
    let errors: Vec<(usize, f64)> = [1_000, 10_000, 100_000].iter().map(|&m| (m, (run(&noisy, m) - reference).abs())).collect();
    for &(m, e) in &errors {
        assert!(e <= 2.5 / (m as f64).sqrt(), "M={m}: error {e}");
    }
    for w in errors.windows(2) {
        assert!(w[1].1 <= w[0].1 + 1.5 / (w[1].0 as f64).sqrt(), "{errors:?}");
    }
}
