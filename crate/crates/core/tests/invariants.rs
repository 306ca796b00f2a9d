mod common;

use common::Scalar;
use fbsee::backward::solve_backward;
use fbsee::model::ControlProcess;
use fbsee::noise::{generate_paths, NoiseSpec};
use fbsee::grid::TimeGrid;
use fbsee::resolvent::build_resolvents;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn backward_map_is_linear_in_the_terminal_datum(kx in -1.0f64..0.5, c in -0.5f64..0.5, loading in -1.0f64..1.0, scale in -3.0f64..3.0) {
        let base = Scalar { n_steps: 16, a_gen: -0.5, kx, c, loading, ..Default::default() };
        let scaled = Scalar { xi: scale, loading: scale * loading, ..base };
        let (m1, m2) = (base.model(), scaled.model());
        let table = build_resolvents(&m1.generator, &m1.grid, m1.alpha, 32).unwrap();
        let ens = generate_paths(&m1.noise, &m1.grid, 200).unwrap();
        let u = ControlProcess::constant(&m1.grid, &[0.0]).unwrap();
        let s1 = solve_backward(&m1, &u, &table, &ens).unwrap();
        let s2 = solve_backward(&m2, &u, &table, &ens).unwrap();
        let size = s1.x.as_slice().iter().map(|v| v.abs()).fold(1.0, f64::max);
        for (a, b) in s1.x.as_slice().iter().zip(s2.x.as_slice()).chain(s1.z.as_slice().iter().zip(s2.z.as_slice())) {
            prop_assert!((scale * a - b).abs() <= 1e-9 * size * scale.abs().max(1.0));
        }
    }

    #[test]
    fn smaller_ensembles_are_prefixes(seed in any::<u64>(), small in 1usize..20, extra in 1usize..20, lambda in 0.1f64..4.0) {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let spec = NoiseSpec::new(vec![lambda, 0.5 * lambda], seed).unwrap();
        let a = generate_paths(&spec, &grid, small).unwrap();
        let b = generate_paths(&spec, &grid, small + extra).unwrap();
        for p in 0..small {
            prop_assert_eq!(a.increments().path(p), b.increments().path(p));
        }
    }
}
