use parafreq_core::flow::{run_flow, EquationSpec, Integrator, RunOptions, TimeGrid};
use parafreq_core::frequency::{check_monotonicity, functionals_linear, functionals_p};
use parafreq_core::operators::{apply_operator, apply_p_operator, dirichlet_form, p_energy};
use parafreq_core::{
    build_domain, frequency_series, vertex_energy_density, DomainSpec, Edge, MeasureSpec, TimeFunction, WeightedDomain,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn graph(n: usize, seed: u64) -> WeightedDomain {
    build_domain(&DomainSpec::RandomGraph {
        n,
        edge_probability: None,
        target_degree: Some(3.5f64.min(n as f64 - 1.0)),
        seed,
        weight_range: (0.5, 1.5),
        conductance_range: (0.5, 1.5),
        measure: MeasureSpec::UniformPotential {
            lo: -0.5,
            hi: 0.5,
            seed,
        },
    })
    .unwrap()
}

fn field(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = parafreq_core::seed::rng_from(seed, &[7]);
    (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

fn positive_field(n: usize, seed: u64) -> Vec<f64> {
    field(n, seed).into_iter().map(|x| 1.0 + 0.5 * x).collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|x| x.abs()).fold(1e-300, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Relabels vertices by `perm`, vertex `i` becoming `perm[i]`.
fn permuted(d: &WeightedDomain, perm: &[usize]) -> WeightedDomain {
    let mut mu = vec![0.0; d.n()];
    for (i, m) in d.mu().iter().enumerate() {
        mu[perm[i]] = *m;
    }
    let edges = d
        .edges()
        .iter()
        .map(|e| Edge::new(perm[e.i], perm[e.j], e.weight, e.conductance))
        .collect();
    WeightedDomain::new(mu, edges, "permuted").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn operator_commutes_with_relabeling(n in 5usize..40, seed in any::<u64>()) {
        let d = graph(n, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut parafreq_core::seed::rng_from(seed, &[1]));
        let dp = permuted(&d, &perm);
        let u = field(n, seed);
        let mut up = vec![0.0; n];
        for i in 0..n {
            up[perm[i]] = u[i];
        }
        let lu = apply_operator(&d, &u).unwrap();
        let lup = apply_operator(&dp, &up).unwrap();
        for i in 0..n {
            prop_assert!((lu[i] - lup[perm[i]]).abs() <= 1e-12 * (1.0 + lu[i].abs()));
        }
        let a = functionals_linear(&d, &u).unwrap();
        let b = functionals_linear(&dp, &up).unwrap();
        prop_assert!((a.u - b.u).abs() <= 1e-12 * (1.0 + a.u.abs()));
    }

    #[test]
    fn frequency_is_nonpositive_and_scale_invariant(n in 3usize..30, seed in any::<u64>(), p in 1.1f64..5.0, c in 0.01f64..100.0) {
        let d = graph(n, seed);
        let u = field(n, seed);
        let f = functionals_p(&d, &u, p).unwrap();
        prop_assert!(f.i > 0.0 && f.d <= 1e-14 && f.u <= 1e-14);
        let cu: Vec<f64> = u.iter().map(|x| c * x).collect();
        let g = functionals_p(&d, &cu, p).unwrap();
        prop_assert!((f.u - g.u).abs() <= 1e-12 * (1.0 + f.u.abs()));
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        prop_assert_eq!(functionals_p(&d, &neg, p).unwrap().u, f.u);
    }

    #[test]
    fn measure_scaling_leaves_frequency_unchanged(n in 3usize..30, seed in any::<u64>(), p in 1.1f64..5.0, c in 0.01f64..100.0) {
        let d = graph(n, seed);
        let scaled = d.with_scaled_measure(c).unwrap();
        let u = field(n, seed);
        let a = functionals_p(&d, &u, p).unwrap();
        let b = functionals_p(&scaled, &u, p).unwrap();
        prop_assert!((a.u - b.u).abs() <= 1e-13 * (1.0 + a.u.abs()));
        let la = apply_operator(&d, &u).unwrap();
        let lb = apply_operator(&scaled, &u).unwrap();
        prop_assert!(max_rel(&lb, &la) <= 1e-13);
    }

    #[test]
    fn p_operator_is_homogeneous(n in 3usize..30, seed in any::<u64>(), p in 1.1f64..5.0, c in 0.1f64..10.0) {
        let d = graph(n, seed);
        let u = field(n, seed);
        let cu: Vec<f64> = u.iter().map(|x| c * x).collect();
        let a = apply_p_operator(&d, &u, p, 0.0).unwrap();
        let b = apply_p_operator(&d, &cu, p, 0.0).unwrap();
        let expected: Vec<f64> = a.iter().map(|x| c.powf(p - 1.0) * x).collect();
        prop_assert!(max_rel(&b, &expected) <= 1e-12);
        let e = p_energy(&d, &cu, p).unwrap();
        prop_assert!((e - c.powf(p) * p_energy(&d, &u, p).unwrap()).abs() <= 1e-12 * e.max(1e-300));
    }

    #[test]
    fn energy_density_integrates_to_energy(n in 3usize..30, seed in any::<u64>(), p in 1.1f64..5.0) {
        let d = graph(n, seed);
        let u = field(n, seed);
        let e = vertex_energy_density(&d, &u, p).unwrap();
        prop_assert!(e.iter().all(|x| *x >= 0.0));
        let total = d.integrate(&e);
        let energy = p_energy(&d, &u, p).unwrap();
        prop_assert!((total - energy).abs() <= 1e-12 * energy.max(1e-300));
    }

    #[test]
    fn dirichlet_form_is_symmetric(n in 3usize..30, seed in any::<u64>()) {
        let d = graph(n, seed);
        let (u, v) = (field(n, seed), field(n, seed ^ 0x55));
        let (a, b) = (dirichlet_form(&d, &u, &v).unwrap(), dirichlet_form(&d, &v, &u).unwrap());
        prop_assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        prop_assert!(dirichlet_form(&d, &u, &u).unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn spectral_frequency_is_nondecreasing(n in 5usize..40, seed in any::<u64>(), slope in -1.0f64..1.0) {
        let d = graph(n, seed);
        let u0 = field(n, seed);
        let phi = TimeFunction::Linear { slope, intercept: 0.1 };
        let traj = run_flow(&d, &EquationSpec::linear(phi), &u0, TimeGrid::new(0.0, 1.0, 50).unwrap(), &RunOptions::default()).unwrap();
        let s = frequency_series(&d, &traj).unwrap();
        prop_assert!(check_monotonicity(&s, 1e-10).unwrap().pass);
    }

    #[test]
    fn linear_flow_scales_with_initial_data(n in 5usize..30, seed in any::<u64>(), c in 0.01f64..100.0) {
        let d = graph(n, seed);
        let u0 = field(n, seed);
        let cu0: Vec<f64> = u0.iter().map(|x| c * x).collect();
        let grid = TimeGrid::new(0.0, 0.5, 20).unwrap();
        for integrator in [Integrator::Spectral, Integrator::ImplicitEuler] {
            let eq = EquationSpec::linear(TimeFunction::constant(0.3));
            let opts = RunOptions::with_integrator(integrator);
            let a = run_flow(&d, &eq, &u0, grid, &opts).unwrap();
            let b = run_flow(&d, &eq, &cu0, grid, &opts).unwrap();
            for (x, y) in a.states.iter().zip(&b.states) {
                let scaled: Vec<f64> = x.iter().map(|v| c * v).collect();
                prop_assert!(max_rel(y, &scaled) <= 1e-12);
            }
            let (sa, sb) = (frequency_series(&d, &a).unwrap(), frequency_series(&d, &b).unwrap());
            for (x, y) in sa.u.iter().zip(&sb.u) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn p_flow_respects_scaling_and_sign(n in 5usize..20, seed in any::<u64>(), p in prop::sample::select(vec![1.5, 3.0, 4.0]), c in 0.5f64..2.0) {
        let d = graph(n, seed);
        let u0 = positive_field(n, seed);
        let grid = TimeGrid::new(0.0, 0.2, 10).unwrap();
        let eq = EquationSpec::p_heat(p, TimeFunction::constant(0.2));
        let a = run_flow(&d, &eq, &u0, grid, &RunOptions::default()).unwrap();
        let cu0: Vec<f64> = u0.iter().map(|x| c * x).collect();
        let b = run_flow(&d, &eq, &cu0, grid, &RunOptions::default()).unwrap();
        let neg: Vec<f64> = u0.iter().map(|x| -x).collect();
        let m = run_flow(&d, &eq, &neg, grid, &RunOptions::default()).unwrap();
        for k in 0..a.states.len() {
            let scaled: Vec<f64> = a.states[k].iter().map(|v| c * v).collect();
            prop_assert!(max_rel(&b.states[k], &scaled) <= 1e-9);
            let flipped: Vec<f64> = a.states[k].iter().map(|v| -v).collect();
            prop_assert!(max_rel(&m.states[k], &flipped) <= 1e-9);
        }
    }
}
