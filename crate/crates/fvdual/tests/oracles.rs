use fvdual::forward::{generator_apply, MoranSystem, ProductMoment};
use fvdual::function::DualFunction;
use fvdual::geometry::{ultrametric_distance, Geography, HierarchicalAddress, MigrationKernel, TypeSet, TypeSpace};
use fvdual::harness::{estimate_dual_expectation, neutral_oracle, Context, DualKind, DualSpec};
use fvdual::markov::transition_matrix;
use fvdual::refined::markov_chain_set_dual;
use fvdual::tableau::{PartitionChain, PartitionChainModel};
use fvdual::{Model, PopulationState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn set(s: &str) -> TypeSet {
    TypeSet::parse(s).unwrap()
}

fn three_types(selection: f64, kernel: MigrationKernel) -> Model {
    let types = TypeSpace::new(
        vec![0.0, 0.4, 1.0],
        vec![vec![0.2, 0.5, 0.3], vec![0.1, 0.6, 0.3], vec![0.7, 0.2, 0.1]],
        0.9,
        0.0,
        vec![],
    )
    .unwrap();
    Model::new(types, kernel, selection, 1.3).unwrap()
}

fn drift(model: &Model, x: &[f64], a: TypeSet) -> f64 {
    let m = model.types.mutation_rate();
    let mm = model.types.mutation_matrix();
    let chi = model.types.fitness();
    let inflow: f64 = a.types().map(|i| (0..x.len()).map(|j| x[j] * mm[j][i]).sum::<f64>()).sum();
    let mean_chi: f64 = x.iter().zip(chi).map(|(p, c)| p * c).sum();
    let fit_in_a: f64 = a.types().map(|i| x[i] * chi[i]).sum();
    m * (inflow - a.mass(x)) + model.selection * (fit_in_a - a.mass(x) * mean_chi)
}

#[test]
fn generator_matches_closed_form_on_one_site() {
    let model = three_types(0.6, MigrationKernel::single());
    let x = PopulationState::new(vec![vec![0.2, 0.5, 0.3]]).unwrap();
    let (a, b) = (set("110"), set("011"));
    let f = ProductMoment::new(vec![(0, a), (0, b)]).to_test_function(3);
    let xs = x.site(0);
    let expected = drift(&model, xs, a) * b.mass(xs)
        + a.mass(xs) * drift(&model, xs, b)
        + model.resampling * (a.intersection(b).mass(xs) - a.mass(xs) * b.mass(xs));
    assert!((generator_apply(&f, &x, &model).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn generator_matches_closed_form_on_islands() {
    let model = three_types(0.6, MigrationKernel::new(0.7, Geography::Island { sites: 2 }).unwrap());
    let x = PopulationState::new(vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]).unwrap();
    let (a, b) = (set("100"), set("011"));
    let f = ProductMoment::new(vec![(0, a), (1, b)]).to_test_function(3);
    let (x0, x1) = (x.site(0), x.site(1));
    let mean = |s: TypeSet| (s.mass(x0) + s.mass(x1)) / 2.0;
    let c = model.migration();
    let expected = (drift(&model, x0, a) + c * (mean(a) - a.mass(x0))) * b.mass(x1)
        + a.mass(x0) * (drift(&model, x1, b) + c * (mean(b) - b.mass(x1)));
    assert!((generator_apply(&f, &x, &model).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn set_dual_of_two_state_chain_matches_closed_form() {
    let q = vec![vec![-1.0, 1.0], vec![1.0, -1.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 40_000;
    let hits = (0..n).filter(|_| markov_chain_set_dual(&q, 0, 0.7, &mut rng).unwrap().contains(0)).count();
    let p = (1.0 + (-1.4f64).exp()) / 2.0;
    assert!((transition_matrix(&q, 0.7)[0][0] - p).abs() < 1e-12);
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((hits as f64 / n as f64 - p).abs() < 4.0 * se);
}

#[test]
fn dual_kinds_match_neutral_oracle() {
    let model = three_types(0.0, MigrationKernel::single());
    let x0 = PopulationState::new(vec![vec![0.3, 0.3, 0.4]]).unwrap();
    let moment = ProductMoment::new(vec![(0, set("110")), (0, set("101"))]);
    let f = DualFunction::indicator_product(3, &moment.sets());
    let exact = neutral_oracle(&model, x0.site(0), &f, 0.6).unwrap();
    let ctx = Context::new(5, 1, 4.0).unwrap();
    for kind in DualKind::ALL {
        let est = estimate_dual_expectation(&ctx, "oracle", &model, &x0, &moment, 0.6, 20_000, &DualSpec::plain(kind)).unwrap();
        let z = (est.mean - exact).abs() / est.std_error.max(1e-12);
        assert!(z <= 4.0, "{} gives {} +- {} against {exact}", kind.name(), est.mean, est.std_error);
    }
}

#[test]
fn moran_resampling_second_moment() {
    let types = TypeSpace::new(vec![0.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.0, 0.0, vec![]).unwrap();
    let model = Model::new(types, MigrationKernel::single(), 0.0, 1.0).unwrap();
    let x0 = PopulationState::new(vec![vec![0.6, 0.4]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4000;
    let t: f64 = 0.8;
    let values: Vec<f64> = (0..n)
        .map(|_| {
            let mut system = MoranSystem::from_state(&x0, 400).unwrap();
            system.run(&model, t, &mut rng).unwrap();
            system.to_state().site(0)[0].powi(2)
        })
        .collect();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let exact = (-t).exp() * 0.36 + (1.0 - (-t).exp()) * 0.6;
    assert!((mean - exact).abs() < 4.0 * (var / n as f64).sqrt(), "{mean} vs {exact}");
}

#[test]
fn partition_chain_absorption_matches_simulation() {
    let rates = vec![vec![0.0, 1.0, 0.5], vec![0.2, 0.0, 0.3], vec![0.6, 0.4, 0.0]];
    let model = PartitionChainModel::new(rates, 2).unwrap();
    let start = PartitionChain::new(vec![set("100"), set("011")], 3).unwrap();
    let s0 = model.encode(&start);
    let h = model.absorption_probabilities().unwrap();
    assert!((h[0][s0] + h[1][s0] - 1.0).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 20_000;
    let hits = (0..n)
        .filter(|_| {
            let (s, _) = model.chain().run_to_absorption(s0, 1e9, &mut rng).unwrap();
            model.decode(s).trap() == Some(0)
        })
        .count();
    let p = h[0][s0];
    assert!((hits as f64 / n as f64 - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt());
}

#[test]
fn hierarchical_distance_is_an_ultrametric() {
    let kernel = MigrationKernel::new(1.0, Geography::Hierarchical { n: 3, depth: 3, level_rates: vec![1.0, 0.5, 0.2] }).unwrap();
    let sites = kernel.site_count();
    assert_eq!(sites, 27);
    let address: Vec<HierarchicalAddress> = (0..sites).map(|s| kernel.address(s)).collect();
    for a in 0..sites {
        assert_eq!(kernel.site(&address[a]).unwrap(), a);
        let row: f64 = (0..sites).map(|b| kernel.probability(a, b)).sum();
        assert!((row - 1.0).abs() < 1e-12);
        for b in 0..sites {
            let dab = ultrametric_distance(&address[a], &address[b]).unwrap();
            assert_eq!(dab, kernel.distance(a, b));
            assert_eq!(dab, ultrametric_distance(&address[b], &address[a]).unwrap());
            for c in (0..sites).step_by(5) {
                let dac = kernel.distance(a, c);
                let dcb = kernel.distance(c, b);
                assert!(dab <= dac.max(dcb));
            }
        }
    }
}

#[test]
fn standard_error_scales_with_replicas() {
    let model = three_types(0.5, MigrationKernel::single());
    let x0 = PopulationState::new(vec![vec![0.3, 0.3, 0.4]]).unwrap();
    let moment = ProductMoment::new(vec![(0, set("110")), (0, set("011"))]);
    let ctx = Context::new(9, 1, 4.0).unwrap();
    let spec = DualSpec::plain(DualKind::GPlus);
    let small = estimate_dual_expectation(&ctx, "scaling", &model, &x0, &moment, 1.0, 5_000, &spec).unwrap();
    let large = estimate_dual_expectation(&ctx, "scaling", &model, &x0, &moment, 1.0, 20_000, &spec).unwrap();
    let ratio = small.std_error / large.std_error;
    assert!((ratio / 2.0 - 1.0).abs() <= 0.2, "ratio {ratio}");
}
