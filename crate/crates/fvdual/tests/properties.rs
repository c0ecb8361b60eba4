use fvdual::forward::MoranSystem;
use fvdual::function::DualFunction;
use fvdual::geometry::{TypeSet, TypeSpace};
use fvdual::harness::{z_score, Estimate, Welford};
use fvdual::particle::Location;
use fvdual::refined::{IndicatorDual, IndicatorSum, RefinedDual, RefinedVariant};
use fvdual::tableau::{Column, RankedTableau, Tableau};
use fvdual::PopulationState;
use proptest::prelude::*;

const K: usize = 4;

fn type_set() -> impl Strategy<Value = TypeSet> {
    (0u64..(1 << K)).prop_map(TypeSet::from_bits)
}

fn nonempty_set() -> impl Strategy<Value = TypeSet> {
    (1u64..(1 << K)).prop_map(TypeSet::from_bits)
}

fn frequencies(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|w| {
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    })
}

fn state(sites: usize) -> impl Strategy<Value = PopulationState> {
    prop::collection::vec(frequencies(K), sites).prop_map(|s| PopulationState::new(s).unwrap())
}

/// Selection levels of a fitness vector `(0, 0.5, 1, 1)`.
fn level() -> impl Strategy<Value = TypeSet> {
    prop::sample::select(vec![TypeSet::from_bits(0b1110), TypeSet::from_bits(0b1100)])
}

#[derive(Clone, Debug)]
enum Op {
    Select(usize, TypeSet),
    Coalesce(usize, usize),
    Jump(usize, usize, usize),
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![
            (0usize..8, level()).prop_map(|(v, l)| Op::Select(v, l)),
            (0usize..8, 0usize..8).prop_map(|(a, b)| Op::Coalesce(a, b)),
            (0usize..8, 0usize..K, 0usize..K).prop_map(|(v, f, t)| Op::Jump(v, f, t)),
        ],
        0..8,
    )
}

proptest! {
    #[test]
    fn mutation_preimage_is_exact(b in type_set(), from in 0usize..K, to in 0usize..K) {
        let pre = b.mutation_preimage(from, to);
        for u in 0..K {
            let image = if u == from { to } else { u };
            prop_assert_eq!(pre.contains(u), b.contains(image));
        }
    }

    #[test]
    fn set_algebra(a in type_set(), b in type_set(), x in frequencies(K)) {
        prop_assert!(a.intersection(b).is_disjoint(a.complement(K)));
        prop_assert_eq!(a.union(a.complement(K)), TypeSet::full(K));
        prop_assert!((a.mass(&x) + a.complement(K).mass(&x) - 1.0).abs() < 1e-12);
        prop_assert_eq!(TypeSet::parse(&a.notation(K)).unwrap(), a);
        prop_assert!((a.union(b).mass(&x) + a.intersection(b).mass(&x) - a.mass(&x) - b.mass(&x)).abs() < 1e-12);
    }

    #[test]
    fn tableau_and_indicator_sum_agree(sets in prop::collection::vec(nonempty_set(), 1..4), ops in ops(), x in state(1)) {
        let factors: Vec<(Location, TypeSet)> = sets.iter().map(|s| (Location::Site(0), *s)).collect();
        let mut refined = RefinedDual { sum: IndicatorSum::product(K, &sets).unwrap(), variant: RefinedVariant::PsiHat };
        let mut ranked = RankedTableau::new(Tableau::product(K, &factors).unwrap());
        let mut labels = sets.len();
        for op in ops {
            match op {
                Op::Select(v, l) => {
                    refined.birth(v % labels, l).unwrap();
                    ranked.birth(v % labels, l).unwrap();
                    labels += 1;
                }
                Op::Coalesce(a, b) => {
                    let (a, b) = (a % labels, b % labels);
                    if a == b {
                        continue;
                    }
                    refined.coalesce(a.min(b), a.max(b)).unwrap();
                    ranked.coalesce(a.min(b), a.max(b)).unwrap();
                    labels -= 1;
                }
                Op::Jump(v, from, to) => {
                    refined.mutation_jump(v % labels, from, to).unwrap();
                    ranked.mutation_jump(v % labels, from, to).unwrap();
                }
            }
            let lhs = refined.sum.evaluate_at(&x, &vec![Location::Site(0); labels], &[]).unwrap();
            let rhs = ranked.tableau.evaluate(&x, &[]);
            prop_assert!((lhs - rhs).abs() < 1e-12, "{} vs {}", lhs, rhs);
            prop_assert!(ranked.tableau.rows_disjoint() && ranked.tableau.is_pruned());
            prop_assert!(refined.sum.rows_disjoint());
        }
    }

    #[test]
    fn prune_and_simplify_keep_the_value(
        rows in prop::collection::vec(prop::collection::vec(type_set(), 3), 1..6),
        x in state(2),
    ) {
        let columns = vec![Column::at(Location::Site(0)), Column::at(Location::Site(1)), Column::at(Location::Site(0))];
        // Make rows disjoint by carving each from the complement of the ones before it in column 0.
        let mut taken = TypeSet::EMPTY;
        let mut disjoint = Vec::new();
        for mut row in rows {
            row[0] = row[0].intersection(taken.complement(K));
            taken = taken.union(row[0]);
            disjoint.push(row);
        }
        let Ok(mut tableau) = Tableau::new(K, columns, disjoint) else { return Ok(()) };
        let value = tableau.evaluate(&x, &[]);
        tableau.prune();
        prop_assert!(tableau.is_pruned());
        prop_assert!((tableau.evaluate(&x, &[]) - value).abs() < 1e-12);
        tableau.simplify();
        prop_assert!(tableau.rows_disjoint());
        prop_assert!((tableau.evaluate(&x, &[]) - value).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&value));
    }

    #[test]
    fn coalescing_a_function_identifies_variables(data in prop::collection::vec(-1.0f64..1.0, 27), x in frequencies(3)) {
        let f = DualFunction::new(3, 3, data).unwrap();
        let g = f.coalesce(0, 2).unwrap();
        let direct: f64 = (0..3)
            .flat_map(|u| (0..3).map(move |v| (u, v)))
            .map(|(u, v)| x[u] * x[v] * f.get(&[u, v, u]))
            .sum();
        prop_assert!((g.integrate(&[&x, &x]).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn gplus_selection_never_raises_the_norm(data in prop::collection::vec(-2.0f64..2.0, 16), i in 0usize..2) {
        let f = DualFunction::new(K, 2, data).unwrap();
        let chi = [0.0, 0.5, 1.0, 1.0];
        prop_assert!(f.select_gplus(i, &chi).unwrap().sup_norm() <= f.sup_norm() + 1e-12);
        prop_assert!(f.select_plus(i, &chi).unwrap().sup_norm() <= 2.0 * f.sup_norm() + 1e-12);
    }

    #[test]
    fn welford_merge_is_split_invariant(values in prop::collection::vec(-10.0f64..10.0, 2..200), cut in 0usize..200) {
        let cut = cut % values.len();
        let mut left = Welford::default();
        let mut right = Welford::default();
        values[..cut].iter().for_each(|v| left.push(*v));
        values[cut..].iter().for_each(|v| right.push(*v));
        left.merge(&right);
        let e = Estimate::from_values(&values, 0, 0);
        prop_assert_eq!(left.count(), values.len() as u64);
        prop_assert!((left.mean() - e.mean).abs() < 1e-9);
        prop_assert!((left.variance().sqrt() / (values.len() as f64).sqrt() - e.std_error).abs() < 1e-9);
    }

    #[test]
    fn z_score_is_symmetric(a in -5.0f64..5.0, b in -5.0f64..5.0, sa in 0.01f64..1.0, sb in 0.01f64..1.0) {
        let ea = Estimate { mean: a, std_error: sa, replicas: 10, aborts: 0, seed: 0 };
        let eb = Estimate { mean: b, std_error: sb, replicas: 10, aborts: 0, seed: 0 };
        prop_assert!(z_score(&ea, &eb) >= 0.0);
        prop_assert!((z_score(&ea, &eb) - z_score(&eb, &ea)).abs() < 1e-12);
    }

    #[test]
    fn moran_apportioning_is_close(x in state(3), n in 2usize..500) {
        let system = MoranSystem::from_state(&x, n).unwrap();
        for site in 0..3 {
            let counts = system.site_counts(site);
            prop_assert_eq!(counts.iter().sum::<u32>() as usize, n);
            for (c, p) in counts.iter().zip(x.site(site)) {
                prop_assert!((*c as f64 - p * n as f64).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn type_space_rejects_broken_dominance(m in 0.1f64..2.0, mbar in 0.0f64..4.0) {
        let matrix = vec![vec![0.25; 4]; 4];
        let rho = vec![0.25; 4];
        let ok = TypeSpace::new(vec![0.0, 0.5, 1.0, 1.0], matrix, m, mbar, rho).is_ok();
        prop_assert_eq!(ok, m * 0.25 >= mbar * 0.25 - 1e-12);
    }
}
