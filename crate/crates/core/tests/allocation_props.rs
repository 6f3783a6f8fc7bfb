mod common;

use moe_prune::allocation::{
    count_feasible, enumerate_feasible, is_feasible, patterned_allocation, patterned_allocations, random_allocation,
    uniform_allocation, Region,
};
use moe_prune::{Allocation, BudgetSpec, Error, Parity};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Every vector in the cap box, filtered by the feasibility definition written out directly.
fn brute_force(budget: &BudgetSpec) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &cap in &budget.caps {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<usize>| {
                (0..=cap).map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    let step = budget.parity.step();
    out.retain(|r| r.iter().sum::<usize>() == budget.budget && r.iter().all(|v| v % step == 0));
    out
}

fn budget_strategy() -> impl Strategy<Value = BudgetSpec> {
    (prop::collection::vec(0usize..=5, 1..=5), any::<bool>(), any::<u32>()).prop_map(|(caps, even, pick)| {
        let parity = if even { Parity::Even } else { Parity::Any };
        let step = parity.step();
        let room: usize = caps.iter().map(|c| c / step).sum();
        let budget = (pick as usize % (room + 1)) * step;
        BudgetSpec::new(budget, parity, caps).unwrap()
    })
}

proptest! {
    #[test]
    fn enumeration_matches_brute_force(budget in budget_strategy()) {
        let want = brute_force(&budget);
        let got = enumerate_feasible(&budget, budget.layers(), 100_000).unwrap();
        let got: Vec<Vec<usize>> = got.iter().map(|a| a.as_slice().to_vec()).collect();
        prop_assert_eq!(&got, &want);
        prop_assert_eq!(count_feasible(&budget), Some(want.len() as u128));
    }

    #[test]
    fn constructors_are_feasible_and_enumerated(budget in budget_strategy(), seed in any::<u64>()) {
        let layers = budget.layers();
        let all = enumerate_feasible(&budget, layers, 100_000).unwrap();
        let uniform = uniform_allocation(&budget, layers).unwrap();
        prop_assert!(is_feasible(&uniform, &budget));
        prop_assert!(all.contains(&uniform));
        for p in patterned_allocations(&budget, layers).unwrap() {
            prop_assert!(is_feasible(&p, &budget));
            prop_assert!(all.contains(&p));
        }
        let mut rng = common::rng(seed);
        for _ in 0..8 {
            let r = random_allocation(&budget, layers, &mut rng).unwrap();
            prop_assert!(is_feasible(&r, &budget));
        }
    }

    #[test]
    fn uniform_is_as_flat_as_caps_allow(budget in budget_strategy()) {
        let u = uniform_allocation(&budget, budget.layers()).unwrap();
        let step = budget.step();
        // no unit can move from a fuller layer to an emptier one with room left
        for a in 0..u.len() {
            for b in 0..u.len() {
                let (ra, rb) = (u.as_slice()[a], u.as_slice()[b]);
                if ra >= rb + 2 * step {
                    prop_assert!(rb + step > budget.caps[b], "{:?} caps {:?}", u, budget.caps);
                }
            }
        }
    }
}

#[test]
fn uniform_remainder_goes_to_early_layers() {
    let b = BudgetSpec::new(10, Parity::Any, vec![4; 4]).unwrap();
    assert_eq!(uniform_allocation(&b, 4).unwrap().as_slice(), &[3, 3, 2, 2]);
    let b = BudgetSpec::new(10, Parity::Even, vec![4; 4]).unwrap();
    assert_eq!(uniform_allocation(&b, 4).unwrap().as_slice(), &[4, 2, 2, 2]);
}

#[test]
fn even_lattice_enumeration() {
    let b = BudgetSpec::new(2, Parity::Even, vec![2, 2, 2]).unwrap();
    let all: Vec<Allocation> = enumerate_feasible(&b, 3, 10).unwrap();
    assert_eq!(
        all,
        vec![Allocation::new(vec![0, 0, 2]), Allocation::new(vec![0, 2, 0]), Allocation::new(vec![2, 0, 0])]
    );
    assert!(!is_feasible(&Allocation::new(vec![1, 1, 0]), &b));
}

#[test]
fn patterns_concentrate_pruning_in_their_region() {
    let b = BudgetSpec::new(6, Parity::Any, vec![3; 6]).unwrap();
    assert_eq!(patterned_allocation(&b, 6, Region::Early).unwrap().as_slice(), &[3, 3, 0, 0, 0, 0]);
    assert_eq!(patterned_allocation(&b, 6, Region::Middle).unwrap().as_slice(), &[0, 0, 3, 3, 0, 0]);
    assert_eq!(patterned_allocation(&b, 6, Region::Late).unwrap().as_slice(), &[0, 0, 0, 0, 3, 3]);
}

#[test]
fn infeasible_budgets_are_rejected() {
    assert!(matches!(BudgetSpec::new(3, Parity::Even, vec![4, 4]), Err(Error::Feasibility(_))));
    assert!(matches!(BudgetSpec::new(9, Parity::Any, vec![4, 4]), Err(Error::Feasibility(_))));
    // caps 3 and 3 only hold 2 + 2 on the even lattice
    assert!(matches!(BudgetSpec::new(6, Parity::Even, vec![3, 3]), Err(Error::Feasibility(_))));
}

#[test]
fn enumeration_reports_exact_size_past_limit() {
    let b = BudgetSpec::new(4, Parity::Any, vec![4; 3]).unwrap();
    match enumerate_feasible(&b, 3, 5) {
        Err(Error::Size { count, lower_bound, limit }) => {
            assert_eq!((count, lower_bound, limit), (15, false, 5));
        }
        other => panic!("expected a size error, got {other:?}"),
    }
}

fn chi_square_uniform(counts: &[f64], expected: &[f64]) -> f64 {
    let stat: f64 = counts.iter().zip(expected).map(|(o, e)| (o - e) * (o - e) / e).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn small_feasible_sets_are_sampled_uniformly() {
    let b = BudgetSpec::new(4, Parity::Any, vec![3, 2, 4]).unwrap();
    let all = enumerate_feasible(&b, 3, 100).unwrap();
    let mut counts = vec![0.0; all.len()];
    let mut rng = common::rng(5);
    let n = 60_000;
    for _ in 0..n {
        let a = random_allocation(&b, 3, &mut rng).unwrap();
        counts[all.iter().position(|x| *x == a).unwrap()] += 1.0;
    }
    let expected = vec![n as f64 / all.len() as f64; all.len()];
    assert!(chi_square_uniform(&counts, &expected) > 0.001);
}

#[test]
fn large_feasible_sets_have_exact_uniform_marginals() {
    // 8 layers with caps 3 and budget 12: far more than the enumeration threshold
    let b = BudgetSpec::new(12, Parity::Any, vec![3; 8]).unwrap();
    let total = count_feasible(&b).unwrap();
    assert!(total > moe_prune::allocation::ENUMERATION_THRESHOLD);
    let rest = |left: usize| BudgetSpec::new(left, Parity::Any, vec![3; 7]).map(|s| count_feasible(&s).unwrap());
    let expected_p: Vec<f64> = (0..=3).map(|v| rest(12 - v).unwrap_or(0) as f64 / total as f64).collect();
    let mut counts = vec![0.0; 4];
    let mut rng = common::rng(6);
    let n = 100_000;
    for _ in 0..n {
        counts[random_allocation(&b, 8, &mut rng).unwrap().as_slice()[0]] += 1.0;
    }
    let expected: Vec<f64> = expected_p.iter().map(|p| p * n as f64).collect();
    assert!(chi_square_uniform(&counts, &expected) > 0.001, "{counts:?} vs {expected:?}");
}
