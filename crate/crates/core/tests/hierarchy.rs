mod common;

use common::*;
use ndarray::Array2;
use otmerge::hierarchy::{self, ModulePairing};
use otmerge::sinkhorn::SolverConfig;
use otmerge::tensor_store::{ModuleKind, Side};
use otmerge::toy::{self, ToyModelSpec};

fn two_models() -> (otmerge::tensor_store::ActivationSet, otmerge::tensor_store::ActivationSet) {
    let spec = |dims: Vec<usize>, seed| ToyModelSpec { samples: 48, ..ToyModelSpec::new(dims, seed) };
    let a = toy::generate_toy(&spec(vec![6, 6, 6], 1)).unwrap();
    let b = toy::generate_toy(&spec(vec![6, 5, 7, 4], 2)).unwrap();
    let x = toy::toy_inputs(48, 6, 3);
    (toy::run_activations(&a, x.view()).unwrap(), toy::run_activations(&b, x.view()).unwrap())
}

#[test]
fn every_layer_module_side_pair_gets_a_plan() {
    let (t, s) = two_models();
    let plans = hierarchy::feature_plans(&t, &s, &ModulePairing::default(), &SolverConfig::feature_default()).unwrap();
    assert_eq!(plans.plans.len(), 2 * 3 * ModuleKind::ALL.len() * 2);
    let only_q = ModulePairing { modules: Some(vec![ModuleKind::QProj]) };
    let plans = hierarchy::feature_plans(&t, &s, &only_q, &SolverConfig::feature_default()).unwrap();
    assert_eq!(plans.plans.len(), 2 * 3 * 2);
    for (key, plan) in &plans.plans {
        let n = t.get(key.target_layer, key.module, key.side).unwrap().values.ncols();
        let m = s.get(key.source_layer, key.module, key.side).unwrap().values.ncols();
        assert_eq!(plan.dim(), (n, m), "{key}");
    }
}

#[test]
fn layer_costs_and_effective_plan_match_recomputation() {
    let (t, s) = two_models();
    let pairing = ModulePairing::default();
    let costs = hierarchy::feature_costs(&t, &s, &pairing).unwrap();
    let plans = hierarchy::solve_feature_plans(&costs, &SolverConfig::feature_default()).unwrap();
    let mut per_side = Vec::new();
    for side in [Side::Pre, Side::Post] {
        let got = hierarchy::layer_costs(&plans, &costs, side, 2, 3).unwrap();
        let mut want = Array2::<f64>::zeros((2, 3));
        for l in 0..2 {
            for m in 0..3 {
                let vals: Vec<f64> = plans
                    .plans
                    .iter()
                    .filter(|(k, _)| k.side == side && k.target_layer == l && k.source_layer == m)
                    .map(|(k, p)| {
                        let c = &costs.costs[k].0;
                        let mut acc = 0.0;
                        for i in 0..c.nrows() {
                            for j in 0..c.ncols() {
                                acc += c[[i, j]] * p.plan[[i, j]];
                            }
                        }
                        acc
                    })
                    .collect();
                assert_eq!(vals.len(), ModuleKind::ALL.len());
                want[[l, m]] = vals.iter().sum::<f64>() / vals.len() as f64;
            }
        }
        assert!(max_abs_diff(&got, &want) < 1e-12);
        per_side.push(got);
    }
    let lp = hierarchy::layer_plan(per_side[0].clone(), per_side[1].clone(), &SolverConfig::layer_default(), true).unwrap();
    for i in 0..2 {
        let raw: Vec<f64> = (0..3).map(|j| (lp.p_pre.plan[[i, j]] * lp.p_post.plan[[i, j]]).sqrt()).collect();
        let total: f64 = raw.iter().sum();
        for j in 0..3 {
            assert!((lp.p_eff[[i, j]] - raw[j] / total).abs() < 1e-14);
        }
    }
    let unnormalized = hierarchy::layer_plan(per_side[0].clone(), per_side[1].clone(), &SolverConfig::layer_default(), false).unwrap();
    assert_eq!(unnormalized.p_eff, lp.raw_effective());
}

#[test]
fn large_costs_scale_eta() {
    let c = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 0.0 } else { 4000.0 });
    assert_eq!(hierarchy::adaptive_eta(c.view(), 0.1), 0.1 * 4.0);
    let lp = hierarchy::layer_plan(c.clone(), c, &SolverConfig::layer_default(), true).unwrap();
    assert_eq!(lp.eta_pre, 0.4);
    assert_eq!(otmerge::sinkhorn::row_argmax(lp.p_eff.view()), vec![0, 1, 2]);
    let small = Array2::from_elem((2, 2), 999.0);
    assert_eq!(hierarchy::adaptive_eta(small.view(), 0.1), 0.1);
}

#[test]
fn mass_explained_matches_oracle() {
    let mut r = rng(51);
    for _ in 0..20 {
        let q = uniform_matrix(&mut r, 5, 7, 0.0, 1.0);
        for k in 0..=40 {
            let got = hierarchy::transport_mass_explained(q.view(), k);
            assert!((got - mass_explained_oracle(&q, k)).abs() < 1e-12);
        }
    }
}
