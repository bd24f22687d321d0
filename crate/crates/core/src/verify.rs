//! Built-in invariant checks run by `otmerge verify` on generated instances.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::{self, NeuronMask, ResidualEntry, TransportedTerm};
use crate::sinkhorn::{self, SolverConfig};
use crate::tensor_store::{Linear, ModuleKind};
use crate::toy::{self, PlantedScenario, ToyModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed deviation (or count of violations).
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub fault_injected: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<24} measured {:.3e} (limit {:.1e}) {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.threshold,
                c.detail
            ));
        }
        out.push_str(if self.passed() { "verify: all checks passed" } else { "verify: FAILED" });
        out
    }
}

fn check(name: &str, measured: f64, threshold: f64, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: measured <= threshold,
        measured,
        threshold,
        detail,
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

/// A feasible plan between uniform marginals, from a random cost.
fn random_plan(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Result<Array2<f64>> {
    let cost = uniform_matrix(rng, n, m, 0.0, 2.0);
    let cfg = SolverConfig {
        epsilon: 0.5,
        ..SolverConfig::feature_default()
    };
    Ok(sinkhorn::solve_log_domain(cost.view(), sinkhorn::uniform(n).view(), sinkhorn::uniform(m).view(), &cfg)?.plan)
}

fn representation_identity(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (a_in, a_out, b_in, b_out) = (
            rng.random_range(1..=16),
            rng.random_range(1..=16),
            rng.random_range(1..=16),
            rng.random_range(1..=16),
        );
        let q_in = random_plan(rng, a_in, b_in)?;
        let q_out = random_plan(rng, a_out, b_out)?;
        let maps = fusion::coordinate_maps(q_in.view(), q_out.view(), true)?;
        let w_b = uniform_matrix(rng, b_out, b_in, -10.0, 10.0);
        let h: Array1<f64> = (0..a_in).map(|_| rng.random_range(-10.0..10.0)).collect();
        worst = worst.max(fusion::verify_representation_identity(&maps, w_b.view(), h.view())?);
    }
    Ok(check("representation_identity", worst, 1e-10, "100 random instances".into()))
}

fn marginal_feasibility(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut unconverged = 0;
    for i in 0..20 {
        let (n, m) = (rng.random_range(4..=32), rng.random_range(4..=32));
        let cost = uniform_matrix(rng, n, m, 0.0, 2.0);
        let cfg = if i % 2 == 0 { SolverConfig::feature_default() } else { SolverConfig::layer_default() };
        let plan = sinkhorn::solve_with_mode(cost.view(), sinkhorn::uniform(n).view(), sinkhorn::uniform(m).view(), &cfg)?;
        if plan.converged {
            worst = worst.max(plan.marginal_violation() / cfg.tol);
        } else {
            unconverged += 1;
        }
    }
    let mut c = check(
        "marginal_feasibility",
        worst,
        1.0,
        format!("violation / tol over 20 problems, {unconverged} hit the iteration cap"),
    );
    c.passed &= unconverged == 0;
    Ok(c)
}

/// Dyadic entries keep every product and sum exact, so linearity in alpha
/// must hold with no rounding at all.
fn dyadic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || f64::from(rng.random_range(-64i32..=64)) / 16.0)
}

fn alpha_linearity(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (r, c) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let target = Linear {
            weight: dyadic(rng, r, c),
            bias: None,
        };
        let term = TransportedTerm {
            weight: 1.0,
            operator: dyadic(rng, r, c),
            bias: None,
        };
        let k = rng.random_range(0..=r);
        let mask = fusion::select_topk(Array1::from_shape_simple_fn(r, || rng.random::<f64>()).view(), k);
        let full = fusion::fuse_layer(&target, std::slice::from_ref(&term), &mask, 1.0)?.0.weight - &target.weight;
        for alpha in [0.25, 0.5, 1.0] {
            let part = fusion::fuse_layer(&target, std::slice::from_ref(&term), &mask, alpha)?.0.weight - &target.weight;
            for (p, f) in part.iter().zip(full.iter()) {
                worst = worst.max((p - alpha * f).abs());
            }
        }
    }
    Ok(check("alpha_linearity", worst, 0.0, "alpha in {0.25, 0.5, 1}, exact".into()))
}

fn no_touch(rng: &mut ChaCha8Rng, fault: bool) -> Result<CheckResult> {
    let mut touched = 0usize;
    for trial in 0..10 {
        let (r, c) = (rng.random_range(2..=16), rng.random_range(1..=16));
        let target = Linear {
            weight: uniform_matrix(rng, r, c, -1.0, 1.0),
            bias: Some(Array1::from_shape_simple_fn(r, || rng.random_range(-1.0..1.0))),
        };
        let term = TransportedTerm {
            weight: 1.0,
            operator: uniform_matrix(rng, r, c, -1.0, 1.0),
            bias: Some(Array1::from_shape_simple_fn(r, || rng.random_range(-1.0..1.0))),
        };
        let scores = Array1::from_shape_simple_fn(r, || rng.random::<f64>());
        let mask = fusion::select_topk(scores.view(), r / 2);
        let mut applied = mask.clone();
        if fault && trial == 0 {
            // flip one bit: fuse a row the checker believes is outside the mask
            let outside = (0..r).find(|i| !mask.contains(*i)).expect("mask leaves a row free");
            applied = NeuronMask::new([mask.indices.clone(), vec![outside]].concat(), r)?;
        }
        let fused = fusion::fuse_layer(&target, &[term], &applied, 0.7)?.0;
        for i in (0..r).filter(|i| !mask.contains(*i)) {
            let same_w = fused
                .weight
                .row(i)
                .iter()
                .zip(target.weight.row(i))
                .all(|(a, b)| a.to_bits() == b.to_bits());
            let same_b = fused.bias.as_ref().unwrap()[i].to_bits() == target.bias.as_ref().unwrap()[i].to_bits();
            if !(same_w && same_b) {
                touched += 1;
            }
        }
    }
    Ok(check("no_touch", touched as f64, 0.0, "rows outside the mask changed".into()))
}

fn freezing(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let (r, c, t) = (4, 3, 16);
    let entry = ResidualEntry {
        base: Linear {
            weight: uniform_matrix(rng, r, c, -1.0, 1.0),
            bias: Some(Array1::zeros(r)),
        },
        delta: uniform_matrix(rng, r, c, -1.0, 1.0),
        delta_bias: Some(Array1::from_shape_simple_fn(r, || rng.random_range(-1.0..1.0))),
        mask: NeuronMask::new(vec![0, 2], r)?,
        alpha: 0.3,
    };
    let x = uniform_matrix(rng, t, c, -1.0, 1.0);
    let y = uniform_matrix(rng, t, r, -1.0, 1.0);
    let mut cur = entry.clone();
    for _ in 0..25 {
        cur = toy::frozen_step_entry(&cur, x.view(), y.view(), 0.05)?.0;
    }
    let bytes = |e: &ResidualEntry| -> Vec<u8> {
        e.delta
            .iter()
            .chain(e.delta_bias.iter().flatten())
            .flat_map(|v| v.to_le_bytes())
            .chain(e.mask.indices.iter().flat_map(|i| i.to_le_bytes()))
            .chain(e.alpha.to_le_bytes())
            .collect()
    };
    let changed = bytes(&entry).iter().zip(bytes(&cur).iter()).filter(|(a, b)| a != b).count();
    Ok(check("freezing", changed as f64, 0.0, "residual, mask and alpha bytes changed after 25 steps".into()))
}

fn gradient(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let (r, c, t) = (4, 3, 8);
    let entry = ResidualEntry {
        base: Linear {
            weight: uniform_matrix(rng, r, c, -1.0, 1.0),
            bias: None,
        },
        delta: uniform_matrix(rng, r, c, -1.0, 1.0),
        delta_bias: None,
        mask: NeuronMask::new(vec![1, 3], r)?,
        alpha: 0.5,
    };
    let x = uniform_matrix(rng, t, c, -1.0, 1.0);
    let y = uniform_matrix(rng, t, r, -1.0, 1.0);
    let g = toy::frozen_gradient(&entry, x.view(), y.view())?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..r {
        for j in 0..c {
            let mut plus = entry.clone();
            plus.base.weight[[i, j]] += h;
            let mut minus = entry.clone();
            minus.base.weight[[i, j]] -= h;
            let fd = (toy::toy_loss(&plus, x.view(), y.view())? - toy::toy_loss(&minus, x.view(), y.view())?) / (2.0 * h);
            let rel = (fd - g.weight[[i, j]]).abs() / g.weight[[i, j]].abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(check("gradient", worst, 1e-6, "relative error vs central differences".into()))
}

fn planted_recovery(seed: u64) -> Result<CheckResult> {
    let spec = ToyModelSpec {
        modules: vec![ModuleKind::MlpIn, ModuleKind::MlpOut],
        ffn_dims: Some(vec![16]),
        samples: 128,
        ..ToyModelSpec::new(vec![8, 8], seed)
    };
    let case = toy::planted_permutation_case(&PlantedScenario {
        plant_seed: seed.wrapping_add(1),
        ..PlantedScenario::new(spec.clone())
    })?;
    let x = toy::toy_inputs(spec.samples, 8, seed.wrapping_add(2));
    let src = toy::run_activations(&case.source, x.view())?;
    let tgt = toy::run_activations(&case.target, x.view())?;
    let cfg = SolverConfig {
        epsilon: 0.01,
        ..SolverConfig::feature_default()
    };
    let plans = crate::hierarchy::feature_plans(&tgt, &src, &Default::default(), &cfg)?;
    let mut misses = 0.0;
    for (key, plan) in &plans.plans {
        let truth = case.truth.feature_map(key.target_layer, key.module, key.side, true);
        misses += (1.0 - toy::argmax_accuracy(plan.plan.view(), truth)) * truth.len() as f64;
    }
    Ok(check("planted_recovery", misses, 0.0, "rows whose argmax misses the planted match".into()))
}

/// Runs every check with instances drawn from `seed`. With `fault_inject`
/// one mask bit is flipped inside the no-touch check, which must then fail.
pub fn run_verify(seed: u64, fault_inject: bool) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks = vec![
        representation_identity(&mut rng)?,
        marginal_feasibility(&mut rng)?,
        alpha_linearity(&mut rng)?,
        no_touch(&mut rng, fault_inject)?,
        freezing(&mut rng)?,
        gradient(&mut rng)?,
        planted_recovery(seed)?,
    ];
    Ok(VerifyReport {
        seed,
        fault_injected: fault_inject,
        checks,
    })
}
