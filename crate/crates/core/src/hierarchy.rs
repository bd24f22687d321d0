//! Two-level transport: feature plans per (target layer, source layer, module,
//! side), aggregated into layer costs, solved again at layer level, and
//! combined into the effective layer correspondence.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sinkhorn::{self, SolverConfig, TransportPlan};
use crate::stats::{self, CostMatrix};
use crate::tensor_store::{ActivationSet, ModelManifest, ModuleKind, Side};

/// Cost entries above this trigger adaptive growth of the layer-level eta.
pub const ADAPTIVE_ETA_THRESHOLD: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureKey {
    pub target_layer: usize,
    pub source_layer: usize,
    pub module: ModuleKind,
    pub side: Side,
}

impl std::fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}.{}.{}.{}",
            self.target_layer, self.source_layer, self.module, self.side
        )
    }
}

/// Which modules get aligned. Modules are always paired with the same role
/// on the other model; `modules = None` means every role both models share.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModulePairing {
    #[serde(default)]
    pub modules: Option<Vec<ModuleKind>>,
}

impl ModulePairing {
    fn allows(&self, module: ModuleKind) -> bool {
        self.modules.as_ref().is_none_or(|list| list.contains(&module))
    }

    /// Every (target layer, source layer, module) triple to align.
    pub fn triples(&self, target: &ModelManifest, source: &ModelManifest) -> Vec<(usize, usize, ModuleKind)> {
        let mut out = Vec::new();
        for (l, t_layer) in target.layers.iter().enumerate() {
            for (m, s_layer) in source.layers.iter().enumerate() {
                for &module in t_layer.modules.keys() {
                    if self.allows(module) && s_layer.modules.contains_key(&module) {
                        out.push((l, m, module));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostSet {
    pub costs: BTreeMap<FeatureKey, CostMatrix>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeaturePlanSet {
    pub plans: BTreeMap<FeatureKey, TransportPlan>,
}

impl FeaturePlanSet {
    pub fn get(&self, key: &FeatureKey) -> Result<&TransportPlan> {
        self.plans
            .get(key)
            .ok_or_else(|| Error::MissingInput(format!("feature plan {key}")))
    }
}

/// Correlation costs for every key named by the pairing policy.
pub fn feature_costs(target: &ActivationSet, source: &ActivationSet, pairing: &ModulePairing) -> Result<CostSet> {
    if target.manifest.sample_count != source.manifest.sample_count {
        return Err(Error::Validation(format!(
            "target has {} samples, source has {}",
            target.manifest.sample_count, source.manifest.sample_count
        )));
    }
    let mut keys = Vec::new();
    for (l, m, module) in pairing.triples(&target.manifest, &source.manifest) {
        for side in [Side::Pre, Side::Post] {
            keys.push(FeatureKey {
                target_layer: l,
                source_layer: m,
                module,
                side,
            });
        }
    }
    let costs = keys
        .par_iter()
        .map(|key| {
            let x = target.get(key.target_layer, key.module, key.side)?;
            let y = source.get(key.source_layer, key.module, key.side)?;
            Ok((*key, stats::pearson_cost(x.values.view(), y.values.view())?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(CostSet { costs })
}

/// One entropic OT problem per key with uniform marginals.
pub fn solve_feature_plans(costs: &CostSet, cfg: &SolverConfig) -> Result<FeaturePlanSet> {
    let plans = costs
        .costs
        .par_iter()
        .map(|(key, cost)| {
            let (n, m) = cost.dim();
            let plan = sinkhorn::solve_with_mode(cost.view(), sinkhorn::uniform(n).view(), sinkhorn::uniform(m).view(), cfg)
                .map_err(|e| Error::Side {
                    side: key.side.as_str(),
                    source: Box::new(e),
                })?;
            Ok((*key, plan))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(FeaturePlanSet { plans })
}

pub fn feature_plans(target: &ActivationSet, source: &ActivationSet, pairing: &ModulePairing, cfg: &SolverConfig) -> Result<FeaturePlanSet> {
    solve_feature_plans(&feature_costs(target, source, pairing)?, cfg)
}

/// `C_layer[l, m]` = mean over modules of `<C^{lm}, Q^{lm}>` on one side.
pub fn layer_costs(plans: &FeaturePlanSet, costs: &CostSet, side: Side, target_layers: usize, source_layers: usize) -> Result<Array2<f64>> {
    let mut sums = Array2::<f64>::zeros((target_layers, source_layers));
    let mut counts = Array2::<usize>::zeros((target_layers, source_layers));
    for (key, plan) in plans.plans.iter().filter(|(k, _)| k.side == side) {
        let cost = costs
            .costs
            .get(key)
            .ok_or_else(|| Error::MissingInput(format!("cost matrix {key}")))?;
        if cost.dim() != plan.dim() {
            return Err(Error::Validation(format!(
                "{key}: cost {:?} and plan {:?} differ in shape",
                cost.dim(),
                plan.dim()
            )));
        }
        if key.target_layer >= target_layers || key.source_layer >= source_layers {
            return Err(Error::Validation(format!("{key}: layer index out of range")));
        }
        let inner: f64 = cost.0.iter().zip(plan.plan.iter()).map(|(c, q)| c * q).sum();
        sums[[key.target_layer, key.source_layer]] += inner;
        counts[[key.target_layer, key.source_layer]] += 1;
    }
    for ((l, m), &count) in counts.indexed_iter() {
        if count == 0 {
            return Err(Error::MissingInput(format!(
                "no {side}-side feature plan for target layer {l}, source layer {m}"
            )));
        }
        sums[[l, m]] /= count as f64;
    }
    Ok(sums)
}

/// Eta scaled by `max_cost / 1000` when the largest cost exceeds 1000.
pub fn adaptive_eta(cost: ArrayView2<'_, f64>, eta: f64) -> f64 {
    let max = cost.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > ADAPTIVE_ETA_THRESHOLD {
        eta * (max / ADAPTIVE_ETA_THRESHOLD)
    } else {
        eta
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub cost_pre: Array2<f64>,
    pub cost_post: Array2<f64>,
    pub p_pre: TransportPlan,
    pub p_post: TransportPlan,
    /// Effective correspondence, row-normalized when `row_norm_applied`.
    pub p_eff: Array2<f64>,
    pub row_norm_applied: bool,
    pub eta_pre: f64,
    pub eta_post: f64,
}

impl LayerPlan {
    /// Geometric mean of the two side plans before any normalization.
    pub fn raw_effective(&self) -> Array2<f64> {
        effective_plan(self.p_pre.plan.view(), self.p_post.plan.view())
    }
}

/// Entrywise `sqrt(P_pre * P_post)`.
pub fn effective_plan(p_pre: ArrayView2<'_, f64>, p_post: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = p_pre.to_owned();
    out.zip_mut_with(&p_post, |x, &y| *x = (*x * y).sqrt());
    out
}

pub fn normalize_rows(p: &mut Array2<f64>) {
    for mut row in p.rows_mut() {
        let sum = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        }
    }
}

fn solve_layer_side(cost: &Array2<f64>, cfg: &SolverConfig, side: &'static str) -> Result<(TransportPlan, f64)> {
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Validation(format!("{side} layer cost has non-finite entries")));
    }
    let eta = adaptive_eta(cost.view(), cfg.epsilon);
    let cfg = SolverConfig { epsilon: eta, ..cfg.clone() };
    let (l, m) = cost.dim();
    let plan = sinkhorn::solve_with_mode(cost.view(), sinkhorn::uniform(l).view(), sinkhorn::uniform(m).view(), &cfg)
        .map_err(|e| Error::Side {
            side,
            source: Box::new(e),
        })?;
    Ok((plan, eta))
}

/// Solves pre and post layer OT independently and combines them.
pub fn layer_plan(cost_pre: Array2<f64>, cost_post: Array2<f64>, cfg: &SolverConfig, normalize: bool) -> Result<LayerPlan> {
    if cost_pre.dim() != cost_post.dim() {
        return Err(Error::Validation(format!(
            "pre cost {:?} and post cost {:?} differ in shape",
            cost_pre.dim(),
            cost_post.dim()
        )));
    }
    let (p_pre, eta_pre) = solve_layer_side(&cost_pre, cfg, "pre")?;
    let (p_post, eta_post) = solve_layer_side(&cost_post, cfg, "post")?;
    let mut p_eff = effective_plan(p_pre.plan.view(), p_post.plan.view());
    if normalize {
        normalize_rows(&mut p_eff);
    }
    Ok(LayerPlan {
        cost_pre,
        cost_post,
        p_pre,
        p_post,
        p_eff,
        row_norm_applied: normalize,
        eta_pre,
        eta_post,
    })
}

/// Fraction of total mass held by the `k` largest entries.
pub fn transport_mass_explained(q: ArrayView2<'_, f64>, k: usize) -> f64 {
    if k >= q.len() {
        return 1.0;
    }
    let mut entries: Vec<f64> = q.iter().copied().collect();
    entries.sort_by(|x, y| y.total_cmp(x));
    let total: f64 = entries.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    entries[..k].iter().sum::<f64>() / total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassCurve {
    pub ks: Vec<usize>,
    pub fractions: Vec<f64>,
    pub plan_count: usize,
}

impl MassCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,mass_fraction\n");
        for (k, f) in self.ks.iter().zip(&self.fractions) {
            out.push_str(&format!("{k},{f}\n"));
        }
        out
    }
}

/// Average of [`transport_mass_explained`] over every plan, per `k`.
pub fn mass_curve_report(plans: &FeaturePlanSet, ks: &[usize]) -> Result<MassCurve> {
    mass_curve(plans.plans.values().map(|p| p.plan.view()), ks)
}

pub fn mass_curve<'a>(plans: impl Iterator<Item = ArrayView2<'a, f64>>, ks: &[usize]) -> Result<MassCurve> {
    let plans: Vec<ArrayView2<'a, f64>> = plans.collect();
    if plans.is_empty() {
        return Err(Error::Validation("mass curve needs at least one plan".into()));
    }
    let fractions = ks
        .iter()
        .map(|&k| plans.iter().map(|q| transport_mass_explained(*q, k)).sum::<f64>() / plans.len() as f64)
        .collect();
    Ok(MassCurve {
        ks: ks.to_vec(),
        fractions,
        plan_count: plans.len(),
    })
}

/// Powers of two up to the largest plan size, plus that size itself.
pub fn default_ks(max_entries: usize) -> Vec<usize> {
    let mut ks = vec![0];
    let mut k = 1;
    while k < max_entries {
        ks.push(k);
        k *= 2;
    }
    ks.push(max_entries);
    ks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceEntry {
    pub key: String,
    pub rows: usize,
    pub cols: usize,
    pub converged: bool,
    pub final_violation: f64,
    pub iterations_used: usize,
}

pub fn convergence_entries(plans: &FeaturePlanSet) -> Vec<ConvergenceEntry> {
    plans
        .plans
        .iter()
        .map(|(key, plan)| ConvergenceEntry {
            key: key.to_string(),
            rows: plan.dim().0,
            cols: plan.dim().1,
            converged: plan.converged,
            final_violation: plan.final_violation,
            iterations_used: plan.iterations_used,
        })
        .collect()
}
