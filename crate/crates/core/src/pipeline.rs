//! End-to-end orchestration behind the `otmerge` subcommands.
//!
//! Every artifact is a pure function of the inputs and the config: no
//! timestamps, no absolute output paths, sorted maps throughout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, FusionSettings, NeuronMask, ResidualBundle};
use crate::hierarchy::{self, ConvergenceEntry, FeatureKey, FeaturePlanSet, LayerPlan, MassCurve, ModulePairing};
use crate::sinkhorn::{self, SolverConfig, TransportPlan};
use crate::stats;
use crate::tensor_store::{
    read_container, sha256_hex, write_container, ActivationSet, Container, ModelManifest, ModuleKind, Side,
    TensorRecord, WeightBundle,
};
use crate::toy::{self, PlantedScenario, ToyModelSpec};

pub const PLANS_FILE: &str = "plans.otmb";
pub const PLAN_REPORT_FILE: &str = "plan_report.json";
pub const FUSED_FILE: &str = "fused.otmb";
pub const RESIDUAL_FILE: &str = "residual.otmb";
pub const FUSE_REPORT_FILE: &str = "fuse_report.json";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const MASS_CURVE_FILE: &str = "mass_curve.csv";
pub const ADAPTED_FILE: &str = "adapted.otmb";
pub const ADAPTED_RESIDUAL_FILE: &str = "adapted_residual.otmb";
pub const ADAPT_REPORT_FILE: &str = "adapt_report.json";

/// Largest residual bundle (in base parameters) the adaptation loop accepts.
pub const TOY_PARAMETER_LIMIT: usize = 1 << 20;

pub const ADAPT_INPUTS: &str = "adapt.inputs";
pub const ADAPT_TARGETS: &str = "adapt.targets";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    pub weights: PathBuf,
    pub activations: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub layer: usize,
    pub module: ModuleKind,
    pub steps: usize,
    pub lr: f64,
    /// Container with `adapt.inputs` (T x d_in) and `adapt.targets` (T x d_out).
    pub dataset: Option<PathBuf>,
    /// Residual bundle to adapt; defaults to the fuse output.
    pub residual: Option<PathBuf>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            layer: 0,
            module: ModuleKind::MlpIn,
            steps: 100,
            lr: 0.01,
            dataset: None,
            residual: None,
        }
    }
}

fn default_feature_solver() -> SolverConfig {
    SolverConfig::feature_default()
}

fn default_layer_solver() -> SolverConfig {
    SolverConfig::layer_default()
}

fn default_alpha() -> f64 {
    fusion::DEFAULT_ALPHA
}

fn default_top_k() -> usize {
    fusion::DEFAULT_TOP_K
}

fn default_true() -> bool {
    true
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("otmerge-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub target: ModelPaths,
    pub source: ModelPaths,
    #[serde(default = "default_feature_solver")]
    pub feature_solver: SolverConfig,
    #[serde(default = "default_layer_solver")]
    pub layer_solver: SolverConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub modules: Option<Vec<ModuleKind>>,
    #[serde(default = "default_true")]
    pub scale_coordinate_maps: bool,
    #[serde(default = "default_true")]
    pub normalize_effective_rows: bool,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Ranks at which the mass curve is evaluated; powers of two by default.
    #[serde(default)]
    pub mass_ks: Option<Vec<usize>>,
    #[serde(default)]
    pub adapt: AdaptConfig,
}

impl PipelineConfig {
    pub fn new(target: ModelPaths, source: ModelPaths) -> Self {
        PipelineConfig {
            target,
            source,
            feature_solver: default_feature_solver(),
            layer_solver: default_layer_solver(),
            alpha: default_alpha(),
            top_k: default_top_k(),
            modules: None,
            scale_coordinate_maps: true,
            normalize_effective_rows: true,
            out_dir: default_out_dir(),
            seed: 0,
            mass_ks: None,
            adapt: AdaptConfig::default(),
        }
    }

    /// Reads a config and resolves its relative paths against the config's
    /// own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.target.weights);
        join(&mut self.target.activations);
        join(&mut self.source.weights);
        join(&mut self.source.activations);
        join(&mut self.out_dir);
        if let Some(p) = &mut self.adapt.dataset {
            join(p);
        }
        if let Some(p) = &mut self.adapt.residual {
            join(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_solver.validate()?;
        self.layer_solver.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Validation(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.adapt.lr >= 0.0 && self.adapt.lr.is_finite()) {
            return Err(Error::Validation(format!("adapt.lr {} must be finite and >= 0", self.adapt.lr)));
        }
        for path in [
            &self.target.weights,
            &self.target.activations,
            &self.source.weights,
            &self.source.activations,
        ] {
            if !path.is_file() {
                return Err(Error::MissingInput(format!("container {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn pairing(&self) -> ModulePairing {
        ModulePairing {
            modules: self.modules.clone(),
        }
    }

    pub fn fusion_settings(&self) -> FusionSettings {
        FusionSettings {
            alpha: self.alpha,
            top_k: self.top_k,
            scale_maps: self.scale_coordinate_maps,
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Content hashes of the four input containers, keyed by role.
fn input_hashes(cfg: &PipelineConfig) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (role, path) in [
        ("source_activations", &cfg.source.activations),
        ("source_weights", &cfg.source.weights),
        ("target_activations", &cfg.target.activations),
        ("target_weights", &cfg.target.weights),
    ] {
        out.insert(format!("input.{role}.sha256"), file_hash(path)?);
    }
    Ok(out)
}

/// Everything `plan` produces; also what `fuse` and `analyze` read back.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanArtifacts {
    pub manifest: ModelManifest,
    pub features: FeaturePlanSet,
    pub layer: LayerPlan,
    /// Mean |activation| of each target module's outputs.
    pub scores: BTreeMap<(usize, ModuleKind), Array1<f64>>,
}

fn feature_name(key: &FeatureKey, part: &str) -> String {
    format!("feature.{key}.{part}")
}

fn parse_feature_key(body: &str) -> Result<FeatureKey> {
    let parts: Vec<&str> = body.split('.').collect();
    let bad = || Error::Corruption(format!("malformed feature key {body:?}"));
    if parts.len() != 4 {
        return Err(bad());
    }
    Ok(FeatureKey {
        target_layer: parts[0].parse().map_err(|_| bad())?,
        source_layer: parts[1].parse().map_err(|_| bad())?,
        module: parts[2].parse().map_err(|_| bad())?,
        side: parts[3].parse().map_err(|_| bad())?,
    })
}

fn plan_status(plan: &TransportPlan) -> Array1<f64> {
    Array1::from(vec![
        f64::from(u8::from(plan.converged)),
        plan.final_violation,
        plan.iterations_used as f64,
    ])
}

fn plan_from_parts(plan: Array2<f64>, status: &TensorRecord) -> Result<TransportPlan> {
    let s = status.to_vector()?;
    if s.len() != 3 {
        return Err(Error::Corruption(format!("{} has {} entries, expected 3", status.name, s.len())));
    }
    let (n, m) = plan.dim();
    Ok(TransportPlan {
        plan,
        row_marginal: sinkhorn::uniform(n),
        col_marginal: sinkhorn::uniform(m),
        converged: s[0] != 0.0,
        final_violation: s[1],
        iterations_used: s[2] as usize,
        recent_violations: Vec::new(),
    })
}

impl PlanArtifacts {
    pub fn to_records(&self) -> Vec<TensorRecord> {
        let mut records = Vec::new();
        for (key, plan) in &self.features.plans {
            records.push(TensorRecord::from_matrix(feature_name(key, "plan"), &plan.plan));
            records.push(TensorRecord::from_vector(feature_name(key, "status"), &plan_status(plan)));
        }
        let lp = &self.layer;
        records.push(TensorRecord::from_matrix("layer_plan.cost_pre", &lp.cost_pre));
        records.push(TensorRecord::from_matrix("layer_plan.cost_post", &lp.cost_post));
        records.push(TensorRecord::from_matrix("layer_plan.p_pre", &lp.p_pre.plan));
        records.push(TensorRecord::from_matrix("layer_plan.p_post", &lp.p_post.plan));
        records.push(TensorRecord::from_matrix("layer_plan.p_eff", &lp.p_eff));
        records.push(TensorRecord::from_vector("layer_plan.status_pre", &plan_status(&lp.p_pre)));
        records.push(TensorRecord::from_vector("layer_plan.status_post", &plan_status(&lp.p_post)));
        records.push(TensorRecord::from_vector(
            "layer_plan.settings",
            &Array1::from(vec![lp.eta_pre, lp.eta_post, f64::from(u8::from(lp.row_norm_applied))]),
        ));
        for (&(l, module), s) in &self.scores {
            records.push(TensorRecord::from_vector(format!("score.{l}.{module}"), s));
        }
        records
    }

    pub fn from_container(container: &Container) -> Result<Self> {
        let mut features = BTreeMap::new();
        let mut scores = BTreeMap::new();
        for record in &container.records {
            if let Some(rest) = record.name.strip_prefix("feature.") {
                if let Some(body) = rest.strip_suffix(".plan") {
                    let key = parse_feature_key(body)?;
                    let status = container.require(&feature_name(&key, "status"))?;
                    features.insert(key, plan_from_parts(record.to_matrix()?, status)?);
                }
            } else if let Some(rest) = record.name.strip_prefix("score.") {
                let bad = || Error::Corruption(format!("malformed score name {:?}", record.name));
                let (l, module) = rest.split_once('.').ok_or_else(bad)?;
                scores.insert((l.parse().map_err(|_| bad())?, module.parse().map_err(|_| bad())?), record.to_vector()?);
            }
        }
        let m = |name: &str| container.require(name).and_then(TensorRecord::to_matrix);
        let settings = container.require("layer_plan.settings")?.to_vector()?;
        if settings.len() != 3 {
            return Err(Error::Corruption("layer_plan.settings must hold 3 entries".into()));
        }
        let layer = LayerPlan {
            cost_pre: m("layer_plan.cost_pre")?,
            cost_post: m("layer_plan.cost_post")?,
            p_pre: plan_from_parts(m("layer_plan.p_pre")?, container.require("layer_plan.status_pre")?)?,
            p_post: plan_from_parts(m("layer_plan.p_post")?, container.require("layer_plan.status_post")?)?,
            p_eff: m("layer_plan.p_eff")?,
            row_norm_applied: settings[2] != 0.0,
            eta_pre: settings[0],
            eta_post: settings[1],
        };
        Ok(PlanArtifacts {
            manifest: container.manifest.clone(),
            features: FeaturePlanSet { plans: features },
            layer,
            scores,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        PlanArtifacts::from_container(&read_container(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlanSummary {
    pub eta_pre: f64,
    pub eta_post: f64,
    pub converged_pre: bool,
    pub converged_post: bool,
    pub violation_pre: f64,
    pub violation_post: f64,
    pub row_norm_applied: bool,
    pub p_eff: Vec<Vec<f64>>,
    pub row_argmax: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub target_model: String,
    pub source_model: String,
    pub inputs: BTreeMap<String, String>,
    pub feature_solver: SolverConfig,
    pub layer_solver: SolverConfig,
    pub feature_plans: Vec<ConvergenceEntry>,
    pub unconverged: usize,
    pub layer_plan: LayerPlanSummary,
}

impl PlanReport {
    pub fn summary(&self) -> String {
        format!(
            "plan: {} feature plans ({} unconverged), layer plan {}x{}, row argmax {:?}",
            self.feature_plans.len(),
            self.unconverged,
            self.layer_plan.p_eff.len(),
            self.layer_plan.p_eff.first().map_or(0, Vec::len),
            self.layer_plan.row_argmax
        )
    }
}

fn rows_of(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Solves feature and layer transport from the two activation sets.
pub fn compute_plans(target: &ActivationSet, source: &ActivationSet, cfg: &PipelineConfig) -> Result<(PlanArtifacts, Vec<ConvergenceEntry>)> {
    let pairing = cfg.pairing();
    let costs = hierarchy::feature_costs(target, source, &pairing)?;
    if costs.costs.is_empty() {
        return Err(Error::Validation("the two models share no alignable modules".into()));
    }
    let features = hierarchy::solve_feature_plans(&costs, &cfg.feature_solver)?;
    let (l_count, m_count) = (target.manifest.num_layers, source.manifest.num_layers);
    let cost_pre = hierarchy::layer_costs(&features, &costs, Side::Pre, l_count, m_count)?;
    let cost_post = hierarchy::layer_costs(&features, &costs, Side::Post, l_count, m_count)?;
    let layer = hierarchy::layer_plan(cost_pre, cost_post, &cfg.layer_solver, cfg.normalize_effective_rows)?;

    let mut scores = BTreeMap::new();
    for (l, layer_manifest) in target.manifest.layers.iter().enumerate() {
        for &module in layer_manifest.modules.keys() {
            if let Ok(acts) = target.get(l, module, Side::Post) {
                scores.insert((l, module), stats::activation_strength(acts.values.view())?.0);
            }
        }
    }
    let entries = hierarchy::convergence_entries(&features);
    Ok((
        PlanArtifacts {
            manifest: target.manifest.clone(),
            features,
            layer,
            scores,
        },
        entries,
    ))
}

pub fn cmd_plan(cfg: &PipelineConfig) -> Result<PlanReport> {
    cfg.validate()?;
    let target = ActivationSet::read(&cfg.target.activations)?;
    let source = ActivationSet::read(&cfg.source.activations)?;
    let (mut artifacts, entries) = compute_plans(&target, &source, cfg)?;
    let inputs = input_hashes(cfg)?;
    artifacts.manifest.attributes.extend(inputs.clone());
    artifacts
        .manifest
        .attributes
        .insert("source_model".into(), source.manifest.model_id.clone());

    ensure_dir(&cfg.out_dir)?;
    write_container(&artifacts.to_records(), &artifacts.manifest, &cfg.out_dir.join(PLANS_FILE))?;

    let lp = &artifacts.layer;
    let report = PlanReport {
        target_model: target.manifest.model_id.clone(),
        source_model: source.manifest.model_id.clone(),
        inputs,
        feature_solver: cfg.feature_solver.clone(),
        layer_solver: cfg.layer_solver.clone(),
        unconverged: entries.iter().filter(|e| !e.converged).count(),
        feature_plans: entries,
        layer_plan: LayerPlanSummary {
            eta_pre: lp.eta_pre,
            eta_post: lp.eta_post,
            converged_pre: lp.p_pre.converged,
            converged_post: lp.p_post.converged,
            violation_pre: lp.p_pre.final_violation,
            violation_post: lp.p_post.final_violation,
            row_norm_applied: lp.row_norm_applied,
            p_eff: rows_of(&lp.p_eff),
            row_argmax: sinkhorn::row_argmax(lp.p_eff.view()),
        },
    };
    write_json(&cfg.out_dir.join(PLAN_REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleFusionReport {
    pub layer: usize,
    pub module: ModuleKind,
    pub mask_size: usize,
    pub d_out: usize,
    pub alpha: f64,
    pub residual_norm: f64,
    pub applied_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseReport {
    pub alpha: f64,
    pub top_k: usize,
    pub scale_coordinate_maps: bool,
    pub modules: Vec<ModuleFusionReport>,
}

impl FuseReport {
    pub fn summary(&self) -> String {
        let touched: usize = self.modules.iter().map(|m| m.mask_size).sum();
        format!(
            "fuse: {} modules, {} output rows replaced, alpha {}",
            self.modules.len(),
            touched,
            self.alpha
        )
    }
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Top-k output masks from the stored activation scores.
pub fn masks_from_scores(scores: &BTreeMap<(usize, ModuleKind), Array1<f64>>, k: usize) -> BTreeMap<(usize, ModuleKind), NeuronMask> {
    scores
        .iter()
        .map(|(&key, s)| (key, fusion::select_topk(s.view(), k)))
        .collect()
}

pub fn fuse_with_plans(target: &WeightBundle, source: &WeightBundle, plans: &PlanArtifacts, settings: &FusionSettings) -> Result<ResidualBundle> {
    let masks = masks_from_scores(&plans.scores, settings.top_k);
    fusion::fuse_models(target, source, &plans.features, plans.layer.p_eff.view(), &masks, settings)
}

fn check_plan_inputs(plans: &PlanArtifacts, cfg: &PipelineConfig) -> Result<()> {
    let current = input_hashes(cfg)?;
    for (key, hash) in &current {
        match plans.manifest.attributes.get(key) {
            Some(recorded) if recorded == hash => {}
            Some(_) => {
                return Err(Error::Consistency(format!(
                    "plan artifacts are stale: {key} changed since planning"
                )))
            }
            None => return Err(Error::Consistency(format!("plan artifacts do not record {key}"))),
        }
    }
    Ok(())
}

pub fn cmd_fuse(cfg: &PipelineConfig) -> Result<FuseReport> {
    cfg.validate()?;
    let plans = PlanArtifacts::read(&cfg.out_dir.join(PLANS_FILE))?;
    check_plan_inputs(&plans, cfg)?;
    let target = WeightBundle::read(&cfg.target.weights)?;
    let source = WeightBundle::read(&cfg.source.weights)?;
    let settings = cfg.fusion_settings();
    let residual = fuse_with_plans(&target, &source, &plans, &settings)?;
    let fused = fusion::fold(&residual);

    ensure_dir(&cfg.out_dir)?;
    fused.write(&cfg.out_dir.join(FUSED_FILE))?;
    residual.write(&cfg.out_dir.join(RESIDUAL_FILE))?;
    let report = FuseReport {
        alpha: settings.alpha,
        top_k: settings.top_k,
        scale_coordinate_maps: settings.scale_maps,
        modules: residual
            .entries
            .iter()
            .map(|(&(layer, module), e)| ModuleFusionReport {
                layer,
                module,
                mask_size: e.mask.len(),
                d_out: e.mask.d_out,
                alpha: e.alpha,
                residual_norm: frobenius(&e.delta),
                applied_norm: frobenius(&e.increment()),
            })
            .collect(),
    };
    write_json(&cfg.out_dir.join(FUSE_REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub curve: MassCurve,
    pub per_module: BTreeMap<String, Vec<f64>>,
}

impl AnalysisReport {
    pub fn summary(&self) -> String {
        let pick = |k: usize| {
            self.curve
                .ks
                .iter()
                .position(|&x| x == k)
                .map(|i| format!("k={k}: {:.4}", self.curve.fractions[i]))
        };
        let mut parts: Vec<String> = [1, 8, 64].into_iter().filter_map(pick).collect();
        parts.insert(0, format!("{} plans", self.curve.plan_count));
        format!("analyze: {}", parts.join(", "))
    }
}

/// Mass-explained curve averaged over all feature plans, plus per-module
/// averages on the same ranks.
pub fn analyze(plans: &FeaturePlanSet, ks: Option<&[usize]>) -> Result<AnalysisReport> {
    let max = plans.plans.values().map(|p| p.plan.len()).max().unwrap_or(0);
    let ks = ks.map_or_else(|| hierarchy::default_ks(max), <[usize]>::to_vec);
    let curve = hierarchy::mass_curve_report(plans, &ks)?;
    let mut per_module = BTreeMap::new();
    for module in ModuleKind::ALL {
        let views = plans.plans.iter().filter(|(k, _)| k.module == module).map(|(_, p)| p.plan.view());
        if let Ok(c) = hierarchy::mass_curve(views, &ks) {
            per_module.insert(module.to_string(), c.fractions);
        }
    }
    Ok(AnalysisReport { curve, per_module })
}

pub fn cmd_analyze(plans_path: &Path, out_dir: &Path, ks: Option<&[usize]>) -> Result<AnalysisReport> {
    let plans = PlanArtifacts::read(plans_path)?;
    let report = analyze(&plans.features, ks)?;
    ensure_dir(out_dir)?;
    write_json(&out_dir.join(ANALYSIS_FILE), &report)?;
    let path = out_dir.join(MASS_CURVE_FILE);
    fs::write(&path, report.curve.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub layer: usize,
    pub module: ModuleKind,
    pub steps: usize,
    pub lr: f64,
    /// Loss before each step, then the final loss.
    pub losses: Vec<f64>,
    pub delta_sha256_before: String,
    pub delta_sha256_after: String,
}

impl AdaptReport {
    pub fn summary(&self) -> String {
        format!(
            "adapt: layer {} {} for {} steps, loss {:.6e} -> {:.6e}, residual {}",
            self.layer,
            self.module,
            self.steps,
            self.losses.first().copied().unwrap_or(f64::NAN),
            self.losses.last().copied().unwrap_or(f64::NAN),
            if self.delta_sha256_before == self.delta_sha256_after { "frozen" } else { "CHANGED" }
        )
    }
}

fn delta_bytes(bundle: &ResidualBundle) -> Vec<u8> {
    let mut bytes = Vec::new();
    for e in bundle.entries.values() {
        for v in &e.delta {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(db) = &e.delta_bias {
            for v in db {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    bytes
}

/// Runs residual-frozen gradient steps on one module of `bundle`.
pub fn adapt_bundle(bundle: &ResidualBundle, dataset: &Container, adapt: &AdaptConfig) -> Result<(ResidualBundle, AdaptReport)> {
    let params = bundle.parameter_count();
    if params > TOY_PARAMETER_LIMIT {
        return Err(Error::UnsupportedScale(format!(
            "bundle has {params} parameters; adaptation is limited to {TOY_PARAMETER_LIMIT}"
        )));
    }
    let key = (adapt.layer, adapt.module);
    let mut entry = bundle
        .entries
        .get(&key)
        .cloned()
        .ok_or_else(|| Error::MissingInput(format!("residual entry layer {} {}", adapt.layer, adapt.module)))?;
    let x = dataset.require(ADAPT_INPUTS)?.to_matrix()?;
    let y = dataset.require(ADAPT_TARGETS)?.to_matrix()?;
    let before = sha256_hex(&delta_bytes(bundle));
    let mut losses = Vec::with_capacity(adapt.steps + 1);
    for _ in 0..adapt.steps {
        let (next, loss) = toy::frozen_step_entry(&entry, x.view(), y.view(), adapt.lr)?;
        losses.push(loss);
        entry = next;
    }
    losses.push(toy::toy_loss(&entry, x.view(), y.view())?);
    let mut adapted = bundle.clone();
    adapted.entries.insert(key, entry);
    let report = AdaptReport {
        layer: adapt.layer,
        module: adapt.module,
        steps: adapt.steps,
        lr: adapt.lr,
        losses,
        delta_sha256_before: before,
        delta_sha256_after: sha256_hex(&delta_bytes(&adapted)),
    };
    Ok((adapted, report))
}

pub fn cmd_adapt(cfg: &PipelineConfig) -> Result<AdaptReport> {
    let residual_path = cfg.adapt.residual.clone().unwrap_or_else(|| cfg.out_dir.join(RESIDUAL_FILE));
    let dataset_path = cfg
        .adapt
        .dataset
        .clone()
        .ok_or_else(|| Error::MissingInput("adapt.dataset is not set".into()))?;
    let bundle = ResidualBundle::read(&residual_path)?;
    let dataset = read_container(&dataset_path)?;
    let (adapted, report) = adapt_bundle(&bundle, &dataset, &cfg.adapt)?;
    ensure_dir(&cfg.out_dir)?;
    adapted.write(&cfg.out_dir.join(ADAPTED_RESIDUAL_FILE))?;
    fusion::fold(&adapted).write(&cfg.out_dir.join(ADAPTED_FILE))?;
    write_json(&cfg.out_dir.join(ADAPT_REPORT_FILE), &report)?;
    Ok(report)
}

fn default_input_seed() -> u64 {
    1
}

/// Input of `gen-toy`: a planted scenario plus the calibration input seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyRunConfig {
    pub scenario: PlantedScenario,
    #[serde(default = "default_input_seed")]
    pub input_seed: u64,
    #[serde(default)]
    pub adapt: AdaptConfig,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        let source = ToyModelSpec {
            model_id: "toy-source".into(),
            ffn_dims: Some(vec![32, 32]),
            bias: true,
            ..ToyModelSpec::new(vec![16, 16, 16], 0)
        };
        ToyRunConfig {
            scenario: PlantedScenario {
                noise: 0.05,
                ..PlantedScenario::new(source)
            },
            input_seed: default_input_seed(),
            adapt: AdaptConfig::default(),
        }
    }
}

impl ToyRunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenToyReport {
    pub files: Vec<String>,
    pub source_parameters: usize,
    pub target_parameters: usize,
}

impl GenToyReport {
    pub fn summary(&self) -> String {
        format!(
            "gen-toy: wrote {} ({} source / {} target parameters)",
            self.files.join(", "),
            self.source_parameters,
            self.target_parameters
        )
    }
}

pub const TOY_CONFIG_FILE: &str = "pipeline.json";

/// Writes a planted source/target pair, their activations, the ground truth,
/// an adaptation dataset and a ready-to-run pipeline config into `out`.
pub fn cmd_gen_toy(run: &ToyRunConfig, out: &Path) -> Result<GenToyReport> {
    let case = toy::planted_permutation_case(&run.scenario)?;
    let spec = &run.scenario.source;
    let inputs = toy::toy_inputs(spec.samples, spec.dims[0], run.input_seed);
    let source_acts = toy::run_activations(&case.source, inputs.view())?;
    let target_acts = toy::run_activations(&case.target, inputs.view())?;

    let adapt = &run.adapt;
    let clean = toy::conjugated_source(&case, adapt.layer, adapt.module)?;
    let x = target_acts.get(adapt.layer, adapt.module, Side::Pre)?.values.clone();
    let mut y = x.dot(&clean.t());
    if let Some(b) = &case.source.get(adapt.layer, adapt.module)?.bias {
        let has_pair = case.source.manifest.dims(adapt.layer, ModuleKind::MlpIn).is_some()
            && case.source.manifest.dims(adapt.layer, ModuleKind::MlpOut).is_some();
        let perm = case.truth.feature_map(adapt.layer, adapt.module, Side::Post, has_pair);
        let pb: Array1<f64> = perm.iter().map(|&j| b[j]).collect();
        y += &pb;
    }
    let mut data_manifest = case.target.manifest.clone();
    data_manifest.attributes.insert("artifact".into(), "adapt_dataset".into());

    ensure_dir(out)?;
    let files = [
        "source.weights.otmb",
        "source.acts.otmb",
        "target.weights.otmb",
        "target.acts.otmb",
        "adapt_data.otmb",
        "truth.json",
        TOY_CONFIG_FILE,
    ];
    case.source.write(&out.join(files[0]))?;
    source_acts.write(&out.join(files[1]))?;
    case.target.write(&out.join(files[2]))?;
    target_acts.write(&out.join(files[3]))?;
    write_container(
        &[
            TensorRecord::from_matrix(ADAPT_INPUTS, &x),
            TensorRecord::from_matrix(ADAPT_TARGETS, &y),
        ],
        &data_manifest,
        &out.join(files[4]),
    )?;
    write_json(&out.join(files[5]), &case.truth)?;

    let mut cfg = PipelineConfig::new(
        ModelPaths {
            weights: "target.weights.otmb".into(),
            activations: "target.acts.otmb".into(),
        },
        ModelPaths {
            weights: "source.weights.otmb".into(),
            activations: "source.acts.otmb".into(),
        },
    );
    cfg.out_dir = "run".into();
    cfg.seed = spec.seed;
    cfg.adapt = AdaptConfig {
        dataset: Some("adapt_data.otmb".into()),
        ..adapt.clone()
    };
    write_json(&out.join(files[6]), &cfg)?;
    Ok(GenToyReport {
        files: files.iter().map(|f| f.to_string()).collect(),
        source_parameters: case.source.parameter_count(),
        target_parameters: case.target.parameter_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_key_names_round_trip() {
        let key = FeatureKey {
            target_layer: 3,
            source_layer: 12,
            module: ModuleKind::MlpOut,
            side: Side::Post,
        };
        let name = feature_name(&key, "plan");
        assert_eq!(name, "feature.3.12.mlp_out.post.plan");
        assert_eq!(parse_feature_key("3.12.mlp_out.post").unwrap(), key);
        assert!(parse_feature_key("3.x.mlp_out.post").is_err());
    }

    #[test]
    fn config_defaults_fill_in() {
        let cfg: PipelineConfig = serde_json::from_str(
            r#"{"target":{"weights":"a","activations":"b"},"source":{"weights":"c","activations":"d"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.top_k, 128);
        assert_eq!(cfg.feature_solver, SolverConfig::feature_default());
        assert_eq!(cfg.layer_solver, SolverConfig::layer_default());
        assert!(cfg.scale_coordinate_maps && cfg.normalize_effective_rows);
        let bad = serde_json::from_str::<PipelineConfig>(
            r#"{"target":{"weights":"a","activations":"b"},"source":{"weights":"c","activations":"d"},"alhpa":1}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut cfg = PipelineConfig::new(
            ModelPaths {
                weights: "w.otmb".into(),
                activations: "/abs/a.otmb".into(),
            },
            ModelPaths {
                weights: "sw.otmb".into(),
                activations: "sa.otmb".into(),
            },
        );
        cfg.resolve_paths(Path::new("/cfg"));
        assert_eq!(cfg.target.weights, PathBuf::from("/cfg/w.otmb"));
        assert_eq!(cfg.target.activations, PathBuf::from("/abs/a.otmb"));
        assert_eq!(cfg.out_dir, PathBuf::from("/cfg/otmerge-out"));
    }
}
