//! Small synthetic models with planted ground truth, and the residual-frozen
//! adaptation loop on single affine layers.
//!
//! A toy layer is a stack of the projection roles that are present:
//!
//! ```text
//! q = W_q x,  k = W_k x                (side projections, d -> d)
//! a = x + W_v x                        (or a = x without v_proj)
//! y = W_out act(W_in a)                (linear if only one mlp module)
//! ```
//!
//! There is no attention mixing; alignment only consumes projection
//! activations.

use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ResidualBundle, ResidualEntry};
use crate::tensor_store::{
    ActivationSet, LayerManifest, Linear, ModelManifest, ModuleDims, ModuleKind, Side, WeightBundle,
};

const NONLINEARITY_ATTR: &str = "nonlinearity";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Tanh,
    Relu,
}

impl Nonlinearity {
    pub fn as_str(self) -> &'static str {
        match self {
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Relu => "relu",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Relu => x.max(0.0),
        }
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Nonlinearity::Tanh),
            "relu" => Ok(Nonlinearity::Relu),
            _ => Err(Error::Validation(format!("unknown nonlinearity {s:?}"))),
        }
    }
}

fn default_modules() -> Vec<ModuleKind> {
    ModuleKind::ALL.to_vec()
}

fn default_samples() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelSpec {
    #[serde(default = "default_model_id")]
    pub model_id: String,
    /// Residual widths at the `num_layers + 1` layer boundaries.
    pub dims: Vec<usize>,
    /// Hidden width of each layer's MLP; defaults to the layer's input width.
    #[serde(default)]
    pub ffn_dims: Option<Vec<usize>>,
    #[serde(default = "default_modules")]
    pub modules: Vec<ModuleKind>,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bias: bool,
    /// Calibration samples recorded in the manifest.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_model_id() -> String {
    "toy".into()
}

impl ToyModelSpec {
    pub fn new(dims: Vec<usize>, seed: u64) -> Self {
        ToyModelSpec {
            model_id: default_model_id(),
            dims,
            ffn_dims: None,
            modules: default_modules(),
            nonlinearity: Nonlinearity::Tanh,
            seed,
            bias: false,
            samples: default_samples(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    fn has(&self, m: ModuleKind) -> bool {
        self.modules.contains(&m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::Validation("toy spec needs at least two boundary dims".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::Validation("toy dims must be at least 1".into()));
        }
        if let Some(f) = &self.ffn_dims {
            if f.len() != self.num_layers() || f.contains(&0) {
                return Err(Error::Validation(format!(
                    "ffn_dims needs {} positive entries",
                    self.num_layers()
                )));
            }
        }
        if self.samples < 2 {
            return Err(Error::Validation("toy spec needs at least 2 samples".into()));
        }
        if !self.has(ModuleKind::MlpIn) && !self.has(ModuleKind::MlpOut) {
            for l in 0..self.num_layers() {
                if self.dims[l] != self.dims[l + 1] {
                    return Err(Error::Validation(format!(
                        "layer {l} changes width {} -> {} without an mlp module",
                        self.dims[l],
                        self.dims[l + 1]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Result<ModelManifest> {
        self.validate()?;
        let mut layers = Vec::new();
        for l in 0..self.num_layers() {
            let (d, d_next) = (self.dims[l], self.dims[l + 1]);
            let both = self.has(ModuleKind::MlpIn) && self.has(ModuleKind::MlpOut);
            let hidden = match &self.ffn_dims {
                Some(f) if both => f[l],
                _ if both => d,
                _ => 0,
            };
            let mut modules = BTreeMap::new();
            for &m in &self.modules {
                let dims = match m {
                    ModuleKind::QProj | ModuleKind::KProj | ModuleKind::VProj => ModuleDims { d_in: d, d_out: d },
                    ModuleKind::MlpIn if both => ModuleDims { d_in: d, d_out: hidden },
                    ModuleKind::MlpOut if both => ModuleDims { d_in: hidden, d_out: d_next },
                    ModuleKind::MlpIn | ModuleKind::MlpOut => ModuleDims { d_in: d, d_out: d_next },
                };
                modules.insert(m, dims);
            }
            layers.push(LayerManifest { modules });
        }
        let mut attributes = BTreeMap::new();
        attributes.insert(NONLINEARITY_ATTR.to_string(), self.nonlinearity.as_str().to_string());
        Ok(ModelManifest {
            model_id: self.model_id.clone(),
            num_layers: self.num_layers(),
            layers,
            sample_count: self.samples,
            attributes,
        })
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Weights with i.i.d. `N(0, 1/d_in)` entries, drawn in (layer, module) order.
pub fn generate_toy(spec: &ToyModelSpec) -> Result<WeightBundle> {
    let manifest = spec.manifest()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut modules = BTreeMap::new();
    for (l, layer) in manifest.layers.iter().enumerate() {
        for (&m, dims) in &layer.modules {
            let scale = 1.0 / (dims.d_in as f64).sqrt();
            let weight = gaussian_matrix(&mut rng, dims.d_out, dims.d_in, scale);
            let bias = spec.bias.then(|| gaussian_vector(&mut rng, dims.d_out, scale));
            modules.insert((l, m), Linear { weight, bias });
        }
    }
    let bundle = WeightBundle { manifest, modules };
    bundle.validate()?;
    Ok(bundle)
}

/// `T x d_0` standard normal calibration inputs.
pub fn toy_inputs(samples: usize, d0: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_matrix(&mut rng, samples, d0, 1.0)
}

fn checked_project(x: ArrayView2<'_, f64>, lin: &Linear, layer: usize, module: ModuleKind) -> Result<Array2<f64>> {
    if lin.weight.ncols() != x.ncols() {
        return Err(Error::Validation(format!(
            "layer {layer} {module} expects input width {}, got {}",
            lin.weight.ncols(),
            x.ncols()
        )));
    }
    Ok(project(x, lin))
}

fn project(x: ArrayView2<'_, f64>, lin: &Linear) -> Array2<f64> {
    let mut y = x.dot(&lin.weight.t());
    if let Some(b) = &lin.bias {
        y += b;
    }
    y
}

/// Runs the toy forward pass and records every module's input and output.
/// The `mlp_in` output is captured before the nonlinearity.
pub fn run_activations(bundle: &WeightBundle, inputs: ArrayView2<'_, f64>) -> Result<ActivationSet> {
    let manifest = &bundle.manifest;
    let act = manifest
        .attributes
        .get(NONLINEARITY_ATTR)
        .map_or(Ok(Nonlinearity::Tanh), |s| s.parse())?;
    let mut set_manifest = manifest.clone();
    set_manifest.sample_count = inputs.nrows();
    let mut set = ActivationSet::new(set_manifest);
    set.manifest.validate()?;

    let mut x = inputs.to_owned();
    for l in 0..manifest.num_layers {
        let get = |m| bundle.modules.get(&(l, m));
        for m in [ModuleKind::QProj, ModuleKind::KProj] {
            if let Some(lin) = get(m) {
                set.insert(l, m, Side::Pre, x.clone())?;
                set.insert(l, m, Side::Post, checked_project(x.view(), lin, l, m)?)?;
            }
        }
        let a = match get(ModuleKind::VProj) {
            Some(lin) => {
                let v = checked_project(x.view(), lin, l, ModuleKind::VProj)?;
                set.insert(l, ModuleKind::VProj, Side::Pre, x.clone())?;
                set.insert(l, ModuleKind::VProj, Side::Post, v.clone())?;
                x + v
            }
            None => x,
        };
        x = match (get(ModuleKind::MlpIn), get(ModuleKind::MlpOut)) {
            (Some(w_in), Some(w_out)) => {
                let h = checked_project(a.view(), w_in, l, ModuleKind::MlpIn)?;
                let g = h.mapv(|v| act.apply(v));
                set.insert(l, ModuleKind::MlpIn, Side::Pre, a)?;
                set.insert(l, ModuleKind::MlpIn, Side::Post, h)?;
                let y = checked_project(g.view(), w_out, l, ModuleKind::MlpOut)?;
                set.insert(l, ModuleKind::MlpOut, Side::Pre, g)?;
                set.insert(l, ModuleKind::MlpOut, Side::Post, y.clone())?;
                y
            }
            (Some(lin), None) | (None, Some(lin)) => {
                let m = if get(ModuleKind::MlpIn).is_some() { ModuleKind::MlpIn } else { ModuleKind::MlpOut };
                let y = checked_project(a.view(), lin, l, m)?;
                set.insert(l, m, Side::Pre, a)?;
                set.insert(l, m, Side::Post, y.clone())?;
                y
            }
            (None, None) => a,
        };
    }
    Ok(set)
}

/// `perm[i]` is the source index that target index `i` copies.
pub type Permutation = Vec<usize>;

fn permutation_matrix(perm: &[usize], source_len: usize) -> Array2<f64> {
    let mut p = Array2::zeros((perm.len(), source_len));
    for (i, &j) in perm.iter().enumerate() {
        p[[i, j]] = 1.0;
    }
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedScenario {
    pub source: ToyModelSpec,
    /// Seed of the planted permutations and noise.
    #[serde(default = "default_plant_seed")]
    pub plant_seed: u64,
    /// Draw random permutations; identity otherwise.
    #[serde(default = "default_true")]
    pub permute: bool,
    /// Standard deviation of added weight noise, relative to `1/sqrt(d_in)`.
    #[serde(default)]
    pub noise: f64,
    /// Keep only this many MLP hidden units in the target, per layer.
    #[serde(default)]
    pub truncate_ffn: Option<Vec<usize>>,
}

fn default_plant_seed() -> u64 {
    7
}

fn default_true() -> bool {
    true
}

impl PlantedScenario {
    pub fn new(source: ToyModelSpec) -> Self {
        PlantedScenario {
            source,
            plant_seed: default_plant_seed(),
            permute: true,
            noise: 0.0,
            truncate_ffn: None,
        }
    }
}

/// Ground truth of a planted case: per layer boundary, per MLP hidden space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    /// `num_layers + 1` residual permutations; the first is the identity
    /// because both models read the same inputs.
    pub residual: Vec<Permutation>,
    /// Hidden-unit maps of each layer's MLP (length = target hidden width).
    pub hidden: Vec<Permutation>,
}

impl PlantedTruth {
    /// Planted correspondence for one module side, in target -> source form.
    pub fn feature_map(&self, layer: usize, module: ModuleKind, side: Side, has_mlp_pair: bool) -> &Permutation {
        match (module, side) {
            (ModuleKind::MlpIn, Side::Post) if has_mlp_pair => &self.hidden[layer],
            (ModuleKind::MlpOut, Side::Pre) if has_mlp_pair => &self.hidden[layer],
            (ModuleKind::MlpOut, Side::Post) => &self.residual[layer + 1],
            (ModuleKind::MlpIn, Side::Post) => &self.residual[layer + 1],
            _ => &self.residual[layer],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedCase {
    pub source: WeightBundle,
    pub target: WeightBundle,
    pub truth: PlantedTruth,
}

fn draw_perm(rng: &mut ChaCha8Rng, n: usize, shuffle: bool) -> Permutation {
    let mut p: Permutation = (0..n).collect();
    if shuffle {
        p.shuffle(rng);
    }
    p
}

/// Source model plus a target that is its permuted (optionally truncated and
/// noised) copy. With zero noise and no truncation the target computes the
/// same function up to relabeling of every hidden coordinate.
pub fn planted_permutation_case(scenario: &PlantedScenario) -> Result<PlantedCase> {
    if !(scenario.noise >= 0.0) || !scenario.noise.is_finite() {
        return Err(Error::Validation(format!("noise level {} must be >= 0", scenario.noise)));
    }
    let spec = &scenario.source;
    let source = generate_toy(spec)?;
    let l_count = spec.num_layers();
    let has_pair = spec.has(ModuleKind::MlpIn) && spec.has(ModuleKind::MlpOut);

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.plant_seed);
    let residual: Vec<Permutation> = (0..=l_count)
        .map(|b| draw_perm(&mut rng, spec.dims[b], scenario.permute && b > 0))
        .collect();
    let mut hidden = Vec::new();
    for l in 0..l_count {
        let width = source.manifest.dims(l, ModuleKind::MlpIn).filter(|_| has_pair).map_or(0, |d| d.d_out);
        let mut p = draw_perm(&mut rng, width, scenario.permute);
        if let Some(t) = &scenario.truncate_ffn {
            let keep = *t.get(l).ok_or_else(|| Error::Validation(format!("truncate_ffn has no entry for layer {l}")))?;
            if keep == 0 || keep > width {
                return Err(Error::Validation(format!("layer {l}: cannot keep {keep} of {width} hidden units")));
            }
            p.truncate(keep);
        }
        hidden.push(p);
    }

    let mut manifest = source.manifest.clone();
    manifest.model_id = format!("{}-planted", spec.model_id);
    let truth = PlantedTruth { residual, hidden };
    let mut modules = BTreeMap::new();
    for (&(l, m), lin) in &source.modules {
        let dims = source.manifest.dims(l, m).expect("bundle is validated");
        let out_perm = truth.feature_map(l, m, Side::Post, has_pair);
        let in_perm = truth.feature_map(l, m, Side::Pre, has_pair);
        let p_out = permutation_matrix(out_perm, dims.d_out);
        let p_in = permutation_matrix(in_perm, dims.d_in);
        let mut weight = p_out.dot(&lin.weight).dot(&p_in.t());
        let mut bias = lin.bias.as_ref().map(|b| p_out.dot(b));
        if scenario.noise > 0.0 {
            let scale = scenario.noise / (weight.ncols() as f64).sqrt();
            weight += &gaussian_matrix(&mut rng, weight.nrows(), weight.ncols(), scale);
            if let Some(b) = &mut bias {
                *b += &gaussian_vector(&mut rng, b.len(), scale);
            }
        }
        let target_dims = ModuleDims {
            d_in: weight.ncols(),
            d_out: weight.nrows(),
        };
        manifest.layers[l].modules.insert(m, target_dims);
        modules.insert((l, m), Linear { weight, bias });
    }
    let target = WeightBundle { manifest, modules };
    target.validate()?;
    Ok(PlantedCase {
        source,
        target,
        truth,
    })
}

/// Source weight conjugated into target coordinates by the planted maps:
/// `P_out W_B P_in^T`.
pub fn conjugated_source(case: &PlantedCase, layer: usize, module: ModuleKind) -> Result<Array2<f64>> {
    let lin = case.source.get(layer, module)?;
    let has_pair = case.source.manifest.dims(layer, ModuleKind::MlpIn).is_some()
        && case.source.manifest.dims(layer, ModuleKind::MlpOut).is_some();
    let p_out = permutation_matrix(case.truth.feature_map(layer, module, Side::Post, has_pair), lin.weight.nrows());
    let p_in = permutation_matrix(case.truth.feature_map(layer, module, Side::Pre, has_pair), lin.weight.ncols());
    Ok(p_out.dot(&lin.weight).dot(&p_in.t()))
}

/// Fraction of target rows whose argmax lands on the planted source index.
pub fn argmax_accuracy(plan: ArrayView2<'_, f64>, truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hits = crate::sinkhorn::row_argmax(plan)
        .iter()
        .zip(truth)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / truth.len() as f64
}

/// Fraction of the plan's mass on the planted entries.
pub fn planted_mass(plan: ArrayView2<'_, f64>, truth: &[usize]) -> f64 {
    let on: f64 = truth.iter().enumerate().map(|(i, &j)| plan[[i, j]]).sum();
    on / plan.sum()
}

/// Mean squared error, its gradient with respect to the base weight and
/// base bias, for one affine residual module.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenGradient {
    pub loss: f64,
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

fn check_batch(entry: &ResidualEntry, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<()> {
    let (d_out, d_in) = entry.base.weight.dim();
    if x.ncols() != d_in || y.ncols() != d_out || x.nrows() != y.nrows() || x.nrows() == 0 {
        return Err(Error::Validation(format!(
            "batch inputs {:?} / targets {:?} do not fit a {d_out}x{d_in} layer",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// `L = (1/T) sum_t ||W x_t + b - y_t||^2` with `W = base + alpha M ⊙ ΔW`;
/// only the base receives gradient: `dL/dW_base = (2/T) E^T X`.
pub fn frozen_gradient(entry: &ResidualEntry, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<FrozenGradient> {
    check_batch(entry, x, y)?;
    let t = x.nrows() as f64;
    let fused = entry.fused();
    let err = project(x, &fused) - &y;
    let loss = err.iter().map(|e| e * e).sum::<f64>() / t;
    let weight = err.t().dot(&x) * (2.0 / t);
    let bias = entry.base.bias.as_ref().map(|_| err.sum_axis(Axis(0)) * (2.0 / t));
    Ok(FrozenGradient { loss, weight, bias })
}

pub fn toy_loss(entry: &ResidualEntry, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    check_batch(entry, x, y)?;
    let err = project(x, &entry.fused()) - &y;
    Ok(err.iter().map(|e| e * e).sum::<f64>() / x.nrows() as f64)
}

/// One gradient step on the base weights of the bundle's only module. The
/// residual, mask and alpha are carried over untouched. Returns the loss
/// before the step.
pub fn residual_frozen_step(bundle: &ResidualBundle, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, lr: f64) -> Result<(ResidualBundle, f64)> {
    if bundle.entries.len() != 1 {
        return Err(Error::Validation(format!(
            "adaptation needs a single-module bundle, got {} modules",
            bundle.entries.len()
        )));
    }
    let (&key, entry) = bundle.entries.iter().next().expect("one entry");
    let (entry, loss) = frozen_step_entry(entry, x, y, lr)?;
    let mut next = bundle.clone();
    next.entries.insert(key, entry);
    Ok((next, loss))
}

pub fn frozen_step_entry(entry: &ResidualEntry, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, lr: f64) -> Result<(ResidualEntry, f64)> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Validation(format!("learning rate {lr} must be finite and >= 0")));
    }
    let grad = frozen_gradient(entry, x, y)?;
    let mut next = entry.clone();
    if lr != 0.0 {
        next.base.weight.scaled_add(-lr, &grad.weight);
        if let (Some(b), Some(g)) = (&mut next.base.bias, &grad.bias) {
            b.scaled_add(-lr, g);
        }
    }
    Ok((next, grad.loss))
}
