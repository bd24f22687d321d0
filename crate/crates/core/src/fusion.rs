//! Weight-space fusion: coordinate maps from transport plans, transported
//! source operators, top-k output-neuron masks, and the masked residual
//! parameterization `W = W_base + alpha * (M ⊙ ΔW)`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{FeatureKey, FeaturePlanSet};
use crate::tensor_store::{
    read_container, write_container, Container, LayerTensorName, Linear, ModelManifest, ModuleKind, Side,
    TensorKind, TensorRecord, WeightBundle,
};

/// Default fusion strength.
pub const DEFAULT_ALPHA: f64 = 0.1;
/// Default number of output neurons replaced per module.
pub const DEFAULT_TOP_K: usize = 128;

/// Maps between target and source feature coordinates.
///
/// `phi_in` is `d_B,in x d_A,in` and carries target inputs into source input
/// coordinates; `phi_out` is `d_A,out x d_B,out` and carries source outputs
/// back. When scaled, `phi_in = diag(scale_in) Q_in^T` and
/// `phi_out = diag(scale_out) Q_out` with every row summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateMaps {
    pub phi_in: Array2<f64>,
    pub phi_out: Array2<f64>,
    pub scaling_applied: bool,
    pub scale_in: Array1<f64>,
    pub scale_out: Array1<f64>,
}

fn row_scale(m: &mut Array2<f64>, what: &str) -> Result<Array1<f64>> {
    let mut scales = Array1::zeros(m.nrows());
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        let sum = row.sum();
        if !(sum > 0.0) {
            return Err(Error::Validation(format!("{what} row {i} has no mass to normalize")));
        }
        let s = 1.0 / sum;
        row.mapv_inplace(|v| v * s);
        scales[i] = s;
    }
    Ok(scales)
}

pub fn coordinate_maps(q_in: ArrayView2<'_, f64>, q_out: ArrayView2<'_, f64>, scale: bool) -> Result<CoordinateMaps> {
    if q_in.iter().chain(q_out.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Validation("transport plan has non-finite entries".into()));
    }
    let mut phi_in = q_in.t().to_owned();
    let mut phi_out = q_out.to_owned();
    let (scale_in, scale_out) = if scale {
        (row_scale(&mut phi_in, "phi_in")?, row_scale(&mut phi_out, "phi_out")?)
    } else {
        (Array1::ones(phi_in.nrows()), Array1::ones(phi_out.nrows()))
    };
    Ok(CoordinateMaps {
        phi_in,
        phi_out,
        scaling_applied: scale,
        scale_in,
        scale_out,
    })
}

fn check_chain(maps: &CoordinateMaps, w_b: ArrayView2<'_, f64>) -> Result<()> {
    if maps.phi_out.ncols() != w_b.nrows() {
        return Err(Error::Validation(format!(
            "phi_out has {} columns but W_B has {} rows",
            maps.phi_out.ncols(),
            w_b.nrows()
        )));
    }
    if w_b.ncols() != maps.phi_in.nrows() {
        return Err(Error::Validation(format!(
            "W_B has {} columns but phi_in has {} rows",
            w_b.ncols(),
            maps.phi_in.nrows()
        )));
    }
    Ok(())
}

/// `phi_out · W_B · phi_in`: the source operator in target coordinates.
pub fn transported_operator(maps: &CoordinateMaps, w_b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_chain(maps, w_b)?;
    Ok(maps.phi_out.dot(&w_b).dot(&maps.phi_in))
}

/// `phi_out · b_B`: the source bias in target output coordinates.
pub fn transported_bias(maps: &CoordinateMaps, b_b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if maps.phi_out.ncols() != b_b.len() {
        return Err(Error::Validation(format!(
            "phi_out has {} columns but the source bias has {} entries",
            maps.phi_out.ncols(),
            b_b.len()
        )));
    }
    Ok(maps.phi_out.dot(&b_b))
}

/// `max |W~ h - phi_out (W_B (phi_in h))|`: acting with the transported
/// operator equals mapping into source coordinates, applying the source
/// layer, and mapping back.
pub fn verify_representation_identity(maps: &CoordinateMaps, w_b: ArrayView2<'_, f64>, h: ArrayView1<'_, f64>) -> Result<f64> {
    let op = transported_operator(maps, w_b)?;
    if h.len() != op.ncols() {
        return Err(Error::Validation(format!(
            "feature vector has length {}, operator expects {}",
            h.len(),
            op.ncols()
        )));
    }
    let direct = op.dot(&h);
    let staged = maps.phi_out.dot(&w_b.dot(&maps.phi_in.dot(&h)));
    Ok(direct
        .iter()
        .zip(&staged)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// LU factorization with partial pivoting of a square matrix.
pub struct Lu {
    lu: Array2<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(a: ArrayView2<'_, f64>) -> Result<Lu> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Validation(format!("LU needs a square matrix, got {:?}", a.dim())));
        }
        let mut lu = a.to_owned();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| lu[[i, k]].abs().total_cmp(&lu[[j, k]].abs()))
                .expect("nonempty range");
            if lu[[p, k]].abs() <= 1e-14 * scale {
                return Err(Error::Validation(format!("matrix is singular at column {k}")));
            }
            if p != k {
                for j in 0..n {
                    lu.swap([p, j], [k, j]);
                }
                perm.swap(p, k);
            }
            let pivot = lu[[k, k]];
            for i in k + 1..n {
                let f = lu[[i, k]] / pivot;
                lu[[i, k]] = f;
                for j in k + 1..n {
                    lu[[i, j]] -= f * lu[[k, j]];
                }
            }
        }
        Ok(Lu { lu, perm })
    }

    pub fn solve(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.perm.len();
        let mut x: Array1<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[[i, j]] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[[i, j]] * x[j];
            }
            x[i] /= self.lu[[i, i]];
        }
        x
    }
}

/// Recovers the linear operator `U` with `U h = apply(h)` for every column
/// `h` of `probes` (a square, invertible spanning set) by solving
/// `U · H = Y`.
pub fn reconstruct_operator(probes: ArrayView2<'_, f64>, apply: impl Fn(ArrayView1<'_, f64>) -> Array1<f64>) -> Result<Array2<f64>> {
    let d = probes.nrows();
    let outputs: Vec<Array1<f64>> = probes.columns().into_iter().map(&apply).collect();
    let rows_out = outputs.first().map_or(0, |y| y.len());
    // U H = Y  <=>  H^T U^T = Y^T; each row of U solves against H^T.
    let lu = Lu::new(probes.t())?;
    let mut u = Array2::zeros((rows_out, d));
    for r in 0..rows_out {
        let rhs: Array1<f64> = outputs.iter().map(|y| y[r]).collect();
        u.row_mut(r).assign(&lu.solve(rhs.view()));
    }
    Ok(u)
}

/// Selected output-neuron rows of one module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronMask {
    /// Sorted, unique, each `< d_out`.
    pub indices: Vec<usize>,
    pub d_out: usize,
}

impl NeuronMask {
    pub fn new(mut indices: Vec<usize>, d_out: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| i >= d_out) {
            return Err(Error::Validation(format!("mask index {bad} out of range for {d_out} rows")));
        }
        Ok(NeuronMask { indices, d_out })
    }

    pub fn empty(d_out: usize) -> Self {
        NeuronMask {
            indices: Vec::new(),
            d_out,
        }
    }

    pub fn full(d_out: usize) -> Self {
        NeuronMask {
            indices: (0..d_out).collect(),
            d_out,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, row: usize) -> bool {
        self.indices.binary_search(&row).is_ok()
    }

    /// 0/1 indicator vector of length `d_out`.
    pub fn to_indicator(&self) -> Array1<f64> {
        let mut v = Array1::zeros(self.d_out);
        for &i in &self.indices {
            v[i] = 1.0;
        }
        v
    }

    pub fn from_indicator(v: ArrayView1<'_, f64>) -> Result<Self> {
        let mut indices = Vec::new();
        for (i, &x) in v.iter().enumerate() {
            match x {
                0.0 => {}
                1.0 => indices.push(i),
                _ => return Err(Error::Validation(format!("mask entry {i} is {x}, expected 0 or 1"))),
            }
        }
        Ok(NeuronMask { indices, d_out: v.len() })
    }
}

/// Indices of the `k` largest scores, ties broken toward the lower index.
pub fn select_topk(scores: ArrayView1<'_, f64>, k: usize) -> NeuronMask {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order.truncate(k);
    order.sort_unstable();
    NeuronMask {
        indices: order,
        d_out: scores.len(),
    }
}

/// `base + alpha * (mask ⊙ delta)` on rows. Rows outside the mask are copied
/// verbatim, and `alpha = 0` returns `base` unchanged, so untouched weights
/// stay bit-identical.
pub fn apply_residual(base: ArrayView2<'_, f64>, delta: ArrayView2<'_, f64>, mask: &NeuronMask, alpha: f64) -> Array2<f64> {
    let mut out = base.to_owned();
    if alpha == 0.0 {
        return out;
    }
    for &i in &mask.indices {
        let mut row = out.row_mut(i);
        for (w, d) in row.iter_mut().zip(delta.row(i)) {
            *w += alpha * d;
        }
    }
    out
}

fn apply_residual_bias(base: ArrayView1<'_, f64>, delta: ArrayView1<'_, f64>, mask: &NeuronMask, alpha: f64) -> Array1<f64> {
    let mut out = base.to_owned();
    if alpha == 0.0 {
        return out;
    }
    for &i in &mask.indices {
        out[i] += alpha * delta[i];
    }
    out
}

/// One source layer's contribution to a target module.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportedTerm {
    /// `P_eff[l, m]`.
    pub weight: f64,
    pub operator: Array2<f64>,
    /// `phi_out · b_B`, when the source module has a bias.
    pub bias: Option<Array1<f64>>,
}

/// Stored parts of one fused module.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualEntry {
    pub base: Linear,
    pub delta: Array2<f64>,
    pub delta_bias: Option<Array1<f64>>,
    pub mask: NeuronMask,
    pub alpha: f64,
}

impl ResidualEntry {
    /// `base + alpha * (mask ⊙ delta)`, weight and bias.
    pub fn fused(&self) -> Linear {
        let weight = apply_residual(self.base.weight.view(), self.delta.view(), &self.mask, self.alpha);
        let bias = match (&self.base.bias, &self.delta_bias) {
            (Some(b), Some(db)) => Some(apply_residual_bias(b.view(), db.view(), &self.mask, self.alpha)),
            (b, _) => b.clone(),
        };
        Linear { weight, bias }
    }

    /// `alpha * (mask ⊙ delta)`: what fusion adds to the base weight.
    pub fn increment(&self) -> Array2<f64> {
        let zeros = Array2::zeros(self.delta.dim());
        apply_residual(zeros.view(), self.delta.view(), &self.mask, self.alpha)
    }

    fn validate(&self) -> Result<()> {
        if self.delta.dim() != self.base.weight.dim() {
            return Err(Error::Validation(format!(
                "residual {:?} does not match base {:?}",
                self.delta.dim(),
                self.base.weight.dim()
            )));
        }
        if self.mask.d_out != self.base.weight.nrows() {
            return Err(Error::Validation(format!(
                "mask covers {} rows, weight has {}",
                self.mask.d_out,
                self.base.weight.nrows()
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Validation(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Fuses one target module:
/// `fused = W_A + alpha * (M ⊙ (sum_m P_eff[l, m] W~^{lm} - W_A))`.
///
/// The bias follows the same rule with `phi_out · b_B` in place of `W~`; it
/// is fused only when the target and every contributing source carry one.
pub fn fuse_layer(target: &Linear, transported: &[TransportedTerm], mask: &NeuronMask, alpha: f64) -> Result<(Linear, ResidualEntry)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("alpha {alpha} outside [0, 1]")));
    }
    if transported.is_empty() {
        return Err(Error::Validation("no transported operators to fuse".into()));
    }
    let shape = target.weight.dim();
    if mask.d_out != shape.0 {
        return Err(Error::Validation(format!(
            "mask covers {} rows, weight has {}",
            mask.d_out, shape.0
        )));
    }
    let mut combined = Array2::<f64>::zeros(shape);
    for (m, term) in transported.iter().enumerate() {
        if term.operator.dim() != shape {
            return Err(Error::Validation(format!(
                "transported operator {m} has shape {:?}, target weight {:?}",
                term.operator.dim(),
                shape
            )));
        }
        combined.scaled_add(term.weight, &term.operator);
    }
    let delta = combined - &target.weight;

    let delta_bias = match &target.bias {
        Some(b) if transported.iter().all(|t| t.bias.is_some()) => {
            let mut acc = Array1::<f64>::zeros(b.len());
            for term in transported {
                let tb = term.bias.as_ref().expect("checked above");
                if tb.len() != b.len() {
                    return Err(Error::Validation(format!(
                        "transported bias has length {}, target bias {}",
                        tb.len(),
                        b.len()
                    )));
                }
                acc.scaled_add(term.weight, tb);
            }
            Some(acc - b)
        }
        _ => None,
    };

    let entry = ResidualEntry {
        base: target.clone(),
        delta,
        delta_bias,
        mask: mask.clone(),
        alpha,
    };
    Ok((entry.fused(), entry))
}

/// Residual parameterization of a whole target model.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBundle {
    pub manifest: ModelManifest,
    pub entries: BTreeMap<(usize, ModuleKind), ResidualEntry>,
}

impl ResidualBundle {
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        for ((layer, module), entry) in &self.entries {
            entry
                .validate()
                .map_err(|e| Error::Validation(format!("layer {layer} {module}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        let mut records = Vec::new();
        for (&(layer, module), e) in &self.entries {
            let name = |kind| LayerTensorName::new(layer, module, kind).to_string();
            records.push(TensorRecord::from_matrix(name(TensorKind::Weight), &e.base.weight));
            if let Some(b) = &e.base.bias {
                records.push(TensorRecord::from_vector(name(TensorKind::Bias), b));
            }
            records.push(TensorRecord::from_matrix(name(TensorKind::Delta), &e.delta));
            if let Some(db) = &e.delta_bias {
                records.push(TensorRecord::from_vector(name(TensorKind::DeltaBias), db));
            }
            records.push(TensorRecord::from_vector(name(TensorKind::Mask), &e.mask.to_indicator()));
            records.push(TensorRecord::scalar(name(TensorKind::Alpha), e.alpha));
        }
        records
    }

    pub fn from_container(container: &Container) -> Result<Self> {
        let base = WeightBundle::from_container(container)?;
        let mut entries = BTreeMap::new();
        for (&(layer, module), linear) in &base.modules {
            let name = |kind| LayerTensorName::new(layer, module, kind).to_string();
            let delta = container.require(&name(TensorKind::Delta))?.to_matrix()?;
            let delta_bias = container
                .get(&name(TensorKind::DeltaBias))
                .map(TensorRecord::to_vector)
                .transpose()?;
            let mask = NeuronMask::from_indicator(container.require(&name(TensorKind::Mask))?.to_vector()?.view())?;
            let alpha = container.require(&name(TensorKind::Alpha))?.to_scalar()?;
            entries.insert(
                (layer, module),
                ResidualEntry {
                    base: linear.clone(),
                    delta,
                    delta_bias,
                    mask,
                    alpha,
                },
            );
        }
        let bundle = ResidualBundle {
            manifest: container.manifest.clone(),
            entries,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        self.validate()?;
        write_container(&self.to_records(), &self.manifest, path)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        ResidualBundle::from_container(&read_container(path)?)
    }

    pub fn parameter_count(&self) -> usize {
        self.entries
            .values()
            .map(|e| e.base.weight.len() + e.base.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }
}

/// Absorbs every masked, scaled residual into its base weight.
pub fn fold(bundle: &ResidualBundle) -> WeightBundle {
    WeightBundle {
        manifest: bundle.manifest.clone(),
        modules: bundle
            .entries
            .iter()
            .map(|(&key, entry)| (key, entry.fused()))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSettings {
    pub alpha: f64,
    pub top_k: usize,
    pub scale_maps: bool,
}

impl Default for FusionSettings {
    fn default() -> Self {
        FusionSettings {
            alpha: DEFAULT_ALPHA,
            top_k: DEFAULT_TOP_K,
            scale_maps: true,
        }
    }
}

/// Builds the residual bundle for every target module.
///
/// `p_eff` is the `L x M` effective layer plan; `masks` holds the selected
/// output rows per target module (missing entries mean "no rows"). Target
/// modules without any same-role source module keep a zero residual.
pub fn fuse_models(
    target: &WeightBundle,
    source: &WeightBundle,
    plans: &FeaturePlanSet,
    p_eff: ArrayView2<'_, f64>,
    masks: &BTreeMap<(usize, ModuleKind), NeuronMask>,
    settings: &FusionSettings,
) -> Result<ResidualBundle> {
    let (l_count, m_count) = (target.manifest.num_layers, source.manifest.num_layers);
    if p_eff.dim() != (l_count, m_count) {
        return Err(Error::Validation(format!(
            "effective plan {:?} does not match {l_count} target x {m_count} source layers",
            p_eff.dim()
        )));
    }
    let mut entries = BTreeMap::new();
    for (&(layer, module), linear) in &target.modules {
        let mut terms = Vec::new();
        for m in 0..m_count {
            let Some(src) = source.modules.get(&(m, module)) else {
                continue;
            };
            let key = |side| FeatureKey {
                target_layer: layer,
                source_layer: m,
                module,
                side,
            };
            let (Some(q_in), Some(q_out)) = (plans.plans.get(&key(Side::Pre)), plans.plans.get(&key(Side::Post))) else {
                continue;
            };
            let maps = coordinate_maps(q_in.plan.view(), q_out.plan.view(), settings.scale_maps)?;
            let operator = transported_operator(&maps, src.weight.view())
                .map_err(|e| Error::Validation(format!("layer {layer}/{m} {module}: {e}")))?;
            let bias = src.bias.as_ref().map(|b| transported_bias(&maps, b.view())).transpose()?;
            terms.push(TransportedTerm {
                weight: p_eff[[layer, m]],
                operator,
                bias,
            });
        }
        let d_out = linear.weight.nrows();
        let entry = if terms.is_empty() {
            ResidualEntry {
                base: linear.clone(),
                delta: Array2::zeros(linear.weight.dim()),
                delta_bias: None,
                mask: NeuronMask::empty(d_out),
                alpha: settings.alpha,
            }
        } else {
            let mask = masks.get(&(layer, module)).cloned().unwrap_or_else(|| NeuronMask::empty(d_out));
            fuse_layer(linear, &terms, &mask, settings.alpha)?.1
        };
        entries.insert((layer, module), entry);
    }
    let bundle = ResidualBundle {
        manifest: target.manifest.clone(),
        entries,
    };
    bundle.validate()?;
    Ok(bundle)
}
