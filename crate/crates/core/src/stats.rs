//! Activation statistics: correlation costs and activation-strength scores.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Target-by-source correlation dissimilarities, each in `[0, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(pub Array2<f64>);

impl CostMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Per-neuron mean absolute activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationScore(pub Array1<f64>);

/// Centered columns stored contiguously, with their centered sums of squares.
/// A zero sum of squares marks a column with no usable variance.
fn centered_columns(x: ArrayView2<'_, f64>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let t = x.nrows() as f64;
    x.columns()
        .into_iter()
        .map(|col| {
            let raw: f64 = col.iter().map(|v| v * v).sum();
            let mean = col.sum() / t;
            let centered: Vec<f64> = col.iter().map(|v| v - mean).collect();
            let ss = dot(&centered, &centered);
            // Constant columns leave only rounding residue after centering.
            if ss > 1e-24 * raw && ss.is_finite() {
                (centered, ss)
            } else {
                (vec![0.0; centered.len()], 0.0)
            }
        })
        .unzip()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pearson correlation cost `1 - rho` between every column of `x` and every
/// column of `y`. Columns with zero variance get the neutral cost 1.
///
/// Cross products use the same summation order as the sums of squares, so a
/// column compared with itself yields exactly zero cost.
pub fn pearson_cost(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<CostMatrix> {
    if x.nrows() != y.nrows() {
        return Err(Error::Validation(format!(
            "sample counts differ: {} vs {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: x.nrows(),
        });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Validation("activations contain non-finite values".into()));
    }
    let (xc, xss) = centered_columns(x);
    let (yc, yss) = centered_columns(y);
    let rows: Vec<Vec<f64>> = xc
        .par_iter()
        .zip(xss.par_iter())
        .map(|(xi, &sx)| {
            yc.iter()
                .zip(&yss)
                .map(|(yj, &sy)| {
                    let denom = (sx * sy).sqrt();
                    let rho = if denom > 0.0 { dot(xi, yj) / denom } else { 0.0 };
                    (1.0 - rho).clamp(0.0, 2.0)
                })
                .collect()
        })
        .collect();
    let (n, m) = (x.ncols(), y.ncols());
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(CostMatrix(Array2::from_shape_vec((n, m), flat).expect("n x m costs")))
}

/// `s_j = (1/T) sum_t |h_tj|`.
pub fn activation_strength(x: ArrayView2<'_, f64>) -> Result<ActivationScore> {
    if x.nrows() == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let t = x.nrows() as f64;
    Ok(ActivationScore(x.mapv(f64::abs).sum_axis(Axis(0)) / t))
}

/// Mean-pools each sample's token vectors into one row.
pub fn pool_tokens(samples: &[Vec<Vec<f64>>]) -> Result<Array2<f64>> {
    let dim = samples
        .iter()
        .find_map(|s| s.first().map(Vec::len))
        .ok_or(Error::EmptySequence { sample: 0 })?;
    let mut out = Array2::zeros((samples.len(), dim));
    for (t, tokens) in samples.iter().enumerate() {
        if tokens.is_empty() {
            return Err(Error::EmptySequence { sample: t });
        }
        let mut row = out.row_mut(t);
        for token in tokens {
            if token.len() != dim {
                return Err(Error::Validation(format!(
                    "sample {t}: token dimension {} != {dim}",
                    token.len()
                )));
            }
            for (acc, v) in row.iter_mut().zip(token) {
                *acc += v;
            }
        }
        let n = tokens.len() as f64;
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn col(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn perfectly_correlated_columns_cost_zero() {
        let c = pearson_cost(col(&[1., 2., 3.]).view(), col(&[2., 4., 6.]).view()).unwrap();
        assert!(c.0[[0, 0]].abs() < 1e-15);
    }

    #[test]
    fn anticorrelated_columns_cost_two() {
        let c = pearson_cost(col(&[1., 2., 3.]).view(), col(&[3., 2., 1.]).view()).unwrap();
        assert!((c.0[[0, 0]] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn partial_correlation_by_hand() {
        // centered [-1,0,1] vs [-1,1,0]: dot 1, norms sqrt(2) each -> rho 0.5
        let c = pearson_cost(col(&[1., 2., 3.]).view(), col(&[1., 3., 2.]).view()).unwrap();
        assert!((c.0[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_column_gets_neutral_cost() {
        let x = array![[1.0, 0.1], [2.0, 0.1], [3.0, 0.1]];
        let y = array![[5.0, 7.0], [1.0, 7.0], [2.0, 7.0]];
        let c = pearson_cost(x.view(), y.view()).unwrap();
        assert_eq!(c.0[[1, 0]], 1.0);
        assert_eq!(c.0[[1, 1]], 1.0);
        assert_eq!(c.0[[0, 1]], 1.0);
    }

    #[test]
    fn self_cost_diagonal_is_exactly_zero() {
        let x = array![[0.3, -1.7, 2.0], [1.1, 0.4, -0.5], [-2.2, 0.9, 0.1], [0.7, 0.7, 3.3]];
        let c = pearson_cost(x.view(), x.view()).unwrap();
        for i in 0..3 {
            assert_eq!(c.0[[i, i]], 0.0);
        }
    }

    #[test]
    fn too_few_samples() {
        let x = array![[1.0, 2.0]];
        assert!(matches!(
            pearson_cost(x.view(), x.view()),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn two_pass_survives_large_offsets() {
        let x = col(&[1e9 + 1.0, 1e9 + 2.0, 1e9 + 3.0]);
        let y = col(&[2.0, 4.0, 6.0]);
        let c = pearson_cost(x.view(), y.view()).unwrap();
        assert!(c.0[[0, 0]].abs() < 1e-12);
    }

    #[test]
    fn strength_examples() {
        let s = activation_strength(array![[1.0, -2.0], [3.0, -4.0]].view()).unwrap();
        assert_eq!(s.0, array![2.0, 3.0]);
        let s = activation_strength(Array2::<f64>::zeros((3, 2)).view()).unwrap();
        assert_eq!(s.0, array![0.0, 0.0]);
        let s = activation_strength(array![[0.5, -0.5]].view()).unwrap();
        assert_eq!(s.0, array![0.5, 0.5]);
    }

    #[test]
    fn pooling() {
        let pooled = pool_tokens(&[vec![vec![1.0, 1.0], vec![3.0, 3.0]]]).unwrap();
        assert_eq!(pooled, array![[2.0, 2.0]]);
        let pooled = pool_tokens(&[vec![vec![0.25, -4.0]]]).unwrap();
        assert_eq!(pooled, array![[0.25, -4.0]]);
    }

    #[test]
    fn pooling_brute_force_means() {
        let samples = vec![
            vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![-1.0, 0.5, 2.0]],
            vec![vec![0.1, 0.2, 0.3]],
        ];
        let pooled = pool_tokens(&samples).unwrap();
        for (t, tokens) in samples.iter().enumerate() {
            for j in 0..3 {
                let mut acc = 0.0;
                for tok in tokens {
                    acc += tok[j];
                }
                assert!((pooled[[t, j]] - acc / tokens.len() as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn empty_sample_is_an_error() {
        let err = pool_tokens(&[vec![vec![1.0]], vec![]]).unwrap_err();
        assert!(matches!(err, Error::EmptySequence { sample: 1 }));
        assert!(pool_tokens(&[vec![vec![1.0], vec![1.0, 2.0]]]).is_err());
    }
}
