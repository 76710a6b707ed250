//! Per-dimension standardization, randomized PCA, and whitening.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::FeatureVector;

/// Floor on the standard deviation; constant columns map to zero.
pub const STD_FLOOR: f64 = 1e-12;
/// Added to each component variance before whitening.
pub const WHITEN_EPSILON: f64 = 1e-8;
pub const OVERSAMPLING: usize = 10;
pub const POWER_ITERATIONS: usize = 2;

fn check_rows(rows: &[Vec<f64>], what: &'static str) -> Result<usize> {
    let d = rows.first().map_or(0, Vec::len);
    for r in rows {
        if r.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what));
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Column means and population standard deviations.
pub fn fit_standardizer(rows: &[Vec<f64>]) -> Result<Standardizer> {
    if rows.len() < 2 {
        return Err(Error::too_small(
            "training set",
            format!("standardization needs at least 2 rows, got {}", rows.len()),
        ));
    }
    let d = check_rows(rows, "features")?;
    let n = rows.len() as f64;
    let mut means = vec![0.0; d];
    for r in rows {
        for (m, v) in means.iter_mut().zip(r) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut vars = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in vars.iter_mut().zip(r).zip(&means) {
            *s += (v - m) * (v - m);
        }
    }
    let stds = vars.into_iter().map(|s| (s / n).sqrt()).collect();
    Ok(Standardizer { means, stds })
}

impl Standardizer {
    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<FeatureVector> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((v, m), s)| (v - m) / s.max(STD_FLOOR))
            .collect())
    }
}

/// Principal axes as orthonormal rows, with the variance of the training
/// data along each.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    /// Sample variance (denominator `n - 1`) along each component,
    /// non-increasing.
    pub variances: Vec<f64>,
    pub whiten: bool,
    pub epsilon: f64,
}

fn to_matrix(rows: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

fn orthonormal_basis(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// Randomized range finder followed by an exact SVD of the small projected
/// matrix: a Gaussian test matrix with `k + 10` columns, two power
/// iterations with re-orthonormalization, then the top `k` right singular
/// vectors of `Qᵀ X`. Each component's largest-magnitude entry is made
/// positive.
pub fn fit_pca_randomized(
    rows: &[Vec<f64>],
    k: usize,
    seed: u64,
    whiten: bool,
) -> Result<PcaModel> {
    let n = rows.len();
    let d = check_rows(rows, "features")?;
    if n < 2 || k == 0 || k > (n - 1).min(d) {
        return Err(Error::invalid(format!(
            "component count {k} must be in 1..={} for {n} rows of dimension {d}",
            n.saturating_sub(1).min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut x = to_matrix(rows, d);
    for mut row in x.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }

    let l = (k + OVERSAMPLING).min(n.min(d));
    let mut rng = crate::seed::rng(seed);
    let omega = DMatrix::from_fn(d, l, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormal_basis(&x * omega);
    for _ in 0..POWER_ITERATIONS {
        let z = orthonormal_basis(x.tr_mul(&q));
        q = orthonormal_basis(&x * z);
    }
    let b = q.tr_mul(&x);
    let svd = b.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let denom = (n - 1) as f64;
    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut c: Vec<f64> = v_t.row(i).iter().copied().collect();
        let pivot = c
            .iter()
            .copied()
            .reduce(|a, b| if b.abs() > a.abs() { b } else { a })
            .unwrap_or(0.0);
        if pivot < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        variances.push(svd.singular_values[i].powi(2) / denom);
    }
    Ok(PcaModel {
        mean,
        components,
        variances,
        whiten,
        epsilon: WHITEN_EPSILON,
    })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Rotates `x` onto the components; with whitening each coordinate is
    /// divided by `sqrt(variance + epsilon)`.
    pub fn project(&self, x: &[f64]) -> Result<FeatureVector> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self
            .components
            .iter()
            .zip(&self.variances)
            .map(|(c, &var)| {
                let y: f64 = c.iter().zip(&centered).map(|(a, b)| a * b).sum();
                if self.whiten {
                    y / (var + self.epsilon).sqrt()
                } else {
                    y
                }
            })
            .collect())
    }
}

/// Component count for a fraction of the input dimension, clamped to
/// what the data supports.
pub fn components_for_fraction(fraction: f64, n_rows: usize, dim: usize) -> usize {
    let k = (fraction * dim as f64).round() as usize;
    k.clamp(1, n_rows.saturating_sub(1).min(dim).max(1))
}

/// Standardization followed by PCA.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTransform {
    pub standardizer: Standardizer,
    pub pca: PcaModel,
}

impl FeatureTransform {
    pub fn fit(rows: &[Vec<f64>], fraction: f64, whiten: bool, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "pca fraction {fraction} not in (0, 1]"
            )));
        }
        let standardizer = fit_standardizer(rows)?;
        let standardized: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| standardizer.apply(r))
            .collect::<Result<_>>()?;
        let k = components_for_fraction(fraction, rows.len(), standardizer.dim());
        let pca = fit_pca_randomized(&standardized, k, seed, whiten)?;
        Ok(Self { standardizer, pca })
    }

    pub fn apply(&self, x: &[f64]) -> Result<FeatureVector> {
        self.pca.project(&self.standardizer.apply(x)?)
    }
}
