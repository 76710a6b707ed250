//! Binary soft-margin SVM with a Gaussian RBF kernel, trained by sequential
//! minimal optimization.
//!
//! The solver minimizes the dual `½ αᵀQα − Σα` subject to `0 ≤ α ≤ C` and
//! `yᵀα = 0`, where `Q_ij = y_i y_j k(x_i, x_j)`. Each step picks the
//! maximal-violating index `i` and the partner `j` with the best
//! second-order gain, solves the two-variable subproblem in closed form,
//! and stops once the KKT gap `m(α) − M(α)` drops below `tol`.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::Label;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    /// Box constraint.
    pub c: f64,
    /// RBF width: `k(a, b) = exp(-gamma ‖a − b‖²)`.
    pub gamma: f64,
    /// KKT gap at which optimization stops.
    pub tol: f64,
    /// Iteration bound, in multiples of the training-set size.
    pub max_passes: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 10.0,
            gamma: 0.125,
            tol: 1e-3,
            max_passes: 1000,
        }
    }
}

impl SvmParams {
    pub fn new(c: f64, gamma: f64) -> Self {
        Self {
            c,
            gamma,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::invalid(format!("C = {} must be positive", self.c)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma = {} must be positive",
                self.gamma
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!(
                "tol = {} must be positive",
                self.tol
            )));
        }
        if self.max_passes == 0 {
            return Err(Error::invalid("max_passes must be at least 1"));
        }
        Ok(())
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn rbf_kernel(a: &[f64], b: &[f64], gamma: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok((-gamma * sq_dist(a, b)).exp())
}

/// Kernel expansion over the support vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` per support vector.
    pub coefficients: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.support_vectors.first().map_or(0, Vec::len)
    }

    /// `Σ coef_i k(sv_i, x) + bias`
    pub fn decision_score(&self, x: &[f64]) -> Result<f64> {
        if !self.support_vectors.is_empty() && x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let sum: f64 = self
            .support_vectors
            .iter()
            .zip(&self.coefficients)
            .map(|(sv, c)| c * (-self.gamma * sq_dist(sv, x)).exp())
            .sum();
        Ok(sum + self.bias)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        Ok(Label::from_score(self.decision_score(x)?))
    }
}

/// Dual variables of a finished optimization, in training-row order.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alphas: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    /// False when the iteration bound stopped the solver first.
    pub converged: bool,
}

/// Bytes of kernel rows kept by the solver.
const CACHE_BYTES: usize = 256 << 20;

struct KernelRows<'a> {
    x: &'a [&'a [f64]],
    gamma: f64,
    rows: Vec<Option<Vec<f64>>>,
    last_used: Vec<u64>,
    clock: u64,
    live: usize,
    capacity: usize,
}

impl<'a> KernelRows<'a> {
    fn new(x: &'a [&'a [f64]], gamma: f64) -> Self {
        let n = x.len();
        Self {
            x,
            gamma,
            rows: vec![None; n],
            last_used: vec![0; n],
            clock: 0,
            live: 0,
            capacity: (CACHE_BYTES / (8 * n.max(1))).max(2),
        }
    }

    fn fetch(&mut self, i: usize) {
        self.clock += 1;
        self.last_used[i] = self.clock;
        if self.rows[i].is_some() {
            return;
        }
        if self.live == self.capacity {
            let victim = (0..self.rows.len())
                .filter(|&t| self.rows[t].is_some())
                .min_by_key(|&t| self.last_used[t])
                .expect("cache is full");
            self.rows[victim] = None;
            self.live -= 1;
        }
        let xi = self.x[i];
        let row = self
            .x
            .iter()
            .map(|xt| (-self.gamma * sq_dist(xi, xt)).exp())
            .collect();
        self.rows[i] = Some(row);
        self.live += 1;
    }

    /// Rows `i` and `j`, both resident.
    fn pair(&mut self, i: usize, j: usize) -> (&[f64], &[f64]) {
        self.fetch(i);
        self.fetch(j);
        (
            self.rows[i].as_deref().expect("fetched"),
            self.rows[j].as_deref().expect("fetched"),
        )
    }

    fn row(&mut self, i: usize) -> &[f64] {
        self.fetch(i);
        self.rows[i].as_deref().expect("fetched")
    }
}

const TAU: f64 = 1e-12;

/// Runs SMO and returns the dual solution. Rows are visited in an order
/// shuffled by `seed`, which only affects tie-breaking between equally
/// violating pairs.
pub fn solve_dual(
    x: &[Vec<f64>],
    y: &[Label],
    params: &SvmParams,
    seed: u64,
) -> Result<DualSolution> {
    params.validate()?;
    let n = x.len();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if n < 2 {
        return Err(Error::too_small("training set", format!("{n} rows")));
    }
    if !y.contains(&Label::Live) || !y.contains(&Label::Fake) {
        return Err(Error::MissingClass(
            "SVM training needs both live and fake samples".into(),
        ));
    }
    let d = x[0].len();
    for row in x {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SVM training features"));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::seed::rng(seed));
    let xs: Vec<&[f64]> = order.iter().map(|&i| x[i].as_slice()).collect();
    let ys: Vec<f64> = order.iter().map(|&i| y[i].sign()).collect();

    let c = params.c;
    let max_iter = params.max_passes.saturating_mul(n).max(10_000);
    let mut kernel = KernelRows::new(&xs, params.gamma);
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let in_up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let in_low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);

    #[cfg(debug_assertions)]
    let mut objective = 0.0f64;

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut sel_i = None;
        for t in 0..n {
            if in_up(alpha[t], ys[t]) {
                let v = -ys[t] * grad[t];
                if v > gmax {
                    gmax = v;
                    sel_i = Some(t);
                }
            }
        }
        let Some(i) = sel_i else {
            converged = true;
            break;
        };
        let ki = kernel.row(i).to_vec();

        let mut gmax2 = f64::NEG_INFINITY;
        let mut best = f64::INFINITY;
        let mut sel_j = None;
        for t in 0..n {
            if !in_low(alpha[t], ys[t]) {
                continue;
            }
            let yg = ys[t] * grad[t];
            gmax2 = gmax2.max(yg);
            let b = gmax + yg;
            if b > 0.0 {
                let a = (2.0 - 2.0 * ki[t]).max(TAU);
                let obj = -(b * b) / a;
                if obj < best {
                    best = obj;
                    sel_j = Some(t);
                }
            }
        }
        if gmax + gmax2 < params.tol {
            converged = true;
            break;
        }
        let Some(j) = sel_j else {
            converged = true;
            break;
        };
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let quad = (2.0 - 2.0 * ki[j]).max(TAU);
        if ys[i] != ys[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        let (ri, rj) = kernel.pair(i, j);
        for t in 0..n {
            grad[t] += ys[t] * (ys[i] * ri[t] * di + ys[j] * rj[t] * dj);
        }

        #[cfg(debug_assertions)]
        {
            let next: f64 = 0.5
                * alpha
                    .iter()
                    .zip(&grad)
                    .map(|(a, g)| a * (g - 1.0))
                    .sum::<f64>();
            debug_assert!(
                next <= objective + 1e-9 * (1.0 + objective.abs()),
                "dual objective rose from {objective} to {next}"
            );
            objective = next;
        }
    }

    // Offset from the free variables, or the middle of the feasible
    // interval when every variable sits at a bound.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free_sum, mut free) = (0.0, 0usize);
    for t in 0..n {
        let yg = ys[t] * grad[t];
        if alpha[t] >= c {
            if ys[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if ys[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free_sum += yg;
            free += 1;
        }
    }
    let rho = if free > 0 {
        free_sum / free as f64
    } else {
        (ub + lb) / 2.0
    };

    let mut alphas = vec![0.0; n];
    for (slot, &orig) in order.iter().enumerate() {
        alphas[orig] = alpha[slot];
    }
    Ok(DualSolution {
        alphas,
        bias: -rho,
        iterations,
        converged,
    })
}

pub fn train_smo(x: &[Vec<f64>], y: &[Label], params: &SvmParams, seed: u64) -> Result<SvmModel> {
    let sol = solve_dual(x, y, params, seed)?;
    Ok(model_from_dual(x, y, &sol, params.gamma))
}

/// Keeps the rows with nonzero multipliers.
pub fn model_from_dual(x: &[Vec<f64>], y: &[Label], sol: &DualSolution, gamma: f64) -> SvmModel {
    let mut support_vectors = Vec::new();
    let mut coefficients = Vec::new();
    for ((row, label), &a) in x.iter().zip(y).zip(&sol.alphas) {
        if a > 0.0 {
            support_vectors.push(row.clone());
            coefficients.push(a * label.sign());
        }
    }
    SvmModel {
        support_vectors,
        coefficients,
        bias: sol.bias,
        gamma,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Fake, Live};

    #[test]
    fn kernel_values() {
        assert_eq!(rbf_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap(), 1.0);
        let k = rbf_kernel(&[0.0, 0.0], &[1.0, 0.0], 1.0).unwrap();
        assert!((k - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert!(rbf_kernel(&[0.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn symmetric_pair() {
        let x = vec![vec![-1.0], vec![1.0]];
        let y = vec![Fake, Live];
        let m = train_smo(&x, &y, &SvmParams::new(10.0, 1.0), 0).unwrap();
        assert_eq!(m.support_vectors.len(), 2);
        assert!(m.decision_score(&[0.0]).unwrap().abs() < 1e-6);
        assert_eq!(m.predict(&[0.7]).unwrap(), Live);
        assert_eq!(m.predict(&[-0.7]).unwrap(), Fake);
    }

    #[test]
    fn xor() {
        let x = vec![
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ];
        let y = vec![Fake, Fake, Live, Live];
        let m = train_smo(&x, &y, &SvmParams::new(10.0, 1.0), 3).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(m.predict(xi).unwrap(), *yi);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let p = SvmParams::default();
        assert!(matches!(
            train_smo(&[vec![0.0], vec![1.0]], &[Live, Live], &p, 0),
            Err(Error::MissingClass(_))
        ));
        assert!(matches!(
            train_smo(&[vec![0.0], vec![f64::NAN]], &[Live, Fake], &p, 0),
            Err(Error::NonFinite(_))
        ));
        assert!(train_smo(&[vec![0.0]], &[Live], &p, 0).is_err());
        assert!(train_smo(
            &[vec![0.0], vec![1.0]],
            &[Live, Fake],
            &SvmParams::new(0.0, 1.0),
            0
        )
        .is_err());
    }

    #[test]
    fn empty_model_scores_bias() {
        let m = SvmModel {
            support_vectors: vec![],
            coefficients: vec![],
            bias: -0.25,
            gamma: 1.0,
        };
        assert_eq!(m.decision_score(&[1.0, 2.0]).unwrap(), -0.25);
    }

    #[test]
    fn tiny_cache_gives_same_solution() {
        use rand::Rng;
        let mut rng = crate::seed::rng(5);
        let x: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let xs: Vec<&[f64]> = x.iter().map(|r| r.as_slice()).collect();
        let mut small = KernelRows::new(&xs, 0.5);
        small.capacity = 2;
        let mut big = KernelRows::new(&xs, 0.5);
        for i in [3, 7, 3, 9, 1, 7] {
            assert_eq!(small.row(i).to_vec(), big.row(i).to_vec());
            assert!(small.live <= 2);
        }
    }
}
