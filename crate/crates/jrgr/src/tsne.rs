//! Exact t-SNE for small point sets.
//!
//! The embedding pipeline mirrors the reference implementation: PCA down to
//! at most 50 dimensions (seeded subspace iteration — distances within the
//! retained subspace are exact, which is all t-SNE consumes), per-point
//! bandwidth calibration by binary search to a target perplexity, then 1000
//! gradient steps with early exaggeration, momentum, and adaptive gains.
//! Everything is deterministic for a fixed seed; the quadratic exact
//! formulation caps the point count rather than approximating.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Most points the exact O(n^2) formulation accepts.
pub const MAX_POINTS: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    /// Target perplexity; silently clamped to `(n - 1) / 3` for small sets.
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    /// PCA output dimensionality applied before the embedding.
    pub pca_dims: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            pca_dims: 50,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.perplexity.is_finite() || self.perplexity < 1.0 {
            return Err(Error::Validation(format!(
                "perplexity must be finite and >= 1, got {}",
                self.perplexity
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Validation("iterations must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Validation(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.pca_dims == 0 {
            return Err(Error::Validation("pca_dims must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// PCA by subspace iteration
// ---------------------------------------------------------------------------

/// Orthonormalizes the columns of `v` in place (modified Gram-Schmidt).
/// Columns that collapse to zero norm are re-filled from `rng` and cycled
/// through again, so the result always has full column rank.
fn orthonormalize(v: &mut Array2<f64>, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let (rows, cols) = v.dim();
    for j in 0..cols {
        loop {
            for i in 0..j {
                let dot: f64 = (0..rows).map(|r| v[[r, i]] * v[[r, j]]).sum();
                for r in 0..rows {
                    v[[r, j]] -= dot * v[[r, i]];
                }
            }
            let norm: f64 = (0..rows).map(|r| v[[r, j]] * v[[r, j]]).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for r in 0..rows {
                    v[[r, j]] /= norm;
                }
                break;
            }
            for r in 0..rows {
                v[[r, j]] = normal.sample(rng);
            }
        }
    }
}

/// Projects centered data onto its leading principal subspace.
///
/// Uses subspace iteration on the d x d covariance; t-SNE only consumes
/// pairwise distances, which are invariant to rotations inside the retained
/// subspace, so subspace convergence is all that is required. When the data
/// already has no more than `dims` columns it is returned centered but
/// otherwise untouched.
pub fn pca_project(data: &Array2<f64>, dims: usize, seed: u64) -> Result<Array2<f64>> {
    let (n, d) = data.dim();
    if n == 0 {
        return Err(Error::Size("cannot run PCA on zero points".into()));
    }
    let mean = data.mean_axis(Axis(0)).expect("n >= 1");
    let centered = data - &mean.insert_axis(Axis(0));
    let k = dims.min(d).min(n.saturating_sub(1).max(1));
    if d <= dims {
        return Ok(centered);
    }

    let cov = centered.t().dot(&centered) / n as f64;
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut basis = Array2::from_shape_fn((d, k), |_| normal.sample(&mut rng));
    orthonormalize(&mut basis, &mut rng);
    for _ in 0..60 {
        basis = cov.dot(&basis);
        orthonormalize(&mut basis, &mut rng);
    }
    Ok(centered.dot(&basis))
}

// ---------------------------------------------------------------------------
// Affinities
// ---------------------------------------------------------------------------

fn squared_distances(points: &Array2<f64>) -> Array2<f64> {
    let n = points.nrows();
    let mut d2 = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let dist: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[[i, j]] = dist;
            d2[[j, i]] = dist;
        }
    }
    d2
}

/// Row-conditional affinities at one precision `beta = 1 / (2 sigma^2)`,
/// returning (entropy, row). The diagonal stays zero.
fn row_affinities(d2: &Array2<f64>, i: usize, beta: f64, row: &mut Array1<f64>) -> f64 {
    let n = d2.nrows();
    let mut sum = 0.0;
    let mut dot = 0.0;
    for j in 0..n {
        if j == i {
            row[j] = 0.0;
            continue;
        }
        let p = (-beta * d2[[i, j]]).exp();
        row[j] = p;
        sum += p;
        dot += p * d2[[i, j]];
    }
    if sum <= 0.0 {
        return 0.0;
    }
    // H = log(sum) + beta * E[d^2] in nats.
    let h = sum.ln() + beta * dot / sum;
    row.mapv_inplace(|p| p / sum);
    h
}

/// Row-stochastic conditional affinities with per-point bandwidths
/// calibrated to the target perplexity by binary search on the precision.
fn conditional_affinities(d2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d2.nrows();
    let target_h = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    let mut row = Array1::zeros(n);
    for i in 0..n {
        let mut beta = 1.0;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for _ in 0..64 {
            let h = row_affinities(d2, i, beta, &mut row);
            let diff = h - target_h;
            if diff.abs() < 1e-7 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        row_affinities(d2, i, beta, &mut row);
        p.row_mut(i).assign(&row);
    }
    p
}

/// Symmetrized joint probabilities over all pairs.
fn joint_probabilities(d2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d2.nrows();
    let mut p = conditional_affinities(d2, perplexity);
    let pt = p.t().to_owned();
    p += &pt;
    p /= 2.0 * n as f64;
    p.mapv_inplace(|v| v.max(1e-12));
    for i in 0..n {
        p[[i, i]] = 1e-12;
    }
    p
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const MOMENTUM_EARLY: f64 = 0.5;
const MOMENTUM_LATE: f64 = 0.8;
const MIN_GAIN: f64 = 0.01;

/// Embeds `data` (one row per point) into 2-d.
pub fn run_tsne(data: &Array2<f64>, cfg: &TsneConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n = data.nrows();
    if n < 4 {
        return Err(Error::Size(format!(
            "t-SNE needs at least 4 points, got {n}"
        )));
    }
    if n > MAX_POINTS {
        return Err(Error::Size(format!(
            "exact t-SNE accepts at most {MAX_POINTS} points, got {n}"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("t-SNE input contains non-finite values".into()));
    }

    let projected = pca_project(data, cfg.pca_dims, cfg.seed)?;
    let d2 = squared_distances(&projected);
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let mut p = joint_probabilities(&d2, perplexity);
    p *= EXAGGERATION;

    let mut rng = rng_from_seed(cfg.seed ^ 0x74_73_6e_65); // distinct stream from PCA
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::from_elem((n, 2), 1.0);
    let mut grad = Array2::<f64>::zeros((n, 2));
    let mut q_num = Array2::<f64>::zeros((n, n));

    for iter in 0..cfg.iterations {
        // Student-t numerators and their total.
        let mut q_sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dy0 = y[[i, 0]] - y[[j, 0]];
                let dy1 = y[[i, 1]] - y[[j, 1]];
                let num = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                q_num[[i, j]] = num;
                q_num[[j, i]] = num;
                q_sum += 2.0 * num;
            }
        }
        let q_sum = q_sum.max(1e-12);

        grad.fill(0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let num = q_num[[i, j]];
                let q = (num / q_sum).max(1e-12);
                let mult = 4.0 * (p[[i, j]] - q) * num;
                grad[[i, 0]] += mult * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += mult * (y[[i, 1]] - y[[j, 1]]);
            }
        }

        let momentum = if iter < EXAGGERATION_ITERS {
            MOMENTUM_EARLY
        } else {
            MOMENTUM_LATE
        };
        for i in 0..n {
            for c in 0..2 {
                let same_sign = grad[[i, c]].signum() == velocity[[i, c]].signum();
                gains[[i, c]] = if same_sign {
                    (gains[[i, c]] * 0.8).max(MIN_GAIN)
                } else {
                    gains[[i, c]] + 0.2
                };
                velocity[[i, c]] = momentum * velocity[[i, c]]
                    - cfg.learning_rate * gains[[i, c]] * grad[[i, c]];
                y[[i, c]] += velocity[[i, c]];
            }
        }
        // Re-center so the embedding cannot drift.
        let mean = y.mean_axis(Axis(0)).expect("n >= 1");
        y -= &mean.insert_axis(Axis(0));

        if iter + 1 == EXAGGERATION_ITERS {
            p /= EXAGGERATION;
        }
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
