//! Exact GP regression on a single block of data.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, kernel_matrix_sym, Hyperparams};

/// Largest jitter tried, relative to the mean kernel diagonal.
const MAX_RELATIVE_JITTER: f64 = 1e-2;
const MIN_RELATIVE_JITTER: f64 = 1e-10;

/// Jitters tried in order: 0, then `1e-10·scale`, `1e-9·scale`, ... `1e-2·scale`.
pub fn jitter_ladder(scale: f64) -> Vec<f64> {
    let mut ladder = vec![0.0];
    let mut rel = MIN_RELATIVE_JITTER;
    while rel <= MAX_RELATIVE_JITTER * (1.0 + 1e-9) {
        ladder.push(rel * scale);
        rel *= 10.0;
    }
    ladder
}

/// Cholesky of a symmetric matrix, adding diagonal jitter from the ladder until it succeeds.
///
/// `scale` sets the ladder units, usually the mean of the noise-free diagonal.
pub fn cholesky_with_jitter(
    matrix: &DMatrix<f64>,
    scale: f64,
    context: impl FnOnce() -> String,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let ladder = jitter_ladder(scale);
    for &jitter in &ladder {
        let mut m = matrix.clone();
        if jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(m) {
            // nalgebra only rejects non-positive pivots; reject non-finite factors too
            if chol.l_dirty().iter().all(|v| v.is_finite()) {
                return Ok((chol, jitter));
            }
        }
    }
    Err(Error::NumericalBreakdown {
        context: context(),
        jitters: ladder,
    })
}

fn check_training_data(x: &DMatrix<f64>, y: &DVector<f64>, hp: &Hyperparams) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Contract("GP needs at least one training point".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "training targets",
            expected: x.nrows(),
            actual: y.len(),
        });
    }
    hp.check_dim("training inputs", x.ncols())?;
    if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
        return Err(Error::Contract("training data contains non-finite values".into()));
    }
    if !hp.is_finite() {
        return Err(Error::Contract("hyperparameters must be finite".into()));
    }
    Ok(())
}

/// Factors `k(X, X) + σ_ε² I`; returns the kernel matrix alongside for reuse.
fn factor_noisy_kernel(
    x: &DMatrix<f64>,
    hp: &Hyperparams,
) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>, f64)> {
    let k = kernel_matrix_sym(x, hp)?;
    let mut ky = k.clone();
    let noise = hp.noise_variance();
    for i in 0..ky.nrows() {
        ky[(i, i)] += noise;
    }
    let scale = k.diagonal().mean();
    let (chol, jitter) = cholesky_with_jitter(&ky, scale, || format!("K + σ²I of size {}", x.nrows()))?;
    Ok((k, chol, jitter))
}

/// One fitted GP expert. Immutable after construction.
#[derive(Debug, Clone)]
pub struct GpModel {
    x: DMatrix<f64>,
    y: DVector<f64>,
    hp: Hyperparams,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
    jitter_used: f64,
}

impl GpModel {
    /// Factors the noisy kernel matrix and solves for the weight vector `(K + σ²I)⁻¹ y`.
    pub fn fit(x: DMatrix<f64>, y: DVector<f64>, hp: Hyperparams) -> Result<Self> {
        check_training_data(&x, &y, &hp)?;
        let (_, chol, jitter_used) = factor_noisy_kernel(&x, &hp)?;
        let weights = chol.solve(&y);
        Ok(Self {
            x,
            y,
            hp,
            chol,
            weights,
            jitter_used,
        })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn n_train(&self) -> usize {
        self.x.nrows()
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Lower-triangular factor `L` with `L Lᵀ = K + (σ² + jitter) I`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `(K + σ²I)⁻¹ rhs` using the stored factor.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    /// Cross-covariance `k(X_train, xstar)`, one column per test point.
    pub fn cross_covariance(&self, xstar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        kernel_matrix(&self.x, xstar, &self.hp)
    }

    /// Predictive mean and noisy-observation variance at each row of `xstar`.
    pub fn predict(&self, xstar: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.hp.check_dim("test inputs", xstar.ncols())?;
        let n_test = xstar.nrows();
        let mut means = DVector::zeros(n_test);
        let mut variances = DVector::zeros(n_test);
        let sf2 = self.hp.signal_variance();
        let noise = self.hp.noise_variance();
        let floor = noise * (1.0 - 1e-10);
        // bounded chunks keep the n × n' cross-covariance from dominating memory
        let mut start = 0;
        while start < n_test {
            let len = PREDICT_CHUNK.min(n_test - start);
            let kstar = self.cross_covariance(&xstar.rows(start, len).into_owned())?;
            means.rows_mut(start, len).copy_from(&kstar.tr_mul(&self.weights));
            let v = self
                .chol
                .l_dirty()
                .solve_lower_triangular(&kstar)
                .expect("Cholesky factor has a nonzero diagonal");
            for (j, col) in v.column_iter().enumerate() {
                variances[start + j] = (sf2 - col.norm_squared() + noise).max(floor);
            }
            start += len;
        }
        Ok((means, variances))
    }
}

const PREDICT_CHUNK: usize = 2048;

/// Negative log marginal likelihood and its gradient in the canonical coordinate order.
pub fn nlml(x: &DMatrix<f64>, y: &DVector<f64>, hp: &Hyperparams) -> Result<(f64, DVector<f64>)> {
    check_training_data(x, y, hp)?;
    let n = x.nrows();
    let (k, chol, _) = factor_noisy_kernel(x, hp)?;
    let alpha = chol.solve(y);
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    let value = 0.5 * y.dot(&alpha) + log_det_half + 0.5 * n as f64 * (2.0 * PI).ln();

    // ∂/∂θ = -½ tr(W ∂K_y/∂θ) with W = ααᵀ - K_y⁻¹
    let mut w = chol.inverse();
    w.neg_mut();
    w.ger(1.0, &alpha, &alpha, 1.0);

    let d = hp.dim();
    let mut grad = DVector::zeros(d + 2);
    let mut wk = 0.0;
    let mut per_dim = vec![0.0; d];
    let inv_l2: Vec<f64> = hp.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect();
    for j in 0..n {
        for i in 0..n {
            let wk_ij = w[(i, j)] * k[(i, j)];
            wk += wk_ij;
            if i != j {
                for (c, acc) in per_dim.iter_mut().enumerate() {
                    let diff = x[(i, c)] - x[(j, c)];
                    *acc += wk_ij * diff * diff * inv_l2[c];
                }
            }
        }
    }
    grad[0] = -wk;
    for (c, acc) in per_dim.into_iter().enumerate() {
        grad[c + 1] = -0.5 * acc;
    }
    grad[d + 1] = -hp.noise_variance() * w.trace();
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_hp(sf: f64, l: f64, noise_sd: f64) -> Hyperparams {
        Hyperparams::isotropic(1, sf.ln(), l.ln(), noise_sd.ln())
    }

    #[test]
    fn ladder_shape() {
        let l = jitter_ladder(2.0);
        assert_eq!(l.len(), 10);
        assert_eq!(l[0], 0.0);
        assert_relative_eq!(l[1], 2e-10, max_relative = 1e-12);
        assert_relative_eq!(*l.last().unwrap(), 2e-2, max_relative = 1e-9);
    }

    #[test]
    fn single_point_fit() {
        let x = DMatrix::from_element(1, 1, 0.0);
        let y = DVector::from_element(1, 0.0);
        let m = GpModel::fit(x, y, scalar_hp(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(m.cholesky_factor()[(0, 0)], 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(m.weights()[0], 0.0);
        assert_eq!(m.jitter_used(), 0.0);
    }

    #[test]
    fn single_point_nlml() {
        let x = DMatrix::from_element(1, 1, 0.0);
        let y = DVector::from_element(1, 0.0);
        let (v, _) = nlml(&x, &y, &scalar_hp(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(v, 1.2655121235, epsilon = 1e-9);
    }

    #[test]
    fn zero_targets_leave_only_complexity_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let hp = Hyperparams::new(0.1, vec![0.2, -0.1], -0.7);
        let y = DVector::zeros(6);
        let (v, _) = nlml(&x, &y, &hp).unwrap();
        let m = GpModel::fit(x, y, hp).unwrap();
        let logdet: f64 = m.cholesky_factor().diagonal().iter().map(|d| d.ln()).sum();
        assert_relative_eq!(v, logdet + 3.0 * (2.0 * PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn duplicate_points_need_jitter() {
        let x = DMatrix::from_row_slice(2, 1, &[0.5, 0.5]);
        let y = DVector::from_row_slice(&[1.0, 1.0]);
        let hp = Hyperparams::isotropic(1, 0.0, 0.0, -1e3);
        let m = GpModel::fit(x, y, hp).unwrap();
        assert!(m.jitter_used() > 0.0);
    }

    #[test]
    fn reconstruction_and_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::from_fn(30, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
        let hp = Hyperparams::new(0.3, vec![-0.2, 0.1], -2.0);
        let m = GpModel::fit(x.clone(), y.clone(), hp.clone()).unwrap();
        let l = m.cholesky_factor();
        let mut ky = kernel_matrix_sym(&x, &hp).unwrap();
        for i in 0..30 {
            ky[(i, i)] += hp.noise_variance() + m.jitter_used();
        }
        let recon = &l * l.transpose();
        assert!((&recon - &ky).norm() <= 1e-8 * ky.norm());
        let resid = &ky * m.weights() - &y;
        assert!(resid.norm() <= 1e-8 * y.norm());
    }

    #[test]
    fn scalar_prediction() {
        let x = DMatrix::from_element(1, 1, 0.0);
        let y = DVector::from_element(1, 1.0);
        let m = GpModel::fit(x, y, scalar_hp(1.0, 1.0, 1.0)).unwrap();
        let (mu, var) = m.predict(&DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_relative_eq!(mu[0], 0.3032653299, epsilon = 1e-10);
        assert_relative_eq!(var[0], 1.8160602794, epsilon = 1e-10);
    }

    #[test]
    fn near_interpolation_and_prior_recovery() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let y = DVector::from_row_slice(&[0.2, -0.7, 1.3]);
        let hp = scalar_hp(1.0, 0.5, 1e-8);
        let m = GpModel::fit(x, y, hp.clone()).unwrap();
        let (mu, _) = m.predict(&DMatrix::from_element(1, 1, 0.5)).unwrap();
        assert!((mu[0] + 0.7).abs() < 1e-4);

        let far = DMatrix::from_element(1, 1, 50.0);
        let (mu, var) = m.predict(&far).unwrap();
        assert_eq!(mu[0], 0.0);
        assert_relative_eq!(var[0], hp.prior_variance(), epsilon = 1e-15);
    }

    #[test]
    fn training_variance_at_least_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(40, 1, |_, _| rng.random_range(0.0..1.0));
        let y = x.column(0).map(|v: f64| (6.0 * v).sin());
        let hp = scalar_hp(1.0, 0.2, 0.1);
        let m = GpModel::fit(x.clone(), y, hp.clone()).unwrap();
        let (_, var) = m.predict(&x).unwrap();
        assert!(var.iter().all(|v| *v >= hp.noise_variance() * (1.0 - 1e-10)));
    }

    #[test]
    fn more_data_never_increases_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DMatrix::from_fn(60, 2, |_, _| rng.random_range(0.0..1.0));
        let y = DVector::from_fn(60, |_, _| rng.random_range(-1.0..1.0));
        let hp = Hyperparams::new(0.0, vec![-1.0, -1.0], -1.5);
        let small = GpModel::fit(x.rows(0, 25).into_owned(), y.rows(0, 25).into_owned(), hp.clone()).unwrap();
        let big = GpModel::fit(x, y, hp).unwrap();
        let xs = DMatrix::from_fn(50, 2, |_, _| rng.random_range(-0.2..1.2));
        let (_, v_small) = small.predict(&xs).unwrap();
        let (_, v_big) = big.predict(&xs).unwrap();
        for (b, s) in v_big.iter().zip(v_small.iter()) {
            assert!(*b <= s + 1e-8);
        }
    }

    fn fd_nlml(x: &DMatrix<f64>, y: &DVector<f64>, hp: &Hyperparams, step: f64) -> DVector<f64> {
        let base = hp.to_vector();
        DVector::from_fn(base.len(), |p, _| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[p] += step;
            minus[p] -= step;
            let f = |v: &DVector<f64>| nlml(x, y, &Hyperparams::from_slice(v.as_slice()).unwrap()).unwrap().0;
            (f(&plus) - f(&minus)) / (2.0 * step)
        })
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..10 {
            let n = rng.random_range(2..=20);
            let d = rng.random_range(1..=3);
            let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5));
            let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let hp = Hyperparams::new(
                rng.random_range(-0.5..0.5),
                (0..d).map(|_| rng.random_range(-0.7..0.5)).collect(),
                rng.random_range(-1.5..-0.3),
            );
            let (_, g) = nlml(&x, &y, &hp).unwrap();
            let fd = fd_nlml(&x, &y, &hp, 1e-6);
            for (a, b) in g.iter().zip(fd.iter()) {
                let tol = 1e-5 * a.abs().max(b.abs()).max(1e-2);
                assert!((a - b).abs() <= tol, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = DMatrix::from_element(2, 1, 0.0);
        let y = DVector::from_element(3, 0.0);
        let hp = Hyperparams::default_for_dim(1);
        assert!(matches!(GpModel::fit(x, y, hp.clone()), Err(Error::DimensionMismatch { .. })));
        let x = DMatrix::from_element(1, 1, f64::NAN);
        let y = DVector::from_element(1, 0.0);
        assert!(matches!(GpModel::fit(x, y, hp), Err(Error::Contract(_))));
    }
}
