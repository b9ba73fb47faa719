//! Shared least-squares machinery.
//!
//! Design matrices use the zero-prefix lag convention: row `n` sees the
//! window `[x(n), x(n−1), …]` with samples before index 0 taken as zero,
//! matching the causal zero-state convolution of the channel module.
//!
//! Solving goes through an orthogonal decomposition (SVD) of the
//! column-scaled design rather than the textbook normal-equation inverse;
//! the solution is identical but survives the poorly conditioned designs
//! that Volterra regressions produce. Rank deficiency and underdetermined
//! systems surface as [`Error::IllConditioned`] carrying the condition
//! estimate, unless the caller opts into a ridge parameter.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::signals::Signal;

/// Singular values below `RANK_TOLERANCE × σ_max` count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// A linear regression `design · c ≈ target`.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    design: DMatrix<f64>,
    target: DVector<f64>,
}

impl RegressionProblem {
    pub fn new(design: DMatrix<f64>, target: DVector<f64>) -> Result<Self> {
        if design.nrows() != target.len() {
            return Err(Error::invalid(
                "target",
                format!(
                    "design has {} rows but target has {} entries",
                    design.nrows(),
                    target.len()
                ),
            ));
        }
        if design.ncols() == 0 || design.nrows() == 0 {
            return Err(Error::invalid("design", "design matrix must be non-empty"));
        }
        Ok(Self { design, target })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn cols(&self) -> usize {
        self.design.ncols()
    }
}

/// Options for [`solve_with`].
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Ridge parameter λ; `None` keeps the plain least-squares problem and
    /// makes rank deficiency an error.
    pub ridge: Option<f64>,
    /// Relative singular-value cutoff for the rank decision.
    pub rank_tolerance: f64,
    /// Truncated pseudo-inverse mode: directions of the column-scaled
    /// design with singular value below `cutoff × σ_max` are zeroed
    /// (minimum-norm solution on the excited subspace) instead of being
    /// solved or raising a conditioning error. Band-limited pilots leave
    /// entire frequency regions unexcited; truncation keeps the estimate
    /// bounded there.
    pub truncate: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            ridge: None,
            rank_tolerance: RANK_TOLERANCE,
            truncate: None,
        }
    }
}

/// Solution of a least-squares problem with diagnostics.
#[derive(Debug, Clone)]
pub struct LsqSolution {
    pub coefficients: DVector<f64>,
    /// Condition estimate of the column-scaled design (σ_max/σ_min).
    pub condition: f64,
    /// Residual 2-norm `‖X·c − w‖`.
    pub residual_norm: f64,
    /// Residual 2-norm of the untruncated least-squares fit (the distance
    /// from the target to the full column space). Equals `residual_norm`
    /// unless truncation dropped directions.
    pub subspace_residual_norm: f64,
    /// Numerical rank of the column-scaled design.
    pub rank: usize,
}

/// Lagged design matrix for a linear FIR model: row `n` is
/// `[x(n), x(n−1), …, x(n−L+1)]` (zero prefix), one row per sample.
pub fn linear_design(x: &Signal, taps: usize) -> Result<DMatrix<f64>> {
    if taps == 0 {
        return Err(Error::invalid("taps", "must be ≥ 1"));
    }
    if taps > x.len() {
        return Err(Error::invalid(
            "taps",
            format!("filter length {taps} exceeds signal length {}", x.len()),
        ));
    }
    let xs = x.samples();
    Ok(DMatrix::from_fn(xs.len(), taps, |n, i| {
        if n >= i {
            xs[n - i]
        } else {
            0.0
        }
    }))
}

/// Design matrix for a Hammerstein model of odd order `max_order`: the
/// lagged windows of `u, u³, …, u^K`, k-major, `((K+1)/2)·L₂` columns.
/// `design · g'` with the k-major Hammerstein coefficient layout equals the
/// Hammerstein double sum.
pub fn hammerstein_design(u: &Signal, taps: usize, max_order: usize) -> Result<DMatrix<f64>> {
    if max_order % 2 == 0 || max_order == 0 {
        return Err(Error::invalid("max_order", "must be a positive odd integer"));
    }
    if taps == 0 {
        return Err(Error::invalid("taps", "must be ≥ 1"));
    }
    if taps > u.len() {
        return Err(Error::invalid(
            "taps",
            format!("filter length {taps} exceeds signal length {}", u.len()),
        ));
    }
    let orders = max_order.div_ceil(2);
    let us = u.samples();
    let mut design = DMatrix::zeros(us.len(), orders * taps);
    for (j, order) in (1..=max_order).step_by(2).enumerate() {
        let powered: Vec<f64> = us.iter().map(|v| v.powi(order as i32)).collect();
        for i in 0..taps {
            let col = j * taps + i;
            for n in i..us.len() {
                design[(n, col)] = powered[n - i];
            }
        }
    }
    Ok(design)
}

/// Least squares with default options (no ridge).
pub fn solve(problem: &RegressionProblem) -> Result<LsqSolution> {
    solve_with(problem, &SolveOptions::default())
}

/// Least squares via SVD of the column-scaled design.
pub fn solve_with(problem: &RegressionProblem, options: &SolveOptions) -> Result<LsqSolution> {
    let x = problem.design();
    let w = problem.target();
    let (n, p) = (x.nrows(), x.ncols());

    // Column scaling makes the condition estimate meaningful when columns
    // carry wildly different magnitudes (u vs u³ regressors).
    let col_norms: Vec<f64> = (0..p).map(|j| x.column(j).norm()).collect();
    if let Some(ridge) = options.ridge {
        if !(ridge.is_finite() && ridge >= 0.0) {
            return Err(Error::invalid("ridge", "must be finite and ≥ 0"));
        }
        if ridge > 0.0 {
            return solve_ridge(problem, ridge);
        }
    }
    let truncating = options.truncate.is_some();
    if n < p && !truncating {
        return Err(Error::IllConditioned { condition: f64::INFINITY });
    }
    if col_norms.iter().any(|&c| c == 0.0) && !truncating {
        return Err(Error::IllConditioned { condition: f64::INFINITY });
    }

    let mut scaled = x.clone();
    for (j, &norm) in col_norms.iter().enumerate() {
        if norm > 0.0 {
            scaled.column_mut(j).scale_mut(1.0 / norm);
        }
    }

    // Thin QR first: the SVD then only runs on the small triangular factor
    // (the designs here are tall and skinny).
    let (q_mat, svd) = if n >= p {
        let qr = scaled.qr();
        let q_mat = qr.q();
        let svd = qr.r().svd(true, true);
        (Some(q_mat), svd)
    } else {
        (None, scaled.svd(true, true))
    };
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let cutoff = match options.truncate {
        Some(t) => t * smax,
        None => options.rank_tolerance * smax,
    };
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    if rank < p && !truncating {
        return Err(Error::IllConditioned { condition });
    }

    // Left-rotated target: Uᵀ·(Qᵀw) (or Uᵀw when no QR step was taken).
    let u_mat = svd.u.as_ref().expect("u computed");
    let v_t = svd.v_t.as_ref().expect("v_t computed");
    let rotated = match &q_mat {
        Some(q) => q.transpose() * w,
        None => w.clone(),
    };
    let mut z = u_mat.transpose() * &rotated;

    // Minimum-norm solution over the retained directions.
    let mut z_solve = z.clone();
    for (zi, &s) in z_solve.iter_mut().zip(svd.singular_values.iter()) {
        if s > cutoff {
            *zi /= s;
        } else {
            *zi = 0.0;
        }
    }
    let scaled_coeffs = v_t.transpose() * z_solve;
    let coefficients = DVector::from_iterator(
        p,
        scaled_coeffs
            .iter()
            .zip(&col_norms)
            .map(|(c, norm)| if *norm > 0.0 { c / norm } else { 0.0 }),
    );
    let residual_norm = (x * &coefficients - w).norm();

    // Distance from the target to the full (numerically nonzero) column
    // space, computed as an explicit residual vector — the squared-norm
    // difference form cancels catastrophically for near-exact fits.
    let subspace_residual_norm = {
        for (zi, &s) in z.iter_mut().zip(svd.singular_values.iter()) {
            if s <= RANK_TOLERANCE * smax {
                *zi = 0.0;
            }
        }
        match &q_mat {
            Some(q) => (w - q * (u_mat * z)).norm(),
            None => (w - u_mat * z).norm(),
        }
    };
    Ok(LsqSolution {
        coefficients,
        condition,
        residual_norm,
        subspace_residual_norm,
        rank,
    })
}

/// Ridge regression `min ‖Xc − w‖² + λ‖c‖²` via the augmented system
/// `[X; √λ·I]`, which is always full rank for λ > 0.
fn solve_ridge(problem: &RegressionProblem, ridge: f64) -> Result<LsqSolution> {
    let x = problem.design();
    let w = problem.target();
    let (n, p) = (x.nrows(), x.ncols());
    let sqrt_l = ridge.sqrt();

    let mut augmented = DMatrix::zeros(n + p, p);
    augmented.view_mut((0, 0), (n, p)).copy_from(x);
    for j in 0..p {
        augmented[(n + j, j)] = sqrt_l;
    }
    let mut target = DVector::zeros(n + p);
    target.rows_mut(0, n).copy_from(w);

    let svd = augmented.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let coefficients = svd
        .solve(&target, 0.0)
        .map_err(|_| Error::IllConditioned { condition })?;
    let residual_norm = (x * &coefficients - w).norm();
    let rank = svd.singular_values.iter().filter(|&&s| s > 0.0).count();
    Ok(LsqSolution {
        coefficients,
        condition,
        residual_norm,
        subspace_residual_norm: residual_norm,
        rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::FirFilter;
    use crate::signals::matched_white_noise;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_design_windows() {
        let x = Signal::new(vec![1.0, 2.0]).unwrap();
        let d = linear_design(&x, 2).unwrap();
        assert_eq!(d.nrows(), 2);
        assert_eq!(d[(0, 0)], 1.0);
        assert_eq!(d[(0, 1)], 0.0);
        assert_eq!(d[(1, 0)], 2.0);
        assert_eq!(d[(1, 1)], 1.0);
    }

    #[test]
    fn linear_design_single_tap_is_signal() {
        let x = Signal::new(vec![3.0, -1.0, 2.0]).unwrap();
        let d = linear_design(&x, 1).unwrap();
        assert_eq!(d.as_slice(), x.samples());
    }

    #[test]
    fn linear_design_rejects_excess_taps() {
        let x = Signal::new(vec![1.0, 2.0]).unwrap();
        assert!(linear_design(&x, 3).is_err());
    }

    #[test]
    fn design_times_taps_equals_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Signal::new((0..50).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let r = FirFilter::new((0..7).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let d = linear_design(&x, 7).unwrap();
        let coeffs = DVector::from_column_slice(r.taps());
        let via_design = d * coeffs;
        let via_conv = r.filter(&x);
        for (a, b) in via_design.iter().zip(via_conv.samples()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn hammerstein_design_degenerate_order_one() {
        let u = Signal::new(vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let lin = linear_design(&u, 2).unwrap();
        let ham = hammerstein_design(&u, 2, 1).unwrap();
        assert_eq!(lin, ham);
    }

    #[test]
    fn hammerstein_design_scalar_row() {
        let u = Signal::new(vec![2.0]).unwrap();
        let d = hammerstein_design(&u, 1, 3).unwrap();
        assert_eq!(d.nrows(), 1);
        assert_eq!(d.ncols(), 2);
        assert_eq!(d[(0, 0)], 2.0);
        assert_eq!(d[(0, 1)], 8.0);
    }

    #[test]
    fn hammerstein_design_matches_channel_oracle() {
        use crate::channel::{hammerstein_coeffs, Amplifier, PolynomialAmplifier, WhModel};
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let u = Signal::new((0..60).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        let g = FirFilter::new(vec![0.8, -0.2, 0.05]).unwrap();
        let amp = PolynomialAmplifier::cubic(1.1, -0.04);
        let model = WhModel::new(
            FirFilter::identity(),
            Amplifier::Polynomial(amp.clone()),
            g.clone(),
            0.0,
        )
        .unwrap();
        let w = model.forward_noiseless(&u).w;
        let design = hammerstein_design(&u, 3, 3).unwrap();
        let gp = DVector::from_vec(hammerstein_coeffs(&amp, &g));
        let predicted = design * gp;
        for (a, b) in predicted.iter().zip(w.samples()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn solve_recovers_taps_exactly_noiseless() {
        let reference = Signal::new(vec![1.0]).unwrap();
        let x = matched_white_noise(&reference, 400, 3).unwrap();
        let truth = FirFilter::new(vec![0.5, -0.25, 0.125, 1.5, -0.3]).unwrap();
        let w = truth.filter(&x);
        let design = linear_design(&x, truth.len()).unwrap();
        let problem =
            RegressionProblem::new(design, DVector::from_column_slice(w.samples())).unwrap();
        let solution = solve(&problem).unwrap();
        for (a, b) in solution.coefficients.iter().zip(truth.taps()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert!(solution.residual_norm <= 1e-9);
    }

    #[test]
    fn solve_residual_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Signal::new((0..200).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let design = linear_design(&x, 6).unwrap();
        let noisy: DVector<f64> = DVector::from_iterator(
            200,
            (0..200).map(|_| rng.random_range(-1.0..1.0)),
        );
        let problem = RegressionProblem::new(design.clone(), noisy.clone()).unwrap();
        let solution = solve(&problem).unwrap();
        let residual = &design * &solution.coefficients - &noisy;
        let gram = design.transpose() * residual;
        let bound = 1e-8 * design.norm() * noisy.norm();
        for v in gram.iter() {
            assert!(v.abs() <= bound, "{v} vs {bound}");
        }
    }

    #[test]
    fn solve_underdetermined_fails_without_ridge() {
        let x = Signal::new(vec![1.0, 2.0, 3.0]).unwrap();
        let design = linear_design(&x, 3).unwrap();
        // 2 rows, 3 cols.
        let sub = design.rows(0, 2).into_owned();
        let problem = RegressionProblem::new(sub, DVector::from_vec(vec![1.0, 2.0])).unwrap();
        match solve(&problem) {
            Err(Error::IllConditioned { condition }) => assert!(condition.is_infinite()),
            other => panic!("expected conditioning error, got {other:?}"),
        }
    }

    #[test]
    fn solve_underdetermined_ok_with_ridge() {
        let x = Signal::new(vec![1.0, 2.0, 3.0]).unwrap();
        let design = linear_design(&x, 3).unwrap().rows(0, 2).into_owned();
        let problem = RegressionProblem::new(design, DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let opts = SolveOptions {
            ridge: Some(1e-6),
            ..Default::default()
        };
        let solution = solve_with(&problem, &opts).unwrap();
        assert!(solution.residual_norm <= 1e-3);
    }

    #[test]
    fn solve_rank_deficient_collinear_columns() {
        // Two identical columns.
        let design = DMatrix::from_fn(10, 2, |i, _| (i as f64).sin() + 1.5);
        let target = DVector::from_fn(10, |i, _| i as f64);
        let problem = RegressionProblem::new(design, target).unwrap();
        match solve(&problem) {
            Err(Error::IllConditioned { condition }) => assert!(condition > 1e10),
            other => panic!("expected conditioning error, got {other:?}"),
        }
    }

    #[test]
    fn doubling_record_length_adds_three_db() {
        // E[Q] ≈ 10·log10(N/L) + SNR: doubling N adds 3.01 dB.
        use crate::metrics::q_value;
        let truth = FirFilter::new(vec![0.9, -0.4, 0.2, 0.1]).unwrap();
        let l = truth.len();
        let snr_linear = 100.0; // 20 dB
        let mut mean_q = [0.0f64; 2];
        let trials = 100;
        for (idx, n) in [2000usize, 4000].iter().enumerate() {
            let mut acc = 0.0;
            for seed in 0..trials {
                let x = matched_white_noise(&Signal::new(vec![1.0]).unwrap(), *n, 1000 + seed).unwrap();
                let v = truth.filter(&x);
                let sigma2 = v.mean_power() / snr_linear;
                let noise = matched_white_noise(&Signal::new(vec![sigma2.sqrt()]).unwrap(), *n, 5000 + seed).unwrap();
                let w: Vec<f64> = v
                    .samples()
                    .iter()
                    .zip(noise.samples())
                    .map(|(a, b)| a + b)
                    .collect();
                let design = linear_design(&x, l).unwrap();
                let problem = RegressionProblem::new(design, DVector::from_vec(w)).unwrap();
                let sol = solve(&problem).unwrap();
                let est = FirFilter::new(sol.coefficients.iter().copied().collect()).unwrap();
                acc += q_value(&truth, &est).unwrap();
            }
            mean_q[idx] = acc / trials as f64;
        }
        let gain = mean_q[1] - mean_q[0];
        assert!((gain - 3.01).abs() <= 1.0, "gain = {gain}");
    }
}
