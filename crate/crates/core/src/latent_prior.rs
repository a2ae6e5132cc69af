//! Temporal GP prior over the latent coordinates, the diagonal Gaussian
//! posterior `q(X)`, its KL divergence, and extension of `q` to unseen times.
//!
//! The jitter added to the temporal Gram matrix is treated as a white-noise
//! component of the prior: it appears on the diagonal of `K_tt` and in the
//! cross covariance wherever two time stamps coincide exactly.

use nalgebra::DMatrix;

use crate::error::{CgpdsError, Result};
use crate::kernels::Kernel;
use crate::linalg::Factored;

/// Strictly increasing, finite time stamps.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGrid {
    times: Vec<f64>,
}

impl TemporalGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(CgpdsError::input("temporal grid needs at least one time stamp"));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(CgpdsError::input("time stamps must be finite"));
        }
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(CgpdsError::Order(format!("{} is followed by {}", w[0], w[1])));
        }
        Ok(TemporalGrid { times })
    }

    /// Evenly spaced grid `from, from + step, ...` up to and including `to`.
    pub fn range(from: f64, to: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(to >= from) {
            return Err(CgpdsError::input("time range needs step > 0 and to >= from"));
        }
        let n = ((to - from) / step + 1e-9).floor() as usize + 1;
        TemporalGrid::new((0..n).map(|i| from + i as f64 * step).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn as_points(&self) -> DMatrix<f64> {
        points(&self.times)
    }
}

fn points(times: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(times.len(), 1, times)
}

/// Factorized Gaussian `q(X) = Π_q N(x_q; μ_q, diag(s_q))`.
///
/// Both matrices are stored N×Q (one row per time point).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLatentX {
    pub means: DMatrix<f64>,
    pub variances: DMatrix<f64>,
}

impl VariationalLatentX {
    pub fn new(means: DMatrix<f64>, variances: DMatrix<f64>) -> Result<Self> {
        if means.shape() != variances.shape() {
            return Err(CgpdsError::shape("latent means and variances differ in shape"));
        }
        if means.ncols() == 0 {
            return Err(CgpdsError::config("latent dimension Q must be at least 1"));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(CgpdsError::input("latent variances must be finite and positive"));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(CgpdsError::input("latent means must be finite"));
        }
        Ok(VariationalLatentX { means, variances })
    }

    pub fn n_points(&self) -> usize {
        self.means.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.ncols()
    }

    /// Stacks two posteriors over disjoint point sets (rows of `self` first).
    pub fn concat(&self, other: &VariationalLatentX) -> Result<VariationalLatentX> {
        if self.latent_dim() != other.latent_dim() {
            return Err(CgpdsError::shape("latent dimensions differ"));
        }
        let n = self.n_points();
        let q = self.latent_dim();
        let total = n + other.n_points();
        let stack = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            DMatrix::from_fn(total, q, |i, j| if i < n { a[(i, j)] } else { b[(i - n, j)] })
        };
        Ok(VariationalLatentX {
            means: stack(&self.means, &other.means),
            variances: stack(&self.variances, &other.variances),
        })
    }

    pub fn rows(&self, range: std::ops::Range<usize>) -> VariationalLatentX {
        let len = range.len();
        VariationalLatentX {
            means: self.means.rows(range.start, len).into_owned(),
            variances: self.variances.rows(range.start, len).into_owned(),
        }
    }
}

/// Gradient of the latent KL term.
#[derive(Debug, Clone)]
pub struct LatentKlGrad {
    /// ∂KL/∂μ, N×Q.
    pub means: DMatrix<f64>,
    /// ∂KL/∂log s, N×Q.
    pub log_variances: DMatrix<f64>,
    /// ∂KL/∂log θ_x.
    pub kernel_log_params: Vec<f64>,
}

fn temporal_gram(times: &[f64], kernel: &Kernel) -> Result<Factored> {
    if kernel.input_dim() != 1 {
        return Err(CgpdsError::config("the temporal kernel must have input_dim 1"));
    }
    kernel.gram(&points(times), &format!("temporal ({})", kernel.family()))
}

fn check_rows(qx: &VariationalLatentX, n: usize) -> Result<()> {
    if qx.n_points() != n {
        return Err(CgpdsError::shape(format!(
            "q(X) covers {} points but the grid has {n}",
            qx.n_points()
        )));
    }
    Ok(())
}

fn kl_with_gram(qx: &VariationalLatentX, gram: &Factored, want_grad: bool) -> (f64, Option<(LatentKlGrad, DMatrix<f64>)>) {
    let n = gram.dim();
    let kinv = gram.inverse();
    let log_det = gram.log_det();
    let solved = gram.solve(&qx.means);
    let mut kl = 0.0;
    for q in 0..qx.latent_dim() {
        let mut trace = 0.0;
        let mut log_s = 0.0;
        for i in 0..n {
            let s = qx.variances[(i, q)];
            trace += kinv[(i, i)] * s;
            log_s += s.ln();
        }
        let quad = qx.means.column(q).dot(&solved.column(q));
        kl += 0.5 * (trace + quad - n as f64 + log_det - log_s);
    }
    if !want_grad {
        return (kl, None);
    }
    let mut g_logvar = DMatrix::zeros(n, qx.latent_dim());
    for q in 0..qx.latent_dim() {
        for i in 0..n {
            g_logvar[(i, q)] = 0.5 * (kinv[(i, i)] * qx.variances[(i, q)] - 1.0);
        }
    }
    // ∂KL/∂K = ½ Σ_q [K⁻¹ − K⁻¹(diag s_q + μ_q μ_qᵀ)K⁻¹]
    let qdim = qx.latent_dim() as f64;
    let mut inner = &solved * solved.transpose();
    let mut ds = DMatrix::zeros(n, n);
    for i in 0..n {
        ds[(i, i)] = qx.variances.row(i).iter().sum::<f64>();
    }
    inner += &kinv * ds * &kinv;
    let g_k = (&kinv * qdim - inner) * 0.5;
    (
        kl,
        Some((
            LatentKlGrad {
                means: solved,
                log_variances: g_logvar,
                kernel_log_params: Vec::new(),
            },
            g_k,
        )),
    )
}

/// `Σ_q KL[N(μ_q, diag s_q) || N(0, K_x)]` over the given grid.
pub fn kl_latent_prior(qx: &VariationalLatentX, grid: &TemporalGrid, kernel: &Kernel) -> Result<f64> {
    check_rows(qx, grid.len())?;
    let gram = temporal_gram(grid.times(), kernel)?;
    Ok(kl_with_gram(qx, &gram, false).0)
}

/// KL term together with its gradient w.r.t. μ, log s and the log kernel parameters.
pub fn kl_latent_prior_with_grad(
    qx: &VariationalLatentX,
    grid: &TemporalGrid,
    kernel: &Kernel,
) -> Result<(f64, LatentKlGrad)> {
    check_rows(qx, grid.len())?;
    kl_times_with_grad(qx, grid.times(), kernel)
}

fn kl_times_with_grad(qx: &VariationalLatentX, times: &[f64], kernel: &Kernel) -> Result<(f64, LatentKlGrad)> {
    let gram = temporal_gram(times, kernel)?;
    let (kl, grad) = kl_with_gram(qx, &gram, true);
    let (mut grad, g_k) = grad.expect("gradient requested");
    grad.kernel_log_params = kernel.gram_log_param_grad(&points(times), &g_k, gram.rel_jitter);
    Ok((kl, grad))
}

fn check_distinct(times: &[f64]) -> Result<()> {
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(CgpdsError::input(format!(
            "time stamp {} appears in both the training and the test grid",
            w[0]
        )));
    }
    if sorted.iter().any(|t| !t.is_finite()) {
        return Err(CgpdsError::input("time stamps must be finite"));
    }
    Ok(())
}

/// KL of a factorized `q` over the concatenated times `[t; t_*]` against the
/// joint temporal prior. The concatenation need not be sorted but must not
/// contain duplicates.
pub fn joint_prior_kl(qx_joint: &VariationalLatentX, joint_times: &[f64], kernel: &Kernel) -> Result<f64> {
    check_distinct(joint_times)?;
    check_rows(qx_joint, joint_times.len())?;
    let gram = temporal_gram(joint_times, kernel)?;
    Ok(kl_with_gram(qx_joint, &gram, false).0)
}

pub fn joint_prior_kl_with_grad(
    qx_joint: &VariationalLatentX,
    joint_times: &[f64],
    kernel: &Kernel,
) -> Result<(f64, LatentKlGrad)> {
    check_distinct(joint_times)?;
    check_rows(qx_joint, joint_times.len())?;
    kl_times_with_grad(qx_joint, joint_times, kernel)
}

/// Cross covariance between two time sets, with the Gram jitter added where
/// time stamps coincide.
fn cross_cov(a: &[f64], b: &[f64], kernel: &Kernel, jitter: f64) -> Result<DMatrix<f64>> {
    let mut k = kernel.matrix(&points(a), &points(b))?;
    for (i, ta) in a.iter().enumerate() {
        for (j, tb) in b.iter().enumerate() {
            if ta == tb {
                k[(i, j)] += jitter;
            }
        }
    }
    Ok(k)
}

/// Marginals of `∫ p(x_* | x) q(x) dx` at the requested times, per latent dimension.
pub fn conditional_latent(
    t_star: &TemporalGrid,
    grid: &TemporalGrid,
    qx: &VariationalLatentX,
    kernel: &Kernel,
) -> Result<VariationalLatentX> {
    check_rows(qx, grid.len())?;
    let gram = temporal_gram(grid.times(), kernel)?;
    let k_st = cross_cov(t_star.times(), grid.times(), kernel, gram.jitter)?;
    // P = K_*t K_tt⁻¹
    let proj = gram.solve(&k_st.transpose()).transpose();
    let means = &proj * &qx.means;
    let prior_var = kernel.zero_distance() + gram.jitter;
    let n_star = t_star.len();
    let mut variances = DMatrix::zeros(n_star, qx.latent_dim());
    for i in 0..n_star {
        let explained: f64 = proj.row(i).dot(&k_st.row(i));
        for q in 0..qx.latent_dim() {
            let carried: f64 = (0..grid.len())
                .map(|n| proj[(i, n)] * proj[(i, n)] * qx.variances[(n, q)])
                .sum();
            variances[(i, q)] = (prior_var - explained + carried).max(1e-300);
        }
    }
    Ok(VariationalLatentX { means, variances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn white_kernel() -> Kernel {
        // lengthscale far below the grid spacing: K ≈ I
        Kernel::rbf(1.0, vec![1e-3]).unwrap()
    }

    fn qx_const(n: usize, q: usize, mean: f64, var: f64) -> VariationalLatentX {
        VariationalLatentX::new(DMatrix::from_element(n, q, mean), DMatrix::from_element(n, q, var)).unwrap()
    }

    /// Dense KL between N(μ, diag s) and N(0, K) with an explicit inverse and determinant.
    fn dense_kl(mu: &[f64], s: &[f64], k: &DMatrix<f64>) -> f64 {
        let n = mu.len();
        let kinv = k.clone().try_inverse().unwrap();
        let mu = nalgebra::DVector::from_column_slice(mu);
        let sig = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(s));
        0.5 * ((&kinv * &sig).trace() + (mu.transpose() * &kinv * &mu)[(0, 0)] - n as f64
            + k.determinant().ln()
            - sig.determinant().ln())
    }

    #[test]
    fn kl_zero_when_q_equals_white_prior() {
        let grid = TemporalGrid::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let kl = kl_latent_prior(&qx_const(4, 2, 0.0, 1.0), &grid, &white_kernel()).unwrap();
        assert!(kl.abs() < 1e-10, "{kl}");
    }

    #[test]
    fn kl_single_point_closed_form() {
        let grid = TemporalGrid::new(vec![0.5]).unwrap();
        let kl = kl_latent_prior(&qx_const(1, 1, 1.0, 1.0), &grid, &white_kernel()).unwrap();
        assert_relative_eq!(kl, 0.5, epsilon = 1e-7);
    }

    #[test]
    fn kl_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let times = vec![0.0, 0.4, 1.1, 1.5, 2.7];
        let grid = TemporalGrid::new(times.clone()).unwrap();
        let kernel = Kernel::rbf(1.3, vec![0.8]).unwrap();
        let means = DMatrix::from_fn(5, 2, |_, _| StandardNormal.sample(&mut rng));
        let vars = DMatrix::from_fn(5, 2, |_, _| 0.1 + rand::Rng::random::<f64>(&mut rng));
        let qx = VariationalLatentX::new(means.clone(), vars.clone()).unwrap();
        let got = kl_latent_prior(&qx, &grid, &kernel).unwrap();
        let mut k = kernel.matrix(&grid.as_points(), &grid.as_points()).unwrap();
        for i in 0..5 {
            k[(i, i)] += 1e-8 * 1.3;
        }
        let want: f64 = (0..2)
            .map(|q| {
                let mu: Vec<f64> = means.column(q).iter().copied().collect();
                let s: Vec<f64> = vars.column(q).iter().copied().collect();
                dense_kl(&mu, &s, &k)
            })
            .sum();
        assert_relative_eq!(got, want, max_relative = 1e-9);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let times = vec![0.0, 0.5, 1.3, 2.0];
        let grid = TemporalGrid::new(times).unwrap();
        let kernel = Kernel::rbf_plus_periodic(
            crate::kernels::KernelParams::rbf(0.8, vec![1.1]),
            crate::kernels::KernelParams::periodic(0.5, vec![0.9], 1.7),
        )
        .unwrap();
        let means = DMatrix::from_row_slice(4, 1, &[0.3, -0.2, 0.9, 0.1]);
        let vars = DMatrix::from_row_slice(4, 1, &[0.2, 0.3, 0.25, 0.4]);
        let qx = VariationalLatentX::new(means.clone(), vars.clone()).unwrap();
        let (_, g) = kl_latent_prior_with_grad(&qx, &grid, &kernel).unwrap();
        let h = 1e-6;
        let lp = kernel.log_params();
        for p in 0..lp.len() {
            let f = |d: f64| {
                let mut k = kernel.clone();
                let mut v = lp.clone();
                v[p] += d;
                k.set_log_params(&v).unwrap();
                kl_latent_prior(&qx, &grid, &k).unwrap()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - g.kernel_log_params[p]).abs() < 1e-5 * fd.abs().max(1.0), "{p}: {fd} vs {}", g.kernel_log_params[p]);
        }
        for i in 0..4 {
            let f = |d: f64| {
                let mut m = means.clone();
                m[(i, 0)] += d;
                kl_latent_prior(&VariationalLatentX::new(m, vars.clone()).unwrap(), &grid, &kernel).unwrap()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - g.means[(i, 0)]).abs() < 1e-5 * fd.abs().max(1.0));
            let f = |d: f64| {
                let mut v = vars.clone();
                v[(i, 0)] *= d.exp();
                kl_latent_prior(&VariationalLatentX::new(means.clone(), v).unwrap(), &grid, &kernel).unwrap()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - g.log_variances[(i, 0)]).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn conditional_at_training_times_interpolates() {
        let grid = TemporalGrid::new(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let kernel = Kernel::rbf(1.0, vec![1.0]).unwrap();
        let means = DMatrix::from_row_slice(6, 1, &[0.1, -0.5, 0.7, 0.2, 0.0, -0.3]);
        let qx = VariationalLatentX::new(means.clone(), DMatrix::from_element(6, 1, 1e-14)).unwrap();
        let out = conditional_latent(&grid, &grid, &qx, &kernel).unwrap();
        assert!((out.means - means).amax() <= 1e-8);
        assert!(out.variances.amax() <= 1e-8);
    }

    #[test]
    fn conditional_far_away_reverts_to_prior() {
        let grid = TemporalGrid::new(vec![0.0, 1.0, 2.0]).unwrap();
        let kernel = Kernel::rbf(1.7, vec![0.5]).unwrap();
        let qx = VariationalLatentX::new(DMatrix::from_element(3, 2, 3.0), DMatrix::from_element(3, 2, 0.1)).unwrap();
        let far = TemporalGrid::new(vec![2.0 + 20.0 * 0.5 + 1.0]).unwrap();
        let out = conditional_latent(&far, &grid, &qx, &kernel).unwrap();
        assert!(out.means.amax() < 1e-12);
        assert!(out.variances.iter().all(|v| (v - 1.7).abs() < 1e-6));
    }

    #[test]
    fn conditional_matches_monte_carlo() {
        let grid = TemporalGrid::new(vec![0.0, 0.7, 1.5, 2.0]).unwrap();
        let kernel = Kernel::rbf(1.2, vec![0.9]).unwrap();
        let means = DMatrix::from_row_slice(4, 1, &[0.5, -0.4, 0.8, 0.3]);
        let vars = DMatrix::from_row_slice(4, 1, &[0.2, 0.1, 0.3, 0.15]);
        let qx = VariationalLatentX::new(means.clone(), vars.clone()).unwrap();
        let t_star = TemporalGrid::new(vec![0.3, 1.0, 2.6]).unwrap();
        let out = conditional_latent(&t_star, &grid, &qx, &kernel).unwrap();

        // independent sampler: x ~ q, then x_* ~ p(x_* | x) jointly
        let tt = grid.as_points();
        let ts = t_star.as_points();
        let mut ktt = kernel.matrix(&tt, &tt).unwrap();
        for i in 0..4 {
            ktt[(i, i)] += 1e-8 * 1.2;
        }
        let kst = kernel.matrix(&ts, &tt).unwrap();
        let mut kss = kernel.matrix(&ts, &ts).unwrap();
        for i in 0..3 {
            kss[(i, i)] += 1e-8 * 1.2;
        }
        let kinv = ktt.try_inverse().unwrap();
        let proj = &kst * &kinv;
        let cond = &kss - &proj * kst.transpose();
        let lc = nalgebra::Cholesky::new(cond).unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = [0.0; 3];
        let mut sum2 = [0.0; 3];
        for _ in 0..n {
            let x = nalgebra::DVector::from_fn(4, |i, _| {
                means[(i, 0)] + vars[(i, 0)].sqrt() * { let e: f64 = StandardNormal.sample(&mut rng); e }
            });
            let e = nalgebra::DVector::from_fn(3, |_, _| { let e: f64 = StandardNormal.sample(&mut rng); e });
            let xs = &proj * x + &lc * e;
            for i in 0..3 {
                sum[i] += xs[i];
                sum2[i] += xs[i] * xs[i];
            }
        }
        for i in 0..3 {
            let m = sum[i] / n as f64;
            let v = sum2[i] / n as f64 - m * m;
            let se_m = (v / n as f64).sqrt();
            assert!((m - out.means[(i, 0)]).abs() <= 3.0 * se_m, "mean {i}");
            // normal fourth moment: Var(s²) ≈ 2σ⁴/n
            let se_v = (2.0 * v * v / n as f64).sqrt();
            assert!((v - out.variances[(i, 0)]).abs() <= 3.0 * se_v, "var {i}");
        }
    }

    #[test]
    fn adding_training_points_never_increases_variance() {
        let kernel = Kernel::rbf(1.0, vec![1.3]).unwrap();
        let coarse = TemporalGrid::new(vec![0.0, 2.0, 4.0]).unwrap();
        let fine = TemporalGrid::new(vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let q = |n| VariationalLatentX::new(DMatrix::zeros(n, 1), DMatrix::from_element(n, 1, 1e-14)).unwrap();
        let t_star = TemporalGrid::new(vec![-1.0, 0.5, 1.7, 3.3, 6.0]).unwrap();
        let vc = conditional_latent(&t_star, &coarse, &q(3), &kernel).unwrap().variances;
        let vf = conditional_latent(&t_star, &fine, &q(5), &kernel).unwrap().variances;
        for i in 0..5 {
            assert!(vf[(i, 0)] <= vc[(i, 0)] + 1e-12);
        }
    }

    #[test]
    fn joint_kl_degenerates_and_rejects_duplicates() {
        let times = vec![0.0, 1.0, 2.5];
        let grid = TemporalGrid::new(times.clone()).unwrap();
        let kernel = Kernel::rbf(1.0, vec![1.0]).unwrap();
        let qx = VariationalLatentX::new(
            DMatrix::from_row_slice(3, 1, &[0.2, 0.1, -0.4]),
            DMatrix::from_row_slice(3, 1, &[0.3, 0.2, 0.5]),
        )
        .unwrap();
        assert_eq!(
            joint_prior_kl(&qx, &times, &kernel).unwrap(),
            kl_latent_prior(&qx, &grid, &kernel).unwrap()
        );
        assert!(joint_prior_kl(&qx, &[0.0, 1.0, 1.0], &kernel).is_err());
        let white = joint_prior_kl(&qx_const(3, 1, 0.0, 1.0), &[0.0, 5.0, 2.0], &white_kernel()).unwrap();
        assert!(white.abs() < 1e-10);
    }

    #[test]
    fn grid_validation() {
        assert!(matches!(TemporalGrid::new(vec![0.0, 0.0]), Err(CgpdsError::Order(_))));
        assert!(TemporalGrid::new(vec![]).is_err());
        assert_eq!(TemporalGrid::range(0.0, 1.0, 0.5).unwrap().len(), 3);
    }
}
