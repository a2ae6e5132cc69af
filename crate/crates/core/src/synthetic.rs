//! Draws complete datasets from the generative model: latent trajectories from
//! the temporal prior, latent processes over them, and a weighted combination
//! with Gaussian noise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CgpdsError, Result};
use crate::kernels::Kernel;
use crate::latent_prior::{TemporalGrid, VariationalLatentX};
use crate::linalg::factor_with_jitter;
use crate::model::{CgpdsModel, ModelShape};
use crate::sparse_layer::{InducingSet, JointInducingPosterior, LatentLayer};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub d: usize,
    pub q: usize,
    pub j: usize,
    /// Spacing of the evenly spaced time stamps.
    pub time_step: f64,
    /// Lengthscale of the temporal RBF prior over each latent coordinate.
    pub time_lengthscale: f64,
    /// Lengthscale of every latent-layer RBF kernel.
    pub latent_lengthscale: f64,
    pub noise_variance: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 30,
            d: 50,
            q: 2,
            j: 2,
            time_step: 1.0,
            time_lengthscale: 4.0,
            latent_lengthscale: 1.0,
            noise_variance: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub grid: TemporalGrid,
    /// `N×Q` latent trajectory.
    pub x: DMatrix<f64>,
    /// `N×J` local processes.
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    /// `D×J`.
    pub weights: DMatrix<f64>,
    /// `N×D` noisy observations.
    pub y: DMatrix<f64>,
}

fn gp_draw(k: &Kernel, points: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let gram = k.gram(points, "synthetic")?;
    let eps = DVector::from_fn(points.nrows(), |_, _| StandardNormal.sample(&mut *rng));
    Ok(gram.l() * eps)
}

/// Samples one dataset; the same config always produces the same data.
pub fn sample_cgpds(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.n < 2 || cfg.d == 0 || cfg.q == 0 || cfg.j == 0 {
        return Err(CgpdsError::config("synthetic data needs N >= 2 and D, Q, J >= 1"));
    }
    if !(cfg.time_step > 0.0 && cfg.time_lengthscale > 0.0 && cfg.latent_lengthscale > 0.0 && cfg.noise_variance >= 0.0) {
        return Err(CgpdsError::config("synthetic scales must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grid = TemporalGrid::new((0..cfg.n).map(|i| i as f64 * cfg.time_step).collect())?;
    let kx = Kernel::rbf(1.0, vec![cfg.time_lengthscale])?;
    let t = grid.as_points();
    let mut x = DMatrix::zeros(cfg.n, cfg.q);
    for q in 0..cfg.q {
        x.set_column(q, &gp_draw(&kx, &t, &mut rng)?);
    }
    let kf = Kernel::rbf(1.0, vec![cfg.latent_lengthscale; cfg.q])?;
    // one factorization shared by all processes
    let gram = factor_with_jitter(&kf.matrix(&x, &x)?, 1.0, "synthetic latent layer")?;
    let l = gram.l();
    let draw = |rng: &mut ChaCha8Rng| -> DVector<f64> {
        &l * DVector::from_fn(cfg.n, |_, _| StandardNormal.sample(&mut *rng))
    };
    let mut g = DMatrix::zeros(cfg.n, cfg.j);
    for j in 0..cfg.j {
        g.set_column(j, &draw(&mut rng));
    }
    let h = draw(&mut rng);
    let weights = DMatrix::from_fn(cfg.d, cfg.j, |_, _| StandardNormal.sample(&mut rng));
    let sd = cfg.noise_variance.sqrt();
    let mut y = &g * weights.transpose();
    for d in 0..cfg.d {
        for n in 0..cfg.n {
            let e: f64 = StandardNormal.sample(&mut rng);
            y[(n, d)] += h[n] + sd * e;
        }
    }
    Ok(SyntheticData { grid, x, g, h, weights, y })
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
}

/// A small model with every parameter randomized (including a dense joint
/// inducing factor), plus standard-normal data. Used by gradient checks.
pub fn random_instance(seed: u64, shape: ModelShape) -> Result<(CgpdsModel, DMatrix<f64>)> {
    let ModelShape { n, d, q, j, m } = shape;
    if n == 0 || d == 0 || q == 0 || j == 0 || m == 0 {
        return Err(CgpdsError::config("random instances need N, D, Q, J, M >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.7 + 0.1 * rng.random::<f64>()).collect();
    let grid = TemporalGrid::new(times)?;
    let kernel_x = Kernel::rbf(1.0 + 0.3 * rng.random::<f64>(), vec![1.5 + rng.random::<f64>()])?;
    let p = j + 1;
    let mut kernels = Vec::with_capacity(p);
    for _ in 0..p {
        let sv = 0.6 + rng.random::<f64>();
        kernels.push(Kernel::rbf(sv, (0..q).map(|_| 0.8 + rng.random::<f64>()).collect())?);
    }
    let mut inducing = Vec::with_capacity(p);
    for _ in 0..p {
        inducing.push(InducingSet::new(normal_matrix(&mut rng, m, q, 1.0))?);
    }
    let layer = LatentLayer::new(kernels, inducing)?;
    let weights = normal_matrix(&mut rng, d, j, 0.8);
    let means = normal_matrix(&mut rng, n, q, 0.8);
    let variances = DMatrix::from_fn(n, q, |_, _| 0.05 + 0.3 * rng.random::<f64>());
    let qx = VariationalLatentX::new(means, variances)?;
    let pm = p * m;
    let mut factor = DMatrix::zeros(pm, pm);
    for i in 0..pm {
        factor[(i, i)] = 0.2 + 0.3 * rng.random::<f64>();
        for k in 0..i {
            factor[(i, k)] = 0.05 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
    let mean = DVector::from_fn(pm, |_, _| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    let qu = JointInducingPosterior::new(mean, factor, m)?;
    let model = CgpdsModel::new(grid, kernel_x, layer, weights, 4.0, qx, qu)?;
    let y = normal_matrix(&mut rng, n, d, 1.0);
    Ok((model, y))
}
