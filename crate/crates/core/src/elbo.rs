//! Evidence lower bound, its per-dimension decomposition, dimension-minibatch
//! estimates and the analytic gradient over every free parameter.
//!
//! With `A_a = K_a⁻¹`, `B_a = A_a m_a`, `R = S + m mᵀ` and mixing coefficients
//! `c_a` (`w_dj` for `g_j`, 1 for `h`), the expected log-likelihood of
//! dimension `d` is
//!
//! ```text
//! L_d = −N/2 log(2π/β) − β/2 [ y_dᵀy_d − 2 Σ_a c_a y_dᵀ Ψ1^a B_a
//!        + Σ_ab c_a c_b tr(A_a Ω^ab A_b R_ba) + Σ_a c_a² (ψ0^a − tr(A_a Ω^aa)) ]
//! ```
//!
//! and the bound is `Σ_d L_d − KL[q(u,v)||p(u,v)] − KL[q(X)||p(X)]`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CgpdsError, Result};
use crate::latent_prior::{kl_latent_prior, kl_latent_prior_with_grad, VariationalLatentX};
use crate::linalg::{frob, Factored};
use crate::model::{CgpdsModel, ParamBlock};
use crate::sparse_layer::{
    kl_inducing, psi_backward, psi_statistics, JointInducingPosterior, LatentLayer, PairWeights, PsiGrads,
    PsiStats,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    pub per_dim_terms: Vec<f64>,
    pub kl_inducing_term: f64,
    pub kl_latent_term: f64,
    pub total: f64,
}

/// Quantities shared by all per-dimension likelihood terms.
#[derive(Debug, Clone)]
pub struct LikelihoodStats {
    pub psi: PsiStats,
    pub priors: Vec<Factored>,
    /// `K_a⁻¹` per process.
    pub inv: Vec<DMatrix<f64>>,
    /// `Ψ1^a K_a⁻¹ m_a`, the expected process values at the training points.
    pub fitted: Vec<DVector<f64>>,
    /// `tr(A_a Ω^ab A_b R_ba)`.
    pub cross: DMatrix<f64>,
    /// `ψ0^a − tr(A_a Ω^aa)`.
    pub residual: Vec<f64>,
    pub n_points: usize,
}

impl LikelihoodStats {
    pub fn new(layer: &LatentLayer, qx: &VariationalLatentX, qu: &JointInducingPosterior) -> Result<Self> {
        let psi = psi_statistics(layer, qx, None)?;
        let priors = layer.prior_grams()?;
        Ok(Self::from_parts(psi, priors, qu, qx.n_points()))
    }

    pub fn for_model(model: &CgpdsModel) -> Result<Self> {
        Self::new(&model.layer, &model.qx, &model.qu)
    }

    fn from_parts(psi: PsiStats, priors: Vec<Factored>, qu: &JointInducingPosterior, n_points: usize) -> Self {
        let p = priors.len();
        let m = qu.block;
        let inv: Vec<DMatrix<f64>> = priors.iter().map(Factored::inverse).collect();
        let second = second_moment(qu);
        let fitted = (0..p)
            .map(|a| &psi.psi1[a] * (&inv[a] * qu.mean_block(a)))
            .collect();
        let mut cross = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in a..p {
                let x = &inv[a] * &psi.omega[a][b] * &inv[b];
                let g = frob(&x, &second.view((a * m, b * m), (m, m)).into_owned());
                cross[(a, b)] = g;
                cross[(b, a)] = g;
            }
        }
        let residual = (0..p)
            .map(|a| psi.psi0[a] - frob(&inv[a], &psi.omega[a][a]))
            .collect();
        LikelihoodStats {
            psi,
            priors,
            inv,
            fitted,
            cross,
            residual,
            n_points,
        }
    }
}

fn second_moment(qu: &JointInducingPosterior) -> DMatrix<f64> {
    qu.covariance() + &qu.mean * qu.mean.transpose()
}

/// Expected log-likelihood `L_d` of one output dimension.
///
/// `coeffs` holds the mixing coefficients of every process (`w_d1..w_dJ, 1`).
pub fn elbo_dim_term(y_d: &[f64], coeffs: &[f64], stats: &LikelihoodStats, beta: f64) -> Result<f64> {
    let p = stats.inv.len();
    if y_d.len() != stats.n_points || coeffs.len() != p {
        return Err(CgpdsError::shape("observation or coefficient length mismatch"));
    }
    let yy: f64 = y_d.iter().map(|v| v * v).sum();
    let mut lin = 0.0;
    let mut quad = 0.0;
    for a in 0..p {
        let dot: f64 = y_d.iter().zip(stats.fitted[a].iter()).map(|(y, f)| y * f).sum();
        lin += coeffs[a] * dot;
        quad += coeffs[a] * coeffs[a] * stats.residual[a];
        for b in 0..p {
            quad += coeffs[a] * coeffs[b] * stats.cross[(a, b)];
        }
    }
    let n = stats.n_points as f64;
    let value = -0.5 * n * (LN_2PI - beta.ln()) - 0.5 * beta * (yy - 2.0 * lin + quad);
    if !value.is_finite() {
        return Err(CgpdsError::numeric(
            "likelihood term",
            format!("L_d = {value} (beta = {beta}, yᵀy = {yy}, cross = {lin}, quadratic = {quad})"),
        ));
    }
    Ok(value)
}

fn check_data(model: &CgpdsModel, y: &DMatrix<f64>) -> Result<()> {
    let s = model.shape();
    if y.shape() != (s.n, s.d) {
        return Err(CgpdsError::shape(format!(
            "data is {}×{} but the model expects {}×{}",
            y.nrows(),
            y.ncols(),
            s.n,
            s.d
        )));
    }
    Ok(())
}

fn dim_terms(model: &CgpdsModel, y: &DMatrix<f64>, stats: &LikelihoodStats, dims: &[usize]) -> Result<Vec<f64>> {
    dims.par_iter()
        .map(|&d| {
            let col: Vec<f64> = y.column(d).iter().copied().collect();
            elbo_dim_term(&col, &model.coefficients(d), stats, model.beta)
        })
        .collect()
}

fn kl_terms(model: &CgpdsModel, stats: &LikelihoodStats) -> Result<(f64, f64)> {
    let kl_u = kl_inducing(&model.qu, &stats.priors)?;
    let kl_x = kl_latent_prior(&model.qx, &model.grid, &model.kernel_x)?;
    Ok((kl_u, kl_x))
}

/// Full-batch bound with its per-dimension decomposition.
pub fn elbo(model: &CgpdsModel, y: &DMatrix<f64>) -> Result<ElboBreakdown> {
    check_data(model, y)?;
    let stats = LikelihoodStats::for_model(model)?;
    let dims: Vec<usize> = (0..y.ncols()).collect();
    let per_dim_terms = dim_terms(model, y, &stats, &dims)?;
    let (kl_inducing_term, kl_latent_term) = kl_terms(model, &stats)?;
    let total = per_dim_terms.iter().sum::<f64>() - kl_inducing_term - kl_latent_term;
    Ok(ElboBreakdown {
        per_dim_terms,
        kl_inducing_term,
        kl_latent_term,
        total,
    })
}

fn check_batch(dims: &[usize], d: usize) -> Result<()> {
    if dims.is_empty() {
        return Err(CgpdsError::input("dimension batch is empty"));
    }
    let mut seen = vec![false; d];
    for &i in dims {
        if i >= d || seen[i] {
            return Err(CgpdsError::input(format!("invalid or repeated dimension {i} in batch")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Unbiased estimate `(D/|B|) Σ_{d∈B} L_d − KL terms`.
pub fn elbo_minibatch(model: &CgpdsModel, y: &DMatrix<f64>, dims: &[usize]) -> Result<f64> {
    check_data(model, y)?;
    check_batch(dims, y.ncols())?;
    let stats = LikelihoodStats::for_model(model)?;
    let terms = dim_terms(model, y, &stats, dims)?;
    let scale = y.ncols() as f64 / dims.len() as f64;
    let (kl_u, kl_x) = kl_terms(model, &stats)?;
    Ok(scale * terms.iter().sum::<f64>() - kl_u - kl_x)
}

/// Draws `size` distinct dimensions uniformly, in increasing order.
pub fn sample_batch(d: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut dims = sample(rng, d, size.min(d)).into_vec();
    dims.sort_unstable();
    dims
}

/// [`elbo_minibatch`] on a batch drawn from `seed`.
pub fn elbo_minibatch_seeded(model: &CgpdsModel, y: &DMatrix<f64>, batch: usize, seed: u64) -> Result<f64> {
    if batch == 0 {
        return Err(CgpdsError::input("dimension batch is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = sample_batch(y.ncols(), batch, &mut rng);
    elbo_minibatch(model, y, &dims)
}

/// Observations of one likelihood block, already contracted with the mixing
/// coefficients.
pub(crate) struct LikBlock<'a> {
    pub qx: &'a VariationalLatentX,
    pub weights: Option<&'a PairWeights>,
    /// `r_a = Σ_d ρ_d c_da y_d` per process (length N).
    pub r: Vec<DVector<f64>>,
    /// Pair coefficients multiplying `Ω^ab`; all ones when `weights` already carry them.
    pub coef: DMatrix<f64>,
    pub count: f64,
    pub yy: f64,
}

pub(crate) struct LikGrads {
    pub value: f64,
    pub psi: PsiStats,
    pub kernel_log_params: Vec<Vec<f64>>,
    pub z: Vec<DMatrix<f64>>,
    pub means: DMatrix<f64>,
    pub log_variances: DMatrix<f64>,
    /// ∂/∂K_a⁻¹.
    pub inv: Vec<DMatrix<f64>>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_beta: f64,
    /// `tr(A_a Ω^ab A_b R_ba)` with the block's own Ω.
    pub cross: DMatrix<f64>,
    pub residual: Vec<f64>,
    pub fitted: Vec<DVector<f64>>,
}

/// Value and gradient of one likelihood block w.r.t. every upstream quantity.
pub(crate) fn block_grads(
    layer: &LatentLayer,
    qu: &JointInducingPosterior,
    inv: &[DMatrix<f64>],
    beta: f64,
    block: &LikBlock<'_>,
) -> Result<LikGrads> {
    let p = layer.n_processes();
    let m = layer.n_inducing();
    let psi = psi_statistics(layer, block.qx, block.weights)?;
    let r_mom = second_moment(qu);
    let rb = |a: usize, b: usize| r_mom.view((a * m, b * m), (m, m)).into_owned();
    let means: Vec<DVector<f64>> = (0..p).map(|a| qu.mean_block(a)).collect();
    let proj: Vec<DVector<f64>> = (0..p).map(|a| &inv[a] * &means[a]).collect();
    let fitted: Vec<DVector<f64>> = (0..p).map(|a| &psi.psi1[a] * &proj[a]).collect();
    let half = 0.5 * beta;

    let mut x = vec![vec![DMatrix::zeros(m, m); p]; p];
    let mut cross = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            x[a][b] = &inv[a] * &psi.omega[a][b] * &inv[b];
            cross[(a, b)] = frob(&x[a][b], &rb(a, b));
        }
    }
    let residual: Vec<f64> = (0..p).map(|a| psi.psi0[a] - frob(&inv[a], &psi.omega[a][a])).collect();

    let mut bracket = block.yy;
    for a in 0..p {
        bracket -= 2.0 * block.r[a].dot(&fitted[a]);
        bracket += block.coef[(a, a)] * residual[a];
        for b in 0..p {
            bracket += block.coef[(a, b)] * cross[(a, b)];
        }
    }
    let value = -0.5 * block.count * (LN_2PI - beta.ln()) - half * bracket;

    let mut g_psi = PsiGrads {
        psi0: (0..p).map(|a| -half * block.coef[(a, a)]).collect(),
        psi1: (0..p).map(|a| &block.r[a] * proj[a].transpose() * beta).collect(),
        omega: vec![vec![DMatrix::zeros(m, m); p]; p],
    };
    let mut g_inv = vec![DMatrix::zeros(m, m); p];
    let mut g_mean = DVector::zeros(p * m);
    let mut g_cov = DMatrix::zeros(p * m, p * m);
    for a in 0..p {
        let psi_r = psi.psi1[a].transpose() * &block.r[a];
        g_inv[a] += &psi_r * means[a].transpose() * beta;
        let mut gm = &inv[a] * &psi_r * beta;
        for b in 0..p {
            let c = block.coef[(a, b)];
            let r_ab = rb(a, b);
            g_psi.omega[a][b] = &inv[a] * &r_ab * &inv[b] * (-half * c);
            let q_ab = &psi.omega[a][b] * &inv[b] * r_ab.transpose();
            g_inv[a] -= (&q_ab + q_ab.transpose()) * (half * c);
            gm -= &x[a][b] * &means[b] * (beta * c);
            g_cov.view_mut((a * m, b * m), (m, m)).copy_from(&(&x[a][b] * (-half * c)));
        }
        g_psi.omega[a][a] += &inv[a] * (half * block.coef[(a, a)]);
        g_inv[a] += &psi.omega[a][a] * (half * block.coef[(a, a)]);
        g_mean.rows_mut(a * m, m).copy_from(&gm);
    }
    let log_beta = 0.5 * block.count - half * bracket;
    let back = psi_backward(layer, block.qx, block.weights, &g_psi)?;
    Ok(LikGrads {
        value,
        psi,
        kernel_log_params: back.kernel_log_params,
        z: back.z,
        means: back.means,
        log_variances: back.log_variances,
        inv: g_inv,
        mean: g_mean,
        cov: g_cov,
        log_beta,
        cross,
        residual,
        fitted,
    })
}

/// Per-dimension weights `ρ_d`: 1 for the full batch, `D/|B|` inside a batch.
fn dim_weights(d: usize, dims: Option<&[usize]>) -> Result<Vec<f64>> {
    match dims {
        None => Ok(vec![1.0; d]),
        Some(b) => {
            check_batch(b, d)?;
            let mut w = vec![0.0; d];
            let scale = d as f64 / b.len() as f64;
            for &i in b {
                w[i] = scale;
            }
            Ok(w)
        }
    }
}

/// Gradient of the bound (or of the minibatch estimate for `dims`) w.r.t. the
/// unconstrained parameter vector of [`CgpdsModel::to_vector`].
///
/// Returns the matching bound value alongside the gradient.
pub fn elbo_gradients(model: &CgpdsModel, y: &DMatrix<f64>, dims: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
    check_data(model, y)?;
    let s = model.shape();
    let p = s.j + 1;
    let m = s.m;
    let rho = dim_weights(s.d, dims)?;

    let priors = model.layer.prior_grams()?;
    let inv: Vec<DMatrix<f64>> = priors.iter().map(Factored::inverse).collect();
    let coeffs: Vec<Vec<f64>> = (0..s.d).map(|d| model.coefficients(d)).collect();
    let mut r = vec![DVector::zeros(s.n); p];
    let mut coef = DMatrix::zeros(p, p);
    let mut yy = 0.0;
    for d in 0..s.d {
        if rho[d] == 0.0 {
            continue;
        }
        let col = y.column(d);
        yy += rho[d] * col.dot(&col);
        for a in 0..p {
            r[a] += col * (rho[d] * coeffs[d][a]);
            for b in 0..p {
                coef[(a, b)] += rho[d] * coeffs[d][a] * coeffs[d][b];
            }
        }
    }
    let count = s.n as f64 * rho.iter().sum::<f64>();
    let block = LikBlock {
        qx: &model.qx,
        weights: None,
        r,
        coef,
        count,
        yy,
    };
    let lik = block_grads(&model.layer, &model.qu, &inv, model.beta, &block)?;
    // value assembled exactly as in `elbo` / `elbo_minibatch`, reusing the psi statistics
    let stats = LikelihoodStats::from_parts(lik.psi.clone(), priors.clone(), &model.qu, s.n);
    let kl_u = kl_inducing(&model.qu, &priors)?;
    let (kl_x, klx) = kl_latent_prior_with_grad(&model.qx, &model.grid, &model.kernel_x)?;
    let value = match dims {
        None => dim_terms(model, y, &stats, &(0..s.d).collect::<Vec<_>>())?.iter().sum::<f64>() - kl_u - kl_x,
        Some(b) => {
            let scale = s.d as f64 / b.len() as f64;
            scale * dim_terms(model, y, &stats, b)?.iter().sum::<f64>() - kl_u - kl_x
        }
    };

    let layout = model.layout();
    let mut grad = vec![0.0; layout.len];
    let mut put = |blk: ParamBlock, vals: &mut dyn Iterator<Item = f64>| {
        for (g, v) in grad[layout.range(blk)].iter_mut().zip(vals) {
            *g += v;
        }
    };

    // W
    let mut g_w = DMatrix::zeros(s.d, s.j);
    for d in 0..s.d {
        if rho[d] == 0.0 {
            continue;
        }
        let col = y.column(d);
        for j in 0..s.j {
            let mut quad = lik.residual[j] * coeffs[d][j];
            for b in 0..p {
                quad += coeffs[d][b] * lik.cross[(j, b)];
            }
            g_w[(d, j)] = rho[d] * model.beta * (col.dot(&lik.fitted[j]) - quad);
        }
    }
    put(ParamBlock::Weights, &mut row_major(&g_w));
    put(ParamBlock::LogBeta, &mut std::iter::once(lik.log_beta));

    // inducing KL and the chain through K_a⁻¹ and S = L Lᵀ
    let cov = model.qu.covariance();
    let mut g_mean = lik.mean.clone();
    let mut g_cov = lik.cov.clone();
    for a in 0..p {
        let m_a = model.qu.mean_block(a);
        let s_aa = cov.view((a * m, a * m), (m, m)).into_owned();
        let g_inv = &lik.inv[a] - (s_aa + &m_a * m_a.transpose()) * 0.5;
        let mut g_mean_a = g_mean.rows_mut(a * m, m);
        g_mean_a -= &inv[a] * &m_a;
        let mut g_cov_aa = g_cov.view_mut((a * m, a * m), (m, m));
        g_cov_aa -= &inv[a] * 0.5;
        let g_k = -(&inv[a] * g_inv * &inv[a]) - &inv[a] * 0.5;
        let z = &model.layer.inducing[a].z;
        let kernel = &model.layer.kernels[a];
        let mut g_theta = kernel.gram_log_param_grad(z, &g_k, priors[a].rel_jitter);
        for (t, v) in g_theta.iter_mut().zip(&lik.kernel_log_params[a]) {
            *t += v;
        }
        put(ParamBlock::LayerKernel(a), &mut g_theta.into_iter());
        let (ga, gb) = kernel.input_grad(z, z, &g_k);
        let g_z = ga + gb + &lik.z[a];
        put(ParamBlock::Inducing(a), &mut row_major(&g_z));
    }
    put(ParamBlock::InducingMean, &mut g_mean.iter().copied());
    let factor = &model.qu.factor;
    let g_factor = (&g_cov + g_cov.transpose()) * factor;
    let pm = p * m;
    let mut tri = Vec::with_capacity(pm * (pm + 1) / 2);
    for i in 0..pm {
        for j in 0..=i {
            tri.push(if i == j {
                g_factor[(i, i)] * factor[(i, i)] + 1.0
            } else {
                g_factor[(i, j)]
            });
        }
    }
    put(ParamBlock::InducingFactor, &mut tri.into_iter());

    // latent KL
    put(ParamBlock::KernelX, &mut klx.kernel_log_params.iter().map(|v| -v));
    let g_mu = &lik.means - &klx.means;
    let g_ls = &lik.log_variances - &klx.log_variances;
    put(ParamBlock::LatentMeans, &mut row_major(&g_mu));
    put(ParamBlock::LatentLogVariances, &mut row_major(&g_ls));

    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        let blk = layout.block_of(i).map_or("?".into(), |b| b.to_string());
        return Err(CgpdsError::numeric(blk, format!("gradient entry {i} is {}", grad[i])));
    }
    Ok((value, grad))
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

/// The Gaussian `q(u, v)` maximizing the bound with every other parameter fixed:
/// `S = K (K + βΩ̂)⁻¹ K`, `m = β K (K + βΩ̂)⁻¹ Ψ̂ᵀ r`.
pub fn optimal_inducing_posterior(model: &CgpdsModel, y: &DMatrix<f64>) -> Result<JointInducingPosterior> {
    check_data(model, y)?;
    let s = model.shape();
    let p = s.j + 1;
    let m = s.m;
    let psi = psi_statistics(&model.layer, &model.qx, None)?;
    let priors = model.layer.prior_grams()?;
    let coeffs: Vec<Vec<f64>> = (0..s.d).map(|d| model.coefficients(d)).collect();
    let pm = p * m;
    let mut kbar = DMatrix::zeros(pm, pm);
    let mut big = DMatrix::zeros(pm, pm);
    let mut rhs = DVector::zeros(pm);
    for a in 0..p {
        kbar.view_mut((a * m, a * m), (m, m)).copy_from(&priors[a].matrix);
        let mut r_a = DVector::zeros(s.n);
        for d in 0..s.d {
            r_a += y.column(d) * coeffs[d][a];
        }
        rhs.rows_mut(a * m, m).copy_from(&(psi.psi1[a].transpose() * r_a));
        for b in 0..p {
            let c: f64 = coeffs.iter().map(|cd| cd[a] * cd[b]).sum();
            big.view_mut((a * m, b * m), (m, m)).copy_from(&(&psi.omega[a][b] * c));
        }
    }
    let mut sys = &kbar + big * model.beta;
    crate::linalg::symmetrize(&mut sys);
    let chol = nalgebra::Cholesky::new(sys).ok_or_else(|| CgpdsError::Conditioning {
        kernel: "optimal inducing posterior".into(),
        jitter: 0.0,
    })?;
    let mut cov = &kbar * chol.solve(&kbar);
    crate::linalg::symmetrize(&mut cov);
    let mean = &kbar * chol.solve(&rhs) * model.beta;
    JointInducingPosterior::from_covariance(mean, cov, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::random_model;
    use approx::assert_relative_eq;

    fn fd_check(model: &CgpdsModel, y: &DMatrix<f64>, dims: Option<&[usize]>) {
        let (_, grad) = elbo_gradients(model, y, dims).unwrap();
        let theta = model.to_vector();
        let layout = model.layout();
        let eval = |v: &[f64]| {
            let mut m = model.clone();
            m.set_from_vector(v).unwrap();
            match dims {
                None => elbo(&m, y).unwrap().total,
                Some(b) => elbo_minibatch(&m, y, b).unwrap(),
            }
        };
        for i in 0..theta.len() {
            let h = 1e-5 * theta[i].abs().max(1.0);
            let mut up = theta.clone();
            up[i] += h;
            let mut dn = theta.clone();
            dn[i] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            let err = (fd - grad[i]).abs() / grad[i].abs().max(1.0);
            assert!(
                err < 1e-4,
                "entry {i} ({}): analytic {} vs fd {fd}",
                layout.block_of(i).unwrap(),
                grad[i]
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (model, y) = random_model(3, 6, 3, 2, 2, 3);
        fd_check(&model, &y, None);
    }

    #[test]
    fn minibatch_gradient_matches_finite_differences() {
        let (model, y) = random_model(4, 5, 4, 2, 1, 3);
        fd_check(&model, &y, Some(&[0, 2]));
    }

    #[test]
    fn breakdown_sums_to_total() {
        let (model, y) = random_model(5, 7, 3, 2, 2, 4);
        let b = elbo(&model, &y).unwrap();
        let s: f64 = b.per_dim_terms.iter().sum();
        assert_relative_eq!(b.total, s - b.kl_inducing_term - b.kl_latent_term, max_relative = 1e-12);
        assert!(b.kl_inducing_term >= 0.0 && b.kl_latent_term >= 0.0);
    }

    #[test]
    fn full_batch_is_bitwise_identical() {
        let (model, y) = random_model(6, 6, 5, 2, 2, 3);
        let all: Vec<usize> = (0..5).collect();
        assert_eq!(elbo(&model, &y).unwrap().total, elbo_minibatch(&model, &y, &all).unwrap());
        let (v, _) = elbo_gradients(&model, &y, Some(&all)).unwrap();
        assert_eq!(v, elbo(&model, &y).unwrap().total);
    }

    #[test]
    fn enumerated_batches_average_to_full_bound() {
        let (model, y) = random_model(7, 5, 4, 2, 1, 3);
        let full = elbo(&model, &y).unwrap().total;
        let mut acc = 0.0;
        let mut count = 0;
        for a in 0..4 {
            for b in (a + 1)..4 {
                acc += elbo_minibatch(&model, &y, &[a, b]).unwrap();
                count += 1;
            }
        }
        assert_relative_eq!(acc / count as f64, full, max_relative = 1e-10);
    }

    #[test]
    fn gradient_of_enumerated_batches_averages_to_full_gradient() {
        let (model, y) = random_model(8, 4, 3, 2, 1, 2);
        let (_, full) = elbo_gradients(&model, &y, None).unwrap();
        let mut acc = vec![0.0; full.len()];
        for d in 0..3 {
            let (_, g) = elbo_gradients(&model, &y, Some(&[d])).unwrap();
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v / 3.0);
        }
        for (a, f) in acc.iter().zip(&full) {
            assert_relative_eq!(*a, *f, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn invalid_batches_are_rejected() {
        let (model, y) = random_model(9, 4, 3, 2, 1, 2);
        assert!(elbo_minibatch(&model, &y, &[]).is_err());
        assert!(elbo_minibatch(&model, &y, &[0, 0]).is_err());
        assert!(elbo_minibatch(&model, &y, &[3]).is_err());
    }

    #[test]
    fn optimal_posterior_is_a_stationary_point() {
        let (mut model, y) = random_model(10, 8, 3, 2, 2, 3);
        let before = elbo(&model, &y).unwrap().total;
        model.qu = optimal_inducing_posterior(&model, &y).unwrap();
        let after = elbo(&model, &y).unwrap().total;
        assert!(after > before);
        let (_, g) = elbo_gradients(&model, &y, None).unwrap();
        let layout = model.layout();
        for blk in [ParamBlock::InducingMean, ParamBlock::InducingFactor] {
            for v in &g[layout.range(blk)] {
                assert!(v.abs() < 1e-6, "{blk}: {v}");
            }
        }
    }

    #[test]
    fn zero_weights_and_prior_posterior_give_noise_only_fit() {
        // with W = 0 and q(v) at its prior the model predicts zero mean and
        // variance σ_h² per point
        let (mut model, y) = random_model(11, 5, 2, 2, 1, 3);
        model.weights.fill(0.0);
        let priors = model.layer.prior_grams().unwrap();
        let m = model.shape().m;
        let p = model.layer.n_processes();
        let mut cov = DMatrix::identity(p * m, p * m) * 0.3;
        cov.view_mut(((p - 1) * m, (p - 1) * m), (m, m)).copy_from(&priors[p - 1].matrix);
        model.qu = JointInducingPosterior::from_covariance(DVector::zeros(p * m), cov, m).unwrap();
        let stats = LikelihoodStats::for_model(&model).unwrap();
        let sh = model.layer.kernels[p - 1].zero_distance();
        let n = 5.0;
        for d in 0..2 {
            let col: Vec<f64> = y.column(d).iter().copied().collect();
            let yy: f64 = col.iter().map(|v| v * v).sum();
            let expect = -0.5 * n * (LN_2PI - model.beta.ln()) - 0.5 * model.beta * (yy + n * sh);
            let got = elbo_dim_term(&col, &model.coefficients(d), &stats, model.beta).unwrap();
            assert_relative_eq!(got, expect, max_relative = 1e-6);
        }
    }

    #[test]
    fn weights_outside_the_batch_get_zero_gradient() {
        let (model, y) = random_model(12, 5, 4, 2, 2, 3);
        let (_, grad) = elbo_gradients(&model, &y, Some(&[1, 3])).unwrap();
        let w = model.layout().range(ParamBlock::Weights);
        for d in [0, 2] {
            for j in 0..2 {
                assert_eq!(grad[w.start + d * 2 + j], 0.0);
            }
        }
        assert!(grad[w.start + 2] != 0.0);
    }
}
