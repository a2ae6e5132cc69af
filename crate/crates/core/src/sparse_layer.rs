//! Inducing-point machinery for the global process `h` and the local processes
//! `g_1..g_J`.
//!
//! Processes are indexed `0..J` for `g_1..g_J` and `J` for `h`. The inducing
//! outputs are stacked into a single vector `[u_1; ...; u_J; v]` whose joint
//! Gaussian posterior is stored with a dense lower-triangular factor.
//!
//! Expected kernel statistics under the diagonal `q(X)` (RBF-ARD only):
//!
//! * `psi0[a] = Σ_n E[κ_a(x_n, x_n)] = N σ_a²`
//! * `psi1[a][n, m] = E[κ_a(x_n, z^a_m)]`
//! * `omega[a][b] = Σ_n E[κ_a(Z_a, x_n) κ_b(x_n, Z_b)]`
//!
//! The cross terms `omega[a][b]` for `a != b` are needed because every process
//! is evaluated at the same random input `x_n`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{CgpdsError, Result};
use crate::kernels::{Kernel, KernelParams};
use crate::latent_prior::VariationalLatentX;
use crate::linalg::{log_det_lower, Factored};

/// Inducing inputs of one latent process, one row per inducing point.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    pub z: DMatrix<f64>,
}

impl InducingSet {
    pub fn new(z: DMatrix<f64>) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(CgpdsError::config("at least one inducing point is required"));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CgpdsError::input("inducing inputs must be finite"));
        }
        for i in 0..z.nrows() {
            for j in (i + 1)..z.nrows() {
                if (z.row(i) - z.row(j)).amax() <= 1e-12 {
                    return Err(CgpdsError::input(format!("inducing inputs {i} and {j} coincide")));
                }
            }
        }
        Ok(InducingSet { z })
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

/// Gaussian `N(mean, L Lᵀ)` over the inducing outputs of a single process.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVariational {
    pub mean: DVector<f64>,
    pub cov_factor: DMatrix<f64>,
}

impl GaussianVariational {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.cov_factor * self.cov_factor.transpose()
    }
}

/// Joint Gaussian over the stacked inducing outputs `[u_1; ...; u_J; v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointInducingPosterior {
    pub mean: DVector<f64>,
    /// Lower triangular with a strictly positive diagonal.
    pub factor: DMatrix<f64>,
    pub block: usize,
}

impl JointInducingPosterior {
    pub fn new(mean: DVector<f64>, factor: DMatrix<f64>, block: usize) -> Result<Self> {
        let p = mean.len();
        if block == 0 || !p.is_multiple_of(block) || factor.shape() != (p, p) {
            return Err(CgpdsError::shape("inducing posterior blocks do not tile the stacked vector"));
        }
        for i in 0..p {
            if !(factor[(i, i)] > 0.0) {
                return Err(CgpdsError::input("covariance factor needs a positive diagonal"));
            }
            for j in (i + 1)..p {
                if factor[(i, j)] != 0.0 {
                    return Err(CgpdsError::input("covariance factor must be lower triangular"));
                }
            }
        }
        Ok(JointInducingPosterior { mean, factor, block })
    }

    /// Zero mean, factor `scale · I`.
    pub fn isotropic(n_processes: usize, block: usize, scale: f64) -> Self {
        let p = n_processes * block;
        JointInducingPosterior {
            mean: DVector::zeros(p),
            factor: DMatrix::identity(p, p) * scale,
            block,
        }
    }

    /// Builds the joint posterior from a mean and a full covariance matrix.
    pub fn from_covariance(mean: DVector<f64>, cov: DMatrix<f64>, block: usize) -> Result<Self> {
        let chol = nalgebra::Cholesky::new(cov).ok_or_else(|| CgpdsError::Conditioning {
            kernel: "inducing posterior covariance".into(),
            jitter: 0.0,
        })?;
        JointInducingPosterior::new(mean, chol.l(), block)
    }

    pub fn n_processes(&self) -> usize {
        self.mean.len() / self.block
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    pub fn mean_block(&self, a: usize) -> DVector<f64> {
        self.mean.rows(a * self.block, self.block).into_owned()
    }

    /// Marginal over one process, re-factorized.
    pub fn marginal(&self, a: usize) -> GaussianVariational {
        let m = self.block;
        let rows = self.factor.rows(a * m, m);
        let cov = rows * rows.transpose();
        let cov_factor = nalgebra::Cholesky::new(cov.clone())
            .map(|c| c.l())
            .unwrap_or_else(|| DMatrix::from_diagonal(&cov.diagonal().map(|v| v.max(0.0).sqrt())));
        GaussianVariational {
            mean: self.mean_block(a),
            cov_factor,
        }
    }
}

/// RBF-ARD kernels and inducing inputs of all J+1 latent-layer processes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentLayer {
    pub kernels: Vec<Kernel>,
    pub inducing: Vec<InducingSet>,
}

impl LatentLayer {
    pub fn new(kernels: Vec<Kernel>, inducing: Vec<InducingSet>) -> Result<Self> {
        if kernels.len() != inducing.len() || kernels.len() < 2 {
            return Err(CgpdsError::config("need J >= 1 local processes plus the global process"));
        }
        let q = kernels[0].input_dim();
        let m = inducing[0].len();
        for (k, z) in kernels.iter().zip(&inducing) {
            if k.as_rbf().is_none() {
                return Err(CgpdsError::config(format!(
                    "latent-layer kernels must be rbf, got {}",
                    k.family()
                )));
            }
            if k.input_dim() != q || z.z.ncols() != q {
                return Err(CgpdsError::shape("latent-layer input dimensions disagree"));
            }
            if z.len() != m {
                return Err(CgpdsError::shape("all processes must share the same number of inducing points"));
            }
        }
        Ok(LatentLayer { kernels, inducing })
    }

    pub fn n_processes(&self) -> usize {
        self.kernels.len()
    }

    pub fn n_local(&self) -> usize {
        self.kernels.len() - 1
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing[0].len()
    }

    pub fn latent_dim(&self) -> usize {
        self.kernels[0].input_dim()
    }

    fn rbf(&self, a: usize) -> &KernelParams {
        self.kernels[a].as_rbf().expect("validated rbf")
    }

    /// `κ_a(Z_a, Z_a)` plus jitter for every process.
    pub fn prior_grams(&self) -> Result<Vec<Factored>> {
        (0..self.n_processes())
            .map(|a| prior_gram(&self.kernels[a], &self.inducing[a], &process_label(a, self.n_local())))
            .collect()
    }
}

pub fn process_label(a: usize, n_local: usize) -> String {
    if a == n_local {
        "h".to_string()
    } else {
        format!("g_{}", a + 1)
    }
}

/// `κ(Z, Z)` plus jitter (escalated up to `1e-4 σ²`) with its Cholesky factor.
pub fn prior_gram(kernel: &Kernel, z: &InducingSet, label: &str) -> Result<Factored> {
    kernel.gram(&z.z, label)
}

/// Per-point pair weights `w_ab(n)`; each entry is a symmetric `(J+1)×(J+1)` matrix.
pub type PairWeights = [DMatrix<f64>];

#[derive(Debug, Clone)]
pub struct PsiStats {
    pub psi0: Vec<f64>,
    pub psi1: Vec<DMatrix<f64>>,
    /// All ordered pairs; `omega[b][a] == omega[a][b]ᵀ`.
    pub omega: Vec<Vec<DMatrix<f64>>>,
}

/// Upstream gradients w.r.t. every statistic, ordered pairs treated independently.
#[derive(Debug, Clone)]
pub struct PsiGrads {
    pub psi0: Vec<f64>,
    pub psi1: Vec<DMatrix<f64>>,
    pub omega: Vec<Vec<DMatrix<f64>>>,
}

#[derive(Debug, Clone)]
pub struct PsiBackward {
    pub kernel_log_params: Vec<Vec<f64>>,
    pub z: Vec<DMatrix<f64>>,
    pub means: DMatrix<f64>,
    pub log_variances: DMatrix<f64>,
}

fn rbf_psi1_point(k: &KernelParams, z: &DMatrix<f64>, mu: &[f64], s: &[f64], out: &mut [f64]) {
    for (m, o) in out.iter_mut().enumerate() {
        let mut lg = k.signal_variance.ln();
        for q in 0..mu.len() {
            let l2 = k.lengthscales[q] * k.lengthscales[q];
            let d = mu[q] - z[(m, q)];
            lg += -0.5 * (s[q] / l2).ln_1p() - d * d / (2.0 * (l2 + s[q]));
        }
        *o = lg.exp();
    }
}

/// Per-dimension constants for the product of two RBF bumps.
struct PairGeom {
    alpha: f64,
    gamma: f64,
    sum: f64,
    v: f64,
}

fn pair_geoms(ka: &KernelParams, kb: &KernelParams) -> Vec<PairGeom> {
    ka.lengthscales
        .iter()
        .zip(&kb.lengthscales)
        .map(|(la, lb)| {
            let alpha = la * la;
            let gamma = lb * lb;
            let sum = alpha + gamma;
            PairGeom {
                alpha,
                gamma,
                sum,
                v: alpha * gamma / sum,
            }
        })
        .collect()
}

/// `E[κ_a(Z_a, x) κ_b(x, Z_b)]` for a single diagonal Gaussian `x ~ N(mu, diag s)`.
pub fn omega_point(ka: &Kernel, za: &DMatrix<f64>, kb: &Kernel, zb: &DMatrix<f64>, mu: &[f64], s: &[f64]) -> Result<DMatrix<f64>> {
    let (pa, pb) = match (ka.as_rbf(), kb.as_rbf()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(CgpdsError::config("kernel expectations are only available for rbf kernels")),
    };
    let geoms = pair_geoms(pa, pb);
    let scale = pa.signal_variance * pb.signal_variance;
    Ok(DMatrix::from_fn(za.nrows(), zb.nrows(), |m, mp| {
        scale * omega_log(&geoms, za, zb, m, mp, mu, s).exp()
    }))
}

fn omega_log(geoms: &[PairGeom], za: &DMatrix<f64>, zb: &DMatrix<f64>, m: usize, mp: usize, mu: &[f64], s: &[f64]) -> f64 {
    let mut lg = 0.0;
    for (q, g) in geoms.iter().enumerate() {
        let z = za[(m, q)];
        let zp = zb[(mp, q)];
        let e = z - zp;
        let c = (z * g.gamma + zp * g.alpha) / g.sum;
        let d = mu[q] - c;
        let vs = g.v + s[q];
        lg += 0.5 * (g.v / vs).ln() - e * e / (2.0 * g.sum) - d * d / (2.0 * vs);
    }
    lg
}

/// `E[κ_a(x, Z_a)]` for a single diagonal Gaussian input.
pub fn psi1_point(k: &Kernel, z: &DMatrix<f64>, mu: &[f64], s: &[f64]) -> Result<DVector<f64>> {
    let p = k
        .as_rbf()
        .ok_or_else(|| CgpdsError::config("kernel expectations are only available for rbf kernels"))?;
    let mut out = vec![0.0; z.nrows()];
    rbf_psi1_point(p, z, mu, s, &mut out);
    Ok(DVector::from_vec(out))
}

fn check_qx(layer: &LatentLayer, qx: &VariationalLatentX, weights: Option<&PairWeights>) -> Result<()> {
    if qx.latent_dim() != layer.latent_dim() {
        return Err(CgpdsError::shape("q(X) latent dimension differs from the latent layer"));
    }
    if let Some(w) = weights {
        if w.len() != qx.n_points() {
            return Err(CgpdsError::shape("pair weights must cover every point"));
        }
    }
    Ok(())
}

fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

fn unique_pairs(p: usize) -> Vec<(usize, usize)> {
    (0..p).flat_map(|a| (a..p).map(move |b| (a, b))).collect()
}

/// Closed-form kernel expectations under `q(X)`.
///
/// With `weights`, every per-point contribution to `psi0[a]` and `omega[a][b]`
/// is scaled by `weights[n][(a, b)]`; `psi1` is never weighted.
pub fn psi_statistics(layer: &LatentLayer, qx: &VariationalLatentX, weights: Option<&PairWeights>) -> Result<PsiStats> {
    check_qx(layer, qx, weights)?;
    let p = layer.n_processes();
    let n = qx.n_points();
    let m = layer.n_inducing();
    let mus: Vec<Vec<f64>> = (0..n).map(|i| row_vec(&qx.means, i)).collect();
    let ss: Vec<Vec<f64>> = (0..n).map(|i| row_vec(&qx.variances, i)).collect();

    let psi0 = (0..p)
        .map(|a| {
            let w: f64 = match weights {
                Some(w) => w.iter().map(|wn| wn[(a, a)]).sum(),
                None => n as f64,
            };
            w * layer.rbf(a).signal_variance
        })
        .collect();

    let psi1 = (0..p)
        .map(|a| {
            let mut out = DMatrix::zeros(n, m);
            let mut buf = vec![0.0; m];
            for i in 0..n {
                rbf_psi1_point(layer.rbf(a), &layer.inducing[a].z, &mus[i], &ss[i], &mut buf);
                for (j, v) in buf.iter().enumerate() {
                    out[(i, j)] = *v;
                }
            }
            out
        })
        .collect();

    let pairs = unique_pairs(p);
    let blocks: Vec<DMatrix<f64>> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (pa, pb) = (layer.rbf(a), layer.rbf(b));
            let geoms = pair_geoms(pa, pb);
            let scale = pa.signal_variance * pb.signal_variance;
            let (za, zb) = (&layer.inducing[a].z, &layer.inducing[b].z);
            let mut acc = DMatrix::zeros(m, m);
            for i in 0..n {
                let w = weights.map_or(1.0, |w| w[i][(a, b)]);
                if w == 0.0 {
                    continue;
                }
                for r in 0..m {
                    for c in 0..m {
                        acc[(r, c)] += w * scale * omega_log(&geoms, za, zb, r, c, &mus[i], &ss[i]).exp();
                    }
                }
            }
            acc
        })
        .collect();

    let mut omega = vec![vec![DMatrix::zeros(m, m); p]; p];
    for ((a, b), blk) in pairs.into_iter().zip(blocks) {
        if a != b {
            omega[b][a] = blk.transpose();
        }
        omega[a][b] = blk;
    }
    Ok(PsiStats { psi0, psi1, omega })
}

/// Per-pair partial gradient, summed in a fixed order afterwards.
struct PartialGrad {
    ka: Vec<f64>,
    kb: Vec<f64>,
    za: DMatrix<f64>,
    zb: DMatrix<f64>,
    mu: DMatrix<f64>,
    log_s: DMatrix<f64>,
}

/// Chain rule from statistic gradients into kernel log-parameters, inducing
/// inputs, latent means and latent log-variances.
pub fn psi_backward(
    layer: &LatentLayer,
    qx: &VariationalLatentX,
    weights: Option<&PairWeights>,
    grads: &PsiGrads,
) -> Result<PsiBackward> {
    check_qx(layer, qx, weights)?;
    let p = layer.n_processes();
    let n = qx.n_points();
    let m = layer.n_inducing();
    let dq = layer.latent_dim();
    let mus: Vec<Vec<f64>> = (0..n).map(|i| row_vec(&qx.means, i)).collect();
    let ss: Vec<Vec<f64>> = (0..n).map(|i| row_vec(&qx.variances, i)).collect();

    let mut out = PsiBackward {
        kernel_log_params: (0..p).map(|_| vec![0.0; 1 + dq]).collect(),
        z: (0..p).map(|_| DMatrix::zeros(m, dq)).collect(),
        means: DMatrix::zeros(n, dq),
        log_variances: DMatrix::zeros(n, dq),
    };

    for a in 0..p {
        let w: f64 = match weights {
            Some(w) => w.iter().map(|wn| wn[(a, a)]).sum(),
            None => n as f64,
        };
        out.kernel_log_params[a][0] += grads.psi0[a] * w * layer.rbf(a).signal_variance;
    }

    // psi1
    for a in 0..p {
        let k = layer.rbf(a);
        let z = &layer.inducing[a].z;
        let g = &grads.psi1[a];
        let mut buf = vec![0.0; m];
        for i in 0..n {
            rbf_psi1_point(k, z, &mus[i], &ss[i], &mut buf);
            for j in 0..m {
                let c = g[(i, j)] * buf[j];
                if c == 0.0 {
                    continue;
                }
                out.kernel_log_params[a][0] += c;
                for q in 0..dq {
                    let l2 = k.lengthscales[q] * k.lengthscales[q];
                    let s = ss[i][q];
                    let d = mus[i][q] - z[(j, q)];
                    let den = l2 + s;
                    let dmu = -d / den;
                    out.means[(i, q)] += c * dmu;
                    out.z[a][(j, q)] -= c * dmu;
                    let ds = -0.5 / den + d * d / (2.0 * den * den);
                    out.log_variances[(i, q)] += c * ds * s;
                    let dl2 = 0.5 * s / (l2 * den) + d * d / (2.0 * den * den);
                    out.kernel_log_params[a][1 + q] += c * dl2 * 2.0 * l2;
                }
            }
        }
    }

    // omega
    let pairs = unique_pairs(p);
    let partials: Vec<PartialGrad> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (pa, pb) = (layer.rbf(a), layer.rbf(b));
            let geoms = pair_geoms(pa, pb);
            let scale = pa.signal_variance * pb.signal_variance;
            let (za, zb) = (&layer.inducing[a].z, &layer.inducing[b].z);
            let upstream = if a == b {
                grads.omega[a][a].clone()
            } else {
                &grads.omega[a][b] + grads.omega[b][a].transpose()
            };
            let mut pg = PartialGrad {
                ka: vec![0.0; 1 + dq],
                kb: vec![0.0; 1 + dq],
                za: DMatrix::zeros(m, dq),
                zb: DMatrix::zeros(m, dq),
                mu: DMatrix::zeros(n, dq),
                log_s: DMatrix::zeros(n, dq),
            };
            for i in 0..n {
                let w = weights.map_or(1.0, |w| w[i][(a, b)]);
                if w == 0.0 {
                    continue;
                }
                for r in 0..m {
                    for cc in 0..m {
                        let g = upstream[(r, cc)];
                        if g == 0.0 {
                            continue;
                        }
                        let val = scale * omega_log(&geoms, za, zb, r, cc, &mus[i], &ss[i]).exp();
                        let c = w * g * val;
                        pg.ka[0] += c;
                        pg.kb[0] += c;
                        for (q, ge) in geoms.iter().enumerate() {
                            let z = za[(r, q)];
                            let zp = zb[(cc, q)];
                            let e = z - zp;
                            let cen = (z * ge.gamma + zp * ge.alpha) / ge.sum;
                            let d = mus[i][q] - cen;
                            let s = ss[i][q];
                            let vs = ge.v + s;
                            let dv = 0.5 * (1.0 / ge.v - 1.0 / vs) + d * d / (2.0 * vs * vs);
                            let sum2 = ge.sum * ge.sum;
                            let dalpha = dv * ge.gamma * ge.gamma / sum2 + e * e / (2.0 * sum2)
                                + d / vs * ge.gamma * (zp - z) / sum2;
                            let dgamma = dv * ge.alpha * ge.alpha / sum2 + e * e / (2.0 * sum2)
                                + d / vs * ge.alpha * (z - zp) / sum2;
                            pg.ka[1 + q] += c * dalpha * 2.0 * ge.alpha;
                            pg.kb[1 + q] += c * dgamma * 2.0 * ge.gamma;
                            pg.mu[(i, q)] += c * (-d / vs);
                            pg.log_s[(i, q)] += c * (-0.5 / vs + d * d / (2.0 * vs * vs)) * s;
                            pg.za[(r, q)] += c * (-e / ge.sum + d / vs * ge.gamma / ge.sum);
                            pg.zb[(cc, q)] += c * (e / ge.sum + d / vs * ge.alpha / ge.sum);
                        }
                    }
                }
            }
            pg
        })
        .collect();

    for ((a, b), pg) in pairs.into_iter().zip(partials) {
        for q in 0..=dq {
            out.kernel_log_params[a][q] += pg.ka[q];
            out.kernel_log_params[b][q] += pg.kb[q];
        }
        out.z[a] += &pg.za;
        out.z[b] += &pg.zb;
        out.means += &pg.mu;
        out.log_variances += &pg.log_s;
    }
    Ok(out)
}

/// `KL[q(u, v) || Π_a N(0, K_a)]` for the stacked joint posterior.
pub fn kl_inducing(qu: &JointInducingPosterior, priors: &[Factored]) -> Result<f64> {
    let m = qu.block;
    if priors.len() != qu.n_processes() || priors.iter().any(|f| f.dim() != m) {
        return Err(CgpdsError::shape("prior Gram matrices do not match the inducing posterior"));
    }
    let s = qu.covariance();
    let mut kl = -(qu.dim() as f64) - log_det_lower(&qu.factor);
    for (a, prior) in priors.iter().enumerate() {
        let s_aa = s.view((a * m, a * m), (m, m)).into_owned();
        let m_a = qu.mean_block(a);
        kl += prior.solve(&s_aa).trace();
        kl += m_a.dot(&prior.solve_vec(&m_a));
        kl += prior.log_det();
    }
    Ok(0.5 * kl)
}

/// Marginal moments of `f(x) = κ(x,Z)K⁻¹u + ε` at fixed inputs with `u ~ q`.
pub fn conditional_moments(
    kernel: &Kernel,
    z: &InducingSet,
    qu: &GaussianVariational,
    x: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if qu.mean.len() != z.len() {
        return Err(CgpdsError::shape("q(u) size differs from the inducing set"));
    }
    let prior = prior_gram(kernel, z, "conditional")?;
    let kxz = kernel.matrix(x, &z.z)?;
    let proj = prior.solve(&kxz.transpose()).transpose();
    let mean = &proj * &qu.mean;
    let diff = &prior.matrix - qu.covariance();
    let reduced = &proj * diff;
    let diag = kernel.diag(x)?;
    let var = DVector::from_fn(x.nrows(), |i, _| diag[i] - reduced.row(i).dot(&proj.row(i)));
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn random_layer(rng: &mut ChaCha8Rng, p: usize, m: usize, q: usize) -> LatentLayer {
        let kernels = (0..p)
            .map(|_| {
                Kernel::rbf(
                    0.5 + rng.random::<f64>(),
                    (0..q).map(|_| 0.6 + rng.random::<f64>()).collect(),
                )
                .unwrap()
            })
            .collect();
        let inducing = (0..p)
            .map(|_| InducingSet::new(DMatrix::from_fn(m, q, |_, _| normal(rng))).unwrap())
            .collect();
        LatentLayer::new(kernels, inducing).unwrap()
    }

    fn random_qx(rng: &mut ChaCha8Rng, n: usize, q: usize) -> VariationalLatentX {
        VariationalLatentX::new(
            DMatrix::from_fn(n, q, |_, _| normal(rng)),
            DMatrix::from_fn(n, q, |_, _| 0.05 + 0.5 * rng.random::<f64>()),
        )
        .unwrap()
    }

    #[test]
    fn single_inducing_point_gram() {
        let k = Kernel::rbf(1.5, vec![1.0]).unwrap();
        let z = InducingSet::new(DMatrix::from_element(1, 1, 0.3)).unwrap();
        let g = prior_gram(&k, &z, "t").unwrap();
        assert_eq!(g.matrix[(0, 0)], 1.5 + 1.5e-8);
    }

    #[test]
    fn separated_inducing_points_are_uncorrelated() {
        let k = Kernel::rbf(2.0, vec![0.1]).unwrap();
        let z = InducingSet::new(DMatrix::from_row_slice(3, 1, &[0.0, 5.0, 10.0])).unwrap();
        let g = prior_gram(&k, &z, "t").unwrap();
        assert!((g.matrix - DMatrix::identity(3, 3) * 2.0).amax() < 1e-7);
    }

    #[test]
    fn prior_gram_factor_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_layer(&mut rng, 2, 6, 2);
        let g = prior_gram(&layer.kernels[0], &layer.inducing[0], "t").unwrap();
        let l = g.l();
        assert!((&l * l.transpose() - &g.matrix).amax() <= 1e-10);
    }

    #[test]
    fn duplicate_inducing_inputs_rejected() {
        assert!(InducingSet::new(DMatrix::from_row_slice(2, 1, &[1.0, 1.0])).is_err());
        assert!(InducingSet::new(DMatrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn psi1_closed_form_value() {
        let layer = LatentLayer::new(
            vec![Kernel::rbf(1.0, vec![1.0]).unwrap(), Kernel::rbf(1.0, vec![1.0]).unwrap()],
            vec![
                InducingSet::new(DMatrix::from_element(1, 1, 0.4)).unwrap(),
                InducingSet::new(DMatrix::from_element(1, 1, 0.4)).unwrap(),
            ],
        )
        .unwrap();
        let qx = VariationalLatentX::new(DMatrix::from_element(1, 1, 0.4), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let psi = psi_statistics(&layer, &qx, None).unwrap();
        assert_relative_eq!(psi.psi1[0][(0, 0)], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn delta_limit_matches_plug_in_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = random_layer(&mut rng, 3, 4, 2);
        let mut qx = random_qx(&mut rng, 5, 2);
        qx.variances.fill(1e-14);
        let psi = psi_statistics(&layer, &qx, None).unwrap();
        for a in 0..3 {
            let ka = layer.kernels[a].matrix(&qx.means, &layer.inducing[a].z).unwrap();
            assert!((&psi.psi1[a] - &ka).amax() <= 1e-6);
            for b in 0..3 {
                let kb = layer.kernels[b].matrix(&qx.means, &layer.inducing[b].z).unwrap();
                assert!((&psi.omega[a][b] - ka.transpose() * &kb).amax() <= 1e-6);
            }
        }
    }

    #[test]
    fn psi0_and_omega_symmetry_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layer = random_layer(&mut rng, 3, 3, 2);
        for _ in 0..50 {
            let qx = random_qx(&mut rng, 4, 2);
            let psi = psi_statistics(&layer, &qx, None).unwrap();
            for a in 0..3 {
                let sv = layer.kernels[a].zero_distance();
                assert_eq!(psi.psi0[a], 4.0 * sv);
                assert_eq!(psi.omega[a][a], psi.omega[a][a].transpose());
                let eig = psi.omega[a][a].clone().symmetric_eigenvalues();
                assert!(eig.iter().all(|e| *e >= -1e-12));
                for b in 0..3 {
                    assert_eq!(psi.omega[a][b], psi.omega[b][a].transpose());
                }
            }
        }
    }

    #[test]
    fn non_rbf_latent_kernel_rejected() {
        let per = Kernel::periodic(1.0, 1.0, 1.0).unwrap();
        let rbf = Kernel::rbf(1.0, vec![1.0]).unwrap();
        let z = InducingSet::new(DMatrix::from_element(1, 1, 0.0)).unwrap();
        assert!(matches!(
            LatentLayer::new(vec![per, rbf], vec![z.clone(), z]),
            Err(CgpdsError::Config(_))
        ));
    }

    /// Weighted scalar objective `Σ ⟨G, stat⟩` for gradient checks.
    fn contract(psi: &PsiStats, g: &PsiGrads) -> f64 {
        let mut v = 0.0;
        for a in 0..psi.psi0.len() {
            v += g.psi0[a] * psi.psi0[a];
            v += crate::linalg::frob(&g.psi1[a], &psi.psi1[a]);
            for b in 0..psi.psi0.len() {
                v += crate::linalg::frob(&g.omega[a][b], &psi.omega[a][b]);
            }
        }
        v
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, m, q, n) = (3, 3, 2, 4);
        let layer = random_layer(&mut rng, p, m, q);
        let qx = random_qx(&mut rng, n, q);
        let weights: Vec<DMatrix<f64>> = (0..n)
            .map(|_| {
                let w = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>());
                &w + w.transpose()
            })
            .collect();
        let grads = PsiGrads {
            psi0: (0..p).map(|_| normal(&mut rng)).collect(),
            psi1: (0..p).map(|_| DMatrix::from_fn(n, m, |_, _| normal(&mut rng))).collect(),
            omega: (0..p)
                .map(|_| (0..p).map(|_| DMatrix::from_fn(m, m, |_, _| normal(&mut rng))).collect())
                .collect(),
        };
        for w in [None, Some(&weights[..])] {
            let back = psi_backward(&layer, &qx, w, &grads).unwrap();
            let f = |layer: &LatentLayer, qx: &VariationalLatentX| {
                contract(&psi_statistics(layer, qx, w).unwrap(), &grads)
            };
            let h = 1e-6;
            let check = |an: f64, plus: f64, minus: f64| {
                let fd = (plus - minus) / (2.0 * h);
                assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1.0), "{an} vs {fd}");
            };
            for a in 0..p {
                let lp = layer.kernels[a].log_params();
                for k in 0..lp.len() {
                    let eval = |d: f64| {
                        let mut l2 = layer.clone();
                        let mut v = lp.clone();
                        v[k] += d;
                        l2.kernels[a].set_log_params(&v).unwrap();
                        f(&l2, &qx)
                    };
                    check(back.kernel_log_params[a][k], eval(h), eval(-h));
                }
                for r in 0..m {
                    for c in 0..q {
                        let eval = |d: f64| {
                            let mut l2 = layer.clone();
                            l2.inducing[a].z[(r, c)] += d;
                            f(&l2, &qx)
                        };
                        check(back.z[a][(r, c)], eval(h), eval(-h));
                    }
                }
            }
            for i in 0..n {
                for c in 0..q {
                    let eval = |d: f64| {
                        let mut q2 = qx.clone();
                        q2.means[(i, c)] += d;
                        f(&layer, &q2)
                    };
                    check(back.means[(i, c)], eval(h), eval(-h));
                    let eval = |d: f64| {
                        let mut q2 = qx.clone();
                        q2.variances[(i, c)] *= d.exp();
                        f(&layer, &q2)
                    };
                    check(back.log_variances[(i, c)], eval(h), eval(-h));
                }
            }
        }
    }

    #[test]
    fn kl_inducing_scalar_cases() {
        let k = Kernel::rbf(1.0, vec![1.0]).unwrap();
        let z = InducingSet::new(DMatrix::from_element(1, 1, 0.0)).unwrap();
        let prior = prior_gram(&k, &z, "t").unwrap();
        let q = JointInducingPosterior::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 1.0), 1).unwrap();
        assert_relative_eq!(kl_inducing(&q, std::slice::from_ref(&prior)).unwrap(), 0.5, epsilon = 1e-7);
        let q = JointInducingPosterior::from_covariance(DVector::zeros(1), prior.matrix.clone(), 1).unwrap();
        assert!(kl_inducing(&q, &[prior]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn conditional_moments_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_layer(&mut rng, 2, 4, 2);
        let (k, z) = (&layer.kernels[0], &layer.inducing[0]);
        let prior = prior_gram(k, z, "t").unwrap();
        let mean = DVector::from_fn(4, |_, _| normal(&mut rng));
        let tiny = GaussianVariational {
            mean: mean.clone(),
            cov_factor: DMatrix::identity(4, 4) * 1e-9,
        };
        let (mu, var) = conditional_moments(k, z, &tiny, &z.z).unwrap();
        assert!((mu - &mean).amax() < 1e-6);
        assert!(var.amax() < 1e-6);
        assert!(var.iter().all(|v| *v >= -1e-10));

        let at_prior = GaussianVariational {
            mean: DVector::zeros(4),
            cov_factor: prior.l(),
        };
        let x = DMatrix::from_fn(6, 2, |_, _| normal(&mut rng));
        let (mu, var) = conditional_moments(k, z, &at_prior, &x).unwrap();
        assert!(mu.amax() == 0.0);
        assert!(var.iter().all(|v| (v - k.zero_distance()).abs() < 1e-9));
    }

    #[test]
    fn conditional_moments_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let layer = random_layer(&mut rng, 2, 3, 2);
        let (k, z) = (&layer.kernels[0], &layer.inducing[0]);
        let lf = DMatrix::from_fn(3, 3, |i, j| if i > j { 0.3 * normal(&mut rng) } else if i == j { 0.5 } else { 0.0 });
        let qu = GaussianVariational {
            mean: DVector::from_fn(3, |_, _| normal(&mut rng)),
            cov_factor: lf,
        };
        let x = DMatrix::from_fn(4, 2, |_, _| normal(&mut rng));
        let (mu, var) = conditional_moments(k, z, &qu, &x).unwrap();

        let mut kzz = k.matrix(&z.z, &z.z).unwrap();
        for i in 0..3 {
            kzz[(i, i)] += 1e-8 * k.zero_distance();
        }
        let kinv = kzz.try_inverse().unwrap();
        let kxz = k.matrix(&x, &z.z).unwrap();
        let proj = &kxz * &kinv;
        let cond_var: Vec<f64> = (0..4)
            .map(|i| (k.zero_distance() - proj.row(i).dot(&kxz.row(i))).max(0.0))
            .collect();
        let n = 100_000;
        let mut s1 = [0.0; 4];
        let mut s2 = [0.0; 4];
        for _ in 0..n {
            let e = DVector::from_fn(3, |_, _| normal(&mut rng));
            let u = &qu.mean + &qu.cov_factor * e;
            let f = &proj * u;
            for i in 0..4 {
                let v = f[i] + cond_var[i].sqrt() * normal(&mut rng);
                s1[i] += v;
                s2[i] += v * v;
            }
        }
        for i in 0..4 {
            let m = s1[i] / n as f64;
            let v = s2[i] / n as f64 - m * m;
            assert!((m - mu[i]).abs() <= 3.0 * (v / n as f64).sqrt());
            assert!((v - var[i]).abs() <= 3.0 * (2.0 * v * v / n as f64).sqrt());
        }
    }
}
