//! Brute-force reference implementations used for verification only.
//!
//! Nothing here calls the kernel, psi-statistic, ELBO or predictor code of the
//! main path. Kernel values are recomputed from the raw parameter arrays and
//! only nalgebra is shared. Monte-Carlo estimators split their samples into
//! fixed chunks, each driven by its own ChaCha stream derived from the seed,
//! and reduce the chunks in order, so results do not depend on the number of
//! threads.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{CgpdsError, Result};
use crate::kernels::{Kernel, KernelParams};
use crate::latent_prior::{TemporalGrid, VariationalLatentX};
use crate::elbo::{elbo, elbo_gradients};
use crate::model::{CgpdsModel, ParamBlock};
use crate::sparse_layer::LatentLayer;

const CHUNK: usize = 4096;
const REL_JITTER: f64 = 1e-8;

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

impl McEstimate {
    /// `|value − mean| ≤ k·stderr`, with a tiny absolute slack for zero-variance estimates.
    pub fn within(&self, value: f64, k: f64) -> bool {
        (value - self.mean).abs() <= k * self.stderr + 1e-12 * (1.0 + value.abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McMatrix {
    pub mean: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct McPsi {
    pub psi0: Vec<McEstimate>,
    pub psi1: Vec<McMatrix>,
    pub omega: Vec<Vec<McMatrix>>,
}

/// Predictive moments estimated by sampling, combined with the factorized rule.
#[derive(Debug, Clone)]
pub struct McPrediction {
    pub mean: McMatrix,
    pub variance: McMatrix,
}

/// One joint draw of the latent processes at a set of inputs.
#[derive(Debug, Clone)]
pub struct LatentPathSample {
    /// `N×J`, one column per local process.
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl LatentPathSample {
    /// `ℓ_d = Σ_j w_dj g_j`.
    pub fn ell(&self, w_row: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.h.len());
        for (j, w) in w_row.iter().enumerate() {
            out += self.g.column(j) * *w;
        }
        out
    }
}

/// Running mean and second central moment per coordinate.
#[derive(Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            n: 0.0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.n;
            *s += delta * (v - *m);
        }
    }

    fn merge(mut self, other: Moments) -> Moments {
        let n = self.n + other.n;
        if other.n == 0.0 {
            return self;
        }
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * other.n / n;
            self.m2[i] += other.m2[i] + delta * delta * self.n * other.n / n;
        }
        self.n = n;
        self
    }

    fn estimate(&self, i: usize) -> McEstimate {
        let var = if self.n > 1.0 { self.m2[i] / (self.n - 1.0) } else { 0.0 };
        McEstimate {
            mean: self.mean[i],
            stderr: (var.max(0.0) / self.n).sqrt(),
        }
    }
}

/// Runs `draw` for every sample on chunked, seeded streams and merges the moments in order.
fn chunked<F>(samples: usize, seed: u64, len: usize, draw: F) -> Moments
where
    F: Fn(&mut ChaCha8Rng, &mut Vec<f64>) + Sync,
{
    let chunks = samples.div_ceil(CHUNK);
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64 + 1);
            let mut acc = Moments::new(len);
            let mut buf = vec![0.0; len];
            let count = CHUNK.min(samples - c * CHUNK);
            for _ in 0..count {
                draw(&mut rng, &mut buf);
                acc.push(&buf);
            }
            acc
        })
        .collect();
    parts.into_iter().fold(Moments::new(len), Moments::merge)
}

/// Scalar draws generated on the same chunked streams as [`chunked`], in order.
fn chunked_draws<F>(samples: usize, seed: u64, draw: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let chunks = samples.div_ceil(CHUNK);
    let parts: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64 + 1);
            let count = CHUNK.min(samples - c * CHUNK);
            (0..count).map(|_| draw(&mut rng)).collect()
        })
        .collect();
    parts.concat()
}

/// Sample mean, unbiased variance, and the standard errors of both.
fn sample_moments(x: &[f64]) -> [f64; 4] {
    let s = x.len() as f64;
    let mean = x.iter().sum::<f64>() / s;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / s;
    let var = m2 * s / (s - 1.0);
    [mean, var, (var / s).sqrt(), ((m4 - m2 * m2).max(0.0) / s).sqrt()]
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn component_value(c: &KernelParams, a: &[f64], b: &[f64]) -> f64 {
    match c.period {
        None => {
            let r2: f64 = a
                .iter()
                .zip(b)
                .zip(&c.lengthscales)
                .map(|((x, y), l)| ((x - y) / l).powi(2))
                .sum();
            c.signal_variance * (-0.5 * r2).exp()
        }
        Some(p) => {
            let s: f64 = a
                .iter()
                .zip(b)
                .zip(&c.lengthscales)
                .map(|((x, y), l)| (std::f64::consts::PI * (x - y) / p).sin().powi(2) / (l * l))
                .sum();
            c.signal_variance * (-2.0 * s).exp()
        }
    }
}

fn value(k: &Kernel, a: &[f64], b: &[f64]) -> f64 {
    k.components().iter().map(|c| component_value(c, a, b)).sum()
}

fn variance(k: &Kernel) -> f64 {
    k.components().iter().map(|c| c.signal_variance).sum()
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

fn cross(k: &Kernel, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let ra: Vec<Vec<f64>> = (0..a.nrows()).map(|i| row(a, i)).collect();
    let rb: Vec<Vec<f64>> = (0..b.nrows()).map(|i| row(b, i)).collect();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| value(k, &ra[i], &rb[j]))
}

fn jittered(k: &Kernel, a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = cross(k, a, a);
    let j = REL_JITTER * variance(k);
    for i in 0..g.nrows() {
        g[(i, i)] += j;
    }
    g
}

fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(m).ok_or_else(|| CgpdsError::Conditioning {
        kernel: format!("oracle {what}"),
        jitter: 0.0,
    })
}

/// Lower factor of a PSD matrix, clipping tiny negative eigen-directions.
fn psd_factor(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let scale = m.diagonal().iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-300);
    for i in 0..n {
        m[(i, i)] += 1e-12 * scale;
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return c.l();
    }
    let eig = nalgebra::SymmetricEigen::new(m);
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    eig.eigenvectors * DMatrix::from_diagonal(&d)
}

/// Exact `log p(Y | X)` with `g`, `h` marginalized at fixed latent inputs.
///
/// `vec(Y)` is stacked by dimension, so the covariance is
/// `Σ_a (c_a c_aᵀ) ⊗ κ_a(X, X) + β⁻¹ I`.
pub fn dense_log_marginal(x: &DMatrix<f64>, model: &CgpdsModel, y: &DMatrix<f64>) -> Result<f64> {
    let (n, d) = y.shape();
    if x.nrows() != n || x.ncols() != model.layer.latent_dim() || d != model.weights.nrows() {
        return Err(CgpdsError::shape("dense oracle: inputs do not match the model"));
    }
    let grams: Vec<DMatrix<f64>> = model.layer.kernels.iter().map(|k| cross(k, x, x)).collect();
    let j = model.weights.ncols();
    let coef = |dim: usize, a: usize| if a == j { 1.0 } else { model.weights[(dim, a)] };
    let mut cov = DMatrix::zeros(n * d, n * d);
    for d1 in 0..d {
        for d2 in 0..d {
            let mut block = DMatrix::zeros(n, n);
            for (a, g) in grams.iter().enumerate() {
                block += g * (coef(d1, a) * coef(d2, a));
            }
            cov.view_mut((d1 * n, d2 * n), (n, n)).copy_from(&block);
        }
    }
    for i in 0..n * d {
        cov[(i, i)] += 1.0 / model.beta;
    }
    let chol = cholesky(cov, "dense covariance")?;
    let v = DVector::from_column_slice(y.as_slice());
    let alpha = chol.solve(&v);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let total = (n * d) as f64;
    Ok(-0.5 * (v.dot(&alpha) + logdet + total * (2.0 * std::f64::consts::PI).ln()))
}

fn draw_latent(qx: &VariationalLatentX, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(qx.n_points(), qx.latent_dim(), |n, q| {
        qx.means[(n, q)] + qx.variances[(n, q)].sqrt() * normal(rng)
    })
}

/// Monte-Carlo estimates of the psi statistics under `q(X)`.
pub fn mc_psi(layer: &LatentLayer, qx: &VariationalLatentX, samples: usize, seed: u64) -> Result<McPsi> {
    if samples < 2 {
        return Err(CgpdsError::input("mc_psi needs at least two samples"));
    }
    if qx.latent_dim() != layer.latent_dim() {
        return Err(CgpdsError::shape("q(X) latent dimension differs from the layer"));
    }
    let p = layer.n_processes();
    let m = layer.n_inducing();
    let n = qx.n_points();
    let len = p + p * n * m + p * p * m * m;
    let zs: Vec<&DMatrix<f64>> = layer.inducing.iter().map(|s| &s.z).collect();
    let stats = chunked(samples, seed, len, |rng, buf| {
        let x = draw_latent(qx, rng);
        buf.iter_mut().for_each(|v| *v = 0.0);
        let kx: Vec<DMatrix<f64>> = (0..p).map(|a| cross(&layer.kernels[a], &x, zs[a])).collect();
        for a in 0..p {
            buf[a] = (0..n).map(|i| { let r = row(&x, i); value(&layer.kernels[a], &r, &r) }).sum();
            let off = p + a * n * m;
            for i in 0..n {
                for k in 0..m {
                    buf[off + i * m + k] = kx[a][(i, k)];
                }
            }
        }
        let base = p + p * n * m;
        for a in 0..p {
            for b in 0..p {
                let off = base + (a * p + b) * m * m;
                for i in 0..n {
                    for k in 0..m {
                        let ka = kx[a][(i, k)];
                        for l in 0..m {
                            buf[off + k * m + l] += ka * kx[b][(i, l)];
                        }
                    }
                }
            }
        }
    });
    let mat = |off: usize, r: usize, c: usize| {
        let mut mean = DMatrix::zeros(r, c);
        let mut stderr = DMatrix::zeros(r, c);
        for i in 0..r {
            for k in 0..c {
                let e = stats.estimate(off + i * c + k);
                mean[(i, k)] = e.mean;
                stderr[(i, k)] = e.stderr;
            }
        }
        McMatrix { mean, stderr }
    };
    let base = p + p * n * m;
    Ok(McPsi {
        psi0: (0..p).map(|a| stats.estimate(a)).collect(),
        psi1: (0..p).map(|a| mat(p + a * n * m, n, m)).collect(),
        omega: (0..p)
            .map(|a| (0..p).map(|b| mat(base + (a * p + b) * m * m, m, m)).collect())
            .collect(),
    })
}

/// Samples `g`, `h` at inputs `x` given stacked inducing values `u`, using the
/// joint conditional `p(f | u)` over all rows of `x`.
pub fn sample_latent_paths(
    layer: &LatentLayer,
    kzz_chol: &[Cholesky<f64, nalgebra::Dyn>],
    x: &DMatrix<f64>,
    u: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> LatentPathSample {
    let p = layer.n_processes();
    let m = layer.n_inducing();
    let n = x.nrows();
    let mut g = DMatrix::zeros(n, p - 1);
    let mut h = DVector::zeros(n);
    for a in 0..p {
        let k = &layer.kernels[a];
        let kxz = cross(k, x, &layer.inducing[a].z);
        let proj = kzz_chol[a].solve(&kxz.transpose()).transpose();
        let mean = &proj * u.rows(a * m, m);
        let cov = cross(k, x, x) - &proj * kxz.transpose();
        let eps = DVector::from_fn(n, |_, _| normal(rng));
        let f = mean + psd_factor(cov) * eps;
        if a + 1 == p {
            h = f;
        } else {
            g.set_column(a, &f);
        }
    }
    LatentPathSample { g, h }
}

fn inducing_chol(layer: &LatentLayer) -> Result<Vec<Cholesky<f64, nalgebra::Dyn>>> {
    layer
        .kernels
        .iter()
        .zip(&layer.inducing)
        .map(|(k, s)| cholesky(jittered(k, &s.z), "inducing Gram"))
        .collect()
}

/// Monte-Carlo `E[log p(y_d | g, h)]` for every dimension, sampling
/// `X ~ q(X)`, `(u, v) ~ q(u, v)` and then `g`, `h` from their conditionals.
pub fn mc_elbo_likelihood_terms(
    model: &CgpdsModel,
    y: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    let (n, d) = y.shape();
    if n != model.qx.n_points() || d != model.weights.nrows() {
        return Err(CgpdsError::shape("data does not match the model"));
    }
    if samples < 2 {
        return Err(CgpdsError::input("need at least two samples"));
    }
    let kzz = inducing_chol(&model.layer)?;
    let l = &model.qu.factor;
    let half_log = 0.5 * (model.beta / (2.0 * std::f64::consts::PI)).ln();
    let stats = chunked(samples, seed, d, |rng, buf| {
        let x = draw_latent(&model.qx, rng);
        let eps = DVector::from_fn(l.nrows(), |_, _| normal(rng));
        let u = &model.qu.mean + l * eps;
        let path = sample_latent_paths(&model.layer, &kzz, &x, &u, rng);
        for (dim, out) in buf.iter_mut().enumerate() {
            let w: Vec<f64> = model.weights.row(dim).iter().copied().collect();
            let f = path.ell(&w) + &path.h;
            *out = (0..n)
                .map(|i| half_log - 0.5 * model.beta * (y[(i, dim)] - f[i]).powi(2))
                .sum();
        }
    });
    Ok((0..d).map(|i| stats.estimate(i)).collect())
}

/// Single-dimension form of [`mc_elbo_likelihood_terms`].
pub fn mc_elbo_likelihood_term(
    model: &CgpdsModel,
    y: &DMatrix<f64>,
    d: usize,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if d >= y.ncols() {
        return Err(CgpdsError::input(format!("dimension {d} out of range")));
    }
    Ok(mc_elbo_likelihood_terms(model, y, samples, seed)?[d])
}

/// Marginals of `q(X_*)` under the temporal prior, recomputed densely.
fn latent_at(model: &CgpdsModel, t_star: &TemporalGrid) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = &model.kernel_x;
    let t = model.grid.as_points();
    let ts = t_star.as_points();
    let jitter = REL_JITTER * variance(k);
    let ktt = jittered(k, &t);
    let mut kst = cross(k, &ts, &t);
    for i in 0..ts.nrows() {
        for n in 0..t.nrows() {
            if ts[(i, 0)] == t[(n, 0)] {
                kst[(i, n)] += jitter;
            }
        }
    }
    let kinv = ktt.try_inverse().ok_or_else(|| CgpdsError::Conditioning {
        kernel: "oracle temporal Gram".into(),
        jitter,
    })?;
    let proj = &kst * &kinv;
    let q = model.qx.latent_dim();
    let mean = &proj * &model.qx.means;
    let mut var = DMatrix::zeros(ts.nrows(), q);
    for qq in 0..q {
        let s = DMatrix::from_diagonal(&model.qx.variances.column(qq).into_owned());
        let c = &proj * s * proj.transpose() - &proj * kst.transpose();
        for i in 0..ts.nrows() {
            var[(i, qq)] = (variance(k) + jitter + c[(i, i)]).max(0.0);
        }
    }
    Ok((mean, var))
}

/// Monte-Carlo predictive moments at `t_star`.
///
/// Each latent process is sampled with its own independent draw of `X_*` and
/// of its inducing marginal, and the per-process moments are combined as
/// `E = Σ_j w_dj E g_j + E h`, `V = Σ_j w_dj² V g_j + V h + β⁻¹`.
pub fn mc_predictive_moments(
    model: &CgpdsModel,
    t_star: &TemporalGrid,
    samples: usize,
    seed: u64,
) -> Result<McPrediction> {
    if samples < 4 {
        return Err(CgpdsError::input("need at least four samples"));
    }
    let (xm, xv) = latent_at(model, t_star)?;
    let layer = &model.layer;
    let p = layer.n_processes();
    let m = layer.n_inducing();
    let ns = t_star.len();
    let q = layer.latent_dim();
    let kzz = inducing_chol(layer)?;
    let cov = &model.qu.factor * model.qu.factor.transpose();
    // per process and test point: mean, variance, stderr of mean, stderr of variance
    let mut moments = vec![vec![[0.0; 4]; ns]; p];
    for a in 0..p {
        let k = &layer.kernels[a];
        let z = &layer.inducing[a].z;
        let la = psd_factor(cov.view((a * m, a * m), (m, m)).into_owned());
        let ma = model.qu.mean.rows(a * m, m).into_owned();
        for i in 0..ns {
            let stream = seed ^ ((a as u64) << 40) ^ ((i as u64) << 20);
            let draws = chunked_draws(samples, stream, |rng| {
                let x = DMatrix::from_fn(1, q, |_, c| xm[(i, c)] + xv[(i, c)].sqrt() * normal(rng));
                let eps = DVector::from_fn(m, |_, _| normal(rng));
                let u = &ma + &la * eps;
                let kxz = cross(k, &x, z);
                let proj = kzz[a].solve(&kxz.transpose());
                let r = row(&x, 0);
                let var = (value(k, &r, &r) - proj.dot(&kxz.transpose().column(0))).max(0.0);
                proj.dot(&u) + var.sqrt() * normal(rng)
            });
            moments[a][i] = sample_moments(&draws);
        }
    }
    let d = model.weights.nrows();
    let j = model.weights.ncols();
    let mut mean = McMatrix {
        mean: DMatrix::zeros(ns, d),
        stderr: DMatrix::zeros(ns, d),
    };
    let mut var = mean.clone();
    for dim in 0..d {
        for i in 0..ns {
            let (mut em, mut ev, mut sm, mut sv) = (0.0, 1.0 / model.beta, 0.0, 0.0);
            for (a, per) in moments.iter().enumerate() {
                let c = if a == j { 1.0 } else { model.weights[(dim, a)] };
                let [pm, pv, pms, pvs] = per[i];
                em += c * pm;
                ev += c * c * pv;
                sm += c * c * pms * pms;
                sv += c.powi(4) * pvs * pvs;
            }
            mean.mean[(i, dim)] = em;
            mean.stderr[(i, dim)] = sm.sqrt();
            var.mean[(i, dim)] = ev;
            var.stderr[(i, dim)] = sv.sqrt();
        }
    }
    Ok(McPrediction { mean, variance: var })
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(CgpdsError::input("finite-difference step must be positive"));
    }
    let mut point = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        point[i] = x[i] + step;
        let up = f(&point)?;
        point[i] = x[i] - step;
        let dn = f(&point)?;
        point[i] = x[i];
        if !(up.is_finite() && dn.is_finite()) {
            return Err(CgpdsError::numeric(
                "finite differences",
                format!("non-finite function value around coordinate {i}"),
            ));
        }
        out.push((up - dn) / (2.0 * step));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|fd − analytic| / max(|analytic|, 1)` over the checked coordinates.
    pub max_rel_error: f64,
    /// Per block: coordinates checked and their largest relative error.
    pub per_block: Vec<(ParamBlock, usize, f64)>,
    pub checked: usize,
}

/// Compares analytic bound gradients with central differences of the full
/// bound. `per_block` caps the coordinates checked in each block (drawn with
/// `seed`); `None` checks them all.
pub fn gradient_check(
    model: &CgpdsModel,
    y: &DMatrix<f64>,
    step: f64,
    per_block: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grad) = elbo_gradients(model, y, None)?;
    let theta = model.to_vector();
    let layout = model.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = |v: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        m.set_from_vector(v)?;
        Ok(elbo(&m, y)?.total)
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, per_block: Vec::new(), checked: 0 };
    for (block, range) in &layout.blocks {
        let mut coords: Vec<usize> = range.clone().collect();
        if let Some(cap) = per_block {
            if coords.len() > cap {
                coords = rand::seq::index::sample(&mut rng, coords.len(), cap)
                    .into_iter()
                    .map(|k| range.start + k)
                    .collect();
                coords.sort_unstable();
            }
        }
        let mut worst = 0.0f64;
        let mut point = theta.clone();
        for &i in &coords {
            point[i] = theta[i] + step;
            let up = bound(&point)?;
            point[i] = theta[i] - step;
            let dn = bound(&point)?;
            point[i] = theta[i];
            let fd = (up - dn) / (2.0 * step);
            let err = (fd - grad[i]).abs() / grad[i].abs().max(1.0);
            if !err.is_finite() {
                return Err(CgpdsError::numeric(block.to_string(), format!("finite difference at coordinate {i} is {fd}")));
            }
            worst = worst.max(err);
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.checked += coords.len();
        report.per_block.push((*block, coords.len(), worst));
    }
    Ok(report)
}
