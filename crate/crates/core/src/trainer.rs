//! Initialization and the stochastic gradient ascent loop.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::elbo::{elbo, elbo_gradients, optimal_inducing_posterior, sample_batch};
use crate::error::{CgpdsError, Result};
use crate::kernels::{Kernel, KernelFamily, KernelParams, KernelSpec};
use crate::latent_prior::{TemporalGrid, VariationalLatentX};
use crate::linalg::{median, pairwise_distances};
use crate::model::{CgpdsModel, ParamBlock};
use crate::sparse_layer::{InducingSet, JointInducingPosterior, LatentLayer};

/// How often the full-batch bound is evaluated for snapshots and convergence.
pub const FULL_EVAL_EVERY: usize = 25;
/// Window over which relative improvement is measured.
pub const CONVERGENCE_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub num_local: usize,
    /// `None` picks `min(20, N)`.
    pub inducing: Option<usize>,
    pub kernel_x: KernelFamily,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 2,
            num_local: 2,
            inducing: None,
            kernel_x: KernelFamily::RbfArd,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub batch_dims: usize,
    pub seed: u64,
    pub freeze_inducing: bool,
    /// Relative full-batch improvement over the convergence window below which
    /// training stops; 0 disables the check.
    pub convergence_tol: f64,
}

impl TrainConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(CgpdsError::config("iterations must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(CgpdsError::config("step size must be positive"));
        }
        if self.batch_dims == 0 || self.batch_dims > d {
            return Err(CgpdsError::config(format!("batch_dims must lie in 1..={d}")));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(CgpdsError::config("convergence tolerance must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    /// Bound estimate on the iteration's batch, before the step.
    pub elbo: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "elbo", "grad_norm", "seconds"])?;
        for r in &self.records {
            w.write_record([
                r.iter.to_string(),
                r.elbo.to_string(),
                r.grad_norm.to_string(),
                r.seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    IterationCap,
    Converged,
    /// A non-finite bound, gradient or parameter; the best finite state is returned.
    NonFinite(String),
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: CgpdsModel,
    pub trace: TrainTrace,
    pub initial_elbo: f64,
    /// Full-batch bound of the returned state.
    pub final_elbo: f64,
    pub iterations_run: usize,
    pub stop: StopReason,
}

fn standardize(y: &DMatrix<f64>) -> DMatrix<f64> {
    let n = y.nrows() as f64;
    let mut out = y.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / n).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
    out
}

/// Top-`q` principal-component scores of standardized `y`, each scaled to unit
/// variance. Signs are fixed so that the largest-magnitude entry is positive.
pub fn pca_scores(y: &DMatrix<f64>, q: usize) -> Result<DMatrix<f64>> {
    let (n, _) = y.shape();
    if q == 0 || q >= n {
        return Err(CgpdsError::config(format!(
            "latent dimension Q = {q} must satisfy 1 <= Q < N = {n}"
        )));
    }
    let ys = standardize(y);
    let gram = &ys * ys.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut scores = DMatrix::zeros(n, q);
    for (k, &i) in order.iter().take(q).enumerate() {
        let mut v: DVector<f64> = eig.eigenvectors.column(i).into_owned();
        v.add_scalar_mut(-v.mean());
        let sd = (v.norm_squared() / n as f64).sqrt();
        if sd > 0.0 {
            v /= sd;
        }
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v.neg_mut();
        }
        scores.set_column(k, &v);
    }
    Ok(scores)
}

fn data_variance(y: &DMatrix<f64>) -> f64 {
    let n = y.nrows() as f64;
    let total: f64 = y
        .column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
        })
        .sum();
    let v = total / y.ncols() as f64;
    if v > 0.0 && v.is_finite() { v } else { 1.0 }
}

fn temporal_kernel(family: KernelFamily, grid: &TemporalGrid) -> Result<Kernel> {
    let t = grid.times();
    // consecutive gaps rather than all pairs: on a dense grid the all-pairs
    // median makes the temporal Gram numerically singular
    let mut gaps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let ell = median(&mut gaps).unwrap_or(1.0).max(1e-6);
    let span = (t[t.len() - 1] - t[0]).max(1e-6);
    let rbf = KernelParams::rbf(1.0, vec![ell]);
    let periodic = KernelParams::periodic(1.0, vec![1.0], span / 2.0);
    let spec = KernelSpec::new(family, 1)?;
    match family {
        KernelFamily::RbfArd => Kernel::new(spec, vec![rbf]),
        KernelFamily::Periodic => Kernel::new(spec, vec![periodic]),
        KernelFamily::RbfPlusPeriodic => Kernel::new(spec, vec![rbf, periodic]),
    }
}

/// `m` row indices: a random first row, then repeatedly the row farthest from
/// those already chosen.
fn spread_subsample(points: &DMatrix<f64>, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.nrows();
    let first = sample(rng, n, 1).index(0);
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| (points.row(i) - points.row(first)).norm_squared()).collect();
    while chosen.len() < m {
        let next = (0..n)
            .filter(|i| !chosen.contains(i))
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if nearest[b] >= nearest[i] => Some(b),
                _ => Some(i),
            })
            .expect("m <= n");
        chosen.push(next);
        for i in 0..n {
            nearest[i] = nearest[i].min((points.row(i) - points.row(next)).norm_squared());
        }
    }
    chosen
}

/// Builds the initial model state for `y` observed on `grid`.
pub fn initialize(grid: &TemporalGrid, y: &DMatrix<f64>, cfg: &ModelConfig, seed: u64) -> Result<CgpdsModel> {
    let (n, d) = y.shape();
    if n < 2 || d == 0 {
        return Err(CgpdsError::input("training data needs N >= 2 and D >= 1"));
    }
    if n != grid.len() {
        return Err(CgpdsError::shape("data rows differ from the number of time stamps"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(CgpdsError::input("training data must be finite"));
    }
    if cfg.num_local == 0 {
        return Err(CgpdsError::config("at least one local process is required"));
    }
    let m = cfg.inducing.unwrap_or(20.min(n));
    if m == 0 || m > n {
        return Err(CgpdsError::config(format!("inducing count M = {m} must lie in 1..={n}")));
    }
    let q = cfg.latent_dim;
    let means = pca_scores(y, q)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut dists = pairwise_distances(&means);
    let ell = median(&mut dists).filter(|v| *v > 0.0).unwrap_or(1.0);
    let p = cfg.num_local + 1;
    let mut kernels = Vec::with_capacity(p);
    let mut inducing = Vec::with_capacity(p);
    for _ in 0..p {
        kernels.push(Kernel::rbf(1.0, vec![ell; q])?);
        let mut rows = spread_subsample(&means, m, &mut rng);
        rows.sort_unstable();
        let z = DMatrix::from_fn(m, q, |i, k| means[(rows[i], k)]);
        let set = match InducingSet::new(z.clone()) {
            Ok(s) => s,
            // repeated latent means: spread coincident rows slightly
            Err(_) => InducingSet::new(DMatrix::from_fn(m, q, |i, k| z[(i, k)] + 1e-3 * ell * i as f64 / m as f64))?,
        };
        inducing.push(set);
    }
    let layer = LatentLayer::new(kernels, inducing)?;
    let w_dist = Normal::new(0.0, (1.0 / cfg.num_local as f64).sqrt()).expect("valid normal");
    let weights = DMatrix::from_fn(d, cfg.num_local, |_, _| w_dist.sample(&mut rng));
    let beta = 100.0 / data_variance(y);
    let qx = VariationalLatentX::new(means, DMatrix::from_element(n, q, 0.1))?;
    let qu = JointInducingPosterior::isotropic(p, m, 0.1);
    let kernel_x = temporal_kernel(cfg.kernel_x, grid)?;
    CgpdsModel::new(grid.clone(), kernel_x, layer, weights, beta, qx, qu)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// Ascent step in place.
    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            theta[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Maximizes the bound from `model` and returns the best full-batch state seen.
pub fn fit(model: CgpdsModel, y: &DMatrix<f64>, cfg: &TrainConfig) -> Result<FitResult> {
    let s = model.shape();
    if y.shape() != (s.n, s.d) {
        return Err(CgpdsError::shape("data does not match the model"));
    }
    cfg.validate(s.d)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = model.layout();
    let frozen: Vec<std::ops::Range<usize>> = if cfg.freeze_inducing {
        (0..=s.j).map(|a| layout.range(ParamBlock::Inducing(a))).collect()
    } else {
        Vec::new()
    };

    let initial_elbo = elbo(&model, y)?.total;
    if !initial_elbo.is_finite() {
        return Err(CgpdsError::numeric("initial state", format!("bound is {initial_elbo}")));
    }
    let mut best = (initial_elbo, model.clone());
    let mut full_history = vec![(0usize, initial_elbo)];
    let mut current = model;
    let mut theta = current.to_vector();
    let mut adam = Adam::new(theta.len());
    let mut trace = TrainTrace::default();
    let mut stop = StopReason::IterationCap;
    let mut iterations_run = 0;

    for iter in 1..=cfg.iterations {
        let batch = (cfg.batch_dims < s.d).then(|| sample_batch(s.d, cfg.batch_dims, &mut rng));
        let (value, mut grad) = match elbo_gradients(&current, y, batch.as_deref()) {
            Ok(r) => r,
            Err(e) => {
                stop = StopReason::NonFinite(e.to_string());
                break;
            }
        };
        for r in &frozen {
            grad[r.clone()].iter_mut().for_each(|g| *g = 0.0);
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.records.push(TraceRecord {
            iter,
            elbo: value,
            grad_norm,
            seconds: start.elapsed().as_secs_f64(),
        });
        let previous = theta.clone();
        adam.step(&mut theta, &grad, cfg.step_size);
        if let Err(e) = current.set_from_vector(&theta) {
            theta = previous;
            current.set_from_vector(&theta)?;
            stop = StopReason::NonFinite(e.to_string());
            break;
        }
        iterations_run = iter;

        if iter % FULL_EVAL_EVERY == 0 || iter == cfg.iterations {
            let full = match elbo(&current, y) {
                Ok(b) if b.total.is_finite() => b.total,
                Ok(b) => {
                    stop = StopReason::NonFinite(format!("full bound is {}", b.total));
                    break;
                }
                Err(e) => {
                    stop = StopReason::NonFinite(e.to_string());
                    break;
                }
            };
            if full > best.0 {
                best = (full, current.clone());
            }
            full_history.push((iter, full));
            if cfg.convergence_tol > 0.0 {
                if let Some(&(_, past)) = full_history.iter().rev().find(|(i, _)| iter - i >= CONVERGENCE_WINDOW) {
                    let rel = (full - past) / past.abs().max(1e-300);
                    if rel < cfg.convergence_tol {
                        stop = StopReason::Converged;
                        break;
                    }
                }
            }
        }
    }
    // closed-form q(u, v) given everything else; kept only if the bound rises
    if let Ok(qu) = optimal_inducing_posterior(&best.1, y) {
        let mut polished = best.1.clone();
        polished.qu = qu;
        if let Ok(b) = elbo(&polished, y) {
            if b.total.is_finite() && b.total > best.0 {
                best = (b.total, polished);
            }
        }
    }
    Ok(FitResult {
        model: best.1,
        trace,
        initial_elbo,
        final_elbo: best.0,
        iterations_run,
        stop,
    })
}
