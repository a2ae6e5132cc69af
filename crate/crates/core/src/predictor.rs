//! Generation from time stamps alone and reconstruction of missing dimensions
//! from partial observations.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::elbo::{block_grads, LikBlock};
use crate::error::{CgpdsError, Result};
use crate::latent_prior::{conditional_latent, joint_prior_kl_with_grad, TemporalGrid, VariationalLatentX};
use crate::linalg::{frob, Factored};
use crate::model::CgpdsModel;
use crate::sparse_layer::{kl_inducing, omega_point, psi1_point};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    pub t_star: TemporalGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMoments {
    pub times: Vec<f64>,
    /// `N_*×D` predictive means.
    pub mean: DMatrix<f64>,
    /// `N_*×D` predictive variances.
    pub variance: DMatrix<f64>,
}

/// Per-point mean and variance of every latent process.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessMoments {
    /// `N_*×(J+1)`.
    pub mean: DMatrix<f64>,
    pub variance: DMatrix<f64>,
}

/// Moments of each latent process with its input marginalized under `q(X_*)`.
pub fn process_moments(model: &CgpdsModel, qx_star: &VariationalLatentX) -> Result<ProcessMoments> {
    let layer = &model.layer;
    let p = layer.n_processes();
    let m = layer.n_inducing();
    let priors = layer.prior_grams()?;
    let inv: Vec<DMatrix<f64>> = priors.iter().map(Factored::inverse).collect();
    let cov = model.qu.covariance();
    let proj: Vec<DVector<f64>> = (0..p).map(|a| &inv[a] * model.qu.mean_block(a)).collect();
    // A (S_aa + m mᵀ) A − A per process
    let quad: Vec<DMatrix<f64>> = (0..p)
        .map(|a| {
            let ma = model.qu.mean_block(a);
            let r = cov.view((a * m, a * m), (m, m)) + &ma * ma.transpose();
            &inv[a] * r * &inv[a] - &inv[a]
        })
        .collect();
    let ns = qx_star.n_points();
    let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..ns)
        .into_par_iter()
        .map(|n| {
            let mu: Vec<f64> = qx_star.means.row(n).iter().copied().collect();
            let s: Vec<f64> = qx_star.variances.row(n).iter().copied().collect();
            let mut means = Vec::with_capacity(p);
            let mut vars = Vec::with_capacity(p);
            for a in 0..p {
                let (k, z) = (&layer.kernels[a], &layer.inducing[a].z);
                let e1 = psi1_point(k, z, &mu, &s)?.dot(&proj[a]);
                let omega = omega_point(k, z, k, z, &mu, &s)?;
                let e2 = k.zero_distance() + frob(&quad[a], &omega);
                means.push(e1);
                vars.push((e2 - e1 * e1).max(0.0));
            }
            Ok((means, vars))
        })
        .collect();
    let mut mean = DMatrix::zeros(ns, p);
    let mut variance = DMatrix::zeros(ns, p);
    for (n, r) in rows.into_iter().enumerate() {
        let (mv, vv) = r?;
        for a in 0..p {
            mean[(n, a)] = mv[a];
            variance[(n, a)] = vv[a];
        }
    }
    Ok(ProcessMoments { mean, variance })
}

/// Output moments under `q(X_*)` with the factorized combination
/// `E = Σ_j w_dj E g_j + E h`, `V = Σ_j w_dj² V g_j + V h + β⁻¹`.
pub fn output_moments(model: &CgpdsModel, qx_star: &VariationalLatentX, times: &[f64]) -> Result<PredictionMoments> {
    let pm = process_moments(model, qx_star)?;
    let d = model.weights.nrows();
    let ns = qx_star.n_points();
    let mut mean = DMatrix::zeros(ns, d);
    let mut variance = DMatrix::zeros(ns, d);
    for dim in 0..d {
        let c = model.coefficients(dim);
        for n in 0..ns {
            let mut e = 0.0;
            let mut v = 1.0 / model.beta;
            for (a, ca) in c.iter().enumerate() {
                e += ca * pm.mean[(n, a)];
                v += ca * ca * pm.variance[(n, a)];
            }
            mean[(n, dim)] = e;
            variance[(n, dim)] = v;
        }
    }
    Ok(PredictionMoments {
        times: times.to_vec(),
        mean,
        variance,
    })
}

/// Predictive moments at new time stamps from the prior-conditional `q(X_*)`.
pub fn generate(model: &CgpdsModel, request: &PredictionRequest) -> Result<PredictionMoments> {
    model.validate()?;
    let qx_star = conditional_latent(&request.t_star, &model.grid, &model.qx, &model.kernel_x)?;
    output_moments(model, &qx_star, request.t_star.times())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionTask {
    pub t_star: TemporalGrid,
    /// `N_*×D` partial observations; entries outside `observed` are ignored.
    pub y_star: DMatrix<f64>,
    /// `N_*×D`, true where the entry is observed.
    pub observed: Vec<Vec<bool>>,
}

impl ReconstructionTask {
    /// Treats every NaN entry of `y_partial` as missing.
    pub fn from_partial(t_star: TemporalGrid, y_partial: DMatrix<f64>) -> Result<Self> {
        if y_partial.nrows() != t_star.len() {
            return Err(CgpdsError::shape("partial observations do not match the test times"));
        }
        let observed = (0..y_partial.nrows())
            .map(|n| y_partial.row(n).iter().map(|v| !v.is_nan()).collect())
            .collect();
        let task = ReconstructionTask { t_star, y_star: y_partial, observed };
        task.validate(task.y_star.ncols())?;
        Ok(task)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let ns = self.t_star.len();
        if self.y_star.shape() != (ns, d) || self.observed.len() != ns || self.observed.iter().any(|r| r.len() != d) {
            return Err(CgpdsError::shape(format!("reconstruction inputs must be {ns}×{d}")));
        }
        if self.observed.iter().flatten().all(|o| *o) {
            return Err(CgpdsError::input("nothing to reconstruct: no entry is missing"));
        }
        for (n, row) in self.observed.iter().enumerate() {
            for (dim, o) in row.iter().enumerate() {
                if *o && !self.y_star[(n, dim)].is_finite() {
                    return Err(CgpdsError::input(format!("observed entry ({n}, {dim}) is not finite")));
                }
            }
        }
        Ok(())
    }

    pub fn missing_count(&self) -> usize {
        self.observed.iter().flatten().filter(|o| !**o).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructOptions {
    /// Ascent steps on `q(X, X_*)`; zero keeps the prior-conditional start.
    pub iterations: usize,
    pub step_size: f64,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        ReconstructOptions {
            iterations: 300,
            step_size: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Moments for every entry at the test times; only the missing ones are the answer.
    pub moments: PredictionMoments,
    pub qx: VariationalLatentX,
    pub qx_star: VariationalLatentX,
    pub initial_objective: f64,
    pub final_objective: f64,
}

struct JointObjective<'a> {
    model: &'a CgpdsModel,
    inv: Vec<DMatrix<f64>>,
    priors: Vec<Factored>,
    train: LikBlock<'a>,
    weights: Vec<DMatrix<f64>>,
    r_star: Vec<DVector<f64>>,
    count_star: f64,
    yy_star: f64,
    times: Vec<f64>,
}

impl<'a> JointObjective<'a> {
    fn new(model: &'a CgpdsModel, y: &DMatrix<f64>, task: &ReconstructionTask) -> Result<Self> {
        let s = model.shape();
        let p = s.j + 1;
        let priors = model.layer.prior_grams()?;
        let inv = priors.iter().map(Factored::inverse).collect();
        let coeffs: Vec<Vec<f64>> = (0..s.d).map(|d| model.coefficients(d)).collect();
        let mut r = vec![DVector::zeros(s.n); p];
        let mut coef = DMatrix::zeros(p, p);
        for d in 0..s.d {
            for a in 0..p {
                r[a] += y.column(d) * coeffs[d][a];
                for b in 0..p {
                    coef[(a, b)] += coeffs[d][a] * coeffs[d][b];
                }
            }
        }
        let train = LikBlock {
            qx: &model.qx,
            weights: None,
            r,
            coef,
            count: (s.n * s.d) as f64,
            yy: y.norm_squared(),
        };
        let ns = task.t_star.len();
        let mut weights = vec![DMatrix::zeros(p, p); ns];
        let mut r_star = vec![DVector::zeros(ns); p];
        let mut count_star = 0.0;
        let mut yy_star = 0.0;
        for n in 0..ns {
            for d in 0..s.d {
                if !task.observed[n][d] {
                    continue;
                }
                let v = task.y_star[(n, d)];
                count_star += 1.0;
                yy_star += v * v;
                for a in 0..p {
                    r_star[a][n] += coeffs[d][a] * v;
                    for b in 0..p {
                        weights[n][(a, b)] += coeffs[d][a] * coeffs[d][b];
                    }
                }
            }
        }
        let mut times = model.grid.times().to_vec();
        times.extend_from_slice(task.t_star.times());
        Ok(JointObjective {
            model,
            inv,
            priors,
            train,
            weights,
            r_star,
            count_star,
            yy_star,
            times,
        })
    }

    /// Objective value and its gradient w.r.t. `[μ, log s]` of `q(X)` then `q(X_*)`.
    fn eval(&self, qx: &VariationalLatentX, qx_star: &VariationalLatentX) -> Result<(f64, Vec<f64>)> {
        let model = self.model;
        let p = model.layer.n_processes();
        let train = LikBlock {
            qx,
            weights: None,
            r: self.train.r.clone(),
            coef: self.train.coef.clone(),
            count: self.train.count,
            yy: self.train.yy,
        };
        let lt = block_grads(&model.layer, &model.qu, &self.inv, model.beta, &train)?;
        let test = LikBlock {
            qx: qx_star,
            weights: Some(&self.weights),
            r: self.r_star.clone(),
            coef: DMatrix::from_element(p, p, 1.0),
            count: self.count_star,
            yy: self.yy_star,
        };
        let ls = block_grads(&model.layer, &model.qu, &self.inv, model.beta, &test)?;
        let joint = qx.concat(qx_star)?;
        let (kl_x, kg) = joint_prior_kl_with_grad(&joint, &self.times, &model.kernel_x)?;
        let kl_u = kl_inducing(&model.qu, &self.priors)?;
        let value = lt.value + ls.value - kl_u - kl_x;
        let n = qx.n_points();
        let ns = qx_star.n_points();
        let q = qx.latent_dim();
        let mut grad = Vec::with_capacity(2 * (n + ns) * q);
        let push = |g: &mut Vec<f64>, m: DMatrix<f64>| {
            for i in 0..m.nrows() {
                g.extend((0..q).map(|k| m[(i, k)]));
            }
        };
        push(&mut grad, &lt.means - kg.means.rows(0, n));
        push(&mut grad, &lt.log_variances - kg.log_variances.rows(0, n));
        push(&mut grad, &ls.means - kg.means.rows(n, ns));
        push(&mut grad, &ls.log_variances - kg.log_variances.rows(n, ns));
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(CgpdsError::numeric("reconstruction objective", format!("value {value}")));
        }
        Ok((value, grad))
    }
}

fn pack(qx: &VariationalLatentX, qx_star: &VariationalLatentX) -> Vec<f64> {
    let mut v = Vec::new();
    for x in [qx, qx_star] {
        v.extend((0..x.n_points()).flat_map(|i| (0..x.latent_dim()).map(move |k| x.means[(i, k)])));
        v.extend((0..x.n_points()).flat_map(|i| (0..x.latent_dim()).map(move |k| x.variances[(i, k)].ln())));
    }
    v
}

fn unpack(v: &[f64], n: usize, ns: usize, q: usize) -> Result<(VariationalLatentX, VariationalLatentX)> {
    let block = |off: usize, rows: usize| -> Result<VariationalLatentX> {
        let means = DMatrix::from_row_slice(rows, q, &v[off..off + rows * q]);
        let variances = DMatrix::from_row_slice(rows, q, &v[off + rows * q..off + 2 * rows * q]).map(f64::exp);
        VariationalLatentX::new(means, variances)
    };
    Ok((block(0, n)?, block(2 * n * q, ns)?))
}

/// Fills in the missing entries at the test times.
///
/// `y` is the (centered) training data the model was fit on. Only `q(X)` and
/// `q(X_*)` are optimized; kernels, `W`, `β` and `q(u, v)` stay fixed.
pub fn reconstruct(
    model: &CgpdsModel,
    y: &DMatrix<f64>,
    task: &ReconstructionTask,
    opts: &ReconstructOptions,
) -> Result<Reconstruction> {
    model.validate()?;
    let s = model.shape();
    if y.shape() != (s.n, s.d) {
        return Err(CgpdsError::shape("training data does not match the model"));
    }
    task.validate(s.d)?;
    if !(opts.step_size > 0.0) {
        return Err(CgpdsError::config("step size must be positive"));
    }
    let objective = JointObjective::new(model, y, task)?;
    let qx_star0 = conditional_latent(&task.t_star, &model.grid, &model.qx, &model.kernel_x)?;
    let (initial, _) = objective.eval(&model.qx, &qx_star0)?;
    let mut best = (initial, model.qx.clone(), qx_star0.clone());
    let mut theta = pack(&model.qx, &qx_star0);
    let (mut m1, mut m2) = (vec![0.0; theta.len()], vec![0.0; theta.len()]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut state = (model.qx.clone(), qx_star0);
    for t in 1..=opts.iterations {
        let (value, grad) = objective.eval(&state.0, &state.1)?;
        if value > best.0 {
            best = (value, state.0.clone(), state.1.clone());
        }
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for i in 0..theta.len() {
            m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
            m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
            theta[i] += opts.step_size * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
        }
        state = unpack(&theta, s.n, task.t_star.len(), s.q)?;
    }
    if opts.iterations > 0 {
        let (value, _) = objective.eval(&state.0, &state.1)?;
        if value > best.0 {
            best = (value, state.0, state.1);
        }
    }
    let (final_objective, qx, qx_star) = best;
    let moments = output_moments(model, &qx_star, task.t_star.times())?;
    Ok(Reconstruction {
        moments,
        qx,
        qx_star,
        initial_objective: initial,
        final_objective,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    /// Mean over masked entries of squared error divided by the dimension's training variance.
    pub smse: f64,
    /// Per-dimension standardized MSE; `None` where the mask selects no entry.
    pub smse_per_dim: Vec<Option<f64>>,
}

/// Error metrics over the entries selected by `mask`.
pub fn metrics(pred: &DMatrix<f64>, truth: &DMatrix<f64>, mask: &[Vec<bool>], train_var: &[f64]) -> Result<Metrics> {
    let (n, d) = truth.shape();
    if pred.shape() != (n, d) || mask.len() != n || mask.iter().any(|r| r.len() != d) || train_var.len() != d {
        return Err(CgpdsError::shape("metric inputs disagree in shape"));
    }
    let mut se = 0.0;
    let mut sse = 0.0;
    let mut count = 0usize;
    let mut per_dim = vec![(0.0, 0usize); d];
    for i in 0..n {
        for j in 0..d {
            if mask[i][j] {
                let e2 = (pred[(i, j)] - truth[(i, j)]).powi(2);
                let v = if train_var[j] > 0.0 { train_var[j] } else { 1.0 };
                se += e2;
                sse += e2 / v;
                count += 1;
                per_dim[j].0 += e2 / v;
                per_dim[j].1 += 1;
            }
        }
    }
    if count == 0 {
        return Err(CgpdsError::input("metric mask selects no entry"));
    }
    Ok(Metrics {
        rmse: (se / count as f64).sqrt(),
        smse: sse / count as f64,
        smse_per_dim: per_dim.into_iter().map(|(s, c)| (c > 0).then(|| s / c as f64)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff_grad;
    use crate::test_support::random_model;
    use approx::assert_relative_eq;

    #[test]
    fn zero_weight_row_reduces_to_h() {
        let (mut model, _) = random_model(1, 6, 3, 2, 2, 3);
        model.weights.row_mut(1).fill(0.0);
        let req = PredictionRequest { t_star: TemporalGrid::new(vec![0.5, 2.2, 9.0]).unwrap() };
        let out = generate(&model, &req).unwrap();
        let qx = conditional_latent(&req.t_star, &model.grid, &model.qx, &model.kernel_x).unwrap();
        let pm = process_moments(&model, &qx).unwrap();
        for n in 0..3 {
            assert_relative_eq!(out.mean[(n, 1)], pm.mean[(n, 2)], max_relative = 1e-12);
            assert_relative_eq!(out.variance[(n, 1)], pm.variance[(n, 2)] + 1.0 / model.beta, max_relative = 1e-12);
        }
    }

    #[test]
    fn far_future_reverts_to_prior() {
        let (model, _) = random_model(2, 6, 2, 2, 1, 3);
        let req = PredictionRequest { t_star: TemporalGrid::new(vec![1e4]).unwrap() };
        let out = generate(&model, &req).unwrap();
        let qx = conditional_latent(&req.t_star, &model.grid, &model.qx, &model.kernel_x).unwrap();
        // the latent input reverts to its prior; the outputs are then moments
        // under that broad input distribution
        assert!(qx.means.amax() < 1e-8);
        for v in out.variance.iter() {
            assert!(*v >= 1.0 / model.beta - 1e-10);
        }
    }

    #[test]
    fn variance_has_noise_floor() {
        let (model, _) = random_model(3, 5, 4, 2, 2, 3);
        let req = PredictionRequest { t_star: TemporalGrid::range(0.0, 4.0, 0.25).unwrap() };
        let out = generate(&model, &req).unwrap();
        assert!(out.variance.iter().all(|v| *v >= 1.0 / model.beta - 1e-10));
        assert_eq!(out.times.len(), 17);
    }

    #[test]
    fn reconstruction_objective_gradient() {
        let (model, y) = random_model(4, 5, 3, 2, 1, 3);
        let t = TemporalGrid::new(vec![0.35, 10.0]).unwrap();
        let mut ys = DMatrix::from_fn(2, 3, |i, j| 0.3 * (i + j) as f64 - 0.2);
        ys[(0, 1)] = f64::NAN;
        ys[(1, 2)] = f64::NAN;
        let task = ReconstructionTask::from_partial(t, ys).unwrap();
        let obj = JointObjective::new(&model, &y, &task).unwrap();
        let qs = conditional_latent(&task.t_star, &model.grid, &model.qx, &model.kernel_x).unwrap();
        let theta = pack(&model.qx, &qs);
        let (_, g) = obj.eval(&model.qx, &qs).unwrap();
        let fd = finite_diff_grad(
            |v| {
                let (a, b) = unpack(v, 5, 2, 2)?;
                Ok(obj.eval(&a, &b)?.0)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
            assert!((a - b).abs() / a.abs().max(1.0) < 1e-4, "{i}: {a} vs {b}");
        }
    }

    #[test]
    fn nothing_observed_and_no_steps_equals_generation() {
        let (model, y) = random_model(5, 6, 3, 2, 2, 3);
        let t = TemporalGrid::new(vec![1.1, 2.9]).unwrap();
        let task = ReconstructionTask::from_partial(t.clone(), DMatrix::from_element(2, 3, f64::NAN)).unwrap();
        let r = reconstruct(&model, &y, &task, &ReconstructOptions { iterations: 0, step_size: 0.01 }).unwrap();
        let g = generate(&model, &PredictionRequest { t_star: t }).unwrap();
        assert_eq!(r.moments, g);
    }

    #[test]
    fn reconstruction_improves_objective_and_leaves_model_alone() {
        let (model, y) = random_model(6, 6, 3, 2, 1, 3);
        let before = model.clone();
        let t = TemporalGrid::new(vec![1.3, 2.45]).unwrap();
        let mut ys = DMatrix::from_fn(2, 3, |i, j| (i as f64 - j as f64) * 0.4);
        ys[(1, 0)] = f64::NAN;
        let task = ReconstructionTask::from_partial(t, ys).unwrap();
        let r = reconstruct(&model, &y, &task, &ReconstructOptions { iterations: 40, step_size: 0.02 }).unwrap();
        assert!(r.final_objective >= r.initial_objective);
        assert_eq!(model, before);
    }

    #[test]
    fn fully_observed_task_is_rejected() {
        let t = TemporalGrid::new(vec![1.0]).unwrap();
        assert!(matches!(
            ReconstructionTask::from_partial(t, DMatrix::from_element(1, 2, 0.5)),
            Err(CgpdsError::Input(_))
        ));
    }

    #[test]
    fn metrics_simple_cases() {
        let truth = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mask = vec![vec![true, false], vec![true, true]];
        let m = metrics(&truth, &truth, &mask, &[1.0, 1.0]).unwrap();
        assert_eq!(m.rmse, 0.0);
        let shifted = truth.add_scalar(1.0);
        let m = metrics(&shifted, &truth, &mask, &[2.0, 4.0]).unwrap();
        assert_relative_eq!(m.rmse, 1.0);
        assert_relative_eq!(m.smse_per_dim[0].unwrap(), 0.5);
        assert_relative_eq!(m.smse_per_dim[1].unwrap(), 0.25);
        assert_relative_eq!(m.smse, (0.5 + 0.5 + 0.25) / 3.0);
        assert!(metrics(&truth, &truth, &[vec![false; 2], vec![false; 2]], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn metrics_match_direct_formula() {
        let (_, a) = random_model(7, 6, 4, 2, 1, 2);
        let (_, b) = random_model(8, 6, 4, 2, 1, 2);
        let mask: Vec<Vec<bool>> = (0..6).map(|i| (0..4).map(|j| (i + j) % 3 != 0).collect()).collect();
        let var = [0.5, 1.0, 2.0, 3.0];
        let m = metrics(&a, &b, &mask, &var).unwrap();
        let mut se = Vec::new();
        for i in 0..6 {
            for j in 0..4 {
                if mask[i][j] {
                    se.push((a[(i, j)] - b[(i, j)]).powi(2));
                }
            }
        }
        assert_relative_eq!(m.rmse, (se.iter().sum::<f64>() / se.len() as f64).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn copied_dimension_is_recovered_from_its_twin() {
        use crate::synthetic::{sample_cgpds, SyntheticConfig};
        use crate::trainer::{fit, initialize, ModelConfig, TrainConfig};
        // at the default noise the noise floor alone sits at the tolerance
        let data = sample_cgpds(&SyntheticConfig { n: 32, d: 6, seed: 11, noise_variance: 1e-4, ..Default::default() }).unwrap();
        let mut all = data.y.clone();
        let twin = all.column(0).into_owned();
        all.set_column(5, &twin);
        let test_rows: Vec<usize> = (0..8).map(|i| 1 + 4 * i).collect();
        let train_rows: Vec<usize> = (0..32).filter(|i| !test_rows.contains(i)).collect();
        let times = data.grid.times();
        let grid = TemporalGrid::new(train_rows.iter().map(|&i| times[i]).collect()).unwrap();
        let mut y = all.select_rows(&train_rows);
        let offset: Vec<f64> = y.column_iter().map(|c| c.mean()).collect();
        for (j, mut c) in y.column_iter_mut().enumerate() {
            c.add_scalar_mut(-offset[j]);
        }
        let cfg = ModelConfig { inducing: Some(10), ..Default::default() };
        let model = initialize(&grid, &y, &cfg, 0).unwrap();
        let train = TrainConfig { iterations: 3000, step_size: 0.01, batch_dims: 6, seed: 0, freeze_inducing: false, convergence_tol: 0.0 };
        let model = fit(model, &y, &train).unwrap().model;

        let mut ys = all.select_rows(&test_rows);
        for (j, mut c) in ys.column_iter_mut().enumerate() {
            c.add_scalar_mut(-offset[j]);
        }
        ys.column_mut(5).fill(f64::NAN);
        let t_star = TemporalGrid::new(test_rows.iter().map(|&i| times[i]).collect()).unwrap();
        let task = ReconstructionTask::from_partial(t_star, ys.clone()).unwrap();
        let r = reconstruct(&model, &y, &task, &ReconstructOptions::default()).unwrap();
        let sd = (y.column(0).norm_squared() / y.nrows() as f64).sqrt();
        let se: f64 = (0..8).map(|i| (r.moments.mean[(i, 5)] - ys[(i, 0)]).powi(2)).sum();
        let srmse = (se / 8.0).sqrt() / sd;
        assert!(srmse <= 0.1, "{srmse}");
        // the twin is filled with the fit of the dimension it copies
        for i in 0..8 {
            assert!((r.moments.mean[(i, 5)] - r.moments.mean[(i, 0)]).abs() < 0.01 * sd);
        }
    }
}
