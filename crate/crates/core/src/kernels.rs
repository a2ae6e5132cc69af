//! Stationary covariance functions used by the temporal prior and the latent layer.
//!
//! Three families are supported: squared-exponential with per-dimension
//! lengthscales (`rbf`), the exp-sine-squared periodic kernel (`periodic`),
//! and their sum (`rbf+periodic`, temporal prior only).
//!
//! Parameters are stored in natural units. Optimizers work on the log of every
//! parameter, so [`Kernel::log_params`] and [`Kernel::log_param_grad`] expose
//! that parameterization. The flattened parameter order is, per component:
//! `signal_variance, lengthscales[..], period` (period only for periodic).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CgpdsError, Result};
use crate::linalg::{factor_with_jitter, Factored};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    #[serde(rename = "rbf")]
    RbfArd,
    #[serde(rename = "periodic")]
    Periodic,
    #[serde(rename = "rbf+periodic")]
    RbfPlusPeriodic,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::RbfArd => "rbf",
            KernelFamily::Periodic => "periodic",
            KernelFamily::RbfPlusPeriodic => "rbf+periodic",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = CgpdsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(KernelFamily::RbfArd),
            "periodic" => Ok(KernelFamily::Periodic),
            "rbf+periodic" => Ok(KernelFamily::RbfPlusPeriodic),
            other => Err(CgpdsError::config(format!(
                "unknown kernel family '{other}' (expected rbf, periodic or rbf+periodic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub input_dim: usize,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(CgpdsError::config("kernel input_dim must be at least 1"));
        }
        if family == KernelFamily::RbfPlusPeriodic && input_dim != 1 {
            return Err(CgpdsError::config(
                "rbf+periodic is only available for the one-dimensional temporal kernel",
            ));
        }
        Ok(KernelSpec { family, input_dim })
    }
}

/// Parameters of one kernel component.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    /// Present exactly for periodic components.
    pub period: Option<f64>,
}

impl KernelParams {
    pub fn rbf(signal_variance: f64, lengthscales: Vec<f64>) -> Self {
        KernelParams {
            signal_variance,
            lengthscales,
            period: None,
        }
    }

    pub fn periodic(signal_variance: f64, lengthscales: Vec<f64>, period: f64) -> Self {
        KernelParams {
            signal_variance,
            lengthscales,
            period: Some(period),
        }
    }

    fn n_params(&self) -> usize {
        1 + self.lengthscales.len() + usize::from(self.period.is_some())
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(self.signal_variance)
            .chain(self.lengthscales.iter().copied())
            .chain(self.period)
    }

    fn validate(&self, input_dim: usize) -> Result<()> {
        if self.lengthscales.len() != input_dim {
            return Err(CgpdsError::config(format!(
                "expected {input_dim} lengthscales, got {}",
                self.lengthscales.len()
            )));
        }
        if self.values().any(|v| !(v.is_finite() && v > 0.0)) {
            return Err(CgpdsError::config(
                "kernel parameters must be finite and strictly positive",
            ));
        }
        Ok(())
    }

    /// Correlation-scaled value and its log-parameter/input partials for one pair.
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.period {
            None => {
                let r: f64 = a
                    .iter()
                    .zip(b)
                    .zip(&self.lengthscales)
                    .map(|((x, y), l)| (x - y) * (x - y) / (l * l))
                    .sum();
                self.signal_variance * (-0.5 * r).exp()
            }
            Some(p) => {
                let r: f64 = a
                    .iter()
                    .zip(b)
                    .zip(&self.lengthscales)
                    .map(|((x, y), l)| {
                        let s = (PI * (x - y) / p).sin();
                        2.0 * s * s / (l * l)
                    })
                    .sum();
                self.signal_variance * (-r).exp()
            }
        }
    }

    /// Accumulates `g * ∂k/∂log θ` into `out` and `g * ∂k/∂a` into `ga`.
    fn accumulate(&self, a: &[f64], b: &[f64], g: f64, out: &mut [f64], ga: Option<&mut [f64]>) {
        let k = self.eval(a, b);
        let gk = g * k;
        out[0] += gk;
        match self.period {
            None => {
                for (q, l) in self.lengthscales.iter().enumerate() {
                    let d = a[q] - b[q];
                    out[1 + q] += gk * d * d / (l * l);
                }
                if let Some(ga) = ga {
                    for (q, l) in self.lengthscales.iter().enumerate() {
                        ga[q] -= gk * (a[q] - b[q]) / (l * l);
                    }
                }
            }
            Some(p) => {
                let nq = self.lengthscales.len();
                let mut gp = 0.0;
                let mut ga = ga;
                for (q, l) in self.lengthscales.iter().enumerate() {
                    let u = PI * (a[q] - b[q]) / p;
                    let s = u.sin();
                    let l2 = l * l;
                    out[1 + q] += gk * 4.0 * s * s / l2;
                    gp += gk * 2.0 * u * (2.0 * u).sin() / l2;
                    if let Some(ga) = ga.as_deref_mut() {
                        ga[q] -= gk * 2.0 / l2 * (2.0 * u).sin() * PI / p;
                    }
                }
                out[1 + nq] += gp;
            }
        }
    }
}

/// A kernel of a given family with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    spec: KernelSpec,
    components: Vec<KernelParams>,
}

impl Kernel {
    pub fn new(spec: KernelSpec, components: Vec<KernelParams>) -> Result<Self> {
        let expected: &[bool] = match spec.family {
            KernelFamily::RbfArd => &[false],
            KernelFamily::Periodic => &[true],
            KernelFamily::RbfPlusPeriodic => &[false, true],
        };
        if components.len() != expected.len()
            || components
                .iter()
                .zip(expected)
                .any(|(c, periodic)| c.period.is_some() != *periodic)
        {
            return Err(CgpdsError::config(format!(
                "component layout does not match kernel family {}",
                spec.family
            )));
        }
        for c in &components {
            c.validate(spec.input_dim)?;
        }
        Ok(Kernel { spec, components })
    }

    pub fn rbf(signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let spec = KernelSpec::new(KernelFamily::RbfArd, lengthscales.len())?;
        Kernel::new(spec, vec![KernelParams::rbf(signal_variance, lengthscales)])
    }

    pub fn periodic(signal_variance: f64, lengthscale: f64, period: f64) -> Result<Self> {
        let spec = KernelSpec::new(KernelFamily::Periodic, 1)?;
        Kernel::new(
            spec,
            vec![KernelParams::periodic(signal_variance, vec![lengthscale], period)],
        )
    }

    pub fn rbf_plus_periodic(rbf: KernelParams, periodic: KernelParams) -> Result<Self> {
        let spec = KernelSpec::new(KernelFamily::RbfPlusPeriodic, 1)?;
        Kernel::new(spec, vec![rbf, periodic])
    }

    /// Builds a kernel from a flat natural-unit parameter vector.
    pub fn from_flat(spec: KernelSpec, values: &[f64]) -> Result<Self> {
        let d = spec.input_dim;
        let take = |off: usize, periodic: bool| -> Result<KernelParams> {
            let n = 1 + d + usize::from(periodic);
            let v = values
                .get(off..off + n)
                .ok_or_else(|| CgpdsError::shape("kernel parameter array too short"))?;
            Ok(KernelParams {
                signal_variance: v[0],
                lengthscales: v[1..1 + d].to_vec(),
                period: periodic.then(|| v[1 + d]),
            })
        };
        let components = match spec.family {
            KernelFamily::RbfArd => vec![take(0, false)?],
            KernelFamily::Periodic => vec![take(0, true)?],
            KernelFamily::RbfPlusPeriodic => vec![take(0, false)?, take(1 + d, true)?],
        };
        let k = Kernel::new(spec, components)?;
        if k.n_params() != values.len() {
            return Err(CgpdsError::shape("kernel parameter array has trailing values"));
        }
        Ok(k)
    }

    pub fn spec(&self) -> KernelSpec {
        self.spec
    }

    pub fn family(&self) -> KernelFamily {
        self.spec.family
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn components(&self) -> &[KernelParams] {
        &self.components
    }

    /// The single RBF component, if this is a pure RBF-ARD kernel.
    pub fn as_rbf(&self) -> Option<&KernelParams> {
        match self.spec.family {
            KernelFamily::RbfArd => self.components.first(),
            _ => None,
        }
    }

    pub fn n_params(&self) -> usize {
        self.components.iter().map(KernelParams::n_params).sum()
    }

    /// Flat parameter vector in natural units.
    pub fn params(&self) -> Vec<f64> {
        self.components.iter().flat_map(|c| c.values()).collect()
    }

    pub fn log_params(&self) -> Vec<f64> {
        self.params().into_iter().map(f64::ln).collect()
    }

    pub fn set_log_params(&mut self, log_values: &[f64]) -> Result<()> {
        let values: Vec<f64> = log_values.iter().map(|v| v.exp()).collect();
        *self = Kernel::from_flat(self.spec, &values)?;
        Ok(())
    }

    /// κ(a, a) for any a.
    pub fn zero_distance(&self) -> f64 {
        self.components.iter().map(|c| c.signal_variance).sum()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.components.iter().map(|c| c.eval(a, b)).sum()
    }

    fn check_points(&self, points: &DMatrix<f64>, what: &str) -> Result<()> {
        if points.ncols() != self.spec.input_dim {
            return Err(CgpdsError::shape(format!(
                "{what} has {} columns but the kernel input dimension is {}",
                points.ncols(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    pub fn matrix(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_points(a, "A")?;
        self.check_points(b, "B")?;
        let rows_a = rows(a);
        let rows_b = rows(b);
        Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, k| {
            self.eval(&rows_a[i], &rows_b[k])
        }))
    }

    pub fn diag(&self, a: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_points(a, "A")?;
        Ok(DVector::from_element(a.nrows(), self.zero_distance()))
    }

    /// Gram matrix `κ(A, A)` plus jitter, factorized.
    pub fn gram(&self, a: &DMatrix<f64>, label: &str) -> Result<Factored> {
        let k = self.matrix(a, a)?;
        factor_with_jitter(&k, self.zero_distance(), label)
    }

    /// Per-entry partial derivatives `∂κ(a_i, b_k)/∂θ_p` in natural units, one
    /// matrix per flat parameter.
    pub fn param_gradients(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.check_points(a, "A")?;
        self.check_points(b, "B")?;
        let np = self.n_params();
        let params = self.params();
        let mut out = vec![DMatrix::zeros(a.nrows(), b.nrows()); np];
        let rows_a = rows(a);
        let rows_b = rows(b);
        let mut buf = vec![0.0; np];
        for i in 0..a.nrows() {
            for k in 0..b.nrows() {
                buf.iter_mut().for_each(|v| *v = 0.0);
                self.accumulate(&rows_a[i], &rows_b[k], 1.0, &mut buf, None);
                for p in 0..np {
                    out[p][(i, k)] = buf[p] / params[p];
                }
            }
        }
        Ok(out)
    }

    /// Per-entry partial derivatives `∂κ(a_i, b_k)/∂a_{i,q}`, one matrix per
    /// input coordinate q. Derivatives with respect to `b` are the negatives.
    pub fn input_gradients(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.check_points(a, "A")?;
        self.check_points(b, "B")?;
        let dim = self.spec.input_dim;
        let mut out = vec![DMatrix::zeros(a.nrows(), b.nrows()); dim];
        let rows_a = rows(a);
        let rows_b = rows(b);
        let mut sink = vec![0.0; self.n_params()];
        let mut ga = vec![0.0; dim];
        for i in 0..a.nrows() {
            for k in 0..b.nrows() {
                ga.iter_mut().for_each(|v| *v = 0.0);
                self.accumulate(&rows_a[i], &rows_b[k], 1.0, &mut sink, Some(&mut ga));
                for q in 0..dim {
                    out[q][(i, k)] = ga[q];
                }
            }
        }
        Ok(out)
    }

    /// `Σ_ik g_ik ∂κ(a_i,b_k)/∂log θ` for every flat parameter.
    pub fn log_param_grad(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, g: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.n_params()];
        let rows_a = rows(a);
        let rows_b = rows(b);
        for i in 0..a.nrows() {
            for k in 0..b.nrows() {
                let gik = g[(i, k)];
                if gik != 0.0 {
                    self.accumulate(&rows_a[i], &rows_b[k], gik, &mut out, None);
                }
            }
        }
        out
    }

    /// Backpropagates an upstream gradient `g` on `κ(A, B)` into both point sets.
    pub fn input_grad(
        &self,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        g: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let dim = self.spec.input_dim;
        let mut ga_all = DMatrix::zeros(a.nrows(), dim);
        let mut gb_all = DMatrix::zeros(b.nrows(), dim);
        let rows_a = rows(a);
        let rows_b = rows(b);
        let mut sink = vec![0.0; self.n_params()];
        let mut ga = vec![0.0; dim];
        for i in 0..a.nrows() {
            for k in 0..b.nrows() {
                let gik = g[(i, k)];
                if gik == 0.0 {
                    continue;
                }
                ga.iter_mut().for_each(|v| *v = 0.0);
                self.accumulate(&rows_a[i], &rows_b[k], gik, &mut sink, Some(&mut ga));
                for q in 0..dim {
                    ga_all[(i, q)] += ga[q];
                    gb_all[(k, q)] -= ga[q];
                }
            }
        }
        (ga_all, gb_all)
    }

    /// Log-parameter gradient of a jittered Gram matrix `κ(A,A) + c·κ(0)·I`
    /// given the upstream gradient on the full matrix.
    pub fn gram_log_param_grad(&self, a: &DMatrix<f64>, g: &DMatrix<f64>, rel_jitter: f64) -> Vec<f64> {
        let mut out = self.log_param_grad(a, a, g);
        let trace = g.trace();
        let mut off = 0;
        for c in &self.components {
            out[off] += rel_jitter * c.signal_variance * trace;
            off += c.n_params();
        }
        out
    }

    fn accumulate(&self, a: &[f64], b: &[f64], g: f64, out: &mut [f64], mut ga: Option<&mut [f64]>) {
        let mut off = 0;
        for c in &self.components {
            let n = c.n_params();
            c.accumulate(a, b, g, &mut out[off..off + n], ga.as_deref_mut());
            off += n;
        }
    }
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn sum_kernel() -> Kernel {
        Kernel::rbf_plus_periodic(
            KernelParams::rbf(0.7, vec![1.3]),
            KernelParams::periodic(1.4, vec![0.9], 2.2),
        )
        .unwrap()
    }

    #[test]
    fn rbf_zero_distance_is_signal_variance() {
        let k = Kernel::rbf(2.5, vec![0.3, 4.0]).unwrap();
        assert_eq!(k.eval(&[1.0, -2.0], &[1.0, -2.0]), 2.5);
    }

    #[test]
    fn rbf_closed_form() {
        let k = Kernel::rbf(1.0, vec![1.0, 1.0]).unwrap();
        assert_relative_eq!(k.eval(&[0.0, 0.0], &[1.0, 1.0]), (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn periodic_lag_of_one_period() {
        let k = Kernel::periodic(1.7, 0.8, 3.0).unwrap();
        assert_relative_eq!(k.eval(&[0.4], &[3.4]), 1.7, epsilon = 1e-12);
    }

    #[test]
    fn diag_is_constant_and_empty_for_no_points() {
        let k = Kernel::rbf(2.5, vec![1.0]).unwrap();
        let a = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 5.0]);
        assert!(k.diag(&a).unwrap().iter().all(|v| *v == 2.5));
        assert_eq!(k.diag(&DMatrix::zeros(0, 1)).unwrap().len(), 0);
    }

    #[test]
    fn diag_matches_matrix_diagonal() {
        let k = sum_kernel();
        let a = DMatrix::from_row_slice(4, 1, &[0.1, 0.7, -3.0, 2.2]);
        let m = k.matrix(&a, &a).unwrap();
        assert_eq!(k.diag(&a).unwrap(), m.diagonal());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let k = Kernel::rbf(1.0, vec![1.0, 1.0]).unwrap();
        let a = DMatrix::zeros(3, 1);
        assert!(matches!(k.matrix(&a, &a), Err(CgpdsError::Shape(_))));
    }

    #[test]
    fn sum_family_rejected_for_vector_inputs() {
        assert!(KernelSpec::new(KernelFamily::RbfPlusPeriodic, 2).is_err());
        assert!(KernelSpec::new(KernelFamily::RbfArd, 0).is_err());
        assert!(Kernel::rbf(-1.0, vec![1.0]).is_err());
    }

    #[test]
    fn signal_variance_and_lengthscale_partials_at_zero_distance() {
        let k = Kernel::rbf(1.0, vec![0.6]).unwrap();
        let a = DMatrix::from_row_slice(1, 1, &[0.3]);
        let g = k.param_gradients(&a, &a).unwrap();
        assert_eq!(g[0][(0, 0)], 1.0);
        assert_eq!(g[1][(0, 0)], 0.0);
    }

    #[test]
    fn family_names_round_trip() {
        for f in [KernelFamily::RbfArd, KernelFamily::Periodic, KernelFamily::RbfPlusPeriodic] {
            assert_eq!(f.name().parse::<KernelFamily>().unwrap(), f);
        }
        assert!("matern".parse::<KernelFamily>().is_err());
    }

    fn check_gradients(kernel: &Kernel, a: &DMatrix<f64>, b: &DMatrix<f64>) {
        let h = 1e-5;
        let params = kernel.params();
        let analytic = kernel.param_gradients(a, b).unwrap();
        for p in 0..params.len() {
            for i in 0..a.nrows() {
                for k in 0..b.nrows() {
                    let f = |x: f64| {
                        let mut v = params.clone();
                        v[p] = x;
                        Kernel::from_flat(kernel.spec(), &v).unwrap().matrix(a, b).unwrap()[(i, k)]
                    };
                    let fd = central_diff(f, params[p], h);
                    let an = analytic[p][(i, k)];
                    let rel = (fd - an).abs() / an.abs().max(1.0);
                    assert!(rel <= 1e-6, "param {p} entry ({i},{k}): {an} vs {fd}");
                }
            }
        }
        let inputs = kernel.input_gradients(a, b).unwrap();
        for q in 0..a.ncols() {
            for i in 0..a.nrows() {
                for k in 0..b.nrows() {
                    let f = |x: f64| {
                        let mut aa = a.clone();
                        aa[(i, q)] = x;
                        kernel.eval(&rows(&aa)[i], &rows(b)[k])
                    };
                    let fd = central_diff(f, a[(i, q)], h);
                    let an = inputs[q][(i, k)];
                    assert!((fd - an).abs() / an.abs().max(1.0) <= 1e-6);
                }
            }
        }
    }

    fn rand_kernel(family: u8, dim: usize, p: &[f64]) -> Kernel {
        match family % 3 {
            0 => Kernel::rbf(p[0], p[1..1 + dim].to_vec()).unwrap(),
            1 => Kernel::periodic(p[0], p[1], p[2] + 0.5).unwrap(),
            _ => Kernel::rbf_plus_periodic(
                KernelParams::rbf(p[0], vec![p[1]]),
                KernelParams::periodic(p[2], vec![p[3]], p[4] + 0.5),
            )
            .unwrap(),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn analytic_partials_match_central_differences(
            family in 0u8..3,
            params in proptest::collection::vec(0.3f64..2.5, 5),
            pts in proptest::collection::vec(-2.0f64..2.0, 12),
        ) {
            let dim = if family % 3 == 0 { 3 } else { 1 };
            let k = rand_kernel(family, dim, &params);
            let a = DMatrix::from_row_slice(2, dim, &pts[..2 * dim]);
            let b = DMatrix::from_row_slice(2, dim, &pts[6..6 + 2 * dim]);
            check_gradients(&k, &a, &b);
        }

        #[test]
        fn gram_is_symmetric_and_psd(
            family in 0u8..3,
            params in proptest::collection::vec(0.3f64..2.5, 5),
            pts in proptest::collection::vec(-3.0f64..3.0, 1..20),
        ) {
            let k = rand_kernel(family, 1, &params);
            let a = DMatrix::from_column_slice(pts.len(), 1, &pts);
            let m = k.matrix(&a, &a).unwrap();
            prop_assert_eq!(&m, &m.transpose());
            let shifted = &m + DMatrix::identity(pts.len(), pts.len()) * 1e-10;
            let eig = shifted.symmetric_eigenvalues();
            // eigen-solver rounding is relative to the matrix norm
            let tol = 1e-12 * pts.len() as f64 * k.zero_distance();
            prop_assert!(eig.iter().all(|e| *e >= -tol), "{:?}", eig);
        }

        #[test]
        fn kernels_are_stationary(
            family in 0u8..3,
            params in proptest::collection::vec(0.3f64..2.5, 5),
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -10.0f64..10.0,
        ) {
            let k = rand_kernel(family, 1, &params);
            let lhs = k.eval(&[a], &[b]);
            let rhs = k.eval(&[a + c], &[b + c]);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * k.zero_distance());
        }
    }
}
