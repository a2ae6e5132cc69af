//! Full model state and its unconstrained parameter vector.
//!
//! The flattened vector used by the optimizer and by gradient checks has a
//! fixed block order:
//!
//! 1. temporal kernel log-parameters
//! 2. for each latent process `g_1, ..., g_J, h`: `log σ², log ℓ_1..ℓ_Q`
//! 3. weights `W`, row-major `D×J`
//! 4. `log β`
//! 5. latent means, row-major `N×Q`
//! 6. latent log-variances, row-major `N×Q`
//! 7. inducing inputs of each process `g_1, ..., g_J, h`, row-major `M×Q`
//! 8. stacked inducing mean `[m_1; ...; m_J; m_v]`
//! 9. lower triangle of the joint covariance factor, row-major, with the
//!    diagonal entries stored as logs

use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{CgpdsError, Result};
use crate::kernels::Kernel;
use crate::latent_prior::{TemporalGrid, VariationalLatentX};
use crate::sparse_layer::{process_label, InducingSet, JointInducingPosterior, LatentLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub n: usize,
    pub d: usize,
    pub q: usize,
    pub j: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgpdsModel {
    pub grid: TemporalGrid,
    pub kernel_x: Kernel,
    pub layer: LatentLayer,
    /// `D×J` mixing weights of the local processes.
    pub weights: DMatrix<f64>,
    /// Noise precision.
    pub beta: f64,
    pub qx: VariationalLatentX,
    pub qu: JointInducingPosterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    KernelX,
    LayerKernel(usize),
    Weights,
    LogBeta,
    LatentMeans,
    LatentLogVariances,
    Inducing(usize),
    InducingMean,
    InducingFactor,
}

impl fmt::Display for ParamBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamBlock::KernelX => write!(f, "temporal kernel"),
            ParamBlock::LayerKernel(a) => write!(f, "kernel of process {a}"),
            ParamBlock::Weights => write!(f, "W"),
            ParamBlock::LogBeta => write!(f, "beta"),
            ParamBlock::LatentMeans => write!(f, "latent means"),
            ParamBlock::LatentLogVariances => write!(f, "latent variances"),
            ParamBlock::Inducing(a) => write!(f, "inducing inputs of process {a}"),
            ParamBlock::InducingMean => write!(f, "inducing mean"),
            ParamBlock::InducingFactor => write!(f, "inducing covariance factor"),
        }
    }
}

/// Offsets of every block in the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub blocks: Vec<(ParamBlock, Range<usize>)>,
    pub len: usize,
}

impl ParamLayout {
    pub fn range(&self, block: ParamBlock) -> Range<usize> {
        self.blocks
            .iter()
            .find(|(b, _)| *b == block)
            .map(|(_, r)| r.clone())
            .unwrap_or(0..0)
    }

    pub fn block_of(&self, index: usize) -> Option<ParamBlock> {
        self.blocks.iter().find(|(_, r)| r.contains(&index)).map(|(b, _)| *b)
    }
}

impl CgpdsModel {
    pub fn new(
        grid: TemporalGrid,
        kernel_x: Kernel,
        layer: LatentLayer,
        weights: DMatrix<f64>,
        beta: f64,
        qx: VariationalLatentX,
        qu: JointInducingPosterior,
    ) -> Result<Self> {
        let model = CgpdsModel {
            grid,
            kernel_x,
            layer,
            weights,
            beta,
            qx,
            qu,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_x.input_dim() != 1 {
            return Err(CgpdsError::config("temporal kernel must be one-dimensional"));
        }
        if self.qx.n_points() != self.grid.len() {
            return Err(CgpdsError::shape("q(X) does not cover the training grid"));
        }
        if self.qx.latent_dim() != self.layer.latent_dim() {
            return Err(CgpdsError::shape("latent dimension mismatch between q(X) and the latent layer"));
        }
        if self.weights.ncols() != self.layer.n_local() || self.weights.nrows() == 0 {
            return Err(CgpdsError::shape("W must be D×J with D >= 1"));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(CgpdsError::input("W must be finite"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(CgpdsError::input("beta must be finite and positive"));
        }
        if self.qu.block != self.layer.n_inducing() || self.qu.n_processes() != self.layer.n_processes() {
            return Err(CgpdsError::shape("inducing posterior does not match the latent layer"));
        }
        Ok(())
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            n: self.grid.len(),
            d: self.weights.nrows(),
            q: self.layer.latent_dim(),
            j: self.layer.n_local(),
            m: self.layer.n_inducing(),
        }
    }

    /// Mixing coefficients of dimension `d` over all processes (`h` has weight 1).
    pub fn coefficients(&self, d: usize) -> Vec<f64> {
        let mut c: Vec<f64> = self.weights.row(d).iter().copied().collect();
        c.push(1.0);
        c
    }

    pub fn process_name(&self, a: usize) -> String {
        process_label(a, self.layer.n_local())
    }

    pub fn layout(&self) -> ParamLayout {
        let s = self.shape();
        let p = (s.j + 1) * s.m;
        let mut blocks = Vec::new();
        let mut off = 0;
        let mut push = |b: ParamBlock, len: usize| {
            blocks.push((b, off..off + len));
            off += len;
        };
        push(ParamBlock::KernelX, self.kernel_x.n_params());
        for a in 0..=s.j {
            push(ParamBlock::LayerKernel(a), self.layer.kernels[a].n_params());
        }
        push(ParamBlock::Weights, s.d * s.j);
        push(ParamBlock::LogBeta, 1);
        push(ParamBlock::LatentMeans, s.n * s.q);
        push(ParamBlock::LatentLogVariances, s.n * s.q);
        for a in 0..=s.j {
            push(ParamBlock::Inducing(a), s.m * s.q);
        }
        push(ParamBlock::InducingMean, p);
        push(ParamBlock::InducingFactor, p * (p + 1) / 2);
        ParamLayout { blocks, len: off }
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let s = self.shape();
        let mut v = Vec::with_capacity(self.layout().len);
        v.extend(self.kernel_x.log_params());
        for k in &self.layer.kernels {
            v.extend(k.log_params());
        }
        extend_row_major(&mut v, &self.weights);
        v.push(self.beta.ln());
        extend_row_major(&mut v, &self.qx.means);
        v.extend(row_major(&self.qx.variances).map(f64::ln));
        for z in &self.layer.inducing {
            extend_row_major(&mut v, &z.z);
        }
        v.extend(self.qu.mean.iter().copied());
        let p = (s.j + 1) * s.m;
        for i in 0..p {
            for j in 0..=i {
                let x = self.qu.factor[(i, j)];
                v.push(if i == j { x.ln() } else { x });
            }
        }
        v
    }

    /// Overwrites every parameter from an unconstrained vector in layout order.
    pub fn set_from_vector(&mut self, v: &[f64]) -> Result<()> {
        let layout = self.layout();
        if v.len() != layout.len {
            return Err(CgpdsError::shape(format!(
                "parameter vector has {} entries, layout needs {}",
                v.len(),
                layout.len
            )));
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            let block = layout.block_of(i).map_or("?".to_string(), |b| b.to_string());
            return Err(CgpdsError::numeric(block, format!("entry {i} is {}", v[i])));
        }
        let s = self.shape();
        let take = |b: ParamBlock| &v[layout.range(b)];
        self.kernel_x.set_log_params(take(ParamBlock::KernelX))?;
        for a in 0..=s.j {
            self.layer.kernels[a].set_log_params(take(ParamBlock::LayerKernel(a)))?;
        }
        self.weights = DMatrix::from_row_slice(s.d, s.j, take(ParamBlock::Weights));
        self.beta = take(ParamBlock::LogBeta)[0].exp();
        self.qx.means = DMatrix::from_row_slice(s.n, s.q, take(ParamBlock::LatentMeans));
        self.qx.variances =
            DMatrix::from_row_slice(s.n, s.q, take(ParamBlock::LatentLogVariances)).map(f64::exp);
        for a in 0..=s.j {
            // coincident inducing inputs are tolerated during optimization
            self.layer.inducing[a] = InducingSet {
                z: DMatrix::from_row_slice(s.m, s.q, take(ParamBlock::Inducing(a))),
            };
        }
        self.qu.mean = DVector::from_column_slice(take(ParamBlock::InducingMean));
        let p = (s.j + 1) * s.m;
        let vals = take(ParamBlock::InducingFactor);
        let mut k = 0;
        let mut factor = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in 0..=i {
                factor[(i, j)] = if i == j { vals[k].exp() } else { vals[k] };
                k += 1;
            }
        }
        self.qu.factor = factor;
        let positive = self.beta > 0.0
            && self.qx.variances.iter().all(|x| *x > 0.0)
            && self.qu.factor.diagonal().iter().all(|x| *x > 0.0);
        if !positive {
            return Err(CgpdsError::numeric("positivity", "a positive parameter underflowed to zero"));
        }
        Ok(())
    }
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

fn extend_row_major(v: &mut Vec<f64>, m: &DMatrix<f64>) {
    v.extend(row_major(m));
}
