//! JSON persistence of a trained model. Arrays are nested row-major lists and
//! floats are written in shortest round-trip form, so `load(save(m))` restores
//! every value bitwise.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CgpdsError, Result};
use crate::kernels::{Kernel, KernelFamily, KernelSpec};
use crate::latent_prior::{TemporalGrid, VariationalLatentX};
use crate::linalg::{matrix_from_rows, matrix_to_rows};
use crate::model::CgpdsModel;
use crate::sparse_layer::{InducingSet, JointInducingPosterior, LatentLayer};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct ShapeBlock {
    pub n: usize,
    pub d: usize,
    pub q: usize,
    pub j: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBlock {
    pub family: KernelFamily,
    /// Natural-unit values in declared order: `σ², ℓ_1..ℓ_k` per component,
    /// followed by the period for periodic components.
    pub params: Vec<f64>,
}

impl KernelBlock {
    fn from_kernel(k: &Kernel) -> Self {
        KernelBlock { family: k.family(), params: k.params() }
    }

    fn to_kernel(&self, input_dim: usize) -> Result<Kernel> {
        Kernel::from_flat(KernelSpec::new(self.family, input_dim)?, &self.params)
    }
}

/// Off-diagonal block `(row, col)`, `row > col`, of the joint factor over
/// `[u_1; ...; u_J; v]`; index `J` is the global process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossBlock {
    pub row: usize,
    pub col: usize,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub iterations: usize,
    pub iterations_run: usize,
    pub step_size: f64,
    pub batch_dims: usize,
    pub freeze_inducing: bool,
    pub convergence_tol: f64,
    pub initial_elbo: f64,
    pub final_elbo: f64,
    pub stop: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub shape: ShapeBlock,
    pub times: Vec<f64>,
    pub columns: Vec<String>,
    /// Per-dimension means removed before training.
    pub y_offset: Vec<f64>,
    /// Centered training data, `N×D`.
    pub train_y: Vec<Vec<f64>>,
    pub kernel_x: KernelBlock,
    pub kernel_h: KernelBlock,
    pub kernel_g: Vec<KernelBlock>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub beta: f64,
    pub latent_means: Vec<Vec<f64>>,
    pub latent_variances: Vec<Vec<f64>>,
    #[serde(rename = "Z_h")]
    pub z_h: Vec<Vec<f64>>,
    #[serde(rename = "Z_g")]
    pub z_g: Vec<Vec<Vec<f64>>>,
    pub m_v: Vec<f64>,
    #[serde(rename = "L_v")]
    pub l_v: Vec<Vec<f64>>,
    pub m_u: Vec<Vec<f64>>,
    #[serde(rename = "L_u")]
    pub l_u: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "L_cross")]
    pub l_cross: Vec<CrossBlock>,
    pub training: Option<TrainingMeta>,
}

fn block(m: &DMatrix<f64>, a: usize, b: usize, size: usize) -> Vec<Vec<f64>> {
    matrix_to_rows(&m.view((a * size, b * size), (size, size)).into_owned())
}

fn checked(rows: &[Vec<f64>], shape: (usize, usize), what: &str) -> Result<DMatrix<f64>> {
    let m = matrix_from_rows(rows)?;
    if m.shape() != shape && !(rows.is_empty() && shape.0 == 0) {
        return Err(CgpdsError::shape(format!(
            "{what} is {}×{}, expected {}×{}",
            m.nrows(),
            m.ncols(),
            shape.0,
            shape.1
        )));
    }
    Ok(m)
}

impl ModelFile {
    pub fn from_model(
        model: &CgpdsModel,
        train_y: &DMatrix<f64>,
        y_offset: &[f64],
        columns: &[String],
        training: Option<TrainingMeta>,
    ) -> Result<Self> {
        let s = model.shape();
        if train_y.shape() != (s.n, s.d) || y_offset.len() != s.d || columns.len() != s.d {
            return Err(CgpdsError::shape("training data, offsets or column names do not match the model"));
        }
        let j = s.j;
        let qu = &model.qu;
        let mut l_cross = Vec::new();
        for row in 1..=j {
            for col in 0..row {
                l_cross.push(CrossBlock { row, col, values: block(&qu.factor, row, col, s.m) });
            }
        }
        Ok(ModelFile {
            format_version: FORMAT_VERSION,
            shape: ShapeBlock { n: s.n, d: s.d, q: s.q, j, m: s.m },
            times: model.grid.times().to_vec(),
            columns: columns.to_vec(),
            y_offset: y_offset.to_vec(),
            train_y: matrix_to_rows(train_y),
            kernel_x: KernelBlock::from_kernel(&model.kernel_x),
            kernel_h: KernelBlock::from_kernel(&model.layer.kernels[j]),
            kernel_g: model.layer.kernels[..j].iter().map(KernelBlock::from_kernel).collect(),
            w: matrix_to_rows(&model.weights),
            beta: model.beta,
            latent_means: matrix_to_rows(&model.qx.means.transpose()),
            latent_variances: matrix_to_rows(&model.qx.variances.transpose()),
            z_h: matrix_to_rows(&model.layer.inducing[j].z),
            z_g: model.layer.inducing[..j].iter().map(|z| matrix_to_rows(&z.z)).collect(),
            m_v: qu.mean_block(j).iter().copied().collect(),
            l_v: block(&qu.factor, j, j, s.m),
            m_u: (0..j).map(|a| qu.mean_block(a).iter().copied().collect()).collect(),
            l_u: (0..j).map(|a| block(&qu.factor, a, a, s.m)).collect(),
            l_cross,
            training,
        })
    }

    /// Rebuilds the model and the centered training data.
    pub fn to_model(&self) -> Result<(CgpdsModel, DMatrix<f64>)> {
        if self.format_version != FORMAT_VERSION {
            return Err(CgpdsError::Format(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let ShapeBlock { n, d, q, j, m } = self.shape;
        if self.times.len() != n || self.columns.len() != d || self.y_offset.len() != d {
            return Err(CgpdsError::shape("times, columns or y_offset do not match the shape block"));
        }
        if self.kernel_g.len() != j || self.z_g.len() != j || self.m_u.len() != j || self.l_u.len() != j {
            return Err(CgpdsError::shape("per-process arrays do not match J"));
        }
        let train_y = checked(&self.train_y, (n, d), "train_y")?;
        let grid = TemporalGrid::new(self.times.clone())?;
        let kernel_x = self.kernel_x.to_kernel(1)?;
        let mut kernels = Vec::with_capacity(j + 1);
        let mut inducing = Vec::with_capacity(j + 1);
        for a in 0..j {
            kernels.push(self.kernel_g[a].to_kernel(q)?);
            inducing.push(InducingSet::new(checked(&self.z_g[a], (m, q), "Z_g")?)?);
        }
        kernels.push(self.kernel_h.to_kernel(q)?);
        inducing.push(InducingSet::new(checked(&self.z_h, (m, q), "Z_h")?)?);
        let layer = LatentLayer::new(kernels, inducing)?;
        let weights = checked(&self.w, (d, j), "W")?;
        let means = checked(&self.latent_means, (q, n), "latent_means")?.transpose();
        let variances = checked(&self.latent_variances, (q, n), "latent_variances")?.transpose();
        let qx = VariationalLatentX::new(means, variances)?;

        let p = (j + 1) * m;
        let mut mean = DVector::zeros(p);
        let mut factor = DMatrix::zeros(p, p);
        let mut put = |a: usize, b: usize, rows: &[Vec<f64>], what: &str| -> Result<()> {
            let blk = checked(rows, (m, m), what)?;
            factor.view_mut((a * m, b * m), (m, m)).copy_from(&blk);
            Ok(())
        };
        for a in 0..j {
            put(a, a, &self.l_u[a], "L_u")?;
        }
        put(j, j, &self.l_v, "L_v")?;
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.l_cross {
            if c.row > j || c.col >= c.row {
                return Err(CgpdsError::shape(format!("L_cross block ({}, {}) is not below the diagonal", c.row, c.col)));
            }
            if !seen.insert((c.row, c.col)) {
                return Err(CgpdsError::shape("repeated L_cross block"));
            }
            put(c.row, c.col, &c.values, "L_cross")?;
        }
        if self.l_cross.len() != j * (j + 1) / 2 {
            return Err(CgpdsError::shape("L_cross must hold every block below the diagonal"));
        }
        let mut fill = |a: usize, v: &[f64]| -> Result<()> {
            if v.len() != m {
                return Err(CgpdsError::shape("inducing mean block has the wrong length"));
            }
            mean.rows_mut(a * m, m).copy_from_slice(v);
            Ok(())
        };
        for a in 0..j {
            fill(a, &self.m_u[a])?;
        }
        fill(j, &self.m_v)?;
        let qu = JointInducingPosterior::new(mean, factor, m)?;
        let model = CgpdsModel::new(grid, kernel_x, layer, weights, self.beta, qx, qu)?;
        Ok((model, train_y))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelFile::from_json(&std::fs::read_to_string(path)?)
    }

    /// The training metadata, or a state error for an untrained model.
    pub fn training(&self) -> Result<&TrainingMeta> {
        self.training
            .as_ref()
            .ok_or_else(|| CgpdsError::State("model file has no training metadata; run train first".into()))
    }
}
