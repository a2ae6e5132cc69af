use nalgebra::DMatrix;

use crate::model::{CgpdsModel, ModelShape};
use crate::synthetic::random_instance;

pub fn random_model(seed: u64, n: usize, d: usize, q: usize, j: usize, m: usize) -> (CgpdsModel, DMatrix<f64>) {
    random_instance(seed, ModelShape { n, d, q, j, m }).unwrap()
}
