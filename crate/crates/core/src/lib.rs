pub mod dataset;
pub mod elbo;
pub mod error;
pub mod kernels;
pub mod latent_prior;
pub mod linalg;
pub mod model;
pub mod model_file;
pub mod oracle;
pub mod predictor;
pub mod sparse_layer;
pub mod synthetic;
pub mod trainer;

#[cfg(test)]
pub(crate) mod test_support;
