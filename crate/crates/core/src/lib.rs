//! Molecular structure elucidation by discrete edge diffusion: spectra fix
//! the atoms, a graph denoiser recovers the bonds.

pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod harness;
pub mod molgraph;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod spectra;

pub use scalar::Scalar;

pub type Denoiser = denoiser::DenoiserModel<f64>;
pub type Denoiser32 = denoiser::DenoiserModel<f32>;
pub type TrainState = denoiser::TrainState<f64>;
pub type Schedule = diffusion::NoiseSchedule<f64>;
pub type Prior = diffusion::PriorK<f64>;
pub type Transitions = diffusion::TransitionCache<f64>;
pub type LoadedModel = harness::LoadedModel<f64>;
