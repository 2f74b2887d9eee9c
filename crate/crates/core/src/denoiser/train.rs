//! Loss gradients, AdamW updates and noisy training examples.

use std::collections::BTreeMap;

use rand::Rng;

use super::{pair_targets, DenoiserError, DenoiserModel};
use crate::diffusion::{cumulative_matrix, forward_sample_with, NoiseSchedule, PriorK};
use crate::molgraph::{EdgeTensor, MolGraph};
use crate::nn::Tape;
use crate::rng::{derive_seed, derive_seed2, rng_from_seed};
use crate::scalar::Scalar;

pub const DEFAULT_LR: f64 = 2e-3;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-12;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Noise process a model was trained under; stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSetup {
    pub t_max: usize,
    pub s: f64,
    pub prior: Vec<f64>,
    /// Modality configuration name the inputs were built with.
    pub modality: String,
}

impl DiffusionSetup {
    pub fn schedule<S: Scalar>(&self) -> NoiseSchedule<S> {
        NoiseSchedule::cosine(self.t_max, self.s)
    }

    pub fn prior_k<S: Scalar>(&self) -> Result<PriorK<S>, DenoiserError> {
        PriorK::<f64>::new(&self.prior).map(|p| p.cast()).map_err(|e| DenoiserError::Header(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<S> {
    pub model: DenoiserModel<S>,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub setup: DiffusionSetup,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: DenoiserModel<S>, seed: u64, setup: DiffusionSetup) -> Self {
        let zeros: Vec<Vec<S>> = model.params().iter().map(|t| vec![S::zero(); t.data.len()]).collect();
        Self { model, m: zeros.clone(), v: zeros, step: 0, lr: DEFAULT_LR, weight_decay: DEFAULT_WEIGHT_DECAY, seed, setup }
    }
}

/// One denoising target: fixed node inputs, the clean edges and a noisy draw.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub nodes: MolGraph,
    pub clean: EdgeTensor,
    pub noisy: EdgeTensor,
    pub t: usize,
    pub t_norm: f64,
}

/// Draws `t` uniformly from `1..=t_max` and corrupts `clean` to that step.
pub fn sample_training_example<S: Scalar>(
    nodes: &MolGraph,
    clean: &EdgeTensor,
    sched: &NoiseSchedule<S>,
    prior: &PriorK<S>,
    seed: u64,
) -> TrainingExample {
    let mut rng = rng_from_seed(seed);
    let t = rng.gen_range(1..=sched.t_max());
    let noisy = forward_sample_with(clean, &cumulative_matrix(t, sched, prior), &mut rng);
    TrainingExample { nodes: nodes.clone(), clean: clean.clone(), noisy, t, t_norm: t as f64 / sched.t_max() as f64 }
}

/// As [`sample_training_example`] with a fixed `t` (0 leaves the edges clean).
pub fn sample_training_example_at<S: Scalar>(
    nodes: &MolGraph,
    clean: &EdgeTensor,
    t: usize,
    sched: &NoiseSchedule<S>,
    prior: &PriorK<S>,
    seed: u64,
) -> TrainingExample {
    let mut rng = rng_from_seed(seed);
    let noisy = forward_sample_with(clean, &cumulative_matrix(t, sched, prior), &mut rng);
    TrainingExample { nodes: nodes.clone(), clean: clean.clone(), noisy, t, t_norm: t as f64 / sched.t_max() as f64 }
}

/// Mean batch loss and its gradient for every parameter. Examples of
/// different sizes are evaluated per size and combined weighted by count.
pub fn gradients<S: Scalar>(
    model: &DenoiserModel<S>,
    batch: &[TrainingExample],
) -> Result<(f64, Vec<Vec<S>>), DenoiserError> {
    if batch.is_empty() {
        return Err(DenoiserError::ShapeMismatch("empty training batch".into()));
    }
    let mut by_n: BTreeMap<usize, Vec<&TrainingExample>> = BTreeMap::new();
    for ex in batch {
        by_n.entry(ex.nodes.len()).or_default().push(ex);
    }
    let mut grads: Vec<Vec<S>> = model.params().iter().map(|t| vec![S::zero(); t.data.len()]).collect();
    let mut total = 0.0;
    for (n, group) in by_n {
        let mut gb = model.batch(n);
        for ex in &group {
            gb.push(&ex.nodes, &ex.noisy, ex.t_norm)?;
        }
        let clean: Vec<&EdgeTensor> = group.iter().map(|ex| &ex.clean).collect();
        let mut tape = Tape::new(true);
        let logits = model.forward_on(&mut tape, &gb)?;
        let loss = tape.cross_entropy_upper(logits, n, pair_targets(&clean, n));
        let w = group.len() as f64 / batch.len() as f64;
        total += w * tape.value(loss).data[0].f64();
        let ws = S::of(w);
        for (idx, g) in tape.backward(loss) {
            for (acc, v) in grads[idx].iter_mut().zip(g) {
                *acc += ws * v;
            }
        }
    }
    for (name, g) in model.names().iter().zip(&grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(DenoiserError::NonFiniteGradient(name.clone()));
        }
    }
    Ok((total, grads))
}

/// One AdamW step (decoupled weight decay, bias-corrected moments).
/// Returns the batch loss before the update.
pub fn train_step<S: Scalar>(state: &mut TrainState<S>, batch: &[TrainingExample]) -> Result<f64, DenoiserError> {
    let (loss, grads) = gradients(&state.model, batch)?;
    state.step += 1;
    let (b1, b2) = ADAM_BETAS;
    let t = state.step as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (lr, wd) = (S::of(state.lr), S::of(state.weight_decay));
    let (b1s, b2s, eps) = (S::of(b1), S::of(b2), S::of(ADAM_EPS));
    let (bc1, bc2) = (S::of(bc1), S::of(bc2));
    let one = S::one();
    for (i, p) in state.model.params_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data.iter_mut().enumerate() {
            let g = grads[i][j];
            *x -= lr * wd * *x;
            m[j] = b1s * m[j] + (one - b1s) * g;
            v[j] = b2s * v[j] + (one - b2s) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(loss)
}

/// Draws the training batch for `state.step` from `pool` (with replacement)
/// and applies one update. Deterministic in `(state.seed, state.step)`.
pub fn fit_step<S: Scalar>(
    state: &mut TrainState<S>,
    pool: &[(MolGraph, EdgeTensor)],
    batch_size: usize,
    sched: &NoiseSchedule<S>,
    prior: &PriorK<S>,
) -> Result<f64, DenoiserError> {
    let step_seed = derive_seed2(state.seed, 0x7472_6169_6e, state.step);
    let mut rng = rng_from_seed(step_seed);
    let batch: Vec<TrainingExample> = (0..batch_size)
        .map(|b| {
            let (nodes, clean) = &pool[rng.gen_range(0..pool.len())];
            sample_training_example(nodes, clean, sched, prior, derive_seed(step_seed, b as u64))
        })
        .collect();
    train_step(state, &batch)
}
