//! Categorical forward noising of edge classes.
//!
//! The cumulative corruption after `t` steps is
//! `Q̄_t = ᾱ_t · I + (1 − ᾱ_t) · 1 kᵀ`, where `k` is the prior over bond
//! classes and `ᾱ_t` follows a cosine schedule.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::molgraph::{BondClass, EdgeTensor};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

/// Probabilities below this are flushed to zero.
pub const PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("posterior normalizer {0:e} is degenerate")]
    DegenerateNormalizer(f64),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("unknown schedule `{0}`")]
    UnknownSchedule(String),
    #[error("timestep {t} outside 0..={t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },
    #[error("io: {0}")]
    Io(String),
}

/// Named noise schedules. Only the cosine form is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = DiffusionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(DiffusionError::UnknownSchedule(other.to_string())),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("cosine")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<S> {
    t_max: usize,
    s: f64,
    alpha_bar: Vec<S>,
    /// `beta[t-1]` is β_t.
    beta: Vec<S>,
}

impl<S: Scalar> NoiseSchedule<S> {
    /// Cosine schedule: `ᾱ_t = f(t)/f(0)`, `f(t) = cos²(π/2 · (t/T + s)/(1 + s))`.
    pub fn cosine(t_max: usize, s: f64) -> Self {
        assert!(t_max >= 1, "t_max must be at least 1");
        assert!(s > 0.0, "offset s must be positive");
        let f = |t: usize| {
            let x = std::f64::consts::FRAC_PI_2 * ((t as f64 / t_max as f64) + s) / (1.0 + s);
            x.cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar: Vec<f64> = (0..=t_max).map(|t| f(t) / f0).collect();
        alpha_bar[0] = 1.0;
        for a in alpha_bar.iter_mut() {
            if *a < PROB_FLOOR {
                *a = 0.0;
            }
        }
        let beta: Vec<f64> = (1..=t_max).map(|t| 1.0 - alpha_bar[t] / alpha_bar[t - 1]).collect();
        Self {
            t_max,
            s,
            alpha_bar: alpha_bar.into_iter().map(S::of).collect(),
            beta: beta.into_iter().map(S::of).collect(),
        }
    }

    pub fn build(kind: ScheduleKind, t_max: usize, s: f64) -> Self {
        match kind {
            ScheduleKind::Cosine => Self::cosine(t_max, s),
        }
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn offset(&self) -> f64 {
        self.s
    }

    pub fn alpha_bar(&self, t: usize) -> S {
        self.alpha_bar[t]
    }

    /// β_t for `1 <= t <= t_max`.
    pub fn beta(&self, t: usize) -> S {
        assert!(t >= 1, "beta is defined for t >= 1");
        self.beta[t - 1]
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bar
    }
}

impl<S: Scalar> Default for NoiseSchedule<S> {
    fn default() -> Self {
        Self::cosine(500, 0.008)
    }
}

/// Prior distribution over bond classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorK<S> {
    probs: Vec<S>,
}

/// Edge-type marginals for the QM9-scale models (5 classes).
pub const QM9_EDGE_TYPES: [f64; 5] = [7.26e-1, 2.24e-1, 1.85e-2, 8.70e-3, 2.29e-2];
/// Edge-type marginals for the PCQM4Mv2-scale models (6 classes).
pub const PCQM_EDGE_TYPES: [f64; 6] = [8.50e-1, 9.72e-2, 8.63e-3, 8.98e-4, 4.28e-2, 8.28e-4];

impl<S: Scalar> PriorK<S> {
    /// Normalizes `weights` to sum to one.
    pub fn new(weights: &[f64]) -> Result<Self, DiffusionError> {
        if !(5..=6).contains(&weights.len()) {
            return Err(DiffusionError::InvalidPrior(format!("expected 5 or 6 classes, got {}", weights.len())));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DiffusionError::InvalidPrior("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(DiffusionError::InvalidPrior("weights sum to zero".into()));
        }
        Ok(Self { probs: weights.iter().map(|w| S::of(w / total)).collect() })
    }

    pub fn qm9() -> Self {
        Self::new(&QM9_EDGE_TYPES).expect("preset is valid")
    }

    pub fn pcqm() -> Self {
        Self::new(&PCQM_EDGE_TYPES).expect("preset is valid")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "qm9" => Some(Self::qm9()),
            "pcqm" => Some(Self::pcqm()),
            _ => None,
        }
    }

    /// Class marginals of the upper triangles of `edges`.
    pub fn from_edges<'a>(edges: impl IntoIterator<Item = &'a EdgeTensor>, k_classes: usize) -> Result<Self, DiffusionError> {
        let mut counts = vec![0.0; k_classes];
        for e in edges {
            for c in e.upper_triangle() {
                let c = c as usize;
                if c >= k_classes {
                    return Err(DiffusionError::InvalidPrior(format!("class {c} outside {k_classes} classes")));
                }
                counts[c] += 1.0;
            }
        }
        Self::new(&counts)
    }

    /// Plain-text vector file: whitespace/comma separated weights, `#` comments.
    pub fn from_file(path: &Path) -> Result<Self, DiffusionError> {
        let text = std::fs::read_to_string(path).map_err(|e| DiffusionError::Io(e.to_string()))?;
        let weights = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(|l| l.split(|c: char| c == ',' || c.is_whitespace()))
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|e| DiffusionError::InvalidPrior(format!("`{t}`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(&weights)
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    pub fn probs_f64(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.f64()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> PriorK<T> {
        PriorK { probs: self.probs.iter().map(|p| T::of(p.f64())).collect() }
    }
}

/// Row-stochastic `K×K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<S> {
    k: usize,
    q: Vec<S>,
}

impl<S: Scalar> TransitionMatrix<S> {
    pub fn identity(k: usize) -> Self {
        let mut q = vec![S::zero(); k * k];
        for i in 0..k {
            q[i * k + i] = S::one();
        }
        Self { k, q }
    }

    /// `keep · I + (1 − keep) · 1 kᵀ`, floored and renormalized.
    fn mix(keep: S, prior: &PriorK<S>) -> Self {
        let k = prior.k();
        let mut q = vec![S::zero(); k * k];
        for i in 0..k {
            for j in 0..k {
                let mut v = (S::one() - keep) * prior.probs[j];
                if i == j {
                    v += keep;
                }
                q[i * k + j] = v;
            }
        }
        let mut m = Self { k, q };
        m.floor_and_renormalize();
        m
    }

    fn floor_and_renormalize(&mut self) {
        let floor = S::of(PROB_FLOOR);
        for i in 0..self.k {
            let row = &mut self.q[i * self.k..(i + 1) * self.k];
            let mut sum = S::zero();
            for v in row.iter_mut() {
                if *v < floor {
                    *v = S::zero();
                }
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.q[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.q[i * self.k..(i + 1) * self.k]
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let k = self.k;
        let mut q = vec![S::zero(); k * k];
        for i in 0..k {
            for p in 0..k {
                let a = self.get(i, p);
                for j in 0..k {
                    q[i * k + j] += a * other.get(p, j);
                }
            }
        }
        Self { k, q }
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.k)
            .map(|i| (self.row(i).iter().map(|v| v.f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.q.iter().zip(&other.q).map(|(a, b)| (a.f64() - b.f64()).abs()).fold(0.0, f64::max)
    }
}

/// One-step matrix `Q_t = (1 − β) I + β 1 kᵀ`.
pub fn one_step_matrix<S: Scalar>(beta: S, prior: &PriorK<S>) -> TransitionMatrix<S> {
    assert!(beta >= S::zero() && beta <= S::one(), "beta must lie in [0, 1]");
    TransitionMatrix::mix(S::one() - beta, prior)
}

/// Cumulative matrix `Q̄_t = ᾱ_t I + (1 − ᾱ_t) 1 kᵀ`.
pub fn cumulative_matrix<S: Scalar>(t: usize, sched: &NoiseSchedule<S>, prior: &PriorK<S>) -> TransitionMatrix<S> {
    assert!(t <= sched.t_max(), "t outside schedule");
    TransitionMatrix::mix(sched.alpha_bar(t), prior)
}

/// Draws an index from an (unnormalized, non-negative) weight vector.
pub fn sample_categorical<S: Scalar>(weights: &[S], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().map(|w| w.f64()).sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        let w = w.f64();
        if u < w {
            return i;
        }
        u -= w;
    }
    // Rounding fell off the end: last class with positive mass.
    weights.iter().rposition(|w| w.f64() > 0.0).unwrap_or(0)
}

/// Corrupts `e0` to step `t` by sampling each unordered pair from its row
/// of `Q̄_t`; the result is mirrored and keeps a `NoBond` diagonal.
pub fn forward_sample<S: Scalar>(
    e0: &EdgeTensor,
    t: usize,
    sched: &NoiseSchedule<S>,
    prior: &PriorK<S>,
    seed: u64,
) -> EdgeTensor {
    let mut rng = rng_from_seed(seed);
    forward_sample_with(e0, &cumulative_matrix(t, sched, prior), &mut rng)
}

pub(crate) fn forward_sample_with<S: Scalar>(
    e0: &EdgeTensor,
    q_bar: &TransitionMatrix<S>,
    rng: &mut ChaCha8Rng,
) -> EdgeTensor {
    let n = e0.len();
    let mut out = EdgeTensor::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            let c = sample_categorical(q_bar.row(e0.get(i, j).index()), rng);
            out.set(i, j, BondClass::from_index(c).expect("class within alphabet"));
        }
    }
    out
}

/// Precomputed one-step and cumulative matrices for a schedule.
#[derive(Debug, Clone)]
pub struct TransitionCache<S> {
    one_step: Vec<TransitionMatrix<S>>,
    cumulative: Vec<TransitionMatrix<S>>,
}

impl<S: Scalar> TransitionCache<S> {
    pub fn new(sched: &NoiseSchedule<S>, prior: &PriorK<S>) -> Self {
        let one_step = std::iter::once(TransitionMatrix::identity(prior.k()))
            .chain((1..=sched.t_max()).map(|t| one_step_matrix(sched.beta(t), prior)))
            .collect();
        let cumulative = (0..=sched.t_max()).map(|t| cumulative_matrix(t, sched, prior)).collect();
        Self { one_step, cumulative }
    }

    pub fn one_step(&self, t: usize) -> &TransitionMatrix<S> {
        &self.one_step[t]
    }

    pub fn cumulative(&self, t: usize) -> &TransitionMatrix<S> {
        &self.cumulative[t]
    }

    /// Posterior over `e_{t-1}` given `e_t` and a predicted clean distribution.
    ///
    /// `Σ_b p̂(b) · normalize_c(Q_t[c, e_t] · Q̄_{t−1}[b, c])`. Clean classes
    /// that cannot reach `e_t` carry no weight; the mixture is renormalized.
    pub fn posterior(&self, e_t: usize, p_hat_e0: &[S], t: usize, out: &mut [S]) -> Result<(), DiffusionError> {
        posterior_into(self.one_step(t), self.cumulative(t - 1), e_t, p_hat_e0, out)
    }
}

fn posterior_into<S: Scalar>(
    q_t: &TransitionMatrix<S>,
    q_bar_prev: &TransitionMatrix<S>,
    e_t: usize,
    p_hat: &[S],
    out: &mut [S],
) -> Result<(), DiffusionError> {
    let k = q_t.k();
    debug_assert_eq!(p_hat.len(), k);
    for o in out.iter_mut() {
        *o = S::zero();
    }
    let tiny = S::of(1e-300);
    let mut used = S::zero();
    for (b, &pb) in p_hat.iter().enumerate() {
        if pb <= S::zero() {
            continue;
        }
        let mut z = S::zero();
        for c in 0..k {
            z += q_t.get(c, e_t) * q_bar_prev.get(b, c);
        }
        if z < tiny {
            continue;
        }
        let w = pb / z;
        for c in 0..k {
            out[c] += w * q_t.get(c, e_t) * q_bar_prev.get(b, c);
        }
        used += pb;
    }
    if used < tiny {
        return Err(DiffusionError::DegenerateNormalizer(used.f64()));
    }
    for o in out.iter_mut() {
        *o /= used;
    }
    Ok(())
}

/// Distribution of `e_{t−1}` given the current class `e_t` and a predicted
/// clean-class distribution, for `t >= 1`.
pub fn posterior_step_distribution<S: Scalar>(
    e_t: usize,
    p_hat_e0: &[S],
    t: usize,
    sched: &NoiseSchedule<S>,
    prior: &PriorK<S>,
) -> Result<Vec<S>, DiffusionError> {
    if t == 0 || t > sched.t_max() {
        return Err(DiffusionError::TimestepOutOfRange { t, t_max: sched.t_max() });
    }
    let q_t = one_step_matrix(sched.beta(t), prior);
    let q_bar = cumulative_matrix(t - 1, sched, prior);
    let mut out = vec![S::zero(); prior.k()];
    posterior_into(&q_t, &q_bar, e_t, p_hat_e0, &mut out)?;
    Ok(out)
}
