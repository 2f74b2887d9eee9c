//! Reverse-chain sampling, candidate aggregation and ensembling.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::denoiser::{DenoiserError, DenoiserModel};
use crate::diffusion::{sample_categorical, DiffusionError, PriorK, TransitionCache};
use crate::molgraph::{canonical_key, AtomKind, BondClass, EdgeTensor, MolGraph};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::Scalar;
use crate::spectra::ModelInput;

/// Chains evaluated per network call.
pub const CHAIN_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("candidate sets describe different node multisets")]
    MixedTarget,
    #[error("nothing to ensemble")]
    EmptyEnsemble,
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("trajectory file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplerMode {
    /// Draw `e_{t−1}` from the categorical posterior mixed over `p̂(e_0)`.
    #[default]
    Posterior,
    /// Draw `ê_0` from `p̂(e_0)` and re-noise it to `t − 1`.
    PaperLiteral,
}

impl FromStr for SamplerMode {
    type Err = SamplerError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "posterior" => Ok(Self::Posterior),
            "paper-literal" => Ok(Self::PaperLiteral),
            other => Err(SamplerError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Posterior => "posterior",
            Self::PaperLiteral => "paper-literal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_runs: usize,
    pub mode: SamplerMode,
    pub keep_invalid: bool,
    pub master_seed: u64,
    /// Snapshot every `stride` steps; 0 disables capture.
    pub trajectory_stride: usize,
    /// Use the most probable clean class instead of sampling it.
    pub argmax: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_runs: 100, mode: SamplerMode::Posterior, keep_invalid: false, master_seed: 0, trajectory_stride: 0, argmax: false }
    }
}

/// Anything that maps noisy edge states to clean-class distributions.
pub trait EdgePredictor<S: Scalar> {
    fn k_classes(&self) -> usize;

    /// `p̂(e_0)` for every state: `n·n·K` values per state, row `i·n + j`.
    fn predict(&self, nodes: &MolGraph, states: &[&EdgeTensor], t_norm: f64) -> Result<Vec<Vec<S>>, DenoiserError>;
}

impl<S: Scalar> EdgePredictor<S> for DenoiserModel<S> {
    fn k_classes(&self) -> usize {
        self.config().k_classes
    }

    fn predict(&self, nodes: &MolGraph, states: &[&EdgeTensor], t_norm: f64) -> Result<Vec<Vec<S>>, DenoiserError> {
        let n = nodes.len();
        let k = self.k_classes();
        let mut out = Vec::with_capacity(states.len());
        for chunk in states.chunks(CHAIN_CHUNK) {
            let mut batch = self.batch(n);
            for s in chunk {
                batch.push(nodes, s, t_norm)?;
            }
            let logits = self.forward(&batch)?;
            for g in 0..chunk.len() {
                let mut p = logits.data[g * n * n * k..(g + 1) * n * n * k].to_vec();
                for row in p.chunks_mut(k) {
                    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let mut z = S::zero();
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        z += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= z;
                    }
                }
                out.push(p);
            }
        }
        Ok(out)
    }
}

/// Always predicts one fixed edge tensor with certainty.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub truth: EdgeTensor,
    pub k: usize,
}

impl<S: Scalar> EdgePredictor<S> for OraclePredictor {
    fn k_classes(&self) -> usize {
        self.k
    }

    fn predict(&self, nodes: &MolGraph, states: &[&EdgeTensor], _t_norm: f64) -> Result<Vec<Vec<S>>, DenoiserError> {
        let n = nodes.len();
        let mut p = vec![S::zero(); n * n * self.k];
        for i in 0..n {
            for j in 0..n {
                p[(i * n + j) * self.k + self.truth.get(i, j).index()] = S::one();
            }
        }
        Ok(vec![p; states.len()])
    }
}

/// Independent draw of every unordered pair from the prior.
pub fn init_noise<S: Scalar>(n: usize, prior: &PriorK<S>, seed: u64) -> EdgeTensor {
    init_noise_with(n, prior, &mut rng_from_seed(seed))
}

fn init_noise_with<S: Scalar>(n: usize, prior: &PriorK<S>, rng: &mut ChaCha8Rng) -> EdgeTensor {
    let mut e = EdgeTensor::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            e.set(i, j, BondClass::from_index(sample_categorical(prior.probs(), rng)).expect("prior class"));
        }
    }
    e
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n: usize,
    pub k: usize,
    pub t_max: usize,
    /// `(t, state)` with strictly decreasing `t`, ending at 0.
    pub snapshots: Vec<(usize, EdgeTensor)>,
    pub final_graph: Option<MolGraph>,
}

/// Result of one reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutcome {
    pub run: usize,
    pub edges: EdgeTensor,
    pub trajectory: Option<Trajectory>,
}

fn argmax<S: Scalar>(p: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Runs the chains `runs` (indices into the master seed stream) in lockstep.
/// Chains whose states coincide share one network evaluation; every chain
/// draws from its own RNG, so outcomes do not depend on which other chains
/// run alongside.
pub fn run_chains<S: Scalar, P: EdgePredictor<S> + ?Sized>(
    model: &P,
    input: &ModelInput,
    cache: &TransitionCache<S>,
    prior: &PriorK<S>,
    t_max: usize,
    cfg: &SamplerConfig,
    runs: &[usize],
) -> Result<Vec<ChainOutcome>, SamplerError> {
    let n = input.n();
    let k = prior.k();
    if model.k_classes() != k {
        return Err(SamplerError::Config(format!("model has K={}, prior has K={k}", model.k_classes())));
    }
    if t_max == 0 {
        return Err(SamplerError::Config("t_max must be at least 1".into()));
    }
    let mut rngs: Vec<ChaCha8Rng> = runs.iter().map(|&r| rng_from_seed(derive_seed(cfg.master_seed, r as u64))).collect();
    let mut states: Vec<EdgeTensor> = rngs.iter_mut().map(|rng| init_noise_with(n, prior, rng)).collect();
    let capture = |t: usize| cfg.trajectory_stride > 0 && (t == t_max || t % cfg.trajectory_stride == 0);
    let mut snaps: Vec<Vec<(usize, EdgeTensor)>> = vec![Vec::new(); runs.len()];
    if capture(t_max) {
        for (s, st) in snaps.iter_mut().zip(&states) {
            s.push((t_max, st.clone()));
        }
    }
    let mut post = vec![S::zero(); k];
    let mut clean = vec![S::zero(); k];
    for t in (1..=t_max).rev() {
        let mut unique: Vec<&EdgeTensor> = Vec::new();
        let mut slot: HashMap<&EdgeTensor, usize> = HashMap::new();
        let which: Vec<usize> = states
            .iter()
            .map(|s| {
                *slot.entry(s).or_insert_with(|| {
                    unique.push(s);
                    unique.len() - 1
                })
            })
            .collect();
        let probs = model.predict(&input.nodes, &unique, t as f64 / t_max as f64)?;
        let mut next = Vec::with_capacity(states.len());
        for (c, rng) in rngs.iter_mut().enumerate() {
            let p = &probs[which[c]];
            let cur = &states[c];
            let mut e = EdgeTensor::empty(n);
            for i in 0..n {
                for j in i + 1..n {
                    let row = &p[(i * n + j) * k..][..k];
                    clean.copy_from_slice(row);
                    if cfg.argmax {
                        let b = argmax(row);
                        clean.iter_mut().enumerate().for_each(|(x, v)| *v = if x == b { S::one() } else { S::zero() });
                    }
                    let cls = match cfg.mode {
                        SamplerMode::Posterior => {
                            cache.posterior(cur.get(i, j).index(), &clean, t, &mut post)?;
                            sample_categorical(&post, rng)
                        }
                        SamplerMode::PaperLiteral => {
                            let e0 = sample_categorical(&clean, rng);
                            if t > 1 {
                                sample_categorical(cache.cumulative(t - 1).row(e0), rng)
                            } else {
                                e0
                            }
                        }
                    };
                    e.set(i, j, BondClass::from_index(cls).expect("class within alphabet"));
                }
            }
            next.push(e);
        }
        states = next;
        if capture(t - 1) || (cfg.trajectory_stride > 0 && t == 1) {
            for (s, st) in snaps.iter_mut().zip(&states) {
                s.push((t - 1, st.clone()));
            }
        }
    }
    Ok(runs
        .iter()
        .zip(states)
        .zip(snaps)
        .map(|((&run, edges), snapshots)| {
            let trajectory = (cfg.trajectory_stride > 0).then(|| Trajectory {
                n,
                k,
                t_max,
                snapshots,
                final_graph: Some(input.realize(edges.clone()).0),
            });
            ChainOutcome { run, edges, trajectory }
        })
        .collect())
}

/// A single chain seeded by `seed`; returns the realized molecule.
pub fn denoise_chain<S: Scalar, P: EdgePredictor<S> + ?Sized>(
    model: &P,
    input: &ModelInput,
    cache: &TransitionCache<S>,
    prior: &PriorK<S>,
    t_max: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<(MolGraph, Option<Trajectory>), SamplerError> {
    let single = SamplerConfig { master_seed: seed, ..cfg.clone() };
    // Run index 0 of master `seed`.
    let out = run_chains(model, input, cache, prior, t_max, &single, &[0])?.pop().expect("one chain");
    Ok((input.realize(out.edges).0, out.trajectory))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub key: String,
    pub graph: MolGraph,
    pub count: usize,
    pub valid: bool,
}

/// Distinct structures from a set of runs, most frequent first.
///
/// `Σ count + dropped_invalid = total_runs`; `dropped_invalid` is zero when
/// invalid structures are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
    pub total_runs: usize,
    pub dropped_invalid: usize,
    /// Sorted node kinds of the target.
    pub nodes: Vec<AtomKind>,
}

impl CandidateSet {
    fn sort(&mut self) {
        self.entries.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.key.cmp(&b.key)));
    }

    /// Groups realized outcomes by canonical key.
    pub fn from_graphs(nodes: Vec<AtomKind>, graphs: impl IntoIterator<Item = (MolGraph, bool)>, keep_invalid: bool) -> Self {
        let mut map: BTreeMap<String, Candidate> = BTreeMap::new();
        let mut total = 0;
        let mut dropped = 0;
        for (g, valid) in graphs {
            total += 1;
            if !valid && !keep_invalid {
                dropped += 1;
                continue;
            }
            let key = canonical_key(&g);
            map.entry(key.clone()).or_insert_with(|| Candidate { key, graph: g, count: 0, valid }).count += 1;
        }
        let mut set = CandidateSet { entries: map.into_values().collect(), total_runs: total, dropped_invalid: dropped, nodes };
        set.sort();
        set
    }

    pub fn rank_of(&self, key: &str) -> Option<usize> {
        self.entries.iter().position(|c| c.key == key).map(|p| p + 1)
    }

    /// Line report: header, then `rank count valid key` per candidate.
    pub fn report(&self) -> String {
        let mut s = format!(
            "#dise-candidates v1 total_runs={} dropped_invalid={} distinct={}\n",
            self.total_runs,
            self.dropped_invalid,
            self.entries.len()
        );
        for (i, c) in self.entries.iter().enumerate() {
            s.push_str(&format!("{} {} {} {}\n", i + 1, c.count, if c.valid { "valid" } else { "invalid" }, c.key));
        }
        s
    }
}

/// Runs `cfg.n_runs` chains and aggregates them.
pub fn aggregate_runs<S: Scalar, P: EdgePredictor<S> + ?Sized>(
    model: &P,
    input: &ModelInput,
    cache: &TransitionCache<S>,
    prior: &PriorK<S>,
    t_max: usize,
    cfg: &SamplerConfig,
) -> Result<CandidateSet, SamplerError> {
    if cfg.n_runs == 0 {
        return Err(SamplerError::Config("n_runs must be at least 1".into()));
    }
    let runs: Vec<usize> = (0..cfg.n_runs).collect();
    let outcomes = run_chains(model, input, cache, prior, t_max, cfg, &runs)?;
    Ok(CandidateSet::from_graphs(
        input.nodes.kind_multiset(),
        outcomes.into_iter().map(|o| input.realize(o.edges)),
        cfg.keep_invalid,
    ))
}

/// Sums counts per structure across sets for the same target.
pub fn ensemble(sets: &[CandidateSet]) -> Result<CandidateSet, SamplerError> {
    let first = sets.first().ok_or(SamplerError::EmptyEnsemble)?;
    let mut map: BTreeMap<String, Candidate> = BTreeMap::new();
    let (mut total, mut dropped) = (0, 0);
    for s in sets {
        if s.nodes != first.nodes {
            return Err(SamplerError::MixedTarget);
        }
        total += s.total_runs;
        dropped += s.dropped_invalid;
        for c in &s.entries {
            map.entry(c.key.clone()).and_modify(|e| e.count += c.count).or_insert_with(|| c.clone());
        }
    }
    let mut out = CandidateSet { entries: map.into_values().collect(), total_runs: total, dropped_invalid: dropped, nodes: first.nodes.clone() };
    out.sort();
    Ok(out)
}

const TRAJECTORY_HEADER: &str = "#dise-trajectory v1";

pub fn trajectory_text(traj: &Trajectory) -> String {
    let mut s = format!("{TRAJECTORY_HEADER}\nn={} k={} t_max={}\n", traj.n, traj.k, traj.t_max);
    for (t, e) in &traj.snapshots {
        s.push_str(&t.to_string());
        for c in e.upper_triangle() {
            s.push(' ');
            s.push_str(&c.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn dump_trajectory(traj: &Trajectory, path: &Path) -> Result<(), SamplerError> {
    fs::write(path, trajectory_text(traj)).map_err(|e| SamplerError::Io(format!("{}: {e}", path.display())))
}

pub fn parse_trajectory(text: &str) -> Result<Trajectory, SamplerError> {
    let err = |line: usize, reason: &str| SamplerError::Parse { line, reason: reason.to_string() };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == TRAJECTORY_HEADER => {}
        _ => return Err(err(1, "missing trajectory header")),
    }
    let (no, dims) = lines.next().ok_or_else(|| err(2, "missing dimensions line"))?;
    let mut vals = BTreeMap::new();
    for part in dims.split_whitespace() {
        let (k, v) = part.split_once('=').ok_or_else(|| err(no + 1, "expected key=value"))?;
        vals.insert(k, v.parse::<usize>().map_err(|_| err(no + 1, "dimension is not an integer"))?);
    }
    let get = |k: &str| vals.get(k).copied().ok_or_else(|| err(no + 1, &format!("missing `{k}`")));
    let (n, k, t_max) = (get("n")?, get("k")?, get("t_max")?);
    let mut snapshots: Vec<(usize, EdgeTensor)> = Vec::new();
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let nums: Vec<usize> = line
            .split_whitespace()
            .map(|x| x.parse::<usize>().map_err(|_| err(no + 1, &format!("`{x}` is not an integer"))))
            .collect::<Result<_, _>>()?;
        let (t, upper) = nums.split_first().ok_or_else(|| err(no + 1, "empty snapshot"))?;
        let upper: Vec<u8> = upper.iter().map(|&c| c as u8).collect();
        let e = EdgeTensor::from_upper_triangle(n, &upper, k).map_err(|e| err(no + 1, &e.to_string()))?;
        if snapshots.last().is_some_and(|(prev, _)| *prev <= *t) {
            return Err(err(no + 1, "timesteps must strictly decrease"));
        }
        snapshots.push((*t, e));
    }
    Ok(Trajectory { n, k, t_max, snapshots, final_graph: None })
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, SamplerError> {
    let text = fs::read_to_string(path).map_err(|e| SamplerError::Io(format!("{}: {e}", path.display())))?;
    parse_trajectory(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSchedule;
    use crate::molgraph::{AtomKind::*, BondClass::*};
    use crate::spectra::{build_model_input, ModalityConfig, SpectralRecord, SurrogateModel};

    fn target() -> (MolGraph, ModelInput, EdgeTensor) {
        let g = MolGraph::from_bonds(
            vec![CH3, CH2, CH0, OH0, OH1],
            &[(0, 1, Single), (1, 2, Single), (2, 3, Double), (2, 4, Single)],
        );
        let g = SurrogateModel::default().annotate(&g).unwrap();
        let input = build_model_input(&SpectralRecord::from_annotated(&g), ModalityConfig::FULL).unwrap();
        let (_, clean) = crate::spectra::training_pair(&input, &g).unwrap();
        (g, input, clean)
    }

    fn kit(t_max: usize) -> (TransitionCache<f64>, PriorK<f64>) {
        let prior = PriorK::qm9();
        (TransitionCache::new(&NoiseSchedule::cosine(t_max, 0.008), &prior), prior)
    }

    #[test]
    fn init_noise_examples() {
        let one_hot = PriorK::<f64>::new(&[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(init_noise(6, &one_hot, 3), EdgeTensor::empty(6));
        let p = PriorK::<f64>::qm9();
        assert_eq!(init_noise(7, &p, 9), init_noise(7, &p, 9));
        let mut counts = [0usize; 5];
        let mut seen = 0;
        let mut seed = 0;
        while seen < 100_000 {
            let e = init_noise(20, &p, seed);
            for c in e.upper_triangle() {
                counts[c as usize] += 1;
            }
            seen += 190;
            seed += 1;
        }
        let tv: f64 = counts.iter().zip(p.probs()).map(|(&c, &q)| (c as f64 / seen as f64 - q).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.01, "tv {tv}");
    }

    #[test]
    fn oracle_returns_truth_in_both_modes() {
        let (g, input, clean) = target();
        let (cache, prior) = kit(30);
        let oracle = OraclePredictor { truth: clean, k: 5 };
        for mode in [SamplerMode::Posterior, SamplerMode::PaperLiteral] {
            let cfg = SamplerConfig { n_runs: 16, mode, master_seed: 4, ..Default::default() };
            let set = aggregate_runs::<f64, _>(&oracle, &input, &cache, &prior, 30, &cfg).unwrap();
            assert_eq!(set.entries.len(), 1);
            assert_eq!(set.entries[0].key, canonical_key(&g));
            assert_eq!(set.entries[0].count, 16);
        }
    }

    #[test]
    fn trajectory_stride_and_round_trip() {
        let (_, input, clean) = target();
        let (cache, prior) = kit(500);
        let oracle = OraclePredictor { truth: clean, k: 5 };
        let cfg = SamplerConfig { trajectory_stride: 50, ..Default::default() };
        let (_, traj) = denoise_chain::<f64, _>(&oracle, &input, &cache, &prior, 500, &cfg, 1).unwrap();
        let traj = traj.unwrap();
        let ts: Vec<usize> = traj.snapshots.iter().map(|s| s.0).collect();
        assert_eq!(ts, (0..=10).rev().map(|i| i * 50).collect::<Vec<_>>());
        let text = trajectory_text(&traj);
        assert!(text.trim_end().lines().last().unwrap().starts_with("0 "));
        let back = parse_trajectory(&text).unwrap();
        assert_eq!(back.snapshots, traj.snapshots);
        for s in &traj.snapshots {
            assert!(s.1.is_symmetric());
        }
    }

    #[test]
    fn n3_snapshot_has_three_entries() {
        let e = EdgeTensor::empty(3);
        let traj = Trajectory { n: 3, k: 5, t_max: 1, snapshots: vec![(1, e.clone()), (0, e)], final_graph: None };
        let text = trajectory_text(&traj);
        assert_eq!(text.lines().nth(2).unwrap().split_whitespace().count(), 4);
        assert!(parse_trajectory("#dise-trajectory v1\nn=3 k=5 t_max=1\n1 0 9 0\n").is_err());
    }

    fn fake(key: &str, count: usize) -> Candidate {
        Candidate { key: key.into(), graph: MolGraph::new(vec![CH3], EdgeTensor::empty(1)), count, valid: true }
    }

    fn set(entries: Vec<Candidate>) -> CandidateSet {
        let total = entries.iter().map(|c| c.count).sum();
        let mut s = CandidateSet { entries, total_runs: total, dropped_invalid: 0, nodes: vec![CH3] };
        s.sort();
        s
    }

    #[test]
    fn ranking_and_ties() {
        let s = set(vec![fake("C", 10), fake("A", 60), fake("B", 30)]);
        assert_eq!(s.entries.iter().map(|c| c.key.as_str()).collect::<Vec<_>>(), ["A", "B", "C"]);
        let t = set(vec![fake("B", 50), fake("A", 50)]);
        assert_eq!(t.entries[0].key, "A");
    }

    #[test]
    fn ensemble_examples() {
        let a = set(vec![fake("A", 3), fake("B", 2)]);
        let b = set(vec![fake("B", 4), fake("A", 1)]);
        let e = ensemble(&[a.clone(), b]).unwrap();
        assert_eq!(e.entries[0].key, "B");
        assert_eq!(e.entries[0].count, 6);
        assert_eq!(e.entries[1].count, 4);
        assert_eq!(e.total_runs, 10);
        assert_eq!(ensemble(&[a.clone()]).unwrap(), a);
        let doubled = ensemble(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(doubled.entries.iter().map(|c| c.count).collect::<Vec<_>>(), [6, 4]);
        let mut other = a.clone();
        other.nodes = vec![CH2];
        assert!(matches!(ensemble(&[a, other]), Err(SamplerError::MixedTarget)));
    }

    #[test]
    fn posterior_at_t1_matches_prediction() {
        // A fixed stochastic predictor: at t = 1 the sampled class should follow p̂.
        struct Fixed(Vec<f64>);
        impl EdgePredictor<f64> for Fixed {
            fn k_classes(&self) -> usize {
                5
            }
            fn predict(&self, nodes: &MolGraph, states: &[&EdgeTensor], _: f64) -> Result<Vec<Vec<f64>>, DenoiserError> {
                let n = nodes.len();
                Ok(vec![self.0.iter().copied().cycle().take(n * n * 5).collect(); states.len()])
            }
        }
        let p_hat = vec![0.1, 0.4, 0.2, 0.25, 0.05];
        let (cache, prior) = kit(1);
        let nodes = MolGraph::new(vec![CH3, CH3], EdgeTensor::empty(2));
        let input = ModelInput {
            nodes,
            formula: Default::default(),
            modality: ModalityConfig::FULL,
            cosy_ambiguities: 0,
        };
        let cfg = SamplerConfig { n_runs: 10_000, keep_invalid: true, ..Default::default() };
        let runs: Vec<usize> = (0..10_000).collect();
        let out = run_chains(&Fixed(p_hat.clone()), &input, &cache, &prior, 1, &cfg, &runs).unwrap();
        let mut counts = [0f64; 5];
        for o in &out {
            counts[o.edges.get(0, 1).index()] += 1.0;
        }
        let tv: f64 = counts.iter().zip(&p_hat).map(|(c, p)| (c / 1e4 - p).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.02, "tv {tv}");
    }

    #[test]
    fn run_order_does_not_matter() {
        let (_, input, _) = target();
        let (cache, prior) = kit(20);
        let model = DenoiserModel::<f64>::new(crate::denoiser::ModelConfig::desk(), crate::molgraph::NodeAlphabet::SuperAtom, 2).unwrap();
        let cfg = SamplerConfig { n_runs: 6, master_seed: 11, keep_invalid: true, ..Default::default() };
        let fwd: Vec<usize> = (0..6).collect();
        let rev: Vec<usize> = (0..6).rev().collect();
        let a = run_chains(&model, &input, &cache, &prior, 20, &cfg, &fwd).unwrap();
        let mut b = run_chains(&model, &input, &cache, &prior, 20, &cfg, &rev).unwrap();
        b.reverse();
        assert_eq!(a, b);
        let single = run_chains(&model, &input, &cache, &prior, 20, &cfg, &[3]).unwrap();
        assert_eq!(single[0], a[3]);
    }
}
