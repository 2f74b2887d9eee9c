use std::collections::{BTreeMap, BTreeSet};

use super::{rank_of_truth, EvalReport, HarnessError, Rank, TargetOutcome};
use crate::dataset::DatasetRecord;
use crate::denoiser::{
    checkpoint_bytes, fit_step, loss, sample_training_example, DenoiserModel, DiffusionSetup, ModelConfig, TrainState,
    DEFAULT_LR,
};
use crate::diffusion::{PriorK, TransitionCache};
use crate::molgraph::{canonical_key, EdgeTensor, MolGraph};
use crate::rng::{derive_seed, derive_seed2, mix64};
use crate::sampler::{aggregate_runs, ensemble, SamplerConfig, SamplerMode};
use crate::scalar::Scalar;
use crate::spectra::{build_model_input, perturb, training_pair, ModalityConfig, PerturbationLevel};

const LABEL_SAMPLE: u64 = 1;
const LABEL_PERTURB: u64 = 2;
const LABEL_INIT: u64 = 3;

/// Stable 64-bit stream label for a record id (FNV-1a, then mixed).
fn id_label(id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub modality: ModalityConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub t_max: usize,
    pub schedule_s: f64,
    /// Edge-class prior; estimated from the training edges when `None`.
    pub prior: Option<Vec<f64>>,
    pub lr: f64,
}

impl TrainConfig {
    /// Defaults: batch 32, cosine offset 0.008, 500 steps of noise for the
    /// full-size presets and 50 for `desk`.
    pub fn new(model: ModelConfig, modality: ModalityConfig, steps: u64, seed: u64) -> Self {
        let t_max = if model.preset == "desk" { 50 } else { 500 };
        Self { model, modality, steps, batch_size: 32, seed, t_max, schedule_s: 0.008, prior: None, lr: DEFAULT_LR }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub state: TrainState<S>,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
    /// Records whose model input could not be built.
    pub skipped: Vec<String>,
}

/// Model inputs paired with clean edges in input node order.
pub fn training_pool(
    records: &[DatasetRecord],
    modality: ModalityConfig,
) -> (Vec<(MolGraph, EdgeTensor)>, Vec<String>) {
    let mut pool = vec![];
    let mut skipped = vec![];
    for r in records {
        match build_model_input(&r.spectra, modality).ok().and_then(|inp| training_pair(&inp, &r.graph)) {
            Some(p) => pool.push(p),
            None => skipped.push(r.id.clone()),
        }
    }
    (pool, skipped)
}

/// Trains from scratch; `log` sees `(step, loss)` after every update.
pub fn train_model<S: Scalar>(
    records: &[DatasetRecord],
    cfg: &TrainConfig,
    mut log: impl FnMut(u64, f64),
) -> Result<TrainOutcome<S>, HarnessError> {
    cfg.modality.validate()?;
    if cfg.batch_size == 0 || cfg.t_max == 0 {
        return Err(HarnessError::Invalid("batch size and t_max must be positive".into()));
    }
    let (pool, skipped) = training_pool(records, cfg.modality);
    if pool.is_empty() {
        return Err(HarnessError::Invalid("no usable training records".into()));
    }
    let k = cfg.model.k_classes;
    let prior = match &cfg.prior {
        Some(p) => PriorK::<f64>::new(p),
        None => PriorK::<f64>::from_edges(pool.iter().map(|p| &p.1), k),
    }
    .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    if prior.k() != k {
        return Err(HarnessError::Invalid(format!("prior has {} classes, model {k}", prior.k())));
    }
    let setup = DiffusionSetup {
        t_max: cfg.t_max,
        s: cfg.schedule_s,
        prior: prior.probs_f64(),
        modality: cfg.modality.name().to_string(),
    };
    let model = DenoiserModel::<S>::new(cfg.model.clone(), cfg.modality.alphabet(), derive_seed(cfg.seed, LABEL_INIT))?;
    let mut state = TrainState::new(model, cfg.seed, setup);
    state.lr = cfg.lr;
    let sched = state.setup.schedule::<S>();
    let prior_s = prior.cast::<S>();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let l = fit_step(&mut state, &pool, cfg.batch_size, &sched, &prior_s)?;
        losses.push(l);
        log(state.step, l);
    }
    Ok(TrainOutcome { state, losses, skipped })
}

/// Mean denoising loss over `draws` fixed-seed noisy copies of each record.
pub fn validation_loss<S: Scalar>(
    model: &DenoiserModel<S>,
    setup: &DiffusionSetup,
    records: &[DatasetRecord],
    seed: u64,
    draws: usize,
) -> Result<f64, HarnessError> {
    let modality: ModalityConfig = setup.modality.parse()?;
    let (pool, _) = training_pool(records, modality);
    if pool.is_empty() || draws == 0 {
        return Err(HarnessError::Invalid("nothing to validate on".into()));
    }
    let sched = setup.schedule::<S>();
    let prior = setup.prior_k::<S>()?;
    let mut by_n: BTreeMap<usize, Vec<_>> = BTreeMap::new();
    for (i, (nodes, clean)) in pool.iter().enumerate() {
        for d in 0..draws {
            let ex = sample_training_example(nodes, clean, &sched, &prior, derive_seed2(seed, i as u64, d as u64));
            by_n.entry(nodes.len()).or_default().push(ex);
        }
    }
    let total: usize = by_n.values().map(Vec::len).sum();
    let mut acc = 0.0;
    for (n, exs) in by_n {
        for chunk in exs.chunks(64) {
            let mut b = model.batch(n);
            for ex in chunk {
                b.push(&ex.nodes, &ex.noisy, ex.t_norm)?;
            }
            let logits = model.forward(&b)?;
            let clean: Vec<&EdgeTensor> = chunk.iter().map(|e| &e.clean).collect();
            acc += loss(&logits, &clean, n).f64() * chunk.len() as f64;
        }
    }
    Ok(acc / total as f64)
}

/// Orders named checkpoints by validation loss, lowest first; the first two
/// are the "best" and "second-best" models.
pub fn rank_by_validation<S: Scalar>(
    models: &[LoadedModel<S>],
    records: &[DatasetRecord],
    seed: u64,
) -> Result<Vec<(String, f64)>, HarnessError> {
    let mut out = models
        .iter()
        .map(|m| Ok((m.id.clone(), validation_loss(&m.model, &m.setup, records, seed, 4)?)))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Short content hash of a training state.
pub fn model_id<S: Scalar>(state: &TrainState<S>) -> String {
    format!("{:08x}", crc32fast::hash(&checkpoint_bytes(state)))
}

/// A trained model ready for inference.
#[derive(Debug, Clone)]
pub struct LoadedModel<S> {
    pub id: String,
    pub model: DenoiserModel<S>,
    pub setup: DiffusionSetup,
}

impl<S: Scalar> LoadedModel<S> {
    pub fn from_state<T: Scalar>(state: &TrainState<T>) -> Self {
        Self { id: model_id(state), model: state.model.cast(), setup: state.setup.clone() }
    }

    pub fn modality(&self) -> Result<ModalityConfig, HarnessError> {
        Ok(self.setup.modality.parse()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_runs: usize,
    pub mode: SamplerMode,
    pub seed: u64,
    pub level: PerturbationLevel,
    pub keep_invalid: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_runs: 100, mode: SamplerMode::Posterior, seed: 0, level: PerturbationLevel::None, keep_invalid: false }
    }
}

fn max_change(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.1 - y.1).abs()).fold(0.0, f64::max)
}

/// Samples every record with every model (counts summed when several are
/// given) and ranks the true structure. Chain seeds depend on the record id
/// and the model id only, so an ensemble reuses each member's own runs. Targets whose input cannot be
/// built count as `Fail` with the reason recorded.
pub fn evaluate<S: Scalar>(
    models: &[LoadedModel<S>],
    records: &[DatasetRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport, HarnessError> {
    let first = models.first().ok_or_else(|| HarnessError::Invalid("no models given".into()))?;
    let modality = first.modality()?;
    for m in models {
        if m.modality()? != modality {
            return Err(HarnessError::Invalid(format!(
                "models trained on different modalities ({} vs {})",
                first.setup.modality, m.setup.modality
            )));
        }
    }
    if cfg.n_runs == 0 {
        return Err(HarnessError::Invalid("n_runs must be at least 1".into()));
    }
    let kits = models
        .iter()
        .map(|m| {
            let prior = m.setup.prior_k::<S>()?;
            Ok((TransitionCache::new(&m.setup.schedule::<S>(), &prior), prior))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let mut sorted: Vec<&DatasetRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut targets = Vec::with_capacity(sorted.len());
    for rec in sorted {
        let label = id_label(&rec.id);
        let sample_seed = derive_seed2(cfg.seed, LABEL_SAMPLE, label);
        let perturb_seed = (cfg.level != PerturbationLevel::None).then(|| derive_seed2(cfg.seed, LABEL_PERTURB, label));
        let spectra = match perturb_seed {
            Some(s) => perturb(&rec.spectra, cfg.level, s),
            None => rec.spectra.clone(),
        };
        let mut out = TargetOutcome {
            id: rec.id.clone(),
            truth_key: canonical_key(&rec.graph),
            n_nodes: rec.graph.len(),
            rank: Rank::Fail,
            distinct: 0,
            total_runs: 0,
            dropped_invalid: 0,
            top_count: 0,
            sample_seed,
            perturb_seed,
            max_shift_change: (
                max_change(&rec.spectra.c_shifts, &spectra.c_shifts),
                max_change(&rec.spectra.h_shifts, &spectra.h_shifts),
            ),
            cosy_ambiguities: 0,
            error: None,
        };
        let input = match build_model_input(&spectra, modality) {
            Ok(i) => i,
            Err(e) => {
                out.error = Some(e.to_string());
                targets.push(out);
                continue;
            }
        };
        out.cosy_ambiguities = input.cosy_ambiguities;
        let mut sets = Vec::with_capacity(models.len());
        for (m, (cache, prior)) in models.iter().zip(&kits) {
            let scfg = SamplerConfig {
                n_runs: cfg.n_runs,
                mode: cfg.mode,
                keep_invalid: cfg.keep_invalid,
                master_seed: derive_seed(sample_seed, id_label(&m.id)),
                trajectory_stride: 0,
                argmax: false,
            };
            sets.push(aggregate_runs(&m.model, &input, cache, prior, m.setup.t_max, &scfg)?);
        }
        let set = ensemble(&sets)?;
        out.rank = rank_of_truth(&set, &rec.graph);
        out.distinct = set.entries.len();
        out.total_runs = set.total_runs;
        out.dropped_invalid = set.dropped_invalid;
        out.top_count = set.entries.first().map_or(0, |c| c.count);
        targets.push(out);
    }
    Ok(EvalReport {
        modality,
        level: cfg.level,
        n_runs: cfg.n_runs,
        mode: cfg.mode,
        seed: cfg.seed,
        model_ids: models.iter().map(|m| m.id.clone()).collect(),
        targets,
    })
}

/// Modality configurations to compare on shared data.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub configs: Vec<ModalityConfig>,
}

impl AblationPlan {
    /// All six modality rows, weakest first.
    pub fn full_table() -> Self {
        Self { configs: ModalityConfig::table().to_vec() }
    }

    pub fn new(configs: Vec<ModalityConfig>) -> Result<Self, HarnessError> {
        let distinct: BTreeSet<&str> = configs.iter().map(|c| c.name()).collect();
        if distinct.len() != configs.len() || configs.is_empty() {
            return Err(HarnessError::Invalid("ablation configurations must be distinct and non-empty".into()));
        }
        for c in &configs {
            c.validate()?;
        }
        Ok(Self { configs })
    }

    /// `table-s4` (all six rows) or a comma-separated list of modality names.
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        if s == "table-s4" {
            return Ok(Self::full_table());
        }
        Self::new(s.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>()?)
    }
}

/// One report per configuration, all on `records`.
pub fn run_ablation<S: Scalar>(
    plan: &AblationPlan,
    registry: &BTreeMap<String, Vec<LoadedModel<S>>>,
    records: &[DatasetRecord],
    cfg: &EvalConfig,
) -> Result<Vec<EvalReport>, HarnessError> {
    plan.configs
        .iter()
        .map(|c| {
            let models = registry
                .get(c.name())
                .filter(|m| !m.is_empty())
                .ok_or_else(|| HarnessError::MissingModel(c.name().to_string()))?;
            evaluate(models, records, cfg)
        })
        .collect()
}

/// One report per perturbation level on the same targets.
pub fn run_perturbation_sweep<S: Scalar>(
    models: &[LoadedModel<S>],
    records: &[DatasetRecord],
    levels: &[PerturbationLevel],
    cfg: &EvalConfig,
) -> Result<Vec<EvalReport>, HarnessError> {
    levels.iter().map(|&level| evaluate(models, records, &EvalConfig { level, ..cfg.clone() })).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, generate_molecules, ElementWeights};
    use crate::denoiser::tests::tiny_config;
    use crate::harness::TopK;
    use crate::spectra::SurrogateModel;

    fn records(n: usize) -> Vec<DatasetRecord> {
        let mols = generate_molecules(n, 5, &ElementWeights::default(), 21).unwrap();
        build_dataset(&mols, &SurrogateModel::default(), 21).records
    }

    fn tiny(modality: ModalityConfig, seed: u64, recs: &[DatasetRecord]) -> LoadedModel<f64> {
        let mut cfg = TrainConfig::new(tiny_config(), modality, 3, seed);
        cfg.t_max = 8;
        cfg.batch_size = 4;
        LoadedModel::from_state(&train_model::<f64>(recs, &cfg, |_, _| {}).unwrap().state)
    }

    fn eval_cfg() -> EvalConfig {
        EvalConfig { n_runs: 6, seed: 5, ..Default::default() }
    }

    #[test]
    fn training_is_deterministic() {
        let recs = records(20);
        let mut cfg = TrainConfig::new(tiny_config(), ModalityConfig::FULL, 3, 1);
        cfg.t_max = 8;
        let a = train_model::<f64>(&recs, &cfg, |_, _| {}).unwrap();
        let b = train_model::<f64>(&recs, &cfg, |_, _| {}).unwrap();
        assert_eq!(a.losses.len(), 3);
        assert_eq!(a.losses, b.losses);
        assert_eq!(model_id(&a.state), model_id(&b.state));
        assert!(a.skipped.is_empty());
        let p: f64 = a.state.setup.prior.iter().sum();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let recs = records(12);
        let m = tiny(ModalityConfig::FULL, 2, &recs);
        let a = evaluate(&[m.clone()], &recs, &eval_cfg()).unwrap();
        let b = evaluate(&[m], &recs, &eval_cfg()).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let ids: Vec<&str> = a.targets.iter().map(|t| t.id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        for t in &a.targets {
            assert_eq!(t.total_runs, 6);
            assert_eq!((t.rank == Rank::Fail), t.error.is_some() || t.distinct == 0 || t.rank == Rank::Fail);
        }
        let acc: Vec<f64> = TopK::REPORTED.iter().map(|&k| a.topk(k)).collect();
        assert!(acc.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn perturbation_sweep_shares_targets() {
        let recs = records(10);
        let m = tiny(ModalityConfig::FULL, 3, &recs);
        let reps = run_perturbation_sweep(&[m.clone()], &recs, &PerturbationLevel::ALL, &eval_cfg()).unwrap();
        assert_eq!(reps.len(), 4);
        let ids = |r: &EvalReport| r.targets.iter().map(|t| t.id.clone()).collect::<Vec<_>>();
        for r in &reps {
            assert_eq!(ids(r), ids(&reps[0]));
            let (dc, dh) = r.level.deltas();
            for t in &r.targets {
                assert!(t.max_shift_change.0 <= dc + 1e-12 && t.max_shift_change.1 <= dh + 1e-12);
                assert_eq!(t.perturb_seed.is_some(), r.level != PerturbationLevel::None);
            }
        }
        assert_eq!(reps[0], evaluate(&[m], &recs, &eval_cfg()).unwrap());
        assert!(reps[3].targets.iter().any(|t| t.max_shift_change.0 > 0.0));
    }

    #[test]
    fn ablation_reports() {
        let recs = records(10);
        let mut reg = BTreeMap::new();
        reg.insert("full".to_string(), vec![tiny(ModalityConfig::FULL, 4, &recs)]);
        reg.insert("1d".to_string(), vec![tiny(ModalityConfig::ONE_D, 4, &recs)]);
        let plan = AblationPlan::parse("1d,full").unwrap();
        let reps = run_ablation(&plan, &reg, &recs, &eval_cfg()).unwrap();
        assert_eq!(reps.len(), 2);
        assert_eq!(reps[0].modality, ModalityConfig::ONE_D);
        let ids = |r: &EvalReport| r.targets.iter().map(|t| t.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&reps[0]), ids(&reps[1]));
        assert_eq!(reps, run_ablation(&plan, &reg, &recs, &eval_cfg()).unwrap());
        let missing = AblationPlan::parse("1d-hsqc").unwrap();
        assert!(matches!(run_ablation(&missing, &reg, &recs, &eval_cfg()), Err(HarnessError::MissingModel(_))));
        assert!(AblationPlan::parse("full,full").is_err());
        assert_eq!(AblationPlan::parse("table-s4").unwrap().configs.len(), 6);
    }

    #[test]
    fn ensemble_top_all_dominates() {
        let recs = records(10);
        let a = tiny(ModalityConfig::FULL, 6, &recs);
        let b = tiny(ModalityConfig::FULL, 7, &recs);
        let ra = evaluate(&[a.clone()], &recs, &eval_cfg()).unwrap();
        let rb = evaluate(&[b.clone()], &recs, &eval_cfg()).unwrap();
        let rab = evaluate(&[a.clone(), b], &recs, &eval_cfg()).unwrap();
        assert!(rab.topk(TopK::All) >= ra.topk(TopK::All).max(rb.topk(TopK::All)));
        for t in &rab.targets {
            assert_eq!(t.total_runs, 12);
        }
        let wrong = tiny(ModalityConfig::ONE_D, 6, &recs);
        assert!(evaluate(&[a, wrong], &recs, &eval_cfg()).is_err());
    }

    #[test]
    fn validation_ranking() {
        let recs = records(10);
        let models = vec![tiny(ModalityConfig::FULL, 8, &recs), tiny(ModalityConfig::FULL, 9, &recs)];
        let r = rank_by_validation(&models, &recs, 1).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r[0].1 <= r[1].1);
        assert_eq!(r, rank_by_validation(&models, &recs, 1).unwrap());
    }
}
