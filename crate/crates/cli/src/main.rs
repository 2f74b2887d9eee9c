use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand, ValueEnum};

use dise::dataset::{generate_dataset, load_records, save_records, split, DatasetRecord, ElementWeights, SplitSpec};
use dise::denoiser::{load_checkpoint, save_checkpoint, ModelConfig};
use dise::diffusion::{PriorK, TransitionCache};
use dise::harness::{
    evaluate, run_ablation, run_perturbation_sweep, train_model, AblationPlan, EvalConfig, EvalReport, LoadedModel,
    TopK, TrainConfig,
};
use dise::sampler::{dump_trajectory, ensemble, run_chains, CandidateSet, SamplerConfig, SamplerMode};
use dise::spectra::{build_model_input, perturb, ModalityConfig, PerturbationLevel, SurrogateModel};
use dise::Scalar;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_MODEL: u8 = 4;

/// An error and the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

type Res<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, err: anyhow!(msg.into()) }
}

trait Classify<T> {
    fn data(self, what: impl FnOnce() -> String) -> Res<T>;
    fn model(self, what: impl FnOnce() -> String) -> Res<T>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> Classify<T> for Result<T, E> {
    fn data(self, what: impl FnOnce() -> String) -> Res<T> {
        self.map_err(|e| Failure { code: EXIT_DATA, err: anyhow::Error::new(e).context(what()) })
    }
    fn model(self, what: impl FnOnce() -> String) -> Res<T> {
        self.map_err(|e| Failure { code: EXIT_MODEL, err: anyhow::Error::new(e).context(what()) })
    }
}

fn harness_err(e: dise::harness::HarnessError, what: &str) -> Failure {
    use dise::harness::HarnessError as H;
    let code = match &e {
        H::Data(_) | H::Spectra(_) | H::ReportParse { .. } => EXIT_DATA,
        H::Invalid(_) => EXIT_USAGE,
        _ => EXIT_MODEL,
    };
    Failure { code, err: anyhow::Error::new(e).context(what.to_string()) }
}

#[derive(Parser)]
#[command(name = "dise", version, about = "Molecular structure elucidation by discrete edge diffusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Posterior,
    PaperLiteral,
}

impl From<Mode> for SamplerMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Posterior => SamplerMode::Posterior,
            Mode::PaperLiteral => SamplerMode::PaperLiteral,
        }
    }
}

#[derive(clap::Args)]
struct SplitArgs {
    /// Seed of the 8:1:1 split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic molecules with surrogate spectra.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        max_heavy: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Surrogate constants file (built-in table if omitted).
        #[arg(long)]
        constants: Option<PathBuf>,
        /// Relative C,O,N sampling weights.
        #[arg(long, default_value = "0.7,0.2,0.1")]
        weights: String,
    },
    /// Train a denoiser on the train split of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        preset: String,
        #[arg(long)]
        modality: String,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Diffusion steps; defaults to 50 for `desk`, 500 otherwise.
        #[arg(long)]
        t_max: Option<usize>,
        /// Edge prior: `qm9`, `pcqm` or a weights file; estimated from the data if omitted.
        #[arg(long)]
        prior: Option<String>,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Sample candidate structures for one record.
    Elucidate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ckpt2: Option<PathBuf>,
        /// Dataset file (first record is used) or a record id looked up in `--data`.
        #[arg(long)]
        record: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        runs: usize,
        #[arg(long, value_enum, default_value = "posterior")]
        mode: Mode,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        trajectory_stride: usize,
        #[arg(long, default_value = "none")]
        level: String,
        #[arg(long)]
        keep_invalid: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Top-K evaluation on a dataset split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ckpt2: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_report: PathBuf,
        #[arg(long, value_enum, default_value = "posterior")]
        mode: Mode,
        #[arg(long, default_value = "none")]
        level: String,
        /// Evaluate only the first N targets (by id).
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
        #[command(flatten)]
        split_args: SplitArgs,
    },
    /// Train and evaluate one model per modality configuration.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// `table-s4` or a comma-separated list of modality names.
        #[arg(long)]
        plan: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, default_value_t = 3000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Evaluate under shift perturbations of increasing size.
    PerturbSweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ckpt2: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "sp,mp,lp")]
        levels: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 128)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
        #[command(flatten)]
        split_args: SplitArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Cmd) -> Res<()> {
    match cmd {
        Cmd::GenData { n, max_heavy, seed, out, constants, weights } => gen_data(n, max_heavy, seed, &out, constants, &weights),
        Cmd::Train { data, preset, modality, steps, seed, out_ckpt, batch_size, t_max, prior, split } => {
            let model = ModelConfig::preset(&preset).map_err(|e| usage(e.to_string()))?;
            let modality: ModalityConfig = modality.parse().map_err(|e: dise::spectra::SpectraError| usage(e.to_string()))?;
            let mut cfg = TrainConfig::new(model, modality, steps, seed);
            cfg.batch_size = batch_size;
            if let Some(t) = t_max {
                cfg.t_max = t;
            }
            if let Some(p) = prior {
                let k: PriorK<f64> = match PriorK::preset(&p) {
                    Some(k) => k,
                    None => PriorK::from_file(Path::new(&p)).data(|| format!("reading prior `{p}`"))?,
                };
                cfg.prior = Some(k.probs_f64());
            }
            train(&data, &cfg, split.split_seed, &out_ckpt)
        }
        Cmd::Elucidate { ckpt, ckpt2, record, data, runs, mode, seed, trajectory_stride, level, keep_invalid, out, precision } => {
            let level = parse_level(&level)?;
            let rec = find_record(&record, data.as_deref())?;
            let args = ElucidateArgs { runs, mode: mode.into(), seed, stride: trajectory_stride, level, keep_invalid, out };
            let paths = ckpt_paths(&ckpt, ckpt2.as_ref());
            match precision {
                Precision::F32 => elucidate::<f32>(&paths, &rec, &args),
                Precision::F64 => elucidate::<f64>(&paths, &rec, &args),
            }
        }
        Cmd::Evaluate { ckpt, ckpt2, data, split, runs, seed, out_report, mode, level, limit, precision, split_args } => {
            let targets = split_records(&data, &split, split_args.split_seed, limit)?;
            let cfg = EvalConfig { n_runs: runs, mode: mode.into(), seed, level: parse_level(&level)?, keep_invalid: false };
            let paths = ckpt_paths(&ckpt, ckpt2.as_ref());
            let report = match precision {
                Precision::F32 => evaluate(&load_models::<f32>(&paths)?, &targets, &cfg),
                Precision::F64 => evaluate(&load_models::<f64>(&paths)?, &targets, &cfg),
            }
            .map_err(|e| harness_err(e, "evaluation failed"))?;
            write_report(&out_report, &report)?;
            println!("{}", summary_line(&report));
            Ok(())
        }
        Cmd::Ablate { data, plan, out_dir, preset, steps, seed, runs, limit, precision, split } => {
            let plan = AblationPlan::parse(&plan).map_err(|e| usage(e.to_string()))?;
            let model = ModelConfig::preset(&preset).map_err(|e| usage(e.to_string()))?;
            let a = AblateArgs { plan, model, steps, seed, runs, limit, split_seed: split.split_seed };
            match precision {
                Precision::F32 => ablate::<f32>(&data, &out_dir, &a),
                Precision::F64 => ablate::<f64>(&data, &out_dir, &a),
            }
        }
        Cmd::PerturbSweep { ckpt, ckpt2, data, levels, out_dir, runs, seed, split, limit, precision, split_args } => {
            let mut lv = vec![PerturbationLevel::None];
            for l in levels.split(',') {
                let l = parse_level(l.trim())?;
                if !lv.contains(&l) {
                    lv.push(l);
                }
            }
            let targets = split_records(&data, &split, split_args.split_seed, limit)?;
            let cfg = EvalConfig { n_runs: runs, seed, ..Default::default() };
            let paths = ckpt_paths(&ckpt, ckpt2.as_ref());
            let reports = match precision {
                Precision::F32 => run_perturbation_sweep(&load_models::<f32>(&paths)?, &targets, &lv, &cfg),
                Precision::F64 => run_perturbation_sweep(&load_models::<f64>(&paths)?, &targets, &lv, &cfg),
            }
            .map_err(|e| harness_err(e, "perturbation sweep failed"))?;
            write_reports(&out_dir, &reports, |r| r.level.name().to_string())
        }
    }
}

fn parse_level(s: &str) -> Res<PerturbationLevel> {
    s.parse().map_err(|e: dise::spectra::SpectraError| usage(e.to_string()))
}

fn ckpt_paths(a: &Path, b: Option<&PathBuf>) -> Vec<PathBuf> {
    std::iter::once(a.to_path_buf()).chain(b.cloned()).collect()
}

fn load_models<S: Scalar>(paths: &[PathBuf]) -> Res<Vec<LoadedModel<S>>> {
    paths
        .iter()
        .map(|p| {
            let st = load_checkpoint::<f64>(p).model(|| format!("loading checkpoint {}", p.display()))?;
            Ok(LoadedModel::from_state(&st))
        })
        .collect()
}

fn surrogate(constants: Option<PathBuf>) -> Res<SurrogateModel> {
    match constants {
        None => Ok(SurrogateModel::default()),
        Some(p) => {
            let text = fs::read_to_string(&p).data(|| format!("reading {}", p.display()))?;
            SurrogateModel::parse(&text).data(|| format!("parsing {}", p.display()))
        }
    }
}

fn gen_data(n: usize, max_heavy: usize, seed: u64, out: &Path, constants: Option<PathBuf>, weights: &str) -> Res<()> {
    let w: Vec<f64> = weights
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("--weights: {e}")))?;
    let [c, o, nn] = w[..] else {
        return Err(usage("--weights needs three values (C,O,N)"));
    };
    if max_heavy == 0 {
        return Err(usage("--max-heavy must be at least 1"));
    }
    let s = surrogate(constants)?;
    let built = generate_dataset(n, max_heavy, &ElementWeights { c, o, n: nn }, seed, &s).data(|| "generating molecules".into())?;
    save_records(out, &built.records, s.version()).data(|| format!("writing {}", out.display()))?;
    println!("records={} dropped_by_filter={} constants={}", built.records.len(), built.dropped.len(), s.version());
    Ok(())
}

fn load_data(path: &Path) -> Res<Vec<DatasetRecord>> {
    Ok(load_records(path).data(|| format!("loading {}", path.display()))?.records)
}

fn split_records(path: &Path, which: &str, split_seed: u64, limit: Option<usize>) -> Res<Vec<DatasetRecord>> {
    let records = load_data(path)?;
    let parts = split(&records, &SplitSpec::standard(split_seed)).data(|| "splitting dataset".into())?;
    let mut v = match which {
        "all" => records,
        other => parts.get(other).ok_or_else(|| usage(format!("unknown split `{other}` (train, val, test, all)")))?.to_vec(),
    };
    v.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(l) = limit {
        v.truncate(l);
    }
    Ok(v)
}

fn train(data: &Path, cfg: &TrainConfig, split_seed: u64, out: &Path) -> Res<()> {
    let records = split_records(data, "train", split_seed, None)?;
    let every = (cfg.steps / 20).max(1);
    let outcome = train_model::<f64>(&records, cfg, |step, loss| {
        if step % every == 0 {
            eprintln!("step {step} loss {loss:.5}");
        }
    })
    .map_err(|e| harness_err(e, "training failed"))?;
    save_checkpoint(&outcome.state, out).model(|| format!("writing {}", out.display()))?;
    let tail = &outcome.losses[outcome.losses.len().saturating_sub(50)..];
    let mean = if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 };
    println!(
        "steps={} train_records={} skipped={} final_loss_mean50={mean:.5} checkpoint={}",
        outcome.state.step,
        records.len() - outcome.skipped.len(),
        outcome.skipped.len(),
        out.display()
    );
    Ok(())
}

fn find_record(which: &str, data: Option<&Path>) -> Res<DatasetRecord> {
    let as_path = Path::new(which);
    if as_path.is_file() {
        return load_data(as_path)?.into_iter().next().ok_or_else(|| Failure {
            code: EXIT_DATA,
            err: anyhow!("{which} contains no records"),
        });
    }
    let data = data.ok_or_else(|| usage(format!("`{which}` is not a file; pass --data to look it up by id")))?;
    load_data(data)?
        .into_iter()
        .find(|r| r.id == which)
        .ok_or_else(|| Failure { code: EXIT_DATA, err: anyhow!("no record `{which}` in {}", data.display()) })
}

struct ElucidateArgs {
    runs: usize,
    mode: SamplerMode,
    seed: u64,
    stride: usize,
    level: PerturbationLevel,
    keep_invalid: bool,
    out: PathBuf,
}

fn elucidate<S: Scalar>(paths: &[PathBuf], rec: &DatasetRecord, a: &ElucidateArgs) -> Res<()> {
    if a.runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let models = load_models::<S>(paths)?;
    let modality = models[0].modality().map_err(|e| harness_err(e, "checkpoint modality"))?;
    if models.iter().any(|m| m.setup.modality != models[0].setup.modality) {
        return Err(usage("checkpoints were trained on different modalities"));
    }
    let spectra = match a.level {
        PerturbationLevel::None => rec.spectra.clone(),
        l => perturb(&rec.spectra, l, a.seed),
    };
    let input = build_model_input(&spectra, modality).data(|| format!("building model input for {}", rec.id))?;
    let traj_dir = a.out.with_extension("trajectories");
    if a.stride > 0 {
        fs::create_dir_all(&traj_dir).data(|| format!("creating {}", traj_dir.display()))?;
    }
    let runs: Vec<usize> = (0..a.runs).collect();
    let mut sets = vec![];
    for (mi, m) in models.iter().enumerate() {
        let prior = m.setup.prior_k::<S>().model(|| "checkpoint prior".into())?;
        let cache = TransitionCache::new(&m.setup.schedule::<S>(), &prior);
        let cfg = SamplerConfig {
            n_runs: a.runs,
            mode: a.mode,
            keep_invalid: a.keep_invalid,
            master_seed: dise::rng::derive_seed(a.seed, mi as u64),
            trajectory_stride: a.stride,
            argmax: false,
        };
        let outcomes = run_chains(&m.model, &input, &cache, &prior, m.setup.t_max, &cfg, &runs)
            .model(|| "sampling failed".into())?;
        for o in &outcomes {
            if let Some(t) = &o.trajectory {
                let p = traj_dir.join(format!("model{mi}-run{:04}.txt", o.run));
                dump_trajectory(t, &p).data(|| format!("writing {}", p.display()))?;
            }
        }
        sets.push(CandidateSet::from_graphs(
            input.nodes.kind_multiset(),
            outcomes.into_iter().map(|o| input.realize(o.edges)),
            a.keep_invalid,
        ));
    }
    let set = ensemble(&sets).model(|| "ensembling".into())?;
    fs::write(&a.out, set.report()).data(|| format!("writing {}", a.out.display()))?;
    let truth = dise::molgraph::canonical_key(&rec.graph);
    let rank = set.rank_of(&truth).map_or("F".to_string(), |r| r.to_string());
    println!("record={} distinct={} dropped_invalid={} truth_rank={rank}", rec.id, set.entries.len(), set.dropped_invalid);
    Ok(())
}

fn summary_line(r: &EvalReport) -> String {
    let mut s = format!("modality={} level={} targets={}", r.modality.name(), r.level.name(), r.targets.len());
    for k in TopK::REPORTED {
        let _ = write!(s, " {}={:.2}", k.name(), r.topk(k));
    }
    s
}

fn write_report(path: &Path, r: &EvalReport) -> Res<()> {
    fs::write(path, r.to_text()).data(|| format!("writing {}", path.display()))?;
    let sizes = path.with_extension("sizes");
    fs::write(&sizes, r.by_size_table()).data(|| format!("writing {}", sizes.display()))
}

fn write_reports(dir: &Path, reports: &[EvalReport], name: impl Fn(&EvalReport) -> String) -> Res<()> {
    fs::create_dir_all(dir).data(|| format!("creating {}", dir.display()))?;
    let mut summary = String::from("# name");
    for k in TopK::REPORTED {
        let _ = write!(summary, " {}", k.name());
    }
    summary.push('\n');
    for r in reports {
        let n = name(r);
        write_report(&dir.join(format!("{n}.report")), r)?;
        let _ = write!(summary, "{n}");
        for k in TopK::REPORTED {
            let _ = write!(summary, " {:.2}", r.topk(k));
        }
        summary.push('\n');
        println!("{}", summary_line(r));
    }
    let p = dir.join("summary.txt");
    fs::write(&p, summary).data(|| format!("writing {}", p.display()))
}

struct AblateArgs {
    plan: AblationPlan,
    model: ModelConfig,
    steps: u64,
    seed: u64,
    runs: usize,
    limit: Option<usize>,
    split_seed: u64,
}

fn ablate<S: Scalar>(data: &Path, out_dir: &Path, a: &AblateArgs) -> Res<()> {
    let train_recs = split_records(data, "train", a.split_seed, None)?;
    let test = split_records(data, "test", a.split_seed, a.limit)?;
    fs::create_dir_all(out_dir).data(|| format!("creating {}", out_dir.display()))?;
    let mut registry: BTreeMap<String, Vec<LoadedModel<S>>> = BTreeMap::new();
    for c in &a.plan.configs {
        eprintln!("training {}", c.name());
        let cfg = TrainConfig::new(a.model.clone(), *c, a.steps, a.seed);
        let outcome = train_model::<f64>(&train_recs, &cfg, |_, _| {}).map_err(|e| harness_err(e, "training failed"))?;
        let p = out_dir.join(format!("{}.ckpt", c.name()));
        save_checkpoint(&outcome.state, &p).model(|| format!("writing {}", p.display()))?;
        registry.insert(c.name().to_string(), vec![LoadedModel::from_state(&outcome.state)]);
    }
    let cfg = EvalConfig { n_runs: a.runs, seed: a.seed, ..Default::default() };
    let reports = run_ablation(&a.plan, &registry, &test, &cfg).map_err(|e| harness_err(e, "ablation failed"))?;
    write_reports(out_dir, &reports, |r| r.modality.name().to_string())
}
