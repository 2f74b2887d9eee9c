//! Top-K metrics, evaluation reports, training and evaluation drivers,
//! modality ablations and perturbation sweeps.

mod run;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::denoiser::DenoiserError;
use crate::molgraph::{canonical_key, Formula, MolGraph};
use crate::sampler::{Candidate, CandidateSet, SamplerError, SamplerMode};
use crate::spectra::{ModalityConfig, PerturbationLevel, SpectraError};

pub use run::{
    evaluate, model_id, rank_by_validation, run_ablation, run_perturbation_sweep, train_model, training_pool,
    validation_loss, AblationPlan, EvalConfig, LoadedModel, TrainConfig, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error("no trained model for modality `{0}`")]
    MissingModel(String),
    #[error("{0}")]
    Invalid(String),
    #[error("report line {line}: {reason}")]
    ReportParse { line: usize, reason: String },
}

/// 1-based position of the true structure among the candidates, or `Fail`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Rank {
    At(usize),
    Fail,
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rank::At(r) => write!(f, "{r}"),
            Rank::Fail => f.write_str("F"),
        }
    }
}

impl FromStr for Rank {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "F" => Ok(Rank::Fail),
            _ => s.parse::<usize>().ok().filter(|r| *r >= 1).map(Rank::At).ok_or_else(|| format!("bad rank `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopK {
    K(usize),
    All,
}

impl TopK {
    pub const REPORTED: [TopK; 5] = [TopK::K(1), TopK::K(3), TopK::K(5), TopK::K(10), TopK::All];

    pub fn name(self) -> String {
        match self {
            TopK::K(k) => format!("top{k}"),
            TopK::All => "topall".into(),
        }
    }
}

pub fn rank_of_truth(cands: &CandidateSet, truth: &MolGraph) -> Rank {
    cands.rank_of(&canonical_key(truth)).map_or(Rank::Fail, Rank::At)
}

/// Percentage of ranks within `k`; `All` counts every non-`Fail` rank.
pub fn topk_accuracy(ranks: &[Rank], k: TopK) -> Result<f64, HarnessError> {
    if ranks.is_empty() {
        return Err(HarnessError::Invalid("no ranks to score".into()));
    }
    let hit = ranks
        .iter()
        .filter(|r| match (r, k) {
            (Rank::Fail, _) => false,
            (Rank::At(_), TopK::All) => true,
            (Rank::At(r), TopK::K(k)) => *r <= k,
        })
        .count();
    Ok(100.0 * hit as f64 / ranks.len() as f64)
}

/// Keeps candidates whose composition (heavy atoms and hydrogens) equals `formula`.
pub fn filter_by_formula(cands: Vec<Candidate>, formula: &Formula) -> Vec<Candidate> {
    cands.into_iter().filter(|c| &c.graph.formula() == formula).collect()
}

/// Per-target audit entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetOutcome {
    pub id: String,
    pub truth_key: String,
    pub n_nodes: usize,
    pub rank: Rank,
    pub distinct: usize,
    pub total_runs: usize,
    pub dropped_invalid: usize,
    /// Count of the most frequent candidate.
    pub top_count: usize,
    pub sample_seed: u64,
    pub perturb_seed: Option<u64>,
    /// Largest absolute shift change applied, `(13C, 1H)`.
    pub max_shift_change: (f64, f64),
    pub cosy_ambiguities: usize,
    /// Why the target could not be sampled, if it could not.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub modality: ModalityConfig,
    pub level: PerturbationLevel,
    pub n_runs: usize,
    pub mode: SamplerMode,
    pub seed: u64,
    pub model_ids: Vec<String>,
    /// Ordered by record id.
    pub targets: Vec<TargetOutcome>,
}

pub const REPORT_HEADER: &str = "#dise-report v1";

impl EvalReport {
    pub fn ranks(&self) -> Vec<Rank> {
        self.targets.iter().map(|t| t.rank).collect()
    }

    pub fn topk(&self, k: TopK) -> f64 {
        topk_accuracy(&self.ranks(), k).unwrap_or(0.0)
    }

    /// Line-oriented report: header, one line per target, summary block.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{REPORT_HEADER}\nmodality={} level={} n_runs={} mode={} seed={} models={}\n",
            self.modality.name(),
            self.level.name(),
            self.n_runs,
            self.mode,
            self.seed,
            self.model_ids.join(",")
        );
        s.push_str("# id rank distinct runs dropped top_count sample_seed perturb_seed max_dc max_dh cosy_ambiguities truth_key error\n");
        for t in &self.targets {
            s.push_str(&format!(
                "{} {} {} {} {} {} {} {} {:.6} {:.6} {} {} {}\n",
                t.id,
                t.rank,
                t.distinct,
                t.total_runs,
                t.dropped_invalid,
                t.top_count,
                t.sample_seed,
                t.perturb_seed.map_or("-".to_string(), |p| p.to_string()),
                t.max_shift_change.0,
                t.max_shift_change.1,
                t.cosy_ambiguities,
                t.truth_key,
                t.error.as_deref().map_or("-".to_string(), |e| e.replace(char::is_whitespace, "_")),
            ));
        }
        s.push_str("[summary]\n");
        s.push_str(&format!("targets={}\n", self.targets.len()));
        for k in TopK::REPORTED {
            s.push_str(&format!("{}={:.2}\n", k.name(), self.topk(k)));
        }
        s.push_str(&format!("failed={}\n", self.targets.iter().filter(|t| t.rank == Rank::Fail).count()));
        s
    }

    /// Accuracy by heavy-atom count: `n_nodes targets top1 topall` rows.
    pub fn by_size_table(&self) -> String {
        let mut sizes: Vec<usize> = self.targets.iter().map(|t| t.n_nodes).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let mut s = String::from("# n_nodes targets top1 topall\n");
        for n in sizes {
            let ranks: Vec<Rank> = self.targets.iter().filter(|t| t.n_nodes == n).map(|t| t.rank).collect();
            s.push_str(&format!(
                "{n} {} {:.2} {:.2}\n",
                ranks.len(),
                topk_accuracy(&ranks, TopK::K(1)).unwrap_or(0.0),
                topk_accuracy(&ranks, TopK::All).unwrap_or(0.0)
            ));
        }
        s
    }
}

/// Reads the `[summary]` block of a report.
pub fn parse_report_summary(text: &str) -> Result<Vec<(String, String)>, HarnessError> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some(REPORT_HEADER) {
        return Err(HarnessError::ReportParse { line: 1, reason: "missing report header".into() });
    }
    let mut out = vec![];
    let mut in_summary = false;
    for (i, l) in lines {
        if l == "[summary]" {
            in_summary = true;
        } else if in_summary {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| HarnessError::ReportParse { line: i + 1, reason: "expected key=value".into() })?;
            out.push((k.to_string(), v.to_string()));
        }
    }
    if !in_summary {
        return Err(HarnessError::ReportParse { line: 0, reason: "no summary block".into() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{AtomKind::*, BondClass::*, EdgeTensor};

    fn cand(g: &MolGraph, count: usize) -> Candidate {
        Candidate { key: canonical_key(g), graph: g.clone(), count, valid: true }
    }

    fn set_of(entries: Vec<Candidate>) -> CandidateSet {
        let graphs = entries.iter().flat_map(|c| std::iter::repeat((c.graph.clone(), true)).take(c.count));
        CandidateSet::from_graphs(vec![], graphs, false)
    }

    #[test]
    fn ranks_of_truth() {
        let a = MolGraph::from_bonds(vec![CH3, CH2, OH1], &[(0, 1, Single), (1, 2, Single)]);
        let b = MolGraph::from_bonds(vec![CH3, CH2, OH1], &[(0, 2, Single), (1, 2, Single)]);
        let c = MolGraph::new(vec![CH3, CH2, OH1], EdgeTensor::empty(3));
        let s = set_of(vec![cand(&a, 5), cand(&b, 2)]);
        assert_eq!(rank_of_truth(&s, &a), Rank::At(1));
        assert_eq!(rank_of_truth(&s, &c), Rank::Fail);
        // Tie for the top spot: key order decides.
        let t = set_of(vec![cand(&a, 3), cand(&b, 3)]);
        let (first, second) = if canonical_key(&a) < canonical_key(&b) { (&a, &b) } else { (&b, &a) };
        assert_eq!(rank_of_truth(&t, first), Rank::At(1));
        assert_eq!(rank_of_truth(&t, second), Rank::At(2));
    }

    #[test]
    fn topk_examples() {
        let r = [Rank::At(1), Rank::At(2), Rank::Fail, Rank::At(1)];
        assert_eq!(topk_accuracy(&r, TopK::K(1)).unwrap(), 50.0);
        assert_eq!(topk_accuracy(&r, TopK::All).unwrap(), 75.0);
        let f = [Rank::Fail; 3];
        for k in TopK::REPORTED {
            assert_eq!(topk_accuracy(&f, k).unwrap(), 0.0);
        }
        assert!(topk_accuracy(&[], TopK::All).is_err());
    }

    #[test]
    fn formula_filter() {
        let a = MolGraph::from_bonds(vec![CH3, CH2, OH1], &[(0, 1, Single), (1, 2, Single)]);
        let b = MolGraph::from_bonds(vec![CH3, CH3], &[(0, 1, Single)]);
        let f = a.formula();
        assert_eq!(filter_by_formula(vec![cand(&a, 1)], &f).len(), 1);
        assert!(filter_by_formula(vec![cand(&b, 1)], &f).is_empty());
        assert!(filter_by_formula(vec![], &f).is_empty());
    }

    #[test]
    fn rank_text_round_trip() {
        for r in [Rank::At(1), Rank::At(17), Rank::Fail] {
            assert_eq!(r.to_string().parse::<Rank>().unwrap(), r);
        }
        assert!("0".parse::<Rank>().is_err());
    }
}
