//! Spectral inputs: surrogate shifts, HSQC multiplicities, COSY hints,
//! modality selection and shift perturbation.

mod perturb;
mod surrogate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::{is_valid_molecule, AtomKind, CosyMask, EdgeTensor, Element, Formula, MolGraph, NodeAlphabet};

pub use perturb::{perturb, PerturbationLevel};
pub use surrogate::{SurrogateModel, C_SHIFT_RANGE, H_SHIFT_RANGE};

/// Node shifts closer than this (ppm) are taken as the same COSY partner.
pub const COSY_MATCH_TOL: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectraError {
    #[error("surrogate constants: {0}")]
    Constants(String),
    #[error("surrogate model: {0}")]
    Surrogate(String),
    #[error("{nucleus} shift {ppm} ppm of node {node} outside the detection range")]
    OutOfRange { node: usize, nucleus: &'static str, ppm: f64 },
    #[error("formula has {formula} H but spectra account for {observed}")]
    FormulaMismatch { formula: u32, observed: u32 },
    #[error("COSY peak ({0:.3}, {1:.3}) matches no protonated carbon pair")]
    UnmatchedCosy(f64, f64),
    #[error("COSY peak ({0:.3}, {1:.3}) has {2} candidate carbon pairs")]
    AmbiguousAssignment(f64, f64, usize),
    #[error("unsupported modality combination: {0}")]
    UnsupportedModality(String),
    #[error("inconsistent record: {0}")]
    Inconsistent(String),
}

/// Which spectral inputs the model sees. Only the six combinations returned
/// by [`ModalityConfig::table`] are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalityConfig {
    pub use_ms: bool,
    pub use_h_shifts: bool,
    pub use_c_shifts: bool,
    pub use_hsqc: bool,
    pub use_cosy: bool,
    pub use_exchangeable_h: bool,
}

impl ModalityConfig {
    const fn new(h: bool, c: bool, hsqc: bool, cosy: bool, exch: bool) -> Self {
        Self { use_ms: true, use_h_shifts: h, use_c_shifts: c, use_hsqc: hsqc, use_cosy: cosy, use_exchangeable_h: exch }
    }

    pub const H_ONLY: Self = Self::new(true, false, false, false, false);
    pub const C_ONLY: Self = Self::new(false, true, false, false, false);
    pub const ONE_D: Self = Self::new(true, true, false, false, false);
    pub const ONE_D_HSQC: Self = Self::new(true, true, true, false, false);
    pub const ONE_D_HSQC_COSY: Self = Self::new(true, true, true, true, false);
    pub const FULL: Self = Self::new(true, true, true, true, true);

    /// The ablation rows, weakest to strongest.
    pub fn table() -> [ModalityConfig; 6] {
        [Self::H_ONLY, Self::C_ONLY, Self::ONE_D, Self::ONE_D_HSQC, Self::ONE_D_HSQC_COSY, Self::FULL]
    }

    pub fn name(&self) -> &'static str {
        match *self {
            Self::H_ONLY => "h1",
            Self::C_ONLY => "c13",
            Self::ONE_D => "1d",
            Self::ONE_D_HSQC => "1d-hsqc",
            Self::ONE_D_HSQC_COSY => "1d-hsqc-cosy",
            Self::FULL => "full",
            _ => "unsupported",
        }
    }

    pub fn label(&self) -> &'static str {
        match *self {
            Self::H_ONLY => "MS + 1H NMR",
            Self::C_ONLY => "MS + 13C NMR",
            Self::ONE_D => "MS + 1H & 13C NMR",
            Self::ONE_D_HSQC => "MS + 1H & 13C NMR + HSQC",
            Self::ONE_D_HSQC_COSY => "MS + 1H & 13C NMR + HSQC + COSY",
            Self::FULL => "MS + 1H* & 13C NMR + HSQC + COSY",
            _ => "unsupported",
        }
    }

    pub fn validate(&self) -> Result<(), SpectraError> {
        if Self::table().contains(self) {
            Ok(())
        } else {
            Err(SpectraError::UnsupportedModality(format!("{self:?}")))
        }
    }

    pub fn alphabet(&self) -> NodeAlphabet {
        if self.use_hsqc {
            NodeAlphabet::SuperAtom
        } else {
            NodeAlphabet::Plain
        }
    }
}

impl FromStr for ModalityConfig {
    type Err = SpectraError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::table()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SpectraError::UnsupportedModality(s.to_string()))
    }
}

impl fmt::Display for ModalityConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsqcPeak {
    pub carbon: usize,
    pub c_shift: f64,
    pub h_shift: f64,
    pub multiplicity: u8,
}

/// A vicinal H–C–C–H correlation. Node ids record which carbons produced
/// the peak; consumers match peaks to nodes by shift only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosyPeak {
    pub a: usize,
    pub b: usize,
    pub h_a: f64,
    pub h_b: f64,
}

/// Spectral observations for one molecule. Node ids refer to the source
/// molecule's node indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralRecord {
    pub formula: Formula,
    /// `(carbon id, ppm)`.
    pub c_shifts: Vec<(usize, f64)>,
    /// `(proton-bearing carbon id, ppm)`; several entries for one node are averaged.
    pub h_shifts: Vec<(usize, f64)>,
    pub hsqc: Vec<HsqcPeak>,
    pub cosy: Vec<CosyPeak>,
    /// Exchangeable-proton groups (OH1, NH1, NH2) and their counts.
    pub exchangeable_h: BTreeMap<AtomKind, u32>,
}

impl SpectralRecord {
    /// Builds the record from a molecule whose shifts are already attached.
    pub fn from_annotated(g: &MolGraph) -> Self {
        let mut c_shifts = vec![];
        let mut h_shifts = vec![];
        let mut exchangeable_h = BTreeMap::new();
        for (i, &k) in g.kinds().iter().enumerate() {
            match k.element() {
                Element::C => {
                    c_shifts.push((i, g.c_shifts()[i]));
                    if k.hydrogens().unwrap_or(0) > 0 {
                        h_shifts.push((i, g.h_shifts()[i]));
                    }
                }
                _ => {
                    if k.hydrogens().unwrap_or(0) > 0 {
                        *exchangeable_h.entry(k).or_insert(0) += 1;
                    }
                }
            }
        }
        let hsqc = derive_hsqc(g, g.c_shifts(), g.h_shifts());
        let cosy = derive_cosy(g)
            .pairs()
            .into_iter()
            .map(|(a, b)| CosyPeak { a, b, h_a: g.h_shifts()[a], h_b: g.h_shifts()[b] })
            .collect();
        Self { formula: g.formula(), c_shifts, h_shifts, hsqc, cosy, exchangeable_h }
    }

    /// Range filter applied to datasets.
    pub fn check_ranges(&self) -> Result<(), SpectraError> {
        for &(node, ppm) in &self.c_shifts {
            if !(C_SHIFT_RANGE.0..=C_SHIFT_RANGE.1).contains(&ppm) {
                return Err(SpectraError::OutOfRange { node, nucleus: "13C", ppm });
            }
        }
        for &(node, ppm) in &self.h_shifts {
            if !(H_SHIFT_RANGE.0..=H_SHIFT_RANGE.1).contains(&ppm) {
                return Err(SpectraError::OutOfRange { node, nucleus: "1H", ppm });
            }
        }
        Ok(())
    }

    /// Node-level proton shift: mean over all entries of `node`.
    pub fn node_h_shift(&self, node: usize) -> Option<f64> {
        let vals: Vec<f64> = self.h_shifts.iter().filter(|(i, _)| *i == node).map(|(_, v)| *v).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn node_c_shift(&self, node: usize) -> Option<f64> {
        self.c_shifts.iter().find(|(i, _)| *i == node).map(|(_, v)| *v)
    }
}

/// One peak per protonated carbon; multiplicity = attached hydrogens.
pub fn derive_hsqc(g: &MolGraph, c_shifts: &[f64], h_shifts: &[f64]) -> Vec<HsqcPeak> {
    g.kinds()
        .iter()
        .enumerate()
        .filter(|(_, k)| k.element() == Element::C)
        .filter_map(|(i, k)| {
            let x = k.hydrogens().unwrap_or(0);
            (x > 0).then_some(HsqcPeak { carbon: i, c_shift: c_shifts[i], h_shift: h_shifts[i], multiplicity: x })
        })
        .collect()
}

/// Bonded pairs of carbons that both carry at least one hydrogen.
pub fn derive_cosy(g: &MolGraph) -> CosyMask {
    let protonated = |i: usize| {
        let k = g.kinds()[i];
        k.element() == Element::C && k.hydrogens().unwrap_or(0) > 0
    };
    let mut m = CosyMask::empty(g.len());
    for (i, j, _) in g.edges().bonds() {
        if protonated(i) && protonated(j) {
            m.set(i, j);
        }
    }
    m
}

/// Node set, attached shifts and COSY hints the model is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// Nodes with shifts and COSY mask; no bonds.
    pub nodes: MolGraph,
    pub formula: Formula,
    pub modality: ModalityConfig,
    /// COSY peaks that matched more than one carbon pair.
    pub cosy_ambiguities: usize,
}

impl ModelInput {
    pub fn alphabet(&self) -> NodeAlphabet {
        self.modality.alphabet()
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn hydrogen_count(&self) -> u32 {
        self.formula.count(Element::H)
    }

    /// Turns a sampled edge tensor into a molecule over this node set, with
    /// plain nodes resolved against the formula's hydrogen count. The flag
    /// is true when resolution succeeded and the result is a valid molecule.
    pub fn realize(&self, edges: EdgeTensor) -> (MolGraph, bool) {
        let g = self.nodes.with_edges(edges);
        match g.resolve_implicit_hydrogens(self.hydrogen_count()) {
            Ok(r) => {
                let ok = is_valid_molecule(&r).0;
                (r, ok)
            }
            Err(_) => (g, false),
        }
    }
}

/// Instantiates model nodes from a record under a modality configuration.
///
/// Carbons come first in record order, then O and N. Without HSQC every node
/// is a plain element. Without exchangeable-proton data heteroatoms stay
/// plain (H count unknown).
pub fn build_model_input(rec: &SpectralRecord, cfg: ModalityConfig) -> Result<ModelInput, SpectraError> {
    build_model_input_with(rec, cfg, false)
}

/// As [`build_model_input`]; with `strict_cosy` an ambiguous COSY peak is an
/// error instead of being expanded to all consistent pairs.
pub fn build_model_input_with(
    rec: &SpectralRecord,
    cfg: ModalityConfig,
    strict_cosy: bool,
) -> Result<ModelInput, SpectraError> {
    cfg.validate()?;
    let n_c = rec.formula.count(Element::C) as usize;
    if rec.c_shifts.len() != n_c {
        return Err(SpectraError::Inconsistent(format!("{} carbon shifts for {n_c} carbons", rec.c_shifts.len())));
    }
    let mut carbons: Vec<(usize, f64)> = rec.c_shifts.clone();
    carbons.sort_by_key(|(id, _)| *id);

    let multiplicity: BTreeMap<usize, u8> = rec.hsqc.iter().map(|p| (p.carbon, p.multiplicity)).collect();
    let hsqc_h: u32 = rec.hsqc.iter().map(|p| p.multiplicity as u32).sum();
    let exch_h: u32 = rec.exchangeable_h.iter().map(|(k, c)| k.hydrogens().unwrap_or(0) as u32 * c).sum();
    let formula_h = rec.formula.count(Element::H);
    if hsqc_h + exch_h != formula_h {
        return Err(SpectraError::FormulaMismatch { formula: formula_h, observed: hsqc_h + exch_h });
    }

    let mut kinds = Vec::new();
    let mut cs = Vec::new();
    let mut hs = Vec::new();
    for &(id, c) in &carbons {
        let x = multiplicity.get(&id).copied().unwrap_or(0);
        kinds.push(if cfg.use_hsqc {
            AtomKind::super_atom(Element::C, x).ok_or_else(|| {
                SpectraError::Inconsistent(format!("carbon {id} has HSQC multiplicity {x}"))
            })?
        } else {
            AtomKind::C
        });
        cs.push(if cfg.use_c_shifts { c } else { 0.0 });
        hs.push(if cfg.use_h_shifts { rec.node_h_shift(id).unwrap_or(0.0) } else { 0.0 });
    }
    for el in [Element::O, Element::N] {
        let count = rec.formula.count(el) as usize;
        let mut assigned: Vec<AtomKind> = Vec::new();
        if cfg.use_hsqc && cfg.use_exchangeable_h {
            // Groups with more hydrogens first; the rest carry none.
            for (&k, &c) in rec.exchangeable_h.iter().rev() {
                if k.element() == el {
                    assigned.extend(std::iter::repeat(k).take(c as usize));
                }
            }
            if assigned.len() > count {
                return Err(SpectraError::Inconsistent(format!("more {} groups than atoms", el.symbol())));
            }
            let bare = AtomKind::super_atom(el, 0).expect("heteroatom super-atom");
            assigned.resize(count, bare);
        } else {
            assigned = vec![AtomKind::plain(el); count];
        }
        for k in assigned {
            kinds.push(k);
            cs.push(0.0);
            hs.push(0.0);
        }
    }

    let n = kinds.len();
    let mut cosy = CosyMask::empty(n);
    let mut ambiguities = 0;
    if cfg.use_cosy {
        // Matching always uses the record's proton shifts, whatever is attached.
        let node_h: Vec<Option<f64>> = carbons
            .iter()
            .map(|&(id, _)| if multiplicity.get(&id).copied().unwrap_or(0) > 0 { rec.node_h_shift(id) } else { None })
            .collect();
        let near = |target: f64| -> Vec<usize> {
            let best = node_h
                .iter()
                .filter_map(|h| h.map(|h| (h - target).abs()))
                .fold(f64::INFINITY, f64::min);
            if best > COSY_MATCH_TOL {
                return vec![];
            }
            node_h
                .iter()
                .enumerate()
                .filter(|(_, h)| h.is_some_and(|h| (h - target).abs() <= COSY_MATCH_TOL))
                .map(|(i, _)| i)
                .collect()
        };
        for peak in &rec.cosy {
            let a = near(peak.h_a);
            let b = near(peak.h_b);
            let pairs: Vec<(usize, usize)> =
                a.iter().flat_map(|&i| b.iter().filter(move |&&j| j != i).map(move |&j| (i, j))).collect();
            let distinct = {
                let mut p: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
                p.sort();
                p.dedup();
                p.len()
            };
            if distinct == 0 {
                return Err(SpectraError::UnmatchedCosy(peak.h_a, peak.h_b));
            }
            if distinct > 1 {
                if strict_cosy {
                    return Err(SpectraError::AmbiguousAssignment(peak.h_a, peak.h_b, distinct));
                }
                ambiguities += 1;
            }
            for (i, j) in pairs {
                cosy.set(i, j);
            }
        }
    }

    let nodes = MolGraph::new(kinds, EdgeTensor::empty(n)).with_shifts(cs, hs).with_cosy(cosy);
    Ok(ModelInput { nodes, formula: rec.formula.clone(), modality: cfg, cosy_ambiguities: ambiguities })
}

/// For each input node, the node of `g` it stands for: carbons in index
/// order, then O and N with hydrogen-bearing groups first. `None` when the
/// kinds cannot be matched.
pub fn align_to_molecule(input: &ModelInput, g: &MolGraph) -> Option<Vec<usize>> {
    let mut pools: BTreeMap<Element, Vec<usize>> = BTreeMap::new();
    for el in [Element::C, Element::O, Element::N, Element::H] {
        let mut ids: Vec<usize> = (0..g.len()).filter(|&i| g.kinds()[i].element() == el).collect();
        if el != Element::C {
            ids.sort_by_key(|&i| (std::cmp::Reverse(g.kinds()[i].hydrogens().unwrap_or(0)), i));
        }
        ids.reverse();
        pools.insert(el, ids);
    }
    let mut out = Vec::with_capacity(input.n());
    for &k in input.nodes.kinds() {
        let src = pools.get_mut(&k.element())?.pop()?;
        let sk = g.kinds()[src];
        if !(sk == k || (k.is_plain() && sk.element() == k.element())) {
            return None;
        }
        out.push(src);
    }
    pools.values().all(|p| p.is_empty()).then_some(out)
}

/// Node inputs plus the molecule's edges in input node order.
pub fn training_pair(input: &ModelInput, g: &MolGraph) -> Option<(MolGraph, EdgeTensor)> {
    let src = align_to_molecule(input, g)?;
    let n = src.len();
    let mut clean = EdgeTensor::empty(n);
    for a in 0..n {
        for b in a + 1..n {
            clean.set(a, b, g.edges().get(src[a], src[b]));
        }
    }
    Some((input.nodes.clone(), clean))
}

/// The node multiset a modality configuration can express for `g`.
pub fn projected_kinds(g: &MolGraph, cfg: ModalityConfig) -> Vec<AtomKind> {
    let mut k: Vec<AtomKind> = g
        .kinds()
        .iter()
        .map(|&k| {
            if !cfg.use_hsqc || (k.element() != Element::C && !cfg.use_exchangeable_h) {
                AtomKind::plain(k.element())
            } else {
                k
            }
        })
        .collect();
    k.sort();
    k
}
