//! Attributed molecular graphs over implicit-hydrogen super-atoms.
//!
//! Hydrogens never appear as nodes. A node is either a *super-atom* (a heavy
//! atom with a known number of attached hydrogens, e.g. `CH2`) or a *plain*
//! element (`C`, `O`, `N`) whose hydrogen count is not observed and is
//! filled implicitly from the remaining valence.

mod canon;
mod cycles;
mod features;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use canon::{canonical_key, canonical_order};
pub use cycles::{cycle_counts, SimpleCycle};
pub use features::{
    compute_structural_features, compute_valence_charge, laplacian_spectrum,
    largest_component_flags, GlobalFeatures, StructuralFeatures, LAPLACIAN_ZERO_TOL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown atom kind `{0}`")]
    UnknownKind(String),
    #[error("unknown element `{0}`")]
    UnknownElement(String),
    #[error("bond class index {0} outside alphabet of size {1}")]
    BondClassOutOfRange(usize, usize),
    #[error("edge list has {got} entries, expected {expected} for {n} nodes")]
    EdgeListLength { n: usize, got: usize, expected: usize },
    #[error("implicit hydrogens cannot be resolved: {0}")]
    Unresolvable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Element {
    C,
    H,
    N,
    O,
}

impl Element {
    pub const HEAVY: [Element; 3] = [Element::C, Element::N, Element::O];

    pub fn base_valence(self) -> u8 {
        match self {
            Element::C => 4,
            Element::N => 3,
            Element::O => 2,
            Element::H => 1,
        }
    }

    /// Largest hydrogen count the super-atom alphabet can express.
    pub fn max_super_atom_h(self) -> u8 {
        match self {
            Element::C => 3,
            Element::N => 2,
            Element::O => 1,
            Element::H => 0,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::C => "C",
            Element::H => "H",
            Element::N => "N",
            Element::O => "O",
        }
    }
}

impl FromStr for Element {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "C" => Ok(Element::C),
            "H" => Ok(Element::H),
            "N" => Ok(Element::N),
            "O" => Ok(Element::O),
            other => Err(GraphError::UnknownElement(other.to_string())),
        }
    }
}

/// Categorical bond type. Index 0 is always `NoBond`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[repr(u8)]
pub enum BondClass {
    #[default]
    NoBond = 0,
    Single = 1,
    Double = 2,
    Triple = 3,
    Aromatic = 4,
    SingleAromatic = 5,
}

impl BondClass {
    pub const ALL: [BondClass; 6] = [
        BondClass::NoBond,
        BondClass::Single,
        BondClass::Double,
        BondClass::Triple,
        BondClass::Aromatic,
        BondClass::SingleAromatic,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<BondClass> {
        Self::ALL.get(i).copied()
    }

    /// Bond order in half-units, so valence sums stay exact integers.
    #[inline]
    pub fn half_order(self) -> u32 {
        match self {
            BondClass::NoBond => 0,
            BondClass::Single | BondClass::SingleAromatic => 2,
            BondClass::Aromatic => 3,
            BondClass::Double => 4,
            BondClass::Triple => 6,
        }
    }

    pub fn order(self) -> f64 {
        self.half_order() as f64 / 2.0
    }

    pub fn is_bond(self) -> bool {
        self != BondClass::NoBond
    }

    pub fn label(self) -> &'static str {
        match self {
            BondClass::NoBond => "NoBond",
            BondClass::Single => "Single",
            BondClass::Double => "Double",
            BondClass::Triple => "Triple",
            BondClass::Aromatic => "Aromatic",
            BondClass::SingleAromatic => "SingleAromatic",
        }
    }
}

/// Node kind: one of the nine HSQC super-atoms or a plain element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AtomKind {
    CH0,
    CH1,
    CH2,
    CH3,
    OH0,
    OH1,
    NH0,
    NH1,
    NH2,
    C,
    H,
    O,
    N,
}

impl AtomKind {
    pub const SUPER_ATOMS: [AtomKind; 9] = [
        AtomKind::CH0,
        AtomKind::CH1,
        AtomKind::CH2,
        AtomKind::CH3,
        AtomKind::OH0,
        AtomKind::OH1,
        AtomKind::NH0,
        AtomKind::NH1,
        AtomKind::NH2,
    ];
    pub const PLAIN: [AtomKind; 4] = [AtomKind::C, AtomKind::H, AtomKind::O, AtomKind::N];

    pub fn element(self) -> Element {
        use AtomKind::*;
        match self {
            CH0 | CH1 | CH2 | CH3 | C => Element::C,
            OH0 | OH1 | O => Element::O,
            NH0 | NH1 | NH2 | N => Element::N,
            H => Element::H,
        }
    }

    /// Attached hydrogens, `None` for plain kinds.
    pub fn hydrogens(self) -> Option<u8> {
        use AtomKind::*;
        match self {
            CH0 | OH0 | NH0 => Some(0),
            CH1 | OH1 | NH1 => Some(1),
            CH2 | NH2 => Some(2),
            CH3 => Some(3),
            C | H | O | N => None,
        }
    }

    pub fn is_plain(self) -> bool {
        self.hydrogens().is_none()
    }

    /// Bond-order sum the node must carry. Plain kinds fall back to the
    /// element's base valence.
    pub fn expected_valence(self) -> u8 {
        self.element().base_valence() - self.hydrogens().unwrap_or(0)
    }

    pub fn super_atom(element: Element, hydrogens: u8) -> Option<AtomKind> {
        use AtomKind::*;
        Some(match (element, hydrogens) {
            (Element::C, 0) => CH0,
            (Element::C, 1) => CH1,
            (Element::C, 2) => CH2,
            (Element::C, 3) => CH3,
            (Element::O, 0) => OH0,
            (Element::O, 1) => OH1,
            (Element::N, 0) => NH0,
            (Element::N, 1) => NH1,
            (Element::N, 2) => NH2,
            _ => return None,
        })
    }

    pub fn plain(element: Element) -> AtomKind {
        match element {
            Element::C => AtomKind::C,
            Element::H => AtomKind::H,
            Element::O => AtomKind::O,
            Element::N => AtomKind::N,
        }
    }

    pub fn label(self) -> &'static str {
        use AtomKind::*;
        match self {
            CH0 => "CH0",
            CH1 => "CH1",
            CH2 => "CH2",
            CH3 => "CH3",
            OH0 => "OH0",
            OH1 => "OH1",
            NH0 => "NH0",
            NH1 => "NH1",
            NH2 => "NH2",
            C => "C",
            H => "H",
            O => "O",
            N => "N",
        }
    }

    /// Dense index over all 13 kinds, used for canonical-form colors.
    pub fn ordinal(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for AtomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AtomKind {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AtomKind::SUPER_ATOMS
            .iter()
            .chain(AtomKind::PLAIN.iter())
            .copied()
            .find(|k| k.label() == s)
            .ok_or_else(|| GraphError::UnknownKind(s.to_string()))
    }
}

/// Node alphabet the model one-hot encodes against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeAlphabet {
    /// The nine HSQC super-atoms. Plain O/N map onto the OH0/NH0 slots
    /// (heteroatoms with withheld exchangeable protons).
    SuperAtom,
    /// C, H, O, N.
    Plain,
}

impl NodeAlphabet {
    pub fn size(self) -> usize {
        match self {
            NodeAlphabet::SuperAtom => 9,
            NodeAlphabet::Plain => 4,
        }
    }

    pub fn slot(self, kind: AtomKind) -> Option<usize> {
        match self {
            NodeAlphabet::SuperAtom => match kind {
                AtomKind::O => Some(4),
                AtomKind::N => Some(6),
                k if !k.is_plain() => Some(k as usize),
                _ => None,
            },
            NodeAlphabet::Plain => Some(match kind.element() {
                Element::C => 0,
                Element::H => 1,
                Element::O => 2,
                Element::N => 3,
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeAlphabet::SuperAtom => "super-atom",
            NodeAlphabet::Plain => "plain",
        }
    }
}

/// Symmetric `n×n` field of bond classes with a `NoBond` diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EdgeTensor {
    n: usize,
    classes: Vec<BondClass>,
}

impl EdgeTensor {
    pub fn empty(n: usize) -> Self {
        Self { n, classes: vec![BondClass::NoBond; n * n] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> BondClass {
        self.classes[i * self.n + j]
    }

    /// Sets both `(i, j)` and `(j, i)`. Diagonal writes are ignored.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: BondClass) {
        if i == j {
            return;
        }
        self.classes[i * self.n + j] = c;
        self.classes[j * self.n + i] = c;
    }

    pub fn n_pairs(&self) -> usize {
        self.n * self.n.saturating_sub(1) / 2
    }

    /// Row-major upper triangle (`i < j`) as class indices.
    pub fn upper_triangle(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n_pairs());
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push(self.get(i, j) as u8);
            }
        }
        out
    }

    pub fn from_upper_triangle(n: usize, upper: &[u8], k_classes: usize) -> Result<Self, GraphError> {
        let expected = n * n.saturating_sub(1) / 2;
        if upper.len() != expected {
            return Err(GraphError::EdgeListLength { n, got: upper.len(), expected });
        }
        let mut e = EdgeTensor::empty(n);
        let mut idx = 0;
        for i in 0..n {
            for j in i + 1..n {
                let c = upper[idx] as usize;
                if c >= k_classes {
                    return Err(GraphError::BondClassOutOfRange(c, k_classes));
                }
                e.set(i, j, BondClass::from_index(c).expect("checked range"));
                idx += 1;
            }
        }
        Ok(e)
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, BondClass)> + '_ {
        let row = &self.classes[i * self.n..(i + 1) * self.n];
        row.iter().enumerate().filter(|(_, c)| c.is_bond()).map(|(j, &c)| (j, c))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    pub fn bonds(&self) -> impl Iterator<Item = (usize, usize, BondClass)> + '_ {
        (0..self.n).flat_map(move |i| {
            (i + 1..self.n).filter_map(move |j| {
                let c = self.get(i, j);
                c.is_bond().then_some((i, j, c))
            })
        })
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| {
            self.get(i, i) == BondClass::NoBond
                && (i + 1..self.n).all(|j| self.get(i, j) == self.get(j, i))
        })
    }

    /// Relabels nodes: node `i` of `self` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> EdgeTensor {
        let mut out = EdgeTensor::empty(self.n);
        for (i, j, c) in self.bonds() {
            out.set(perm[i], perm[j], c);
        }
        out
    }

    pub fn max_class_index(&self) -> usize {
        self.classes.iter().map(|c| c.index()).max().unwrap_or(0)
    }

    /// Unweighted adjacency: any class other than `NoBond` counts as an edge.
    pub fn skeleton(&self) -> Vec<bool> {
        self.classes.iter().map(|c| c.is_bond()).collect()
    }
}

/// Symmetric binary COSY hint matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CosyMask {
    n: usize,
    bits: Vec<bool>,
}

impl CosyMask {
    pub fn empty(n: usize) -> Self {
        Self { n, bits: vec![false; n * n] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize) {
        if i != j {
            self.bits[i * self.n + j] = true;
            self.bits[j * self.n + i] = true;
        }
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.pairs().len()
    }

    pub fn permuted(&self, perm: &[usize]) -> CosyMask {
        let mut out = CosyMask::empty(self.n);
        for (i, j) in self.pairs() {
            out.set(perm[i], perm[j]);
        }
        out
    }
}

/// Element → count, including hydrogens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Formula(pub BTreeMap<Element, u32>);

impl Formula {
    pub fn count(&self, e: Element) -> u32 {
        self.0.get(&e).copied().unwrap_or(0)
    }

    pub fn add(&mut self, e: Element, n: u32) {
        if n > 0 {
            *self.0.entry(e).or_insert(0) += n;
        }
    }

    pub fn heavy_atoms(&self) -> u32 {
        Element::HEAVY.iter().map(|&e| self.count(e)).sum()
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in [Element::C, Element::H, Element::N, Element::O] {
            match self.count(e) {
                0 => {}
                1 => write!(f, "{}", e.symbol())?,
                n => write!(f, "{}{}", e.symbol(), n)?,
            }
        }
        Ok(())
    }
}

/// A molecular graph: node kinds, optional per-node shifts, bonds and COSY hints.
///
/// Shifts are `0.0` where absent. They do not take part in identity
/// comparisons (see [`canonical_key`]).
#[derive(Debug, Clone, PartialEq)]
pub struct MolGraph {
    kinds: Vec<AtomKind>,
    edges: EdgeTensor,
    c_shifts: Vec<f64>,
    h_shifts: Vec<f64>,
    cosy: CosyMask,
}

impl MolGraph {
    pub fn new(kinds: Vec<AtomKind>, edges: EdgeTensor) -> Self {
        let n = kinds.len();
        assert_eq!(edges.len(), n, "edge tensor size must match node count");
        assert!(edges.is_symmetric(), "edge tensor must be symmetric with a NoBond diagonal");
        Self { kinds, edges, c_shifts: vec![0.0; n], h_shifts: vec![0.0; n], cosy: CosyMask::empty(n) }
    }

    /// Convenience constructor from an explicit bond list.
    pub fn from_bonds(kinds: Vec<AtomKind>, bonds: &[(usize, usize, BondClass)]) -> Self {
        let mut e = EdgeTensor::empty(kinds.len());
        for &(i, j, c) in bonds {
            e.set(i, j, c);
        }
        Self::new(kinds, e)
    }

    pub fn with_shifts(mut self, c_shifts: Vec<f64>, h_shifts: Vec<f64>) -> Self {
        assert_eq!(c_shifts.len(), self.len());
        assert_eq!(h_shifts.len(), self.len());
        self.c_shifts = c_shifts;
        self.h_shifts = h_shifts;
        self
    }

    pub fn with_cosy(mut self, cosy: CosyMask) -> Self {
        assert_eq!(cosy.len(), self.len());
        for (i, j) in cosy.pairs() {
            debug_assert!(self.kinds[i].element() == Element::C && self.kinds[j].element() == Element::C);
        }
        self.cosy = cosy;
        self
    }

    pub fn with_edges(&self, edges: EdgeTensor) -> Self {
        assert_eq!(edges.len(), self.len());
        assert!(edges.is_symmetric());
        Self { edges, ..self.clone() }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn kinds(&self) -> &[AtomKind] {
        &self.kinds
    }

    pub fn edges(&self) -> &EdgeTensor {
        &self.edges
    }

    pub fn cosy(&self) -> &CosyMask {
        &self.cosy
    }

    pub fn c_shifts(&self) -> &[f64] {
        &self.c_shifts
    }

    pub fn h_shifts(&self) -> &[f64] {
        &self.h_shifts
    }

    /// `(valence, charge)` per node.
    pub fn valence_charge(&self) -> Vec<(f64, f64)> {
        compute_valence_charge(&self.edges, &self.kinds)
    }

    pub fn n_components(&self) -> usize {
        features::components(&self.edges).len().max(usize::from(!self.is_empty()))
    }

    /// Hydrogen count: explicit for super-atoms, remaining valence for plain kinds.
    pub fn hydrogen_count(&self) -> i64 {
        self.kinds
            .iter()
            .enumerate()
            .map(|(i, k)| match k.hydrogens() {
                Some(h) => h as i64,
                None => {
                    let half: u32 = self.edges.neighbors(i).map(|(_, c)| c.half_order()).sum();
                    (2 * k.expected_valence() as i64 - half as i64) / 2
                }
            })
            .sum()
    }

    pub fn formula(&self) -> Formula {
        let mut f = Formula::default();
        for k in &self.kinds {
            f.add(k.element(), 1);
        }
        f.add(Element::H, self.hydrogen_count().max(0) as u32);
        f
    }

    /// Sorted node kinds; two graphs over the same target share it.
    pub fn kind_multiset(&self) -> Vec<AtomKind> {
        let mut k = self.kinds.clone();
        k.sort();
        k
    }

    /// Node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        let n = self.len();
        let mut kinds = vec![AtomKind::C; n];
        let mut cs = vec![0.0; n];
        let mut hs = vec![0.0; n];
        for i in 0..n {
            kinds[perm[i]] = self.kinds[i];
            cs[perm[i]] = self.c_shifts[i];
            hs[perm[i]] = self.h_shifts[i];
        }
        MolGraph {
            kinds,
            edges: self.edges.permuted(perm),
            c_shifts: cs,
            h_shifts: hs,
            cosy: self.cosy.permuted(perm),
        }
    }

    /// Replaces plain kinds by the super-atom their remaining valence implies.
    ///
    /// Fails when a plain node is over-bonded or when the inferred hydrogens
    /// do not add up to `total_h`. Plain nodes needing more hydrogens than
    /// any super-atom carries (a lone carbon) stay plain.
    pub fn resolve_implicit_hydrogens(&self, total_h: u32) -> Result<MolGraph, GraphError> {
        let vc = self.valence_charge();
        let mut kinds = self.kinds.clone();
        for (i, k) in self.kinds.iter().enumerate() {
            if !k.is_plain() {
                continue;
            }
            let free = vc[i].1;
            if free < 0.0 || free.fract() != 0.0 {
                return Err(GraphError::Unresolvable(format!(
                    "node {i} ({k}) has non-integral or negative free valence {free}"
                )));
            }
            if let Some(s) = AtomKind::super_atom(k.element(), free as u8) {
                kinds[i] = s;
            }
        }
        let resolved = MolGraph { kinds, ..self.clone() };
        let h = resolved.hydrogen_count();
        if h != total_h as i64 {
            return Err(GraphError::Unresolvable(format!(
                "inferred {h} hydrogens, formula has {total_h}"
            )));
        }
        Ok(resolved)
    }
}

/// A validity violation found by [`is_valid_molecule`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Charge { node: usize, charge: f64 },
    Components(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Charge { node, charge } => write!(f, "charge({node})={charge}"),
            Violation::Components(c) => write!(f, "n_components={c}"),
        }
    }
}

/// Valence and connectivity check.
///
/// Super-atoms need charge exactly 0. Plain kinds may leave free valence
/// (filled by implicit hydrogens) but must not be over-bonded or carry a
/// half-integral remainder. The graph must be one connected component.
pub fn is_valid_molecule(g: &MolGraph) -> (bool, Vec<Violation>) {
    let mut violations = Vec::new();
    for (i, (k, (_, charge))) in g.kinds.iter().zip(g.valence_charge()).enumerate() {
        let ok = if k.is_plain() {
            charge >= 0.0 && charge.fract() == 0.0
        } else {
            charge == 0.0
        };
        if !ok {
            violations.push(Violation::Charge { node: i, charge });
        }
    }
    let comps = g.n_components();
    if comps != 1 && !g.is_empty() {
        violations.push(Violation::Components(comps));
    }
    (violations.is_empty(), violations)
}
