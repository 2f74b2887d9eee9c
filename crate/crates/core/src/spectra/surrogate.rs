//! Deterministic additive shift model standing in for computed NMR shifts.

use std::collections::BTreeMap;
use std::str::FromStr;

use super::SpectraError;
use crate::molgraph::{AtomKind, BondClass, Element, MolGraph};

pub const C_SHIFT_RANGE: (f64, f64) = (0.0, 250.0);
pub const H_SHIFT_RANGE: (f64, f64) = (0.0, 15.0);

const BUILTIN: &str = include_str!("../../data/surrogate_constants_v1.txt");
const HEADER: &str = "#dise-surrogate-constants v1";

/// Parsed constants table.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    version: String,
    h_factor: f64,
    base_c: BTreeMap<AtomKind, f64>,
    base_h: BTreeMap<AtomKind, f64>,
    inc_c: BTreeMap<(Element, BondClass), f64>,
}

impl Default for SurrogateModel {
    fn default() -> Self {
        Self::parse(BUILTIN).expect("built-in constants parse")
    }
}

fn bond_class_named(s: &str) -> Option<BondClass> {
    BondClass::ALL.iter().copied().find(|c| c.label() == s)
}

impl SurrogateModel {
    /// Parses the `key = value` constants format. The first non-empty line
    /// must be the version header.
    pub fn parse(text: &str) -> Result<Self, SpectraError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == HEADER => {}
            _ => return Err(SpectraError::Constants(format!("missing header `{HEADER}`"))),
        }
        let mut m = SurrogateModel {
            version: String::new(),
            h_factor: 0.0,
            base_c: BTreeMap::new(),
            base_h: BTreeMap::new(),
            inc_c: BTreeMap::new(),
        };
        for (no, line) in lines {
            let line = line.trim();
            if line.starts_with('#') {
                continue;
            }
            let bad = |why: &str| SpectraError::Constants(format!("line {}: {why}: `{line}`", no + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "version" {
                m.version = value.to_string();
                continue;
            }
            let v: f64 = value.parse().map_err(|_| bad("value is not a number"))?;
            let parts: Vec<&str> = key.split('.').collect();
            match parts.as_slice() {
                ["h_factor"] => m.h_factor = v,
                ["base_c", kind] => {
                    m.base_c.insert(AtomKind::from_str(kind).map_err(|_| bad("unknown kind"))?, v);
                }
                ["base_h", kind] => {
                    m.base_h.insert(AtomKind::from_str(kind).map_err(|_| bad("unknown kind"))?, v);
                }
                ["inc_c", el, class] => {
                    let el = Element::from_str(el).map_err(|_| bad("unknown element"))?;
                    let class = bond_class_named(class).ok_or_else(|| bad("unknown bond class"))?;
                    m.inc_c.insert((el, class), v);
                }
                _ => return Err(bad("unknown key")),
            }
        }
        if m.version.is_empty() {
            return Err(SpectraError::Constants("missing `version`".into()));
        }
        Ok(m)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    fn increment(&self, neighbor: AtomKind, class: BondClass) -> Result<f64, SpectraError> {
        self.inc_c.get(&(neighbor.element(), class)).copied().ok_or_else(|| {
            SpectraError::Surrogate(format!("no increment for {} via {}", neighbor.element().symbol(), class.label()))
        })
    }

    /// Per-node `(c_shift, h_shift)`; zero where a node has no carbon or no
    /// attached proton. Fails on plain kinds and on shifts outside the
    /// legal ranges.
    pub fn shifts(&self, g: &MolGraph) -> Result<(Vec<f64>, Vec<f64>), SpectraError> {
        let n = g.len();
        let mut cs = vec![0.0; n];
        let mut hs = vec![0.0; n];
        for (i, &kind) in g.kinds().iter().enumerate() {
            if kind.is_plain() {
                return Err(SpectraError::Surrogate(format!("node {i} has plain kind {kind}")));
            }
            if kind.element() != Element::C {
                continue;
            }
            let mut sum = 0.0;
            for (j, class) in g.edges().neighbors(i) {
                sum += self.increment(g.kinds()[j], class)?;
            }
            let base = self.base_c.get(&kind).copied().ok_or_else(|| {
                SpectraError::Surrogate(format!("no base carbon shift for {kind}"))
            })?;
            cs[i] = base + sum;
            if !(C_SHIFT_RANGE.0..=C_SHIFT_RANGE.1).contains(&cs[i]) {
                return Err(SpectraError::OutOfRange { node: i, nucleus: "13C", ppm: cs[i] });
            }
            if kind.hydrogens().unwrap_or(0) > 0 {
                let bh = self.base_h.get(&kind).copied().ok_or_else(|| {
                    SpectraError::Surrogate(format!("no base proton shift for {kind}"))
                })?;
                hs[i] = bh + self.h_factor * sum;
                if !(H_SHIFT_RANGE.0..=H_SHIFT_RANGE.1).contains(&hs[i]) {
                    return Err(SpectraError::OutOfRange { node: i, nucleus: "1H", ppm: hs[i] });
                }
            }
        }
        Ok((cs, hs))
    }

    /// `g` with surrogate shifts attached.
    pub fn annotate(&self, g: &MolGraph) -> Result<MolGraph, SpectraError> {
        let (cs, hs) = self.shifts(g)?;
        Ok(g.clone().with_shifts(cs, hs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{AtomKind::*, BondClass::*};

    #[test]
    fn ethane_and_methanol() {
        let m = SurrogateModel::default();
        assert_eq!(m.version(), "surrogate-v1");
        let ethane = MolGraph::from_bonds(vec![CH3, CH3], &[(0, 1, Single)]);
        let (c, h) = m.shifts(&ethane).unwrap();
        assert_eq!(c, vec![18.0, 18.0]);
        assert!((h[0] - 0.98).abs() < 1e-12);
        let methanol = MolGraph::from_bonds(vec![CH3, OH1], &[(0, 1, Single)]);
        let (c, h) = m.shifts(&methanol).unwrap();
        assert_eq!(c, vec![50.0, 0.0]);
        assert_eq!(h[1], 0.0);
    }

    #[test]
    fn deterministic() {
        let m = SurrogateModel::default();
        let g = MolGraph::from_bonds(vec![CH3, CH2, OH1], &[(0, 1, Single), (1, 2, Single)]);
        let a = m.shifts(&g).unwrap();
        let b = m.shifts(&g).unwrap();
        assert_eq!(a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn out_of_range_rejected() {
        let m = SurrogateModel::default();
        // Ring carbon with two aromatic neighbours, an N and an O substituent pushes past 250 ppm.
        let g = MolGraph::from_bonds(
            vec![CH0, CH1, NH0, OH1],
            &[(0, 1, Aromatic), (0, 2, Aromatic), (0, 3, Single)],
        );
        assert!(matches!(m.shifts(&g), Err(SpectraError::OutOfRange { node: 0, .. })));
    }

    #[test]
    fn parse_errors() {
        assert!(SurrogateModel::parse("version = x\n").is_err());
        assert!(SurrogateModel::parse("#dise-surrogate-constants v1\nversion = x\nbase_c.XX = 3\n").is_err());
        let ok = SurrogateModel::parse("#dise-surrogate-constants v1\nversion = x\nbase_c.CH3 = 3\n").unwrap();
        assert_eq!(ok.version(), "x");
    }
}
