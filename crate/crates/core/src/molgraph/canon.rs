//! Canonical labeling by color refinement plus individualization search.

use super::MolGraph;

/// Key identifying a graph up to isomorphism of (atom kind, bond class)
/// labeled graphs. Shifts and COSY hints are ignored.
///
/// Format: `<kind>.<kind>...|<upper-triangle class digits>` in canonical order.
pub fn canonical_key(g: &MolGraph) -> String {
    let order = canonical_order(g);
    let mut key = String::with_capacity(g.len() * 4 + g.edges().n_pairs() + 1);
    for (p, &v) in order.iter().enumerate() {
        if p > 0 {
            key.push('.');
        }
        key.push_str(g.kinds()[v].label());
    }
    key.push('|');
    for a in 0..order.len() {
        for b in a + 1..order.len() {
            key.push(char::from(b'0' + g.edges().get(order[a], order[b]) as u8));
        }
    }
    key
}

/// Node order (position → original node) that realizes the canonical form.
pub fn canonical_order(g: &MolGraph) -> Vec<usize> {
    let n = g.len();
    if n == 0 {
        return vec![];
    }
    let colors: Vec<u32> = g.kinds().iter().map(|k| k.ordinal() as u32).collect();
    let mut best: Option<(Vec<u8>, Vec<usize>)> = None;
    search(g, colors, &mut best);
    best.expect("search reaches at least one leaf").1
}

/// Refines `colors` to the coarsest equitable partition. Colors are dense
/// ranks of their signatures, so the result does not depend on node order.
fn refine(g: &MolGraph, colors: &mut Vec<u32>) {
    let n = g.len();
    let mut n_colors = usize::MAX;
    loop {
        let sigs: Vec<(u32, Vec<(u8, u32)>)> = (0..n)
            .map(|v| {
                let mut nb: Vec<(u8, u32)> =
                    g.edges().neighbors(v).map(|(w, c)| (c as u8, colors[w])).collect();
                nb.sort_unstable();
                (colors[v], nb)
            })
            .collect();
        let mut distinct: Vec<&(u32, Vec<(u8, u32)>)> = sigs.iter().collect();
        distinct.sort();
        distinct.dedup();
        for (v, s) in sigs.iter().enumerate() {
            colors[v] = distinct.binary_search(&s).expect("present") as u32;
        }
        if distinct.len() == n_colors {
            break;
        }
        n_colors = distinct.len();
    }
}

fn certificate(g: &MolGraph, order: &[usize]) -> Vec<u8> {
    let n = order.len();
    let mut cert = Vec::with_capacity(n + n * n / 2);
    cert.extend(order.iter().map(|&v| g.kinds()[v].ordinal()));
    for a in 0..n {
        for b in a + 1..n {
            cert.push(g.edges().get(order[a], order[b]) as u8);
        }
    }
    cert
}

/// `u` and `v` are interchangeable if swapping them is an automorphism.
fn twins(g: &MolGraph, u: usize, v: usize) -> bool {
    let e = g.edges();
    g.kinds()[u] == g.kinds()[v]
        && (0..g.len()).all(|w| w == u || w == v || e.get(u, w) == e.get(v, w))
}

fn search(g: &MolGraph, mut colors: Vec<u32>, best: &mut Option<(Vec<u8>, Vec<usize>)>) {
    refine(g, &mut colors);
    let n = g.len();
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (v, &c) in colors.iter().enumerate() {
        cells[c as usize].push(v);
    }
    match cells.iter().find(|c| c.len() > 1) {
        None => {
            let mut order = vec![0; n];
            for (v, &c) in colors.iter().enumerate() {
                order[c as usize] = v;
            }
            let cert = certificate(g, &order);
            if best.as_ref().map_or(true, |(b, _)| cert < *b) {
                *best = Some((cert, order));
            }
        }
        Some(cell) => {
            let mut tried: Vec<usize> = Vec::new();
            for &v in cell {
                if tried.iter().any(|&u| twins(g, u, v)) {
                    continue;
                }
                tried.push(v);
                let child: Vec<u32> =
                    colors.iter().enumerate().map(|(w, &c)| if w == v { 2 * c } else { 2 * c + 1 }).collect();
                search(g, child, best);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{AtomKind::*, BondClass::*, MolGraph};

    fn benzene() -> MolGraph {
        let bonds: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6, Aromatic)).collect();
        MolGraph::from_bonds(vec![CH1; 6], &bonds)
    }

    #[test]
    fn benzene_permutation_invariant() {
        let g = benzene();
        let p = g.permuted(&[3, 5, 0, 2, 4, 1]);
        assert_eq!(canonical_key(&g), canonical_key(&p));
        assert!(canonical_key(&g).starts_with("CH1.CH1.CH1.CH1.CH1.CH1|"));
    }

    #[test]
    fn positional_isomers_differ() {
        // 1-propanol vs 2-propanol (shared formula C3H8O).
        let a = MolGraph::from_bonds(vec![CH3, CH2, CH2, OH1], &[(0, 1, Single), (1, 2, Single), (2, 3, Single)]);
        let b = MolGraph::from_bonds(vec![CH3, CH1, CH3, OH1], &[(0, 1, Single), (1, 2, Single), (1, 3, Single)]);
        assert_ne!(canonical_key(&a), canonical_key(&b));
        // Ortho vs para substitution pattern on a ring share kind multisets.
        let mut ortho = vec![CH0, CH0, CH1, CH1, CH1, CH1, CH3, CH3];
        let mut bonds: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6, Aromatic)).collect();
        bonds.push((0, 6, Single));
        bonds.push((1, 7, Single));
        let o = MolGraph::from_bonds(ortho.clone(), &bonds);
        ortho.swap(1, 3);
        let mut pb: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6, Aromatic)).collect();
        pb.push((0, 6, Single));
        pb.push((3, 7, Single));
        let p = MolGraph::from_bonds(ortho, &pb);
        assert_eq!(o.kind_multiset(), p.kind_multiset());
        assert_ne!(canonical_key(&o), canonical_key(&p));
    }

    #[test]
    fn bond_class_change_changes_key() {
        let a = MolGraph::from_bonds(vec![CH2, CH2], &[(0, 1, Double)]);
        let b = MolGraph::from_bonds(vec![CH2, CH2], &[(0, 1, Single)]);
        assert_ne!(canonical_key(&a), canonical_key(&b));
    }

    #[test]
    fn symmetric_star_is_fast_and_stable() {
        // Neopentane-like star plus many identical isolated atoms.
        let mut kinds = vec![CH0, CH3, CH3, CH3, CH3];
        kinds.extend([CH3; 8]);
        let g = MolGraph::from_bonds(kinds, &[(0, 1, Single), (0, 2, Single), (0, 3, Single), (0, 4, Single)]);
        let perm: Vec<usize> = (0..13).rev().collect();
        assert_eq!(canonical_key(&g), canonical_key(&g.permuted(&perm)));
    }
}
