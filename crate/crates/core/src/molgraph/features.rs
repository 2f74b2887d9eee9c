use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{cycle_counts, AtomKind, EdgeTensor};

/// Eigenvalues with magnitude below this count as zero.
pub const LAPLACIAN_ZERO_TOL: f64 = 1e-8;
/// Eigenvalues closer than this are treated as one degenerate eigenspace.
const DEGENERACY_TOL: f64 = 1e-6;

/// Structural (edge-dependent) node features.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StructuralFeatures {
    /// Membership counts in 3-, 4- and 5-rings.
    pub cycles: [u32; 3],
    pub in_largest_component: bool,
    /// Entries of the eigenvectors for the two smallest non-zero Laplacian eigenvalues.
    pub lap_eigvec: [f64; 2],
    pub valence: f64,
    pub charge: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalFeatures {
    pub cycle_counts: [u32; 4],
    pub n_components: usize,
    pub lap_eigvals: [f64; 5],
    pub t_norm: f64,
}

/// Valence (sum of incident bond orders) and charge (expected − valence).
pub fn compute_valence_charge(edges: &EdgeTensor, kinds: &[AtomKind]) -> Vec<(f64, f64)> {
    kinds
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let half: u32 = edges.neighbors(i).map(|(_, c)| c.half_order()).sum();
            let valence = half as f64 / 2.0;
            (valence, k.expected_valence() as f64 - valence)
        })
        .collect()
}

/// Connected components of the bond skeleton, in order of smallest member.
pub(crate) fn components(edges: &EdgeTensor) -> Vec<Vec<usize>> {
    let n = edges.len();
    let mut seen = vec![false; n];
    let mut comps = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut stack = vec![s];
        let mut comp = vec![];
        while let Some(v) = stack.pop() {
            comp.push(v);
            for (w, _) in edges.neighbors(v) {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// 1 for nodes of the largest component; ties go to the component holding
/// the smallest node index.
pub fn largest_component_flags(edges: &EdgeTensor) -> Vec<bool> {
    let comps = components(edges);
    let mut flags = vec![false; edges.len()];
    let mut best: Option<&Vec<usize>> = None;
    for c in &comps {
        if best.map_or(true, |b| c.len() > b.len()) {
            best = Some(c);
        }
    }
    if let Some(b) = best {
        for &v in b {
            flags[v] = true;
        }
    }
    flags
}

/// Eigen-decomposition of the unweighted Laplacian, eigenvalues ascending.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as columns. Within
/// a degenerate eigenspace the basis is replaced by the Gram–Schmidt
/// orthonormalization of the projected standard basis vectors, then every
/// vector is sign-fixed so its largest-magnitude entry is positive.
pub fn laplacian_spectrum(edges: &EdgeTensor) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = edges.len();
    if n == 0 {
        return (vec![], vec![]);
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for (i, j, _) in edges.bonds() {
        l[(i, j)] = -1.0;
        l[(j, i)] = -1.0;
        l[(i, i)] += 1.0;
        l[(j, j)] += 1.0;
    }
    let eig = SymmetricEigen::new(l);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    for v in vals.iter_mut() {
        if v.abs() < LAPLACIAN_ZERO_TOL {
            *v = 0.0;
        }
    }
    let raw: Vec<DVector<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (vals[end] - vals[start]).abs() < DEGENERACY_TOL {
            end += 1;
        }
        if end - start == 1 {
            vecs.push(raw[start].iter().copied().collect());
        } else {
            vecs.extend(canonical_basis(&raw[start..end], n));
        }
        start = end;
    }
    for v in vecs.iter_mut() {
        sign_fix(v);
    }
    (vals, vecs)
}

fn canonical_basis(space: &[DVector<f64>], n: usize) -> Vec<Vec<f64>> {
    let m = space.len();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(m);
    for i in 0..n {
        if basis.len() == m {
            break;
        }
        // Projection of e_i onto the eigenspace.
        let mut p = DVector::<f64>::zeros(n);
        for v in space {
            p += v * v[i];
        }
        for b in &basis {
            let d = b.dot(&p);
            p -= b * d;
        }
        let norm = p.norm();
        if norm > 1e-6 {
            basis.push(p / norm);
        }
    }
    basis.into_iter().map(|v| v.iter().copied().collect()).collect()
}

fn sign_fix(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Structural node features and graph-level features (everything except `t_norm`).
pub fn compute_structural_features(
    edges: &EdgeTensor,
    kinds: &[AtomKind],
) -> (Vec<StructuralFeatures>, GlobalFeatures) {
    let n = edges.len();
    assert_eq!(kinds.len(), n);
    let (cycle_global, cycle_nodes) = cycle_counts(edges);
    let lcc = largest_component_flags(edges);
    let vc = compute_valence_charge(edges, kinds);
    let (vals, vecs) = laplacian_spectrum(edges);

    let nonzero: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > 0.0).collect();
    let mut eigvals = [0.0; 5];
    for (slot, &i) in eigvals.iter_mut().zip(nonzero.iter()) {
        *slot = vals[i];
    }

    let nodes = (0..n)
        .map(|i| {
            let mut lap_eigvec = [0.0; 2];
            for (slot, &k) in lap_eigvec.iter_mut().zip(nonzero.iter()) {
                *slot = vecs[k][i];
            }
            StructuralFeatures {
                cycles: cycle_nodes[i],
                in_largest_component: lcc[i],
                lap_eigvec,
                valence: vc[i].0,
                charge: vc[i].1,
            }
        })
        .collect();
    let n_components = if n == 0 { 0 } else { components(edges).len() };
    (nodes, GlobalFeatures { cycle_counts: cycle_global, n_components, lap_eigvals: eigvals, t_norm: 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{AtomKind::*, BondClass};

    fn path3() -> EdgeTensor {
        let mut e = EdgeTensor::empty(3);
        e.set(0, 1, BondClass::Single);
        e.set(1, 2, BondClass::Single);
        e
    }

    /// Jacobi rotation eigenvalue solver, independent of nalgebra.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..200 {
            let mut off = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off += a[i][j] * a[i][j];
                    }
                }
            }
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut v: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn path_graph_spectrum() {
        let (_, g) = compute_structural_features(&path3(), &[CH3, CH2, CH3]);
        for (a, b) in g.lap_eigvals.iter().zip([1.0, 3.0, 0.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-12, "{:?}", g.lap_eigvals);
        }
        let lap = vec![vec![1.0, -1.0, 0.0], vec![-1.0, 2.0, -1.0], vec![0.0, -1.0, 1.0]];
        let oracle = jacobi_eigenvalues(lap);
        let (vals, _) = laplacian_spectrum(&path3());
        for (a, b) in vals.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn isolated_node() {
        let e = EdgeTensor::empty(1);
        let (nodes, g) = compute_structural_features(&e, &[C]);
        assert_eq!(g.lap_eigvals, [0.0; 5]);
        assert_eq!(g.n_components, 1);
        assert_eq!(g.cycle_counts, [0; 4]);
        assert_eq!(nodes[0].lap_eigvec, [0.0, 0.0]);
        assert!(nodes[0].in_largest_component);
    }

    #[test]
    fn benzene_features() {
        let mut e = EdgeTensor::empty(6);
        for i in 0..6 {
            e.set(i, (i + 1) % 6, BondClass::Aromatic);
        }
        let (nodes, g) = compute_structural_features(&e, &[CH1; 6]);
        assert_eq!(g.cycle_counts, [0, 0, 0, 1]);
        for f in &nodes {
            assert_eq!(f.cycles, [0, 0, 0]);
            assert_eq!(f.valence, 3.0);
            assert_eq!(f.charge, 0.0);
        }
        // Degenerate pair at 1: eigenvectors are unit length and orthogonal.
        let (vals, vecs) = laplacian_spectrum(&e);
        assert!((vals[1] - 1.0).abs() < 1e-12 && (vals[2] - 1.0).abs() < 1e-12);
        let dot: f64 = vecs[1].iter().zip(&vecs[2]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn valence_examples() {
        let mut e = EdgeTensor::empty(2);
        e.set(0, 1, BondClass::Single);
        assert_eq!(compute_valence_charge(&e, &[CH3, CH3])[0], (1.0, 0.0));

        let mut e = EdgeTensor::empty(3);
        e.set(0, 1, BondClass::Aromatic);
        e.set(0, 2, BondClass::Aromatic);
        assert_eq!(compute_valence_charge(&e, &[CH1, CH1, CH1])[0], (3.0, 0.0));

        let mut e = EdgeTensor::empty(3);
        e.set(0, 1, BondClass::Triple);
        e.set(0, 2, BondClass::Single);
        assert_eq!(compute_valence_charge(&e, &[CH0, CH0, CH3])[0], (4.0, 0.0));
    }

    #[test]
    fn largest_component_tie_break() {
        let mut e = EdgeTensor::empty(5);
        e.set(0, 1, BondClass::Single);
        e.set(2, 3, BondClass::Single);
        e.set(3, 4, BondClass::Single);
        assert_eq!(largest_component_flags(&e), vec![false, false, true, true, true]);

        let mut e = EdgeTensor::empty(4);
        e.set(2, 3, BondClass::Single);
        e.set(0, 1, BondClass::Single);
        assert_eq!(largest_component_flags(&e), vec![true, true, false, false]);

        assert!(largest_component_flags(&path3()).iter().all(|&f| f));
    }

    #[test]
    fn eigenvector_sign_and_residual() {
        let e = path3();
        let (vals, vecs) = laplacian_spectrum(&e);
        let l = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]];
        for (lam, v) in vals.iter().zip(&vecs) {
            for i in 0..3 {
                let lv: f64 = (0..3).map(|j| l[i][j] * v[j]).sum();
                assert!((lv - lam * v[i]).abs() < 1e-12);
            }
            let big = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(big > 0.0);
        }
    }
}
