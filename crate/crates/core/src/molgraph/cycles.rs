use super::EdgeTensor;

/// A simple cycle as a vertex sequence, starting at its smallest vertex.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimpleCycle(pub Vec<usize>);

/// All simple cycles with `3 <= len <= max_len`, each reported once.
///
/// A cycle is rooted at its smallest vertex and only the traversal direction
/// whose second vertex is smaller than its last is kept.
pub fn simple_cycles(edges: &EdgeTensor, max_len: usize) -> Vec<SimpleCycle> {
    let n = edges.len();
    let adj: Vec<Vec<usize>> = (0..n).map(|i| edges.neighbors(i).map(|(j, _)| j).collect()).collect();
    let mut out = Vec::new();
    let mut path = Vec::with_capacity(max_len);
    let mut on_path = vec![false; n];
    for start in 0..n {
        path.push(start);
        on_path[start] = true;
        extend(start, &adj, max_len, &mut path, &mut on_path, &mut out);
        on_path[start] = false;
        path.pop();
    }
    out
}

fn extend(
    start: usize,
    adj: &[Vec<usize>],
    max_len: usize,
    path: &mut Vec<usize>,
    on_path: &mut [bool],
    out: &mut Vec<SimpleCycle>,
) {
    let last = *path.last().expect("path starts non-empty");
    for &next in &adj[last] {
        if next == start {
            if path.len() >= 3 && path[1] < path[path.len() - 1] {
                out.push(SimpleCycle(path.clone()));
            }
            continue;
        }
        if next < start || on_path[next] || path.len() == max_len {
            continue;
        }
        path.push(next);
        on_path[next] = true;
        extend(start, adj, max_len, path, on_path, out);
        on_path[next] = false;
        path.pop();
    }
}

/// `(global counts of 3..=6-cycles, per-node membership in 3-, 4-, 5-cycles)`.
pub fn cycle_counts(edges: &EdgeTensor) -> ([u32; 4], Vec<[u32; 3]>) {
    let mut global = [0u32; 4];
    let mut nodes = vec![[0u32; 3]; edges.len()];
    for SimpleCycle(c) in simple_cycles(edges, 6) {
        global[c.len() - 3] += 1;
        if c.len() <= 5 {
            for &v in &c {
                nodes[v][c.len() - 3] += 1;
            }
        }
    }
    (global, nodes)
}
