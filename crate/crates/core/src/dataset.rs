//! Synthetic molecules, surrogate-annotated records, splits and the
//! line-delimited dataset format.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::{canonical_key, is_valid_molecule, AtomKind, BondClass, EdgeTensor, Element, Formula, MolGraph};
use crate::rng::rng_from_seed;
use crate::spectra::{derive_cosy, SpectralRecord, SurrogateModel};

pub const DATASET_HEADER: &str = "#dise-dataset v1";

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("only {found} distinct molecules found before the search was exhausted (wanted {wanted})")]
    TargetUnreachable { wanted: usize, found: usize },
    #[error("line {line}, column {column}: {reason}")]
    Parse { line: usize, column: usize, reason: String },
    #[error("duplicate record id `{id}` on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(String),
}

/// Relative sampling weights of the heavy elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementWeights {
    pub c: f64,
    pub o: f64,
    pub n: f64,
}

impl Default for ElementWeights {
    fn default() -> Self {
        Self { c: 0.7, o: 0.2, n: 0.1 }
    }
}

impl ElementWeights {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Element {
        let total = self.c + self.o + self.n;
        let u = rng.gen::<f64>() * total;
        if u < self.c {
            Element::C
        } else if u < self.c + self.o {
            Element::O
        } else {
            Element::N
        }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let w = [self.c, self.o, self.n];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(DatasetError::Invalid(format!("bad element weights {w:?}")));
        }
        Ok(())
    }
}

/// Heavy-atom skeleton under construction; valences kept in half units so
/// aromatic bonds (order 1.5) stay integral.
struct Growth {
    elems: Vec<Element>,
    bonds: Vec<(usize, usize, BondClass)>,
    used: Vec<u32>,
}

impl Growth {
    fn free(&self, i: usize) -> u32 {
        (2 * self.elems[i].base_valence() as u32).saturating_sub(self.used[i]) / 2
    }

    fn add_atom(&mut self, e: Element) -> usize {
        self.elems.push(e);
        self.used.push(0);
        self.elems.len() - 1
    }

    fn bond(&mut self, i: usize, j: usize, c: BondClass) {
        self.bonds.push((i, j, c));
        self.used[i] += c.half_order();
        self.used[j] += c.half_order();
    }

    fn bonded(&self, i: usize, j: usize) -> Option<usize> {
        self.bonds.iter().position(|&(a, b, _)| (a == i && b == j) || (a == j && b == i))
    }

    fn distance(&self, from: usize, to: usize) -> Option<usize> {
        let n = self.elems.len();
        let mut dist = vec![usize::MAX; n];
        dist[from] = 0;
        let mut queue = std::collections::VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            for &(a, b, _) in &self.bonds {
                let v = if a == u { b } else if b == u { a } else { continue };
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        (dist[to] != usize::MAX).then_some(dist[to])
    }

    fn into_graph(self) -> MolGraph {
        let lone = self.elems.len() == 1;
        let kinds = (0..self.elems.len())
            .map(|i| {
                let h = self.free(i) as u8;
                match AtomKind::super_atom(self.elems[i], h) {
                    Some(k) if !lone => k,
                    _ => AtomKind::plain(self.elems[i]),
                }
            })
            .collect();
        MolGraph::from_bonds(kinds, &self.bonds)
    }
}

fn pick_order(rng: &mut ChaCha8Rng, cap: u32) -> BondClass {
    let u: f64 = rng.gen();
    let want = if u < 0.8 { 1 } else if u < 0.95 { 2 } else { 3 };
    match want.min(cap) {
        3 => BondClass::Triple,
        2 => BondClass::Double,
        _ => BondClass::Single,
    }
}

fn grow_one(max_heavy: usize, w: &ElementWeights, rng: &mut ChaCha8Rng) -> MolGraph {
    let mut g = Growth { elems: vec![], bonds: vec![], used: vec![] };
    if max_heavy >= 6 && rng.gen::<f64>() < 0.15 {
        // Aromatic six-ring, optionally with one ring nitrogen.
        let n_pos = (w.n > 0.0 && rng.gen::<f64>() < 0.3).then(|| rng.gen_range(0..6));
        for i in 0..6 {
            g.add_atom(if Some(i) == n_pos { Element::N } else { Element::C });
        }
        for i in 0..6 {
            g.bond(i, (i + 1) % 6, BondClass::Aromatic);
        }
    } else {
        g.add_atom(w.draw(rng));
    }
    let size = rng.gen_range(g.elems.len()..=max_heavy);
    while g.elems.len() < size {
        let open: Vec<usize> = (0..g.elems.len()).filter(|&i| g.free(i) >= 1).collect();
        if open.is_empty() {
            break;
        }
        if g.elems.len() >= 3 && rng.gen::<f64>() < 0.1 {
            close_ring(&mut g, rng);
            continue;
        }
        let site = *open.choose(rng).expect("non-empty");
        let e = w.draw(rng);
        let cap = g.free(site).min(e.base_valence() as u32);
        let order = pick_order(rng, cap);
        let new = g.add_atom(e);
        g.bond(site, new, order);
    }
    if rng.gen::<f64>() < 0.3 {
        close_ring(&mut g, rng);
    }
    for b in 0..g.bonds.len() {
        let (i, j, c) = g.bonds[b];
        if c == BondClass::Single && g.free(i) >= 1 && g.free(j) >= 1 && rng.gen::<f64>() < 0.1 {
            g.used[i] += 2;
            g.used[j] += 2;
            g.bonds[b].2 = BondClass::Double;
        }
    }
    g.into_graph()
}

/// Adds a single bond closing a ring of three to six atoms, if one fits.
fn close_ring(g: &mut Growth, rng: &mut ChaCha8Rng) {
    let n = g.elems.len();
    let mut pairs = vec![];
    for i in 0..n {
        for j in i + 1..n {
            if g.free(i) >= 1 && g.free(j) >= 1 && g.bonded(i, j).is_none() {
                if let Some(d) = g.distance(i, j) {
                    if (2..=5).contains(&d) {
                        pairs.push((i, j));
                    }
                }
            }
        }
    }
    if let Some(&(i, j)) = pairs.choose(rng) {
        g.bond(i, j, BondClass::Single);
    }
}

/// Random valence-respecting growth, deduplicated by canonical key, in
/// discovery order. Molecule sizes are uniform in `1..=max_heavy_atoms`
/// before deduplication. A lone heavy atom is emitted as a plain node.
pub fn generate_molecules(
    n_target: usize,
    max_heavy_atoms: usize,
    weights: &ElementWeights,
    seed: u64,
) -> Result<Vec<MolGraph>, DatasetError> {
    if max_heavy_atoms == 0 {
        return Err(DatasetError::Invalid("max_heavy_atoms must be at least 1".into()));
    }
    weights.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n_target);
    let patience = 20_000 + 20 * n_target;
    let mut misses = 0;
    while out.len() < n_target {
        let g = grow_one(max_heavy_atoms, weights, &mut rng);
        debug_assert!(is_valid_molecule(&g).0);
        if seen.insert(canonical_key(&g)) {
            out.push(g);
            misses = 0;
        } else {
            misses += 1;
            if misses > patience {
                return Err(DatasetError::TargetUnreachable { wanted: n_target, found: out.len() });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator_seed: u64,
    pub constants: String,
}

/// A ground-truth molecule (with surrogate shifts and COSY mask attached)
/// and its spectral record.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub graph: MolGraph,
    pub spectra: SpectralRecord,
    pub provenance: Provenance,
}

impl DatasetRecord {
    pub fn key(&self) -> String {
        canonical_key(&self.graph)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BuiltDataset {
    pub records: Vec<DatasetRecord>,
    /// Ids assigned to molecules the shift filter removed.
    pub dropped: Vec<String>,
}

/// Annotates molecules; ids are `mol-NNNNNN` by input position. Molecules
/// whose shifts fall outside the detection ranges (or that the surrogate
/// cannot annotate) are dropped.
pub fn build_dataset(mols: &[MolGraph], surrogate: &SurrogateModel, generator_seed: u64) -> BuiltDataset {
    let mut out = BuiltDataset::default();
    for (i, m) in mols.iter().enumerate() {
        let id = format!("mol-{i:06}");
        let annotated = match surrogate.annotate(m) {
            Ok(g) => g,
            Err(_) => {
                out.dropped.push(id);
                continue;
            }
        };
        let graph = annotated.clone().with_cosy(derive_cosy(&annotated));
        let spectra = SpectralRecord::from_annotated(&graph);
        if spectra.check_ranges().is_err() {
            out.dropped.push(id);
            continue;
        }
        out.records.push(DatasetRecord {
            id,
            graph,
            spectra,
            provenance: Provenance { generator_seed, constants: surrogate.version().to_string() },
        });
    }
    out
}

/// Generates and annotates molecules until `n_records` pass the shift
/// filter. Generation is a prefix stream, so the first `n` records for a
/// seed do not depend on how many are requested.
pub fn generate_dataset(
    n_records: usize,
    max_heavy_atoms: usize,
    weights: &ElementWeights,
    seed: u64,
    surrogate: &SurrogateModel,
) -> Result<BuiltDataset, DatasetError> {
    let mut want = n_records + n_records / 10 + 8;
    loop {
        let mols = generate_molecules(want, max_heavy_atoms, weights, seed)?;
        let mut built = build_dataset(&mols, surrogate, seed);
        if built.records.len() >= n_records {
            built.records.truncate(n_records);
            let last = built.records.last().map(|r| r.id.clone()).unwrap_or_default();
            built.dropped.retain(|id| *id < last);
            return Ok(built);
        }
        want += want / 2 + 8;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn standard(seed: u64) -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&[DatasetRecord]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Shuffles groups of records sharing a canonical key and cuts them
/// 8:1:1 (or per `spec`), so no key lands in two splits.
pub fn split(records: &[DatasetRecord], spec: &SplitSpec) -> Result<Splits, DatasetError> {
    let f = [spec.train, spec.val, spec.test];
    if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::Invalid(format!("split fractions {f:?} must be in [0,1] and sum to 1")));
    }
    let mut groups: BTreeMap<String, Vec<DatasetRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.key()).or_default().push(r.clone());
    }
    let mut groups: Vec<Vec<DatasetRecord>> = groups.into_values().collect();
    groups.shuffle(&mut rng_from_seed(spec.seed));
    let n = records.len();
    let n_val = (n as f64 * spec.val).round() as usize;
    let n_test = (n as f64 * spec.test).round() as usize;
    let mut out = Splits::default();
    for g in groups {
        let dest = if out.test.len() < n_test {
            &mut out.test
        } else if out.val.len() < n_val {
            &mut out.val
        } else {
            &mut out.train
        };
        dest.extend(g);
    }
    for part in [&mut out.train, &mut out.val, &mut out.test] {
        part.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    formula: Formula,
    /// `[kind, c_shift, h_shift]` per node.
    nodes: Vec<(AtomKind, f64, f64)>,
    edges: Vec<u8>,
    cosy: Vec<(usize, usize)>,
    provenance: Provenance,
}

fn to_line(r: &DatasetRecord) -> RecordLine {
    let g = &r.graph;
    RecordLine {
        id: r.id.clone(),
        formula: r.spectra.formula.clone(),
        nodes: (0..g.len()).map(|i| (g.kinds()[i], g.c_shifts()[i], g.h_shifts()[i])).collect(),
        edges: g.edges().upper_triangle(),
        cosy: g.cosy().pairs(),
        provenance: r.provenance.clone(),
    }
}

fn from_line(l: RecordLine, line: usize) -> Result<DatasetRecord, DatasetError> {
    let bad = |reason: String| DatasetError::Parse { line, column: 1, reason: format!("record `{}`: {reason}", l.id) };
    let n = l.nodes.len();
    let edges = EdgeTensor::from_upper_triangle(n, &l.edges, BondClass::ALL.len()).map_err(|e| bad(e.to_string()))?;
    let kinds = l.nodes.iter().map(|x| x.0).collect();
    let cs = l.nodes.iter().map(|x| x.1).collect();
    let hs = l.nodes.iter().map(|x| x.2).collect();
    let mut cosy = crate::molgraph::CosyMask::empty(n);
    for &(a, b) in &l.cosy {
        if a >= n || b >= n || a == b {
            return Err(bad(format!("cosy pair ({a}, {b}) out of range")));
        }
        cosy.set(a, b);
    }
    let bare = MolGraph::new(kinds, edges).with_shifts(cs, hs);
    if cosy != derive_cosy(&bare) {
        return Err(bad("cosy pairs disagree with the structure".into()));
    }
    let graph = bare.with_cosy(cosy);
    let spectra = SpectralRecord::from_annotated(&graph);
    if spectra.formula != l.formula {
        return Err(bad(format!("formula {} disagrees with the structure ({})", l.formula, spectra.formula)));
    }
    spectra.check_ranges().map_err(|e| bad(e.to_string()))?;
    Ok(DatasetRecord { id: l.id, graph, spectra, provenance: l.provenance })
}

/// Serialized form: header line, then one JSON object per record.
pub fn records_text(records: &[DatasetRecord], constants_version: &str) -> String {
    let mut s = format!("{DATASET_HEADER} constants={constants_version}\n");
    for r in records {
        s.push_str(&serde_json::to_string(&to_line(r)).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn save_records(path: &Path, records: &[DatasetRecord], constants_version: &str) -> Result<(), DatasetError> {
    let io = |e: std::io::Error| DatasetError::Io(format!("{}: {e}", path.display()));
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(records_text(records, constants_version).as_bytes()).map_err(io)
}

/// Parsed dataset file: the constants version from the header and the records.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub constants: String,
    pub records: Vec<DatasetRecord>,
}

pub fn parse_records(text: &str) -> Result<LoadedDataset, DatasetError> {
    let mut lines = text.split('\n').enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    let constants = header
        .strip_prefix(DATASET_HEADER)
        .and_then(|rest| rest.trim().strip_prefix("constants="))
        .filter(|v| !v.is_empty())
        .ok_or_else(|| DatasetError::Parse {
            line: 1,
            column: 1,
            reason: format!("expected header `{DATASET_HEADER} constants=<version>`"),
        })?
        .to_string();
    let mut ids = HashSet::new();
    let mut records = vec![];
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(raw).map_err(|e| DatasetError::Parse {
            line,
            column: e.column(),
            reason: e.to_string(),
        })?;
        if !ids.insert(parsed.id.clone()) {
            return Err(DatasetError::DuplicateId { id: parsed.id, line });
        }
        records.push(from_line(parsed, line)?);
    }
    Ok(LoadedDataset { constants, records })
}

pub fn load_records(path: &Path) -> Result<LoadedDataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io(format!("{}: {e}", path.display())))?;
    parse_records(&text)
}

/// Node-order-free fingerprint of a spectral record; two records with
/// equal fingerprints are indistinguishable to the model.
pub fn spectral_fingerprint(rec: &SpectralRecord) -> String {
    let sorted = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",")
    };
    let mut hsqc: Vec<String> =
        rec.hsqc.iter().map(|p| format!("{:.6}/{:.6}/{}", p.c_shift, p.h_shift, p.multiplicity)).collect();
    hsqc.sort();
    let mut cosy: Vec<String> = rec
        .cosy
        .iter()
        .map(|p| {
            let (a, b) = if p.h_a <= p.h_b { (p.h_a, p.h_b) } else { (p.h_b, p.h_a) };
            format!("{a:.6}/{b:.6}")
        })
        .collect();
    cosy.sort();
    format!(
        "{}|{}|{}|{}|{}|{:?}",
        rec.formula,
        sorted(rec.c_shifts.iter().map(|x| x.1).collect()),
        sorted(rec.h_shifts.iter().map(|x| x.1).collect()),
        hsqc.join(";"),
        cosy.join(";"),
        rec.exchangeable_h
    )
}

/// `(colliding pairs, total pairs, records involved)`: pairs of records with
/// equal fingerprints but different structures.
pub fn spectral_collisions(records: &[DatasetRecord]) -> (usize, usize, usize) {
    let mut by_fp: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in records {
        *by_fp.entry(spectral_fingerprint(&r.spectra)).or_default().entry(r.key()).or_insert(0) += 1;
    }
    let mut pairs = 0;
    let mut involved = 0;
    for keys in by_fp.values() {
        if keys.len() < 2 {
            continue;
        }
        let counts: Vec<usize> = keys.values().copied().collect();
        let total: usize = counts.iter().sum();
        involved += total;
        pairs += (total * total - counts.iter().map(|c| c * c).sum::<usize>()) / 2;
    }
    let n = records.len();
    (pairs, n * n.saturating_sub(1) / 2, involved)
}
