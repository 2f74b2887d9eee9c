//! Uniform shift noise for robustness studies.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{SpectraError, SpectralRecord};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PerturbationLevel {
    None,
    Sp,
    Mp,
    Lp,
}

impl PerturbationLevel {
    pub const ALL: [PerturbationLevel; 4] = [Self::None, Self::Sp, Self::Mp, Self::Lp];

    /// `(delta_c, delta_h)` in ppm.
    pub fn deltas(self) -> (f64, f64) {
        match self {
            Self::None => (0.0, 0.0),
            Self::Sp => (1.0, 0.1),
            Self::Mp => (3.0, 0.5),
            Self::Lp => (5.0, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Sp => "sp",
            Self::Mp => "mp",
            Self::Lp => "lp",
        }
    }
}

impl fmt::Display for PerturbationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationLevel {
    type Err = SpectraError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| SpectraError::Inconsistent(format!("unknown perturbation level `{s}`")))
    }
}

/// Adds independent `U[-δ, +δ]` noise to every carbon shift and to every
/// proton-bearing node's shift, then rebuilds HSQC and COSY peak positions
/// from the perturbed node shifts. Several proton entries of one node move
/// together, so their mean moves by the node's draw.
pub fn perturb(rec: &SpectralRecord, level: PerturbationLevel, seed: u64) -> SpectralRecord {
    if level == PerturbationLevel::None {
        return rec.clone();
    }
    let (dc, dh) = level.deltas();
    let mut rng = rng_from_seed(seed);
    let mut out = rec.clone();
    for (_, c) in out.c_shifts.iter_mut() {
        *c += rng.gen_range(-dc..=dc);
    }
    let mut node_dh: BTreeMap<usize, f64> = BTreeMap::new();
    for &(node, _) in &rec.h_shifts {
        node_dh.entry(node).or_insert(0.0);
    }
    for d in node_dh.values_mut() {
        *d = rng.gen_range(-dh..=dh);
    }
    for (node, h) in out.h_shifts.iter_mut() {
        *h += node_dh[node];
    }
    let c_of: BTreeMap<usize, f64> = out.c_shifts.iter().copied().collect();
    for p in out.hsqc.iter_mut() {
        if let Some(&c) = c_of.get(&p.carbon) {
            p.c_shift = c;
        }
        p.h_shift += node_dh.get(&p.carbon).copied().unwrap_or(0.0);
    }
    for p in out.cosy.iter_mut() {
        p.h_a += node_dh.get(&p.a).copied().unwrap_or(0.0);
        p.h_b += node_dh.get(&p.b).copied().unwrap_or(0.0);
    }
    out
}
