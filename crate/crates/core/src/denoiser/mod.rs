//! Graph-transformer denoiser: edge-class logits from node spectra, the
//! noisy edge tensor, COSY hints and graph-level features.

mod checkpoint;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::molgraph::{compute_structural_features, EdgeTensor, MolGraph, NodeAlphabet};
use crate::nn::{Tape, Tensor, Var};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{
    fit_step, gradients, sample_training_example, sample_training_example_at, train_step, DiffusionSetup, TrainState,
    TrainingExample, ADAM_BETAS, ADAM_EPS, DEFAULT_LR, DEFAULT_WEIGHT_DECAY,
};

/// Non-one-hot node inputs: c/h shifts, 3 ring counts, largest-component
/// flag, 2 |eigenvector| entries, valence, charge.
pub const NODE_EXTRA_FEATURES: usize = 10;
/// Graph inputs: 4 ring counts, component count, 5 eigenvalues, `t_norm`.
pub const GLOBAL_FEATURES: usize = 11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiserError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint file is truncated")]
    TruncatedFile,
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub preset: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_x: usize,
    pub d_e: usize,
    pub d_y: usize,
    pub d_ff_x: usize,
    pub d_ff_e: usize,
    pub d_ff_y: usize,
    pub k_classes: usize,
}

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn make(preset: &str, l: usize, h: usize, dx: usize, de: usize, dy: usize, fx: usize, fe: usize, fy: usize, k: usize) -> Self {
        Self {
            preset: preset.into(),
            n_layers: l,
            n_heads: h,
            d_x: dx,
            d_e: de,
            d_y: dy,
            d_ff_x: fx,
            d_ff_e: fe,
            d_ff_y: fy,
            k_classes: k,
        }
    }

    pub fn paper_qm9() -> Self {
        Self::make("paper-qm9", 24, 8, 256, 64, 64, 256, 128, 128, 5)
    }

    pub fn paper_pcqm() -> Self {
        Self::make("paper-pcqm", 20, 32, 1024, 256, 256, 1024, 512, 512, 6)
    }

    pub fn desk() -> Self {
        Self::make("desk", 4, 4, 64, 32, 32, 64, 64, 64, 5)
    }

    pub fn preset(name: &str) -> Result<Self, DenoiserError> {
        match name {
            "paper-qm9" => Ok(Self::paper_qm9()),
            "paper-pcqm" => Ok(Self::paper_pcqm()),
            "desk" => Ok(Self::desk()),
            other => Err(DenoiserError::UnknownPreset(other.into())),
        }
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let dims = [self.n_layers, self.n_heads, self.d_x, self.d_e, self.d_y, self.d_ff_x, self.d_ff_e, self.d_ff_y];
        if dims.contains(&0) {
            return Err(DenoiserError::ShapeMismatch("zero dimension in config".into()));
        }
        if self.d_x % self.n_heads != 0 {
            return Err(DenoiserError::ShapeMismatch(format!("d_x {} not divisible by {} heads", self.d_x, self.n_heads)));
        }
        if !(2..=6).contains(&self.k_classes) {
            return Err(DenoiserError::ShapeMismatch(format!("k_classes = {}", self.k_classes)));
        }
        Ok(())
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (layers {}, heads {}, dims {}/{}/{}, ff {}/{}/{}, K {})",
            self.preset,
            self.n_layers,
            self.n_heads,
            self.d_x,
            self.d_e,
            self.d_y,
            self.d_ff_x,
            self.d_ff_e,
            self.d_ff_y,
            self.k_classes
        )
    }
}

/// Node alphabet parsing for checkpoint headers.
pub(crate) fn alphabet_from_name(s: &str) -> Option<NodeAlphabet> {
    [NodeAlphabet::SuperAtom, NodeAlphabet::Plain].into_iter().find(|a| a.name() == s)
}

/// Network inputs for `graphs` graphs of `n` nodes each.
#[derive(Debug, Clone)]
pub struct GraphBatch<S> {
    pub n: usize,
    pub graphs: usize,
    pub x: Vec<S>,
    pub e: Vec<S>,
    pub y: Vec<S>,
    alphabet: NodeAlphabet,
    k: usize,
}

impl<S: Scalar> GraphBatch<S> {
    pub fn new(n: usize, alphabet: NodeAlphabet, k_classes: usize) -> Self {
        Self { n, graphs: 0, x: vec![], e: vec![], y: vec![], alphabet, k: k_classes }
    }

    pub fn node_width(&self) -> usize {
        self.alphabet.size() + NODE_EXTRA_FEATURES
    }

    pub fn edge_width(&self) -> usize {
        self.k + 1
    }

    /// Appends one graph. `nodes` supplies kinds, shifts and the COSY mask;
    /// its own edges are ignored in favour of `edges`. Structural features
    /// are computed from `edges`.
    pub fn push(&mut self, nodes: &MolGraph, edges: &EdgeTensor, t_norm: f64) -> Result<(), DenoiserError> {
        let n = self.n;
        if nodes.len() != n || edges.len() != n {
            return Err(DenoiserError::ShapeMismatch(format!(
                "batch holds {n}-node graphs, got {} nodes / {} edges",
                nodes.len(),
                edges.len()
            )));
        }
        if edges.max_class_index() >= self.k {
            return Err(DenoiserError::ShapeMismatch(format!(
                "edge class {} outside K = {}",
                edges.max_class_index(),
                self.k
            )));
        }
        let (feats, global) = compute_structural_features(edges, nodes.kinds());
        let a = self.alphabet.size();
        for i in 0..n {
            let kind = nodes.kinds()[i];
            let slot = self
                .alphabet
                .slot(kind)
                .ok_or_else(|| DenoiserError::ShapeMismatch(format!("kind {kind} not in {} alphabet", self.alphabet.name())))?;
            let mut row = vec![0.0; a + NODE_EXTRA_FEATURES];
            row[slot] = 1.0;
            let f = &feats[i];
            let extra = [
                nodes.c_shifts()[i] / 100.0,
                nodes.h_shifts()[i] / 10.0,
                f.cycles[0] as f64 / 2.0,
                f.cycles[1] as f64 / 2.0,
                f.cycles[2] as f64 / 2.0,
                if f.in_largest_component { 1.0 } else { 0.0 },
                f.lap_eigvec[0].abs(),
                f.lap_eigvec[1].abs(),
                f.valence / 4.0,
                f.charge / 4.0,
            ];
            row[a..].copy_from_slice(&extra);
            self.x.extend(row.into_iter().map(S::of));
        }
        let w = self.k + 1;
        for i in 0..n {
            for j in 0..n {
                let mut row = vec![S::zero(); w];
                row[edges.get(i, j).index()] = S::one();
                if i != j && nodes.cosy().get(i, j) {
                    row[self.k] = S::one();
                }
                self.e.extend(row);
            }
        }
        let mut y = Vec::with_capacity(GLOBAL_FEATURES);
        y.extend(global.cycle_counts.iter().map(|&c| c as f64 / 4.0));
        y.push(global.n_components as f64 / 4.0);
        y.extend(global.lap_eigvals.iter().map(|v| v / 4.0));
        y.push(t_norm);
        self.y.extend(y.into_iter().map(S::of));
        self.graphs += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    q: Lin,
    k: Lin,
    v: Lin,
    e_mul: Lin,
    e_add: Lin,
    y_gate: Lin,
    y_x_mul: Lin,
    y_x_add: Lin,
    x_out: Lin,
    ln_x1: Norm,
    ff_x1: Lin,
    ff_x2: Lin,
    ln_x2: Norm,
    y_e_mul: Lin,
    y_e_add: Lin,
    e_out: Lin,
    ln_e1: Norm,
    ff_e1: Lin,
    ff_e2: Lin,
    ln_e2: Norm,
    y_y: Lin,
    x_y: Lin,
    e_y: Lin,
    ln_y1: Norm,
    ff_y1: Lin,
    ff_y2: Lin,
    ln_y2: Norm,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    in_x1: Lin,
    in_x2: Lin,
    in_e1: Lin,
    in_e2: Lin,
    in_y1: Lin,
    in_y2: Lin,
    blocks: Vec<Block>,
    out1: Lin,
    out2: Lin,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform(usize),
    Zeros,
    Ones,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Builder {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn lin(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Lin {
        Lin {
            w: self.tensor(format!("{name}.weight"), fan_in, fan_out, Init::Uniform(fan_in)),
            b: self.tensor(format!("{name}.bias"), 1, fan_out, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            g: self.tensor(format!("{name}.gamma"), 1, width, Init::Ones),
            b: self.tensor(format!("{name}.beta"), 1, width, Init::Zeros),
        }
    }
}

fn layout(cfg: &ModelConfig, alphabet: NodeAlphabet) -> (Layout, Builder) {
    let mut b = Builder { names: vec![], shapes: vec![], inits: vec![] };
    let (dx, de, dy, h) = (cfg.d_x, cfg.d_e, cfg.d_y, cfg.n_heads);
    let fx = alphabet.size() + NODE_EXTRA_FEATURES;
    let in_x1 = b.lin("in.x1", fx, cfg.d_ff_x);
    let in_x2 = b.lin("in.x2", cfg.d_ff_x, dx);
    let in_e1 = b.lin("in.e1", cfg.k_classes + 1, cfg.d_ff_e);
    let in_e2 = b.lin("in.e2", cfg.d_ff_e, de);
    let in_y1 = b.lin("in.y1", GLOBAL_FEATURES, cfg.d_ff_y);
    let in_y2 = b.lin("in.y2", cfg.d_ff_y, dy);
    let blocks = (0..cfg.n_layers)
        .map(|l| {
            let p = |s: &str| format!("block{l}.{s}");
            Block {
                q: b.lin(&p("attn.q"), dx, dx),
                k: b.lin(&p("attn.k"), dx, dx),
                v: b.lin(&p("attn.v"), dx, dx),
                e_mul: b.lin(&p("attn.e_mul"), de, dx),
                e_add: b.lin(&p("attn.e_add"), de, dx),
                y_gate: b.lin(&p("attn.y_gate"), dy, h),
                y_x_mul: b.lin(&p("attn.y_x_mul"), dy, dx),
                y_x_add: b.lin(&p("attn.y_x_add"), dy, dx),
                x_out: b.lin(&p("attn.x_out"), dx, dx),
                ln_x1: b.norm(&p("x.norm1"), dx),
                ff_x1: b.lin(&p("x.ff1"), dx, cfg.d_ff_x),
                ff_x2: b.lin(&p("x.ff2"), cfg.d_ff_x, dx),
                ln_x2: b.norm(&p("x.norm2"), dx),
                y_e_mul: b.lin(&p("e.y_mul"), dy, dx),
                y_e_add: b.lin(&p("e.y_add"), dy, dx),
                e_out: b.lin(&p("e.out"), dx, de),
                ln_e1: b.norm(&p("e.norm1"), de),
                ff_e1: b.lin(&p("e.ff1"), de, cfg.d_ff_e),
                ff_e2: b.lin(&p("e.ff2"), cfg.d_ff_e, de),
                ln_e2: b.norm(&p("e.norm2"), de),
                y_y: b.lin(&p("y.self"), dy, dy),
                x_y: b.lin(&p("y.from_x"), dx, dy),
                e_y: b.lin(&p("y.from_e"), de, dy),
                ln_y1: b.norm(&p("y.norm1"), dy),
                ff_y1: b.lin(&p("y.ff1"), dy, cfg.d_ff_y),
                ff_y2: b.lin(&p("y.ff2"), cfg.d_ff_y, dy),
                ln_y2: b.norm(&p("y.norm2"), dy),
            }
        })
        .collect();
    let out1 = b.lin("out.e1", de, cfg.d_ff_e);
    let out2 = b.lin("out.e2", cfg.d_ff_e, cfg.k_classes);
    (Layout { in_x1, in_x2, in_e1, in_e2, in_y1, in_y2, blocks, out1, out2 }, b)
}

/// Parameter count for a configuration (independent of initialization).
pub fn parameter_count(cfg: &ModelConfig, alphabet: NodeAlphabet) -> usize {
    layout(cfg, alphabet).1.shapes.iter().map(|(r, c)| r * c).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel<S> {
    config: ModelConfig,
    alphabet: NodeAlphabet,
    names: Vec<String>,
    params: Vec<Tensor<S>>,
    layout: Layout,
}

impl<S: Scalar> DenoiserModel<S> {
    /// Fan-in uniform weights `U(−1/√fan_in, 1/√fan_in)`, zero biases,
    /// unit norm gains.
    pub fn new(config: ModelConfig, alphabet: NodeAlphabet, seed: u64) -> Result<Self, DenoiserError> {
        config.validate()?;
        let (lay, b) = layout(&config, alphabet);
        let mut rng = rng_from_seed(seed);
        let params = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(&(r, c), init)| {
                let data = match *init {
                    Init::Zeros => vec![S::zero(); r * c],
                    Init::Ones => vec![S::one(); r * c],
                    Init::Uniform(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..r * c).map(|_| S::of(rng.gen_range(-bound..bound))).collect()
                    }
                };
                Tensor::from_vec(r, c, data)
            })
            .collect();
        Ok(Self { layout: lay, config, alphabet, names: b.names, params })
    }

    /// Rebuilds a model from named tensors (checkpoint loading).
    pub fn from_parts(
        config: ModelConfig,
        alphabet: NodeAlphabet,
        named: Vec<(String, Tensor<S>)>,
    ) -> Result<Self, DenoiserError> {
        config.validate()?;
        let (lay, b) = layout(&config, alphabet);
        if named.len() != b.names.len() {
            return Err(DenoiserError::ShapeMismatch(format!(
                "{} tensors, configuration needs {}",
                named.len(),
                b.names.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want, &(r, c))) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || t.rows != r || t.cols != c {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "tensor `{name}` [{}×{}] where `{want}` [{r}×{c}] expected",
                    t.rows, t.cols
                )));
            }
            params.push(t);
        }
        Ok(Self { layout: lay, config, alphabet, names: b.names, params })
    }

    /// Same weights in another precision.
    pub fn cast<T: Scalar>(&self) -> DenoiserModel<T> {
        DenoiserModel {
            config: self.config.clone(),
            alphabet: self.alphabet,
            names: self.names.clone(),
            params: self
                .params
                .iter()
                .map(|t| Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|v| T::of(v.f64())).collect()))
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn alphabet(&self) -> NodeAlphabet {
        self.alphabet
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Empty batch matching this model's alphabet and class count.
    pub fn batch(&self, n: usize) -> GraphBatch<S> {
        GraphBatch::new(n, self.alphabet, self.config.k_classes)
    }

    fn check_batch(&self, batch: &GraphBatch<S>) -> Result<(), DenoiserError> {
        if batch.alphabet != self.alphabet || batch.k != self.config.k_classes {
            return Err(DenoiserError::ShapeMismatch(format!(
                "batch ({} alphabet, K={}) vs model ({} alphabet, K={})",
                batch.alphabet.name(),
                batch.k,
                self.alphabet.name(),
                self.config.k_classes
            )));
        }
        if batch.graphs == 0 || batch.n == 0 {
            return Err(DenoiserError::ShapeMismatch("empty batch".into()));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`; returns the `[G·n·n, K]` logits.
    pub fn forward_on(&self, tape: &mut Tape<S>, batch: &GraphBatch<S>) -> Result<Var, DenoiserError> {
        self.check_batch(batch)?;
        let (n, g) = (batch.n, batch.graphs);
        let cfg = &self.config;
        let p: Vec<Var> = self.params.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
        let lay = &self.layout;
        let lin = |tape: &mut Tape<S>, l: Lin, x: Var| tape.linear(x, p[l.w], p[l.b]);
        let mlp = |tape: &mut Tape<S>, a: Lin, b: Lin, x: Var| {
            let h = tape.linear(x, p[a.w], p[a.b]);
            let h = tape.relu(h);
            tape.linear(h, p[b.w], p[b.b])
        };
        let norm = |tape: &mut Tape<S>, l: Norm, x: Var| tape.layer_norm(x, p[l.g], p[l.b]);

        let x_in = tape.input(Tensor::from_vec(g * n, batch.node_width(), batch.x.clone()));
        let e_in = tape.input(Tensor::from_vec(g * n * n, batch.edge_width(), batch.e.clone()));
        let y_in = tape.input(Tensor::from_vec(g, GLOBAL_FEATURES, batch.y.clone()));
        let mut x = mlp(tape, lay.in_x1, lay.in_x2, x_in);
        let mut e = mlp(tape, lay.in_e1, lay.in_e2, e_in);
        let mut y = mlp(tape, lay.in_y1, lay.in_y2, y_in);
        let scale = S::of(1.0 / ((cfg.d_x / cfg.n_heads) as f64).sqrt());
        let nn = n * n;
        for b in &lay.blocks {
            let q = lin(tape, b.q, x);
            let k = lin(tape, b.k, x);
            let v = lin(tape, b.v, x);
            let pair = tape.pair_product(q, k, n, scale);
            let em = lin(tape, b.e_mul, e);
            let ea = lin(tape, b.e_add, e);
            let pair = tape.film(pair, em, Some(ea));
            let scores = tape.head_sum(pair, cfg.n_heads);
            let gate = lin(tape, b.y_gate, y);
            let scores = tape.film_bcast(scores, gate, None, nn);
            let attn = tape.softmax_j(scores, n);
            let u = tape.attend(attn, v, n, cfg.n_heads);
            let ym = lin(tape, b.y_x_mul, y);
            let ya = lin(tape, b.y_x_add, y);
            let u = tape.film_bcast(u, ym, Some(ya), n);
            let u = lin(tape, b.x_out, u);
            let x1 = tape.add(x, u);
            let x1 = norm(tape, b.ln_x1, x1);
            let f = mlp(tape, b.ff_x1, b.ff_x2, x1);
            let x2 = tape.add(x1, f);
            x = norm(tape, b.ln_x2, x2);

            let eym = lin(tape, b.y_e_mul, y);
            let eya = lin(tape, b.y_e_add, y);
            let pe = tape.film_bcast(pair, eym, Some(eya), nn);
            let pe = lin(tape, b.e_out, pe);
            let e1 = tape.add(e, pe);
            let e1 = norm(tape, b.ln_e1, e1);
            let f = mlp(tape, b.ff_e1, b.ff_e2, e1);
            let e2 = tape.add(e1, f);
            e = norm(tape, b.ln_e2, e2);

            let yy = lin(tape, b.y_y, y);
            let xm = tape.mean_groups(x, n);
            let yx = lin(tape, b.x_y, xm);
            let emn = tape.mean_groups(e, nn);
            let ye = lin(tape, b.e_y, emn);
            let s = tape.add(y, yy);
            let s = tape.add(s, yx);
            let s = tape.add(s, ye);
            let y1 = norm(tape, b.ln_y1, s);
            let f = mlp(tape, b.ff_y1, b.ff_y2, y1);
            let y2 = tape.add(y1, f);
            y = norm(tape, b.ln_y2, y2);
        }
        let es = tape.symmetrize(e, n);
        Ok(mlp(tape, lay.out1, lay.out2, es))
    }

    /// Logits without recording gradients.
    pub fn forward(&self, batch: &GraphBatch<S>) -> Result<Tensor<S>, DenoiserError> {
        let mut tape = Tape::new(false);
        let out = self.forward_on(&mut tape, batch)?;
        Ok(tape.value(out).clone())
    }
}

/// Per-pair targets (class index per `[G·n·n]` row) for a batch of clean edges.
pub fn pair_targets(clean: &[&EdgeTensor], n: usize) -> Vec<u8> {
    let mut t = Vec::with_capacity(clean.len() * n * n);
    for e in clean {
        for i in 0..n {
            for j in 0..n {
                t.push(e.get(i, j).index() as u8);
            }
        }
    }
    t
}

/// Mean over graphs of the mean over pairs `i < j` of the cross-entropy
/// between `softmax(logits)` and the clean class.
pub fn loss<S: Scalar>(logits: &Tensor<S>, clean: &[&EdgeTensor], n: usize) -> S {
    let mut tape = Tape::new(false);
    let l = tape.input(logits.clone());
    let out = tape.cross_entropy_upper(l, n, pair_targets(clean, n));
    tape.value(out).data[0]
}

impl FromStr for ModelConfig {
    type Err = DenoiserError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::preset(s)
    }
}
