//! Small decoder-only transformer with named, per-layer, per-module
//! activation sites (attention Q/K/V/O, MLP-in, MLP-out).
//!
//! A "neuron" is one output channel of a named module site, per token.
//! Residual-stream channels are not separate neurons (they duplicate module
//! outputs), but the post-block residual stream is capturable for the
//! logit-lens probe.

mod checkpoint;
mod forward;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    eval_logits, eval_logits_nudged, forward_on_tape, greedy_decode, seq_logprob_var,
    sequence_prob, teacher_forced_match, CaptureSet, ForwardOut, Nudge,
};
pub use train::{batch_grads, pairs_accuracy, pretrain, PretrainLog, PretrainSettings};

use std::collections::BTreeMap;

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};

pub const LOGP_UNDERFLOW_FLOOR: f64 = -700.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale default: minutes-scale CPU runs while leaving six
        // module sites per layer for the variation grids.
        ModelConfig {
            num_layers: 4,
            d_model: 128,
            num_heads: 4,
            d_ff: 512,
            vocab_size: 512,
            max_seq_len: 32,
            init_seed: 0,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.d_model == 0
            || self.num_heads == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// The six capturable module kinds of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpIn,
    MlpOut,
}

pub const MODULE_KINDS: [ModuleKind; 6] = [
    ModuleKind::AttnQ,
    ModuleKind::AttnK,
    ModuleKind::AttnV,
    ModuleKind::AttnO,
    ModuleKind::MlpIn,
    ModuleKind::MlpOut,
];

impl ModuleKind {
    pub fn label(&self) -> &'static str {
        match self {
            ModuleKind::AttnQ => "attn-Q",
            ModuleKind::AttnK => "attn-K",
            ModuleKind::AttnV => "attn-V",
            ModuleKind::AttnO => "attn-O",
            ModuleKind::MlpIn => "mlp-in",
            ModuleKind::MlpOut => "mlp-out",
        }
    }

    /// Number of scalar channels this module exposes per token.
    pub fn units(&self, cfg: &ModelConfig) -> usize {
        match self {
            ModuleKind::MlpIn => cfg.d_ff,
            _ => cfg.d_model,
        }
    }
}

impl std::fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Uniquely addresses one scalar channel of one activation site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub kind: ModuleKind,
    pub unit: usize,
}

/// Capturable activation sites. Module outputs carry the neurons;
/// post-block residual streams exist for the logit-lens probe only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CaptureSite {
    Module { layer: usize, kind: ModuleKind },
    Resid { layer: usize },
}

impl std::fmt::Display for CaptureSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CaptureSite::Module { layer, kind } => write!(f, "layer{layer}/{kind}"),
            CaptureSite::Resid { layer } => write!(f, "layer{layer}/resid"),
        }
    }
}

/// Fixed iteration order over all neurons of a config: layer-major, then
/// module kind in `MODULE_KINDS` order, then unit.
pub fn neuron_count(cfg: &ModelConfig) -> usize {
    cfg.num_layers * MODULE_KINDS.iter().map(|k| k.units(cfg)).sum::<usize>()
}

pub fn neuron_ids(cfg: &ModelConfig) -> Vec<NeuronId> {
    let mut out = Vec::with_capacity(neuron_count(cfg));
    for layer in 0..cfg.num_layers {
        for kind in MODULE_KINDS {
            for unit in 0..kind.units(cfg) {
                out.push(NeuronId { layer, kind, unit });
            }
        }
    }
    out
}

/// Offset of `(layer, kind)`'s first unit in the flat neuron order.
pub fn neuron_offset(cfg: &ModelConfig, layer: usize, kind: ModuleKind) -> usize {
    let per_layer: usize = MODULE_KINDS.iter().map(|k| k.units(cfg)).sum();
    let mut off = layer * per_layer;
    for k in MODULE_KINDS {
        if k == kind {
            break;
        }
        off += k.units(cfg);
    }
    off
}

/// Immutable parameter snapshot. Training always works on a private copy.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// Fixed parameter schema derived from the config, in name order.
pub fn param_schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut schema = Vec::new();
    schema.push(("embed".to_string(), vec![cfg.vocab_size, cfg.d_model]));
    schema.push(("pos".to_string(), vec![cfg.max_seq_len, cfg.d_model]));
    for l in 0..cfg.num_layers {
        let p = |name: &str| format!("layer{l:02}.{name}");
        schema.push((p("ln1.g"), vec![cfg.d_model]));
        schema.push((p("ln1.b"), vec![cfg.d_model]));
        schema.push((p("wq"), vec![cfg.d_model, cfg.d_model]));
        schema.push((p("wk"), vec![cfg.d_model, cfg.d_model]));
        schema.push((p("wv"), vec![cfg.d_model, cfg.d_model]));
        schema.push((p("wo"), vec![cfg.d_model, cfg.d_model]));
        schema.push((p("ln2.g"), vec![cfg.d_model]));
        schema.push((p("ln2.b"), vec![cfg.d_model]));
        schema.push((p("w1"), vec![cfg.d_model, cfg.d_ff]));
        schema.push((p("w2"), vec![cfg.d_ff, cfg.d_model]));
    }
    schema.push(("final.g".to_string(), vec![cfg.d_model]));
    schema.push(("final.b".to_string(), vec![cfg.d_model]));
    if !cfg.tie_embeddings {
        schema.push(("unembed".to_string(), vec![cfg.vocab_size, cfg.d_model]));
    }
    schema.sort_by(|a, b| a.0.cmp(&b.0));
    schema
}

impl ModelSnapshot {
    /// Seeded Gaussian init (std 0.02) for projections and embeddings,
    /// identity affine for the layer norms.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::subseed(config.init_seed, "model-init"));
        let mut params = BTreeMap::new();
        for (name, shape) in param_schema(&config) {
            let numel: usize = shape.iter().product();
            let t = if name.ends_with(".g") {
                Tensor::new(shape, vec![1.0; numel])?
            } else if name.ends_with(".b") {
                Tensor::new(shape, vec![0.0; numel])?
            } else {
                let data: Vec<f64> = (0..numel)
                    .map(|_| {
                        let z: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                        0.02 * z
                    })
                    .collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, t);
        }
        Ok(ModelSnapshot { config, params, step: 0 })
    }

    /// All-zero parameters: every next-token distribution is exactly
    /// uniform. Useful as a reference point in tests.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut snap = ModelSnapshot::init(config)?;
        for (name, t) in snap.params.iter_mut() {
            let fill = if name.ends_with(".g") { 1.0 } else { 0.0 };
            for v in t.data_mut() {
                *v = fill;
            }
        }
        Ok(snap)
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    /// Structural compatibility: identical parameter names and shapes.
    /// The init seed is irrelevant to the schema.
    pub fn same_schema(&self, other: &ModelSnapshot) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
            && self.config.num_layers == other.config.num_layers
            && self.config.d_model == other.config.d_model
            && self.config.num_heads == other.config.num_heads
            && self.config.d_ff == other.config.d_ff
            && self.config.vocab_size == other.config.vocab_size
            && self.config.max_seq_len == other.config.max_seq_len
            && self.config.tie_embeddings == other.config.tie_embeddings
    }
}

/// Flat view over the parameter map, in name order. Gradients, optimizer
/// state and parameter-level attributions all share this layout.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn of(cfg: &ModelConfig) -> Self {
        let schema = param_schema(cfg);
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut offsets = Vec::new();
        let mut total = 0usize;
        for (n, s) in schema {
            let numel: usize = s.iter().product();
            names.push(n);
            shapes.push(s);
            offsets.push(total);
            total += numel;
        }
        ParamLayout { names, shapes, offsets, total }
    }

    pub fn flatten(&self, snap: &ModelSnapshot) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        for (i, name) in self.names.iter().enumerate() {
            let t = &snap.params[name];
            out[self.offsets[i]..self.offsets[i] + t.numel()].copy_from_slice(t.data());
        }
        out
    }

    pub fn write_back(&self, snap: &mut ModelSnapshot, flat: &[f64]) {
        for (i, name) in self.names.iter().enumerate() {
            let t = snap.params.get_mut(name).expect("schema name");
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[self.offsets[i]..self.offsets[i] + n]);
        }
    }

    pub fn slice<'a>(&self, flat: &'a [f64], i: usize) -> &'a [f64] {
        let n: usize = self.shapes[i].iter().product();
        &flat[self.offsets[i]..self.offsets[i] + n]
    }
}

/// Named tape leaves for every parameter of a snapshot.
pub struct ParamVars {
    pub vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn insert(tape: &mut Tape, snap: &ModelSnapshot, requires_grad: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in &snap.params {
            // Parameters are validated when created or updated; skip the
            // per-insert finiteness scan on this hot path.
            vars.insert(name.clone(), tape.leaf_trusted(t.clone(), requires_grad));
        }
        Ok(ParamVars { vars })
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Gradients of all parameters as one flat vector in layout order.
    /// Parameters never touched by the graph contribute zeros.
    pub fn grads_flat(&self, tape: &Tape, layout: &ParamLayout) -> Vec<f64> {
        let mut out = vec![0.0; layout.total];
        self.accum_grads_flat(tape, layout, &mut out);
        out
    }

    /// Adds this tape's parameter gradients into an existing flat buffer.
    pub fn accum_grads_flat(&self, tape: &Tape, layout: &ParamLayout, out: &mut [f64]) {
        for (i, name) in layout.names.iter().enumerate() {
            if let Some(g) = tape.grad(self.vars[name]) {
                let dst = &mut out[layout.offsets[i]..layout.offsets[i] + g.len()];
                for (o, x) in dst.iter_mut().zip(g) {
                    *o += x;
                }
            }
        }
    }
}
