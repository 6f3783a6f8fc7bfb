//! Deterministic toy sparse-MoE transformer.
//!
//! Architecture: token + position embedding, then `layers` blocks of
//! `x += Attn(norm(x))`, `x += MoE(norm(x))`, then `softmax(W_out norm(x))`.
//! Attention is single-head and causal; norms are parameter-free RMS norms;
//! each expert is `W_out silu(W_in h + b_in) + b_out`. All math is `f64`.
//!
//! Weights are drawn from a ChaCha8 stream seeded with `weight_seed`, scaled by
//! `weight_scale`, in this order: token embedding, position embedding, then per
//! layer `W_q, W_k, W_v, W_o`, router, and per expert `W_in, b_in, W_out, b_out`,
//! and finally the output projection. Every matrix is filled row-major.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::criteria::PruningOrder;
use crate::dist::{softmax, NextTokenDistribution};
use crate::error::{Error, Result};
use crate::Allocation;

const NORM_EPS: f64 = 1e-6;

/// Full description of a toy SMoE transformer. Models are always rebuilt from it.
///
/// `experts_per_layer` and `fanout` accept either one integer (shared by every
/// layer) or one integer per layer in JSON; they are stored expanded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    #[serde(deserialize_with = "per_layer")]
    pub experts_per_layer: Vec<usize>,
    #[serde(deserialize_with = "per_layer")]
    pub fanout: Vec<usize>,
    pub hidden_dim: usize,
    pub expert_hidden_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub weight_seed: u64,
    pub weight_scale: f64,
}

fn per_layer<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum PerLayer {
        Shared(usize),
        Each(Vec<usize>),
    }
    Ok(match PerLayer::deserialize(d)? {
        PerLayer::Shared(v) => vec![v],
        PerLayer::Each(v) => v,
    })
}

impl ModelSpec {
    /// A spec with the same expert count and fanout in every layer.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        layers: usize,
        experts: usize,
        fanout: usize,
        hidden_dim: usize,
        expert_hidden_dim: usize,
        vocab_size: usize,
        max_seq_len: usize,
        weight_seed: u64,
        weight_scale: f64,
    ) -> Self {
        Self {
            layers,
            experts_per_layer: vec![experts; layers],
            fanout: vec![fanout; layers],
            hidden_dim,
            expert_hidden_dim,
            vocab_size,
            max_seq_len,
            weight_seed,
            weight_scale,
        }
    }

    /// Parses a JSON spec, broadcasting shared per-layer values, and validates it.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut spec: ModelSpec =
            serde_json::from_str(text).map_err(|e| Error::json("model spec", e))?;
        spec.broadcast();
        spec.validate()?;
        Ok(spec)
    }

    fn broadcast(&mut self) {
        if self.experts_per_layer.len() == 1 {
            self.experts_per_layer = vec![self.experts_per_layer[0]; self.layers];
        }
        if self.fanout.len() == 1 {
            self.fanout = vec![self.fanout[0]; self.layers];
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::validation("layers", "must be at least 1"));
        }
        if self.experts_per_layer.len() != self.layers {
            return Err(Error::validation(
                "experts_per_layer",
                format!("expected {} entries, got {}", self.layers, self.experts_per_layer.len()),
            ));
        }
        if self.fanout.len() != self.layers {
            return Err(Error::validation(
                "fanout",
                format!("expected {} entries, got {}", self.layers, self.fanout.len()),
            ));
        }
        for (layer, (&n, &k)) in self.experts_per_layer.iter().zip(&self.fanout).enumerate() {
            if n == 0 {
                return Err(Error::validation(
                    "experts_per_layer",
                    format!("layer {layer} has no experts"),
                ));
            }
            if k == 0 || k > n {
                return Err(Error::validation(
                    "fanout",
                    format!("layer {layer}: fanout {k} must be in 1..={n}"),
                ));
            }
        }
        if self.hidden_dim == 0 {
            return Err(Error::validation("hidden_dim", "must be at least 1"));
        }
        if self.expert_hidden_dim == 0 {
            return Err(Error::validation("expert_hidden_dim", "must be at least 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::validation("vocab_size", "must be at least 2"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::validation("max_seq_len", "must be at least 1"));
        }
        if !(self.weight_scale.is_finite() && self.weight_scale > 0.0) {
            return Err(Error::validation(
                "weight_scale",
                format!("{} is not a positive finite number", self.weight_scale),
            ));
        }
        Ok(())
    }

    /// Per-layer pruning caps `n_l - k_l`.
    pub fn caps(&self) -> Vec<usize> {
        self.experts_per_layer
            .iter()
            .zip(&self.fanout)
            .map(|(n, k)| n.saturating_sub(*k))
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// A validated sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>, spec: &ModelSpec) -> Result<Self> {
        check_sequence(&ids, spec)?;
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_sequence(ids: &[usize], spec: &ModelSpec) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    if ids.len() > spec.max_seq_len {
        return Err(Error::Length {
            len: ids.len(),
            max: spec.max_seq_len,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= spec.vocab_size) {
        return Err(Error::validation(
            "token id",
            format!("{bad} is outside the vocabulary of size {}", spec.vocab_size),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub(crate) struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            rows,
            cols,
            data: gaussian(rows * cols, scale, rng),
        }
    }

    #[cfg(test)]
    pub(crate) fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }
}

fn gaussian(len: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
pub(crate) struct Expert {
    pub(crate) w_in: Matrix,
    pub(crate) b_in: Vec<f64>,
    pub(crate) w_out: Matrix,
    pub(crate) b_out: Vec<f64>,
}

impl Expert {
    fn forward(&self, h: &[f64]) -> Vec<f64> {
        let mut inner = self.w_in.matvec(h);
        for (v, b) in inner.iter_mut().zip(&self.b_in) {
            *v = silu(*v + b);
        }
        let mut out = self.w_out.matvec(&inner);
        for (v, b) in out.iter_mut().zip(&self.b_out) {
            *v += b;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub(crate) wq: Matrix,
    pub(crate) wk: Matrix,
    pub(crate) wv: Matrix,
    pub(crate) wo: Matrix,
    pub(crate) router: Matrix,
    pub(crate) experts: Vec<Expert>,
}

#[derive(Debug)]
pub(crate) struct Weights {
    pub(crate) token_embedding: Matrix,
    pub(crate) position_embedding: Matrix,
    pub(crate) blocks: Vec<Block>,
    pub(crate) output: Matrix,
}

impl Weights {
    fn generate(spec: &ModelSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.weight_seed);
        let s = spec.weight_scale;
        let d = spec.hidden_dim;
        let h = spec.expert_hidden_dim;
        let token_embedding = Matrix::random(spec.vocab_size, d, s, &mut rng);
        let position_embedding = Matrix::random(spec.max_seq_len, d, s, &mut rng);
        let blocks = (0..spec.layers)
            .map(|layer| {
                let wq = Matrix::random(d, d, s, &mut rng);
                let wk = Matrix::random(d, d, s, &mut rng);
                let wv = Matrix::random(d, d, s, &mut rng);
                let wo = Matrix::random(d, d, s, &mut rng);
                let n = spec.experts_per_layer[layer];
                let router = Matrix::random(n, d, s, &mut rng);
                let experts = (0..n)
                    .map(|_| Expert {
                        w_in: Matrix::random(h, d, s, &mut rng),
                        b_in: gaussian(h, s, &mut rng),
                        w_out: Matrix::random(d, h, s, &mut rng),
                        b_out: gaussian(d, s, &mut rng),
                    })
                    .collect();
                Block {
                    wq,
                    wk,
                    wv,
                    wo,
                    router,
                    experts,
                }
            })
            .collect();
        let output = Matrix::random(spec.vocab_size, d, s, &mut rng);
        Self {
            token_embedding,
            position_embedding,
            blocks,
            output,
        }
    }

    fn for_each_param(&self, mut f: impl FnMut(&[f64])) {
        f(&self.token_embedding.data);
        f(&self.position_embedding.data);
        for b in &self.blocks {
            f(&b.wq.data);
            f(&b.wk.data);
            f(&b.wv.data);
            f(&b.wo.data);
            f(&b.router.data);
            for e in &b.experts {
                f(&e.w_in.data);
                f(&e.b_in);
                f(&e.w_out.data);
                f(&e.b_out);
            }
        }
        f(&self.output.data);
    }
}

/// Expert selection and gate weights for one token at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    /// Selected experts, highest router logit first (ties: lower index first).
    pub selected: Vec<usize>,
    /// One gate per expert in the layer; zero outside `selected`.
    pub gates: Vec<f64>,
    /// Full softmax over the active experts' logits; zero for pruned experts.
    pub router_probs: Vec<f64>,
}

/// What the MoE sub-layer did for one token, reported during traced forwards.
#[derive(Debug)]
pub struct MoeEvent<'a> {
    pub layer: usize,
    /// Normalized hidden state fed to the router and experts.
    pub input: &'a [f64],
    pub routing: &'a Routing,
    /// `(expert, E_i(h))` for each selected expert, in `routing.selected` order.
    pub expert_outputs: &'a [(usize, Vec<f64>)],
}

/// A built model: shared immutable weights plus a per-layer mask of surviving experts.
#[derive(Debug, Clone)]
pub struct MoEModel {
    spec: ModelSpec,
    weights: Arc<Weights>,
    active: Vec<Vec<bool>>,
}

impl MoEModel {
    /// Builds the full model with all experts active.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let weights = Weights::generate(spec);
        Ok(Self {
            active: spec.experts_per_layer.iter().map(|&n| vec![true; n]).collect(),
            spec: spec.clone(),
            weights: Arc::new(weights),
        })
    }

    #[cfg(test)]
    pub(crate) fn from_weights(spec: ModelSpec, weights: Weights) -> Self {
        Self {
            active: spec.experts_per_layer.iter().map(|&n| vec![true; n]).collect(),
            spec,
            weights: Arc::new(weights),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn active_mask(&self) -> &[Vec<bool>] {
        &self.active
    }

    pub fn active_experts(&self, layer: usize) -> Vec<usize> {
        self.active[layer]
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    pub fn is_full(&self) -> bool {
        self.active.iter().all(|l| l.iter().all(|&a| a))
    }

    /// Hex SHA-256 over every parameter's little-endian bytes, in generation order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.weights.for_each_param(|xs| {
            for x in xs {
                hasher.update(x.to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }

    /// Top-k routing over the active experts of `layer` for a normalized hidden state.
    pub fn route(&self, layer: usize, h: &[f64]) -> Routing {
        let block = &self.weights.blocks[layer];
        let active = self.active_experts(layer);
        let logits: Vec<f64> = active.iter().map(|&i| dot(block.router.row(i), h)).collect();
        route_logits(&active, &logits, self.spec.experts_per_layer[layer], self.spec.fanout[layer])
    }

    /// Output of a single expert `E_{layer,expert}(h)`.
    pub fn expert_output(&self, layer: usize, expert: usize, h: &[f64]) -> Vec<f64> {
        self.weights.blocks[layer].experts[expert].forward(h)
    }

    /// Gate-weighted mixture of the selected experts' outputs.
    pub fn moe_forward(&self, layer: usize, h: &[f64]) -> Vec<f64> {
        let routing = self.route(layer, h);
        mix(&routing, &self.expert_outputs(layer, &routing, h), h.len())
    }

    fn expert_outputs(&self, layer: usize, routing: &Routing, h: &[f64]) -> Vec<(usize, Vec<f64>)> {
        routing
            .selected
            .iter()
            .map(|&i| (i, self.expert_output(layer, i, h)))
            .collect()
    }

    /// Next-token distributions at every position; entry `t` conditions on `seq[..=t]`.
    pub fn teacher_forced_distributions(&self, seq: &[usize]) -> Result<Vec<NextTokenDistribution>> {
        self.forward(seq, &mut |_| {})
    }

    /// Like [`Self::teacher_forced_distributions`], reporting every MoE routing decision.
    pub fn forward_traced(
        &self,
        seq: &[usize],
        observer: &mut dyn FnMut(&MoeEvent<'_>),
    ) -> Result<Vec<NextTokenDistribution>> {
        self.forward(seq, observer)
    }

    fn forward(
        &self,
        seq: &[usize],
        observer: &mut dyn FnMut(&MoeEvent<'_>),
    ) -> Result<Vec<NextTokenDistribution>> {
        check_sequence(seq, &self.spec)?;
        let w = &*self.weights;
        let d = self.spec.hidden_dim;
        let scale = 1.0 / (d as f64).sqrt();

        let mut xs: Vec<Vec<f64>> = seq
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                w.token_embedding
                    .row(id)
                    .iter()
                    .zip(w.position_embedding.row(t))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();

        for (layer, block) in w.blocks.iter().enumerate() {
            let normed: Vec<Vec<f64>> = xs.iter().map(|x| rms_norm(x)).collect();
            let q: Vec<Vec<f64>> = normed.iter().map(|a| block.wq.matvec(a)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|a| block.wk.matvec(a)).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|a| block.wv.matvec(a)).collect();
            for t in 0..xs.len() {
                let scores: Vec<f64> = (0..=t).map(|s| dot(&q[t], &k[s]) * scale).collect();
                let attn = softmax(&scores);
                let mut ctx = vec![0.0; d];
                for (s, a) in attn.iter().enumerate() {
                    for (c, vv) in ctx.iter_mut().zip(&v[s]) {
                        *c += a * vv;
                    }
                }
                for (x, o) in xs[t].iter_mut().zip(block.wo.matvec(&ctx)) {
                    *x += o;
                }
            }
            for x in xs.iter_mut() {
                let h = rms_norm(x);
                let routing = self.route(layer, &h);
                let outputs = self.expert_outputs(layer, &routing, &h);
                observer(&MoeEvent {
                    layer,
                    input: &h,
                    routing: &routing,
                    expert_outputs: &outputs,
                });
                for (xv, y) in x.iter_mut().zip(mix(&routing, &outputs, d)) {
                    *xv += y;
                }
            }
        }

        Ok(xs
            .iter()
            .map(|x| NextTokenDistribution::softmax(&w.output.matvec(&rms_norm(x))))
            .collect())
    }

    /// Returns a copy with the `r_l` least important experts of each layer removed.
    ///
    /// Pruning composes: experts already inactive in `self` stay inactive.
    pub fn apply_allocation(&self, order: &PruningOrder, alloc: &Allocation) -> Result<Self> {
        let spec = &self.spec;
        if alloc.len() != spec.layers {
            return Err(Error::Shape(format!(
                "allocation has {} layers, model has {}",
                alloc.len(),
                spec.layers
            )));
        }
        order.check_against(spec)?;
        let mut active = self.active.clone();
        for (layer, &r) in alloc.as_slice().iter().enumerate() {
            let n = spec.experts_per_layer[layer];
            let k = spec.fanout[layer];
            if r > n - k {
                return Err(Error::Feasibility(format!(
                    "layer {layer}: removing {r} of {n} experts leaves fewer than fanout {k}"
                )));
            }
            for &e in order.pruned_set(layer, r) {
                active[layer][e] = false;
            }
            if active[layer].iter().filter(|&&a| a).count() < k {
                return Err(Error::Feasibility(format!(
                    "layer {layer}: fewer than fanout {k} experts survive"
                )));
            }
        }
        Ok(Self {
            spec: self.spec.clone(),
            weights: Arc::clone(&self.weights),
            active,
        })
    }
}

/// Top-k selection and gate softmax for the given active experts' logits.
pub(crate) fn route_logits(active: &[usize], logits: &[f64], n: usize, k: usize) -> Routing {
    let mut ranked: Vec<usize> = (0..active.len()).collect();
    // stable sort keeps lower expert index first among equal logits
    ranked.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let chosen = &ranked[..k.min(ranked.len())];

    let top_max = logits[chosen[0]];
    let exps: Vec<f64> = chosen.iter().map(|&j| (logits[j] - top_max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut gates = vec![0.0; n];
    for (&j, e) in chosen.iter().zip(&exps) {
        gates[active[j]] = e / total;
    }

    let full = softmax(logits);
    let mut router_probs = vec![0.0; n];
    for (&i, p) in active.iter().zip(full) {
        router_probs[i] = p;
    }

    Routing {
        selected: chosen.iter().map(|&j| active[j]).collect(),
        gates,
        router_probs,
    }
}

fn mix(routing: &Routing, outputs: &[(usize, Vec<f64>)], d: usize) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for (i, out) in outputs {
        let g = routing.gates[*i];
        for (yv, o) in y.iter_mut().zip(out) {
            *yv += g * o;
        }
    }
    y
}
