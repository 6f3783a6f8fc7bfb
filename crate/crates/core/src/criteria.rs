//! Expert importance criteria and per-layer pruning orders.
//!
//! All four criteria come from one traced forward pass over the calibration set:
//!
//! - `Frequency`: number of tokens that selected the expert.
//! - `Seer`: soft count, the sum over all tokens of the expert's full-softmax router probability.
//! - `Ean`: mean `||E_i(h)||_2` over the tokens that selected the expert.
//! - `Reap`: mean `g_i(h) * ||E_i(h)||_2` over the tokens that selected the expert.
//!
//! `Ean` and `Reap` are zero for experts that were never selected.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MoEModel, ModelSpec, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Frequency,
    Seer,
    Ean,
    Reap,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::Frequency,
        Criterion::Seer,
        Criterion::Ean,
        Criterion::Reap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Frequency => "frequency",
            Criterion::Seer => "seer",
            Criterion::Ean => "ean",
            Criterion::Reap => "reap",
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frequency" => Ok(Criterion::Frequency),
            "seer" => Ok(Criterion::Seer),
            "ean" => Ok(Criterion::Ean),
            "reap" => Ok(Criterion::Reap),
            other => Err(Error::validation("criterion", format!("unknown criterion {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub name: String,
    pub sequences: Vec<TokenSequence>,
}

impl CalibrationSet {
    pub fn new(name: impl Into<String>, sequences: Vec<TokenSequence>) -> Self {
        Self {
            name: name.into(),
            sequences,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScores")]
pub struct ImportanceScores {
    pub criterion: Criterion,
    /// Routed token-layer events, i.e. tokens times layers.
    pub token_count: u64,
    pub scores: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawScores {
    criterion: Criterion,
    token_count: u64,
    scores: Vec<Vec<f64>>,
}

impl TryFrom<RawScores> for ImportanceScores {
    type Error = Error;

    fn try_from(raw: RawScores) -> Result<Self> {
        Self::new(raw.criterion, raw.token_count, raw.scores)
    }
}

impl ImportanceScores {
    pub fn new(criterion: Criterion, token_count: u64, scores: Vec<Vec<f64>>) -> Result<Self> {
        if token_count == 0 {
            return Err(Error::validation("token_count", "must be positive"));
        }
        for (layer, row) in scores.iter().enumerate() {
            if let Some(j) = row.iter().position(|s| !s.is_finite()) {
                return Err(Error::validation(
                    "scores",
                    format!("layer {layer} expert {j} has non-finite score {}", row[j]),
                ));
            }
        }
        Ok(Self {
            criterion,
            token_count,
            scores,
        })
    }

    /// Tokens routed through each layer.
    pub fn tokens_per_layer(&self) -> u64 {
        self.token_count / self.scores.len().max(1) as u64
    }
}

/// Per-layer permutations of expert indices, least important first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawOrder")]
pub struct PruningOrder {
    pub pi: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
struct RawOrder {
    pi: Vec<Vec<usize>>,
}

impl TryFrom<RawOrder> for PruningOrder {
    type Error = Error;

    fn try_from(raw: RawOrder) -> Result<Self> {
        Self::new(raw.pi)
    }
}

impl PruningOrder {
    pub fn new(pi: Vec<Vec<usize>>) -> Result<Self> {
        for (layer, perm) in pi.iter().enumerate() {
            let mut seen = vec![false; perm.len()];
            for &e in perm {
                if e >= perm.len() || std::mem::replace(&mut seen[e], true) {
                    return Err(Error::validation(
                        "pi",
                        format!("layer {layer} is not a permutation of 0..{}", perm.len()),
                    ));
                }
            }
        }
        Ok(Self { pi })
    }

    /// The identity order in every layer.
    pub fn identity(spec: &ModelSpec) -> Self {
        Self {
            pi: spec.experts_per_layer.iter().map(|&n| (0..n).collect()).collect(),
        }
    }

    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        if self.pi.len() != spec.layers {
            return Err(Error::Shape(format!(
                "pruning order covers {} layers, model has {}",
                self.pi.len(),
                spec.layers
            )));
        }
        for (layer, (perm, &n)) in self.pi.iter().zip(&spec.experts_per_layer).enumerate() {
            if perm.len() != n {
                return Err(Error::Shape(format!(
                    "pruning order for layer {layer} has {} experts, model has {n}",
                    perm.len()
                )));
            }
        }
        Ok(())
    }

    /// The first `r` experts of layer `layer`'s order.
    pub fn pruned_set(&self, layer: usize, r: usize) -> &[usize] {
        &self.pi[layer][..r]
    }
}

/// Stable ascending sort of each layer's scores; equal scores keep lower index first.
pub fn make_order(scores: &ImportanceScores) -> PruningOrder {
    let pi = scores
        .scores
        .iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
            idx
        })
        .collect();
    PruningOrder { pi }
}

#[derive(Debug, Clone)]
struct Tally {
    tokens: u64,
    selected: Vec<Vec<u64>>,
    soft: Vec<Vec<f64>>,
    norm_sum: Vec<Vec<f64>>,
    gated_norm_sum: Vec<Vec<f64>>,
}

impl Tally {
    fn zero(spec: &ModelSpec) -> Self {
        let zeros = || -> Vec<Vec<f64>> { spec.experts_per_layer.iter().map(|&n| vec![0.0; n]).collect() };
        Self {
            tokens: 0,
            selected: spec.experts_per_layer.iter().map(|&n| vec![0; n]).collect(),
            soft: zeros(),
            norm_sum: zeros(),
            gated_norm_sum: zeros(),
        }
    }

    fn merge(mut self, other: &Tally) -> Self {
        self.tokens += other.tokens;
        for l in 0..self.selected.len() {
            for j in 0..self.selected[l].len() {
                self.selected[l][j] += other.selected[l][j];
                self.soft[l][j] += other.soft[l][j];
                self.norm_sum[l][j] += other.norm_sum[l][j];
                self.gated_norm_sum[l][j] += other.gated_norm_sum[l][j];
            }
        }
        self
    }
}

/// Scores every expert of a fully active model on `data` under `criterion`.
pub fn calibrate(model: &MoEModel, data: &CalibrationSet, criterion: Criterion) -> Result<ImportanceScores> {
    Ok(calibrate_all(model, data)?.scores(criterion))
}

/// Raw per-expert statistics from one calibration pass, from which any criterion can be read.
#[derive(Debug, Clone)]
pub struct CalibrationStats {
    layers: usize,
    tally: Tally,
}

/// Runs the calibration forward pass once and keeps the statistics for every criterion.
pub fn calibrate_all(model: &MoEModel, data: &CalibrationSet) -> Result<CalibrationStats> {
    if !model.is_full() {
        return Err(Error::validation("model", "calibration requires the unpruned model"));
    }
    if data.sequences.is_empty() {
        return Err(Error::Data(format!("calibration set {:?} is empty", data.name)));
    }
    let spec = model.spec();
    let partials: Vec<Tally> = data
        .sequences
        .par_iter()
        .map(|seq| {
            let mut t = Tally::zero(spec);
            t.tokens = seq.len() as u64;
            model.forward_traced(seq.ids(), &mut |ev| {
                let l = ev.layer;
                for (j, p) in ev.routing.router_probs.iter().enumerate() {
                    t.soft[l][j] += p;
                }
                for (e, out) in ev.expert_outputs {
                    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
                    t.selected[l][*e] += 1;
                    t.norm_sum[l][*e] += norm;
                    t.gated_norm_sum[l][*e] += ev.routing.gates[*e] * norm;
                }
            })?;
            Ok(t)
        })
        .collect::<Result<_>>()?;
    // fixed fold order keeps the sums reproducible regardless of thread count
    let tally = partials.iter().fold(Tally::zero(spec), Tally::merge);
    Ok(CalibrationStats {
        layers: spec.layers,
        tally,
    })
}

impl CalibrationStats {
    pub fn tokens(&self) -> u64 {
        self.tally.tokens
    }

    pub fn scores(&self, criterion: Criterion) -> ImportanceScores {
        let t = &self.tally;
        let mean = |sums: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            sums.iter()
                .zip(&t.selected)
                .map(|(row, counts)| {
                    row.iter()
                        .zip(counts)
                        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                        .collect()
                })
                .collect()
        };
        let scores = match criterion {
            Criterion::Frequency => t
                .selected
                .iter()
                .map(|row| row.iter().map(|&c| c as f64).collect())
                .collect(),
            Criterion::Seer => t.soft.clone(),
            Criterion::Ean => mean(&t.norm_sum),
            Criterion::Reap => mean(&t.gated_norm_sum),
        };
        ImportanceScores::new(criterion, t.tokens * self.layers as u64, scores)
            .expect("calibration statistics are finite and non-empty")
    }
}
