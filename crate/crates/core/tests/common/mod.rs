#![allow(dead_code)]

use moe_prune::criteria::{calibrate, make_order};
use moe_prune::{
    BudgetSpec, CalibrationSet, Criterion, MoEModel, ModelSpec, NextTokenDistribution, PruningOrder, SearchSample,
    TokenSequence,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const VOCAB: usize = 32;
pub const MAX_LEN: usize = 24;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Four layers of six experts with top-2 routing.
pub fn toy_spec(seed: u64) -> ModelSpec {
    ModelSpec::uniform(4, 6, 2, 16, 16, VOCAB, MAX_LEN, seed, 0.5)
}

/// Same shape as [`toy_spec`] but with fanout 1, 2, 3, 2 across layers, so caps differ.
pub fn heterogeneous_spec(seed: u64) -> ModelSpec {
    let mut spec = toy_spec(seed);
    spec.fanout = vec![1, 2, 3, 2];
    spec.validate().unwrap();
    spec
}

pub fn random_tokens<R: Rng>(len: usize, vocab: usize, rng: &mut R) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Samples with prompts of 2..=6 tokens and answers of 1..=4 tokens.
pub fn random_dataset(spec: &ModelSpec, count: usize, seed: u64) -> Vec<SearchSample> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let u = r.random_range(2..=6);
            let a = r.random_range(1..=4);
            SearchSample::new(random_tokens(u, spec.vocab_size, &mut r), random_tokens(a, spec.vocab_size, &mut r))
        })
        .collect()
}

pub fn calibration_set(spec: &ModelSpec, count: usize, len: usize, seed: u64) -> CalibrationSet {
    let mut r = rng(seed);
    let seqs = (0..count)
        .map(|_| TokenSequence::new(random_tokens(len, spec.vocab_size, &mut r), spec).unwrap())
        .collect();
    CalibrationSet::new("random", seqs)
}

pub fn reap_order(model: &MoEModel) -> PruningOrder {
    let data = calibration_set(model.spec(), 8, 12, 99);
    make_order(&calibrate(model, &data, Criterion::Reap).unwrap())
}

/// Softmax of Gaussian logits; `spread` controls how peaked the result is.
pub fn random_distribution<R: Rng>(vocab: usize, spread: f64, rng: &mut R) -> NextTokenDistribution {
    let logits: Vec<f64> = (0..vocab)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            spread * z
        })
        .collect();
    NextTokenDistribution::softmax(&logits)
}

/// Random caps, layer count and parity with a budget drawn from the feasible range.
pub fn random_budget<R: Rng>(rng: &mut R, max_layers: usize, max_cap: usize) -> BudgetSpec {
    let layers = rng.random_range(2..=max_layers);
    let caps: Vec<usize> = (0..layers).map(|_| rng.random_range(0..=max_cap)).collect();
    let parity = if rng.random_bool(0.5) {
        moe_prune::Parity::Even
    } else {
        moe_prune::Parity::Any
    };
    let step = parity.step();
    let room: usize = caps.iter().map(|c| c / step).sum();
    let budget = rng.random_range(0..=room) * step;
    BudgetSpec::new(budget, parity, caps).unwrap()
}
