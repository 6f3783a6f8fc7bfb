//! Population search over feasible allocations with budget-preserving mutation.
//!
//! Each generation keeps the `m` fittest members (ties: earlier member first) and
//! refills the population with mutated copies of uniformly chosen elites. The
//! mutation composes `tau = min(U{1..tau_max}, U{1..tau_max})` level switches,
//! each moving `delta` units of pruning from one layer to another. Fitness is
//! memoized by allocation, so duplicate offspring cost nothing.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{
    count_feasible, enumerate_feasible, is_feasible, patterned_allocations, random_allocation, uniform_allocation,
    Allocation, BudgetSpec, Parity,
};
use crate::criteria::PruningOrder;
use crate::error::{Error, Result};
use crate::fitness::{DatasetFitness, Fitness, FitnessKind, FitnessValue, LogitCache, SearchSample};
use crate::model::MoEModel;

/// Attempts to find a feasible `(a, b, delta)` before a single switch is skipped.
pub const SWITCH_ATTEMPTS: usize = 1000;

/// Number of structured seeds (uniform plus three patterns) placed ahead of random members.
pub const STRUCTURED_SEEDS: usize = 4;

const DISTINCT_ATTEMPTS: usize = 64;

/// Search hyperparameters; omitted JSON fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub population_size: usize,
    pub elite_size: usize,
    pub generations: usize,
    pub max_transfer: usize,
    pub mutation_cap: usize,
    pub seed: u64,
    pub parity: Parity,
    pub fitness: FitnessKind,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population_size: 32,
            elite_size: 4,
            generations: 20,
            max_transfer: 4,
            mutation_cap: 3,
            seed: 42,
            parity: Parity::Any,
            fitness: FitnessKind::Esap,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.elite_size == 0 || self.elite_size > self.population_size {
            return Err(Error::validation(
                "elite_size",
                format!("must be in 1..={} (population_size)", self.population_size),
            ));
        }
        if self.max_transfer == 0 {
            return Err(Error::validation("max_transfer", "must be at least 1"));
        }
        if self.mutation_cap == 0 {
            return Err(Error::validation("mutation_cap", "must be at least 1"));
        }
        if self.max_transfer < self.parity.step() {
            return Err(Error::validation(
                "max_transfer",
                "even parity needs a maximum transfer of at least 2",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub allocation: Allocation,
    pub fitness: Option<FitnessValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub members: Vec<Member>,
    pub generation: usize,
}

impl Population {
    fn from_allocations(allocs: Vec<Allocation>) -> Self {
        Self {
            members: allocs
                .into_iter()
                .map(|allocation| Member {
                    allocation,
                    fitness: None,
                })
                .collect(),
            generation: 0,
        }
    }

    pub fn allocations(&self) -> impl Iterator<Item = &Allocation> {
        self.members.iter().map(|m| &m.allocation)
    }

    /// Indices of the `m` fittest evaluated members, earlier members first on ties.
    fn top(&self, m: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.members.len()).collect();
        idx.sort_by(|&a, &b| score(&self.members[b]).total_cmp(&score(&self.members[a])));
        idx.truncate(m);
        idx
    }
}

fn score(m: &Member) -> f64 {
    m.fitness.map_or(f64::NEG_INFINITY, |f| f.value)
}

/// Uniform seed, distinct patterned seeds, then random feasible members.
pub fn init_population<R: Rng + ?Sized>(
    budget: &BudgetSpec,
    layers: usize,
    config: &SearchConfig,
    rng: &mut R,
) -> Result<Population> {
    if config.population_size < STRUCTURED_SEEDS {
        return Err(Error::validation(
            "population_size",
            format!("must be at least {STRUCTURED_SEEDS} to hold the structured seeds"),
        ));
    }
    let feasible = count_feasible(budget).unwrap_or(u128::MAX);
    let mut members = vec![uniform_allocation(budget, layers)?];
    for seed in patterned_allocations(budget, layers)? {
        if !members.contains(&seed) {
            members.push(seed);
        }
    }
    while members.len() < config.population_size {
        let mut candidate = random_allocation(budget, layers, rng)?;
        if (members.len() as u128) < feasible {
            for _ in 0..DISTINCT_ATTEMPTS {
                if !members.contains(&candidate) {
                    break;
                }
                candidate = random_allocation(budget, layers, rng)?;
            }
        }
        members.push(candidate);
    }
    Ok(Population::from_allocations(members))
}

/// Mutation count `min(U{1..cap}, U{1..cap})`.
pub fn sample_mutation_count<R: Rng + ?Sized>(cap: usize, rng: &mut R) -> usize {
    let a = rng.random_range(1..=cap);
    let b = rng.random_range(1..=cap);
    a.min(b)
}

/// Moves `delta` pruning units from layer `b` to layer `a`, if the result stays feasible.
pub fn apply_switch(parent: &Allocation, a: usize, b: usize, delta: usize, budget: &BudgetSpec) -> Option<Allocation> {
    let r = parent.as_slice();
    if a == b || a >= r.len() || b >= r.len() || !delta.is_multiple_of(budget.step()) {
        return None;
    }
    if r[b] < delta || r[a] + delta > budget.caps[a] {
        return None;
    }
    let mut child = parent.clone();
    child.as_mut_slice()[a] += delta;
    child.as_mut_slice()[b] -= delta;
    Some(child)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mutation {
    pub child: Allocation,
    /// Sampled mutation count `tau`.
    pub steps: usize,
    /// Switches abandoned after [`SWITCH_ATTEMPTS`] infeasible draws.
    pub skipped: usize,
}

/// Composes `tau` feasible level switches on `parent`.
pub fn level_switch<R: Rng + ?Sized>(
    parent: &Allocation,
    budget: &BudgetSpec,
    config: &SearchConfig,
    rng: &mut R,
) -> Result<Mutation> {
    let layers = parent.len();
    if layers < 2 {
        return Err(Error::Structure(layers));
    }
    let step = budget.step();
    let max_units = config.max_transfer / step;
    if max_units == 0 {
        return Err(Error::validation("max_transfer", "smaller than the parity step"));
    }
    let steps = sample_mutation_count(config.mutation_cap, rng);
    let mut child = parent.clone();
    let mut skipped = 0;
    for _ in 0..steps {
        let mut applied = false;
        for _ in 0..SWITCH_ATTEMPTS {
            let a = rng.random_range(0..layers);
            let mut b = rng.random_range(0..layers - 1);
            if b >= a {
                b += 1;
            }
            let delta = rng.random_range(1..=max_units) * step;
            if let Some(next) = apply_switch(&child, a, b, delta, budget) {
                child = next;
                applied = true;
                break;
            }
        }
        if !applied {
            skipped += 1;
        }
    }
    Ok(Mutation { child, steps, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    /// Best fitness seen in any generation so far.
    pub best: f64,
    /// Mean fitness of this generation's population.
    pub mean: f64,
    /// Best fitness within this generation's population.
    pub population_best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRun {
    pub config: SearchConfig,
    pub budget: BudgetSpec,
    pub history: Vec<GenerationRecord>,
    pub best_allocation: Allocation,
    pub best_fitness: FitnessValue,
    /// Distinct allocations whose fitness was computed.
    pub evaluations: usize,
    pub mutations: usize,
    pub skipped_switches: usize,
}

impl SearchRun {
    /// One JSON object per generation.
    pub fn log_lines(&self) -> Vec<String> {
        self.history
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize"))
            .collect()
    }
}

struct Evaluator<'a> {
    model: &'a MoEModel,
    order: &'a PruningOrder,
    fitness: &'a dyn Fitness,
    memo: HashMap<Allocation, FitnessValue>,
}

impl Evaluator<'_> {
    fn fill(&mut self, population: &mut Population) -> Result<()> {
        let mut pending: Vec<&Allocation> = Vec::new();
        for m in &population.members {
            if m.fitness.is_none() && !self.memo.contains_key(&m.allocation) && !pending.contains(&&m.allocation) {
                pending.push(&m.allocation);
            }
        }
        let scored: Vec<(Allocation, FitnessValue)> = pending
            .par_iter()
            .map(|a| {
                let candidate = self.model.apply_allocation(self.order, a)?;
                Ok(((*a).clone(), self.fitness.evaluate(&candidate)?))
            })
            .collect::<Result<_>>()?;
        self.memo.extend(scored);
        for m in &mut population.members {
            if m.fitness.is_none() {
                m.fitness = Some(self.memo[&m.allocation]);
            }
        }
        Ok(())
    }
}

fn record(generation: usize, best: f64, population: &Population) -> GenerationRecord {
    let scores: Vec<f64> = population.members.iter().map(score).collect();
    GenerationRecord {
        generation,
        best,
        mean: scores.iter().sum::<f64>() / scores.len() as f64,
        population_best: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Searches allocations with dataset fitness against a cached full model.
pub fn run_search(
    model: &MoEModel,
    order: &PruningOrder,
    budget: &BudgetSpec,
    dataset: &[SearchSample],
    cache: &LogitCache,
    config: &SearchConfig,
) -> Result<SearchRun> {
    let fitness = DatasetFitness::new(cache, model.spec(), dataset, config.fitness)?.with_sap_seed(config.seed);
    run_search_with(model, order, budget, config, &fitness, None)
}

/// Searches allocations under any fitness, optionally starting from a given population.
///
/// `initial`, when given, must hold exactly `population_size` feasible allocations.
pub fn run_search_with(
    model: &MoEModel,
    order: &PruningOrder,
    budget: &BudgetSpec,
    config: &SearchConfig,
    fitness: &dyn Fitness,
    initial: Option<Vec<Allocation>>,
) -> Result<SearchRun> {
    config.validate()?;
    budget.validate()?;
    let spec = model.spec();
    order.check_against(spec)?;
    if budget.layers() != spec.layers {
        return Err(Error::Shape(format!(
            "budget covers {} layers, model has {}",
            budget.layers(),
            spec.layers
        )));
    }
    if budget.caps != spec.caps() {
        return Err(Error::validation("caps", "budget caps differ from the model's n - k"));
    }
    if budget.parity != config.parity {
        return Err(Error::validation("parity", "search config and budget disagree on parity"));
    }
    if fitness.kind() != config.fitness {
        return Err(Error::validation(
            "fitness",
            format!("config asks for {} but the evaluator computes {}", config.fitness, fitness.kind()),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut population = match initial {
        Some(allocs) => {
            if allocs.len() != config.population_size {
                return Err(Error::validation(
                    "initial population",
                    format!("has {} members, population_size is {}", allocs.len(), config.population_size),
                ));
            }
            if let Some(bad) = allocs.iter().find(|a| !is_feasible(a, budget)) {
                return Err(Error::Feasibility(format!("initial member {:?} is infeasible", bad.as_slice())));
            }
            Population::from_allocations(allocs)
        }
        None => init_population(budget, spec.layers, config, &mut rng)?,
    };

    let mut eval = Evaluator {
        model,
        order,
        fitness,
        memo: HashMap::new(),
    };
    eval.fill(&mut population)?;
    let first = population.top(1)[0];
    let mut best = population.members[first].clone();
    let mut history = vec![record(0, score(&best), &population)];
    let mut mutations = 0;
    let mut skipped_switches = 0;

    for t in 0..config.generations {
        let elites: Vec<Member> = population
            .top(config.elite_size)
            .into_iter()
            .map(|i| population.members[i].clone())
            .collect();
        let mut next = elites.clone();
        while next.len() < config.population_size {
            let parent = &elites[rng.random_range(0..elites.len())].allocation;
            let child = if spec.layers < 2 {
                parent.clone()
            } else {
                let m = level_switch(parent, budget, config, &mut rng)?;
                skipped_switches += m.skipped;
                m.child
            };
            mutations += 1;
            next.push(Member {
                allocation: child,
                fitness: None,
            });
        }
        population = Population {
            members: next,
            generation: t + 1,
        };
        eval.fill(&mut population)?;
        let top = &population.members[population.top(1)[0]];
        if score(top) > score(&best) {
            best = top.clone();
        }
        history.push(record(t + 1, score(&best), &population));
    }

    Ok(SearchRun {
        config: config.clone(),
        budget: budget.clone(),
        history,
        best_fitness: best.fitness.expect("best member was evaluated"),
        best_allocation: best.allocation,
        evaluations: eval.memo.len(),
        mutations,
        skipped_switches,
    })
}

/// Fitness of every feasible allocation, in lexicographic order.
pub fn brute_force_table(
    model: &MoEModel,
    order: &PruningOrder,
    budget: &BudgetSpec,
    fitness: &dyn Fitness,
    limit: usize,
) -> Result<Vec<(Allocation, FitnessValue)>> {
    let all = enumerate_feasible(budget, model.spec().layers, limit)?;
    all.into_par_iter()
        .map(|a| {
            let candidate = model.apply_allocation(order, &a)?;
            let f = fitness.evaluate(&candidate)?;
            Ok((a, f))
        })
        .collect()
}

/// Exhaustive argmax over the feasible set; ties go to the lexicographically first allocation.
pub fn brute_force_best(
    model: &MoEModel,
    order: &PruningOrder,
    budget: &BudgetSpec,
    fitness: &dyn Fitness,
    limit: usize,
) -> Result<(Allocation, FitnessValue)> {
    let table = brute_force_table(model, order, budget, fitness, limit)?;
    let mut best: Option<(Allocation, FitnessValue)> = None;
    for (a, f) in table {
        if best.as_ref().is_none_or(|(_, b)| f.value > b.value) {
            best = Some((a, f));
        }
    }
    best.ok_or_else(|| Error::Feasibility("feasible set is empty".into()))
}
