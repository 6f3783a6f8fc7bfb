//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the report is always printed.

mod common;

use std::time::{Duration, Instant};

use moe_prune::allocation::{count_feasible, enumerate_feasible, random_allocation, uniform_allocation};
use moe_prune::criteria::calibrate_all;
use moe_prune::fitness::{esap_at_context, sap_at_context, tv_distance, DatasetFitness, Fitness};
use moe_prune::search::{brute_force_table, level_switch, run_search_with, sample_mutation_count};
use moe_prune::specdec::spec_decode;
use moe_prune::{
    Allocation, BudgetSpec, Criterion, FitnessKind, LogitCache, MoEModel, ModelSpec, Parity, PruningOrder,
    SearchConfig, SearchSample, SpecDecConfig, TokenSequence,
};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Full model, REAP order, dataset and cache for one toy instance.
struct Instance {
    model: MoEModel,
    order: PruningOrder,
    data: Vec<SearchSample>,
    cache: LogitCache,
}

impl Instance {
    fn new(spec: ModelSpec, samples: usize, data_seed: u64) -> Self {
        let model = MoEModel::build(&spec).unwrap();
        let order = common::reap_order(&model);
        let data = common::random_dataset(&spec, samples, data_seed);
        let cache = LogitCache::build(&model, &data).unwrap();
        Self {
            model,
            order,
            data,
            cache,
        }
    }

    fn esap(&self) -> DatasetFitness<'_> {
        DatasetFitness::new(&self.cache, self.model.spec(), &self.data, FitnessKind::Esap).unwrap()
    }

    fn score(&self, r: &Allocation) -> f64 {
        let cand = self.model.apply_allocation(&self.order, r).unwrap();
        self.esap().evaluate(&cand).unwrap().value
    }
}

fn tv_identity() -> Outcome {
    let mut rng = common::rng(1);
    let mut worst: f64 = 0.0;
    for v in [2, 32, 512] {
        for _ in 0..10_000 {
            let spread = rng.random_range(0.05..8.0);
            let p = common::random_distribution(v, spread, &mut rng);
            let q = common::random_distribution(v, spread, &mut rng);
            let gap = (esap_at_context(&p, &q).unwrap() + tv_distance(&p, &q).unwrap() - 1.0).abs();
            worst = worst.max(gap);
        }
    }
    outcome(worst <= 1e-12, format!("30000 pairs, max |ESAP + TV - 1| = {worst:.2e}"))
}

fn self_score() -> Outcome {
    let inst = Instance::new(common::toy_spec(7), 64, 2);
    let v = inst.esap().evaluate(&inst.model).unwrap().value;
    outcome((v - 1.0).abs() <= 1e-9, format!("64 samples, ESAP(full, full) = {v:.15}"))
}

fn sap_consistency() -> Outcome {
    let inst = Instance::new(common::toy_spec(7), 20, 3);
    let draft = inst.model.apply_allocation(&inst.order, &Allocation::new(vec![4, 2, 2, 0])).unwrap();
    let mut rng = common::rng(3);
    let draws = 100_000;
    let mut worst_z: f64 = 0.0;
    let mut failures = 0;
    for s in &inst.data {
        // one context per sample, at a random answer position
        let seq = s.concat();
        let t = s.prompt.len() - 1 + rng.random_range(0..s.answer.len());
        let p = inst.model.teacher_forced_distributions(&seq).unwrap().swap_remove(t);
        let q = draft.teacher_forced_distributions(&seq).unwrap().swap_remove(t);
        let exact = esap_at_context(&p, &q).unwrap();
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..draws {
            let x = sap_at_context(&p, &q, &mut rng).unwrap();
            sum += x;
            sq += x * x;
        }
        let n = draws as f64;
        let mean = sum / n;
        let se = ((sq / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
        let z = if se > 0.0 { (mean - exact).abs() / se } else if mean == exact { 0.0 } else { f64::INFINITY };
        worst_z = worst_z.max(z);
        if z > 3.0 {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("20 contexts x 100000 draws, max |mean - ESAP| = {worst_z:.2} SE, {failures} beyond 3 SE"),
    )
}

fn specdec_correctness() -> Outcome {
    let spec = common::toy_spec(7);
    let full = MoEModel::build(&spec).unwrap();
    let order = common::reap_order(&full);
    let draft = full.apply_allocation(&order, &Allocation::new(vec![4, 2, 2, 0])).unwrap();
    let prompt = vec![5, 17, 2, 30];
    let trials = 100_000;
    let cfg = SpecDecConfig {
        block_size: 1,
        max_new_tokens: 1,
        prompts: vec![TokenSequence::new(prompt.clone(), &spec).unwrap(); trials],
        seed: 4,
    };
    let (out, report) = spec_decode(&full, &draft, &cfg).unwrap();
    let p = full.teacher_forced_distributions(&prompt).unwrap().pop().unwrap();
    let q = draft.teacher_forced_distributions(&prompt).unwrap().pop().unwrap();

    let mut counts = vec![0.0; spec.vocab_size];
    for s in &out {
        counts[s.ids()[0]] += 1.0;
    }
    // bins with expected count below 5 are pooled
    let (mut stat, mut bins, mut pool_o, mut pool_e) = (0.0, 0usize, 0.0, 0.0);
    for (o, pv) in counts.iter().zip(p.probs()) {
        let e = pv * trials as f64;
        if e < 5.0 {
            pool_o += o;
            pool_e += e;
        } else {
            stat += (o - e).powi(2) / e;
            bins += 1;
        }
    }
    if pool_e > 0.0 {
        stat += (pool_o - pool_e).powi(2) / pool_e;
        bins += 1;
    }
    let p_value = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);

    let exact = esap_at_context(&p, &q).unwrap();
    let rate = report.acceptance_rate;
    let se = (exact * (1.0 - exact) / report.proposals as f64).sqrt();
    let z = (rate - exact).abs() / se;
    outcome(
        p_value > 0.01 && z <= 3.0 && report.proposals == trials,
        format!(
            "chi-square p = {p_value:.3} over {bins} bins; acceptance {rate:.4} vs ESAP {exact:.4} ({z:.2} SE)"
        ),
    )
}

fn mutation_soundness() -> Outcome {
    let mut rng = common::rng(5);
    let (mut total, mut violations, mut even_instances) = (0usize, 0usize, 0usize);
    for i in 0..50 {
        let mut budget = common::random_budget(&mut rng, 8, 8);
        if i % 2 == 0 && budget.parity == Parity::Any {
            // force half the instances onto the even lattice
            let caps = budget.caps.clone();
            let room: usize = caps.iter().map(|c| c / 2).sum();
            budget = BudgetSpec::new(rng.random_range(0..=room) * 2, Parity::Even, caps).unwrap();
        }
        if budget.parity == Parity::Even {
            even_instances += 1;
        }
        let cfg = SearchConfig {
            max_transfer: rng.random_range(2..=6),
            mutation_cap: rng.random_range(1..=5),
            parity: budget.parity,
            ..SearchConfig::default()
        };
        let step = budget.parity.step();
        let mut parent = random_allocation(&budget, budget.layers(), &mut rng).unwrap();
        for _ in 0..2000 {
            let child = level_switch(&parent, &budget, &cfg, &mut rng).unwrap().child;
            let r = child.as_slice();
            let ok = r.len() == budget.caps.len()
                && r.iter().sum::<usize>() == budget.budget
                && r.iter().zip(&budget.caps).all(|(v, c)| v <= c && v % step == 0);
            if !ok {
                violations += 1;
            }
            total += 1;
            parent = child;
        }
    }
    outcome(
        violations == 0 && total == 100_000 && even_instances > 0,
        format!("{total} mutations over 50 instances ({even_instances} even), {violations} violations"),
    )
}

fn tau_distribution() -> Outcome {
    let mut rng = common::rng(6);
    let mut worst: f64 = 0.0;
    for cap in [3usize, 5] {
        let mut counts = vec![0usize; cap + 1];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_mutation_count(cap, &mut rng)] += 1;
        }
        for (j, &c) in counts.iter().enumerate().skip(1) {
            let expected = (2 * (cap - j) + 1) as f64 / (cap * cap) as f64;
            worst = worst.max((c as f64 / n as f64 - expected).abs());
        }
    }
    outcome(worst <= 0.01, format!("max |empirical - exact| = {worst:.4}"))
}

/// Toy instances with between 20 and 200 feasible allocations.
fn oracle_instances() -> Vec<(Instance, BudgetSpec)> {
    let setups: [(ModelSpec, usize, Parity); 12] = [
        (common::toy_spec(1), 8, Parity::Any),
        (common::toy_spec(2), 6, Parity::Any),
        (common::toy_spec(3), 5, Parity::Any),
        (common::toy_spec(4), 10, Parity::Any),
        (ModelSpec::uniform(4, 8, 2, 16, 16, 32, 24, 5, 0.5), 8, Parity::Even),
        (common::heterogeneous_spec(6), 8, Parity::Any),
        (common::heterogeneous_spec(7), 6, Parity::Any),
        (common::heterogeneous_spec(8), 10, Parity::Any),
        (ModelSpec::uniform(3, 8, 2, 16, 16, 32, 24, 9, 0.5), 9, Parity::Any),
        (ModelSpec::uniform(4, 8, 2, 16, 16, 32, 24, 10, 0.5), 12, Parity::Even),
        (ModelSpec::uniform(5, 4, 1, 16, 16, 32, 24, 11, 0.5), 7, Parity::Any),
        (ModelSpec::uniform(5, 6, 2, 16, 16, 32, 24, 12, 0.5), 6, Parity::Even),
    ];
    setups
        .into_iter()
        .enumerate()
        .map(|(i, (spec, b, parity))| {
            let budget = BudgetSpec::for_model(&spec, b, parity).unwrap();
            (Instance::new(spec, 16, 100 + i as u64), budget)
        })
        .collect()
}

fn search_config(parity: Parity, seed: u64) -> SearchConfig {
    SearchConfig {
        parity,
        seed,
        ..SearchConfig::default()
    }
}

fn oracle_equivalence() -> Outcome {
    let instances = oracle_instances();
    let (mut exact, mut near, mut sizes) = (0, 0, Vec::new());
    for (i, (inst, budget)) in instances.iter().enumerate() {
        let size = count_feasible(budget).unwrap() as usize;
        sizes.push(size);
        if !(20..=200).contains(&size) {
            return outcome(false, format!("instance {i} has {size} feasible allocations"));
        }
        let fitness = inst.esap();
        let table = brute_force_table(&inst.model, &inst.order, budget, &fitness, 200).unwrap();
        let best = table.iter().map(|(_, f)| f.value).fold(f64::NEG_INFINITY, f64::max);

        let all = enumerate_feasible(budget, inst.model.spec().layers, 200).unwrap();
        let covering = SearchConfig {
            population_size: size,
            elite_size: 4,
            generations: 1,
            ..search_config(budget.parity, i as u64)
        };
        let run = run_search_with(&inst.model, &inst.order, budget, &covering, &fitness, Some(all)).unwrap();
        if run.best_fitness.value == best {
            exact += 1;
        }

        let random = search_config(budget.parity, 1000 + i as u64);
        let run = run_search_with(&inst.model, &inst.order, budget, &random, &fitness, None).unwrap();
        if run.best_fitness.value >= 0.99 * best {
            near += 1;
        }
    }
    let n = instances.len();
    outcome(
        exact == n && near * 10 >= 9 * n,
        format!(
            "{n} instances (feasible sizes {sizes:?}): covering start exact on {exact}/{n}, \
             random start within 1% on {near}/{n}"
        ),
    )
}

fn elitism() -> Outcome {
    let (mut runs, mut bad_monotone, mut bad_dominance) = (0, 0, 0);
    for (i, (inst, budget)) in oracle_instances().iter().enumerate().take(6) {
        for seed in 0..3u64 {
            let cfg = SearchConfig {
                population_size: 12,
                generations: 10,
                ..search_config(budget.parity, seed * 31 + i as u64)
            };
            let run = run_search_with(&inst.model, &inst.order, budget, &cfg, &inst.esap(), None).unwrap();
            runs += 1;
            if run.history.windows(2).any(|w| w[1].best < w[0].best) {
                bad_monotone += 1;
            }
            let uniform = uniform_allocation(budget, budget.layers()).unwrap();
            if run.best_fitness.value < inst.score(&uniform) {
                bad_dominance += 1;
            }
        }
    }
    outcome(
        bad_monotone == 0 && bad_dominance == 0,
        format!("{runs} runs: {bad_monotone} non-monotone histories, {bad_dominance} below uniform"),
    )
}

fn conservation() -> Outcome {
    let specs = [
        common::toy_spec(1),
        common::heterogeneous_spec(2),
        ModelSpec::uniform(3, 8, 3, 16, 16, 32, 24, 3, 0.5),
    ];
    let mut worst_seer: f64 = 0.0;
    let mut freq_ok = true;
    for (i, spec) in specs.iter().enumerate() {
        let model = MoEModel::build(spec).unwrap();
        let data = common::calibration_set(spec, 10, 20, i as u64);
        let stats = calibrate_all(&model, &data).unwrap();
        let tokens = stats.tokens() as f64;
        let freq = stats.scores(Criterion::Frequency);
        let seer = stats.scores(Criterion::Seer);
        for l in 0..spec.layers {
            freq_ok &= freq.scores[l].iter().sum::<f64>() == spec.fanout[l] as f64 * tokens;
            worst_seer = worst_seer.max((seer.scores[l].iter().sum::<f64>() - tokens).abs());
        }
    }
    outcome(
        freq_ok && worst_seer <= 1e-6,
        format!("3 models: frequency sums exact = {freq_ok}, max SEER drift = {worst_seer:.2e}"),
    )
}

fn allocation_matters() -> Outcome {
    let spec = common::heterogeneous_spec(7);
    let inst = Instance::new(spec.clone(), 16, 10);
    let budget = BudgetSpec::for_model(&spec, 8, Parity::Any).unwrap();
    let uniform = uniform_allocation(&budget, spec.layers).unwrap();
    let u = inst.score(&uniform);
    let table = brute_force_table(&inst.model, &inst.order, &budget, &inst.esap(), 1000).unwrap();
    let (best_r, best) = table.iter().max_by(|a, b| a.1.value.total_cmp(&b.1.value)).unwrap();
    let (worst_r, worst) = table.iter().min_by(|a, b| a.1.value.total_cmp(&b.1.value)).unwrap();
    let run = run_search_with(&inst.model, &inst.order, &budget, &search_config(Parity::Any, 7), &inst.esap(), None)
        .unwrap();
    let searched = run.best_fitness.value;
    let density = |r: &Allocation| {
        r.density(&spec).iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>().join("/")
    };
    outcome(
        searched > u && run.best_allocation != uniform && worst.value < u && *worst_r != uniform,
        format!(
            "fanout {:?}, B=8 over {} allocations: uniform {:?} ESAP {u:.4}; searched {:?} {searched:.4} \
             (density {}); brute-force best {:?} {:.4}; worst {:?} {:.4} (density {})",
            spec.fanout,
            table.len(),
            uniform.as_slice(),
            run.best_allocation.as_slice(),
            density(&run.best_allocation),
            best_r.as_slice(),
            best.value,
            worst_r.as_slice(),
            worst.value,
            density(worst_r),
        ),
    )
}

fn main() {
    type Check = (&'static str, Option<Duration>, fn() -> Outcome);
    let checks: [Check; 10] = [
        ("TV identity", Some(Duration::from_secs(5)), tv_identity),
        ("self-score", Some(Duration::from_secs(10)), self_score),
        ("SAP mean matches ESAP", Some(Duration::from_secs(30)), sap_consistency),
        ("speculative decoding correctness", None, specdec_correctness),
        ("mutation soundness", None, mutation_soundness),
        ("mutation count distribution", None, tau_distribution),
        ("oracle equivalence", Some(Duration::from_secs(600)), oracle_equivalence),
        ("elitism monotonicity and dominance", None, elitism),
        ("criterion conservation", None, conservation),
        ("allocation sensitivity", None, allocation_matters),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let mut o = check();
        let took = start.elapsed();
        if let Some(limit) = limit {
            if took > *limit {
                o.pass = false;
                o.detail.push_str(&format!("; over the {limit:?} runtime limit"));
            }
        }
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {name}: {} [{:.2?}]",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            took
        );
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
