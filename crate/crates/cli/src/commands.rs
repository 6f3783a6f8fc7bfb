use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use moe_prune::allocation::uniform_allocation;
use moe_prune::artifact::{
    load_dataset, load_model_spec, read_json, write_json, write_text, BudgetFile, ModelArtifact, OrderArtifact,
    Provenance, RunManifest, ScoresArtifact,
};
use moe_prune::criteria::{calibrate, make_order};
use moe_prune::fitness::{DatasetFitness, Fitness};
use moe_prune::search::{brute_force_table, run_search, run_search_with};
use moe_prune::specdec::SpecDecFitness;
use moe_prune::{
    Allocation, BudgetSpec, CalibrationSet, Error, FitnessKind, LogitCache, MoEModel, ModelSpec, Parity, PruningOrder,
    SearchConfig, SearchRun, SearchSample, SpecDecConfig, TokenSequence,
};
use serde::{Deserialize, Serialize};

use crate::lock::DirLock;
use crate::{Command, ManifestArgs, Overrides};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenModel { spec, seed, out } => gen_model(&spec, seed, &out),
        Command::Calibrate {
            model,
            data,
            criterion,
            out,
        } => {
            let spec = load_model_spec(&model)?;
            let samples = load_dataset(&data, &spec)?;
            let sequences = samples
                .iter()
                .map(|s| TokenSequence::new(s.concat(), &spec))
                .collect::<Result<Vec<_>, _>>()?;
            let set = CalibrationSet::new(data.display().to_string(), sequences);
            let full = MoEModel::build(&spec)?;
            let scores = calibrate(&full, &set, criterion)?;
            let order = make_order(&scores);
            let provenance = Provenance::new(&spec, Some(&samples));

            let _lock = DirLock::acquire(&out)?;
            write_json(
                &out.join("scores.json"),
                &ScoresArtifact {
                    provenance: provenance.clone(),
                    scores,
                },
            )?;
            write_json(
                &out.join("order.json"),
                &OrderArtifact {
                    provenance,
                    criterion,
                    pi: order.pi.clone(),
                },
            )?;
            println!("criterion {criterion}, {} calibration tokens", set.sequences.iter().map(|s| s.len()).sum::<usize>());
            for (l, perm) in order.pi.iter().enumerate() {
                println!("layer {l}: prune order {perm:?}");
            }
            Ok(())
        }
        Command::CacheLogits { model, data, out } => {
            let spec = load_model_spec(&model)?;
            let samples = load_dataset(&data, &spec)?;
            let cache = LogitCache::build(&MoEModel::build(&spec)?, &samples)?;
            let _lock = DirLock::acquire(&out)?;
            let path = out.join("logits.cache");
            cache.save(&path)?;
            let positions: usize = cache.rows.iter().map(Vec::len).sum();
            println!("cached {} samples, {positions} answer positions -> {}", cache.rows.len(), path.display());
            println!("model_spec_hash {}", cache.model_spec_hash);
            println!("dataset_hash {}", cache.dataset_hash);
            Ok(())
        }
        Command::MakeManifest(args) => make_manifest(args),
        Command::Search {
            manifest,
            overrides,
            out,
        } => search(&manifest, &overrides, out),
        Command::Evaluate {
            model,
            order,
            allocation,
            data,
            fitness,
            parity,
            seed,
            out,
        } => evaluate(&model, &order, &allocation, &data, &fitness, parity, seed, out.as_deref()),
        Command::BruteForce {
            manifest,
            limit,
            overrides,
            out,
        } => brute_force(&manifest, limit, &overrides, out),
    }
}

fn gen_model(path: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec = load_model_spec(path)?;
    if let Some(seed) = seed {
        spec.weight_seed = seed;
    }
    let artifact = ModelArtifact::new(spec)?;
    let _lock = DirLock::acquire(out)?;
    write_json(&out.join("model.json"), &artifact)?;
    println!("model_spec_hash {}", artifact.model_spec_hash);
    println!("weight_sha256 {}", artifact.weight_sha256);
    Ok(())
}

/// `path` relative to `base` when it lies below it, otherwise absolute.
fn relative_to(path: &Path, base: &Path) -> Result<PathBuf> {
    let abs = std::fs::canonicalize(path).map_err(|e| Error::io(format!("resolving {}", path.display()), e))?;
    Ok(abs.strip_prefix(base).map(Path::to_path_buf).unwrap_or(abs))
}

fn make_manifest(args: ManifestArgs) -> Result<()> {
    let dir = match args.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let base = std::fs::canonicalize(&dir).map_err(|e| Error::io(format!("resolving {}", dir.display()), e))?;
    let cache = args.cache.as_deref().map(|c| relative_to(c, &base)).transpose()?;
    let manifest = RunManifest::create(
        &base,
        relative_to(&args.model, &base)?,
        relative_to(&args.data, &base)?,
        args.criterion,
        relative_to(&args.order, &base)?,
        relative_to(&args.budget, &base)?,
        relative_to(&args.config, &base)?,
        args.output_dir,
        cache,
    )?;
    write_json(&args.out, &manifest)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Inputs named by a manifest, loaded and cross-checked.
struct Loaded {
    manifest: RunManifest,
    spec: ModelSpec,
    data: Vec<SearchSample>,
    order: PruningOrder,
    budget: BudgetSpec,
    config: SearchConfig,
    model: MoEModel,
}

fn load_manifest(path: &Path, overrides: &Overrides) -> Result<Loaded> {
    let manifest = RunManifest::load(path)?;
    let at = |p: &Path| manifest.resolve(p);
    let spec = load_model_spec(&at(&manifest.model_spec))?;
    let data = load_dataset(&at(&manifest.dataset), &spec)?;
    let order_file: OrderArtifact = read_json(&at(&manifest.order))?;
    if order_file.criterion != manifest.criterion {
        return Err(Error::validation(
            "criterion",
            format!("manifest names {} but the order file was built with {}", manifest.criterion, order_file.criterion),
        )
        .into());
    }
    let order = order_file.order_for(&spec)?;

    let mut budget_file: BudgetFile = read_json(&at(&manifest.budget))?;
    let mut config: SearchConfig = read_json(&at(&manifest.search_config))?;
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(kind) = overrides.fitness {
        config.fitness = kind;
    }
    if let Some(parity) = overrides.parity {
        config.parity = parity;
        budget_file.parity = parity;
    }
    config.validate()?;
    let budget = budget_file.resolve(&spec)?;
    if budget.parity != config.parity {
        return Err(Error::validation(
            "parity",
            format!("budget file says {:?}, search config says {:?}", budget.parity, config.parity),
        )
        .into());
    }
    let model = MoEModel::build(&spec)?;
    Ok(Loaded {
        manifest,
        spec,
        data,
        order,
        budget,
        config,
        model,
    })
}

impl Loaded {
    fn cache(&self) -> Result<LogitCache> {
        match &self.manifest.cache {
            Some(p) => {
                let cache = LogitCache::load(&self.manifest.resolve(p))?;
                cache.check(&self.spec, &self.data)?;
                Ok(cache)
            }
            None => Ok(LogitCache::build(&self.model, &self.data)?),
        }
    }

    fn specdec(&self, seed: u64) -> SpecDecFitness<'_> {
        let prompts = self.data.iter().map(|s| s.prompt.clone()).collect();
        SpecDecFitness {
            target: &self.model,
            config: SpecDecConfig::new(prompts, seed),
        }
    }

    fn out_dir(&self, out: Option<PathBuf>) -> PathBuf {
        out.unwrap_or_else(|| self.manifest.resolve(&self.manifest.output_dir))
    }

    fn provenance(&self) -> Provenance {
        Provenance::new(&self.spec, Some(&self.data))
    }
}

#[derive(Serialize, Deserialize)]
struct RunArtifact {
    provenance: Provenance,
    /// Hashes of the manifest inputs, keyed by field name.
    inputs: std::collections::BTreeMap<String, String>,
    run: SearchRun,
}

fn search(path: &Path, overrides: &Overrides, out: Option<PathBuf>) -> Result<()> {
    let l = load_manifest(path, overrides)?;
    let run = if l.config.fitness == FitnessKind::SpecDec {
        let fitness = l.specdec(l.config.seed);
        run_search_with(&l.model, &l.order, &l.budget, &l.config, &fitness, None)?
    } else {
        let cache = l.cache()?;
        run_search(&l.model, &l.order, &l.budget, &l.data, &cache, &l.config)?
    };

    let dir = l.out_dir(out);
    let _lock = DirLock::acquire(&dir)?;
    write_json(
        &dir.join("run.json"),
        &RunArtifact {
            provenance: l.provenance(),
            inputs: l.manifest.hashes.clone(),
            run: run.clone(),
        },
    )?;
    write_json(&dir.join("best_allocation.json"), run.best_allocation.as_slice())?;
    let mut log = run.log_lines().join("\n");
    log.push('\n');
    write_text(&dir.join("run_log.jsonl"), &log)?;
    write_text(&dir.join("density.csv"), &density_csv(&l.spec, &run.best_allocation))?;

    println!(
        "best {} fitness {:.6} after {} generations ({} evaluations)",
        run.config.fitness,
        run.best_fitness.value,
        run.config.generations,
        run.evaluations
    );
    print!("{}", density_table(&l.spec, &run.best_allocation));
    Ok(())
}

fn density_csv(spec: &ModelSpec, r: &Allocation) -> String {
    let mut s = String::from("layer,experts,fanout,pruned,density\n");
    for (l, d) in r.density(spec).iter().enumerate() {
        let _ = writeln!(s, "{l},{},{},{},{d:.6}", spec.experts_per_layer[l], spec.fanout[l], r.as_slice()[l]);
    }
    s
}

fn density_table(spec: &ModelSpec, r: &Allocation) -> String {
    let mut s = String::from("layer  experts  pruned  density\n");
    for (l, d) in r.density(spec).iter().enumerate() {
        let _ = writeln!(s, "{l:>5}  {:>7}  {:>6}  {d:>7.3}", spec.experts_per_layer[l], r.as_slice()[l]);
    }
    s
}

/// Accepts a bare JSON array or an object with a `best_allocation` field, such as `run.json`.
fn read_allocation(path: &Path) -> Result<Allocation> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum AllocationFile {
        Plain(Vec<usize>),
        Run { run: RunBest },
    }
    #[derive(Deserialize)]
    struct RunBest {
        best_allocation: Vec<usize>,
    }
    Ok(match read_json::<AllocationFile>(path)? {
        AllocationFile::Plain(r) => Allocation::new(r),
        AllocationFile::Run { run } => Allocation::new(run.best_allocation),
    })
}

#[derive(Serialize)]
struct EvalRow {
    fitness: FitnessKind,
    allocation: f64,
    uniform: f64,
}

#[derive(Serialize)]
struct EvalReport {
    provenance: Provenance,
    allocation: Allocation,
    uniform: Allocation,
    rows: Vec<EvalRow>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    model: &Path,
    order: &Path,
    allocation: &Path,
    data: &Path,
    kinds: &[FitnessKind],
    parity: Parity,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let spec = load_model_spec(model)?;
    let samples = load_dataset(data, &spec)?;
    let order = read_json::<OrderArtifact>(order)?.order_for(&spec)?;
    let r = read_allocation(allocation)?;
    let budget = BudgetSpec::for_model(&spec, r.total(), parity)?;
    let uniform = uniform_allocation(&budget, spec.layers)?;

    let full = MoEModel::build(&spec)?;
    let candidate = full
        .apply_allocation(&order, &r)
        .with_context(|| format!("applying allocation {:?}", r.as_slice()))?;
    let baseline = full.apply_allocation(&order, &uniform)?;
    let cache = if kinds.iter().any(|k| *k != FitnessKind::SpecDec) {
        Some(LogitCache::build(&full, &samples)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    for &kind in kinds {
        let score = |m: &MoEModel| -> Result<f64> {
            Ok(if kind == FitnessKind::SpecDec {
                let prompts = samples.iter().map(|s| s.prompt.clone()).collect();
                let f = SpecDecFitness {
                    target: &full,
                    config: SpecDecConfig::new(prompts, seed),
                };
                f.evaluate(m)?.value
            } else {
                let cache = cache.as_ref().expect("cache built for dataset kinds");
                DatasetFitness::new(cache, &spec, &samples, kind)?
                    .with_sap_seed(seed)
                    .evaluate(m)?
                    .value
            })
        };
        rows.push(EvalRow {
            fitness: kind,
            allocation: score(&candidate)?,
            uniform: score(&baseline)?,
        });
    }

    println!("allocation {:?}  uniform {:?}", r.as_slice(), uniform.as_slice());
    println!("{:<8}  {:>12}  {:>12}", "fitness", "allocation", "uniform");
    for row in &rows {
        println!("{:<8}  {:>12.6}  {:>12.6}", row.fitness.to_string(), row.allocation, row.uniform);
    }
    if let Some(dir) = out {
        let _lock = DirLock::acquire(dir)?;
        write_json(
            &dir.join("evaluate.json"),
            &EvalReport {
                provenance: Provenance::new(&spec, Some(&samples)),
                allocation: r,
                uniform,
                rows,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BruteForceRow {
    allocation: Allocation,
    fitness: f64,
}

#[derive(Serialize)]
struct BruteForceReport {
    provenance: Provenance,
    inputs: std::collections::BTreeMap<String, String>,
    fitness: FitnessKind,
    budget: BudgetSpec,
    best: BruteForceRow,
    table: Vec<BruteForceRow>,
}

fn brute_force(path: &Path, limit: usize, overrides: &Overrides, out: Option<PathBuf>) -> Result<()> {
    let l = load_manifest(path, overrides)?;
    let table = if l.config.fitness == FitnessKind::SpecDec {
        brute_force_table(&l.model, &l.order, &l.budget, &l.specdec(l.config.seed), limit)?
    } else {
        let cache = l.cache()?;
        let fitness = DatasetFitness::new(&cache, &l.spec, &l.data, l.config.fitness)?.with_sap_seed(l.config.seed);
        brute_force_table(&l.model, &l.order, &l.budget, &fitness, limit)?
    };
    let Some(best) = table
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.1.value.total_cmp(&b.1.value).then(j.cmp(i)))
        .map(|(_, (a, f))| BruteForceRow {
            allocation: a.clone(),
            fitness: f.value,
        })
    else {
        bail!(Error::Feasibility("feasible set is empty".into()));
    };

    println!("{} feasible allocations under {}", table.len(), l.config.fitness);
    for (a, f) in &table {
        println!("{:?}  {:.6}", a.as_slice(), f.value);
    }
    println!("best {:?}  {:.6}", best.allocation.as_slice(), best.fitness);

    let dir = l.out_dir(out);
    let _lock = DirLock::acquire(&dir)?;
    write_json(
        &dir.join("brute_force.json"),
        &BruteForceReport {
            provenance: l.provenance(),
            inputs: l.manifest.hashes.clone(),
            fitness: l.config.fitness,
            budget: l.budget.clone(),
            best,
            table: table
                .into_iter()
                .map(|(allocation, f)| BruteForceRow {
                    allocation,
                    fitness: f.value,
                })
                .collect(),
        },
    )?;
    Ok(())
}
