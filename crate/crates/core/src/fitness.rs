//! Teacher-forced fitness functions comparing a pruned candidate with the full model.
//!
//! Every score is computed at the answer positions of prompt/answer pairs, averaged
//! within each sample and then across samples, so each sample carries equal weight.
//! The headline score is ESAP, the expected single-token speculative acceptance
//! `sum_v min(p(v), q(v))`, which equals `1 - TV(p, q)`.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dist::NextTokenDistribution;
use crate::error::{Error, Result};
use crate::model::{MoEModel, ModelSpec, TokenSequence};

/// Probabilities are clamped here before taking logs.
pub const LOG_FLOOR: f64 = 1e-300;

/// Seed used for SAP draws when the caller does not supply one.
pub const DEFAULT_SAP_SEED: u64 = 0x5a9;

/// One prompt/answer pair of the search set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSample {
    pub prompt: TokenSequence,
    pub answer: TokenSequence,
}

impl SearchSample {
    pub fn new(prompt: Vec<usize>, answer: Vec<usize>) -> Self {
        Self {
            prompt: TokenSequence(prompt),
            answer: TokenSequence(answer),
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Data("sample prompt is empty".into()));
        }
        if self.answer.is_empty() {
            return Err(Error::Data("sample answer is empty".into()));
        }
        TokenSequence::new(self.concat(), spec).map(|_| ())
    }

    /// `prompt ‖ answer`.
    pub fn concat(&self) -> Vec<usize> {
        let mut ids = self.prompt.0.clone();
        ids.extend_from_slice(&self.answer.0);
        ids
    }
}

/// Positions of the concatenated sequence whose next token belongs to the answer.
pub fn answer_contexts(sample: &SearchSample) -> Result<Vec<usize>> {
    let (u, a) = (sample.prompt.len(), sample.answer.len());
    if a == 0 {
        return Err(Error::Data("sample answer is empty".into()));
    }
    if u == 0 {
        return Err(Error::Data("sample prompt is empty".into()));
    }
    Ok((u - 1..u + a - 1).collect())
}

/// Hex SHA-256 over the canonical JSON-lines encoding of a dataset.
pub fn dataset_hash(samples: &[SearchSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(serde_json::to_vec(s).expect("samples serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Speculative acceptance probability `min(1, p / q)` of a proposed token.
pub fn acceptance_prob(p: f64, q: f64) -> Result<f64> {
    if q.is_nan() || q <= 0.0 {
        return Err(Error::UndefinedProposal(0));
    }
    if p.is_nan() || p < 0.0 {
        return Err(Error::validation("p", format!("{p} is not a probability")));
    }
    Ok((p / q).min(1.0))
}

fn same_vocab(p: &NextTokenDistribution, q: &NextTokenDistribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "vocabulary sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// Closed-form expected acceptance `sum_v min(p(v), q(v))`.
pub fn esap_at_context(p: &NextTokenDistribution, q: &NextTokenDistribution) -> Result<f64> {
    same_vocab(p, q)?;
    Ok(p.probs().iter().zip(q.probs()).map(|(a, b)| a.min(*b)).sum())
}

/// Total-variation distance `1/2 sum_v |p(v) - q(v)|`.
pub fn tv_distance(p: &NextTokenDistribution, q: &NextTokenDistribution) -> Result<f64> {
    same_vocab(p, q)?;
    Ok(0.5 * p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// One Monte-Carlo acceptance draw: sample `y ~ q` and return `min(1, p(y)/q(y))`.
pub fn sap_at_context<R: rand::Rng + ?Sized>(
    p: &NextTokenDistribution,
    q: &NextTokenDistribution,
    rng: &mut R,
) -> Result<f64> {
    same_vocab(p, q)?;
    let y = q.sample(rng);
    let (py, qy) = (p.probs()[y], q.probs()[y]);
    if qy <= 0.0 {
        return Err(Error::UndefinedProposal(y));
    }
    Ok((py / qy).min(1.0))
}

/// `KL(p || q)` with probabilities floored at [`LOG_FLOOR`].
pub fn kl_divergence(p: &NextTokenDistribution, q: &NextTokenDistribution) -> Result<f64> {
    same_vocab(p, q)?;
    Ok(p.probs()
        .iter()
        .zip(q.probs())
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.max(LOG_FLOOR).ln() - b.max(LOG_FLOOR).ln()))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitnessKind {
    Esap,
    Sap,
    Kl,
    Nll,
    #[serde(rename = "specdec")]
    SpecDec,
}

impl FitnessKind {
    pub fn name(self) -> &'static str {
        match self {
            FitnessKind::Esap => "esap",
            FitnessKind::Sap => "sap",
            FitnessKind::Kl => "kl",
            FitnessKind::Nll => "nll",
            FitnessKind::SpecDec => "specdec",
        }
    }

    fn is_probability(self) -> bool {
        matches!(self, FitnessKind::Esap | FitnessKind::Sap | FitnessKind::SpecDec)
    }
}

impl std::fmt::Display for FitnessKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FitnessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "esap" => Ok(FitnessKind::Esap),
            "sap" => Ok(FitnessKind::Sap),
            "kl" => Ok(FitnessKind::Kl),
            "nll" => Ok(FitnessKind::Nll),
            "specdec" | "spec-dec" => Ok(FitnessKind::SpecDec),
            other => Err(Error::validation("fitness", format!("unknown fitness {other:?}"))),
        }
    }
}

/// A fitness score; higher is better for every kind. KL and NLL are stored negated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessValue {
    pub value: f64,
    pub kind: FitnessKind,
}

impl FitnessValue {
    pub fn new(value: f64, kind: FitnessKind) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::validation("fitness", format!("{kind} value {value} is not finite")));
        }
        // allow rounding slack around the closed interval
        let ok = if kind.is_probability() {
            (-1e-12..=1.0 + 1e-12).contains(&value)
        } else {
            value <= 1e-12
        };
        if !ok {
            return Err(Error::validation("fitness", format!("{kind} value {value} out of range")));
        }
        Ok(Self { value, kind })
    }
}

/// Anything that can score a pruned candidate. Must be deterministic for a given candidate.
pub trait Fitness: Sync {
    fn kind(&self) -> FitnessKind;
    fn evaluate(&self, candidate: &MoEModel) -> Result<FitnessValue>;
}

/// Full-model next-token distributions at every answer position of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCache {
    pub model_spec_hash: String,
    pub dataset_hash: String,
    pub vocab_size: usize,
    /// `rows[i][j]`: distribution at the `j`-th answer position of sample `i`.
    pub rows: Vec<Vec<NextTokenDistribution>>,
}

const CACHE_MAGIC: &[u8; 8] = b"LGTCACH1";

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    model_spec_hash: String,
    dataset_hash: String,
    vocab_size: usize,
    samples: usize,
    positions: Vec<usize>,
    payload_sha256: String,
}

impl LogitCache {
    /// Teacher-forces the full model over every sample and keeps the answer-position rows.
    pub fn build(full: &MoEModel, dataset: &[SearchSample]) -> Result<Self> {
        if !full.is_full() {
            return Err(Error::validation("model", "the logit cache must come from the unpruned model"));
        }
        let spec = full.spec();
        let rows = dataset
            .par_iter()
            .map(|s| {
                s.validate(spec)?;
                let mut dists = full.teacher_forced_distributions(&s.concat())?;
                let ctx = answer_contexts(s)?;
                Ok(ctx.iter().map(|&t| std::mem::replace(&mut dists[t], placeholder())).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            model_spec_hash: spec.hash(),
            dataset_hash: dataset_hash(dataset),
            vocab_size: spec.vocab_size,
            rows,
        })
    }

    /// Refuses a cache built for a different model spec or dataset.
    pub fn check(&self, spec: &ModelSpec, dataset: &[SearchSample]) -> Result<()> {
        let spec_hash = spec.hash();
        if self.model_spec_hash != spec_hash {
            return Err(Error::Staleness(format!(
                "logit cache was built for model spec {}, not {spec_hash}",
                self.model_spec_hash
            )));
        }
        let data_hash = dataset_hash(dataset);
        if self.dataset_hash != data_hash {
            return Err(Error::Staleness(format!(
                "logit cache was built for dataset {}, not {data_hash}",
                self.dataset_hash
            )));
        }
        if self.vocab_size != spec.vocab_size {
            return Err(Error::Shape(format!(
                "cache vocabulary {} vs model vocabulary {}",
                self.vocab_size, spec.vocab_size
            )));
        }
        if self.rows.len() != dataset.len() {
            return Err(Error::Coverage(format!(
                "{} samples (cache holds {})",
                dataset.len(),
                self.rows.len()
            )));
        }
        for (i, (rows, s)) in self.rows.iter().zip(dataset).enumerate() {
            if rows.len() != s.answer.len() {
                return Err(Error::Coverage(format!(
                    "sample {i}: {} answer positions (cache holds {})",
                    s.answer.len(),
                    rows.len()
                )));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut payload = Vec::with_capacity(self.rows.iter().map(Vec::len).sum::<usize>() * self.vocab_size * 8);
        for d in self.rows.iter().flatten() {
            for p in d.probs() {
                payload.extend_from_slice(&p.to_le_bytes());
            }
        }
        let header = CacheHeader {
            model_spec_hash: self.model_spec_hash.clone(),
            dataset_hash: self.dataset_hash.clone(),
            vocab_size: self.vocab_size,
            samples: self.rows.len(),
            positions: self.rows.iter().map(Vec::len).collect(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::json("cache header", e))?;
        let io = |e| Error::io("writing logit cache", e);
        w.write_all(CACHE_MAGIC).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        w.write_all(&payload).map_err(io)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e| Error::io("reading logit cache", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::validation("logit cache", "not a logit cache file"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(io)?;
        let header: CacheHeader =
            serde_json::from_slice(&header).map_err(|e| Error::json("logit cache header", e))?;
        if header.positions.len() != header.samples {
            return Err(Error::validation("logit cache", "position counts disagree with sample count"));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(io)?;
        let expected = header.positions.iter().sum::<usize>() * header.vocab_size * 8;
        if payload.len() != expected {
            return Err(Error::validation(
                "logit cache",
                format!("payload is {} bytes, header implies {expected}", payload.len()),
            ));
        }
        if hex::encode(Sha256::digest(&payload)) != header.payload_sha256 {
            return Err(Error::Staleness("logit cache payload does not match its recorded hash".into()));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut rows = Vec::with_capacity(header.samples);
        for &n in &header.positions {
            let mut sample = Vec::with_capacity(n);
            for _ in 0..n {
                let probs: Vec<f64> = values.by_ref().take(header.vocab_size).collect();
                sample.push(NextTokenDistribution::new(probs)?);
            }
            rows.push(sample);
        }
        Ok(Self {
            model_spec_hash: header.model_spec_hash,
            dataset_hash: header.dataset_hash,
            vocab_size: header.vocab_size,
            rows,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn placeholder() -> NextTokenDistribution {
    NextTokenDistribution::softmax(&[0.0])
}

/// Dataset-level fitness against a cached full model.
pub struct DatasetFitness<'a> {
    cache: &'a LogitCache,
    dataset: &'a [SearchSample],
    kind: FitnessKind,
    sap_seed: u64,
}

impl<'a> DatasetFitness<'a> {
    /// Checks the cache against `spec` and `dataset` once, up front.
    pub fn new(cache: &'a LogitCache, spec: &ModelSpec, dataset: &'a [SearchSample], kind: FitnessKind) -> Result<Self> {
        if kind == FitnessKind::SpecDec {
            return Err(Error::validation(
                "fitness",
                "specdec is measured by decoding, not from a logit cache",
            ));
        }
        if dataset.is_empty() {
            return Err(Error::Data("search dataset is empty".into()));
        }
        cache.check(spec, dataset)?;
        Ok(Self {
            cache,
            dataset,
            kind,
            sap_seed: DEFAULT_SAP_SEED,
        })
    }

    /// Seed for SAP proposal draws; each sample uses its own ChaCha stream.
    pub fn with_sap_seed(mut self, seed: u64) -> Self {
        self.sap_seed = seed;
        self
    }

    /// Mean score at each sample's answer positions.
    pub fn per_sample(&self, candidate: &MoEModel) -> Result<Vec<f64>> {
        let spec_hash = candidate.spec().hash();
        if spec_hash != self.cache.model_spec_hash {
            return Err(Error::Staleness(format!(
                "candidate spec {spec_hash} does not match cache spec {}",
                self.cache.model_spec_hash
            )));
        }
        self.dataset
            .par_iter()
            .enumerate()
            .map(|(i, sample)| {
                let seq = sample.concat();
                let dists = candidate.teacher_forced_distributions(&seq)?;
                let ctx = answer_contexts(sample)?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.sap_seed);
                rng.set_stream(i as u64);
                let mut total = 0.0;
                for (j, &t) in ctx.iter().enumerate() {
                    let p = &self.cache.rows[i][j];
                    let q = &dists[t];
                    total += match self.kind {
                        FitnessKind::Esap => esap_at_context(p, q)?,
                        FitnessKind::Sap => sap_at_context(p, q, &mut rng)?,
                        FitnessKind::Kl => -kl_divergence(p, q)?,
                        FitnessKind::Nll => q.probs()[seq[t + 1]].max(LOG_FLOOR).ln(),
                        FitnessKind::SpecDec => unreachable!("rejected in DatasetFitness::new"),
                    };
                }
                Ok(total / ctx.len() as f64)
            })
            .collect()
    }
}

impl Fitness for DatasetFitness<'_> {
    fn kind(&self) -> FitnessKind {
        self.kind
    }

    fn evaluate(&self, candidate: &MoEModel) -> Result<FitnessValue> {
        let per_sample = self.per_sample(candidate)?;
        let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        FitnessValue::new(mean, self.kind)
    }
}

/// Dataset fitness of `candidate` against the full model's cached distributions.
pub fn dataset_fitness(
    full_cache: &LogitCache,
    candidate: &MoEModel,
    dataset: &[SearchSample],
    kind: FitnessKind,
) -> Result<FitnessValue> {
    DatasetFitness::new(full_cache, candidate.spec(), dataset, kind)?.evaluate(candidate)
}
