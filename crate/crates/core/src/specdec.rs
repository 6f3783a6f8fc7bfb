//! Speculative decoding with a pruned draft and the full target model.
//!
//! Each round the draft samples up to `block_size` tokens from `q`; the target
//! scores them in one teacher-forced pass and accepts each with probability
//! `min(1, p/q)`. The first rejected token is replaced by a draw from the residual
//! `norm(max(0, p - q))`; if every token is accepted, one bonus token is drawn
//! from `p`. Emitted tokens are therefore distributed exactly as target sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::sample_index;
use crate::error::{Error, Result};
use crate::fitness::{Fitness, FitnessKind, FitnessValue};
use crate::model::{MoEModel, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecDecConfig {
    pub block_size: usize,
    pub max_new_tokens: usize,
    pub prompts: Vec<TokenSequence>,
    pub seed: u64,
}

impl SpecDecConfig {
    pub fn new(prompts: Vec<TokenSequence>, seed: u64) -> Self {
        Self {
            block_size: 4,
            max_new_tokens: 64,
            prompts,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::validation("block_size", "must be at least 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::validation("max_new_tokens", "must be at least 1"));
        }
        if self.prompts.is_empty() {
            return Err(Error::Data("no prompts to decode".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptReport {
    pub prompt: usize,
    pub proposals: usize,
    pub accepted: usize,
    pub residual_resamples: usize,
    pub generated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub proposals: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub residual_resamples: usize,
    pub per_prompt: Vec<PromptReport>,
}

/// Outcome of verifying one drafted token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    /// Rejected; `token` was drawn from the residual, or from `p` when the residual is empty.
    Replaced { token: usize, from_residual: bool },
}

/// Accepts draft token `y` with probability `min(1, p[y]/q[y])`, else draws a replacement
/// from `norm(max(0, p - q))`.
pub fn verify_proposal<R: Rng + ?Sized>(p: &[f64], q: &[f64], y: usize, rng: &mut R) -> Verdict {
    let u: f64 = rng.random();
    if u < p[y] / q[y] {
        return Verdict::Accepted;
    }
    let residual: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    if residual.iter().sum::<f64>() > 0.0 {
        Verdict::Replaced {
            token: sample_index(&residual, rng),
            from_residual: true,
        }
    } else {
        Verdict::Replaced {
            token: sample_index(p, rng),
            from_residual: false,
        }
    }
}

fn decode_one(
    target: &MoEModel,
    draft: &MoEModel,
    prompt: &[usize],
    config: &SpecDecConfig,
    rng: &mut ChaCha8Rng,
    report: &mut PromptReport,
) -> Result<Vec<usize>> {
    let max_len = target.spec().max_seq_len;
    let mut seq = prompt.to_vec();
    while report.generated < config.max_new_tokens && seq.len() < max_len {
        let base = seq.len();
        let k = config
            .block_size
            .min(config.max_new_tokens - report.generated)
            .min(max_len - base);

        let mut block = seq.clone();
        let mut q_rows = Vec::with_capacity(k);
        for _ in 0..k {
            let q = draft
                .teacher_forced_distributions(&block)?
                .pop()
                .expect("non-empty context");
            block.push(q.sample(rng));
            q_rows.push(q);
        }
        let p_rows = target.teacher_forced_distributions(&block)?;

        let mut all_accepted = true;
        for (j, q) in q_rows.iter().enumerate() {
            let y = block[base + j];
            report.proposals += 1;
            match verify_proposal(p_rows[base - 1 + j].probs(), q.probs(), y, rng) {
                Verdict::Accepted => {
                    report.accepted += 1;
                    seq.push(y);
                    report.generated += 1;
                }
                Verdict::Replaced { token, from_residual } => {
                    if from_residual {
                        report.residual_resamples += 1;
                    }
                    seq.push(token);
                    report.generated += 1;
                    all_accepted = false;
                    break;
                }
            }
        }
        if all_accepted && report.generated < config.max_new_tokens && seq.len() < max_len {
            seq.push(sample_index(p_rows[base + k - 1].probs(), rng));
            report.generated += 1;
        }
    }
    Ok(seq.split_off(prompt.len()))
}

/// Decodes every prompt speculatively; returns the generated continuations and acceptance tallies.
pub fn spec_decode(
    target: &MoEModel,
    draft: &MoEModel,
    config: &SpecDecConfig,
) -> Result<(Vec<TokenSequence>, AcceptanceReport)> {
    config.validate()?;
    let (ts, ds) = (target.spec(), draft.spec());
    if ts.vocab_size != ds.vocab_size || ts.max_seq_len != ds.max_seq_len {
        return Err(Error::Shape("target and draft disagree on vocabulary or max length".into()));
    }
    let results: Vec<(Vec<usize>, PromptReport)> = config
        .prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let prompt = TokenSequence::new(prompt.0.clone(), ts)?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let mut report = PromptReport {
                prompt: i,
                ..PromptReport::default()
            };
            let out = decode_one(target, draft, prompt.ids(), config, &mut rng, &mut report)?;
            Ok((out, report))
        })
        .collect::<Result<_>>()?;

    let (generated, per_prompt): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let proposals = per_prompt.iter().map(|r| r.proposals).sum();
    let accepted = per_prompt.iter().map(|r| r.accepted).sum();
    let report = AcceptanceReport {
        proposals,
        accepted,
        acceptance_rate: if proposals == 0 { 0.0 } else { accepted as f64 / proposals as f64 },
        residual_resamples: per_prompt.iter().map(|r| r.residual_resamples).sum(),
        per_prompt,
    };
    Ok((generated.into_iter().map(TokenSequence).collect(), report))
}

/// Measured speculative acceptance rate of `draft` against `target`.
pub fn specdec_fitness(target: &MoEModel, draft: &MoEModel, config: &SpecDecConfig) -> Result<FitnessValue> {
    let (_, report) = spec_decode(target, draft, config)?;
    if report.proposals == 0 {
        return Err(Error::Data("speculative decoding made no proposals (prompts fill max_seq_len)".into()));
    }
    FitnessValue::new(report.acceptance_rate, FitnessKind::SpecDec)
}

/// Speculative acceptance as a search fitness: the candidate drafts for `target`.
pub struct SpecDecFitness<'a> {
    pub target: &'a MoEModel,
    pub config: SpecDecConfig,
}

impl Fitness for SpecDecFitness<'_> {
    fn kind(&self) -> FitnessKind {
        FitnessKind::SpecDec
    }

    fn evaluate(&self, candidate: &MoEModel) -> Result<FitnessValue> {
        specdec_fitness(self.target, candidate, &self.config)
    }
}
