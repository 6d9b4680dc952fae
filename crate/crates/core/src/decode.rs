//! Greedy and beam-search decoding over any next-token scorer.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::model::Model;
use crate::tensor::Matrix;

/// Next-token log-probabilities given a prefix that starts with BOS.
pub trait StepScorer {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[u32]) -> Result<Vec<f64>>> StepScorer for F {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Upper bound on generated tokens, EOS included.
    pub max_steps: usize,
    /// Rank finished hypotheses by score per generated token.
    pub length_norm: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 3,
            max_steps: 64,
            length_norm: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::config("beam", "must be at least 1"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without BOS and EOS.
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities, EOS included when emitted.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn score(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.log_prob / self.steps().max(1) as f64
        } else {
            self.log_prob
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Higher score first, then lexicographically smaller tokens.
fn rank(a: (&[u32], f64), b: (&[u32], f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

pub fn greedy_decode(scorer: &mut impl StepScorer, max_steps: usize) -> Result<Hypothesis> {
    let mut prefix = vec![BOS];
    let mut log_prob = 0.0;
    for _ in 0..max_steps {
        let lp = scorer.log_probs(&prefix)?;
        let next = argmax(&lp);
        log_prob += lp[next];
        if next as u32 == EOS {
            return Ok(Hypothesis {
                tokens: prefix[1..].to_vec(),
                log_prob,
                finished: true,
            });
        }
        prefix.push(next as u32);
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        log_prob,
        finished: false,
    })
}

/// Keeps the `beam` best expansions per step; expansions ending in EOS
/// leave the beam as finished hypotheses. Hypotheses still open after
/// `max_steps` are finalized unfinished.
pub fn beam_search(scorer: &mut impl StepScorer, config: &DecodeConfig) -> Result<Hypothesis> {
    config.validate()?;
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..config.max_steps {
        let mut expansions: Vec<(Vec<u32>, f64)> = Vec::new();
        for (tokens, score) in &live {
            let mut prefix = Vec::with_capacity(tokens.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(tokens);
            let lp = scorer.log_probs(&prefix)?;
            for (v, &l) in lp.iter().enumerate() {
                let mut t = tokens.clone();
                t.push(v as u32);
                expansions.push((t, score + l));
            }
        }
        expansions.sort_by(|a, b| rank((&a.0, a.1), (&b.0, b.1)));
        expansions.truncate(config.beam);
        live.clear();
        for (mut tokens, score) in expansions {
            if tokens.last() == Some(&EOS) {
                tokens.pop();
                done.push(Hypothesis {
                    tokens,
                    log_prob: score,
                    finished: true,
                });
            } else {
                live.push((tokens, score));
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live.into_iter().map(|(tokens, log_prob)| Hypothesis {
        tokens,
        log_prob,
        finished: false,
    }));
    let best = done
        .into_iter()
        .min_by(|a, b| {
            rank(
                (&a.tokens, a.score(config.length_norm)),
                (&b.tokens, b.score(config.length_norm)),
            )
        })
        .expect("at least one hypothesis");
    Ok(best)
}

/// Scores continuations of one case with a fixed encoder memory.
pub struct ModelScorer<'m> {
    model: &'m Model,
    memory: Matrix,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, patches: &Matrix, bank: &MemoryBank) -> Result<Self> {
        Ok(Self {
            model,
            memory: model.encode_case(patches, bank)?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        self.model.next_log_probs(&self.memory, prefix)
    }
}

/// Decodes one case; `beam == 1` is greedy decoding. Generation is capped
/// so that no prefix exceeds the model's maximum length.
pub fn generate(model: &Model, patches: &Matrix, bank: &MemoryBank, config: &DecodeConfig) -> Result<Hypothesis> {
    config.validate()?;
    let mut scorer = ModelScorer::new(model, patches, bank)?;
    let steps = config.max_steps.min(model.config.max_len);
    if config.beam == 1 {
        greedy_decode(&mut scorer, steps)
    } else {
        beam_search(
            &mut scorer,
            &DecodeConfig {
                max_steps: steps,
                ..config.clone()
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::log_softmax;

    const A: u32 = 3;
    const B: u32 = 4;

    /// Vocabulary {pad, bos, eos, a, b}; pad and bos are never emitted.
    fn table(prefix: &[u32]) -> Result<Vec<f64>> {
        let p: [f64; 3] = match &prefix[1..] {
            [] => [0.1, 0.5, 0.4],
            [x] if *x == A => [0.3, 0.35, 0.35],
            [x] if *x == B => [0.05, 0.05, 0.9],
            [x, y] if *x == B && *y == B => [0.95, 0.025, 0.025],
            _ => [0.4, 0.3, 0.3],
        };
        Ok(vec![f64::NEG_INFINITY, f64::NEG_INFINITY, p[0].ln(), p[1].ln(), p[2].ln()])
    }

    fn exhaustive(scorer: &mut impl StepScorer, steps: usize) -> (Vec<u32>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut stack = vec![(vec![BOS], 0.0)];
        while let Some((prefix, lp)) = stack.pop() {
            let probs = scorer.log_probs(&prefix).unwrap();
            for (v, &l) in probs.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let total = lp + l;
                let mut next = prefix.clone();
                if v as u32 == EOS || prefix.len() == steps {
                    if v as u32 != EOS {
                        next.push(v as u32);
                    }
                    if total > best.1 {
                        best = (next[1..].to_vec(), total);
                    }
                } else {
                    next.push(v as u32);
                    stack.push((next, total));
                }
            }
        }
        best
    }

    #[test]
    fn beam_beats_greedy_on_crafted_table() {
        let mut s = table;
        let greedy = greedy_decode(&mut s, 3).unwrap();
        assert_eq!(greedy.tokens, vec![A, A]);
        let cfg = DecodeConfig {
            beam: 3,
            max_steps: 3,
            length_norm: false,
        };
        let beam = beam_search(&mut s, &cfg).unwrap();
        let (tokens, lp) = exhaustive(&mut s, 3);
        assert_eq!(beam.tokens, tokens);
        assert!((beam.log_prob - lp).abs() < 1e-12);
        assert!(beam.log_prob > greedy.log_prob);
    }

    #[test]
    fn immediate_eos_gives_empty_report() {
        let mut s = |_: &[u32]| -> Result<Vec<f64>> { Ok(log_softmax(&[0.0, 0.0, 1e6, 0.0])) };
        let g = greedy_decode(&mut s, 10).unwrap();
        assert!(g.tokens.is_empty() && g.finished);
        let b = beam_search(&mut s, &DecodeConfig::default()).unwrap();
        assert!(b.tokens.is_empty());
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..20u64 {
            let mut s = move |prefix: &[u32]| -> Result<Vec<f64>> {
                let h = prefix.iter().fold(seed, |a, &t| a.wrapping_mul(31).wrapping_add(t as u64 + 1));
                let logits: Vec<f64> = (0..6u64).map(|v| ((h ^ (v * 2654435761)) % 97) as f64 / 10.0).collect();
                Ok(log_softmax(&logits))
            };
            let g = greedy_decode(&mut s, 12).unwrap();
            for length_norm in [false, true] {
                let cfg = DecodeConfig {
                    beam: 1,
                    max_steps: 12,
                    length_norm,
                };
                assert_eq!(beam_search(&mut s, &cfg).unwrap(), g);
            }
        }
    }

    #[test]
    fn truncated_hypotheses_are_returned() {
        let mut s = |_: &[u32]| -> Result<Vec<f64>> { Ok(log_softmax(&[0.0, 0.0, -5.0, 1.0])) };
        let g = greedy_decode(&mut s, 4).unwrap();
        assert_eq!(g.tokens, vec![3; 4]);
        assert!(!g.finished);
        let cfg = DecodeConfig {
            beam: 2,
            max_steps: 4,
            length_norm: false,
        };
        assert!(beam_search(&mut s, &cfg).unwrap().log_prob >= g.log_prob);
    }

    #[test]
    fn zero_beam_is_rejected() {
        let cfg = DecodeConfig {
            beam: 0,
            ..DecodeConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "beam"));
    }
}
