//! Seeded synthetic corpus standing in for the real one at desk scale.
//!
//! Tokens are `w0 .. w{vocab-1}`. Every response carries exactly one cue
//! token, drawn from a class-specific cue set, so the task is linearly
//! separable from the response alone. Comments are filler, except that a
//! sarcastic comment carries an echo of its response cue with probability
//! `context_rate`, which gives the attention path something to align.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Example;

const CUES_PER_CLASS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub examples: usize,
    pub vocab_size: usize,
    pub max_comment: usize,
    pub max_response: usize,
    pub context_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            examples: 32,
            vocab_size: 50,
            max_comment: 10,
            max_response: 10,
            context_rate: 0.5,
            seed: 0,
        }
    }
}

fn word(i: usize) -> String {
    format!("w{i}")
}

/// Balanced, shuffled corpus. Panics if `vocab_size` leaves no filler tokens.
pub fn generate(cfg: &SyntheticConfig) -> Vec<Example> {
    let filler_start = 2 * CUES_PER_CLASS;
    assert!(cfg.vocab_size > filler_start, "vocab_size must exceed {filler_start}");
    assert!(cfg.max_comment >= 1 && cfg.max_response >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let filler = |rng: &mut ChaCha8Rng| word(rng.gen_range(filler_start..cfg.vocab_size));

    let mut out: Vec<Example> = (0..cfg.examples)
        .map(|i| {
            let label = (i % 2) as u8;
            let cue = word(label as usize * CUES_PER_CLASS + rng.gen_range(0..CUES_PER_CLASS));

            let m = rng.gen_range(1..=cfg.max_response);
            let mut response: Vec<String> = (0..m).map(|_| filler(&mut rng)).collect();
            let at = rng.gen_range(0..m);
            response[at] = cue.clone();

            let n = rng.gen_range(1..=cfg.max_comment);
            let mut comment: Vec<String> = (0..n).map(|_| filler(&mut rng)).collect();
            if label == 1 && rng.gen_bool(cfg.context_rate) {
                let at = rng.gen_range(0..n);
                comment[at] = cue;
            }
            Example {
                comment_tokens: comment,
                response_tokens: response,
                label,
            }
        })
        .collect();
    out.shuffle(&mut rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_bounded_and_deterministic() {
        let cfg = SyntheticConfig {
            examples: 40,
            ..Default::default()
        };
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        assert_eq!(a.iter().filter(|e| e.label == 1).count(), 20);
        for e in &a {
            assert!((1..=10).contains(&e.comment_tokens.len()));
            assert!((1..=10).contains(&e.response_tokens.len()));
            let cues: Vec<usize> = e
                .response_tokens
                .iter()
                .filter_map(|t| t[1..].parse::<usize>().ok())
                .filter(|&k| k < 2 * CUES_PER_CLASS)
                .collect();
            assert_eq!(cues.len(), 1);
            assert_eq!(cues[0] / CUES_PER_CLASS, e.label as usize);
        }
    }
}
