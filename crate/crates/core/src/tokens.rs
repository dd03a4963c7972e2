//! Token accounting.
//!
//! Budgets throughout the crate are expressed in the units of a
//! [`TokenCounter`]. The shipped [`HeuristicCounter`] approximates subword
//! tokenizers without any vocabulary: every alphanumeric run costs one token
//! per started group of `chars_per_piece` characters, every other visible
//! character costs one token, whitespace is free.

use std::fmt::Debug;

pub trait TokenCounter: Send + Sync + Debug {
    fn count(&self, text: &str) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeuristicCounter {
    pub chars_per_piece: usize,
}

impl Default for HeuristicCounter {
    fn default() -> Self {
        HeuristicCounter { chars_per_piece: 6 }
    }
}

impl TokenCounter for HeuristicCounter {
    fn count(&self, text: &str) -> usize {
        let piece = self.chars_per_piece.max(1);
        let mut total = 0;
        let mut run = 0usize;
        for c in text.chars() {
            if c.is_alphanumeric() {
                run += 1;
                continue;
            }
            total += run.div_ceil(piece);
            run = 0;
            if !c.is_whitespace() {
                total += 1;
            }
        }
        total + run.div_ceil(piece)
    }
}

/// Sum of the counts of several texts, e.g. all message contents of a prompt.
pub fn count_all<'a>(
    counter: &dyn TokenCounter,
    texts: impl IntoIterator<Item = &'a str>,
) -> usize {
    texts.into_iter().map(|t| counter.count(t)).sum()
}

/// Shrinks a budget by a fractional safety margin, never below one token.
pub fn apply_margin(budget: usize, margin: f64) -> usize {
    let margin = margin.clamp(0.0, 0.99);
    ((budget as f64) * (1.0 - margin)).floor().max(1.0) as usize
}
