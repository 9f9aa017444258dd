//! Toy prompt grammar: `a <class> and a <class> ...`.
//!
//! Articles and conjunctions are skipped; every other word must be a class
//! name. Each mention gets an equal share of the foreground mass.

use crate::error::{Error, Result};
use crate::vocab::ClassVocabulary;

const FILLER: &[&str] = &["a", "an", "the", "and", "with", "of", "two", "some"];

/// Class ids mentioned by `prompt`, in order, duplicates kept.
pub fn parse_prompt(prompt: &str, vocab: &ClassVocabulary) -> Result<Vec<u8>> {
    prompt
        .split(|c: char| c.is_whitespace() || c == ',' || c == '.')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .filter(|w| !FILLER.contains(&w.as_str()))
        .map(|w| {
            vocab.id_of(&w).ok_or_else(|| Error::UnknownPromptToken {
                token: w.clone(),
                valid: vocab.names(),
            })
        })
        .collect()
}

/// Target class histogram: background keeps `background_share`, mentions split the rest.
/// An empty prompt puts all mass on background.
pub fn target_histogram(mentions: &[u8], num_classes: usize, background_share: f64) -> Vec<f64> {
    let mut hist = vec![0.0; num_classes];
    if mentions.is_empty() {
        hist[0] = 1.0;
        return hist;
    }
    hist[0] = background_share;
    let each = (1.0 - background_share) / mentions.len() as f64;
    for &m in mentions {
        hist[m as usize] += each;
    }
    hist
}
