//! Deterministic stand-in corpus.
//!
//! The bundled passages are emitted verbatim, followed by text from an
//! order-2 word Markov chain over the same passages, until the requested
//! length is reached. The result is mixed-case English verse with 59
//! distinct characters after lower-casing, which makes it a drop-in for
//! examples and tests when no real corpus file is supplied.

use std::collections::HashMap;

use rand::Rng as _;

use crate::rng;

pub const PASSAGES: &str = include_str!("../../data/passages.txt");

/// Generates `len` characters of pseudo-Shakespeare (ASCII, unnormalized).
pub fn shakespeare_like(len: usize, seed: u64) -> String {
    let mut out = String::with_capacity(len + 64);
    out.push_str(PASSAGES);
    if out.len() >= len {
        out.truncate(len);
        return out;
    }

    // Tokens are whitespace-separated words plus explicit line breaks.
    let mut tokens: Vec<&str> = Vec::new();
    for line in PASSAGES.lines() {
        tokens.extend(line.split_whitespace());
        tokens.push("\n");
    }
    let mut next: HashMap<(&str, &str), Vec<&str>> = HashMap::new();
    for w in tokens.windows(3) {
        next.entry((w[0], w[1])).or_default().push(w[2]);
    }

    let mut rng = rng::seeded(seed);
    let restart = |rng: &mut rng::Rng| {
        let i = rng.random_range(0..tokens.len() - 2);
        (tokens[i], tokens[i + 1])
    };
    let (mut a, mut b) = ("\n", "\n");
    out.push('\n');
    while out.len() < len {
        let Some(choices) = next.get(&(a, b)) else {
            (a, b) = restart(&mut rng);
            continue;
        };
        let c = choices[rng.random_range(0..choices.len())];
        if c == "\n" {
            out.push('\n');
        } else {
            if !out.ends_with('\n') {
                out.push(' ');
            }
            out.push_str(c);
        }
        (a, b) = (b, c);
    }
    out.truncate(len);
    out
}
