//! Closed-loop generation and n-gram overlap scoring.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::diffcore::Real;
use crate::model::Model;
use crate::{rng, Error, Result, SEQ_LEN};

pub const DEFAULT_SEED_TEXT: &str = "to be, or not";
pub const DEFAULT_GEN_LENGTH: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub seed_text: String,
    /// Characters to generate after the seed.
    pub length: usize,
    pub temperature: f64,
    pub rng_seed: u64,
    /// Always take the most likely character.
    pub greedy: bool,
    /// Reservoir models only: keep one running state instead of
    /// re-driving the 32-character window from zero at every step.
    pub continuous_state: bool,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed_text: DEFAULT_SEED_TEXT.into(),
            length: 300,
            temperature: 1.0,
            rng_seed: 0,
            greedy: false,
            continuous_state: false,
        }
    }
}

/// The first context window: the seed repeated cyclically and cut so that
/// it ends with the full seed (or its last 32 characters).
fn initial_context(seed: &[Token]) -> Vec<Token> {
    let n = seed.len();
    (0..SEQ_LEN)
        .map(|i| {
            let back = SEQ_LEN - i;
            seed[(n - back % n) % n]
        })
        .collect()
}

/// Index of the next character from one logit row.
fn pick<T: Real>(row: &[T], spec: &GenSpec, r: &mut rng::Rng) -> Token {
    let argmax = || {
        let mut best = 0;
        for (i, x) in row.iter().enumerate() {
            if *x > row[best] {
                best = i;
            }
        }
        best as Token
    };
    if spec.greedy || spec.temperature == 0.0 {
        return argmax();
    }
    let scaled: Vec<f64> = row.iter().map(|x| x.as_f64() / spec.temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = r.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as Token;
        }
        u -= w;
    }
    argmax()
}

/// Generates `spec.length` characters after `spec.seed_text` and returns
/// seed plus continuation.
pub fn generate<T: Real>(model: &Model<T>, spec: &GenSpec) -> Result<String> {
    if spec.length == 0 {
        return Err(Error::Usage("generation length must be >= 1".into()));
    }
    if spec.seed_text.is_empty() {
        return Err(Error::Usage("seed text must not be empty".into()));
    }
    if !(spec.temperature >= 0.0 && spec.temperature.is_finite()) {
        return Err(Error::Usage(format!(
            "temperature must be finite and >= 0, got {}",
            spec.temperature
        )));
    }
    let seed = model.vocab.encode(&spec.seed_text)?;
    let mut r = rng::seeded(spec.rng_seed);
    let mut context = initial_context(&seed);
    let mut out = Vec::with_capacity(spec.length);

    let running = match (spec.continuous_state, model.reservoir()) {
        (true, Some(res)) => Some((res, res.run_from(&vec![T::zero(); res.size()], &context)?)),
        (true, None) => {
            return Err(Error::Usage(
                "continuous-state generation needs a reservoir model".into(),
            ))
        }
        _ => None,
    };

    if let Some((res, mut state)) = running {
        for _ in 0..spec.length {
            let states = crate::diffcore::Tensor::from_vec(&[1, state.len()], state.clone())?;
            let mut g = crate::diffcore::Graph::new();
            let s = g.constant(states);
            let logits = model.readout_forward(&mut g, s)?;
            let next = pick(g.value(logits).data(), spec, &mut r);
            out.push(next);
            state = res.step(&state, next)?;
        }
    } else {
        for _ in 0..spec.length {
            let logits = model.logits_for_windows(&[&context])?;
            let next = pick(logits.data(), spec, &mut r);
            out.push(next);
            context.remove(0);
            context.push(next);
        }
    }
    Ok(format!("{}{}", spec.seed_text, model.vocab.decode(&out)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramReport {
    pub n: usize,
    /// `|G ∩ R| / |G|` over distinct n-grams.
    pub overlap: f64,
    /// `|G|` divided by the number of n-gram positions in the generated text.
    pub distinct: f64,
    pub g_unique: usize,
    pub r_unique: usize,
    pub intersection: usize,
}

fn ngram_set(chars: &[char], n: usize) -> HashSet<&[char]> {
    if chars.len() < n {
        return HashSet::new();
    }
    chars.windows(n).collect()
}

/// Character n-gram overlap of `generated` against `reference`.
pub fn ngram_overlap(generated: &str, reference: &str, n: usize) -> Result<NGramReport> {
    ngram_overlap_refs(generated, &[reference], n)
}

/// Overlap against several reference documents; n-grams never span two
/// documents, so repeating a document changes nothing.
pub fn ngram_overlap_refs(generated: &str, references: &[&str], n: usize) -> Result<NGramReport> {
    let g: Vec<char> = generated.chars().collect();
    if n == 0 {
        return Err(Error::Usage("n-gram order must be >= 1".into()));
    }
    if g.len() < n {
        return Err(Error::Usage(format!(
            "generated text has {} characters, fewer than n = {n}",
            g.len()
        )));
    }
    let docs: Vec<Vec<char>> = references.iter().map(|r| r.chars().collect()).collect();
    let gs = ngram_set(&g, n);
    let mut rs = HashSet::new();
    for d in &docs {
        rs.extend(ngram_set(d, n));
    }
    let intersection = gs.iter().filter(|x| rs.contains(*x)).count();
    Ok(NGramReport {
        n,
        overlap: intersection as f64 / gs.len() as f64,
        distinct: gs.len() as f64 / (g.len() - n + 1) as f64,
        g_unique: gs.len(),
        r_unique: rs.len(),
        intersection,
    })
}

/// Generates `gen_length` characters from the default seed once and scores
/// the continuation against `reference` for each `n`.
pub fn overlap_sweep<T: Real>(
    model: &Model<T>,
    reference: &str,
    n_values: &[usize],
    gen_length: usize,
    rng_seed: u64,
) -> Result<Vec<NGramReport>> {
    let max_n = n_values.iter().copied().max().unwrap_or(0);
    if n_values.is_empty() || gen_length < max_n {
        return Err(Error::Usage(format!(
            "generation length {gen_length} must cover the largest n ({max_n})"
        )));
    }
    let spec = GenSpec {
        length: gen_length,
        rng_seed,
        ..GenSpec::default()
    };
    let text = generate(model, &spec)?;
    let continuation: String = text.chars().skip(spec.seed_text.chars().count()).collect();
    n_values
        .iter()
        .map(|&n| ngram_overlap(&continuation, reference, n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use crate::model::{InitOptions, ModelConfig};

    #[test]
    fn hand_example() {
        let r = ngram_overlap("aab", "abb", 2).unwrap();
        assert_eq!(r.overlap, 0.5);
        assert_eq!((r.g_unique, r.r_unique, r.intersection), (2, 2, 1));
        assert_eq!(r.distinct, 1.0);
    }

    #[test]
    fn identical_and_disjoint() {
        assert_eq!(
            ngram_overlap("hello there", "hello there", 3)
                .unwrap()
                .overlap,
            1.0
        );
        assert_eq!(ngram_overlap("abcabc", "xyzxyz", 1).unwrap().overlap, 0.0);
    }

    #[test]
    fn usage_errors() {
        assert!(matches!(
            ngram_overlap("abc", "abc", 0),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            ngram_overlap("ab", "abc", 3),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn json_field_names() {
        let r = ngram_overlap("aab", "abb", 2).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in [
            "n",
            "overlap",
            "distinct",
            "g_unique",
            "r_unique",
            "intersection",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn padding_repeats_seed() {
        let ctx = initial_context(&[1, 2, 3]);
        assert_eq!(ctx.len(), 32);
        assert_eq!(&ctx[29..], &[1, 2, 3]);
        assert_eq!(&ctx[26..29], &[1, 2, 3]);
        assert_eq!(ctx[0], 2);
        let long: Vec<Token> = (0..40).collect();
        assert_eq!(initial_context(&long), (8..40).collect::<Vec<_>>());
    }

    fn tiny(config: ModelConfig) -> Model<f32> {
        let vocab = Vocabulary::build("to be, or nt").unwrap();
        Model::new(
            config,
            vocab,
            InitOptions {
                seed: 2,
                ..InitOptions::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn generation_contract() {
        for cfg in [
            ModelConfig::Reservoir { n: 16 },
            ModelConfig::Transformer {
                d_ff: 8,
                heads: 2,
                layers: 1,
            },
        ] {
            let m = tiny(cfg);
            let spec = GenSpec {
                length: 40,
                rng_seed: 9,
                ..GenSpec::default()
            };
            let a = generate(&m, &spec).unwrap();
            assert_eq!(a.chars().count(), DEFAULT_SEED_TEXT.len() + 40);
            assert!(a.starts_with(DEFAULT_SEED_TEXT));
            assert_eq!(a, generate(&m, &spec).unwrap());
        }
    }

    #[test]
    fn greedy_matches_argmax_of_first_step() {
        let m = tiny(ModelConfig::Aerc { n: 12, hidden: 2 });
        let spec = GenSpec {
            length: 1,
            greedy: true,
            ..GenSpec::default()
        };
        let seed = m.vocab.encode(DEFAULT_SEED_TEXT).unwrap();
        let logits = m.logits_for_windows(&[&initial_context(&seed)]).unwrap();
        let best = (0..logits.len())
            .max_by(|&a, &b| logits.data()[a].partial_cmp(&logits.data()[b]).unwrap())
            .unwrap();
        let text = generate(&m, &spec).unwrap();
        assert_eq!(text.chars().last(), m.vocab.char_at(best as Token));
    }

    #[test]
    fn unknown_seed_character_is_named() {
        let m = tiny(ModelConfig::Reservoir { n: 4 });
        let spec = GenSpec {
            seed_text: "to bz".into(),
            ..GenSpec::default()
        };
        match generate(&m, &spec) {
            Err(Error::Encode { ch }) => assert_eq!(ch, 'z'),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn continuous_state_generation_runs() {
        let m = tiny(ModelConfig::Reservoir { n: 8 });
        let spec = GenSpec {
            length: 20,
            continuous_state: true,
            ..GenSpec::default()
        };
        assert_eq!(generate(&m, &spec).unwrap().chars().count(), 33);
    }

    #[test]
    fn sweep_reports_each_order() {
        let m = tiny(ModelConfig::Reservoir { n: 8 });
        let reps = overlap_sweep(&m, "to be, or not to be", &[7, 8], 50, 1).unwrap();
        assert_eq!(reps.iter().map(|r| r.n).collect::<Vec<_>>(), vec![7, 8]);
        assert!(matches!(
            overlap_sweep(&m, "x", &[7, 8], 5, 1),
            Err(Error::Usage(_))
        ));
    }
}
