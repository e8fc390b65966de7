//! Text ingestion: lower-casing, the character vocabulary, six-way
//! sharding and fixed-length windows with next-character targets.

pub mod synth;

use std::collections::HashMap;
use std::path::Path;

use crate::{Error, Result, SEQ_LEN};

/// Index of a character in a [`Vocabulary`].
pub type Token = u32;

pub const N_SHARDS: usize = 6;
/// The held-out shard is the last one.
pub const DEFAULT_TEST_SHARD: usize = N_SHARDS - 1;

/// Maps every uppercase character to lowercase and leaves everything else
/// untouched.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if c.is_uppercase() {
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

/// Reads a UTF-8 file and lower-cases it.
pub fn load_and_normalize(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })?;
    Ok(normalize(&text))
}

/// Sorted set of the distinct characters of a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, Token>,
}

impl Vocabulary {
    pub fn build(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::InvalidCorpus("empty text".into()));
        }
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Ok(Self::from_chars(chars))
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as Token))
            .collect();
        Vocabulary { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index_of(&self, c: char) -> Option<Token> {
        self.index.get(&c).copied()
    }

    pub fn char_at(&self, t: Token) -> Option<char> {
        self.chars.get(t as usize).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<Token>> {
        text.chars()
            .map(|ch| self.index_of(ch).ok_or(Error::Encode { ch }))
            .collect()
    }

    pub fn decode(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|&t| self.chars[t as usize]).collect()
    }

    /// JSON list of one-character strings in index order.
    pub fn to_json(&self) -> String {
        let list: Vec<String> = self.chars.iter().map(|c| c.to_string()).collect();
        serde_json::to_string(&list).expect("strings serialize")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let list: Vec<String> = serde_json::from_str(json)
            .map_err(|e| Error::Format(format!("vocabulary JSON: {e}")))?;
        let mut chars = Vec::with_capacity(list.len());
        for s in list {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(Error::Format(format!(
                        "vocabulary entry {s:?} is not a single character"
                    )))
                }
            }
        }
        let n = chars.len();
        let vocab = Self::from_chars(chars);
        if vocab.index.len() != n {
            return Err(Error::Format("vocabulary has duplicate entries".into()));
        }
        Ok(vocab)
    }
}

/// Six contiguous, near-equal slices of the encoded corpus.
#[derive(Debug, Clone)]
pub struct ShardedCorpus {
    pub shards: Vec<Vec<Token>>,
    pub train_ids: Vec<usize>,
    pub test_id: usize,
}

impl ShardedCorpus {
    pub fn train_shards(&self) -> impl Iterator<Item = (usize, &[Token])> {
        self.train_ids
            .iter()
            .map(|&i| (i, self.shards[i].as_slice()))
    }

    pub fn test_shard(&self) -> &[Token] {
        &self.shards[self.test_id]
    }
}

/// Splits into `n_shards` contiguous pieces; the first `len % n_shards`
/// pieces get one extra token.
pub fn split_shards(encoded: &[Token], n_shards: usize, test_id: usize) -> Result<ShardedCorpus> {
    if n_shards == 0 || test_id >= n_shards {
        return Err(Error::Config(format!(
            "test shard {test_id} outside 0..{n_shards}"
        )));
    }
    let min = n_shards * (SEQ_LEN + 1);
    if encoded.len() < min {
        return Err(Error::InvalidCorpus(format!(
            "{} characters, need at least {min} for {n_shards} shards",
            encoded.len()
        )));
    }
    let base = encoded.len() / n_shards;
    let extra = encoded.len() % n_shards;
    let mut shards = Vec::with_capacity(n_shards);
    let mut start = 0;
    for i in 0..n_shards {
        let len = base + usize::from(i < extra);
        shards.push(encoded[start..start + len].to_vec());
        start += len;
    }
    Ok(ShardedCorpus {
        shards,
        train_ids: (0..n_shards).filter(|&i| i != test_id).collect(),
        test_id,
    })
}

/// A 32-token context and the token that follows it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window<'a> {
    pub input: &'a [Token],
    pub target: Token,
}

/// Number of windows [`iter_windows`] yields.
pub fn window_count(shard_len: usize, stride: usize) -> usize {
    if shard_len <= SEQ_LEN || stride == 0 {
        0
    } else {
        (shard_len - SEQ_LEN - 1) / stride + 1
    }
}

/// Start offset of window `i`.
pub fn window_at(shard: &[Token], start: usize) -> Window<'_> {
    Window {
        input: &shard[start..start + SEQ_LEN],
        target: shard[start + SEQ_LEN],
    }
}

/// Windows starting at `0, stride, 2·stride, …` while `start + 32` is a
/// valid index.
pub fn iter_windows(
    shard: &[Token],
    stride: usize,
) -> Result<impl ExactSizeIterator<Item = Window<'_>> + Clone> {
    if stride == 0 {
        return Err(Error::Config("window stride must be positive".into()));
    }
    if shard.len() < SEQ_LEN + 1 {
        return Err(Error::InvalidCorpus(format!(
            "shard of {} characters is shorter than one window",
            shard.len()
        )));
    }
    let n = window_count(shard.len(), stride);
    Ok((0..n).map(move |i| window_at(shard, i * stride)))
}

/// A normalized, encoded, sharded corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub sharded: ShardedCorpus,
}

impl Corpus {
    /// Normalizes `raw`, builds its vocabulary and shards it.
    pub fn from_text(raw: &str, test_id: usize) -> Result<Self> {
        let text = normalize(raw);
        let vocab = Vocabulary::build(&text)?;
        let encoded = vocab.encode(&text)?;
        let sharded = split_shards(&encoded, N_SHARDS, test_id)?;
        Ok(Corpus { vocab, sharded })
    }

    pub fn load(path: impl AsRef<Path>, test_id: usize) -> Result<Self> {
        let text = load_and_normalize(path)?;
        Self::from_text(&text, test_id)
    }

    /// Test-shard cross-entropy (nats) of a unigram model fitted to the
    /// training shards with add-one smoothing, scored on every target
    /// position of the test shard.
    pub fn unigram_baseline(&self) -> f64 {
        let v = self.vocab.len();
        let mut counts = vec![1.0f64; v];
        for (_, shard) in self.sharded.train_shards() {
            for &t in shard {
                counts[t as usize] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        let targets = &self.sharded.test_shard()[SEQ_LEN..];
        let nll: f64 = targets
            .iter()
            .map(|&t| -(counts[t as usize] / total).ln())
            .sum();
        nll / targets.len() as f64
    }
}
