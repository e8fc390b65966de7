//! Compact decoder-only transformer.
//!
//! Layout per layer (pre-norm):
//!
//! ```text
//! x = x + Wo·attn(LN1(x))          causal, h heads of width d/h
//! x = x + W2·relu(W1·LN2(x) + b1) + b2
//! ```
//!
//! Token embeddings get a fixed sinusoidal position code (no trainable
//! positions), there is no final layer norm, and an untied affine head
//! maps the last position to logits. With every projection biased and two
//! affine layer norms per layer the trainable count is
//!
//! ```text
//! V·d + L·[4(d² + d) + (d·d_h + d_h) + (d_h·d + d) + 4d] + (d·V + V)
//! ```

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::diffcore::{AttentionShape, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::{rng, Error, Result, EMBED_DIM, SEQ_LEN};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Model width.
    pub d: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab: usize,
    pub seq_len: usize,
}

impl TransformerConfig {
    /// Width 16 and context 32, as used by every table configuration.
    pub fn new(d_ff: usize, heads: usize, layers: usize, vocab: usize) -> Self {
        TransformerConfig {
            d: EMBED_DIM,
            d_ff,
            heads,
            layers,
            vocab,
            seq_len: SEQ_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let TransformerConfig {
            d,
            d_ff,
            heads,
            layers,
            vocab,
            seq_len,
        } = *self;
        if d == 0 || d_ff == 0 || heads == 0 || layers == 0 || vocab == 0 || seq_len == 0 {
            return Err(Error::Config(format!(
                "transformer dimensions must be positive: {self:?}"
            )));
        }
        if d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }

    pub fn count_parameters(&self) -> Result<usize> {
        self.validate()?;
        let TransformerConfig {
            d,
            d_ff,
            layers,
            vocab,
            ..
        } = *self;
        let attn = 4 * (d * d + d);
        let ff = (d * d_ff + d_ff) + (d_ff * d + d);
        let norms = 2 * (2 * d);
        Ok(vocab * d + layers * (attn + ff + norms) + (d * vocab + vocab))
    }
}

/// Closed-form trainable parameter count.
pub fn count_parameters(cfg: &TransformerConfig) -> Result<usize> {
    cfg.count_parameters()
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct TransformerModel<T> {
    pub config: TransformerConfig,
    pub store: ParamStore<T>,
    embed: ParamId,
    layers: Vec<LayerIds>,
    head_w: ParamId,
    head_b: ParamId,
    positions: Tensor<T>,
}

/// Fixed sinusoidal position code, `[seq_len × d]`.
pub fn sinusoidal_positions<T: Real>(seq_len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[seq_len, d], |idx| {
        let (pos, c) = (idx / d, idx % d);
        let freq = 10000f64.powf(-((c - c % 2) as f64) / d as f64);
        let angle = pos as f64 * freq;
        T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Attention probabilities recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionProbe<T> {
    pub batch: usize,
    pub heads: usize,
    pub seq: usize,
    /// One `[batch, heads, seq, seq]` array per layer.
    pub layers: Vec<Vec<T>>,
}

impl<T: Real> AttentionProbe<T> {
    /// Sum of every attention row, all layers flattened.
    pub fn row_sums(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|p| p.chunks(self.seq).map(|row| row.iter().copied().sum()))
            .collect()
    }

    /// Whether every entry above the diagonal is exactly zero.
    pub fn future_is_masked(&self) -> bool {
        self.layers.iter().all(|p| {
            p.chunks(self.seq)
                .enumerate()
                .all(|(r, row)| row[r % self.seq + 1..].iter().all(|&x| x == T::zero()))
        })
    }
}

impl<T: Real> TransformerModel<T> {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let TransformerConfig {
            d,
            d_ff,
            layers,
            vocab,
            seq_len,
            ..
        } = config;
        let mut r = rng::seeded(seed);
        let mut normal = |shape: &[usize]| -> Tensor<T> {
            Tensor::from_fn(shape, |_| {
                T::of(INIT_STD * r.sample::<f64, _>(StandardNormal))
            })
        };
        let mut store = ParamStore::new();
        let embed = store.add("tf.embed", normal(&[vocab, d]));
        let mut ids = Vec::with_capacity(layers);
        for i in 0..layers {
            let p = |s: &str| format!("tf.layer{i}.{s}");
            let ln1_g = store.add(p("ln1.gamma"), Tensor::full(&[d], T::one()));
            let ln1_b = store.add(p("ln1.beta"), Tensor::zeros(&[d]));
            let wq = store.add(p("attn.Wq"), normal(&[d, d]));
            let bq = store.add(p("attn.bq"), Tensor::zeros(&[d]));
            let wk = store.add(p("attn.Wk"), normal(&[d, d]));
            let bk = store.add(p("attn.bk"), Tensor::zeros(&[d]));
            let wv = store.add(p("attn.Wv"), normal(&[d, d]));
            let bv = store.add(p("attn.bv"), Tensor::zeros(&[d]));
            let wo = store.add(p("attn.Wo"), normal(&[d, d]));
            let bo = store.add(p("attn.bo"), Tensor::zeros(&[d]));
            let ln2_g = store.add(p("ln2.gamma"), Tensor::full(&[d], T::one()));
            let ln2_b = store.add(p("ln2.beta"), Tensor::zeros(&[d]));
            let w1 = store.add(p("ff.W1"), normal(&[d, d_ff]));
            let b1 = store.add(p("ff.b1"), Tensor::zeros(&[d_ff]));
            let w2 = store.add(p("ff.W2"), normal(&[d_ff, d]));
            let b2 = store.add(p("ff.b2"), Tensor::zeros(&[d]));
            ids.push(LayerIds {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let head_w = store.add("tf.head.W", normal(&[d, vocab]));
        let head_b = store.add("tf.head.b", Tensor::zeros(&[vocab]));
        Ok(TransformerModel {
            config,
            store,
            embed,
            layers: ids,
            head_w,
            head_b,
            positions: sinusoidal_positions(seq_len, d),
        })
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<usize> {
        let t = self.config.seq_len;
        if tokens.is_empty() || !tokens.len().is_multiple_of(t) {
            return Err(Error::shape("transformer input", &[tokens.len()], &[t]));
        }
        if let Some(&bad) = tokens.iter().find(|&&x| x as usize >= self.config.vocab) {
            return Err(Error::Index {
                what: "transformer input token",
                index: bad as usize,
                bound: self.config.vocab,
            });
        }
        Ok(tokens.len() / t)
    }

    /// Residual stream after the last block for every position
    /// (`[B·T × d]`), plus the attention nodes of each layer.
    pub fn forward_hidden(&self, g: &mut Graph<T>, tokens: &[Token]) -> Result<(Var, Vec<Var>)> {
        let batch = self.check_tokens(tokens)?;
        let cfg = &self.config;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = g.param(&self.store, self.embed);
        let emb = g.gather_rows(table, &ids)?;
        let mut pos = Vec::with_capacity(tokens.len() * cfg.d);
        for _ in 0..batch {
            pos.extend_from_slice(self.positions.data());
        }
        let pos = g.constant(Tensor::from_vec(&[tokens.len(), cfg.d], pos)?);
        let mut x = g.add(emb, pos)?;
        let shape = AttentionShape {
            batch,
            seq: cfg.seq_len,
            heads: cfg.heads,
        };
        let mut attn_nodes = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let p = |g: &mut Graph<T>, id| g.param(&self.store, id);
            let (g1, b1) = (p(g, l.ln1_g), p(g, l.ln1_b));
            let h = g.layer_norm(x, g1, b1)?;
            let (wq, bq, wk, bk, wv, bv) = (
                p(g, l.wq),
                p(g, l.bq),
                p(g, l.wk),
                p(g, l.bk),
                p(g, l.wv),
                p(g, l.bv),
            );
            let q = g.linear(h, wq, bq)?;
            let k = g.linear(h, wk, bk)?;
            let v = g.linear(h, wv, bv)?;
            let a = g.causal_attention(q, k, v, shape)?;
            attn_nodes.push(a);
            let (wo, bo) = (p(g, l.wo), p(g, l.bo));
            let o = g.linear(a, wo, bo)?;
            x = g.add(x, o)?;

            let (g2, b2n) = (p(g, l.ln2_g), p(g, l.ln2_b));
            let h2 = g.layer_norm(x, g2, b2n)?;
            let (w1, b1f, w2, b2f) = (p(g, l.w1), p(g, l.b1), p(g, l.w2), p(g, l.b2));
            let up = g.linear(h2, w1, b1f)?;
            let act = g.relu(up);
            let down = g.linear(act, w2, b2f)?;
            x = g.add(x, down)?;
        }
        Ok((x, attn_nodes))
    }

    /// Logits `[B × V]` for the last position of each sequence.
    pub fn forward(&self, g: &mut Graph<T>, tokens: &[Token]) -> Result<Var> {
        let (x, _) = self.forward_hidden(g, tokens)?;
        let t = self.config.seq_len;
        let last: Vec<usize> = (0..tokens.len() / t).map(|b| b * t + t - 1).collect();
        let h = g.gather_rows(x, &last)?;
        let w = g.param(&self.store, self.head_w);
        let b = g.param(&self.store, self.head_b);
        g.linear(h, w, b)
    }

    /// Logits without recording gradients.
    pub fn logits(&self, tokens: &[Token]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, tokens)?;
        Ok(g.value(out).clone())
    }

    /// Runs a forward pass and returns every layer's attention map.
    pub fn attention_probe(&self, tokens: &[Token]) -> Result<AttentionProbe<T>> {
        let mut g = Graph::new();
        let (_, nodes) = self.forward_hidden(&mut g, tokens)?;
        Ok(AttentionProbe {
            batch: tokens.len() / self.config.seq_len,
            heads: self.config.heads,
            seq: self.config.seq_len,
            layers: nodes
                .iter()
                .map(|&n| g.attention_probs(n).expect("attention node").to_vec())
                .collect(),
        })
    }

    /// Per-row attention sums for every layer, head and query position.
    pub fn attention_weights_sum_check(&self, tokens: &[Token]) -> Result<Vec<T>> {
        Ok(self.attention_probe(tokens)?.row_sums())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_counts() {
        let rows = [
            (64, 4, 4, 15067),
            (72, 8, 8, 30299),
            (128, 8, 8, 45083),
            (356, 8, 8, 105275),
            (256, 16, 16, 155803),
        ];
        for (dh, h, l, want) in rows {
            let cfg = TransformerConfig::new(dh, h, l, 59);
            assert_eq!(cfg.count_parameters().unwrap(), want);
            let m = TransformerModel::<f32>::new(cfg, 0).unwrap();
            assert_eq!(m.store.trainable_count(), want);
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = TransformerConfig::new(64, 3, 1, 59);
        assert!(matches!(cfg.count_parameters(), Err(Error::Config(_))));
        assert!(TransformerModel::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn zero_network_outputs_head_bias() {
        let cfg = TransformerConfig::new(8, 2, 2, 7);
        let mut m = TransformerModel::<f64>::new(cfg, 1).unwrap();
        for p in m.store.iter_mut() {
            p.value.fill(0.0);
        }
        let b = m.store.find("tf.head.b").unwrap();
        let bias = Tensor::from_fn(&[7], |i| i as f64 - 3.0);
        *m.store.value_mut(b) = bias.clone();
        let tokens: Vec<Token> = (0..64).map(|i| (i % 7) as Token).collect();
        let logits = m.logits(&tokens).unwrap();
        assert_eq!(logits.shape(), &[2, 7]);
        for r in 0..2 {
            assert_eq!(logits.row(r), bias.data());
        }
    }

    #[test]
    fn input_validation() {
        let m = TransformerModel::<f32>::new(TransformerConfig::new(8, 2, 1, 5), 1).unwrap();
        assert!(matches!(m.logits(&[0; 31]), Err(Error::Shape { .. })));
        let mut bad = vec![0; 32];
        bad[3] = 5;
        assert!(matches!(m.logits(&bad), Err(Error::Index { index: 5, .. })));
    }

    #[test]
    fn changing_last_token_leaves_earlier_positions_unchanged() {
        let cfg = TransformerConfig::new(16, 4, 2, 11);
        let m = TransformerModel::<f64>::new(cfg, 5).unwrap();
        let a: Vec<Token> = (0..32).map(|i| (i * 3 % 11) as Token).collect();
        let mut b = a.clone();
        b[31] = (a[31] + 1) % 11;
        let hidden = |toks: &[Token]| {
            let mut g = Graph::new();
            let (x, _) = m.forward_hidden(&mut g, toks).unwrap();
            g.value(x).clone()
        };
        let (ha, hb) = (hidden(&a), hidden(&b));
        let d = cfg.d;
        assert_eq!(&ha.data()[..31 * d], &hb.data()[..31 * d]);
        assert_ne!(&ha.data()[31 * d..], &hb.data()[31 * d..]);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = TransformerModel::<f32>::new(TransformerConfig::new(64, 4, 2, 13), 2).unwrap();
        let tokens: Vec<Token> = (0..96).map(|i| (i * 7 % 13) as Token).collect();
        let probe = m.attention_probe(&tokens).unwrap();
        assert!(probe.future_is_masked());
        for s in probe.row_sums() {
            assert!((s - 1.0).abs() <= 1e-5);
        }
        for layer in &probe.layers {
            for bh in 0..probe.batch * probe.heads {
                assert_eq!(layer[bh * 32 * 32], 1.0);
            }
        }
    }

    #[test]
    fn single_width_heads_are_accepted() {
        let cfg = TransformerConfig::new(32, 16, 1, 9);
        assert_eq!(cfg.head_width(), 1);
        let m = TransformerModel::<f32>::new(cfg, 3).unwrap();
        let sums = m.attention_weights_sum_check(&[1; 32]).unwrap();
        assert_eq!(sums.len(), 16 * 32);
    }
}
