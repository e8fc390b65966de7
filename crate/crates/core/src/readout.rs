//! Trainable maps from a reservoir state to next-character logits.
//!
//! [`LinearReadout`] is the classic static readout. [`AttentionReadout`]
//! first runs the state through a one-hidden-layer ReLU network whose
//! output is reshaped into a per-sample `H × N` weight matrix `W_att`;
//! the state is projected with it to `r_o = W_att · r` and `r_o` is
//! mapped to logits by a final affine layer.

use rand::Rng as _;

use crate::diffcore::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::{rng, Error, Result};

/// `N·V + V`
pub fn linear_count(n: usize, vocab: usize) -> usize {
    n * vocab + vocab
}

/// `(N·H + H) + (H·H·N + H·N) + (V·H + V)`
pub fn aerc_count(n: usize, hidden: usize, vocab: usize) -> usize {
    (n * hidden + hidden) + (hidden * hidden * n + hidden * n) + (vocab * hidden + vocab)
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initializer.
pub(crate) fn fan_in_uniform<T: Real>(
    shape: &[usize],
    fan_in: usize,
    r: &mut rng::Rng,
) -> Tensor<T> {
    let s = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of((r.random::<f64>() * 2.0 - 1.0) * s))
}

fn check_width<T: Real>(g: &Graph<T>, states: Var, n: usize) -> Result<()> {
    match g.shape(states) {
        [_, w] if *w == n => Ok(()),
        other => Err(Error::shape("readout", other, &[0, n])),
    }
}

#[derive(Debug, Clone)]
pub struct LinearReadout<T> {
    pub store: ParamStore<T>,
    w_out: ParamId,
    b_out: ParamId,
    n: usize,
}

impl<T: Real> LinearReadout<T> {
    pub fn new(n: usize, vocab: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut store = ParamStore::new();
        let w_out = store.add("readout.W_out", fan_in_uniform(&[n, vocab], n, &mut r));
        let b_out = store.add("readout.b_out", fan_in_uniform(&[vocab], n, &mut r));
        LinearReadout {
            store,
            w_out,
            b_out,
            n,
        }
    }

    pub fn state_width(&self) -> usize {
        self.n
    }

    /// `states · W_out + b_out` recorded on `g`.
    pub fn forward(&self, g: &mut Graph<T>, states: Var) -> Result<Var> {
        check_width(g, states, self.n)?;
        let w = g.param(&self.store, self.w_out);
        let b = g.param(&self.store, self.b_out);
        g.linear(states, w, b)
    }

    /// Logits for a `[B × N]` batch without recording gradients.
    pub fn linear_forward(&self, states: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let s = g.constant(states.clone());
        let out = self.forward(&mut g, s)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Debug, Clone)]
pub struct AttentionReadout<T> {
    pub store: ParamStore<T>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w_out: ParamId,
    b_out: ParamId,
    n: usize,
    hidden: usize,
}

impl<T: Real> AttentionReadout<T> {
    /// `hidden` is both the ReLU layer width `H` and the projection width
    /// `H_o`.
    pub fn new(n: usize, hidden: usize, vocab: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut store = ParamStore::new();
        let w1 = store.add("readout.W1", fan_in_uniform(&[n, hidden], n, &mut r));
        let b1 = store.add("readout.b1", fan_in_uniform(&[hidden], n, &mut r));
        let w2 = store.add(
            "readout.W2",
            fan_in_uniform(&[hidden, hidden * n], hidden, &mut r),
        );
        let b2 = store.add("readout.b2", fan_in_uniform(&[hidden * n], hidden, &mut r));
        let w_out = store.add(
            "readout.W_out",
            fan_in_uniform(&[hidden, vocab], hidden, &mut r),
        );
        let b_out = store.add("readout.b_out", fan_in_uniform(&[vocab], hidden, &mut r));
        AttentionReadout {
            store,
            w1,
            b1,
            w2,
            b2,
            w_out,
            b_out,
            n,
            hidden,
        }
    }

    pub fn state_width(&self) -> usize {
        self.n
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Per-sample `W_att` as a `[B × H·N]` node (row-major `H × N` blocks).
    pub fn attention_weights(&self, g: &mut Graph<T>, states: Var) -> Result<Var> {
        check_width(g, states, self.n)?;
        let w1 = g.param(&self.store, self.w1);
        let b1 = g.param(&self.store, self.b1);
        let w2 = g.param(&self.store, self.w2);
        let b2 = g.param(&self.store, self.b2);
        let pre = g.linear(states, w1, b1)?;
        let h = g.relu(pre);
        g.linear(h, w2, b2)
    }

    pub fn forward(&self, g: &mut Graph<T>, states: Var) -> Result<Var> {
        let w_att = self.attention_weights(g, states)?;
        let r_o = g.batched_matvec(w_att, states, self.hidden)?;
        let w = g.param(&self.store, self.w_out);
        let b = g.param(&self.store, self.b_out);
        g.linear(r_o, w, b)
    }

    /// Logits for a `[B × N]` batch without recording gradients.
    pub fn aerc_forward(&self, states: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let s = g.constant(states.clone());
        let out = self.forward(&mut g, s)?;
        Ok(g.value(out).clone())
    }

    #[cfg(test)]
    pub(crate) fn ids(&self) -> [ParamId; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w_out, self.b_out]
    }
}
