//! Central-difference gradient checks in f64 with step 1e-5, shared by the
//! gradient tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reslm::diffcore::{AttentionShape, Graph, ParamStore, Tensor, Var};
use reslm::readout::{AttentionReadout, LinearReadout};
use reslm::transformer::{TransformerConfig, TransformerModel};

const H: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks stay further than `H`.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.1..1.0);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Reduces any node to a scalar through fixed random weights so every
/// output element reaches the loss with a different coefficient.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let w = g.constant(random(&shape, seed, -1.0, 1.0));
    let m = g.mul(out, w).unwrap();
    g.sum(m)
}

/// Checks d loss / d input for every input tensor; returns the max
/// relative error.
fn check_inputs(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).expect("input reaches the loss").clone();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Same check over every trainable tensor in a parameter store.
fn check_store<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore<f64>,
    loss: impl Fn(&M) -> (Graph<f64>, Var),
) -> f64 {
    let (mut g, out) = loss(model);
    g.backward(out).unwrap();
    let s = store(model);
    s.zero_grad();
    s.accumulate_grads(&g).unwrap();
    let analytic: Vec<Tensor<f64>> = s.iter().map(|p| p.grad.clone()).collect();
    let sizes: Vec<usize> = s.iter().map(|p| p.value.len()).collect();
    let mut worst: f64 = 0.0;
    for (pi, size) in sizes.into_iter().enumerate() {
        for i in 0..size {
            let mut f = |delta: f64| {
                store(model).iter_mut().nth(pi).unwrap().value.data_mut()[i] += delta;
                let (g, out) = loss(model);
                g.value(out).data()[0]
            };
            let up = f(H);
            let down = f(-2.0 * H);
            f(H);
            worst = worst.max(rel_err(analytic[pi].data()[i], (up - down) / (2.0 * H)));
        }
    }
    worst
}

fn track(worst: &mut f64, err: f64) {
    *worst = worst.max(err);
}

pub fn matmul() -> f64 {
    let mut worst = 0.0f64;
    let e = check_inputs(
        &[random(&[3, 4], 1, -1.0, 1.0), random(&[4, 5], 2, -1.0, 1.0)],
        |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            project(g, y, 3)
        },
    );
    track(&mut worst, e);
    worst
}

pub fn add_and_mul() -> f64 {
    let mut worst = 0.0f64;
    let xs = [random(&[2, 3], 4, -1.0, 1.0), random(&[2, 3], 5, -1.0, 1.0)];
    track(
        &mut worst,
        check_inputs(&xs, |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            project(g, y, 6)
        }),
    );
    track(
        &mut worst,
        check_inputs(&xs, |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            project(g, y, 7)
        }),
    );
    let with_scalar = [random(&[2, 3], 8, -1.0, 1.0), random(&[1], 9, 0.5, 1.5)];
    track(
        &mut worst,
        check_inputs(&with_scalar, |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            project(g, y, 10)
        }),
    );
    worst
}

pub fn scale_tanh_relu() -> f64 {
    let mut worst = 0.0f64;
    let x = [away_from_zero(&[3, 4], 11)];
    track(
        &mut worst,
        check_inputs(&x, |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, 12)
        }),
    );
    track(
        &mut worst,
        check_inputs(&x, |g, v| {
            let y = g.tanh(v[0]);
            project(g, y, 13)
        }),
    );
    track(
        &mut worst,
        check_inputs(&x, |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 14)
        }),
    );
    worst
}

pub fn bias_sum_mean_reshape() -> f64 {
    let mut worst = 0.0f64;
    let xs = [random(&[4, 3], 15, -1.0, 1.0), random(&[3], 16, -1.0, 1.0)];
    track(
        &mut worst,
        check_inputs(&xs, |g, v| {
            let y = g.add_bias(v[0], v[1]).unwrap();
            project(g, y, 17)
        }),
    );
    track(
        &mut worst,
        check_inputs(&xs[..1], |g, v| {
            let t = g.tanh(v[0]);
            g.mean(t)
        }),
    );
    track(
        &mut worst,
        check_inputs(&xs[..1], |g, v| {
            let t = g.tanh(v[0]);
            g.sum(t)
        }),
    );
    track(
        &mut worst,
        check_inputs(&xs[..1], |g, v| {
            let y = g.reshape(v[0], &[2, 6]).unwrap();
            project(g, y, 18)
        }),
    );
    worst
}

pub fn gather_rows_with_repeats() -> f64 {
    let mut worst = 0.0f64;
    let e = check_inputs(&[random(&[5, 3], 19, -1.0, 1.0)], |g, v| {
        let y = g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap();
        project(g, y, 20)
    });
    track(&mut worst, e);
    worst
}

pub fn batched_matvec() -> f64 {
    let mut worst = 0.0f64;
    let xs = [
        random(&[3, 2 * 4], 21, -1.0, 1.0),
        random(&[3, 4], 22, -1.0, 1.0),
    ];
    let e = check_inputs(&xs, |g, v| {
        let y = g.batched_matvec(v[0], v[1], 2).unwrap();
        project(g, y, 23)
    });
    track(&mut worst, e);
    worst
}

pub fn layer_norm() -> f64 {
    let mut worst = 0.0f64;
    let xs = [
        random(&[4, 6], 24, -2.0, 2.0),
        random(&[6], 25, 0.5, 1.5),
        random(&[6], 26, -0.5, 0.5),
    ];
    let e = check_inputs(&xs, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
        project(g, y, 27)
    });
    track(&mut worst, e);
    worst
}

pub fn causal_attention() -> f64 {
    let mut worst = 0.0f64;
    let shape = AttentionShape {
        batch: 2,
        seq: 4,
        heads: 2,
    };
    let xs = [
        random(&[8, 6], 28, -1.0, 1.0),
        random(&[8, 6], 29, -1.0, 1.0),
        random(&[8, 6], 30, -1.0, 1.0),
    ];
    let e = check_inputs(&xs, |g, v| {
        let y = g.causal_attention(v[0], v[1], v[2], shape).unwrap();
        project(g, y, 31)
    });
    track(&mut worst, e);
    worst
}

pub fn softmax_cross_entropy() -> f64 {
    let mut worst = 0.0f64;
    let e = check_inputs(&[random(&[4, 5], 32, -2.0, 2.0)], |g, v| {
        g.softmax_cross_entropy(v[0], &[0, 4, 2, 2]).unwrap()
    });
    track(&mut worst, e);
    worst
}

pub fn linear_readout() -> f64 {
    let mut worst = 0.0f64;
    let states = random(&[6, 8], 33, -1.0, 1.0);
    let targets = [0, 1, 2, 3, 4, 0];
    let mut lin = LinearReadout::<f64>::new(8, 5, 34);
    let e = check_store(
        &mut lin,
        |m| &mut m.store,
        |m| {
            let mut g = Graph::new();
            let s = g.constant(states.clone());
            let logits = m.forward(&mut g, s).unwrap();
            let loss = g.softmax_cross_entropy(logits, &targets).unwrap();
            (g, loss)
        },
    );
    track(&mut worst, e);
    worst
}

pub fn attention_readout() -> f64 {
    let mut worst = 0.0f64;
    let states = random(&[4, 10], 35, -1.0, 1.0);
    let targets = [3, 1, 4, 0];
    let mut att = AttentionReadout::<f64>::new(10, 3, 5, 36);
    let e = check_store(
        &mut att,
        |m| &mut m.store,
        |m| {
            let mut g = Graph::new();
            let s = g.constant(states.clone());
            let logits = m.forward(&mut g, s).unwrap();
            let loss = g.softmax_cross_entropy(logits, &targets).unwrap();
            (g, loss)
        },
    );
    track(&mut worst, e);
    worst
}

pub fn transformer() -> f64 {
    let mut worst = 0.0f64;
    let cfg = TransformerConfig {
        d: 4,
        d_ff: 8,
        heads: 2,
        layers: 1,
        vocab: 5,
        seq_len: 4,
    };
    let mut tf = TransformerModel::<f64>::new(cfg, 37).unwrap();
    // Larger weights than the initializer so every path carries signal.
    let mut r = ChaCha8Rng::seed_from_u64(38);
    for p in tf.store.iter_mut() {
        let gain = if p.name.contains("gamma") { 1.0 } else { 0.0 };
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = gain + r.random_range(-0.6..0.6));
    }
    let tokens = [0, 3, 1, 4, 2, 2, 0, 1, 4, 4, 3, 0];
    let targets = [1, 3, 0];
    let e = check_store(
        &mut tf,
        |m| &mut m.store,
        |m| {
            let mut g = Graph::new();
            let logits = m.forward(&mut g, &tokens).unwrap();
            let loss = g.softmax_cross_entropy(logits, &targets).unwrap();
            (g, loss)
        },
    );
    track(&mut worst, e);
    worst
}

/// Every check, by name.
pub type Case = (&'static str, fn() -> f64);

pub const CASES: &[Case] = &[
    ("matmul", matmul),
    ("add_and_mul", add_and_mul),
    ("scale_tanh_relu", scale_tanh_relu),
    ("bias_sum_mean_reshape", bias_sum_mean_reshape),
    ("gather_rows_with_repeats", gather_rows_with_repeats),
    ("batched_matvec", batched_matvec),
    ("layer_norm", layer_norm),
    ("causal_attention", causal_attention),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("linear_readout", linear_readout),
    ("attention_readout", attention_readout),
    ("transformer", transformer),
];
