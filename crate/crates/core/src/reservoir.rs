//! Fixed echo-state dynamics.
//!
//! The state update is `r_t = tanh(r_{t-1} · W_res + x_t · W_in)` with
//! `x_t` the row of a fixed random embedding for the input character. None
//! of the reservoir tensors is trained. `W_res` is rescaled so its largest
//! singular value equals `rho`, which makes the update a contraction for
//! `rho < 1` and gives the echo-state property a checkable form.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Token};
use crate::diffcore::{matmul_into, Real, Tensor};
use crate::{rng, Error, Result, SEQ_LEN};

/// Everything needed to rebuild a reservoir bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReservoirSpec {
    pub n: usize,
    pub d: usize,
    pub vocab: usize,
    pub rho: f64,
    pub seed: u64,
}

/// How window states are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DriveMode {
    /// Every window is driven from the zero state.
    #[default]
    ZeroReset,
    /// One pass over the shard; windows starting before `washout` are
    /// dropped.
    Continuous { washout: usize },
}

#[derive(Debug, Clone)]
pub struct ReservoirParams<T> {
    pub spec: ReservoirSpec,
    /// `[V × d]`
    pub embedding: Tensor<T>,
    /// `[d × N]`
    pub w_in: Tensor<T>,
    /// `[N × N]`
    pub w_res: Tensor<T>,
    /// `embedding · w_in`, one `[N]` drive row per token.
    drive: Tensor<T>,
}

/// Builds the fixed reservoir: embedding and input weights uniform in
/// `(-0.5, 0.5)`, recurrent weights standard normal rescaled to largest
/// singular value `rho`.
pub fn init_reservoir<T: Real>(
    n: usize,
    d: usize,
    vocab: usize,
    rho: f64,
    seed: u64,
) -> Result<ReservoirParams<T>> {
    if n == 0 || d == 0 || vocab == 0 {
        return Err(Error::Config(format!(
            "reservoir needs N, d, V >= 1 (got N={n}, d={d}, V={vocab})"
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Config(format!(
            "reservoir scale rho={rho} must be > 0"
        )));
    }
    let mut r = rng::seeded(seed);
    let mut uniform =
        |len: usize| -> Vec<f64> { (0..len).map(|_| r.random::<f64>() - 0.5).collect() };
    let embedding = uniform(vocab * d);
    let w_in = uniform(d * n);
    let mut w_res: Vec<f64> = (0..n * n).map(|_| r.sample(StandardNormal)).collect();
    let sigma = max_singular_value(&w_res, n);
    let factor = rho / sigma;
    w_res.iter_mut().for_each(|x| *x *= factor);

    let to_t = |v: Vec<f64>, shape: &[usize]| -> Tensor<T> {
        Tensor::from_vec(shape, v.into_iter().map(T::of).collect()).expect("shape")
    };
    let embedding = to_t(embedding, &[vocab, d]);
    let w_in = to_t(w_in, &[d, n]);
    let w_res = to_t(w_res, &[n, n]);
    let drive = embedding.matmul(&w_in)?;
    Ok(ReservoirParams {
        spec: ReservoirSpec {
            n,
            d,
            vocab,
            rho,
            seed,
        },
        embedding,
        w_in,
        w_res,
        drive,
    })
}

impl<T: Real> ReservoirParams<T> {
    pub fn from_spec(spec: &ReservoirSpec) -> Result<Self> {
        init_reservoir(spec.n, spec.d, spec.vocab, spec.rho, spec.seed)
    }

    pub fn size(&self) -> usize {
        self.spec.n
    }

    /// Reservoir tensors are never trained.
    pub fn trainable_parameters(&self) -> usize {
        0
    }

    fn drive_row(&self, x: Token) -> Result<&[T]> {
        if x as usize >= self.spec.vocab {
            return Err(Error::Index {
                what: "reservoir input token",
                index: x as usize,
                bound: self.spec.vocab,
            });
        }
        Ok(self.drive.row(x as usize))
    }

    /// One update from `r_prev` with input token `x`.
    pub fn step(&self, r_prev: &[T], x: Token) -> Result<Vec<T>> {
        let n = self.spec.n;
        if r_prev.len() != n {
            return Err(Error::shape("reservoir step", &[r_prev.len()], &[n]));
        }
        let drive = self.drive_row(x)?;
        // Row vector times matrix, one matrix row at a time.
        let mut out = vec![T::zero(); n];
        for (&ri, w) in r_prev.iter().zip(self.w_res.data().chunks_exact(n)) {
            for (o, &wv) in out.iter_mut().zip(w) {
                *o += ri * wv;
            }
        }
        for (o, &u) in out.iter_mut().zip(drive) {
            *o = (*o + u).tanh();
        }
        Ok(out)
    }

    /// Same as [`ReservoirParams::step`] for a whole batch of states in place.
    fn step_rows(&self, states: &mut [T], scratch: &mut [T], inputs: &[Token]) -> Result<()> {
        let n = self.spec.n;
        let b = inputs.len();
        matmul_into(b, n, n, states, self.w_res.data(), scratch);
        for (row, (srow, &x)) in states.chunks_mut(n).zip(scratch.chunks(n).zip(inputs)) {
            let drive = self.drive_row(x)?;
            for ((o, &s), &u) in row.iter_mut().zip(srow).zip(drive) {
                *o = (s + u).tanh();
            }
        }
        Ok(())
    }

    /// Final state after 32 steps from zero.
    pub fn drive_window(&self, window: &[Token]) -> Result<Vec<T>> {
        Ok(self.drive_batch(&[window])?.into_data())
    }

    /// Zero-reset final states for several windows, one row each.
    pub fn drive_batch(&self, windows: &[&[Token]]) -> Result<Tensor<T>> {
        let n = self.spec.n;
        let mut states = Tensor::zeros(&[windows.len(), n]);
        self.drive_into(windows, states.data_mut())?;
        Ok(states)
    }

    fn drive_into(&self, windows: &[&[Token]], states: &mut [T]) -> Result<()> {
        for w in windows {
            if w.len() != SEQ_LEN {
                return Err(Error::shape("drive_window", &[w.len()], &[SEQ_LEN]));
            }
        }
        states.iter_mut().for_each(|x| *x = T::zero());
        let mut scratch = vec![T::zero(); states.len()];
        let mut inputs = vec![0; windows.len()];
        for t in 0..SEQ_LEN {
            for (slot, w) in inputs.iter_mut().zip(windows) {
                *slot = w[t];
            }
            self.step_rows(states, &mut scratch, &inputs)?;
        }
        Ok(())
    }

    /// Runs from an arbitrary initial state through `inputs`, returning the
    /// final state.
    pub fn run_from(&self, initial: &[T], inputs: &[Token]) -> Result<Vec<T>> {
        let mut r = initial.to_vec();
        for &x in inputs {
            r = self.step(&r, x)?;
        }
        Ok(r)
    }
}

/// Reservoir states for every window of one shard.
#[derive(Debug, Clone)]
pub struct ReservoirStateBank<T> {
    /// `[S × N]`
    pub states: Tensor<T>,
    pub targets: Vec<Token>,
    pub shard_id: usize,
}

impl<T: Real> ReservoirStateBank<T> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Copies the given rows into a `[rows.len() × N]` batch.
    pub fn gather(&self, rows: &[usize]) -> Tensor<T> {
        let n = self.states.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(self.states.row(r));
        }
        Tensor::from_vec(&[rows.len(), n], data).expect("shape")
    }
}

/// Default cap on a single bank's memory.
pub const DEFAULT_MEMORY_CAP: usize = 4 << 30;
const DRIVE_CHUNK: usize = 256;

fn check_memory<T: Real>(rows: usize, n: usize, cap: usize) -> Result<()> {
    let need = rows
        .saturating_mul(n)
        .saturating_mul(T::DTYPE.size())
        .saturating_add(rows * std::mem::size_of::<Token>());
    if need > cap {
        return Err(Error::Resource(format!(
            "state bank needs {need} bytes ({rows} windows x {n} nodes), cap is {cap}"
        )));
    }
    Ok(())
}

/// Drives every window of `shard` (zero-reset) and keeps the final states.
/// Row `i` is exactly `drive_window(window_i)`.
pub fn precompute_shard<T: Real>(
    shard: &[Token],
    shard_id: usize,
    params: &ReservoirParams<T>,
    stride: usize,
    memory_cap: usize,
) -> Result<ReservoirStateBank<T>> {
    let windows: Vec<_> = corpus::iter_windows(shard, stride)?.collect();
    let n = params.size();
    check_memory::<T>(windows.len(), n, memory_cap)?;
    let mut states = Tensor::zeros(&[windows.len(), n]);
    states
        .data_mut()
        .par_chunks_mut(DRIVE_CHUNK * n)
        .zip(windows.par_chunks(DRIVE_CHUNK))
        .try_for_each(|(out, ws)| {
            let inputs: Vec<&[Token]> = ws.iter().map(|w| w.input).collect();
            params.drive_into(&inputs, out)
        })?;
    Ok(ReservoirStateBank {
        states,
        targets: windows.iter().map(|w| w.target).collect(),
        shard_id,
    })
}

/// One continuous pass over `shard`; the state paired with window `s` is
/// the state after consuming `shard[..s + 32]`.
pub fn precompute_shard_continuous<T: Real>(
    shard: &[Token],
    shard_id: usize,
    params: &ReservoirParams<T>,
    stride: usize,
    washout: usize,
    memory_cap: usize,
) -> Result<ReservoirStateBank<T>> {
    let total = corpus::iter_windows(shard, stride)?.len();
    let keep: Vec<usize> = (0..total)
        .map(|i| i * stride)
        .filter(|&s| s >= washout)
        .collect();
    let n = params.size();
    check_memory::<T>(keep.len(), n, memory_cap)?;
    let mut states = Vec::with_capacity(keep.len() * n);
    let mut targets = Vec::with_capacity(keep.len());
    let mut r = vec![T::zero(); n];
    let mut next = keep.iter().peekable();
    for (t, &x) in shard.iter().enumerate() {
        let Some(&&start) = next.peek() else { break };
        r = params.step(&r, x)?;
        if t + 1 == start + SEQ_LEN {
            states.extend_from_slice(&r);
            targets.push(shard[start + SEQ_LEN]);
            next.next();
        }
    }
    Ok(ReservoirStateBank {
        states: Tensor::from_vec(&[targets.len(), n], states)?,
        targets,
        shard_id,
    })
}

/// Largest singular value of a row-major `n × n` matrix, from Lanczos
/// iterations on `WᵀW` with full re-orthogonalization.
pub fn max_singular_value(w: &[f64], n: usize) -> f64 {
    assert_eq!(w.len(), n * n);
    let max_iter = n.min(300);
    // Deterministic, non-degenerate start vector.
    let mut q: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i as f64) * 0.618_033_988_75).fract())
        .collect();
    normalize(&mut q);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(max_iter);
    let (mut alphas, mut betas) = (Vec::new(), Vec::new());
    let mut wq = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut last = 0.0;
    let mut stable = 0;
    for j in 0..max_iter {
        matmul_into(n, n, 1, w, &q, &mut wq);
        // z = Wᵀ (W q)
        matmul_into(1, n, n, &wq, w, &mut z);
        let alpha = dot(&q, &z);
        basis.push(q.clone());
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &z);
                z.iter_mut().zip(b).for_each(|(x, &y)| *x -= c * y);
            }
        }
        alphas.push(alpha);
        let beta = dot(&z, &z).sqrt();
        let lambda = tridiagonal_max_eigenvalue(&alphas, &betas);
        if (lambda - last).abs() <= 1e-15 * lambda {
            stable += 1;
        } else {
            stable = 0;
        }
        last = lambda;
        if stable >= 3 || beta <= 1e-13 * lambda || j + 1 == max_iter {
            break;
        }
        betas.push(beta);
        q.iter_mut().zip(&z).for_each(|(x, &y)| *x = y / beta);
    }
    last.sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let s = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= s);
}

/// Largest eigenvalue of the symmetric tridiagonal matrix with diagonal
/// `a` and off-diagonal `b` by Sturm-sequence bisection.
fn tridiagonal_max_eigenvalue(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let off = |i: usize| if i < b.len() { b[i].abs() } else { 0.0 };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, &ai) in a.iter().enumerate() {
        let r = off(i) + if i > 0 { off(i - 1) } else { 0.0 };
        lo = lo.min(ai - r);
        hi = hi.max(ai + r);
    }
    // Number of eigenvalues strictly below x.
    let count_below = |x: f64| {
        let mut c = 0;
        let mut d = 1.0;
        for i in 0..n {
            let b2 = if i > 0 { b[i - 1] * b[i - 1] } else { 0.0 };
            d = a[i] - x - if i > 0 { b2 / d } else { 0.0 };
            if d == 0.0 {
                d = -f64::EPSILON * (x.abs() + 1.0);
            }
            if d < 0.0 {
                c += 1;
            }
        }
        c
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count_below(mid) < n {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let a = init_reservoir::<f64>(20, 16, 10, 0.9, 7).unwrap();
        let b = init_reservoir::<f64>(20, 16, 10, 0.9, 7).unwrap();
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.w_in, b.w_in);
        assert_eq!(a.w_res, b.w_res);
        let c = init_reservoir::<f64>(20, 16, 10, 0.9, 8).unwrap();
        assert_ne!(a.w_res, c.w_res);
    }

    #[test]
    fn rejects_empty_dimensions() {
        assert!(matches!(
            init_reservoir::<f64>(0, 16, 10, 0.9, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            init_reservoir::<f64>(5, 0, 10, 0.9, 1),
            Err(Error::Config(_))
        ));
        assert!(init_reservoir::<f64>(5, 4, 10, 0.0, 1).is_err());
    }

    #[test]
    fn input_distributions_are_in_range() {
        let p = init_reservoir::<f64>(30, 16, 59, 0.9, 2).unwrap();
        assert!(p.embedding.data().iter().all(|x| x.abs() < 0.5));
        assert!(p.w_in.data().iter().all(|x| x.abs() < 0.5));
        assert_eq!(p.trainable_parameters(), 0);
    }

    #[test]
    fn tridiagonal_eigenvalue_matches_closed_form() {
        // Path-graph Laplacian-like matrix: eigenvalues 2 - 2cos(k pi/(n+1)).
        let n = 12;
        let a = vec![2.0; n];
        let b = vec![-1.0; n - 1];
        let want = 2.0 - 2.0 * (n as f64 * std::f64::consts::PI / (n as f64 + 1.0)).cos();
        assert!((tridiagonal_max_eigenvalue(&a, &b) - want).abs() < 1e-12);
    }

    #[test]
    fn scalar_step_is_tanh_of_drive() {
        let mut p = init_reservoir::<f64>(1, 1, 2, 0.9, 1).unwrap();
        p.w_res = Tensor::zeros(&[1, 1]);
        p.drive = Tensor::from_vec(&[2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(p.step(&[0.0], 0).unwrap(), vec![0.0]);
        let r = p.step(&[0.3], 1).unwrap();
        assert!((r[0] - 1f64.tanh()).abs() < 1e-15);
        assert!(matches!(p.step(&[0.0], 2), Err(Error::Index { .. })));
    }

    #[test]
    fn zero_drive_window_gives_zero_state() {
        let mut p = init_reservoir::<f64>(8, 4, 3, 0.9, 1).unwrap();
        let mut drive = p.drive.clone();
        drive.data_mut()[..8].iter_mut().for_each(|x| *x = 0.0);
        p.drive = drive;
        let s = p.drive_window(&[0; SEQ_LEN]).unwrap();
        assert!(s.iter().all(|&x| x == 0.0));
        assert!(matches!(p.drive_window(&[0; 31]), Err(Error::Shape { .. })));
    }

    #[test]
    fn bank_rows_match_independent_drives() {
        let p = init_reservoir::<f32>(40, 16, 7, 0.9, 3).unwrap();
        let shard: Vec<Token> = (0..700).map(|i| ((i * 31 + i / 5) % 7) as Token).collect();
        let bank = precompute_shard(&shard, 0, &p, 1, DEFAULT_MEMORY_CAP).unwrap();
        assert_eq!(bank.states.shape(), &[700 - 32, 40]);
        for (i, w) in corpus::iter_windows(&shard, 1).unwrap().enumerate() {
            assert_eq!(
                bank.states.row(i),
                p.drive_window(w.input).unwrap().as_slice()
            );
            assert_eq!(bank.targets[i], w.target);
        }
        assert!(bank.states.data().iter().all(|x| x.abs() < 1.0));

        let one = precompute_shard(&shard[..33], 0, &p, 1, DEFAULT_MEMORY_CAP).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn bank_respects_memory_cap() {
        let p = init_reservoir::<f32>(40, 16, 7, 0.9, 3).unwrap();
        let shard: Vec<Token> = vec![1; 500];
        assert!(matches!(
            precompute_shard(&shard, 0, &p, 1, 1000),
            Err(Error::Resource(_))
        ));
    }

    #[test]
    fn continuous_bank_matches_sequential_run() {
        let p = init_reservoir::<f64>(10, 16, 5, 0.9, 4).unwrap();
        let shard: Vec<Token> = (0..120).map(|i| (i % 5) as Token).collect();
        let bank = precompute_shard_continuous(&shard, 2, &p, 3, 32, DEFAULT_MEMORY_CAP).unwrap();
        let starts: Vec<usize> = (0..)
            .map(|i| i * 3)
            .take_while(|s| s + 32 < 120)
            .filter(|&s| s >= 32)
            .collect();
        assert_eq!(bank.len(), starts.len());
        for (row, &s) in starts.iter().enumerate() {
            let r = p.run_from(&[0.0; 10], &shard[..s + 32]).unwrap();
            assert_eq!(bank.states.row(row), r.as_slice());
            assert_eq!(bank.targets[row], shard[s + 32]);
        }
    }
}
