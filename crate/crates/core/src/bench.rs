//! Wall-clock cost of training and inference against trainable-parameter
//! count, summarised by the slope of `seconds = α · log10(params)`.
//!
//! Reservoir families are timed without their state dynamics: the drive
//! time is measured separately and reported next to the sample.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{Token, Vocabulary};
use crate::diffcore::{Adam, AdamConfig, Graph, Real, Tensor};
use crate::model::{Family, InitOptions, Model, ModelConfig};
use crate::{Error, Result, SEQ_LEN};

/// Shortest measurement accepted as meaningful.
pub const MIN_MEASURABLE: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Infer,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Infer => "infer",
        }
    }
}

/// The fixed amount of work timed per repetition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub train_batches: usize,
    pub batch_size: usize,
    pub infer_chars: usize,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            train_batches: 50,
            batch_size: 1024,
            infer_chars: 2000,
        }
    }
}

impl Workload {
    pub fn describe(&self, phase: Phase) -> String {
        match phase {
            Phase::Train => format!("{}x{}", self.train_batches, self.batch_size),
            Phase::Infer => format!("{}chars", self.infer_chars),
        }
    }

    fn units(&self, phase: Phase) -> usize {
        match phase {
            Phase::Train => self.train_batches * self.batch_size,
            Phase::Infer => self.infer_chars,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub repetitions: usize,
    pub threads: usize,
    pub seed: u64,
    pub lr: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            repetitions: 3,
            threads: 1,
            seed: 0,
            lr: AdamConfig::default().lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub family: Family,
    pub params: usize,
    pub phase: Phase,
    /// Median over repetitions, reservoir drive excluded.
    pub seconds: f64,
    /// Reservoir drive time for the same workload (0 for the transformer).
    pub drive_seconds: f64,
    pub workload: String,
    pub threads: usize,
    pub excludes_reservoir_drive: bool,
    pub repetitions: Vec<f64>,
}

pub const CSV_HEADER: &str = "family,params,phase,seconds,drive_seconds,workload,threads";

impl TimingSample {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.family,
            self.params,
            self.phase.name(),
            self.seconds,
            self.drive_seconds,
            self.workload,
            self.threads
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Reservoir states for the consecutive windows `0..count` of `tokens`,
/// produced by one running state (one update per character).
fn drive_states<T: Real>(
    model: &Model<T>,
    tokens: &[Token],
    count: usize,
) -> Result<(Option<Tensor<T>>, f64)> {
    let Some(res) = model.reservoir() else {
        return Ok((None, 0.0));
    };
    let t = Instant::now();
    let mut r = res.run_from(&vec![T::zero(); res.size()], &tokens[..SEQ_LEN - 1])?;
    let mut all = Vec::with_capacity(count * res.size());
    for s in 0..count {
        r = res.step(&r, tokens[s + SEQ_LEN - 1])?;
        all.extend_from_slice(&r);
    }
    let states = Tensor::from_vec(&[count, res.size()], all)?;
    Ok((Some(states), t.elapsed().as_secs_f64()))
}

fn rows<T: Real>(all: &Tensor<T>, lo: usize, count: usize) -> Result<Tensor<T>> {
    let n = all.shape()[1];
    Tensor::from_vec(&[count, n], all.data()[lo * n..(lo + count) * n].to_vec())
}

/// `units` optimizer steps' worth of windows, `batch_size` at a time.
fn run_train<T: Real>(
    model: &Model<T>,
    tokens: &[Token],
    states: Option<&Tensor<T>>,
    units: usize,
    batch_size: usize,
    lr: f64,
) -> Result<f64> {
    let mut model = model.clone();
    let mut adam = Adam::new(
        model.store(),
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
    );
    let t = Instant::now();
    let mut lo = 0;
    while lo < units {
        let count = batch_size.min(units - lo);
        let targets: Vec<usize> = (lo..lo + count)
            .map(|s| tokens[s + SEQ_LEN] as usize)
            .collect();
        let mut g = Graph::new();
        let logits = match states {
            Some(all) => {
                let s = g.constant(rows(all, lo, count)?);
                model.readout_forward(&mut g, s)?
            }
            None => {
                let windows: Vec<&[Token]> =
                    (lo..lo + count).map(|s| &tokens[s..s + SEQ_LEN]).collect();
                model.forward_windows(&mut g, &windows)?
            }
        };
        let loss = g.softmax_cross_entropy(logits, &targets)?;
        g.backward(loss)?;
        let store = model.store_mut();
        store.zero_grad();
        store.accumulate_grads(&g)?;
        adam.step(store)?;
        lo += count;
    }
    Ok(t.elapsed().as_secs_f64())
}

fn argmax<T: Real>(row: &[T]) -> Token {
    let mut best = 0;
    for (i, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = i;
        }
    }
    best as Token
}

/// Next-character prediction one position at a time over `units`
/// consecutive contexts.
fn run_infer<T: Real>(
    model: &Model<T>,
    tokens: &[Token],
    states: Option<&Tensor<T>>,
    units: usize,
) -> Result<f64> {
    let t = Instant::now();
    let mut checksum = 0u64;
    for s in 0..units {
        let next = match states {
            Some(all) => {
                let mut g = Graph::new();
                let x = g.constant(rows(all, s, 1)?);
                let logits = model.readout_forward(&mut g, x)?;
                argmax(g.value(logits).data())
            }
            None => argmax(model.logits_for_windows(&[&tokens[s..s + SEQ_LEN]])?.data()),
        };
        checksum = checksum.wrapping_add(next as u64);
    }
    std::hint::black_box(checksum);
    Ok(t.elapsed().as_secs_f64())
}

/// Times one configuration: a short warmup, then the median of
/// `opts.repetitions` runs of the workload.
pub fn time_model<T: Real>(
    config: ModelConfig,
    vocab: &Vocabulary,
    tokens: &[Token],
    workload: &Workload,
    phase: Phase,
    opts: &BenchOptions,
) -> Result<TimingSample> {
    if workload.units(phase) == 0 || opts.repetitions == 0 {
        return Err(Error::Calibration(format!(
            "empty {} workload; use a positive size and repetition count",
            phase.name()
        )));
    }
    let model = Model::<T>::new(
        config,
        vocab.clone(),
        InitOptions {
            seed: opts.seed,
            ..InitOptions::default()
        },
    )?;
    let units = workload.units(phase);
    let needed = units + SEQ_LEN + 1;
    if tokens.len() < needed {
        return Err(Error::InvalidCorpus(format!(
            "benchmark text has {} characters, workload needs {needed}",
            tokens.len()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::Resource(format!("thread pool: {e}")))?;
    let (states, drive_seconds) = pool.install(|| drive_states(&model, tokens, units))?;
    let once = |units: usize| -> Result<f64> {
        match phase {
            Phase::Train => run_train(
                &model,
                tokens,
                states.as_ref(),
                units,
                workload.batch_size,
                opts.lr,
            ),
            Phase::Infer => run_infer(&model, tokens, states.as_ref(), units),
        }
    };
    let warmup_units = match phase {
        Phase::Train => workload.batch_size.min(units),
        Phase::Infer => (units / 10).max(1),
    };
    let secs = pool.install(|| -> Result<Vec<f64>> {
        once(warmup_units)?;
        (0..opts.repetitions).map(|_| once(units)).collect()
    })?;
    let seconds = median(secs.clone());
    if seconds < MIN_MEASURABLE.as_secs_f64() {
        return Err(Error::Calibration(format!(
            "{} {} workload {} took {:.4} s, below the {} ms timer floor; use a larger workload",
            config.describe(),
            phase.name(),
            workload.describe(phase),
            seconds,
            MIN_MEASURABLE.as_millis()
        )));
    }
    Ok(TimingSample {
        family: config.family(),
        params: model.trainable_parameters(),
        phase,
        seconds,
        drive_seconds,
        workload: workload.describe(phase),
        threads: opts.threads.max(1),
        excludes_reservoir_drive: config.family().uses_reservoir(),
        repetitions: secs,
    })
}

/// No-intercept least squares of `seconds` on `log10(params)`.
pub fn fit_alpha(samples: &[(usize, f64)]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    if let Some((p, _)) = samples.iter().find(|(p, _)| *p == 0) {
        return Err(Error::Usage(format!(
            "parameter count {p} has no logarithm"
        )));
    }
    let (mut yu, mut uu) = (0.0, 0.0);
    for &(p, y) in samples {
        let u = (p as f64).log10();
        yu += y * u;
        uu += u * u;
    }
    if uu == 0.0 {
        return Err(Error::DegenerateFit("every log10(params) is zero".into()));
    }
    Ok(yu / uu)
}

/// Ordinary least squares `seconds = slope · log10(params) + intercept`.
pub fn fit_affine(samples: &[(usize, f64)]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::DegenerateFit("need at least 2 samples".into()));
    }
    let n = samples.len() as f64;
    let us: Vec<f64> = samples.iter().map(|(p, _)| (*p as f64).log10()).collect();
    let mu = us.iter().sum::<f64>() / n;
    let my = samples.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = us.iter().map(|u| (u - mu) * (u - mu)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit(
            "all samples share one parameter count".into(),
        ));
    }
    let sxy: f64 = us
        .iter()
        .zip(samples)
        .map(|(u, (_, y))| (u - mu) * (y - my))
        .sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mu))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaFit {
    pub family: Family,
    pub phase: Phase,
    pub alpha: f64,
    /// Set when the affine diagnostic was requested.
    pub affine: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepReport {
    pub samples: Vec<TimingSample>,
    pub fits: Vec<AlphaFit>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for x in &self.samples {
            s.push_str(&x.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn alpha(&self, family: Family, phase: Phase) -> Option<f64> {
        self.fits
            .iter()
            .find(|f| f.family == family && f.phase == phase)
            .map(|f| f.alpha)
    }

    pub fn alpha_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.fits).expect("fits serialize")
    }
}

/// Times every configuration of every family in both phases and fits
/// one slope per (family, phase).
pub fn sweep<T: Real>(
    configs: &[ModelConfig],
    vocab: &Vocabulary,
    tokens: &[Token],
    workload: &Workload,
    opts: &BenchOptions,
    affine: bool,
    mut progress: impl FnMut(&TimingSample),
) -> Result<SweepReport> {
    for c in configs {
        c.validate()?;
    }
    let mut report = SweepReport::default();
    for phase in [Phase::Train, Phase::Infer] {
        for &cfg in configs {
            let s = time_model::<T>(cfg, vocab, tokens, workload, phase, opts)?;
            progress(&s);
            report.samples.push(s);
        }
    }
    for phase in [Phase::Train, Phase::Infer] {
        for family in Family::ALL {
            let pts: Vec<(usize, f64)> = report
                .samples
                .iter()
                .filter(|s| s.family == family && s.phase == phase)
                .map(|s| (s.params, s.seconds))
                .collect();
            if pts.is_empty() {
                continue;
            }
            report.fits.push(AlphaFit {
                family,
                phase,
                alpha: fit_alpha(&pts)?,
                affine: if affine { fit_affine(&pts).ok() } else { None },
            });
        }
    }
    Ok(report)
}
