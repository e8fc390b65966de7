//! Shard-wise training shared by all model families.
//!
//! One full pass visits the five training shards in order. Reservoir
//! families drive every window of the current shard once into a
//! [`ReservoirStateBank`] and then run `shard_epochs` shuffled epochs over
//! it; the transformer iterates the shard's windows directly. Every step
//! is forward, cross-entropy, backward and one Adam update.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Corpus, Token};
use crate::diffcore::{Adam, AdamConfig, Graph, Real, Tensor};
use crate::model::Model;
use crate::reservoir::{self, DriveMode, ReservoirStateBank};
use crate::{rng, Error, Result, SEQ_LEN};

/// Where reservoir states come from during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSource {
    /// Drive the whole shard once, then train from the stored states.
    #[default]
    Bank,
    /// Drive every mini-batch's windows again at each step.
    OnTheFly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub batch_size: usize,
    pub lr: f64,
    pub shard_epochs: usize,
    pub full_passes: usize,
    pub seed: u64,
    /// Steps between test-loss probes; 0 disables probes.
    pub eval_every: usize,
    /// Size of the fixed test subsample used by probes.
    pub probe_windows: usize,
    /// Run a full test-shard evaluation after each shard.
    pub eval_at_shard_end: bool,
    pub deterministic: bool,
    /// Distance between consecutive training window starts.
    pub stride: usize,
    pub state_source: StateSource,
    /// Upper bound on one state bank, in bytes.
    pub memory_cap: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            batch_size: 1024,
            lr: 1e-4,
            shard_epochs: 5,
            full_passes: 3,
            seed: 0,
            eval_every: 50,
            probe_windows: 10_000,
            eval_at_shard_end: true,
            deterministic: false,
            stride: 1,
            state_source: StateSource::Bank,
            memory_cap: reservoir::DEFAULT_MEMORY_CAP,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("shard_epochs", self.shard_epochs),
            ("full_passes", self.full_passes),
            ("stride", self.stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub pass: usize,
    pub shard: usize,
    pub shard_epoch: usize,
    pub step: usize,
    pub train_ce: f64,
    /// Probe (or full evaluation at the last step of a shard).
    pub test_ce: Option<f64>,
    /// Wall time since the start of training; 0 in deterministic mode.
    pub elapsed_s: f64,
}

pub const CSV_HEADER: &str = "pass,shard,shard_epoch,step,train_ce,test_ce,elapsed_s";

impl LogRecord {
    pub fn csv_line(&self) -> String {
        let test = self.test_ce.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.pass, self.shard, self.shard_epoch, self.step, self.train_ce, test, self.elapsed_s
        )
    }
}

/// Full test-shard cross-entropy after a shard finished.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShardEval {
    pub pass: usize,
    pub shard: usize,
    pub test_ce: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    pub shard_evals: Vec<ShardEval>,
    pub meta: serde_json::Value,
    pub wall_seconds: f64,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn first_train_ce(&self) -> Option<f64> {
        self.records.first().map(|r| r.train_ce)
    }

    pub fn final_test_ce(&self) -> Option<f64> {
        self.shard_evals.last().map(|e| e.test_ce)
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_ce).collect()
    }

    /// Distinct `(pass, shard, shard_epoch)` segments in log order.
    pub fn segments(&self) -> Vec<(usize, usize, usize)> {
        let mut out: Vec<(usize, usize, usize)> = Vec::new();
        for r in &self.records {
            let key = (r.pass, r.shard, r.shard_epoch);
            if out.last() != Some(&key) {
                out.push(key);
            }
        }
        out
    }
}

/// Hooks called while training runs, e.g. to stream the log to disk.
pub trait TrainObserver<T: Real> {
    fn record(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    fn shard_done(&mut self, _eval: Option<&ShardEval>, _model: &Model<T>) -> Result<()> {
        Ok(())
    }
}

impl<T: Real> TrainObserver<T> for () {}

/// Cross-entropy of one logit row in f64.
fn row_ce<T: Real>(row: &[T], target: Token) -> f64 {
    let max = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
    max + sum.ln() - row[target as usize].as_f64()
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(self) -> f64 {
        self.sum + self.carry
    }
}

fn sum_ce<T: Real>(acc: &mut CompensatedSum, logits: &Tensor<T>, targets: &[Token]) {
    let v = logits.shape()[1];
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        acc.add(row_ce(row, t));
    }
}

const EVAL_CHUNK: usize = 1024;

/// A fixed set of windows to score.
enum EvalSet<'a, T> {
    States(ReservoirStateBank<T>),
    Windows {
        shard: &'a [Token],
        starts: Vec<usize>,
    },
}

impl<'a, T: Real> EvalSet<'a, T> {
    fn build(model: &Model<T>, shard: &'a [Token], starts: Vec<usize>, cap: usize) -> Result<Self> {
        let Some(res) = model.reservoir() else {
            return Ok(EvalSet::Windows { shard, starts });
        };
        let need = starts.len() * res.size() * T::DTYPE.size();
        if need > cap {
            return Ok(EvalSet::Windows { shard, starts });
        }
        let windows: Vec<&[Token]> = starts.iter().map(|&s| &shard[s..s + SEQ_LEN]).collect();
        let mut states = Vec::with_capacity(need / T::DTYPE.size());
        for chunk in windows.chunks(EVAL_CHUNK) {
            states.extend(res.drive_batch(chunk)?.into_data());
        }
        Ok(EvalSet::States(ReservoirStateBank {
            states: Tensor::from_vec(&[starts.len(), res.size()], states)?,
            targets: starts.iter().map(|&s| shard[s + SEQ_LEN]).collect(),
            shard_id: usize::MAX,
        }))
    }

    fn mean_ce(&self, model: &Model<T>) -> Result<f64> {
        let (total, count) = match self {
            EvalSet::States(bank) => {
                let mut total = CompensatedSum::default();
                let idx: Vec<usize> = (0..bank.len()).collect();
                for rows in idx.chunks(EVAL_CHUNK) {
                    let mut g = Graph::new();
                    let s = g.constant(bank.gather(rows));
                    let out = model.readout_forward(&mut g, s)?;
                    let t: Vec<Token> = rows.iter().map(|&r| bank.targets[r]).collect();
                    sum_ce(&mut total, g.value(out), &t);
                }
                (total.total(), bank.len())
            }
            EvalSet::Windows { shard, starts } => {
                let mut total = CompensatedSum::default();
                for chunk in starts.chunks(EVAL_CHUNK) {
                    let windows: Vec<&[Token]> =
                        chunk.iter().map(|&s| &shard[s..s + SEQ_LEN]).collect();
                    let t: Vec<Token> = chunk.iter().map(|&s| shard[s + SEQ_LEN]).collect();
                    sum_ce(&mut total, &model.logits_for_windows(&windows)?, &t);
                }
                (total.total(), starts.len())
            }
        };
        if count == 0 {
            return Err(Error::InvalidCorpus("no windows to evaluate".into()));
        }
        Ok(total / count as f64)
    }
}

fn all_starts(shard: &[Token]) -> Vec<usize> {
    (0..corpus::window_count(shard.len(), 1)).collect()
}

/// Mean cross-entropy over every stride-1 window of `shard`.
pub fn evaluate_shard<T: Real>(model: &Model<T>, shard: &[Token]) -> Result<f64> {
    if model.reservoir().is_some() {
        if let DriveMode::Continuous { washout } = model.init.drive_mode {
            let res = model.reservoir().expect("reservoir family");
            let bank = reservoir::precompute_shard_continuous(
                shard,
                0,
                res,
                1,
                washout,
                reservoir::DEFAULT_MEMORY_CAP,
            )?;
            return EvalSet::States(bank).mean_ce(model);
        }
    }
    corpus::iter_windows(shard, 1)?.len();
    EvalSet::build(
        model,
        shard,
        all_starts(shard),
        reservoir::DEFAULT_MEMORY_CAP,
    )?
    .mean_ce(model)
}

/// Mean test-shard cross-entropy of `model` on `corpus`. The model must
/// have been trained with the same vocabulary.
pub fn evaluate<T: Real>(model: &Model<T>, corpus: &Corpus) -> Result<f64> {
    if model.vocab != corpus.vocab {
        return Err(Error::Config(format!(
            "vocabulary mismatch: checkpoint has {} symbols, corpus has {}",
            model.vocab.len(),
            corpus.vocab.len()
        )));
    }
    evaluate_shard(model, corpus.sharded.test_shard())
}

/// Training windows of one shard, as states or raw tokens.
enum ShardData<'a, T> {
    Bank(ReservoirStateBank<T>),
    Windows {
        shard: &'a [Token],
        starts: Vec<usize>,
    },
}

impl<'a, T: Real> ShardData<'a, T> {
    fn prepare(model: &Model<T>, shard: &'a [Token], id: usize, plan: &TrainPlan) -> Result<Self> {
        let res = match (model.reservoir(), plan.state_source) {
            (Some(res), StateSource::Bank) => res,
            (Some(_), StateSource::OnTheFly) => {
                if model.init.drive_mode != DriveMode::ZeroReset {
                    return Err(Error::Config(
                        "on-the-fly states need zero-reset drive mode".into(),
                    ));
                }
                let starts = corpus::iter_windows(shard, plan.stride)?
                    .enumerate()
                    .map(|(i, _)| i * plan.stride)
                    .collect();
                return Ok(ShardData::Windows { shard, starts });
            }
            (None, _) => {
                let n = corpus::iter_windows(shard, plan.stride)?.len();
                let starts = (0..n).map(|i| i * plan.stride).collect();
                return Ok(ShardData::Windows { shard, starts });
            }
        };
        let bank = match model.init.drive_mode {
            DriveMode::ZeroReset => {
                reservoir::precompute_shard(shard, id, res, plan.stride, plan.memory_cap)?
            }
            DriveMode::Continuous { washout } => reservoir::precompute_shard_continuous(
                shard,
                id,
                res,
                plan.stride,
                washout,
                plan.memory_cap,
            )?,
        };
        Ok(ShardData::Bank(bank))
    }

    fn len(&self) -> usize {
        match self {
            ShardData::Bank(b) => b.len(),
            ShardData::Windows { starts, .. } => starts.len(),
        }
    }

    /// Records the batch on `g` and returns the mean cross-entropy node.
    fn batch_loss(
        &self,
        model: &Model<T>,
        g: &mut Graph<T>,
        rows: &[usize],
    ) -> Result<crate::diffcore::Var> {
        let (logits, targets) = match self {
            ShardData::Bank(bank) => {
                let s = g.constant(bank.gather(rows));
                let t: Vec<usize> = rows.iter().map(|&r| bank.targets[r] as usize).collect();
                (model.readout_forward(g, s)?, t)
            }
            ShardData::Windows { shard, starts } => {
                let windows: Vec<&[Token]> = rows
                    .iter()
                    .map(|&r| &shard[starts[r]..starts[r] + SEQ_LEN])
                    .collect();
                let t = rows
                    .iter()
                    .map(|&r| shard[starts[r] + SEQ_LEN] as usize)
                    .collect();
                (model.forward_windows(g, &windows)?, t)
            }
        };
        g.softmax_cross_entropy(logits, &targets)
    }
}

fn probe_starts(test: &[Token], count: usize, seed: u64) -> Vec<usize> {
    let mut starts = all_starts(test);
    if count < starts.len() {
        let mut r = rng::seeded(rng::derive_seed(seed, &[0x7e57]));
        starts.shuffle(&mut r);
        starts.truncate(count);
        starts.sort_unstable();
    }
    starts
}

/// Trains `model` in place on the training shards of `corpus`.
pub fn train<T: Real>(model: &mut Model<T>, corpus: &Corpus, plan: &TrainPlan) -> Result<RunLog> {
    train_observed(model, corpus, plan, &mut ())
}

pub fn train_observed<T: Real>(
    model: &mut Model<T>,
    corpus: &Corpus,
    plan: &TrainPlan,
    observer: &mut dyn TrainObserver<T>,
) -> Result<RunLog> {
    plan.validate()?;
    if model.vocab != corpus.vocab {
        return Err(Error::Config("model and corpus vocabularies differ".into()));
    }
    let started = Instant::now();
    let clock = |deterministic: bool| {
        if deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        }
    };
    let limit = 3.0 * (corpus.vocab.len() as f64).ln();
    let test = corpus.sharded.test_shard();
    let probe = if plan.eval_every > 0 {
        Some(EvalSet::build(
            model,
            test,
            probe_starts(test, plan.probe_windows, plan.seed),
            plan.memory_cap,
        )?)
    } else {
        None
    };
    let full_test = if plan.eval_at_shard_end {
        corpus::iter_windows(test, 1)?.len();
        match model.init.drive_mode {
            DriveMode::Continuous { .. } if model.reservoir().is_some() => None,
            _ => Some(EvalSet::build(
                model,
                test,
                all_starts(test),
                plan.memory_cap,
            )?),
        }
    } else {
        None
    };
    let score_test = |m: &Model<T>| -> Result<f64> {
        match &full_test {
            Some(set) => set.mean_ce(m),
            None => evaluate_shard(m, test),
        }
    };

    let mut adam = Adam::new(model.store(), plan.adam());
    let mut log = RunLog {
        meta: serde_json::json!({
            "model": model.config,
            "init": model.init,
            "plan": plan,
            "trainable_parameters": model.trainable_parameters(),
            "precision": T::DTYPE,
            "vocab_size": corpus.vocab.len(),
            "test_shard": corpus.sharded.test_id,
            "shard_lengths": corpus.sharded.shards.iter().map(Vec::len).collect::<Vec<_>>(),
            "unigram_baseline": corpus.unigram_baseline(),
        }),
        ..RunLog::default()
    };
    let mut last_good: Vec<Tensor<T>> = model.store().iter().map(|p| p.value.clone()).collect();
    let mut step = 0usize;

    for pass in 0..plan.full_passes {
        for (shard_id, shard) in corpus.sharded.train_shards() {
            let data = ShardData::prepare(model, shard, shard_id, plan)?;
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut last_record: Option<LogRecord> = None;
            for epoch in 0..plan.shard_epochs {
                let mut r = rng::seeded(rng::derive_seed(
                    plan.seed,
                    &[pass as u64, shard_id as u64, epoch as u64],
                ));
                order.shuffle(&mut r);
                for rows in order.chunks(plan.batch_size) {
                    if let Some(rec) = last_record.take() {
                        observer.record(&rec)?;
                        log.records.push(rec);
                    }
                    let mut g = Graph::new();
                    let loss_var = data.batch_loss(model, &mut g, rows)?;
                    let loss = g.value(loss_var).data()[0].as_f64();
                    if !loss.is_finite() || loss > limit {
                        return Err(diverged(model, &last_good, step, loss));
                    }
                    g.backward(loss_var)?;
                    let store = model.store_mut();
                    for (keep, p) in last_good.iter_mut().zip(store.iter()) {
                        keep.data_mut().copy_from_slice(p.value.data());
                    }
                    store.zero_grad();
                    store.accumulate_grads(&g)?;
                    if let Err(e) = adam.step(store) {
                        return Err(match e {
                            Error::NonFinite { .. } => diverged(model, &last_good, step, f64::NAN),
                            other => other,
                        });
                    }
                    step += 1;
                    let test_ce = match &probe {
                        Some(set) if step.is_multiple_of(plan.eval_every) => {
                            Some(set.mean_ce(model)?)
                        }
                        _ => None,
                    };
                    last_record = Some(LogRecord {
                        pass,
                        shard: shard_id,
                        shard_epoch: epoch,
                        step,
                        train_ce: loss,
                        test_ce,
                        elapsed_s: clock(plan.deterministic),
                    });
                }
            }
            let eval = if plan.eval_at_shard_end {
                let test_ce = score_test(model)?;
                if let Some(rec) = last_record.as_mut() {
                    rec.test_ce = Some(test_ce);
                }
                Some(ShardEval {
                    pass,
                    shard: shard_id,
                    test_ce,
                })
            } else {
                None
            };
            if let Some(rec) = last_record.take() {
                observer.record(&rec)?;
                log.records.push(rec);
            }
            if let Some(e) = eval {
                log.shard_evals.push(e);
            }
            observer.shard_done(eval.as_ref(), model)?;
        }
    }
    log.wall_seconds = started.elapsed().as_secs_f64();
    Ok(log)
}

fn diverged<T: Real>(model: &Model<T>, last_good: &[Tensor<T>], step: usize, loss: f64) -> Error {
    let mut snapshot = model.clone();
    for (p, keep) in snapshot.store_mut().iter_mut().zip(last_good) {
        p.value = keep.clone();
    }
    Error::Diverged {
        step,
        loss,
        last_good: Some(snapshot.to_checkpoint_bytes()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth;
    use crate::model::{InitOptions, ModelConfig};

    fn small_corpus(len: usize) -> Corpus {
        Corpus::from_text(&synth::shakespeare_like(len, 3), corpus::DEFAULT_TEST_SHARD).unwrap()
    }

    fn quick_plan() -> TrainPlan {
        TrainPlan {
            batch_size: 64,
            lr: 3e-3,
            shard_epochs: 2,
            full_passes: 1,
            eval_every: 5,
            probe_windows: 200,
            deterministic: true,
            stride: 4,
            ..TrainPlan::default()
        }
    }

    #[test]
    fn plan_rejects_zero_fields() {
        for plan in [
            TrainPlan {
                batch_size: 0,
                ..TrainPlan::default()
            },
            TrainPlan {
                shard_epochs: 0,
                ..TrainPlan::default()
            },
            TrainPlan {
                lr: -1.0,
                ..TrainPlan::default()
            },
        ] {
            assert!(matches!(plan.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn reservoir_training_reduces_loss() {
        let c = small_corpus(10_000);
        let mut m = Model::<f32>::new(
            ModelConfig::Reservoir { n: 250 },
            c.vocab.clone(),
            InitOptions::default(),
        )
        .unwrap();
        let log = train(&mut m, &c, &quick_plan()).unwrap();
        let losses = log.train_losses();
        assert!(losses.last().unwrap() < losses.first().unwrap());
        assert_eq!(log.segments().len(), 5 * 2);
        assert!(log.records.iter().all(|r| r.train_ce >= 0.0));
    }

    #[test]
    fn schedule_visits_shards_in_order() {
        let c = small_corpus(12_000);
        let mut m = Model::<f32>::new(
            ModelConfig::Aerc { n: 20, hidden: 3 },
            c.vocab.clone(),
            InitOptions::default(),
        )
        .unwrap();
        let plan = TrainPlan {
            full_passes: 2,
            ..quick_plan()
        };
        let log = train(&mut m, &c, &plan).unwrap();
        let segs = log.segments();
        assert_eq!(segs.len(), 2 * 5 * 2);
        let mut want = Vec::new();
        for p in 0..2 {
            for s in 0..5 {
                for e in 0..2 {
                    want.push((p, s, e));
                }
            }
        }
        assert_eq!(segs, want);
        assert_eq!(log.shard_evals.len(), 10);
        let steps: Vec<usize> = log.records.iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn deterministic_runs_repeat_bitwise() {
        let c = small_corpus(8_000);
        let run = || {
            let mut m = Model::<f32>::new(
                ModelConfig::Transformer {
                    d_ff: 8,
                    heads: 2,
                    layers: 1,
                },
                c.vocab.clone(),
                InitOptions {
                    seed: 5,
                    ..InitOptions::default()
                },
            )
            .unwrap();
            let plan = TrainPlan {
                stride: 16,
                ..quick_plan()
            };
            let log = train(&mut m, &c, &plan).unwrap();
            (log.to_csv(), m.to_checkpoint_bytes())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_weights_score_log_vocab() {
        let c = small_corpus(6_000);
        let mut m = Model::<f64>::new(
            ModelConfig::Reservoir { n: 16 },
            c.vocab.clone(),
            InitOptions::default(),
        )
        .unwrap();
        m.store_mut().iter_mut().for_each(|p| p.value.fill(0.0));
        let ce = evaluate(&m, &c).unwrap();
        assert_eq!(ce, (c.vocab.len() as f64).ln());
    }

    #[test]
    fn vocabulary_mismatch_is_a_config_error() {
        let c = small_corpus(6_000);
        let other = crate::corpus::Vocabulary::build("abc").unwrap();
        let m = Model::<f32>::new(
            ModelConfig::Reservoir { n: 4 },
            other,
            InitOptions::default(),
        )
        .unwrap();
        assert!(matches!(evaluate(&m, &c), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_carries_last_good_checkpoint() {
        let c = small_corpus(6_000);
        let mut m = Model::<f32>::new(
            ModelConfig::Reservoir { n: 16 },
            c.vocab.clone(),
            InitOptions::default(),
        )
        .unwrap();
        let plan = TrainPlan {
            lr: 1e3,
            ..quick_plan()
        };
        match train(&mut m, &c, &plan) {
            Err(Error::Diverged {
                last_good: Some(bytes),
                loss,
                ..
            }) => {
                assert!(loss.is_nan() || loss > 3.0 * (c.vocab.len() as f64).ln());
                Model::<f32>::from_checkpoint_bytes(&bytes).unwrap();
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
