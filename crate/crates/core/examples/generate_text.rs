//! Closed-loop generation from a briefly trained AERC model, greedy and
//! sampled.

use reslm::corpus::{synth, Corpus, DEFAULT_TEST_SHARD};
use reslm::evalgen::{generate, GenSpec};
use reslm::model::{InitOptions, Model, ModelConfig};
use reslm::trainer::{self, TrainPlan};

fn main() -> reslm::Result<()> {
    let corpus = Corpus::from_text(&synth::shakespeare_like(100_000, 3), DEFAULT_TEST_SHARD)?;
    let mut model = Model::<f32>::new(
        ModelConfig::Aerc { n: 75, hidden: 13 },
        corpus.vocab.clone(),
        InitOptions::default(),
    )?;
    let plan = TrainPlan {
        batch_size: 256,
        lr: 3e-3,
        shard_epochs: 3,
        full_passes: 1,
        stride: 2,
        eval_every: 0,
        ..TrainPlan::default()
    };
    trainer::train(&mut model, &corpus, &plan)?;
    for (label, spec) in [
        (
            "greedy",
            GenSpec {
                length: 200,
                greedy: true,
                ..GenSpec::default()
            },
        ),
        (
            "t=0.8",
            GenSpec {
                length: 200,
                temperature: 0.8,
                rng_seed: 1,
                ..GenSpec::default()
            },
        ),
    ] {
        println!("--- {label}\n{}\n", generate(&model, &spec)?);
    }
    Ok(())
}
