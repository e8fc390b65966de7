//! Trains the smallest reservoir model on generated sample text and prints
//! the per-shard test loss.

use reslm::corpus::{synth, Corpus, DEFAULT_TEST_SHARD};
use reslm::model::{Family, InitOptions, Model, ModelConfig};
use reslm::trainer::{self, TrainPlan};

fn main() -> reslm::Result<()> {
    let corpus = Corpus::from_text(&synth::shakespeare_like(120_000, 1), DEFAULT_TEST_SHARD)?;
    let config = ModelConfig::table(Family::Reservoir)[0];
    let mut model = Model::<f32>::new(config, corpus.vocab.clone(), InitOptions::default())?;
    let plan = TrainPlan {
        batch_size: 256,
        lr: 3e-3,
        shard_epochs: 2,
        full_passes: 1,
        stride: 4,
        eval_every: 0,
        ..TrainPlan::default()
    };
    println!("unigram baseline {:.4}", corpus.unigram_baseline());
    let log = trainer::train(&mut model, &corpus, &plan)?;
    for e in &log.shard_evals {
        println!("shard {} test CE {:.4}", e.shard, e.test_ce);
    }
    Ok(())
}
