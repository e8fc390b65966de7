//! Saves a trained AERC model, loads it back and scores the test shard.

use reslm::corpus::{synth, Corpus, DEFAULT_TEST_SHARD};
use reslm::model::{InitOptions, Model, ModelConfig};
use reslm::trainer::{self, TrainPlan};

fn main() -> reslm::Result<()> {
    let corpus = Corpus::from_text(&synth::shakespeare_like(60_000, 2), DEFAULT_TEST_SHARD)?;
    let config = ModelConfig::Aerc { n: 75, hidden: 13 };
    let mut model = Model::<f32>::new(config, corpus.vocab.clone(), InitOptions::default())?;
    let plan = TrainPlan {
        batch_size: 256,
        lr: 3e-3,
        shard_epochs: 1,
        full_passes: 1,
        stride: 4,
        eval_every: 0,
        ..TrainPlan::default()
    };
    trainer::train(&mut model, &corpus, &plan)?;

    let dir = std::env::temp_dir().join("reslm-example");
    std::fs::create_dir_all(&dir).map_err(|source| reslm::Error::Io {
        path: dir.clone(),
        source,
    })?;
    let path = dir.join("aerc.rblm");
    model.save(&path)?;
    let loaded = Model::<f32>::load(&path)?;
    println!(
        "{}: test CE {:.4}",
        path.display(),
        trainer::evaluate(&loaded, &corpus)?
    );
    Ok(())
}
