//! Times reservoir and AERC readouts across the reference sizes and fits
//! the slope against log10 of the parameter count.

use reslm::bench::{sweep, BenchOptions, Workload};
use reslm::corpus::{normalize, synth, Vocabulary};
use reslm::model::{Family, ModelConfig};

fn main() -> reslm::Result<()> {
    let text = normalize(&synth::shakespeare_like(60_000, 4));
    let vocab = Vocabulary::build(&text)?;
    let tokens = vocab.encode(&text)?;
    let configs: Vec<ModelConfig> = [Family::Reservoir, Family::Aerc]
        .into_iter()
        .flat_map(ModelConfig::table)
        .collect();
    let workload = Workload {
        train_batches: 6,
        batch_size: 1024,
        infer_chars: 6000,
    };
    let report = sweep::<f32>(
        &configs,
        &vocab,
        &tokens,
        &workload,
        &BenchOptions::default(),
        true,
        |s| println!("{}", s.csv_line()),
    )?;
    for f in &report.fits {
        println!("{} {}: alpha {:.5}", f.family, f.phase.name(), f.alpha);
    }
    Ok(())
}
