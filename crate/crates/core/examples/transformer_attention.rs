//! Causal attention weights of an untrained transformer on one window.

use reslm::corpus::Vocabulary;
use reslm::transformer::{TransformerConfig, TransformerModel};

fn main() -> reslm::Result<()> {
    let text = "to be, or not to be, that is the q";
    let vocab = Vocabulary::build(text)?;
    let tokens = vocab.encode(&text[..32])?;
    let model = TransformerModel::<f64>::new(TransformerConfig::new(64, 4, 4, vocab.len()), 0)?;
    let sums = model.attention_weights_sum_check(&tokens)?;
    let worst = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    println!(
        "{} attention rows, max |row sum - 1| = {worst:.2e}",
        sums.len()
    );
    println!(
        "logits at the last position: {:?}",
        &model.logits(&tokens)?.data()[..5]
    );
    Ok(())
}
