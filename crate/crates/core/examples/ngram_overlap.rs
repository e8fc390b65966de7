//! Character n-gram overlap between two passages.

use reslm::evalgen::ngram_overlap;

fn main() -> reslm::Result<()> {
    let reference = "to be, or not to be, that is the question";
    let generated = "to be a question, or not to be at all";
    for n in 1..=8 {
        let r = ngram_overlap(generated, reference, n)?;
        println!(
            "n={n}  overlap {:.3}  distinct {:.3}  ({} of {} unique grams found)",
            r.overlap, r.distinct, r.intersection, r.g_unique
        );
    }
    Ok(())
}
