//! Independent reference computations shared by the property and
//! acceptance tests.

use nalgebra::DMatrix;
use reslm::reservoir::ReservoirParams;

/// Overlap of `generated` against `reference` by listing every n-gram as an
/// owned string, deduplicating by sort and checking membership by scan.
pub fn ngram_overlap_brute(generated: &str, reference: &str, n: usize) -> f64 {
    fn grams(s: &str, n: usize) -> Vec<String> {
        let c: Vec<char> = s.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i + n <= c.len() {
            out.push(c[i..i + n].iter().collect());
            i += 1;
        }
        out.sort();
        out.dedup();
        out
    }
    let g = grams(generated, n);
    let r = grams(reference, n);
    let hits = g.iter().filter(|x| r.iter().any(|y| y == *x)).count();
    hits as f64 / g.len() as f64
}

/// Largest singular value by full SVD.
pub fn sigma_max_svd(w: &[f64], n: usize) -> f64 {
    let m = DMatrix::from_row_slice(n, n, w);
    m.singular_values().max()
}

/// Drives two random initial states with the same inputs and returns
/// `(initial gap, final gap)` in the Euclidean norm.
pub fn contraction_gaps(
    res: &ReservoirParams<f64>,
    a: &[f64],
    b: &[f64],
    inputs: &[u32],
) -> (f64, f64) {
    let gap = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    let ra = res.run_from(a, inputs).unwrap();
    let rb = res.run_from(b, inputs).unwrap();
    (gap(a, b), gap(&ra, &rb))
}
