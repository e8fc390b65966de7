//! Two reservoir states driven by the same input converge: the gap shrinks
//! at least as fast as 0.9 per step.

use rand::Rng as _;
use reslm::reservoir::init_reservoir;
use reslm::rng;

fn main() -> reslm::Result<()> {
    let n = 250;
    let res = init_reservoir::<f64>(n, 16, 59, 0.9, 1)?;
    let mut r = rng::seeded(2);
    let mut a: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    let mut b: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    let gap = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let g0 = gap(&a, &b);
    for t in 1..=100 {
        let x = r.random_range(0..59);
        a = res.step(&a, x)?;
        b = res.step(&b, x)?;
        if t % 10 == 0 {
            println!(
                "step {t:>3}  gap/gap0 {:.3e}  bound {:.3e}",
                gap(&a, &b) / g0,
                0.9f64.powi(t)
            );
        }
    }
    Ok(())
}
