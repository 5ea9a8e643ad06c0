// Brute-force reference implementations for the band-mean estimator and the
// multi-way losses, shared by the core tests and the acceptance harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use syncmatrix_core::estimators::diag_avg_offset;
use syncmatrix_core::losses::{angular_multiway_loss, multiway_euclidean_loss};
use syncmatrix_core::{AngularScale, PairBatch, SimilarityMatrix, Tensor};

pub fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

/// Scans the whole matrix for each offset's entries, then keeps the first
/// strictly better score in the order 0, -1, 1, -2, 2, ...
pub fn brute_force_diag_avg(m: &[Vec<f64>]) -> i32 {
    let n = m.len() as i32;
    let mut order = vec![0];
    for k in 1..=5 {
        order.push(-k);
        order.push(k);
    }
    let mut best: Option<(i32, f64)> = None;
    for o in order {
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..n {
            for j in 0..n {
                if i - j == -o {
                    sum += m[i as usize][j as usize];
                    count += 1;
                }
            }
        }
        let mean = sum / count as f64;
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((o, mean));
        }
    }
    best.unwrap().0
}

pub struct DiagAvgComparison {
    pub matrices: usize,
    pub mismatches: usize,
    /// Matrices whose best band score was shared by several offsets.
    pub ties: usize,
}

/// Every third matrix has entries in {0, 1, 2} so that tie-breaking is exercised.
pub fn compare_diag_avg(matrices: usize, seed: u64) -> DiagAvgComparison {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DiagAvgComparison { matrices, mismatches: 0, ties: 0 };
    for k in 0..matrices {
        let n = rng.random_range(6..=25);
        let rows: Vec<Vec<f64>> = if k % 3 == 0 {
            (0..n).map(|_| (0..n).map(|_| rng.random_range(0..3) as f64).collect()).collect()
        } else {
            (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let m = SimilarityMatrix::from_tensor(Tensor::from_rows(&rows).unwrap()).unwrap();
        let pred = diag_avg_offset(&m).unwrap();
        if pred.offset.offset() != brute_force_diag_avg(&rows) {
            out.mismatches += 1;
        }
        let top = pred.scores.iter().cloned().fold(f64::MIN, f64::max);
        if pred.scores.iter().filter(|&&s| s == top).count() > 1 {
            out.ties += 1;
        }
    }
    out
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (dist(a, &vec![0.0; a.len()]) * dist(b, &vec![0.0; b.len()]))
}

/// `-1/N sum_i log(exp(s_ii) / sum_j exp(s_ij))` evaluated term by term.
pub fn brute_force_multiway(a: &[Vec<f64>], v: &[Vec<f64>], score: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).map(|j| score(&a[i], &v[j]).exp()).sum();
        total += -(score(&a[i], &v[i]).exp() / denom).ln();
    }
    total / n as f64
}

pub fn batch(a: &[Vec<f64>], v: &[Vec<f64>]) -> PairBatch {
    PairBatch::new(Tensor::from_rows(a).unwrap(), Tensor::from_rows(v).unwrap()).unwrap()
}

/// Largest absolute difference between library and brute-force values of
/// both multi-way losses over `batches` random batches.
pub fn multiway_worst_error(batches: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..batches {
        let n = rng.random_range(2..=12);
        let d = rng.random_range(2..=8);
        let a = randn(n, d, &mut rng);
        let v = randn(n, d, &mut rng);
        let b = batch(&a, &v);

        let eu = multiway_euclidean_loss(&b).unwrap();
        let eu_ref = brute_force_multiway(&a, &v, |x, y| 1.0 / (dist(x, y) + 1e-8));
        worst = worst.max((eu - eu_ref).abs());

        let scale = AngularScale { w: rng.random_range(0.5..15.0), b: rng.random_range(-8.0..2.0) };
        let an = angular_multiway_loss(&b, scale).unwrap();
        let an_ref = brute_force_multiway(&a, &v, |x, y| scale.w * cos(x, y) + scale.b);
        worst = worst.max((an - an_ref).abs());
    }
    worst
}
