//! Brute-force references for the rank-based metrics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Values on a coarse grid so that ties are common.
pub fn tied(rng: &mut ChaCha8Rng, n: usize, levels: i32) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0..levels) as f64 * 0.5).collect()
}

pub fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Rank of each value: 1 + number smaller + half the number of other equal values.
pub fn rank_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let eq = x.iter().filter(|&&w| w == v).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn tau_b_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let (mut c, mut d, mut ta, mut tb, mut n0) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in i + 1..n {
            n0 += 1.0;
            let s = (a[i] - a[j]) * (b[i] - b[j]);
            if a[i] == a[j] {
                ta += 1.0;
            }
            if b[i] == b[j] {
                tb += 1.0;
            }
            if s > 0.0 {
                c += 1.0;
            } else if s < 0.0 {
                d += 1.0;
            }
        }
    }
    (c - d) / ((n0 - ta) * (n0 - tb)).sqrt()
}
