use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use super::EvalError;

/// Samples below this size get exact permutation p-values.
pub const PERMUTATION_BELOW: usize = 10;

/// Correlation coefficient with a two-sided p-value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
}

/// 1-based ranks, ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Input(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(EvalError::Input(format!("{} points, need at least 3", a.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EvalError::Input("non-finite value".into()));
    }
    Ok(())
}

/// Pearson correlation, `None` when either input is constant.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided p-value of `t = r·√((n−2)/(1−r²))` under Student's t with `n − 2` dof.
fn t_test_p(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive dof");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Visits every permutation of `v` (Heap's algorithm).
fn for_each_permutation(v: &mut [f64], mut f: impl FnMut(&[f64])) {
    let n = v.len();
    let mut c = vec![0usize; n];
    f(v);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                v.swap(0, i);
            } else {
                v.swap(c[i], i);
            }
            f(v);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Fraction of orderings of `b` whose statistic is at least as extreme as the observed one.
fn permutation_p(a: &[f64], b: &[f64], observed: f64, stat: impl Fn(&[f64], &[f64]) -> Option<f64>) -> f64 {
    let mut perm = b.to_vec();
    let (mut hits, mut total) = (0u64, 0u64);
    for_each_permutation(&mut perm, |p| {
        total += 1;
        if stat(a, p).is_some_and(|s| s.abs() >= observed.abs() - 1e-12) {
            hits += 1;
        }
    });
    hits as f64 / total as f64
}

/// Pearson correlation with a t-approximation p-value.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<Correlation>, EvalError> {
    check_pair(a, b)?;
    Ok(pearson_r(a, b).map(|r| Correlation {
        r,
        p: t_test_p(r, a.len()),
    }))
}

fn spearman_r(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson_r(&average_ranks(a), &average_ranks(b))
}

/// Spearman's rho: Pearson correlation of average ranks. The p-value uses the
/// t-approximation, or exact enumeration of permutations for fewer than 10
/// points. `None` when either input is constant.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<Option<Correlation>, EvalError> {
    check_pair(a, b)?;
    let Some(r) = spearman_r(a, b) else {
        return Ok(None);
    };
    let p = if a.len() < PERMUTATION_BELOW {
        permutation_p(a, b, r, spearman_r)
    } else {
        t_test_p(r, a.len())
    };
    Ok(Some(Correlation { r, p }))
}

/// Sum of `f(t)` over tie-group sizes `t` of a sorted slice.
fn tie_sum(sorted: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let mut s = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        s += f((j - i) as f64);
        i = j;
    }
    s
}

/// Number of inversions in `v`, sorting it in place (stable merge sort).
fn count_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf.push(v[j]);
            inv += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

/// Concordance counts behind tau-b.
struct TauParts {
    /// Concordant minus discordant pairs.
    s: f64,
    n0: f64,
    ties_a: f64,
    ties_b: f64,
}

/// Knight's O(n log n) pair counting.
fn tau_parts(a: &[f64], b: &[f64]) -> TauParts {
    let n = a.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let sa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let mut sb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let pairs = |t: f64| t * (t - 1.0) / 2.0;
    let ties_a = tie_sum(&sa, pairs);
    let mut joint = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sa[j] == sa[i] && sb[j] == sb[i] {
            j += 1;
        }
        joint += pairs((j - i) as f64);
        i = j;
    }
    let swaps = count_inversions(&mut sb, &mut Vec::with_capacity(n)) as f64;
    let ties_b = tie_sum(&sb, pairs);
    let n0 = pairs(n as f64);
    TauParts {
        s: n0 - ties_a - ties_b + joint - 2.0 * swaps,
        n0,
        ties_a,
        ties_b,
    }
}

fn tau_b(a: &[f64], b: &[f64]) -> Option<f64> {
    let t = tau_parts(a, b);
    let denom = ((t.n0 - t.ties_a) * (t.n0 - t.ties_b)).sqrt();
    (denom > 0.0).then(|| (t.s / denom).clamp(-1.0, 1.0))
}

/// Kendall's tau-b. The p-value uses the tie-corrected normal approximation
/// of the concordance difference, or exact enumeration below 10 points.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<Option<Correlation>, EvalError> {
    check_pair(a, b)?;
    let Some(tau) = tau_b(a, b) else {
        return Ok(None);
    };
    let n = a.len();
    let p = if n < PERMUTATION_BELOW {
        permutation_p(a, b, tau, tau_b)
    } else {
        let parts = tau_parts(a, b);
        let mut sa = a.to_vec();
        let mut sb = b.to_vec();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let nf = n as f64;
        let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
        let t1 = |t: f64| t * (t - 1.0);
        let t2 = |t: f64| t * (t - 1.0) * (t - 2.0);
        let t5 = |t: f64| t * (t - 1.0) * (2.0 * t + 5.0);
        let (xt1, yt1) = (tie_sum(&sa, t1), tie_sum(&sb, t1));
        let (xt2, yt2) = (tie_sum(&sa, t2), tie_sum(&sb, t2));
        let var = (v0 - tie_sum(&sa, t5) - tie_sum(&sb, t5)) / 18.0
            + xt1 * yt1 / (2.0 * nf * (nf - 1.0))
            + xt2 * yt2 / (9.0 * nf * (nf - 1.0) * (nf - 2.0));
        if var <= 0.0 {
            1.0
        } else {
            let z = parts.s / var.sqrt();
            erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
        }
    };
    Ok(Some(Correlation { r: tau, p }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn inversions_counted() {
        let mut v = vec![3.0, 1.0, 2.0, 0.0];
        assert_eq!(count_inversions(&mut v, &mut Vec::new()), 4);
        assert_eq!(v, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn kendall_one_discordant_pair() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 2.0, 4.0, 3.0];
        let t = kendall_tau(&a, &b).unwrap().unwrap();
        assert!((t.r - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn permutation_p_small_sample() {
        // perfect ordering of 4 points: 2 of 24 orderings reach |rho| = 1
        let a = [1.0, 2.0, 3.0, 4.0];
        let s = spearman_rho(&a, &a).unwrap().unwrap();
        assert_eq!(s.r, 1.0);
        assert!((s.p - 2.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn t_approximation_reference() {
        // r = 0.5, n = 12: t = 0.5·√(10/0.75) = 1.8257, two-sided p ≈ 0.0979
        assert!((t_test_p(0.5, 12) - 0.0979).abs() < 5e-4);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(spearman_rho(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(spearman_rho(&[1.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap().is_none());
        assert!(kendall_tau(&[1.0, 2.0, 3.0], &[2.0; 3]).unwrap().is_none());
        assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }
}
