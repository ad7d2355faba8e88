//! Independent reference implementations used as test oracles. None of this
//! calls into the library's numeric code.
#![allow(dead_code)]

use std::f64::consts::{PI, SQRT_2};

/// erf for `0 <= x <= 3` from the positive-term series
/// `erf(x) = 2/sqrt(pi) * exp(-x^2) * sum_n 2^n x^(2n+1) / (1*3*...*(2n+1))`.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term > 1e-18 * sum {
        n += 1.0;
        term *= 2.0 * x * x / (2.0 * n + 1.0);
        sum += term;
    }
    2.0 / PI.sqrt() * (-x * x).exp() * sum
}

/// erfc for `x > 0` from the continued fraction
/// `erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))`,
/// evaluated with the modified Lentz method.
fn erfc_continued_fraction(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / PI.sqrt() / f
}

/// Standard normal CDF.
pub fn phi(z: f64) -> f64 {
    let x = z.abs() / SQRT_2;
    let upper_tail = if x <= 3.0 {
        0.5 * (1.0 - erf_series(x))
    } else {
        0.5 * erfc_continued_fraction(x)
    };
    if z >= 0.0 {
        1.0 - upper_tail
    } else {
        upper_tail
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Direct evaluation of the per-response fidelity reward of image `i` in one
/// dimension. `scores[i][k]` is response `k`'s score, `mos[i]` the ground
/// truth; hard ground truth, variance floor `1e-6`.
pub fn fidelity_reward(scores: &[Vec<f64>], mos: &[f64], i: usize, k: usize) -> f64 {
    let floor = 1e-6;
    let b = scores.len();
    let mut total = 0.0;
    for j in 0..b {
        if j == i {
            continue;
        }
        let vi = sample_var(&scores[i]).max(floor);
        let vj = sample_var(&scores[j]).max(floor);
        let p_hat = phi((scores[i][k] - mean(&scores[j])) / (vi + vj).sqrt());
        let p_star = if mos[i] > mos[j] {
            1.0
        } else if mos[i] < mos[j] {
            0.0
        } else {
            0.5
        };
        total += 1.0 - (p_hat - p_star).abs();
    }
    total / (b - 1) as f64
}

/// Ranks by counting: `1 + #smaller + (#equal - 1) / 2`.
pub fn count_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            let smaller = xs.iter().filter(|y| *y < x).count() as f64;
            let equal = xs.iter().filter(|y| *y == x).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Textbook Pearson correlation from raw sums.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Spearman correlation for tie-free data: `1 - 6 sum d^2 / (n (n^2 - 1))`.
pub fn spearman_no_ties(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (count_ranks(x), count_ranks(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// Spearman correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&count_ranks(x), &count_ranks(y))
}

/// Calls `f` with every permutation of `0..n` (Heap's algorithm).
pub fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    f(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            f(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// One golden parser case: `expect` is either a list of scores (overall
/// first) or an error code.
#[derive(Debug, serde::Deserialize)]
pub struct GoldenCase {
    pub name: String,
    pub text: String,
    #[serde(default)]
    pub scores: Option<Vec<f64>>,
    #[serde(default)]
    pub error: Option<String>,
}

pub fn golden_cases(path: &std::path::Path) -> Vec<GoldenCase> {
    let text = std::fs::read_to_string(path).expect("golden corpus is readable");
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("golden case parses"))
        .collect()
}
