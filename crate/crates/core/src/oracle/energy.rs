use super::{OracleError, Result};

/// Energy distance with its jackknife standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyDistance {
    pub value: f64,
    pub std_error: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Row sums of pairwise distances within one set.
fn within_sums(s: &[f64], dim: usize) -> Vec<f64> {
    let n = s.len() / dim;
    let mut rows = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = dist(&s[i * dim..(i + 1) * dim], &s[j * dim..(j + 1) * dim]);
            rows[i] += v;
            rows[j] += v;
        }
    }
    rows
}

/// U-statistic estimate of `2E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖` for flat sample
/// sets of dimension `dim`. The standard error is the two-sample
/// delete-one jackknife, computed from row sums of the distance matrices.
pub fn energy_distance(a: &[f64], b: &[f64], dim: usize) -> Result<EnergyDistance> {
    if dim == 0 || a.is_empty() || b.is_empty() || !a.len().is_multiple_of(dim) || !b.len().is_multiple_of(dim) {
        return Err(OracleError::Samples(format!(
            "{} and {} values cannot form non-empty sets of dimension {dim}",
            a.len(),
            b.len()
        )));
    }
    let (n, m) = (a.len() / dim, b.len() / dim);
    if n < 3 || m < 3 {
        return Err(OracleError::Samples(format!(
            "need at least 3 samples per set, got {n} and {m}"
        )));
    }
    let mut ab_rows = vec![0.0; n];
    let mut ab_cols = vec![0.0; m];
    for i in 0..n {
        let ai = &a[i * dim..(i + 1) * dim];
        for j in 0..m {
            let v = dist(ai, &b[j * dim..(j + 1) * dim]);
            ab_rows[i] += v;
            ab_cols[j] += v;
        }
    }
    let aa_rows = within_sums(a, dim);
    let bb_rows = within_sums(b, dim);
    let s_ab: f64 = ab_rows.iter().sum();
    let s_aa: f64 = aa_rows.iter().sum();
    let s_bb: f64 = bb_rows.iter().sum();
    let (nf, mf) = (n as f64, m as f64);
    let stat = |sab: f64, na: f64, saa: f64, nb: f64, sbb: f64| {
        2.0 * sab / (na * nb) - saa / (na * (na - 1.0)) - sbb / (nb * (nb - 1.0))
    };
    let value = stat(s_ab, nf, s_aa, mf, s_bb);

    let loo_a: Vec<f64> = (0..n)
        .map(|i| stat(s_ab - ab_rows[i], nf - 1.0, s_aa - 2.0 * aa_rows[i], mf, s_bb))
        .collect();
    let loo_b: Vec<f64> = (0..m)
        .map(|j| stat(s_ab - ab_cols[j], nf, s_aa, mf - 1.0, s_bb - 2.0 * bb_rows[j]))
        .collect();
    let spread = |v: &[f64]| {
        let k = v.len() as f64;
        let mean = v.iter().sum::<f64>() / k;
        (k - 1.0) / k * v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
    };
    let std_error = (spread(&loo_a) + spread(&loo_b)).sqrt();
    Ok(EnergyDistance { value, std_error })
}

/// Kolmogorov–Smirnov statistic `sup |F_n(x) − F(x)|` of one-dimensional
/// samples against a reference CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
