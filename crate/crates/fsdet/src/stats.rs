//! Repeated-run statistics: mean, sample standard deviation and 95% CI.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normal quantile used for the two-sided 95% interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeries {
    pub metric_name: String,
    /// One value per run, in seed-schedule order.
    pub values: Vec<f64>,
}

impl RunSeries {
    pub fn new(metric_name: impl Into<String>, values: Vec<f64>) -> Self {
        RunSeries {
            metric_name: metric_name.into(),
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CumulativePoint {
    pub k: usize,
    pub mean: f64,
    /// Absent for `k = 1`.
    pub ci: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatistics {
    pub metric_name: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (divisor `n - 1`); absent for a single run.
    pub std: Option<f64>,
    /// `1.96 * std / sqrt(n)`; absent for a single run.
    pub ci95: Option<f64>,
    pub cumulative: Vec<CumulativePoint>,
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, Some((ss / (n - 1.0)).sqrt()))
}

fn ci95(std: f64, n: usize) -> f64 {
    Z_95 * std / (n as f64).sqrt()
}

pub fn summarize(series: &RunSeries) -> Result<RunStatistics> {
    let values = &series.values;
    if values.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "metric {}: empty run series",
            series.metric_name
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "metric {}: run {i} is not finite",
            series.metric_name
        )));
    }
    let cumulative = (1..=values.len())
        .map(|k| {
            let (mean, std) = mean_std(&values[..k]);
            CumulativePoint {
                k,
                mean,
                ci: std.map(|s| ci95(s, k)),
            }
        })
        .collect();
    let (mean, std) = mean_std(values);
    Ok(RunStatistics {
        metric_name: series.metric_name.clone(),
        n: values.len(),
        mean,
        std,
        ci95: std.map(|s| ci95(s, values.len())),
        cumulative,
    })
}

/// Whether the interval at `k_large` runs is strictly narrower than at `k_small`.
pub fn stabilization_check(stats: &RunStatistics, k_small: usize, k_large: usize) -> Result<bool> {
    if !(2 <= k_small && k_small < k_large && k_large <= stats.n) {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= k_small < k_large <= {}, got {k_small} and {k_large}",
            stats.n
        )));
    }
    let ci = |k: usize| stats.cumulative[k - 1].ci.expect("k >= 2 has a CI");
    Ok(ci(k_large) < ci(k_small))
}

#[derive(Serialize)]
struct AggregateRow<'a> {
    metric: &'a str,
    n: usize,
    mean: f64,
    std: Option<f64>,
    ci95: Option<f64>,
}

#[derive(Serialize)]
struct CumulativeRow<'a> {
    metric: &'a str,
    k: usize,
    mean_k: f64,
    ci_k: Option<f64>,
}

/// `metric,n,mean,std,ci95`; absent values are empty fields.
pub fn write_aggregate_csv(stats: &[RunStatistics], w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in stats {
        wtr.serialize(AggregateRow {
            metric: &s.metric_name,
            n: s.n,
            mean: s.mean,
            std: s.std,
            ci95: s.ci95,
        })?;
    }
    wtr.flush().map_err(|e| Error::io("<aggregate csv>", e))
}

/// `metric,k,mean_k,ci_k`, one row per prefix length.
pub fn write_cumulative_csv(stats: &[RunStatistics], w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in stats {
        for p in &s.cumulative {
            wtr.serialize(CumulativeRow {
                metric: &s.metric_name,
                k: p.k,
                mean_k: p.mean,
                ci_k: p.ci,
            })?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<cumulative csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(v: &[f64]) -> RunSeries {
        RunSeries::new("m", v.to_vec())
    }

    #[test]
    fn one_two_three() {
        let s = summarize(&series(&[1.0, 2.0, 3.0])).unwrap();
        assert_abs_diff_eq!(s.mean, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.std.unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.ci95.unwrap(), 1.96 / 3f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.ci95.unwrap(), 1.13161, epsilon = 1e-5);
        assert_eq!(s.cumulative.last().unwrap().mean, s.mean);
        assert_eq!(s.cumulative.last().unwrap().ci, s.ci95);
        assert_eq!(s.cumulative[0].ci, None);
    }

    #[test]
    fn constant_series() {
        let s = summarize(&series(&[5.0; 4])).unwrap();
        assert_eq!(s.std, Some(0.0));
        assert_eq!(s.ci95, Some(0.0));
        assert!(!stabilization_check(&s, 2, 4).unwrap());
    }

    #[test]
    fn single_run_has_mean_only() {
        let s = summarize(&series(&[0.7])).unwrap();
        assert_eq!(s.mean, 0.7);
        assert_eq!(s.std, None);
        assert_eq!(s.ci95, None);
    }

    #[test]
    fn errors() {
        assert!(summarize(&series(&[])).is_err());
        assert!(summarize(&series(&[1.0, f64::NAN])).is_err());
        let s = summarize(&series(&[1.0, 2.0, 4.0])).unwrap();
        assert!(stabilization_check(&s, 2, 2).is_err());
        assert!(stabilization_check(&s, 1, 3).is_err());
        assert!(stabilization_check(&s, 2, 4).is_err());
    }

    #[test]
    fn forty_runs_and_stabilization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2020);
        let v: Vec<f64> = (0..40).map(|_| rng.random_range(0.3..0.5)).collect();
        let s = summarize(&series(&v)).unwrap();
        assert_eq!(s.cumulative.len(), 40);
        assert!(stabilization_check(&s, 5, 30).unwrap());
    }

    #[test]
    fn csv_layout() {
        let s = summarize(&series(&[1.0, 2.0, 3.0])).unwrap();
        let mut buf = Vec::new();
        write_aggregate_csv(std::slice::from_ref(&s), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("metric,n,mean,std,ci95"));
        assert!(lines.next().unwrap().starts_with("m,3,2.0,1.0,1.1316"));

        let mut buf = Vec::new();
        write_cumulative_csv(&[s], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "metric,k,mean_k,ci_k");
        assert_eq!(lines[1], "m,1,1.0,");
        assert_eq!(lines.len(), 4);
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut v in prop::collection::vec(-100.0f64..100.0, 2..30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let a = summarize(&series(&v)).unwrap();
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = summarize(&series(&v)).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-9);
            prop_assert!((a.std.unwrap() - b.std.unwrap()).abs() < 1e-9);
            prop_assert!((a.ci95.unwrap() - b.ci95.unwrap()).abs() < 1e-9);
        }

        #[test]
        fn affine_equivariant(v in prop::collection::vec(-10.0f64..10.0, 2..30), a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let s = summarize(&series(&v)).unwrap();
            let t = summarize(&series(&v.iter().map(|x| a * x + b).collect::<Vec<_>>())).unwrap();
            prop_assert!((t.mean - (a * s.mean + b)).abs() < 1e-9);
            prop_assert!((t.std.unwrap() - a.abs() * s.std.unwrap()).abs() < 1e-9);
            prop_assert!((t.ci95.unwrap() - a.abs() * s.ci95.unwrap()).abs() < 1e-9);
        }

        #[test]
        fn cumulative_means_match_prefixes(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let s = summarize(&series(&v)).unwrap();
            for p in &s.cumulative {
                let brute = v[..p.k].iter().sum::<f64>() / p.k as f64;
                prop_assert!((p.mean - brute).abs() < 1e-12);
            }
        }
    }
}
