//! Forecast accuracy metrics: RMSE, root relative squared error, and Pearson
//! correlation, all computed on denormalized W/m^2 series.
//!
//! RSE and CORR are undefined on zero-variance series; the report carries
//! them as absent fields rather than NaN.

use chrono::NaiveDate;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub horizon_min: i64,
    pub n: usize,
    pub rmse: f64,
    pub rse: Option<f64>,
    pub corr: Option<f64>,
}

pub fn compute_metrics(y: &[f64], y_hat: &[f64], horizon_min: i64) -> Result<MetricsReport> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape {
            op: "compute_metrics",
            lhs: vec![y.len()],
            rhs: vec![y_hat.len()],
        });
    }
    let n = y.len();
    if n < 2 {
        return Err(Error::Contract(format!("metrics need at least 2 samples, got {n}")));
    }
    let nf = n as f64;

    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let rmse = (sse / nf).sqrt();

    let mean_y: f64 = y.iter().sum::<f64>() / nf;
    let mean_yh: f64 = y_hat.iter().sum::<f64>() / nf;
    let var_y: f64 = y.iter().map(|a| (a - mean_y) * (a - mean_y)).sum();
    let var_yh: f64 = y_hat.iter().map(|a| (a - mean_yh) * (a - mean_yh)).sum();

    let rse = (var_y > 0.0).then(|| (sse / var_y).sqrt());
    let corr = (var_y > 0.0 && var_yh > 0.0).then(|| {
        let cov: f64 = y
            .iter()
            .zip(y_hat)
            .map(|(a, b)| (a - mean_y) * (b - mean_yh))
            .sum();
        cov / (var_y * var_yh).sqrt()
    });

    Ok(MetricsReport { horizon_min, n, rmse, rse, corr })
}

/// RMSE per calendar day, chronologically ordered. Input triples are
/// (local date, observed, predicted); dates need not arrive sorted.
pub fn daily_rmse(samples: &[(NaiveDate, f64, f64)]) -> Vec<(NaiveDate, usize, f64)> {
    let mut by_day: Vec<(NaiveDate, f64, usize)> = Vec::new();
    for &(date, y, y_hat) in samples {
        let se = (y - y_hat) * (y - y_hat);
        match by_day.iter_mut().find(|(d, _, _)| *d == date) {
            Some((_, sse, count)) => {
                *sse += se;
                *count += 1;
            }
            None => by_day.push((date, se, 1)),
        }
    }
    by_day.sort_by_key(|(d, _, _)| *d);
    by_day
        .into_iter()
        .map(|(d, sse, count)| (d, count, (sse / count as f64).sqrt()))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Serialize the summary plus per-day rows:
///
/// ```text
/// horizon_min,n,rmse,rse,corr
/// 120,512,34.2,0.41,0.93
/// date,n,rmse
/// 2023-09-27,48,30.1
/// ```
pub fn write_report(
    path: &Path,
    report: &MetricsReport,
    daily: &[(NaiveDate, usize, f64)],
) -> Result<()> {
    let mut out = String::new();
    out.push_str("horizon_min,n,rmse,rse,corr\n");
    out.push_str(&format!(
        "{},{},{},{},{}\n",
        report.horizon_min,
        report.n,
        report.rmse,
        opt(report.rse),
        opt(report.corr)
    ));
    if !daily.is_empty() {
        out.push_str("date,n,rmse\n");
        for (date, n, rmse) in daily {
            out.push_str(&format!("{date},{n},{rmse}\n"));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook re-implementation used as the oracle.
    fn brute_force(y: &[f64], yh: &[f64]) -> (f64, f64, f64) {
        let n = y.len() as f64;
        let rmse = (y.iter().zip(yh).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
        let my = y.iter().sum::<f64>() / n;
        let myh = yh.iter().sum::<f64>() / n;
        let rse = (y.iter().zip(yh).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / y.iter().map(|a| (a - my).powi(2)).sum::<f64>())
        .sqrt();
        let num: f64 = y.iter().zip(yh).map(|(a, b)| (a - my) * (b - myh)).sum();
        let den = (y.iter().map(|a| (a - my).powi(2)).sum::<f64>()
            * yh.iter().map(|b| (b - myh).powi(2)).sum::<f64>())
        .sqrt();
        (rmse, rse, num / den)
    }

    #[test]
    fn perfect_prediction() {
        let y = [100.0, 200.0, 350.0];
        let r = compute_metrics(&y, &y, 120).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.rse, Some(0.0));
        assert!((r.corr.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_predictor_has_rse_one() {
        let y = [100.0, 200.0, 300.0, 440.0];
        let mean = y.iter().sum::<f64>() / 4.0;
        let yh = [mean; 4];
        let r = compute_metrics(&y, &yh, 120).unwrap();
        assert_eq!(r.rse, Some(1.0));
        assert_eq!(r.corr, None); // zero variance in predictions
    }

    #[test]
    fn hand_computed_example() {
        let y = [100.0, 200.0, 300.0];
        let yh = [110.0, 190.0, 310.0];
        let r = compute_metrics(&y, &yh, 120).unwrap();
        assert!((r.rmse - 10.0).abs() < 1e-12);
        let (_, _, corr) = brute_force(&y, &yh);
        assert!((r.corr.unwrap() - corr).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_random_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n = rng.gen_range(2..200);
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..900.0)).collect();
            let yh: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..900.0)).collect();
            let r = compute_metrics(&y, &yh, 120).unwrap();
            let (rmse, rse, corr) = brute_force(&y, &yh);
            assert!((r.rmse - rmse).abs() < 1e-9);
            assert!((r.rse.unwrap() - rse).abs() < 1e-9);
            assert!((r.corr.unwrap() - corr).abs() < 1e-9);
        }
    }

    #[test]
    fn rse_equals_rmse_ratio_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..800.0)).collect();
        let yh: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..800.0)).collect();
        let mean = y.iter().sum::<f64>() / 64.0;
        let mean_pred = vec![mean; 64];
        let r = compute_metrics(&y, &yh, 120).unwrap();
        let r_mean = compute_metrics(&y, &mean_pred, 120).unwrap();
        let identity = r.rmse / r_mean.rmse;
        assert!((r.rse.unwrap() - identity).abs() < 1e-12);
        // and rmse^2 * n recovers the sum of squares
        let sse: f64 = y.iter().zip(&yh).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(((r.rmse * r.rmse * 64.0 - sse) / sse).abs() < 1e-9);
    }

    #[test]
    fn corr_is_affine_invariant_but_rmse_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..32).map(|_| rng.gen_range(0.0..800.0)).collect();
        let yh: Vec<f64> = (0..32).map(|_| rng.gen_range(0.0..800.0)).collect();
        let scaled: Vec<f64> = yh.iter().map(|v| 3.0 * v + 25.0).collect();
        let base = compute_metrics(&y, &yh, 120).unwrap();
        let trans = compute_metrics(&y, &scaled, 120).unwrap();
        assert!((base.corr.unwrap() - trans.corr.unwrap()).abs() < 1e-9);
        assert!((base.rmse - trans.rmse).abs() > 1.0);
    }

    #[test]
    fn zero_variance_observations_drop_rse_and_corr() {
        let y = [400.0, 400.0, 400.0];
        let yh = [100.0, 420.0, 300.0];
        let r = compute_metrics(&y, &yh, 120).unwrap();
        assert_eq!(r.rse, None);
        assert_eq!(r.corr, None);
        assert!(r.rmse > 0.0);
    }

    #[test]
    fn length_mismatch_and_tiny_sets_error() {
        assert!(compute_metrics(&[1.0, 2.0], &[1.0], 120).is_err());
        assert!(compute_metrics(&[1.0], &[1.0], 120).is_err());
    }

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2023, 10, day).unwrap()
    }

    #[test]
    fn single_day_matches_compute_metrics() {
        let samples = vec![(d(1), 100.0, 110.0), (d(1), 200.0, 190.0), (d(1), 300.0, 310.0)];
        let daily = daily_rmse(&samples);
        assert_eq!(daily.len(), 1);
        let r = compute_metrics(&[100.0, 200.0, 300.0], &[110.0, 190.0, 310.0], 120).unwrap();
        assert_eq!(daily[0], (d(1), 3, r.rmse));
    }

    #[test]
    fn empty_input_gives_empty_list() {
        assert!(daily_rmse(&[]).is_empty());
    }

    #[test]
    fn overall_mse_is_count_weighted_mean_of_daily_mses() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut samples = Vec::new();
        for day in 1..=5 {
            for _ in 0..rng.gen_range(2..9) {
                samples.push((d(day), rng.gen_range(0.0..800.0), rng.gen_range(0.0..800.0)));
            }
        }
        let daily = daily_rmse(&samples);
        let weighted: f64 = daily.iter().map(|(_, n, rmse)| *n as f64 * rmse * rmse).sum();
        let total_n: usize = daily.iter().map(|(_, n, _)| n).sum();
        let y: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let yh: Vec<f64> = samples.iter().map(|s| s.2).collect();
        let overall = compute_metrics(&y, &yh, 120).unwrap();
        let overall_mse = overall.rmse * overall.rmse;
        assert!(((weighted / total_n as f64 - overall_mse) / overall_mse).abs() < 1e-12);
    }

    #[test]
    fn daily_rows_are_chronological() {
        let samples = vec![(d(9), 1.0, 2.0), (d(2), 3.0, 1.0), (d(5), 2.0, 2.0), (d(2), 4.0, 4.0)];
        let daily = daily_rmse(&samples);
        let dates: Vec<NaiveDate> = daily.iter().map(|r| r.0).collect();
        assert_eq!(dates, vec![d(2), d(5), d(9)]);
    }

    #[test]
    fn report_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let report = MetricsReport {
            horizon_min: 120,
            n: 4,
            rmse: 12.5,
            rse: Some(0.5),
            corr: None,
        };
        write_report(&path, &report, &[(d(1), 4, 12.5)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "horizon_min,n,rmse,rse,corr");
        assert_eq!(lines.next().unwrap(), "120,4,12.5,0.5,");
        assert_eq!(lines.next().unwrap(), "date,n,rmse");
        assert_eq!(lines.next().unwrap(), "2023-10-01,4,12.5");
    }
}
