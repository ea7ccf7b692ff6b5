//! Absolute position error statistics and match rate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::PoseRow;
use crate::error::{Error, Result};
use crate::registration::PredictionRow;

/// Default match threshold, meters.
pub const MATCH_THRESHOLD_M: f64 = 10.0;

/// Predictions and ground truth are paired when their timestamps differ by
/// at most this (seconds).
pub const TIMESTAMP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ape_mean: f64,
    /// Population standard deviation.
    pub ape_std: f64,
    /// Sample (n - 1) standard deviation; 0 for a single frame.
    pub ape_std_sample: f64,
    pub ape_median: f64,
    pub ape_max: f64,
    pub match_rate: f64,
    pub n_frames: usize,
    pub threshold: f64,
    pub seconds_per_frame: Option<f64>,
}

/// Euclidean distance between paired `(easting, northing)` points.
pub fn ape_series(preds: &[(f64, f64)], gts: &[(f64, f64)]) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} ground-truth poses",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("empty series".into()));
    }
    Ok(preds
        .iter()
        .zip(gts)
        .map(|(p, g)| (p.0 - g.0).hypot(p.1 - g.1))
        .collect())
}

/// Aggregates per-frame errors; a frame matches when its error is strictly
/// below `threshold`.
pub fn summarize(d: &[f64], threshold: f64) -> Result<EvalReport> {
    if d.is_empty() {
        return Err(Error::InvalidArgument("empty series".into()));
    }
    if let Some(v) = d.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidArgument(format!("invalid error value {v}")));
    }
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold}")));
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let ss: f64 = d.iter().map(|v| (v - mean).powi(2)).sum();
    let mut sorted = d.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    Ok(EvalReport {
        ape_mean: mean,
        ape_std: (ss / n).sqrt(),
        ape_std_sample: if d.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 },
        ape_median: median,
        ape_max: sorted[sorted.len() - 1],
        match_rate: d.iter().filter(|&&v| v < threshold).count() as f64 / n,
        n_frames: d.len(),
        threshold,
        seconds_per_frame: None,
    })
}

/// Pairs prediction rows with ground-truth rows by timestamp. Every
/// prediction must have a ground-truth pose.
pub fn align(preds: &[PredictionRow], gts: &[PoseRow]) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    let mut p = Vec::with_capacity(preds.len());
    let mut g = Vec::with_capacity(preds.len());
    for row in preds {
        let i = gts.partition_point(|r| r.timestamp < row.timestamp - TIMESTAMP_TOLERANCE);
        match gts.get(i) {
            Some(gt) if (gt.timestamp - row.timestamp).abs() <= TIMESTAMP_TOLERANCE => {
                p.push((row.pred_easting, row.pred_northing));
                g.push((gt.easting, gt.northing));
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "no ground truth at timestamp {}",
                    row.timestamp
                )))
            }
        }
    }
    Ok((p, g))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:>12}", "metric", "value")?;
        writeln!(f, "{:<20} {:>12}", "frames", self.n_frames)?;
        writeln!(f, "{:<20} {:>12.4}", "APE mean (m)", self.ape_mean)?;
        writeln!(f, "{:<20} {:>12.4}", "APE std (m)", self.ape_std)?;
        writeln!(f, "{:<20} {:>12.4}", "APE std n-1 (m)", self.ape_std_sample)?;
        writeln!(f, "{:<20} {:>12.4}", "APE median (m)", self.ape_median)?;
        writeln!(f, "{:<20} {:>12.4}", "APE max (m)", self.ape_max)?;
        write!(
            f,
            "{:<20} {:>11.2}%",
            format!("match rate (<{}m)", self.threshold),
            100.0 * self.match_rate
        )?;
        if let Some(s) = self.seconds_per_frame {
            write!(f, "\n{:<20} {:>12.4}", "seconds/frame", s)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_series() {
        let pts = vec![(1.0, 2.0), (3.0, -4.0)];
        let r = summarize(&ape_series(&pts, &pts).unwrap(), MATCH_THRESHOLD_M).unwrap();
        assert_eq!((r.ape_mean, r.ape_std, r.match_rate), (0.0, 0.0, 1.0));
    }

    #[test]
    fn threshold_is_strict() {
        let r = summarize(&[10.0], 10.0).unwrap();
        assert_eq!(r.match_rate, 0.0);
        assert_eq!(r.ape_std_sample, 0.0);
    }

    #[test]
    fn errors_are_euclidean() {
        let d = ape_series(&[(3.0, 4.0)], &[(0.0, 0.0)]).unwrap();
        assert_eq!(d, vec![5.0]);
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(ape_series(&[], &[]).is_err());
        assert!(ape_series(&[(0.0, 0.0)], &[]).is_err());
        assert!(summarize(&[], 10.0).is_err());
        assert!(summarize(&[f64::NAN], 10.0).is_err());
    }

    #[test]
    fn alignment_by_timestamp() {
        let gts: Vec<PoseRow> = (0..4)
            .map(|k| PoseRow {
                timestamp: k as f64 * 0.5,
                easting: k as f64,
                northing: 0.0,
                azimuth: 0.0,
            })
            .collect();
        let pred = |t: f64| PredictionRow {
            timestamp: t,
            pred_easting: 0.0,
            pred_northing: 0.0,
            peak_score: 1.0,
            valid_flag: 1,
        };
        let (_, g) = align(&[pred(1.0), pred(1.5)], &gts).unwrap();
        assert_eq!(g, vec![(2.0, 0.0), (3.0, 0.0)]);
        assert!(align(&[pred(0.75)], &gts).is_err());
    }

    #[test]
    fn table_mentions_threshold() {
        let s = summarize(&[1.0, 2.0], 10.0).unwrap().to_string();
        assert!(s.contains("match rate (<10m)"));
        assert!(s.contains("100.00%"));
    }
}
