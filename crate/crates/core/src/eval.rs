//! Turns anchor–negative embedding distances into predicted progression levels with
//! equal-width bins, and scores them with MAE and RMSE in level steps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::TripletManifest;
use crate::encoder::{embed, EncoderParams};
use crate::error::{Error, Result};
use crate::io;
use crate::loss::ProgressionLevel;
use crate::tensor::{kernels, Tensor};
use crate::volume::VolumeSet;

/// Equal-width bins over `[lo, hi]`. Bin 0 starts at `lo` and maps to the largest level;
/// the last bin ends at `hi` and maps to the smallest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    /// Ascending; one bin per level.
    pub levels: Vec<ProgressionLevel>,
}

impl BinSpec {
    pub fn new(lo: f64, hi: f64, mut levels: Vec<ProgressionLevel>) -> Result<Self> {
        levels.sort();
        levels.dedup();
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Bins(format!("need finite lo < hi, got [{lo}, {hi}]")));
        }
        if levels.len() < 2 {
            return Err(Error::Bins(format!("need at least 2 levels, got {}", levels.len())));
        }
        Ok(BinSpec { lo, hi, levels })
    }

    pub fn k(&self) -> usize {
        self.levels.len()
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.k() as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        let w = self.width();
        (0..=self.k()).map(|i| if i == self.k() { self.hi } else { self.lo + i as f64 * w }).collect()
    }

    /// Bin index of `d`, counted from `lo`, with out-of-range distances clamped.
    pub fn bin_of(&self, d: f64) -> usize {
        let raw = ((d - self.lo) / self.width()).floor();
        if raw.is_nan() || raw < 0.0 {
            0
        } else {
            (raw as usize).min(self.k() - 1)
        }
    }
}

pub fn fit_bins(train_distances: &[f64], levels: &[ProgressionLevel]) -> Result<BinSpec> {
    if train_distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::Bins("distances must be finite".into()));
    }
    let lo = train_distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = train_distances.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if train_distances.len() < 2 || lo == hi {
        return Err(Error::Bins("need at least 2 distinct distances".into()));
    }
    BinSpec::new(lo, hi, levels.to_vec())
}

/// Larger distances map to smaller levels.
pub fn predict_level(d: f64, spec: &BinSpec) -> ProgressionLevel {
    spec.levels[spec.k() - 1 - spec.bin_of(d)]
}

fn check_pairs(pred: &[ProgressionLevel], truth: &[ProgressionLevel]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!("{} predictions vs {} truths", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Metric("no predictions".into()));
    }
    Ok(())
}

fn step_diffs<'a>(pred: &'a [ProgressionLevel], truth: &'a [ProgressionLevel]) -> impl Iterator<Item = f64> + 'a {
    pred.iter().zip(truth).map(|(p, t)| p.tenths() as f64 - t.tenths() as f64)
}

/// Mean absolute error in level steps (one step = 0.1).
pub fn mae(pred: &[ProgressionLevel], truth: &[ProgressionLevel]) -> Result<f64> {
    check_pairs(pred, truth)?;
    Ok(step_diffs(pred, truth).map(f64::abs).sum::<f64>() / pred.len() as f64)
}

/// Root mean squared error in level steps.
pub fn rmse(pred: &[ProgressionLevel], truth: &[ProgressionLevel]) -> Result<f64> {
    check_pairs(pred, truth)?;
    Ok((step_diffs(pred, truth).map(|d| d * d).sum::<f64>() / pred.len() as f64).sqrt())
}

/// One negative scan's mean distance to the anchors of its split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanDistance {
    pub scan_ref: String,
    pub true_rho: ProgressionLevel,
    pub distance: f64,
}

/// Distinct negatives of `manifest` in first-seen order, each with its mean distance
/// to every distinct anchor in the manifest.
pub fn negative_distances(
    params: &EncoderParams,
    manifest: &TripletManifest,
    volumes: &VolumeSet,
) -> Result<Vec<ScanDistance>> {
    if manifest.triplets.is_empty() {
        return Err(Error::Metric(format!("{} manifest has no triplets", manifest.split)));
    }
    let anchors: Vec<Tensor> = manifest
        .anchor_pool()
        .into_iter()
        .map(|a| embed(params, volumes.get(a)?))
        .collect::<Result<_>>()?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for t in &manifest.triplets {
        if !seen.insert(t.negative.as_str()) {
            continue;
        }
        let e = embed(params, volumes.get(&t.negative)?)?;
        let mut sum = 0.0;
        for a in &anchors {
            sum += kernels::euclidean_distance(&e, a)?;
        }
        out.push(ScanDistance { scan_ref: t.negative.clone(), true_rho: t.rho, distance: sum / anchors.len() as f64 });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum BinSource {
    /// Fit on the distances being evaluated (used for the training split).
    Fit,
    Fixed(BinSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub scan_ref: String,
    pub true_rho: ProgressionLevel,
    pub distance: f64,
    pub pred_rho: ProgressionLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
    pub bins: BinSpec,
    pub rows: Vec<PredictionRow>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn write_scatter_csv(&self, path: &Path) -> Result<()> {
        io::write_csv(path, &self.rows)
    }
}

/// Bins and scores precomputed distances.
pub fn score(distances: &[ScanDistance], bins: &BinSource) -> Result<EvalReport> {
    let spec = match bins {
        BinSource::Fixed(s) => s.clone(),
        BinSource::Fit => {
            let d: Vec<f64> = distances.iter().map(|s| s.distance).collect();
            let levels: BTreeSet<_> = distances.iter().map(|s| s.true_rho).collect();
            fit_bins(&d, &levels.into_iter().collect::<Vec<_>>())?
        }
    };
    let rows: Vec<PredictionRow> = distances
        .iter()
        .map(|s| PredictionRow {
            scan_ref: s.scan_ref.clone(),
            true_rho: s.true_rho,
            distance: s.distance,
            pred_rho: predict_level(s.distance, &spec),
        })
        .collect();
    let pred: Vec<_> = rows.iter().map(|r| r.pred_rho).collect();
    let truth: Vec<_> = rows.iter().map(|r| r.true_rho).collect();
    Ok(EvalReport { mae: mae(&pred, &truth)?, rmse: rmse(&pred, &truth)?, n: rows.len(), bins: spec, rows })
}

pub fn evaluate(
    params: &EncoderParams,
    manifest: &TripletManifest,
    volumes: &VolumeSet,
    bins: &BinSource,
) -> Result<EvalReport> {
    score(&negative_distances(params, manifest, volumes)?, bins)
}

/// Mean MAE and RMSE over several runs.
pub fn mean_metrics(reports: &[EvalReport]) -> Result<(f64, f64)> {
    if reports.is_empty() {
        return Err(Error::Metric("no reports to average".into()));
    }
    let n = reports.len() as f64;
    Ok((reports.iter().map(|r| r.mae).sum::<f64>() / n, reports.iter().map(|r| r.rmse).sum::<f64>() / n))
}

/// Count of predictions per (true, predicted) level pair.
pub fn confusion(report: &EvalReport) -> BTreeMap<(ProgressionLevel, ProgressionLevel), usize> {
    let mut m = BTreeMap::new();
    for r in &report.rows {
        *m.entry((r.true_rho, r.pred_rho)).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(t: u8) -> ProgressionLevel {
        ProgressionLevel::from_tenths(t).unwrap()
    }

    #[test]
    fn two_bin_example() {
        let spec = fit_bins(&[0.0, 10.0], &[lv(8), lv(9)]).unwrap();
        assert_eq!(spec.edges(), vec![0.0, 5.0, 10.0]);
        assert_eq!(predict_level(2.0, &spec), lv(9));
        assert_eq!(predict_level(7.0, &spec), lv(8));
    }

    #[test]
    fn endpoints_and_clamping() {
        let levels: Vec<_> = (2..=10).map(lv).collect();
        let spec = fit_bins(&[1.0, 4.0, 2.5], &levels).unwrap();
        assert_eq!(spec.edges().len(), 10);
        assert_eq!(predict_level(1.0, &spec), lv(10));
        assert_eq!(predict_level(4.0, &spec), lv(2));
        assert_eq!(predict_level(99.0, &spec), lv(2));
        assert_eq!(predict_level(-5.0, &spec), lv(10));
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        assert!(fit_bins(&[3.0, 3.0], &[lv(8), lv(9)]).is_err());
        assert!(fit_bins(&[3.0], &[lv(8), lv(9)]).is_err());
        assert!(fit_bins(&[0.0, 1.0], &[lv(8)]).is_err());
        assert!(fit_bins(&[0.0, f64::NAN], &[lv(8), lv(9)]).is_err());
    }

    #[test]
    fn metric_examples() {
        let truth = [lv(5), lv(7), lv(9)];
        assert_eq!(mae(&truth, &truth).unwrap(), 0.0);
        assert_eq!(rmse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(mae(&[lv(6), lv(8), lv(10)], &truth).unwrap(), 1.0);
        assert_eq!(rmse(&[lv(3)], &[lv(5)]).unwrap(), 2.0);
        assert!(mae(&[], &[]).is_err());
        assert!(rmse(&[lv(3)], &truth).is_err());
    }

    #[test]
    fn score_fits_then_reuses() {
        let d = |r: &str, t: u8, x: f64| ScanDistance { scan_ref: r.into(), true_rho: lv(t), distance: x };
        let train = [d("a", 9, 1.0), d("b", 8, 2.0), d("c", 7, 3.0)];
        let rep = score(&train, &BinSource::Fit).unwrap();
        assert_eq!(rep.mae, 0.0);
        let test = [d("x", 9, 2.9)];
        let rep2 = score(&test, &BinSource::Fixed(rep.bins.clone())).unwrap();
        assert_eq!(rep2.rows[0].pred_rho, lv(7));
        assert_eq!(rep2.mae, 2.0);
    }
}
