//! Seed-deterministic synthetic cohorts.
//!
//! Every scan volume is `baseline + level * signal_strength * template + noise`, where the
//! baseline and template are fixed spatial patterns and the noise is Gaussian with its own
//! counter-derived stream per scan, so any subset of scans renders identically.

use std::path::Path;

use chrono::{Datelike, Months, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{write_cohort_csv, Diagnosis, Exam, ParticipantRecord};
use crate::error::{Error, Result};
use crate::loss::{LevelCounts, ProgressionLevel};
use crate::tensor::Tensor;
use crate::volume::{self, VolumeSet};

/// Scans per level: sparse far from conversion, dense close to it, 148 negatives in all.
/// Every trajectory has exactly one 0.9 scan and one 1.0 scan, so those two counts are equal.
pub fn default_quotas() -> LevelCounts {
    [(2, 1), (3, 1), (4, 2), (5, 3), (6, 6), (7, 14), (8, 46), (9, 75), (10, 75)]
        .into_iter()
        .map(|(t, n)| (ProgressionLevel::from_tenths(t).unwrap(), n))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// `[C, D, H, W]`
    pub volume_shape: [usize; 4],
    /// Total participants. Those beyond the number of progressive trajectories (the 1.0
    /// quota) are stable-MCI, AD-only or normal-only distractors.
    pub participants: usize,
    pub level_quotas: LevelCounts,
    pub signal_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            volume_shape: [1, 16, 16, 16],
            participants: 130,
            level_quotas: default_quotas(),
            signal_strength: 1.0,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SynthConfig(m));
        if self.volume_shape.contains(&0) {
            return bad(format!("volume_shape {:?} has a zero extent", self.volume_shape));
        }
        if !(self.signal_strength > 0.0 && self.signal_strength <= 1.0) {
            return bad(format!("signal_strength {} not in (0, 1]", self.signal_strength));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        // Every trajectory ends at 1.0 and is contiguous, so lower levels can never have
        // more scans than higher ones.
        let q = |t: u8| self.level_quotas.get(ProgressionLevel::from_tenths(t).unwrap());
        for t in 1..10 {
            if q(t) > q(t + 1) {
                return bad(format!(
                    "quota for {} ({}) exceeds quota for {} ({}); trajectories end at 1.0",
                    t as f64 / 10.0,
                    q(t),
                    (t + 1) as f64 / 10.0,
                    q(t + 1)
                ));
            }
        }
        if q(10) != q(9) {
            return bad(format!(
                "quota for 1.0 ({}) must equal quota for 0.9 ({}): each trajectory has one scan at each",
                q(10),
                q(9)
            ));
        }
        if self.participants < q(10) {
            return bad(format!(
                "{} participants cannot hold {} progressive trajectories",
                self.participants,
                q(10)
            ));
        }
        Ok(())
    }

    fn voxels_per_channel(&self) -> usize {
        self.volume_shape[1] * self.volume_shape[2] * self.volume_shape[3]
    }
}

/// One scan of the synthetic cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedScan {
    pub participant_id: String,
    pub exam: Exam,
    /// Level whose signal the volume carries (0 for scans outside an MCI to AD window).
    pub signal_level: f64,
    /// Noise stream index, unique per scan.
    pub stream: u64,
}

#[derive(Debug, Clone)]
pub struct CohortPlan {
    pub records: Vec<ParticipantRecord>,
    pub scans: Vec<PlannedScan>,
}

fn date(year: i32, month: u32, day: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(year, month, day).expect("valid date")
}

/// Participant records and per-scan render parameters, without any volume data.
pub fn plan_cohort(cfg: &SynthConfig) -> Result<CohortPlan> {
    cfg.validate()?;
    let q = |t: u8| cfg.level_quotas.get(ProgressionLevel::from_tenths(t).unwrap());
    let n_prog = q(10);
    let width = cfg.participants.max(1).to_string().len().max(4);

    let mut records = Vec::new();
    let mut scans = Vec::new();
    let mut stream = 0u64;
    for p in 0..cfg.participants {
        let id = format!("S{:0width$}", p + 1);
        let start = date(2005 + (p % 4) as i32, 1 + (p % 12) as u32, 1 + (p % 28) as u32);
        // (diagnosis, signal level) per exam, one exam per year.
        let mut plan: Vec<(Diagnosis, f64)> = Vec::new();
        if p < n_prog {
            let len = (1..=10u8).filter(|&j| q(11 - j) > p).count();
            if p % 3 == 0 {
                plan.push((Diagnosis::Normal, 0.0));
            }
            for j in 0..len {
                let tenths = 10 - (len - 1 - j);
                let dx = if j + 1 == len { Diagnosis::Ad } else { Diagnosis::Mci };
                plan.push((dx, tenths as f64 / 10.0));
            }
            if p % 4 == 1 {
                plan.push((Diagnosis::Ad, 1.0));
            }
        } else {
            match (p - n_prog) % 3 {
                0 => plan.extend([(Diagnosis::Mci, 0.0), (Diagnosis::Mci, 0.0)]),
                1 => plan.push((Diagnosis::Ad, 1.0)),
                _ => plan.push((Diagnosis::Normal, 0.0)),
            }
        }
        let mut exams = Vec::new();
        for (k, (dx, level)) in plan.into_iter().enumerate() {
            let exam_date = start.checked_add_months(Months::new(12 * k as u32)).expect("date in range");
            let exam = Exam {
                exam_date,
                diagnosis: dx,
                scan_ref: format!("volumes/{id}_{}.vol", exam_date.year()),
            };
            scans.push(PlannedScan { participant_id: id.clone(), exam: exam.clone(), signal_level: level, stream });
            stream += 1;
            exams.push(exam);
        }
        records.push(ParticipantRecord::new(id, exams)?);
    }
    Ok(CohortPlan { records, scans })
}

/// Smooth fixed pattern shared by every scan.
pub fn baseline(cfg: &SynthConfig) -> Tensor {
    let [c, d, h, w] = cfg.volume_shape;
    let mut data = Vec::with_capacity(c * cfg.voxels_per_channel());
    let tau = std::f64::consts::TAU;
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (fz, fy, fx) = (z as f64 / d as f64, y as f64 / h as f64, x as f64 / w as f64);
                    data.push(
                        0.5 + 0.2 * (tau * fx).sin() * (tau * fy).cos() + 0.1 * (tau * (fz + 0.1 * ch as f64)).cos(),
                    );
                }
            }
        }
    }
    Tensor::new(cfg.volume_shape.to_vec(), data).expect("finite baseline")
}

/// The level-dependent pattern: a central blob plus a weaker off-centre one, peak 1.
pub fn template(cfg: &SynthConfig) -> Tensor {
    let [c, d, h, w] = cfg.volume_shape;
    let blob = |z: f64, y: f64, x: f64, cz: f64, cy: f64, cx: f64, s: f64| {
        let r2 = (z - cz).powi(2) + (y - cy).powi(2) + (x - cx).powi(2);
        (-r2 / (2.0 * s * s)).exp()
    };
    let mut data = Vec::with_capacity(c * cfg.voxels_per_channel());
    for _ in 0..c {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (fz, fy, fx) = (
                        (z as f64 + 0.5) / d as f64,
                        (y as f64 + 0.5) / h as f64,
                        (x as f64 + 0.5) / w as f64,
                    );
                    data.push(blob(fz, fy, fx, 0.5, 0.5, 0.5, 0.18) + 0.5 * blob(fz, fy, fx, 0.3, 0.7, 0.25, 0.1));
                }
            }
        }
    }
    let peak = data.iter().cloned().fold(0.0, f64::max);
    Tensor::new(cfg.volume_shape.to_vec(), data.into_iter().map(|v| v / peak).collect()).expect("finite template")
}

/// Pre-computed fixed patterns for rendering many scans.
#[derive(Debug, Clone)]
pub struct Renderer {
    cfg: SynthConfig,
    baseline: Tensor,
    template: Tensor,
}

impl Renderer {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Renderer { cfg: cfg.clone(), baseline: baseline(cfg), template: template(cfg) })
    }

    /// Full-precision volume for one scan.
    pub fn render(&self, level: f64, stream: u64) -> Tensor {
        let s = self.cfg.signal_strength;
        let sigma = self.cfg.noise_sigma;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(stream);
        let data = self
            .baseline
            .data()
            .iter()
            .zip(self.template.data())
            .map(|(&b, &t)| {
                let v = b + level * s * t;
                if sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + sigma * z
                } else {
                    v
                }
            })
            .collect();
        Tensor::new(self.cfg.volume_shape.to_vec(), data).expect("finite volume")
    }
}

/// Records plus volumes as a file round trip would return them (voxels rounded to `f32`).
pub fn render_cohort(cfg: &SynthConfig) -> Result<(Vec<ParticipantRecord>, VolumeSet)> {
    let plan = plan_cohort(cfg)?;
    let r = Renderer::new(cfg)?;
    let set = plan
        .scans
        .iter()
        .map(|s| (s.exam.scan_ref.clone(), volume::quantize(&r.render(s.signal_level, s.stream))))
        .collect();
    Ok((plan.records, set))
}

/// Writes `cohort.csv` and one volume file per scan under `out_dir`.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ParticipantRecord>> {
    let plan = plan_cohort(cfg)?;
    let r = Renderer::new(cfg)?;
    for s in &plan.scans {
        volume::write(&out_dir.join(&s.exam.scan_ref), &r.render(s.signal_level, s.stream))?;
    }
    write_cohort_csv(&out_dir.join("cohort.csv"), &plan.records)?;
    Ok(plan.records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{distribution_table, label_cohort};

    fn quotas(pairs: &[(u8, usize)]) -> LevelCounts {
        pairs.iter().map(|&(t, n)| (ProgressionLevel::from_tenths(t).unwrap(), n)).collect()
    }

    #[test]
    fn noise_free_difference_is_scaled_template() {
        let cfg = SynthConfig { noise_sigma: 0.0, signal_strength: 0.8, ..Default::default() };
        let r = Renderer::new(&cfg).unwrap();
        let (a, b) = (r.render(0.5, 3), r.render(1.0, 9));
        let t = template(&cfg);
        for i in 0..a.len() {
            let diff = b.data()[i] - a.data()[i];
            assert!((diff - 0.5 * 0.8 * t.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn quota_round_trip_through_labeling() {
        let cfg = SynthConfig { participants: 8, level_quotas: quotas(&[(9, 5), (10, 5)]), ..Default::default() };
        let plan = plan_cohort(&cfg).unwrap();
        let labeled = label_cohort(&plan.records).unwrap();
        assert_eq!(distribution_table(&labeled.scans), cfg.level_quotas);
    }

    #[test]
    fn rejects_non_monotone_quotas() {
        let cfg = SynthConfig { participants: 8, level_quotas: quotas(&[(8, 6), (9, 5), (10, 5)]), ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig { participants: 8, level_quotas: quotas(&[(9, 5), (10, 7)]), ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig { participants: 3, level_quotas: quotas(&[(9, 5), (10, 5)]), ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig { signal_strength: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn streams_are_independent_of_render_order() {
        let r = Renderer::new(&SynthConfig::default()).unwrap();
        let a = r.render(0.3, 7);
        let _ = r.render(0.9, 2);
        assert_eq!(a, r.render(0.3, 7));
        assert_ne!(a, r.render(0.3, 8));
    }
}
