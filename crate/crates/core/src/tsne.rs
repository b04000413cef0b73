//! Exact t-SNE to two dimensions.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::loss::ProgressionLevel;

pub const PERPLEXITY_TOL: f64 = 1e-5;
pub const MAX_BISECTION_STEPS: usize = 50;
/// Iteration at which exaggeration ends and momentum rises.
pub const EXAGGERATION_ITERS: usize = 250;
pub const TRACE_EVERY: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig { perplexity: 32.0, iterations: 1000, learning_rate: 200.0, early_exaggeration: 12.0, seed: 0 }
    }
}

impl TsneConfig {
    pub fn with_perplexity(perplexity: f64) -> Self {
        TsneConfig { perplexity, ..Default::default() }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 4 {
            return Err(Error::Tsne(format!("need at least 4 points, got {n}")));
        }
        let bound = (n as f64 - 1.0) / 3.0;
        if !(self.perplexity >= 1.0 && self.perplexity < bound) {
            return Err(Error::Tsne(format!("perplexity {} must be in [1, {bound:.3}) for {n} points", self.perplexity)));
        }
        if self.iterations == 0 || !(self.learning_rate > 0.0) || !(self.early_exaggeration >= 1.0) {
            return Err(Error::Tsne("iterations, learning_rate and early_exaggeration must be positive".into()));
        }
        Ok(())
    }
}

/// `2^H(p)` with the entropy in bits.
pub fn perplexity_of(row: &[f64]) -> Result<f64> {
    let sum: f64 = row.iter().sum();
    if row.is_empty() || row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Tsne("row is not a probability distribution".into()));
    }
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    Ok(h.exp2())
}

fn squared_distances(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Row `i` of the conditional distribution for precision `beta`, with the diagonal zero.
fn gaussian_row(dists: &[f64], i: usize, beta: f64, out: &mut [f64]) {
    let min = dists.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o = if j == i { 0.0 } else { (-(dists[j] - min) * beta).exp() };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-stochastic `p_{j|i}` matched to `perplexity`, row-major `n × n`.
pub fn conditional_p(points: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = points.len();
    let d2 = squared_distances(points);
    // Rescale so the bandwidth search is independent of the embedding's scale.
    let mean = d2.iter().sum::<f64>() / (n * n - n) as f64;
    if !(mean > 0.0) {
        return Err(Error::Tsne("all points are identical".into()));
    }
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row_d: Vec<f64> = d2[i * n..(i + 1) * n].iter().map(|d| d / mean).collect();
        // Bisection on ln(beta); entropy falls as beta grows.
        let (mut lo, mut hi) = (-50.0f64, 50.0f64);
        let mut reached = f64::NAN;
        let mut ok = false;
        for _ in 0..MAX_BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            gaussian_row(&row_d, i, mid.exp(), &mut p[i * n..(i + 1) * n]);
            let h: f64 = p[i * n..(i + 1) * n].iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
            reached = h.exp();
            if (reached - perplexity).abs() <= PERPLEXITY_TOL {
                ok = true;
                break;
            }
            if h > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if !ok {
            return Err(Error::PerplexityNotReached { row: i, reached, target: perplexity });
        }
    }
    Ok(p)
}

/// `(P + Pᵀ) / 2n`: symmetric with total mass 1.
pub fn joint_p(conditional: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (conditional[i * n + j] + conditional[j * n + i]) / (2.0 * n as f64);
        }
    }
    p
}

fn student_t(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    (num, z)
}

/// `KL(P ‖ Q)` for a 2-D layout.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let (num, z) = student_t(y);
    p.iter()
        .zip(&num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| pij * (pij / (nij / z).max(f64::MIN_POSITIVE)).ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlPoint {
    pub iteration: usize,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// KL at iteration 0 and every [`TRACE_EVERY`] iterations, against the unexaggerated P.
    pub kl_trace: Vec<KlPoint>,
}

impl Projection {
    pub fn kl_at(&self, iteration: usize) -> Option<f64> {
        self.kl_trace.iter().find(|k| k.iteration == iteration).map(|k| k.kl)
    }
}

pub fn project(embeddings: &[Vec<f64>], cfg: &TsneConfig) -> Result<Projection> {
    let n = embeddings.len();
    cfg.validate(n)?;
    let dim = embeddings[0].len();
    if dim == 0 || embeddings.iter().any(|e| e.len() != dim || e.iter().any(|v| !v.is_finite())) {
        return Err(Error::Tsne("embeddings must share one non-zero dimension and be finite".into()));
    }
    let p = joint_p(&conditional_p(embeddings, cfg.perplexity)?, n);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid sigma");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_trace = vec![KlPoint { iteration: 0, kl: kl_divergence(&p, &y) }];

    for it in 1..=cfg.iterations {
        let exaggerate = it <= EXAGGERATION_ITERS;
        let factor = if exaggerate { cfg.early_exaggeration } else { 1.0 };
        let momentum = if exaggerate { 0.5 } else { 0.8 };
        let (num, z) = student_t(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (factor * p[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                g[0] += 4.0 * w * (y[i][0] - y[j][0]);
                g[1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
            for a in 0..2 {
                gains[i][a] = if (g[a] > 0.0) != (velocity[i][a] > 0.0) { gains[i][a] + 0.2 } else { gains[i][a] * 0.8 };
                gains[i][a] = gains[i][a].max(0.01);
                velocity[i][a] = momentum * velocity[i][a] - cfg.learning_rate * gains[i][a] * g[a];
            }
        }
        for (yi, vi) in y.iter_mut().zip(&velocity) {
            yi[0] += vi[0];
            yi[1] += vi[1];
        }
        let mean = y.iter().fold([0.0; 2], |m, v| [m[0] + v[0], m[1] + v[1]]);
        for yi in &mut y {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
        if it % TRACE_EVERY == 0 || it == cfg.iterations {
            let kl = kl_divergence(&p, &y);
            if !kl.is_finite() {
                return Err(Error::NonFinite { op: "tsne" });
            }
            kl_trace.push(KlPoint { iteration: it, kl });
        }
    }
    Ok(Projection { points: y, kl_trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneRow {
    pub scan_ref: String,
    pub true_rho: ProgressionLevel,
    pub x: f64,
    pub y: f64,
}

pub fn write_outputs(csv_path: &Path, trace_path: &Path, rows: &[TsneRow], projection: &Projection) -> Result<()> {
    io::write_csv(csv_path, rows)?;
    io::write_json(trace_path, &projection.kl_trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_examples() {
        assert!((perplexity_of(&[0.25; 4]).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(perplexity_of(&[0.0, 1.0, 0.0]).unwrap(), 1.0);
        assert!(perplexity_of(&[0.5, 0.6]).is_err());
        assert!(perplexity_of(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn rejects_infeasible_inputs() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0]).collect();
        assert!(project(&pts, &TsneConfig::with_perplexity(3.0)).is_err());
        assert!(project(&pts[..3], &TsneConfig::with_perplexity(0.5)).is_err());
        let same = vec![vec![1.0, 1.0]; 10];
        assert!(project(&same, &TsneConfig::with_perplexity(2.0)).is_err());
    }

    #[test]
    fn joint_is_symmetric_unit_mass() {
        let pts: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64).sin(), (i * i) as f64 * 0.1]).collect();
        let c = conditional_p(&pts, 3.0).unwrap();
        for i in 0..12 {
            let row = &c[i * 12..(i + 1) * 12];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((perplexity_of(row).unwrap() - 3.0).abs() <= PERPLEXITY_TOL);
        }
        let p = joint_p(&c, 12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(p[i * 12 + j], p[j * 12 + i]);
            }
        }
    }
}
