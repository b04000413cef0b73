//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function has a plain Rust counterpart returning `Result<_, String>` so it
//! can be tested natively.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use progsiam::loss::{self, Alpha, TripletLossInputs};
use progsiam::synth::{Renderer, SynthConfig};
use progsiam::tsne::{self, TsneConfig};
use progsiam::ProgressionLevel;

#[derive(Debug, Serialize)]
pub struct Curve {
    pub label: String,
    pub alpha: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct LossCurves {
    pub d_an: Vec<f64>,
    pub curves: Vec<Curve>,
}

/// Triplet loss against the anchor–negative distance at fixed `d_ap`, once per weighting
/// coefficient (levels 0.1 to 0.9). `α = 1.0` is the unweighted loss.
pub fn loss_curves_data(d_ap: f64, margin: f64, d_an_max: f64, points: usize) -> Result<LossCurves, String> {
    if points < 2 || !(d_an_max > 0.0) {
        return Err("need at least 2 points and a positive range".into());
    }
    let d_an: Vec<f64> = (0..points).map(|i| d_an_max * i as f64 / (points - 1) as f64).collect();
    let mut curves = Vec::new();
    for t in 1..=9u8 {
        let level = ProgressionLevel::from_tenths(t).map_err(|e| e.to_string())?;
        let alpha: Alpha = progsiam::alpha_of(level).map_err(|e| e.to_string())?;
        let values = d_an
            .iter()
            .map(|&d| {
                let inputs = TripletLossInputs::new(d_ap, d, margin)?;
                loss::weighted_loss(&inputs, alpha)?.item()
            })
            .collect::<progsiam::Result<Vec<f64>>>()
            .map_err(|e| e.to_string())?;
        curves.push(Curve { label: format!("rho {level}"), alpha: alpha.value(), values });
    }
    Ok(LossCurves { d_an, curves })
}

/// One axial slice (`H × W`, row-major) of a synthetic 16³ volume.
pub fn volume_slice_data(level: f64, signal: f64, noise: f64, seed: u64, z: usize) -> Result<Vec<f64>, String> {
    if !(0.0..=1.0).contains(&level) {
        return Err(format!("level {level} not in [0, 1]"));
    }
    let cfg = SynthConfig { signal_strength: signal, noise_sigma: noise, seed, ..Default::default() };
    let [_, d, h, w] = cfg.volume_shape;
    if z >= d {
        return Err(format!("slice {z} out of range 0..{d}"));
    }
    let vol = Renderer::new(&cfg).map_err(|e| e.to_string())?.render(level, 0);
    Ok(vol.data()[z * h * w..(z + 1) * h * w].to_vec())
}

#[derive(Debug, Serialize)]
pub struct ClusterPoint {
    pub rho: f64,
    pub x: f64,
    pub y: f64,
}

/// t-SNE of 8-dim points drawn around one centre per level (0.2 to 1.0), with centres
/// further from the conversion level the lower the level, as a trained encoder places them.
pub fn tsne_clusters_data(
    per_level: usize,
    spread: f64,
    perplexity: f64,
    iterations: usize,
    seed: u64,
) -> Result<Vec<ClusterPoint>, String> {
    let noise = Normal::new(0.0, spread).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = [0.6, -0.3, 0.5, 0.1, -0.4, 0.2, 0.25, -0.15];
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for t in 2..=10u8 {
        let rho = t as f64 / 10.0;
        for _ in 0..per_level {
            points.push(direction.iter().map(|d| 4.0 * (1.0 - rho) * d + noise.sample(&mut rng)).collect());
            labels.push(rho);
        }
    }
    let cfg = TsneConfig { perplexity, iterations, seed, ..Default::default() };
    let proj = tsne::project(&points, &cfg).map_err(|e| e.to_string())?;
    Ok(labels.into_iter().zip(proj.points).map(|(rho, p)| ClusterPoint { rho, x: p[0], y: p[1] }).collect())
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// JSON `{d_an: [...], curves: [{label, alpha, values}]}`.
#[wasm_bindgen]
pub fn loss_curves(d_ap: f64, margin: f64, d_an_max: f64, points: usize) -> Result<String, JsError> {
    to_js(loss_curves_data(d_ap, margin, d_an_max, points))
}

/// Seeds are `u32` here so JavaScript can pass plain numbers.
#[wasm_bindgen]
pub fn volume_slice(level: f64, signal: f64, noise: f64, seed: u32, z: usize) -> Result<Vec<f64>, JsError> {
    volume_slice_data(level, signal, noise, seed.into(), z).map_err(|e| JsError::new(&e))
}

/// JSON `[{rho, x, y}]`.
#[wasm_bindgen]
pub fn tsne_clusters(
    per_level: usize,
    spread: f64,
    perplexity: f64,
    iterations: usize,
    seed: u32,
) -> Result<String, JsError> {
    to_js(tsne_clusters_data(per_level, spread, perplexity, iterations, seed.into()))
}
