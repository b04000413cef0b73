//! Fixtures shared by the integration suites.
#![allow(dead_code)]

use chrono::NaiveDate;
use progsiam::cohort::{Diagnosis, Exam, ParticipantRecord};
use progsiam::encoder::{embed_on_tape, BoundParams, EncoderConfig, EncoderParams, StageConfig};
use progsiam::gradcheck::{self, GradCheckConfig};
use progsiam::loss::{self, Alpha};
use progsiam::tensor::kernels;
use progsiam::loss::{LevelCounts, ProgressionLevel};
use progsiam::synth::SynthConfig;
use progsiam::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn level(tenths: u8) -> ProgressionLevel {
    ProgressionLevel::from_tenths(tenths).unwrap()
}

pub fn quotas(pairs: &[(u8, usize)]) -> LevelCounts {
    pairs.iter().map(|&(t, n)| (level(t), n)).collect()
}

/// One participant with a yearly exam from `start_year`, scan refs `<id>_<year>.vol`.
pub fn participant(id: &str, start_year: i32, dx: &[Diagnosis]) -> ParticipantRecord {
    let exams = dx
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let year = start_year + i as i32;
            Exam {
                exam_date: NaiveDate::from_ymd_opt(year, 6, 1).unwrap(),
                diagnosis: d,
                scan_ref: format!("{id}_{year}.vol"),
            }
        })
        .collect();
    ParticipantRecord::new(id, exams).unwrap()
}

/// Five progressive trajectories of different lengths, one of them nine
/// scans long, plus a stable-MCI and an AD-only participant.
pub fn mixed_cohort() -> Vec<ParticipantRecord> {
    use Diagnosis::{Ad, Mci, Normal};
    vec![
        participant("P1", 2006, &[Mci, Mci, Ad]),
        participant("P2", 2005, &[Normal, Mci, Mci, Mci, Mci, Ad]),
        participant("P3", 2004, &[Mci, Mci, Mci, Mci, Mci, Mci, Mci, Mci, Ad]),
        participant("P4", 2007, &[Mci, Ad, Ad]),
        participant("P5", 2007, &[Normal, Mci, Mci, Ad]),
        participant("S1", 2005, &[Mci, Mci, Mci]),
        participant("A1", 2006, &[Ad, Ad]),
    ]
}

/// Hand-computed levels of `mixed_cohort`, per participant in exam order.
pub fn mixed_levels() -> Vec<(&'static str, Vec<u8>)> {
    vec![
        ("P1", vec![8, 9, 10]),
        ("P2", vec![6, 7, 8, 9, 10]),
        ("P3", vec![2, 3, 4, 5, 6, 7, 8, 9, 10]),
        ("P4", vec![9, 10]),
        ("P5", vec![8, 9, 10]),
    ]
}

/// 8³ volumes and a matching small encoder, for fast end-to-end runs.
pub fn small_synth(noise_sigma: f64) -> SynthConfig {
    SynthConfig {
        volume_shape: [1, 8, 8, 8],
        participants: 16,
        level_quotas: quotas(&[(6, 1), (7, 3), (8, 6), (9, 10), (10, 10)]),
        noise_sigma,
        ..Default::default()
    }
}

pub fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        input_shape: [1, 8, 8, 8],
        stem_channels: 3,
        stem_stride: 2,
        stages: vec![StageConfig::new(1, 4, 2)],
        head_dims: vec![8, 4],
        embedding_dim: 4,
    }
}

/// Encoder with a single stage and block over 4³ inputs.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        input_shape: [1, 4, 4, 4],
        stem_channels: 2,
        stem_stride: 1,
        stages: vec![StageConfig::new(1, 3, 2)],
        head_dims: vec![5, 4],
        embedding_dim: 4,
    }
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

/// Pre-activation values of every ReLU in the tiny network, plus its output, computed
/// layer by layer with plain kernels.
fn tiny_layers(w: &dyn Fn(&str) -> Tensor, v: &Tensor) -> (Vec<Tensor>, Tensor) {
    let a = kernels::conv3d(v, &w("stem.w"), 1, 1).unwrap();
    let x = relu(&a);
    let b = kernels::conv3d(&x, &w("stage0.block0.conv1.w"), 2, 1).unwrap();
    let h = kernels::conv3d(&relu(&b), &w("stage0.block0.conv2.w"), 1, 1).unwrap();
    let c = add(&h, &kernels::conv3d(&x, &w("stage0.block0.proj.w"), 2, 0).unwrap());
    let g = kernels::global_avg_pool(&relu(&c)).unwrap();
    let d = kernels::dense(&g, &w("head0.w"), &w("head0.b")).unwrap();
    let out = kernels::dense(&relu(&d), &w("head1.w"), &w("head1.b")).unwrap();
    (vec![a, b, c, d], out)
}

/// The tiny network written out layer by layer.
pub fn tiny_oracle(p: &EncoderParams, v: &Tensor) -> Tensor {
    tiny_layers(&|n| p.get(n).unwrap().clone(), v).1
}

/// Smallest |input| over every ReLU of the tiny network.
pub fn tiny_min_relu_input(w: &dyn Fn(&str) -> Tensor, v: &Tensor) -> f64 {
    let min_abs = |t: &Tensor| t.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    tiny_layers(w, v).0.iter().map(min_abs).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy)]
pub struct GradSummary {
    pub cases: usize,
    pub elements: usize,
    pub max_abs_err: f64,
}

/// Finite-difference check of three tiny-encoder branches feeding the weighted loss, with
/// weights and inputs both perturbed. Draws whose ReLU inputs sit within 1e-4 of a kink are
/// skipped, since a central difference across a kink measures nothing.
pub fn gradcheck_encoder_loss(cases: usize, rng_seed: u64) -> Result<GradSummary, String> {
    let cfg = tiny_encoder();
    let names: Vec<String> = EncoderParams::init(&cfg, 0).unwrap().tensors().keys().cloned().collect();
    let mut rng = rng(rng_seed);
    let mut out = GradSummary { cases: 0, elements: 0, max_abs_err: 0.0 };
    let mut seed = 0u64;
    while out.cases < cases {
        seed += 1;
        let params = EncoderParams::init(&cfg, seed).unwrap();
        let mut inputs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[1, 4, 4, 4])).collect();
        // Random biases too, so no gradient is trivially zero.
        inputs.extend(params.tensors().values().map(|t| {
            if t.shape().len() == 1 {
                random(&mut rng, t.shape())
            } else {
                t.clone()
            }
        }));
        let w = |n: &str| inputs[3 + names.iter().position(|m| m == n).unwrap()].clone();
        if inputs[..3].iter().any(|v| tiny_min_relu_input(&w, v) < 1e-4) {
            continue;
        }
        let alpha = Alpha::new(1.0 + 0.8 * (seed % 9) as f64 / 8.0).unwrap();
        let report = gradcheck::check(&inputs, GradCheckConfig::default(), |t, v| {
            let bound: BoundParams = names.iter().cloned().zip(v[3..].iter().copied()).collect();
            let ea = embed_on_tape(t, &cfg, &bound, v[0])?;
            let ep = embed_on_tape(t, &cfg, &bound, v[1])?;
            let en = embed_on_tape(t, &cfg, &bound, v[2])?;
            let d_ap = t.euclidean_distance(ea, ep)?;
            let d_an = t.euclidean_distance(ea, en)?;
            // A wide margin keeps the hinge active.
            loss::weighted_on_tape(t, d_ap, d_an, alpha, 10.0)
        })
        .map_err(|e| e.to_string())?;
        if let Some(m) = report.failures.first() {
            return Err(format!("seed {seed}: {m:?}"));
        }
        out.cases += 1;
        out.elements += report.checked;
        out.max_abs_err = out.max_abs_err.max(report.max_abs_err);
    }
    Ok(out)
}
