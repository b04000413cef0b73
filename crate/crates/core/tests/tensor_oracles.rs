//! Tensor primitives against naive scalar-loop oracles and finite differences.

use progsiam::gradcheck::{self, GradCheckConfig};
use progsiam::tensor::kernels;
use progsiam::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks stay outside the finite-difference stencil.
fn random_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v += 0.05f64.copysign(*v);
        }
    }
    t
}

#[allow(clippy::too_many_arguments)]
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (xs, ks) = (x.shape(), k.shape());
    let (ci_n, d, h, w) = (xs[0], xs[1] as isize, xs[2] as isize, xs[3] as isize);
    let (co_n, kd, kh, kw) = (ks[0], ks[2], ks[3], ks[4]);
    let od = ((d as usize + 2 * pad - kd) / stride) + 1;
    let oh = ((h as usize + 2 * pad - kh) / stride) + 1;
    let ow = ((w as usize + 2 * pad - kw) / stride) + 1;
    let at = |c: usize, z: isize, y: isize, xx: isize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d || y >= h || xx >= w {
            0.0
        } else {
            x.data()[((c * d as usize + z as usize) * h as usize + y as usize) * w as usize + xx as usize]
        }
    };
    let mut out = Vec::new();
    for co in 0..co_n {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..ci_n {
                        for a in 0..kd {
                            for b in 0..kh {
                                for c in 0..kw {
                                    let z = (oz * stride + a) as isize - pad as isize;
                                    let y = (oy * stride + b) as isize - pad as isize;
                                    let xx = (ox * stride + c) as isize - pad as isize;
                                    let wv = k.data()[(((co * ci_n + ci) * kd + a) * kh + b) * kw + c];
                                    s += wv * at(ci, z, y, xx);
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

#[test]
fn conv3d_zero_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = kernels::conv3d(&Tensor::zeros(&[1, 4, 4, 4]), &random(&mut rng, &[1, 1, 3, 3, 3]), 1, 0).unwrap();
    assert_eq!(out, Tensor::zeros(&[1, 2, 2, 2]));
}

#[test]
fn conv3d_counts_ones() {
    let out = kernels::conv3d(&Tensor::filled(&[1, 3, 3, 3], 1.0), &Tensor::filled(&[1, 1, 3, 3, 3], 1.0), 1, 0)
        .unwrap();
    assert_eq!(out.shape(), &[1, 1, 1, 1]);
    assert_eq!(out.data(), &[27.0]);
}

#[test]
fn conv3d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 5, 5, 5]);
    let k = random(&mut rng, &[3, 2, 3, 3, 3]);
    let out = kernels::conv3d(&x, &k, 1, 0).unwrap();
    assert_eq!(out.shape(), &[3, 3, 3, 3]);
    assert_close(out.data(), &conv_oracle(&x, &k, 1, 0), 1e-12);

    for (stride, pad, dims) in [(2, 1, [4, 6, 5]), (2, 0, [5, 5, 7]), (1, 2, [3, 4, 3]), (3, 1, [7, 7, 7])] {
        let x = random(&mut rng, &[2, dims[0], dims[1], dims[2]]);
        let k = random(&mut rng, &[3, 2, 3, 2, 3]);
        let out = kernels::conv3d(&x, &k, stride, pad).unwrap();
        assert_close(out.data(), &conv_oracle(&x, &k, stride, pad), 1e-12);
    }
}

#[test]
fn dense_examples_and_oracle() {
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
    assert_eq!(kernels::dense(&x, &eye, &Tensor::zeros(&[3])).unwrap().data(), &[1.0, 2.0, 3.0]);
    let b = Tensor::vector(vec![0.5, -1.0, 4.0]);
    assert_eq!(kernels::dense(&x, &Tensor::zeros(&[3, 3]), &b).unwrap(), b);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, w, b) = (random(&mut rng, &[6]), random(&mut rng, &[4, 6]), random(&mut rng, &[4]));
    let mut oracle = b.data().to_vec();
    for (i, o) in oracle.iter_mut().enumerate() {
        for j in 0..6 {
            *o += w.data()[i * 6 + j] * x.data()[j];
        }
    }
    assert_close(kernels::dense(&x, &w, &b).unwrap().data(), &oracle, 1e-12);
}

#[test]
fn distance_examples_and_oracle() {
    let a = Tensor::vector(vec![0.0, 0.0]);
    assert_eq!(kernels::euclidean_distance(&a, &a).unwrap(), 0.0);
    assert_eq!(kernels::euclidean_distance(&a, &Tensor::vector(vec![3.0, 4.0])).unwrap(), 5.0);
    assert!(kernels::euclidean_distance(&a, &Tensor::vector(vec![1.0])).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (a, b) = (random(&mut rng, &[8]), random(&mut rng, &[8]));
        let mut s = 0.0;
        for i in 0..8 {
            s += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((kernels::euclidean_distance(&a, &b).unwrap() - s.sqrt()).abs() <= 1e-12);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 6, 6, 6]);
    let k = random(&mut rng, &[4, 2, 3, 3, 3]);
    let a = kernels::conv3d(&x, &k, 2, 1).unwrap();
    let b = kernels::conv3d(&x, &k, 2, 1).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

/// Sum of `out * weights` with fixed random weights, so every output element matters.
fn project(t: &mut Tape, out: progsiam::Var, seed: u64) -> progsiam::Result<progsiam::Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.value(out).shape().to_vec();
    let r = t.constant(random(&mut rng, &shape));
    let m = t.mul(out, r)?;
    t.sum(m)
}

fn assert_passes(name: &str, report: gradcheck::GradCheckReport) {
    assert!(report.passed(), "{name}: {:?} (max rel {:e})", report.failures.first(), report.max_rel_err);
}

const CASES: u64 = 20;

#[test]
fn gradcheck_conv3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..CASES {
        let stride = 1 + (case % 2) as usize;
        let pad = (case % 3) as usize;
        let x = random(&mut rng, &[2, 4, 3, 4]);
        let k = random(&mut rng, &[2, 2, 3, 2, 3]);
        let r = gradcheck::check(&[x, k], GradCheckConfig::default(), |t, v| {
            let y = t.conv3d(v[0], v[1], stride, pad)?;
            project(t, y, case)
        })
        .unwrap();
        assert_passes("conv3d", r);
    }
}

#[test]
fn gradcheck_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..CASES {
        let ins = [random(&mut rng, &[5]), random(&mut rng, &[3, 5]), random(&mut rng, &[3])];
        let r = gradcheck::check(&ins, GradCheckConfig::default(), |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            project(t, y, case)
        })
        .unwrap();
        assert_passes("dense", r);
    }
}

#[test]
fn gradcheck_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..CASES {
        let x = random_off_kink(&mut rng, &[7]);
        let r = gradcheck::check(&[x], GradCheckConfig::default(), |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, case)
        })
        .unwrap();
        assert_passes("relu", r);
    }
}

#[test]
fn gradcheck_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..CASES {
        let ins = [random(&mut rng, &[8]), random(&mut rng, &[8])];
        let r = gradcheck::check(&ins, GradCheckConfig::default(), |t, v| t.euclidean_distance(v[0], v[1])).unwrap();
        assert_passes("distance", r);
    }
}

#[test]
fn gradcheck_elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for case in 0..CASES {
        let ins = [random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3]), random(&mut rng, &[3, 2, 2, 2])];
        let c = rng.random_range(-2.0..2.0);
        let r = gradcheck::check(&ins, GradCheckConfig::default(), |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(a, v[1])?;
            let m = t.mul(s, v[1])?;
            let sc = t.scale(m, c)?;
            let sh = t.add_scalar(sc, 0.25)?;
            let n = t.add_n(&[sh, v[0], sh])?;
            let p1 = project(t, n, case)?;
            let g = t.global_avg_pool(v[2])?;
            let p2 = project(t, g, case + 100)?;
            let total = t.add(p1, p2)?;
            let sum = t.sum(total)?;
            Ok(sum)
        })
        .unwrap();
        assert_passes("elementwise", r);
    }
}
