//! Forward and backward kernels for the tape primitives, operating on plain tensors.

use super::Tensor;
use crate::error::{Error, Result};

/// Output extents of a 3-D convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + k - padding` lands inside `[0, input)`.
fn valid_range(out: usize, input: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let (s, k, p, n) = (stride as isize, k as isize, padding as isize, input as isize);
    let lo = if p > k { (p - k + s - 1) / s } else { 0 };
    let hi = if n - 1 + p - k < 0 { 0 } else { (n - 1 + p - k) / s + 1 };
    let lo = lo.max(0) as usize;
    let hi = (hi.max(0) as usize).min(out);
    (lo, hi.max(lo))
}

struct ConvGeom {
    c_in: usize,
    c_out: usize,
    dims: [usize; 3],
    k: [usize; 3],
    out: [usize; 3],
    stride: usize,
    padding: usize,
}

fn conv_geom(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 4 || ks.len() != 5 {
        return Err(Error::shape(
            "conv3d",
            format!("expected input [C,D,H,W] and kernels [Co,Ci,kd,kh,kw], got {is:?} and {ks:?}"),
        ));
    }
    if is[0] != ks[1] {
        return Err(Error::shape(
            "conv3d",
            format!("input has {} channels, kernels expect {}", is[0], ks[1]),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv3d", "stride must be positive"));
    }
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = conv_out_len(is[a + 1], ks[a + 2], stride, padding).ok_or_else(|| {
            Error::shape(
                "conv3d",
                format!("kernel {:?} exceeds padded input {:?}", &ks[2..], &is[1..]),
            )
        })?;
    }
    Ok(ConvGeom {
        c_in: is[0],
        c_out: ks[0],
        dims: [is[1], is[2], is[3]],
        k: [ks[2], ks[3], ks[4]],
        out,
        stride,
        padding,
    })
}

/// Calls `f(out_index, in_index, kernel_index)` for every contributing (output, input, weight)
/// triple of the convolution, grouped so the innermost loop runs along the W axis.
#[inline(always)]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [d, h, w] = g.dims;
    let [kd, kh, kw] = g.k;
    let [od, oh, ow] = g.out;
    let (s, p) = (g.stride, g.padding);
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for z in 0..kd {
                let (z0, z1) = valid_range(od, d, z, s, p);
                for y in 0..kh {
                    let (y0, y1) = valid_range(oh, h, y, s, p);
                    for x in 0..kw {
                        let (x0, x1) = valid_range(ow, w, x, s, p);
                        if x0 >= x1 {
                            continue;
                        }
                        let widx = (((co * g.c_in + ci) * kd + z) * kh + y) * kw + x;
                        for oz in z0..z1 {
                            let iz = oz * s + z - p;
                            for oy in y0..y1 {
                                let iy = oy * s + y - p;
                                let obase = ((co * od + oz) * oh + oy) * ow;
                                let ibase = ((ci * d + iz) * h + iy) * w;
                                // (output row start, input row start, kernel index, run length)
                                f(obase + x0, ibase + x0 * s + x - p, widx, x1 - x0);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3-D cross-correlation of `input [C_in,D,H,W]` with `kernel [C_out,C_in,kd,kh,kw]`.
pub fn conv3d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geom(input, kernel, stride, padding)?;
    let [od, oh, ow] = g.out;
    let mut out = vec![0.0; g.c_out * od * oh * ow];
    let (x, k) = (input.data(), kernel.data());
    let s = g.stride;
    for_each_tap(&g, |o, i, wi, run| {
        let wv = k[wi];
        let dst = &mut out[o..o + run];
        if s == 1 {
            for (d, &v) in dst.iter_mut().zip(&x[i..i + run]) {
                *d += wv * v;
            }
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d += wv * x[i + j * s];
            }
        }
    });
    Tensor::checked("conv3d", vec![g.c_out, od, oh, ow], out)
}

/// Gradients of a convolution with respect to its input and its kernels.
pub fn conv3d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geom(input, kernel, stride, padding)?;
    let mut gi = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    let (x, k, go) = (input.data(), kernel.data(), grad_out.data());
    let s = g.stride;
    for_each_tap(&g, |o, i, wi, run| {
        let wv = k[wi];
        let gos = &go[o..o + run];
        let mut acc = 0.0;
        if s == 1 {
            for (j, &gv) in gos.iter().enumerate() {
                acc += gv * x[i + j];
                gi[i + j] += wv * gv;
            }
        } else {
            for (j, &gv) in gos.iter().enumerate() {
                acc += gv * x[i + j * s];
                gi[i + j * s] += wv * gv;
            }
        }
        gk[wi] += acc;
    });
    Ok((
        Tensor::checked("conv3d_backward", input.shape().to_vec(), gi)?,
        Tensor::checked("conv3d_backward", kernel.shape().to_vec(), gk)?,
    ))
}

/// `bias + weights · input` for `weights [m,n]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = dense_dims(input, weights, bias)?;
    let (x, w, b) = (input.data(), weights.data(), bias.data());
    let out = (0..m)
        .map(|i| b[i] + w[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    Tensor::checked("dense", vec![m], out)
}

fn dense_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let ws = weights.shape();
    if ws.len() != 2 || input.shape().len() != 1 || bias.shape().len() != 1 {
        return Err(Error::shape(
            "dense",
            format!(
                "expected input [n], weights [m,n], bias [m]; got {:?}, {:?}, {:?}",
                input.shape(),
                ws,
                bias.shape()
            ),
        ));
    }
    let (m, n) = (ws[0], ws[1]);
    if input.len() != n || bias.len() != m {
        return Err(Error::shape(
            "dense",
            format!("weights [{m},{n}] vs input [{}] and bias [{}]", input.len(), bias.len()),
        ));
    }
    Ok((m, n))
}

/// Gradients of [`dense`] with respect to input, weights and bias.
pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (m, n) = dense_dims(input, weights, bias)?;
    let (x, w, g) = (input.data(), weights.data(), grad_out.data());
    let mut gx = vec![0.0; n];
    let mut gw = vec![0.0; m * n];
    for i in 0..m {
        let row = &w[i * n..(i + 1) * n];
        for j in 0..n {
            gx[j] += row[j] * g[i];
            gw[i * n + j] = g[i] * x[j];
        }
    }
    Ok((
        Tensor::checked("dense_backward", vec![n], gx)?,
        Tensor::checked("dense_backward", vec![m, n], gw)?,
        grad_out.clone(),
    ))
}

/// Mean over every axis but the first: `[C, ...] -> [C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() < 2 {
        return Err(Error::shape("global_avg_pool", format!("need rank >= 2, got {s:?}")));
    }
    let c = s[0];
    let per = input.len() / c;
    let out = input.data().chunks(per).map(|ch| ch.iter().sum::<f64>() / per as f64).collect();
    Tensor::checked("global_avg_pool", vec![c], out)
}

pub fn euclidean_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "euclidean_distance",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let ss: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let d = ss.sqrt();
    if !d.is_finite() {
        return Err(Error::NonFinite { op: "euclidean_distance" });
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_len_rule() {
        assert_eq!(conv_out_len(16, 3, 1, 1), Some(16));
        assert_eq!(conv_out_len(16, 3, 2, 1), Some(8));
        assert_eq!(conv_out_len(5, 3, 2, 0), Some(2));
        assert_eq!(conv_out_len(2, 3, 1, 0), None);
        assert_eq!(conv_out_len(1, 3, 1, 1), Some(1));
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for input in 1..7 {
            for k in 0..3 {
                for stride in 1..3 {
                    for padding in 0..3 {
                        let Some(out) = conv_out_len(input, 3, stride, padding) else { continue };
                        let brute: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - padding as isize;
                                i >= 0 && i < input as isize
                            })
                            .collect();
                        let (lo, hi) = valid_range(out, input, k, stride, padding);
                        assert_eq!((lo..hi).collect::<Vec<_>>(), brute);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3, 3]);
        assert!(matches!(conv3d(&x, &k, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 3, 3, 3]);
        assert!(conv3d(&x, &k, 1, 0).is_err());
        assert!(conv3d(&x, &k, 1, 1).is_ok());
    }

    #[test]
    fn dense_rejects_mismatch() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let w = Tensor::zeros(&[3, 3]);
        let b = Tensor::zeros(&[3]);
        assert!(dense(&x, &w, &b).is_err());
    }
}
