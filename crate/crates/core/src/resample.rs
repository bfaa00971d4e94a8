//! Image resampling kernels.
//!
//! Bilinear resampling (used by the generator's scale changes and as an
//! autodiff op) places sample centers at `(i + 0.5) * in/out - 0.5`,
//! i.e. align-corners disabled. Outside the source grid the signal is
//! extended by linear extrapolation rather than edge clamping, which
//! makes the operator exact on affine images in both directions; the
//! extrapolated virtual pixels are folded into weights on the two
//! nearest real pixels, so every output is still a two-tap combination.
//!
//! Bicubic resampling (Keys kernel, a = -0.5) is the dataset degradation
//! model. Downscaling is antialiased by widening the kernel with the
//! scale factor; borders replicate.

use crate::tensor::Tensor;

/// One output position of a 1-D bilinear resample: two source indices
/// and their weights (weights may exceed [0, 1] at extrapolated edges,
/// but always sum to 1).
#[derive(Clone, Copy, Debug)]
pub struct AxisTap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<AxisTap> {
    assert!(in_len >= 1 && out_len >= 1);
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            if in_len == 1 {
                return AxisTap { i0: 0, i1: 0, w0: 1.0, w1: 0.0 };
            }
            let s = (o as f64 + 0.5) * ratio - 0.5;
            let i0 = s.floor() as isize;
            let t = s - i0 as f64;
            if i0 < 0 {
                // value = (1-t)*(2*a[0] - a[1]) + t*a[0]
                AxisTap { i0: 0, i1: 1, w0: 2.0 - t, w1: t - 1.0 }
            } else if (i0 as usize) >= in_len - 1 {
                // value = (1-t)*a[n-1] + t*(2*a[n-1] - a[n-2])
                AxisTap {
                    i0: in_len - 2,
                    i1: in_len - 1,
                    w0: -t,
                    w1: 1.0 + t,
                }
            } else {
                AxisTap {
                    i0: i0 as usize,
                    i1: i0 as usize + 1,
                    w0: 1.0 - t,
                    w1: t,
                }
            }
        })
        .collect()
}

/// Bilinear resample of an `[h, w, c]` tensor.
pub fn bilinear_value(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    assert_eq!(img.shape().len(), 3, "expected [h, w, c]");
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let ytaps = bilinear_axis(h, out_h);
    let xtaps = bilinear_axis(w, out_w);
    let mut tmp = Tensor::zeros(&[out_h, w, c]);
    for (oy, tap) in ytaps.iter().enumerate() {
        for x in 0..w {
            for ch in 0..c {
                let v = tap.w0 * img.data()[(tap.i0 * w + x) * c + ch]
                    + tap.w1 * img.data()[(tap.i1 * w + x) * c + ch];
                tmp.data_mut()[(oy * w + x) * c + ch] = v;
            }
        }
    }
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    for oy in 0..out_h {
        for (ox, tap) in xtaps.iter().enumerate() {
            for ch in 0..c {
                let v = tap.w0 * tmp.data()[(oy * w + tap.i0) * c + ch]
                    + tap.w1 * tmp.data()[(oy * w + tap.i1) * c + ch];
                out.data_mut()[(oy * out_w + ox) * c + ch] = v;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_value`]: scatter an `[oh, ow, c]` gradient back
/// onto the `[h, w, c]` input grid.
pub fn bilinear_backward(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (out_h, out_w) = (g.shape()[0], g.shape()[1]);
    let ytaps = bilinear_axis(h, out_h);
    let xtaps = bilinear_axis(w, out_w);
    let mut tmp = Tensor::zeros(&[out_h, w, c]);
    for oy in 0..out_h {
        for (ox, tap) in xtaps.iter().enumerate() {
            for ch in 0..c {
                let gv = g.data()[(oy * out_w + ox) * c + ch];
                tmp.data_mut()[(oy * w + tap.i0) * c + ch] += tap.w0 * gv;
                tmp.data_mut()[(oy * w + tap.i1) * c + ch] += tap.w1 * gv;
            }
        }
    }
    let mut out = Tensor::zeros(&[h, w, c]);
    for (oy, tap) in ytaps.iter().enumerate() {
        for x in 0..w {
            for ch in 0..c {
                let gv = tmp.data()[(oy * w + x) * c + ch];
                out.data_mut()[(tap.i0 * w + x) * c + ch] += tap.w0 * gv;
                out.data_mut()[(tap.i1 * w + x) * c + ch] += tap.w1 * gv;
            }
        }
    }
    out
}

/// Keys cubic kernel with a = -0.5.
fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (1.5 * x - 2.5) * x * x + 1.0
    } else if x < 2.0 {
        ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    } else {
        0.0
    }
}

/// Weights of a 1-D bicubic resample. Downscaling widens the kernel for
/// antialiasing; edge samples replicate. Weights are normalized to 1.
fn bicubic_axis(in_len: usize, out_len: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    assert!(in_len >= 1 && out_len >= 1);
    let scale = out_len as f64 / in_len as f64;
    let kscale = if scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / kscale;
    (0..out_len)
        .map(|o| {
            let u = (o as f64 + 0.5) / scale - 0.5;
            let lo = (u - support).ceil() as isize;
            let hi = (u + support).floor() as isize;
            let mut idx = Vec::new();
            let mut wts = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let wj = cubic_kernel((u - j as f64) * kscale) * kscale;
                if wj == 0.0 {
                    continue;
                }
                let cj = j.clamp(0, in_len as isize - 1) as usize;
                idx.push(cj);
                wts.push(wj);
                total += wj;
            }
            if idx.is_empty() {
                idx.push(u.round().clamp(0.0, in_len as f64 - 1.0) as usize);
                wts.push(1.0);
                total = 1.0;
            }
            for w in &mut wts {
                *w /= total;
            }
            (idx, wts)
        })
        .collect()
}

/// Bicubic resample of an `[h, w, c]` tensor to `[oh, ow, c]`.
pub fn bicubic_resize(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    assert_eq!(img.shape().len(), 3, "expected [h, w, c]");
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let ytaps = bicubic_axis(h, out_h);
    let xtaps = bicubic_axis(w, out_w);
    let mut tmp = Tensor::zeros(&[out_h, w, c]);
    for (oy, (idx, wts)) in ytaps.iter().enumerate() {
        for x in 0..w {
            for ch in 0..c {
                let mut v = 0.0;
                for (i, wt) in idx.iter().zip(wts.iter()) {
                    v += wt * img.data()[(i * w + x) * c + ch];
                }
                tmp.data_mut()[(oy * w + x) * c + ch] = v;
            }
        }
    }
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    for oy in 0..out_h {
        for (ox, (idx, wts)) in xtaps.iter().enumerate() {
            for ch in 0..c {
                let mut v = 0.0;
                for (i, wt) in idx.iter().zip(wts.iter()) {
                    v += wt * tmp.data()[(oy * w + i) * c + ch];
                }
                out.data_mut()[(oy * out_w + ox) * c + ch] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_taps_sum_to_one() {
        for (n, m) in [(2, 4), (4, 8), (8, 4), (5, 7), (1, 3), (3, 1)] {
            for tap in bilinear_axis(n, m) {
                assert!((tap.w0 + tap.w1 - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_exact_on_affine_both_directions() {
        // a_i = 0.3 + 0.05 * i; bilinear with linear extrapolation must
        // reproduce the affine function at every resampled position.
        let n = 8;
        let img = Tensor::new(
            vec![n, 1, 1],
            (0..n).map(|i| 0.3 + 0.05 * i as f64).collect(),
        );
        let up = bilinear_value(&img, 2 * n, 1);
        for (j, v) in up.data().iter().enumerate() {
            let s = (j as f64 + 0.5) * 0.5 - 0.5;
            assert!((v - (0.3 + 0.05 * s)).abs() < 1e-12, "pos {}: {}", j, v);
        }
        let down = bilinear_value(&up, n, 1);
        assert!(down.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let img = Tensor::full(&[6, 10, 3], 0.42);
        let up = bilinear_value(&img, 12, 20);
        assert_eq!(up.shape(), &[12, 20, 3]);
        for v in up.data() {
            assert!((v - 0.42).abs() < 1e-15);
        }
        let down = bilinear_value(&img, 3, 5);
        for v in down.data() {
            assert!((v - 0.42).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        // <A x, y> == <x, A^T y> for random x, y.
        use crate::rng::{normal_tensor, rng_from_seed};
        let mut rng = rng_from_seed(11);
        let x = normal_tensor(&mut rng, &[4, 6, 2], 1.0);
        let y = normal_tensor(&mut rng, &[8, 12, 2], 1.0);
        let ax = bilinear_value(&x, 8, 12);
        let aty = bilinear_backward(&y, &[4, 6, 2]);
        let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bicubic_weights_normalized_and_constant_preserved() {
        let img = Tensor::full(&[12, 12, 3], 0.77);
        let down = bicubic_resize(&img, 6, 6);
        for v in down.data() {
            assert!((v - 0.77).abs() < 1e-12);
        }
        let up = bicubic_resize(&img, 24, 24);
        for v in up.data() {
            assert!((v - 0.77).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_matches_direct_2d_oracle() {
        // Non-separable direct evaluation with the same kernel, edge
        // replication and normalization.
        use crate::rng::{rng_from_seed, uniform_tensor};
        let mut rng = rng_from_seed(3);
        let (h, w) = (8usize, 8usize);
        let img = uniform_tensor(&mut rng, &[h, w, 1], 0.0, 1.0);
        let s = 2usize;
        let (oh, ow) = (h / s, w / s);
        let impl_out = bicubic_resize(&img, oh, ow);

        let scale = 1.0 / s as f64;
        let support = 2.0 / scale;
        for oy in 0..oh {
            for ox in 0..ow {
                let uy = (oy as f64 + 0.5) / scale - 0.5;
                let ux = (ox as f64 + 0.5) / scale - 0.5;
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for jy in (uy - support).ceil() as isize..=(uy + support).floor() as isize {
                    for jx in (ux - support).ceil() as isize..=(ux + support).floor() as isize {
                        let wy = cubic_kernel((uy - jy as f64) * scale) * scale;
                        let wx = cubic_kernel((ux - jx as f64) * scale) * scale;
                        let cy = jy.clamp(0, h as isize - 1) as usize;
                        let cx = jx.clamp(0, w as isize - 1) as usize;
                        acc += wy * wx * img.data()[cy * w + cx];
                        wsum += wy * wx;
                    }
                }
                let expect = acc / wsum;
                let got = impl_out.data()[oy * ow + ox];
                assert!(
                    (got - expect).abs() < 1e-10,
                    "({}, {}): {} vs {}",
                    oy,
                    ox,
                    got,
                    expect
                );
            }
        }
    }

    #[test]
    fn bicubic_exact_on_ramp_interior() {
        // The Keys kernel reproduces affine signals away from borders.
        let n = 16;
        let img = Tensor::new(
            vec![n, 1, 1],
            (0..n).map(|i| 0.1 + 0.02 * i as f64).collect(),
        );
        let down = bicubic_resize(&img, n / 2, 1);
        for o in 2..n / 2 - 2 {
            let u = (o as f64 + 0.5) * 2.0 - 0.5;
            let expect = 0.1 + 0.02 * u;
            assert!((down.data()[o] - expect).abs() < 1e-12);
        }
    }
}
