use super::{Tensor, TensorError};

/// Output length of one spatial axis: `floor((len + 2·pad − k) / stride) + 1`.
pub fn conv_output_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Retained state for [`conv3d_backward`].
#[derive(Debug, Clone)]
pub struct Conv3dCache {
    input: Tensor,
    kernel: Tensor,
    stride: usize,
    pad: usize,
    out_shape: [usize; 5],
}

impl Conv3dCache {
    pub fn output_shape(&self) -> [usize; 5] {
        self.out_shape
    }
}

#[derive(Debug, Clone)]
pub struct Conv3dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Output positions `o` in `0..out_len` whose input index `o·stride + kk − pad`
/// falls inside `0..in_len`.
fn valid_range(kk: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let (kk, pad, stride, in_len) = (kk as isize, pad as isize, stride as isize, in_len as isize);
    // smallest o with o·s + kk − pad ≥ 0
    let lo = if pad - kk <= 0 {
        0
    } else {
        (pad - kk + stride - 1) / stride
    };
    // largest o with o·s + kk − pad ≤ in_len − 1
    let top = in_len - 1 + pad - kk;
    let hi = if top < 0 { 0 } else { top / stride + 1 };
    let hi = hi.min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    k: usize,
    input: [usize; 3],
    output: [usize; 3],
    stride: usize,
    pad: usize,
}

fn geometry(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Geometry, TensorError> {
    const OP: &str = "conv3d_forward";
    let [b, cin, d0, d1, d2] = input.dims5(OP)?;
    let kshape = kernel.shape();
    if kshape.len() != 5 {
        return Err(TensorError::invalid(
            OP,
            format!("kernel must be rank 5 [Cout, Cin, k, k, k], got {kshape:?}"),
        ));
    }
    let (cout, kcin, k) = (kshape[0], kshape[1], kshape[2]);
    if kcin != cin || kshape[3] != k || kshape[4] != k {
        return Err(TensorError::invalid(
            OP,
            format!(
                "kernel shape {kshape:?} is incompatible with input shape {:?}",
                input.shape()
            ),
        ));
    }
    if k % 2 == 0 {
        return Err(TensorError::invalid(OP, format!("kernel size must be odd, got {k}")));
    }
    if stride == 0 {
        return Err(TensorError::invalid(OP, "stride must be at least 1"));
    }
    let mut output = [0; 3];
    for (o, &len) in output.iter_mut().zip(&[d0, d1, d2]) {
        *o = conv_output_len(len, k, stride, pad).ok_or_else(|| {
            TensorError::invalid(
                OP,
                format!(
                    "input shape {:?} too small for kernel shape {kshape:?} with pad {pad}",
                    input.shape()
                ),
            )
        })?;
    }
    Ok(Geometry {
        batch: b,
        cin,
        cout,
        k,
        input: [d0, d1, d2],
        output,
        stride,
        pad,
    })
}

/// 3D cross-correlation with zero padding.
///
/// `kernel` is `[Cout, Cin, k, k, k]`, `bias` is `[Cout]`.
pub fn conv3d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Conv3dCache), TensorError> {
    let g = geometry(input, kernel, stride, pad)?;
    bias.expect_shape("conv3d_forward", &[g.cout])?;

    let [o0n, o1n, o2n] = g.output;
    let [i0n, i1n, i2n] = g.input;
    let out_shape = [g.batch, g.cout, o0n, o1n, o2n];
    let out_spatial = o0n * o1n * o2n;
    let in_spatial = i0n * i1n * i2n;
    let k = g.k;
    let mut out = vec![0.0; g.batch * g.cout * out_spatial];
    let x = input.data();
    let w = kernel.data();

    for b in 0..g.batch {
        for co in 0..g.cout {
            let out_base = (b * g.cout + co) * out_spatial;
            let dst = &mut out[out_base..out_base + out_spatial];
            dst.fill(bias.data()[co]);
            for ci in 0..g.cin {
                let src = &x[(b * g.cin + ci) * in_spatial..][..in_spatial];
                let wbase = (co * g.cin + ci) * k * k * k;
                for k0 in 0..k {
                    let (a0, z0) = valid_range(k0, g.pad, g.stride, i0n, o0n);
                    for k1 in 0..k {
                        let (a1, z1) = valid_range(k1, g.pad, g.stride, i1n, o1n);
                        for k2 in 0..k {
                            let (a2, z2) = valid_range(k2, g.pad, g.stride, i2n, o2n);
                            let wv = w[wbase + (k0 * k + k1) * k + k2];
                            if wv == 0.0 || a2 >= z2 {
                                continue;
                            }
                            for o0 in a0..z0 {
                                let i0 = o0 * g.stride + k0 - g.pad;
                                for o1 in a1..z1 {
                                    let i1 = o1 * g.stride + k1 - g.pad;
                                    let row_out = &mut dst[(o0 * o1n + o1) * o2n..][..o2n];
                                    let row_in = &src[(i0 * i1n + i1) * i2n..][..i2n];
                                    if g.stride == 1 {
                                        let off = a2 + k2 - g.pad;
                                        let n = z2 - a2;
                                        for (o, &v) in row_out[a2..z2].iter_mut().zip(&row_in[off..off + n]) {
                                            *o += wv * v;
                                        }
                                    } else {
                                        for o2 in a2..z2 {
                                            row_out[o2] += wv * row_in[o2 * g.stride + k2 - g.pad];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let output = Tensor::new(out_shape.to_vec(), out)?;
    let cache = Conv3dCache {
        input: input.clone(),
        kernel: kernel.clone(),
        stride,
        pad,
        out_shape,
    };
    Ok((output, cache))
}

pub fn conv3d_backward(grad_out: &Tensor, cache: &Conv3dCache) -> Result<Conv3dGrads, TensorError> {
    grad_out.expect_shape("conv3d_backward", &cache.out_shape)?;
    let g = geometry(&cache.input, &cache.kernel, cache.stride, cache.pad)?;
    let [o0n, o1n, o2n] = g.output;
    let [i0n, i1n, i2n] = g.input;
    let out_spatial = o0n * o1n * o2n;
    let in_spatial = i0n * i1n * i2n;
    let k = g.k;

    let x = cache.input.data();
    let w = cache.kernel.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.cout];

    for b in 0..g.batch {
        for co in 0..g.cout {
            let gsrc = &go[(b * g.cout + co) * out_spatial..][..out_spatial];
            gb[co] += gsrc.iter().sum::<f64>();
            for ci in 0..g.cin {
                let in_base = (b * g.cin + ci) * in_spatial;
                let src = &x[in_base..in_base + in_spatial];
                let gdst = &mut gx[in_base..in_base + in_spatial];
                let wbase = (co * g.cin + ci) * k * k * k;
                for k0 in 0..k {
                    let (a0, z0) = valid_range(k0, g.pad, g.stride, i0n, o0n);
                    for k1 in 0..k {
                        let (a1, z1) = valid_range(k1, g.pad, g.stride, i1n, o1n);
                        for k2 in 0..k {
                            let (a2, z2) = valid_range(k2, g.pad, g.stride, i2n, o2n);
                            if a2 >= z2 {
                                continue;
                            }
                            let widx = wbase + (k0 * k + k1) * k + k2;
                            let wv = w[widx];
                            let mut acc = 0.0;
                            for o0 in a0..z0 {
                                let i0 = o0 * g.stride + k0 - g.pad;
                                for o1 in a1..z1 {
                                    let i1 = o1 * g.stride + k1 - g.pad;
                                    let grow = &gsrc[(o0 * o1n + o1) * o2n..][..o2n];
                                    let rbase = (i0 * i1n + i1) * i2n;
                                    if g.stride == 1 {
                                        let off = rbase + a2 + k2 - g.pad;
                                        let n = z2 - a2;
                                        let xin = &src[off..off + n];
                                        let gxin = &mut gdst[off..off + n];
                                        for ((&gv, &xv), gxv) in grow[a2..z2].iter().zip(xin).zip(gxin) {
                                            acc += gv * xv;
                                            *gxv += wv * gv;
                                        }
                                    } else {
                                        for o2 in a2..z2 {
                                            let i = rbase + o2 * g.stride + k2 - g.pad;
                                            acc += grow[o2] * src[i];
                                            gdst[i] += wv * grow[o2];
                                        }
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }

    Ok(Conv3dGrads {
        input: Tensor::new(cache.input.shape().to_vec(), gx)?,
        kernel: Tensor::new(cache.kernel.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![g.cout], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Straight six-index definition of the cross-correlation.
    fn brute_conv(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [b, cin, d0, d1, d2] = x.dims5("t").unwrap();
        let cout = w.shape()[0];
        let k = w.shape()[2];
        let o = |d| conv_output_len(d, k, stride, pad).unwrap();
        let (o0, o1, o2) = (o(d0), o(d1), o(d2));
        let mut out = Tensor::zeros(&[b, cout, o0, o1, o2]);
        let xi = |bb: usize, c: usize, i: isize, j: isize, l: isize| -> f64 {
            if i < 0 || j < 0 || l < 0 || i >= d0 as isize || j >= d1 as isize || l >= d2 as isize {
                return 0.0;
            }
            x.data()[(((bb * cin + c) * d0 + i as usize) * d1 + j as usize) * d2 + l as usize]
        };
        for bb in 0..b {
            for co in 0..cout {
                for p in 0..o0 {
                    for q in 0..o1 {
                        for r in 0..o2 {
                            let mut s = bias.data()[co];
                            for ci in 0..cin {
                                for a in 0..k {
                                    for bq in 0..k {
                                        for c in 0..k {
                                            let wv = w.data()[(((co * cin + ci) * k + a) * k + bq) * k + c];
                                            s += wv
                                                * xi(
                                                    bb,
                                                    ci,
                                                    (p * stride + a) as isize - pad as isize,
                                                    (q * stride + bq) as isize - pad as isize,
                                                    (r * stride + c) as isize - pad as isize,
                                                );
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((bb * cout + co) * o0 + p) * o1 + q) * o2 + r] = s;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_kernel_scales_input() {
        let x = t(&[1, 1, 1, 1, 3], &[1.0, 2.0, 3.0]);
        let w = t(&[1, 1, 1, 1, 1], &[2.0]);
        let (y, _) = conv3d_forward(&x, &w, &t(&[1], &[0.0]), 1, 0).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 1, 3, 4, 5], &mut rng);
        let (y, _) = conv3d_forward(&x, &t(&[1, 1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn three_tap_kernel_with_zero_padding() {
        // only the innermost axis is non-degenerate, so a 3³ kernel with a
        // single non-zero row acts as the 1-D kernel [1, 1, 1]
        let x = t(&[1, 1, 1, 1, 3], &[1.0, 2.0, 3.0]);
        let mut w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        for c in 0..3 {
            w.data_mut()[(3 + 1) * 3 + c] = 1.0;
        }
        let (y, _) = conv3d_forward(&x, &w, &t(&[1], &[0.0]), 1, 1).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn matches_brute_force_for_strides_and_pads() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 0, 1), (1, 0, 1), (2, 2, 3), (3, 1, 3)] {
            let x = random(&[2, 3, 5, 4, 6], &mut rng);
            let w = random(&[2, 3, k, k, k], &mut rng);
            let bias = random(&[2], &mut rng);
            let (y, cache) = conv3d_forward(&x, &w, &bias, stride, pad).unwrap();
            let want = brute_conv(&x, &w, &bias, stride, pad);
            assert_eq!(y.shape(), want.shape());
            assert_eq!(cache.output_shape().to_vec(), want.shape().to_vec());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[1, 2, 3, 3, 3]);
        let w = Tensor::zeros(&[4, 3, 3, 3, 3]);
        let err = conv3d_forward(&x, &w, &Tensor::zeros(&[4]), 1, 1).unwrap_err().to_string();
        assert!(err.contains("[4, 3, 3, 3, 3]") && err.contains("[1, 2, 3, 3, 3]"), "{err}");
        let even = Tensor::zeros(&[4, 2, 2, 2, 2]);
        assert!(conv3d_forward(&x, &even, &Tensor::zeros(&[4]), 1, 0).is_err());
        let ok = Tensor::zeros(&[4, 2, 3, 3, 3]);
        assert!(conv3d_forward(&x, &ok, &Tensor::zeros(&[3]), 1, 1).is_err());
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let x = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 1, 1, 1]);
        let (_, cache) = conv3d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert!(conv3d_backward(&Tensor::zeros(&[1, 1, 2, 2, 3]), &cache).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 2, 4, 4, 4], &mut rng);
        let w = random(&[3, 2, 3, 3, 3], &mut rng);
        let (y, cache) = conv3d_forward(&x, &w, &Tensor::zeros(&[3]), 2, 1).unwrap();
        let g = conv3d_backward(&Tensor::zeros(y.shape()), &cache).unwrap();
        assert!(g.input.data().iter().chain(g.kernel.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_kernel_gradient_is_input_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 1, 3, 3, 3], &mut rng);
        let (y, cache) = conv3d_forward(&x, &t(&[1, 1, 1, 1, 1], &[0.7]), &t(&[1], &[0.0]), 1, 0).unwrap();
        let g = conv3d_backward(&Tensor::filled(y.shape(), 1.0), &cache).unwrap();
        assert!((g.kernel.data()[0] - x.sum()).abs() < 1e-12);
        assert!((g.bias.data()[0] - y.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
            let x = random(&[1, 2, 4, 3, 4], &mut rng);
            let w = random(&[2, 2, 3, 3, 3], &mut rng);
            let bias = random(&[2], &mut rng);
            let (y, cache) = conv3d_forward(&x, &w, &bias, stride, pad).unwrap();
            // weighted-sum functional so every output position matters differently
            let proj = random(y.shape(), &mut rng);
            let functional = |y: &Tensor| -> f64 { y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum() };
            let g = conv3d_backward(&proj, &cache).unwrap();

            let fx = finite_difference_gradient(
                |xx| functional(&conv3d_forward(xx, &w, &bias, stride, pad).unwrap().0),
                &x,
                1e-5,
            );
            let fw = finite_difference_gradient(
                |ww| functional(&conv3d_forward(&x, ww, &bias, stride, pad).unwrap().0),
                &w,
                1e-5,
            );
            let fb = finite_difference_gradient(
                |bb| functional(&conv3d_forward(&x, &w, bb, stride, pad).unwrap().0),
                &bias,
                1e-5,
            );
            assert!(max_relative_error(&g.input, &fx) < 1e-6);
            assert!(max_relative_error(&g.kernel, &fw) < 1e-6);
            assert!(max_relative_error(&g.bias, &fb) < 1e-6);
        }
    }

    #[test]
    fn forward_is_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 2, 4, 4, 4], &mut rng);
        let y = random(&[1, 2, 4, 4, 4], &mut rng);
        let w = random(&[3, 2, 3, 3, 3], &mut rng);
        let zero = Tensor::zeros(&[3]);
        let (a, b) = (1.7, -0.3);
        let combo = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
        let f = |t: &Tensor| conv3d_forward(t, &w, &zero, 1, 1).unwrap().0;
        let (fc, fx, fy) = (f(&combo), f(&x), f(&y));
        for i in 0..fc.len() {
            assert!((fc.data()[i] - (a * fx.data()[i] + b * fy.data()[i])).abs() < 1e-12);
        }
    }
}
