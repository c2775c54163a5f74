use super::{Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct ReluCache {
    input: Tensor,
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> (Tensor, ReluCache) {
    (
        input.map(|v| v.max(0.0)),
        ReluCache {
            input: input.clone(),
        },
    )
}

/// Passes gradient where the input was strictly positive; the derivative at 0 is 0.
pub fn relu_backward(grad_out: &Tensor, cache: &ReluCache) -> Result<Tensor, TensorError> {
    grad_out.expect_shape("relu_backward", cache.input.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(cache.input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data)
}

#[derive(Debug, Clone)]
pub struct UpsampleCache {
    input_shape: [usize; 5],
    factor: usize,
}

/// Nearest-neighbour upsampling of the three spatial axes by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<(Tensor, UpsampleCache), TensorError> {
    const OP: &str = "upsample_nearest";
    let [b, c, d0, d1, d2] = input.dims5(OP)?;
    if factor == 0 {
        return Err(TensorError::invalid(OP, "factor must be at least 1"));
    }
    let (u0, u1, u2) = (d0 * factor, d1 * factor, d2 * factor);
    let mut out = Vec::with_capacity(b * c * u0 * u1 * u2);
    let src = input.data();
    for bc in 0..b * c {
        let plane = &src[bc * d0 * d1 * d2..][..d0 * d1 * d2];
        for o0 in 0..u0 {
            for o1 in 0..u1 {
                let row = &plane[((o0 / factor) * d1 + o1 / factor) * d2..][..d2];
                for &v in row {
                    for _ in 0..factor {
                        out.push(v);
                    }
                }
            }
        }
    }
    let output = Tensor::new(vec![b, c, u0, u1, u2], out)?;
    Ok((
        output,
        UpsampleCache {
            input_shape: [b, c, d0, d1, d2],
            factor,
        },
    ))
}

/// Sums the upstream gradient over each `factor³` replication group.
pub fn upsample_nearest_backward(grad_out: &Tensor, cache: &UpsampleCache) -> Result<Tensor, TensorError> {
    let [b, c, d0, d1, d2] = cache.input_shape;
    let f = cache.factor;
    let (u0, u1, u2) = (d0 * f, d1 * f, d2 * f);
    grad_out.expect_shape("upsample_nearest_backward", &[b, c, u0, u1, u2])?;
    let mut grad = Tensor::zeros(&cache.input_shape);
    let g = grad_out.data();
    let dst = grad.data_mut();
    for bc in 0..b * c {
        let src = &g[bc * u0 * u1 * u2..][..u0 * u1 * u2];
        let plane = &mut dst[bc * d0 * d1 * d2..][..d0 * d1 * d2];
        for o0 in 0..u0 {
            for o1 in 0..u1 {
                let row = &mut plane[((o0 / f) * d1 + o1 / f) * d2..][..d2];
                let grow = &src[(o0 * u1 + o1) * u2..][..u2];
                for (o2, &v) in grow.iter().enumerate() {
                    row[o2 / f] += v;
                }
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct ConcatCache {
    a_shape: [usize; 5],
    b_channels: usize,
}

/// Concatenates two rank-5 tensors along the channel axis, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<(Tensor, ConcatCache), TensorError> {
    const OP: &str = "concat_channels";
    let [ba, ca, h, w, s] = a.dims5(OP)?;
    let [bb, cb, hb, wb, sb] = b.dims5(OP)?;
    if (ba, h, w, s) != (bb, hb, wb, sb) {
        return Err(TensorError::invalid(
            OP,
            format!(
                "tensors {:?} and {:?} differ outside the channel axis",
                a.shape(),
                b.shape()
            ),
        ));
    }
    let spatial = h * w * s;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for n in 0..ba {
        out.extend_from_slice(&a.data()[n * ca * spatial..][..ca * spatial]);
        out.extend_from_slice(&b.data()[n * cb * spatial..][..cb * spatial]);
    }
    let output = Tensor::new(vec![ba, ca + cb, h, w, s], out)?;
    Ok((
        output,
        ConcatCache {
            a_shape: [ba, ca, h, w, s],
            b_channels: cb,
        },
    ))
}

/// Splits the upstream gradient at channel `Ca` back into the two inputs.
pub fn concat_channels_backward(grad_out: &Tensor, cache: &ConcatCache) -> Result<(Tensor, Tensor), TensorError> {
    let [b, ca, h, w, s] = cache.a_shape;
    let cb = cache.b_channels;
    grad_out.expect_shape("concat_channels_backward", &[b, ca + cb, h, w, s])?;
    let spatial = h * w * s;
    let mut ga = Vec::with_capacity(b * ca * spatial);
    let mut gb = Vec::with_capacity(b * cb * spatial);
    for n in 0..b {
        let chunk = &grad_out.data()[n * (ca + cb) * spatial..][..(ca + cb) * spatial];
        ga.extend_from_slice(&chunk[..ca * spatial]);
        gb.extend_from_slice(&chunk[ca * spatial..]);
    }
    Ok((
        Tensor::new(vec![b, ca, h, w, s], ga)?,
        Tensor::new(vec![b, cb, h, w, s], gb)?,
    ))
}

/// Plain gradient descent, `p ← p − lr·g`, applied in place.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<(), TensorError> {
    const OP: &str = "sgd_step";
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TensorError::invalid(OP, format!("learning rate must be finite and non-negative, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(TensorError::invalid(
            OP,
            format!("{} parameter tensors but {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        g.expect_shape(OP, p.shape())?;
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn relu_values_and_gradient() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, cache) = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&Tensor::filled(&[3], 1.0), &cache).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_is_identity_on_positive_inputs() {
        let x = random(&[2, 3, 2, 2, 2], 1).map(|v| v.abs() + 0.1);
        let (y, cache) = relu(&x);
        assert_eq!(y, x);
        let up = random(x.shape(), 2);
        assert_eq!(relu_backward(&up, &cache).unwrap(), up);
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        // keep inputs away from the kink so central differences are valid
        let x = random(&[1, 2, 3, 3, 3], 3).map(|v| if v.abs() < 0.05 { 0.5 } else { v });
        let up = random(x.shape(), 4);
        let (_, cache) = relu(&x);
        let g = relu_backward(&up, &cache).unwrap();
        let fd = finite_difference_gradient(|t| dot(&relu(t).0, &up), &x, 1e-5);
        assert!(max_relative_error(&g, &fd) < 1e-6);
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let x = random(&[2, 2, 3, 2, 4], 5);
        let (y, cache) = upsample_nearest(&x, 1).unwrap();
        assert_eq!(y, x);
        assert_eq!(upsample_nearest_backward(&y, &cache).unwrap(), x);
    }

    #[test]
    fn upsample_replicates_each_voxel_eight_times() {
        let x = Tensor::new(vec![1, 1, 1, 1, 2], vec![3.0, 5.0]).unwrap();
        let (y, cache) = upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 4]);
        assert_eq!(y.data().iter().filter(|&&v| v == 3.0).count(), 8);
        assert_eq!(y.data().iter().filter(|&&v| v == 5.0).count(), 8);
        let g = upsample_nearest_backward(&Tensor::filled(y.shape(), 1.0), &cache).unwrap();
        assert_eq!(g.data(), &[8.0, 8.0]);
    }

    #[test]
    fn upsample_gradient_matches_finite_differences() {
        let x = random(&[1, 2, 2, 3, 2], 6);
        let (y, cache) = upsample_nearest(&x, 2).unwrap();
        let up = random(y.shape(), 7);
        let g = upsample_nearest_backward(&up, &cache).unwrap();
        let fd = finite_difference_gradient(|t| dot(&upsample_nearest(t, 2).unwrap().0, &up), &x, 1e-5);
        assert!(max_relative_error(&g, &fd) < 1e-6);
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let x = random(&[2, 3, 2, 2, 2], 8);
        let empty = Tensor::zeros(&[2, 0, 2, 2, 2]);
        let (y, _) = concat_channels(&x, &empty).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn concat_orders_a_first_and_splits_back_exactly() {
        let a = random(&[2, 1, 2, 2, 2], 9);
        let b = random(&[2, 1, 2, 2, 2], 10);
        let (y, cache) = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2, 2, 2]);
        assert_eq!(&y.data()[..8], &a.data()[..8]);
        assert_eq!(&y.data()[8..16], &b.data()[..8]);
        let (ga, gb) = concat_channels_backward(&y, &cache).unwrap();
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let b = Tensor::zeros(&[1, 1, 2, 2, 3]);
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn sgd_step_examples() {
        let mut p = vec![Tensor::filled(&[1], 1.0)];
        sgd_step(&mut p, &[Tensor::filled(&[1], 2.0)], 0.5).unwrap();
        assert_eq!(p[0].data(), &[0.0]);

        let orig = random(&[4], 11);
        let mut p = vec![orig.clone()];
        sgd_step(&mut p, &[random(&[4], 12)], 0.0).unwrap();
        assert_eq!(p[0], orig);
        sgd_step(&mut p, &[Tensor::zeros(&[4])], 0.1).unwrap();
        assert_eq!(p[0], orig);

        assert!(sgd_step(&mut p, &[Tensor::zeros(&[5])], 0.1).is_err());
        assert!(sgd_step(&mut p, &[Tensor::zeros(&[4])], -1.0).is_err());
    }
}
