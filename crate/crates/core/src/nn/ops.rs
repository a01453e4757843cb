//! Forward kernels shared by the trainable layers and the read-only inference path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Mode, NnError};
use crate::tensor::{matmul_acc, matmul_bt_acc, Real, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `y = x · Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub fn dense_forward<T: Real>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if x.rank() != 2 || weights.rank() != 2 || x.shape()[1] != weights.shape()[1] {
        return Err(NnError::Shape {
            op: "dense",
            left: x.shape().to_vec(),
            right: weights.shape().to_vec(),
        });
    }
    let (n, input) = (x.shape()[0], x.shape()[1]);
    let out = weights.shape()[0];
    if bias.shape() != [out] {
        return Err(NnError::Shape {
            op: "dense bias",
            left: weights.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(bias.data());
    }
    matmul_bt_acc(x.data(), weights.data(), &mut y, n, input, out);
    Tensor::new(vec![n, out], y)
}

pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new<T: Real>(x: &Tensor<T>, kernels: &Tensor<T>, stride: usize) -> Result<Self, NnError> {
        if x.rank() != 4 || kernels.rank() != 4 || x.shape()[1] != kernels.shape()[1] {
            return Err(NnError::Shape {
                op: "conv2d",
                left: x.shape().to_vec(),
                right: kernels.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(NnError::Dimension {
                op: "conv2d",
                message: "stride must be positive".into(),
            });
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (k, kh, kw) = (kernels.shape()[0], kernels.shape()[2], kernels.shape()[3]);
        if kh > h || kw > w {
            return Err(NnError::Dimension {
                op: "conv2d",
                message: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            });
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            out_h: (h - kh) / stride + 1,
            out_w: (w - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one sample `[C, H, W]` into `[C·kh·kw, H'·W']`.
    pub fn im2col<T: Real>(&self, sample: &[T], cols: &mut [T]) {
        let ol = self.out_len();
        for ch in 0..self.c {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = (ch * self.kh + dy) * self.kw + dx;
                    let dst = &mut cols[row * ol..(row + 1) * ol];
                    for oy in 0..self.out_h {
                        let src_row = ch * self.h * self.w + (oy * self.stride + dy) * self.w + dx;
                        let d = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if self.stride == 1 {
                            d.copy_from_slice(&sample[src_row..src_row + self.out_w]);
                        } else {
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = sample[src_row + ox * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back onto the sample.
    pub fn col2im<T: Real>(&self, cols: &[T], sample: &mut [T]) {
        let ol = self.out_len();
        for ch in 0..self.c {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = (ch * self.kh + dy) * self.kw + dx;
                    let src = &cols[row * ol..(row + 1) * ol];
                    for oy in 0..self.out_h {
                        let dst_row = ch * self.h * self.w + (oy * self.stride + dy) * self.w + dx;
                        for ox in 0..self.out_w {
                            sample[dst_row + ox * self.stride] += src[oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Valid-padding cross-correlation `[N,C,H,W] ⋆ [K,C,kh,kw] + b → [N,K,H',W']`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>, NnError> {
    let g = ConvGeometry::new(x, kernels, stride)?;
    if bias.shape() != [g.k] {
        return Err(NnError::Shape {
            op: "conv2d bias",
            left: kernels.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let (pl, ol) = (g.patch_len(), g.out_len());
    let in_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.k * ol];
    let mut cols = vec![T::zero(); pl * ol];
    for s in 0..g.n {
        g.im2col(&x.data()[s * in_len..(s + 1) * in_len], &mut cols);
        let o = &mut out[s * g.k * ol..(s + 1) * g.k * ol];
        for (kk, b) in bias.data().iter().enumerate() {
            o[kk * ol..(kk + 1) * ol].fill(*b);
        }
        matmul_acc(kernels.data(), &cols, o, g.k, pl, ol);
    }
    Tensor::new(vec![g.n, g.k, g.out_h, g.out_w], out)
}

/// 2×2 max pooling with stride 2. Returns the pooled map and, for every output,
/// the flat input index it was taken from (first maximum in row-major order).
pub fn maxpool2d<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), NnError> {
    if x.rank() != 4 {
        return Err(NnError::Dimension {
            op: "maxpool2d",
            message: format!("expected [N,C,H,W], got {:?}", x.shape()),
        });
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::Dimension {
            op: "maxpool2d",
            message: format!("spatial dims must be even, got {h}x{w}"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = data[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > best {
                        best = data[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

/// Per-channel spatial maximum `[N,C,H,W] → [N,C]`, with first-occurrence argmax.
pub fn global_max_pool<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), NnError> {
    if x.rank() != 4 {
        return Err(NnError::Dimension {
            op: "global_max_pool",
            message: format!("expected [N,C,H,W], got {:?}", x.shape()),
        });
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane = x.shape()[2] * x.shape()[3];
    let mut out = Vec::with_capacity(n * c);
    let mut argmax = Vec::with_capacity(n * c);
    for p in 0..n * c {
        let vals = &x.data()[p * plane..(p + 1) * plane];
        let mut best = 0;
        for (i, &v) in vals.iter().enumerate().skip(1) {
            if v > vals[best] {
                best = i;
            }
        }
        out.push(vals[best]);
        argmax.push(p * plane + best);
    }
    Ok((Tensor::new(vec![n, c], out)?, argmax))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Decay of the running statistics.
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Real> BatchNormParams<T> {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum,
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

pub(crate) struct BatchNormCache<T> {
    pub x_hat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn batchnorm_forward_cached<T: Real>(
    x: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>), NnError> {
    let c = params.channels();
    if x.rank() != 2 || x.shape()[1] != c {
        return Err(NnError::Shape {
            op: "batchnorm",
            left: x.shape().to_vec(),
            right: vec![c],
        });
    }
    let n = x.shape()[0];
    let eps = T::lit(params.epsilon);
    let (mean, var) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(NnError::BatchTooSmall(n));
            }
            let nf = T::from_usize(n).unwrap();
            let mut mean = vec![T::zero(); c];
            for i in 0..n {
                for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / nf);
            let mut var = vec![T::zero(); c];
            for i in 0..n {
                for ((s, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s = *s / nf);
            let keep = T::lit(params.momentum);
            let blend = T::one() - keep;
            for ch in 0..c {
                let rm = &mut params.running_mean.data_mut()[ch];
                *rm = keep * *rm + blend * mean[ch];
                let rv = &mut params.running_var.data_mut()[ch];
                *rv = keep * *rv + blend * var[ch];
            }
            (mean, var)
        }
        Mode::Infer => (params.running_mean.data().to_vec(), params.running_var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = Vec::with_capacity(n * c);
    let mut y = Vec::with_capacity(n * c);
    for i in 0..n {
        for (ch, &v) in x.row(i).iter().enumerate() {
            let h = (v - mean[ch]) * inv_std[ch];
            x_hat.push(h);
            y.push(params.gamma.data()[ch] * h + params.beta.data()[ch]);
        }
    }
    Ok((Tensor::new(vec![n, c], y)?, BatchNormCache { x_hat, inv_std }))
}

/// Batch normalization over the last axis of `[N, C]`.
///
/// Train mode normalizes with the batch mean and biased variance and folds them
/// into the running statistics; infer mode reads the running statistics only.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<Tensor<T>, NnError> {
    batchnorm_forward_cached(x, params, mode).map(|(y, _)| y)
}

/// Inverted dropout. Returns the output and the multiplicative mask that was applied.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<T>), NnError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::InvalidRate(rate));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), vec![T::one(); x.len()]));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mut out = x.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
        *o *= m;
    }
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[1], &[-3.0]), Mode::Train).data(), &[0.0]);
        assert_eq!(relu(&t(&[1], &[2.5]), Mode::Infer).data(), &[2.5]);
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0]), Mode::Train).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dense_examples() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = dense_forward(&t(&[1, 2], &[3.0, 4.0]), &eye, &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = dense_forward(&t(&[1, 2], &[1.0, 1.0]), &w, &t(&[2], &[1.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[4.0, 7.0]);
    }

    #[test]
    fn dense_shape_error_names_both_shapes() {
        let err = dense_forward(&t(&[1, 3], &[0.0; 3]), &t(&[2, 2], &[0.0; 4]), &t(&[2], &[0.0; 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn conv_constant_field_and_identity_kernel() {
        let x = t(&[1, 1, 3, 3], &[1.0; 9]);
        let y = conv2d_forward(&x, &t(&[1, 1, 2, 2], &[1.0; 4]), &t(&[1], &[0.0]), 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);

        let x = random(&[2, 1, 5, 4], 3);
        let y = conv2d_forward(&x, &t(&[1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0]), 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_quadruple_loop_oracle() {
        let x = random(&[1, 2, 6, 6], 11);
        let k = random(&[3, 2, 3, 3], 12);
        let b = random(&[3], 13);
        for stride in [1, 2] {
            let y = conv2d_forward(&x, &k, &b, stride).unwrap();
            let oh = (6 - 3) / stride + 1;
            assert_eq!(y.shape(), &[1, 3, oh, oh]);
            for kk in 0..3 {
                for oy in 0..oh {
                    for ox in 0..oh {
                        let mut acc = b.data()[kk];
                        for c in 0..2 {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    acc += x.data()[c * 36 + (oy * stride + dy) * 6 + ox * stride + dx]
                                        * k.data()[((kk * 2 + c) * 3 + dy) * 3 + dx];
                                }
                            }
                        }
                        let got = y.data()[(kk * oh + oy) * oh + ox];
                        assert!((got - acc).abs() < 1e-6, "k{kk} ({oy},{ox}): {got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_kernel_too_large() {
        let err = conv2d_forward(&random(&[1, 1, 2, 2], 1), &random(&[1, 1, 3, 3], 2), &t(&[1], &[0.0]), 1);
        assert!(matches!(err, Err(NnError::Dimension { .. })));
    }

    #[test]
    fn maxpool_examples_and_scan_oracle() {
        let (y, _) = maxpool2d(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let (y, arg) = maxpool2d(&t(&[1, 1, 2, 4], &[5.0; 8])).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0]);
        assert_eq!(arg, vec![0, 2], "ties go to the first element of each window");

        let x = random(&[1, 1, 4, 4], 5);
        let (y, _) = maxpool2d(&x).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(2 * oy + dy) * 4 + 2 * ox + dx]);
                    }
                }
                assert_eq!(y.data()[oy * 2 + ox], m);
            }
        }
        assert!(matches!(maxpool2d(&random(&[1, 1, 3, 4], 1)), Err(NnError::Dimension { .. })));
    }

    #[test]
    fn global_max_pool_examples() {
        let (y, _) = global_max_pool(&t(&[1, 1, 2, 2], &[1.0, 9.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[9.0]);
        let (y, arg) = global_max_pool(&t(&[1, 1, 2, 2], &[7.0; 4])).unwrap();
        assert_eq!((y.data(), arg), (&[7.0][..], vec![0]));
        let x = random(&[2, 3, 5, 4], 9);
        let (y, _) = global_max_pool(&x).unwrap();
        for p in 0..6 {
            let m = x.data()[p * 20..(p + 1) * 20].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(y.data()[p], m);
        }
    }

    #[test]
    fn batchnorm_two_sample_channel() {
        let mut p = BatchNormParams::<f64>::new(1, 0.99, 0.001);
        let y = batchnorm_forward(&t(&[2, 1], &[1.0, 3.0]), &mut p, Mode::Train).unwrap();
        let want = 1.0 / 1.001f64.sqrt();
        assert!((y.data()[0] + want).abs() < 1e-12);
        assert!((y.data()[1] - want).abs() < 1e-12);
        assert!((y.data()[1] - 0.99950).abs() < 1e-5);
        // running stats: 0.99 * 0 + 0.01 * 2, 0.99 * 1 + 0.01 * 1
        assert!((p.running_mean.data()[0] - 0.02).abs() < 1e-12);
        assert!((p.running_var.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_identity_on_standardized_batch() {
        let mut p = BatchNormParams::<f64>::new(1, 0.99, 1e-12);
        let x = t(&[4, 1], &[-1.0, 1.0, -1.0, 1.0]);
        let y = batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_infer_is_stateless_and_train_needs_two() {
        let mut p = BatchNormParams::<f64>::new(2, 0.99, 0.001);
        p.running_mean = t(&[2], &[1.0, -1.0]);
        p.running_var = t(&[2], &[4.0, 0.25]);
        let before = p.clone();
        let y = batchnorm_forward(&t(&[1, 2], &[3.0, 0.0]), &mut p, Mode::Infer).unwrap();
        assert_eq!(p, before);
        assert!((y.data()[0] - 2.0 / 4.001f64.sqrt()).abs() < 1e-12);
        assert!((y.data()[1] - 1.0 / 0.251f64.sqrt()).abs() < 1e-12);
        assert_eq!(
            batchnorm_forward(&t(&[1, 2], &[0.0, 0.0]), &mut p, Mode::Train),
            Err(NnError::BatchTooSmall(1))
        );
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&[4, 8], 2);
        assert_eq!(dropout(&x, 0.45, Mode::Infer, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 1.0, Mode::Train, &mut rng), Err(NnError::InvalidRate(1.0)));
        assert_eq!(dropout(&x, -0.1, Mode::Train, &mut rng), Err(NnError::InvalidRate(-0.1)));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let x = Tensor::<f64>::full(&[n], 1.0);
        let (y, _) = dropout(&x, 0.45, Mode::Train, &mut rng).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        // each element is 0 or 1/0.55 with P(keep)=0.55: sd = sqrt(0.45/0.55)
        let se = (0.45f64 / 0.55).sqrt() / (n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}, se {se}");
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.45).abs() < 0.01);
    }
}
