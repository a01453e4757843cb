//! Stateful layers: each caches what its backward pass needs during `forward`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{batchnorm_forward_cached, BatchNormCache, ConvGeometry};
use super::{conv2d_forward, dense_forward, dropout, global_max_pool, maxpool2d, relu, BatchNormParams, Mode, NnError};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Real, Tensor};

/// Result of a backward pass: gradient with respect to the layer input and one
/// gradient per trainable parameter, in [`Layer::params`] order.
#[derive(Clone, Debug)]
pub struct LayerGradients<T = f32> {
    pub input_grad: Tensor<T>,
    pub param_grads: Vec<Tensor<T>>,
}

pub trait Layer<T: Real> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError>;

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<LayerGradients<T>, NnError>;

    fn params(&self) -> Vec<&Tensor<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Vec::new()
    }
}

fn he_uniform<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Clone, Debug, Default)]
pub struct Relu<T = f32> {
    input: Option<Tensor<T>>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }
}

impl<T: Real> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        self.input = Some(x.clone());
        Ok(relu(x, mode))
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<LayerGradients<T>, NnError> {
        let x = self.input.as_ref().ok_or(NnError::NoForwardCache("relu"))?;
        x.same_shape(upstream, "relu backward")?;
        let mut g = upstream.clone();
        for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
            if xv <= T::zero() {
                *gv = T::zero();
            }
        }
        Ok(LayerGradients {
            input_grad: g,
            param_grads: Vec::new(),
        })
    }
}

/// Fully connected layer with weights `[out, in]`.
#[derive(Clone, Debug)]
pub struct Dense<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight,
            bias,
            input: None,
        }
    }

    /// He-uniform weights, zero bias.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::new(he_uniform(&[outputs, inputs], inputs, rng), Tensor::zeros(&[outputs]))
    }
}

impl<T: Real> Layer<T> for Dense<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>, NnError> {
        let y = dense_forward(x, &self.weight, &self.bias)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<LayerGradients<T>, NnError> {
        let x = self.input.as_ref().ok_or(NnError::NoForwardCache("dense"))?;
        let (n, input) = (x.shape()[0], x.shape()[1]);
        let out = self.weight.shape()[0];
        if upstream.shape() != [n, out] {
            return Err(NnError::Shape {
                op: "dense backward",
                left: upstream.shape().to_vec(),
                right: vec![n, out],
            });
        }
        let mut dx = vec![T::zero(); n * input];
        matmul_acc(upstream.data(), self.weight.data(), &mut dx, n, out, input);
        let mut dw = vec![T::zero(); out * input];
        matmul_at_acc(upstream.data(), x.data(), &mut dw, n, out, input);
        let mut db = vec![T::zero(); out];
        for i in 0..n {
            for (b, &u) in db.iter_mut().zip(upstream.row(i)) {
                *b += u;
            }
        }
        Ok(LayerGradients {
            input_grad: Tensor::new(vec![n, input], dx)?,
            param_grads: vec![Tensor::new(vec![out, input], dw)?, Tensor::new(vec![out], db)?],
        })
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Valid-padding 2-D convolution with kernels `[K, C, kh, kw]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T = f32> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(kernels: Tensor<T>, bias: Tensor<T>, stride: usize) -> Self {
        Self {
            kernels,
            bias,
            stride,
            input: None,
        }
    }

    pub fn init<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self::new(
            he_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            Tensor::zeros(&[out_channels]),
            1,
        )
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>, NnError> {
        let y = conv2d_forward(x, &self.kernels, &self.bias, self.stride)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<LayerGradients<T>, NnError> {
        let x = self.input.as_ref().ok_or(NnError::NoForwardCache("conv2d"))?;
        let g = ConvGeometry::new(x, &self.kernels, self.stride)?;
        let expected = [g.n, g.k, g.out_h, g.out_w];
        if upstream.shape() != expected {
            return Err(NnError::Shape {
                op: "conv2d backward",
                left: upstream.shape().to_vec(),
                right: expected.to_vec(),
            });
        }
        let (pl, ol) = (g.patch_len(), g.out_len());
        let in_len = g.c * g.h * g.w;
        let mut dk = vec![T::zero(); g.k * pl];
        let mut db = vec![T::zero(); g.k];
        let mut dx = vec![T::zero(); x.len()];
        let mut cols = vec![T::zero(); pl * ol];
        let mut dcols = vec![T::zero(); pl * ol];
        for s in 0..g.n {
            let up = &upstream.data()[s * g.k * ol..(s + 1) * g.k * ol];
            g.im2col(&x.data()[s * in_len..(s + 1) * in_len], &mut cols);
            matmul_bt_acc(up, &cols, &mut dk, g.k, ol, pl);
            for (kk, b) in db.iter_mut().enumerate() {
                *b += up[kk * ol..(kk + 1) * ol].iter().copied().sum::<T>();
            }
            dcols.fill(T::zero());
            matmul_at_acc(self.kernels.data(), up, &mut dcols, g.k, pl, ol);
            g.col2im(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
        }
        Ok(LayerGradients {
            input_grad: Tensor::new(x.shape().to_vec(), dx)?,
            param_grads: vec![
                Tensor::new(self.kernels.shape().to_vec(), dk)?,
                Tensor::new(vec![g.k], db)?,
            ],
        })
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.kernels, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.kernels, &mut self.bias]
    }
}

fn route_to_argmax<T: Real>(input_shape: &[usize], argmax: &[usize], upstream: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if upstream.len() != argmax.len() {
        return Err(NnError::Shape {
            op: "pool backward",
            left: upstream.shape().to_vec(),
            right: vec![argmax.len()],
        });
    }
    let mut dx = Tensor::zeros(input_shape);
    for (&idx, &u) in argmax.iter().zip(upstream.data()) {
        dx.data_mut()[idx] += u;
    }
    Ok(dx)
}

#[derive(Clone, Debug, Default)]
pub struct MaxPool2d {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Real> Layer<T> for MaxPool2d {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>, NnError> {
        let (y, argmax) = maxpool2d(x)?;
        self.input_shape = x.shape().to_vec();
        self.argmax = argmax;
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<LayerGradients<T>, NnError> {
        if self.input_shape.is_empty() {
            return Err(NnError::NoForwardCache("maxpool2d"));
        }
        Ok(LayerGradients {
            input_grad: route_to_argmax(&self.input_shape, &self.argmax, upstream)?,
            param_grads: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct GlobalMaxPool {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl GlobalMaxPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Real> Layer<T> for GlobalMaxPool {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>, NnError> {
        let (y, argmax) = global_max_pool(x)?;
        self.input_shape = x.shape().to_vec();
        self.argmax = argmax;
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<LayerGradients<T>, NnError> {
        if self.input_shape.is_empty() {
            return Err(NnError::NoForwardCache("global_max_pool"));
        }
        Ok(LayerGradients {
            input_grad: route_to_argmax(&self.input_shape, &self.argmax, upstream)?,
            param_grads: Vec::new(),
        })
    }
}

pub struct BatchNorm<T = f32> {
    pub params: BatchNormParams<T>,
    cache: Option<(Mode, BatchNormCache<T>)>,
}

impl<T: Real> Clone for BatchNorm<T> {
    fn clone(&self) -> Self {
        // Caches are per-pass scratch; a clone starts clean.
        Self {
            params: self.params.clone(),
            cache: None,
        }
    }
}

impl<T: Real> std::fmt::Debug for BatchNorm<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatchNorm").field("params", &self.params).finish()
    }
}

impl<T: Real> BatchNorm<T> {
    pub fn new(params: BatchNormParams<T>) -> Self {
        Self { params, cache: None }
    }
}

impl<T: Real> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let (y, cache) = batchnorm_forward_cached(x, &mut self.params, mode)?;
        self.cache = Some((mode, cache));
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<LayerGradients<T>, NnError> {
        let (mode, cache) = self.cache.as_ref().ok_or(NnError::NoForwardCache("batchnorm"))?;
        let c = self.params.channels();
        if upstream.rank() != 2 || upstream.shape()[1] != c || upstream.len() != cache.x_hat.len() {
            return Err(NnError::Shape {
                op: "batchnorm backward",
                left: upstream.shape().to_vec(),
                right: vec![cache.x_hat.len() / c, c],
            });
        }
        let n = upstream.shape()[0];
        let nf = T::from_usize(n).unwrap();
        let gamma = self.params.gamma.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let u = upstream.data()[i * c + ch];
                dgamma[ch] += u * cache.x_hat[i * c + ch];
                dbeta[ch] += u;
            }
        }
        let mut dx = vec![T::zero(); n * c];
        match mode {
            Mode::Train => {
                // dx = inv_std/N · (N·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), with dx̂ = γ·upstream
                for i in 0..n {
                    for ch in 0..c {
                        let dxhat = upstream.data()[i * c + ch] * gamma[ch];
                        let sum_dxhat = dbeta[ch] * gamma[ch];
                        let sum_dxhat_xhat = dgamma[ch] * gamma[ch];
                        dx[i * c + ch] = cache.inv_std[ch] / nf
                            * (nf * dxhat - sum_dxhat - cache.x_hat[i * c + ch] * sum_dxhat_xhat);
                    }
                }
            }
            Mode::Infer => {
                for i in 0..n {
                    for ch in 0..c {
                        dx[i * c + ch] = upstream.data()[i * c + ch] * gamma[ch] * cache.inv_std[ch];
                    }
                }
            }
        }
        Ok(LayerGradients {
            input_grad: Tensor::new(vec![n, c], dx)?,
            param_grads: vec![Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?],
        })
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.params.gamma, &self.params.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.params.gamma, &mut self.params.beta]
    }
}

/// Inverted dropout with its own seeded generator.
#[derive(Clone, Debug)]
pub struct Dropout<T = f32> {
    pub rate: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<T>>,
    fixed_mask: Option<Vec<T>>,
}

impl<T: Real> Dropout<T> {
    pub fn new(rate: f64, seed: u64) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidRate(rate));
        }
        Ok(Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
            fixed_mask: None,
        })
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Replays the given keep/drop pattern (`true` = keep) in every train-mode pass.
    pub fn with_fixed_mask(mut self, keep: &[bool]) -> Self {
        let scale = T::lit(1.0 / (1.0 - self.rate));
        self.fixed_mask = Some(keep.iter().map(|&k| if k { scale } else { T::zero() }).collect());
        self
    }
}

impl<T: Real> Layer<T> for Dropout<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let (y, mask) = match (&self.fixed_mask, mode) {
            (Some(fixed), Mode::Train) => {
                if fixed.len() != x.len() {
                    return Err(NnError::Shape {
                        op: "dropout mask",
                        left: x.shape().to_vec(),
                        right: vec![fixed.len()],
                    });
                }
                let mut y = x.clone();
                for (v, &m) in y.data_mut().iter_mut().zip(fixed) {
                    *v *= m;
                }
                (y, fixed.clone())
            }
            _ => dropout(x, self.rate, mode, &mut self.rng)?,
        };
        self.mask = Some(mask);
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<LayerGradients<T>, NnError> {
        let mask = self.mask.as_ref().ok_or(NnError::NoForwardCache("dropout"))?;
        if mask.len() != upstream.len() {
            return Err(NnError::Shape {
                op: "dropout backward",
                left: upstream.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let mut g = upstream.clone();
        for (v, &m) in g.data_mut().iter_mut().zip(mask) {
            *v *= m;
        }
        Ok(LayerGradients {
            input_grad: g,
            param_grads: Vec::new(),
        })
    }
}
