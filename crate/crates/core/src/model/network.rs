use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Backbone, ModelConfig, OUTPUT_UNITS};
use super::ModelError;
use crate::nn::{
    batchnorm_forward, conv2d_forward, dense_forward, global_max_pool, l1_l2_penalty, maxpool2d, relu, softmax,
    BatchNorm, BatchNormParams, Conv2d, Dense, Dropout, GlobalMaxPool, Layer, MaxPool2d, Mode, Relu,
};
use crate::tensor::Tensor;

/// Rows per chunk when running inference over many samples.
const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    relu: Relu,
    pool: Option<MaxPool2d>,
}

/// Backbone (possibly empty) plus the classification head.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    blocks: Vec<ConvBlock>,
    global_pool: Option<GlobalMaxPool>,
    bn: BatchNorm,
    dense: Dense,
    dense_relu: Relu,
    dropout: Dropout,
    out: Dense,
}

/// Output of [`Model::predict`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: [f32; 2],
    pub label: u8,
}

impl Prediction {
    fn from_row(row: &[f32]) -> Self {
        let probabilities = [row[0], row[1]];
        // Exact ties go to class 0.
        let label = u8::from(row[1] > row[0]);
        Self { probabilities, label }
    }
}

/// Builds a freshly initialized model: He-uniform weights, zero biases, identity
/// batch-norm statistics. Identical seeds give bit-identical parameters.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    let global_pool = match &config.backbone {
        Backbone::SmallConv(c) => {
            let mut in_ch = c.in_channels;
            for (i, &out_ch) in c.channels.iter().enumerate() {
                blocks.push(ConvBlock {
                    conv: Conv2d::init(in_ch, out_ch, c.kernel, &mut rng),
                    relu: Relu::new(),
                    pool: (i + 1 < c.channels.len()).then(MaxPool2d::new),
                });
                in_ch = out_ch;
            }
            Some(GlobalMaxPool::new())
        }
        Backbone::FeatureFile { .. } => None,
    };
    let h = &config.head;
    let emb = config.embedding_dim();
    let dense = Dense::init(emb, h.hidden_units, &mut rng);
    let out = Dense::init(h.hidden_units, OUTPUT_UNITS, &mut rng);
    Ok(Model {
        config: config.clone(),
        blocks,
        global_pool,
        bn: BatchNorm::new(BatchNormParams::new(emb, h.bn_momentum, h.bn_epsilon)),
        dense,
        dense_relu: Relu::new(),
        dropout: Dropout::new(h.dropout_rate, seed ^ 0x5eed_d50b)?,
        out,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        self.config.sample_shape()
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout.reseed(seed);
    }

    /// Every stored tensor, including batch-norm running statistics, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.{i}.conv.weight"), &b.conv.kernels));
            out.push((format!("backbone.{i}.conv.bias"), &b.conv.bias));
        }
        let bn = &self.bn.params;
        out.push(("head.bn.gamma".into(), &bn.gamma));
        out.push(("head.bn.beta".into(), &bn.beta));
        out.push(("head.bn.running_mean".into(), &bn.running_mean));
        out.push(("head.bn.running_var".into(), &bn.running_var));
        out.push(("head.dense.weight".into(), &self.dense.weight));
        out.push(("head.dense.bias".into(), &self.dense.bias));
        out.push(("head.out.weight".into(), &self.out.weight));
        out.push(("head.out.bias".into(), &self.out.bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.conv.weight"), &mut b.conv.kernels));
            out.push((format!("backbone.{i}.conv.bias"), &mut b.conv.bias));
        }
        let bn = &mut self.bn.params;
        out.push(("head.bn.gamma".into(), &mut bn.gamma));
        out.push(("head.bn.beta".into(), &mut bn.beta));
        out.push(("head.bn.running_mean".into(), &mut bn.running_mean));
        out.push(("head.bn.running_var".into(), &mut bn.running_var));
        out.push(("head.dense.weight".into(), &mut self.dense.weight));
        out.push(("head.dense.bias".into(), &mut self.dense.bias));
        out.push(("head.out.weight".into(), &mut self.out.weight));
        out.push(("head.out.bias".into(), &mut self.out.bias));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.named_tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_tensors_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Trainable tensors, in the order [`Model::backward`] returns gradients.
    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.conv.params_mut());
        }
        out.extend(self.bn.params_mut());
        out.extend(self.dense.params_mut());
        out.extend(self.out.params_mut());
        out
    }

    pub(crate) fn trainable_shapes(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for b in &self.blocks {
            out.extend(b.conv.params().iter().map(|t| t.shape().to_vec()));
        }
        out.extend(self.bn.params().iter().map(|t| t.shape().to_vec()));
        out.extend(self.dense.params().iter().map(|t| t.shape().to_vec()));
        out.extend(self.out.params().iter().map(|t| t.shape().to_vec()));
        out
    }

    /// Elastic-net penalty on the hidden dense layer and its gradient.
    pub fn penalty(&self) -> (f32, Tensor) {
        l1_l2_penalty(&self.dense.weight, &self.config.head.regularization)
    }

    pub fn penalty_value(&self) -> f64 {
        let r = &self.config.head.regularization;
        self.dense
            .weight
            .data()
            .iter()
            .map(|&w| {
                let w = f64::from(w);
                r.lambda1 * w.abs() + r.lambda2 * w * w
            })
            .sum()
    }

    fn check_batch(&self, x: &Tensor) -> Result<(), ModelError> {
        let expected = self.sample_shape();
        if x.rank() != expected.len() + 1 || x.shape()[1..] != expected[..] {
            return Err(ModelError::InputShape {
                expected,
                found: x.shape().get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        Ok(())
    }

    /// Train-mode forward pass returning logits; caches activations for [`Model::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check_batch(x)?;
        let mode = Mode::Train;
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.conv.forward(&h, mode)?;
            h = b.relu.forward(&h, mode)?;
            if let Some(p) = &mut b.pool {
                h = p.forward(&h, mode)?;
            }
        }
        if let Some(g) = &mut self.global_pool {
            h = g.forward(&h, mode)?;
        }
        h = self.bn.forward(&h, mode)?;
        h = self.dense.forward(&h, mode)?;
        h = self.dense_relu.forward(&h, mode)?;
        h = self.dropout.forward(&h, mode)?;
        Ok(self.out.forward(&h, mode)?)
    }

    /// Backpropagates a logit gradient; returns one gradient per trainable tensor.
    /// The regularization term is not included.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<Vec<Tensor>, ModelError> {
        let out = self.out.backward(dlogits)?;
        let g = self.dropout.backward(&out.input_grad)?;
        let g = self.dense_relu.backward(&g.input_grad)?;
        let dense = self.dense.backward(&g.input_grad)?;
        let bn = self.bn.backward(&dense.input_grad)?;
        let mut upstream = bn.input_grad;
        let mut backbone: Vec<Vec<Tensor>> = Vec::with_capacity(self.blocks.len());
        if let Some(gp) = &mut self.global_pool {
            upstream = gp.backward(&upstream)?.input_grad;
            for b in self.blocks.iter_mut().rev() {
                if let Some(p) = &mut b.pool {
                    upstream = p.backward(&upstream)?.input_grad;
                }
                upstream = b.relu.backward(&upstream)?.input_grad;
                let conv = b.conv.backward(&upstream)?;
                upstream = conv.input_grad;
                backbone.push(conv.param_grads);
            }
        }
        let mut grads: Vec<Tensor> = backbone.into_iter().rev().flatten().collect();
        grads.extend(bn.param_grads);
        grads.extend(dense.param_grads);
        grads.extend(out.param_grads);
        Ok(grads)
    }

    fn infer_logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = conv2d_forward(&h, &b.conv.kernels, &b.conv.bias, b.conv.stride)?;
            h = relu(&h, Mode::Infer);
            if b.pool.is_some() {
                h = maxpool2d(&h)?.0;
            }
        }
        if self.global_pool.is_some() {
            h = global_max_pool(&h)?.0;
        }
        let mut bn = self.bn.params.clone();
        h = batchnorm_forward(&h, &mut bn, Mode::Infer)?;
        h = dense_forward(&h, &self.dense.weight, &self.dense.bias)?;
        h = relu(&h, Mode::Infer);
        Ok(dense_forward(&h, &self.out.weight, &self.out.bias)?)
    }

    /// Inference-mode class probabilities for a batch `[N, ...sample_shape]`.
    /// Takes `&self`, so many threads may share one model.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check_batch(x)?;
        let n = x.shape()[0];
        if n <= INFER_CHUNK {
            return Ok(softmax(&self.infer_logits(x)?));
        }
        let per = x.len() / n;
        let mut probs = Vec::with_capacity(n * OUTPUT_UNITS);
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, x.data()[start * per..end * per].to_vec())?;
            probs.extend(softmax(&self.infer_logits(&chunk)?).into_data());
        }
        Ok(Tensor::new(vec![n, OUTPUT_UNITS], probs)?)
    }

    /// Predicts one sample shaped like [`Model::sample_shape`].
    pub fn predict(&self, sample: &Tensor) -> Result<Prediction, ModelError> {
        let mut shape = vec![1];
        shape.extend_from_slice(sample.shape());
        let x = sample.clone().reshape(shape)?;
        let probs = self.infer(&x)?;
        Ok(Prediction::from_row(probs.row(0)))
    }

    /// Predictions for a batch `[N, ...sample_shape]`.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<Prediction>, ModelError> {
        let probs = self.infer(x)?;
        Ok((0..probs.rows()).map(|i| Prediction::from_row(probs.row(i))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{HeadConfig, SmallConvConfig};
    use rand::Rng;

    #[test]
    fn default_head_shapes() {
        let m = build_model(&ModelConfig::default(), 1).unwrap();
        assert_eq!(m.tensor("head.dense.weight").unwrap().shape(), &[256, 64]);
        assert_eq!(m.tensor("head.out.weight").unwrap().shape(), &[2, 256]);
        assert_eq!(m.tensor("backbone.0.conv.weight").unwrap().shape(), &[16, 3, 3, 3]);
        assert_eq!(m.tensor("backbone.2.conv.weight").unwrap().shape(), &[64, 32, 3, 3]);
        assert_eq!(m.tensor("head.bn.running_var").unwrap().data(), &[1.0; 64][..]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::default();
        let (a, b, c) = (build_model(&cfg, 7).unwrap(), build_model(&cfg, 7).unwrap(), build_model(&cfg, 8).unwrap());
        for ((name, ta), (_, tb)) in a.named_tensors().into_iter().zip(b.named_tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb), "{name}");
        }
        assert_ne!(a.tensor("head.dense.weight").unwrap(), c.tensor("head.dense.weight").unwrap());
        let w = a.tensor("head.dense.weight").unwrap();
        let bound = (6.0f32 / 64.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(a.tensor("head.dense.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_file_model_has_head_only() {
        let m = build_model(&ModelConfig::feature_file(10), 0).unwrap();
        assert!(m.named_tensors().iter().all(|(n, _)| n.starts_with("head.")));
        assert_eq!(m.tensor("head.dense.weight").unwrap().shape(), &[256, 10]);
    }

    fn tiny_feature_model() -> Model {
        let cfg = ModelConfig {
            backbone: Backbone::FeatureFile { dim: 2 },
            head: HeadConfig {
                hidden_units: 2,
                ..Default::default()
            },
        };
        let mut m = build_model(&cfg, 0).unwrap();
        let set = |m: &mut Model, name: &str, v: &[f32]| m.tensor_mut(name).unwrap().data_mut().copy_from_slice(v);
        set(&mut m, "head.bn.gamma", &[2.0, 1.0]);
        set(&mut m, "head.bn.beta", &[0.5, -0.5]);
        set(&mut m, "head.bn.running_mean", &[1.0, 2.0]);
        set(&mut m, "head.bn.running_var", &[4.0, 0.25]);
        set(&mut m, "head.dense.weight", &[1.0, -1.0, 0.5, 2.0]);
        set(&mut m, "head.dense.bias", &[0.1, -0.2]);
        set(&mut m, "head.out.weight", &[1.0, 0.0, -0.5, 1.5]);
        set(&mut m, "head.out.bias", &[0.0, 0.3]);
        m
    }

    #[test]
    fn prediction_matches_hand_computed_forward_pass() {
        let m = tiny_feature_model();
        let x = [3.0f64, 2.5];
        // batch norm with running statistics
        let bn = [
            2.0 * (x[0] - 1.0) / (4.0f64 + 1e-3).sqrt() + 0.5,
            (x[1] - 2.0) / (0.25f64 + 1e-3).sqrt() - 0.5,
        ];
        let h = [
            (bn[0] - bn[1] + 0.1).max(0.0),
            (0.5 * bn[0] + 2.0 * bn[1] - 0.2).max(0.0),
        ];
        let z = [h[0], -0.5 * h[0] + 1.5 * h[1] + 0.3];
        let e = [z[0].exp(), z[1].exp()];
        let p1 = e[1] / (e[0] + e[1]);
        let pred = m.predict(&Tensor::from_vec(vec![3.0, 2.5])).unwrap();
        assert!((f64::from(pred.probabilities[1]) - p1).abs() < 1e-5);
        assert!((f64::from(pred.probabilities[0]) - (1.0 - p1)).abs() < 1e-5);
        assert_eq!(pred.label, u8::from(p1 > 0.5));
    }

    #[test]
    fn exact_tie_goes_to_class_zero() {
        assert_eq!(Prediction::from_row(&[0.5, 0.5]).label, 0);
        assert_eq!(Prediction::from_row(&[0.4, 0.6]).label, 1);
    }

    #[test]
    fn inference_is_repeatable_and_normalized() {
        let cfg = ModelConfig {
            backbone: Backbone::SmallConv(SmallConvConfig {
                input_size: 14,
                channels: vec![4, 8],
                ..Default::default()
            }),
            head: HeadConfig::default(),
        };
        let m = build_model(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 70;
        let x = Tensor::new(vec![n, 3, 14, 14], (0..n * 588).map(|_| rng.random::<f32>()).collect()).unwrap();
        let a = m.infer(&x).unwrap();
        let b = m.infer(&x).unwrap();
        assert_eq!(a, b);
        for i in 0..n {
            assert!((a.row(i).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        // chunked and single-sample paths agree
        let single = m.predict(&Tensor::new(vec![3, 14, 14], x.data()[69 * 588..].to_vec()).unwrap()).unwrap();
        assert_eq!(single.probabilities, [a.row(69)[0], a.row(69)[1]]);
        assert!(matches!(
            m.predict(&Tensor::from_vec(vec![1.0; 5])),
            Err(ModelError::InputShape { .. })
        ));
    }
}
