//! Central finite-difference verification of analytic gradients, run at `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{one_hot, softmax, softmax_cross_entropy_grad, categorical_cross_entropy, Layer, Mode, NnError};
use crate::tensor::Tensor;

const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
const MAGNITUDE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `"input"` or `"param[i]"` where the worst error occurred.
    pub worst: String,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

struct Tracker {
    worst: f64,
    at: String,
    checked: usize,
}

impl Tracker {
    fn record(&mut self, analytic: f64, numeric: f64, label: &str) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.worst || self.at.is_empty() {
            self.worst = e.max(self.worst);
            self.at = label.to_string();
        }
    }

    fn report(self, tolerance: f64) -> GradCheckReport {
        GradCheckReport {
            passed: self.worst < tolerance,
            max_relative_error: self.worst,
            worst: self.at,
            checked: self.checked,
            tolerance,
        }
    }
}

/// Checks `layer`'s backward pass against finite differences of the scalar
/// objective `Σ r ⊙ forward(x)`, where `x` and `r` are random.
///
/// Each evaluation runs on a fresh clone so stateful layers (batch-norm running
/// statistics) see identical conditions.
pub fn gradient_check<L>(
    layer: &L,
    input_shape: &[usize],
    mode: Mode,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, NnError>
where
    L: Layer<f64> + Clone,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(input_shape, &mut rng);
    let probe_out = layer.clone().forward(&x, mode)?;
    let r = random_tensor(probe_out.shape(), &mut rng);

    let objective = |l: &L, x: &Tensor<f64>| -> Result<f64, NnError> {
        let y = l.clone().forward(x, mode)?;
        Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };

    let mut analytic_layer = layer.clone();
    analytic_layer.forward(&x, mode)?;
    let grads = analytic_layer.backward(&r)?;

    let mut tracker = Tracker {
        worst: 0.0,
        at: String::new(),
        checked: 0,
    };
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        let numeric = (objective(layer, &xp)? - objective(layer, &xm)?) / (2.0 * STEP);
        tracker.record(grads.input_grad.data()[i], numeric, "input");
    }
    for (pi, pgrad) in grads.param_grads.iter().enumerate() {
        let label = format!("param[{pi}]");
        for j in 0..pgrad.len() {
            let mut lp = layer.clone();
            lp.params_mut()[pi].data_mut()[j] += STEP;
            let mut lm = layer.clone();
            lm.params_mut()[pi].data_mut()[j] -= STEP;
            let numeric = (objective(&lp, &x)? - objective(&lm, &x)?) / (2.0 * STEP);
            tracker.record(pgrad.data()[j], numeric, &label);
        }
    }
    Ok(tracker.report(tolerance))
}

/// Checks `(softmax(z) − y)/N` against finite differences of the mean cross-entropy.
pub fn check_softmax_cross_entropy(batch: usize, classes: usize, tolerance: f64, seed: u64) -> Result<GradCheckReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = random_tensor(&[batch, classes], &mut rng).map(|v| 3.0 * v);
    let labels: Vec<u8> = (0..batch).map(|_| rng.random_range(0..classes) as u8).collect();
    let y: Tensor<f64> = one_hot(&labels, classes);
    let loss = |z: &Tensor<f64>| categorical_cross_entropy(&softmax(z), &y);
    let analytic = softmax_cross_entropy_grad(&softmax(&z), &y)?;
    let mut tracker = Tracker {
        worst: 0.0,
        at: String::new(),
        checked: 0,
    };
    for i in 0..z.len() {
        let mut zp = z.clone();
        zp.data_mut()[i] += STEP;
        let mut zm = z.clone();
        zm.data_mut()[i] -= STEP;
        let numeric = (loss(&zp)? - loss(&zm)?) / (2.0 * STEP);
        tracker.record(analytic.data()[i], numeric, "logits");
    }
    Ok(tracker.report(tolerance))
}

/// One finite-difference check in [`gradient_suite`].
#[derive(Clone, Debug, Serialize)]
pub struct SuiteCase {
    pub layer: &'static str,
    pub shape: Vec<usize>,
    pub report: GradCheckReport,
}

fn random_mask(len: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..len).map(|_| rng.random::<f64>() >= 0.45).collect()
}

/// Runs every layer and the softmax + cross-entropy composite on three random
/// shapes each. Dense and conv use `1e-5`, everything else `1e-4`.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteCase>, NnError> {
    use super::{BatchNorm, BatchNormParams, Conv2d, Dense, Dropout, GlobalMaxPool, MaxPool2d, Relu};
    const TIGHT: f64 = 1e-5;
    const LOOSE: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut push = |layer: &'static str, shape: &[usize], report: GradCheckReport| {
        cases.push(SuiteCase {
            layer,
            shape: shape.to_vec(),
            report,
        })
    };

    for (batch, inputs, outputs) in [(3, 4, 5), (2, 7, 3), (5, 1, 2)] {
        let mut layer = Dense::<f64>::init(inputs, outputs, &mut rng);
        layer.bias = random_tensor(&[outputs], &mut rng);
        let shape = [batch, inputs];
        push("dense", &shape, gradient_check(&layer, &shape, Mode::Train, TIGHT, rng.random())?);
    }
    for (shape, out, k) in [([1, 2, 6, 6], 3, 3), ([2, 1, 5, 5], 2, 3), ([1, 3, 7, 5], 2, 2)] {
        let mut layer = Conv2d::<f64>::init(shape[1], out, k, &mut rng);
        layer.bias = random_tensor(&[out], &mut rng);
        push("conv", &shape, gradient_check(&layer, &shape, Mode::Train, TIGHT, rng.random())?);
    }
    for shape in [[2, 2, 4, 4], [1, 3, 6, 6], [3, 1, 2, 8]] {
        push("maxpool", &shape, gradient_check(&MaxPool2d::new(), &shape, Mode::Train, LOOSE, rng.random())?);
    }
    for shape in [[2, 3, 3, 5], [1, 1, 4, 4], [3, 2, 2, 2]] {
        push("global_max_pool", &shape, gradient_check(&GlobalMaxPool::new(), &shape, Mode::Train, LOOSE, rng.random())?);
    }
    for shape in [[8, 4], [5, 3], [16, 2]] {
        let mut p = BatchNormParams::<f64>::new(shape[1], 0.99, 1e-3);
        p.gamma = random_tensor(&[shape[1]], &mut rng).map(|v| 1.0 + 0.5 * v);
        p.beta = random_tensor(&[shape[1]], &mut rng);
        push("batchnorm_train", &shape, gradient_check(&BatchNorm::new(p), &shape, Mode::Train, LOOSE, rng.random())?);
    }
    for shape in [vec![4, 6], vec![2, 3, 4, 4], vec![1, 10]] {
        push("relu", &shape, gradient_check(&Relu::<f64>::new(), &shape, Mode::Train, LOOSE, rng.random())?);
    }
    for shape in [vec![4, 6], vec![2, 16], vec![3, 2, 2, 2]] {
        let keep = random_mask(shape.iter().product(), &mut rng);
        let layer = Dropout::<f64>::new(0.45, 0)?.with_fixed_mask(&keep);
        push("dropout_fixed_mask", &shape, gradient_check(&layer, &shape, Mode::Train, LOOSE, rng.random())?);
    }
    for (batch, classes) in [(5, 2), (3, 4), (8, 2)] {
        push(
            "softmax_cross_entropy",
            &[batch, classes],
            check_softmax_cross_entropy(batch, classes, LOOSE, rng.random())?,
        );
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNorm, BatchNormParams, Conv2d, Dense, Dropout, GlobalMaxPool, MaxPool2d, Relu};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn dense_random_3x4() {
        let layer = Dense::<f64>::init(4, 5, &mut rng(1));
        let mut layer = layer;
        layer.bias = random_tensor(&[5], &mut rng(2));
        let r = gradient_check(&layer, &[3, 4], Mode::Train, 1e-5, 7).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 12 + 20 + 5);
    }

    #[test]
    fn batchnorm_train_8x4() {
        let mut p = BatchNormParams::<f64>::new(4, 0.99, 0.001);
        p.gamma = random_tensor(&[4], &mut rng(3)).map(|v| 1.0 + 0.5 * v);
        p.beta = random_tensor(&[4], &mut rng(4));
        let r = gradient_check(&BatchNorm::new(p), &[8, 4], Mode::Train, 1e-4, 8).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn conv_1x2x6x6() {
        let layer = Conv2d::<f64>::init(2, 3, 3, &mut rng(5));
        let r = gradient_check(&layer, &[1, 2, 6, 6], Mode::Train, 1e-5, 9).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn parameterless_layers() {
        let r = gradient_check(&Relu::<f64>::new(), &[4, 6], Mode::Train, 1e-4, 10).unwrap();
        assert!(r.passed, "{r:?}");
        let r = gradient_check(&MaxPool2d::new(), &[2, 2, 4, 4], Mode::Train, 1e-4, 11).unwrap();
        assert!(r.passed, "{r:?}");
        let r = gradient_check(&GlobalMaxPool::new(), &[2, 3, 3, 5], Mode::Train, 1e-4, 12).unwrap();
        assert!(r.passed, "{r:?}");
        let keep: Vec<bool> = (0..24).map(|i| i % 3 != 0).collect();
        let d = Dropout::<f64>::new(0.45, 0).unwrap().with_fixed_mask(&keep);
        let r = gradient_check(&d, &[4, 6], Mode::Train, 1e-4, 13).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let r = check_softmax_cross_entropy(5, 2, 1e-6, 14).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn broken_gradient_is_reported_not_thrown() {
        #[derive(Clone)]
        struct Wrong;
        impl Layer<f64> for Wrong {
            fn forward(&mut self, x: &Tensor<f64>, _: Mode) -> Result<Tensor<f64>, NnError> {
                Ok(x.map(|v| v * v))
            }
            fn backward(&mut self, up: &Tensor<f64>) -> Result<crate::nn::LayerGradients<f64>, NnError> {
                Ok(crate::nn::LayerGradients {
                    input_grad: up.clone(),
                    param_grads: vec![],
                })
            }
        }
        let r = gradient_check(&Wrong, &[3, 3], Mode::Train, 1e-4, 1).unwrap();
        assert!(!r.passed);
        assert!(r.max_relative_error > 1e-2);
    }
}
