//! Loss, manual backward pass and SGD training with selective parameter
//! masks.
//!
//! The backward pass is straight-through: quantization rounding and the LUT
//! multiply are treated as the exact real-valued operation, so gradients are
//! computed from the cached dequantized operands with ordinary calculus.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::am::AmLibrary;
use crate::error::{Error, Result};
use crate::qnn::data::Dataset;
use crate::qnn::forward::{forward, sample_noise_eps, weight_codes, Arithmetic, ForwardPass};
use crate::qnn::{Activation, LayerKind, MultPlan, OpPointParams, QuantModel, Tensor, BN_EPS};

/// EMA momentum for BatchNorm running statistics during training.
const BN_STATS_MOMENTUM: f64 = 0.1;

/// Which parameter classes a training run may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// BatchNorm affine parameters and biases.
    BnOnly,
    BiasOnly,
    None,
}

/// Fine-tuning flavor for per-operating-point parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    /// Biases only.
    Bias,
    /// BatchNorm gamma/beta plus biases.
    Bn,
    /// A full private parameter copy.
    Full,
}

impl FinetuneMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FinetuneMode::Bias => "bias",
            FinetuneMode::Bn => "bn",
            FinetuneMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bias" => Ok(FinetuneMode::Bias),
            "bn" => Ok(FinetuneMode::Bn),
            "full" => Ok(FinetuneMode::Full),
            other => Err(Error::InvalidArgument(format!(
                "unknown fine-tune mode `{other}` (expected bias|bn|full)"
            ))),
        }
    }
}

/// SGD hyperparameters. `lr` is indexed by epoch; the last entry repeats.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Vec<f64>,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.lr.is_empty() || self.lr.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidArgument(
                "learning-rate schedule must be non-empty and positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.lr[epoch.min(self.lr.len() - 1)]
    }
}

/// Gradients of one batch, per layer. Layers without BatchNorm carry empty
/// gamma/beta vectors.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Tensor>,
    pub bias: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    /// d loss / d sigma_rel per layer (zero without injected noise).
    pub sigma_rel: Vec<f64>,
}

/// Mean cross-entropy of softmaxed logits and its gradient.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> (f64, Tensor) {
    let n = labels.len();
    let classes = logits.shape()[1];
    assert_eq!(logits.shape()[0], n, "labels must match batch");
    let mut dlogits = Tensor::zeros(&[n, classes]);
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let log_sum = sum.ln() + max;
        let label = labels[i] as usize;
        loss += log_sum - row[label];
        let out = &mut dlogits.data_mut()[i * classes..(i + 1) * classes];
        for (c, v) in out.iter_mut().enumerate() {
            let p = (row[c] - log_sum).exp();
            *v = (p - if c == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, dlogits)
}

/// Backward pass over cached forward state. Returns the batch loss and the
/// gradients of every parameter class.
///
/// `quantized` selects which effective weights the straight-through rule
/// differentiates against (dequantized codes vs raw weights); `noise` must
/// be the exact spec passed to the forward pass.
pub fn backward(
    model: &QuantModel,
    overlay: Option<&OpPointParams>,
    pass: &ForwardPass,
    labels: &[u8],
    quantized: bool,
    noise: Option<(&[f64], &[Tensor])>,
) -> Result<(f64, Gradients)> {
    let dims = model.layer_dims()?;
    let l = model.layer_count();
    let batch = labels.len();
    let (loss, dlogits) = softmax_cross_entropy(&pass.logits, labels);

    let mut grads = Gradients {
        weights: model
            .params
            .iter()
            .map(|p| Tensor::zeros(p.weights.shape()))
            .collect(),
        bias: model.params.iter().map(|p| vec![0.0; p.bias.len()]).collect(),
        gamma: model
            .params
            .iter()
            .map(|p| vec![0.0; p.bn.as_ref().map_or(0, |b| b.gamma.len())])
            .collect(),
        beta: model
            .params
            .iter()
            .map(|p| vec![0.0; p.bn.as_ref().map_or(0, |b| b.beta.len())])
            .collect(),
        sigma_rel: vec![0.0; l],
    };

    let mut g_out = dlogits.into_data();
    for k in (0..l).rev() {
        let spec = &model.specs()[k];
        let dim = &dims[k];
        let cache = &pass.caches[k];
        let (weights, _bias, bn) = model.effective(overlay, k);
        let (oc, oh, ow) = dim.output;
        let out_len = dim.output_len();
        let hw = oh * ow;

        // Un-pool.
        let mut g = if spec.max_pool {
            let mut g_post = vec![0.0; batch * out_len];
            let argmax = cache.pool_argmax.as_ref().expect("pooled cache");
            for (j, &src) in argmax.iter().enumerate() {
                g_post[src as usize] += g_out[j];
            }
            g_post
        } else {
            g_out
        };

        // Activation.
        if spec.activation == Activation::Relu {
            for (gv, &y) in g.iter_mut().zip(cache.post_act.data()) {
                if y <= 0.0 {
                    *gv = 0.0;
                }
            }
        }

        // BatchNorm (running statistics are constants).
        if let Some(bn) = bn {
            let norm = cache.bn_norm.as_ref().expect("bn cache");
            let dgamma = &mut grads.gamma[k];
            let dbeta = &mut grads.beta[k];
            for n in 0..batch {
                for c in 0..oc {
                    let start = n * out_len + c * hw;
                    for i in start..start + hw {
                        dgamma[c] += g[i] * norm.data()[i];
                        dbeta[c] += g[i];
                    }
                }
            }
            for n in 0..batch {
                for c in 0..oc {
                    let istd = 1.0 / (bn.running_var[c] + BN_EPS).sqrt();
                    let factor = bn.gamma[c] * istd;
                    let start = n * out_len + c * hw;
                    for gv in &mut g[start..start + hw] {
                        *gv *= factor;
                    }
                }
            }
        }

        // Noise scale gradient (reparameterized sample: d(sample)/d(sigma)
        // = output_std * eps).
        if let Some((sigma_rel, eps)) = noise {
            let _ = sigma_rel;
            let amp = model.calib()?[k].output_std;
            let mut acc = 0.0;
            for (gv, e) in g.iter().zip(eps[k].data()) {
                acc += gv * e;
            }
            grads.sigma_rel[k] = amp * acc;
        }

        // Bias gradient.
        {
            let dbias = &mut grads.bias[k];
            for n in 0..batch {
                for c in 0..oc {
                    let start = n * out_len + c * hw;
                    for &gv in &g[start..start + hw] {
                        dbias[c] += gv;
                    }
                }
            }
        }

        // Effective weights for the straight-through multiply.
        let w_hat: Vec<f64> = if quantized {
            let qp = model.calib()?[k].weight;
            weight_codes(weights, qp)
                .iter()
                .map(|&q| qp.dequantize(q))
                .collect()
        } else {
            weights.data().to_vec()
        };

        // Multiply backward: weight gradients and input gradients.
        let in_len = dim.input_len();
        let mut g_in = vec![0.0; batch * in_len];
        match spec.kind {
            LayerKind::Dense { input: fin, output: fout } => {
                let dw = grads.weights[k].data_mut();
                for n in 0..batch {
                    let x = &cache.input_hat.data()[n * fin..(n + 1) * fin];
                    let gn = &g[n * fout..(n + 1) * fout];
                    let gi = &mut g_in[n * fin..(n + 1) * fin];
                    for (o, &gv) in gn.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let row = o * fin;
                        for i in 0..fin {
                            dw[row + i] += gv * x[i];
                            gi[i] += gv * w_hat[row + i];
                        }
                    }
                }
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let (_, h, wd) = dim.input;
                let dw = grads.weights[k].data_mut();
                for n in 0..batch {
                    let x = &cache.input_hat.data()[n * in_len..(n + 1) * in_len];
                    let gn = &g[n * out_len..(n + 1) * out_len];
                    let gi = &mut g_in[n * in_len..(n + 1) * in_len];
                    for c_out in 0..out_ch {
                        let w_base = c_out * in_ch * kernel * kernel;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gn[c_out * hw + oy * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c_in in 0..in_ch {
                                    for ky in 0..kernel {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kernel {
                                            let ix =
                                                (ox * stride + kx) as isize - padding as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi =
                                                c_in * h * wd + iy as usize * wd + ix as usize;
                                            let wi = w_base + c_in * kernel * kernel + ky * kernel + kx;
                                            dw[wi] += gv * x[xi];
                                            gi[xi] += gv * w_hat[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        g_out = g_in;
    }

    Ok((loss, grads))
}

struct Velocity {
    weights: Vec<Tensor>,
    bias: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
}

impl Velocity {
    fn zeros(model: &QuantModel) -> Self {
        Velocity {
            weights: model
                .params
                .iter()
                .map(|p| Tensor::zeros(p.weights.shape()))
                .collect(),
            bias: model.params.iter().map(|p| vec![0.0; p.bias.len()]).collect(),
            gamma: model
                .params
                .iter()
                .map(|p| vec![0.0; p.bn.as_ref().map_or(0, |b| b.gamma.len())])
                .collect(),
            beta: model
                .params
                .iter()
                .map(|p| vec![0.0; p.bn.as_ref().map_or(0, |b| b.beta.len())])
                .collect(),
        }
    }
}

fn sgd_vec(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64) {
    for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *vv = momentum * *vv + gv;
        *pv -= lr * *vv;
    }
}

/// Where a training run stores its updated parameters.
pub(crate) enum TrainTarget<'a> {
    /// Update the shared model in place.
    Shared(&'a mut QuantModel),
    /// Update a per-operating-point overlay; the shared model is read-only.
    Overlay {
        model: &'a QuantModel,
        params: &'a mut OpPointParams,
    },
}

fn apply_update(
    target: &mut TrainTarget<'_>,
    trainable: Trainable,
    grads: &Gradients,
    vel: &mut Velocity,
    lr: f64,
    momentum: f64,
) {
    let train_weights = trainable == Trainable::All;
    let train_bias = matches!(
        trainable,
        Trainable::All | Trainable::BnOnly | Trainable::BiasOnly
    );
    let train_bn = matches!(trainable, Trainable::All | Trainable::BnOnly);
    let layers = grads.bias.len();
    for k in 0..layers {
        match target {
            TrainTarget::Shared(model) => {
                if train_weights {
                    sgd_vec(
                        model.params[k].weights.data_mut(),
                        grads.weights[k].data(),
                        vel.weights[k].data_mut(),
                        lr,
                        momentum,
                    );
                }
                if train_bias {
                    sgd_vec(
                        &mut model.params[k].bias,
                        &grads.bias[k],
                        &mut vel.bias[k],
                        lr,
                        momentum,
                    );
                }
                if train_bn {
                    if let Some(bn) = model.params[k].bn.as_mut() {
                        sgd_vec(&mut bn.gamma, &grads.gamma[k], &mut vel.gamma[k], lr, momentum);
                        sgd_vec(&mut bn.beta, &grads.beta[k], &mut vel.beta[k], lr, momentum);
                    }
                }
            }
            TrainTarget::Overlay { params, .. } => {
                if train_weights {
                    let weights = params
                        .weights
                        .as_mut()
                        .expect("full fine-tuning requires private weights");
                    sgd_vec(
                        weights[k].data_mut(),
                        grads.weights[k].data(),
                        vel.weights[k].data_mut(),
                        lr,
                        momentum,
                    );
                }
                if train_bias {
                    sgd_vec(
                        &mut params.bias[k],
                        &grads.bias[k],
                        &mut vel.bias[k],
                        lr,
                        momentum,
                    );
                }
                if train_bn {
                    if let Some(bn) = params.bn[k].as_mut() {
                        sgd_vec(&mut bn.gamma, &grads.gamma[k], &mut vel.gamma[k], lr, momentum);
                        sgd_vec(&mut bn.beta, &grads.beta[k], &mut vel.beta[k], lr, momentum);
                    }
                }
            }
        }
    }
}

/// EMA update of running statistics from the batch's pre-activation moments.
fn update_bn_stats(target: &mut TrainTarget<'_>, pass: &ForwardPass, dims_out: &[(usize, usize)]) {
    let layers = pass.caches.len();
    for k in 0..layers {
        let (channels, hw) = dims_out[k];
        let bn = match target {
            TrainTarget::Shared(model) => model.params[k].bn.as_mut(),
            TrainTarget::Overlay { params, .. } => params.bn[k].as_mut(),
        };
        let Some(bn) = bn else { continue };
        let pre = pass.caches[k].pre_act.data();
        let batch = pre.len() / (channels * hw);
        for c in 0..channels {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for n in 0..batch {
                let start = n * channels * hw + c * hw;
                for &y in &pre[start..start + hw] {
                    sum += y;
                    sum_sq += y * y;
                }
            }
            let count = (batch * hw) as f64;
            let mean = sum / count;
            let var = (sum_sq / count - mean * mean).max(0.0);
            bn.running_mean[c] =
                (1.0 - BN_STATS_MOMENTUM) * bn.running_mean[c] + BN_STATS_MOMENTUM * mean;
            bn.running_var[c] =
                (1.0 - BN_STATS_MOMENTUM) * bn.running_var[c] + BN_STATS_MOMENTUM * var;
        }
    }
}

/// Shared SGD loop for baseline training and per-operating-point
/// fine-tuning. Returns the mean loss over the final epoch.
pub(crate) fn run_training(
    mut target: TrainTarget<'_>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    trainable: Trainable,
    arith: Option<(&AmLibrary, &MultPlan)>,
    noise: Option<(&[f64], u64)>,
) -> Result<f64> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if trainable == Trainable::None {
        return Ok(0.0);
    }
    {
        let model = match &target {
            TrainTarget::Shared(m) => &**m,
            TrainTarget::Overlay { model, .. } => model,
        };
        if let Some((lib, plan)) = arith {
            plan.validate(model.layer_count(), lib)?;
        }
        if let (TrainTarget::Overlay { params, .. }, Trainable::All) = (&target, trainable) {
            if params.weights.is_none() {
                return Err(Error::InvalidArgument(
                    "full fine-tuning requires a private weight copy".into(),
                ));
            }
        }
    }

    let (mut vel, dims_out, layers) = {
        let model = match &target {
            TrainTarget::Shared(m) => &**m,
            TrainTarget::Overlay { model, .. } => model,
        };
        let dims = model.layer_dims()?;
        (
            Velocity::zeros(model),
            dims.iter()
                .map(|d| (d.output.0, d.output.1 * d.output.2))
                .collect::<Vec<_>>(),
            model.layer_count(),
        )
    };

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = noise.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut last_epoch_loss = 0.0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (model, overlay): (&QuantModel, Option<&OpPointParams>) = match &target {
                TrainTarget::Shared(m) => (&**m, None),
                TrainTarget::Overlay { model, params } => (model, Some(&**params)),
            };
            let input = dataset.batch_tensor(chunk);
            let labels = dataset.batch_labels(chunk);
            let eps: Option<Vec<Tensor>> = noise_rng
                .as_mut()
                .map(|nr| sample_noise_eps(model, chunk.len(), nr));
            let noise_arg = match (&noise, &eps) {
                (Some((sigma, _)), Some(eps)) => Some((*sigma, eps.as_slice())),
                _ => None,
            };
            let arith_enum = match arith {
                None => Arithmetic::Real,
                Some((lib, plan)) => Arithmetic::Approx {
                    library: lib,
                    plan,
                },
            };
            let pass = forward(model, &input, arith_enum, overlay, noise_arg)?;
            let (loss, grads) =
                backward(model, overlay, &pass, &labels, arith.is_some(), noise_arg)?;
            epoch_loss += loss;
            batches += 1;
            apply_update(&mut target, trainable, &grads, &mut vel, lr, cfg.momentum);
            if matches!(trainable, Trainable::All | Trainable::BnOnly) {
                update_bn_stats(&mut target, &pass, &dims_out);
            }
        }
        last_epoch_loss = epoch_loss / batches.max(1) as f64;
        let _ = layers;
    }
    Ok(last_epoch_loss)
}

/// SGD-with-momentum training of the shared model. `arith = None` trains in
/// real arithmetic; `Some((library, plan))` trains through the quantized
/// approximate path with straight-through gradients. Optional noise injects
/// fixed relative-scale Gaussian perturbations per layer.
pub fn train(
    model: &mut QuantModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    trainable: Trainable,
    arith: Option<(&AmLibrary, &MultPlan)>,
    noise: Option<(&[f64], u64)>,
) -> Result<f64> {
    run_training(TrainTarget::Shared(model), dataset, cfg, trainable, arith, noise)
}

/// Top-1 accuracy over a dataset; argmax ties resolve to the lowest class
/// index.
pub fn evaluate(
    model: &QuantModel,
    dataset: &Dataset,
    arith: Arithmetic<'_>,
    overlay: Option<&OpPointParams>,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = model.num_classes();
    let mut correct = 0usize;
    for chunk in dataset.batches(64) {
        let input = dataset.batch_tensor(&chunk);
        let pass = forward(model, &input, arith, overlay, None)?;
        for (row, &idx) in chunk.iter().enumerate() {
            let logits = &pass.logits.data()[row * classes..(row + 1) * classes];
            let mut best = 0usize;
            for c in 1..classes {
                if logits[c] > logits[best] {
                    best = c;
                }
            }
            if best == dataset.label(idx) as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Parameter accounting mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamCountMode {
    /// Weights plus one set of biases and BatchNorm affine parameters.
    SharedOnly,
    /// Shared weights plus `o` specialized parameter sets of the given
    /// fine-tuning flavor.
    PerOpPoint(FinetuneMode),
}

/// Count trainable parameters under a deployment scheme with `o` operating
/// points. Running statistics are buffers, not parameters.
pub fn count_params(model: &QuantModel, mode: ParamCountMode, o: usize) -> usize {
    assert!(o >= 1, "at least one operating point");
    let weights: usize = model.params.iter().map(|p| p.weights.len()).sum();
    let bias: usize = model.params.iter().map(|p| p.bias.len()).sum();
    let bn: usize = model
        .params
        .iter()
        .map(|p| p.bn.as_ref().map_or(0, |b| b.gamma.len() + b.beta.len()))
        .sum();
    match mode {
        ParamCountMode::SharedOnly => weights + bias + bn,
        ParamCountMode::PerOpPoint(FinetuneMode::Bias) => weights + bn + o * bias,
        ParamCountMode::PerOpPoint(FinetuneMode::Bn) => weights + o * (bias + bn),
        ParamCountMode::PerOpPoint(FinetuneMode::Full) => o * (weights + bias + bn),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnn::data::Dataset;
    use crate::qnn::{calibrate, mlp, toy_cnn, QuantModel};
    use rand::Rng;

    /// Linearly separable 2-D two-class blobs.
    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let class = rng.random_range(0..2u8);
            let cx = if class == 0 { -1.0 } else { 1.0 };
            images.push(cx + 0.3 * (rng.random::<f64>() - 0.5));
            images.push(cx + 0.3 * (rng.random::<f64>() - 0.5));
            labels.push(class);
        }
        Dataset::new((2, 1, 1), images, labels).unwrap()
    }

    #[test]
    fn mlp_reaches_full_train_accuracy_on_separable_data() {
        let data = blobs(128, 3);
        let (specs, input_shape) = mlp(&[2, 8, 2]);
        let mut model = QuantModel::new(input_shape, specs, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr: vec![0.1],
            momentum: 0.9,
            seed: 7,
        };
        train(&mut model, &data, &cfg, Trainable::All, None, None).unwrap();
        let acc = evaluate(&model, &data, Arithmetic::Real, None).unwrap();
        assert_eq!(acc, 1.0, "separable blobs should be fit exactly");
    }

    #[test]
    fn trainable_none_leaves_model_unchanged() {
        let data = blobs(32, 5);
        let (specs, input_shape) = mlp(&[2, 4, 2]);
        let mut model = QuantModel::new(input_shape, specs, 2).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: vec![0.1],
            momentum: 0.9,
            seed: 1,
        };
        train(&mut model, &data, &cfg, Trainable::None, None, None).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn bn_only_training_freezes_weights() {
        let data = crate::qnn::data::synthetic_digits(64, 16, 8).unwrap();
        let (specs, input_shape) = toy_cnn(16, 10);
        let mut model = QuantModel::new(input_shape, specs, 4).unwrap();
        let weights_before: Vec<Tensor> =
            model.params.iter().map(|p| p.weights.clone()).collect();
        let gamma_before: Vec<f64> = model.params[0].bn.as_ref().unwrap().gamma.clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            lr: vec![0.05],
            momentum: 0.9,
            seed: 3,
        };
        train(&mut model, &data, &cfg, Trainable::BnOnly, None, None).unwrap();
        for (k, p) in model.params.iter().enumerate() {
            assert_eq!(p.weights, weights_before[k], "weights moved in layer {k}");
        }
        assert_ne!(model.params[0].bn.as_ref().unwrap().gamma, gamma_before);
    }

    #[test]
    fn bias_only_training_freezes_bn() {
        let data = crate::qnn::data::synthetic_digits(64, 16, 8).unwrap();
        let (specs, input_shape) = toy_cnn(16, 10);
        let mut model = QuantModel::new(input_shape, specs, 4).unwrap();
        let bn_before = model.params[0].bn.clone();
        let bias_before = model.params[2].bias.clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            lr: vec![0.05],
            momentum: 0.9,
            seed: 3,
        };
        train(&mut model, &data, &cfg, Trainable::BiasOnly, None, None).unwrap();
        assert_eq!(model.params[0].bn, bn_before);
        assert_ne!(model.params[2].bias, bias_before);
    }

    #[test]
    fn untrained_model_scores_chance_level() {
        let data = crate::qnn::data::synthetic_digits(1500, 16, 17).unwrap();
        let (specs, input_shape) = toy_cnn(16, 10);
        let model = QuantModel::new(input_shape, specs, 99).unwrap();
        let acc = evaluate(&model, &data, Arithmetic::Real, None).unwrap();
        assert!(
            (acc - 0.1).abs() < 0.05,
            "untrained accuracy {acc} should be near chance"
        );
    }

    #[test]
    fn evaluate_rejects_empty_dataset() {
        let (specs, input_shape) = mlp(&[2, 2]);
        let model = QuantModel::new(input_shape, specs, 0).unwrap();
        let empty = Dataset::new((2, 1, 1), vec![], vec![]).unwrap();
        assert!(matches!(
            evaluate(&model, &empty, Arithmetic::Real, None),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn single_correct_sample_scores_one() {
        let (specs, input_shape) = mlp(&[2, 2]);
        let mut model = QuantModel::new(input_shape, specs, 0).unwrap();
        // Force logit 1 to win for a positive input.
        model.params[0].weights = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let data = Dataset::new((2, 1, 1), vec![1.0, 1.0], vec![1]).unwrap();
        assert_eq!(evaluate(&model, &data, Arithmetic::Real, None).unwrap(), 1.0);
    }

    #[test]
    fn trunc0_plan_is_bitwise_accurate() {
        let data = crate::qnn::data::synthetic_digits(64, 16, 2).unwrap();
        let (specs, input_shape) = toy_cnn(16, 10);
        let mut model = QuantModel::new(input_shape, specs, 5).unwrap();
        calibrate(&mut model, &data).unwrap();
        let lib = crate::am::AmLibrary::from_models(vec![
            crate::am::make_truncation_am(0).unwrap()
        ])
        .unwrap();
        let accurate = MultPlan::all_accurate(3);
        let trunc0 = MultPlan {
            am_indices: vec![1, 1, 1],
        };
        let a = evaluate(
            &model,
            &data,
            Arithmetic::Approx {
                library: &lib,
                plan: &accurate,
            },
            None,
        )
        .unwrap();
        let b = evaluate(
            &model,
            &data,
            Arithmetic::Approx {
                library: &lib,
                plan: &trunc0,
            },
            None,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn count_params_identities() {
        let (specs, input_shape) = toy_cnn(16, 10);
        let model = QuantModel::new(input_shape, specs, 0).unwrap();
        let shared = count_params(&model, ParamCountMode::SharedOnly, 1);
        // conv1: 72 w, conv2: 1152 w, dense: 2560 w; biases 8+16+10; BN 16+32.
        assert_eq!(shared, 72 + 1152 + 2560 + 34 + 48);
        assert_eq!(
            count_params(&model, ParamCountMode::PerOpPoint(FinetuneMode::Bn), 1),
            shared
        );
        assert_eq!(
            count_params(&model, ParamCountMode::PerOpPoint(FinetuneMode::Full), 3),
            3 * shared
        );
        let bn3 = count_params(&model, ParamCountMode::PerOpPoint(FinetuneMode::Bn), 3);
        assert_eq!(bn3, 72 + 1152 + 2560 + 3 * (34 + 48));
    }
}
