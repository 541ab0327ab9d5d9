//! A small, deterministic quantized neural-network engine.
//!
//! The engine runs a fixed chain of multiplying layers (dense or 3x3-style
//! conv), each optionally followed by BatchNorm (inference form), ReLU and
//! 2x2 max-pooling. Multiplications can be routed through behavioral
//! approximate-multiplier LUTs, per layer, and every layer output has an
//! additive-Gaussian-noise hook. A manual backward pass provides gradients
//! for weights, biases, BatchNorm affine parameters and the noise scales;
//! quantization and the LUT multiply are treated as exact real operations in
//! the backward direction.

pub mod data;
mod forward;
mod tensor;
mod train;

pub use forward::{approx_dot, forward, sample_noise_eps, Arithmetic, ForwardPass, LayerCache};
pub use tensor::{mean_std, Tensor};
pub use train::{
    backward, count_params, evaluate, softmax_cross_entropy, train, FinetuneMode, Gradients,
    ParamCountMode, TrainConfig, Trainable,
};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::am::AmLibrary;
use crate::error::{Error, Result};

/// Variance epsilon used by every BatchNorm evaluation.
pub const BN_EPS: f64 = 1e-5;

/// Asymmetric per-tensor quantization parameters for 8-bit codes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: u8,
}

impl QuantParams {
    /// Parameters covering `[lo, hi]`, widened so that 0.0 is exactly
    /// representable. A degenerate range falls back to scale 1/255.
    pub fn from_min_max(lo: f64, hi: f64) -> Self {
        let lo = lo.min(0.0);
        let hi = hi.max(0.0);
        let mut scale = (hi - lo) / 255.0;
        if !(scale > 0.0) {
            scale = 1.0 / 255.0;
        }
        let zp = (-lo / scale).round().clamp(0.0, 255.0) as u8;
        QuantParams {
            scale,
            zero_point: zp,
        }
    }

    /// `clamp(round(x / scale) + zero_point, 0, 255)`, rounding half away
    /// from zero.
    #[inline(always)]
    pub fn quantize(&self, x: f64) -> u8 {
        ((x / self.scale).round() + self.zero_point as f64).clamp(0.0, 255.0) as u8
    }

    #[inline(always)]
    pub fn dequantize(&self, q: u8) -> f64 {
        (q as f64 - self.zero_point as f64) * self.scale
    }
}

/// Post-multiply activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    None,
}

/// Shape of one multiplying layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

/// One multiplying layer together with its post-ops. BatchNorm, activation
/// and pooling carry no multiplications of their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub has_bn: bool,
    pub activation: Activation,
    /// 2x2 stride-2 max pooling after the activation.
    pub max_pool: bool,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Dense { input, output } => {
                if input == 0 || output == 0 {
                    return Err(Error::InvalidArgument("dense dims must be >= 1".into()));
                }
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => {
                if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::InvalidArgument("conv dims must be >= 1".into()));
                }
                if kernel % 2 == 0 {
                    return Err(Error::InvalidArgument("conv kernel must be odd".into()));
                }
            }
        }
        Ok(())
    }

    /// Number of output channels (dense: output units).
    pub fn out_channels(&self) -> usize {
        match self.kind {
            LayerKind::Dense { output, .. } => output,
            LayerKind::Conv2d { out_ch, .. } => out_ch,
        }
    }
}

/// Learnable BatchNorm state for one layer (inference form).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub bn: Option<BnParams>,
}

/// Calibration data of one layer: input/weight quantization parameters and
/// the standard deviation of the accurate pre-activation output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCalib {
    pub act: QuantParams,
    pub weight: QuantParams,
    pub output_std: f64,
}

/// Per-layer assignment of approximate-multiplier library indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultPlan {
    pub am_indices: Vec<usize>,
}

impl MultPlan {
    pub fn all_accurate(layers: usize) -> Self {
        MultPlan {
            am_indices: vec![0; layers],
        }
    }

    pub fn validate(&self, layers: usize, library: &AmLibrary) -> Result<()> {
        if self.am_indices.len() != layers {
            return Err(Error::ShapeMismatch(format!(
                "plan has {} entries for {} layers",
                self.am_indices.len(),
                layers
            )));
        }
        if let Some(&bad) = self.am_indices.iter().find(|&&i| i >= library.len()) {
            return Err(Error::InvalidArgument(format!(
                "plan references multiplier index {bad} outside the library"
            )));
        }
        Ok(())
    }
}

/// Parameter overlay specializing a shared model to one operating point:
/// private biases and BatchNorm state, plus a private weight copy for
/// full-retraining comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct OpPointParams {
    pub bias: Vec<Vec<f64>>,
    pub bn: Vec<Option<BnParams>>,
    pub weights: Option<Vec<Tensor>>,
}

impl OpPointParams {
    /// Copy of the shared model's bias/BN state (no private weights).
    pub fn from_model(model: &QuantModel) -> Self {
        OpPointParams {
            bias: model.params.iter().map(|p| p.bias.clone()).collect(),
            bn: model.params.iter().map(|p| p.bn.clone()).collect(),
            weights: None,
        }
    }
}

/// Spatial metadata of one layer's input and output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    /// Input as (channels, height, width); dense inputs are flattened and
    /// use (features, 1, 1).
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
    /// Output shape after pooling (equals `output` without pooling).
    pub pooled: (usize, usize, usize),
}

impl LayerDims {
    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }
    pub fn output_len(&self) -> usize {
        self.output.0 * self.output.1 * self.output.2
    }
    pub fn pooled_len(&self) -> usize {
        self.pooled.0 * self.pooled.1 * self.pooled.2
    }
}

/// The quantized model: layer specs, shared parameters and calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    input_shape: (usize, usize, usize),
    specs: Vec<LayerSpec>,
    pub params: Vec<LayerParams>,
    pub calib: Option<Vec<LayerCalib>>,
}

impl QuantModel {
    /// Build a model with seeded He-normal weight init, zero biases and
    /// identity BatchNorm.
    pub fn new(input_shape: (usize, usize, usize), specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        for spec in &specs {
            spec.validate()?;
        }
        if specs.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        let mut model = QuantModel {
            input_shape,
            specs,
            params: Vec::new(),
            calib: None,
        };
        let dims = model.layer_dims()?;
        for (spec, dim) in model.specs.iter().zip(&dims) {
            let (shape, fan_in): (Vec<usize>, usize) = match spec.kind {
                LayerKind::Dense { input, output } => (vec![output, input], input),
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => (vec![out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel),
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            let channels = dim.output.0;
            params.push(LayerParams {
                weights: Tensor::from_vec(&shape, data)?,
                bias: vec![0.0; channels],
                bn: spec.has_bn.then(|| BnParams::identity(channels)),
            });
        }
        model.params = params;
        Ok(model)
    }

    pub fn from_parts(
        input_shape: (usize, usize, usize),
        specs: Vec<LayerSpec>,
        params: Vec<LayerParams>,
        calib: Option<Vec<LayerCalib>>,
    ) -> Result<Self> {
        let model = QuantModel {
            input_shape,
            specs,
            params,
            calib,
        };
        model.layer_dims()?; // shape consistency check
        Ok(model)
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Number of multiplying layers.
    pub fn layer_count(&self) -> usize {
        self.specs.len()
    }

    pub fn calib(&self) -> Result<&[LayerCalib]> {
        self.calib.as_deref().ok_or(Error::NotCalibrated)
    }

    /// Input/output dimensions of every layer, checking shape consistency.
    pub fn layer_dims(&self) -> Result<Vec<LayerDims>> {
        let mut dims = Vec::with_capacity(self.specs.len());
        let mut cur = self.input_shape;
        for (i, spec) in self.specs.iter().enumerate() {
            let input;
            let output;
            match spec.kind {
                LayerKind::Dense { input: fin, output: fout } => {
                    let flat = cur.0 * cur.1 * cur.2;
                    if flat != fin {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: dense expects {fin} inputs, previous layer provides {flat}"
                        )));
                    }
                    input = (fin, 1, 1);
                    output = (fout, 1, 1);
                }
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                } => {
                    if cur.0 != in_ch {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: conv expects {in_ch} channels, previous layer provides {}",
                            cur.0
                        )));
                    }
                    let oh = (cur.1 + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1);
                    let ow = (cur.2 + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1);
                    let (oh, ow) = match (oh, ow) {
                        (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
                        _ => {
                            return Err(Error::ShapeMismatch(format!(
                                "layer {i}: kernel {kernel} larger than padded input {cur:?}"
                            )))
                        }
                    };
                    input = (in_ch, cur.1, cur.2);
                    output = (out_ch, oh, ow);
                }
            }
            let pooled = if spec.max_pool {
                (output.0, output.1 / 2, output.2 / 2)
            } else {
                output
            };
            if pooled.1 == 0 || pooled.2 == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: pooling collapses output {output:?}"
                )));
            }
            dims.push(LayerDims {
                input,
                output,
                pooled,
            });
            cur = pooled;
        }
        Ok(dims)
    }

    /// Number of logits the final layer emits.
    pub fn num_classes(&self) -> usize {
        self.specs
            .last()
            .map(|s| s.out_channels())
            .unwrap_or(0)
    }

    /// Effective parameters of layer `layer` under an optional overlay.
    pub(crate) fn effective<'a>(
        &'a self,
        overlay: Option<&'a OpPointParams>,
        layer: usize,
    ) -> (&'a Tensor, &'a [f64], Option<&'a BnParams>) {
        let base = &self.params[layer];
        match overlay {
            None => (&base.weights, &base.bias, base.bn.as_ref()),
            Some(op) => {
                let weights = op
                    .weights
                    .as_ref()
                    .map(|w| &w[layer])
                    .unwrap_or(&base.weights);
                (weights, &op.bias[layer], op.bn[layer].as_ref())
            }
        }
    }
}

/// Reference toy architecture: two conv/BN/ReLU/pool blocks and a dense
/// classifier head (three multiplying layers).
pub fn toy_cnn(input_hw: usize, classes: usize) -> (Vec<LayerSpec>, (usize, usize, usize)) {
    let conv = |in_ch, out_ch| LayerSpec {
        kind: LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        has_bn: true,
        activation: Activation::Relu,
        max_pool: true,
    };
    let flat = (input_hw / 4) * (input_hw / 4) * 16;
    let specs = vec![
        conv(1, 8),
        conv(8, 16),
        LayerSpec {
            kind: LayerKind::Dense {
                input: flat,
                output: classes,
            },
            has_bn: false,
            activation: Activation::None,
            max_pool: false,
        },
    ];
    (specs, (1, input_hw, input_hw))
}

/// Deeper five-layer variant used to exercise clustering on more layers.
pub fn toy_cnn_deep(input_hw: usize, classes: usize) -> (Vec<LayerSpec>, (usize, usize, usize)) {
    let conv = |in_ch, out_ch, pool| LayerSpec {
        kind: LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        has_bn: true,
        activation: Activation::Relu,
        max_pool: pool,
    };
    let flat = (input_hw / 4) * (input_hw / 4) * 16;
    let specs = vec![
        conv(1, 8, true),
        conv(8, 8, false),
        conv(8, 16, true),
        conv(16, 16, false),
        LayerSpec {
            kind: LayerKind::Dense {
                input: flat,
                output: classes,
            },
            has_bn: false,
            activation: Activation::None,
            max_pool: false,
        },
    ];
    (specs, (1, input_hw, input_hw))
}

/// Plain MLP: `dims[0] -> dims[1] -> ... -> dims.last()`, ReLU between
/// layers, no BatchNorm.
pub fn mlp(dims: &[usize]) -> (Vec<LayerSpec>, (usize, usize, usize)) {
    assert!(dims.len() >= 2);
    let mut specs = Vec::new();
    for w in dims.windows(2) {
        specs.push(LayerSpec {
            kind: LayerKind::Dense {
                input: w[0],
                output: w[1],
            },
            has_bn: false,
            activation: Activation::Relu,
            max_pool: false,
        });
    }
    specs.last_mut().unwrap().activation = Activation::None;
    (specs, (dims[0], 1, 1))
}

/// Set per-tensor quantization parameters from observed activation/weight
/// ranges and measure each layer's accurate pre-activation output standard
/// deviation. Mutates `model.calib` only.
pub fn calibrate(model: &mut QuantModel, calib: &data::Dataset) -> Result<()> {
    if calib.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dims = model.layer_dims()?;

    // Pass 1: real-arithmetic forward, observing layer-input ranges.
    let mut lo = vec![f64::INFINITY; model.layer_count()];
    let mut hi = vec![f64::NEG_INFINITY; model.layer_count()];
    for batch in calib.batches(64) {
        let input = calib.batch_tensor(&batch);
        let pass = forward::forward(model, &input, Arithmetic::Real, None, None)?;
        for (k, cache) in pass.caches.iter().enumerate() {
            for &x in cache.input_hat.data() {
                lo[k] = lo[k].min(x);
                hi[k] = hi[k].max(x);
            }
        }
    }
    let mut layer_calib = Vec::with_capacity(model.layer_count());
    for k in 0..model.layer_count() {
        let (wlo, whi) = model.params[k]
            .weights
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| {
                (lo.min(w), hi.max(w))
            });
        layer_calib.push(LayerCalib {
            act: QuantParams::from_min_max(lo[k], hi[k]),
            weight: QuantParams::from_min_max(wlo, whi),
            output_std: 0.0,
        });
    }
    model.calib = Some(layer_calib);

    // Pass 2: accurate quantized forward, measuring pre-activation spread.
    let accurate = AmLibrary::accurate_only();
    let plan = MultPlan::all_accurate(model.layer_count());
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); model.layer_count()];
    for batch in calib.batches(64) {
        let input = calib.batch_tensor(&batch);
        let pass = forward::forward(
            model,
            &input,
            Arithmetic::Approx {
                library: &accurate,
                plan: &plan,
            },
            None,
            None,
        )?;
        for (k, cache) in pass.caches.iter().enumerate() {
            let (s, s2, n) = &mut sums[k];
            for &y in cache.pre_act.data() {
                *s += y;
                *s2 += y * y;
                *n += 1;
            }
        }
    }
    let calib_mut = model.calib.as_mut().unwrap();
    for (k, (s, s2, n)) in sums.iter().enumerate() {
        let n = *n as f64;
        let mean = s / n;
        let var = (s2 / n - mean * mean).max(0.0);
        // Tiny floor keeps dead layers from producing zero normalizers.
        calib_mut[k].output_std = var.sqrt().max(1e-9);
        let _ = dims[k];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_examples() {
        let p = QuantParams {
            scale: 0.5,
            zero_point: 0,
        };
        assert_eq!(p.quantize(1.0), 2);
        assert_eq!(p.quantize(-1.0), 0);
        let p = QuantParams {
            scale: 0.013,
            zero_point: 128,
        };
        assert_eq!(p.quantize(0.0), 128);
    }

    #[test]
    fn quantize_roundtrip_is_identity_on_codes() {
        let p = QuantParams::from_min_max(-1.3, 2.7);
        for q in 0..=255u8 {
            assert_eq!(p.quantize(p.dequantize(q)), q);
        }
    }

    #[test]
    fn min_max_rule_on_symmetric_weights() {
        let p = QuantParams::from_min_max(-1.0, 1.0);
        assert!((p.scale - 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.zero_point, 128);
        assert_eq!(p.dequantize(p.zero_point), 0.0);
    }

    #[test]
    fn degenerate_range_uses_scale_floor() {
        let p = QuantParams::from_min_max(0.0, 0.0);
        assert_eq!(p.scale, 1.0 / 255.0);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn toy_cnn_dims() {
        let (specs, input) = toy_cnn(16, 10);
        let model = QuantModel::new(input, specs, 1).unwrap();
        let dims = model.layer_dims().unwrap();
        assert_eq!(dims[0].output, (8, 16, 16));
        assert_eq!(dims[0].pooled, (8, 8, 8));
        assert_eq!(dims[1].pooled, (16, 4, 4));
        assert_eq!(dims[2].output, (10, 1, 1));
        assert_eq!(model.num_classes(), 10);
    }

    #[test]
    fn mismatched_dense_input_rejected() {
        let (mut specs, input) = toy_cnn(16, 10);
        if let LayerKind::Dense { input: fin, .. } = &mut specs[2].kind {
            *fin += 1;
        }
        assert!(QuantModel::new(input, specs, 1).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let spec = LayerSpec {
            kind: LayerKind::Conv2d {
                in_ch: 1,
                out_ch: 1,
                kernel: 2,
                stride: 1,
                padding: 0,
            },
            has_bn: false,
            activation: Activation::None,
            max_pool: false,
        };
        assert!(spec.validate().is_err());
    }
}
