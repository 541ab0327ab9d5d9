//! Forward evaluation with pluggable multiplier arithmetic.
//!
//! Every multiplying layer runs in one of two modes: plain f64 arithmetic,
//! or the quantized path where operand codes are multiplied through a
//! behavioral LUT. In the quantized path only the raw code-product sum goes
//! through the approximate multiplier; the zero-point correction terms are
//! exact integer sums.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::am::{AmLibrary, AmModel};
use crate::error::{Error, Result};
use crate::qnn::{Activation, LayerKind, OpPointParams, QuantModel, QuantParams, Tensor, BN_EPS};

/// Which multiplier implementation a forward pass uses.
#[derive(Clone, Copy)]
pub enum Arithmetic<'a> {
    /// Exact f64 arithmetic, no quantization.
    Real,
    /// 8-bit quantized path with per-layer approximate multipliers.
    Approx {
        library: &'a AmLibrary,
        plan: &'a crate::qnn::MultPlan,
    },
}

/// Per-layer intermediate state kept for the backward pass and for
/// measurement.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// The input the multiply actually saw: raw input in real mode,
    /// dequantized codes in the quantized path.
    pub input_hat: Tensor,
    /// Quantized input codes (quantized path only), laid out like
    /// `input_hat`.
    pub input_codes: Option<Vec<u8>>,
    /// Pre-activation output: multiply + bias + injected noise, before
    /// BatchNorm.
    pub pre_act: Tensor,
    /// BatchNorm-normalized values `(y - mean) * inv_std` (layers with BN).
    pub bn_norm: Option<Tensor>,
    /// Output after activation, before pooling.
    pub post_act: Tensor,
    /// For pooled layers: flat index into `post_act` of each pooled maximum.
    pub pool_argmax: Option<Vec<u32>>,
}

/// Result of a forward pass over one batch.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[batch, classes]`
    pub logits: Tensor,
    pub caches: Vec<LayerCache>,
}

/// Zero-point-corrected dot product of quantized codes through a multiplier
/// LUT:
///
/// `S_am - zp_w * sum(qa) - zp_a * sum(qw) + N * zp_a * zp_w`
///
/// where `S_am` sums `lut(qa_i, qw_i)`. With the accurate multiplier this
/// equals the exact integer dot product of `(qa - zp_a)` and `(qw - zp_w)`.
pub fn approx_dot(qa: &[u8], qw: &[u8], zp_a: u8, zp_w: u8, am: &AmModel) -> Result<i64> {
    if qa.len() != qw.len() {
        return Err(Error::ShapeMismatch(format!(
            "dot operands of length {} and {}",
            qa.len(),
            qw.len()
        )));
    }
    let mut s_am = 0i64;
    let mut sum_qa = 0i64;
    let mut sum_qw = 0i64;
    for (&a, &w) in qa.iter().zip(qw) {
        s_am += am.mul(a, w) as i64;
        sum_qa += a as i64;
        sum_qw += w as i64;
    }
    let n = qa.len() as i64;
    let zpa = zp_a as i64;
    let zpw = zp_w as i64;
    Ok(s_am - zpw * sum_qa - zpa * sum_qw + n * zpa * zpw)
}

/// Draw per-layer standard-normal noise tensors shaped like each layer's
/// pre-activation output for a batch of `batch` samples. Sampling order is
/// fixed (layer by layer, element by element), so a seeded generator yields
/// reproducible perturbations.
pub fn sample_noise_eps(model: &QuantModel, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let dims = model.layer_dims().expect("validated model");
    dims.iter()
        .map(|d| {
            let (c, h, w) = d.output;
            let mut t = Tensor::zeros(&[batch, c, h, w]);
            for v in t.data_mut() {
                *v = StandardNormal.sample(rng);
            }
            t
        })
        .collect()
}

/// Quantize a weight tensor to codes.
pub(crate) fn weight_codes(weights: &Tensor, qp: QuantParams) -> Vec<u8> {
    weights.data().iter().map(|&w| qp.quantize(w)).collect()
}

/// Real-arithmetic conv2d on one sample: `x` is `[ci, h, w]` flattened,
/// `w` is `[co, ci, k, k]`, output `[co, oh, ow]`.
#[allow(clippy::too_many_arguments)]
fn conv_sample_real(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    for c_out in 0..co {
        let w_base = c_out * ci * k * k;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c_in in 0..ci {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += x[c_in * h * wd + iy as usize * wd + ix as usize]
                                * w[w_base + c_in * k * k + ky * k + kx];
                        }
                    }
                }
                out[c_out * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
}

/// Quantized conv2d on one sample. The input codes are copied into a buffer
/// padded with the activation zero point, which dequantizes to exactly 0.0,
/// so padding behaves identically to the real path.
#[allow(clippy::too_many_arguments)]
fn conv_sample_codes(
    qx: &[u8],
    qw: &[u8],
    out: &mut [f64],
    padded: &mut [u8],
    window: &mut [u8],
    am: &AmModel,
    acc_scale: f64,
    zp_a: u8,
    zp_w: u8,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Result<()> {
    let ph = h + 2 * padding;
    let pw = wd + 2 * padding;
    padded.fill(zp_a);
    for c_in in 0..ci {
        for y in 0..h {
            let src = c_in * h * wd + y * wd;
            let dst = c_in * ph * pw + (y + padding) * pw + padding;
            padded[dst..dst + wd].copy_from_slice(&qx[src..src + wd]);
        }
    }
    let win_len = ci * k * k;
    for c_out in 0..co {
        let w_row = &qw[c_out * win_len..(c_out + 1) * win_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut idx = 0;
                for c_in in 0..ci {
                    for ky in 0..k {
                        let src = c_in * ph * pw + (oy * stride + ky) * pw + ox * stride;
                        window[idx..idx + k].copy_from_slice(&padded[src..src + k]);
                        idx += k;
                    }
                }
                let acc = approx_dot(&window[..win_len], w_row, zp_a, zp_w, am)?;
                out[c_out * oh * ow + oy * ow + ox] = acc as f64 * acc_scale;
            }
        }
    }
    Ok(())
}

/// Full forward pass.
///
/// * `overlay` substitutes per-operating-point parameters for the shared
///   ones.
/// * `noise` injects `sigma_rel[k] * output_std[k] * eps[k]` into layer
///   `k`'s pre-activation; `eps` tensors come from [`sample_noise_eps`].
pub fn forward(
    model: &QuantModel,
    input: &Tensor,
    arith: Arithmetic<'_>,
    overlay: Option<&OpPointParams>,
    noise: Option<(&[f64], &[Tensor])>,
) -> Result<ForwardPass> {
    let dims = model.layer_dims()?;
    let l = model.layer_count();
    let batch = input.shape()[0];
    if input.len() != batch * dims[0].input_len() {
        return Err(Error::ShapeMismatch(format!(
            "input of {} elements does not match batch {} x {:?}",
            input.len(),
            batch,
            dims[0].input
        )));
    }
    if let Arithmetic::Approx { library, plan } = arith {
        plan.validate(l, library)?;
        model.calib()?;
    }
    if let Some((sigma_rel, eps)) = noise {
        model.calib()?;
        if sigma_rel.len() != l || eps.len() != l {
            return Err(Error::ShapeMismatch(format!(
                "noise spec covers {} layers, model has {l}",
                sigma_rel.len().min(eps.len())
            )));
        }
        if let Some(bad) = sigma_rel.iter().find(|s| !(**s >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "negative noise scale {bad}"
            )));
        }
    }

    let mut caches = Vec::with_capacity(l);
    let mut current = input.clone();

    for (k, spec) in model.specs().iter().enumerate() {
        let dim = &dims[k];
        let (weights, bias, bn) = model.effective(overlay, k);

        // Resolve the multiply operands for this layer.
        let (input_hat, input_codes, mult_ctx) = match arith {
            Arithmetic::Real => (current.clone(), None, None),
            Arithmetic::Approx { library, plan } => {
                let calib = model.calib()?[k];
                let codes: Vec<u8> =
                    current.data().iter().map(|&x| calib.act.quantize(x)).collect();
                let hat_data: Vec<f64> =
                    codes.iter().map(|&q| calib.act.dequantize(q)).collect();
                let hat = Tensor::from_vec(current.shape(), hat_data)?;
                let am = library.get(plan.am_indices[k]);
                (hat, Some(codes), Some((am, calib)))
            }
        };

        // Multiply.
        let (oc, oh, ow) = dim.output;
        let out_len = oc * oh * ow;
        let mut pre = Tensor::zeros(&[batch, oc, oh, ow]);
        match spec.kind {
            LayerKind::Dense { input: fin, output: fout } => {
                match &mult_ctx {
                    None => {
                        let w = weights.data();
                        for n in 0..batch {
                            let x = &input_hat.data()[n * fin..(n + 1) * fin];
                            let out = &mut pre.data_mut()[n * fout..(n + 1) * fout];
                            for (o, out_v) in out.iter_mut().enumerate() {
                                let row = &w[o * fin..(o + 1) * fin];
                                *out_v = row.iter().zip(x).map(|(a, b)| a * b).sum();
                            }
                        }
                    }
                    Some((am, calib)) => {
                        let qw = weight_codes(weights, calib.weight);
                        let qx = input_codes.as_ref().unwrap();
                        let acc_scale = calib.act.scale * calib.weight.scale;
                        for n in 0..batch {
                            let x_codes = &qx[n * fin..(n + 1) * fin];
                            let out = &mut pre.data_mut()[n * fout..(n + 1) * fout];
                            for (o, out_v) in out.iter_mut().enumerate() {
                                let acc = approx_dot(
                                    x_codes,
                                    &qw[o * fin..(o + 1) * fin],
                                    calib.act.zero_point,
                                    calib.weight.zero_point,
                                    am,
                                )?;
                                *out_v = acc as f64 * acc_scale;
                            }
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
                let in_len = dim.input_len();
                match &mult_ctx {
                    None => {
                        for n in 0..batch {
                            conv_sample_real(
                                &input_hat.data()[n * in_len..(n + 1) * in_len],
                                weights.data(),
                                &mut pre.data_mut()[n * out_len..(n + 1) * out_len],
                                in_ch,
                                h,
                                wd,
                                out_ch,
                                kernel,
                                stride,
                                padding,
                                oh,
                                ow,
                            );
                        }
                    }
                    Some((am, calib)) => {
                        let qw = weight_codes(weights, calib.weight);
                        let qx = input_codes.as_ref().unwrap();
                        let acc_scale = calib.act.scale * calib.weight.scale;
                        let mut padded =
                            vec![0u8; in_ch * (h + 2 * padding) * (wd + 2 * padding)];
                        let mut window = vec![0u8; in_ch * kernel * kernel];
                        for n in 0..batch {
                            conv_sample_codes(
                                &qx[n * in_len..(n + 1) * in_len],
                                &qw,
                                &mut pre.data_mut()[n * out_len..(n + 1) * out_len],
                                &mut padded,
                                &mut window,
                                am,
                                acc_scale,
                                calib.act.zero_point,
                                calib.weight.zero_point,
                                in_ch,
                                h,
                                wd,
                                out_ch,
                                kernel,
                                stride,
                                padding,
                                oh,
                                ow,
                            )?;
                        }
                    }
                }
            }
        }

        // Bias.
        let hw = oh * ow;
        for n in 0..batch {
            for c in 0..oc {
                let start = n * out_len + c * hw;
                for v in &mut pre.data_mut()[start..start + hw] {
                    *v += bias[c];
                }
            }
        }

        // Noise hook.
        if let Some((sigma_rel, eps)) = noise {
            if sigma_rel[k] > 0.0 {
                let amp = sigma_rel[k] * model.calib()?[k].output_std;
                for (v, e) in pre.data_mut().iter_mut().zip(eps[k].data()) {
                    *v += amp * e;
                }
            }
        }

        // BatchNorm (inference form; running statistics are constants).
        let mut bn_norm = None;
        let mut post = pre.clone();
        if let Some(bn) = bn {
            let mut norm = Tensor::zeros(&[batch, oc, oh, ow]);
            for n in 0..batch {
                for c in 0..oc {
                    let istd = 1.0 / (bn.running_var[c] + BN_EPS).sqrt();
                    let start = n * out_len + c * hw;
                    for i in start..start + hw {
                        let z = (pre.data()[i] - bn.running_mean[c]) * istd;
                        norm.data_mut()[i] = z;
                        post.data_mut()[i] = bn.gamma[c] * z + bn.beta[c];
                    }
                }
            }
            bn_norm = Some(norm);
        }

        // Activation.
        if spec.activation == Activation::Relu {
            for v in post.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }

        // Pooling.
        let (pc, ph, pw) = dim.pooled;
        let (output, pool_argmax) = if spec.max_pool {
            let mut pooled = Tensor::zeros(&[batch, pc, ph, pw]);
            let mut argmax = vec![0u32; batch * pc * ph * pw];
            for n in 0..batch {
                for c in 0..pc {
                    for py in 0..ph {
                        for px in 0..pw {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = n * out_len
                                        + c * hw
                                        + (py * 2 + dy) * ow
                                        + (px * 2 + dx);
                                    if post.data()[idx] > best {
                                        best = post.data()[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            let out_idx = n * pc * ph * pw + c * ph * pw + py * pw + px;
                            pooled.data_mut()[out_idx] = best;
                            argmax[out_idx] = best_idx as u32;
                        }
                    }
                }
            }
            (pooled, Some(argmax))
        } else {
            (post.clone(), None)
        };

        caches.push(LayerCache {
            input_hat,
            input_codes,
            pre_act: pre,
            bn_norm,
            post_act: post,
            pool_argmax,
        });
        current = output;
    }

    let classes = model.num_classes();
    let logits = current.reshaped(&[batch, classes])?;
    Ok(ForwardPass { logits, caches })
}
