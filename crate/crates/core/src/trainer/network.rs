//! Feed-forward classifier: convolutional backbone, global average pooling,
//! dropout, ReLU dense layers and a linear output layer whose logits feed the
//! softmax.
//!
//! All parameters live in one flat `Vec<f64>`; the backbone occupies the
//! prefix `[..backbone_len]` so it can be frozen and fingerprinted as a unit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::softmax::softmax_unchecked;
use crate::imaging::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub w_offset: usize,
    #[serde(default)]
    pub b_offset: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            w_offset: 0,
            b_offset: 0,
        }
    }

    fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn out_size(&self, in_size: usize) -> usize {
        (in_size + 2 * self.pad() - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub input_size: usize,
    pub convs: Vec<ConvSpec>,
    /// Hidden ReLU layers followed by the linear output layer.
    pub dense: Vec<DenseSpec>,
    pub dropout_rate: f64,
    pub backbone_len: usize,
    pub total_len: usize,
}

impl Layout {
    pub fn new(
        input_size: usize,
        convs: &[ConvSpec],
        head_widths: &[usize],
        num_classes: usize,
        dropout_rate: f64,
    ) -> Self {
        let mut offset = 0;
        let convs: Vec<ConvSpec> = convs
            .iter()
            .map(|c| {
                let mut c = *c;
                c.w_offset = offset;
                offset += c.weight_len();
                c.b_offset = offset;
                offset += c.out_channels;
                c
            })
            .collect();
        let backbone_len = offset;
        let features = convs.last().map(|c| c.out_channels).unwrap_or(3);
        let mut widths = vec![features];
        widths.extend_from_slice(head_widths);
        widths.push(num_classes);
        let dense = widths
            .windows(2)
            .map(|w| {
                let spec = DenseSpec {
                    inputs: w[0],
                    outputs: w[1],
                    w_offset: offset,
                    b_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                spec
            })
            .collect();
        Layout {
            input_size,
            convs,
            dense,
            dropout_rate,
            backbone_len,
            total_len: offset,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.dense.last().map(|d| d.outputs).unwrap_or(0)
    }

    pub fn feature_len(&self) -> usize {
        self.dense.first().map(|d| d.inputs).unwrap_or(0)
    }
}

/// He-normal weights and zero biases for the given parameter range.
fn init_conv(params: &mut [f64], spec: &ConvSpec, rng: &mut ChaCha8Rng) {
    let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
    for w in &mut params[spec.w_offset..spec.w_offset + spec.weight_len()] {
        *w = normal.sample(rng);
    }
    params[spec.b_offset..spec.b_offset + spec.out_channels].fill(0.0);
}

/// Glorot-uniform weights and zero biases.
fn init_dense(params: &mut [f64], spec: &DenseSpec, rng: &mut ChaCha8Rng) {
    let limit = (6.0 / (spec.inputs + spec.outputs) as f64).sqrt();
    for w in &mut params[spec.w_offset..spec.b_offset] {
        *w = rng.gen_range(-limit..limit);
    }
    params[spec.b_offset..spec.b_offset + spec.outputs].fill(0.0);
}

pub fn init_backbone(layout: &Layout, params: &mut [f64], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in &layout.convs {
        init_conv(params, c, &mut rng);
    }
}

pub fn init_head(layout: &Layout, params: &mut [f64], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for d in &layout.dense {
        init_dense(params, d, &mut rng);
    }
}

fn conv_forward(spec: &ConvSpec, params: &[f64], input: &Tensor3) -> Tensor3 {
    let (ic, ih, iw) = input.shape();
    debug_assert_eq!(ic, spec.in_channels);
    let (oh, ow) = (spec.out_size(ih), spec.out_size(iw));
    let k = spec.kernel;
    let pad = spec.pad() as isize;
    let s = spec.stride;
    let weights = &params[spec.w_offset..spec.w_offset + spec.weight_len()];
    let bias = &params[spec.b_offset..spec.b_offset + spec.out_channels];
    let mut out = Tensor3::zeros(spec.out_channels, oh, ow);
    for o in 0..spec.out_channels {
        let plane = &mut out.data[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias[o]);
        for i in 0..ic {
            let in_plane = &input.data[i * ih * iw..(i + 1) * ih * iw];
            for ky in 0..k {
                for kx in 0..k {
                    let w = weights[((o * ic + i) * k + ky) * k + kx];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * iw..(iy as usize + 1) * iw];
                        let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, o_val) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - pad;
                            if ix >= 0 && ix < iw as isize {
                                *o_val += w * in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and, if `grad_input` is given, the
/// gradient with respect to the layer input.
fn conv_backward(
    spec: &ConvSpec,
    params: &[f64],
    input: &Tensor3,
    grad_out: &Tensor3,
    grads: &mut [f64],
    mut grad_input: Option<&mut Tensor3>,
) {
    let (ic, ih, iw) = input.shape();
    let (_, oh, ow) = grad_out.shape();
    let k = spec.kernel;
    let pad = spec.pad() as isize;
    let s = spec.stride;
    for o in 0..spec.out_channels {
        let g_plane = &grad_out.data[o * oh * ow..(o + 1) * oh * ow];
        grads[spec.b_offset + o] += g_plane.iter().sum::<f64>();
        for i in 0..ic {
            let in_plane = &input.data[i * ih * iw..(i + 1) * ih * iw];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * ic + i) * k + ky) * k + kx;
                    let w = params[spec.w_offset + widx];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let ix = (ox * s) as isize + kx as isize - pad;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            let g = g_plane[oy * ow + ox];
                            acc += g * in_plane[iy * iw + ix as usize];
                            if let Some(gi) = grad_input.as_deref_mut() {
                                gi.data[(i * ih + iy) * iw + ix as usize] += w * g;
                            }
                        }
                    }
                    grads[spec.w_offset + widx] += acc;
                }
            }
        }
    }
}

fn dense_forward(spec: &DenseSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
    let w = &params[spec.w_offset..spec.b_offset];
    let b = &params[spec.b_offset..spec.b_offset + spec.outputs];
    (0..spec.outputs)
        .map(|o| {
            let row = &w[o * spec.inputs..(o + 1) * spec.inputs];
            b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Activations retained from a forward pass for back-propagation.
pub struct ForwardTrace {
    /// Input followed by each post-ReLU conv activation.
    conv_acts: Vec<Tensor3>,
    dropout_mask: Vec<f64>,
    /// Post-dropout features followed by each hidden post-ReLU activation.
    dense_inputs: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Backbone features (global average pooled last conv activation).
pub fn features(layout: &Layout, params: &[f64], input: &Tensor3) -> Vec<f64> {
    let mut x = input.clone();
    for c in &layout.convs {
        x = conv_forward(c, params, &x);
        relu_in_place(&mut x.data);
    }
    global_average_pool(&x)
}

fn global_average_pool(x: &Tensor3) -> Vec<f64> {
    let area = (x.height * x.width) as f64;
    x.data
        .chunks(x.height * x.width)
        .map(|plane| plane.iter().sum::<f64>() / area)
        .collect()
}

/// Inference-mode logits (dropout disabled).
pub fn logits(layout: &Layout, params: &[f64], input: &Tensor3) -> Vec<f64> {
    let mut h = features(layout, params, input);
    let last = layout.dense.len() - 1;
    for (i, d) in layout.dense.iter().enumerate() {
        h = dense_forward(d, params, &h);
        if i < last {
            relu_in_place(&mut h);
        }
    }
    h
}

/// Training-mode forward pass with an explicit dropout mask (entries are 0 or
/// `1 / (1 - rate)`).
pub fn forward_train(layout: &Layout, params: &[f64], input: &Tensor3, dropout_mask: Vec<f64>) -> ForwardTrace {
    let mut conv_acts = vec![input.clone()];
    for c in &layout.convs {
        let mut a = conv_forward(c, params, conv_acts.last().unwrap());
        relu_in_place(&mut a.data);
        conv_acts.push(a);
    }
    let feats = global_average_pool(conv_acts.last().unwrap());
    let mut h: Vec<f64> = feats.iter().zip(&dropout_mask).map(|(f, m)| f * m).collect();
    let mut dense_inputs = Vec::with_capacity(layout.dense.len());
    let last = layout.dense.len() - 1;
    for (i, d) in layout.dense.iter().enumerate() {
        let mut next = dense_forward(d, params, &h);
        if i < last {
            relu_in_place(&mut next);
        }
        dense_inputs.push(std::mem::replace(&mut h, next));
    }
    ForwardTrace {
        conv_acts,
        dropout_mask,
        dense_inputs,
        logits: h,
    }
}

pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Cross-entropy loss of one sample and its gradient (added into `grads`).
/// With `train_backbone == false` only the head gradient is computed.
pub fn backward(
    layout: &Layout,
    params: &[f64],
    trace: &ForwardTrace,
    target: usize,
    train_backbone: bool,
    grads: &mut [f64],
) -> f64 {
    let probs = softmax_unchecked(&trace.logits);
    let loss = -probs[target].max(f64::MIN_POSITIVE).ln();

    // d loss / d logits = p - onehot
    let mut delta: Vec<f64> = probs;
    delta[target] -= 1.0;

    for (li, d) in layout.dense.iter().enumerate().rev() {
        let x = &trace.dense_inputs[li];
        for o in 0..d.outputs {
            let g = delta[o];
            grads[d.b_offset + o] += g;
            if g != 0.0 {
                let row = &mut grads[d.w_offset + o * d.inputs..d.w_offset + (o + 1) * d.inputs];
                for (gw, xi) in row.iter_mut().zip(x) {
                    *gw += g * xi;
                }
            }
        }
        let mut prev = vec![0.0; d.inputs];
        for o in 0..d.outputs {
            let g = delta[o];
            if g == 0.0 {
                continue;
            }
            let row = &params[d.w_offset + o * d.inputs..d.w_offset + (o + 1) * d.inputs];
            for (p, w) in prev.iter_mut().zip(row) {
                *p += g * w;
            }
        }
        if li > 0 {
            // ReLU on hidden layers: x is the post-ReLU activation.
            for (p, xi) in prev.iter_mut().zip(x) {
                if *xi <= 0.0 {
                    *p = 0.0;
                }
            }
        }
        delta = prev;
    }

    if !train_backbone || layout.convs.is_empty() {
        return loss;
    }

    // Through dropout and global average pooling.
    let last = trace.conv_acts.last().unwrap();
    let area = (last.height * last.width) as f64;
    let mut grad = Tensor3::zeros(last.channels, last.height, last.width);
    for c in 0..last.channels {
        let g = delta[c] * trace.dropout_mask[c] / area;
        let plane = c * last.height * last.width..(c + 1) * last.height * last.width;
        for (gv, av) in grad.data[plane.clone()].iter_mut().zip(&last.data[plane]) {
            *gv = if *av > 0.0 { g } else { 0.0 };
        }
    }
    for (ci, spec) in layout.convs.iter().enumerate().rev() {
        let input = &trace.conv_acts[ci];
        if ci == 0 {
            conv_backward(spec, params, input, &grad, grads, None);
        } else {
            let mut gin = Tensor3::zeros(input.channels, input.height, input.width);
            conv_backward(spec, params, input, &grad, grads, Some(&mut gin));
            for (g, a) in gin.data.iter_mut().zip(&input.data) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            grad = gin;
        }
    }
    loss
}
