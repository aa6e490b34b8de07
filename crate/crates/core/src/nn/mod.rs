//! A small feed-forward network engine with hand-derived reverse-mode
//! gradients: 2-D convolutions, transposed convolutions, dense layers and
//! leaky ReLU.
//!
//! Spatial activations are stored batch-interleaved as `(C, B, H, W)` so a
//! convolution over a whole minibatch is a single matrix product against an
//! im2col buffer. All parameters live in one flat vector; each layer owns a
//! contiguous range of it.

pub mod gemm;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use gemm::gemm;

/// Activation tensor flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    /// `(channels, batch, height, width)`.
    Spatial {
        c: usize,
        b: usize,
        h: usize,
        w: usize,
        data: Vec<f32>,
    },
    /// Row-major `batch × features`.
    Flat { b: usize, f: usize, data: Vec<f32> },
}

impl Value {
    pub fn data(&self) -> &[f32] {
        match self {
            Value::Spatial { data, .. } | Value::Flat { data, .. } => data,
        }
    }

    fn data_mut(&mut self) -> &mut Vec<f32> {
        match self {
            Value::Spatial { data, .. } | Value::Flat { data, .. } => data,
        }
    }

    pub fn into_data(self) -> Vec<f32> {
        match self {
            Value::Spatial { data, .. } | Value::Flat { data, .. } => data,
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            Value::Spatial { b, .. } | Value::Flat { b, .. } => *b,
        }
    }

    fn with_data(&self, data: Vec<f32>) -> Value {
        match *self {
            Value::Spatial { c, b, h, w, .. } => Value::Spatial { c, b, h, w, data },
            Value::Flat { b, f, .. } => Value::Flat { b, f, data },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        in_f: usize,
        out_f: usize,
    },
    LeakyRelu {
        slope: f32,
    },
    /// `(C, B, H, W)` → `B × (C·H·W)` with feature index `c·H·W + y·W + x`.
    Flatten,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_c, out_c, kernel, ..
            }
            | LayerSpec::ConvTranspose {
                in_c, out_c, kernel, ..
            } => in_c * out_c * kernel * kernel + out_c,
            LayerSpec::Dense { in_f, out_f } => in_f * out_f + out_f,
            LayerSpec::LeakyRelu { .. } | LayerSpec::Flatten => 0,
        }
    }

    /// Number of weights (the bias follows them in the layer's range).
    fn weight_count(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_c, out_c, kernel, ..
            }
            | LayerSpec::ConvTranspose {
                in_c, out_c, kernel, ..
            } => in_c * out_c * kernel * kernel,
            LayerSpec::Dense { in_f, out_f } => in_f * out_f,
            _ => 0,
        }
    }
}

/// Conv output size, or `None` if the geometry does not produce at least
/// one output position.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Transposed-conv output size.
pub fn conv_transpose_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((size.checked_sub(1)?) * stride + kernel).checked_sub(2 * pad)
}

/// Geometry shared by im2col/col2im: an image of `c × (h, w)` per batch
/// element, scanned by a `k × k` window with stride `s` and padding `p`
/// at `oh × ow` positions.
#[derive(Debug, Clone, Copy)]
struct Window {
    c: usize,
    b: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.b * self.oh * self.ow
    }

    /// `cols[(ci, ky, kx), (b, oy, ox)] = x[ci, b, oy·s + ky − p, ox·s + kx − p]`.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let Window {
            c,
            b,
            h,
            w,
            k,
            s,
            p,
            oh,
            ow,
        } = *self;
        let ncols = self.cols();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for bi in 0..b {
                        let img = &x[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                        for oy in 0..oh {
                            let out = &mut dst[(bi * oh + oy) * ow..(bi * oh + oy + 1) * ow];
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                out.fill(0.0);
                                continue;
                            }
                            let src = &img[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, o) in out.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                *o = if ix >= 0 && ix < w as isize { src[ix as usize] } else { 0.0 };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatters-adds `cols` into `x`.
    fn col2im(&self, cols: &[f32], x: &mut [f32]) {
        let Window {
            c,
            b,
            h,
            w,
            k,
            s,
            p,
            oh,
            ow,
        } = *self;
        let ncols = self.cols();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for bi in 0..b {
                        let img = &mut x[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut img[iy as usize * w..(iy as usize + 1) * w];
                            let vals = &src[(bi * oh + oy) * ow..(bi * oh + oy + 1) * ow];
                            for (ox, &v) in vals.iter().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// What a layer keeps from the forward pass for its backward pass.
#[derive(Debug)]
enum Saved {
    Conv { cols: Vec<f32>, win: Window },
    ConvTranspose { input: Vec<f32>, win: Window },
    Dense { input: Vec<f32>, b: usize },
    LeakyRelu { input: Vec<f32> },
    Flatten { c: usize, b: usize, h: usize, w: usize },
}

/// Forward-pass record needed by [`Network::backward`].
#[derive(Debug)]
pub struct Tape {
    saved: Vec<Saved>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f32>,
}

impl Network {
    /// Builds the network with He-style initialization (biases zero).
    pub fn new<R: Rng + ?Sized>(layers: Vec<LayerSpec>, rng: &mut R) -> Self {
        let mut net = Self::zeros(layers);
        for (i, layer) in net.layers.clone().iter().enumerate() {
            let fan_in = match *layer {
                LayerSpec::Conv { in_c, kernel, .. } => in_c * kernel * kernel,
                LayerSpec::ConvTranspose {
                    in_c, kernel, stride, ..
                } => (in_c * kernel * kernel / (stride * stride)).max(1),
                LayerSpec::Dense { in_f, .. } => in_f,
                _ => continue,
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let off = net.offsets[i];
            for v in &mut net.params[off..off + layer.weight_count()] {
                *v = normal.sample(rng) as f32;
            }
        }
        net
    }

    pub fn zeros(layers: Vec<LayerSpec>) -> Self {
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
        }
        Self {
            layers,
            offsets,
            params: vec![0.0; total],
        }
    }

    pub fn from_params(layers: Vec<LayerSpec>, params: Vec<f32>) -> Result<Self> {
        let mut net = Self::zeros(layers);
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "network needs {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Parameter range `(weights, bias)` of layer `i`.
    pub fn layer_params(&self, i: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let off = self.offsets[i];
        let wc = self.layers[i].weight_count();
        (off..off + wc, off + wc..off + self.layers[i].param_count())
    }

    pub fn forward(&self, input: Value) -> Result<Value> {
        Ok(self.run(input, false)?.0)
    }

    pub fn forward_with_tape(&self, input: Value) -> Result<(Value, Tape)> {
        let (out, saved) = self.run(input, true)?;
        Ok((out, Tape { saved }))
    }

    fn run(&self, mut x: Value, keep: bool) -> Result<(Value, Vec<Saved>)> {
        let mut saved = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for (i, layer) in self.layers.iter().enumerate() {
            let (wr, br) = self.layer_params(i);
            let (weights, bias) = (&self.params[wr], &self.params[br]);
            let (next, record) = match (*layer, x) {
                (
                    LayerSpec::Conv {
                        in_c,
                        out_c,
                        kernel,
                        stride,
                        pad,
                    },
                    Value::Spatial { c, b, h, w, data },
                ) if c == in_c => {
                    let (oh, ow) = match (conv_out(h, kernel, stride, pad), conv_out(w, kernel, stride, pad)) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
                        _ => return Err(Error::Shape(format!("conv layer {i}: {h}x{w} input too small"))),
                    };
                    let win = Window {
                        c,
                        b,
                        h,
                        w,
                        k: kernel,
                        s: stride,
                        p: pad,
                        oh,
                        ow,
                    };
                    let mut cols = vec![0.0; win.rows() * win.cols()];
                    win.im2col(&data, &mut cols);
                    let n = win.cols();
                    let mut out = vec![0.0; out_c * n];
                    for (o, &bv) in bias.iter().enumerate() {
                        out[o * n..(o + 1) * n].fill(bv);
                    }
                    gemm(out_c, win.rows(), n, weights, false, &cols, false, 1.0, &mut out);
                    (
                        Value::Spatial {
                            c: out_c,
                            b,
                            h: oh,
                            w: ow,
                            data: out,
                        },
                        keep.then_some(Saved::Conv { cols, win }),
                    )
                }
                (
                    LayerSpec::ConvTranspose {
                        in_c,
                        out_c,
                        kernel,
                        stride,
                        pad,
                    },
                    Value::Spatial { c, b, h, w, data },
                ) if c == in_c => {
                    let (oh, ow) = match (
                        conv_transpose_out(h, kernel, stride, pad),
                        conv_transpose_out(w, kernel, stride, pad),
                    ) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
                        _ => return Err(Error::Shape(format!("transposed conv layer {i}: bad geometry"))),
                    };
                    // The transposed conv is the adjoint of a conv from the
                    // (oh, ow) image onto the (h, w) grid.
                    let win = Window {
                        c: out_c,
                        b,
                        h: oh,
                        w: ow,
                        k: kernel,
                        s: stride,
                        p: pad,
                        oh: h,
                        ow: w,
                    };
                    let n = win.cols();
                    let mut cols = vec![0.0; win.rows() * n];
                    gemm(win.rows(), in_c, n, weights, true, &data, false, 0.0, &mut cols);
                    let mut out = vec![0.0; out_c * b * oh * ow];
                    win.col2im(&cols, &mut out);
                    let plane = b * oh * ow;
                    for (o, &bv) in bias.iter().enumerate() {
                        out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
                    }
                    (
                        Value::Spatial {
                            c: out_c,
                            b,
                            h: oh,
                            w: ow,
                            data: out,
                        },
                        keep.then_some(Saved::ConvTranspose { input: data, win }),
                    )
                }
                (LayerSpec::Dense { in_f, out_f }, Value::Flat { b, f, data }) if f == in_f => {
                    let mut out = vec![0.0; b * out_f];
                    for row in out.chunks_exact_mut(out_f) {
                        row.copy_from_slice(bias);
                    }
                    gemm(b, in_f, out_f, &data, false, weights, true, 1.0, &mut out);
                    (
                        Value::Flat {
                            b,
                            f: out_f,
                            data: out,
                        },
                        keep.then_some(Saved::Dense { input: data, b }),
                    )
                }
                (LayerSpec::LeakyRelu { slope }, v) => {
                    let out: Vec<f32> = v
                        .data()
                        .iter()
                        .map(|&z| if z > 0.0 { z } else { slope * z })
                        .collect();
                    let next = v.with_data(out);
                    let rec = keep.then(|| Saved::LeakyRelu { input: v.into_data() });
                    (next, rec)
                }
                (LayerSpec::Flatten, Value::Spatial { c, b, h, w, data }) => {
                    let hw = h * w;
                    let f = c * hw;
                    let mut out = vec![0.0; b * f];
                    for ci in 0..c {
                        for bi in 0..b {
                            out[bi * f + ci * hw..bi * f + (ci + 1) * hw]
                                .copy_from_slice(&data[(ci * b + bi) * hw..(ci * b + bi + 1) * hw]);
                        }
                    }
                    (
                        Value::Flat { b, f, data: out },
                        keep.then_some(Saved::Flatten { c, b, h, w }),
                    )
                }
                (layer, v) => {
                    return Err(Error::Shape(format!(
                        "layer {i} ({layer:?}) cannot take input {}",
                        describe(&v)
                    )))
                }
            };
            if let Some(r) = record {
                saved.push(r);
            }
            x = next;
        }
        Ok((x, saved))
    }

    /// Gradient of a scalar loss with respect to all parameters, given the
    /// loss gradient `d_out` with respect to the network output.
    pub fn backward(&self, tape: Tape, d_out: Value) -> Result<Vec<f32>> {
        let mut grads = vec![0.0f32; self.params.len()];
        self.backward_into(tape, d_out, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Network::backward`] but accumulates into `grads`.
    pub fn backward_into(&self, tape: Tape, d_out: Value, grads: &mut [f32]) -> Result<()> {
        if tape.saved.len() != self.layers.len() {
            return Err(Error::Shape("tape does not belong to this network".into()));
        }
        let mut dy = d_out;
        for (i, saved) in tape.saved.into_iter().enumerate().rev() {
            let layer = self.layers[i];
            let (wr, br) = self.layer_params(i);
            let weights = &self.params[wr.clone()];
            dy = match (layer, saved) {
                (LayerSpec::Conv { out_c, .. }, Saved::Conv { cols, win }) => {
                    let n = win.cols();
                    let dyd = dy.data();
                    for (o, g) in grads[br].iter_mut().enumerate() {
                        *g += dyd[o * n..(o + 1) * n].iter().sum::<f32>();
                    }
                    gemm(out_c, n, win.rows(), dyd, false, &cols, true, 1.0, &mut grads[wr]);
                    let mut dcols = cols;
                    gemm(win.rows(), out_c, n, weights, true, dyd, false, 0.0, &mut dcols);
                    let mut dx = vec![0.0; win.c * win.b * win.h * win.w];
                    win.col2im(&dcols, &mut dx);
                    Value::Spatial {
                        c: win.c,
                        b: win.b,
                        h: win.h,
                        w: win.w,
                        data: dx,
                    }
                }
                (LayerSpec::ConvTranspose { in_c, out_c, .. }, Saved::ConvTranspose { input, win }) => {
                    let plane = win.b * win.h * win.w;
                    let dyd = dy.data();
                    for (o, g) in grads[br].iter_mut().enumerate() {
                        *g += dyd[o * plane..(o + 1) * plane].iter().sum::<f32>();
                    }
                    let n = win.cols();
                    let mut dcols = vec![0.0; win.rows() * n];
                    win.im2col(dyd, &mut dcols);
                    gemm(in_c, n, win.rows(), &input, false, &dcols, true, 1.0, &mut grads[wr]);
                    let mut dx = vec![0.0; in_c * n];
                    gemm(in_c, win.rows(), n, weights, false, &dcols, false, 0.0, &mut dx);
                    debug_assert_eq!(win.c, out_c);
                    Value::Spatial {
                        c: in_c,
                        b: win.b,
                        h: win.oh,
                        w: win.ow,
                        data: dx,
                    }
                }
                (LayerSpec::Dense { in_f, out_f }, Saved::Dense { input, b }) => {
                    let dyd = dy.data();
                    for row in dyd.chunks_exact(out_f) {
                        for (g, &d) in grads[br.clone()].iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                    gemm(out_f, b, in_f, dyd, true, &input, false, 1.0, &mut grads[wr]);
                    let mut dx = input;
                    gemm(b, out_f, in_f, dyd, false, weights, false, 0.0, &mut dx);
                    Value::Flat { b, f: in_f, data: dx }
                }
                (LayerSpec::LeakyRelu { slope }, Saved::LeakyRelu { input }) => {
                    let mut d = dy;
                    for (g, &z) in d.data_mut().iter_mut().zip(&input) {
                        if z <= 0.0 {
                            *g *= slope;
                        }
                    }
                    d
                }
                (LayerSpec::Flatten, Saved::Flatten { c, b, h, w }) => {
                    let hw = h * w;
                    let f = c * hw;
                    let dyd = dy.data();
                    let mut dx = vec![0.0; c * b * hw];
                    for ci in 0..c {
                        for bi in 0..b {
                            dx[(ci * b + bi) * hw..(ci * b + bi + 1) * hw]
                                .copy_from_slice(&dyd[bi * f + ci * hw..bi * f + (ci + 1) * hw]);
                        }
                    }
                    Value::Spatial { c, b, h, w, data: dx }
                }
                _ => return Err(Error::Shape(format!("tape entry {i} does not match its layer"))),
            };
        }
        Ok(())
    }
}

fn describe(v: &Value) -> String {
    match v {
        Value::Spatial { c, b, h, w, .. } => format!("spatial (c={c}, b={b}, {h}x{w})"),
        Value::Flat { b, f, .. } => format!("flat (b={b}, f={f})"),
    }
}
