//! The deep conditional model: a network maps a masked image (missing values
//! zeroed, mask appended as an extra channel) to the mean, `l` factor images
//! and noise of a factor Gaussian over the full image. Training minimizes
//! the negative log-likelihood of that Gaussian restricted to the missing
//! coordinates.
//!
//! The network output for one sample is `(l + 2) · n` values laid out as
//! groups of `n`: the mean, then factor columns `0..l`, then `ρ` with noise
//! `d = softplus(ρ) + 1e-6`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::error::{Error, Result};
use crate::lowrank::FactorGaussian;
use crate::masking::MaskedSample;
use crate::mfa::NOISE_FLOOR;
use crate::nn::{conv_out, LayerSpec, Network, Tape, Value};
use crate::scalar::{self, Real};
use crate::tensorio::{Container, Dataset, ImageShape, Tensor};

const LEAKY_SLOPE: f32 = 0.2;
/// Scale applied to the randomly initialized output layer so a fresh network
/// starts close to the data statistics written into its bias.
const HEAD_INIT_SCALE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    /// Four 3×3 convolutions (strides 1, 2, 1, 2) and one dense output layer.
    ConvDense,
    /// Strided-convolution encoder mirrored by a transposed-convolution
    /// decoder that emits `l + 2` channels per input channel.
    FullConv,
    /// Multilayer perceptron on the flattened input.
    Dense,
}

impl ArchKind {
    pub fn default_widths(self) -> Vec<usize> {
        match self {
            ArchKind::ConvDense => vec![32, 64, 64, 128],
            ArchKind::FullConv => vec![64, 128, 256, 512],
            ArchKind::Dense => vec![256, 256],
        }
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchKind::ConvDense => "conv-dense",
            ArchKind::FullConv => "full-conv",
            ArchKind::Dense => "dense",
        })
    }
}

impl std::str::FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv-dense" => Ok(ArchKind::ConvDense),
            "full-conv" => Ok(ArchKind::FullConv),
            "dense" => Ok(ArchKind::Dense),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Everything needed to rebuild the layer graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kind: ArchKind,
    pub shape: ImageShape,
    pub latent: usize,
    /// Conv channel widths (conv-dense, full-conv encoder) or hidden sizes
    /// (dense).
    pub widths: Vec<usize>,
}

impl ArchConfig {
    pub fn new(kind: ArchKind, shape: ImageShape, latent: usize) -> Self {
        Self {
            kind,
            shape,
            latent,
            widths: kind.default_widths(),
        }
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    /// Output values per sample.
    pub fn output_len(&self) -> usize {
        (self.latent + 2) * self.shape.len()
    }

    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        let ImageShape {
            channels,
            height,
            width,
        } = self.shape;
        if self.shape.is_empty() {
            return Err(Error::Config("image shape must be non-empty".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let in_c = channels + 1;
        let lrelu = LayerSpec::LeakyRelu { slope: LEAKY_SLOPE };
        let mut layers = Vec::new();
        match self.kind {
            ArchKind::ConvDense => {
                if self.widths.is_empty() {
                    return Err(Error::Config("conv-dense needs at least one conv layer".into()));
                }
                let (mut c, mut h, mut w) = (in_c, height, width);
                for (i, &out_c) in self.widths.iter().enumerate() {
                    let stride = if i % 2 == 1 { 2 } else { 1 };
                    layers.push(LayerSpec::Conv {
                        in_c: c,
                        out_c,
                        kernel: 3,
                        stride,
                        pad: 1,
                    });
                    layers.push(lrelu);
                    c = out_c;
                    h = conv_out(h, 3, stride, 1).expect("padded 3x3 conv always fits");
                    w = conv_out(w, 3, stride, 1).expect("padded 3x3 conv always fits");
                }
                layers.push(LayerSpec::Flatten);
                layers.push(LayerSpec::Dense {
                    in_f: c * h * w,
                    out_f: self.output_len(),
                });
            }
            ArchKind::FullConv => {
                let depth = self.widths.len();
                if depth == 0 {
                    return Err(Error::Config("full-conv needs at least one level".into()));
                }
                let factor = 1usize << depth;
                if height % factor != 0 || width % factor != 0 {
                    return Err(Error::Config(format!(
                        "full-conv with {depth} levels needs image sides divisible by {factor}, got {height}x{width}"
                    )));
                }
                let mut c = in_c;
                for &out_c in &self.widths {
                    layers.push(LayerSpec::Conv {
                        in_c: c,
                        out_c,
                        kernel: 4,
                        stride: 2,
                        pad: 1,
                    });
                    layers.push(lrelu);
                    c = out_c;
                }
                for i in (0..depth).rev() {
                    let out_c = if i == 0 {
                        (self.latent + 2) * channels
                    } else {
                        self.widths[i - 1]
                    };
                    layers.push(LayerSpec::ConvTranspose {
                        in_c: c,
                        out_c,
                        kernel: 4,
                        stride: 2,
                        pad: 1,
                    });
                    if i > 0 {
                        layers.push(lrelu);
                    }
                    c = out_c;
                }
            }
            ArchKind::Dense => {
                layers.push(LayerSpec::Flatten);
                let mut f = in_c * height * width;
                for &hidden in &self.widths {
                    layers.push(LayerSpec::Dense { in_f: f, out_f: hidden });
                    layers.push(lrelu);
                    f = hidden;
                }
                layers.push(LayerSpec::Dense {
                    in_f: f,
                    out_f: self.output_len(),
                });
            }
        }
        Ok(layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Restricted negative log-likelihood.
    Nll,
    /// Restricted NLL plus weighted squared error of the mean on the missing
    /// coordinates.
    NllPlusMse,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Nll => "nll",
            LossMode::NllPlusMse => "nll_plus_mse",
        })
    }
}

/// Builds the Gaussian described by one raw output vector.
pub fn head_gaussian<T: Real>(out: &[T], n: usize, latent: usize) -> Result<FactorGaussian<T>> {
    check_head(out, n, latent)?;
    let floor = T::of(NOISE_FLOOR);
    let mean = out[..n].to_vec();
    let mut factors = vec![T::zero(); n * latent];
    for k in 0..latent {
        for i in 0..n {
            factors[i * latent + k] = out[(1 + k) * n + i];
        }
    }
    let noise = out[(latent + 1) * n..]
        .iter()
        .map(|&r| scalar::softplus(r) + floor)
        .collect();
    FactorGaussian::new(mean, factors, noise, latent)
}

fn check_head<T>(out: &[T], n: usize, latent: usize) -> Result<()> {
    if out.len() != (latent + 2) * n {
        return Err(Error::Shape(format!(
            "head output has {} values, expected {} for n={n}, l={latent}",
            out.len(),
            (latent + 2) * n
        )));
    }
    Ok(())
}

/// `−log N(μ_m, A_m A_mᵀ + D_m)(x_m)` for the missing coordinates of
/// `sample`.
pub fn restricted_nll<T: Real>(g: &FactorGaussian<T>, sample: &MaskedSample) -> Result<T> {
    if sample.ground_truth.len() != g.dim() {
        return Err(Error::Shape(format!(
            "sample has length {}, Gaussian has dimension {}",
            sample.ground_truth.len(),
            g.dim()
        )));
    }
    let missing = sample.missing_indices();
    if missing.is_empty() {
        return Err(Error::EmptyMask);
    }
    let x_m: Vec<T> = sample.missing_values().iter().map(|&v| T::of(v as f64)).collect();
    Ok(-g.restrict(&missing)?.log_density(&x_m)?)
}

/// Loss of one raw output vector and, optionally, its gradient with respect
/// to that vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLoss<T> {
    pub loss: T,
    pub nll: T,
    /// `Σ_{i∈m} (μᵢ − xᵢ)²`.
    pub sq_err: T,
    /// Empty unless requested; zero outside the missing coordinates.
    pub grad: Vec<T>,
}

/// Loss of the raw head output `out` against the missing values `x_m` at
/// coordinates `missing`. Only the missing coordinates of `out` are read.
#[allow(clippy::too_many_arguments)]
pub fn head_loss<T: Real>(
    out: &[T],
    n: usize,
    latent: usize,
    missing: &[usize],
    x_m: &[T],
    mode: LossMode,
    mse_weight: T,
    want_grad: bool,
) -> Result<HeadLoss<T>> {
    check_head(out, n, latent)?;
    if missing.is_empty() {
        return Err(Error::EmptyMask);
    }
    if x_m.len() != missing.len() {
        return Err(Error::Shape(format!(
            "{} missing values for {} missing coordinates",
            x_m.len(),
            missing.len()
        )));
    }
    crate::lowrank::check_index_set(missing, n)?;
    let floor = T::of(NOISE_FLOOR);
    let rho = |i: usize| out[(latent + 1) * n + i];
    let mut mean = Vec::with_capacity(missing.len());
    let mut factors = Vec::with_capacity(missing.len() * latent);
    let mut noise = Vec::with_capacity(missing.len());
    for &i in missing {
        mean.push(out[i]);
        for k in 0..latent {
            factors.push(out[(1 + k) * n + i]);
        }
        noise.push(scalar::softplus(rho(i)) + floor);
    }
    let g = FactorGaussian::new(mean, factors, noise, latent)?;
    let sq_err: T = g.mean().iter().zip(x_m).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let with_mse = mode == LossMode::NllPlusMse;

    let (nll, grad) = if want_grad {
        let (nll, fg) = g.nll_and_gradient(x_m)?;
        let mut grad = vec![T::zero(); out.len()];
        let two = T::of(2.0);
        for (j, &i) in missing.iter().enumerate() {
            let mut dmu = fg.mean[j];
            if with_mse {
                dmu += mse_weight * two * (g.mean()[j] - x_m[j]);
            }
            grad[i] = dmu;
            for k in 0..latent {
                grad[(1 + k) * n + i] = fg.factors[j * latent + k];
            }
            grad[(latent + 1) * n + i] = fg.noise[j] * scalar::sigmoid(rho(i));
        }
        (nll, grad)
    } else {
        (-g.log_density(x_m)?, Vec::new())
    };
    let loss = if with_mse { nll + mse_weight * sq_err } else { nll };
    Ok(HeadLoss {
        loss,
        nll,
        sq_err,
        grad,
    })
}

/// Summed losses over a batch and the gradient of the mean loss.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss_sum: f64,
    pub nll_sum: f64,
    pub count: usize,
    pub grads: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmfaNetwork {
    arch: ArchConfig,
    net: Network,
}

impl DmfaNetwork {
    /// Randomly initialized network whose output bias is set from `stats`
    /// (per-coordinate data mean and variance) when given.
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, stats: Option<(&[f64], &[f64])>, rng: &mut R) -> Result<Self> {
        let layers = arch.layers()?;
        let net = Network::new(layers, rng);
        let mut this = Self { arch, net };
        this.init_head(stats)?;
        Ok(this)
    }

    /// Initializes from a dataset's per-coordinate moments.
    pub fn for_data<R: Rng + ?Sized>(arch: ArchConfig, data: &Dataset, rng: &mut R) -> Result<Self> {
        if arch.shape != data.shape() {
            return Err(Error::Shape(format!(
                "architecture expects {:?}, data has {:?}",
                arch.shape,
                data.shape()
            )));
        }
        if data.is_empty() {
            return Self::new(arch, None, rng);
        }
        let (mean, var) = data.moments();
        Self::new(arch, Some((&mean, &var)), rng)
    }

    pub fn from_params(arch: ArchConfig, params: Vec<f32>) -> Result<Self> {
        let net = Network::from_params(arch.layers()?, params)?;
        Ok(Self { arch, net })
    }

    fn init_head(&mut self, stats: Option<(&[f64], &[f64])>) -> Result<()> {
        let last = self.net.layers().len() - 1;
        let (wr, br) = self.net.layer_params(last);
        for w in &mut self.net.params_mut()[wr] {
            *w *= HEAD_INIT_SCALE;
        }
        let Some((mean, var)) = stats else {
            return Ok(());
        };
        let shape = self.arch.shape;
        let (n, l) = (shape.len(), self.arch.latent);
        if mean.len() != n || var.len() != n {
            return Err(Error::Shape("data moments do not match the image shape".into()));
        }
        let rho = |v: f64| scalar::softplus_inv((v - NOISE_FLOOR).max(1e-4)) as f32;
        let bias = &mut self.net.params_mut()[br];
        bias.fill(0.0);
        match self.arch.kind {
            ArchKind::ConvDense | ArchKind::Dense => {
                for i in 0..n {
                    bias[i] = mean[i] as f32;
                    bias[(l + 1) * n + i] = rho(var[i]);
                }
            }
            ArchKind::FullConv => {
                // One bias per output channel: average over each input
                // channel's pixels.
                let (c, hw) = (shape.channels, shape.pixels());
                for ch in 0..c {
                    let range = ch * hw..(ch + 1) * hw;
                    let m = mean[range.clone()].iter().sum::<f64>() / hw as f64;
                    let v = var[range].iter().sum::<f64>() / hw as f64;
                    bias[ch] = m as f32;
                    bias[(l + 1) * c + ch] = rho(v);
                }
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn shape(&self) -> ImageShape {
        self.arch.shape
    }

    pub fn latent(&self) -> usize {
        self.arch.latent
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &[f32] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        self.net.params_mut()
    }

    /// Index range of the output layer's bias and weights, in that order.
    pub fn head_params(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (w, b) = self.net.layer_params(self.net.layers().len() - 1);
        (b, w)
    }

    /// Network input for a batch: masked values per channel plus the mask.
    pub fn input(&self, samples: &[&MaskedSample]) -> Result<Value> {
        let shape = self.arch.shape;
        let (c, hw, b) = (shape.channels, shape.pixels(), samples.len());
        let mut data = vec![0.0f32; (c + 1) * b * hw];
        for (bi, s) in samples.iter().enumerate() {
            if s.mask.shape() != shape || s.values.len() != shape.len() {
                return Err(Error::Shape(format!(
                    "sample shape {:?} does not match network input {:?}",
                    s.mask.shape(),
                    shape
                )));
            }
            for ch in 0..c {
                data[(ch * b + bi) * hw..(ch * b + bi + 1) * hw].copy_from_slice(&s.values[ch * hw..(ch + 1) * hw]);
            }
            let dst = &mut data[(c * b + bi) * hw..(c * b + bi + 1) * hw];
            for (d, &m) in dst.iter_mut().zip(&s.mask.bits()[..hw]) {
                *d = if m { 1.0 } else { 0.0 };
            }
        }
        Ok(Value::Spatial {
            c: c + 1,
            b,
            h: shape.height,
            w: shape.width,
            data,
        })
    }

    /// Raw outputs as a row-major `batch × (l + 2)n` matrix.
    fn rows(&self, out: Value) -> Vec<f32> {
        match out {
            Value::Flat { data, .. } => data,
            Value::Spatial { c, b, h, w, data } => {
                let hw = h * w;
                let len = c * hw;
                let mut rows = vec![0.0; b * len];
                for ch in 0..c {
                    for bi in 0..b {
                        rows[bi * len + ch * hw..bi * len + (ch + 1) * hw]
                            .copy_from_slice(&data[(ch * b + bi) * hw..(ch * b + bi + 1) * hw]);
                    }
                }
                rows
            }
        }
    }

    /// Inverse of [`DmfaNetwork::rows`].
    fn unrows(&self, rows: Vec<f32>, b: usize) -> Value {
        match self.arch.kind {
            ArchKind::ConvDense | ArchKind::Dense => Value::Flat {
                b,
                f: self.arch.output_len(),
                data: rows,
            },
            ArchKind::FullConv => {
                let shape = self.arch.shape;
                let hw = shape.pixels();
                let c = (self.arch.latent + 2) * shape.channels;
                let len = c * hw;
                let mut data = vec![0.0; b * len];
                for ch in 0..c {
                    for bi in 0..b {
                        data[(ch * b + bi) * hw..(ch * b + bi + 1) * hw]
                            .copy_from_slice(&rows[bi * len + ch * hw..bi * len + (ch + 1) * hw]);
                    }
                }
                Value::Spatial {
                    c,
                    b,
                    h: shape.height,
                    w: shape.width,
                    data,
                }
            }
        }
    }

    /// Raw head outputs, one vector per sample.
    pub fn outputs(&self, samples: &[&MaskedSample]) -> Result<Vec<Vec<f32>>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.net.forward(self.input(samples)?)?;
        let len = self.arch.output_len();
        Ok(self.rows(out).chunks_exact(len).map(<[f32]>::to_vec).collect())
    }

    pub fn forward(&self, sample: &MaskedSample) -> Result<FactorGaussian<f32>> {
        let out = self.outputs(&[sample])?.pop().expect("one output per sample");
        head_gaussian(&out, self.arch.shape.len(), self.arch.latent)
    }

    pub fn forward_batch(&self, samples: &[&MaskedSample]) -> Result<Vec<FactorGaussian<f32>>> {
        let (n, l) = (self.arch.shape.len(), self.arch.latent);
        self.outputs(samples)?
            .iter()
            .map(|o| head_gaussian(o, n, l))
            .collect()
    }

    fn forward_tape(&self, samples: &[&MaskedSample]) -> Result<(Vec<f32>, Tape)> {
        let (out, tape) = self.net.forward_with_tape(self.input(samples)?)?;
        Ok((self.rows(out), tape))
    }

    /// Gradient of the batch-mean loss with respect to every parameter.
    /// Samples without missing coordinates are rejected.
    pub fn loss_gradients(&self, samples: &[&MaskedSample], mode: LossMode, mse_weight: f32) -> Result<BatchGradient> {
        if samples.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let (n, l) = (self.arch.shape.len(), self.arch.latent);
        let len = self.arch.output_len();
        let (rows, tape) = self.forward_tape(samples)?;
        let scale = 1.0 / samples.len() as f32;
        let heads: Vec<HeadLoss<f32>> = rows
            .par_chunks_exact(len)
            .zip(samples.par_iter())
            .map(|(out, s)| {
                let missing = s.missing_indices();
                let x_m = s.missing_values();
                head_loss(out, n, l, &missing, &x_m, mode, mse_weight, true)
            })
            .collect::<Result<_>>()
            .map_err(|e| diverged(e.to_string()))?;
        let mut d_rows = Vec::with_capacity(rows.len());
        let (mut loss_sum, mut nll_sum) = (0.0f64, 0.0f64);
        for h in &heads {
            loss_sum += h.loss as f64;
            nll_sum += h.nll as f64;
            d_rows.extend(h.grad.iter().map(|&g| g * scale));
        }
        let grads = self.net.backward(tape, self.unrows(d_rows, samples.len()))?;
        if !loss_sum.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(diverged(format!("non-finite loss or gradient (loss sum {loss_sum})")));
        }
        Ok(BatchGradient {
            loss_sum,
            nll_sum,
            count: samples.len(),
            grads,
        })
    }

    /// Loss of the batch without gradients (summed, f64 accumulation).
    pub fn batch_loss(&self, samples: &[&MaskedSample], mode: LossMode, mse_weight: f32) -> Result<(f64, f64)> {
        let (n, l) = (self.arch.shape.len(), self.arch.latent);
        let outputs = self.outputs(samples)?;
        let mut totals = (0.0f64, 0.0f64);
        for (out, s) in outputs.iter().zip(samples) {
            let h = head_loss(out, n, l, &s.missing_indices(), &s.missing_values(), mode, mse_weight, false)?;
            totals.0 += h.loss as f64;
            totals.1 += h.nll as f64;
        }
        Ok(totals)
    }

    pub fn arch_json(&self) -> Json {
        json!({
            "arch": self.arch,
            "layers": self.net.layers(),
        })
    }

    pub fn to_container(&self, mut meta: Json) -> Container {
        if !meta.is_object() {
            meta = json!({});
        }
        meta["model"] = json!("dmfa");
        meta["arch"] = serde_json::to_value(&self.arch).expect("arch serializes");
        meta["layers"] = serde_json::to_value(self.net.layers()).expect("layers serialize");
        Container::new(
            vec![Tensor::new("params", vec![self.params().len()], self.params().to_vec())],
            meta,
        )
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta.get("model").and_then(Json::as_str) != Some("dmfa") {
            return Err(Error::Format("container does not hold a DMFA network".into()));
        }
        let arch: ArchConfig = serde_json::from_value(c.meta.get("arch").cloned().unwrap_or(Json::Null))
            .map_err(|e| Error::Format(format!("bad arch descriptor: {e}")))?;
        if let Some(layers) = c.meta.get("layers") {
            let stored: Vec<LayerSpec> = serde_json::from_value(layers.clone())
                .map_err(|e| Error::Format(format!("bad layer list: {e}")))?;
            if stored != arch.layers()? {
                return Err(Error::Format("layer list does not match the arch descriptor".into()));
            }
        }
        let params = c.get("params")?;
        Self::from_params(arch, params.data.clone()).map_err(|e| Error::Format(e.to_string()))
    }
}

fn diverged(reason: String) -> Error {
    Error::Diverged { epoch: 0, reason }
}
