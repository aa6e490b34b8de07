//! Mixture of factor analyzers: the model type, its density, and
//! maximum-likelihood training by minibatch Adam on the full-data negative
//! log-likelihood.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::lowrank::{accumulate_nll_gradient, FactorGaussian, FactorGrad, Woodbury};
use crate::masking::sample_rng;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::{self, Real};
use crate::tensorio::{Container, Dataset, Tensor};

/// Lower bound added to every softplus-parameterized noise variance.
pub const NOISE_FLOOR: f64 = 1e-6;
/// Lower clamp on the initial noise variance.
pub const INIT_NOISE_MIN: f64 = 1e-4;

/// `p(x) = Σᵢ pᵢ N(μᵢ, AᵢAᵢᵀ + Dᵢ)(x)` with weights kept as log-weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MfaModel<T> {
    log_weights: Vec<T>,
    components: Vec<FactorGaussian<T>>,
}

impl<T: Real> MfaModel<T> {
    /// `log_weights` must already be normalized (log-sum-exp = 0).
    pub fn new(log_weights: Vec<T>, components: Vec<FactorGaussian<T>>) -> Result<Self> {
        Self::check_components(&log_weights, &components)?;
        let lse = scalar::log_sum_exp(&log_weights).as_f64();
        let tol = 1e-9f64.max(64.0 * T::epsilon().as_f64());
        if !(lse.abs() <= tol) {
            return Err(Error::InvalidValue(format!(
                "mixture log-weights are not normalized (log-sum-exp = {lse})"
            )));
        }
        Ok(Self {
            log_weights,
            components,
        })
    }

    /// Normalizes arbitrary finite log-weights.
    pub fn from_unnormalized(log_weights: Vec<T>, components: Vec<FactorGaussian<T>>) -> Result<Self> {
        Self::check_components(&log_weights, &components)?;
        let lse = scalar::log_sum_exp(&log_weights);
        if !lse.is_finite() {
            return Err(Error::Numerical(format!(
                "cannot normalize mixture weights (log-sum-exp = {lse})"
            )));
        }
        Ok(Self {
            log_weights: log_weights.into_iter().map(|w| w - lse).collect(),
            components,
        })
    }

    pub fn single(g: FactorGaussian<T>) -> Self {
        Self {
            log_weights: vec![T::zero()],
            components: vec![g],
        }
    }

    fn check_components(log_weights: &[T], components: &[FactorGaussian<T>]) -> Result<()> {
        if components.is_empty() {
            return Err(Error::Config("a mixture needs at least one component".into()));
        }
        if log_weights.len() != components.len() {
            return Err(Error::Shape(format!(
                "{} log-weights for {} components",
                log_weights.len(),
                components.len()
            )));
        }
        let (n, l) = (components[0].dim(), components[0].latent());
        if components.iter().any(|c| c.dim() != n || c.latent() != l) {
            return Err(Error::Shape(
                "mixture components must share dimension and latent size".into(),
            ));
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == T::infinity()) {
            return Err(Error::InvalidValue("log-weights must not be NaN or +inf".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn latent(&self) -> usize {
        self.components[0].latent()
    }

    pub fn log_weights(&self) -> &[T] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<T> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn components(&self) -> &[FactorGaussian<T>] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &FactorGaussian<T> {
        &self.components[i]
    }

    /// Index of the heaviest component; the lowest index wins ties.
    pub fn top_component(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.log_weights.iter().enumerate() {
            if *w > self.log_weights[best] {
                best = i;
            }
        }
        best
    }

    /// Largest mixture weight; close to 1 when the mixture has collapsed
    /// onto one component.
    pub fn max_weight(&self) -> T {
        self.log_weights[self.top_component()].exp()
    }

    /// `log Σᵢ pᵢ Nᵢ(x)`.
    pub fn log_density(&self, x: &[T]) -> Result<T> {
        let terms = self
            .log_weights
            .iter()
            .zip(&self.components)
            .map(|(&lw, c)| Ok(lw + c.log_density(x)?))
            .collect::<Result<Vec<T>>>()?;
        Ok(scalar::log_sum_exp(&terms))
    }

    /// Marginal mixture over `idx`.
    pub fn restrict(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            log_weights: self.log_weights.clone(),
            components: self
                .components
                .iter()
                .map(|c| c.restrict(idx))
                .collect::<Result<_>>()?,
        })
    }

    pub fn cast<U: Real>(&self) -> MfaModel<U> {
        MfaModel {
            log_weights: self.log_weights.iter().map(|w| U::of(w.as_f64())).collect(),
            components: self.components.iter().map(|c| c.cast()).collect(),
        }
    }
}

/// Free-function form of [`MfaModel::log_density`].
pub fn mixture_log_density<T: Real>(mix: &MfaModel<T>, x: &[T]) -> Result<T> {
    mix.log_density(x)
}

impl MfaModel<f32> {
    /// Tensors `log_weights [k]`, `mean [k, n]`, `factors [k, n, l]`,
    /// `noise [k, n]`; `meta` is merged into the header with `model = "mfa"`.
    pub fn to_container(&self, mut meta: serde_json::Value) -> Container {
        let (k, n, l) = (self.k(), self.dim(), self.latent());
        let cat = |f: &dyn Fn(&FactorGaussian<f32>) -> &[f32]| {
            self.components.iter().flat_map(|c| f(c).iter().copied()).collect::<Vec<f32>>()
        };
        if !meta.is_object() {
            meta = json!({});
        }
        meta["model"] = json!("mfa");
        meta["k"] = json!(k);
        meta["latent"] = json!(l);
        Container::new(
            vec![
                Tensor::new("log_weights", vec![k], self.log_weights.clone()),
                Tensor::new("mean", vec![k, n], cat(&|c| c.mean())),
                Tensor::new("factors", vec![k, n, l], cat(&|c| c.factors())),
                Tensor::new("noise", vec![k, n], cat(&|c| c.noise())),
            ],
            meta,
        )
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta.get("model").and_then(|m| m.as_str()) != Some("mfa") {
            return Err(Error::Format("container does not hold an MFA model".into()));
        }
        let lw = c.get("log_weights")?;
        let mean = c.get("mean")?;
        let factors = c.get("factors")?;
        let noise = c.get("noise")?;
        let (k, n) = match mean.shape[..] {
            [k, n] => (k, n),
            _ => return Err(Error::Format("MFA mean must be a [k, n] tensor".into())),
        };
        let l = match factors.shape[..] {
            [fk, fn_, l] if fk == k && fn_ == n => l,
            _ => return Err(Error::Format("MFA factors must be a [k, n, l] tensor".into())),
        };
        if lw.shape != [k] || noise.shape != [k, n] {
            return Err(Error::Format("MFA weight/noise tensors have inconsistent shapes".into()));
        }
        let components = (0..k)
            .map(|i| {
                FactorGaussian::new(
                    mean.data[i * n..(i + 1) * n].to_vec(),
                    factors.data[i * n * l..(i + 1) * n * l].to_vec(),
                    noise.data[i * n..(i + 1) * n].to_vec(),
                    l,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        MfaModel::from_unnormalized(lw.data.clone(), components)
    }
}

/// Means are `k` distinct training samples, factor entries are drawn from
/// `N(0, 0.01)` (standard deviation 0.1), noise is the per-coordinate data
/// variance divided by `l` (clamped below at `1e-4`) and weights are
/// uniform.
pub fn init_mfa<R: Rng + ?Sized>(data: &Dataset, k: usize, l: usize, rng: &mut R) -> Result<MfaModel<f32>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k > data.count() {
        return Err(Error::Config(format!(
            "cannot pick {k} distinct means from {} samples",
            data.count()
        )));
    }
    let n = data.shape().len();
    let (_, var) = data.moments();
    let noise: Vec<f32> = var
        .iter()
        .map(|v| (v / l.max(1) as f64).max(INIT_NOISE_MIN) as f32)
        .collect();
    let picks = rand::seq::index::sample(rng, data.count(), k).into_vec();
    let normal = Normal::new(0.0f64, 0.1).expect("valid normal");
    let components = picks
        .iter()
        .map(|&i| {
            let factors = (0..n * l).map(|_| normal.sample(rng) as f32).collect();
            FactorGaussian::new(data.sample(i).to_vec(), factors, noise.clone(), l)
        })
        .collect::<Result<Vec<_>>>()?;
    let lw = -(k as f32).ln();
    MfaModel::from_unnormalized(vec![lw; k], components)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MfaTrainConfig {
    pub k: usize,
    pub latent: usize,
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for MfaTrainConfig {
    fn default() -> Self {
        Self {
            k: 50,
            latent: 6,
            lr: 1e-3,
            epochs: 50,
            batch: 64,
            seed: 0,
        }
    }
}

impl MfaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch == 0 || self.k == 0 {
            return Err(Error::Config("epochs, batch and k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MfaEpochRecord {
    pub epoch: usize,
    pub mean_nll: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct MfaTrainOutcome {
    pub model: MfaModel<f32>,
    /// Mean NLL of the initial model over the whole training set.
    pub initial_nll: f64,
    pub trace: Vec<MfaEpochRecord>,
}

/// Unconstrained training parameters: logits, means, factors and
/// `ρ` with `d = softplus(ρ) + 1e-6`.
struct MfaParams {
    k: usize,
    n: usize,
    l: usize,
}

impl MfaParams {
    fn len(&self) -> usize {
        self.k * (1 + self.n * (self.l + 2))
    }
    fn mean_off(&self, i: usize) -> usize {
        self.k + i * self.n
    }
    fn factor_off(&self, i: usize) -> usize {
        self.k + self.k * self.n + i * self.n * self.l
    }
    fn rho_off(&self, i: usize) -> usize {
        self.k + self.k * self.n * (1 + self.l) + i * self.n
    }

    fn pack(&self, model: &MfaModel<f32>) -> Vec<f32> {
        let mut p = vec![0.0f32; self.len()];
        p[..self.k].copy_from_slice(model.log_weights());
        for (i, c) in model.components().iter().enumerate() {
            p[self.mean_off(i)..self.mean_off(i) + self.n].copy_from_slice(c.mean());
            p[self.factor_off(i)..self.factor_off(i) + self.n * self.l].copy_from_slice(c.factors());
            for (r, &d) in p[self.rho_off(i)..self.rho_off(i) + self.n].iter_mut().zip(c.noise()) {
                *r = scalar::softplus_inv((d as f64 - NOISE_FLOOR).max(1e-12)) as f32;
            }
        }
        p
    }

    fn unpack(&self, p: &[f32]) -> Result<MfaModel<f32>> {
        let components = (0..self.k)
            .map(|i| {
                let noise = p[self.rho_off(i)..self.rho_off(i) + self.n]
                    .iter()
                    .map(|&r| scalar::softplus(r) + NOISE_FLOOR as f32)
                    .collect();
                FactorGaussian::new(
                    p[self.mean_off(i)..self.mean_off(i) + self.n].to_vec(),
                    p[self.factor_off(i)..self.factor_off(i) + self.n * self.l].to_vec(),
                    noise,
                    self.l,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        MfaModel::from_unnormalized(p[..self.k].to_vec(), components)
    }
}

struct Prepared<'a> {
    model: &'a MfaModel<f32>,
    woodbury: Vec<Woodbury<f32>>,
    prec_a: Vec<Vec<f32>>,
    prec_diag: Vec<Vec<f32>>,
}

impl<'a> Prepared<'a> {
    fn new(model: &'a MfaModel<f32>, with_grad: bool) -> Result<Self> {
        let woodbury = model
            .components()
            .iter()
            .map(|c| c.factorize())
            .collect::<Result<Vec<_>>>()?;
        let (prec_a, prec_diag) = if with_grad {
            model
                .components()
                .iter()
                .zip(&woodbury)
                .map(|(c, wb)| (wb.precision_factors(c.factors()), wb.precision_diag(c.factors())))
                .unzip()
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Self {
            model,
            woodbury,
            prec_a,
            prec_diag,
        })
    }

    /// Per-component `log pᵢ + log Nᵢ(x)` and the mixture log-density.
    fn joint(&self, x: &[f32]) -> (Vec<f32>, f32) {
        let joint: Vec<f32> = self
            .model
            .components()
            .iter()
            .zip(&self.woodbury)
            .zip(self.model.log_weights())
            .map(|((c, wb), &lw)| lw + c.log_density_with(wb, x))
            .collect();
        let lse = scalar::log_sum_exp(&joint);
        (joint, lse)
    }
}

fn mean_nll(prep: &Prepared<'_>, data: &Dataset) -> f64 {
    let per: Vec<f64> = data
        .samples()
        .par_iter()
        .map(|x| -(prep.joint(x).1 as f64))
        .collect();
    per.iter().sum::<f64>() / data.count().max(1) as f64
}

/// Samples per gradient work unit. Fixed so the reduction order, and hence
/// the result, does not depend on the number of threads.
const GRAD_CHUNK: usize = 8;

/// Returns the summed NLL over `batch` and writes the gradient of the mean
/// NLL with respect to the packed parameters into `grad`.
fn batch_gradient(
    layout: &MfaParams,
    params: &[f32],
    data: &Dataset,
    batch: &[usize],
    grad: &mut [f32],
) -> Result<f64> {
    let model = layout.unpack(params)?;
    let prep = Prepared::new(&model, true)?;
    let (k, n, l) = (layout.k, layout.n, layout.l);
    let scale = 1.0 / batch.len() as f32;

    let partials: Vec<(f64, Vec<f32>, Vec<FactorGrad<f32>>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut nll = 0.0f64;
            let mut dlogit = vec![0.0f32; k];
            let mut grads: Vec<FactorGrad<f32>> = (0..k).map(|_| FactorGrad::zeros(n, l)).collect();
            for &s in chunk {
                let x = data.sample(s);
                let (joint, lse) = prep.joint(x);
                nll -= lse as f64;
                for i in 0..k {
                    let resp = (joint[i] - lse).exp();
                    dlogit[i] += scale * (model.log_weights()[i].exp() - resp);
                    if resp == 0.0 {
                        continue;
                    }
                    accumulate_nll_gradient(
                        model.component(i),
                        &prep.woodbury[i],
                        &prep.prec_a[i],
                        &prep.prec_diag[i],
                        x,
                        scale * resp,
                        &mut grads[i],
                    );
                }
            }
            (nll, dlogit, grads)
        })
        .collect();

    grad.fill(0.0);
    let mut total = 0.0f64;
    for (nll, dlogit, grads) in partials {
        total += nll;
        for (g, d) in grad[..k].iter_mut().zip(&dlogit) {
            *g += d;
        }
        for (i, fg) in grads.iter().enumerate() {
            let mo = layout.mean_off(i);
            for (g, d) in grad[mo..mo + n].iter_mut().zip(&fg.mean) {
                *g += d;
            }
            let fo = layout.factor_off(i);
            for (g, d) in grad[fo..fo + n * l].iter_mut().zip(&fg.factors) {
                *g += d;
            }
            let ro = layout.rho_off(i);
            for (g, d) in grad[ro..ro + n].iter_mut().zip(&fg.noise) {
                *g += d;
            }
        }
    }
    // ∂d/∂ρ = sigmoid(ρ)
    for i in 0..k {
        let ro = layout.rho_off(i);
        for j in ro..ro + n {
            grad[j] *= scalar::sigmoid(params[j]);
        }
    }
    Ok(total)
}

/// Trains from [`init_mfa`] with seed `config.seed`.
pub fn train_mfa(data: &Dataset, config: &MfaTrainConfig) -> Result<MfaTrainOutcome> {
    config.validate()?;
    let mut rng = sample_rng(config.seed, 0, u64::MAX - 1);
    let init = init_mfa(data, config.k, config.latent, &mut rng)?;
    train_mfa_from(data, init, config)
}

pub fn train_mfa_from(data: &Dataset, init: MfaModel<f32>, config: &MfaTrainConfig) -> Result<MfaTrainOutcome> {
    config.validate()?;
    if init.dim() != data.shape().len() {
        return Err(Error::Shape(format!(
            "model dimension {} does not match data dimension {}",
            init.dim(),
            data.shape().len()
        )));
    }
    let layout = MfaParams {
        k: init.k(),
        n: init.dim(),
        l: init.latent(),
    };
    let mut params = layout.pack(&init);
    let initial_model = layout.unpack(&params)?;
    let initial_nll = mean_nll(&Prepared::new(&initial_model, false)?, data);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), params.len());
    let mut grad = vec![0.0f32; params.len()];
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.count()).collect();

    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut sample_rng(config.seed, epoch as u64, u64::MAX));
        let mut total = 0.0f64;
        for batch in order.chunks(config.batch) {
            let nll = batch_gradient(&layout, &params, data, batch, &mut grad)
                .map_err(|e| Error::Diverged {
                    epoch,
                    reason: e.to_string(),
                })?;
            if !nll.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("non-finite loss or gradient (batch NLL sum {nll})"),
                });
            }
            total += nll;
            adam.update(&mut params, &grad);
        }
        trace.push(MfaEpochRecord {
            epoch,
            mean_nll: total / data.count() as f64,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let model = layout.unpack(&params).map_err(|e| Error::Diverged {
        epoch: config.epochs,
        reason: e.to_string(),
    })?;
    Ok(MfaTrainOutcome {
        model,
        initial_nll,
        trace,
    })
}

/// Mean full-data NLL of `model` on `data`.
pub fn dataset_nll(model: &MfaModel<f32>, data: &Dataset) -> Result<f64> {
    Ok(mean_nll(&Prepared::new(model, false)?, data))
}
