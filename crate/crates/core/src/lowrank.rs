//! Gaussians with covariance `Σ = A Aᵀ + diag(d)`.
//!
//! Every operation here costs `O(n·l²)`: inverses go through the Woodbury
//! identity and determinants through the matrix determinant lemma, so the
//! only matrix ever factorized is the `l × l` capacitance matrix
//! `M = I + Aᵀ D⁻¹ A`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::{self, Real};
use crate::tensorio::{Container, Tensor};

/// Mean `μ`, factor loadings `A` (`n × l`, row-major) and diagonal noise
/// variances `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGaussian<T> {
    mean: Vec<T>,
    factors: Vec<T>,
    noise: Vec<T>,
    latent: usize,
}

impl<T: Real> FactorGaussian<T> {
    pub fn new(mean: Vec<T>, factors: Vec<T>, noise: Vec<T>, latent: usize) -> Result<Self> {
        let n = mean.len();
        if noise.len() != n || factors.len() != n * latent {
            return Err(Error::Shape(format!(
                "factor Gaussian with n={n}, l={latent} needs {} factor entries and {n} noise entries, got {} and {}",
                n * latent,
                factors.len(),
                noise.len()
            )));
        }
        if let Some(bad) = mean.iter().chain(&factors).find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite mean or factor entry {bad}"
            )));
        }
        if let Some(bad) = noise.iter().find(|&&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "noise variances must be finite and positive, got {bad}"
            )));
        }
        Ok(Self {
            mean,
            factors,
            noise,
            latent,
        })
    }

    /// Independent coordinates (`l = 0`).
    pub fn diagonal(mean: Vec<T>, noise: Vec<T>) -> Result<Self> {
        Self::new(mean, Vec::new(), noise, 0)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    /// Row-major `n × l` loading matrix.
    pub fn factors(&self) -> &[T] {
        &self.factors
    }

    pub fn noise(&self) -> &[T] {
        &self.noise
    }

    pub fn factor_row(&self, i: usize) -> &[T] {
        &self.factors[i * self.latent..(i + 1) * self.latent]
    }

    pub fn into_parts(self) -> (Vec<T>, Vec<T>, Vec<T>, usize) {
        (self.mean, self.factors, self.noise, self.latent)
    }

    pub fn cast<U: Real>(&self) -> FactorGaussian<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        FactorGaussian {
            mean: conv(&self.mean),
            factors: conv(&self.factors),
            noise: conv(&self.noise),
            latent: self.latent,
        }
    }

    pub fn factorize(&self) -> Result<Woodbury<T>> {
        Woodbury::new(&self.factors, &self.noise, self.latent)
    }

    /// `log det Σ = Σᵢ log dᵢ + log det(I + Aᵀ D⁻¹ A)`.
    pub fn log_det_sigma(&self) -> Result<T> {
        Ok(self.factorize()?.log_det())
    }

    pub fn log_density(&self, x: &[T]) -> Result<T> {
        self.check_point(x)?;
        let wb = self.factorize()?;
        Ok(self.log_density_with(&wb, x))
    }

    pub(crate) fn log_density_with(&self, wb: &Woodbury<T>, x: &[T]) -> T {
        let r: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &b)| a - b).collect();
        let q = wb.quad(&self.factors, &r);
        -T::of(0.5) * (T::of(self.dim() as f64) * scalar::ln_2pi() + wb.log_det() + q)
    }

    /// `count` draws of `μ + A z + √d ⊙ ε`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<Vec<T>> {
        let (n, l) = (self.dim(), self.latent);
        (0..count)
            .map(|_| {
                let z: Vec<T> = (0..l)
                    .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                (0..n)
                    .map(|i| {
                        let eps = T::of(rng.sample::<f64, _>(StandardNormal));
                        let az: T = self.factor_row(i).iter().zip(&z).map(|(&a, &b)| a * b).sum();
                        self.mean[i] + az + self.noise[i].sqrt() * eps
                    })
                    .collect()
            })
            .collect()
    }

    /// Marginal over the coordinates in `idx` (strictly increasing, in range).
    pub fn restrict(&self, idx: &[usize]) -> Result<Self> {
        check_index_set(idx, self.dim())?;
        let l = self.latent;
        let mut factors = Vec::with_capacity(idx.len() * l);
        for &i in idx {
            factors.extend_from_slice(self.factor_row(i));
        }
        Ok(Self {
            mean: idx.iter().map(|&i| self.mean[i]).collect(),
            factors,
            noise: idx.iter().map(|&i| self.noise[i]).collect(),
            latent: l,
        })
    }

    /// Negative log-density at `x` and its gradient with respect to
    /// `(μ, A, d)`.
    pub fn nll_and_gradient(&self, x: &[T]) -> Result<(T, FactorGrad<T>)> {
        self.check_point(x)?;
        let wb = self.factorize()?;
        let mut grad = FactorGrad::zeros(self.dim(), self.latent);
        let nll = -self.log_density_with(&wb, x);
        let prec_a = wb.precision_factors(&self.factors);
        let prec_diag = wb.precision_diag(&self.factors);
        accumulate_nll_gradient(self, &wb, &prec_a, &prec_diag, x, T::one(), &mut grad);
        Ok((nll, grad))
    }

    fn check_point(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "point has length {}, Gaussian has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("point has non-finite entries".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_index_set(idx: &[usize], n: usize) -> Result<()> {
    for (k, &i) in idx.iter().enumerate() {
        if i >= n {
            return Err(Error::Index(format!("index {i} out of range for dimension {n}")));
        }
        if k > 0 && idx[k - 1] >= i {
            return Err(Error::Index(format!(
                "indices must be strictly increasing, found {} before {i}",
                idx[k - 1]
            )));
        }
    }
    Ok(())
}

/// Gradient of a scalar with respect to the parameters of a
/// [`FactorGaussian`].
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrad<T> {
    pub mean: Vec<T>,
    pub factors: Vec<T>,
    pub noise: Vec<T>,
}

impl<T: Real> FactorGrad<T> {
    pub fn zeros(n: usize, l: usize) -> Self {
        Self {
            mean: vec![T::zero(); n],
            factors: vec![T::zero(); n * l],
            noise: vec![T::zero(); n],
        }
    }
}

/// Adds `weight · ∇ NLL(x)` to `grad`, where for `v = Σ⁻¹(x − μ)`:
/// `∂μ = −v`, `∂A = Σ⁻¹A − v (vᵀA)`, `∂d = ½(diag Σ⁻¹ − v²)`.
///
/// `prec_a` and `prec_diag` depend only on the Gaussian and are passed in so
/// callers evaluating many points against one Gaussian compute them once.
pub(crate) fn accumulate_nll_gradient<T: Real>(
    g: &FactorGaussian<T>,
    wb: &Woodbury<T>,
    prec_a: &[T],
    prec_diag: &[T],
    x: &[T],
    weight: T,
    grad: &mut FactorGrad<T>,
) {
    let (n, l) = (g.dim(), g.latent);
    let r: Vec<T> = x.iter().zip(&g.mean).map(|(&a, &b)| a - b).collect();
    let v = wb.solve(&g.factors, &r);
    let mut vt_a = vec![T::zero(); l];
    for i in 0..n {
        for (acc, &a) in vt_a.iter_mut().zip(g.factor_row(i)) {
            *acc += v[i] * a;
        }
    }
    let half = T::of(0.5);
    for i in 0..n {
        grad.mean[i] -= weight * v[i];
        grad.noise[i] += weight * half * (prec_diag[i] - v[i] * v[i]);
        let row = &mut grad.factors[i * l..(i + 1) * l];
        for k in 0..l {
            row[k] += weight * (prec_a[i * l + k] - v[i] * vt_a[k]);
        }
    }
}

/// Cholesky factor of the capacitance matrix `M = I + Aᵀ D⁻¹ A` together
/// with `D⁻¹`, enough to apply `Σ⁻¹` and evaluate `log det Σ`.
#[derive(Debug, Clone)]
pub struct Woodbury<T> {
    inv_noise: Vec<T>,
    chol: Vec<T>,
    latent: usize,
    log_det: T,
}

impl<T: Real> Woodbury<T> {
    pub fn new(factors: &[T], noise: &[T], latent: usize) -> Result<Self> {
        let n = noise.len();
        let l = latent;
        let inv_noise: Vec<T> = noise.iter().map(|&d| T::one() / d).collect();
        let mut m = vec![T::zero(); l * l];
        for i in 0..n {
            let row = &factors[i * l..(i + 1) * l];
            let w = inv_noise[i];
            for p in 0..l {
                let ap = row[p] * w;
                for q in 0..=p {
                    m[p * l + q] += ap * row[q];
                }
            }
        }
        for p in 0..l {
            m[p * l + p] += T::one();
            for q in 0..p {
                m[q * l + p] = m[p * l + q];
            }
        }
        scalar::cholesky_in_place(&mut m, l)?;
        let mut log_det: T = noise.iter().map(|d| d.ln()).sum();
        for p in 0..l {
            log_det += T::of(2.0) * m[p * l + p].ln();
        }
        if !log_det.is_finite() {
            return Err(Error::Numerical(format!("log-determinant is {log_det}")));
        }
        Ok(Self {
            inv_noise,
            chol: m,
            latent: l,
            log_det,
        })
    }

    pub fn log_det(&self) -> T {
        self.log_det
    }

    /// Lower Cholesky factor `L` of `M = L Lᵀ` (row-major `l × l`).
    pub fn capacitance_cholesky(&self) -> &[T] {
        &self.chol
    }

    /// `w = Aᵀ D⁻¹ r`.
    pub(crate) fn project(&self, factors: &[T], r: &[T]) -> Vec<T> {
        let l = self.latent;
        let mut w = vec![T::zero(); l];
        for (i, (&ri, &inv)) in r.iter().zip(&self.inv_noise).enumerate() {
            let s = ri * inv;
            for (acc, &a) in w.iter_mut().zip(&factors[i * l..(i + 1) * l]) {
                *acc += s * a;
            }
        }
        w
    }

    /// `rᵀ Σ⁻¹ r = rᵀ D⁻¹ r − ‖L⁻¹ Aᵀ D⁻¹ r‖²`.
    pub fn quad(&self, factors: &[T], r: &[T]) -> T {
        let mut y = self.project(factors, r);
        scalar::forward_sub(&self.chol, self.latent, &mut y);
        let diag: T = r.iter().zip(&self.inv_noise).map(|(&a, &w)| a * a * w).sum();
        diag - y.iter().map(|&v| v * v).sum::<T>()
    }

    /// `Σ⁻¹ r = D⁻¹ r − D⁻¹ A M⁻¹ Aᵀ D⁻¹ r`.
    pub fn solve(&self, factors: &[T], r: &[T]) -> Vec<T> {
        let l = self.latent;
        let mut y = self.project(factors, r);
        scalar::cholesky_solve(&self.chol, l, &mut y);
        r.iter()
            .zip(&self.inv_noise)
            .enumerate()
            .map(|(i, (&ri, &inv))| {
                let ay: T = factors[i * l..(i + 1) * l]
                    .iter()
                    .zip(&y)
                    .map(|(&a, &b)| a * b)
                    .sum();
                inv * (ri - ay)
            })
            .collect()
    }

    /// `Σ⁻¹ A = D⁻¹ A M⁻¹` (row-major `n × l`).
    pub fn precision_factors(&self, factors: &[T]) -> Vec<T> {
        let l = self.latent;
        let mut out = factors.to_vec();
        if l == 0 {
            return out;
        }
        for (row, &inv) in out.chunks_exact_mut(l).zip(&self.inv_noise) {
            // M is symmetric, so row·M⁻¹ is the transpose of M⁻¹·rowᵀ.
            scalar::cholesky_solve(&self.chol, l, row);
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        out
    }

    /// `diag(Σ⁻¹)ᵢ = 1/dᵢ − ‖L⁻¹ aᵢ‖² / dᵢ²`.
    pub fn precision_diag(&self, factors: &[T]) -> Vec<T> {
        let l = self.latent;
        let mut buf = vec![T::zero(); l];
        self.inv_noise
            .iter()
            .enumerate()
            .map(|(i, &inv)| {
                buf.copy_from_slice(&factors[i * l..(i + 1) * l]);
                scalar::forward_sub(&self.chol, l, &mut buf);
                let s: T = buf.iter().map(|&v| v * v).sum();
                inv - s * inv * inv
            })
            .collect()
    }
}

impl FactorGaussian<f32> {
    /// Tensors `mean [n]`, `factors [n, l]`, `noise [n]`.
    pub fn to_container(&self, mut meta: serde_json::Value) -> Container {
        let (n, l) = (self.dim(), self.latent);
        if !meta.is_object() {
            meta = serde_json::json!({});
        }
        meta["model"] = serde_json::json!("factor-gaussian");
        Container::new(
            vec![
                Tensor::new("mean", vec![n], self.mean.clone()),
                Tensor::new("factors", vec![n, l], self.factors.clone()),
                Tensor::new("noise", vec![n], self.noise.clone()),
            ],
            meta,
        )
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mean = c.get("mean")?;
        let factors = c.get("factors")?;
        let noise = c.get("noise")?;
        let l = match factors.shape[..] {
            [n, l] if mean.shape == [n] && noise.shape == [n] => l,
            _ => return Err(Error::Format("factor Gaussian tensors have inconsistent shapes".into())),
        };
        Self::new(mean.data.clone(), factors.data.clone(), noise.data.clone(), l)
    }
}
