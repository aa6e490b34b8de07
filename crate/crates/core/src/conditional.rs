//! Closed-form conditionals `p(x_m | x_o)` of factor Gaussians and their
//! mixtures.
//!
//! With `o` the observed and `m` the missing coordinates, `B = A_oᵀ D_o⁻¹ A_o`
//! and `M = I + B = L Lᵀ`, the Schur-complement formulas
//!
//! ```text
//! μ̂ = μ_m + Σ_mo Σ_oo⁻¹ (x_o − μ_o)
//! Σ̂ = Σ_mm − Σ_mo Σ_oo⁻¹ Σ_om
//! ```
//!
//! collapse (because `Σ_mo = A_m A_oᵀ` and `A_oᵀ Σ_oo⁻¹ A_o = I − M⁻¹`) to
//!
//! ```text
//! μ̂ = μ_m + A_m M⁻¹ A_oᵀ D_o⁻¹ (x_o − μ_o)
//! Σ̂ = A_m M⁻¹ A_mᵀ + D_m = (A_m L⁻ᵀ)(A_m L⁻ᵀ)ᵀ + D_m
//! ```
//!
//! so the conditional is again a factor Gaussian with `l` factors and noise
//! `d_m`, computed in `O(n·l²)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{FactorGaussian, Woodbury};
use crate::mfa::MfaModel;
use crate::scalar::{self, Real};

/// Partition of `{0, …, n−1}` into observed and missing coordinates, both
/// sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndex {
    observed: Vec<usize>,
    missing: Vec<usize>,
}

impl SplitIndex {
    pub fn from_mask(missing: &[bool]) -> Self {
        let (mut observed, mut miss) = (Vec::new(), Vec::new());
        for (i, &m) in missing.iter().enumerate() {
            if m {
                miss.push(i);
            } else {
                observed.push(i);
            }
        }
        Self {
            observed,
            missing: miss,
        }
    }

    /// Builds the split from the set of missing indices.
    pub fn from_missing(n: usize, missing: &[usize]) -> Result<Self> {
        crate::lowrank::check_index_set(missing, n)?;
        let mut bits = vec![false; n];
        for &i in missing {
            bits[i] = true;
        }
        Ok(Self::from_mask(&bits))
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn missing(&self) -> &[usize] {
        &self.missing
    }

    pub fn dim(&self) -> usize {
        self.observed.len() + self.missing.len()
    }

    pub fn gather_observed<T: Copy>(&self, x: &[T]) -> Vec<T> {
        self.observed.iter().map(|&i| x[i]).collect()
    }

    pub fn gather_missing<T: Copy>(&self, x: &[T]) -> Vec<T> {
        self.missing.iter().map(|&i| x[i]).collect()
    }

    /// Inverse of the two gathers.
    pub fn scatter<T: Copy + Default>(&self, x_o: &[T], x_m: &[T]) -> Result<Vec<T>> {
        if x_o.len() != self.observed.len() || x_m.len() != self.missing.len() {
            return Err(Error::Shape(format!(
                "scatter needs {} observed and {} missing values, got {} and {}",
                self.observed.len(),
                self.missing.len(),
                x_o.len(),
                x_m.len()
            )));
        }
        let mut x = vec![T::default(); self.dim()];
        for (&i, &v) in self.observed.iter().zip(x_o) {
            x[i] = v;
        }
        for (&i, &v) in self.missing.iter().zip(x_m) {
            x[i] = v;
        }
        Ok(x)
    }
}

/// A conditional Gaussian together with the marginal log-density of the
/// observed part, `log N(μ_o, Σ_oo)(x_o)`.
#[derive(Debug, Clone)]
pub struct Conditioned<T> {
    pub gaussian: FactorGaussian<T>,
    pub log_evidence: T,
}

fn check_split<T>(g: &FactorGaussian<T>, x_o: &[T], split: &SplitIndex) -> Result<()>
where
    T: Real,
{
    if split.dim() != g.dim() {
        return Err(Error::Shape(format!(
            "split covers {} coordinates, Gaussian has {}",
            split.dim(),
            g.dim()
        )));
    }
    if split.observed.is_empty() {
        return Err(Error::EmptyObserved);
    }
    if split.missing.is_empty() {
        return Err(Error::EmptyMask);
    }
    if x_o.len() != split.observed.len() {
        return Err(Error::Shape(format!(
            "{} observed values for {} observed coordinates",
            x_o.len(),
            split.observed.len()
        )));
    }
    Ok(())
}

pub fn condition<T: Real>(
    g: &FactorGaussian<T>,
    x_o: &[T],
    split: &SplitIndex,
) -> Result<Conditioned<T>> {
    check_split(g, x_o, split)?;
    let l = g.latent();
    let obs = g.restrict(&split.observed)?;
    let wb: Woodbury<T> = obs.factorize()?;
    let chol = wb.capacitance_cholesky();

    let r: Vec<T> = x_o.iter().zip(obs.mean()).map(|(&a, &b)| a - b).collect();
    let log_evidence = obs.log_density_with(&wb, x_o);

    // M⁻¹ Aᵀ D⁻¹ r
    let mut shift = wb.project(obs.factors(), &r);
    scalar::cholesky_solve(chol, l, &mut shift);

    let mut mean = Vec::with_capacity(split.missing.len());
    let mut factors = Vec::with_capacity(split.missing.len() * l);
    let mut noise = Vec::with_capacity(split.missing.len());
    let mut row = vec![T::zero(); l];
    for &i in &split.missing {
        let a = g.factor_row(i);
        let s: T = a.iter().zip(&shift).map(|(&x, &y)| x * y).sum();
        mean.push(g.mean()[i] + s);
        // (a L⁻ᵀ)ᵀ = L⁻¹ aᵀ
        row.copy_from_slice(a);
        scalar::forward_sub(chol, l, &mut row);
        factors.extend_from_slice(&row);
        noise.push(g.noise()[i]);
    }
    Ok(Conditioned {
        gaussian: FactorGaussian::new(mean, factors, noise, l)?,
        log_evidence,
    })
}

pub fn conditional_gaussian<T: Real>(
    g: &FactorGaussian<T>,
    x_o: &[T],
    split: &SplitIndex,
) -> Result<FactorGaussian<T>> {
    Ok(condition(g, x_o, split)?.gaussian)
}

/// Component-wise conditionals reweighted by how well each component explains
/// the observed part: `p̂ᵢ ∝ pᵢ · N(μ_{i,o}, Σ_{i,oo})(x_o)`.
pub fn conditional_mixture<T: Real>(
    mix: &MfaModel<T>,
    x_o: &[T],
    split: &SplitIndex,
) -> Result<MfaModel<T>> {
    let mut log_weights = Vec::with_capacity(mix.k());
    let mut components = Vec::with_capacity(mix.k());
    for (lw, comp) in mix.log_weights().iter().zip(mix.components()) {
        let c = condition(comp, x_o, split)?;
        log_weights.push(*lw + c.log_evidence);
        components.push(c.gaussian);
    }
    MfaModel::from_unnormalized(log_weights, components)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Imputation {
    /// Mean of the most probable component (lowest index on ties).
    TopComponent,
    /// `Σᵢ p̂ᵢ μ̂ᵢ`.
    MixtureMean,
}

impl std::fmt::Display for Imputation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Imputation::TopComponent => "top-component",
            Imputation::MixtureMean => "mixture-mean",
        })
    }
}

pub fn mixture_imputation<T: Real>(mix: &MfaModel<T>, mode: Imputation) -> Vec<T> {
    match mode {
        Imputation::TopComponent => mix.component(mix.top_component()).mean().to_vec(),
        Imputation::MixtureMean => {
            let mut out = vec![T::zero(); mix.dim()];
            for (w, c) in mix.weights().iter().zip(mix.components()) {
                for (o, &m) in out.iter_mut().zip(c.mean()) {
                    *o += *w * m;
                }
            }
            out
        }
    }
}
