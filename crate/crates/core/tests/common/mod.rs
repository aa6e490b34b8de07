//! Dense reference implementations and random instance generators shared by
//! the integration tests and the acceptance suite.

#![allow(dead_code)]

use dmfa_core::lowrank::FactorGaussian;
use dmfa_core::{MfaModel, SplitIndex};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// `|a − b| ≤ tol · max(|b|, 1)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Mean `N(0, 1)`, factors `N(0, 1)`, noise uniform in `[0.1, 2]`.
pub fn random_fa<R: Rng + ?Sized>(rng: &mut R, n: usize, l: usize) -> FactorGaussian<f64> {
    let mean = (0..n).map(|_| normal(rng)).collect();
    let factors = (0..n * l).map(|_| normal(rng)).collect();
    let noise = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
    FactorGaussian::new(mean, factors, noise, l).unwrap()
}

pub fn random_mixture<R: Rng + ?Sized>(rng: &mut R, k: usize, n: usize, l: usize) -> MfaModel<f64> {
    let lw = (0..k).map(|_| normal(rng)).collect();
    let comps = (0..k).map(|_| random_fa(rng, n, l)).collect();
    MfaModel::from_unnormalized(lw, comps).unwrap()
}

pub fn random_point<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| 2.0 * normal(rng)).collect()
}

/// A split with `observed` observed coordinates chosen at random.
pub fn random_split<R: Rng + ?Sized>(rng: &mut R, n: usize, observed: usize) -> SplitIndex {
    let obs = rand::seq::index::sample(rng, n, observed).into_vec();
    let missing: Vec<usize> = (0..n).filter(|i| !obs.contains(i)).collect();
    SplitIndex::from_missing(n, &missing).unwrap()
}

pub fn covariance(g: &FactorGaussian<f64>) -> DMatrix<f64> {
    let (n, l) = (g.dim(), g.latent());
    let a = DMatrix::from_row_slice(n, l, g.factors());
    &a * a.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(g.noise()))
}

/// `log det` from the eigenvalues of a symmetric matrix.
pub fn log_det(cov: &DMatrix<f64>) -> f64 {
    cov.clone().symmetric_eigen().eigenvalues.iter().map(|v| v.ln()).sum()
}

pub fn log_pdf(mean: &[f64], cov: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = mean.len();
    let r = DVector::from_iterator(n, x.iter().zip(mean).map(|(a, b)| a - b));
    let inv = cov.clone().try_inverse().expect("invertible covariance");
    let quad = (r.transpose() * inv * &r)[(0, 0)];
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det(cov) + quad)
}

pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn gather(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Schur-complement conditional `(mean, covariance, log p(x_o))`.
pub fn dense_conditional(mean: &[f64], cov: &DMatrix<f64>, split: &SplitIndex, x_o: &[f64]) -> (Vec<f64>, DMatrix<f64>, f64) {
    let (o, m) = (split.observed(), split.missing());
    let s_oo = submatrix(cov, o, o);
    let s_mo = submatrix(cov, m, o);
    let s_mm = submatrix(cov, m, m);
    let inv_oo = s_oo.clone().try_inverse().expect("invertible block");
    let mu_o = gather(mean, o);
    let r = DVector::from_iterator(o.len(), x_o.iter().zip(&mu_o).map(|(a, b)| a - b));
    let shift = &s_mo * &inv_oo * r;
    let cmean = gather(mean, m).iter().zip(shift.iter()).map(|(a, b)| a + b).collect();
    let ccov = s_mm - &s_mo * inv_oo * s_mo.transpose();
    (cmean, ccov, log_pdf(&mu_o, &s_oo, x_o))
}

/// Normalized conditional mixture weights by explicit Bayes reweighting.
pub fn dense_mixture_weights(mix: &MfaModel<f64>, split: &SplitIndex, x_o: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = mix
        .log_weights()
        .iter()
        .zip(mix.components())
        .map(|(lw, c)| {
            let cov = covariance(c);
            lw + log_pdf(&gather(c.mean(), split.observed()), &submatrix(&cov, split.observed(), split.observed()), x_o)
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logs.iter().map(|v| (v - max).exp()).sum();
    logs.iter().map(|v| (v - max).exp() / total).collect()
}

/// Maximum absolute entrywise difference scaled by `max(|b|, 1)`.
pub fn max_rel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// A mixture whose samples mostly fall inside `[0, 1]`: means in
/// `[0.35, 0.65]`, factor loadings of scale `factor_scale` and noise
/// standard deviation `noise_std`.
pub fn unit_box_mixture<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    n: usize,
    l: usize,
    factor_scale: f64,
    noise_std: f64,
) -> MfaModel<f64> {
    let comps = (0..k)
        .map(|_| {
            let mean = (0..n).map(|_| rng.random_range(0.35..0.65)).collect();
            let factors = (0..n * l).map(|_| factor_scale * normal(rng)).collect();
            FactorGaussian::new(mean, factors, vec![noise_std * noise_std; n], l).unwrap()
        })
        .collect();
    MfaModel::from_unnormalized(vec![0.0; k], comps).unwrap()
}

/// Draws from `mix`, rejecting points outside `[0, 1]`.
pub fn sample_unit_box<R: Rng + ?Sized>(mix: &MfaModel<f64>, rng: &mut R, count: usize) -> Vec<Vec<f32>> {
    let weights = mix.weights();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let x = mix.component(pick).sample(rng, 1).pop().unwrap();
        if x.iter().all(|v| (0.0..=1.0).contains(v)) {
            out.push(x.iter().map(|&v| v as f32).collect());
        }
    }
    out
}

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Full-covariance maximum-likelihood Gaussian `(mean, covariance)`.
pub fn gaussian_mle(samples: &[Vec<f32>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = samples[0].len();
    let count = samples.len() as f64;
    let mut mean = vec![0.0; n];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v as f64 / count;
        }
    }
    let mut cov = DMatrix::zeros(n, n);
    for s in samples {
        let r = DVector::from_iterator(n, s.iter().zip(&mean).map(|(&v, m)| v as f64 - m));
        cov += &r * r.transpose() / count;
    }
    (mean, cov)
}

pub mod grad {
    use dmfa_core::dmfa::{head_loss, ArchConfig, ArchKind, DmfaNetwork, LossMode};
    use dmfa_core::{apply_mask, random_patch_mask, ImageShape, MaskedSample};
    use rand::Rng;

    /// Small architectures for `side × side` single-channel inputs.
    pub fn toy_arch(kind: ArchKind, side: usize, latent: usize) -> ArchConfig {
        let widths = match (kind, side) {
            (ArchKind::ConvDense, _) => vec![3, 4],
            (ArchKind::FullConv, 6) => vec![4],
            (ArchKind::FullConv, _) => vec![3, 4],
            (ArchKind::Dense, _) => vec![12],
        };
        ArchConfig::new(kind, ImageShape::new(1, side, side), latent).with_widths(widths)
    }

    /// Random images in `[0, 1]` with a random `side/2` square patch missing.
    pub fn toy_samples<R: Rng + ?Sized>(rng: &mut R, shape: ImageShape, count: usize) -> Vec<MaskedSample> {
        let patch = shape.height / 2;
        (0..count)
            .map(|_| {
                let x: Vec<f32> = (0..shape.len()).map(|_| rng.random()).collect();
                let mask = random_patch_mask(shape, patch, patch, rng).unwrap();
                apply_mask(&x, &mask).unwrap()
            })
            .collect()
    }

    /// Batch-mean loss with network outputs in f32 and the head in f64.
    pub fn mean_loss(net: &DmfaNetwork, samples: &[&MaskedSample], mode: LossMode, w: f64) -> f64 {
        let (n, l) = (net.shape().len(), net.latent());
        let outs = net.outputs(samples).unwrap();
        let total: f64 = outs
            .iter()
            .zip(samples)
            .map(|(o, s)| {
                let o64: Vec<f64> = o.iter().map(|&v| v as f64).collect();
                let x_m: Vec<f64> = s.missing_values().iter().map(|&v| v as f64).collect();
                head_loss(&o64, n, l, &s.missing_indices(), &x_m, mode, w, false).unwrap().loss
            })
            .sum();
        total / samples.len() as f64
    }

    /// Reverse-mode gradient against central differences on `coords`
    /// randomly chosen parameters. Returns `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)`.
    pub fn relative_error<R: Rng + ?Sized>(
        net: &DmfaNetwork,
        samples: &[MaskedSample],
        mode: LossMode,
        coords: usize,
        h: f32,
        rng: &mut R,
    ) -> f64 {
        let refs: Vec<&MaskedSample> = samples.iter().collect();
        let analytic = net.loss_gradients(&refs, mode, 1.0).unwrap().grads;
        let picks = rand::seq::index::sample(rng, analytic.len(), coords.min(analytic.len()));
        let mut probe = net.clone();
        let (mut diff, mut norm_a, mut norm_f) = (0.0f64, 0.0f64, 0.0f64);
        for i in picks {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let up = mean_loss(&probe, &refs, mode, 1.0);
            probe.params_mut()[i] = orig - h;
            let down = mean_loss(&probe, &refs, mode, 1.0);
            probe.params_mut()[i] = orig;
            let step = (orig + h) as f64 - (orig - h) as f64;
            let fd = (up - down) / step;
            let g = analytic[i] as f64;
            diff += (g - fd).powi(2);
            norm_a += g * g;
            norm_f += fd * fd;
        }
        diff.sqrt() / norm_a.sqrt().max(norm_f.sqrt()).max(1e-12)
    }
}
